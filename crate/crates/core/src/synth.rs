//! Deterministic synthetic corpora: smooth multi-sine joint trajectories
//! standing in for teleoperated episodes.

use crate::corpus::{ControlMode, Episode, Step};
use crate::normalize::ActionChunk;
use crate::rng::DetRng;

/// Smooth signal: offset plus three low-frequency sinusoids (< 1.5 Hz).
#[derive(Debug, Clone)]
struct Wave {
    offset: f64,
    parts: [(f64, f64, f64); 3],
}

impl Wave {
    fn random(rng: &mut DetRng) -> Self {
        let offset = 2.0 * rng.uniform() - 1.0;
        let mut parts = [(0.0, 0.0, 0.0); 3];
        for p in parts.iter_mut() {
            let amp = 0.05 + 0.45 * rng.uniform();
            let freq = 0.1 + 1.4 * rng.uniform();
            let phase = std::f64::consts::TAU * rng.uniform();
            *p = (amp, freq, phase);
        }
        Self { offset, parts }
    }

    fn at(&self, seconds: f64) -> f64 {
        self.offset
            + self
                .parts
                .iter()
                .map(|&(a, f, ph)| a * (std::f64::consts::TAU * f * seconds + ph).sin())
                .sum::<f64>()
    }
}

/// `len` steps of a smooth `dims`-wide trajectory sampled at `fps`.
pub fn smooth_trajectory(rng: &mut DetRng, fps: usize, len: usize, dims: usize) -> Vec<Vec<f64>> {
    let waves: Vec<Wave> = (0..dims).map(|_| Wave::random(rng)).collect();
    let start = 10.0 * rng.uniform();
    (0..len)
        .map(|i| {
            let t = start + i as f64 / fps as f64;
            waves.iter().map(|w| w.at(t)).collect()
        })
        .collect()
}

/// `n` independent one-second chunks of smooth motion.
pub fn smooth_chunks(seed: u64, n: usize, horizon: usize, dims: usize) -> Vec<ActionChunk> {
    let mut rng = DetRng::new(seed);
    (0..n)
        .map(|_| {
            let rows = smooth_trajectory(&mut rng, horizon, horizon, dims);
            ActionChunk::from_rows(&rows).expect("rectangular rows")
        })
        .collect()
}

/// A synthetic episode; the last action dimension is a binary gripper when
/// `with_gripper` is set.
pub fn synth_episode(
    rng: &mut DetRng,
    id: &str,
    fps: u32,
    len: usize,
    action_dims: usize,
    with_gripper: bool,
) -> Episode {
    let traj = smooth_trajectory(rng, fps as usize, len, action_dims);
    let flip = 1 + rng.below(len as u64) as usize;
    let steps = traj
        .into_iter()
        .enumerate()
        .map(|(i, mut action)| {
            if with_gripper {
                *action.last_mut().expect("non-empty action") = if i < flip { 0.0 } else { 1.0 };
            }
            let state = action.iter().map(|a| 0.9 * a).collect();
            Step { state, action }
        })
        .collect();
    Episode {
        id: id.to_string(),
        fps,
        control_mode: ControlMode::AbsoluteJoint,
        setup: "bimanual yam robotic arms at a kitchen counter".into(),
        task: "put the red mug on the tray".into(),
        steps,
    }
}

pub fn synth_corpus(seed: u64, episodes: usize, fps: u32, len: usize, dims: usize) -> Vec<Episode> {
    let mut rng = DetRng::new(seed);
    (0..episodes)
        .map(|i| synth_episode(&mut rng, &format!("ep-{i:05}"), fps, len, dims, true))
        .collect()
}
