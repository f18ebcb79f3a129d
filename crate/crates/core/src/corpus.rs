//! Episode corpora, frame files and dataset mixtures.
//!
//! Episodes are stored one JSON object per line. Frames are binary PPM (`P6`)
//! rasters of exactly 320x320 pixels with an optional `<stem>.codes.json`
//! sidecar carrying the 100 depth codes of that frame.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth::{Raster, GRID_CELLS, MAX_DEPTH_CODE};
use crate::rng::DetRng;

pub const MAX_FPS: u32 = 30;
pub const FRAME_SIDE: usize = 320;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: line {line}: {source}")]
    Line {
        path: PathBuf,
        line: usize,
        #[source]
        source: Box<CorpusError>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    AbsoluteJoint,
    DeltaEndEffector,
}

impl ControlMode {
    /// Wording used in the control clause of robot prompts.
    pub fn describe(self) -> &'static str {
        match self {
            ControlMode::AbsoluteJoint => "absolute joint pose",
            ControlMode::DeltaEndEffector => "delta end-effector pose",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub id: String,
    pub fps: u32,
    pub control_mode: ControlMode,
    pub setup: String,
    pub task: String,
    pub steps: Vec<Step>,
}

impl Episode {
    pub fn action_dims(&self) -> usize {
        self.steps.first().map_or(0, |s| s.action.len())
    }

    pub fn state_dims(&self) -> usize {
        self.steps.first().map_or(0, |s| s.state.len())
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(1..=MAX_FPS).contains(&self.fps) {
            return Err(CorpusError::Schema(format!(
                "fps {} outside [1, {MAX_FPS}]",
                self.fps
            )));
        }
        let Some(first) = self.steps.first() else {
            return Err(CorpusError::Schema("episode has no steps".into()));
        };
        let (sd, ad) = (first.state.len(), first.action.len());
        for (i, step) in self.steps.iter().enumerate() {
            if step.state.len() != sd || step.action.len() != ad {
                return Err(CorpusError::Schema(format!(
                    "step {i}: state/action dims {}/{} differ from step 0 ({sd}/{ad})",
                    step.state.len(),
                    step.action.len()
                )));
            }
            if let Some(j) = step
                .state
                .iter()
                .chain(&step.action)
                .position(|v| !v.is_finite())
            {
                return Err(CorpusError::Data(format!(
                    "step {i}: non-finite value at position {j}"
                )));
            }
        }
        Ok(())
    }
}

/// Overflowing literals such as `1e999` are parse errors.
pub fn parse_episode_line(line: &str) -> Result<Episode, CorpusError> {
    let episode: Episode = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
        offset: byte_offset(line, e.line(), e.column()),
        message: e.to_string(),
    })?;
    episode.validate()?;
    Ok(episode)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    line_start + column.saturating_sub(1)
}

pub fn serialize_episode_line(episode: &Episode) -> String {
    serde_json::to_string(episode).expect("episode serialization is infallible")
}

pub fn read_episodes(path: &Path) -> Result<Vec<Episode>, CorpusError> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let episode = parse_episode_line(&line).map_err(|source| CorpusError::Line {
            path: path.to_path_buf(),
            line: i + 1,
            source: Box::new(source),
        })?;
        out.push(episode);
    }
    Ok(out)
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<(), CorpusError> {
    let mut buf = String::new();
    for ep in episodes {
        buf.push_str(&serialize_episode_line(ep));
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| CorpusError::io(path, e))
}

/// One camera frame plus its optional depth codes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub image: Raster,
    pub depth_codes: Option<Vec<u8>>,
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Raster, CorpusError> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments between header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        if start == pos {
            return Err(CorpusError::Format("truncated PPM header".into()));
        }
        fields.push(&bytes[start..pos]);
    }
    if fields[0] != b"P6" {
        return Err(CorpusError::Format(format!(
            "bad magic {:?}, expected P6",
            String::from_utf8_lossy(fields[0])
        )));
    }
    let num = |f: &[u8], what: &str| -> Result<usize, CorpusError> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CorpusError::Format(format!("invalid {what} in PPM header")))
    };
    let (w, h, maxval) = (
        num(fields[1], "width")?,
        num(fields[2], "height")?,
        num(fields[3], "maxval")?,
    );
    if w != FRAME_SIDE || h != FRAME_SIDE {
        return Err(CorpusError::Format(format!(
            "frame is {w}x{h}, expected {FRAME_SIDE}x{FRAME_SIDE}"
        )));
    }
    if maxval != 255 {
        return Err(CorpusError::Format(format!("maxval {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates the header from the payload
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(CorpusError::Format("missing header terminator".into()));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let expected = FRAME_SIDE * FRAME_SIDE * 3;
    if payload.len() != expected {
        return Err(CorpusError::Format(format!(
            "pixel payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    Ok(Raster::from_bytes(payload.to_vec()).expect("length checked above"))
}

pub fn encode_ppm(raster: &Raster) -> Vec<u8> {
    let mut out = format!("P6\n{FRAME_SIDE} {FRAME_SIDE}\n255\n").into_bytes();
    out.extend_from_slice(raster.bytes());
    out
}

pub fn codes_sidecar_path(frame_path: &Path) -> PathBuf {
    let stem = frame_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    frame_path.with_file_name(format!("{stem}.codes.json"))
}

pub fn parse_depth_codes(text: &str) -> Result<Vec<u8>, CorpusError> {
    let raw: Vec<i64> = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if raw.len() != GRID_CELLS {
        return Err(CorpusError::Data(format!(
            "expected {GRID_CELLS} depth codes, got {}",
            raw.len()
        )));
    }
    raw.iter()
        .enumerate()
        .map(|(i, &c)| {
            u8::try_from(c)
                .ok()
                .filter(|&c| c <= MAX_DEPTH_CODE)
                .ok_or_else(|| {
                    CorpusError::Data(format!("depth code {c} at cell {i} outside [0, 127]"))
                })
        })
        .collect()
}

pub fn read_frame(path: &Path) -> Result<FrameRecord, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    let image = parse_ppm(&bytes)?;
    let sidecar = codes_sidecar_path(path);
    let depth_codes = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| CorpusError::io(&sidecar, e))?;
        Some(parse_depth_codes(&text)?)
    } else {
        None
    };
    Ok(FrameRecord { image, depth_codes })
}

pub fn write_frame(path: &Path, frame: &FrameRecord) -> Result<(), CorpusError> {
    let mut file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    file.write_all(&encode_ppm(&frame.image))
        .map_err(|e| CorpusError::io(path, e))?;
    if let Some(codes) = &frame.depth_codes {
        let sidecar = codes_sidecar_path(path);
        let text = serde_json::to_string(codes).expect("codes serialize");
        fs::write(&sidecar, text).map_err(|e| CorpusError::io(&sidecar, e))?;
    }
    Ok(())
}

/// Frame files (`*.ppm`) of a directory in lexicographic file-name order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CorpusError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "ppm"))
        .collect();
    paths.sort();
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub path: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub entries: Vec<MixtureEntry>,
}

impl MixtureSpec {
    pub fn from_weights(weights: &[f64]) -> Self {
        Self {
            entries: weights
                .iter()
                .enumerate()
                .map(|(i, &weight)| MixtureEntry {
                    path: format!("dataset-{i}"),
                    weight,
                })
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        serde_json::from_str(text).map_err(|e| CorpusError::Parse {
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })
    }

    /// Weights rescaled to sum to one.
    pub fn normalized_weights(&self) -> Result<Vec<f64>, CorpusError> {
        if self.entries.is_empty() {
            return Err(CorpusError::Config("mixture has no entries".into()));
        }
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| !e.weight.is_finite() || e.weight < 0.0)
        {
            return Err(CorpusError::Config(format!(
                "weight {} for {} is not a nonnegative number",
                e.weight, e.path
            )));
        }
        let total: f64 = self.entries.iter().map(|e| e.weight).sum();
        if total <= 0.0 {
            return Err(CorpusError::Config("all mixture weights are zero".into()));
        }
        Ok(self.entries.iter().map(|e| e.weight / total).collect())
    }
}

/// Draws `n` dataset indices by inverse CDF over the cumulative weights.
pub fn sample_mixture(spec: &MixtureSpec, seed: u64, n: usize) -> Result<Vec<usize>, CorpusError> {
    let weights = spec.normalized_weights()?;
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cdf.push(acc);
    }
    let last_positive = weights
        .iter()
        .rposition(|&w| w > 0.0)
        .expect("normalized weights contain a positive entry");
    let mut rng = DetRng::new(seed);
    Ok((0..n)
        .map(|_| {
            let u = rng.uniform();
            // first bucket whose cumulative mass exceeds u; rounding in the
            // running sum can leave the total just under 1
            let idx = cdf.partition_point(|&c| c <= u);
            idx.min(last_positive)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(actions: &[&[f64]]) -> String {
        let steps: Vec<String> = actions
            .iter()
            .map(|a| format!(r#"{{"state":[0.0],"action":{:?}}}"#, a))
            .collect();
        format!(
            r#"{{"id":"ep","fps":30,"control_mode":"absolute-joint","setup":"s","task":"t","steps":[{}]}}"#,
            steps.join(",")
        )
    }

    #[test]
    fn parses_minimal_episode() {
        let ep = parse_episode_line(&line(&[&[0.0; 7]])).unwrap();
        assert_eq!(ep.fps, 30);
        assert_eq!(ep.action_dims(), 7);
        assert_eq!(ep.control_mode, ControlMode::AbsoluteJoint);
    }

    #[test]
    fn inconsistent_dims_name_the_step() {
        let seven = [0.0; 7];
        let six = [0.0; 6];
        let err = parse_episode_line(&line(&[&seven, &seven, &seven, &six])).unwrap_err();
        assert!(matches!(err, CorpusError::Schema(_)));
        assert!(err.to_string().contains("step 3"), "{err}");
    }

    #[test]
    fn malformed_json_reports_offset() {
        let text = r#"{"id": "x", "fps": 30,, }"#;
        match parse_episode_line(text).unwrap_err() {
            CorpusError::Parse { offset, .. } => assert_eq!(offset, 22),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overflowing_literal_is_parse_error() {
        let text = line(&[&[0.0; 2]]).replace("[0.0, 0.0]", "[1e999, 0.0]");
        match parse_episode_line(&text).unwrap_err() {
            CorpusError::Parse { message, .. } => assert!(message.contains("out of range")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_value_is_data_error() {
        let mut ep = parse_episode_line(&line(&[&[0.0; 2]])).unwrap();
        ep.steps[0].action[1] = f64::NAN;
        assert!(matches!(ep.validate(), Err(CorpusError::Data(_))));
    }

    #[test]
    fn fps_out_of_range_rejected() {
        let text = line(&[&[0.0]]).replace(r#""fps":30"#, r#""fps":31"#);
        assert!(matches!(
            parse_episode_line(&text).unwrap_err(),
            CorpusError::Schema(_)
        ));
    }

    #[test]
    fn ppm_roundtrip_and_errors() {
        let mut bytes = vec![0u8; FRAME_SIDE * FRAME_SIDE * 3];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = (i % 251) as u8;
        }
        let raster = Raster::from_bytes(bytes).unwrap();
        let encoded = encode_ppm(&raster);
        assert_eq!(parse_ppm(&encoded).unwrap(), raster);

        let wide = format!("P6\n321 320\n255\n").into_bytes();
        assert!(matches!(parse_ppm(&wide), Err(CorpusError::Format(_))));
        let p5 = format!("P5\n320 320\n255\n").into_bytes();
        assert!(matches!(parse_ppm(&p5), Err(CorpusError::Format(_))));
        assert!(parse_ppm(b"").is_err());
        assert!(parse_ppm(&encoded[..encoded.len() - 1]).is_err());
    }

    #[test]
    fn ppm_header_comments_allowed() {
        let mut bytes = b"P6\n# made by hand\n320 320\n255\n".to_vec();
        bytes.extend(std::iter::repeat(9u8).take(FRAME_SIDE * FRAME_SIDE * 3));
        let r = parse_ppm(&bytes).unwrap();
        assert!(r.bytes().iter().all(|&b| b == 9));
    }

    #[test]
    fn depth_codes_validated() {
        let ok = serde_json::to_string(&vec![127; 100]).unwrap();
        assert_eq!(parse_depth_codes(&ok).unwrap(), vec![127; 100]);
        let mut bad = vec![0i64; 100];
        bad[5] = 128;
        let err = parse_depth_codes(&serde_json::to_string(&bad).unwrap()).unwrap_err();
        assert!(matches!(err, CorpusError::Data(_)));
        bad[5] = -1;
        assert!(parse_depth_codes(&serde_json::to_string(&bad).unwrap()).is_err());
        assert!(parse_depth_codes("[1,2,3]").is_err());
    }

    #[test]
    fn mixture_single_dataset() {
        let spec = MixtureSpec::from_weights(&[1.0]);
        assert!(sample_mixture(&spec, 9, 1000).unwrap().iter().all(|&i| i == 0));
    }

    #[test]
    fn mixture_zero_weights_rejected() {
        let spec = MixtureSpec::from_weights(&[0.0, 0.0]);
        assert!(matches!(
            sample_mixture(&spec, 0, 3),
            Err(CorpusError::Config(_))
        ));
    }

    #[test]
    fn mixture_is_deterministic() {
        let spec = MixtureSpec::from_weights(&[0.5, 0.5]);
        assert_eq!(
            sample_mixture(&spec, 42, 2).unwrap(),
            sample_mixture(&spec, 42, 2).unwrap()
        );
    }

    #[test]
    fn zero_weight_dataset_never_drawn() {
        let spec = MixtureSpec::from_weights(&[0.2, 0.0, 0.8, 0.0]);
        let draws = sample_mixture(&spec, 1, 50_000).unwrap();
        assert!(draws.iter().all(|&i| i == 0 || i == 2));
    }
}
