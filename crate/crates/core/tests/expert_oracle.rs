//! The expert forward pass against the straight-line reference.

#[path = "support/naive_expert.rs"]
mod naive_expert;

use actkit::expert::{expert_forward, ContextKV, ExpertConfig, ExpertWeights};
use actkit::rng::DetRng;
use naive_expert::{Naive, A, H};

fn small_config() -> ExpertConfig {
    ExpertConfig {
        layers: 2,
        width: 16,
        heads: 4,
        mlp_width: 40,
        time_dim: 16,
        kv_width: 12,
        rotary_base: 10_000.0,
        depth_gate: true,
    }
}

#[test]
fn forward_matches_naive_reference() {
    let cfg = small_config();
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let w = ExpertWeights::random(cfg, seed).unwrap();
        let ctx = ContextKV::synthetic(cfg.layers, 10, cfg.kv_width, 2..6, 2, 100 + seed).unwrap();
        let mut rng = DetRng::new(200 + seed);
        let x: Vec<f64> = (0..H * A).map(|_| rng.normal()).collect();
        let t = rng.uniform();
        let got = expert_forward(&x, t, &ctx, &w).unwrap();
        let want = Naive { w: &w, cfg }.forward(&x, t, &ctx);
        assert!(got.iter().any(|v| v.abs() > 1e-3), "degenerate output");
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-6, "max abs diff {worst:e}");
}

#[test]
fn forward_without_depth_gate_matches_when_no_depth_tokens() {
    let cfg = ExpertConfig {
        depth_gate: false,
        ..small_config()
    };
    let w = ExpertWeights::random(cfg, 42).unwrap();
    let ctx = ContextKV::synthetic(cfg.layers, 7, cfg.kv_width, 0..0, 1, 43).unwrap();
    let x = vec![0.25; H * A];
    let got = expert_forward(&x, 0.5, &ctx, &w).unwrap();
    let gated = ExpertWeights {
        config: ExpertConfig {
            depth_gate: true,
            ..cfg
        },
        ..w.clone()
    };
    assert_eq!(got, expert_forward(&x, 0.5, &ctx, &gated).unwrap());
    let want = Naive { w: &gated, cfg: gated.config }.forward(&x, 0.5, &ctx);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-6);
    }
}
