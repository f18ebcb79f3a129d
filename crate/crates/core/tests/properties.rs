use std::sync::OnceLock;

use actkit::bpe::{bpe_train, BpeTrainConfig, BpeVocab};
use actkit::codec::{
    deserialize_coeffs, read_varint, serialize_coeffs, unzigzag, write_varint, zigzag,
};
use actkit::dct::{dct_forward, dct_inverse, DctPlan};
use actkit::depth::{
    adaptive_fill, buffer_update, plan_schedule, simulate_savings, CacheState, DepthGrid,
    LatencyModel, Raster, SpanKind, UpdateMask, GRID_CELLS,
};
use actkit::flow::{make_samples, masked_flow_loss};
use actkit::normalize::{pad_chunk, ActionChunk, NormStats, GRID_LEN};
use actkit::packing::{solve_pack, PackConstraints, PackExample};
use actkit::prompt::{parse_response, render_response, ParsedResponse, SpecialTokenRegistry, Style};
use actkit::state::{bin_center, bin_of};
use proptest::prelude::*;

fn vocab() -> &'static BpeVocab {
    static V: OnceLock<BpeVocab> = OnceLock::new();
    V.get_or_init(|| {
        let corpus: Vec<Vec<u8>> = (0..40u8)
            .map(|i| {
                (0..400u32)
                    .map(|j| ((j * 7 + i as u32 * 13) % 23) as u8 ^ (j % 3) as u8)
                    .collect()
            })
            .collect();
        bpe_train(
            &corpus,
            BpeTrainConfig {
                vocab_size: 600,
                threads: 2,
            },
        )
        .unwrap()
    })
}

fn registry() -> &'static SpecialTokenRegistry {
    static R: OnceLock<SpecialTokenRegistry> = OnceLock::new();
    R.get_or_init(SpecialTokenRegistry::new)
}

fn mask_strategy() -> impl Strategy<Value = UpdateMask> {
    prop::collection::vec(any::<bool>(), GRID_CELLS).prop_map(|b| UpdateMask::from_bits(&b).unwrap())
}

fn grid_strategy() -> impl Strategy<Value = DepthGrid> {
    prop::collection::vec(0u8..=127, GRID_CELLS).prop_map(|c| DepthGrid::new(&c).unwrap())
}

fn brute_force(pool: &[PackExample], c: &PackConstraints) -> (u64, Vec<usize>) {
    let n = pool.len();
    let mut best: Option<(u64, Vec<usize>)> = None;
    for bits in 0u32..(1 << n) {
        let set: Vec<usize> = (0..n).filter(|i| bits >> i & 1 == 1).collect();
        let t: u64 = set.iter().map(|&i| c.quantize(pool[i].tokens)).sum();
        let crops: u64 = set.iter().map(|&i| pool[i].crops).sum();
        if t > c.t_max || crops > c.i_max {
            continue;
        }
        let v: u64 = set.iter().map(|&i| c.value(&pool[i])).sum();
        let better = match &best {
            None => true,
            Some((bv, bs)) => v > *bv || (v == *bv && set < *bs),
        };
        if better {
            best = Some((v, set));
        }
    }
    best.unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bpe_is_lossless(bytes in prop::collection::vec(any::<u8>(), 0..600)) {
        let ids = vocab().encode(&bytes);
        prop_assert!(ids.len() <= bytes.len());
        prop_assert_eq!(vocab().decode(&ids).unwrap(), bytes);
    }

    #[test]
    fn varint_zigzag_roundtrip(v in any::<i64>()) {
        let mut buf = Vec::new();
        write_varint(zigzag(v), &mut buf);
        let mut pos = 0;
        prop_assert_eq!(unzigzag(read_varint(&buf, &mut pos).unwrap()), v);
        prop_assert_eq!(pos, buf.len());
    }

    #[test]
    fn coefficient_stream_roundtrip(
        (h, d, coeffs) in (1usize..=30, 1usize..=32).prop_flat_map(|(h, d)| {
            (Just(h), Just(d), prop::collection::vec(-32767i64..=32767, h * d))
        })
    ) {
        let bytes = serialize_coeffs(&coeffs, h, d).unwrap();
        prop_assert_eq!(deserialize_coeffs(&bytes, h, d).unwrap(), coeffs);
    }

    #[test]
    fn dct_roundtrip(column in prop::collection::vec(-10.0f64..10.0, 1..=30)) {
        let plan = DctPlan::new(column.len());
        let back = dct_inverse(&dct_forward(&column, &plan).unwrap(), &plan).unwrap();
        for (a, b) in column.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_is_bounded_and_invertible(
        lo in -100.0f64..100.0,
        span in 0.01f64..50.0,
        x in -300.0f64..300.0,
    ) {
        let stats = NormStats {
            dims: 1,
            q01: vec![lo],
            q99: vec![lo + span],
            gripper_dims: vec![],
            gripper_lo: vec![],
            gripper_hi: vec![],
        };
        let y = stats.normalize_value(0, x);
        prop_assert!((-1.0..=1.0).contains(&y));
        let back = stats.denormalize_value(0, y);
        let clipped = x.clamp(lo, lo + span);
        prop_assert!((back - clipped).abs() <= 1e-9 * (1.0 + clipped.abs()));
    }

    #[test]
    fn state_bins_are_within_half_a_bin(x in -1.0f64..=1.0) {
        prop_assert!((bin_center(bin_of(x)) - x).abs() <= 1.0 / 256.0 + 1e-15);
    }

    #[test]
    fn buffer_update_is_cellwise_select(
        prev in grid_strategy(),
        d in grid_strategy(),
        m in mask_strategy(),
    ) {
        let b = buffer_update(&prev, &d, &m);
        for i in 0..GRID_CELLS {
            let want = if m.get(i) { d.codes()[i] } else { prev.codes()[i] };
            prop_assert_eq!(b.codes()[i], want);
        }
    }

    #[test]
    fn schedule_partitions_and_expands(m in mask_strategy()) {
        let s = plan_schedule(&m, CacheState::Warm);
        prop_assert_eq!(s.expand(), m);
        let mut next = 0;
        for (k, span) in s.spans.iter().enumerate() {
            prop_assert_eq!(span.start, next);
            prop_assert!(span.len > 0);
            next += span.len;
            if k > 0 {
                prop_assert_ne!(span.kind, s.spans[k - 1].kind);
            }
        }
        prop_assert_eq!(next, GRID_CELLS);
        prop_assert_eq!(s.generated_cells(), m.popcount());
        let replay_runs = s.spans.iter().filter(|x| x.kind == SpanKind::Replay).count();
        prop_assert_eq!(s.replay_spans(), replay_runs);
    }

    #[test]
    fn generator_sees_only_updated_cells(m in mask_strategy(), prev in grid_strategy()) {
        let mut log = Vec::new();
        let out = adaptive_fill(&m, &prev, |cell| {
            log.push(cell);
            (cell % 128) as u32
        })
        .unwrap();
        let want: Vec<usize> = (0..GRID_CELLS).filter(|&i| m.get(i)).collect();
        prop_assert_eq!(&log, &want);
        for i in 0..GRID_CELLS {
            let code = if m.get(i) { (i % 128) as u8 } else { prev.codes()[i] };
            prop_assert_eq!(out.codes()[i], code);
        }
    }

    #[test]
    fn masked_entries_never_move_the_loss(
        h in 1usize..=30,
        d in 1usize..=32,
        seed in any::<u64>(),
        junk in -1e6f64..1e6,
    ) {
        let values = (0..h * d).map(|i| ((i as f64) * 0.37).sin()).collect();
        let a = pad_chunk(&ActionChunk::new(h, d, values).unwrap()).unwrap();
        let samples = make_samples(&a, 4, seed).unwrap();
        let mask = a.entry_mask();
        let field = |x: &[f64], t: f64, _: &()| -> Vec<f64> {
            x.iter().map(|v| 0.5 * v + t).collect()
        };
        let noisy = |x: &[f64], t: f64, _: &()| -> Vec<f64> {
            x.iter()
                .enumerate()
                .map(|(i, v)| if mask[i] { 0.5 * v + t } else { junk })
                .collect()
        };
        let base = masked_flow_loss(&field, &a, &samples, &()).unwrap().loss;
        prop_assert_eq!(masked_flow_loss(&noisy, &a, &samples, &()).unwrap().loss, base);
        prop_assert_eq!(samples[0].x_t.len(), GRID_LEN);
    }

    #[test]
    fn response_roundtrip(
        style in prop_oneof![Just(Style::Action), Just(Style::Depth), Just(Style::DepthThenAction)],
        codes in prop::collection::vec(0u8..=127, GRID_CELLS),
        actions in prop::collection::vec(0u32..2048, 0..40),
    ) {
        let r = ParsedResponse {
            style,
            depth_codes: (style != Style::Action).then_some(codes),
            action_token_ids: (style != Style::Depth).then_some(actions),
        };
        let text = render_response(&r).unwrap();
        prop_assert_eq!(parse_response(&text, registry()).unwrap(), r);
    }

    #[test]
    fn packing_matches_brute_force(
        pool in prop::collection::vec((0u64..1500, 0u64..6), 0..=10),
        t_max in 0u64..4000,
        i_max in 0u64..12,
    ) {
        let pool: Vec<PackExample> = pool.into_iter().map(|(tokens, crops)| PackExample { tokens, crops }).collect();
        let c = PackConstraints::new(t_max, i_max);
        let s = solve_pack(&pool, &c).unwrap();
        let (v, set) = brute_force(&pool, &c);
        prop_assert_eq!(s.objective, v);
        prop_assert_eq!(s.selected, set);
        prop_assert!(s.tokens <= t_max && s.crops <= i_max);
    }
}

fn changed_stream(k: usize, frames: usize) -> Vec<Raster> {
    let mut out = vec![Raster::filled([90, 60, 30])];
    for f in 1..frames {
        let mut r = out[f - 1].clone();
        for j in 0..k {
            let cell = (f * 17 + j * 31) % GRID_CELLS;
            let shade = ((f * 53 + j * 7) % 200) as u8 + 40;
            r.paint_cell(cell, |x, y| if (x / 4 + y / 4) % 2 == 0 { [shade, 0, 255 - shade] } else { [0, shade, 0] });
        }
        out.push(r);
    }
    out
}

#[test]
fn savings_never_grow_with_threshold() {
    let frames = changed_stream(9, 8);
    let mut prev = f64::INFINITY;
    for th in [-1.0, 0.0, 0.5, 0.9, 0.99, 0.996, 0.9999, 1.0, 1.5] {
        let model = LatencyModel {
            threshold: th,
            ..Default::default()
        };
        let s = simulate_savings(&frames, &model).unwrap().savings_fraction;
        assert!(s <= prev, "threshold {th}: {s} > {prev}");
        prev = s;
    }
}

#[test]
fn generated_total_is_first_frame_plus_popcounts() {
    let frames = changed_stream(5, 10);
    let r = simulate_savings(&frames, &LatencyModel::default()).unwrap();
    let mut want = GRID_CELLS;
    for w in frames.windows(2) {
        want += actkit::depth::patch_cosine_mask(&w[1], &w[0], 0.996).popcount();
    }
    assert_eq!(r.totals.generated, want);
}
