use std::fs;
use std::path::Path;

use actkit::corpus::{list_frames, read_episodes, read_frame, sample_mixture, MixtureSpec};
use actkit::dct::{dct_forward, DctPlan};
use actkit::depth::{simulate_savings, DepthSession, LatencyModel, SavingsReport};
use actkit::expert::{
    depth_gate, expert_forward, self_attention, ContextKV, ExpertConfig, ExpertWeights, Mat,
};
use actkit::flow::euler_integrate;
use actkit::normalize::{compute_stats, extract_chunks, normalize, pad_chunk, ActionChunk, NormStats, GRID_LEN};
use actkit::packing::{pack_stream, PackConstraints, PackExample, PackedSequence};
use actkit::prompt::{normalize_task, render_prompt, RobotPrompt};
use actkit::rng::DetRng;
use actkit::synth::smooth_chunks;
use actkit::tokenizer::{
    detokenize_chunk, detokenize_normalized, sha256_hex, tokenize_chunk, train_tokenizer,
    Provenance, TokenizerArtifact, TokenizerTrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::table::{pairs, Table};
use crate::{ChunkingArgs, Cli, Command};

#[derive(Debug)]
pub struct Output {
    pub json: String,
    pub human: String,
}

impl Output {
    fn new<T: Serialize>(value: &T, human: String) -> Self {
        let mut json = serde_json::to_string_pretty(value).expect("reports serialize");
        json.push('\n');
        Self { json, human }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<Output> {
    match &cli.command {
        Command::Stats(a) => stats(&a.corpus, &a.gripper_dims, &a.chunking),
        Command::TrainTokenizer(a) => train(a, cli.seed),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::RoundtripEval(a) => roundtrip(a),
        Command::DepthSimulate(a) => depth(a),
        Command::PackBench(a) => pack(a),
        Command::FlowDemo(a) => flow_demo(&a.steps, cli.seed),
        Command::PromptRender(a) => prompt(a),
        Command::Selfcheck => selfcheck(cli.seed),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::new("json", format!("{}: {e}", path.display())))
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Labeled {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    episode: Option<String>,
    #[serde(default)]
    start: usize,
}

fn corpus_chunks(path: &Path, chunking: &ChunkingArgs) -> Result<(usize, Vec<(Labeled, ActionChunk)>)> {
    if chunking.stride == Some(0) {
        return Err(CliError::new("config", "stride must be positive"));
    }
    let episodes = read_episodes(path)?;
    let mut out = Vec::new();
    for ep in &episodes {
        let stride = chunking.stride.unwrap_or(ep.fps as usize);
        for (k, chunk) in extract_chunks(ep, stride).into_iter().enumerate() {
            let start = k * stride;
            out.push((
                Labeled {
                    episode: Some(ep.id.clone()),
                    start,
                },
                chunk,
            ));
        }
    }
    if out.is_empty() {
        return Err(CliError::new(
            "corpus",
            format!("{}: no episode is long enough for one chunk", path.display()),
        ));
    }
    Ok((episodes.len(), out))
}

#[derive(Serialize)]
struct StatsReport {
    episodes: usize,
    chunks: usize,
    stats: NormStats,
}

fn stats_table(s: &NormStats) -> String {
    let mut t = Table::new(&["dim", "q01", "q99", "kind"]);
    for d in 0..s.dims {
        match s.gripper_dims.iter().position(|&g| g == d) {
            Some(k) => t.row(&[d.to_string(), fmt_f(s.gripper_lo[k]), fmt_f(s.gripper_hi[k]), "gripper".into()]),
            None => t.row(&[d.to_string(), fmt_f(s.q01[d]), fmt_f(s.q99[d]), "percentile".into()]),
        };
    }
    t.to_string()
}

fn stats(corpus: &Path, gripper_dims: &[usize], chunking: &ChunkingArgs) -> Result<Output> {
    let (episodes, chunks) = corpus_chunks(corpus, chunking)?;
    let stats = compute_stats(chunks.iter().map(|c| &c.1), gripper_dims)?;
    let human = format!("{episodes} episodes, {} chunks\n{}", chunks.len(), stats_table(&stats));
    Ok(Output::new(
        &StatsReport {
            episodes,
            chunks: chunks.len(),
            stats,
        },
        human,
    ))
}

#[derive(Serialize)]
struct TrainReport {
    chunks: usize,
    dims: usize,
    vocab_size: usize,
    merges: usize,
    mixture_hash: String,
    artifact_sha256: String,
}

fn mixture_chunks(path: &Path, args: &crate::TrainArgs, seed: u64) -> Result<Vec<ActionChunk>> {
    let spec = MixtureSpec::parse(&read_text(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let pools = spec
        .entries
        .iter()
        .map(|e| {
            let p = base.join(&e.path);
            corpus_chunks(&p, &args.chunking).map(|(_, c)| c)
        })
        .collect::<Result<Vec<_>>>()?;
    let draws = sample_mixture(&spec, seed, args.samples)?;
    let mut rng = DetRng::derived(seed, 1);
    Ok(draws
        .into_iter()
        .map(|k| {
            let pool = &pools[k];
            pool[rng.below(pool.len() as u64) as usize].1.clone()
        })
        .collect())
}

fn train(args: &crate::TrainArgs, seed: u64) -> Result<Output> {
    let (source, chunks) = match (&args.corpus, &args.mixture) {
        (Some(c), _) => (c.clone(), corpus_chunks(c, &args.chunking)?.1.into_iter().map(|c| c.1).collect()),
        (None, Some(m)) => (m.clone(), mixture_chunks(m, args, seed)?),
        (None, None) => unreachable!("clap requires a source"),
    };
    let source_bytes = fs::read(&source).map_err(|e| CliError::new("io", format!("{}: {e}", source.display())))?;
    let config = TokenizerTrainConfig {
        gripper_dims: args.gripper_dims.clone(),
        quant: actkit::codec::QuantConfig::new(args.scale)?,
        vocab_size: args.vocab_size,
        threads: args.threads.max(1),
        provenance: Provenance {
            mixture_hash: sha256_hex(&source_bytes),
            seed,
        },
    };
    let artifact = train_tokenizer(&chunks, &config)?;
    artifact.save(&args.out)?;
    let report = TrainReport {
        chunks: chunks.len(),
        dims: artifact.stats.dims,
        vocab_size: artifact.vocab_size(),
        merges: artifact.merges.merges().len(),
        mixture_hash: artifact.provenance.mixture_hash.clone(),
        artifact_sha256: sha256_hex(artifact.to_json().as_bytes()),
    };
    let human = pairs(&[
        ("chunks", report.chunks.to_string()),
        ("dims", report.dims.to_string()),
        ("vocab size", report.vocab_size.to_string()),
        ("merges", report.merges.to_string()),
        ("source sha256", report.mixture_hash.clone()),
        ("artifact sha256", report.artifact_sha256.clone()),
    ]);
    Ok(Output::new(&report, human))
}

#[derive(Serialize, Deserialize)]
struct EncodedChunk {
    #[serde(flatten)]
    label: Labeled,
    horizon: usize,
    dims: usize,
    ids: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct EncodedSet {
    chunks: Vec<EncodedChunk>,
}

fn encode(args: &crate::EncodeArgs) -> Result<Output> {
    let artifact = TokenizerArtifact::load(&args.artifact)?;
    let chunks = match (&args.corpus, &args.chunk) {
        (Some(c), _) => corpus_chunks(c, &args.chunking)?.1,
        (None, Some(p)) => {
            let rows: Vec<Vec<f64>> = read_json(p)?;
            vec![(Labeled { episode: None, start: 0 }, ActionChunk::from_rows(&rows)?)]
        }
        (None, None) => unreachable!("clap requires an input"),
    };
    let mut t = Table::new(&["episode", "start", "shape", "tokens"]);
    let mut out = Vec::with_capacity(chunks.len());
    for (label, chunk) in chunks {
        let ids = tokenize_chunk(&chunk, &artifact)?;
        t.row(&[
            label.episode.clone().unwrap_or_else(|| "-".into()),
            label.start.to_string(),
            format!("{}x{}", chunk.horizon(), chunk.dims()),
            ids.len().to_string(),
        ]);
        out.push(EncodedChunk {
            label,
            horizon: chunk.horizon(),
            dims: chunk.dims(),
            ids,
        });
    }
    Ok(Output::new(&EncodedSet { chunks: out }, t.to_string()))
}

#[derive(Serialize)]
struct DecodedChunk {
    #[serde(flatten)]
    label: Labeled,
    rows: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct DecodedSet {
    chunks: Vec<DecodedChunk>,
}

fn decode(args: &crate::DecodeArgs) -> Result<Output> {
    let artifact = TokenizerArtifact::load(&args.artifact)?;
    let set: EncodedSet = read_json(&args.tokens)?;
    let mut human = String::new();
    let mut out = Vec::with_capacity(set.chunks.len());
    for c in set.chunks {
        let chunk = detokenize_chunk(&c.ids, &artifact, c.horizon, c.dims)?;
        let rows: Vec<Vec<f64>> = (0..chunk.horizon()).map(|s| chunk.row(s).to_vec()).collect();
        human.push_str(&format!(
            "{} @ {}\n",
            c.label.episode.as_deref().unwrap_or("chunk"),
            c.label.start
        ));
        for r in &rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:>10.5}")).collect();
            human.push_str(&cells.join(" "));
            human.push('\n');
        }
        out.push(DecodedChunk { label: c.label, rows });
    }
    Ok(Output::new(&DecodedSet { chunks: out }, human))
}

#[derive(Serialize)]
struct RoundtripReport {
    chunks: usize,
    /// Largest per-entry error bound over the evaluated horizons.
    bound: f64,
    within_bound: bool,
    max_error: f64,
    mean_error: f64,
    max_error_raw: f64,
    mean_tokens: f64,
    per_chunk_max_error: Vec<f64>,
}

fn roundtrip(args: &crate::RoundtripArgs) -> Result<Output> {
    let artifact = TokenizerArtifact::load(&args.artifact)?;
    let (_, chunks) = corpus_chunks(&args.corpus, &args.chunking)?;
    let gamma = artifact.quant.scale;
    let (mut bound, mut within, mut max_raw) = (0.0f64, true, 0.0f64);
    let (mut err_sum, mut entries, mut tokens) = (0.0, 0usize, 0usize);
    let mut per_chunk = Vec::with_capacity(chunks.len());
    for (_, chunk) in &chunks {
        let (h, d) = (chunk.horizon(), chunk.dims());
        let ids = tokenize_chunk(chunk, &artifact)?;
        let want = normalize(chunk, &artifact.stats)?;
        let got = detokenize_normalized(&ids, &artifact, h, d)?;
        let worst = want.max_abs_diff(&got);
        let b = (h as f64).sqrt() / (2.0 * gamma);
        bound = bound.max(b);
        within &= worst <= b;
        err_sum += want.values().iter().zip(got.values()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        entries += h * d;
        tokens += ids.len();
        max_raw = max_raw.max(chunk.max_abs_diff(&detokenize_chunk(&ids, &artifact, h, d)?));
        per_chunk.push(worst);
    }
    let report = RoundtripReport {
        chunks: chunks.len(),
        bound,
        within_bound: within,
        max_error: per_chunk.iter().copied().fold(0.0, f64::max),
        mean_error: err_sum / entries as f64,
        max_error_raw: max_raw,
        mean_tokens: tokens as f64 / chunks.len() as f64,
        per_chunk_max_error: per_chunk,
    };
    let human = pairs(&[
        ("chunks", report.chunks.to_string()),
        ("bound", fmt_f(report.bound)),
        ("within bound", report.within_bound.to_string()),
        ("max error", fmt_f(report.max_error)),
        ("mean error", fmt_f(report.mean_error)),
        ("max error (raw units)", fmt_f(report.max_error_raw)),
        ("mean tokens per chunk", format!("{:.2}", report.mean_tokens)),
    ]);
    Ok(Output::new(&report, human))
}

#[derive(Serialize)]
struct DepthReport {
    frames: usize,
    #[serde(flatten)]
    savings: SavingsReport,
    /// Depth buffer after the last frame, when every frame carries codes.
    #[serde(skip_serializing_if = "Option::is_none")]
    final_buffer: Option<Vec<u8>>,
}

fn depth(args: &crate::DepthArgs) -> Result<Output> {
    let paths = list_frames(&args.frames)?;
    let records = paths.iter().map(|p| read_frame(p)).collect::<std::result::Result<Vec<_>, _>>()?;
    let model = LatencyModel {
        threshold: args.threshold,
        generate_cost: args.generate_cost,
        replay_span_cost: args.replay_span_cost,
        base_cost: args.base_cost,
        horizon: args.horizon,
    };
    let images: Vec<_> = records.iter().map(|r| r.image.clone()).collect();
    let savings = simulate_savings(&images, &model)?;
    let final_buffer = if records.iter().all(|r| r.depth_codes.is_some()) {
        let mut session = DepthSession::new(args.threshold);
        let mut last = None;
        for r in &records {
            let codes = r.depth_codes.as_ref().expect("checked above");
            last = Some(session.step(&r.image, |cell| codes[cell] as u32)?.buffer);
        }
        last.map(|b| b.codes().to_vec())
    } else {
        None
    };
    let mut t = Table::new(&["frame", "generated", "spans", "replay spans", "cost"]);
    for (i, f) in savings.per_frame.iter().enumerate() {
        t.row(&[i.to_string(), f.generated.to_string(), f.spans.to_string(), f.replay_spans.to_string(), fmt_f(f.modeled_cost)]);
    }
    let human = format!(
        "{t}\nsavings fraction {}\namortized rate {}\n",
        fmt_f(savings.savings_fraction),
        savings.amortized_rate.map_or("n/a".into(), fmt_f)
    );
    Ok(Output::new(
        &DepthReport {
            frames: records.len(),
            savings,
            final_buffer,
        },
        human,
    ))
}

#[derive(Serialize)]
struct PackBench {
    examples: usize,
    sequences: usize,
    dead_letter: Vec<usize>,
    token_utilization: f64,
    crop_utilization: f64,
    mean_examples_per_sequence: f64,
    total_objective: u64,
    packs: Vec<PackedSequence>,
}

fn read_examples(path: &Path) -> Result<Vec<PackExample>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::new("json", format!("{}: line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

fn pack(args: &crate::PackArgs) -> Result<Output> {
    let examples = read_examples(&args.examples)?;
    let c = PackConstraints {
        t_max: args.t_max,
        i_max: args.i_max,
        weight: args.weight,
        quantum: args.quantum,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.threads).build()?;
    let report = pool.install(|| pack_stream(examples.iter().copied(), &c, args.pool))?;
    let n = report.sequences.len();
    let packed: usize = report.sequences.iter().map(|s| s.example_ids.len()).sum();
    let bench = PackBench {
        examples: examples.len(),
        sequences: n,
        dead_letter: report.dead_letter,
        token_utilization: report.token_utilization,
        crop_utilization: report.crop_utilization,
        mean_examples_per_sequence: if n == 0 { 0.0 } else { packed as f64 / n as f64 },
        total_objective: report.sequences.iter().map(|s| s.objective).sum(),
        packs: report.sequences,
    };
    let human = pairs(&[
        ("examples", bench.examples.to_string()),
        ("sequences", bench.sequences.to_string()),
        ("dead letter", bench.dead_letter.len().to_string()),
        ("token utilization", fmt_f(bench.token_utilization)),
        ("crop utilization", fmt_f(bench.crop_utilization)),
        ("examples per sequence", format!("{:.2}", bench.mean_examples_per_sequence)),
        ("total objective", bench.total_objective.to_string()),
    ]);
    Ok(Output::new(&bench, human))
}

#[derive(Serialize)]
struct Check {
    name: String,
    value: f64,
    expected: f64,
    tolerance: f64,
    pass: bool,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            expected,
            tolerance,
            pass: (value - expected).abs() <= tolerance,
        }
    }
}

#[derive(Serialize)]
struct CheckReport {
    pass: bool,
    checks: Vec<Check>,
}

fn check_output(checks: Vec<Check>, what: &str) -> Result<Output> {
    let mut t = Table::new(&["check", "value", "expected", "tolerance", "result"]);
    for c in &checks {
        t.row(&[
            c.name.clone(),
            format!("{:.3e}", c.value),
            format!("{:.3e}", c.expected),
            format!("{:.0e}", c.tolerance),
            if c.pass { "pass" } else { "FAIL" }.to_string(),
        ]);
    }
    let pass = checks.iter().all(|c| c.pass);
    let out = Output::new(&CheckReport { pass, checks }, t.to_string());
    if pass {
        Ok(out)
    } else {
        let mut e = CliError::new("check", format!("{what} reported failures"));
        e.report = Some(out);
        Err(e)
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A smooth target on the padded grid and a noise draw over its valid entries.
fn flow_pair(seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let chunk = &smooth_chunks(seed, 1, 30, 7)[0];
    let a = pad_chunk(chunk)?;
    let mut rng = DetRng::derived(seed, 1);
    let eps = a
        .entry_mask()
        .iter()
        .map(|&m| if m { rng.normal() } else { 0.0 })
        .collect();
    Ok((a.values, eps))
}

fn flow_checks(steps: &[usize], seed: u64) -> Result<Vec<Check>> {
    let (a, eps) = flow_pair(seed)?;
    let u: Vec<f64> = a.iter().zip(&eps).map(|(a, e)| a - e).collect();
    let zero = |x: &[f64], _: f64, _: &()| vec![0.0; x.len()];
    let constant = |_: &[f64], _: f64, _: &()| u.clone();
    let time = |x: &[f64], t: f64, _: &()| vec![t; x.len()];
    let mut checks = Vec::new();
    for &n in steps {
        let z = euler_integrate(&zero, &eps, n, &())?;
        checks.push(Check::new(format!("zero field, N={n}"), max_diff(&z, &eps), 0.0, 0.0));
        let z = euler_integrate(&constant, &eps, n, &())?;
        checks.push(Check::new(format!("constant field, N={n}"), max_diff(&z, &a), 0.0, 1e-12));
        let z = euler_integrate(&time, &eps, n, &())?;
        let shift = (n as f64 - 1.0) / (2.0 * n as f64);
        let want: Vec<f64> = eps.iter().map(|e| e + shift).collect();
        checks.push(Check::new(format!("time field, N={n}"), max_diff(&z, &want), 0.0, 1e-12));
    }
    Ok(checks)
}

fn flow_demo(steps: &[usize], seed: u64) -> Result<Output> {
    check_output(flow_checks(steps, seed)?, "flow-demo")
}

const SIGMOID_MINUS_FOUR: f64 = 0.01798620996209156;

fn selfcheck(seed: u64) -> Result<Output> {
    let mut checks = Vec::new();

    let cfg = ExpertConfig::desk();
    let init = ExpertWeights::init(cfg, seed)?;
    let ctx = ContextKV::synthetic(cfg.layers, 16, cfg.kv_width, 4..8, 2, seed)?;
    for (l, layer) in init.layers.iter().enumerate() {
        let gate = depth_gate(&ctx, &layer.depth_gate, l)?.gate;
        checks.push(Check::new(format!("depth gate at init, layer {l}"), gate, SIGMOID_MINUS_FOUR, 1e-9));
    }

    let plan = DctPlan::new(30);
    let c = 0.7;
    let coeffs = dct_forward(&[c; 30], &plan)?;
    checks.push(Check::new("constant DCT, DC term", coeffs[0], c * 30f64.sqrt(), 1e-12));
    let ac = coeffs[1..].iter().map(|v| v.abs()).fold(0.0, f64::max);
    checks.push(Check::new("constant DCT, largest AC term", ac, 0.0, 1e-12));

    checks.extend(flow_checks(&[1, 10, 100], seed)?.into_iter().filter(|c| !c.name.starts_with("zero")));

    let mut rng = DetRng::derived(seed, 2);
    let x: Vec<f64> = (0..GRID_LEN).map(|_| rng.normal()).collect();
    let v = expert_forward(&x, rng.uniform(), &ctx, &init)?;
    checks.push(Check::new("expert output at init", v.iter().map(|v| v.abs()).fold(0.0, f64::max), 0.0, 0.0));
    let z = euler_integrate(&init, &x, 10, &ctx)?;
    checks.push(Check::new("expert integration at init", max_diff(&z, &x), 0.0, 0.0));

    let random = ExpertWeights::random(cfg, seed)?;
    let h = Mat::new(30, cfg.width, (0..30 * cfg.width).map(|_| rng.normal()).collect())?;
    let probs = self_attention(&h, &random.layers[0].sa, &cfg).probs;
    let worst = probs
        .iter()
        .flat_map(|p| (0..p.rows).map(move |r| (p.row(r).iter().sum::<f64>() - 1.0).abs()))
        .fold(0.0, f64::max);
    checks.push(Check::new("attention row sums", 1.0 + worst, 1.0, 1e-9));

    check_output(checks, "selfcheck")
}

#[derive(Serialize)]
struct PromptReport {
    prompt: String,
}

fn prompt(args: &crate::PromptArgs) -> Result<Output> {
    let mut p: RobotPrompt = read_json(&args.prompt)?;
    if let Some(s) = args.style {
        p.style = s.into();
    }
    if !args.verbatim_task {
        p.task = normalize_task(&p.task);
    }
    let text = render_prompt(&p)?;
    Ok(Output::new(&PromptReport { prompt: text.clone() }, text))
}
