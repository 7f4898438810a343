//! `mhst` command-line driver.
//!
//! Exit codes: 0 success, 1 usage (bad flags, missing files), 2 data or
//! format error, 3 a check subcommand failed.

use std::fmt::Write as _;
use std::io::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mhst_core::eval::{compare_trees, evaluate, oracle_build, ORACLE_MAX_FRAMES};
use mhst_core::hypothesis::{extract_hypotheses, rank_by_confidence, select_positive};
use mhst_core::io::{
    load_manifest, load_samples, loss_log_line, prediction_line, read_params, write_params,
};
use mhst_core::learning::GradCheckInstance;
use mhst_core::synth::{synth_generate, SynthConfig};
use mhst_core::{build_tree, init_params, new_rng, Config, FrameFeatures, Matrix, MhstError};
use mhst_core::{ModelParams, QueryEmbedding, Sample};

#[derive(Parser)]
#[command(name = "mhst", version, about = "Hypotheses segment trees for one-shot temporal sentence localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (features, queries, manifest.tsv).
    Synth(SynthArgs),
    /// Build trees and dump traces plus hypothesis listings.
    Build(BuildArgs),
    /// Train parameters with plain gradient descent.
    Train(TrainArgs),
    /// Print the R@n, IoU=m grid.
    Eval(EvalArgs),
    /// Print one prediction line per video.
    Predict(ModelArgs),
    /// Compare analytic and finite-difference gradients on random instances.
    CheckGrad(CheckGradArgs),
    /// Compare the tree builder with the brute-force reference.
    CheckOracle(CheckOracleArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    videos: usize,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    segments: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set tau=0.6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Parameter file; defaults to a fresh initialization from the config seed.
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    dump_trace: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Start from these parameters instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
    iou: Vec<f64>,
    /// Also write per-video best IoU lines to this file.
    #[arg(long)]
    per_video: Option<PathBuf>,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Number of random instances, seeded `seed, seed+1, ...`.
    #[arg(long, default_value_t = 1)]
    traces: usize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct CheckOracleArgs {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 8)]
    max_frames: usize,
    #[arg(long, default_value_t = 16)]
    max_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

/// A check subcommand ran but its condition failed.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

/// Missing input paths are usage errors rather than data errors.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Usage(format!("no such file: {}", path.display())).into());
    }
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => {
            require_file(path)?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Config::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => Config::default(),
    };
    for kv in &args.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Usage(format!("--set expects KEY=VALUE, got `{kv}`")).into());
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    require_file(manifest)?;
    let m = load_manifest(manifest)?;
    let samples = load_samples(&m)?;
    if samples.is_empty() {
        bail!(MhstError::EmptySet(format!("{} has no entries", manifest.display())));
    }
    let d = samples[0].features.dim();
    if let Some(bad) = samples.iter().find(|s| s.features.dim() != d) {
        bail!(MhstError::Shape {
            expected: d,
            actual: bad.features.dim(),
        });
    }
    Ok(samples)
}

fn load_model(args: &ModelArgs) -> Result<(Vec<Sample>, ModelParams, Config)> {
    let cfg = load_config(&args.config)?;
    let samples = load_dataset(&args.manifest)?;
    let d = samples[0].features.dim();
    let params = match &args.params {
        Some(path) => {
            require_file(path)?;
            let p = read_params(path)?;
            p.validate(d)?;
            p
        }
        None => init_params(d, &mut new_rng(cfg.seed))?,
    };
    Ok((samples, params, cfg))
}

/// Prints a line; false once stdout is closed (e.g. piped into `head`).
fn emit(line: &str) -> bool {
    writeln!(std::io::stdout().lock(), "{line}").is_ok()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_videos: a.videos,
        n_frames: a.frames,
        dim: a.dim,
        n_segments_per_video: a.segments,
        noise_sigma: a.sigma,
        seed: a.seed,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let m = synth_generate(&cfg, &a.out)?;
    println!("wrote {} videos to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn cmd_build(a: &BuildArgs) -> Result<()> {
    let (samples, params, cfg) = load_model(&a.model)?;
    fs::create_dir_all(&a.dump_trace).with_context(|| format!("creating {}", a.dump_trace.display()))?;
    for s in &samples {
        let tree = build_tree(&s.features, &s.query, &params, &cfg)?;
        let id = &s.features.video_id;
        write_text(&a.dump_trace.join(format!("{id}.trace")), &tree.trace().to_text())?;
        let mut hyps = extract_hypotheses(&tree, &s.query, &params)?;
        select_positive(&mut hyps, &s.label)?;
        let mut listing = String::from("root\tstart\tend\tconfidence\trelevance\tpositive\n");
        for h in &hyps {
            let _ = writeln!(
                listing,
                "{}\t{}\t{}\t{}\t{}\t{}",
                h.root_id,
                h.span.start,
                h.span.end,
                h.confidence,
                h.linguistic_rel,
                u8::from(h.is_positive)
            );
        }
        write_text(&a.dump_trace.join(format!("{id}.hyps")), &listing)?;
        let line = format!(
            "{id}\trounds={}\tevents={}\troots={}",
            tree.round(),
            tree.trace().len(),
            tree.active_roots().len()
        );
        if !emit(&line) {
            break;
        }
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let samples = load_dataset(&a.manifest)?;
    let d = samples[0].features.dim();
    let params = match &a.init {
        Some(path) => {
            require_file(path)?;
            let p = read_params(path)?;
            p.validate(d)?;
            p
        }
        None => init_params(d, &mut new_rng(cfg.seed))?,
    };
    let (trained, history) = mhst_core::train(&samples, params, &cfg, a.epochs)?;
    write_params(&a.out, &trained)?;
    let mut log = String::new();
    for (epoch, r) in history.iter().enumerate() {
        log.push_str(&loss_log_line(epoch, r.rank_loss, r.inter_loss, r.intra_loss, r.total));
        log.push('\n');
    }
    match &a.log {
        Some(path) => write_text(path, &log)?,
        None => print!("{log}"),
    }
    Ok(())
}

/// Every video's hypotheses ranked by confidence.
fn ranked_predictions(samples: &[Sample], params: &ModelParams, cfg: &Config) -> Result<Vec<Vec<(mhst_core::Span, f64)>>> {
    samples
        .iter()
        .map(|s| {
            let tree = build_tree(&s.features, &s.query, params, cfg)?;
            let hyps = extract_hypotheses(&tree, &s.query, params)?;
            Ok(rank_by_confidence(&hyps)
                .into_iter()
                .map(|i| (hyps[i].span, hyps[i].confidence))
                .collect())
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (samples, params, cfg) = load_model(&a.model)?;
    let ranked = ranked_predictions(&samples, &params, &cfg)?;
    let preds: Vec<Vec<mhst_core::Span>> = ranked.iter().map(|r| r.iter().map(|(s, _)| *s).collect()).collect();
    let gts: Vec<Option<mhst_core::Span>> = samples.iter().map(|s| s.label.gt_span).collect();
    let ids: Vec<String> = samples.iter().map(|s| s.features.video_id.clone()).collect();
    let result = evaluate(&ids, &preds, &gts, &a.n, &a.iou)?;
    if result.skipped > 0 {
        eprintln!(
            "warning: {} of {} videos have no ground truth and were skipped",
            result.skipped,
            samples.len()
        );
    }
    print!("{}", result.to_text());
    if let Some(path) = &a.per_video {
        let mut out = String::new();
        for (id, best) in &result.per_video {
            let cols: Vec<String> = best.iter().map(|x| format!("{x:.4}")).collect();
            let _ = writeln!(out, "{id}\t{}", cols.join("\t"));
        }
        write_text(path, &out)?;
    }
    Ok(())
}

fn cmd_predict(a: &ModelArgs) -> Result<()> {
    let (samples, params, cfg) = load_model(a)?;
    let ranked = ranked_predictions(&samples, &params, &cfg)?;
    for (s, r) in samples.iter().zip(&ranked) {
        let (span, conf) = r[0];
        if !emit(&prediction_line(&s.features.video_id, span, conf)) {
            break;
        }
    }
    Ok(())
}

fn cmd_check_grad(a: &CheckGradArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let mut worst: f64 = 0.0;
    let mut worst_small: f64 = 0.0;
    for t in 0..a.traces {
        let seed = a.seed + t as u64;
        let inst = GradCheckInstance::random(seed, a.dim, a.frames)?;
        let (trace, live, report) = inst.check(&cfg, a.epsilon)?;
        println!(
            "seed={seed} events={} live_merges={live} max_relative_error={:e} max_abs_error_small={:e}",
            trace.len(),
            report.max_relative_error,
            report.max_abs_error_small
        );
        worst = worst.max(report.max_relative_error);
        worst_small = worst_small.max(report.max_abs_error_small);
    }
    println!("max relative error {worst:e}");
    if worst > a.tolerance || worst_small > 1e-7 {
        return Err(CheckFailed(format!(
            "gradient check failed: relative {worst:e} (limit {:e}), small-entry absolute {worst_small:e} (limit 1e-7)",
            a.tolerance
        ))
        .into());
    }
    Ok(())
}

fn cmd_check_oracle(a: &CheckOracleArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    if a.max_frames < 2 || a.max_frames > ORACLE_MAX_FRAMES {
        return Err(Usage(format!("--max-frames must be in [2, {ORACLE_MAX_FRAMES}]")).into());
    }
    if a.max_dim < 1 {
        return Err(Usage("--max-dim must be positive".into()).into());
    }
    let mut rng = new_rng(a.seed);
    let mut worst: f64 = 0.0;
    for trial in 0..a.trials {
        let n = rng.index(2, a.max_frames + 1);
        let d = rng.index(4.min(a.max_dim), a.max_dim + 1);
        let data: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        let f = FrameFeatures::new(format!("t{trial}"), Matrix::from_vec(n, d, data))?;
        let q = QueryEmbedding::new("q", (0..d).map(|_| rng.normal()).collect())?;
        let params = init_params(d, &mut rng)?;
        let main = build_tree(&f, &q, &params, &cfg)?;
        let reference = oracle_build(&f, &q, &params, &cfg)?;
        match compare_trees(&main, &reference, 1e-9) {
            Ok(diff) => worst = worst.max(diff),
            Err(msg) => {
                return Err(CheckFailed(format!("trial {trial} (N_v={n}, d={d}): {msg}")).into());
            }
        }
    }
    println!("{} trials agree; max feature difference {worst:e}", a.trials);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<CheckFailed>() {
            return 3;
        }
        if cause.is::<Usage>() {
            return 1;
        }
    }
    if let Some(MhstError::Io { source, .. }) = err.downcast_ref::<MhstError>() {
        if source.kind() == std::io::ErrorKind::NotFound {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Build(a) => cmd_build(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::CheckGrad(a) => cmd_check_grad(a),
        Command::CheckOracle(a) => cmd_check_oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
