use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flowave_core::baselines::{DistillMode, GaussianAr, GaussianArConfig};
use flowave_core::harness::bench::{BenchRow, AR_SAMPLE, FLOW_SAMPLE, FLOW_TRAIN};
use flowave_core::harness::train::{load_flow, load_teacher};
use flowave_core::harness::verify::{perturbed_model, DEFAULT_TRIPLES};
use flowave_core::harness::{
    cmd_ablate, cmd_benchmark, cmd_sample, cmd_train, cmd_verify, BenchRequest, RunConfig,
    SampleRequest, Suite,
};
use flowave_core::kv::KeyValues;
use flowave_core::ModelConfig;

const LOG_ENV: &str = "FLOWAVE_LOG_LEVEL";

#[derive(Parser, Debug)]
#[command(
    name = "flowave",
    version,
    about = "Flow-based raw-audio generation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a flow, an autoregressive teacher, or a distilled student.
    Train(TrainArgs),
    /// Generate a WAV file from a checkpoint and a WAV or .mel condition.
    Sample(SampleArgs),
    /// Run the invertibility, Jacobian, gradient, causality and round-trip suites.
    Verify(VerifyArgs),
    /// Measure flow vs autoregressive sampling throughput.
    Benchmark(BenchArgs),
    /// Train one student per distillation loss and compare them.
    Ablate(AblateArgs),
}

/// Settings shared by `train` and `ablate`, applied over the config file.
#[derive(Args, Debug)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Where the final (and periodic) checkpoint is written.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Metric log (comma-separated values).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Trained autoregressive teacher, for distillation.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Directory with manifest.txt and WAV files instead of the synthetic corpus.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_parser = ["flow", "ar", "distill"])]
    mode: Option<String>,
    /// Distillation loss: kl_only, frame_only or both.
    #[arg(long)]
    loss: Option<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// WAV file or .mel cache supplying the condition.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Prior standard deviation; the checkpoint's value (0.8 by default) when omitted.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Flow checkpoint; a perturbed fresh model is used when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Config file whose model.* keys shape the fresh model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated suites, or `all`.
    #[arg(long, default_value = "all")]
    scope: String,
    #[arg(long, default_value_t = DEFAULT_TRIPLES)]
    triples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Flow checkpoint; a fresh desk model when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Teacher checkpoint; a fresh desk teacher when omitted.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Samples generated per run.
    #[arg(long = "t", default_value_t = 16000)]
    t: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    ar_repeats: usize,
    #[arg(long, default_value_t = 3)]
    train_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the rows to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with failure if the flow/AR speed ratio is below this.
    #[arg(long)]
    min_speedup: Option<f64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated losses to compare.
    #[arg(long, default_value = "kl_only,both,frame_only")]
    loss: String,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_config(path: Option<&Path>) -> Result<KeyValues> {
    match path {
        None => Ok(KeyValues::new()),
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Ok(KeyValues::parse(&text)?)
        }
    }
}

fn run_config(args: &RunArgs, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut kv = read_config(args.config.as_deref())?;
    let paths = [
        ("checkpoint", &args.checkpoint),
        ("log", &args.log),
        ("teacher_checkpoint", &args.teacher),
        ("data_dir", &args.data_dir),
    ];
    for (key, value) in paths {
        if let Some(p) = value {
            kv.set(key, p.display());
        }
    }
    if let Some(seed) = args.seed {
        kv.set("seed", seed);
    }
    if let Some(steps) = args.steps {
        kv.set("steps", steps);
    }
    for (key, value) in extra {
        if let Some(v) = value {
            kv.set(key, v);
        }
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(RunConfig::from_kv(&kv)?)
}

fn train(args: TrainArgs) -> Result<ExitCode> {
    let resume = args.resume.as_ref().map(|p| p.display().to_string());
    let cfg = run_config(
        &args.run,
        &[
            ("mode", args.mode.clone()),
            ("loss", args.loss.clone()),
            ("resume", resume),
        ],
    )?;
    let out = cmd_train(&cfg)?;
    println!(
        "trained {} for {} steps; held-out {:?} -> {:?}",
        out.learner.kind(),
        out.steps,
        out.initial.extra,
        out.last.extra
    );
    if let (Some(a), Some(b)) = (out.initial.nats_per_dim, out.last.nats_per_dim) {
        println!("held-out nats/dim: {a:.4} -> {b:.4} (gain {:.4})", b - a);
    }
    if let Some(p) = &out.checkpoint {
        println!("checkpoint: {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn sample(args: SampleArgs) -> Result<ExitCode> {
    let report = cmd_sample(&SampleRequest {
        checkpoint: args.checkpoint,
        input: args.input,
        out: args.out.clone(),
        temperature: args.temperature,
        seed: args.seed,
    })?;
    if let Some(t) = report.trimmed_from {
        println!(
            "warning: condition trimmed from {t} to {} samples",
            report.samples
        );
    }
    println!(
        "wrote {} ({} samples at {} Hz, {} model, temperature {}) in {:.3}s; variance {:.4}, {} clipped",
        args.out.display(),
        report.samples,
        report.sample_rate,
        report.kind,
        report.temperature.map_or("n/a".to_string(), |t| t.to_string()),
        report.wall_secs,
        report.variance,
        report.clipped
    );
    Ok(ExitCode::SUCCESS)
}

fn verify(args: VerifyArgs) -> Result<ExitCode> {
    let suites: Vec<Suite> = if args.scope == "all" {
        Suite::ALL.to_vec()
    } else {
        args.scope
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()?
    };
    let kv = read_config(args.config.as_deref())?;
    let fresh = ModelConfig::from_kv(&kv.section("model."))?;
    let report = cmd_verify(
        args.checkpoint.as_deref(),
        &fresh,
        &suites,
        args.triples,
        args.seed,
    )?;
    for check in &report.checks {
        println!("{check}");
    }
    let failures = report.failures();
    println!("{} checks, {failures} failed", report.checks.len());
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn benchmark(args: BenchArgs) -> Result<ExitCode> {
    let flow = match &args.checkpoint {
        Some(p) => load_flow(p)?.0,
        None => perturbed_model(ModelConfig::desk(), args.seed)?,
    };
    let teacher = match &args.teacher {
        Some(p) => load_teacher(p)?.0,
        None => GaussianAr::new(GaussianArConfig::desk(), args.seed)?,
    };
    let mut req = BenchRequest::new(args.t, args.repeats);
    req.ar_repeats = args.ar_repeats;
    req.train_steps = args.train_steps;
    req.seed = args.seed;
    let report = cmd_benchmark(&flow, &teacher, &req)?;

    let mut text = format!("{}\n", BenchRow::HEADER);
    for row in &report.rows {
        text.push_str(&format!("{row}\n"));
    }
    print!("{text}");
    if let Some(p) = &args.out {
        fs::File::create(p)?.write_all(text.as_bytes())?;
    }
    for task in [FLOW_SAMPLE, AR_SAMPLE, FLOW_TRAIN] {
        if let Some(s) = report.summary(task) {
            let passes = report.passes(task).unwrap_or(0);
            println!(
                "# {task}: median {:.3}/s, spread {:.3}, {} runs, {passes} sequential passes",
                s.median, s.spread, s.runs
            );
        }
    }
    let speedup = report.speedup();
    if let Some(s) = speedup {
        println!("# flow/AR sampling speedup at T={}: {s:.1}x", report.t);
    }
    match (args.min_speedup, speedup) {
        (Some(min), Some(s)) if s < min => {
            println!("# FAIL: speedup {s:.1}x below {min}x");
            Ok(ExitCode::FAILURE)
        }
        _ => Ok(ExitCode::SUCCESS),
    }
}

fn ablate(args: AblateArgs) -> Result<ExitCode> {
    let modes: Vec<DistillMode> = args
        .loss
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()?;
    let cfg = run_config(&args.run, &[("mode", Some("distill".into()))])?;
    if cfg.teacher_checkpoint.is_none() {
        bail!("ablation needs --teacher (or teacher_checkpoint in the config)");
    }
    let table = cmd_ablate(&cfg, &modes)?;
    print!("{table}");
    if let Some(p) = &args.out {
        fs::write(p, table.to_string())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Verify(a) => verify(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
