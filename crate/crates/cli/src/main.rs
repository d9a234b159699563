//! `cici`: synthesize STMap suites, pretrain the pulse model, adapt it at
//! test time and summarize the resulting step reports.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures.

mod data;
mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use cici_core::harness::{
    self, pass_running_mae, read_report_rows, run_suite, running_mae, write_suite_outputs, ExperimentConfig, TtaRow,
};
use cici_core::{dsp, Checkpoint, LabeledInstance, Mode, RunConfig, SuiteSpec};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(name = "cici", version, about = "Test-time adaptation of an rPPG pulse model on synthetic STMaps")]
struct Cli {
    /// Experiment config (JSON). Missing keys take their defaults, unknown keys are rejected.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed override. synth: source suite seed (target uses seed + 1); pretrain: init and
    /// shuffle seed; adapt: augmentation seed; suite: first of consecutive seeds; report:
    /// only reports of this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write suites as STM1 windows, labels, reference pulses and ROI-trace CSVs.
    Synth(SynthArgs),
    /// Train the model on the source suite and save a checkpoint.
    Pretrain(PretrainArgs),
    /// Adapt a checkpoint over the target stream and write the step report.
    Adapt(AdaptArgs),
    /// Run every configured mode with every seed and write reports plus summaries.
    Suite(SuiteArgs),
    /// Summarize step reports as a table and optionally plot running MAE.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Source,
    Target,
    Both,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; each suite goes to a subdirectory named after it.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    which: Which,
}

#[derive(Args)]
struct PretrainArgs {
    /// Checkpoint path (JSON).
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct Tuning {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lambda_hp: Option<f64>,
    #[arg(long)]
    psi_bpm: Option<f64>,
    #[arg(long)]
    steps_per_instance: Option<usize>,
    /// Passes over the target stream.
    #[arg(long)]
    cycles: Option<usize>,
    /// Read the target stream from a `synth` output directory instead of generating it.
    #[arg(long, value_name = "DIR")]
    target: Option<PathBuf>,
}

impl Tuning {
    fn apply(&self, run: &mut RunConfig) {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut run.lr, self.lr);
        set(&mut run.momentum, self.momentum);
        set(&mut run.lambda_hp, self.lambda_hp);
        set(&mut run.psi_bpm, self.psi_bpm);
        if let Some(v) = self.steps_per_instance {
            run.steps_per_instance = v;
        }
        if let Some(v) = self.cycles {
            run.cycles = v;
        }
    }
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report CSV path; the run summary is written next to it as JSON.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<Mode>,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for per-run reports and the summaries.
    #[arg(long, short)]
    out: PathBuf,
    /// Comma-separated modes.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<Mode>,
    /// Comma-separated seeds; takes precedence over `--seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(flatten)]
    tuning: Tuning,
}

#[derive(Args)]
struct ReportArgs {
    /// A step report CSV or a directory of `report_<label>_seed<n>.csv` files.
    input: PathBuf,
    /// Write an SVG plot of running MAE against step.
    #[arg(long, value_name = "FILE")]
    plot: Option<PathBuf>,
    /// Trailing window of the running MAE; defaults to one pass over the stream.
    #[arg(long)]
    window: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(config, cli.seed, &a),
        Command::Pretrain(a) => pretrain(config, cli.seed, &a),
        Command::Adapt(a) => adapt(config, cli.seed, &a),
        Command::Suite(a) => suite(config, cli.seed, &a),
        Command::Report(a) => report(cli.seed, &a),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn validate_run(run: &RunConfig) -> Result<(), CliError> {
    run.validate().map_err(|e| CliError::Usage(e.to_string()))
}

fn synth(mut config: ExperimentConfig, seed: Option<u64>, args: &SynthArgs) -> Result<(), CliError> {
    if let Some(s) = seed {
        config.source.seed = s;
        config.target.seed = s.wrapping_add(1);
    }
    let specs: Vec<&SuiteSpec> = match args.which {
        Which::Source => vec![&config.source],
        Which::Target => vec![&config.target],
        Which::Both => vec![&config.source, &config.target],
    };
    for spec in specs {
        let dir = args.out.join(&spec.name);
        let n = data::write_suite(spec, &dir)?;
        println!("{}: {n} instances -> {}", spec.name, dir.display());
    }
    Ok(())
}

fn pretrain(mut config: ExperimentConfig, seed: Option<u64>, args: &PretrainArgs) -> Result<(), CliError> {
    if let Some(s) = seed {
        config.init_seed = s;
        config.pretrain.seed = s;
    }
    if let Some(e) = args.epochs {
        config.pretrain.epochs = e;
    }
    config.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (outcome, meta) = config.pretrain().map_err(CliError::runtime)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(CliError::runtime)?;
    }
    Checkpoint::new(&outcome.model, Some(&outcome.optim), Some(meta))
        .save(&args.out)
        .map_err(CliError::runtime)?;
    let last = outcome.loss_trace.last().copied().unwrap_or(f64::NAN);
    println!(
        "pretrained {} parameters for {} epochs (final loss {last:.4}) -> {}",
        outcome.model.param_count(),
        outcome.loss_trace.len(),
        args.out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<cici_core::BvpNetMini, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint not found: {}", path.display())));
    }
    Checkpoint::load(path)
        .and_then(|c| c.model())
        .map_err(|e| CliError::Usage(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn target_stream(config: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<LabeledInstance>, CliError> {
    match dir {
        Some(dir) => data::read_suite(dir),
        None => config.target.instances().map_err(CliError::runtime),
    }
}

fn adapt(mut config: ExperimentConfig, seed: Option<u64>, args: &AdaptArgs) -> Result<(), CliError> {
    if let Some(m) = args.mode {
        config.run.mode = m;
    }
    args.tuning.apply(&mut config.run);
    validate_run(&config.run)?;
    let model = load_model(&args.checkpoint)?;
    let stream = target_stream(&config, args.tuning.target.as_deref())?;
    let seed = seed.unwrap_or(0);
    let report = harness::run_tta(&model, &stream, &config.run, seed).map_err(CliError::runtime)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(CliError::runtime)?;
    }
    report.save_csv(&args.out).map_err(CliError::runtime)?;
    let json = serde_json::json!({ "config": report.config, "seed": seed, "summary": report.summary });
    let summary_path = args.out.with_extension("json");
    fs::write(&summary_path, serde_json::to_string_pretty(&json).map_err(CliError::runtime)?)
        .map_err(CliError::runtime)?;
    let s = &report.summary;
    println!(
        "{} seed {seed}: {} steps, MAE {:.3} -> {:.3} bpm, RMSE {:.3} -> {:.3} bpm, {} updates, {} conflicts",
        s.mode, s.steps, s.pre.mae, s.post.mae, s.pre.rmse, s.post.rmse, s.updates, s.conflicts
    );
    println!("report -> {}, summary -> {}", args.out.display(), summary_path.display());
    Ok(())
}

fn suite(mut config: ExperimentConfig, seed: Option<u64>, args: &SuiteArgs) -> Result<(), CliError> {
    if !args.modes.is_empty() {
        config.modes = args.modes.clone();
    }
    if !args.seeds.is_empty() {
        config.seeds = args.seeds.clone();
    } else if let Some(s) = seed {
        let n = config.seeds.len().max(1) as u64;
        config.seeds = (s..s + n).collect();
    }
    args.tuning.apply(&mut config.run);
    validate_run(&config.run)?;
    if config.modes.is_empty() || config.seeds.is_empty() {
        return Err(CliError::Usage("a suite needs at least one mode and one seed".into()));
    }
    let model = load_model(&args.checkpoint)?;
    let stream = target_stream(&config, args.tuning.target.as_deref())?;
    let outcome = run_suite(&model, &stream, &config.run_configs(), &config.seeds).map_err(CliError::runtime)?;
    write_suite_outputs(&outcome, &args.out).map_err(CliError::runtime)?;
    println!("{:<14} {:>6} {:>10} {:>16} {:>16}", "label", "seeds", "MAE pre", "MAE post", "RMSE post");
    for s in &outcome.summaries {
        println!(
            "{:<14} {:>6} {:>10.3} {:>9.3} ± {:<5.3} {:>9.3} ± {:<5.3}",
            s.label,
            s.seeds.len(),
            s.mae_pre_mean,
            s.mae_post_mean,
            s.mae_post_std,
            s.rmse_post_mean,
            s.rmse_post_std
        );
    }
    println!("outputs -> {}", args.out.display());
    if outcome.failures.is_empty() {
        return Ok(());
    }
    for f in &outcome.failures {
        eprintln!("run {} seed {} failed: {}", f.label, f.seed, f.message);
    }
    Err(CliError::Runtime(format!("{} run(s) failed", outcome.failures.len())))
}

/// Splits `report_<label>_seed<n>.csv` into label and seed.
fn parse_report_name(name: &str) -> Option<(String, u64)> {
    let stem = name.strip_prefix("report_")?.strip_suffix(".csv")?;
    let (label, seed) = stem.rsplit_once("_seed")?;
    Some((label.to_string(), seed.parse().ok()?))
}

struct LoadedReport {
    label: String,
    seed: Option<u64>,
    rows: Vec<TtaRow>,
}

fn load_reports(input: &Path) -> Result<Vec<LoadedReport>, CliError> {
    let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("{}: {e}", input.display()));
    if input.is_file() {
        let name = input.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let (label, seed) = match parse_report_name(name) {
            Some((l, s)) => (l, Some(s)),
            None => (name.trim_end_matches(".csv").to_string(), None),
        };
        let rows = read_report_rows(input).map_err(|e| bad(&e))?;
        return Ok(vec![LoadedReport { label, seed, rows }]);
    }
    if !input.is_dir() {
        return Err(CliError::Usage(format!("report input not found: {}", input.display())));
    }
    let mut names: Vec<(String, u64, PathBuf)> = fs::read_dir(input)
        .map_err(|e| bad(&e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let path = e.path();
            let (label, seed) = parse_report_name(path.file_name()?.to_str()?)?;
            Some((label, seed, path))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Usage(format!("no report_*.csv files in {}", input.display())));
    }
    names
        .into_iter()
        .map(|(label, seed, path)| {
            let rows = read_report_rows(&path).map_err(|e| bad(&e))?;
            Ok(LoadedReport {
                label,
                seed: Some(seed),
                rows,
            })
        })
        .collect()
}

fn report(seed: Option<u64>, args: &ReportArgs) -> Result<(), CliError> {
    let mut reports = load_reports(&args.input)?;
    if let Some(s) = seed {
        reports.retain(|r| r.seed == Some(s));
        if reports.is_empty() {
            return Err(CliError::Usage(format!("no reports with seed {s}")));
        }
    }
    let curve = |rows: &[TtaRow]| -> Vec<f64> {
        match args.window {
            Some(w) => running_mae(rows, w),
            None => pass_running_mae(rows),
        }
    };
    println!(
        "{:<14} {:>5} {:>6} {:>9} {:>9} {:>10} {:>9} {:>11}",
        "label", "seed", "steps", "MAE pre", "MAE post", "RMSE post", "r post", "final run."
    );
    let mut curves: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for r in &reports {
        let gt: Vec<f64> = r.rows.iter().map(|x| x.gt_hr_bpm).collect();
        let pre: Vec<f64> = r.rows.iter().map(|x| x.pre_hr_bpm).collect();
        let post: Vec<f64> = r.rows.iter().map(|x| x.post_hr_bpm).collect();
        let (Ok(m_pre), Ok(m_post)) = (dsp::metrics(&pre, &gt), dsp::metrics(&post, &gt)) else {
            println!("{:<14} {:>5} {:>6}", r.label, fmt_seed(r.seed), 0);
            continue;
        };
        let c = curve(&r.rows);
        println!(
            "{:<14} {:>5} {:>6} {:>9.3} {:>9.3} {:>10.3} {:>9} {:>11.3}",
            r.label,
            fmt_seed(r.seed),
            r.rows.len(),
            m_pre.mae,
            m_post.mae,
            m_post.rmse,
            m_post.pearson.map_or("-".into(), |p| format!("{p:.3}")),
            c.last().copied().unwrap_or(f64::NAN)
        );
        curves.entry(&r.label).or_default().push(c);
    }
    if let Some(path) = &args.plot {
        let series: Vec<plot::Series> = curves
            .iter()
            .map(|(label, cs)| {
                let len = cs.iter().map(Vec::len).min().unwrap_or(0);
                let y: Vec<f64> = (0..len)
                    .map(|i| cs.iter().map(|c| c[i]).sum::<f64>() / cs.len() as f64)
                    .collect();
                let offset = reports
                    .iter()
                    .find(|r| r.label == *label)
                    .map_or(0, |r| r.rows.len() - cs[0].len());
                plot::Series {
                    name: format!("{label} (n={})", cs.len()),
                    x: (0..len).map(|i| (i + offset + 1) as f64).collect(),
                    y,
                }
            })
            .collect();
        let svg = plot::render("Running MAE during adaptation", "step", "running MAE (bpm)", &series);
        fs::write(path, svg).map_err(CliError::runtime)?;
        println!("plot -> {}", path.display());
    }
    Ok(())
}

fn fmt_seed(seed: Option<u64>) -> String {
    seed.map_or("-".into(), |s| s.to_string())
}
