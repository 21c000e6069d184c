//! `tsdesign`: run, ablate, sweep and profile forecasting configs, generate
//! synthetic data, derive model cards and build reports.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tsdesign::assembly::ModelConfig;
use tsdesign::dataio::synth::{synth_calendar_seasonal, synth_local_ar, synth_spatial_mixing};
use tsdesign::dataio::{load_csv, RhoSpec, SeriesCollection};
use tsdesign::harness::{
    ablate, prepare, profile, read_log, run_experiment, sweep_hidden, AblationAxis, ResultLog, TrainSpec,
    DEFAULT_HIDDEN_GRID,
};
use tsdesign::modelcard::{derive_card, parse, render, validate};

use report::{Format, GroupBy};

#[derive(Parser)]
#[command(name = "tsdesign", version, about = "Forecasting design-space benchmark")]
struct Cli {
    /// Worker threads for parallel seeds (defaults to the number of cores).
    #[arg(long, env = "TSDESIGN_WORKERS", global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one config over several seeds.
    Run {
        #[command(flatten)]
        exp: Experiment,
        /// Print the derived model card and exit without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Paired runs with and without one design dimension.
    Ablate {
        #[command(flatten)]
        exp: Experiment,
        /// Design dimension to toggle: d1 (local parameters), d2
        /// (covariates) or d4 (spatial processing).
        #[arg(long)]
        axis: AblationAxis,
    },
    /// Hidden-size sweep picked by validation MSE, then a full run of the winner.
    Sweep {
        #[command(flatten)]
        exp: Experiment,
        /// Hidden sizes to try.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HIDDEN_GRID)]
        grid: Vec<usize>,
    },
    /// Time training steps and count parameters.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Timed batches after warm-up.
        #[arg(long, default_value_t = tsdesign::harness::MIN_TIMED_BATCHES)]
        batches: usize,
    },
    /// Derive a model card, or check an existing one against a config.
    Card {
        #[arg(long)]
        config: PathBuf,
        /// Card to validate instead of deriving one.
        #[arg(long)]
        check: Option<PathBuf>,
        /// Write the derived card here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a table or scatter plot from result logs.
    Report {
        /// JSONL result logs.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
        /// Rows sharing this key compete for bold.
        #[arg(long, value_enum, default_value_t = GroupBy::Dataset)]
        group_by: GroupBy,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset as CSV plus a JSON sidecar with oracle errors.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Experiment {
    /// Model config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Dataset CSV: timestamp column then one column per series.
    #[arg(long)]
    data: PathBuf,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = tsdesign::harness::DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    /// Override the config's lookback window.
    #[arg(long)]
    window: Option<usize>,
    /// Override the config's forecast horizon.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = tsdesign::harness::DEFAULT_MAX_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = tsdesign::harness::DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = tsdesign::harness::DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = tsdesign::harness::DEFAULT_PATIENCE)]
    patience: usize,
    /// Cap on training batches per epoch.
    #[arg(long)]
    max_batches: Option<usize>,
    /// Also report metrics in the data's original units.
    #[arg(long)]
    unscaled: bool,
    /// JSONL log that results are appended to.
    #[arg(long, default_value = "results.jsonl")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    LocalAr,
    SpatialMixing,
    CalendarSeasonal,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(value_enum)]
    generator: Generator,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 2048)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// local-ar: the two alternating AR coefficients.
    #[arg(long, value_delimiter = ',', default_values_t = [-0.8, 0.8])]
    rho: Vec<f64>,
    /// spatial-mixing: series per block.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// spatial-mixing: every series drives itself instead.
    #[arg(long)]
    independent: bool,
    /// calendar-seasonal: per-phase means over the day.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = [1.0, -1.0])]
    means: Vec<f64>,
    /// Output stem; `.csv` and `.json` are appended.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    keep_heap();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Training frees and reallocates large tensors each step; keeping them on
/// the heap avoids a page-fault storm under glibc.
fn keep_heap() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: option setters called before any other thread starts.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 28);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

/// `Ok(false)` means the command ran but found violations.
fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Run { exp, dry_run } => cmd_run(&exp, dry_run),
        Command::Ablate { exp, axis } => cmd_ablate(&exp, axis),
        Command::Sweep { exp, grid } => cmd_sweep(&exp, &grid),
        Command::Profile {
            config,
            data,
            window,
            horizon,
            batch_size,
            batches,
        } => cmd_profile(&config, &data, window, horizon, batch_size, batches),
        Command::Card { config, check, out } => cmd_card(&config, check.as_deref(), out.as_deref()),
        Command::Report {
            logs,
            format,
            group_by,
            out,
        } => cmd_report(&logs, format, group_by, out.as_deref()),
        Command::Synth(args) => cmd_synth(&args),
    }
}

fn load_config(path: &Path, window: Option<usize>, horizon: Option<usize>) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::load(path).with_context(|| format!("invalid config {}", path.display()))?;
    if window.is_some() || horizon.is_some() {
        cfg.window = window.unwrap_or(cfg.window);
        cfg.horizon = horizon.unwrap_or(cfg.horizon);
        cfg.validate().context("invalid window or horizon override")?;
    }
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<(String, SeriesCollection)> {
    let col = load_csv(path).with_context(|| format!("cannot load {}", path.display()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    Ok((name, col))
}

impl Experiment {
    fn spec(&self) -> TrainSpec {
        TrainSpec {
            max_epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            patience: self.patience,
            seeds: self.seeds.clone(),
            max_batches_per_epoch: self.max_batches,
            unscaled: self.unscaled,
            ..TrainSpec::default()
        }
    }

    fn load(&self) -> Result<(ModelConfig, String, SeriesCollection, TrainSpec)> {
        let cfg = load_config(&self.config, self.window, self.horizon)?;
        let (name, col) = load_data(&self.data)?;
        let spec = self.spec();
        spec.validate()?;
        Ok((cfg, name, col, spec))
    }
}

fn cmd_run(exp: &Experiment, dry_run: bool) -> Result<bool> {
    if dry_run {
        let cfg = load_config(&exp.config, exp.window, exp.horizon)?;
        print!("{}", render(&derive_card(&cfg)?));
        return Ok(true);
    }
    let (cfg, name, col, spec) = exp.load()?;
    let log = ResultLog::new(&exp.out);
    let r = run_experiment(&cfg, &name, &col, &spec, Some(&log))?;
    println!(
        "{} on {}: MSE {} MAE {} ({} parameters, {:.2} ms per batch)",
        r.label, r.dataset, r.mse, r.mae, r.param_count, r.batch_time_ms
    );
    Ok(true)
}

fn cmd_ablate(exp: &Experiment, axis: AblationAxis) -> Result<bool> {
    let (cfg, name, col, spec) = exp.load()?;
    let log = ResultLog::new(&exp.out);
    let a = ablate(&cfg, axis, &name, &col, &spec, Some(&log))?;
    print!("{}", report::delta_table(std::slice::from_ref(&a)));
    Ok(true)
}

fn cmd_sweep(exp: &Experiment, grid: &[usize]) -> Result<bool> {
    let (cfg, name, col, spec) = exp.load()?;
    let sweep = sweep_hidden(&cfg, &col, &spec, grid)?;
    for (hidden, score) in &sweep.scores {
        println!("hidden {hidden}: val MSE {score:.4}");
    }
    println!("selected hidden {}", sweep.best.hidden);
    let log = ResultLog::new(&exp.out);
    let r = run_experiment(&sweep.best, &name, &col, &spec, Some(&log))?;
    println!("{} on {}: MSE {} MAE {}", r.label, r.dataset, r.mse, r.mae);
    Ok(true)
}

fn cmd_profile(
    config: &Path,
    data: &Path,
    window: Option<usize>,
    horizon: Option<usize>,
    batch_size: usize,
    batches: usize,
) -> Result<bool> {
    let cfg = load_config(config, window, horizon)?;
    let (_, col) = load_data(data)?;
    let prepared = prepare(&cfg, &col, &TrainSpec::default())?;
    let p = profile(&cfg, &prepared, batch_size, batches)?;
    println!("{}", serde_json::to_string_pretty(&p)?);
    Ok(true)
}

fn cmd_card(config: &Path, check: Option<&Path>, out: Option<&Path>) -> Result<bool> {
    let cfg = load_config(config, None, None)?;
    let Some(card_path) = check else {
        let text = render(&derive_card(&cfg)?);
        match out {
            Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))?,
            None => print!("{text}"),
        }
        return Ok(true);
    };
    let doc = std::fs::read_to_string(card_path).with_context(|| format!("cannot read {}", card_path.display()))?;
    let violations = validate(&parse(&doc)?, &cfg)?;
    for v in &violations {
        eprintln!("violation: {}: {}", v.field, v.message);
    }
    if violations.is_empty() {
        println!("card matches config");
    }
    Ok(violations.is_empty())
}

fn cmd_report(logs: &[PathBuf], format: Format, group_by: GroupBy, out: Option<&Path>) -> Result<bool> {
    let mut results = Vec::new();
    for path in logs {
        let records = read_log(path).with_context(|| format!("cannot read {}", path.display()))?;
        results.extend(records.into_iter().map(|r| r.result));
    }
    if results.is_empty() {
        bail!("the logs hold no records");
    }
    let text = match format {
        Format::Markdown => report::markdown_table(&results, group_by),
        Format::Svg => report::svg_scatter(&results)?,
    };
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(true)
}

fn cmd_synth(args: &SynthArgs) -> Result<bool> {
    let data = match args.generator {
        Generator::LocalAr => {
            let [a, b] = args.rho[..] else {
                bail!("--rho takes exactly two coefficients");
            };
            synth_local_ar(args.n, args.steps, args.sigma, RhoSpec::TwoPoint { a, b }, args.seed)?
        }
        Generator::SpatialMixing => {
            synth_spatial_mixing(args.n, args.steps, args.k, args.sigma, !args.independent, args.seed)?
        }
        Generator::CalendarSeasonal => synth_calendar_seasonal(args.n, args.steps, &args.means, args.sigma, args.seed)?,
    };
    let (csv, meta) = data.export(&args.out)?;
    println!(
        "wrote {} and {} (oracle informed {:.4}, blind {:.4})",
        csv.display(),
        meta.display(),
        data.oracle.informed,
        data.oracle.blind
    );
    Ok(true)
}
