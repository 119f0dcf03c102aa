//! Argument parsing and command execution for the `drm-lab` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use drm_core::datagen::{
    load_dataset, save_dataset, Benchmark, DomainDataset, DomainSpec, GeneratorParams, DEFAULT_SAMPLES_PER_DOMAIN,
};
use drm_core::eval::suite::{run_suite, CheckOutcome, SuiteSettings};
use drm_core::eval::{
    ablation_grid, arm_report, compare_report, plot_rows, AblationRow, ComparisonReport, RunSummary,
};
use drm_core::trainer::{checkpoint, read_metrics, train, ExperimentConfig, HeadMode, Model};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Help or version text requested; exit code 0.
    #[error("{0}")]
    Info(String),
    /// A failure while running; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Info(_) => 0,
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

impl From<drm_core::Error> for CliError {
    fn from(e: drm_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "drm-lab",
    version,
    about = "Discriminant risk minimization experiments on synthetic multi-domain data",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Generate the default benchmark (sources.bin, target.bin) into --out.
    GenData(GenDataArgs),
    /// Train a model and write config, metrics and checkpoints to --out.
    Train(ConfigArgs),
    /// Evaluate a finished run on sources and target.
    Evaluate(EvaluateArgs),
    /// Run the theorem checks and write theorems.json to --out.
    VerifyTheorems(VerifyArgs),
    /// Train the six-arm ablation grid over several seeds.
    Ablate(AblateArgs),
    /// Compare a DRM run against an ERM run.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// The standard hyperparameters.
    Standard,
    /// Larger learning rates and more steps, sized for the synthetic benchmark.
    Desk,
}

impl Preset {
    fn config(self) -> ExperimentConfig {
        match self {
            Preset::Standard => ExperimentConfig::default(),
            Preset::Desk => ExperimentConfig::desk_scale(),
        }
    }
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config file; its fields override the preset, flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "standard")]
    preset: Preset,
    /// Weight of the CDR penalty.
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Sliding rate of the Discriminant matrix.
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// Weight samples per batch (T).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr_extractor: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lr_head: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    prior_var: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Source dataset written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Target dataset, recorded for later evaluation.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plain ERM: no penalty and a deterministic head.
    #[arg(long)]
    erm_baseline: bool,
    /// Deterministic head (σ frozen at zero).
    #[arg(long)]
    freeze_sigma: bool,
    /// Drop the CDR penalty (alpha = 0).
    #[arg(long, conflicts_with = "alpha")]
    no_cdr: bool,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SAMPLES_PER_DOMAIN)]
    samples_per_domain: usize,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Run directory written by train.
    #[arg(long)]
    run: PathBuf,
    /// Source dataset; defaults to the one recorded in the run config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Target dataset; defaults to the one recorded in the run config.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Report directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Random N-splits per N in the bound check.
    #[arg(long)]
    trials: Option<usize>,
    /// Seeds in the transfer check.
    #[arg(long)]
    transfer_seeds: Option<usize>,
    /// Fewer trials and seeds, for smoke runs.
    #[arg(long)]
    quick: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seeds to average over.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    drm: PathBuf,
    #[arg(long)]
    erm: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// ablation.json written by the ablate command, embedded in the report.
    #[arg(long)]
    ablation: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    GenData {
        samples_per_domain: usize,
    },
    Train,
    Evaluate {
        run: PathBuf,
    },
    VerifyTheorems {
        settings: Box<SuiteSettings>,
    },
    Ablate {
        seeds: Vec<u64>,
    },
    Compare {
        drm: PathBuf,
        erm: PathBuf,
        ablation: Option<PathBuf>,
    },
}

/// A parsed invocation. `config` is fully resolved; `data`, `target` and
/// `out` carry the paths the action reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub action: Action,
    pub config: ExperimentConfig,
}

fn merge_json(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                b.insert(k, v);
            }
        }
        (b, o) => *b = o,
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut config = self.preset.config();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let file: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
            let mut merged = serde_json::to_value(&config).expect("config serializes");
            merge_json(&mut merged, file);
            config = serde_json::from_value(merged)
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { config.$field = v; })*
            };
        }
        set!(alpha => alpha, beta => beta, samples => samples, batch_size => batch_size,
             lr_extractor => lr_extractor, lr_head => lr_head, prior_var => prior_variance,
             steps => steps, seed => seed);
        if let Some(p) = &self.data {
            config.data = Some(p.clone());
        }
        if let Some(p) = &self.target {
            config.target = Some(p.clone());
        }
        if let Some(p) = &self.out {
            config.out = Some(p.clone());
        }
        if self.no_cdr {
            config.alpha = 0.0;
        }
        if self.freeze_sigma {
            config.head = HeadMode::Deterministic;
        }
        if self.erm_baseline {
            config = config.erm_baseline();
        }
        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(config)
    }
}

fn require(path: &Option<PathBuf>, flag: &str) -> Result<(), CliError> {
    match path {
        Some(_) => Ok(()),
        None => Err(CliError::Usage(format!("missing required path {flag}"))),
    }
}

/// Parses a full argv (program name first). Unknown flags, invalid values and
/// missing required paths are usage errors.
pub fn parse_args<I, T>(argv: I) -> Result<Command, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| {
        use clap::error::ErrorKind;
        let text = e.render().to_string();
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => CliError::Info(text),
            _ => CliError::Usage(text.trim_end().to_string()),
        }
    })?;
    match cli.command {
        Sub::GenData(a) => Ok(Command {
            action: Action::GenData {
                samples_per_domain: a.samples_per_domain,
            },
            config: ExperimentConfig {
                seed: a.seed,
                out: Some(a.out),
                ..ExperimentConfig::default()
            },
        }),
        Sub::Train(a) => {
            let config = a.resolve()?;
            require(&config.data, "--data")?;
            require(&config.out, "--out")?;
            Ok(Command {
                action: Action::Train,
                config,
            })
        }
        Sub::Evaluate(a) => Ok(Command {
            action: Action::Evaluate { run: a.run },
            config: ExperimentConfig {
                data: a.data,
                target: a.target,
                out: a.out,
                ..ExperimentConfig::default()
            },
        }),
        Sub::VerifyTheorems(a) => {
            let config = a.config.resolve()?;
            require(&config.out, "--out")?;
            let mut settings = SuiteSettings {
                config: config.clone(),
                seed: config.seed,
                bound_seeds: vec![config.seed],
                ..SuiteSettings::default()
            };
            if a.quick {
                settings.bound_trials = 50;
                settings.variance_reps = 100;
                settings.transfer_seeds = 5;
            }
            if let Some(t) = a.trials {
                settings.bound_trials = t;
            }
            if let Some(s) = a.transfer_seeds {
                settings.transfer_seeds = s;
            }
            if settings.bound_trials == 0 || settings.transfer_seeds == 0 {
                return Err(CliError::Usage("trial and seed counts must be positive".into()));
            }
            Ok(Command {
                action: Action::VerifyTheorems {
                    settings: Box::new(settings),
                },
                config,
            })
        }
        Sub::Ablate(a) => {
            let config = a.config.resolve()?;
            require(&config.out, "--out")?;
            if a.seeds.is_empty() {
                return Err(CliError::Usage("--seeds needs at least one seed".into()));
            }
            Ok(Command {
                action: Action::Ablate { seeds: a.seeds },
                config,
            })
        }
        Sub::Compare(a) => Ok(Command {
            action: Action::Compare {
                drm: a.drm,
                erm: a.erm,
                ablation: a.ablation,
            },
            config: ExperimentConfig {
                data: a.data,
                target: a.target,
                out: Some(a.out),
                ..ExperimentConfig::default()
            },
        }),
    }
}

/// Executes a parsed command. Progress goes to stdout.
pub fn run(cmd: &Command) -> Result<(), CliError> {
    let config = &cmd.config;
    match &cmd.action {
        Action::GenData { samples_per_domain } => gen_data(config, *samples_per_domain),
        Action::Train => run_train(config),
        Action::Evaluate { run } => evaluate(run, config),
        Action::VerifyTheorems { settings } => verify(settings, config),
        Action::Ablate { seeds } => ablate(config, seeds),
        Action::Compare { drm, erm, ablation } => compare(drm, erm, ablation.as_deref(), config),
    }
}

/// Parses and runs, printing diagnostics; returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let result = parse_args(argv).and_then(|cmd| run(&cmd));
    match result {
        Ok(()) => 0,
        Err(CliError::Info(text)) => {
            print!("{text}");
            0
        }
        Err(e @ CliError::Usage(_)) => {
            eprintln!("{e}");
            e.exit_code()
        }
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("drm-lab: {line}");
            e.exit_code()
        }
    }
}

fn out_dir(config: &ExperimentConfig) -> Result<&Path, CliError> {
    let dir = config
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("missing required path --out".into()))?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load(path: &Path) -> Result<DomainDataset, CliError> {
    load_dataset(path).map_err(|e| io_err(path, e))
}

fn gen_data(config: &ExperimentConfig, per_domain: usize) -> Result<(), CliError> {
    let dir = out_dir(config)?;
    let (mut sources, mut target) = Benchmark::default_specs();
    let resize = |s: &mut DomainSpec| s.sample_count = per_domain;
    sources.iter_mut().for_each(resize);
    resize(&mut target);
    let bench = Benchmark::generate(GeneratorParams::default_benchmark(), &sources, &target, config.seed)?;
    save_dataset(&bench.merged_sources(), &dir.join("sources.bin"))?;
    save_dataset(&bench.target, &dir.join("target.bin"))?;
    let resolved = ExperimentConfig {
        data: Some(dir.join("sources.bin")),
        target: Some(dir.join("target.bin")),
        ..config.clone()
    };
    write_json(&dir.join("config.json"), &resolved)?;
    println!(
        "wrote {} source and {} target samples to {}",
        bench.merged_sources().len(),
        bench.target.len(),
        dir.display()
    );
    Ok(())
}

fn run_train(config: &ExperimentConfig) -> Result<(), CliError> {
    let dir = out_dir(config)?;
    let data_path = config.data.as_deref().expect("checked at parse time");
    let data = load(data_path)?;
    let out = train(config, &data.training_view(), Some(dir))?;
    let last = out.history.last();
    let mut line = format!(
        "trained {} steps (final total loss {:.4})",
        out.history.len(),
        last.map_or(f64::NAN, |m| m.total)
    );
    if let Some(acc) = out.best_val_acc {
        let _ = write!(line, ", best validation accuracy {acc:.4}");
    }
    if let Some(path) = &config.target {
        let target = load(path)?;
        let acc = drm_core::eval::accuracy(&out.best_model(config), &target)?;
        let _ = write!(line, ", target accuracy {acc:.4}");
    }
    println!("{line}; outputs in {}", dir.display());
    Ok(())
}

struct LoadedRun {
    summary: RunSummary,
    model: Model,
}

fn load_run(dir: &Path) -> Result<LoadedRun, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Runtime(format!("run directory {} does not exist", dir.display())));
    }
    let config_path = dir.join("config.json");
    let text = fs::read_to_string(&config_path).map_err(|e| io_err(&config_path, e))?;
    let config: ExperimentConfig = serde_json::from_str(&text).map_err(|e| io_err(&config_path, e))?;
    let history = read_metrics(&dir.join("metrics.csv")).map_err(|e| io_err(&dir.join("metrics.csv"), e))?;
    let best = checkpoint::load(&dir.join("best.bin")).map_err(|e| io_err(&dir.join("best.bin"), e))?;
    let model = best.snapshot(config.head, config.samples, config.seed);
    Ok(LoadedRun {
        summary: RunSummary { config, history },
        model,
    })
}

fn pick(flag: &Option<PathBuf>, recorded: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| recorded.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what} path given and none recorded in the run config")))
}

fn evaluate(run: &Path, config: &ExperimentConfig) -> Result<(), CliError> {
    let loaded = load_run(run)?;
    let recorded = &loaded.summary.config;
    let sources = load(&pick(&config.data, &recorded.data, "--data")?)?;
    let target = load(&pick(&config.target, &recorded.target, "--target")?)?;
    let report = arm_report("model", &loaded.model, &sources, &target)?;
    let dir = config.out.clone().unwrap_or_else(|| run.to_path_buf());
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write_json(&dir.join("report.json"), &report)?;
    for m in &report.confusions {
        let id = m.domain_id.map_or("all".to_string(), |d| d.to_string());
        write_text(&dir.join(format!("confusion_domain_{id}.csv")), &m.to_csv())?;
    }
    println!(
        "source accuracy {:.4}, target accuracy {:.4}, confusion divergence {:.5}, source risk {:.5}, target risk {:.5}",
        report.source_accuracy,
        report.target_accuracy,
        report.confusion_divergence,
        report.source_risk,
        report.target_risk
    );
    Ok(())
}

#[derive(Serialize)]
struct TheoremDocument<'a> {
    passed: bool,
    config: &'a ExperimentConfig,
    checks: &'a [CheckOutcome],
}

fn verify(settings: &SuiteSettings, config: &ExperimentConfig) -> Result<(), CliError> {
    let dir = out_dir(config)?;
    write_json(&dir.join("config.json"), config)?;
    let checks = run_suite(settings)?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.summary);
    }
    let doc = TheoremDocument {
        passed: checks.iter().all(|c| c.passed),
        config,
        checks: &checks,
    };
    write_json(&dir.join("theorems.json"), &doc)?;
    Ok(())
}

fn render_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<22}{:>10}{:>10}\n", "arm", "mean", "std");
    for r in rows {
        let _ = writeln!(s, "{:<22}{:>10.4}{:>10.4}", r.label, r.mean, r.std);
    }
    s
}

fn ablate(config: &ExperimentConfig, seeds: &[u64]) -> Result<(), CliError> {
    let dir = out_dir(config)?;
    write_json(&dir.join("config.json"), config)?;
    let files = match (&config.data, &config.target) {
        (Some(d), Some(t)) => Some((load(d)?, load(t)?)),
        (None, None) => None,
        _ => return Err(CliError::Usage("ablate needs both --data and --target, or neither".into())),
    };
    let rows = ablation_grid(config, seeds, |seed| match &files {
        Some((s, t)) => Ok((s.clone(), t.clone())),
        None => {
            let b = Benchmark::default_with_seed(seed)?;
            Ok((b.merged_sources(), b.target))
        }
    })?;
    write_json(&dir.join("ablation.json"), &rows)?;
    let text = render_ablation(&rows);
    write_text(&dir.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn compare(drm: &Path, erm: &Path, ablation: Option<&Path>, config: &ExperimentConfig) -> Result<(), CliError> {
    let a = load_run(drm)?;
    let b = load_run(erm)?;
    let rec = &a.summary.config;
    let sources = load(&pick(&config.data, &rec.data, "--data")?)?;
    let target = load(&pick(&config.target, &rec.target, "--target")?)?;
    let rows: Vec<AblationRow> = match ablation {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| io_err(p, e))?
        }
        None => Vec::new(),
    };
    let report: ComparisonReport =
        compare_report((&a.summary, &a.model), (&b.summary, &b.model), &sources, &target, rows)?;
    let dir = out_dir(config)?;
    write_json(&dir.join("comparison.json"), &report)?;
    let text = report.to_text();
    write_text(&dir.join("comparison.txt"), &text)?;

    let plot = plot_rows(&[("drm", &a.summary.history), ("erm", &b.summary.history)]);
    let mut csv = String::from("step,series,value\n");
    for r in &plot {
        let _ = writeln!(csv, "{},{},{}", r.step, r.series, r.value);
    }
    write_text(&dir.join("plot.csv"), &csv)?;
    for (arm, report) in [("drm", &report.drm), ("erm", &report.erm)] {
        for m in &report.confusions {
            let id = m.domain_id.map_or("all".to_string(), |d| d.to_string());
            write_text(&dir.join(format!("confusion_{arm}_domain_{id}.csv")), &m.to_csv())?;
        }
    }
    print!("{text}");
    Ok(())
}
