//! Command-line front end: a TOML run configuration, flag overrides, and
//! one subcommand per pipeline stage or experiment.
//!
//! Precedence for every setting: flag > config file > environment > default
//! (the environment only supplies `PROMPTWEAVE_SEED`). Each subcommand that
//! writes an output also dumps the fully resolved configuration next to it
//! for provenance.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backbone::{ConfigError, ModelConfig, Task};
use crate::data::{generate_synthetic, load_dataset, save_dataset, DataError, ModalityBundle, SyntheticSpec};
use crate::eval::{
    count_params_checkpoint, count_params_config, evaluate_cases, sweep_prompt_length,
    sweep_test_missing_rate, sweep_train_missing_rate, write_report_outputs, write_sweep_outputs,
    EvalError, Evaluator, ParamCounts, SweepResult,
};
use crate::numerics::gradcheck::run_primitive_checks;
use crate::numerics::rng::Rng;
use crate::training::{
    parse_subset, pipeline_gradcheck, pretrain, prompt_tune, BaselineMode, Stage, TrainConfig,
    TrainError,
};

#[derive(Debug)]
pub enum CliError {
    Eval(EvalError),
    Train(TrainError),
    Data(DataError),
    Config(ConfigError),
    Io(std::io::Error),
    TomlDe(toml::de::Error),
    TomlSer(toml::ser::Error),
    /// A flag, config field, or required input is unusable; named so the
    /// diagnostic points at what to fix.
    Invalid { field: String, message: String },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Eval(e) => write!(f, "{e}"),
            CliError::Train(e) => write!(f, "{e}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
            CliError::TomlDe(e) => write!(f, "config: {e}"),
            CliError::TomlSer(e) => write!(f, "config dump: {e}"),
            CliError::Invalid { field, message } => write!(f, "`{field}`: {message}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Eval(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::TomlDe(e)
    }
}

impl From<toml::ser::Error> for CliError {
    fn from(e: toml::ser::Error) -> Self {
        CliError::TomlSer(e)
    }
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// Grids for the three sweep axes and whether to render charts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    pub test_grid: Vec<f64>,
    pub train_grid: Vec<f64>,
    pub prompt_grid: Vec<usize>,
    pub svg: bool,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            test_grid: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            train_grid: vec![0.0, 0.3, 0.7],
            prompt_grid: vec![2, 4, 8, 16],
            svg: false,
        }
    }
}

/// Where datasets, checkpoints, and reports live. Relative paths resolve
/// against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    /// Written by `pretrain`, read by `tune` and the retuning sweeps.
    pub pretrained: PathBuf,
    /// Written by `tune`, read by `eval` and the test-rate sweep.
    pub tuned: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            pretrained: PathBuf::from("out/pretrained.ckpt"),
            tuned: PathBuf::from("out/tuned.ckpt"),
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Everything one run needs, merged from defaults, the config file, and
/// flags. The training stage is set by the subcommand, and the top-level
/// `seed` governs every stage (any `[train] seed` key is overwritten).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub sweep: SweepSettings,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            // A nonzero shift makes the tune domain differ from the
            // pretrain domain out of the box.
            data: SyntheticSpec {
                domain_shift_seed: 7,
                ..SyntheticSpec::default()
            },
            sweep: SweepSettings::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Checks every section plus the cross-section constraints: the model
    /// and the synthetic data must agree on geometry and task.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.model.seq_len != self.data.seq_len {
            return Err(invalid(
                "data.seq_len",
                format!("{:?} does not match model.seq_len {:?}", self.data.seq_len, self.model.seq_len),
            ));
        }
        if self.model.d_raw != self.data.d_raw {
            return Err(invalid(
                "data.d_raw",
                format!("{:?} does not match model.d_raw {:?}", self.data.d_raw, self.model.d_raw),
            ));
        }
        if self.model.task != self.data.task {
            return Err(invalid(
                "data.task",
                format!("{:?} does not match model.task {:?}", self.data.task, self.model.task),
            ));
        }
        Ok(())
    }
}

/// flag > config file > PROMPTWEAVE_SEED > 1.
fn resolve_seed(flag: Option<u64>, file: Option<u64>, env: Option<u64>) -> u64 {
    flag.or(file).or(env).unwrap_or(1)
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("PROMPTWEAVE_SEED") {
        Ok(s) => s
            .parse::<u64>()
            .map(Some)
            .map_err(|e| invalid("PROMPTWEAVE_SEED", format!("{s:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: Option<&Path>, seed_flag: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg: RunConfig = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| invalid("--config", format!("{}: {e}", p.display())))?;
            toml::from_str(&text)?
        }
        None => RunConfig::default(),
    };
    let seed = resolve_seed(seed_flag, cfg.seed, env_seed()?);
    cfg.seed = Some(seed);
    cfg.train.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

/// `out/tuned.ckpt` -> `out/tuned.ckpt.resolved.toml`.
fn resolved_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".resolved.toml");
    output.with_file_name(name)
}

fn dump_resolved(cfg: &RunConfig, next_to: &Path) -> Result<(), CliError> {
    fs::write(resolved_path(next_to), toml::to_string_pretty(cfg)?)?;
    Ok(())
}

fn require_file(field: &str, path: &Path, hint: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(field, format!("{} not found: {}{hint}", field_kind(field), path.display())))
    }
}

fn field_kind(field: &str) -> &'static str {
    if field.contains("data") {
        "dataset"
    } else {
        "checkpoint"
    }
}

fn load_split(dir: &Path, domain: &str, split: &str) -> Result<Vec<ModalityBundle<f32>>, CliError> {
    let path = dir.join(format!("{domain}_{split}.mmjsonl"));
    require_file("paths.data_dir", &path, " (run gen-data first)")?;
    Ok(load_dataset(&path)?)
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineArg {
    /// Full method: prompts plus the generation module.
    None,
    /// Lower bound: retrain on a fixed modality subset.
    Lb,
    /// Modality substitution: frozen backbone, zero-filled gaps, no prompts.
    Ms,
    /// Modality dropout: unfrozen backbone under per-epoch mask resampling.
    Md,
}

impl From<BaselineArg> for BaselineMode {
    fn from(b: BaselineArg) -> BaselineMode {
        match b {
            BaselineArg::None => BaselineMode::None,
            BaselineArg::Lb => BaselineMode::LowerBound,
            BaselineArg::Ms => BaselineMode::Substitution,
            BaselineArg::Md => BaselineMode::ModalityDropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    /// Evaluation-time missing rate, one fixed tuned checkpoint.
    TestEta,
    /// Training-time missing rate, retuned per grid point.
    TrainEta,
    /// Prompt length, retuned per grid point, with IACC and xi columns.
    PromptLen,
}

#[derive(Debug, Parser)]
#[command(
    name = "promptweave",
    version,
    about = "Multimodal prompt tuning under missing modalities: data, training, evaluation, sweeps"
)]
struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// RNG seed (precedence: this flag, config file, PROMPTWEAVE_SEED, 1).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write synthetic datasets for the pretrain and tune domains.
    GenData,
    /// Train the backbone end-to-end on complete pretrain-domain data.
    Pretrain,
    /// Tune a pretrained checkpoint under simulated missingness.
    Tune {
        /// Model variant to produce.
        #[arg(long, value_enum, default_value = "none")]
        baseline: BaselineArg,
        /// Training missing rate override.
        #[arg(long)]
        eta: Option<f64>,
        /// Prompt length override (prompts are built fresh at tune time).
        #[arg(long)]
        prompt_len: Option<usize>,
    },
    /// Report metrics for each of the six missing-modality cases.
    Eval {
        /// Blank every modality outside this set (letters avt), matching
        /// what a lower-bound checkpoint saw in training.
        #[arg(long)]
        subset: Option<String>,
    },
    /// Run one sweep axis and write its CSV report.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Also render an SVG line chart.
        #[arg(long)]
        svg: bool,
    },
    /// Finite-difference gradient oracle over primitives and the pipeline.
    Gradcheck {
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Random coordinates checked per parameter.
        #[arg(long, default_value_t = 2)]
        coords: usize,
    },
    /// Parameter accounting: totals, the frozen/trainable split, ratios.
    Params {
        /// Count a checkpoint instead of the configured model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Parses `argv` and runs one subcommand. Exit codes: 0 success, 1 failure
/// (one-line diagnostic on stderr), 2 usage error (clap's message).
pub fn run_cli(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match &cli.cmd {
        Cmd::GenData => cmd_gen_data(&cfg),
        Cmd::Pretrain => cmd_pretrain(&cfg),
        Cmd::Tune {
            baseline,
            eta,
            prompt_len,
        } => cmd_tune(&cfg, *baseline, *eta, *prompt_len),
        Cmd::Eval { subset } => cmd_eval(&cfg, subset.as_deref()),
        Cmd::Sweep { axis, svg } => cmd_sweep(&cfg, *axis, *svg),
        Cmd::Gradcheck { tol, coords } => cmd_gradcheck(&cfg, *tol, *coords),
        Cmd::Params { checkpoint } => cmd_params(&cfg, checkpoint.as_deref()),
    }
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.data.domain_shift_seed == 0 {
        return Err(invalid(
            "data.domain_shift_seed",
            "must be nonzero so the tune domain differs from the pretrain domain",
        ));
    }
    fs::create_dir_all(&cfg.paths.data_dir)?;
    let rng = Rng::new(cfg.train.seed);
    let pretrain_spec = SyntheticSpec {
        domain_shift_seed: 0,
        ..cfg.data.clone()
    };
    for (domain, spec) in [("pretrain", pretrain_spec), ("tune", cfg.data.clone())] {
        let splits = generate_synthetic::<f32>(&spec, &rng.derive(&format!("gen.{domain}")))?;
        for (split, data) in [
            ("train", &splits.train),
            ("val", &splits.val),
            ("test", &splits.test),
        ] {
            let path = cfg.paths.data_dir.join(format!("{domain}_{split}.mmjsonl"));
            save_dataset(&path, data)?;
            println!("wrote {:>5} samples to {}", data.len(), path.display());
        }
    }
    dump_resolved(cfg, &cfg.paths.data_dir.join("gen_data"))?;
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let train = load_split(&cfg.paths.data_dir, "pretrain", "train")?;
    let val = load_split(&cfg.paths.data_dir, "pretrain", "val")?;
    let tcfg = TrainConfig {
        stage: Stage::Pretrain,
        ..cfg.train.clone()
    };
    ensure_parent(&cfg.paths.pretrained)?;
    let report = pretrain(&cfg.model, &tcfg, &train, &val, &cfg.paths.pretrained)?;
    dump_resolved(cfg, &cfg.paths.pretrained)?;
    println!(
        "pretrained {} epochs; best val loss {:.6} at epoch {}; wrote {}",
        tcfg.epochs,
        report.best_val_loss,
        report.best_epoch,
        cfg.paths.pretrained.display()
    );
    Ok(())
}

fn cmd_tune(
    cfg: &RunConfig,
    baseline: BaselineArg,
    eta: Option<f64>,
    prompt_len: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    cfg.train.stage = Stage::PromptTune;
    cfg.train.baseline = baseline.into();
    if let Some(eta) = eta {
        cfg.train.eta = eta;
    }
    if let Some(lp) = prompt_len {
        cfg.model.prompt_len = lp;
    }
    cfg.validate()?;
    require_file("paths.pretrained", &cfg.paths.pretrained, " (run pretrain first)")?;
    let train = load_split(&cfg.paths.data_dir, "tune", "train")?;
    let val = load_split(&cfg.paths.data_dir, "tune", "val")?;
    ensure_parent(&cfg.paths.tuned)?;
    let report = prompt_tune(
        &cfg.paths.pretrained,
        &cfg.train,
        &train,
        &val,
        prompt_len,
        &cfg.paths.tuned,
    )?;
    dump_resolved(&cfg, &cfg.paths.tuned)?;
    println!(
        "tuned ({:?}, eta {}) {} epochs; best val loss {:.6} at epoch {}; wrote {}",
        cfg.train.baseline,
        cfg.train.eta,
        cfg.train.epochs,
        report.best_val_loss,
        report.best_epoch,
        cfg.paths.tuned.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, subset: Option<&str>) -> Result<(), CliError> {
    require_file("paths.tuned", &cfg.paths.tuned, " (run tune first)")?;
    let test = load_split(&cfg.paths.data_dir, "tune", "test")?;
    let keep = subset.map(parse_subset).transpose()?;
    let ev = Evaluator::load(&cfg.paths.tuned)?;
    let report = evaluate_cases(&ev, &test, keep, cfg.train.seed, cfg.train.eta)?;
    let csv = write_report_outputs(&report, &cfg.paths.out_dir)?;
    dump_resolved(cfg, &csv)?;
    for row in &report.cases {
        println!("case {:<3} acc {:6.2}  f1 {:6.2}", row.case, row.metrics.acc, row.metrics.f1);
    }
    println!(
        "avg      acc {:6.2}  f1 {:6.2}; wrote {}",
        report.average.acc,
        report.average.f1,
        csv.display()
    );
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, axis: AxisArg, svg: bool) -> Result<(), CliError> {
    let svg = svg || cfg.sweep.svg;
    let test = load_split(&cfg.paths.data_dir, "tune", "test")?;
    let tcfg = TrainConfig {
        stage: Stage::PromptTune,
        ..cfg.train.clone()
    };
    let result: SweepResult = match axis {
        AxisArg::TestEta => {
            require_file("paths.tuned", &cfg.paths.tuned, " (run tune first)")?;
            sweep_test_missing_rate(&cfg.paths.tuned, &test, &cfg.sweep.test_grid, tcfg.seed)?
        }
        AxisArg::TrainEta => {
            require_file("paths.pretrained", &cfg.paths.pretrained, " (run pretrain first)")?;
            let train = load_split(&cfg.paths.data_dir, "tune", "train")?;
            let val = load_split(&cfg.paths.data_dir, "tune", "val")?;
            sweep_train_missing_rate(
                &cfg.paths.pretrained,
                &tcfg,
                &train,
                &val,
                &test,
                &cfg.sweep.train_grid,
                &cfg.paths.out_dir.join("sweep_train_eta"),
            )?
        }
        AxisArg::PromptLen => {
            require_file("paths.pretrained", &cfg.paths.pretrained, " (run pretrain first)")?;
            let train = load_split(&cfg.paths.data_dir, "tune", "train")?;
            let val = load_split(&cfg.paths.data_dir, "tune", "val")?;
            sweep_prompt_length(
                &cfg.paths.pretrained,
                &tcfg,
                &train,
                &val,
                &test,
                &cfg.sweep.prompt_grid,
                &cfg.paths.out_dir.join("sweep_prompt_len"),
            )?
        }
    };
    let csv = write_sweep_outputs(&result, &cfg.paths.out_dir, svg)?;
    dump_resolved(cfg, &csv)?;
    for point in &result.points {
        println!(
            "value {:>6} avg acc {:6.2}",
            point.value, point.report.average.acc
        );
    }
    println!("wrote {}", csv.display());
    Ok(())
}

/// Reduced geometry for the gradient oracle: correctness is independent of
/// scale, and every code path (all seven masks, prompts, generation, loss)
/// is already exercised at this size.
fn gradcheck_config(task: Task) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        prompt_len: 3,
        n_heads: 2,
        n_layers: 1,
        n_self_layers: 1,
        ffn_mult: 2,
        d_raw: [5, 5, 5],
        seq_len: [8, 8, 8],
        task,
        dropout: 0.0,
    }
}

fn cmd_gradcheck(cfg: &RunConfig, tol: f64, coords: usize) -> Result<(), CliError> {
    if !(tol > 0.0) {
        return Err(invalid("--tol", "must be positive"));
    }
    let seed = cfg.train.seed;
    let mut worst: f64 = 0.0;
    let seeds = [seed, seed.wrapping_add(1), seed.wrapping_add(2)];
    for check in run_primitive_checks(&seeds).map_err(EvalError::Tensor)? {
        println!("primitive {:<20} max rel err {:.3e}", check.name, check.max_rel_err);
        worst = worst.max(check.max_rel_err);
    }
    let report = pipeline_gradcheck(&gradcheck_config(cfg.model.task), tol, coords, seed)?;
    println!(
        "pipeline: {} coordinates checked, {} kink rescues, max rel err {:.3e} ({} coord {})",
        report.coords_checked,
        report.kinks_skipped,
        report.max_rel_err,
        report.worst_param,
        report.worst_coord
    );
    worst = worst.max(report.max_rel_err);
    if worst > tol {
        return Err(invalid("gradcheck", format!("max rel err {worst:.3e} exceeds {tol:.1e}")));
    }
    println!("gradient check passed: max rel err {worst:.3e} <= {tol:.1e}");
    Ok(())
}

fn print_counts(label: &str, counts: &ParamCounts) {
    println!("{label}");
    println!("  total       {:>10}", counts.total);
    println!("  frozen      {:>10}", counts.frozen);
    println!(
        "  trainable   {:>10}  ({:.2}% of total)",
        counts.trainable,
        100.0 * counts.trainable_ratio()
    );
    println!(
        "  prompt-only {:>10}  ({:.2}% of total)",
        counts.prompt_only,
        100.0 * counts.prompt_ratio()
    );
}

fn cmd_params(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    match checkpoint {
        Some(path) => {
            require_file("--checkpoint", path, "")?;
            let (_, counts) = count_params_checkpoint(path)?;
            print_counts(&format!("{}", path.display()), &counts);
        }
        None => {
            let counts = count_params_config(&cfg.model)?;
            print_counts("configured model (full method)", &counts);
        }
    }
    Ok(())
}
