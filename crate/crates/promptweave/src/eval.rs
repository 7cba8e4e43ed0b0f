//! Metrics, per-missing-case evaluation reports, parameter accounting, and
//! the sweep experiments, with deterministic CSV output (volatile metadata
//! such as timestamps lives in a `.meta.json` sidecar, never in the CSV).

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::backbone::{is_tunable_backbone_param, Backbone, ConfigError, ModelConfig, Task};
use crate::checkpoint::{load_checkpoint, CheckpointError};
use crate::data::{apply_missingness, DataError, Label, ModalityBundle};
use crate::numerics::rng::Rng;
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{ParamStore, Tape};
use crate::numerics::tensor::{Tensor, TensorError};
use crate::prompts::{is_mmgm_param, is_prompt_param, MissingMask, Mmgm, PromptBank};
use crate::training::{prompt_tune, BaselineMode, Pipeline, TrainConfig, TrainError};

#[derive(Debug)]
pub enum EvalError {
    Tensor(TensorError),
    Config(ConfigError),
    Checkpoint(CheckpointError),
    Data(DataError),
    Train(TrainError),
    Io(std::io::Error),
    Json(serde_json::Error),
    /// An argument is out of range or inconsistent.
    Invalid { field: &'static str, message: String },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Tensor(e) => write!(f, "{e}"),
            EvalError::Config(e) => write!(f, "{e}"),
            EvalError::Checkpoint(e) => write!(f, "{e}"),
            EvalError::Data(e) => write!(f, "{e}"),
            EvalError::Train(e) => write!(f, "{e}"),
            EvalError::Io(e) => write!(f, "{e}"),
            EvalError::Json(e) => write!(f, "{e}"),
            EvalError::Invalid { field, message } => write!(f, "eval `{field}`: {message}"),
        }
    }
}

impl std::error::Error for EvalError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            EvalError::Tensor(e) => Some(e),
            EvalError::Config(e) => Some(e),
            EvalError::Checkpoint(e) => Some(e),
            EvalError::Data(e) => Some(e),
            EvalError::Train(e) => Some(e),
            EvalError::Io(e) => Some(e),
            EvalError::Json(e) => Some(e),
            EvalError::Invalid { .. } => None,
        }
    }
}

impl From<TensorError> for EvalError {
    fn from(e: TensorError) -> Self {
        EvalError::Tensor(e)
    }
}

impl From<ConfigError> for EvalError {
    fn from(e: ConfigError) -> Self {
        EvalError::Config(e)
    }
}

impl From<CheckpointError> for EvalError {
    fn from(e: CheckpointError) -> Self {
        EvalError::Checkpoint(e)
    }
}

impl From<DataError> for EvalError {
    fn from(e: DataError) -> Self {
        EvalError::Data(e)
    }
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(e)
    }
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e)
    }
}

impl From<serde_json::Error> for EvalError {
    fn from(e: serde_json::Error) -> Self {
        EvalError::Json(e)
    }
}

fn invalid(field: &'static str, message: impl Into<String>) -> EvalError {
    EvalError::Invalid {
        field,
        message: message.into(),
    }
}

/// Metric values over one evaluated set. Accuracies and F1 are percentages
/// in [0, 100]; `acc7`, `mae`, and `corr` apply to regression only.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricValues {
    pub n: usize,
    /// Binary accuracy: non-negative vs negative for regression (threshold
    /// at 0, non-negative counts as positive), argmax match for
    /// classification.
    pub acc: f64,
    /// F1 averaged over the classes of `acc`, weighted by true-label support.
    pub f1: f64,
    /// Seven-bucket accuracy: prediction and label both rounded half away
    /// from zero, then clamped to [-3, 3].
    pub acc7: Option<f64>,
    /// Mean absolute error on raw values.
    pub mae: Option<f64>,
    /// Pearson correlation; 0 when either series is constant (see
    /// `corr_degenerate`).
    pub corr: Option<f64>,
    /// True when a constant series forced `corr` to 0.
    pub corr_degenerate: bool,
}

/// Fraction of positions where the two class sequences agree.
fn agreement(a: &[usize], b: &[usize]) -> f64 {
    let hits = a.iter().zip(b).filter(|(x, y)| x == y).count();
    hits as f64 / a.len() as f64
}

/// Support-weighted one-vs-rest F1 over `n_classes`, as a fraction. Classes
/// with zero true support carry zero weight; empty precision or recall
/// denominators score 0 rather than NaN.
fn weighted_f1(pred: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..n_classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let support = tp + fn_;
        if support == 0 {
            continue;
        }
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = tp as f64 / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += support as f64 * f1;
    }
    total / truth.len() as f64
}

/// Pearson correlation and a degeneracy flag: a constant series has no
/// defined correlation, reported as (0, true) instead of NaN.
fn pearson(x: &[f64], y: &[f64]) -> (f64, bool) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mx;
        let dy = yi - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        (0.0, true)
    } else {
        (sxy / (sxx * syy).sqrt(), false)
    }
}

/// Seven-bucket index: round half away from zero, clamp to [-3, 3].
fn bucket7(v: f64) -> i64 {
    v.round().clamp(-3.0, 3.0) as i64
}

/// Scores predictions of shape [n x output_width] against `labels`.
/// Needs n >= 2 (correlation requires variance to exist at all).
pub fn compute_metrics<T: Scalar>(
    preds: &Tensor<T>,
    labels: &[Label],
    task: &Task,
) -> Result<MetricValues, EvalError> {
    let n = labels.len();
    let w = task.output_width();
    if preds.shape != [n, w] {
        return Err(invalid(
            "predictions",
            format!("shape {:?} does not match {n} labels of width {w}", preds.shape),
        ));
    }
    if n < 2 {
        return Err(invalid("predictions", "need at least 2 samples"));
    }
    for (i, label) in labels.iter().enumerate() {
        label
            .validate_for(task)
            .map_err(|message| invalid("labels", format!("label {i}: {message}")))?;
    }
    match task {
        Task::Regression => {
            let p: Vec<f64> = preds.values.iter().map(|v| v.as_f64()).collect();
            let y: Vec<f64> = labels.iter().map(|l| l.as_f64()).collect();
            let pc: Vec<usize> = p.iter().map(|&v| (v >= 0.0) as usize).collect();
            let yc: Vec<usize> = y.iter().map(|&v| (v >= 0.0) as usize).collect();
            let hits7 = p
                .iter()
                .zip(&y)
                .filter(|(&pi, &yi)| bucket7(pi) == bucket7(yi))
                .count();
            let mae = p.iter().zip(&y).map(|(pi, yi)| (pi - yi).abs()).sum::<f64>() / n as f64;
            let (corr, degenerate) = pearson(&p, &y);
            Ok(MetricValues {
                n,
                acc: 100.0 * agreement(&pc, &yc),
                f1: 100.0 * weighted_f1(&pc, &yc, 2),
                acc7: Some(100.0 * hits7 as f64 / n as f64),
                mae: Some(mae),
                corr: Some(corr),
                corr_degenerate: degenerate,
            })
        }
        Task::Classification { n_classes } => {
            let pc: Vec<usize> = (0..n)
                .map(|i| {
                    let row = &preds.values[i * w..(i + 1) * w];
                    let mut best = 0;
                    for (j, v) in row.iter().enumerate() {
                        if *v > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect();
            let yc: Vec<usize> = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => *c as usize,
                    Label::Value(_) => unreachable!("labels validated above"),
                })
                .collect();
            Ok(MetricValues {
                n,
                acc: 100.0 * agreement(&pc, &yc),
                f1: 100.0 * weighted_f1(&pc, &yc, *n_classes),
                acc7: None,
                mae: None,
                corr: None,
                corr_degenerate: false,
            })
        }
    }
}

/// One row of a per-case report, keyed by the available modalities
/// (e.g. "t" means audio and video were missing).
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRow {
    pub case: String,
    pub metrics: MetricValues,
}

/// Per-missing-case metric rows, their unweighted mean, and run metadata.
/// `prompt_len` is 0 for promptless (baseline) checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseRow>,
    /// Unweighted mean over the case rows; `n` sums them.
    pub average: MetricValues,
    pub trainable_ratio: f64,
    pub seed: u64,
    pub eta: f64,
    pub prompt_len: usize,
}

fn average_metrics(rows: &[CaseRow]) -> MetricValues {
    let k = rows.len() as f64;
    let mean = |f: fn(&MetricValues) -> f64| rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / k;
    let opt_mean = |f: fn(&MetricValues) -> Option<f64>| {
        rows.iter()
            .map(|r| f(&r.metrics))
            .sum::<Option<f64>>()
            .map(|s| s / k)
    };
    MetricValues {
        n: rows.iter().map(|r| r.metrics.n).sum(),
        acc: mean(|m| m.acc),
        f1: mean(|m| m.f1),
        acc7: opt_mean(|m| m.acc7),
        mae: opt_mean(|m| m.mae),
        corr: opt_mean(|m| m.corr),
        corr_degenerate: rows.iter().any(|r| r.metrics.corr_degenerate),
    }
}

/// Samples per forward tape; bounds graph memory during inference.
const EVAL_CHUNK: usize = 8;

/// A checkpoint loaded for inference: config, parameters, and the bound
/// pipeline (prompted when the checkpoint carries prompt parameters).
pub struct Evaluator {
    pub cfg: ModelConfig,
    pub store: ParamStore<f32>,
    pub pipeline: Pipeline,
}

impl Evaluator {
    pub fn load(ckpt: impl AsRef<Path>) -> Result<Self, EvalError> {
        let (cfg, store) = load_checkpoint(ckpt)?;
        Evaluator::from_parts(cfg, store)
    }

    pub fn from_parts(cfg: ModelConfig, store: ParamStore<f32>) -> Result<Self, EvalError> {
        cfg.validate()?;
        let pipeline = Pipeline::bind(&cfg, &store)?;
        Ok(Evaluator { cfg, store, pipeline })
    }

    /// Prompt length when prompts are active, 0 otherwise.
    pub fn prompt_len(&self) -> usize {
        if self.pipeline.prompts.is_some() {
            self.cfg.prompt_len
        } else {
            0
        }
    }

    /// Deterministic forward pass (no dropout): one prediction row per
    /// sample, shape [n x output_width].
    pub fn predictions(&self, data: &[ModalityBundle<f32>]) -> Result<Tensor<f32>, EvalError> {
        if data.is_empty() {
            return Err(invalid("data", "empty dataset"));
        }
        let w = self.cfg.task.output_width();
        let mut out = Vec::with_capacity(data.len() * w);
        for chunk in data.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new(&self.store);
            let ids = chunk
                .iter()
                .map(|bundle| self.pipeline.forward_sample(&mut tape, bundle, None))
                .collect::<Result<Vec<_>, _>>()?;
            for id in ids {
                out.extend_from_slice(tape.values(id));
            }
        }
        Ok(Tensor::new(vec![data.len(), w], out)?)
    }

    pub fn metrics_on(&self, data: &[ModalityBundle<f32>]) -> Result<MetricValues, EvalError> {
        let preds = self.predictions(data)?;
        let labels: Vec<Label> = data.iter().map(|b| b.label).collect();
        compute_metrics(&preds, &labels, &self.cfg.task)
    }
}

fn require_complete_payload(
    field: &'static str,
    data: &[ModalityBundle<f32>],
) -> Result<(), EvalError> {
    if data.is_empty() {
        return Err(invalid(field, "empty dataset"));
    }
    if let Some(i) = data.iter().position(|b| !b.mask.is_complete()) {
        return Err(invalid(
            field,
            format!("sample {i} has missing modalities; evaluation forces its own masks"),
        ));
    }
    Ok(())
}

/// Forces each of the six incomplete masks onto every test sample and
/// reports per-case metrics plus their unweighted mean. The test set must
/// be complete (otherwise zero-filled payloads could not be restored).
/// `subset`, when given, additionally zero-fills every stream outside it,
/// mirroring what a lower-bound model saw in training.
pub fn evaluate_cases(
    ev: &Evaluator,
    test: &[ModalityBundle<f32>],
    subset: Option<[bool; 3]>,
    seed: u64,
    eta: f64,
) -> Result<MetricsReport, EvalError> {
    require_complete_payload("test", test)?;
    let mut cases = Vec::with_capacity(6);
    for mask in MissingMask::incomplete_masks() {
        let mut forced = test.to_vec();
        for bundle in &mut forced {
            bundle.mask = mask;
            bundle.blank_missing();
            if let Some(keep) = subset {
                for m in 0..3 {
                    if !keep[m] {
                        bundle.stream_mut(m).values.fill(0.0);
                    }
                }
            }
        }
        let metrics = ev.metrics_on(&forced)?;
        cases.push(CaseRow {
            case: mask.case_name(),
            metrics,
        });
    }
    let average = average_metrics(&cases);
    Ok(MetricsReport {
        cases,
        average,
        trainable_ratio: count_params(&ev.store).trainable_ratio(),
        seed,
        eta,
        prompt_len: ev.prompt_len(),
    })
}

/// Parameter accounting under the prompt-tuning partition: `trainable`
/// counts prompts, the generation module, the input convolutions, and the
/// head; everything else is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub frozen: usize,
    pub trainable: usize,
    pub prompt_only: usize,
}

impl ParamCounts {
    pub fn trainable_ratio(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }

    pub fn prompt_ratio(&self) -> f64 {
        self.prompt_only as f64 / self.total as f64
    }
}

pub fn count_params<T: Scalar>(store: &ParamStore<T>) -> ParamCounts {
    let mut counts = ParamCounts {
        total: 0,
        frozen: 0,
        trainable: 0,
        prompt_only: 0,
    };
    for (_, p) in store.iter() {
        let n = p.tensor.numel();
        counts.total += n;
        if is_prompt_param(&p.name) {
            counts.prompt_only += n;
        }
        if is_prompt_param(&p.name) || is_mmgm_param(&p.name) || is_tunable_backbone_param(&p.name)
        {
            counts.trainable += n;
        } else {
            counts.frozen += n;
        }
    }
    counts
}

/// Counts for a full-method model at `cfg` without training one: builds
/// fresh parameters (sizes depend only on the config) and counts those.
pub fn count_params_config(cfg: &ModelConfig) -> Result<ParamCounts, EvalError> {
    cfg.validate()?;
    let rng = Rng::new(0);
    let mut store: ParamStore<f32> = ParamStore::new();
    Backbone::build(cfg, &mut store, &rng.derive("init"))?;
    PromptBank::build(cfg, &mut store, &rng.derive("prompt_init"))?;
    Mmgm::build(cfg, &mut store, &rng.derive("mmgm_init"))?;
    Ok(count_params(&store))
}

pub fn count_params_checkpoint(ckpt: impl AsRef<Path>) -> Result<(ModelConfig, ParamCounts), EvalError> {
    let (cfg, store) = load_checkpoint(ckpt)?;
    Ok((cfg, count_params(&store)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// One fixed checkpoint evaluated under varying evaluation-time
    /// missing rates.
    TestMissingRate,
    /// Retuned from the same pretrained checkpoint at each training
    /// missing rate.
    TrainMissingRate,
    /// Retuned at each prompt length; reports the accuracy gain over a
    /// modality-dropout run (IACC) and its per-row yield xi = IACC / len.
    PromptLength,
}

impl SweepAxis {
    /// Tag used in output file names: `report_<tag>_<seed>.csv`.
    pub fn tag(self) -> &'static str {
        match self {
            SweepAxis::TestMissingRate => "test_missing_rate",
            SweepAxis::TrainMissingRate => "train_missing_rate",
            SweepAxis::PromptLength => "prompt_length",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// Grid value: a missing rate, or a prompt length as a whole number.
    pub value: f64,
    pub report: MetricsReport,
    /// Average-ACC gain over the modality-dropout baseline (prompt-length
    /// axis only).
    pub iacc: Option<f64>,
    /// `iacc / prompt_len`, exactly.
    pub xi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

fn require_increasing(field: &'static str, grid: &[f64]) -> Result<(), EvalError> {
    if grid.is_empty() {
        return Err(invalid(field, "empty grid"));
    }
    if !grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(invalid(field, format!("grid must be strictly increasing, got {grid:?}")));
    }
    Ok(())
}

fn require_rates(field: &'static str, grid: &[f64]) -> Result<(), EvalError> {
    require_increasing(field, grid)?;
    if let Some(&bad) = grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(field, format!("missing rate {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Evaluates one tuned checkpoint across evaluation-time missing rates.
/// Rate 0 reports complete-data metrics in a single "complete" row; a
/// positive rate draws one mask per sample and reports a "mixed" row.
pub fn sweep_test_missing_rate(
    ckpt: impl AsRef<Path>,
    test: &[ModalityBundle<f32>],
    grid: &[f64],
    seed: u64,
) -> Result<SweepResult, EvalError> {
    require_rates("test missing rate grid", grid)?;
    require_complete_payload("test", test)?;
    let ev = Evaluator::load(ckpt)?;
    let ratio = count_params(&ev.store).trainable_ratio();
    let rng = Rng::new(seed);
    let mut points = Vec::with_capacity(grid.len());
    for (i, &eta) in grid.iter().enumerate() {
        let (case, metrics) = if eta == 0.0 {
            ("complete", ev.metrics_on(test)?)
        } else {
            let mut masked = test.to_vec();
            apply_missingness(&mut masked, eta, &mut rng.derive(&format!("mask.{i}")))?;
            ("mixed", ev.metrics_on(&masked)?)
        };
        let rows = vec![CaseRow {
            case: case.to_string(),
            metrics,
        }];
        let average = average_metrics(&rows);
        points.push(SweepPoint {
            value: eta,
            report: MetricsReport {
                cases: rows,
                average,
                trainable_ratio: ratio,
                seed,
                eta,
                prompt_len: ev.prompt_len(),
            },
            iacc: None,
            xi: None,
        });
    }
    Ok(SweepResult {
        axis: SweepAxis::TestMissingRate,
        seed,
        points,
    })
}

/// Retunes the pretrained checkpoint at every training missing rate and
/// evaluates each tuned model over the six forced cases. Tuned checkpoints
/// land in `work_dir`.
pub fn sweep_train_missing_rate(
    pretrained: &Path,
    base: &TrainConfig,
    train: &[ModalityBundle<f32>],
    val: &[ModalityBundle<f32>],
    test: &[ModalityBundle<f32>],
    grid: &[f64],
    work_dir: &Path,
) -> Result<SweepResult, EvalError> {
    require_rates("train missing rate grid", grid)?;
    require_complete_payload("test", test)?;
    fs::create_dir_all(work_dir)?;
    let mut points = Vec::with_capacity(grid.len());
    for (i, &eta) in grid.iter().enumerate() {
        let tcfg = TrainConfig {
            eta,
            ..base.clone()
        };
        let out = work_dir.join(format!("tuned_eta{i}.ckpt"));
        prompt_tune(pretrained, &tcfg, train, val, None, &out)?;
        let ev = Evaluator::load(&out)?;
        points.push(SweepPoint {
            value: eta,
            report: evaluate_cases(&ev, test, None, tcfg.seed, eta)?,
            iacc: None,
            xi: None,
        });
    }
    Ok(SweepResult {
        axis: SweepAxis::TrainMissingRate,
        seed: base.seed,
        points,
    })
}

/// Retunes at every prompt length and reports IACC, the average-incomplete-
/// ACC gain over a modality-dropout tune of the same checkpoint (that
/// baseline has no prompts, so one run serves the whole grid), and
/// xi = IACC / prompt_len. Grid values must fit the shortest stream: the
/// missing-signal prompt occupies a prefix of each modality's sequence.
pub fn sweep_prompt_length(
    pretrained: &Path,
    base: &TrainConfig,
    train: &[ModalityBundle<f32>],
    val: &[ModalityBundle<f32>],
    test: &[ModalityBundle<f32>],
    grid: &[usize],
    work_dir: &Path,
) -> Result<SweepResult, EvalError> {
    let as_f64: Vec<f64> = grid.iter().map(|&v| v as f64).collect();
    require_increasing("prompt length grid", &as_f64)?;
    require_complete_payload("test", test)?;
    if base.baseline != BaselineMode::None {
        return Err(invalid(
            "prompt length grid",
            "IACC is defined for the full method; set baseline to none",
        ));
    }
    let (cfg, _) = load_checkpoint(pretrained)?;
    let max_len = cfg.seq_len.iter().copied().min().expect("three modalities");
    for &lp in grid {
        if lp == 0 || lp > max_len {
            return Err(invalid(
                "prompt length grid",
                format!("prompt length {lp} must lie in [1, {max_len}] (shortest stream)"),
            ));
        }
    }
    fs::create_dir_all(work_dir)?;
    let md_cfg = TrainConfig {
        baseline: BaselineMode::ModalityDropout,
        ..base.clone()
    };
    let md_out = work_dir.join("baseline_md.ckpt");
    prompt_tune(pretrained, &md_cfg, train, val, None, &md_out)?;
    let md_ev = Evaluator::load(&md_out)?;
    let md_acc = evaluate_cases(&md_ev, test, None, md_cfg.seed, md_cfg.eta)?.average.acc;
    let mut points = Vec::with_capacity(grid.len());
    for &lp in grid {
        let out = work_dir.join(format!("tuned_lp{lp}.ckpt"));
        prompt_tune(pretrained, base, train, val, Some(lp), &out)?;
        let ev = Evaluator::load(&out)?;
        let report = evaluate_cases(&ev, test, None, base.seed, base.eta)?;
        let iacc = report.average.acc - md_acc;
        points.push(SweepPoint {
            value: lp as f64,
            report,
            iacc: Some(iacc),
            xi: Some(iacc / lp as f64),
        });
    }
    Ok(SweepResult {
        axis: SweepAxis::PromptLength,
        seed: base.seed,
        points,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn push_row(
    out: &mut String,
    axis: SweepAxis,
    value: f64,
    case: &str,
    m: &MetricValues,
    iacc: Option<f64>,
    xi: Option<f64>,
) {
    writeln!(
        out,
        "{},{},{},{},{:.6},{:.6},{},{},{},{},{},{}",
        axis,
        value,
        case,
        m.n,
        m.acc,
        m.f1,
        fmt_opt(m.acc7),
        fmt_opt(m.mae),
        fmt_opt(m.corr),
        m.corr_degenerate,
        fmt_opt(iacc),
        fmt_opt(xi),
    )
    .expect("writing to a String cannot fail");
}

/// Header shared by every sweep CSV; columns that do not apply to a row
/// stay empty so the schema never shifts.
pub const SWEEP_CSV_HEADER: &str =
    "axis,value,case,n,acc,f1,acc7,mae,corr,corr_degenerate,iacc,xi";

/// Renders a sweep as CSV: one row per (grid value, case), each point's
/// average row last, carrying IACC and xi when the axis defines them.
/// Output is a pure function of the result, hence byte-stable across runs.
pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for point in &result.points {
        for row in &point.report.cases {
            push_row(&mut out, result.axis, point.value, &row.case, &row.metrics, None, None);
        }
        push_row(
            &mut out,
            result.axis,
            point.value,
            "avg",
            &point.report.average,
            point.iacc,
            point.xi,
        );
    }
    out
}

/// Header of the single-checkpoint per-case report CSV.
pub const REPORT_CSV_HEADER: &str = "case,n,acc,f1,acc7,mae,corr,corr_degenerate";

/// Renders a per-case report as CSV: six case rows then the average row.
pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    let mut push = |case: &str, m: &MetricValues| {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{},{},{},{}",
            case,
            m.n,
            m.acc,
            m.f1,
            fmt_opt(m.acc7),
            fmt_opt(m.mae),
            fmt_opt(m.corr),
            m.corr_degenerate,
        )
        .expect("writing to a String cannot fail");
    };
    for row in &report.cases {
        push(&row.case, &row.metrics);
    }
    push("avg", &report.average);
    out
}

/// Minimal line chart of each point's average ACC against the grid.
pub fn sweep_svg(result: &SweepResult) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 60.0;
    let pts: Vec<(f64, f64)> = result
        .points
        .iter()
        .map(|p| (p.value, p.report.average.acc))
        .collect();
    let (x0, x1) = (pts.first().map_or(0.0, |p| p.0), pts.last().map_or(1.0, |p| p.0));
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for &(_, y) in &pts {
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    // Pad the value range so a flat curve still renders mid-chart.
    let (y0, y1) = (y0 - 1.0, y1 + 1.0);
    let sx = |x: f64| {
        if x1 > x0 {
            M + (x - x0) / (x1 - x0) * (W - 2.0 * M)
        } else {
            W / 2.0
        }
    };
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{m}\" y1=\"{ym}\" x2=\"{xm}\" y2=\"{ym}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{ym}\" stroke=\"black\"/>\n",
            "<text x=\"{cx}\" y=\"{h2}\" text-anchor=\"middle\" font-size=\"14\">{axis}</text>\n",
            "<text x=\"{m}\" y=\"{ty}\" font-size=\"14\">avg acc</text>\n",
        ),
        w = W,
        h = H,
        m = M,
        xm = W - M,
        ym = H - M,
        cx = W / 2.0,
        h2 = H - M / 3.0,
        ty = M * 0.6,
        axis = result.axis,
    );
    write!(
        svg,
        concat!(
            "<text x=\"{m}\" y=\"{lbly}\" text-anchor=\"middle\" font-size=\"12\">{x0}</text>\n",
            "<text x=\"{xm}\" y=\"{lbly}\" text-anchor=\"middle\" font-size=\"12\">{x1}</text>\n",
            "<text x=\"{lblx}\" y=\"{ym}\" text-anchor=\"end\" font-size=\"12\">{y0:.2}</text>\n",
            "<text x=\"{lblx}\" y=\"{mt}\" text-anchor=\"end\" font-size=\"12\">{y1:.2}</text>\n",
        ),
        m = M,
        xm = W - M,
        lbly = H - M + 18.0,
        lblx = M - 6.0,
        ym = H - M,
        mt = M,
        x0 = x0,
        x1 = x1,
        y0 = y0,
        y1 = y1,
    )
    .expect("writing to a String cannot fail");
    let coords: Vec<String> = pts
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    writeln!(
        svg,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>",
        coords.join(" ")
    )
    .expect("writing to a String cannot fail");
    for &(x, y) in &pts {
        writeln!(
            svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"/>",
            sx(x),
            sy(y)
        )
        .expect("writing to a String cannot fail");
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Serialize)]
struct SweepMeta<'a> {
    axis: &'a str,
    seed: u64,
    grid: Vec<f64>,
    generated_unix_ms: u128,
}

#[derive(Serialize)]
struct ReportMeta {
    seed: u64,
    eta: f64,
    prompt_len: usize,
    trainable_ratio: f64,
    generated_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Writes `report_<axis>_<seed>.csv` (byte-stable for identical runs), a
/// `.meta.json` sidecar with the volatile metadata, and optionally a line
/// chart. Returns the CSV path.
pub fn write_sweep_outputs(
    result: &SweepResult,
    out_dir: &Path,
    svg: bool,
) -> Result<PathBuf, EvalError> {
    fs::create_dir_all(out_dir)?;
    let base = format!("report_{}_{}", result.axis.tag(), result.seed);
    let csv_path = out_dir.join(format!("{base}.csv"));
    fs::write(&csv_path, sweep_csv(result))?;
    let meta = SweepMeta {
        axis: result.axis.tag(),
        seed: result.seed,
        grid: result.points.iter().map(|p| p.value).collect(),
        generated_unix_ms: now_ms(),
    };
    fs::write(
        out_dir.join(format!("{base}.meta.json")),
        serde_json::to_vec_pretty(&meta)?,
    )?;
    if svg {
        fs::write(out_dir.join(format!("{base}.svg")), sweep_svg(result))?;
    }
    Ok(csv_path)
}

/// Writes `report_cases_<seed>.csv` plus its `.meta.json` sidecar.
pub fn write_report_outputs(report: &MetricsReport, out_dir: &Path) -> Result<PathBuf, EvalError> {
    fs::create_dir_all(out_dir)?;
    let base = format!("report_cases_{}", report.seed);
    let csv_path = out_dir.join(format!("{base}.csv"));
    fs::write(&csv_path, report_csv(report))?;
    let meta = ReportMeta {
        seed: report.seed,
        eta: report.eta,
        prompt_len: report.prompt_len,
        trainable_ratio: report.trainable_ratio,
        generated_unix_ms: now_ms(),
    };
    fs::write(
        out_dir.join(format!("{base}.meta.json")),
        serde_json::to_vec_pretty(&meta)?,
    )?;
    Ok(csv_path)
}
