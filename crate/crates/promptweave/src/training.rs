//! Losses, the Adam optimizer, parameter partitioning, and the two-stage
//! pipeline: pretrain the full backbone on complete data, freeze it, then
//! tune prompts (or a baseline variant) under simulated missingness.

use std::borrow::Cow;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{is_tunable_backbone_param, Backbone, ConfigError, ModelConfig, Task};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::data::{apply_missingness, DataError, Label, ModalityBundle};
use crate::numerics::gradcheck::{grad_check_store, StoreCheckReport, DEFAULT_STEP};
use crate::numerics::rng::Rng;
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::numerics::tensor::{Tensor, TensorError};
use crate::prompts::{
    apply_missing_signal, build_missing_type_matrix, is_mmgm_param, is_prompt_param,
    mmgm_generate, project_missing_type, MissingMask, Mmgm, PromptBank,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    PromptTune,
}

/// Which model variant a tuning run produces. All variants share the
/// backbone code path; they differ only in parameter partitioning and in
/// how missing modalities are presented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Full method: generated streams, signal prompts, type prompts.
    None,
    /// Backbone retrained on a fixed modality subset.
    LowerBound,
    /// Frozen backbone; missing streams stay zero-filled, no prompts.
    Substitution,
    /// Unfrozen backbone trained under per-epoch modality dropout.
    ModalityDropout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub baseline: BaselineMode,
    /// Missing rate applied to tuning data.
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global-norm gradient clip, applied while pretraining only; 0 disables.
    pub clip_norm: f64,
    /// Modalities the lower-bound baseline keeps, e.g. "t" or "av".
    pub lb_subset: String,
    /// Redraw tuning masks every epoch instead of fixing one mask per
    /// sample. Modality dropout always resamples; this extends the same
    /// treatment to prompt tuning and substitution.
    pub resample_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            baseline: BaselineMode::None,
            eta: 0.70,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 1,
            clip_norm: 1.0,
            lb_subset: "t".to_string(),
            resample_masks: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(invalid("eta", format!("must lie in [0, 1], got {}", self.eta)));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", format!("must be positive and finite, got {}", self.lr)));
        }
        for (field, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(invalid(field, format!("must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(invalid("eps", "must be positive"));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(invalid("clip_norm", "must be finite and non-negative"));
        }
        parse_subset(&self.lb_subset)?;
        Ok(())
    }
}

fn invalid(field: &'static str, message: impl Into<String>) -> TrainError {
    TrainError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug)]
pub enum TrainError {
    Tensor(TensorError),
    Config(ConfigError),
    Checkpoint(CheckpointError),
    Data(DataError),
    /// A [`TrainConfig`] field is out of range.
    Invalid { field: &'static str, message: String },
    /// A caller violated a stage or data precondition.
    Contract { what: &'static str, detail: String },
    /// Loss left the finite range; training state is unusable.
    Diverged { step: u64, loss: f64 },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Config(e) => write!(f, "{e}"),
            TrainError::Checkpoint(e) => write!(f, "{e}"),
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::Invalid { field, message } => {
                write!(f, "train config field `{field}`: {message}")
            }
            TrainError::Contract { what, detail } => write!(f, "{what}: {detail}"),
            TrainError::Diverged { step, loss } => {
                write!(f, "loss diverged to {loss} at step {step}")
            }
        }
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            TrainError::Tensor(e) => Some(e),
            TrainError::Config(e) => Some(e),
            TrainError::Checkpoint(e) => Some(e),
            TrainError::Data(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<ConfigError> for TrainError {
    fn from(e: ConfigError) -> Self {
        TrainError::Config(e)
    }
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

/// Batch-mean loss: mean absolute error for regression, mean negative
/// log-likelihood over softmaxed logits for classification.
pub fn compute_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    preds: NodeId,
    labels: &[Label],
    task: &Task,
) -> Result<NodeId, TrainError> {
    let shape = tape.shape(preds).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[1] != task.output_width() {
        return Err(TrainError::Contract {
            what: "compute_loss",
            detail: format!(
                "predictions {shape:?} do not match {} labels of width {}",
                labels.len(),
                task.output_width()
            ),
        });
    }
    for (i, label) in labels.iter().enumerate() {
        label.validate_for(task).map_err(|message| TrainError::Contract {
            what: "compute_loss",
            detail: format!("label {i}: {message}"),
        })?;
    }
    match task {
        Task::Regression => {
            let values: Vec<T> = labels.iter().map(|l| T::from_f64(l.as_f64())).collect();
            let target = Tensor::new(vec![labels.len(), 1], values)?;
            let target = tape.constant(&target);
            let err = tape.sub(preds, target)?;
            let abs = tape.abs(err);
            Ok(tape.mean_all(abs))
        }
        Task::Classification { .. } => {
            let targets: Vec<usize> = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => *c as usize,
                    Label::Value(_) => unreachable!("labels validated above"),
                })
                .collect();
            Ok(tape.cross_entropy(preds, &targets)?)
        }
    }
}

/// Per-parameter gradients for one optimizer step, indexed like the store.
/// Trainable parameters get zeroed buffers at `begin_step`; frozen ones stay
/// `None` so a frozen parameter can never receive an update.
#[derive(Debug, Clone)]
pub struct GradAccum<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradAccum<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        GradAccum {
            grads: vec![None; store.len()],
        }
    }

    /// Resets buffers for the store's current trainable set.
    pub fn begin_step(&mut self, store: &ParamStore<T>) {
        self.grads.resize(store.len(), None);
        for (id, p) in store.iter() {
            self.grads[id.index()] = if p.trainable {
                Some(vec![T::zero(); p.tensor.numel()])
            } else {
                None
            };
        }
    }

    /// Adds the tape's parameter gradients into the buffers.
    pub fn absorb(&mut self, store: &ParamStore<T>, tape: &Tape<'_, T>) {
        for id in store.ids() {
            let Some(buf) = self.grads[id.index()].as_mut() else {
                continue;
            };
            if let Some(g) = tape.param_grad(id) {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads[id.index()].as_deref()
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        for buf in self.grads.iter().flatten() {
            for &g in buf {
                let g = g.as_f64();
                sq += g * g;
            }
        }
        sq.sqrt()
    }

    /// Scales every gradient so the global norm is at most `max_norm`;
    /// returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = T::from_f64(max_norm / norm);
            for buf in self.grads.iter_mut().flatten() {
                for g in buf {
                    *g *= s;
                }
            }
        }
        norm
    }
}

/// Adam moment buffers and step counter, indexed like the store. Buffers
/// are allocated the first time a parameter is updated.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        OptimizerState {
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            step: 0,
        }
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[T]> {
        self.m[id.index()].as_deref()
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[T]> {
        self.v[id.index()].as_deref()
    }
}

/// One bias-corrected Adam update over the trainable parameters.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &GradAccum<T>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let c1 = T::from_f64(1.0 - cfg.beta1);
    let c2 = T::from_f64(1.0 - cfg.beta2);
    let lr_t = T::from_f64(cfg.lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(cfg.eps);
    for id in store.trainable_ids() {
        let g = grads.get(id).ok_or_else(|| TrainError::Contract {
            what: "adam_step",
            detail: format!(
                "no gradient for trainable parameter {:?}",
                store.get(id).name
            ),
        })?;
        let p = &mut store.get_mut(id).tensor.values;
        if g.len() != p.len() {
            return Err(TrainError::Contract {
                what: "adam_step",
                detail: format!("gradient length {} != parameter length {}", g.len(), p.len()),
            });
        }
        let m = state.m[id.index()].get_or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state.v[id.index()].get_or_insert_with(|| vec![T::zero(); g.len()]);
        for i in 0..p.len() {
            m[i] = b1 * m[i] + c1 * g[i];
            v[i] = b2 * v[i] + c2 * g[i] * g[i];
            p[i] = p[i] - lr_t * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// A bound model: the backbone plus, when the full method is active, the
/// prompt bank and generation module.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub backbone: Backbone,
    pub prompts: Option<(PromptBank, Mmgm)>,
}

impl Pipeline {
    /// Rebinds by name; prompts activate when prompt parameters exist in
    /// the store (i.e. the checkpoint came from a full-method tune).
    pub fn bind<T: Scalar>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self, TrainError> {
        let backbone = Backbone::bind(cfg, store)?;
        let prompts = if store.by_name("prompt.type").is_some() {
            Some((PromptBank::bind(store)?, Mmgm::bind(store)?))
        } else {
            None
        };
        Ok(Pipeline { backbone, prompts })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.backbone.cfg
    }

    /// Prediction for one sample: the full prompt pipeline when prompts are
    /// active, otherwise the backbone over zero-filled streams.
    pub fn forward_sample<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        bundle: &ModalityBundle<T>,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<NodeId, TrainError> {
        let raw = [
            tape.constant(&bundle.audio),
            tape.constant(&bundle.video),
            tape.constant(&bundle.text),
        ];
        let cfg = self.cfg();
        match &self.prompts {
            None => Ok(self.backbone.forward(tape, &raw, dropout_rng)?),
            Some((bank, mmgm)) => {
                let gen = mmgm_generate(tape, cfg, mmgm, &bank.gen, &raw, bundle.mask)?;
                let feats = self.backbone.project_inputs(tape, &gen)?;
                let signaled = apply_missing_signal(tape, cfg, bank, &feats, bundle.mask)?;
                let m_p = build_missing_type_matrix(tape, bank, bundle.mask)?;
                let type_prompts = project_missing_type(tape, cfg, bank, m_p)?;
                let fused = self.backbone.crossmodal_forward(
                    tape,
                    &signaled,
                    Some(&type_prompts),
                    dropout_rng,
                )?;
                Ok(self.backbone.predict(tape, fused)?)
            }
        }
    }
}

/// Finite-difference check of the whole pipeline: backbone, prompt bank,
/// generation module, signal and type attachment, and the loss, over one
/// batch covering all seven missingness cases. Runs in `f64`; checks up to
/// `coords_per_param` random coordinates of every parameter.
pub fn pipeline_gradcheck(
    cfg: &ModelConfig,
    tol: f64,
    coords_per_param: usize,
    seed: u64,
) -> Result<StoreCheckReport, TrainError> {
    cfg.validate()?;
    let rng = Rng::new(seed);
    let mut store: ParamStore<f64> = ParamStore::new();
    let backbone = Backbone::build(cfg, &mut store, &rng.derive("init"))?;
    let bank = PromptBank::build(cfg, &mut store, &rng.derive("prompt_init"))?;
    let mmgm = Mmgm::build(cfg, &mut store, &rng.derive("mmgm_init"))?;
    let pipeline = Pipeline {
        backbone,
        prompts: Some((bank, mmgm)),
    };
    let mut data_rng = rng.derive("data");
    let bundles: Vec<ModalityBundle<f64>> = MissingMask::all_masks()
        .into_iter()
        .map(|mask| {
            let stream = |m: usize, rng: &mut Rng| {
                Tensor::randn(&[cfg.seq_len[m], cfg.d_raw[m]], 1.0, rng)
            };
            // Regression targets stay at magnitude >= 1 so the residuals of a
            // freshly initialized model never straddle the L1 kink under the
            // finite-difference step.
            let label = match cfg.task {
                Task::Regression => {
                    let sign = if data_rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                    Label::Value(sign * (1.0 + data_rng.next_f64()))
                }
                Task::Classification { n_classes } => {
                    Label::Class(data_rng.below(n_classes as u64) as u32)
                }
            };
            let mut bundle = ModalityBundle {
                audio: stream(0, &mut data_rng),
                video: stream(1, &mut data_rng),
                text: stream(2, &mut data_rng),
                mask,
                label,
            };
            bundle.blank_missing();
            bundle
        })
        .collect();
    let task = cfg.task;
    let as_tensor_err = |e: TrainError| TensorError::Contract {
        op: "pipeline_gradcheck",
        detail: e.to_string(),
    };
    let build = |tape: &mut Tape<'_, f64>| -> Result<NodeId, TensorError> {
        let mut preds = Vec::with_capacity(bundles.len());
        let mut labels = Vec::with_capacity(bundles.len());
        for bundle in &bundles {
            preds.push(pipeline.forward_sample(tape, bundle, None).map_err(as_tensor_err)?);
            labels.push(bundle.label);
        }
        let stacked = tape.concat(&preds, 0)?;
        compute_loss(tape, stacked, &labels, &task).map_err(as_tensor_err)
    };
    let ids: Vec<ParamId> = store.ids().collect();
    let mut coord_rng = rng.derive("coords");
    Ok(grad_check_store(
        &mut store,
        &ids,
        &build,
        DEFAULT_STEP,
        tol,
        coords_per_param,
        &mut coord_rng,
    )?)
}

/// Samples per tape; graphs are rebuilt per chunk to bound their size.
const CHUNK: usize = 8;

/// Mean loss over `batch`; with `grads`, also accumulates d(mean)/d(params).
/// Chunk losses are scaled by chunk/batch size so per-chunk gradients sum to
/// the full-batch mean gradient.
fn run_batch<T: Scalar>(
    pipeline: &Pipeline,
    store: &ParamStore<T>,
    batch: &[&ModalityBundle<T>],
    mut grads: Option<&mut GradAccum<T>>,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<f64, TrainError> {
    let task = pipeline.cfg().task;
    let total = batch.len();
    let mut loss_sum = 0.0;
    for chunk in batch.chunks(CHUNK) {
        let mut tape = Tape::new(store);
        let mut preds = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for bundle in chunk {
            preds.push(pipeline.forward_sample(&mut tape, bundle, dropout_rng.as_deref_mut())?);
            labels.push(bundle.label);
        }
        let stacked = tape.concat(&preds, 0)?;
        let mean = compute_loss(&mut tape, stacked, &labels, &task)?;
        let scaled = tape.scale(mean, T::from_f64(chunk.len() as f64 / total as f64));
        loss_sum += tape.values(scaled)[0].as_f64();
        if let Some(accum) = grads.as_deref_mut() {
            tape.backward(scaled)?;
            accum.absorb(store, &tape);
        }
    }
    Ok(loss_sum)
}

/// Mean loss over a dataset, gradients untouched.
pub fn dataset_loss<T: Scalar>(
    pipeline: &Pipeline,
    store: &ParamStore<T>,
    data: &[ModalityBundle<T>],
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Contract {
            what: "dataset_loss",
            detail: "empty dataset".to_string(),
        });
    }
    let refs: Vec<&ModalityBundle<T>> = data.iter().collect();
    run_batch(pipeline, store, &refs, None, None)
}

/// Training data for one run: either a fixed (already masked) set, or a
/// pristine set remasked with fresh draws every epoch (modality dropout).
enum EpochData<'a, T: Scalar> {
    Fixed(&'a [ModalityBundle<T>]),
    Resampled {
        pristine: &'a [ModalityBundle<T>],
        eta: f64,
        rng: Rng,
    },
}

impl<'a, T: Scalar> EpochData<'a, T> {
    fn materialize(&self, epoch: usize) -> Result<Cow<'a, [ModalityBundle<T>]>, TrainError> {
        match self {
            EpochData::Fixed(data) => Ok(Cow::Borrowed(data)),
            EpochData::Resampled { pristine, eta, rng } => {
                let mut out = pristine.to_vec();
                let mut stream = rng.derive(&format!("epoch.{epoch}"));
                apply_missingness(&mut out, *eta, &mut stream)?;
                Ok(Cow::Owned(out))
            }
        }
    }
}

/// Loss curves and the validation-best epoch of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Batch-mean training loss at every optimizer step.
    pub step_loss: Vec<f64>,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_loss: Vec<f64>,
    /// Zero-based epoch whose validation loss was lowest.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Epoch loop shared by both stages. Returns the validation-best parameter
/// snapshot; `store` is left at the final step.
fn train_loop<T: Scalar>(
    pipeline: &Pipeline,
    store: &mut ParamStore<T>,
    tcfg: &TrainConfig,
    train: &EpochData<'_, T>,
    val: &[ModalityBundle<T>],
    clip_norm: Option<f64>,
    dropout: bool,
    rng: &Rng,
) -> Result<(ParamStore<T>, TrainReport), TrainError> {
    let mut grads = GradAccum::new(store);
    let mut state = OptimizerState::new(store);
    let mut step_loss = Vec::new();
    let mut epoch_train_loss = Vec::with_capacity(tcfg.epochs);
    let mut epoch_val_loss = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let val_refs: Vec<&ModalityBundle<T>> = val.iter().collect();
    for epoch in 0..tcfg.epochs {
        let data = train.materialize(epoch)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.derive(&format!("order.{epoch}")).shuffle(&mut order);
        let mut drop_rng = rng.derive(&format!("dropout.{epoch}"));
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for batch_ids in order.chunks(tcfg.batch_size) {
            let batch: Vec<&ModalityBundle<T>> = batch_ids.iter().map(|&i| &data[i]).collect();
            grads.begin_step(store);
            let loss = run_batch(
                pipeline,
                store,
                &batch,
                Some(&mut grads),
                dropout.then_some(&mut drop_rng),
            )?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    step: state.step + 1,
                    loss,
                });
            }
            if let Some(max) = clip_norm {
                grads.clip_global_norm(max);
            }
            adam_step(store, &grads, &mut state, tcfg)?;
            step_loss.push(loss);
            epoch_sum += loss;
            batches += 1;
        }
        let val_loss = run_batch(pipeline, store, &val_refs, None, None)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged {
                step: state.step,
                loss: val_loss,
            });
        }
        epoch_train_loss.push(epoch_sum / batches.max(1) as f64);
        epoch_val_loss.push(val_loss);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, store.clone()));
        }
    }
    let (best_val_loss, best_epoch, best_store) = best.expect("epochs validated positive");
    Ok((
        best_store,
        TrainReport {
            step_loss,
            epoch_train_loss,
            epoch_val_loss,
            best_epoch,
            best_val_loss,
        },
    ))
}

fn require_complete<T: Scalar>(
    what: &'static str,
    splits: &[(&str, &[ModalityBundle<T>])],
) -> Result<(), TrainError> {
    for (split, data) in splits {
        if data.is_empty() {
            return Err(TrainError::Contract {
                what,
                detail: format!("{split} split is empty"),
            });
        }
        if let Some(i) = data.iter().position(|b| !b.mask.is_complete()) {
            return Err(TrainError::Contract {
                what,
                detail: format!(
                    "{split} sample {i} has missing modalities; this stage draws masks itself"
                ),
            });
        }
    }
    Ok(())
}

/// Trains the full backbone end-to-end on complete data and writes the
/// validation-best parameters as a checkpoint.
pub fn pretrain(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    train: &[ModalityBundle<f32>],
    val: &[ModalityBundle<f32>],
    ckpt_out: &Path,
) -> Result<TrainReport, TrainError> {
    mcfg.validate()?;
    tcfg.validate()?;
    if tcfg.stage != Stage::Pretrain {
        return Err(TrainError::Contract {
            what: "pretrain",
            detail: format!("stage is {:?}, expected Pretrain", tcfg.stage),
        });
    }
    require_complete("pretrain", &[("train", train), ("val", val)])?;
    let rng = Rng::new(tcfg.seed);
    let mut store = ParamStore::new();
    let backbone = Backbone::build(mcfg, &mut store, &rng.derive("init"))?;
    let pipeline = Pipeline {
        backbone,
        prompts: None,
    };
    let (best, report) = train_loop(
        &pipeline,
        &mut store,
        tcfg,
        &EpochData::Fixed(train),
        val,
        (tcfg.clip_norm > 0.0).then_some(tcfg.clip_norm),
        mcfg.dropout > 0.0,
        &rng.derive("train"),
    )?;
    save_checkpoint(ckpt_out, mcfg, &best)?;
    Ok(report)
}

/// Parses a modality subset such as "t" or "av" (letters a, v, t).
pub fn parse_subset(s: &str) -> Result<[bool; 3], TrainError> {
    let mut keep = [false; 3];
    for ch in s.chars() {
        match ch {
            'a' => keep[0] = true,
            'v' => keep[1] = true,
            't' => keep[2] = true,
            _ => {
                return Err(invalid(
                    "lb_subset",
                    format!("unknown modality {ch:?}; expected letters from \"avt\""),
                ))
            }
        }
    }
    if keep == [false; 3] {
        return Err(invalid("lb_subset", "must keep at least one modality"));
    }
    Ok(keep)
}

/// Forces every sample onto the kept subset: the rest is marked missing and
/// zero-filled. The lower-bound baseline sees only its subset, in training
/// and in evaluation alike.
pub fn restrict_to_subset<T: Scalar>(
    data: &[ModalityBundle<T>],
    keep: [bool; 3],
) -> Result<Vec<ModalityBundle<T>>, TrainError> {
    let mask = MissingMask::new(!keep[0], !keep[1], !keep[2]).map_err(|e| TrainError::Contract {
        what: "restrict_to_subset",
        detail: e.to_string(),
    })?;
    let mut out = data.to_vec();
    for bundle in &mut out {
        bundle.mask = mask;
        bundle.blank_missing();
    }
    Ok(out)
}

/// Trainable-name predicate for a tuning mode.
fn tune_partition(baseline: BaselineMode) -> fn(&str) -> bool {
    match baseline {
        BaselineMode::None => {
            |name| is_prompt_param(name) || is_mmgm_param(name) || is_tunable_backbone_param(name)
        }
        BaselineMode::Substitution => is_tunable_backbone_param,
        BaselineMode::LowerBound | BaselineMode::ModalityDropout => |_| true,
    }
}

/// Loads a pretrained checkpoint and tunes it under simulated missingness.
/// Inputs must be complete; masks are drawn internally at rate η (except
/// for the lower-bound baseline, which keeps a fixed subset). The tuned
/// validation-best parameters are written to `ckpt_out`.
///
/// `prompt_len` overrides the checkpoint's prompt length; the backbone is
/// prompt-length-agnostic, so fresh prompts of any valid length attach to
/// the same pretrained weights.
pub fn prompt_tune(
    ckpt_in: &Path,
    tcfg: &TrainConfig,
    train: &[ModalityBundle<f32>],
    val: &[ModalityBundle<f32>],
    prompt_len: Option<usize>,
    ckpt_out: &Path,
) -> Result<TrainReport, TrainError> {
    tcfg.validate()?;
    if tcfg.stage != Stage::PromptTune {
        return Err(TrainError::Contract {
            what: "prompt_tune",
            detail: format!("stage is {:?}, expected PromptTune", tcfg.stage),
        });
    }
    require_complete("prompt_tune", &[("train", train), ("val", val)])?;
    let (mut mcfg, mut store) = load_checkpoint(ckpt_in)?;
    if let Some(lp) = prompt_len {
        mcfg.prompt_len = lp;
    }
    mcfg.validate()?;
    let rng = Rng::new(tcfg.seed);
    let prompts = match tcfg.baseline {
        BaselineMode::None => {
            let bank = PromptBank::build(&mcfg, &mut store, &rng.derive("prompt_init"))?;
            let mmgm = Mmgm::build(&mcfg, &mut store, &rng.derive("mmgm_init"))?;
            Some((bank, mmgm))
        }
        _ => None,
    };
    store.set_trainable_by(tune_partition(tcfg.baseline));
    let backbone = Backbone::bind(&mcfg, &store)?;
    let pipeline = Pipeline { backbone, prompts };
    let owned_train;
    let owned_val;
    let train_data = match tcfg.baseline {
        BaselineMode::LowerBound => {
            let keep = parse_subset(&tcfg.lb_subset)?;
            owned_train = restrict_to_subset(train, keep)?;
            owned_val = restrict_to_subset(val, keep)?;
            EpochData::Fixed(&owned_train)
        }
        BaselineMode::ModalityDropout => {
            let mut masked_val = val.to_vec();
            apply_missingness(&mut masked_val, tcfg.eta, &mut rng.derive("mask.val"))?;
            owned_val = masked_val;
            EpochData::Resampled {
                pristine: train,
                eta: tcfg.eta,
                rng: rng.derive("mask.train"),
            }
        }
        _ => {
            let mut masked_val = val.to_vec();
            apply_missingness(&mut masked_val, tcfg.eta, &mut rng.derive("mask.val"))?;
            owned_val = masked_val;
            if tcfg.resample_masks {
                EpochData::Resampled {
                    pristine: train,
                    eta: tcfg.eta,
                    rng: rng.derive("mask.train"),
                }
            } else {
                let mut masked_train = train.to_vec();
                apply_missingness(&mut masked_train, tcfg.eta, &mut rng.derive("mask.train"))?;
                owned_train = masked_train;
                EpochData::Fixed(&owned_train)
            }
        }
    };
    let (best, report) = train_loop(
        &pipeline,
        &mut store,
        tcfg,
        &train_data,
        &owned_val,
        None,
        false,
        &rng.derive("train"),
    )?;
    save_checkpoint(ckpt_out, &mcfg, &best)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, DataSplits, SyntheticSpec};
    use tempfile::tempdir;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 4,
            prompt_len: 2,
            n_heads: 2,
            n_layers: 1,
            n_self_layers: 1,
            ffn_mult: 2,
            d_raw: [3, 3, 3],
            seq_len: [6, 6, 6],
            task: Task::Regression,
            dropout: 0.1,
        }
    }

    fn tiny_data(n_train: usize, n_val: usize) -> DataSplits<f32> {
        let spec = SyntheticSpec {
            z_dim: 3,
            seq_len: [6, 6, 6],
            d_raw: [3, 3, 3],
            n_train,
            n_val,
            n_test: 4,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, &Rng::new(77)).unwrap()
    }

    fn cfg(stage: Stage, epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            stage,
            epochs,
            batch_size,
            seed,
            ..TrainConfig::default()
        }
    }

    fn scalar_store(values: Vec<f64>, trainable: bool) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let n = values.len();
        let id = store
            .insert("w", Tensor::new(vec![n], values).unwrap(), trainable)
            .unwrap();
        (store, id)
    }

    fn set_grad(accum: &mut GradAccum<f64>, id: ParamId, g: Vec<f64>) {
        accum.grads[id.index()] = Some(g);
    }

    #[test]
    fn l1_loss_matches_hand_examples() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut tape = Tape::new(&store);
        let preds = tape.constant(&Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap());
        let labels = [Label::Value(0.0), Label::Value(0.0)];
        let loss = compute_loss(&mut tape, preds, &labels, &Task::Regression).unwrap();
        assert_eq!(tape.values(loss)[0], 1.5);

        let mut tape = Tape::new(&store);
        let preds = tape.constant(&Tensor::new(vec![2, 1], vec![0.25, -0.5]).unwrap());
        let labels = [Label::Value(0.25), Label::Value(-0.5)];
        let loss = compute_loss(&mut tape, preds, &labels, &Task::Regression).unwrap();
        assert_eq!(tape.values(loss)[0], 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_k() {
        let task = Task::Classification { n_classes: 4 };
        let store: ParamStore<f64> = ParamStore::new();
        let mut tape = Tape::new(&store);
        let preds = tape.constant(&Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap());
        let labels = [Label::Class(0), Label::Class(3)];
        let loss = compute_loss(&mut tape, preds, &labels, &task).unwrap();
        assert!((tape.values(loss)[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_task_label_mismatch() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut tape = Tape::new(&store);
        let preds = tape.constant(&Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap());
        let task = Task::Classification { n_classes: 4 };
        let err = compute_loss(&mut tape, preds, &[Label::Value(0.5)], &task).unwrap_err();
        assert!(matches!(err, TrainError::Contract { .. }), "{err}");
        let err = compute_loss(&mut tape, preds, &[Label::Class(4)], &task).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");

        let mut tape = Tape::new(&store);
        let preds = tape.constant(&Tensor::new(vec![1, 2], vec![0.0; 2]).unwrap());
        let err =
            compute_loss(&mut tape, preds, &[Label::Value(0.5)], &Task::Regression).unwrap_err();
        assert!(matches!(err, TrainError::Contract { .. }), "{err}");
    }

    #[test]
    fn adam_zero_gradient_leaves_fresh_parameter_and_moments_unchanged() {
        let (mut store, id) = scalar_store(vec![0.75, -1.25], true);
        let before = store.get(id).tensor.values.clone();
        let mut accum = GradAccum::new(&store);
        accum.begin_step(&store);
        let mut state = OptimizerState::new(&store);
        adam_step(&mut store, &accum, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(store.get(id).tensor.values, before);
        assert!(state.first_moment(id).unwrap().iter().all(|&m| m == 0.0));
        assert!(state.second_moment(id).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_moments_decay_under_zero_gradient() {
        let tcfg = TrainConfig::default();
        let (mut store, id) = scalar_store(vec![1.0], true);
        let mut accum = GradAccum::new(&store);
        accum.begin_step(&store);
        set_grad(&mut accum, id, vec![0.3]);
        let mut state = OptimizerState::new(&store);
        adam_step(&mut store, &accum, &mut state, &tcfg).unwrap();
        let m1 = state.first_moment(id).unwrap()[0];
        let v1 = state.second_moment(id).unwrap()[0];
        assert!(m1 != 0.0 && v1 != 0.0);
        set_grad(&mut accum, id, vec![0.0]);
        adam_step(&mut store, &accum, &mut state, &tcfg).unwrap();
        assert_eq!(state.first_moment(id).unwrap()[0], tcfg.beta1 * m1 + (1.0 - tcfg.beta1) * 0.0);
        assert_eq!(state.second_moment(id).unwrap()[0], tcfg.beta2 * v1 + (1.0 - tcfg.beta2) * 0.0);
    }

    #[test]
    fn adam_first_step_magnitude_is_the_learning_rate() {
        for g in [0.3, -0.02, 7.5] {
            let tcfg = TrainConfig::default();
            let (mut store, id) = scalar_store(vec![1.0], true);
            let mut accum = GradAccum::new(&store);
            accum.begin_step(&store);
            set_grad(&mut accum, id, vec![g]);
            let mut state = OptimizerState::new(&store);
            adam_step(&mut store, &accum, &mut state, &tcfg).unwrap();
            let delta = store.get(id).tensor.values[0] - 1.0;
            assert!(
                (delta + tcfg.lr * g.signum()).abs() < 1e-9 * tcfg.lr.max(1.0),
                "g={g}: delta={delta}"
            );
        }
    }

    #[test]
    fn adam_never_touches_frozen_parameters() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let live = store
            .insert("live", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        let frozen = store
            .insert("frozen", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), false)
            .unwrap();
        let mut tape = Tape::new(&store);
        let a = tape.param(live);
        let b = tape.param(frozen);
        let sum = tape.add(a, b).unwrap();
        let loss = tape.mean_all(sum);
        tape.backward(loss).unwrap();
        assert!(tape.param_grad(frozen).is_none());
        let mut accum = GradAccum::new(&store);
        accum.begin_step(&store);
        accum.absorb(&store, &tape);
        let frozen_before = store.get(frozen).tensor.values.clone();
        let live_before = store.get(live).tensor.values.clone();
        let mut state = OptimizerState::new(&store);
        adam_step(&mut store, &accum, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(store.get(frozen).tensor.values, frozen_before);
        assert_ne!(store.get(live).tensor.values, live_before);
    }

    #[test]
    fn adam_missing_gradient_is_a_contract_error() {
        let (mut store, _) = scalar_store(vec![1.0], true);
        let accum = GradAccum::new(&store);
        let mut state = OptimizerState::new(&store);
        let err = adam_step(&mut store, &accum, &mut state, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("no gradient"), "{err}");
    }

    #[test]
    fn adam_update_is_a_pure_function_of_gradients_and_state() {
        let (mut store_a, id) = scalar_store(vec![0.5, -1.0, 2.0], true);
        let mut store_b = store_a.clone();
        let mut state_a = OptimizerState::new(&store_a);
        let mut state_b = state_a.clone();
        let tcfg = TrainConfig::default();
        for grads in [vec![0.1, 0.2, -0.3], vec![-0.5, 0.0, 0.25]] {
            let mut accum = GradAccum::new(&store_a);
            accum.begin_step(&store_a);
            set_grad(&mut accum, id, grads);
            adam_step(&mut store_a, &accum, &mut state_a, &tcfg).unwrap();
            adam_step(&mut store_b, &accum, &mut state_b, &tcfg).unwrap();
            assert_eq!(store_a.get(id).tensor.values, store_b.get(id).tensor.values);
            assert_eq!(state_a.first_moment(id), state_b.first_moment(id));
            assert_eq!(state_a.second_moment(id), state_b.second_moment(id));
        }
    }

    #[test]
    fn gradient_clip_rescales_to_the_maximum_norm() {
        let (store, id) = scalar_store(vec![0.0, 0.0], true);
        let mut accum = GradAccum::new(&store);
        accum.begin_step(&store);
        set_grad(&mut accum, id, vec![3.0, 4.0]);
        let norm = accum.clip_global_norm(1.0);
        assert_eq!(norm, 5.0);
        let clipped = accum.get(id).unwrap();
        assert!((clipped[0] - 0.6).abs() < 1e-12 && (clipped[1] - 0.8).abs() < 1e-12);
        assert!((accum.global_norm() - 1.0).abs() < 1e-12);

        let mut accum = GradAccum::new(&store);
        accum.begin_step(&store);
        set_grad(&mut accum, id, vec![0.1, 0.2]);
        accum.clip_global_norm(1.0);
        assert_eq!(accum.get(id).unwrap(), &[0.1, 0.2]);
    }

    #[test]
    fn pretrain_rejects_incomplete_samples() {
        let dir = tempdir().unwrap();
        let mut data = tiny_data(4, 2);
        data.train[0].mask = MissingMask::new(true, false, false).unwrap();
        data.train[0].blank_missing();
        let err = pretrain(
            &tiny_model(),
            &cfg(Stage::Pretrain, 1, 4, 1),
            &data.train,
            &data.val,
            &dir.path().join("b.ckpt"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("train sample 0"), "{err}");
    }

    #[test]
    fn prompt_tune_rejects_incomplete_inputs_before_touching_the_checkpoint() {
        let dir = tempdir().unwrap();
        let mut data = tiny_data(4, 2);
        data.train[1].mask = MissingMask::new(false, true, false).unwrap();
        data.train[1].blank_missing();
        let err = prompt_tune(
            &dir.path().join("absent.ckpt"),
            &cfg(Stage::PromptTune, 1, 4, 1),
            &data.train,
            &data.val,
            None,
            &dir.path().join("t.ckpt"),
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::Contract { .. }), "{err}");
        assert!(err.to_string().contains("train sample 1"), "{err}");
    }

    #[test]
    fn stage_mismatch_is_a_contract_error() {
        let dir = tempdir().unwrap();
        let data = tiny_data(4, 2);
        let err = pretrain(
            &tiny_model(),
            &cfg(Stage::PromptTune, 1, 4, 1),
            &data.train,
            &data.val,
            &dir.path().join("b.ckpt"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("stage"), "{err}");
    }

    #[test]
    fn pretrain_is_bitwise_deterministic_for_a_fixed_seed() {
        let dir = tempdir().unwrap();
        let data = tiny_data(16, 8);
        let run = |name: &str, seed: u64| {
            let path = dir.path().join(name);
            let report = pretrain(
                &tiny_model(),
                &cfg(Stage::Pretrain, 2, 8, seed),
                &data.train,
                &data.val,
                &path,
            )
            .unwrap();
            (report, std::fs::read(path).unwrap())
        };
        let (report_a, bytes_a) = run("a.ckpt", 9);
        let (report_b, bytes_b) = run("b.ckpt", 9);
        assert_eq!(report_a, report_b);
        assert_eq!(bytes_a, bytes_b);
        let (report_c, _) = run("c.ckpt", 10);
        assert_ne!(report_a.step_loss, report_c.step_loss);
    }

    #[test]
    fn checkpoint_resumes_to_the_same_next_batch_loss() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("resume.ckpt");
        let mcfg = tiny_model();
        let tcfg = cfg(Stage::Pretrain, 2, 8, 3);
        let data = tiny_data(16, 8);
        let rng = Rng::new(tcfg.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(&mcfg, &mut store, &rng.derive("init")).unwrap();
        let pipeline = Pipeline {
            backbone,
            prompts: None,
        };
        let (best, _) = train_loop(
            &pipeline,
            &mut store,
            &tcfg,
            &EpochData::Fixed(&data.train),
            &data.val,
            Some(tcfg.clip_norm),
            true,
            &rng.derive("train"),
        )
        .unwrap();
        save_checkpoint(&path, &mcfg, &best).unwrap();
        let (loaded_cfg, loaded_store) = load_checkpoint(&path).unwrap();
        let reloaded = Pipeline::bind(&loaded_cfg, &loaded_store).unwrap();
        let batch: Vec<&ModalityBundle<f32>> = data.train.iter().take(8).collect();
        let live = run_batch(&pipeline, &best, &batch, None, None).unwrap();
        let resumed = run_batch(&reloaded, &loaded_store, &batch, None, None).unwrap();
        assert_eq!(live.to_bits(), resumed.to_bits());
    }

    #[test]
    fn pretrain_halves_training_loss_on_the_synthetic_benchmark() {
        let dir = tempdir().unwrap();
        let spec = SyntheticSpec {
            z_dim: 4,
            seq_len: [8, 8, 8],
            d_raw: [6, 6, 6],
            n_train: 96,
            n_val: 16,
            n_test: 4,
            ..SyntheticSpec::default()
        };
        let data: DataSplits<f32> = generate_synthetic(&spec, &Rng::new(41)).unwrap();
        let mcfg = ModelConfig {
            d_model: 8,
            prompt_len: 2,
            n_heads: 2,
            n_layers: 1,
            n_self_layers: 1,
            ffn_mult: 2,
            d_raw: [6, 6, 6],
            seq_len: [8, 8, 8],
            task: Task::Regression,
            dropout: 0.1,
        };
        let tcfg = cfg(Stage::Pretrain, 35, 16, 5);
        let report = pretrain(&mcfg, &tcfg, &data.train, &data.val, &dir.path().join("o.ckpt"))
            .unwrap();
        assert!(report.step_loss.len() >= 200, "{} steps", report.step_loss.len());
        let start: f64 = report.step_loss[..10].iter().sum::<f64>() / 10.0;
        let tail = &report.step_loss[report.step_loss.len() - 10..];
        let end: f64 = tail.iter().sum::<f64>() / 10.0;
        assert!(
            end <= 0.5 * start,
            "loss fell from {start:.4} only to {end:.4}"
        );
    }

    #[test]
    fn prompt_tune_freezes_the_backbone_bitwise() {
        let dir = tempdir().unwrap();
        let base = dir.path().join("base.ckpt");
        let tuned = dir.path().join("tuned.ckpt");
        let data = tiny_data(20, 8);
        pretrain(&tiny_model(), &cfg(Stage::Pretrain, 1, 8, 2), &data.train, &data.val, &base)
            .unwrap();
        // 10 batches of 2 over 20 samples, 10 epochs: 100 optimizer steps.
        let tcfg = cfg(Stage::PromptTune, 10, 2, 2);
        prompt_tune(&base, &tcfg, &data.train, &data.val, None, &tuned).unwrap();
        let (_, before) = load_checkpoint(&base).unwrap();
        let (tuned_cfg, after) = load_checkpoint(&tuned).unwrap();
        let tunable = tune_partition(BaselineMode::None);
        let mut frozen_checked = 0;
        for (_, p) in after.iter() {
            if tunable(&p.name) {
                continue;
            }
            let original = before.by_name(&p.name).expect("frozen param came from the checkpoint");
            let old = &before.get(original).tensor.values;
            assert!(
                p.tensor.values.iter().zip(old.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "frozen parameter {} changed",
                p.name
            );
            frozen_checked += 1;
        }
        assert!(frozen_checked > 0);
        // Fresh prompts with the tuning seed; training must have moved some.
        let rng = Rng::new(tcfg.seed);
        let mut fresh = ParamStore::<f32>::new();
        PromptBank::build(&tuned_cfg, &mut fresh, &rng.derive("prompt_init")).unwrap();
        Mmgm::build(&tuned_cfg, &mut fresh, &rng.derive("mmgm_init")).unwrap();
        let moved = fresh.iter().any(|(_, p)| {
            let id = after.by_name(&p.name).expect("tuned checkpoint keeps prompt params");
            after.get(id).tensor.values != p.tensor.values
        });
        assert!(moved, "no prompt or generator parameter moved during tuning");
    }

    #[test]
    fn tune_partition_selects_the_expected_names() {
        let full = tune_partition(BaselineMode::None);
        assert!(full("prompt.gen.a"));
        assert!(full("mmgm.joint.t.pair.w"));
        assert!(full("backbone.conv_in.v.w"));
        assert!(full("backbone.head.b"));
        assert!(!full("backbone.tgt.a.cross.v.0.wq"));
        let ms = tune_partition(BaselineMode::Substitution);
        assert!(ms("backbone.conv_in.a.w") && ms("backbone.head.w"));
        assert!(!ms("backbone.tgt.t.selfattn.0.wo") && !ms("prompt.type"));
        for mode in [BaselineMode::LowerBound, BaselineMode::ModalityDropout] {
            assert!(tune_partition(mode)("backbone.tgt.a.cross.v.0.wq"));
        }
    }

    #[test]
    fn parse_subset_accepts_canonical_letters_only() {
        assert_eq!(parse_subset("t").unwrap(), [false, false, true]);
        assert_eq!(parse_subset("av").unwrap(), [true, true, false]);
        assert_eq!(parse_subset("avt").unwrap(), [true, true, true]);
        assert!(parse_subset("x").is_err());
        assert!(parse_subset("").is_err());
    }

    #[test]
    fn restrict_to_subset_zero_fills_everything_else() {
        let data = tiny_data(4, 2);
        let restricted = restrict_to_subset(&data.train, [false, false, true]).unwrap();
        for bundle in &restricted {
            assert_eq!(bundle.mask.case_name(), "t");
            assert!(bundle.audio.values.iter().all(|&v| v == 0.0));
            assert!(bundle.video.values.iter().all(|&v| v == 0.0));
            assert!(bundle.text.values.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn modality_dropout_resamples_masks_each_epoch() {
        let data = tiny_data(16, 2);
        let source = EpochData::Resampled {
            pristine: &data.train,
            eta: 1.0,
            rng: Rng::new(4),
        };
        let masks = |epoch: usize| -> Vec<MissingMask> {
            source.materialize(epoch).unwrap().iter().map(|b| b.mask).collect()
        };
        assert_eq!(masks(0), masks(0));
        assert_ne!(masks(0), masks(1));
    }

    #[test]
    fn every_baseline_mode_tunes_and_writes_a_promptless_checkpoint() {
        let dir = tempdir().unwrap();
        let base = dir.path().join("base.ckpt");
        let data = tiny_data(8, 4);
        pretrain(&tiny_model(), &cfg(Stage::Pretrain, 1, 8, 6), &data.train, &data.val, &base)
            .unwrap();
        let (_, pretrained) = load_checkpoint(&base).unwrap();
        for baseline in [
            BaselineMode::LowerBound,
            BaselineMode::Substitution,
            BaselineMode::ModalityDropout,
        ] {
            let out = dir.path().join(format!("{baseline:?}.ckpt"));
            let tcfg = TrainConfig {
                baseline,
                ..cfg(Stage::PromptTune, 1, 4, 6)
            };
            prompt_tune(&base, &tcfg, &data.train, &data.val, None, &out).unwrap();
            let (_, store) = load_checkpoint(&out).unwrap();
            assert!(store.by_name("prompt.type").is_none());
            assert_eq!(store.len(), pretrained.len());
            if baseline == BaselineMode::Substitution {
                for (_, p) in store.iter() {
                    if !is_tunable_backbone_param(&p.name) {
                        let id = pretrained.by_name(&p.name).unwrap();
                        assert_eq!(
                            p.tensor.values,
                            pretrained.get(id).tensor.values,
                            "substitution baseline must not move {}",
                            p.name
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn pipeline_gradients_match_finite_differences() {
        let report = pipeline_gradcheck(&tiny_model(), 1e-4, 2, 13).unwrap();
        assert!(report.coords_checked > 50);
        assert!(
            report.max_rel_err <= 1e-4,
            "worst {} coord {}: rel err {}",
            report.worst_param,
            report.worst_coord,
            report.max_rel_err
        );
    }

    #[test]
    fn dataset_loss_rejects_an_empty_dataset() {
        let mcfg = tiny_model();
        let rng = Rng::new(1);
        let mut store: ParamStore<f32> = ParamStore::new();
        let backbone = Backbone::build(&mcfg, &mut store, &rng).unwrap();
        let pipeline = Pipeline {
            backbone,
            prompts: None,
        };
        let err = dataset_loss(&pipeline, &store, &[]).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }
}
