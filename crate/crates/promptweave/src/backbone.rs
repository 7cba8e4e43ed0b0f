//! Crossmodal transformer over three input streams.
//!
//! Each modality is first mapped by a temporal convolution to `d_model`
//! channels. For every target modality, two directional cross-attention
//! stacks attend from the other two modalities (queries from the target
//! stream, keys/values from the source features at every layer). The two
//! streams are concatenated channel-wise and refined by self-attention; the
//! final time step of each target stream is taken, and the three vectors are
//! concatenated into the fused representation fed to the prediction head.
//!
//! Blocks are pre-norm: `x + Attn(LN(x))` then `x + FFN(LN(x))`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::numerics::rng::Rng;
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::numerics::tensor::{Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Canonical modality order used everywhere: audio, video, text.
pub const MODALITIES: [&str; 3] = ["a", "v", "t"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Regression,
    Classification { n_classes: usize },
}

impl Task {
    pub fn output_width(&self) -> usize {
        match self {
            Task::Regression => 1,
            Task::Classification { n_classes } => *n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Common model (and prompt) channel width.
    pub d_model: usize,
    /// Prompt length along the time axis.
    pub prompt_len: usize,
    pub n_heads: usize,
    /// Crossmodal layers per directed pair.
    pub n_layers: usize,
    /// Self-attention layers after channel concatenation.
    pub n_self_layers: usize,
    /// Feed-forward hidden width as a multiple of the stream width.
    pub ffn_mult: usize,
    /// Raw feature dims per modality (audio, video, text).
    pub d_raw: [usize; 3],
    /// Sequence lengths per modality (audio, video, text).
    pub seq_len: [usize; 3],
    pub task: Task,
    /// Attention dropout rate; applied only while pretraining.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            prompt_len: 16,
            n_heads: 4,
            n_layers: 2,
            n_self_layers: 1,
            ffn_mult: 4,
            d_raw: [20, 20, 20],
            seq_len: [24, 24, 24],
            task: Task::Regression,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config field `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn field_err(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field,
        message: message.into(),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d_model == 0 {
            return Err(field_err("d_model", "must be positive"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(field_err(
                "n_heads",
                format!("d_model {} must be divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.prompt_len == 0 {
            return Err(field_err("prompt_len", "must be at least 1"));
        }
        let min_len = self.seq_len.iter().copied().min().unwrap();
        if self.prompt_len > min_len {
            return Err(field_err(
                "prompt_len",
                format!(
                    "prompt length {} exceeds the shortest sequence length {}",
                    self.prompt_len, min_len
                ),
            ));
        }
        if self.seq_len.iter().any(|&l| l == 0) || self.d_raw.iter().any(|&d| d == 0) {
            return Err(field_err("seq_len", "sequence lengths and raw dims must be positive"));
        }
        if self.n_layers == 0 {
            return Err(field_err("n_layers", "must be at least 1"));
        }
        if self.n_self_layers == 0 {
            return Err(field_err("n_self_layers", "must be at least 1"));
        }
        if self.ffn_mult == 0 {
            return Err(field_err("ffn_mult", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(field_err("dropout", "must lie in [0, 1)"));
        }
        if let Task::Classification { n_classes } = self.task {
            if n_classes < 2 {
                return Err(field_err("task", "classification needs at least 2 classes"));
            }
        }
        Ok(())
    }

    /// Width of the fused representation: three targets at 2 x d_model each.
    pub fn fused_width(&self) -> usize {
        6 * self.d_model
    }

    /// The two source modalities of a target, in canonical order.
    pub fn sources_of(target: usize) -> [usize; 2] {
        match target {
            0 => [1, 2],
            1 => [0, 2],
            2 => [0, 1],
            _ => panic!("modality index out of range"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// One pre-norm attention block: layer norms, Q/K/V/O projections, and the
/// feed-forward pair.
#[derive(Debug, Clone, Copy)]
pub struct AttnBlockIds {
    pub ln_q_g: ParamId,
    pub ln_q_b: ParamId,
    pub ln_kv_g: ParamId,
    pub ln_kv_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    /// Key projection carries no bias: a constant shift of every key leaves
    /// the softmax unchanged, so such a bias could never receive gradient.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln_ff_g: ParamId,
    pub ln_ff_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

/// Parameter ids of the whole backbone; values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: ModelConfig,
    pub conv_in: [ConvIds; 3],
    /// cross[target][source_slot][layer]; slot order = `sources_of(target)`.
    pub cross: Vec<Vec<Vec<AttnBlockIds>>>,
    /// fuse[target][layer]: self-attention at width 2 x d_model.
    pub fuse: Vec<Vec<AttnBlockIds>>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Uniform init on +-1/sqrt(fan_in); biases and norm offsets start at zero,
/// norm gains at one. Each tensor draws from a stream derived from its name,
/// so init is independent of insertion order.
pub(crate) fn init_weight<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    rng: &Rng,
) -> Result<ParamId, TensorError> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut r = rng.derive(name);
    store.insert(name, Tensor::rand_uniform(shape, -bound, bound, &mut r), true)
}

pub(crate) fn init_zeros<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
) -> Result<ParamId, TensorError> {
    store.insert(name, Tensor::zeros(shape), true)
}

fn init_ones<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
) -> Result<ParamId, TensorError> {
    store.insert(name, Tensor::filled(shape, T::one()), true)
}

fn build_attn_block<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    width: usize,
    ffn_mult: usize,
    rng: &Rng,
) -> Result<AttnBlockIds, TensorError> {
    let hidden = width * ffn_mult;
    let p = |suffix: &str| format!("{prefix}.{suffix}");
    Ok(AttnBlockIds {
        ln_q_g: init_ones(store, &p("ln_q.g"), &[width])?,
        ln_q_b: init_zeros(store, &p("ln_q.b"), &[width])?,
        ln_kv_g: init_ones(store, &p("ln_kv.g"), &[width])?,
        ln_kv_b: init_zeros(store, &p("ln_kv.b"), &[width])?,
        wq: init_weight(store, &p("wq"), &[width, width], width, rng)?,
        bq: init_zeros(store, &p("bq"), &[width])?,
        wk: init_weight(store, &p("wk"), &[width, width], width, rng)?,
        wv: init_weight(store, &p("wv"), &[width, width], width, rng)?,
        bv: init_zeros(store, &p("bv"), &[width])?,
        wo: init_weight(store, &p("wo"), &[width, width], width, rng)?,
        bo: init_zeros(store, &p("bo"), &[width])?,
        ln_ff_g: init_ones(store, &p("ln_ff.g"), &[width])?,
        ln_ff_b: init_zeros(store, &p("ln_ff.b"), &[width])?,
        ff1_w: init_weight(store, &p("ff1.w"), &[width, hidden], width, rng)?,
        ff1_b: init_zeros(store, &p("ff1.b"), &[hidden])?,
        ff2_w: init_weight(store, &p("ff2.w"), &[hidden, width], hidden, rng)?,
        ff2_b: init_zeros(store, &p("ff2.b"), &[width])?,
    })
}

fn attn_block_names(prefix: &str) -> Vec<String> {
    [
        "ln_q.g", "ln_q.b", "ln_kv.g", "ln_kv.b", "wq", "bq", "wk", "wv", "bv", "wo", "bo",
        "ln_ff.g", "ln_ff.b", "ff1.w", "ff1.b", "ff2.w", "ff2.b",
    ]
    .iter()
    .map(|s| format!("{prefix}.{s}"))
    .collect()
}

fn bind_attn_block<T: Scalar>(
    store: &ParamStore<T>,
    prefix: &str,
) -> Result<AttnBlockIds, TensorError> {
    let names = attn_block_names(prefix);
    let mut ids = Vec::with_capacity(names.len());
    for name in &names {
        ids.push(store.by_name(name).ok_or_else(|| TensorError::Contract {
            op: "Backbone::bind",
            detail: format!("missing parameter {name:?}"),
        })?);
    }
    Ok(AttnBlockIds {
        ln_q_g: ids[0],
        ln_q_b: ids[1],
        ln_kv_g: ids[2],
        ln_kv_b: ids[3],
        wq: ids[4],
        bq: ids[5],
        wk: ids[6],
        wv: ids[7],
        bv: ids[8],
        wo: ids[9],
        bo: ids[10],
        ln_ff_g: ids[11],
        ln_ff_b: ids[12],
        ff1_w: ids[13],
        ff1_b: ids[14],
        ff2_w: ids[15],
        ff2_b: ids[16],
    })
}

impl Backbone {
    /// Creates and initializes all backbone parameters in `store`.
    pub fn build<T: Scalar>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &Rng,
    ) -> Result<Self, TensorError> {
        let d = cfg.d_model;
        let mut conv_in = Vec::with_capacity(3);
        for m in 0..3 {
            let name = MODALITIES[m];
            let w = init_weight(
                store,
                &format!("backbone.conv_in.{name}.w"),
                &[3, cfg.d_raw[m], d],
                3 * cfg.d_raw[m],
                rng,
            )?;
            let b = init_zeros(store, &format!("backbone.conv_in.{name}.b"), &[d])?;
            conv_in.push(ConvIds { w, b });
        }

        let mut cross = Vec::with_capacity(3);
        for tgt in 0..3 {
            let mut per_slot = Vec::with_capacity(2);
            for src in ModelConfig::sources_of(tgt) {
                let mut layers = Vec::with_capacity(cfg.n_layers);
                for layer in 0..cfg.n_layers {
                    let prefix = format!(
                        "backbone.tgt.{}.cross.{}.{}",
                        MODALITIES[tgt], MODALITIES[src], layer
                    );
                    layers.push(build_attn_block(store, &prefix, d, cfg.ffn_mult, rng)?);
                }
                per_slot.push(layers);
            }
            cross.push(per_slot);
        }

        let mut fuse = Vec::with_capacity(3);
        for tgt in 0..3 {
            let mut layers = Vec::with_capacity(cfg.n_self_layers);
            for layer in 0..cfg.n_self_layers {
                let prefix = format!("backbone.tgt.{}.fuse.{}", MODALITIES[tgt], layer);
                layers.push(build_attn_block(store, &prefix, 2 * d, cfg.ffn_mult, rng)?);
            }
            fuse.push(layers);
        }

        let out = cfg.task.output_width();
        let head_w = init_weight(store, "backbone.head.w", &[cfg.fused_width(), out], cfg.fused_width(), rng)?;
        let head_b = init_zeros(store, "backbone.head.b", &[out])?;

        Ok(Backbone {
            cfg: cfg.clone(),
            conv_in: [conv_in[0], conv_in[1], conv_in[2]],
            cross,
            fuse,
            head_w,
            head_b,
        })
    }

    /// Rebinds parameter ids by name, e.g. after loading a checkpoint.
    pub fn bind<T: Scalar>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Self, TensorError> {
        let lookup = |name: String| {
            store.by_name(&name).ok_or_else(|| TensorError::Contract {
                op: "Backbone::bind",
                detail: format!("missing parameter {name:?}"),
            })
        };
        let mut conv_in = Vec::with_capacity(3);
        for m in MODALITIES {
            conv_in.push(ConvIds {
                w: lookup(format!("backbone.conv_in.{m}.w"))?,
                b: lookup(format!("backbone.conv_in.{m}.b"))?,
            });
        }
        let mut cross = Vec::with_capacity(3);
        for tgt in 0..3 {
            let mut per_slot = Vec::with_capacity(2);
            for src in ModelConfig::sources_of(tgt) {
                let mut layers = Vec::with_capacity(cfg.n_layers);
                for layer in 0..cfg.n_layers {
                    let prefix = format!(
                        "backbone.tgt.{}.cross.{}.{}",
                        MODALITIES[tgt], MODALITIES[src], layer
                    );
                    layers.push(bind_attn_block(store, &prefix)?);
                }
                per_slot.push(layers);
            }
            cross.push(per_slot);
        }
        let mut fuse = Vec::with_capacity(3);
        for tgt in 0..3 {
            let mut layers = Vec::with_capacity(cfg.n_self_layers);
            for layer in 0..cfg.n_self_layers {
                layers.push(bind_attn_block(
                    store,
                    &format!("backbone.tgt.{}.fuse.{}", MODALITIES[tgt], layer),
                )?);
            }
            fuse.push(layers);
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            conv_in: [conv_in[0], conv_in[1], conv_in[2]],
            cross,
            fuse,
            head_w: lookup("backbone.head.w".to_string())?,
            head_b: lookup("backbone.head.b".to_string())?,
        })
    }

    /// Maps raw per-modality sequences to `d_model` channels, length kept.
    pub fn project_inputs<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        raw: &[NodeId; 3],
    ) -> Result<[NodeId; 3], TensorError> {
        let mut out = [raw[0]; 3];
        for m in 0..3 {
            if tape.shape(raw[m])[1] != self.cfg.d_raw[m] {
                return Err(TensorError::ShapeMismatch {
                    op: "project_inputs",
                    left: tape.shape(raw[m]).to_vec(),
                    right: vec![self.cfg.seq_len[m], self.cfg.d_raw[m]],
                });
            }
            let w = tape.param(self.conv_in[m].w);
            let b = tape.param(self.conv_in[m].b);
            out[m] = tape.conv1d(raw[m], w, b)?;
        }
        Ok(out)
    }

    /// One pre-norm attention block; queries from `x_q`, keys/values from
    /// `kv`. Works at any width that is a multiple of `n_heads` head slices.
    #[allow(clippy::too_many_arguments)]
    fn attn_block<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        ids: &AttnBlockIds,
        x_q: NodeId,
        kv: NodeId,
        n_heads: usize,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<NodeId, TensorError> {
        let width = tape.shape(x_q)[1];
        let d_head = width / n_heads;
        let eps = T::from_f64(LAYER_NORM_EPS);

        let (g, b) = (tape.param(ids.ln_q_g), tape.param(ids.ln_q_b));
        let q_in = tape.layer_norm(x_q, g, b, eps)?;
        let (g, b) = (tape.param(ids.ln_kv_g), tape.param(ids.ln_kv_b));
        let kv_in = tape.layer_norm(kv, g, b, eps)?;

        let (w, b) = (tape.param(ids.wq), tape.param(ids.bq));
        let q = tape.linear(q_in, w, b)?;
        let wk = tape.param(ids.wk);
        let k = tape.matmul(kv_in, wk)?;
        let (w, b) = (tape.param(ids.wv), tape.param(ids.bv));
        let v = tape.linear(kv_in, w, b)?;

        let scale = T::from_f64(1.0 / (d_head as f64).sqrt());
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice_cols(q, h * d_head, d_head)?;
            let kh = tape.slice_cols(k, h * d_head, d_head)?;
            let vh = tape.slice_cols(v, h * d_head, d_head)?;
            let scores = tape.matmul_tb(qh, kh)?;
            let scaled = tape.scale(scores, scale);
            let mut attn = tape.softmax(scaled, 1)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                attn = tape.dropout(attn, self.cfg.dropout, rng);
            }
            heads.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat(&heads, 1)?;
        let (w, b) = (tape.param(ids.wo), tape.param(ids.bo));
        let o = tape.linear(ctx, w, b)?;
        let x1 = tape.add(x_q, o)?;

        let (g, b) = (tape.param(ids.ln_ff_g), tape.param(ids.ln_ff_b));
        let ff_in = tape.layer_norm(x1, g, b, eps)?;
        let (w, b) = (tape.param(ids.ff1_w), tape.param(ids.ff1_b));
        let h1 = tape.linear(ff_in, w, b)?;
        let h1 = tape.relu(h1);
        let (w, b) = (tape.param(ids.ff2_w), tape.param(ids.ff2_b));
        let ff = tape.linear(h1, w, b)?;
        tape.add(x1, ff)
    }

    /// Runs the crossmodal stacks and fusion; returns the fused row vector
    /// [1 x 6 d_model]. `type_prompts`, when present, are prepended along
    /// time to the matching target stream before its crossmodal blocks.
    /// `dropout_rng` enables attention dropout (pretraining only).
    pub fn crossmodal_forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        features: &[NodeId; 3],
        type_prompts: Option<&[NodeId; 3]>,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<NodeId, TensorError> {
        let d = self.cfg.d_model;
        for m in 0..3 {
            if tape.shape(features[m])[1] != d {
                return Err(TensorError::ShapeMismatch {
                    op: "crossmodal_forward",
                    left: tape.shape(features[m]).to_vec(),
                    right: vec![self.cfg.seq_len[m], d],
                });
            }
        }
        let mut target_vecs = Vec::with_capacity(3);
        for tgt in 0..3 {
            let base = match type_prompts {
                Some(prompts) => tape.concat(&[prompts[tgt], features[tgt]], 0)?,
                None => features[tgt],
            };
            let mut streams = Vec::with_capacity(2);
            for (slot, src) in ModelConfig::sources_of(tgt).into_iter().enumerate() {
                let mut stream = base;
                for ids in &self.cross[tgt][slot] {
                    stream = self.attn_block(
                        tape,
                        ids,
                        stream,
                        features[src],
                        self.cfg.n_heads,
                        dropout_rng.as_deref_mut(),
                    )?;
                }
                streams.push(stream);
            }
            let mut joint = tape.concat(&streams, 1)?;
            for ids in &self.fuse[tgt] {
                joint = self.attn_block(
                    tape,
                    ids,
                    joint,
                    joint,
                    self.cfg.n_heads,
                    dropout_rng.as_deref_mut(),
                )?;
            }
            let last_t = tape.shape(joint)[0] - 1;
            target_vecs.push(tape.slice_rows(joint, last_t, 1)?);
        }
        tape.concat(&target_vecs, 1)
    }

    /// Linear head: [1 x 6 d_model] -> [1 x output_width].
    pub fn predict<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        fused: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = tape.param(self.head_w);
        let b = tape.param(self.head_b);
        tape.linear(fused, w, b)
    }

    /// Full pass without prompts: project, cross-attend, predict.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        raw: &[NodeId; 3],
        dropout_rng: Option<&mut Rng>,
    ) -> Result<NodeId, TensorError> {
        let feats = self.project_inputs(tape, raw)?;
        let fused = self.crossmodal_forward(tape, &feats, None, dropout_rng)?;
        self.predict(tape, fused)
    }
}

/// True for parameters that stay trainable during prompt tuning: the input
/// convolutions and the prediction head. Everything else under `backbone.`
/// freezes.
pub fn is_tunable_backbone_param(name: &str) -> bool {
    name.starts_with("backbone.conv_in.") || name.starts_with("backbone.head.")
}
