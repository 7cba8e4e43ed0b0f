//! Prompt banks and the missing-modality generation module.
//!
//! Three prompt families cooperate to handle incomplete inputs:
//! - generative prompts seed the generation module that synthesizes a raw
//!   stream for each missing modality from the available ones;
//! - missing-signal prompts are added to the first `prompt_len` feature
//!   positions of every stream and tell the model whether that stream is
//!   real or generated;
//! - missing-type prompts are projected through a mask-dependent matrix and
//!   prepended along time to each target stream, encoding which combination
//!   of modalities is absent with a parameter count linear in the number of
//!   modalities.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backbone::{init_weight, init_zeros, ConvIds, ModelConfig, MODALITIES};
use crate::numerics::rng::Rng;
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::{NodeId, ParamId, ParamStore, Tape};
use crate::numerics::tensor::{Tensor, TensorError};

/// Standard deviation for freshly initialized prompt tensors.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Which modalities of a sample are absent. At least one must be present;
/// the all-missing combination is rejected wherever a mask is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[bool; 3]", into = "[bool; 3]")]
pub struct MissingMask {
    missing: [bool; 3],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllMissing;

impl fmt::Display for AllMissing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "all three modalities are marked missing")
    }
}

impl std::error::Error for AllMissing {}

impl TryFrom<[bool; 3]> for MissingMask {
    type Error = AllMissing;

    fn try_from(missing: [bool; 3]) -> Result<Self, AllMissing> {
        if missing.iter().all(|&m| m) {
            return Err(AllMissing);
        }
        Ok(MissingMask { missing })
    }
}

impl From<MissingMask> for [bool; 3] {
    fn from(mask: MissingMask) -> [bool; 3] {
        mask.missing
    }
}

impl MissingMask {
    pub const COMPLETE: MissingMask = MissingMask {
        missing: [false; 3],
    };

    pub fn new(
        audio_missing: bool,
        video_missing: bool,
        text_missing: bool,
    ) -> Result<Self, AllMissing> {
        MissingMask::try_from([audio_missing, video_missing, text_missing])
    }

    pub fn is_missing(&self, modality: usize) -> bool {
        self.missing[modality]
    }

    pub fn is_complete(&self) -> bool {
        self.missing.iter().all(|&m| !m)
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Indices of present modalities, canonical order.
    pub fn available(&self) -> Vec<usize> {
        (0..3).filter(|&m| !self.missing[m]).collect()
    }

    /// Indices of absent modalities, canonical order.
    pub fn absent(&self) -> Vec<usize> {
        (0..3).filter(|&m| self.missing[m]).collect()
    }

    /// Case label built from the available modalities, e.g. "avt", "vt", "a".
    pub fn case_name(&self) -> String {
        let mut s = String::new();
        for m in self.available() {
            s.push_str(MODALITIES[m]);
        }
        s
    }

    /// All 7 valid masks: fewer missing first, then canonical order.
    pub fn all_masks() -> [MissingMask; 7] {
        let mk = |a, v, t| MissingMask { missing: [a, v, t] };
        [
            mk(false, false, false),
            mk(true, false, false),
            mk(false, true, false),
            mk(false, false, true),
            mk(true, true, false),
            mk(true, false, true),
            mk(false, true, true),
        ]
    }

    /// The 6 masks with at least one modality missing, in report order:
    /// single available set first ({a}, {v}, {t}), then pairs ({av}, {at},
    /// {vt}).
    pub fn incomplete_masks() -> [MissingMask; 6] {
        let mk = |a, v, t| MissingMask { missing: [a, v, t] };
        [
            mk(false, true, true),
            mk(true, false, true),
            mk(true, true, false),
            mk(false, false, true),
            mk(false, true, false),
            mk(true, false, false),
        ]
    }
}

impl fmt::Display for MissingMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.case_name())
    }
}

/// Parameter ids of every prompt tensor; values live in a [`ParamStore`]
/// under the `prompt.` namespace.
#[derive(Debug, Clone)]
pub struct PromptBank {
    /// `prompt.gen.{m}`: generative prompts, [prompt_len x d_raw_m].
    pub gen: [ParamId; 3],
    /// `prompt.sig.miss.{m}`: added when modality m is generated.
    pub sig_miss: [ParamId; 3],
    /// `prompt.sig.pres.{m}`: added when modality m is real.
    pub sig_pres: [ParamId; 3],
    /// `prompt.type`: shared missing-type prompts, [3 x prompt_len x d_model].
    pub type_rows: ParamId,
    /// `prompt.basis.{m}`: projection bases, [d_model x prompt_len].
    pub basis: [ParamId; 3],
}

fn init_prompt<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    rng: &Rng,
) -> Result<ParamId, TensorError> {
    let mut r = rng.derive(name);
    store.insert(name, Tensor::randn(shape, PROMPT_INIT_STD, &mut r), true)
}

impl PromptBank {
    pub fn build<T: Scalar>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &Rng,
    ) -> Result<Self, TensorError> {
        let (lp, d) = (cfg.prompt_len, cfg.d_model);
        let mut gen = Vec::with_capacity(3);
        let mut sig_miss = Vec::with_capacity(3);
        let mut sig_pres = Vec::with_capacity(3);
        let mut basis = Vec::with_capacity(3);
        for m in 0..3 {
            let name = MODALITIES[m];
            gen.push(init_prompt(store, &format!("prompt.gen.{name}"), &[lp, cfg.d_raw[m]], rng)?);
            sig_miss.push(init_prompt(store, &format!("prompt.sig.miss.{name}"), &[lp, d], rng)?);
            sig_pres.push(init_prompt(store, &format!("prompt.sig.pres.{name}"), &[lp, d], rng)?);
            basis.push(init_prompt(store, &format!("prompt.basis.{name}"), &[d, lp], rng)?);
        }
        let type_rows = init_prompt(store, "prompt.type", &[3, lp, d], rng)?;
        Ok(PromptBank {
            gen: [gen[0], gen[1], gen[2]],
            sig_miss: [sig_miss[0], sig_miss[1], sig_miss[2]],
            sig_pres: [sig_pres[0], sig_pres[1], sig_pres[2]],
            type_rows,
            basis: [basis[0], basis[1], basis[2]],
        })
    }

    /// Rebinds parameter ids by name, e.g. after loading a checkpoint.
    pub fn bind<T: Scalar>(store: &ParamStore<T>) -> Result<Self, TensorError> {
        let lookup = |name: String| {
            store.by_name(&name).ok_or_else(|| TensorError::Contract {
                op: "PromptBank::bind",
                detail: format!("missing parameter {name:?}"),
            })
        };
        let mut gen = Vec::with_capacity(3);
        let mut sig_miss = Vec::with_capacity(3);
        let mut sig_pres = Vec::with_capacity(3);
        let mut basis = Vec::with_capacity(3);
        for m in MODALITIES {
            gen.push(lookup(format!("prompt.gen.{m}"))?);
            sig_miss.push(lookup(format!("prompt.sig.miss.{m}"))?);
            sig_pres.push(lookup(format!("prompt.sig.pres.{m}"))?);
            basis.push(lookup(format!("prompt.basis.{m}"))?);
        }
        Ok(PromptBank {
            gen: [gen[0], gen[1], gen[2]],
            sig_miss: [sig_miss[0], sig_miss[1], sig_miss[2]],
            sig_pres: [sig_pres[0], sig_pres[1], sig_pres[2]],
            type_rows: lookup("prompt.type".to_string())?,
            basis: [basis[0], basis[1], basis[2]],
        })
    }
}

pub fn is_prompt_param(name: &str) -> bool {
    name.starts_with("prompt.")
}

pub fn is_mmgm_param(name: &str) -> bool {
    name.starts_with("mmgm.")
}

/// Total prompt values for `m` modalities with a uniform raw dim: per
/// modality one generative prompt, two signal prompts plus one shared
/// missing-type row at d_model, and one projection basis.
pub fn prompt_param_count(m: usize, prompt_len: usize, d_raw: usize, d_model: usize) -> usize {
    m * (prompt_len * d_raw + 3 * prompt_len * d_model + d_model * prompt_len)
}

/// Parameter ids of the generation module: cross-modality maps shared by
/// both generation paths, one joint block per target for the two-source
/// path, and one joint block per (target, source) pair for the one-source
/// path. All are width-3 temporal convolutions followed by relu.
#[derive(Debug, Clone)]
pub struct Mmgm {
    /// `map[src][tgt]`, src != tgt: d_raw_src channels -> d_raw_tgt.
    pub map: [[Option<ConvIds>; 3]; 3],
    /// `joint_pair[tgt]`: runs over [prompt ; both mapped sources].
    pub joint_pair: [ConvIds; 3],
    /// `joint_solo[tgt][src]`: runs over [prompt ; single mapped source].
    pub joint_solo: [[Option<ConvIds>; 3]; 3],
}

const MMGM_KERNEL: usize = 3;

impl Mmgm {
    pub fn build<T: Scalar>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &Rng,
    ) -> Result<Self, TensorError> {
        let conv = |store: &mut ParamStore<T>, name: String, c_in: usize, c_out: usize| {
            Ok::<_, TensorError>(ConvIds {
                w: init_weight(
                    store,
                    &format!("{name}.w"),
                    &[MMGM_KERNEL, c_in, c_out],
                    MMGM_KERNEL * c_in,
                    rng,
                )?,
                b: init_zeros(store, &format!("{name}.b"), &[c_out])?,
            })
        };
        let mut map = [[None; 3]; 3];
        let mut joint_solo = [[None; 3]; 3];
        let mut joint_pair = Vec::with_capacity(3);
        for tgt in 0..3 {
            let t = MODALITIES[tgt];
            for src in 0..3 {
                if src == tgt {
                    continue;
                }
                let s = MODALITIES[src];
                map[src][tgt] = Some(conv(
                    store,
                    format!("mmgm.map.{s}_to_{t}"),
                    cfg.d_raw[src],
                    cfg.d_raw[tgt],
                )?);
                joint_solo[tgt][src] = Some(conv(
                    store,
                    format!("mmgm.joint.{t}.solo.{s}"),
                    cfg.d_raw[tgt],
                    cfg.d_raw[tgt],
                )?);
            }
            joint_pair.push(conv(store, format!("mmgm.joint.{t}.pair"), cfg.d_raw[tgt], cfg.d_raw[tgt])?);
        }
        Ok(Mmgm {
            map,
            joint_pair: [joint_pair[0], joint_pair[1], joint_pair[2]],
            joint_solo,
        })
    }

    /// Rebinds parameter ids by name, e.g. after loading a checkpoint.
    pub fn bind<T: Scalar>(store: &ParamStore<T>) -> Result<Self, TensorError> {
        let conv = |name: String| {
            let lookup = |full: String| {
                store.by_name(&full).ok_or_else(|| TensorError::Contract {
                    op: "Mmgm::bind",
                    detail: format!("missing parameter {full:?}"),
                })
            };
            Ok::<_, TensorError>(ConvIds {
                w: lookup(format!("{name}.w"))?,
                b: lookup(format!("{name}.b"))?,
            })
        };
        let mut map = [[None; 3]; 3];
        let mut joint_solo = [[None; 3]; 3];
        let mut joint_pair = Vec::with_capacity(3);
        for tgt in 0..3 {
            let t = MODALITIES[tgt];
            for src in 0..3 {
                if src == tgt {
                    continue;
                }
                let s = MODALITIES[src];
                map[src][tgt] = Some(conv(format!("mmgm.map.{s}_to_{t}"))?);
                joint_solo[tgt][src] = Some(conv(format!("mmgm.joint.{t}.solo.{s}"))?);
            }
            joint_pair.push(conv(format!("mmgm.joint.{t}.pair"))?);
        }
        Ok(Mmgm {
            map,
            joint_pair: [joint_pair[0], joint_pair[1], joint_pair[2]],
            joint_solo,
        })
    }
}

fn conv_block<T: Scalar>(
    tape: &mut Tape<'_, T>,
    ids: ConvIds,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    let w = tape.param(ids.w);
    let b = tape.param(ids.b);
    let y = tape.conv1d(x, w, b)?;
    Ok(tape.relu(y))
}

/// Synthesizes raw streams for the missing modalities. Present streams pass
/// through untouched (same nodes, bit-exact); masked payloads are never
/// read. With one modality missing, both available streams are mapped into
/// the target's raw space, concatenated along time behind that target's
/// generative prompt, run through the pairwise joint block, and cropped to
/// the last L_tgt steps. With two missing, each target is generated the
/// same way from the single available source via its own joint block.
pub fn mmgm_generate<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    mmgm: &Mmgm,
    gen_prompts: &[ParamId; 3],
    raw: &[NodeId; 3],
    mask: MissingMask,
) -> Result<[NodeId; 3], TensorError> {
    let available = mask.available();
    if available.is_empty() {
        return Err(TensorError::Contract {
            op: "mmgm_generate",
            detail: "no source modality".to_string(),
        });
    }
    let mut out = *raw;
    for tgt in mask.absent() {
        let prompt = tape.param(gen_prompts[tgt]);
        let mut pieces = vec![prompt];
        for &src in &available {
            let mapped = conv_block(tape, mmgm.map[src][tgt].unwrap(), raw[src])?;
            pieces.push(mapped);
        }
        let joint_ids = match available.as_slice() {
            [solo] => mmgm.joint_solo[tgt][*solo].unwrap(),
            _ => mmgm.joint_pair[tgt],
        };
        let stacked = tape.concat(&pieces, 0)?;
        let full = conv_block(tape, joint_ids, stacked)?;
        let total = tape.shape(full)[0];
        out[tgt] = tape.slice_rows(full, total - cfg.seq_len[tgt], cfg.seq_len[tgt])?;
    }
    Ok(out)
}

/// Adds the per-modality signal prompt to the first `prompt_len` time
/// positions of each feature stream: the missing variant when the stream
/// was generated, the present variant when it is real. Later positions pass
/// through unchanged.
pub fn apply_missing_signal<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    bank: &PromptBank,
    features: &[NodeId; 3],
    mask: MissingMask,
) -> Result<[NodeId; 3], TensorError> {
    let lp = cfg.prompt_len;
    let mut out = *features;
    for m in 0..3 {
        let prompt_id = if mask.is_missing(m) {
            bank.sig_miss[m]
        } else {
            bank.sig_pres[m]
        };
        let prompt = tape.param(prompt_id);
        let len = tape.shape(features[m])[0];
        out[m] = if len == lp {
            tape.add(features[m], prompt)?
        } else {
            let head = tape.slice_rows(features[m], 0, lp)?;
            let head = tape.add(head, prompt)?;
            let tail = tape.slice_rows(features[m], lp, len - lp)?;
            tape.concat(&[head, tail], 0)?
        };
    }
    Ok(out)
}

/// Mask-dependent projection matrix: sum over modalities of basis times the
/// signal prompt selected by that modality's missing bit. [d_model x d_model].
pub fn build_missing_type_matrix<T: Scalar>(
    tape: &mut Tape<'_, T>,
    bank: &PromptBank,
    mask: MissingMask,
) -> Result<NodeId, TensorError> {
    let mut sum = None;
    for m in 0..3 {
        let signal = if mask.is_missing(m) {
            bank.sig_miss[m]
        } else {
            bank.sig_pres[m]
        };
        let basis = tape.param(bank.basis[m]);
        let s = tape.param(signal);
        let term = tape.matmul(basis, s)?;
        sum = Some(match sum {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(sum.unwrap())
}

/// Projects each shared missing-type row through the mask matrix:
/// out[m] = type_rows[m] . m_p, shapes [prompt_len x d_model] each.
pub fn project_missing_type<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    bank: &PromptBank,
    m_p: NodeId,
) -> Result<[NodeId; 3], TensorError> {
    let rows = tape.param(bank.type_rows);
    let (lp, d) = (cfg.prompt_len, cfg.d_model);
    let mut out = Vec::with_capacity(3);
    for m in 0..3 {
        let row = tape.slice_rows(rows, m, 1)?;
        let row = tape.reshape(row, &[lp, d])?;
        out.push(tape.matmul(row, m_p)?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Prepends each projected prompt along time to the matching stream. With
/// no prompts the streams pass through untouched (zero-length prompt case).
pub fn attach_missing_type<T: Scalar>(
    tape: &mut Tape<'_, T>,
    features: &[NodeId; 3],
    projected: Option<&[NodeId; 3]>,
) -> Result<[NodeId; 3], TensorError> {
    match projected {
        None => Ok(*features),
        Some(prompts) => {
            let mut out = *features;
            for m in 0..3 {
                out[m] = tape.concat(&[prompts[m], features[m]], 0)?;
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;

    fn cfg_small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            prompt_len: 4,
            n_heads: 2,
            n_layers: 1,
            n_self_layers: 1,
            ffn_mult: 2,
            d_raw: [5, 6, 7],
            seq_len: [10, 12, 14],
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn build_all(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, PromptBank, Mmgm) {
        let mut store = ParamStore::new();
        let rng = Rng::new(seed);
        let bank = PromptBank::build(cfg, &mut store, &rng).unwrap();
        let mmgm = Mmgm::build(cfg, &mut store, &rng).unwrap();
        (store, bank, mmgm)
    }

    fn raw_inputs(cfg: &ModelConfig, mask: MissingMask, seed: u64) -> [Tensor<f64>; 3] {
        let mut rng = Rng::new(seed).derive("raw");
        let mut out = Vec::with_capacity(3);
        for m in 0..3 {
            let t = if mask.is_missing(m) {
                Tensor::zeros(&[cfg.seq_len[m], cfg.d_raw[m]])
            } else {
                Tensor::randn(&[cfg.seq_len[m], cfg.d_raw[m]], 1.0, &mut rng)
            };
            out.push(t);
        }
        [out[0].clone(), out[1].clone(), out[2].clone()]
    }

    #[test]
    fn mask_rejects_all_missing_and_counts_cases() {
        assert!(MissingMask::new(true, true, true).is_err());
        assert_eq!(MissingMask::all_masks().len(), 7);
        assert_eq!(MissingMask::incomplete_masks().len(), 6);
        let names: Vec<String> = MissingMask::incomplete_masks()
            .iter()
            .map(|m| m.case_name())
            .collect();
        assert_eq!(names, ["a", "v", "t", "av", "at", "vt"]);
        assert_eq!(MissingMask::COMPLETE.case_name(), "avt");
    }

    #[test]
    fn mask_serde_round_trips_and_rejects_all_missing() {
        let mask = MissingMask::new(true, false, true).unwrap();
        let json = serde_json::to_string(&mask).unwrap();
        assert_eq!(json, "[true,false,true]");
        let back: MissingMask = serde_json::from_str(&json).unwrap();
        assert_eq!(back, mask);
        assert!(serde_json::from_str::<MissingMask>("[true,true,true]").is_err());
    }

    #[test]
    fn generate_is_identity_on_complete_samples() {
        let cfg = cfg_small();
        let (store, bank, mmgm) = build_all(&cfg, 1);
        let raw = raw_inputs(&cfg, MissingMask::COMPLETE, 2);
        let mut tape = Tape::new(&store);
        let nodes = [
            tape.constant(&raw[0]),
            tape.constant(&raw[1]),
            tape.constant(&raw[2]),
        ];
        let out = mmgm_generate(&mut tape, &cfg, &mmgm, &bank.gen, &nodes, MissingMask::COMPLETE)
            .unwrap();
        for m in 0..3 {
            assert_eq!(out[m], nodes[m]);
            assert_eq!(tape.values(out[m]), raw[m].values.as_slice());
        }
    }

    #[test]
    fn generate_with_one_missing_crops_joint_output_to_target_length() {
        let cfg = ModelConfig {
            prompt_len: 16,
            seq_len: [18, 24, 24],
            d_raw: [5, 6, 7],
            ..cfg_small()
        };
        let mask = MissingMask::new(true, false, false).unwrap();
        let (store, bank, mmgm) = build_all(&cfg, 3);
        let raw = raw_inputs(&cfg, mask, 4);
        let mut tape = Tape::new(&store);
        let nodes = [
            tape.constant(&raw[0]),
            tape.constant(&raw[1]),
            tape.constant(&raw[2]),
        ];
        let out = mmgm_generate(&mut tape, &cfg, &mmgm, &bank.gen, &nodes, mask).unwrap();
        // concat runs 16 + 24 + 24 = 64 steps before the crop
        assert_eq!(tape.shape(out[0]), &[18, 5]);
        assert_eq!(out[1], nodes[1]);
        assert_eq!(out[2], nodes[2]);
    }

    #[test]
    fn generate_ignores_masked_payload_buffers() {
        let cfg = cfg_small();
        let mask = MissingMask::new(true, true, false).unwrap();
        let (store, bank, mmgm) = build_all(&cfg, 5);
        let run = |audio_payload: f64| {
            let mut raw = raw_inputs(&cfg, mask, 6);
            raw[0].values.fill(audio_payload);
            let mut tape = Tape::new(&store);
            let nodes = [
                tape.constant(&raw[0]),
                tape.constant(&raw[1]),
                tape.constant(&raw[2]),
            ];
            let out = mmgm_generate(&mut tape, &cfg, &mmgm, &bank.gen, &nodes, mask).unwrap();
            (
                tape.values(out[0]).to_vec(),
                tape.values(out[1]).to_vec(),
            )
        };
        let (audio_a, video_a) = run(0.0);
        let (audio_b, video_b) = run(123.456);
        assert_eq!(video_a, video_b);
        assert_eq!(audio_a, audio_b);
    }

    #[test]
    fn generate_routes_gradient_into_generative_prompt() {
        // With equal sequence lengths the crop window of the single-source
        // path starts right after the prompt, so the prompt's last row sits
        // inside the joint conv's receptive field.
        let cfg = ModelConfig {
            seq_len: [10, 10, 10],
            ..cfg_small()
        };
        let mask = MissingMask::new(true, true, false).unwrap();
        let (store, bank, mmgm) = build_all(&cfg, 7);
        let raw = raw_inputs(&cfg, mask, 8);
        let mut tape = Tape::new(&store);
        let nodes = [
            tape.constant(&raw[0]),
            tape.constant(&raw[1]),
            tape.constant(&raw[2]),
        ];
        let out = mmgm_generate(&mut tape, &cfg, &mmgm, &bank.gen, &nodes, mask).unwrap();
        let mag = tape.abs(out[0]);
        let loss = tape.mean_all(mag);
        tape.backward(loss).unwrap();
        let grad = tape.param_grad(bank.gen[0]).expect("prompt grad");
        assert!(grad.iter().any(|&g| g.abs() > 0.0));
        assert!(tape.param_grad(bank.gen[2]).is_none());
    }

    #[test]
    fn generate_rejects_all_missing() {
        let cfg = cfg_small();
        let (store, bank, mmgm) = build_all(&cfg, 9);
        let raw = raw_inputs(&cfg, MissingMask::COMPLETE, 10);
        let mut tape = Tape::new(&store);
        let nodes = [
            tape.constant(&raw[0]),
            tape.constant(&raw[1]),
            tape.constant(&raw[2]),
        ];
        let bad = MissingMask {
            missing: [true; 3],
        };
        let err = mmgm_generate(&mut tape, &cfg, &mmgm, &bank.gen, &nodes, bad).unwrap_err();
        assert!(err.to_string().contains("no source modality"));
    }

    /// Signal prompts with exactly representable values so float sums invert
    /// exactly.
    fn set_exact_prompts(store: &mut ParamStore<f64>, bank: &PromptBank) {
        for m in 0..3 {
            for (id, offset) in [(bank.sig_miss[m], 1.0), (bank.sig_pres[m], -2.0)] {
                let t = &mut store.get_mut(id).tensor;
                for (i, v) in t.values.iter_mut().enumerate() {
                    *v = offset + (i % 5) as f64 * 0.25 + m as f64;
                }
            }
        }
    }

    #[test]
    fn signal_prompt_shifts_exactly_the_prompt_prefix() {
        let cfg = cfg_small();
        let (mut store, bank, _) = build_all(&cfg, 11);
        set_exact_prompts(&mut store, &bank);
        let mask = MissingMask::new(false, true, false).unwrap();
        let mut feats_in = Vec::with_capacity(3);
        for m in 0..3 {
            let mut t = Tensor::zeros(&[cfg.seq_len[m], cfg.d_model]);
            for (i, v) in t.values.iter_mut().enumerate() {
                *v = (i % 7) as f64 * 0.5 - 1.0;
            }
            feats_in.push(t);
        }
        let mut tape = Tape::new(&store);
        let nodes = [
            tape.constant(&feats_in[0]),
            tape.constant(&feats_in[1]),
            tape.constant(&feats_in[2]),
        ];
        let out = apply_missing_signal(&mut tape, &cfg, &bank, &nodes, mask).unwrap();
        for m in 0..3 {
            let expected_id = if mask.is_missing(m) { bank.sig_miss[m] } else { bank.sig_pres[m] };
            let prompt = &store.get(expected_id).tensor.values;
            let got = tape.values(out[m]);
            let d = cfg.d_model;
            for i in 0..cfg.seq_len[m] * d {
                let diff = got[i] - feats_in[m].values[i];
                let want = if i < cfg.prompt_len * d { prompt[i] } else { 0.0 };
                assert_eq!(diff, want, "modality {m} flat index {i}");
            }
        }
    }

    #[test]
    fn zero_signal_prompts_leave_features_unchanged() {
        let cfg = cfg_small();
        let (mut store, bank, _) = build_all(&cfg, 12);
        for m in 0..3 {
            store.get_mut(bank.sig_miss[m]).tensor = Tensor::zeros(&[cfg.prompt_len, cfg.d_model]);
            store.get_mut(bank.sig_pres[m]).tensor = Tensor::zeros(&[cfg.prompt_len, cfg.d_model]);
        }
        let mask = MissingMask::new(true, false, false).unwrap();
        let mut rng = Rng::new(13);
        let feats: Vec<Tensor<f64>> = (0..3)
            .map(|m| Tensor::randn(&[cfg.seq_len[m], cfg.d_model], 1.0, &mut rng))
            .collect();
        let mut tape = Tape::new(&store);
        let nodes = [
            tape.constant(&feats[0]),
            tape.constant(&feats[1]),
            tape.constant(&feats[2]),
        ];
        let out = apply_missing_signal(&mut tape, &cfg, &bank, &nodes, mask).unwrap();
        for m in 0..3 {
            assert_eq!(tape.values(out[m]), feats[m].values.as_slice());
        }
    }

    #[test]
    fn flipping_one_mask_bit_touches_only_that_stream() {
        let cfg = cfg_small();
        let (store, bank, _) = build_all(&cfg, 14);
        let mut rng = Rng::new(15);
        let feats: Vec<Tensor<f64>> = (0..3)
            .map(|m| Tensor::randn(&[cfg.seq_len[m], cfg.d_model], 1.0, &mut rng))
            .collect();
        let run = |mask: MissingMask| {
            let mut tape = Tape::new(&store);
            let nodes = [
                tape.constant(&feats[0]),
                tape.constant(&feats[1]),
                tape.constant(&feats[2]),
            ];
            let out = apply_missing_signal(&mut tape, &cfg, &bank, &nodes, mask).unwrap();
            out.map(|n| tape.values(n).to_vec())
        };
        let base = run(MissingMask::new(false, false, false).unwrap());
        let flipped = run(MissingMask::new(true, false, false).unwrap());
        assert_ne!(base[0], flipped[0]);
        assert_eq!(base[1], flipped[1]);
        assert_eq!(base[2], flipped[2]);
    }

    #[test]
    fn type_matrix_is_zero_for_zero_prompts_and_square_for_every_mask() {
        let cfg = cfg_small();
        let (mut store, bank, _) = build_all(&cfg, 16);
        for m in 0..3 {
            store.get_mut(bank.sig_miss[m]).tensor = Tensor::zeros(&[cfg.prompt_len, cfg.d_model]);
            store.get_mut(bank.sig_pres[m]).tensor = Tensor::zeros(&[cfg.prompt_len, cfg.d_model]);
        }
        for mask in MissingMask::all_masks() {
            let mut tape = Tape::new(&store);
            let m_p = build_missing_type_matrix(&mut tape, &bank, mask).unwrap();
            assert_eq!(tape.shape(m_p), &[cfg.d_model, cfg.d_model]);
            assert!(tape.values(m_p).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn type_matrix_distinguishes_all_seven_masks() {
        let cfg = cfg_small();
        let (store, bank, _) = build_all(&cfg, 17);
        let mats: Vec<Vec<f64>> = MissingMask::all_masks()
            .iter()
            .map(|&mask| {
                let mut tape = Tape::new(&store);
                let m_p = build_missing_type_matrix(&mut tape, &bank, mask).unwrap();
                tape.values(m_p).to_vec()
            })
            .collect();
        for i in 0..mats.len() {
            for j in i + 1..mats.len() {
                let max_diff = mats[i]
                    .iter()
                    .zip(&mats[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(max_diff > 1e-6, "masks {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn marking_one_more_modality_missing_swaps_exactly_one_term() {
        let cfg = cfg_small();
        let (store, bank, _) = build_all(&cfg, 18);
        // {a missing} -> {a and v missing}: only the v term changes from the
        // present to the missing signal prompt; recomputing with that swap
        // must reproduce the other mask's matrix bit for bit.
        let more_missing = MissingMask::new(true, true, false).unwrap();
        let mut tape = Tape::new(&store);
        let direct = build_missing_type_matrix(&mut tape, &bank, more_missing).unwrap();
        let mut sum = None;
        for (m, sig) in [
            (0, bank.sig_miss[0]),
            (1, bank.sig_miss[1]),
            (2, bank.sig_pres[2]),
        ] {
            let basis = tape.param(bank.basis[m]);
            let s = tape.param(sig);
            let term = tape.matmul(basis, s).unwrap();
            sum = Some(match sum {
                None => term,
                Some(acc) => tape.add(acc, term).unwrap(),
            });
        }
        assert_eq!(tape.values(direct), tape.values(sum.unwrap()));
    }

    #[test]
    fn identity_matrix_projects_type_rows_onto_themselves() {
        let cfg = cfg_small();
        let (store, bank, _) = build_all(&cfg, 19);
        let mut tape = Tape::new(&store);
        let mut eye = Tensor::zeros(&[cfg.d_model, cfg.d_model]);
        for i in 0..cfg.d_model {
            eye.values[i * cfg.d_model + i] = 1.0;
        }
        let m_p = tape.constant(&eye);
        let projected = project_missing_type(&mut tape, &cfg, &bank, m_p).unwrap();
        let rows = &store.get(bank.type_rows).tensor;
        let per = cfg.prompt_len * cfg.d_model;
        for m in 0..3 {
            assert_eq!(tape.shape(projected[m]), &[cfg.prompt_len, cfg.d_model]);
            assert_eq!(
                tape.values(projected[m]),
                &rows.values[m * per..(m + 1) * per]
            );
        }
    }

    #[test]
    fn projection_is_linear_in_the_matrix() {
        let cfg = cfg_small();
        let (store, bank, _) = build_all(&cfg, 20);
        let mut rng = Rng::new(21);
        let a = Tensor::<f64>::randn(&[cfg.d_model, cfg.d_model], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[cfg.d_model, cfg.d_model], 1.0, &mut rng);
        let (alpha, beta) = (0.75, -1.5);
        let mut combo = Tensor::zeros(&[cfg.d_model, cfg.d_model]);
        for i in 0..combo.values.len() {
            combo.values[i] = alpha * a.values[i] + beta * b.values[i];
        }
        let mut tape = Tape::new(&store);
        let na = tape.constant(&a);
        let nb = tape.constant(&b);
        let nc = tape.constant(&combo);
        let pa = project_missing_type(&mut tape, &cfg, &bank, na).unwrap();
        let pb = project_missing_type(&mut tape, &cfg, &bank, nb).unwrap();
        let pc = project_missing_type(&mut tape, &cfg, &bank, nc).unwrap();
        for m in 0..3 {
            let va = tape.values(pa[m]);
            let vb = tape.values(pb[m]);
            let vc = tape.values(pc[m]);
            for i in 0..vc.len() {
                let want = alpha * va[i] + beta * vb[i];
                assert!((vc[i] - want).abs() < 1e-12, "modality {m} index {i}");
            }
        }
    }

    #[test]
    fn attach_prepends_prompts_and_keeps_payload_rows() {
        let cfg = cfg_small();
        let (store, bank, _) = build_all(&cfg, 22);
        let mut rng = Rng::new(23);
        let feats: Vec<Tensor<f64>> = (0..3)
            .map(|m| Tensor::randn(&[cfg.seq_len[m], cfg.d_model], 1.0, &mut rng))
            .collect();
        let mut tape = Tape::new(&store);
        let nodes = [
            tape.constant(&feats[0]),
            tape.constant(&feats[1]),
            tape.constant(&feats[2]),
        ];
        let mask = MissingMask::new(false, true, false).unwrap();
        let m_p = build_missing_type_matrix(&mut tape, &bank, mask).unwrap();
        let projected = project_missing_type(&mut tape, &cfg, &bank, m_p).unwrap();
        let attached = attach_missing_type(&mut tape, &nodes, Some(&projected)).unwrap();
        for m in 0..3 {
            let shape = tape.shape(attached[m]).to_vec();
            assert_eq!(shape, &[cfg.prompt_len + cfg.seq_len[m], cfg.d_model]);
            let vals = tape.values(attached[m]);
            let skip = cfg.prompt_len * cfg.d_model;
            assert_eq!(&vals[skip..], feats[m].values.as_slice());
        }
        let untouched = attach_missing_type(&mut tape, &nodes, None).unwrap();
        assert_eq!(untouched, nodes);
    }

    #[test]
    fn prompt_count_is_linear_in_modalities_and_matches_the_bank() {
        let cfg = ModelConfig::default();
        assert!(cfg.d_raw.iter().all(|&d| d == cfg.d_raw[0]));
        let mut store = ParamStore::<f64>::new();
        let bank = PromptBank::build(&cfg, &mut store, &Rng::new(24)).unwrap();
        let instantiated: usize = store
            .iter()
            .filter(|(_, p)| is_prompt_param(&p.name))
            .map(|(_, p)| p.tensor.numel())
            .sum();
        let formula = prompt_param_count(3, cfg.prompt_len, cfg.d_raw[0], cfg.d_model);
        assert_eq!(instantiated, formula);
        // doubling the modality count doubles the formula (linear, through 0)
        assert_eq!(
            prompt_param_count(6, cfg.prompt_len, cfg.d_raw[0], cfg.d_model),
            2 * formula
        );
        assert_eq!(prompt_param_count(0, cfg.prompt_len, cfg.d_raw[0], cfg.d_model), 0);
        let _ = bank;
    }

    #[test]
    fn every_prompt_learns_and_frozen_backbone_params_do_not() {
        // equal lengths: generative prompts reach the crop window through
        // the two-missing masks in the batch
        let cfg = ModelConfig {
            seq_len: [10, 10, 10],
            ..cfg_small()
        };
        let mut store = ParamStore::<f64>::new();
        let rng = Rng::new(25);
        let bb = Backbone::build(&cfg, &mut store, &rng).unwrap();
        let bank = PromptBank::build(&cfg, &mut store, &rng).unwrap();
        let mmgm = Mmgm::build(&cfg, &mut store, &rng).unwrap();
        store.set_trainable_by(|name| {
            is_prompt_param(name)
                || is_mmgm_param(name)
                || crate::backbone::is_tunable_backbone_param(name)
        });

        let mut tape = Tape::new(&store);
        let mut total = None;
        for (i, mask) in MissingMask::incomplete_masks().into_iter().enumerate() {
            let raw = raw_inputs(&cfg, mask, 26 + i as u64);
            let nodes = [
                tape.constant(&raw[0]),
                tape.constant(&raw[1]),
                tape.constant(&raw[2]),
            ];
            let gen = mmgm_generate(&mut tape, &cfg, &mmgm, &bank.gen, &nodes, mask).unwrap();
            let feats = bb.project_inputs(&mut tape, &gen).unwrap();
            let feats = apply_missing_signal(&mut tape, &cfg, &bank, &feats, mask).unwrap();
            let m_p = build_missing_type_matrix(&mut tape, &bank, mask).unwrap();
            let projected = project_missing_type(&mut tape, &cfg, &bank, m_p).unwrap();
            let fused = bb.crossmodal_forward(&mut tape, &feats, Some(&projected), None).unwrap();
            let pred = bb.predict(&mut tape, fused).unwrap();
            let mag = tape.abs(pred);
            let term = tape.mean_all(mag);
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term).unwrap(),
            });
        }
        tape.backward(total.unwrap()).unwrap();

        for (id, param) in store.iter() {
            let grad = tape.param_grad(id);
            if is_prompt_param(&param.name) {
                let g = grad.unwrap_or_else(|| panic!("{} missing grad", param.name));
                assert!(
                    g.iter().any(|&v| v.abs() > 0.0),
                    "{} received no gradient",
                    param.name
                );
            } else if !param.trainable {
                assert!(grad.is_none(), "{} is frozen yet has a gradient", param.name);
            }
        }
    }
}
