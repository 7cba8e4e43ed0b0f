//! Synthetic multimodal data, missingness simulation, and dataset files.
//!
//! Samples share one latent vector rendered into three correlated streams,
//! so every modality is informative about the label and cross-modal
//! generation is learnable. Datasets travel as `.mmjsonl`: a `#v1` header
//! line followed by one JSON record per line.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Task, MODALITIES};
use crate::numerics::rng::Rng;
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::prompts::MissingMask;

/// Peak-to-mean swing of the shared temporal envelope. The same phase is
/// used for every modality so cross-modal maps stay time-invariant.
pub const ENVELOPE_AMPLITUDE: f64 = 0.5;

pub const DATASET_HEADER: &str = "#v1";

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    /// Malformed JSON or an unreadable value.
    Parse { line: usize, message: String },
    /// Well-formed JSON that violates the record schema.
    Schema { line: usize, message: String },
    /// A [`SyntheticSpec`] field is out of range.
    Spec { field: &'static str, message: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "io error: {e}"),
            DataError::Parse { line, message } => write!(f, "line {line}: parse error: {message}"),
            DataError::Schema { line, message } => {
                write!(f, "line {line}: schema error: {message}")
            }
            DataError::Spec { field, message } => write!(f, "spec field `{field}`: {message}"),
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// Regression value in [-3, 3] or a class id. JSON integers read back as
/// classes, anything fractional as values, so round-trips stay exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(u32),
    Value(f64),
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }

    pub fn is_finite(self) -> bool {
        match self {
            Label::Class(_) => true,
            Label::Value(v) => v.is_finite(),
        }
    }

    /// Checks the label matches the task: classes in range, values finite.
    pub fn validate_for(self, task: &Task) -> Result<(), String> {
        match (self, task) {
            (Label::Class(c), Task::Classification { n_classes }) => {
                if (c as usize) < *n_classes {
                    Ok(())
                } else {
                    Err(format!("class id {c} out of range for {n_classes} classes"))
                }
            }
            (Label::Value(v), Task::Regression) => {
                if v.is_finite() {
                    Ok(())
                } else {
                    Err("label is not finite".to_string())
                }
            }
            (Label::Class(_), Task::Regression) => {
                Err("class label on a regression task".to_string())
            }
            (Label::Value(_), Task::Classification { .. }) => {
                Err("float label on a classification task".to_string())
            }
        }
    }
}

/// One sample: three streams [L_m x d_m], which of them are missing, and
/// the label. Missing streams keep their shape but carry zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle<T: Scalar> {
    pub audio: Tensor<T>,
    pub video: Tensor<T>,
    pub text: Tensor<T>,
    pub mask: MissingMask,
    pub label: Label,
}

impl<T: Scalar> ModalityBundle<T> {
    pub fn stream(&self, m: usize) -> &Tensor<T> {
        match m {
            0 => &self.audio,
            1 => &self.video,
            2 => &self.text,
            _ => panic!("modality index out of range"),
        }
    }

    pub fn stream_mut(&mut self, m: usize) -> &mut Tensor<T> {
        match m {
            0 => &mut self.audio,
            1 => &mut self.video,
            2 => &mut self.text,
            _ => panic!("modality index out of range"),
        }
    }

    /// Zero-fills every masked stream, restoring the payload invariant.
    pub fn blank_missing(&mut self) {
        for m in 0..3 {
            if self.mask.is_missing(m) {
                let t = self.stream_mut(m);
                t.values.fill(T::zero());
            }
        }
    }
}

/// Recipe for a synthetic dataset. Mixing maps and the label map are drawn
/// from `map_seed`; a nonzero `domain_shift_seed` perturbs the mixing maps
/// by `domain_shift_scale` times a fresh draw, modeling a related but
/// different domain with the same labeling rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub z_dim: usize,
    pub seq_len: [usize; 3],
    pub d_raw: [usize; 3],
    /// Per-modality noise scale; text defaults cleanest so modality quality
    /// is asymmetric like in real sentiment corpora.
    pub noise: [f64; 3],
    /// Per-modality scale of a per-sample channel offset held constant
    /// across time, like a recording-level gain error. Unlike `noise` it
    /// does not average out over the sequence, so a stream carrying it has
    /// an error floor that only cross-modal comparison can remove. 0
    /// disables (no draws are consumed).
    pub bias_noise: [f64; 3],
    /// Constant term of the temporal envelope. At the default 1.0 the
    /// signal keeps a nonzero time mean, so even a flat average over
    /// positions retains it; at 0.0 the envelope is pure oscillation and
    /// the signal cancels under uniform pooling, rewarding models that
    /// attend selectively.
    pub envelope_dc: f64,
    /// Euclidean norm of the label map w; 0 makes every label 0.
    pub label_norm: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub task: Task,
    pub map_seed: u64,
    pub domain_shift_seed: u64,
    pub domain_shift_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            z_dim: 8,
            seq_len: [24, 24, 24],
            d_raw: [20, 20, 20],
            noise: [0.9, 0.9, 0.2],
            bias_noise: [0.0, 0.0, 0.0],
            envelope_dc: 1.0,
            label_norm: 1.6,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            task: Task::Regression,
            map_seed: 11,
            domain_shift_seed: 0,
            domain_shift_scale: 0.3,
        }
    }
}

/// Concrete per-domain rendering maps: one [d_m x z_dim] map per modality
/// plus the shared label direction.
#[derive(Debug, Clone)]
pub struct Domain {
    pub mixing: [Tensor<f64>; 3],
    pub label_map: Vec<f64>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |field, message: String| Err(DataError::Spec { field, message });
        if self.z_dim == 0 {
            return err("z_dim", "must be positive".into());
        }
        if self.seq_len.iter().any(|&l| l == 0) {
            return err("seq_len", "sequence lengths must be positive".into());
        }
        if self.d_raw.iter().any(|&d| d == 0) {
            return err("d_raw", "raw dims must be positive".into());
        }
        if self.noise.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return err("noise", format!("noise scales must be >= 0, got {:?}", self.noise));
        }
        if self.bias_noise.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return err(
                "bias_noise",
                format!("bias noise scales must be >= 0, got {:?}", self.bias_noise),
            );
        }
        if !self.envelope_dc.is_finite() {
            return err("envelope_dc", format!("must be finite, got {}", self.envelope_dc));
        }
        if !self.label_norm.is_finite() || self.label_norm < 0.0 {
            return err("label_norm", "must be a finite value >= 0".into());
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return err("n_train", "sample counts must be positive".into());
        }
        if !self.domain_shift_scale.is_finite() {
            return err("domain_shift_scale", "must be finite".into());
        }
        Ok(())
    }

    /// Builds the domain maps. Mixing entries are N(0, 1/sqrt(z_dim)) so a
    /// rendered channel has roughly unit variance; the shift adds a scaled
    /// independent draw while the label map stays shared across domains.
    pub fn domain(&self) -> Domain {
        let base = Rng::new(self.map_seed);
        let mut mixing = Vec::with_capacity(3);
        let std = 1.0 / (self.z_dim as f64).sqrt();
        for m in 0..3 {
            let mut r = base.derive(&format!("mixing.{}", MODALITIES[m]));
            let mut map = Tensor::<f64>::randn(&[self.d_raw[m], self.z_dim], std, &mut r);
            if self.domain_shift_seed != 0 {
                let shift_base = Rng::new(self.domain_shift_seed);
                let mut s = shift_base.derive(&format!("shift.{}", MODALITIES[m]));
                let delta = Tensor::<f64>::randn(&[self.d_raw[m], self.z_dim], std, &mut s);
                for (v, d) in map.values.iter_mut().zip(&delta.values) {
                    *v += self.domain_shift_scale * d;
                }
            }
            mixing.push(map);
        }
        let mut r = base.derive("label_map");
        let mut w: Vec<f64> = (0..self.z_dim).map(|_| r.next_normal()).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && self.label_norm > 0.0 {
            for v in &mut w {
                *v *= self.label_norm / norm;
            }
        } else {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        Domain {
            mixing: [mixing[0].clone(), mixing[1].clone(), mixing[2].clone()],
            label_map: w,
        }
    }
}

fn label_of(spec: &SyntheticSpec, score: f64) -> Label {
    let clamped = score.clamp(-3.0, 3.0);
    match spec.task {
        Task::Regression => Label::Value(clamped),
        Task::Classification { n_classes } => {
            let unit = (clamped + 3.0) / 6.0;
            let class = ((unit * n_classes as f64) as usize).min(n_classes - 1);
            Label::Class(class as u32)
        }
    }
}

fn render_sample<T: Scalar>(
    spec: &SyntheticSpec,
    domain: &Domain,
    rng: &mut Rng,
) -> ModalityBundle<T> {
    let z: Vec<f64> = (0..spec.z_dim).map(|_| rng.next_normal()).collect();
    let mut streams = Vec::with_capacity(3);
    for m in 0..3 {
        let (len, dim) = (spec.seq_len[m], spec.d_raw[m]);
        let map = &domain.mixing[m];
        let mut base = vec![0.0f64; dim];
        for (j, b) in base.iter_mut().enumerate() {
            *b = (0..spec.z_dim).map(|k| map.values[j * spec.z_dim + k] * z[k]).sum();
        }
        let mut bias = vec![0.0f64; dim];
        if spec.bias_noise[m] > 0.0 {
            for b in &mut bias {
                *b = spec.bias_noise[m] * rng.next_normal();
            }
        }
        let mut t = Tensor::<T>::zeros(&[len, dim]);
        for i in 0..len {
            let phase = i as f64 / len as f64;
            let env = spec.envelope_dc + ENVELOPE_AMPLITUDE * (std::f64::consts::TAU * phase).sin();
            for j in 0..dim {
                let noise = if spec.noise[m] > 0.0 { spec.noise[m] * rng.next_normal() } else { 0.0 };
                t.values[i * dim + j] = T::from_f64(env * base[j] + bias[j] + noise);
            }
        }
        streams.push(t);
    }
    let score: f64 = domain.label_map.iter().zip(&z).map(|(w, z)| w * z).sum();
    let mut it = streams.into_iter();
    ModalityBundle {
        audio: it.next().unwrap(),
        video: it.next().unwrap(),
        text: it.next().unwrap(),
        mask: MissingMask::COMPLETE,
        label: label_of(spec, score),
    }
}

/// Train/val/test splits drawn from independent substreams of one seed.
#[derive(Debug, Clone)]
pub struct DataSplits<T: Scalar> {
    pub train: Vec<ModalityBundle<T>>,
    pub val: Vec<ModalityBundle<T>>,
    pub test: Vec<ModalityBundle<T>>,
}

/// Generates complete samples for all three splits.
pub fn generate_synthetic<T: Scalar>(
    spec: &SyntheticSpec,
    rng: &Rng,
) -> Result<DataSplits<T>, DataError> {
    spec.validate()?;
    let domain = spec.domain();
    let gen = |name: &str, count: usize| {
        let mut r = rng.derive(name);
        (0..count).map(|_| render_sample(spec, &domain, &mut r)).collect::<Vec<_>>()
    };
    Ok(DataSplits {
        train: gen("train", spec.n_train),
        val: gen("val", spec.n_val),
        test: gen("test", spec.n_test),
    })
}

/// Marks each sample incomplete with probability `eta`, drawing one of the
/// 6 incomplete masks uniformly and zero-filling the dropped streams.
pub fn apply_missingness<T: Scalar>(
    dataset: &mut [ModalityBundle<T>],
    eta: f64,
    rng: &mut Rng,
) -> Result<(), DataError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(DataError::Spec {
            field: "eta",
            message: format!("missing rate must lie in [0, 1], got {eta}"),
        });
    }
    let masks = MissingMask::incomplete_masks();
    for bundle in dataset {
        if rng.next_f64() < eta {
            bundle.mask = masks[rng.below(6) as usize];
            bundle.blank_missing();
        } else {
            bundle.mask = MissingMask::COMPLETE;
        }
    }
    Ok(())
}

/// Every availability pattern over `m` modalities with at least one present,
/// as missing-flag vectors: fewer absent modalities first, canonical order
/// within a group, complete case first. Count is 2^m - 1.
pub fn enumerate_missing_cases(m: usize) -> Result<Vec<Vec<bool>>, DataError> {
    if m < 1 {
        return Err(DataError::Spec {
            field: "modalities",
            message: "at least one modality is required".to_string(),
        });
    }
    if m >= usize::BITS as usize {
        return Err(DataError::Spec {
            field: "modalities",
            message: format!("modality count {m} overflows the mask enumeration"),
        });
    }
    let mut patterns: Vec<Vec<bool>> = (0..(1usize << m) - 1)
        .map(|bits| (0..m).map(|i| bits >> i & 1 == 1).collect())
        .collect();
    patterns.sort_by_key(|p| p.iter().filter(|&&b| b).count());
    Ok(patterns)
}

/// Max over feature channels of |Pearson correlation| between the channel's
/// time mean and the label, per modality.
pub fn modality_label_correlation<T: Scalar>(dataset: &[ModalityBundle<T>]) -> [f64; 3] {
    let n = dataset.len();
    let labels: Vec<f64> = dataset.iter().map(|b| b.label.as_f64()).collect();
    let mut out = [0.0f64; 3];
    if n < 2 {
        return out;
    }
    let label_mean = labels.iter().sum::<f64>() / n as f64;
    let label_var: f64 = labels.iter().map(|l| (l - label_mean).powi(2)).sum();
    for m in 0..3 {
        let shape = dataset[0].stream(m).shape.clone();
        let (len, dim) = (shape[0], shape[1]);
        let mut best = 0.0f64;
        for j in 0..dim {
            let feats: Vec<f64> = dataset
                .iter()
                .map(|b| {
                    let v = &b.stream(m).values;
                    (0..len).map(|i| v[i * dim + j].as_f64()).sum::<f64>() / len as f64
                })
                .collect();
            let mean = feats.iter().sum::<f64>() / n as f64;
            let var: f64 = feats.iter().map(|f| (f - mean).powi(2)).sum();
            let cov: f64 = feats
                .iter()
                .zip(&labels)
                .map(|(f, l)| (f - mean) * (l - label_mean))
                .sum();
            if var > 0.0 && label_var > 0.0 {
                best = best.max((cov / (var * label_var).sqrt()).abs());
            }
        }
        out[m] = best;
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Record {
    a: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<Vec<f64>>,
    mask: MissingMask,
    label: Label,
}

fn rows_of<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let (len, dim) = (t.shape[0], t.shape[1]);
    (0..len)
        .map(|i| (0..dim).map(|j| t.values[i * dim + j].as_f64()).collect())
        .collect()
}

fn tensor_of<T: Scalar>(
    rows: &[Vec<f64>],
    line: usize,
    field: &str,
) -> Result<Tensor<T>, DataError> {
    if rows.is_empty() {
        return Err(DataError::Schema {
            line,
            message: format!("field `{field}` has no rows"),
        });
    }
    let dim = rows[0].len();
    if dim == 0 {
        return Err(DataError::Schema {
            line,
            message: format!("field `{field}` has empty rows"),
        });
    }
    let mut values = Vec::with_capacity(rows.len() * dim);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(DataError::Schema {
                line,
                message: format!(
                    "field `{field}` row {i} has {} values, expected {dim}",
                    row.len()
                ),
            });
        }
        values.extend(row.iter().map(|&v| T::from_f64(v)));
    }
    Ok(Tensor {
        shape: vec![rows.len(), dim],
        values,
        grad: None,
        requires_grad: false,
    })
}

/// Writes `#v1` then one JSON record per line. Labels and payload values
/// must be finite: JSON has no representation for anything else.
pub fn save_dataset<T: Scalar>(
    path: impl AsRef<Path>,
    dataset: &[ModalityBundle<T>],
) -> Result<(), DataError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{DATASET_HEADER}")?;
    for (i, bundle) in dataset.iter().enumerate() {
        let line = i + 2;
        if !bundle.label.is_finite() {
            return Err(DataError::Schema {
                line,
                message: "label is not finite".to_string(),
            });
        }
        for m in 0..3 {
            if bundle.stream(m).values.iter().any(|v| !v.as_f64().is_finite()) {
                return Err(DataError::Schema {
                    line,
                    message: format!("field `{}` holds a non-finite value", MODALITIES[m]),
                });
            }
        }
        let record = Record {
            a: rows_of(&bundle.audio),
            v: rows_of(&bundle.video),
            t: rows_of(&bundle.text),
            mask: bundle.mask,
            label: bundle.label,
        };
        let json = serde_json::to_string(&record).map_err(|e| DataError::Schema {
            line,
            message: e.to_string(),
        })?;
        writeln!(out, "{json}")?;
    }
    Ok(())
}

/// Reads a `.mmjsonl` file. Masked payloads are zero-filled on the way in,
/// stream shapes must agree across records, and every record must carry a
/// finite label and a mask with at least one modality present.
pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<ModalityBundle<T>>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line?,
        None => {
            return Err(DataError::Parse {
                line: 1,
                message: "empty file, expected a #v1 header".to_string(),
            })
        }
    };
    if header.trim_end() != DATASET_HEADER {
        return Err(DataError::Parse {
            line: 1,
            message: format!("unsupported header {header:?}, expected {DATASET_HEADER:?}"),
        });
    }
    let mut dataset = Vec::new();
    let mut shapes: Option<[Vec<usize>; 3]> = None;
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| {
            let message = e.to_string();
            match e.classify() {
                serde_json::error::Category::Data => DataError::Schema {
                    line: line_no,
                    message,
                },
                _ => DataError::Parse {
                    line: line_no,
                    message,
                },
            }
        })?;
        if !record.label.is_finite() {
            return Err(DataError::Schema {
                line: line_no,
                message: "label is not finite".to_string(),
            });
        }
        let mut bundle = ModalityBundle {
            audio: tensor_of(&record.a, line_no, "a")?,
            video: tensor_of(&record.v, line_no, "v")?,
            text: tensor_of(&record.t, line_no, "t")?,
            mask: record.mask,
            label: record.label,
        };
        match &shapes {
            None => {
                shapes = Some([
                    bundle.audio.shape.clone(),
                    bundle.video.shape.clone(),
                    bundle.text.shape.clone(),
                ]);
            }
            Some(expected) => {
                for m in 0..3 {
                    if bundle.stream(m).shape != expected[m] {
                        return Err(DataError::Schema {
                            line: line_no,
                            message: format!(
                                "field `{}` shape {:?} differs from {:?} on earlier lines",
                                MODALITIES[m],
                                bundle.stream(m).shape,
                                expected[m]
                            ),
                        });
                    }
                }
            }
        }
        bundle.blank_missing();
        dataset.push(bundle);
    }
    Ok(dataset)
}
