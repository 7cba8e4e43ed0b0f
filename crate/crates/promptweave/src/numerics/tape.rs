//! Reverse-mode autodiff over a recorded operation tape.
//!
//! A [`Tape`] records ops in construction order, which is already a
//! topological order: every input id is smaller than its consumer's id.
//! `backward` walks the records in reverse, accumulating gradients
//! additively across fan-out. Gradients are only materialized for nodes on a
//! path from a differentiable leaf, so frozen parameters cost no backward
//! work.

use std::collections::HashMap;

use super::scalar::Scalar;
use super::tensor::{
    broadcast_apply, broadcast_shapes, conv1d_backward, conv1d_forward, gemm_nn, gemm_nt, gemm_tn,
    reduce_grad_to_shape, softmax_rows, Tensor, TensorError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter with a stable insertion index.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of named parameters; insertion order is the canonical
/// parameter order used by the optimizer, checkpoints, and reports.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: &str,
        tensor: Tensor<T>,
        trainable: bool,
    ) -> Result<ParamId, TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::Contract {
                op: "ParamStore::insert",
                detail: format!("duplicate parameter name {name:?}"),
            });
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.to_string(), id.0);
        self.params.push(Param {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Retags every parameter's trainability from its name.
    pub fn set_trainable_by(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Matmul(NodeId, NodeId),
    /// a [m x k] . b[n x k]^T; used for attention scores.
    MatmulTB(NodeId, NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        k: usize,
        c_in: usize,
        c_out: usize,
    },
    Relu(NodeId),
    Abs(NodeId),
    Softmax {
        a: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    SliceRows {
        a: NodeId,
        start: usize,
        len: usize,
    },
    SliceCols {
        a: NodeId,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    MeanAll(NodeId),
    MeanRows(NodeId),
    Dropout {
        a: NodeId,
        keep: Vec<bool>,
        keep_inv: T,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    op: Op<T>,
    shape: Vec<usize>,
    values: Vec<T>,
    needs_grad: bool,
}

/// Records a forward computation and replays it backward.
pub struct Tape<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    bound: Vec<Option<NodeId>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<'s, T: Scalar> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            bound: vec![None; store.len()],
            grads: Vec::new(),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].values
    }

    /// Gradient of the last backward target with respect to node `id`; `None`
    /// when the node is off every differentiable path.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<T> {
        let n = &self.nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            values: n.values.clone(),
            grad: self.grad(id).map(|g| g.to_vec()),
            requires_grad: n.needs_grad,
        }
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, values: Vec<T>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            op,
            shape,
            values,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf holding a constant; gradients never flow into it.
    pub fn constant(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(Op::Leaf, t.shape.clone(), t.values.clone(), false)
    }

    /// Leaf holding an input; differentiable iff `t.requires_grad`.
    pub fn input(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(Op::Leaf, t.shape.clone(), t.values.clone(), t.requires_grad)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node,
    /// so fan-out through a shared parameter accumulates correctly.
    /// Differentiable iff the parameter is trainable.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.bound[id.index()] {
            return node;
        }
        let p = self.store.get(id);
        let node = self.push(
            Op::Leaf,
            p.tensor.shape.clone(),
            p.tensor.values.clone(),
            p.trainable,
        );
        self.bound[id.index()] = Some(node);
        node
    }

    fn binary_broadcast(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        make: impl Fn(NodeId, NodeId) -> Op<T>,
    ) -> Result<NodeId, TensorError> {
        let full = broadcast_shapes(op_name, self.shape(a), self.shape(b))?;
        let numel: usize = full.iter().product();
        let mut out = vec![T::zero(); numel];
        broadcast_apply(
            self.values(a),
            self.shape(a),
            self.values(b),
            self.shape(b),
            &full,
            &mut out,
            f,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(make(a, b), full, out, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_broadcast("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_broadcast("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let values = self.values(a).iter().map(|&v| v * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), shape, values, needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.values(a), self.values(b), &mut out, m, k, n, false);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), vec![m, n], out, needs))
    }

    /// a [m x k] times b [n x k] transposed -> [m x n].
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tb",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.values(a), self.values(b), &mut out, m, k, n, false);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulTB(a, b), vec![m, n], out, needs))
    }

    /// x [L x c_in] + kernel [k x c_in x c_out] + bias [c_out] -> [L x c_out];
    /// cross-correlation, stride 1, same zero padding, odd k.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let valid = sx.len() == 2
            && sw.len() == 3
            && sb.len() == 1
            && sw[0] % 2 == 1
            && sw[1] == sx[1]
            && sb[0] == sw[2];
        if !valid {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        let (len, c_in, c_out, k) = (sx[0], sx[1], sw[2], sw[0]);
        let mut out = vec![T::zero(); len * c_out];
        conv1d_forward(
            self.values(x),
            self.values(w),
            self.values(b),
            &mut out,
            len,
            c_in,
            c_out,
            k,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Op::Conv1d {
                x,
                w,
                b,
                k,
                c_in,
                c_out,
            },
            vec![len, c_out],
            out,
            needs,
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let values = self
            .values(a)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Op::Relu(a), shape, values, needs)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let values = self.values(a).iter().map(|&v| v.abs()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Op::Abs(a), shape, values, needs)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let values = if axis == shape.len() - 1 {
            let n = *shape.last().unwrap();
            let mut out = vec![T::zero(); self.values(a).len()];
            softmax_rows(self.values(a), &mut out, n);
            out
        } else {
            softmax_axis(self.values(a), &shape, axis)
        };
        let needs = self.needs(a);
        Ok(self.push(Op::Softmax { a, axis }, shape, values, needs))
    }

    /// Layer norm over the last axis: gain and bias have that axis's extent.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: shape,
                right: self.shape(gain).to_vec(),
            });
        }
        let mut out = vec![T::zero(); self.values(x).len()];
        for (row, out_row) in self
            .values(x)
            .chunks_exact(d)
            .zip(out.chunks_exact_mut(d))
        {
            let (mean, inv_std) = row_moments(row, eps);
            for ((o, &v), (&g, &b)) in out_row
                .iter_mut()
                .zip(row)
                .zip(self.values(gain).iter().zip(self.values(bias)))
            {
                *o = (v - mean) * inv_std * g + b;
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, shape, out, needs))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Contract {
                op: "concat",
                detail: "no inputs".to_string(),
            });
        }
        let base = self.shape(inputs[0]).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (&a, &b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let numel: usize = shape.iter().product();
        let mut values = vec![T::zero(); numel];
        let out_stride = axis_total * inner;
        let mut offset = 0;
        for &id in inputs {
            let a_len = self.shape(id)[axis];
            let block = a_len * inner;
            for o in 0..outer {
                let src = &self.values(id)[o * block..(o + 1) * block];
                values[o * out_stride + offset..o * out_stride + offset + block]
                    .copy_from_slice(src);
            }
            offset += block;
        }
        let needs = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
            values,
            needs,
        ))
    }

    /// Contiguous slice along axis 0.
    pub fn slice_rows(
        &mut self,
        a: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(TensorError::InvalidShape {
                op: "slice_rows",
                shape,
                reason: format!("rows [{start}, {}) out of bounds", start + len),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let values = self.values(a)[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let needs = self.needs(a);
        Ok(self.push(Op::SliceRows { a, start, len }, out_shape, values, needs))
    }

    /// Column slice of a 2-D tensor.
    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || len == 0 || start + len > shape[1] {
            return Err(TensorError::InvalidShape {
                op: "slice_cols",
                shape,
                reason: format!("cols [{start}, {}) invalid", start + len),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut values = Vec::with_capacity(rows * len);
        for r in 0..rows {
            values.extend_from_slice(&self.values(a)[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::SliceCols { a, start, len },
            vec![rows, len],
            values,
            needs,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.values(a).len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("element count {} does not match", self.values(a).len()),
            });
        }
        let values = self.values(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), shape.to_vec(), values, needs))
    }

    /// Mean over all elements -> scalar [1].
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.values(a).len();
        let sum = self
            .values(a)
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let needs = self.needs(a);
        self.push(
            Op::MeanAll(a),
            vec![1],
            vec![sum / T::from_usize(n)],
            needs,
        )
    }

    /// Mean over axis 0 (time pooling): [L x d] -> [d].
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "mean_rows",
                shape,
                reason: "expected a 2-D tensor".to_string(),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = vec![T::zero(); cols];
        for row in self.values(a).chunks_exact(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_usize(rows);
        for o in &mut out {
            *o *= inv;
        }
        let needs = self.needs(a);
        Ok(self.push(Op::MeanRows(a), vec![cols], out, needs))
    }

    /// Inverted dropout with the given drop rate; identity when rate is 0.
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: &mut super::rng::Rng) -> NodeId {
        if rate <= 0.0 {
            return a;
        }
        let keep: Vec<bool> = (0..self.values(a).len())
            .map(|_| !rng.bernoulli(rate))
            .collect();
        let keep_inv = T::from_f64(1.0 / (1.0 - rate));
        let values = self
            .values(a)
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * keep_inv } else { T::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Op::Dropout { a, keep, keep_inv }, shape, values, needs)
    }

    /// Mean negative log-likelihood of `targets` under softmaxed logit rows.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape,
                reason: format!("expected [{} x classes] logits", targets.len()),
            });
        }
        let classes = shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::Contract {
                op: "cross_entropy",
                detail: format!("target {t} out of range for {classes} classes"),
            });
        }
        let mut total = T::zero();
        for (row, &t) in self.values(logits).chunks_exact(classes).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let log_sum = row
                .iter()
                .fold(T::zero(), |acc, &v| acc + (v - max).exp())
                .ln()
                + max;
            total += log_sum - row[t];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            vec![1],
            vec![total / T::from_usize(targets.len())],
            needs,
        ))
    }

    /// x . W + b with b broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Populates gradients of `loss` w.r.t. every differentiable node.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.values(loss).len() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    /// Accumulated gradient for a bound parameter after `backward`.
    pub fn param_grad(&self, id: ParamId) -> Option<&[T]> {
        self.bound[id.index()].and_then(|node| self.grad(node))
    }

    fn step_backward(&mut self, i: usize) {
        // Inputs always precede node i, so split the grad buffers at i: the
        // node's own grad lives in `upper`, its inputs' grads in `lower`.
        let (lower_nodes, upper_nodes) = self.nodes.split_at(i);
        let node = &upper_nodes[0];
        let (lower, upper) = self.grads.split_at_mut(i);
        let d = upper[0].as_ref().expect("grad present").clone();

        let mut sink = GradSink {
            nodes: lower_nodes,
            grads: lower,
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                sink.add_reduced(*a, &d, &node.shape, false);
                sink.add_reduced(*b, &d, &node.shape, false);
            }
            Op::Sub(a, b) => {
                sink.add_reduced(*a, &d, &node.shape, false);
                sink.add_reduced(*b, &d, &node.shape, true);
            }
            Op::Mul(a, b) => {
                if sink.needs(*a) {
                    let mut da = vec![T::zero(); d.len()];
                    broadcast_apply(
                        &d,
                        &node.shape,
                        sink.values(*b),
                        sink.shape(*b),
                        &node.shape,
                        &mut da,
                        |g, bv| g * bv,
                    );
                    sink.add_reduced(*a, &da, &node.shape, false);
                }
                if sink.needs(*b) {
                    let mut db = vec![T::zero(); d.len()];
                    broadcast_apply(
                        &d,
                        &node.shape,
                        sink.values(*a),
                        sink.shape(*a),
                        &node.shape,
                        &mut db,
                        |g, av| g * av,
                    );
                    sink.add_reduced(*b, &db, &node.shape, false);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                sink.apply(*a, |g| {
                    for (gi, &di) in g.iter_mut().zip(&d) {
                        *gi += di * c;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (sink.shape(*a)[0], sink.shape(*a)[1]);
                let n = node.shape[1];
                if sink.needs(*a) {
                    let b_vals = sink.values(*b).to_vec();
                    sink.apply(*a, |g| gemm_nt(&d, &b_vals, g, m, n, k, true));
                }
                if sink.needs(*b) {
                    let a_vals = sink.values(*a).to_vec();
                    sink.apply(*b, |g| gemm_tn(&a_vals, &d, g, m, k, n, true));
                }
            }
            Op::MatmulTB(a, b) => {
                let (m, k) = (sink.shape(*a)[0], sink.shape(*a)[1]);
                let n = node.shape[1];
                if sink.needs(*a) {
                    let b_vals = sink.values(*b).to_vec();
                    sink.apply(*a, |g| gemm_nn(&d, &b_vals, g, m, n, k, true));
                }
                if sink.needs(*b) {
                    let a_vals = sink.values(*a).to_vec();
                    sink.apply(*b, |g| gemm_tn(&d, &a_vals, g, m, n, k, true));
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                k,
                c_in,
                c_out,
            } => {
                let (x, w, b, k, c_in, c_out) = (*x, *w, *b, *k, *c_in, *c_out);
                let len = sink.shape(x)[0];
                let x_vals = sink.values(x).to_vec();
                let w_vals = sink.values(w).to_vec();
                let mut dx = if sink.needs(x) {
                    vec![T::zero(); x_vals.len()]
                } else {
                    Vec::new()
                };
                let mut dw = if sink.needs(w) {
                    vec![T::zero(); w_vals.len()]
                } else {
                    Vec::new()
                };
                let mut db = if sink.needs(b) {
                    vec![T::zero(); c_out]
                } else {
                    Vec::new()
                };
                conv1d_backward(
                    &x_vals, &w_vals, &d, &mut dx, &mut dw, &mut db, len, c_in, c_out, k,
                );
                if !dx.is_empty() {
                    sink.add(x, &dx);
                }
                if !dw.is_empty() {
                    sink.add(w, &dw);
                }
                if !db.is_empty() {
                    sink.add(b, &db);
                }
            }
            Op::Relu(a) => {
                let mask: Vec<bool> = sink.values(*a).iter().map(|&v| v > T::zero()).collect();
                sink.apply(*a, |g| {
                    for ((gi, &di), &keep) in g.iter_mut().zip(&d).zip(&mask) {
                        if keep {
                            *gi += di;
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let signs: Vec<T> = sink.values(*a).iter().map(|&v| v.signum_or_zero()).collect();
                sink.apply(*a, |g| {
                    for ((gi, &di), &s) in g.iter_mut().zip(&d).zip(&signs) {
                        *gi += di * s;
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let out = &node.values;
                let axis = *axis;
                if axis == node.shape.len() - 1 {
                    let n = *node.shape.last().unwrap();
                    sink.apply(*a, |g| {
                        for ((g_row, d_row), o_row) in g
                            .chunks_exact_mut(n)
                            .zip(d.chunks_exact(n))
                            .zip(out.chunks_exact(n))
                        {
                            let dotp = super::tensor::dot(d_row, o_row);
                            for ((gi, &di), &oi) in g_row.iter_mut().zip(d_row).zip(o_row) {
                                *gi += oi * (di - dotp);
                            }
                        }
                    });
                } else {
                    let shape = node.shape.clone();
                    sink.apply(*a, |g| softmax_axis_backward(&d, out, g, &shape, axis));
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let dcols = *node.shape.last().unwrap();
                let x_vals = sink.values(x).to_vec();
                let gain_vals = sink.values(gain).to_vec();
                let inv_cols = T::one() / T::from_usize(dcols);

                if sink.needs(x) {
                    sink.apply(x, |g| {
                        for ((g_row, d_row), row) in g
                            .chunks_exact_mut(dcols)
                            .zip(d.chunks_exact(dcols))
                            .zip(x_vals.chunks_exact(dcols))
                        {
                            let (mean, inv_std) = row_moments(row, eps);
                            let mut sum_dg = T::zero();
                            let mut sum_dg_xhat = T::zero();
                            for ((&di, &gv), &xv) in d_row.iter().zip(&gain_vals).zip(row) {
                                let dg = di * gv;
                                sum_dg += dg;
                                sum_dg_xhat += dg * (xv - mean) * inv_std;
                            }
                            let mean_dg = sum_dg * inv_cols;
                            let mean_dg_xhat = sum_dg_xhat * inv_cols;
                            for (((gi, &di), &gv), &xv) in
                                g_row.iter_mut().zip(d_row).zip(&gain_vals).zip(row)
                            {
                                let xhat = (xv - mean) * inv_std;
                                *gi += inv_std * (di * gv - mean_dg - xhat * mean_dg_xhat);
                            }
                        }
                    });
                }
                if sink.needs(gain) {
                    let mut dgain = vec![T::zero(); dcols];
                    for (d_row, row) in d.chunks_exact(dcols).zip(x_vals.chunks_exact(dcols)) {
                        let (mean, inv_std) = row_moments(row, eps);
                        for ((dg, &di), &xv) in dgain.iter_mut().zip(d_row).zip(row) {
                            *dg += di * (xv - mean) * inv_std;
                        }
                    }
                    sink.add(gain, &dgain);
                }
                if sink.needs(bias) {
                    let mut dbias = vec![T::zero(); dcols];
                    for d_row in d.chunks_exact(dcols) {
                        for (db, &di) in dbias.iter_mut().zip(d_row) {
                            *db += di;
                        }
                    }
                    sink.add(bias, &dbias);
                }
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let inputs = inputs.clone();
                let outer: usize = node.shape[..axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let out_stride = node.shape[axis] * inner;
                let mut offset = 0;
                for &id in &inputs {
                    let block = sink.shape(id)[axis] * inner;
                    if sink.needs(id) {
                        let mut di = vec![T::zero(); sink.values(id).len()];
                        for o in 0..outer {
                            let src = &d[o * out_stride + offset..o * out_stride + offset + block];
                            di[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, &v)| *g += v);
                        }
                        sink.add(id, &di);
                    }
                    offset += block;
                }
            }
            Op::SliceRows { a, start, len } => {
                let inner: usize = node.shape[1..].iter().product();
                let (start, len) = (*start, *len);
                sink.apply(*a, |g| {
                    g[start * inner..(start + len) * inner]
                        .iter_mut()
                        .zip(&d)
                        .for_each(|(gi, &di)| *gi += di);
                });
            }
            Op::SliceCols { a, start, len } => {
                let cols = sink.shape(*a)[1];
                let (start, len) = (*start, *len);
                sink.apply(*a, |g| {
                    for (r, d_row) in d.chunks_exact(len).enumerate() {
                        g[r * cols + start..r * cols + start + len]
                            .iter_mut()
                            .zip(d_row)
                            .for_each(|(gi, &di)| *gi += di);
                    }
                });
            }
            Op::Reshape(a) => {
                sink.add(*a, &d);
            }
            Op::MeanAll(a) => {
                let n = sink.values(*a).len();
                let per = d[0] / T::from_usize(n);
                sink.apply(*a, |g| {
                    for gi in g.iter_mut() {
                        *gi += per;
                    }
                });
            }
            Op::MeanRows(a) => {
                let rows = sink.shape(*a)[0];
                let cols = node.shape[0];
                let inv = T::one() / T::from_usize(rows);
                sink.apply(*a, |g| {
                    for g_row in g.chunks_exact_mut(cols) {
                        for (gi, &di) in g_row.iter_mut().zip(&d) {
                            *gi += di * inv;
                        }
                    }
                });
            }
            Op::Dropout { a, keep, keep_inv } => {
                let keep = keep.clone();
                let keep_inv = *keep_inv;
                sink.apply(*a, |g| {
                    for ((gi, &di), &k) in g.iter_mut().zip(&d).zip(&keep) {
                        if k {
                            *gi += di * keep_inv;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let classes = sink.shape(*logits)[1];
                let rows = targets.len();
                let targets = targets.clone();
                let logit_vals = sink.values(*logits).to_vec();
                let scale = d[0] / T::from_usize(rows);
                sink.apply(*logits, |g| {
                    let mut probs = vec![T::zero(); classes];
                    for ((g_row, row), &t) in g
                        .chunks_exact_mut(classes)
                        .zip(logit_vals.chunks_exact(classes))
                        .zip(&targets)
                    {
                        softmax_rows(row, &mut probs, classes);
                        for (j, (gi, &p)) in g_row.iter_mut().zip(&probs).enumerate() {
                            let delta = if j == t { T::one() } else { T::zero() };
                            *gi += (p - delta) * scale;
                        }
                    }
                });
            }
        }
    }
}

/// Borrow-split view used during backward: nodes/grads strictly below the
/// node being differentiated.
struct GradSink<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn values(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].values
    }

    fn slot(&mut self, id: NodeId) -> &mut Vec<T> {
        let numel = self.nodes[id.0].values.len();
        self.grads[id.0].get_or_insert_with(|| vec![T::zero(); numel])
    }

    fn apply(&mut self, id: NodeId, f: impl FnOnce(&mut [T])) {
        if self.needs(id) {
            f(self.slot(id));
        }
    }

    fn add(&mut self, id: NodeId, contribution: &[T]) {
        self.apply(id, |g| {
            for (gi, &c) in g.iter_mut().zip(contribution) {
                *gi += c;
            }
        });
    }

    /// Adds `d` (shaped `full`) into `id`'s grad, summing over broadcast dims;
    /// `negate` subtracts instead.
    fn add_reduced(&mut self, id: NodeId, d: &[T], full: &[usize], negate: bool) {
        if !self.needs(id) {
            return;
        }
        let target = self.shape(id).to_vec();
        let reduced;
        let contribution: &[T] = if target[..] == full[..] {
            d
        } else {
            reduced = reduce_grad_to_shape(d, full, &target);
            &reduced
        };
        let g = self.slot(id);
        if negate {
            for (gi, &c) in g.iter_mut().zip(contribution) {
                *gi -= c;
            }
        } else {
            for (gi, &c) in g.iter_mut().zip(contribution) {
                *gi += c;
            }
        }
    }
}

fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len());
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row
        .iter()
        .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
        / n;
    (mean, T::one() / (var + eps).sqrt())
}

/// Softmax along a non-final axis via strided gather/scatter.
fn softmax_axis<T: Scalar>(values: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::zero(); values.len()];
    let mut lane = vec![T::zero(); axis_len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = values[base + j * inner];
            }
            let mut soft = vec![T::zero(); axis_len];
            softmax_rows(&lane, &mut soft, axis_len);
            for (j, &s) in soft.iter().enumerate() {
                out[base + j * inner] = s;
            }
        }
    }
    out
}

fn softmax_axis_backward<T: Scalar>(
    d: &[T],
    out: &[T],
    g: &mut [T],
    shape: &[usize],
    axis: usize,
) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut dotp = T::zero();
            for j in 0..axis_len {
                dotp += d[base + j * inner] * out[base + j * inner];
            }
            for j in 0..axis_len {
                let idx = base + j * inner;
                g[idx] += out[idx] * (d[idx] - dotp);
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<T: Scalar> SignumOrZero for T {
    fn signum_or_zero(self) -> T {
        if self > T::zero() {
            T::one()
        } else if self < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }
}
