//! Reverse-mode differentiation over a flat op tape.
//!
//! A [`Tape`] records batched layer ops during a forward pass; [`Tape::backward`]
//! replays them in reverse, accumulating parameter gradients into a
//! [`ParamSet`]. Parameters live outside the tape and are referenced by id, so
//! a frozen set can serve any number of forward passes.
//!
//! Gradient accumulation is additive: every backward call adds the same f32
//! quantities into `ParamNode::grad`, so two calls without `zero_grad` double
//! the gradients exactly. Gradients are only computed for trainable
//! parameters; frozen ones keep whatever is in their grad buffer.

mod kernels;

pub use kernels::dot_f64;

use crate::tensor::{shape_string, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("batch norm inference requested before any training step: uninitialized statistics")]
    UninitializedStats,
    #[error("backward called without a recorded forward pass")]
    NoForward,
    #[error("node id {0} is not on this tape")]
    InvalidNode(usize),
    #[error("loss node must be scalar, got {0}")]
    NonScalarLoss(String),
}

fn shape_err(op: &'static str, expected: String, got: &[usize]) -> GradError {
    GradError::ShapeMismatch {
        op,
        expected,
        got: shape_string(got),
    }
}

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

/// A trainable (or frozen) tensor with its gradient buffer.
#[derive(Debug, Clone)]
pub struct ParamNode {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Ordered collection of parameters; ids are stable insertion indices.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    nodes: Vec<ParamNode>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(ParamNode {
            value,
            grad,
            trainable,
        });
        ParamId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: ParamId) -> &ParamNode {
        &self.nodes[id.0]
    }

    pub fn node_mut(&mut self, id: ParamId) -> &mut ParamNode {
        &mut self.nodes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamNode)> {
        self.nodes.iter().enumerate().map(|(i, n)| (ParamId(i), n))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamNode)> {
        self.nodes
            .iter_mut()
            .enumerate()
            .map(|(i, n)| (ParamId(i), n))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    pub fn freeze_all(&mut self) {
        for n in &mut self.nodes {
            n.trainable = false;
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.nodes.iter().all(|n| !n.trainable)
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }
}

/// Ids for one batch-norm layer: learned scale/offset plus running statistics
/// (the statistics and the update counter are never trainable).
#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batches_tracked: ParamId,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormParams {
    pub const DEFAULT_MOMENTUM: f32 = 0.9;
    pub const DEFAULT_EPS: f32 = 1e-5;

    pub fn new(set: &mut ParamSet, channels: usize) -> Self {
        BatchNormParams {
            gamma: set.add(Tensor::filled(&[channels], 1.0), true),
            beta: set.add(Tensor::zeros(&[channels]), true),
            running_mean: set.add(Tensor::zeros(&[channels]), false),
            running_var: set.add(Tensor::filled(&[channels], 1.0), false),
            batches_tracked: set.add(Tensor::zeros(&[1]), false),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self, set: &ParamSet) -> usize {
        set.value(self.gamma).len()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// Leaf bound to a parameter; backward accumulates into its grad.
    Param {
        p: ParamId,
    },
    Dense {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Conv2d {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    LeakyRelu {
        x: NodeId,
        alpha: f32,
    },
    Sigmoid {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    /// Broadcast add of a parameter vector over the rows of a matrix.
    BiasAdd {
        x: NodeId,
        bias: ParamId,
    },
    /// Add of a constant tensor (noise injection); gradient passes through.
    AddOffset {
        x: NodeId,
    },
    Residual {
        a: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
        value: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Interprets a shape as `(batch, row_len)`: rank-1 tensors are a single row.
fn as_rows(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [b, n] => Some((*b, *n)),
        _ => None,
    }
}

/// Interprets a shape as `(batch, channels, h, w)`: rank-3 is a single image.
fn as_planes(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match shape {
        [c, h, w] => Some((1, *c, *h, *w)),
        [b, c, h, w] => Some((*b, *c, *h, *w)),
        _ => None,
    }
}

/// Op tape for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Node gradient from the latest backward pass. Retained for leaves and
    /// params; interior node grads are consumed during the sweep.
    pub fn grad_of(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Loss value at f64 accumulation precision (before the f32 cast).
    pub fn scalar_f64(&self, id: NodeId) -> f64 {
        match &self.nodes[id.0].op {
            Op::Mse { value, .. } => *value,
            _ => self.nodes[id.0].value.data()[0] as f64,
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, params: &ParamSet, p: ParamId) -> NodeId {
        self.push(params.value(p).clone(), Op::Param { p })
    }

    /// Fully connected layer: `out = W x + b` with `W: [m,n]`, applied to a
    /// row vector or row-batch.
    pub fn dense(
        &mut self,
        params: &ParamSet,
        x: NodeId,
        w: ParamId,
        b: ParamId,
    ) -> Result<NodeId, GradError> {
        let xs = self.value(x).shape().to_vec();
        let (batch, n) = as_rows(&xs).ok_or_else(|| {
            shape_err("dense input", "rank 1 or 2".into(), &xs)
        })?;
        let wt = params.value(w);
        let (m, wn) = match wt.shape() {
            [m, wn] => (*m, *wn),
            other => return Err(shape_err("dense weight", "rank 2".into(), other)),
        };
        if wn != n {
            return Err(shape_err(
                "dense",
                format!("input of width {} for weight {}", wn, shape_string(wt.shape())),
                &xs,
            ));
        }
        let bt = params.value(b);
        if bt.shape() != [m] {
            return Err(shape_err("dense bias", shape_string(&[m]), bt.shape()));
        }
        let mut out = Tensor::zeros(&if xs.len() == 1 { vec![m] } else { vec![batch, m] });
        kernels::dense_forward(
            self.value(x).data(),
            batch,
            n,
            wt.data(),
            m,
            bt.data(),
            out.data_mut(),
        );
        Ok(self.push(out, Op::Dense { x, w, b }))
    }

    /// 3x3 cross-correlation with zero same-padding.
    pub fn conv2d(
        &mut self,
        params: &ParamSet,
        x: NodeId,
        w: ParamId,
        b: ParamId,
    ) -> Result<NodeId, GradError> {
        let xs = self.value(x).shape().to_vec();
        let (batch, c_in, h, wd) = as_planes(&xs).ok_or_else(|| {
            shape_err("conv2d input", "rank 3 or 4".into(), &xs)
        })?;
        let wt = params.value(w);
        let (f_cnt, wc) = match wt.shape() {
            [f, c, 3, 3] => (*f, *c),
            other => return Err(shape_err("conv2d kernels", "Fx C x3x3".into(), other)),
        };
        if wc != c_in {
            return Err(shape_err(
                "conv2d",
                format!("{} input channels for kernels {}", wc, shape_string(wt.shape())),
                &xs,
            ));
        }
        let bt = params.value(b);
        if bt.shape() != [f_cnt] {
            return Err(shape_err("conv2d bias", shape_string(&[f_cnt]), bt.shape()));
        }
        let out_shape = if xs.len() == 3 {
            vec![f_cnt, h, wd]
        } else {
            vec![batch, f_cnt, h, wd]
        };
        let mut out = Tensor::zeros(&out_shape);
        kernels::conv2d_forward(
            self.value(x).data(),
            batch,
            c_in,
            h,
            wd,
            wt.data(),
            f_cnt,
            bt.data(),
            out.data_mut(),
        );
        Ok(self.push(out, Op::Conv2d { x, w, b }))
    }

    /// Elementwise `x >= 0 ? x : alpha * x` with `alpha` in (0, 1).
    pub fn leaky_relu(&mut self, x: NodeId, alpha: f32) -> NodeId {
        debug_assert!(alpha > 0.0 && alpha < 1.0);
        let xt = self.value(x);
        let mut out = Tensor::zeros(xt.shape());
        kernels::leaky_relu_forward(xt.data(), alpha, out.data_mut());
        self.push(out, Op::LeakyRelu { x, alpha })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xt = self.value(x);
        let mut out = Tensor::zeros(xt.shape());
        kernels::sigmoid_forward(xt.data(), out.data_mut());
        self.push(out, Op::Sigmoid { x })
    }

    /// Batch norm in training mode: normalizes with batch statistics and
    /// updates the running statistics with momentum.
    pub fn batch_norm_train(
        &mut self,
        params: &mut ParamSet,
        x: NodeId,
        bn: &BatchNormParams,
    ) -> Result<NodeId, GradError> {
        let (batch, c_cnt, h, w) = self.bn_dims(params, x, bn)?;
        let hw = h * w;
        let stats = kernels::channel_stats(self.value(x).data(), batch, c_cnt, hw);
        let mean: Vec<f64> = stats.iter().map(|s| s.0).collect();
        let inv_std: Vec<f64> = stats
            .iter()
            .map(|s| 1.0 / (s.1 + bn.eps as f64).sqrt())
            .collect();

        let out = self.bn_apply(params, x, bn, batch, c_cnt, hw, &mean, &inv_std);

        let momentum = bn.momentum as f64;
        for (c, (m, v)) in stats.iter().enumerate() {
            let rm = &mut params.node_mut(bn.running_mean).value.data_mut()[c];
            *rm = (momentum * *rm as f64 + (1.0 - momentum) * m) as f32;
            let rv = &mut params.node_mut(bn.running_var).value.data_mut()[c];
            *rv = (momentum * *rv as f64 + (1.0 - momentum) * v) as f32;
        }
        params.node_mut(bn.batches_tracked).value.data_mut()[0] += 1.0;

        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma: bn.gamma,
                beta: bn.beta,
                mean,
                inv_std,
                train: true,
            },
        ))
    }

    /// Batch norm in inference mode: uses running statistics only.
    pub fn batch_norm_infer(
        &mut self,
        params: &ParamSet,
        x: NodeId,
        bn: &BatchNormParams,
    ) -> Result<NodeId, GradError> {
        if params.value(bn.batches_tracked).data()[0] == 0.0 {
            return Err(GradError::UninitializedStats);
        }
        let (batch, c_cnt, h, w) = self.bn_dims(params, x, bn)?;
        let hw = h * w;
        let mean: Vec<f64> = params
            .value(bn.running_mean)
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let inv_std: Vec<f64> = params
            .value(bn.running_var)
            .data()
            .iter()
            .map(|&v| 1.0 / (v as f64 + bn.eps as f64).sqrt())
            .collect();
        let out = self.bn_apply(params, x, bn, batch, c_cnt, hw, &mean, &inv_std);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma: bn.gamma,
                beta: bn.beta,
                mean,
                inv_std,
                train: false,
            },
        ))
    }

    fn bn_dims(
        &self,
        params: &ParamSet,
        x: NodeId,
        bn: &BatchNormParams,
    ) -> Result<(usize, usize, usize, usize), GradError> {
        let xs = self.value(x).shape().to_vec();
        let dims = as_planes(&xs)
            .ok_or_else(|| shape_err("batch_norm input", "rank 3 or 4".into(), &xs))?;
        let channels = bn.channels(params);
        if dims.1 != channels {
            return Err(shape_err(
                "batch_norm",
                format!("{} channels", channels),
                &xs,
            ));
        }
        Ok(dims)
    }

    fn bn_apply(
        &self,
        params: &ParamSet,
        x: NodeId,
        bn: &BatchNormParams,
        batch: usize,
        c_cnt: usize,
        hw: usize,
        mean: &[f64],
        inv_std: &[f64],
    ) -> Tensor {
        let gamma = params.value(bn.gamma).data();
        let beta = params.value(bn.beta).data();
        let scale: Vec<f64> = (0..c_cnt).map(|c| gamma[c] as f64 * inv_std[c]).collect();
        let shift: Vec<f64> = (0..c_cnt)
            .map(|c| beta[c] as f64 - scale[c] * mean[c])
            .collect();
        let mut out = Tensor::zeros(self.value(x).shape());
        kernels::channel_affine(
            self.value(x).data(),
            batch,
            c_cnt,
            hw,
            &scale,
            &shift,
            out.data_mut(),
        );
        out
    }

    /// Adds a parameter vector to every row of a row-batch (the attacker's
    /// bias layer on the codeword).
    pub fn bias_add(
        &mut self,
        params: &ParamSet,
        x: NodeId,
        bias: ParamId,
    ) -> Result<NodeId, GradError> {
        let xs = self.value(x).shape().to_vec();
        let (batch, m) = as_rows(&xs)
            .ok_or_else(|| shape_err("bias_add input", "rank 1 or 2".into(), &xs))?;
        let bt = params.value(bias);
        if bt.shape() != [m] {
            return Err(shape_err("bias_add", shape_string(&[m]), bt.shape()));
        }
        let mut out = Tensor::zeros(&xs);
        kernels::row_bias_forward(self.value(x).data(), batch, m, bt.data(), out.data_mut());
        Ok(self.push(out, Op::BiasAdd { x, bias }))
    }

    /// Adds a constant tensor (e.g. a drawn noise realization). The constant
    /// is not a graph input; gradient passes straight through.
    pub fn add_offset(&mut self, x: NodeId, offset: &Tensor) -> Result<NodeId, GradError> {
        let xt = self.value(x);
        if xt.shape() != offset.shape() {
            return Err(shape_err(
                "add_offset",
                shape_string(xt.shape()),
                offset.shape(),
            ));
        }
        let mut out = Tensor::zeros(xt.shape());
        kernels::add_forward(xt.data(), offset.data(), out.data_mut());
        Ok(self.push(out, Op::AddOffset { x }))
    }

    /// Elementwise sum of two nodes (identity skip connections).
    pub fn residual(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err(
                "residual",
                shape_string(at.shape()),
                bt.shape(),
            ));
        }
        let mut out = Tensor::zeros(at.shape());
        kernels::add_forward(at.data(), bt.data(), out.data_mut());
        Ok(self.push(out, Op::Residual { a, b }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, GradError> {
        let xt = self.value(x);
        if shape.iter().product::<usize>() != xt.len() {
            return Err(shape_err(
                "reshape",
                shape_string(xt.shape()),
                shape,
            ));
        }
        let out = xt.reshaped(shape);
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Mean squared error over all elements; the scalar node also carries the
    /// f64-accumulated value for high-precision readout.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, GradError> {
        let (pt, tt) = (self.value(pred), self.value(target));
        if pt.shape() != tt.shape() {
            return Err(shape_err("mse", shape_string(pt.shape()), tt.shape()));
        }
        let value = kernels::mse_value(pt.data(), tt.data());
        Ok(self.push(
            Tensor::scalar(value as f32),
            Op::Mse {
                pred,
                target,
                value,
            },
        ))
    }

    /// Reverse sweep from `loss`. Populates `grad` of every trainable
    /// parameter the graph touches (accumulating) and records leaf gradients
    /// retrievable via [`Tape::grad_of`].
    pub fn backward(&mut self, params: &mut ParamSet, loss: NodeId) -> Result<(), GradError> {
        if self.nodes.is_empty() {
            return Err(GradError::NoForward);
        }
        if loss.0 >= self.nodes.len() {
            return Err(GradError::InvalidNode(loss.0));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(GradError::NonScalarLoss(shape_string(
                self.nodes[loss.0].value.shape(),
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            // Consume interior grads as we go; leaves keep theirs.
            let keep = matches!(self.nodes[idx].op, Op::Leaf | Op::Param { .. });
            let Some(g) = (if keep {
                self.grads[idx].clone()
            } else {
                self.grads[idx].take()
            }) else {
                continue;
            };
            self.backprop_node(params, idx, &g);
        }
        Ok(())
    }

    fn node_grad_mut(&mut self, id: NodeId) -> &mut Tensor {
        let shape = self.nodes[id.0].value.shape().to_vec();
        self.grads[id.0].get_or_insert_with(|| Tensor::zeros(&shape))
    }

    fn backprop_node(&mut self, params: &mut ParamSet, idx: usize, g: &Tensor) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Param { p } => {
                let p = *p;
                if params.node(p).trainable {
                    kernels::accumulate(params.node_mut(p).grad.data_mut(), g.data());
                }
            }
            Op::Dense { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (batch, n) = as_rows(self.nodes[x.0].value.shape()).unwrap();
                let m = params.value(w).shape()[0];
                {
                    let wt = params.value(w).data().to_vec();
                    let dx = self.node_grad_mut(x);
                    kernels::dense_backward_dx(g.data(), batch, m, &wt, n, dx.data_mut());
                }
                if params.node(w).trainable {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    kernels::dense_backward_dw(
                        g.data(),
                        &xv,
                        batch,
                        m,
                        n,
                        params.node_mut(w).grad.data_mut(),
                    );
                }
                if params.node(b).trainable {
                    kernels::col_sums_into(
                        g.data(),
                        batch,
                        m,
                        params.node_mut(b).grad.data_mut(),
                    );
                }
            }
            Op::Conv2d { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let (batch, c_in, h, wd) = as_planes(self.nodes[x.0].value.shape()).unwrap();
                let f_cnt = params.value(w).shape()[0];
                {
                    let wt = params.value(w).data().to_vec();
                    let dx = self.node_grad_mut(x);
                    kernels::conv2d_backward_dx(
                        g.data(),
                        batch,
                        f_cnt,
                        h,
                        wd,
                        &wt,
                        c_in,
                        dx.data_mut(),
                    );
                }
                if params.node(w).trainable {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    kernels::conv2d_backward_dw(
                        g.data(),
                        &xv,
                        batch,
                        f_cnt,
                        c_in,
                        h,
                        wd,
                        params.node_mut(w).grad.data_mut(),
                    );
                }
                if params.node(b).trainable {
                    kernels::conv2d_backward_db(
                        g.data(),
                        batch,
                        f_cnt,
                        h * wd,
                        params.node_mut(b).grad.data_mut(),
                    );
                }
            }
            Op::LeakyRelu { x, alpha } => {
                let (x, alpha) = (*x, *alpha);
                let xv = self.nodes[x.0].value.data().to_vec();
                let dx = self.node_grad_mut(x);
                kernels::leaky_relu_backward(g.data(), &xv, alpha, dx.data_mut());
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let out = self.nodes[idx].value.data().to_vec();
                let dx = self.node_grad_mut(x);
                kernels::sigmoid_backward(g.data(), &out, dx.data_mut());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let (batch, c_cnt, h, w) = as_planes(self.nodes[x.0].value.shape()).unwrap();
                let hw = h * w;
                let n = (batch * hw) as f64;
                let xv = self.nodes[x.0].value.data().to_vec();
                let sums = kernels::channel_grad_sums(g.data(), &xv, batch, c_cnt, hw);
                let gv = params.value(gamma).data().to_vec();

                // s2 = sum(dout * xhat) derived from raw sums.
                let s2: Vec<f64> = (0..c_cnt)
                    .map(|c| inv_std[c] * (sums[c].1 - mean[c] * sums[c].0))
                    .collect();

                if params.node(gamma).trainable {
                    let dg = params.node_mut(gamma).grad.data_mut();
                    for c in 0..c_cnt {
                        dg[c] += s2[c] as f32;
                    }
                }
                if params.node(beta).trainable {
                    let db = params.node_mut(beta).grad.data_mut();
                    for c in 0..c_cnt {
                        db[c] += sums[c].0 as f32;
                    }
                }

                let mut ka = vec![0.0f64; c_cnt];
                let mut kb = vec![0.0f64; c_cnt];
                let mut kc = vec![0.0f64; c_cnt];
                for c in 0..c_cnt {
                    let gs = gv[c] as f64 * inv_std[c];
                    ka[c] = gs;
                    if train {
                        kb[c] = -gs * inv_std[c] * s2[c] / n;
                        kc[c] = -gs * sums[c].0 / n - kb[c] * mean[c];
                    }
                }
                let dx = self.node_grad_mut(x);
                kernels::channel_backward_combine(
                    g.data(),
                    &xv,
                    batch,
                    c_cnt,
                    hw,
                    &ka,
                    &kb,
                    &kc,
                    dx.data_mut(),
                );
            }
            Op::BiasAdd { x, bias } => {
                let (x, bias) = (*x, *bias);
                let (batch, m) = as_rows(self.nodes[x.0].value.shape()).unwrap();
                {
                    let dx = self.node_grad_mut(x);
                    kernels::accumulate(dx.data_mut(), g.data());
                }
                if params.node(bias).trainable {
                    kernels::col_sums_into(
                        g.data(),
                        batch,
                        m,
                        params.node_mut(bias).grad.data_mut(),
                    );
                }
            }
            Op::AddOffset { x } => {
                let x = *x;
                let dx = self.node_grad_mut(x);
                kernels::accumulate(dx.data_mut(), g.data());
            }
            Op::Residual { a, b } => {
                let (a, b) = (*a, *b);
                {
                    let da = self.node_grad_mut(a);
                    kernels::accumulate(da.data_mut(), g.data());
                }
                let db = self.node_grad_mut(b);
                kernels::accumulate(db.data_mut(), g.data());
            }
            Op::Reshape { x } => {
                let x = *x;
                let dx = self.node_grad_mut(x);
                kernels::accumulate(dx.data_mut(), g.data());
            }
            Op::Mse { pred, target, .. } => {
                let (pred, target) = (*pred, *target);
                let go = g.data()[0] as f64;
                let pv = self.nodes[pred.0].value.data().to_vec();
                let tv = self.nodes[target.0].value.data().to_vec();
                let mut dt = Tensor::zeros(self.nodes[target.0].value.shape());
                {
                    let dp = self.node_grad_mut(pred);
                    kernels::mse_backward(&pv, &tv, go, dp.data_mut(), dt.data_mut());
                }
                let dtg = self.node_grad_mut(target);
                kernels::accumulate(dtg.data_mut(), dt.data());
            }
        }
    }
}

/// Scale below which gradient elements are compared absolutely: central
/// differences of an f32 forward pass carry roughly 1e-5 of absolute noise,
/// so ratios of near-zero gradients are meaningless while real formula
/// errors still show up far above this floor.
pub const GRAD_CHECK_FLOOR: f64 = 2e-2;

/// Compares backward gradients against central finite differences for every
/// trainable parameter element and every input element.
///
/// `build` must construct the same graph each call and return a scalar loss
/// node. Returns the maximum relative error across all checked elements,
/// where each element's denominator is floored at [`GRAD_CHECK_FLOOR`].
pub fn grad_check<F>(
    params: &mut ParamSet,
    inputs: &mut [Tensor],
    step: f64,
    build: F,
) -> Result<f64, GradError>
where
    F: Fn(&mut Tape, &mut ParamSet, &[NodeId]) -> Result<NodeId, GradError>,
{
    fn eval<F>(params: &mut ParamSet, inputs: &[Tensor], build: &F) -> Result<f64, GradError>
    where
        F: Fn(&mut Tape, &mut ParamSet, &[NodeId]) -> Result<NodeId, GradError>,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, params, &ids)?;
        Ok(tape.scalar_f64(loss))
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, params, &ids)?;
    params.zero_grad();
    tape.backward(params, loss)?;
    let param_grads: Vec<Option<Tensor>> = params
        .iter()
        .map(|(_, p)| p.trainable.then(|| p.grad.clone()))
        .collect();
    let input_grads: Vec<Tensor> = ids
        .iter()
        .map(|id| {
            tape.grad_of(*id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(*id).shape()))
        })
        .collect();

    let mut max_rel: f64 = 0.0;
    let mut record = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    };

    for pi in 0..param_grads.len() {
        let Some(grads) = &param_grads[pi] else {
            continue;
        };
        let id = ParamId(pi);
        for k in 0..grads.len() {
            let orig = params.value(id).data()[k];
            let plus = orig + step as f32;
            let minus = orig - step as f32;
            params.node_mut(id).value.data_mut()[k] = plus;
            let lp = eval(params, inputs, &build)?;
            params.node_mut(id).value.data_mut()[k] = minus;
            let lm = eval(params, inputs, &build)?;
            params.node_mut(id).value.data_mut()[k] = orig;
            let numeric = (lp - lm) / (plus as f64 - minus as f64);
            record(grads.data()[k] as f64, numeric);
        }
    }
    for (ii, gt) in input_grads.iter().enumerate() {
        for k in 0..gt.len() {
            let orig = inputs[ii].data()[k];
            let plus = orig + step as f32;
            let minus = orig - step as f32;
            inputs[ii].data_mut()[k] = plus;
            let lp = eval(params, inputs, &build)?;
            inputs[ii].data_mut()[k] = minus;
            let lm = eval(params, inputs, &build)?;
            inputs[ii].data_mut()[k] = orig;
            let numeric = (lp - lm) / (plus as f64 - minus as f64);
            record(gt.data()[k] as f64, numeric);
        }
    }
    Ok(max_rel)
}
