//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! values its backward rule needs. [`Tape::backward`] walks the record in
//! reverse and returns gradients for every parameter and differentiable leaf.
//! One tape serves one step; it is not shared between threads.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::float::Float;
use crate::nn::activation::{activation, activation_backward, Activation};
use crate::nn::conv::{conv1d_channel, conv1d_channel_backward, conv2d, conv2d_backward, ConvSpec};
use crate::nn::loss::{bce, bce_backward};
use crate::nn::matmul::{batched_matmul, batched_matmul_backward, matmul_macs};
use crate::nn::norm::{
    batch_norm_eval_standardize, channel_affine, channel_affine_backward, standardize,
    standardize_backward, NormKind, Normalized, RunningStats,
};
use crate::nn::pool::{
    global_avg_pool, global_avg_pool_backward, max_pool2x2, max_pool2x2_backward,
};
use crate::nn::resample::{resample_bilinear, resample_bilinear_backward};
use crate::nn::softmax::{softmax_lastdim, softmax_lastdim_backward};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, running statistics are updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

enum Op<T> {
    Input,
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Conv1d {
        x: Var,
        k: Var,
    },
    BatchNormTrain {
        gamma: Var,
        beta: Var,
        x: Var,
        norm: Normalized<T>,
    },
    BatchNormEval {
        gamma: Var,
        beta: Var,
        x: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    LayerNorm {
        gamma: Var,
        beta: Var,
        x: Var,
        norm: Normalized<T>,
    },
    InstanceNorm {
        x: Var,
        norm: Normalized<T>,
    },
    Resample {
        x: Var,
        in_h: usize,
        in_w: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Gap {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add {
        a: Var,
        b: Var,
    },
    MulChannel {
        x: Var,
        g: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Reshape {
        x: Var,
    },
    Matmul {
        a: Var,
        ta: bool,
        b: Var,
        tb: bool,
    },
    Bce {
        p: Var,
        target: Tensor<T>,
    },
    Sum {
        x: Var,
    },
    Weighted {
        terms: Vec<(Var, T)>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv1d { .. } => "conv1d_channel",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Resample { .. } => "resample_bilinear",
            Op::MaxPool { .. } => "max_pool2x2",
            Op::Gap { .. } => "global_avg_pool",
            Op::Softmax { .. } => "softmax",
            Op::Act { .. } => "activation",
            Op::Add { .. } => "add",
            Op::MulChannel { .. } => "mul_channel",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Matmul { .. } => "matmul",
            Op::Bce { .. } => "bce",
            Op::Sum { .. } => "sum",
            Op::Weighted { .. } => "weighted_sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics waiting to be folded into a batch norm's running buffers.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased variance.
    pub batch_var: Vec<T>,
}

pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    params: HashMap<ParamId, Var>,
    param_names: HashMap<usize, String>,
    stat_updates: Vec<StatUpdate<T>>,
    macs: u64,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a differentiable leaf or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.grad_mut(*id).add_assign(g);
        }
    }
}

fn acc<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Float> Tape<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            params: HashMap::new(),
            param_names: HashMap::new(),
            stat_updates: Vec::new(),
            macs: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by convolutions and matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dims4(&self, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.nodes[v.0].value.dims4()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Differentiable leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Loads a parameter; repeated loads of the same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        self.param_names.insert(v.0, store.name(id).to_string());
        v
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Folds recorded batch statistics into the running buffers:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn commit_running_stats(&mut self, store: &mut ParamStore<T>, momentum: f64) {
        let m = T::lit(momentum);
        for up in self.take_stat_updates() {
            for (id, batch) in [
                (up.running_mean, &up.batch_mean),
                (up.running_var, &up.batch_var),
            ] {
                for (r, &b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }

    /// Describes the first recorded value that contains a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut last_param = None;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = self.param_names.get(&i) {
                last_param = Some(name.as_str());
            }
            if !node.value.all_finite() {
                let ctx = match (&node.op, last_param) {
                    (Op::Param(_), Some(name)) => format!("parameter `{name}`"),
                    (op, Some(name)) => format!("{} #{i} (after parameter `{name}`)", op.name()),
                    (op, None) => format!("{} #{i}", op.name()),
                };
                return Some(ctx);
            }
        }
        None
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = conv2d(
            self.value(x),
            spec,
            self.value(w),
            b.map(|b| &self.nodes[b.0].value),
        )?;
        let (bsz, _, h, wd) = self.dims4(x)?;
        self.macs += bsz as u64 * spec.macs(h, wd);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                spec: *spec,
            },
            ng,
        ))
    }

    pub fn conv1d_channel(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let y = conv1d_channel(self.value(x), self.value(kernel).data())?;
        let (b, c, _, _) = self.dims4(x)?;
        self.macs += (b * c * self.value(kernel).numel()) as u64;
        let ng = self.ng(x) || self.ng(kernel);
        Ok(self.push(y, Op::Conv1d { x, k: kernel }, ng))
    }

    /// Batch normalization. In [`Mode::Train`] uses batch statistics and records
    /// a running-statistics update; in [`Mode::Eval`] uses the running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
    ) -> Result<Var> {
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        match self.mode {
            Mode::Train => {
                let norm = standardize(self.value(x), NormKind::Batch, eps)?;
                let (b, _, h, w) = self.dims4(x)?;
                let n = b * h * w;
                if n < 2 {
                    return Err(Error::Precondition(
                        "batch norm in training mode needs more than one value per channel".into(),
                    ));
                }
                let corr = T::lit(n as f64 / (n - 1) as f64);
                self.stat_updates.push(StatUpdate {
                    running_mean,
                    running_var,
                    batch_mean: norm.mean.clone(),
                    batch_var: norm.var.iter().map(|&v| v * corr).collect(),
                });
                let y = channel_affine(
                    &norm.xhat,
                    self.value(gamma).data(),
                    self.value(beta).data(),
                )?;
                Ok(self.push(
                    y,
                    Op::BatchNormTrain {
                        gamma,
                        beta,
                        x,
                        norm,
                    },
                    ng,
                ))
            }
            Mode::Eval => {
                let stats = RunningStats {
                    mean: store.value(running_mean).data(),
                    var: store.value(running_var).data(),
                };
                let (xhat, inv_std) = batch_norm_eval_standardize(self.value(x), stats, eps)?;
                let y = channel_affine(&xhat, self.value(gamma).data(), self.value(beta).data())?;
                Ok(self.push(
                    y,
                    Op::BatchNormEval {
                        gamma,
                        beta,
                        x,
                        xhat,
                        inv_std,
                    },
                    ng,
                ))
            }
        }
    }

    /// Layer normalization over channels at each spatial position, with affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let norm = standardize(self.value(x), NormKind::Layer, eps)?;
        let y = channel_affine(
            &norm.xhat,
            self.value(gamma).data(),
            self.value(beta).data(),
        )?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            y,
            Op::LayerNorm {
                gamma,
                beta,
                x,
                norm,
            },
            ng,
        ))
    }

    /// Instance normalization (per `(b, c)` over spatial entries), no affine.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let norm = standardize(self.value(x), NormKind::Instance, eps)?;
        let y = norm.xhat.clone();
        let ng = self.ng(x);
        Ok(self.push(y, Op::InstanceNorm { x, norm }, ng))
    }

    pub fn resample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, _, in_h, in_w) = self.dims4(x)?;
        if (in_h, in_w) == (out_h, out_w) {
            return Ok(x);
        }
        let y = resample_bilinear(self.value(x), out_h, out_w)?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::Resample { x, in_h, in_w }, ng))
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = max_pool2x2(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::MaxPool { x, argmax }, ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = global_avg_pool(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::Gap { x }, ng))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let y = softmax_lastdim(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::Softmax { x }, ng))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = activation(self.value(x), kind);
        let ng = self.ng(x);
        self.push(y, Op::Act { x, kind }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Elementwise sum. `b` may have a batch extent of 1, broadcasting over `a`'s batch.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let broadcast = sa.len() == sb.len() && sb[0] == 1 && sa[1..] == sb[1..];
        if sa != sb && !broadcast {
            return Err(shape_err("add", format!("{sa:?} + {sb:?}")));
        }
        let mut y = self.value(a).clone();
        let rhs = self.value(b).data();
        for chunk in y.data_mut().chunks_mut(rhs.len()) {
            for (v, &r) in chunk.iter_mut().zip(rhs) {
                *v = *v + r;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(y, Op::Add { a, b }, ng))
    }

    /// `x * g` with `g` of shape `(b, c, 1, 1)` broadcast over space.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        let (b, c, h, w) = self.dims4(x)?;
        if self.shape(g) != [b, c, 1, 1] {
            return Err(shape_err(
                "mul_channel",
                format!("gate {:?} for map {:?}", self.shape(g), self.shape(x)),
            ));
        }
        let mut y = self.value(x).clone();
        let gate = self.value(g).data();
        for (chunk, &gv) in y.data_mut().chunks_mut(h * w).zip(gate) {
            chunk.iter_mut().for_each(|v| *v = *v * gv);
        }
        let ng = self.ng(x) || self.ng(g);
        Ok(self.push(y, Op::MulChannel { x, g }, ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let y = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(y, Op::Scale { x, s }, ng)
    }

    /// Channel-axis concatenation of rank-4 maps.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let (b, _, h, w) = self.dims4(parts[0])?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pb, pc, ph, pw) = self.dims4(p)?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(p), self.shape(parts[0])),
                ));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(b * total * h * w);
        for bi in 0..b {
            for (&p, &c) in parts.iter().zip(&chans) {
                data.extend_from_slice(&self.value(p).data()[bi * c * h * w..(bi + 1) * c * h * w]);
            }
        }
        let y = Tensor::from_vec(&[b, total, h, w], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    /// Channels `start..start+len` of a rank-4 map.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c, h, w) = self.dims4(x)?;
        if start + len > c || len == 0 {
            return Err(shape_err(
                "slice_channels",
                format!("{start}..{} of {c} channels", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * len * h * w);
        for bi in 0..b {
            data.extend_from_slice(&src[(bi * c + start) * h * w..(bi * c + start + len) * h * w]);
        }
        let y = Tensor::from_vec(&[b, len, h, w], data)?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::Slice { x, start, len }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(y, Op::Reshape { x }, ng))
    }

    /// Batched product of rank-3 operands, optionally reading either transposed.
    pub fn matmul(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Result<Var> {
        let y = batched_matmul(self.value(a), trans_a, self.value(b), trans_b)?;
        let sa = self.shape(a);
        let k = if trans_a { sa[1] } else { sa[2] };
        let ys = y.shape();
        self.macs += matmul_macs(ys[0], ys[1], k, ys[2]);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            y,
            Op::Matmul {
                a,
                ta: trans_a,
                b,
                tb: trans_b,
            },
            ng,
        ))
    }

    /// Mean binary cross entropy against a constant target; yields a scalar.
    pub fn bce(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        let l = bce(self.value(p), target)?;
        let ng = self.ng(p);
        Ok(self.push(
            Tensor::scalar(l),
            Op::Bce {
                p,
                target: target.clone(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    /// `Σ w_i * s_i` over scalar nodes. An empty list yields 0.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(shape_err("weighted_sum", "terms must be scalars"));
            }
            total = total + w * self.value(v).data()[0];
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(
            Tensor::scalar(total),
            Op::Weighted {
                terms: terms.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "backward called without a recorded forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: Vec::new(),
        };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads, &mut out, i)?;
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
        index: usize,
    ) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::Leaf => {
                out.leaves.insert(index, g);
            }
            Op::Param(id) => {
                out.params.push((*id, g.clone()));
                out.leaves.insert(index, g);
            }
            Op::Conv2d { x, w, b, spec } => {
                let r = conv2d_backward(self.value(*x), spec, self.value(*w), &g, self.ng(*x))?;
                if let Some(dx) = r.dx {
                    acc(grads, *x, dx);
                }
                if self.ng(*w) {
                    acc(grads, *w, r.dweight);
                }
                if let (Some(b), Some(db)) = (b, r.dbias) {
                    if self.ng(*b) {
                        acc(grads, *b, db);
                    }
                }
            }
            Op::Conv1d { x, k } => {
                let (dx, dk) = conv1d_channel_backward(self.value(*x), self.value(*k).data(), &g)?;
                acc(grads, *x, dx);
                acc(grads, *k, Tensor::from_vec(self.shape(*k), dk)?);
            }
            Op::BatchNormTrain {
                gamma,
                beta,
                x,
                norm,
            } => {
                self.norm_backward(norm, NormKind::Batch, *gamma, *beta, *x, &g, grads)?;
            }
            Op::BatchNormEval {
                gamma,
                beta,
                x,
                xhat,
                inv_std,
            } => {
                let (mut dx, dgamma, dbeta) =
                    channel_affine_backward(xhat, self.value(*gamma).data(), &g)?;
                let (_, c, h, w) = xhat.dims4()?;
                for (i, chunk) in dx.data_mut().chunks_mut(h * w).enumerate() {
                    let s = inv_std[i % c];
                    chunk.iter_mut().for_each(|v| *v = *v * s);
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                acc(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
            }
            Op::LayerNorm {
                gamma,
                beta,
                x,
                norm,
            } => {
                self.norm_backward(norm, NormKind::Layer, *gamma, *beta, *x, &g, grads)?;
            }
            Op::InstanceNorm { x, norm } => {
                acc(
                    grads,
                    *x,
                    standardize_backward(norm, NormKind::Instance, &g)?,
                );
            }
            Op::Resample { x, in_h, in_w } => {
                acc(grads, *x, resample_bilinear_backward(&g, *in_h, *in_w)?);
            }
            Op::MaxPool { x, argmax } => {
                acc(grads, *x, max_pool2x2_backward(self.shape(*x), argmax, &g));
            }
            Op::Gap { x } => {
                acc(grads, *x, global_avg_pool_backward(self.shape(*x), &g));
            }
            Op::Softmax { x } => {
                acc(grads, *x, softmax_lastdim_backward(&node.value, &g));
            }
            Op::Act { x, kind } => {
                acc(
                    grads,
                    *x,
                    activation_backward(self.value(*x), &node.value, &g, *kind),
                );
            }
            Op::Add { a, b } => {
                if self.ng(*b) {
                    let gb = if self.shape(*a) == self.shape(*b) {
                        g.clone()
                    } else {
                        let per = self.value(*b).numel();
                        let mut s = Tensor::zeros(self.shape(*b));
                        for chunk in g.data().chunks(per) {
                            for (d, &v) in s.data_mut().iter_mut().zip(chunk) {
                                *d = *d + v;
                            }
                        }
                        s
                    };
                    acc(grads, *b, gb);
                }
                acc(grads, *a, g);
            }
            Op::MulChannel { x, g: gate } => {
                let (_, _, h, w) = self.dims4(*x)?;
                let gv = self.value(*gate).data();
                let xv = self.value(*x).data();
                let mut dg = Tensor::zeros(self.shape(*gate));
                for (i, (gc, xc)) in g.data().chunks(h * w).zip(xv.chunks(h * w)).enumerate() {
                    dg.data_mut()[i] = gc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
                }
                let mut dx = g;
                for (chunk, &s) in dx.data_mut().chunks_mut(h * w).zip(gv) {
                    chunk.iter_mut().for_each(|v| *v = *v * s);
                }
                acc(grads, *x, dx);
                acc(grads, *gate, dg);
            }
            Op::Scale { x, s } => {
                let s = *s;
                acc(grads, *x, g.map(|v| v * s));
            }
            Op::Concat { parts } => {
                let (b, total, h, w) = g.dims4()?;
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.ng(p) {
                        let mut data = Vec::with_capacity(b * c * h * w);
                        for bi in 0..b {
                            let start = (bi * total + offset) * h * w;
                            data.extend_from_slice(&g.data()[start..start + c * h * w]);
                        }
                        acc(grads, p, Tensor::from_vec(&[b, c, h, w], data)?);
                    }
                    offset += c;
                }
            }
            Op::Slice { x, start, len } => {
                let (b, c, h, w) = self.dims4(*x)?;
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                for bi in 0..b {
                    let dst = (bi * c + start) * h * w;
                    dx.data_mut()[dst..dst + len * h * w]
                        .copy_from_slice(&g.data()[bi * len * h * w..(bi + 1) * len * h * w]);
                }
                acc(grads, *x, dx);
            }
            Op::Reshape { x } => {
                acc(grads, *x, g.reshape(self.shape(*x))?);
            }
            Op::Matmul { a, ta, b, tb } => {
                let (da, db) =
                    batched_matmul_backward(self.value(*a), *ta, self.value(*b), *tb, &g)?;
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Bce { p, target } => {
                acc(grads, *p, bce_backward(self.value(*p), target, g.data()[0]));
            }
            Op::Sum { x } => {
                acc(grads, *x, Tensor::full(self.shape(*x), g.data()[0]));
            }
            Op::Weighted { terms } => {
                for &(v, w) in terms {
                    acc(grads, v, Tensor::full(self.shape(v), g.data()[0] * w));
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        norm: &Normalized<T>,
        kind: NormKind,
        gamma: Var,
        beta: Var,
        x: Var,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (dxhat, dgamma, dbeta) =
            channel_affine_backward(&norm.xhat, self.value(gamma).data(), g)?;
        let c = dgamma.len();
        if self.ng(x) {
            acc(grads, x, standardize_backward(norm, kind, &dxhat)?);
        }
        acc(grads, gamma, Tensor::from_vec(&[c], dgamma)?);
        acc(grads, beta, Tensor::from_vec(&[c], dbeta)?);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new(Mode::Train);
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let tape = Tape::<f64>::new(Mode::Train);
        assert!(matches!(tape.backward(Var(0)), Err(Error::Usage(_))));
        let mut tape = Tape::<f64>::new(Mode::Train);
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_is_located() {
        let mut tape = Tape::<f64>::new(Mode::Eval);
        let x = tape.input(Tensor::from_vec(&[1], vec![f64::MAX]).unwrap());
        let y = tape.scale(x, 10.0);
        let _ = tape.sum(y);
        let msg = tape.first_non_finite().unwrap();
        assert!(msg.starts_with("scale #1"), "{msg}");
    }
}
