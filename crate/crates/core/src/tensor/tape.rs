//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each differentiable op appends a node holding its output value and the
//! forward context its backward rule needs. Nodes only ever reference
//! earlier nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single sweep in reverse recording order.

use serde::{Deserialize, Serialize};

use super::conv::{self, ConvSpec, PoolGeometry};
use super::{check_concat_compatible, split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of recorded values. `F32` rounds every value pushed
/// onto the tape to single precision; arithmetic stays in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the stored running statistics.
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub epsilon: f64,
    /// Weight of the previous running value in the moving average.
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            epsilon: 1e-5,
            momentum: 0.9,
        }
    }
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    MeanPool {
        input: Var,
        geom: PoolGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        axis: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            precision: Precision::F64,
        }
    }

    /// A tape that evaluates ops but keeps no backward context.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. It takes part in differentiation when the
    /// tensor's `requires_grad` flag is set and the tape is recording.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = self.recording && tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            value.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        value.set_requires_grad(requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        self.recording && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2D convolution over `[C,H,W]` or `[N,C,H,W]` input with weights
    /// `[out, in, kh, kw]` and an optional `[out]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        spec.validate()?;
        let shape = self.shape(input).to_vec();
        let (n, c, h, w, batched) = match shape.as_slice() {
            &[c, h, w] => (1, c, h, w, false),
            &[n, c, h, w] => (n, c, h, w, true),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d input must be [C,H,W] or [N,C,H,W], got {shape:?}"
                )))
            }
        };
        if c != spec.in_channels {
            return Err(Error::shape(format!(
                "conv2d expects {} input channels, got {c}",
                spec.in_channels
            )));
        }
        if self.shape(weight) != spec.weight_shape() {
            return Err(Error::shape(format!(
                "conv2d weight shape {:?} does not match {:?}",
                self.shape(weight),
                spec.weight_shape()
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [spec.out_channels] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {:?}, expected [{}]",
                    self.shape(b),
                    spec.out_channels
                )));
            }
        }
        let out = conv::conv2d_forward(
            self.value(input).data(),
            n,
            h,
            w,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &spec,
        )?;
        let out_shape = if batched {
            vec![n, spec.out_channels, out.ho, out.wo]
        } else {
            vec![spec.out_channels, out.ho, out.wo]
        };
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.tracks(&deps);
        Ok(self.push(
            Tensor::from_parts(out_shape, out.data),
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            rg,
        ))
    }

    fn spatial(&self, input: Var, what: &str) -> Result<(usize, usize, usize)> {
        let shape = self.shape(input);
        if shape.len() < 2 {
            return Err(Error::shape(format!("{what} needs at least 2 dims, got {shape:?}")));
        }
        let h = shape[shape.len() - 2];
        let w = shape[shape.len() - 1];
        Ok((shape[..shape.len() - 2].iter().product(), h, w))
    }

    fn with_spatial(&self, input: Var, ho: usize, wo: usize) -> Vec<usize> {
        let mut s = self.shape(input).to_vec();
        let r = s.len();
        s[r - 2] = ho;
        s[r - 1] = wo;
        s
    }

    /// Mean over complete `kernel` windows; incomplete border windows are dropped.
    pub fn mean_pool2d(&mut self, input: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (planes, h, w) = self.spatial(input, "mean_pool2d")?;
        let geom = PoolGeometry::new(h, w, kernel, stride)?;
        let data = conv::mean_pool_forward(self.value(input).data(), planes, &geom);
        let shape = self.with_spatial(input, geom.ho, geom.wo);
        let rg = self.tracks(&[input]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MeanPool { input, geom }, rg))
    }

    /// Window maximum; the gradient goes to the first maximal element.
    pub fn max_pool2d(&mut self, input: Var, kernel: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (planes, h, w) = self.spatial(input, "max_pool2d")?;
        let geom = PoolGeometry::new(h, w, kernel, stride)?;
        let (data, argmax) = conv::max_pool_forward(self.value(input).data(), planes, &geom);
        let shape = self.with_spatial(input, geom.ho, geom.wo);
        let rg = self.tracks(&[input]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MaxPool { input, argmax }, rg))
    }

    /// Nearest-neighbour upsampling of the two trailing axes.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be >= 1"));
        }
        let (planes, h, w) = self.spatial(input, "upsample_nearest")?;
        let data = conv::upsample_nearest(self.value(input).data(), planes, h, w, factor);
        let shape = self.with_spatial(input, h * factor, w * factor);
        let rg = self.tracks(&[input]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Upsample { input, factor }, rg))
    }

    /// Batch normalization over axis 1 of an `[N, C, ...]` tensor.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: NormMode,
        config: BatchNormConfig,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!(
                "batch_norm input must be [N,C,...], got {shape:?}"
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.channels() != c {
            return Err(Error::shape(format!(
                "batch_norm affine/statistics size mismatch for {c} channels"
            )));
        }
        let count = n * inner;
        if mode == NormMode::Train && count < 2 {
            return Err(Error::shape(format!(
                "batch_norm in train mode needs N*H*W >= 2, got {count}"
            )));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut inv_std = vec![0.0; c];
        let mut mean = vec![0.0; c];
        for ch in 0..c {
            let channel = (0..n).flat_map(|i| {
                let base = (i * c + ch) * inner;
                x[base..base + inner].iter().copied()
            });
            let (m, var) = match mode {
                NormMode::Train => {
                    let m = channel.clone().sum::<f64>() / count as f64;
                    let var = channel.map(|v| (v - m) * (v - m)).sum::<f64>() / count as f64;
                    stats.mean[ch] = config.momentum * stats.mean[ch] + (1.0 - config.momentum) * m;
                    let unbiased = var * count as f64 / (count - 1) as f64;
                    stats.var[ch] = config.momentum * stats.var[ch] + (1.0 - config.momentum) * unbiased;
                    (m, var)
                }
                NormMode::Infer => (stats.mean[ch], stats.var[ch]),
            };
            mean[ch] = m;
            inv_std[ch] = 1.0 / (var + config.epsilon).sqrt();
        }
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    xhat[j] = (x[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let rg = self.tracks(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == NormMode::Train,
            },
            rg,
        ))
    }

    /// Affine map `y = x W + b` for `x: [N, D]`, `W: [D, K]`, `b: [K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        let ok = xs.len() == 2 && ws.len() == 2 && bs.len() == 1 && xs[1] == ws[0] && ws[1] == bs[0];
        if !ok {
            return Err(Error::shape(format!(
                "linear: input {xs:?}, weight {ws:?}, bias {bs:?} do not compose"
            )));
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        conv::gemm(
            n,
            d,
            k,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            1.0,
            &mut out,
        );
        let rg = self.tracks(&[input, weight, bias]);
        Ok(self.push(
            Tensor::from_parts(vec![n, k], out),
            Op::Linear { input, weight, bias },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let src = self.value(input);
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = src.shape().to_vec();
        let rg = self.tracks(&[input]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Relu { input }, rg))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let (outer, k, inner) = split_axis(&shape, axis)?;
        let x = self.value(input).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |c: usize| (o * k + c) * inner + i;
                let m = (0..k).map(|c| x[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (x[idx(c)] - m).exp()).sum();
                for c in 0..k {
                    out[idx(c)] = (x[idx(c)] - m).exp() / z;
                }
            }
        }
        let rg = self.tracks(&[input]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { input, axis }, rg))
    }

    /// Weighted cross-entropy with softmax over `axis`:
    /// `sum_s w_s * (logsumexp(z_s) - z_s[t_s])`, one sample per position of
    /// the remaining axes (row-major), evaluated with the max-shift so that
    /// finite logits always give a finite loss.
    pub fn cross_entropy(&mut self, logits: Var, axis: usize, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (outer, k, inner) = split_axis(&shape, axis)?;
        let samples = outer * inner;
        if targets.len() != samples || weights.len() != samples {
            return Err(Error::shape(format!(
                "cross_entropy over {shape:?} axis {axis} needs {samples} targets and weights, got {} and {}",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("target class {t} out of range for {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                let s = o * inner + i;
                let idx = |c: usize| (o * k + c) * inner + i;
                let m = (0..k).map(|c| x[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (x[idx(c)] - m).exp()).sum();
                for c in 0..k {
                    probs[idx(c)] = (x[idx(c)] - m).exp() / z;
                }
                if weights[s] != 0.0 {
                    loss += weights[s] * (m + z.ln() - x[idx(targets[s])]);
                }
            }
        }
        let rg = self.tracks(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                axis,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `[K]` or `[N, K]` logits against class indices.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let rank = self.shape(logits).len();
        if rank == 0 || rank > 2 {
            return Err(Error::shape("cross_entropy_from_logits expects [K] or [N,K] logits"));
        }
        let rows = if rank == 2 { self.shape(logits)[0] } else { 1 };
        let w = vec![1.0 / rows as f64; rows];
        self.cross_entropy(logits, rank - 1, targets, &w)
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        split_axis(self.shape(a), axis)?;
        check_concat_compatible(self.shape(a), self.shape(b), axis)?;
        let out = Tensor::concat(&[self.value(a), self.value(b)], axis)?;
        let rg = self.tracks(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b, axis }, rg))
    }

    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).narrow(axis, start, len)?;
        let rg = self.tracks(&[input]);
        Ok(self.push(out, Op::Narrow { input, axis, start }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).reshape(shape)?;
        let rg = self.tracks(&[input]);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracks(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracks(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let data = self.value(input).data().iter().map(|x| x * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.tracks(&[input]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Scale { input, factor }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().sum();
        let rg = self.tracks(&[input]);
        Ok(self.push(Tensor::scalar(total), Op::Sum { input }, rg))
    }

    /// Back-propagates from a one-element `loss`, adding `d loss / d leaf`
    /// into the gradient buffer of every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::invalid("backward on an inference tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.nodes[idx].value.accumulate_grad(&g)?;
                continue;
            }
            for (var, contribution) in self.local_grads(idx, &g)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.value(v);
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let s = val(*input).shape();
                let (n, h, w) = match s.len() {
                    3 => (1, s[1], s[2]),
                    _ => (s[0], s[2], s[3]),
                };
                let grads = conv::conv2d_backward(
                    val(*input).data(),
                    n,
                    h,
                    w,
                    val(*weight).data(),
                    spec,
                    g,
                    (want(*input), want(*weight), bias.is_some_and(want)),
                )?;
                let mut v = Vec::new();
                v.extend(grads.input.map(|d| (*input, d)));
                v.extend(grads.weight.map(|d| (*weight, d)));
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    v.push((*b, d));
                }
                v
            }
            Op::MeanPool { input, geom } => {
                let planes = val(*input).numel() / (geom.h * geom.w);
                vec![(*input, conv::mean_pool_backward(g, planes, geom))]
            }
            Op::MaxPool { input, argmax } => {
                let mut d = vec![0.0; val(*input).numel()];
                for (gi, &src) in g.iter().zip(argmax) {
                    d[src] += gi;
                }
                vec![(*input, d)]
            }
            Op::Upsample { input, factor } => {
                let s = val(*input).shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = val(*input).numel() / (h * w);
                vec![(*input, conv::upsample_nearest_backward(g, planes, h, w, *factor))]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = val(*input).shape();
                let (n, c) = (s[0], s[1]);
                let inner = val(*input).numel() / (n * c);
                let count = (n * inner) as f64;
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * inner;
                        for j in base..base + inner {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                let mut v = Vec::new();
                if want(*input) {
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * inner;
                            for j in base..base + inner {
                                dx[j] = if *batch_stats {
                                    // dxhat = g * gamma; sums over the channel are
                                    // gamma * dbeta and gamma * dgamma.
                                    gam[ch] * inv_std[ch] / count * (count * g[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    g[j] * gam[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    v.push((*input, dx));
                }
                v.push((*gamma, dgamma));
                v.push((*beta, dbeta));
                v
            }
            Op::Linear { input, weight, bias } => {
                let ws = val(*weight).shape();
                let (d, k) = (ws[0], ws[1]);
                let n = val(*input).shape()[0];
                let mut v = Vec::new();
                if want(*input) {
                    let mut dx = vec![0.0; n * d];
                    conv::gemm(n, k, d, g, false, val(*weight).data(), true, 0.0, &mut dx);
                    v.push((*input, dx));
                }
                if want(*weight) {
                    let mut dw = vec![0.0; d * k];
                    conv::gemm(d, n, k, val(*input).data(), true, g, false, 0.0, &mut dw);
                    v.push((*weight, dw));
                }
                let mut db = vec![0.0; k];
                for row in g.chunks(k) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                v.push((*bias, db));
                v
            }
            Op::Relu { input } => {
                let d = val(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                    .collect();
                vec![(*input, d)]
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, k, inner) = split_axis(node.value.shape(), *axis)?;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |c: usize| (o * k + c) * inner + i;
                        let dot: f64 = (0..k).map(|c| g[idx(c)] * y[idx(c)]).sum();
                        for c in 0..k {
                            d[idx(c)] = y[idx(c)] * (g[idx(c)] - dot);
                        }
                    }
                }
                vec![(*input, d)]
            }
            Op::CrossEntropy {
                logits,
                axis,
                targets,
                weights,
                probs,
            } => {
                let (outer, k, inner) = split_axis(val(*logits).shape(), *axis)?;
                let mut d = vec![0.0; probs.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let s = o * inner + i;
                        let ws = weights[s] * g[0];
                        if ws == 0.0 {
                            continue;
                        }
                        for c in 0..k {
                            let j = (o * k + c) * inner + i;
                            let onehot = if c == targets[s] { 1.0 } else { 0.0 };
                            d[j] = ws * (probs[j] - onehot);
                        }
                    }
                }
                vec![(*logits, d)]
            }
            Op::Concat { a, b, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis)?;
                let la = val(*a).shape()[*axis] * inner;
                let lb = val(*b).shape()[*axis] * inner;
                let mut da = Vec::with_capacity(outer * la);
                let mut db = Vec::with_capacity(outer * lb);
                for chunk in g.chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Narrow { input, axis, start } => {
                let (outer, dim, inner) = split_axis(val(*input).shape(), *axis)?;
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; val(*input).numel()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*input, d)]
            }
            Op::Reshape { input } => vec![(*input, g.to_vec())],
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul { a, b } => {
                let da = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { input, factor } => vec![(*input, g.iter().map(|x| x * factor).collect())],
            Op::Sum { input } => vec![(*input, vec![g[0]; val(*input).numel()])],
        };
        Ok(out)
    }
}
