//! Reverse-mode differentiation over a linear operation record.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. [`Tape::backward`] walks the record in reverse and
//! accumulates gradients into the leaf tensors that were marked trainable.

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Sigmoid {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a train-mode batchnorm, for running-average
/// bookkeeping by the caller.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let batch = shape[0];
    let channels = shape.get(1).copied().unwrap_or(1);
    let plane = shape.iter().skip(2).product();
    (batch, channels, plane)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients flow into it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node { value: tensor, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a trainable leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Removes a leaf's tensor (with its gradient) from the tape.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Shape {
                layer: "conv2d".into(),
                expected: format!("input [B, {}, H, W] for weight {ws:?}", ws.get(1).copied().unwrap_or(0)),
                actual: format!("{xs:?}"),
            });
        }
        if stride == 0 || xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3] {
            return Err(Error::shape("conv2d", format!("spatial extent >= kernel {:?}", &ws[2..]), &xs));
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [ws[0]] {
                return Err(Error::shape("conv2d bias", format!("[{}]", ws[0]), bs));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            padding,
        };
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let (k, n) = (geom.patch_len(), geom.patch_count());
        let mut mat = vec![T::zero(); geom.out_channels * n];
        T::gemm(geom.out_channels, k, n, T::one(), self.value(weight).data(), (k, 1), &cols, (n, 1), T::zero(), &mut mat, (n, 1));
        let plane = geom.out_height() * geom.out_width();
        let mut out = kernels::channel_major_to_batch_major(&mat, geom.batch, geom.out_channels, plane);
        if let Some(b) = bias {
            let bias = self.value(b).data();
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bc = bias[i % geom.out_channels];
                chunk.iter_mut().for_each(|v| *v = *v + bc);
            }
        }
        let value = Tensor::new([geom.batch, geom.out_channels, geom.out_height(), geom.out_width()], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom, cols }, &inputs))
    }

    /// `y = x @ W^T + b` with `W` shaped `[out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape {
                layer: "linear".into(),
                expected: format!("input [B, {}]", ws.get(1).copied().unwrap_or(0)),
                actual: format!("{xs:?}"),
            });
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); batch * fan_out];
        T::gemm(batch, fan_in, fan_out, T::one(), self.value(input).data(), (fan_in, 1), self.value(weight).data(), (1, fan_in), T::zero(), &mut out, (fan_out, 1));
        if let Some(b) = bias {
            let bias = self.value(b).data();
            if bias.len() != fan_out {
                return Err(Error::shape("linear bias", format!("[{fan_out}]"), self.value(b).shape()));
            }
            for row in out.chunks_mut(fan_out) {
                row.iter_mut().zip(bias).for_each(|(v, &b)| *v = *v + b);
            }
        }
        let value = Tensor::new([batch, fan_out], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, &inputs))
    }

    fn check_affine(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.value(input).shape();
        if xs.len() < 2 {
            return Err(Error::shape("batchnorm", "[B, C, ...]", xs));
        }
        let (b, c, p) = channel_layout(xs);
        for v in [gamma, beta] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape("batchnorm affine", format!("[{c}]"), self.value(v).shape()));
            }
        }
        Ok((b, c, p))
    }

    /// Normalizes with the batch's own statistics (biased variance).
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (batch, channels, plane) = self.check_affine(input, gamma, beta)?;
        if batch < 2 {
            return Err(Error::shape("batchnorm (train)", "batch size >= 2", self.value(input).shape()));
        }
        let x = self.value(input).data();
        let count = (batch * plane) as f64;
        let mean: Vec<f64> = kernels::channel_sums(x, batch, channels, plane).into_iter().map(|s| s / count).collect();
        let mut sq = vec![0.0f64; channels];
        for b in 0..batch {
            for c in 0..channels {
                let m = mean[c];
                sq[c] += x[(b * channels + c) * plane..][..plane].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
            }
        }
        let biased: Vec<f64> = sq.iter().map(|s| s / count).collect();
        let unbiased: Vec<f64> = sq.iter().map(|s| s / (count - 1.0)).collect();
        let inv_std: Vec<T> = biased.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                let m = T::from_f64(mean[c]);
                for i in off..off + plane {
                    let n = (x[i] - m) * inv_std[c];
                    normalized[i] = n;
                    out[i] = g[c] * n + bt[c];
                }
            }
        }
        let value = Tensor::new(self.value(input).shape().to_vec(), out)?;
        let var = self.push(value, Op::BatchNormTrain { input, gamma, beta, normalized, inv_std }, &[input, gamma, beta]);
        Ok((var, BatchStats { mean, var: unbiased }))
    }

    /// Normalizes with externally tracked statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, running_mean: &[T], running_var: &[T], eps: f64) -> Result<Var> {
        let (batch, channels, plane) = self.check_affine(input, gamma, beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(Error::invalid(format!("batchnorm running statistics must have {channels} entries")));
        }
        let inv_std: Vec<T> = running_var.iter().map(|v| T::from_f64(1.0 / (v.as_f64() + eps).sqrt())).collect();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                for i in off..off + plane {
                    let n = (x[i] - running_mean[c]) * inv_std[c];
                    normalized[i] = n;
                    out[i] = g[c] * n + bt[c];
                }
            }
        }
        let value = Tensor::new(self.value(input).shape().to_vec(), out)?;
        Ok(self.push(value, Op::BatchNormEval { input, gamma, beta, normalized, inv_std }, &[input, gamma, beta]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { input }, &[input])
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(Error::shape("maxpool2d", format!("[B, C, H>={kernel}, W>={kernel}]"), &xs));
        }
        let geom = PoolGeom { batch: xs[0], channels: xs[1], height: xs[2], width: xs[3], kernel, stride };
        let (out, argmax) = kernels::max_pool(self.value(input).data(), &geom);
        let value = Tensor::new([xs[0], xs[1], geom.out_height(), geom.out_width()], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    /// `[B, C, H, W] -> [B, C, 1, 1]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", "[B, C, H, W]", &xs));
        }
        let plane = xs[2] * xs[3];
        let out: Vec<T> = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|c| T::from_f64(c.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
            .collect();
        let value = Tensor::new([xs[0], xs[1], 1, 1], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { input }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape.to_vec()).map_err(|_| {
            Error::shape("reshape", format!("{} elements", self.value(input).numel()), shape)
        })?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let xs = self.value(input).shape();
        let batch = xs[0];
        let rest = xs[1..].iter().product::<usize>().max(1);
        self.reshape(input, &[batch, rest])
    }

    fn same_shape(&self, op: &str, lhs: Var, rhs: Var) -> Result<()> {
        let (a, b) = (self.value(lhs).shape(), self.value(rhs).shape());
        if a != b {
            return Err(Error::shape(op, format!("{a:?}"), b));
        }
        Ok(())
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape("add", lhs, rhs)?;
        let data = self.value(lhs).data().iter().zip(self.value(rhs).data()).map(|(&a, &b)| a + b).collect();
        let value = Tensor::new(self.value(lhs).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { lhs, rhs }, &[lhs, rhs]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape("mul", lhs, rhs)?;
        let data = self.value(lhs).data().iter().zip(self.value(rhs).data()).map(|(&a, &b)| a * b).collect();
        let value = Tensor::new(self.value(lhs).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { lhs, rhs }, &[lhs, rhs]))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid { input }, &[input])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { input }, &[input])
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|v| v * factor);
        self.push(value, Op::Scale { input, factor }, &[input])
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let weights = vec![T::one(); targets.len()];
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// `(1/B) * sum_i w_i * CE_i`; weights are not renormalized.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let zs = self.value(logits).shape().to_vec();
        if zs.len() != 2 || zs[0] != targets.len() || weights.len() != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits [{}, C] with matching weights", targets.len()),
                &zs,
            ));
        }
        let (batch, classes) = (zs[0], zs[1]);
        if classes < 2 {
            return Err(Error::invalid(format!("cross-entropy needs at least 2 classes, got {classes}")));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::invalid(format!("target {t} out of range for {classes} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); z.len()];
        let mut total = 0.0f64;
        for (i, row) in z.chunks(classes).enumerate() {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let log_denom = denom.ln();
            for (p, e) in probs[i * classes..][..classes].iter_mut().zip(&exps) {
                *p = T::from_f64(e / denom);
            }
            let ce = log_denom - (row[targets[i]].as_f64() - max);
            total += weights[i].as_f64() * ce;
        }
        let value = Tensor::scalar(T::from_f64(total / batch as f64));
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        Ok(self.push(value, op, &[logits]))
    }

    /// Back-propagates from a one-element `loss`, adding into the gradients of
    /// every trainable leaf it depends on. Calling it twice accumulates twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&mut self, idx: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        fn acc<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
            match grads[v.0].as_mut() {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, &d)| *e = *e + d),
                None => grads[v.0] = Some(delta),
            }
        }

        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {
                self.nodes[idx].value.accumulate_grad(&g);
            }
            Op::Conv2d { input, weight, bias, geom, cols } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let plane = geom.out_height() * geom.out_width();
                let (k, n) = (geom.patch_len(), geom.patch_count());
                let gmat = kernels::batch_major_to_channel_major(&g, geom.batch, geom.out_channels, plane);
                if self.wants(weight) {
                    let mut dw = vec![T::zero(); geom.out_channels * k];
                    T::gemm(geom.out_channels, n, k, T::one(), &gmat, (n, 1), cols, (1, n), T::zero(), &mut dw, (k, 1));
                    acc(grads, weight, dw);
                }
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    let db = gmat.chunks(n).map(|row| T::from_f64(row.iter().map(|v| v.as_f64()).sum())).collect();
                    acc(grads, b, db);
                }
                if self.wants(input) {
                    let mut dcols = vec![T::zero(); k * n];
                    let w = self.nodes[weight.0].value.data();
                    T::gemm(k, geom.out_channels, n, T::one(), w, (1, k), &gmat, (n, 1), T::zero(), &mut dcols, (n, 1));
                    let mut dx = vec![T::zero(); geom.batch * geom.in_channels * geom.height * geom.width];
                    kernels::col2im(&dcols, geom, &mut dx);
                    acc(grads, input, dx);
                }
            }
            Op::Linear { input, weight, bias } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let ws = self.nodes[weight.0].value.shape();
                let (fan_out, fan_in) = (ws[0], ws[1]);
                let batch = g.len() / fan_out;
                if self.wants(input) {
                    let mut dx = vec![T::zero(); batch * fan_in];
                    T::gemm(batch, fan_out, fan_in, T::one(), &g, (fan_out, 1), self.nodes[weight.0].value.data(), (fan_in, 1), T::zero(), &mut dx, (fan_in, 1));
                    acc(grads, input, dx);
                }
                if self.wants(weight) {
                    let mut dw = vec![T::zero(); fan_out * fan_in];
                    T::gemm(fan_out, batch, fan_in, T::one(), &g, (1, fan_out), self.nodes[input.0].value.data(), (fan_in, 1), T::zero(), &mut dw, (fan_in, 1));
                    acc(grads, weight, dw);
                }
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    let mut db = vec![0.0f64; fan_out];
                    for row in g.chunks(fan_out) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v.as_f64());
                    }
                    acc(grads, b, db.into_iter().map(T::from_f64).collect());
                }
            }
            Op::BatchNormTrain { input, gamma, beta, normalized, inv_std } => {
                let (input, gamma, beta) = (*input, *gamma, *beta);
                let (batch, channels, plane) = channel_layout(node.value.shape());
                let sum_g = kernels::channel_sums(&g, batch, channels, plane);
                let gn: Vec<T> = g.iter().zip(normalized).map(|(&a, &b)| a * b).collect();
                let sum_gn = kernels::channel_sums(&gn, batch, channels, plane);
                if self.wants(input) {
                    let count = (batch * plane) as f64;
                    let gam = self.nodes[gamma.0].value.data();
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let scale = gam[c].as_f64() * inv_std[c].as_f64() / count;
                            let (sg, sgn) = (sum_g[c], sum_gn[c]);
                            let off = (b * channels + c) * plane;
                            for i in off..off + plane {
                                let v = count * g[i].as_f64() - sg - normalized[i].as_f64() * sgn;
                                dx[i] = T::from_f64(scale * v);
                            }
                        }
                    }
                    acc(grads, input, dx);
                }
                if self.wants(gamma) {
                    acc(grads, gamma, sum_gn.into_iter().map(T::from_f64).collect());
                }
                if self.wants(beta) {
                    acc(grads, beta, sum_g.into_iter().map(T::from_f64).collect());
                }
            }
            Op::BatchNormEval { input, gamma, beta, normalized, inv_std } => {
                let (input, gamma, beta) = (*input, *gamma, *beta);
                let (batch, channels, plane) = channel_layout(node.value.shape());
                if self.wants(input) {
                    let gam = self.nodes[gamma.0].value.data();
                    let mut dx = g.clone();
                    for b in 0..batch {
                        for c in 0..channels {
                            let s = gam[c] * inv_std[c];
                            dx[(b * channels + c) * plane..][..plane].iter_mut().for_each(|v| *v = *v * s);
                        }
                    }
                    acc(grads, input, dx);
                }
                if self.wants(gamma) {
                    let gn: Vec<T> = g.iter().zip(normalized).map(|(&a, &b)| a * b).collect();
                    let s = kernels::channel_sums(&gn, batch, channels, plane);
                    acc(grads, gamma, s.into_iter().map(T::from_f64).collect());
                }
                if self.wants(beta) {
                    let s = kernels::channel_sums(&g, batch, channels, plane);
                    acc(grads, beta, s.into_iter().map(T::from_f64).collect());
                }
            }
            Op::Relu { input } => {
                let input = *input;
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(&d, &y)| if y > T::zero() { d } else { T::zero() }).collect();
                acc(grads, input, dx);
            }
            Op::MaxPool { input, argmax } => {
                let input = *input;
                let mut dx = vec![T::zero(); self.nodes[input.0].value.numel()];
                for (&src, &d) in argmax.iter().zip(&g) {
                    dx[src] = dx[src] + d;
                }
                acc(grads, input, dx);
            }
            Op::GlobalAvgPool { input } => {
                let input = *input;
                let xs = self.nodes[input.0].value.shape();
                let plane = xs[2] * xs[3];
                let inv = T::from_f64(1.0 / plane as f64);
                let dx = g.iter().flat_map(|&d| std::iter::repeat(d * inv).take(plane)).collect();
                acc(grads, input, dx);
            }
            Op::Reshape { input } => {
                let input = *input;
                acc(grads, input, g);
            }
            Op::Add { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                if self.wants(rhs) {
                    acc(grads, rhs, g.clone());
                }
                if self.wants(lhs) {
                    acc(grads, lhs, g);
                }
            }
            Op::Mul { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                if self.wants(lhs) {
                    let b = self.nodes[rhs.0].value.data();
                    acc(grads, lhs, g.iter().zip(b).map(|(&d, &b)| d * b).collect());
                }
                if self.wants(rhs) {
                    let a = self.nodes[lhs.0].value.data();
                    acc(grads, rhs, g.iter().zip(a).map(|(&d, &a)| d * a).collect());
                }
            }
            Op::Sigmoid { input } => {
                let input = *input;
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                acc(grads, input, dx);
            }
            Op::Sum { input } => {
                let input = *input;
                let n = self.nodes[input.0].value.numel();
                acc(grads, input, vec![g[0]; n]);
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                acc(grads, input, g.iter().map(|&d| d * factor).collect());
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let logits = *logits;
                let batch = targets.len();
                let classes = probs.len() / batch;
                let upstream = g[0].as_f64() / batch as f64;
                let mut dz = probs.clone();
                for (i, row) in dz.chunks_mut(classes).enumerate() {
                    row[targets[i]] = row[targets[i]] - T::one();
                    let s = T::from_f64(upstream * weights[i].as_f64());
                    row.iter_mut().for_each(|v| *v = *v * s);
                }
                acc(grads, logits, dz);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn linear_dot_gradient_is_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[4], &[0.5, -1.5, 2.0, 3.0]));
        let w = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]).requiring_grad());
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.5, -1.5, 2.0, 3.0]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]).requiring_grad());
        let s = tape.scale(w, 3.0);
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[6.0, 6.0]);
        tape.zero_grads();
        assert_eq!(tape.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]).requiring_grad());
        let y = tape.relu(w);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let z = [0.3, -1.2, 2.0, 0.7];
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(t(&[1, 4], &z).requiring_grad());
        let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        tape.backward(loss).unwrap();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        for (i, g) in tape.grad(logits).unwrap().iter().enumerate() {
            let expected = z[i].exp() / denom - if i == 2 { 1.0 } else { 0.0 };
            assert!((g - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_c() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.leaf(Tensor::zeros([3, 10]));
        let loss = tape.softmax_cross_entropy(logits, &[0, 4, 9]).unwrap();
        assert!((tape.value(loss).data()[0] - 10f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_is_stable_for_extreme_logits() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.leaf(Tensor::new([1, 2], vec![1000.0, -1000.0]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        let v = tape.value(loss).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_single_class_and_bad_target() {
        let mut tape = Tape::<f32>::new();
        let one = tape.leaf(Tensor::zeros([2, 1]));
        assert!(tape.softmax_cross_entropy(one, &[0, 0]).is_err());
        let two = tape.leaf(Tensor::zeros([2, 2]));
        assert!(tape.softmax_cross_entropy(two, &[0, 2]).is_err());
    }

    #[test]
    fn conv_shape_arithmetic() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([2, 3, 8, 8]));
        let w = tape.leaf(Tensor::zeros([4, 3, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 8, 8]);
        let bad = tape.leaf(Tensor::zeros([2, 5, 8, 8]));
        let err = tape.conv2d(bad, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("conv2d") && err.contains("[2, 5, 8, 8]"), "{err}");
    }

    #[test]
    fn batchnorm_train_normalizes_per_channel() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 7) % 5) as f64 * 1.3 + i as f64 * 0.1).collect();
        let x = tape.leaf(t(&[2, 3, 2, 2], &data));
        let gamma = tape.leaf(Tensor::full([3], 1.0));
        let beta = tape.leaf(Tensor::zeros([3]));
        let (y, _) = tape.batch_norm_train(x, gamma, beta, 0.0).unwrap();
        let out = tape.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|b| out[(b * 3 + c) * 4..][..4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn batchnorm_train_rejects_batch_of_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 2, 2, 2]));
        let g = tape.leaf(Tensor::full([2], 1.0));
        let b = tape.leaf(Tensor::zeros([2]));
        assert!(tape.batch_norm_train(x, g, b, 1e-5).is_err());
    }
}
