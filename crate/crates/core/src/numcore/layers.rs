use std::fmt;

use crate::error::{Error, Result};

use super::{BatchStats, Element, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left alone.
    Probe,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm2d {
        features: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding } => write!(
                f,
                "conv2d({in_channels}->{out_channels}, {kernel_h}x{kernel_w}, stride {stride}, pad {padding})"
            ),
            LayerSpec::Linear { in_features, out_features } => write!(f, "linear({in_features}->{out_features})"),
            LayerSpec::BatchNorm2d { features } => write!(f, "batchnorm2d({features})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool2d { kernel, stride } => write!(f, "maxpool2d({kernel}, stride {stride})"),
            LayerSpec::GlobalAvgPool => f.write_str("global_avg_pool"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d { in_channels, out_channels, kernel_h: 3, kernel_w: 3, stride: 1, padding: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, .. } => {
                in_channels >= 1 && out_channels >= 1 && kernel_h >= 1 && kernel_w >= 1 && stride >= 1
            }
            LayerSpec::Linear { in_features, out_features } => in_features >= 1 && out_features >= 1,
            LayerSpec::BatchNorm2d { features } => features >= 1,
            LayerSpec::MaxPool2d { kernel, stride } => kernel >= 1 && stride >= 1,
            LayerSpec::Relu | LayerSpec::GlobalAvgPool | LayerSpec::Flatten => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid layer extents: {self}")))
        }
    }

    /// Shapes of the trainable tensors in the order `forward` expects them.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, .. } => {
                vec![vec![out_channels, in_channels, kernel_h, kernel_w], vec![out_channels]]
            }
            LayerSpec::Linear { in_features, out_features } => vec![vec![out_features, in_features], vec![out_features]],
            LayerSpec::BatchNorm2d { features } => vec![vec![features], vec![features]],
            _ => Vec::new(),
        }
    }

    /// Whether the layer's first parameter is a weight matrix eligible for
    /// masking.
    pub fn is_sparsifiable(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. })
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Output shape for a given input shape, or a shape error naming the layer.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: String| Error::shape(self.to_string(), expected, input);
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride, padding } => {
                if input.len() != 4 || input[1] != in_channels {
                    return Err(mismatch(format!("[B, {in_channels}, H, W]")));
                }
                let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
                if h < kernel_h || w < kernel_w {
                    return Err(mismatch(format!("padded spatial extent >= {kernel_h}x{kernel_w}")));
                }
                Ok(vec![input[0], out_channels, (h - kernel_h) / stride + 1, (w - kernel_w) / stride + 1])
            }
            LayerSpec::Linear { in_features, out_features } => {
                if input.len() != 2 || input[1] != in_features {
                    return Err(mismatch(format!("[B, {in_features}]")));
                }
                Ok(vec![input[0], out_features])
            }
            LayerSpec::BatchNorm2d { features } => {
                if input.len() < 2 || input[1] != features {
                    return Err(mismatch(format!("[B, {features}, ...]")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { kernel, stride } => {
                if input.len() != 4 || input[2] < kernel || input[3] < kernel {
                    return Err(mismatch(format!("[B, C, H>={kernel}, W>={kernel}]")));
                }
                Ok(vec![input[0], input[1], (input[2] - kernel) / stride + 1, (input[3] - kernel) / stride + 1])
            }
            LayerSpec::GlobalAvgPool => {
                if input.len() != 4 {
                    return Err(mismatch("[B, C, H, W]".into()));
                }
                Ok(vec![input[0], input[1], 1, 1])
            }
            LayerSpec::Flatten => Ok(vec![input[0], input[1..].iter().product::<usize>().max(1)]),
        }
    }
}

/// Running mean/variance carried by a batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(features: usize) -> Self {
        Self { mean: vec![T::zero(); features], var: vec![T::one(); features] }
    }

    pub fn update(&mut self, batch: &BatchStats) {
        let keep = 1.0 - BN_MOMENTUM;
        for (m, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *m = T::from_f64(keep * m.as_f64() + BN_MOMENTUM * b);
        }
        for (v, &b) in self.var.iter_mut().zip(&batch.var) {
            *v = T::from_f64(keep * v.as_f64() + BN_MOMENTUM * b);
        }
    }
}

/// Runs one layer on the tape. `params` are the layer's parameter handles in
/// [`LayerSpec::param_shapes`] order.
pub fn forward<T: Element>(
    tape: &mut Tape<T>,
    layer: &LayerSpec,
    params: &[Var],
    running: Option<&mut RunningStats<T>>,
    input: Var,
    mode: Mode,
) -> Result<Var> {
    let in_shape = tape.value(input).shape().to_vec();
    layer.output_shape(&in_shape)?;
    let expected = layer.param_shapes();
    if params.len() != expected.len() {
        return Err(Error::invalid(format!("{layer} takes {} parameters, got {}", expected.len(), params.len())));
    }
    for (v, shape) in params.iter().zip(&expected) {
        if tape.value(*v).shape() != shape.as_slice() {
            return Err(Error::shape(format!("{layer} parameter"), format!("{shape:?}"), tape.value(*v).shape()));
        }
    }
    match *layer {
        LayerSpec::Conv2d { stride, padding, .. } => tape.conv2d(input, params[0], Some(params[1]), stride, padding),
        LayerSpec::Linear { .. } => tape.linear(input, params[0], Some(params[1])),
        LayerSpec::BatchNorm2d { .. } => {
            let running = running.ok_or_else(|| Error::invalid(format!("{layer} needs running statistics")))?;
            match mode {
                Mode::Train | Mode::Probe => {
                    if in_shape[0] < 2 {
                        return Err(Error::shape(layer.to_string(), "batch size >= 2 in train mode", &in_shape));
                    }
                    let (out, stats) = tape.batch_norm_train(input, params[0], params[1], BN_EPS)?;
                    if mode == Mode::Train {
                        running.update(&stats);
                    }
                    Ok(out)
                }
                Mode::Eval => tape.batch_norm_eval(input, params[0], params[1], &running.mean, &running.var, BN_EPS),
            }
        }
        LayerSpec::Relu => Ok(tape.relu(input)),
        LayerSpec::MaxPool2d { kernel, stride } => tape.max_pool2d(input, kernel, stride),
        LayerSpec::GlobalAvgPool => tape.global_avg_pool(input),
        LayerSpec::Flatten => tape.flatten(input),
    }
}

/// Convenience for tests: runs a layer on fresh leaves built from tensors.
pub fn forward_tensors<T: Element>(
    layer: &LayerSpec,
    params: &[Tensor<T>],
    running: Option<&mut RunningStats<T>>,
    input: Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.leaf(input);
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let y = forward(&mut tape, layer, &vars, running, x, mode)?;
    Ok(tape.take(y))
}
