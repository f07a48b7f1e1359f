//! Network builders and the parameter container the trainers operate on.

mod checkpoint;

use std::ops::Range;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numcore::{self, Element, LayerSpec, Mode, RunningStats, Tape, Tensor, Var};
use crate::rng::{self, Stream};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

/// An ordered layer stack plus the per-example input shape it expects.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub id: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ModelSpec {
    /// Three 3x3 conv blocks (conv, batchnorm, relu) of widths 64/128/256,
    /// 2x2 max-pooling between blocks, global average pooling, linear head.
    pub fn simple_cnn(num_classes: usize) -> Result<Self> {
        Self::simple_cnn_with_width(64, num_classes)
    }

    /// [`Self::simple_cnn`] with block widths `w, 2w, 4w`.
    pub fn simple_cnn_with_width(base_width: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        if base_width == 0 {
            return Err(Error::invalid("conv width must be positive"));
        }
        let (w1, w2, w3) = (base_width, 2 * base_width, 4 * base_width);
        let layers = vec![
            LayerSpec::conv3x3(3, w1),
            LayerSpec::BatchNorm2d { features: w1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
            LayerSpec::conv3x3(w1, w2),
            LayerSpec::BatchNorm2d { features: w2 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { kernel: 2, stride: 2 },
            LayerSpec::conv3x3(w2, w3),
            LayerSpec::BatchNorm2d { features: w3 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: w3, out_features: num_classes },
        ];
        let spec = Self { id: format!("simple_cnn:{base_width}:{num_classes}"), input_shape: vec![3, 28, 28], layers, num_classes };
        spec.validate()?;
        Ok(spec)
    }

    /// Linear layers of the given widths with ReLU in between.
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid("an MLP needs at least an input and an output width"));
        }
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Linear { in_features: pair[0], out_features: pair[1] });
        }
        let id = format!("mlp:{}", widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-"));
        let spec = Self { id, input_shape: vec![widths[0]], layers, num_classes: *widths.last().unwrap() };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks that layer shapes compose and end in `[B, num_classes]`.
    pub fn validate(&self) -> Result<()> {
        let mut shape: Vec<usize> = std::iter::once(2).chain(self.input_shape.iter().copied()).collect();
        for layer in &self.layers {
            layer.validate()?;
            shape = layer.output_shape(&shape)?;
        }
        if shape != [2, self.num_classes] {
            return Err(Error::shape(self.id.clone(), format!("output [B, {}]", self.num_classes), &shape));
        }
        Ok(())
    }

    /// Per-layer output shapes for a batch of `batch` inputs.
    pub fn activation_shapes(&self, batch: usize) -> Result<Vec<Vec<usize>>> {
        let mut shape: Vec<usize> = std::iter::once(batch).chain(self.input_shape.iter().copied()).collect();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }
}

/// Identifies a maskable weight tensor: its layer and its parameter slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SparseParam {
    pub layer: usize,
    pub param: usize,
}

/// Parameters and batchnorm buffers for a [`ModelSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Element = f32> {
    spec: ModelSpec,
    params: Vec<Tensor<T>>,
    running: Vec<Option<RunningStats<T>>>,
    slots: Vec<Range<usize>>,
}

impl Model<f32> {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases,
    /// unit batchnorm scale.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let mut model = Self::zeroed(spec);
        for (li, layer) in model.spec.layers.clone().iter().enumerate() {
            let slot = model.slots[li].clone();
            match *layer {
                LayerSpec::Conv2d { in_channels, kernel_h, kernel_w, .. } => {
                    let bound = (6.0 / (in_channels * kernel_h * kernel_w) as f64).sqrt();
                    model.params[slot.start].data_mut().iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound) as f32);
                }
                LayerSpec::Linear { in_features, .. } => {
                    let bound = (6.0 / in_features as f64).sqrt();
                    model.params[slot.start].data_mut().iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound) as f32);
                }
                LayerSpec::BatchNorm2d { .. } => model.params[slot.start].data_mut().fill(1.0),
                _ => {}
            }
        }
        Ok(model)
    }
}

impl<T: Element> Model<T> {
    /// All-zero parameters (batchnorm scales included).
    pub fn zeroed(spec: ModelSpec) -> Self {
        let mut params = Vec::new();
        let mut running = Vec::new();
        let mut slots = Vec::new();
        for layer in &spec.layers {
            let start = params.len();
            for shape in layer.param_shapes() {
                params.push(Tensor::zeros(shape).requiring_grad());
            }
            slots.push(start..params.len());
            running.push(match *layer {
                LayerSpec::BatchNorm2d { features } => Some(RunningStats::new(features)),
                _ => None,
            });
        }
        Self { spec, params, running, slots }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[Option<RunningStats<T>>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [Option<RunningStats<T>>] {
        &mut self.running
    }

    /// Parameter indices belonging to layer `layer`.
    pub fn layer_params(&self, layer: usize) -> Range<usize> {
        self.slots[layer].clone()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Conv and linear weight tensors; biases and batchnorm stay dense.
    pub fn sparsifiable(&self) -> Vec<SparseParam> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_sparsifiable())
            .map(|(li, _)| SparseParam { layer: li, param: self.slots[li].start })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Pushes every parameter onto `tape` as a trainable leaf.
    pub fn load_params(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone().requiring_grad())).collect()
    }

    /// Runs the network with explicit parameter handles, which lets callers
    /// substitute derived tensors (e.g. a gated weight) for any parameter.
    pub fn forward_with(&mut self, tape: &mut Tape<T>, params: &[Var], input: Var, mode: Mode) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!("model has {} parameters, got {}", self.params.len(), params.len())));
        }
        let mut x = input;
        for (li, layer) in self.spec.layers.iter().enumerate() {
            let vars = &params[self.slots[li].clone()];
            match mode {
                Mode::Eval => {
                    let mut stats = self.running[li].clone();
                    x = numcore::forward(tape, layer, vars, stats.as_mut(), x, mode)?;
                }
                _ => x = numcore::forward(tape, layer, vars, self.running[li].as_mut(), x, mode)?,
            }
        }
        Ok(x)
    }

    /// Loads parameters and runs the network; returns logits and the
    /// parameter handles for [`Self::absorb_grads`].
    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<(Var, Vec<Var>)> {
        let vars = self.load_params(tape);
        let logits = self.forward_with(tape, &vars, input, mode)?;
        Ok((logits, vars))
    }

    /// Adds the tape gradients of `vars` into the parameters.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, vars: &[Var]) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(*v) {
                p.accumulate_grad(g);
            }
        }
    }

    /// Views a `[B, ...]` batch under this model's per-example input shape,
    /// e.g. flattening images for an MLP.
    pub fn shape_input(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        let shape = batch.shape();
        if shape[1..] == self.spec.input_shape[..] {
            return Ok(batch);
        }
        let per_example: usize = self.spec.input_shape.iter().product();
        if shape[1..].iter().product::<usize>() != per_example {
            return Err(Error::shape(self.spec.id.clone(), format!("[B, {:?}]", self.spec.input_shape), shape));
        }
        let target: Vec<usize> = std::iter::once(shape[0]).chain(self.spec.input_shape.iter().copied()).collect();
        Tensor::new(target, batch.into_data())
    }

    /// Eval-mode logits for a batch.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(self.shape_input(images.clone())?);
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone().map(|v| v))).collect();
        let mut y = x;
        for (li, layer) in self.spec.layers.iter().enumerate() {
            let mut stats = self.running[li].clone();
            y = numcore::forward(&mut tape, layer, &vars[self.slots[li].clone()], stats.as_mut(), y, Mode::Eval)?;
        }
        Ok(tape.take(y))
    }

    /// Eval-mode argmax predictions, computed `chunk` examples at a time.
    pub fn predict(&self, images: &Tensor<T>, chunk: usize) -> Result<Vec<usize>> {
        let n = images.shape()[0];
        let chunk = chunk.max(1);
        let mut preds = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let logits = self.logits(&images.slice_outer(start, end)?)?;
            for row in logits.data().chunks(self.spec.num_classes) {
                preds.push(argmax(row));
            }
            start = end;
        }
        Ok(preds)
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running: self
                .running
                .iter()
                .map(|r| {
                    r.as_ref().map(|r| RunningStats {
                        mean: r.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        var: r.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    })
                })
                .collect(),
            slots: self.slots.clone(),
        }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_cnn_maps_images_to_logits() {
        let model = Model::init(ModelSpec::simple_cnn(10).unwrap(), 0).unwrap();
        let x = Tensor::full([4, 3, 28, 28], 0.5f32);
        let y = model.logits(&x).unwrap();
        assert_eq!(y.shape(), &[4, 10]);
    }

    #[test]
    fn simple_cnn_parameter_count_by_hand() {
        let conv = |cin: usize, cout: usize| cin * cout * 9 + cout;
        let bn = |c: usize| 2 * c;
        let expected = conv(3, 64) + bn(64) + conv(64, 128) + bn(128) + conv(128, 256) + bn(256) + 256 * 10 + 10;
        assert_eq!(expected, 374_282);
        let spec = ModelSpec::simple_cnn(10).unwrap();
        assert_eq!(spec.param_count(), expected);
        assert_eq!(Model::<f32>::zeroed(spec).param_count(), expected);
    }

    #[test]
    fn same_seed_same_bits() {
        let a = Model::init(ModelSpec::simple_cnn(10).unwrap(), 3).unwrap();
        let b = Model::init(ModelSpec::simple_cnn(10).unwrap(), 3).unwrap();
        let c = Model::init(ModelSpec::simple_cnn(10).unwrap(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn mlp_shape_and_single_layer_definition() {
        let model = Model::init(ModelSpec::mlp(&[4, 3, 2]).unwrap(), 1).unwrap();
        let y = model.logits(&Tensor::full([1, 4], 1.0f32)).unwrap();
        assert_eq!(y.shape(), &[1, 2]);

        let single = Model::init(ModelSpec::mlp(&[3, 2]).unwrap(), 9).unwrap();
        let mut single = single.cast::<f64>();
        single.params_mut()[1].data_mut().copy_from_slice(&[0.25, -0.5]);
        let x = [1.0, -2.0, 0.5];
        let out = single.logits(&Tensor::from_f64([1, 3], &x).unwrap()).unwrap();
        let w = single.params()[0].data();
        for o in 0..2 {
            let expected: f64 = (0..3).map(|i| w[o * 3 + i] * x[i]).sum::<f64>() + [0.25, -0.5][o];
            assert!((out.data()[o] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_and_zero_head_give_uniform_softmax() {
        let mut model = Model::init(ModelSpec::simple_cnn(10).unwrap(), 0).unwrap();
        let head = model.layer_params(model.spec().layers.len() - 1);
        for p in head {
            model.params_mut()[p].data_mut().fill(0.0);
        }
        let logits = model.logits(&Tensor::zeros([2, 3, 28, 28])).unwrap();
        let loss = numcore::softmax_cross_entropy(&logits, &[0, 1]).unwrap();
        assert!((loss - 10f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = Model::init(ModelSpec::simple_cnn_with_width(4, 10).unwrap(), 0).unwrap();
        let x = Tensor::new([3, 3, 28, 28], (0..3 * 3 * 784).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        assert_eq!(model.logits(&x).unwrap(), model.logits(&x).unwrap());
    }

    #[test]
    fn sparsifiable_params_are_conv_and_linear_weights() {
        let model = Model::<f32>::zeroed(ModelSpec::simple_cnn(10).unwrap());
        let sp = model.sparsifiable();
        assert_eq!(sp.iter().map(|s| s.layer).collect::<Vec<_>>(), vec![0, 4, 8, 13]);
        assert_eq!(model.params()[sp[1].param].shape(), &[128, 64, 3, 3]);
    }
}
