use crate::error::Result;
use crate::models::ModelSpec;
use crate::numcore::LayerSpec;
use crate::sparsity::DensityAllocation;

/// Batchnorm: subtract mean, scale by inverse std, multiply by gamma, add beta.
pub const BATCHNORM_FLOPS_PER_ELEMENT: u64 = 4;
pub const RELU_FLOPS_PER_ELEMENT: u64 = 1;
/// Backward is costed at twice the forward pass.
pub const TRAIN_TO_FORWARD_RATIO: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Active weight counts of the masked layers; unlisted layers are dense.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActiveWeights {
    /// `(layer index, active weight count)`.
    pub per_layer: Vec<(usize, usize)>,
}

impl ActiveWeights {
    pub fn dense() -> Self {
        Self::default()
    }

    /// `round(density * N)` per layer, matching mask initialization.
    pub fn from_allocation(spec: &ModelSpec, allocation: &DensityAllocation) -> Self {
        let per_layer = allocation
            .per_layer
            .iter()
            .map(|&(layer, d)| {
                let n = spec.layers[layer].param_shapes()[0].iter().product::<usize>();
                (layer, (d * n as f64).round() as usize)
            })
            .collect();
        Self { per_layer }
    }

    fn get(&self, layer: usize) -> Option<usize> {
        self.per_layer.iter().find(|(l, _)| *l == layer).map(|&(_, n)| n)
    }
}

/// Forward cost of one layer for a single example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerCost {
    /// Multiply-adds against the weight tensor (2 FLOPs each).
    pub weight_flops: u64,
    /// Bias adds, normalization, activation, pooling.
    pub other_flops: u64,
}

impl LayerCost {
    pub fn total(&self) -> u64 {
        self.weight_flops + self.other_flops
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub params_total: u64,
    pub params_active: u64,
    pub infer_flops_per_example: u64,
    pub train_flops_per_example: u64,
    pub batch_size: u64,
    /// `train_flops_per_example * batch_size`.
    pub train_flops_per_step: u64,
    /// Filled in by trainers as steps accumulate.
    pub cumulative_train_flops: u64,
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    pub fn flops_per_example(&self, phase: Phase) -> u64 {
        match phase {
            Phase::Train => self.train_flops_per_example,
            Phase::Infer => self.infer_flops_per_example,
        }
    }

    /// This report's per-example cost relative to `dense`.
    pub fn ratio_to(&self, dense: &CostReport, phase: Phase) -> f64 {
        self.flops_per_example(phase) as f64 / dense.flops_per_example(phase) as f64
    }
}

/// Per-example forward cost of `layer` given its input shape (batch 1).
pub fn layer_cost(layer: &LayerSpec, input: &[usize], active: Option<usize>) -> Result<LayerCost> {
    let output = layer.output_shape(input)?;
    let out_elems: u64 = output[1..].iter().product::<usize>() as u64;
    let in_elems: u64 = input[1..].iter().product::<usize>() as u64;
    let cost = match *layer {
        LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, .. } => {
            let positions = (output[2] * output[3]) as u64;
            let weights = active.unwrap_or(out_channels * in_channels * kernel_h * kernel_w) as u64;
            LayerCost { weight_flops: 2 * positions * weights, other_flops: out_elems }
        }
        LayerSpec::Linear { in_features, out_features } => {
            let weights = active.unwrap_or(in_features * out_features) as u64;
            LayerCost { weight_flops: 2 * weights, other_flops: out_features as u64 }
        }
        LayerSpec::BatchNorm2d { .. } => LayerCost { weight_flops: 0, other_flops: BATCHNORM_FLOPS_PER_ELEMENT * out_elems },
        LayerSpec::Relu => LayerCost { weight_flops: 0, other_flops: RELU_FLOPS_PER_ELEMENT * out_elems },
        LayerSpec::MaxPool2d { kernel, .. } => {
            LayerCost { weight_flops: 0, other_flops: (kernel * kernel - 1) as u64 * out_elems }
        }
        LayerSpec::GlobalAvgPool => LayerCost { weight_flops: 0, other_flops: in_elems },
        LayerSpec::Flatten => LayerCost::default(),
    };
    Ok(cost)
}

/// Analytic parameter and FLOP counts for `spec` with the given masks.
pub fn count_flops(spec: &ModelSpec, active: &ActiveWeights, batch_size: usize) -> Result<CostReport> {
    let mut shape: Vec<usize> = std::iter::once(1).chain(spec.input_shape.iter().copied()).collect();
    let mut per_layer = Vec::with_capacity(spec.layers.len());
    let mut params_active = 0u64;
    for (li, layer) in spec.layers.iter().enumerate() {
        let masked = if layer.is_sparsifiable() { active.get(li) } else { None };
        per_layer.push(layer_cost(layer, &shape, masked)?);
        let shapes = layer.param_shapes();
        for (pi, s) in shapes.iter().enumerate() {
            let n = s.iter().product::<usize>();
            params_active += if pi == 0 { masked.unwrap_or(n) } else { n } as u64;
        }
        shape = layer.output_shape(&shape)?;
    }
    let infer: u64 = per_layer.iter().map(LayerCost::total).sum();
    let train = TRAIN_TO_FORWARD_RATIO * infer;
    Ok(CostReport {
        params_total: spec.param_count() as u64,
        params_active,
        infer_flops_per_example: infer,
        train_flops_per_example: train,
        batch_size: batch_size as u64,
        train_flops_per_step: train * batch_size as u64,
        cumulative_train_flops: 0,
        per_layer,
    })
}
