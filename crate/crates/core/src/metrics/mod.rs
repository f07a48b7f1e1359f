//! Group-wise accuracy and analytic parameter/FLOP accounting.

mod eval;
mod flops;

pub use eval::{evaluate, evaluate_predictions, EvalReport, GroupAccuracy};
pub use flops::{
    count_flops, layer_cost, ActiveWeights, CostReport, LayerCost, Phase, BATCHNORM_FLOPS_PER_ELEMENT,
    RELU_FLOPS_PER_ELEMENT, TRAIN_TO_FORWARD_RATIO,
};
