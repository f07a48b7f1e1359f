use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::numcore::Element;
use crate::rng::{keyed, Rng, Stream};

use super::allocation::{allocate_density, AllocationMethod, DensityAllocation, WeightShape};
use super::mask::{init_mask, Growth, SparseLayerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrowthCriterion {
    Gradient,
    Random,
}

impl FromStr for GrowthCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(Self::Gradient),
            "random" => Ok(Self::Random),
            _ => Err(Error::invalid(format!("unknown growth criterion {s:?} (gradient|random)"))),
        }
    }
}

impl fmt::Display for GrowthCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gradient => "gradient",
            Self::Random => "random",
        })
    }
}

/// When and how much of the active set is swapped out. The rate follows a
/// cosine decay from `r0` at step 0 to zero at `t_end`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopologySchedule {
    pub r0: f64,
    pub delta_t: usize,
    pub t_end: usize,
    pub growth: GrowthCriterion,
}

impl TopologySchedule {
    pub fn new(r0: f64, delta_t: usize, t_end: usize, growth: GrowthCriterion) -> Result<Self> {
        if !(0.0..1.0).contains(&r0) {
            return Err(Error::invalid(format!("exploration rate {r0} outside [0, 1)")));
        }
        if delta_t == 0 {
            return Err(Error::invalid("update interval must be at least 1 step"));
        }
        Ok(Self { r0, delta_t, t_end, growth })
    }

    /// Defaults for a run of `total_steps`: r0 = 0.3, updates stop at 75% of
    /// training, interval `total/10` clamped to `[1, 1000]`.
    pub fn for_run(total_steps: usize, growth: GrowthCriterion) -> Self {
        Self { r0: 0.3, delta_t: (total_steps / 10).clamp(1, 1000), t_end: total_steps * 3 / 4, growth }
    }

    pub fn rate(&self, t: usize) -> f64 {
        if t > self.t_end || self.t_end == 0 {
            return if t == 0 { self.r0 } else { 0.0 };
        }
        let r = self.r0 / 2.0 * (1.0 + (PI * t as f64 / self.t_end as f64).cos());
        r.clamp(0.0, self.r0)
    }

    /// True after optimizer step `t` (1-based) when a topology update is due.
    pub fn is_update_step(&self, t: usize) -> bool {
        t >= 1 && t <= self.t_end && t % self.delta_t == 0
    }
}

/// What one topology update changed in one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerUpdate {
    pub layer: usize,
    pub param: usize,
    pub pruned: Vec<usize>,
    pub grown: Vec<usize>,
    pub restored: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub step: usize,
    pub rate: f64,
    pub layers: Vec<LayerUpdate>,
}

/// Masks for every sparsified weight tensor of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseNet {
    pub layers: Vec<SparseLayerState>,
}

pub fn weight_shapes<T: Element>(model: &Model<T>) -> Vec<WeightShape> {
    model
        .sparsifiable()
        .iter()
        .map(|s| WeightShape::new(s.layer, model.params()[s.param].shape().to_vec()))
        .collect()
}

impl SparseNet {
    /// Allocates per-layer densities, draws random masks and zeroes the
    /// masked-out weights of `model`.
    pub fn init<T: Element>(
        model: &mut Model<T>,
        method: AllocationMethod,
        density: f64,
        seed: u64,
    ) -> Result<(Self, DensityAllocation)> {
        let allocation = allocate_density(&weight_shapes(model), method, density)?;
        let mut layers = Vec::new();
        for (sp, &(_, d)) in model.sparsifiable().iter().zip(&allocation.per_layer) {
            let shape = model.params()[sp.param].shape().to_vec();
            let numel = shape.iter().product();
            let mut rng = keyed(seed, Stream::Mask, sp.layer as u64);
            let mask = init_mask(numel, d, &mut rng).map_err(|e| Error::Mask(format!("layer {}: {e}", sp.layer)))?;
            layers.push(SparseLayerState::new(sp.layer, sp.param, shape, mask)?);
        }
        let net = Self { layers };
        net.apply(model);
        Ok((net, allocation))
    }

    pub fn apply<T: Element>(&self, model: &mut Model<T>) {
        for s in &self.layers {
            s.apply(model.params_mut()[s.param].data_mut());
        }
    }

    /// Zeroes gradient entries outside the masks.
    pub fn mask_grads<T: Element>(&self, model: &mut Model<T>) {
        for s in &self.layers {
            if let Some(g) = model.params_mut()[s.param].grad_mut() {
                s.apply(g);
            }
        }
    }

    pub fn nnz(&self) -> usize {
        self.layers.iter().map(SparseLayerState::nnz).sum()
    }

    pub fn numel(&self) -> usize {
        self.layers.iter().map(|s| s.mask.len()).sum()
    }

    pub fn density(&self) -> f64 {
        self.nnz() as f64 / self.numel() as f64
    }

    pub fn masks(&self) -> Vec<(usize, &[bool])> {
        self.layers.iter().map(|s| (s.param, s.mask.as_slice())).collect()
    }

    pub fn mask_for(&self, param: usize) -> Option<&[bool]> {
        self.layers.iter().find(|s| s.param == param).map(|s| s.mask.as_slice())
    }
}

/// One prune-and-grow cycle over every sparsified layer.
///
/// `dense_grads` holds one gradient per layer of `net` (same order),
/// computed with masks ignored; required for gradient growth. Random growth
/// draws from a stream keyed by `seed` and `t`.
pub fn topology_update<T: Element>(
    net: &mut SparseNet,
    model: &mut Model<T>,
    schedule: &TopologySchedule,
    t: usize,
    dense_grads: Option<&[Vec<f64>]>,
    seed: u64,
) -> Result<UpdateReport> {
    if t % schedule.delta_t != 0 || t > schedule.t_end {
        return Err(Error::invalid(format!(
            "step {t} is not an update step (interval {}, last {})",
            schedule.delta_t, schedule.t_end
        )));
    }
    if schedule.growth == GrowthCriterion::Gradient {
        match dense_grads {
            None => return Err(Error::Mask("gradient growth needs dense gradients".into())),
            Some(g) if g.len() != net.layers.len() => {
                return Err(Error::Mask(format!("{} dense gradients for {} layers", g.len(), net.layers.len())))
            }
            _ => {}
        }
    }
    let rate = schedule.rate(t);
    let mut rng: Rng = keyed(seed, Stream::Growth, t as u64);
    let mut report = UpdateReport { step: t, rate, layers: Vec::new() };
    for (li, state) in net.layers.iter_mut().enumerate() {
        let weights = model.params_mut()[state.param].data_mut();
        let pruned = state.prune(weights, rate)?;
        let growth = match schedule.growth {
            GrowthCriterion::Gradient => Growth::Gradient(&dense_grads.unwrap()[li]),
            GrowthCriterion::Random => Growth::Random(&mut rng),
        };
        let grown = state.grow(weights, &pruned, growth)?;
        debug_assert_eq!(state.nnz(), state.target_nnz);
        report.layers.push(LayerUpdate {
            layer: state.layer,
            param: state.param,
            pruned: pruned.iter().map(|p| p.index).collect(),
            grown: grown.grown,
            restored: grown.restored,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;

    #[test]
    fn cosine_endpoints() {
        let s = TopologySchedule::new(0.3, 100, 750, GrowthCriterion::Gradient).unwrap();
        assert_eq!(s.rate(0), 0.3);
        assert!(s.rate(750).abs() < 1e-15);
        assert_eq!(s.rate(751), 0.0);
        assert!((s.rate(375) - 0.15).abs() < 1e-12);
        assert!(!s.is_update_step(0));
        assert!(s.is_update_step(700));
        assert!(!s.is_update_step(800));
    }

    #[test]
    fn default_schedule_for_run() {
        let s = TopologySchedule::for_run(3000, GrowthCriterion::Gradient);
        assert_eq!((s.delta_t, s.t_end), (300, 2250));
        assert_eq!(TopologySchedule::for_run(5, GrowthCriterion::Random).delta_t, 1);
    }

    #[test]
    fn init_zeroes_masked_weights() {
        let mut model = Model::init(ModelSpec::simple_cnn_with_width(8, 10).unwrap(), 0).unwrap();
        let (net, alloc) = SparseNet::init(&mut model, AllocationMethod::Erk, 0.1, 0).unwrap();
        assert_eq!(net.layers.len(), 4);
        assert_eq!(alloc.per_layer.len(), 4);
        for s in &net.layers {
            let w = model.params()[s.param].data();
            assert!(s.mask.iter().zip(w).all(|(&m, &v)| m || v == 0.0));
        }
    }

    #[test]
    fn gradient_update_requires_gradients() {
        let mut model = Model::init(ModelSpec::mlp(&[6, 5, 3]).unwrap(), 0).unwrap();
        let (mut net, _) = SparseNet::init(&mut model, AllocationMethod::Uniform, 0.5, 0).unwrap();
        let s = TopologySchedule::new(0.3, 1, 10, GrowthCriterion::Gradient).unwrap();
        assert!(topology_update(&mut net, &mut model, &s, 1, None, 0).is_err());
        let s = TopologySchedule::new(0.3, 2, 10, GrowthCriterion::Random).unwrap();
        assert!(topology_update(&mut net, &mut model, &s, 3, None, 0).is_err());
        let report = topology_update(&mut net, &mut model, &s, 2, None, 0).unwrap();
        assert!(report.layers.iter().all(|l| l.pruned.len() == l.grown.len() + l.restored.len()));
    }
}
