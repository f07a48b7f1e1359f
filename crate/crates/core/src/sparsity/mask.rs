use rand::seq::index;

use crate::error::{Error, Result};
use crate::numcore::Element;
use crate::rng::Rng;

/// Exactly `round(density * len)` ones, placed uniformly without replacement.
pub fn init_mask(len: usize, density: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Mask(format!("density {density} outside (0, 1]")));
    }
    let nnz = (density * len as f64).round() as usize;
    if nnz == 0 {
        return Err(Error::Mask(format!(
            "density {density} leaves no active weights among {len}; the layer would be dead"
        )));
    }
    let mut mask = vec![false; len];
    if nnz >= len {
        mask.fill(true);
    } else {
        index::sample(rng, len, nnz).into_iter().for_each(|i| mask[i] = true);
    }
    Ok(mask)
}

/// Mask bookkeeping for one sparsified weight tensor. The weights themselves
/// live in the model; operations borrow them by slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseLayerState {
    /// Layer index in the model.
    pub layer: usize,
    /// Parameter slot of the weight tensor in the model.
    pub param: usize,
    pub shape: Vec<usize>,
    pub mask: Vec<bool>,
    pub target_nnz: usize,
}

/// A weight deactivated by [`SparseLayerState::prune`], with its value
/// before pruning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pruned {
    pub index: usize,
    pub value: f64,
}

pub enum Growth<'a> {
    /// Activate the largest `|gradient|` candidates.
    Gradient(&'a [f64]),
    Random(&'a mut Rng),
}

/// Result of one grow step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grown {
    /// Newly activated indices, initialized to zero.
    pub grown: Vec<usize>,
    /// Just-pruned indices put back because the candidate pool ran short.
    pub restored: Vec<usize>,
}

impl SparseLayerState {
    pub fn new(layer: usize, param: usize, shape: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if mask.len() != numel {
            return Err(Error::Mask(format!("mask of {} entries for weight shape {shape:?}", mask.len())));
        }
        let target_nnz = mask.iter().filter(|&&m| m).count();
        if target_nnz == 0 {
            return Err(Error::Mask(format!("layer {layer}: empty mask")));
        }
        Ok(Self { layer, param, shape, mask, target_nnz })
    }

    pub fn nnz(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn density(&self) -> f64 {
        self.nnz() as f64 / self.mask.len() as f64
    }

    /// Zeroes every weight outside the mask.
    pub fn apply<T: Element>(&self, weights: &mut [T]) {
        for (w, &m) in weights.iter_mut().zip(&self.mask) {
            if !m {
                *w = T::zero();
            }
        }
    }

    /// Deactivates the `round(rate * target_nnz)` active weights of smallest
    /// magnitude (ties: lowest index). Returned in ascending magnitude order.
    pub fn prune<T: Element>(&mut self, weights: &mut [T], rate: f64) -> Result<Vec<Pruned>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Mask(format!("prune rate {rate} outside [0, 1)")));
        }
        self.check_len(weights.len())?;
        let k = (rate * self.target_nnz as f64).round() as usize;
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut active: Vec<(f64, usize)> =
            (0..self.mask.len()).filter(|&i| self.mask[i]).map(|i| (weights[i].as_f64().abs(), i)).collect();
        let k = k.min(active.len());
        if k < active.len() {
            active.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            active.truncate(k);
        }
        active.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(active
            .into_iter()
            .map(|(_, i)| {
                let value = weights[i].as_f64();
                self.mask[i] = false;
                weights[i] = T::zero();
                Pruned { index: i, value }
            })
            .collect())
    }

    /// Activates `pruned.len()` weights among those inactive before the
    /// prune. Grown weights start at zero.
    pub fn grow<T: Element>(&mut self, weights: &mut [T], pruned: &[Pruned], growth: Growth<'_>) -> Result<Grown> {
        self.check_len(weights.len())?;
        let k = pruned.len();
        if k == 0 {
            return Ok(Grown::default());
        }
        let mut excluded = vec![false; self.mask.len()];
        pruned.iter().for_each(|p| excluded[p.index] = true);
        let pool: Vec<usize> = (0..self.mask.len()).filter(|&i| !self.mask[i] && !excluded[i]).collect();
        let take = k.min(pool.len());
        let mut grown: Vec<usize> = match growth {
            Growth::Gradient(grad) => {
                if grad.len() != self.mask.len() {
                    return Err(Error::Mask(format!(
                        "layer {}: dense gradient has {} entries, weight has {}",
                        self.layer,
                        grad.len(),
                        self.mask.len()
                    )));
                }
                let mut scored: Vec<(f64, usize)> = pool.iter().map(|&i| (grad[i].abs(), i)).collect();
                let by_score = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
                if take < scored.len() {
                    scored.select_nth_unstable_by(take, by_score);
                    scored.truncate(take);
                }
                scored.sort_by(by_score);
                scored.into_iter().map(|(_, i)| i).collect()
            }
            Growth::Random(rng) => index::sample(rng, pool.len(), take).into_iter().map(|j| pool[j]).collect(),
        };
        grown.sort_unstable();
        for &i in &grown {
            self.mask[i] = true;
            weights[i] = T::zero();
        }
        let mut restored = Vec::new();
        for p in pruned.iter().rev().take(k - take) {
            self.mask[p.index] = true;
            weights[p.index] = T::from_f64(p.value);
            restored.push(p.index);
        }
        Ok(Grown { grown, restored })
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.mask.len() {
            return Err(Error::Mask(format!("layer {}: {} weights for a mask of {}", self.layer, len, self.mask.len())));
        }
        Ok(())
    }
}
