//! Training losses: mean cross-entropy and its group-reweighted variant,
//! where bias-conflicting examples count `beta` times.

use std::fmt;

use crate::error::{Error, Result};
use crate::numcore::{Element, Tape, Tensor, Var};

/// Whether an example follows the spurious attribute–label correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupTag {
    Aligned,
    Conflicting,
}

impl GroupTag {
    pub fn is_conflicting(self) -> bool {
        self == GroupTag::Conflicting
    }
}

impl fmt::Display for GroupTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupTag::Aligned => "aligned",
            GroupTag::Conflicting => "conflicting",
        })
    }
}

/// Per-example loss multipliers: `beta` for conflicting examples, 1 otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupWeights {
    beta: f64,
}

impl GroupWeights {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta >= 1.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("reweighting factor must be finite and >= 1, got {beta}")));
        }
        Ok(Self { beta })
    }

    pub fn unit() -> Self {
        Self { beta: 1.0 }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn majority_weight(&self) -> f64 {
        1.0
    }

    pub fn weight(&self, tag: GroupTag) -> f64 {
        match tag {
            GroupTag::Aligned => 1.0,
            GroupTag::Conflicting => self.beta,
        }
    }

    /// Default factor for a training set with the given conflicting ratio:
    /// 0.5% → 10, 1% → 30, 2% → 50, 5% → 80. Other ratios have no default.
    pub fn default_beta(conflict_ratio: f64) -> Option<f64> {
        const TABLE: [(f64, f64); 4] = [(0.005, 10.0), (0.01, 30.0), (0.02, 50.0), (0.05, 80.0)];
        TABLE.iter().find(|(r, _)| (r - conflict_ratio).abs() < 1e-9).map(|&(_, b)| b)
    }
}

/// Mean softmax cross-entropy.
pub fn erm_loss<T: Element>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, targets)
}

/// `(1/B) * sum_i w_i * CE_i` with `w_i` from `weights`; the sum is not
/// renormalized by the mean weight.
pub fn reweighted_loss<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    tags: &[GroupTag],
    weights: &GroupWeights,
) -> Result<Var> {
    if tags.len() != targets.len() {
        return Err(Error::invalid(format!("{} group tags for {} targets", tags.len(), targets.len())));
    }
    let w: Vec<T> = tags.iter().map(|&g| T::from_f64(weights.weight(g))).collect();
    tape.weighted_cross_entropy(logits, targets, &w)
}

/// [`reweighted_loss`] evaluated outside a tape.
pub fn reweighted_loss_value<T: Element>(
    logits: &Tensor<T>,
    targets: &[usize],
    tags: &[GroupTag],
    weights: &GroupWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let loss = reweighted_loss(&mut tape, z, targets, tags, weights)?;
    Ok(tape.value(loss).data()[0].as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::softmax_cross_entropy;

    fn logits() -> Tensor<f64> {
        Tensor::from_f64([3, 4], &[0.5, -1.0, 2.0, 0.1, 3.0, 0.0, -2.0, 1.0, -0.3, 0.3, 0.7, -0.7]).unwrap()
    }

    /// Direct scalar evaluation: per-row log-sum-exp minus target logit.
    fn ce_row(row: &[f64], t: usize) -> f64 {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[t]
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let z = Tensor::<f64>::zeros([2, 10]);
        let mut tape = Tape::new();
        let v = tape.leaf(z);
        let l = erm_loss(&mut tape, v, &[3, 7]).unwrap();
        assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn unit_beta_matches_erm_bitwise() {
        let z = logits().cast::<f32>();
        let targets = [2, 0, 1];
        let tags = [GroupTag::Aligned, GroupTag::Conflicting, GroupTag::Conflicting];
        let erm = softmax_cross_entropy(&z, &targets).unwrap();
        let rw = reweighted_loss_value(&z, &targets, &tags, &GroupWeights::unit()).unwrap();
        assert_eq!(erm.to_bits(), (rw as f32).to_bits());
    }

    #[test]
    fn single_conflicting_example_scales() {
        let z = Tensor::<f64>::from_f64([1, 3], &[0.2, -0.4, 1.1]).unwrap();
        let c = ce_row(&[0.2, -0.4, 1.1], 1);
        let rw = reweighted_loss_value(&z, &[1], &[GroupTag::Conflicting], &GroupWeights::new(30.0).unwrap()).unwrap();
        assert!((rw - 30.0 * c).abs() < 1e-12);
    }

    #[test]
    fn mixed_batch_matches_scalar_reimplementation() {
        let z = logits();
        let targets = [2, 1, 3];
        let tags = [GroupTag::Conflicting, GroupTag::Aligned, GroupTag::Conflicting];
        let expected = (50.0 * ce_row(&z.data()[0..4], 2) + ce_row(&z.data()[4..8], 1) + 50.0 * ce_row(&z.data()[8..], 3)) / 3.0;
        let got = reweighted_loss_value(&z, &targets, &tags, &GroupWeights::new(50.0).unwrap()).unwrap();
        assert!((got - expected).abs() < 1e-6 * expected.abs().max(1.0));
    }

    #[test]
    fn default_beta_table() {
        assert_eq!(GroupWeights::default_beta(0.005), Some(10.0));
        assert_eq!(GroupWeights::default_beta(0.01), Some(30.0));
        assert_eq!(GroupWeights::default_beta(0.02), Some(50.0));
        assert_eq!(GroupWeights::default_beta(0.05), Some(80.0));
        assert_eq!(GroupWeights::default_beta(0.03), None);
        assert!(GroupWeights::new(0.5).is_err());
    }

    #[test]
    fn tag_count_must_match() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(logits());
        assert!(reweighted_loss(&mut tape, z, &[0, 1, 2], &[GroupTag::Aligned], &GroupWeights::unit()).is_err());
    }
}
