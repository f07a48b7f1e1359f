use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::objective::GroupTag;

/// Accuracy of one label × alignment cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupAccuracy {
    pub label: u8,
    pub group: GroupTag,
    pub correct: usize,
    pub total: usize,
}

impl GroupAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Accuracy over every example of the evaluated set.
    pub overall_acc: f64,
    pub aligned_acc: Option<f64>,
    pub conflicting_acc: Option<f64>,
    /// Minimum over the non-empty label × alignment cells.
    pub worst_group_acc: f64,
    pub groups: Vec<GroupAccuracy>,
}

/// Group-wise accuracies of `predictions` against `data`.
pub fn evaluate_predictions(predictions: &[usize], data: &Dataset) -> Result<EvalReport> {
    if data.count == 0 {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    if predictions.len() != data.count {
        return Err(Error::invalid(format!("{} predictions for {} examples", predictions.len(), data.count)));
    }
    // cells[label][0 = aligned, 1 = conflicting] = (correct, total)
    let mut cells = [[(0usize, 0usize); 2]; 10];
    for (i, &p) in predictions.iter().enumerate() {
        let label = data.labels[i] as usize;
        let cell = &mut cells[label][data.group(i).is_conflicting() as usize];
        cell.0 += (p == label) as usize;
        cell.1 += 1;
    }
    let mut groups = Vec::new();
    for (label, pair) in cells.iter().enumerate() {
        for (g, &(correct, total)) in pair.iter().enumerate() {
            if total > 0 {
                let group = if g == 0 { GroupTag::Aligned } else { GroupTag::Conflicting };
                groups.push(GroupAccuracy { label: label as u8, group, correct, total });
            }
        }
    }
    let pooled = |g: usize| {
        let (c, t) = cells.iter().fold((0, 0), |acc, pair| (acc.0 + pair[g].0, acc.1 + pair[g].1));
        (t > 0).then(|| c as f64 / t as f64)
    };
    let correct: usize = groups.iter().map(|g| g.correct).sum();
    Ok(EvalReport {
        overall_acc: correct as f64 / data.count as f64,
        aligned_acc: pooled(0),
        conflicting_acc: pooled(1),
        worst_group_acc: groups.iter().map(GroupAccuracy::accuracy).fold(f64::INFINITY, f64::min),
        groups,
    })
}

/// Eval-mode accuracy report of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    if data.count == 0 {
        return Err(Error::invalid("cannot evaluate on an empty set"));
    }
    let all: Vec<usize> = (0..data.count).collect();
    let mut predictions = Vec::with_capacity(data.count);
    for chunk in all.chunks(256) {
        predictions.extend(model.predict(&data.batch(chunk)?.images, chunk.len())?);
    }
    evaluate_predictions(&predictions, data)
}
