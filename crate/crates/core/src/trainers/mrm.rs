use crate::error::{Error, Result};
use crate::metrics::{count_flops, ActiveWeights};
use crate::models::Model;
use crate::numcore::{AdamConfig, AdamState, Mode, Tape, Tensor, Var};
use crate::objective::erm_loss;
use crate::sparsity::{SparseLayerState, SparseNet};

use super::dense_sparse::{run_loop, LoopSpec};
use super::{BatchSampler, EvalSink, TrainData, TrainLoopConfig, TrainOutcome};

/// Pretrain dense, learn a soft mask on frozen weights, threshold it, rewind
/// the surviving weights to their initial values and retrain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MrmConfig {
    pub pretrain_steps: usize,
    pub probe_steps: usize,
    /// Weight of the `sum(logits)` sparsity penalty.
    pub alpha: f64,
    /// Number of probe + retrain repetitions.
    pub rounds: usize,
}

/// Starting value of every mask logit; positive, so the untrained mask
/// keeps every weight.
pub const MASK_LOGIT_INIT: f32 = 1.0;

impl MrmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_steps == 0 || self.probe_steps == 0 || self.rounds == 0 {
            return Err(Error::invalid("MRM step counts and rounds must be positive"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("sparsity penalty {} must be finite and >= 0", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    /// Mask logits per sparsifiable weight tensor.
    pub logits: Vec<Tensor>,
    /// `logit > 0`, restricted to the prior mask.
    pub masks: Vec<Vec<bool>>,
    /// Sum of all mask logits after each probe step.
    pub logit_sums: Vec<f64>,
}

impl ProbeOutcome {
    pub fn density(&self) -> f64 {
        let on: usize = self.masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
        on as f64 / self.masks.iter().map(Vec::len).sum::<usize>() as f64
    }
}

/// Learns mask logits on frozen weights by minimizing
/// `CE(sigmoid(logits) * w) + alpha * sum(logits)`.
pub fn mrm_probe(
    model: &mut Model,
    prior: Option<&SparseNet>,
    data: TrainData<'_>,
    cfg: &TrainLoopConfig,
    mrm: &MrmConfig,
) -> Result<ProbeOutcome> {
    let sparse = model.sparsifiable();
    let mut logits: Vec<Tensor> = sparse
        .iter()
        .map(|s| Tensor::full(model.params()[s.param].shape().to_vec(), MASK_LOGIT_INIT).requiring_grad())
        .collect();
    let prior_masks: Vec<Option<Vec<f32>>> = sparse
        .iter()
        .map(|s| prior.and_then(|p| p.mask_for(s.param)).map(|m| m.iter().map(|&b| b as u8 as f32).collect()))
        .collect();
    let mut adam = AdamState::new(AdamConfig { weight_decay: 0.0, ..cfg.adam }, logits.iter());
    let mut sampler = BatchSampler::new(data.train.count, cfg.batch_size, cfg.seed)?;
    let mut logit_sums = Vec::with_capacity(mrm.probe_steps);
    let alpha = mrm.alpha as f32;

    for step in 1..=mrm.probe_steps {
        let batch = data.train.batch(sampler.next_batch())?;
        let mut tape = Tape::new();
        let x = tape.leaf(model.shape_input(batch.images.clone())?);
        let mut vars: Vec<Var> = model
            .params()
            .iter()
            .map(|p| {
                let mut frozen = p.clone();
                frozen.set_requires_grad(false);
                tape.leaf(frozen)
            })
            .collect();
        let mut logit_vars = Vec::with_capacity(sparse.len());
        for (li, s) in sparse.iter().enumerate() {
            let pi = tape.leaf(logits[li].clone());
            logit_vars.push(pi);
            let mut gate = tape.sigmoid(pi);
            if let Some(m) = &prior_masks[li] {
                let m = tape.leaf(Tensor::new(logits[li].shape().to_vec(), m.clone())?);
                gate = tape.mul(gate, m)?;
            }
            vars[s.param] = tape.mul(gate, vars[s.param])?;
        }
        let out = model.forward_with(&mut tape, &vars, x, Mode::Probe)?;
        let mut loss = erm_loss(&mut tape, out, &batch.targets)?;
        for &pi in &logit_vars {
            let s = tape.sum(pi);
            let penalty = tape.scale(s, alpha);
            loss = tape.add(loss, penalty)?;
        }
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, value });
        }
        tape.backward(loss)?;
        for (t, &pi) in logits.iter_mut().zip(&logit_vars) {
            t.clear_grad();
            if let Some(g) = tape.grad(pi) {
                t.accumulate_grad(g);
            }
        }
        adam.step(&mut logits)?;
        logit_sums.push(logits.iter().flat_map(|t| t.data()).map(|&v| v as f64).sum());
    }

    let masks = logits
        .iter()
        .zip(&prior_masks)
        .map(|(t, prior)| {
            t.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v > 0.0 && prior.as_ref().map_or(true, |m| m[i] > 0.0))
                .collect()
        })
        .collect();
    Ok(ProbeOutcome { logits, masks, logit_sums })
}

/// The initial parameters `w0` with the thresholded masks applied.
pub fn mrm_restart(w0: &Model, masks: &[Vec<bool>]) -> Result<(Model, SparseNet)> {
    let mut model = w0.clone();
    let sparse = model.sparsifiable();
    if masks.len() != sparse.len() {
        return Err(Error::invalid(format!("{} masks for {} sparsifiable layers", masks.len(), sparse.len())));
    }
    if masks.iter().all(|m| !m.contains(&true)) {
        return Err(Error::Training("mask probe removed every weight; lower the sparsity penalty".into()));
    }
    let mut layers = Vec::with_capacity(sparse.len());
    for (s, m) in sparse.iter().zip(masks) {
        if !m.contains(&true) {
            return Err(Error::Training(format!(
                "mask probe removed every weight of layer {}; lower the sparsity penalty",
                s.layer
            )));
        }
        layers.push(SparseLayerState::new(s.layer, s.param, model.params()[s.param].shape().to_vec(), m.clone())?);
    }
    let net = SparseNet { layers };
    net.apply(&mut model);
    Ok((model, net))
}

/// Runs all three stages. `cfg.total_steps` is ignored; stage lengths come
/// from `mrm`. Reported steps run continuously across stages.
pub fn train_mrm(
    model: &mut Model,
    data: TrainData<'_>,
    cfg: &TrainLoopConfig,
    mrm: &MrmConfig,
    sink: EvalSink<'_>,
) -> Result<TrainOutcome> {
    mrm.validate()?;
    let w0 = model.clone();
    let stage = |steps: usize| TrainLoopConfig { total_steps: steps, eval_every: cfg.eval_every.min(steps), ..cfg.clone() };
    let pretrain_cfg = stage(mrm.pretrain_steps);
    let dense_step_flops = count_flops(model.spec(), &ActiveWeights::dense(), cfg.batch_size)?.train_flops_per_step;

    let spec = LoopSpec { cfg: &pretrain_cfg, data, weights: None, schedule: None, step_offset: 0, flops_offset: 0 };
    let mut outcome = run_loop(model, None, &spec, sink)?;
    let mut step = mrm.pretrain_steps;
    let mut flops = dense_step_flops * mrm.pretrain_steps as u64;
    let mut net: Option<SparseNet> = None;

    for _ in 0..mrm.rounds {
        let probe = mrm_probe(model, net.as_ref(), data, &pretrain_cfg, mrm)?;
        step += mrm.probe_steps;
        flops += dense_step_flops * mrm.probe_steps as u64;
        let (restarted, mut masks) = mrm_restart(&w0, &probe.masks)?;
        *model = restarted;
        let spec = LoopSpec { cfg: &pretrain_cfg, data, weights: None, schedule: None, step_offset: step, flops_offset: flops };
        let retrain = run_loop(model, Some(&mut masks), &spec, sink)?;
        step += mrm.pretrain_steps;
        flops = retrain.points.last().map_or(flops, |p| p.cumulative_train_flops);
        outcome.points.extend(retrain.points);
        net = Some(masks);
    }
    outcome.net = net;
    Ok(outcome)
}
