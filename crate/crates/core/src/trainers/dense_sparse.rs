use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{count_flops, evaluate, ActiveWeights};
use crate::models::Model;
use crate::numcore::{AdamState, Mode, Tape, Var};
use crate::objective::{erm_loss, reweighted_loss, GroupWeights};
use crate::sparsity::{topology_update, GrowthCriterion, SparseNet, TopologySchedule};

use super::{BatchSampler, EvalPoint, EvalSink, SparsityConfig, TrainData, TrainLoopConfig, TrainOutcome};

/// Mask allocation plus the prune-and-grow schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseSetup {
    pub sparsity: SparsityConfig,
    pub schedule: TopologySchedule,
}

fn loss_var(tape: &mut Tape, logits: Var, batch: &Batch, weights: Option<&GroupWeights>) -> Result<Var> {
    match weights {
        Some(w) => reweighted_loss(tape, logits, &batch.targets, &batch.tags, w),
        None => erm_loss(tape, logits, &batch.targets),
    }
}

/// Gradients of the training objective on `batch` for every masked weight
/// tensor of `net`, with masks ignored. Batchnorm uses batch statistics
/// without touching the running averages.
pub fn dense_gradients(model: &mut Model, net: &SparseNet, batch: &Batch, weights: Option<&GroupWeights>) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let x = tape.leaf(model.shape_input(batch.images.clone())?);
    let (logits, vars) = model.forward(&mut tape, x, Mode::Probe)?;
    let loss = loss_var(&mut tape, logits, batch, weights)?;
    tape.backward(loss)?;
    Ok(net
        .layers
        .iter()
        .map(|s| tape.grad(vars[s.param]).map(|g| g.iter().map(|&v| v as f64).collect()).unwrap_or_else(|| vec![0.0; s.mask.len()]))
        .collect())
}

/// Everything a loop run needs besides the model.
pub(super) struct LoopSpec<'a> {
    pub cfg: &'a TrainLoopConfig,
    pub data: TrainData<'a>,
    pub weights: Option<&'a GroupWeights>,
    pub schedule: Option<&'a TopologySchedule>,
    /// Added to reported step numbers.
    pub step_offset: usize,
    pub flops_offset: u64,
}

/// The shared optimization loop. With `net`, gradients are masked before
/// each Adam step, weights re-masked after it, and topology updates run
/// when `spec.schedule` says so.
pub(super) fn run_loop(
    model: &mut Model,
    mut net: Option<&mut SparseNet>,
    spec: &LoopSpec<'_>,
    sink: EvalSink<'_>,
) -> Result<TrainOutcome> {
    let cfg = spec.cfg;
    cfg.validate()?;
    let train_head = spec.data.train.head(cfg.train_eval_examples);
    let mut sampler = BatchSampler::new(spec.data.train.count, cfg.batch_size, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam, model.params().iter());
    let active = match net.as_deref() {
        Some(n) => ActiveWeights { per_layer: n.layers.iter().map(|s| (s.layer, s.target_nnz)).collect() },
        None => ActiveWeights::dense(),
    };
    let step_flops = count_flops(model.spec(), &active, cfg.batch_size)?.train_flops_per_step;
    let dense_step_flops = count_flops(model.spec(), &ActiveWeights::dense(), cfg.batch_size)?.train_flops_per_step;
    let mut flops = spec.flops_offset;
    let mut outcome = TrainOutcome::default();
    let (mut loss_sum, mut loss_steps) = (0.0f64, 0usize);

    for t in 1..=cfg.total_steps {
        let batch = spec.data.train.batch(sampler.next_batch())?;
        let mut tape = Tape::new();
        let x = tape.leaf(model.shape_input(batch.images.clone())?);
        let (logits, vars) = model.forward(&mut tape, x, Mode::Train)?;
        let loss = loss_var(&mut tape, logits, &batch, spec.weights)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: spec.step_offset + t, value });
        }
        tape.backward(loss)?;
        model.zero_grads();
        model.absorb_grads(&tape, &vars);
        drop(tape);
        if let Some(n) = net.as_deref() {
            n.mask_grads(model);
        }
        adam.step(model.params_mut()).map_err(|e| match e {
            Error::NonFiniteGradient { param, index, value } => {
                Error::Training(format!("step {}: non-finite gradient in parameter {param}[{index}] = {value}", spec.step_offset + t))
            }
            other => other,
        })?;
        flops += step_flops;
        loss_sum += value;
        loss_steps += 1;

        if let Some(n) = net.as_deref_mut() {
            n.apply(model);
            if let Some(schedule) = spec.schedule.filter(|s| s.is_update_step(t) && s.rate(t) > 0.0) {
                let grads = match schedule.growth {
                    GrowthCriterion::Gradient => {
                        flops += dense_step_flops;
                        Some(dense_gradients(model, n, &batch, spec.weights)?)
                    }
                    GrowthCriterion::Random => None,
                };
                let report = topology_update(n, model, schedule, t, grads.as_deref(), cfg.seed)?;
                for l in &report.layers {
                    adam.reset_moments(l.param, &l.grown);
                }
                outcome.updates.push(report);
            }
        }

        model.zero_grads();
        if t % cfg.eval_every == 0 || t == cfg.total_steps {
            let point = eval_point(model, net.as_deref(), &train_head, spec.data.test, spec.step_offset + t, loss_sum / loss_steps as f64, flops)?;
            (loss_sum, loss_steps) = (0.0, 0);
            sink(&point);
            outcome.points.push(point);
        }
    }
    outcome.net = net.map(|n| n.clone());
    Ok(outcome)
}

pub(super) fn eval_point(
    model: &Model,
    net: Option<&SparseNet>,
    train_head: &Dataset,
    test: &Dataset,
    step: usize,
    train_loss: f64,
    cumulative_train_flops: u64,
) -> Result<EvalPoint> {
    let train = evaluate(model, train_head)?;
    let test_report = evaluate(model, test)?;
    let (density, params_active) = match net {
        Some(n) => (n.density(), (model.param_count() - n.numel() + n.nnz()) as u64),
        None => (1.0, model.param_count() as u64),
    };
    Ok(EvalPoint {
        step,
        density,
        train_loss,
        train_acc: train.overall_acc,
        unbiased_acc: test_report.overall_acc,
        conflicting_acc: test_report.conflicting_acc.unwrap_or(f64::NAN),
        worst_group_acc: test_report.worst_group_acc,
        params_active,
        cumulative_train_flops,
    })
}

/// Dense training; `weights` switches from plain to reweighted loss.
pub fn train_erm(
    model: &mut Model,
    data: TrainData<'_>,
    cfg: &TrainLoopConfig,
    weights: Option<&GroupWeights>,
    sink: EvalSink<'_>,
) -> Result<TrainOutcome> {
    let spec = LoopSpec { cfg, data, weights, schedule: None, step_offset: 0, flops_offset: 0 };
    run_loop(model, None, &spec, sink)
}

/// Sparse training with the reweighted loss and periodic prune-and-grow.
pub fn train_rest(
    model: &mut Model,
    data: TrainData<'_>,
    cfg: &TrainLoopConfig,
    setup: &SparseSetup,
    weights: &GroupWeights,
    sink: EvalSink<'_>,
) -> Result<TrainOutcome> {
    let (mut net, _) = SparseNet::init(model, setup.sparsity.method, setup.sparsity.density, cfg.seed)?;
    let spec = LoopSpec { cfg, data, weights: Some(weights), schedule: Some(&setup.schedule), step_offset: 0, flops_offset: 0 };
    run_loop(model, Some(&mut net), &spec, sink)
}

/// [`train_rest`] with unit weights: random growth gives SET-style
/// training, gradient growth RigL-style training.
pub fn train_sparse_unweighted(
    model: &mut Model,
    data: TrainData<'_>,
    cfg: &TrainLoopConfig,
    setup: &SparseSetup,
    sink: EvalSink<'_>,
) -> Result<TrainOutcome> {
    train_rest(model, data, cfg, setup, &GroupWeights::unit(), sink)
}
