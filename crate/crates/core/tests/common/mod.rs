//! Independent reference implementations shared by the oracle tests and the
//! acceptance suite. Nothing here calls the code it checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rest_core::numcore::{Tape, Tensor, Var};
use rest_core::objective::{GroupTag, GroupWeights};

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape.to_vec(), &(0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>()).unwrap()
}

/// Values in `[-1, 1]` that stay at least `gap` away from zero and from
/// each other, so kinks (relu, max) sit outside the finite-difference
/// stencil.
pub fn separated(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut slots: Vec<usize> = (1..=(2.0 / gap) as usize / 2).collect();
    for i in (1..slots.len()).rev() {
        slots.swap(i, rng.gen_range(0..=i));
    }
    let data: Vec<f64> = slots[..n]
        .iter()
        .map(|&k| if rng.gen_bool(0.5) { k as f64 * gap } else { -(k as f64) * gap } * 0.999)
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Worst norm-wise relative error `|g_analytic - g_fd| / max(|g_analytic|,
/// |g_fd|)` over all inputs, with central differences of step [`FD_STEP`].
pub fn grad_check(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().requiring_grad())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().zip(inputs).map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec)).collect();

    let eval = |probe: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).data()[0]
    };
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut probe = inputs.to_vec();
            probe[k].data_mut()[i] = input.data()[i] + FD_STEP;
            let up = eval(&probe);
            probe[k].data_mut()[i] = input.data()[i] - FD_STEP;
            let down = eval(&probe);
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic[k].iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic[k]).max(norm(&numeric));
        if scale > 1e-12 {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    worst
}

/// `sum(y * r)` for a fixed random `r`, turning any tensor into a scalar
/// with a generic upstream gradient.
pub fn probe_sum(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Var {
    let r = tape.leaf(r.clone());
    let prod = tape.mul(y, r).unwrap();
    tape.sum(prod)
}

/// One named gradient-check instance and its worst relative error.
pub struct GradCase {
    pub name: String,
    pub error: f64,
}

/// Randomized small instances covering every layer kind, the gate used by
/// mask probing, and both losses.
pub fn gradient_cases(seeds: std::ops::Range<u64>) -> Vec<GradCase> {
    let mut out = Vec::new();
    for seed in seeds {
        let mut r = rng(seed);
        let mut push = |name: &str, error: f64| out.push(GradCase { name: format!("{name}/seed{seed}"), error });

        // conv, padded and strided
        let stride = 1 + (seed as usize % 2);
        let (x, w, b) = (uniform(&mut r, &[2, 2, 5, 5], -1.0, 1.0), uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5), uniform(&mut r, &[3], -0.5, 0.5));
        let ho = (5 + 2 - 3) / stride + 1;
        let probe = uniform(&mut r, &[2, 3, ho, ho], -1.0, 1.0);
        push("conv2d", grad_check(&[x, w, b], &|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, 1).unwrap();
            probe_sum(t, y, &probe)
        }));

        let (x, w, b) = (uniform(&mut r, &[3, 5], -1.0, 1.0), uniform(&mut r, &[4, 5], -0.5, 0.5), uniform(&mut r, &[4], -0.5, 0.5));
        let probe = uniform(&mut r, &[3, 4], -1.0, 1.0);
        push("linear", grad_check(&[x, w, b], &|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
            probe_sum(t, y, &probe)
        }));

        let (x, g, bb) = (uniform(&mut r, &[3, 2, 3, 3], -2.0, 2.0), uniform(&mut r, &[2], 0.5, 1.5), uniform(&mut r, &[2], -0.5, 0.5));
        let probe = uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
        push("batchnorm_train", grad_check(&[x, g, bb], &|t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
            probe_sum(t, y, &probe)
        }));

        let x = separated(&mut r, &[2, 3, 4], 0.01);
        let probe = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
        push("relu", grad_check(&[x], &|t, v| {
            let y = t.relu(v[0]);
            probe_sum(t, y, &probe)
        }));

        let x = separated(&mut r, &[2, 2, 4, 4], 0.01);
        let probe = uniform(&mut r, &[2, 2, 2, 2], -1.0, 1.0);
        push("max_pool2d", grad_check(&[x], &|t, v| {
            let y = t.max_pool2d(v[0], 2, 2).unwrap();
            probe_sum(t, y, &probe)
        }));

        let x = uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
        let probe = uniform(&mut r, &[2, 3, 1, 1], -1.0, 1.0);
        push("global_avg_pool", grad_check(&[x], &|t, v| {
            let y = t.global_avg_pool(v[0]).unwrap();
            probe_sum(t, y, &probe)
        }));

        let x = uniform(&mut r, &[2, 2, 2, 3], -1.0, 1.0);
        let probe = uniform(&mut r, &[2, 12], -1.0, 1.0);
        push("flatten", grad_check(&[x], &|t, v| {
            let y = t.flatten(v[0]).unwrap();
            probe_sum(t, y, &probe)
        }));

        let (logit, w) = (uniform(&mut r, &[3, 4], -2.0, 2.0), uniform(&mut r, &[3, 4], -1.0, 1.0));
        let probe = uniform(&mut r, &[3, 4], -1.0, 1.0);
        push("sigmoid_gate", grad_check(&[logit, w], &|t, v| {
            let s = t.sigmoid(v[0]);
            let y = t.mul(s, v[1]).unwrap();
            probe_sum(t, y, &probe)
        }));

        let batch = 6;
        let logits = uniform(&mut r, &[batch, 5], -3.0, 3.0);
        let targets: Vec<usize> = (0..batch).map(|_| r.gen_range(0..5)).collect();
        let ce_targets = targets.clone();
        push("cross_entropy", grad_check(&[logits.clone()], &|t, v| t.softmax_cross_entropy(v[0], &ce_targets).unwrap()));

        let tags: Vec<GroupTag> = (0..batch).map(|i| if i % 3 == 0 { GroupTag::Conflicting } else { GroupTag::Aligned }).collect();
        let weights = GroupWeights::new(r.gen_range(1.0..80.0)).unwrap();
        push("reweighted_loss", grad_check(&[logits], &|t, v| {
            rest_core::objective::reweighted_loss(t, v[0], &targets, &tags, &weights).unwrap()
        }));
    }
    out
}

/// Indices of the `k` smallest `|w|` among active entries, ties broken by
/// lower index, via a full sort.
pub fn prune_by_full_sort(weights: &[f64], mask: &[bool], k: usize) -> Vec<usize> {
    let mut active: Vec<usize> = (0..weights.len()).filter(|&i| mask[i]).collect();
    active.sort_by(|&a, &b| weights[a].abs().total_cmp(&weights[b].abs()).then(a.cmp(&b)));
    let mut chosen = active[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// ERK scale of a weight shape: `sum(dims) / prod(dims)`.
pub fn erk_scale(shape: &[usize]) -> f64 {
    shape.iter().sum::<usize>() as f64 / shape.iter().product::<usize>() as f64
}

/// Per-layer densities `min(1, c * scale_i)` with `c` found by bisection so
/// the active-weight total equals `density * total`.
pub fn scalar_budget(shapes: &[Vec<usize>], density: f64) -> Vec<f64> {
    let sizes: Vec<f64> = shapes.iter().map(|s| s.iter().product::<usize>() as f64).collect();
    let scales: Vec<f64> = shapes.iter().map(|s| erk_scale(s)).collect();
    let budget = density * sizes.iter().sum::<f64>();
    let used = |c: f64| sizes.iter().zip(&scales).map(|(n, s)| n * (c * s).min(1.0)).sum::<f64>();
    let (mut lo, mut hi) = (0.0, 1.0);
    while used(hi) < budget {
        hi *= 2.0;
        if hi > 1e300 {
            break;
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if used(mid) < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    scales.iter().map(|s| (hi * s).min(1.0)).collect()
}

/// Counts the scalar operations of `y = W x + b` for one example by walking
/// the loops: a multiply and an add per active weight, one add per bias.
pub fn enumerate_linear_ops(out_features: usize, in_features: usize, active: &dyn Fn(usize, usize) -> bool) -> u64 {
    let mut ops = 0;
    for o in 0..out_features {
        for i in 0..in_features {
            if active(o, i) {
                ops += 2;
            }
        }
        ops += 1;
    }
    ops
}

/// Same walk for an unpadded, stride-1 single-channel convolution.
pub fn enumerate_conv_ops(height: usize, width: usize, kernel: usize, active: &dyn Fn(usize, usize) -> bool) -> u64 {
    let mut ops = 0;
    for oy in 0..=height - kernel {
        for ox in 0..=width - kernel {
            let _ = (oy, ox);
            for ky in 0..kernel {
                for kx in 0..kernel {
                    if active(ky, kx) {
                        ops += 2;
                    }
                }
            }
            ops += 1;
        }
    }
    ops
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `n` fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let choose = |n: usize, k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

/// Runs `cycles` randomized prune/grow cycles on single-layer masks, each
/// followed by masked Adam steps, and reports the first violated invariant.
pub fn sparsity_cycles(cycles: usize, seed: u64) -> Result<(), String> {
    use rest_core::numcore::{AdamConfig, AdamState};
    use rest_core::sparsity::{Growth, SparseLayerState};

    let mut r = rng(seed);
    for cycle in 0..cycles {
        let len = r.gen_range(8..300);
        let nnz = r.gen_range(1..=len);
        let mut mask = vec![false; len];
        for i in rand::seq::index::sample(&mut r, len, nnz) {
            mask[i] = true;
        }
        let mut state = SparseLayerState::new(0, 0, vec![len], mask).map_err(|e| e.to_string())?;
        let mut param = uniform(&mut r, &[len], -1.0, 1.0).requiring_grad();
        // Ties on purpose: quantize some magnitudes.
        for v in param.data_mut().iter_mut().step_by(3) {
            *v = (*v * 4.0).round() / 4.0;
        }
        state.apply(param.data_mut());
        let mut adam = AdamState::new(AdamConfig { lr: 0.05, ..AdamConfig::default() }, [&param]);

        let rate = r.gen_range(0.0..0.95);
        let before = state.nnz();
        let k = (rate * state.target_nnz as f64).round() as usize;
        let k = k.min(before);
        let expected = prune_by_full_sort(param.data(), &state.mask, k);
        let weights_before = param.data().to_vec();
        let pruned = state.prune(param.data_mut(), rate).map_err(|e| e.to_string())?;
        let mut got: Vec<usize> = pruned.iter().map(|p| p.index).collect();
        got.sort_unstable();
        if got != expected {
            return Err(format!("cycle {cycle}: pruned {got:?}, full sort gives {expected:?}"));
        }
        if pruned.iter().any(|p| p.value != weights_before[p.index]) {
            return Err(format!("cycle {cycle}: pruned values misreported"));
        }
        let grads: Vec<f64> = (0..len).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut grow_rng = rest_core::rng::keyed(seed, rest_core::rng::Stream::Growth, cycle as u64);
        let grown = if cycle % 2 == 0 {
            state.grow(param.data_mut(), &pruned, Growth::Gradient(&grads))
        } else {
            state.grow(param.data_mut(), &pruned, Growth::Random(&mut grow_rng))
        }
        .map_err(|e| e.to_string())?;
        if state.nnz() != before || state.nnz() != state.target_nnz {
            return Err(format!("cycle {cycle}: nnz {} after update, expected {before}", state.nnz()));
        }
        if let Some(&i) = grown.grown.iter().find(|&&i| param.data()[i] != 0.0) {
            return Err(format!("cycle {cycle}: grown weight {i} is {}", param.data()[i]));
        }
        if grown.grown.iter().any(|i| pruned.iter().any(|p| p.index == *i)) {
            return Err(format!("cycle {cycle}: regrew a just-pruned weight"));
        }
        for _ in 0..3 {
            let g: Vec<f64> = (0..len).map(|i| if state.mask[i] { r.gen_range(-1.0..1.0) } else { 0.0 }).collect();
            param.clear_grad();
            param.accumulate_grad(&g);
            adam.step(std::slice::from_mut(&mut param)).map_err(|e| e.to_string())?;
            state.apply(param.data_mut());
        }
        if let Some(i) = (0..len).find(|&i| !state.mask[i] && param.data()[i] != 0.0) {
            return Err(format!("cycle {cycle}: masked weight {i} is {} after optimizer steps", param.data()[i]));
        }
    }
    Ok(())
}
