mod common;

use common::*;
use proptest::prelude::*;
use rest_core::data::{colorize, glyph_template, make_unbiased_test, synth_glyphs, synth_glyphs_with, GlyphOptions, GLYPH_SIZE};
use rest_core::metrics::{count_flops, layer_cost, ActiveWeights};
use rest_core::models::{Model, ModelSpec};
use rest_core::numcore::LayerSpec;
use rest_core::objective::GroupWeights;
use rest_core::sparsity::{allocate_density, topology_update, AllocationMethod, GrowthCriterion, SparseNet, TopologySchedule, WeightShape};
use rest_core::trainers::dense_gradients;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn analytic_gradients_match_finite_differences() {
    let cases = gradient_cases(0..3);
    assert!(cases.len() >= 20);
    for c in &cases {
        assert!(c.error <= GRAD_REL_TOL, "{}: relative error {}", c.name, c.error);
    }
}

#[test]
fn randomized_prune_grow_cycles_keep_invariants() {
    sparsity_cycles(100, 42).unwrap();
}

#[test]
fn linear_flops_match_enumeration() {
    let lin = LayerSpec::Linear { in_features: 4, out_features: 2 };
    let dense = layer_cost(&lin, &[1, 4], None).unwrap();
    assert_eq!(dense.total(), enumerate_linear_ops(2, 4, &|_, _| true));
    assert_eq!(dense.total(), 18);
    // Three of eight weights active.
    let active = |o: usize, i: usize| (o * 4 + i) % 3 == 0;
    let sparse = layer_cost(&lin, &[1, 4], Some(3)).unwrap();
    assert_eq!(sparse.total(), enumerate_linear_ops(2, 4, &active));
    assert_eq!(sparse.weight_flops * 8, dense.weight_flops * 3);
}

#[test]
fn conv_flops_match_enumeration() {
    let conv = LayerSpec::Conv2d { in_channels: 1, out_channels: 1, kernel_h: 3, kernel_w: 3, stride: 1, padding: 0 };
    let dense = layer_cost(&conv, &[1, 1, 4, 4], None).unwrap();
    assert_eq!(dense.total(), enumerate_conv_ops(4, 4, 3, &|_, _| true));
    assert_eq!(dense.total(), 76);
    let active = |ky: usize, kx: usize| ky == kx || ky == 0;
    let sparse = layer_cost(&conv, &[1, 1, 4, 4], Some(5)).unwrap();
    assert_eq!(sparse.total(), enumerate_conv_ops(4, 4, 3, &active));
    assert_eq!(sparse.weight_flops * 9, dense.weight_flops * 5);
}

#[test]
fn model_level_weight_term_scales_with_density() {
    let spec = ModelSpec::simple_cnn_with_width(8, 10).unwrap();
    let mut model: Model = Model::init(spec.clone(), 0).unwrap();
    let (net, allocation) = SparseNet::init(&mut model, AllocationMethod::Erk, 0.1, 0).unwrap();
    let active = ActiveWeights::from_allocation(&spec, &allocation);
    let dense = count_flops(&spec, &ActiveWeights::dense(), 1).unwrap();
    let sparse = count_flops(&spec, &active, 1).unwrap();
    for s in &net.layers {
        let (d, sp) = (dense.per_layer[s.layer].weight_flops, sparse.per_layer[s.layer].weight_flops);
        assert_eq!(sp * s.mask.len() as u64, d * s.nnz() as u64, "layer {}", s.layer);
    }
}

fn shape_set() -> impl Strategy<Value = Vec<Vec<usize>>> {
    let conv = (1usize..64, 1usize..64, prop_oneof![Just(1usize), Just(3), Just(5)]).prop_map(|(o, i, k)| vec![o, i, k, k]);
    let linear = (1usize..200, 1usize..200).prop_map(|(o, i)| vec![o, i]);
    prop::collection::vec(prop_oneof![conv, linear], 1..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn erk_meets_budget_like_scalar_solver(shapes in shape_set(), density in 0.01f64..1.0) {
        let ws: Vec<WeightShape> = shapes.iter().enumerate().map(|(i, s)| WeightShape::new(i, s.clone())).collect();
        let alloc = allocate_density(&ws, AllocationMethod::Erk, density).unwrap();
        let oracle = scalar_budget(&shapes, density);
        let total: f64 = ws.iter().map(|w| w.numel() as f64).sum();
        let used: f64 = alloc.per_layer.iter().zip(&ws).map(|((_, d), w)| d * w.numel() as f64).sum();
        prop_assert!((used - density * total).abs() <= 1e-6 * density * total);
        for ((_, d), o) in alloc.per_layer.iter().zip(&oracle) {
            prop_assert!(*d <= 1.0);
            prop_assert!((d - o).abs() <= 1e-6 * o.max(1e-12), "{} vs {}", d, o);
        }
    }

    #[test]
    fn prune_matches_full_sort(weights in prop::collection::vec(-4i32..4, 2..80), rate in 0.0f64..0.99, seed in 0u64..1000) {
        let w: Vec<f64> = weights.iter().map(|&v| v as f64 * 0.25).collect();
        let mut r = rng(seed);
        let mask: Vec<bool> = (0..w.len()).map(|i| i == 0 || rand::Rng::gen_bool(&mut r, 0.6)).collect();
        let mut state = rest_core::sparsity::SparseLayerState::new(0, 0, vec![w.len()], mask.clone()).unwrap();
        let mut live = w.clone();
        state.apply(&mut live);
        let k = ((rate * state.target_nnz as f64).round() as usize).min(state.nnz());
        let expected = prune_by_full_sort(&live, &mask, k);
        let mut got: Vec<usize> = state.prune(&mut live, rate).unwrap().iter().map(|p| p.index).collect();
        got.sort_unstable();
        prop_assert_eq!(got, expected);
    }
}

#[test]
fn topology_update_changes_loss_only_through_pruning() {
    let (train, _) = rest_core::data::BiasedDatasetSpec {
        source: rest_core::data::DataSource::SynthGlyphs,
        n_train: 64,
        n_test: 10,
        conflict_ratio: 0.05,
        seed: 3,
    }
    .build()
    .unwrap();
    let batch = train.batch(&(0..32).collect::<Vec<_>>()).unwrap();
    let mut model: Model = Model::init(ModelSpec::simple_cnn_with_width(4, 10).unwrap(), 1).unwrap();
    let (mut net, _) = SparseNet::init(&mut model, AllocationMethod::Erk, 0.3, 1).unwrap();
    let w = GroupWeights::new(30.0).unwrap();
    let loss = |model: &Model| {
        let logits = model.logits(&batch.images).unwrap();
        rest_core::objective::reweighted_loss_value(&logits, &batch.targets, &batch.tags, &w).unwrap()
    };
    let schedule = TopologySchedule::new(0.3, 1, 10, GrowthCriterion::Gradient).unwrap();
    let grads = dense_gradients(&mut model, &net, &batch, Some(&w)).unwrap();
    let mut pruned_only = model.clone();
    let report = topology_update(&mut net, &mut model, &schedule, 1, Some(&grads), 0).unwrap();
    assert!(report.layers.iter().any(|l| !l.grown.is_empty()));
    for l in &report.layers {
        for i in l.pruned.iter().filter(|i| !l.restored.contains(i)) {
            pruned_only.params_mut()[l.param].data_mut()[*i] = 0.0;
        }
    }
    assert!(model == pruned_only, "weights differ beyond the pruned set");
    assert_eq!(loss(&model), loss(&pruned_only));
}

#[test]
fn test_colors_are_uniform_by_chi_square() {
    let (gray, labels) = synth_glyphs(1000, 7);
    let test = make_unbiased_test(&gray, &labels, 7).unwrap();
    let mut counts = [0usize; 10];
    for &c in &test.colors {
        counts[c as usize] += 1;
    }
    let expected = test.count as f64 / 10.0;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat}, p = {p}");
}

#[test]
fn conflicting_examples_cover_every_label() {
    let (gray, labels) = synth_glyphs(100, 2);
    let train = colorize(&gray, &labels, 0.05, 2).unwrap();
    assert_eq!(train.conflicting_count(), 50);
    let mut seen = [false; 10];
    for i in 0..train.count {
        if train.group(i).is_conflicting() {
            assert_ne!(train.colors[i], train.labels[i]);
            seen[train.labels[i] as usize] = true;
        }
    }
    assert!(seen.iter().filter(|&&s| s).count() >= 9);
}

/// Nearest template under every shift the generator can apply.
fn match_template(image: &[f32]) -> usize {
    let n = GLYPH_SIZE as i32;
    let jitter = GlyphOptions::default().jitter;
    let mut best = (f64::INFINITY, 0);
    for class in 0..10 {
        let t = glyph_template(class);
        for dy in -jitter..=jitter {
            for dx in -jitter..=jitter {
                let mut d = 0.0f64;
                for y in 0..n {
                    for x in 0..n {
                        let (sy, sx) = (y - dy, x - dx);
                        let tv = if (0..n).contains(&sy) && (0..n).contains(&sx) { t[(sy * n + sx) as usize] } else { 0.0 };
                        d += (image[(y * n + x) as usize] - tv).powi(2) as f64;
                    }
                }
                if d < best.0 {
                    best = (d, class);
                }
            }
        }
    }
    best.1
}

#[test]
fn glyphs_are_recognizable_by_template_matching() {
    let (gray, labels) = synth_glyphs_with(500, 11, 0, GlyphOptions::default());
    let side = GLYPH_SIZE * GLYPH_SIZE;
    let correct = (0..gray.count).filter(|&i| match_template(&gray.pixels[i * side..(i + 1) * side]) == labels[i] as usize).count();
    assert!(correct as f64 / gray.count as f64 >= 0.99, "{correct}/{}", gray.count);
}
