//! End-to-end properties of the assembled flow models: density evaluation,
//! sampling, gradients, checkpoints, and the training loop.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal, StudentsT};
use tempfile::tempdir;

use tailflow::ad::{grad_check, Node, Parameter};
use tailflow::error::Error;
use tailflow::model::{build_model, load_checkpoint, ModelArch, TransformKind, Variant};
use tailflow::tail::{classify_marginal, ClassifyConfig, MarginalTail, TailClass, TailReport};
use tailflow::train::{fit, TrainConfig};
use tailflow::Tensor;

use common::ks_statistic;

fn light() -> MarginalTail {
    MarginalTail {
        class: TailClass::Light,
        index_estimate: None,
        k_used: 10,
    }
}

fn heavy(nu: f64) -> MarginalTail {
    MarginalTail {
        class: TailClass::Heavy,
        index_estimate: Some(nu),
        k_used: 10,
    }
}

/// A report over 8 columns: evens light, odds heavy with tail index 2.
fn interleaved_report_8() -> TailReport {
    let marginals = vec![
        light(),
        heavy(2.0),
        light(),
        heavy(2.0),
        light(),
        heavy(2.0),
        light(),
        heavy(2.0),
    ];
    TailReport::new(marginals, 4, vec![0, 2, 4, 6, 1, 3, 5, 7]).unwrap()
}

fn gaussian_matrix(rng: &mut ChaCha12Rng, n: usize, d: usize, scale: f64) -> Tensor {
    let data: Vec<f64> = (0..n * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::matrix(n, d, data).unwrap()
}

fn column(data: &Tensor, j: usize) -> Vec<f64> {
    let (n, _) = data.dims2("column").unwrap();
    (0..n).map(|i| data.at(i, j)).collect()
}

#[test]
fn log_prob_parameter_gradients_match_finite_differences_for_both_transforms() {
    let arch = ModelArch {
        hidden: vec![8],
        ..ModelArch::default()
    };
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    let x = gaussian_matrix(&mut rng, 4, 4, 0.8);
    for kind in [TransformKind::Affine, TransformKind::RqSpline] {
        // gtaf exercises trainable degrees of freedom alongside the
        // transform parameters. Pin ν to 4 where the density responds
        // strongly to the dof, so the finite-difference comparison is not
        // dominated by rounding noise around a near-zero gradient.
        let model = build_model(Variant::Gtaf, kind, 4, 2, None, &arch, 9).unwrap();
        let raw_nu4 = (3.0f64.exp() - 1.0).ln();
        for p in model.dof_parameters() {
            p.set_value(Tensor::scalar(raw_nu4));
        }
        model.jitter_transform_parameters(&mut rng, 0.3).unwrap();
        let params: Vec<Parameter> = model.named_parameters();
        let report = grad_check(
            || Ok(model.log_prob(&x)?.sum_all()),
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.pass,
            "{kind}: log-density gradients disagree with finite differences\n{report}"
        );
    }
}

#[test]
fn fresh_model_with_shuffled_reorder_is_still_the_base_exactly() {
    let report = interleaved_report_8();
    let model = build_model(
        Variant::Mtaf,
        TransformKind::Affine,
        8,
        4,
        Some(&report),
        &ModelArch::default(),
        21,
    )
    .unwrap();
    assert_eq!(model.base().reorder(), &[0, 2, 4, 6, 1, 3, 5, 7]);

    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let x = gaussian_matrix(&mut rng, 16, 8, 1.5);
    let lp = model.log_prob(&x).unwrap().value();
    let reordered = x.permute_cols(model.base().reorder()).unwrap();
    let expected = model
        .base()
        .base_logpdf(&Node::constant(reordered))
        .unwrap()
        .value();
    for i in 0..16 {
        assert_eq!(lp.data()[i], expected.data()[i], "row {i}");
    }
}

#[test]
fn fresh_model_samples_match_the_base_marginals() {
    let n = 100_000;
    let mut rng = ChaCha12Rng::seed_from_u64(77);

    // Vanilla: every column is standard normal.
    let vanilla = build_model(
        Variant::Vanilla,
        TransformKind::Affine,
        4,
        2,
        None,
        &ModelArch::default(),
        1,
    )
    .unwrap();
    let xs = vanilla.sample(&mut rng, n).unwrap();
    let phi = StatNormal::new(0.0, 1.0).unwrap();
    for j in 0..4 {
        let mut col = column(&xs, j);
        let ks = ks_statistic(&mut col, |v| phi.cdf(v));
        assert!(ks < 0.01, "vanilla column {j}: KS {ks}");
    }

    // mtaf with a shuffled reorder: each data column must follow the base
    // marginal assigned to it, normal or Student-t.
    let report = TailReport::new(
        vec![light(), heavy(2.0), light(), heavy(3.0)],
        2,
        vec![2, 0, 1, 3],
    )
    .unwrap();
    let mtaf = build_model(
        Variant::Mtaf,
        TransformKind::Affine,
        4,
        2,
        Some(&report),
        &ModelArch::default(),
        2,
    )
    .unwrap();
    let xs = mtaf.sample(&mut rng, n).unwrap();
    for (j, expect_nu) in [(2usize, None), (0, None), (1, Some(2.0)), (3, Some(3.0))] {
        let mut col = column(&xs, j);
        let ks = match expect_nu {
            None => ks_statistic(&mut col, |v| phi.cdf(v)),
            Some(nu) => {
                let t = StudentsT::new(0.0, 1.0, nu).unwrap();
                ks_statistic(&mut col, |v| t.cdf(v))
            }
        };
        assert!(ks < 0.01, "mtaf column {j}: KS {ks}");
    }
}

#[test]
fn checkpoint_round_trip_reproduces_log_prob_bit_for_bit() {
    let report = TailReport::new(
        vec![
            heavy(2.3),
            light(),
            heavy(3.1),
            heavy(1.9),
            light(),
            light(),
        ],
        3,
        vec![1, 4, 5, 0, 2, 3],
    )
    .unwrap();
    let model = build_model(
        Variant::Mtaf,
        TransformKind::RqSpline,
        6,
        3,
        Some(&report),
        &ModelArch::default(),
        13,
    )
    .unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    model.jitter_transform_parameters(&mut rng, 0.4).unwrap();

    let dir = tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save_checkpoint(&path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();

    assert_eq!(loaded.variant(), Variant::Mtaf);
    assert_eq!(loaded.transform_kind(), TransformKind::RqSpline);
    assert_eq!(loaded.dim(), 6);
    assert_eq!(loaded.base().d_l(), 3);
    assert_eq!(loaded.base().reorder(), model.base().reorder());

    let probes = gaussian_matrix(&mut rng, 100, 6, 2.0);
    let before = model.log_prob(&probes).unwrap().value();
    let after = loaded.log_prob(&probes).unwrap().value();
    for i in 0..100 {
        assert_eq!(
            before.data()[i],
            after.data()[i],
            "row {i}: checkpoint must reproduce densities bit for bit"
        );
    }
}

#[test]
fn checkpoint_keeps_a_shared_dof_shared() {
    let model = build_model(
        Variant::Taf,
        TransformKind::Affine,
        5,
        2,
        None,
        &ModelArch::default(),
        4,
    )
    .unwrap();
    let dir = tempdir().unwrap();
    let path = dir.path().join("taf.json");
    model.save_checkpoint(&path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(
        loaded.dof_parameters().len(),
        1,
        "the shared degrees-of-freedom parameter must stay shared after a reload"
    );
    let nus = loaded.base().dof_values();
    assert_eq!(nus.len(), 5);
    for nu in &nus {
        assert!((nu - nus[0]).abs() == 0.0, "shared dof must agree exactly");
    }
}

#[test]
fn checkpoint_schema_and_corruption_are_structured_errors() {
    let dir = tempdir().unwrap();

    let garbled = dir.path().join("garbled.json");
    std::fs::write(&garbled, "{ this is not json").unwrap();
    assert!(load_checkpoint(&garbled).is_err());

    let model = build_model(
        Variant::Vanilla,
        TransformKind::Affine,
        3,
        2,
        None,
        &ModelArch::default(),
        0,
    )
    .unwrap();
    let path = dir.path().join("model.json");
    model.save_checkpoint(&path).unwrap();
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("tailflow-checkpoint-v1", "tailflow-checkpoint-v0");
    std::fs::write(&path, text).unwrap();
    match load_checkpoint(&path) {
        Err(Error::Schema { expected, found }) => {
            assert_eq!(expected, "tailflow-checkpoint-v1");
            assert_eq!(found, "tailflow-checkpoint-v0");
        }
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn one_dimensional_affine_flow_recovers_a_gaussian() {
    // Target N(3, 2²); its differential entropy ln 2 + ln(2π)/2 + 1/2 is
    // the attainable optimum of the validation NLL.
    let optimum = 2.0f64.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5;
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    let draw = |rng: &mut ChaCha12Rng, n: usize| -> Tensor {
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                3.0 + 2.0 * z
            })
            .collect();
        Tensor::matrix(n, 1, data).unwrap()
    };
    let train_data = draw(&mut rng, 4000);
    let val_data = draw(&mut rng, 4000);

    let model = build_model(
        Variant::Vanilla,
        TransformKind::Affine,
        1,
        1,
        None,
        &ModelArch::default(),
        0,
    )
    .unwrap();
    let cfg = TrainConfig {
        steps: 2000,
        batch_size: 256,
        learning_rate: 5e-3,
        weight_decay: 0.0,
        dof_learning_rate: 0.01,
        seed: 1,
        grad_clip: None,
    };
    let history = fit(&model, &train_data, &val_data, &cfg).unwrap();

    assert!(
        (history.best_val_nll - optimum).abs() < 0.05,
        "best val NLL {} vs optimum {optimum}",
        history.best_val_nll
    );
    // Entries at step 0, every 100 steps, and the final step.
    assert_eq!(history.entries.len(), 21);
    assert_eq!(history.entries[0].step, 0);
    assert_eq!(history.entries[20].step, 2000);

    // fit leaves the parameters at the best recorded state.
    let val_after = -model
        .log_prob(&val_data)
        .unwrap()
        .value()
        .mean_all();
    assert!(
        (val_after - history.best_val_nll).abs() < 1e-9,
        "parameters after fit ({val_after}) must reproduce the best NLL ({})",
        history.best_val_nll
    );
}

#[test]
fn training_on_the_base_distribution_stays_put() {
    // The identity-initialised model is already optimal for its own base;
    // 500 steps of SGD must not walk away from it.
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let train_data = gaussian_matrix(&mut rng, 3000, 2, 1.0);
    let val_data = gaussian_matrix(&mut rng, 3000, 2, 1.0);
    let model = build_model(
        Variant::Vanilla,
        TransformKind::Affine,
        2,
        2,
        None,
        &ModelArch::default(),
        0,
    )
    .unwrap();
    let cfg = TrainConfig {
        steps: 500,
        batch_size: 256,
        learning_rate: 1e-3,
        weight_decay: 1e-6,
        dof_learning_rate: 0.01,
        seed: 2,
        grad_clip: None,
    };
    let history = fit(&model, &train_data, &val_data, &cfg).unwrap();
    let first = history.entries[0].val_nll;
    for e in &history.entries {
        assert!(
            (e.val_nll - first).abs() < 0.05,
            "step {}: val NLL {} drifted from {first}",
            e.step,
            e.val_nll
        );
    }
    let last = history.entries.last().unwrap().val_nll;
    assert!(last <= first + 0.02, "last {last} vs first {first}");
}

#[test]
fn non_finite_loss_aborts_and_restores_the_last_good_state() {
    // An absurd learning rate on the shared degrees of freedom pushes ν to
    // a magnitude whose log-gamma terms overflow, so the loss turns NaN a
    // couple of steps in. fit must return a non-finite error and leave the
    // parameters exactly at the best recorded state (here: the intact
    // initialisation).
    let mut rng = ChaCha12Rng::seed_from_u64(31);
    let train_data = gaussian_matrix(&mut rng, 600, 2, 1.0);
    let val_data = gaussian_matrix(&mut rng, 600, 2, 1.0);
    let model = build_model(
        Variant::Taf,
        TransformKind::Affine,
        2,
        2,
        None,
        &ModelArch::default(),
        0,
    )
    .unwrap();
    let probes = gaussian_matrix(&mut rng, 32, 2, 1.0);
    let before = model.log_prob(&probes).unwrap().value();

    let cfg = TrainConfig {
        steps: 300,
        batch_size: 256,
        learning_rate: 1e-3,
        weight_decay: 0.0,
        dof_learning_rate: 1e307,
        seed: 3,
        grad_clip: None,
    };
    match fit(&model, &train_data, &val_data, &cfg) {
        Err(Error::NonFinite(msg)) => {
            assert!(
                msg.contains("restored"),
                "error must say the parameters were restored, got: {msg}"
            );
        }
        other => panic!("expected a non-finite training error, got {other:?}"),
    }
    let after = model.log_prob(&probes).unwrap().value();
    for i in 0..32 {
        assert_eq!(
            before.data()[i],
            after.data()[i],
            "row {i}: restored parameters must reproduce the original densities"
        );
    }
}

#[test]
fn gradient_clipping_trains_cleanly() {
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let train_data = gaussian_matrix(&mut rng, 1000, 2, 1.0);
    let val_data = gaussian_matrix(&mut rng, 500, 2, 1.0);
    let model = build_model(
        Variant::Vanilla,
        TransformKind::Affine,
        2,
        2,
        None,
        &ModelArch::default(),
        0,
    )
    .unwrap();
    let cfg = TrainConfig {
        steps: 50,
        batch_size: 128,
        learning_rate: 1e-3,
        weight_decay: 1e-6,
        dof_learning_rate: 0.01,
        seed: 4,
        grad_clip: Some(1.0),
    };
    let history = fit(&model, &train_data, &val_data, &cfg).unwrap();
    assert_eq!(history.entries.first().unwrap().step, 0);
    assert_eq!(history.entries.last().unwrap().step, 50);
    assert!(history.best_val_nll.is_finite());
}

/// Samples a jittered model and classifies every output marginal,
/// returning how many match `expected`.
fn classify_samples(
    model: &tailflow::model::FlowModel,
    expected: &[TailClass],
    rng: &mut ChaCha12Rng,
    n: usize,
) -> usize {
    let xs = model.sample(rng, n).unwrap();
    let cfg = ClassifyConfig::default();
    expected
        .iter()
        .enumerate()
        .filter(|(j, want)| {
            let col = column(&xs, *j);
            let got = classify_marginal(&col, &cfg).unwrap();
            got.class == **want
        })
        .count()
}

#[test]
fn jittered_mtaf_keeps_marginal_classes_and_taf_does_not() {
    // Random small perturbations of the transform stack must not change
    // which output marginals are heavy-tailed: the split is structural.
    // The all-heavy model is the negative control — with every base
    // marginal at ν = 2, every output stays heavy no matter the jitter.
    let report = TailReport::new(
        vec![
            light(),
            light(),
            light(),
            light(),
            heavy(2.0),
            heavy(2.0),
            heavy(2.0),
            heavy(2.0),
        ],
        4,
        (0..8).collect(),
    )
    .unwrap();
    let expected_mixed: Vec<TailClass> = report.marginals.iter().map(|m| m.class).collect();
    let expected_heavy = vec![TailClass::Heavy; 8];
    let n = 100_000;

    let mut mixed_ok = 0;
    let mut heavy_ok = 0;
    for seed in 0..5u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);

        let mtaf = build_model(
            Variant::Mtaf,
            TransformKind::Affine,
            8,
            5,
            Some(&report),
            &ModelArch::default(),
            seed,
        )
        .unwrap();
        mtaf.jitter_transform_parameters(&mut rng, 0.1).unwrap();
        if classify_samples(&mtaf, &expected_mixed, &mut rng, n) >= 7 {
            mixed_ok += 1;
        }

        let taf = build_model(
            Variant::Taf,
            TransformKind::Affine,
            8,
            5,
            None,
            &ModelArch::default(),
            seed,
        )
        .unwrap();
        // Pin the shared dof to ν = 2 (raw = softplus⁻¹(1)).
        let raw = (1.0f64.exp() - 1.0).ln();
        for p in taf.dof_parameters() {
            p.set_value(Tensor::scalar(raw));
        }
        taf.jitter_transform_parameters(&mut rng, 0.1).unwrap();
        if classify_samples(&taf, &expected_heavy, &mut rng, n) == 8 {
            heavy_ok += 1;
        }
    }
    assert!(mixed_ok >= 4, "mixed split survived in {mixed_ok}/5 seeds");
    assert!(heavy_ok >= 4, "all-heavy control held in {heavy_ok}/5 seeds");
}
