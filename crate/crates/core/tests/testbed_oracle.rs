//! Testbed gradients against finite differences and the lazy-error
//! bookkeeping identities.

mod common;

use common::naive_loss;
use commsim::testbed::{
    measure_conditions, Activation, Loss, Microbatch, Minibatch, Mode, StagedMlp, TeacherTask, TestbedConfig, Trainer,
    TrainerSettings,
};
use commsim::Matrix;

fn small_config(
    dims: (usize, usize, usize),
    layers: usize,
    stages: usize,
    act: Activation,
    loss: Loss,
) -> TestbedConfig {
    TestbedConfig {
        layers,
        input_dim: dims.0,
        hidden_dim: dims.1,
        output_dim: dims.2,
        stages,
        microbatches: 3,
        microbatch_size: 2,
        seq_len: 3,
        token_noise: 0.5,
        rank_cb: 2,
        warmup_iterations: 0,
        learning_rate: 0.05,
        activation: act,
        loss,
        ..TestbedConfig::default()
    }
}

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
}

#[test]
fn reference_gradient_matches_finite_differences() {
    let cases = [
        ((5, 7, 4), 3, 3, Activation::Identity, Loss::Mse),
        ((6, 8, 3), 4, 2, Activation::Tanh, Loss::Mse),
        ((4, 16, 5), 2, 2, Activation::Tanh, Loss::CrossEntropy),
        ((16, 16, 16), 4, 4, Activation::Identity, Loss::CrossEntropy),
    ];
    for (dims, layers, stages, act, loss) in cases {
        let cfg = small_config(dims, layers, stages, act, loss);
        let mut trainer = cfg.trainer(Mode::Reference).unwrap();
        let batch = cfg.minibatch(0).unwrap();
        let weights = trainer.model.weights.clone();
        let rec = trainer.run_iteration(&batch).unwrap();
        let tanh = act == Activation::Tanh;

        let h = 1e-5;
        for (k, g) in rec.reference_grads.iter().enumerate() {
            let fd = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                let w = weights[k].get(i, j);
                let mut plus = weights.clone();
                plus[k].set(i, j, w + h);
                let mut minus = weights.clone();
                minus[k].set(i, j, w - h);
                (naive_loss(&plus, &batch, true, tanh, loss) - naive_loss(&minus, &batch, true, tanh, loss)) / (2.0 * h)
            });
            let e = rel(g, &fd);
            assert!(e <= 1e-5, "{dims:?} {act:?} {loss:?} layer {k}: relative error {e:e}");
        }
        assert!((rec.loss - naive_loss(&weights, &batch, true, tanh, loss)).abs() < 1e-12);
    }
}

#[test]
fn reference_gradient_is_micro_batch_invariant() {
    let mut cfg = small_config((6, 8, 4), 4, 2, Activation::Tanh, Loss::Mse);
    cfg.microbatches = 8;
    // Per-micro-batch normalization would change with the split.
    cfg.normalize_input = false;
    let batch = cfg.minibatch(3).unwrap();
    let whole = batch.resplit(batch.total_samples()).unwrap();
    let pairs = batch.resplit(4).unwrap();

    let grads = |b: &Minibatch| {
        cfg.trainer(Mode::Reference)
            .unwrap()
            .run_iteration(b)
            .unwrap()
            .reference_grads
    };
    let g = grads(&batch);
    for other in [grads(&whole), grads(&pairs)] {
        for (a, b) in g.iter().zip(&other) {
            assert!(rel(a, b) <= 1e-10);
        }
    }
}

#[test]
fn lossless_rank_reproduces_reference() {
    for mode in [Mode::CbLep, Mode::CbNolep, Mode::CbForward] {
        let mut cfg = small_config((5, 6, 4), 4, 4, Activation::Tanh, Loss::Mse);
        cfg.rank_cb = 6;
        let mut trainer = cfg.trainer(mode).unwrap();
        let mut reference = cfg.trainer(Mode::Reference).unwrap();
        for it in 0..3 {
            let batch = cfg.minibatch(it).unwrap();
            let rec = trainer.run_iteration(&batch).unwrap();
            let r = reference.run_iteration(&batch).unwrap();
            assert!(rec.compressed);
            for (a, g) in rec.approx_grads.iter().zip(&r.reference_grads) {
                assert!(rel(a, g) <= 1e-10, "{mode:?}: {}", rel(a, g));
            }
            assert!((rec.loss - r.loss).abs() <= 1e-10 * r.loss.abs());
        }
    }
}

#[test]
fn lossless_rank_has_zero_average_error() {
    let mut cfg = small_config((5, 6, 4), 4, 2, Activation::Identity, Loss::Mse);
    cfg.rank_cb = 6;
    cfg.microbatches = 4;
    let rec = cfg
        .trainer(Mode::CbLep)
        .unwrap()
        .run_iteration(&cfg.minibatch(0).unwrap())
        .unwrap();
    for c in measure_conditions(&rec).unwrap() {
        assert!(c.avg_eps.abs() < 1e-15);
        assert!(c.rms_eps < 1e-15);
    }
}

#[test]
fn single_micro_batch_lep_equals_nolep() {
    let mut cfg = small_config((6, 8, 4), 4, 4, Activation::Tanh, Loss::Mse);
    cfg.microbatches = 1;
    let batch = cfg.minibatch(0).unwrap();
    let lep = cfg.trainer(Mode::CbLep).unwrap().run_iteration(&batch).unwrap();
    let nolep = cfg.trainer(Mode::CbNolep).unwrap().run_iteration(&batch).unwrap();
    assert_eq!(lep.approx_grads, nolep.approx_grads);
    assert!(lep.relative_grad_error() > 0.0);
}

#[test]
fn lazy_sends_telescope_at_model_level() {
    let mut cfg = small_config((6, 8, 4), 6, 3, Activation::Tanh, Loss::Mse);
    cfg.microbatches = 16;
    let mut trainer = cfg.trainer(Mode::CbLep).unwrap();
    for it in 0..3 {
        let rec = trainer.run_iteration(&cfg.minibatch(it).unwrap()).unwrap();
        assert!(rec.staleness_free());
        assert_eq!(rec.weight_checksums.len(), 17);
        for trace in &rec.boundaries {
            let sum = |ms: &[Matrix]| ms.iter().skip(1).fold(ms[0].clone(), |acc, m| acc.add(m).unwrap());
            let sent = sum(&trace.sent);
            let mut expect = sum(&trace.link_inputs).sub(trace.residuals.last().unwrap()).unwrap();
            match (&trace.initial_residual, it) {
                (None, 0) => {}
                (Some(r), i) if i > 0 => expect.add_assign(r).unwrap(),
                other => panic!("unexpected carried residual {other:?}"),
            }
            assert!(rel(&sent, &expect) <= 1e-10);
        }
    }
}

#[test]
fn weights_change_only_between_iterations() {
    let cfg = small_config((5, 6, 4), 4, 2, Activation::Identity, Loss::Mse);
    let mut trainer = cfg.trainer(Mode::CbLep).unwrap();
    let a = trainer.run_iteration(&cfg.minibatch(0).unwrap()).unwrap();
    let b = trainer.run_iteration(&cfg.minibatch(1).unwrap()).unwrap();
    assert!(a.staleness_free() && b.staleness_free());
    assert_ne!(a.weight_checksums[0], b.weight_checksums[0]);
    assert_eq!(b.weight_checksums[0], {
        let mut m = cfg.model().unwrap();
        m.apply_update(&a.approx_grads).unwrap();
        m.checksum()
    });
}

#[test]
fn warmup_iterations_run_uncompressed() {
    let mut cfg = small_config((5, 6, 4), 4, 2, Activation::Identity, Loss::Mse);
    cfg.warmup_iterations = 2;
    let mut lep = cfg.trainer(Mode::CbLep).unwrap();
    let mut reference = cfg.trainer(Mode::Reference).unwrap();
    for it in 0..3 {
        let batch = cfg.minibatch(it).unwrap();
        let a = lep.run_iteration(&batch).unwrap();
        let b = reference.run_iteration(&batch).unwrap();
        assert_eq!(a.compressed, it >= 2);
        if it < 2 {
            assert_eq!(a.approx_grads, b.reference_grads);
            assert!(lep.residual(0).is_none());
        } else {
            assert!(lep.residual(0).is_some());
        }
    }
}

#[test]
fn higher_rank_never_increases_error_on_first_iteration() {
    let cfg = small_config((8, 12, 6), 4, 2, Activation::Identity, Loss::Mse);
    let batch = cfg.minibatch(0).unwrap().resplit(6).unwrap();
    let errors: Vec<f64> = (1..=6)
        .map(|r| {
            let settings = TrainerSettings {
                seed: cfg.seed,
                ..TrainerSettings::new(r)
            };
            let mut t = Trainer::new(cfg.model().unwrap(), Mode::CbNolep, settings).unwrap();
            t.run_iteration(&batch).unwrap().grad_error()
        })
        .collect();
    for w in errors.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{errors:?}");
    }
    assert!(errors[5] < 1e-12);
}

#[test]
fn duplicated_micro_batches_have_zero_activation_drift() {
    let cfg = small_config((5, 6, 4), 4, 2, Activation::Tanh, Loss::Mse);
    let one = cfg.minibatch(0).unwrap().microbatches[0].clone();
    let batch = Minibatch::new(vec![one.clone(), one.clone(), one], 2, 3).unwrap();
    let rec = cfg.trainer(Mode::CbLep).unwrap().run_iteration(&batch).unwrap();
    for c in measure_conditions(&rec).unwrap() {
        assert_eq!(c.avg_dy, 0.0);
        assert_eq!(c.rms_dy, 0.0);
        assert_eq!(c.pairs, 2);
    }
}

#[test]
fn measure_conditions_needs_residuals() {
    let cfg = small_config((5, 6, 4), 4, 2, Activation::Identity, Loss::Mse);
    let rec = cfg
        .trainer(Mode::Reference)
        .unwrap()
        .run_iteration(&cfg.minibatch(0).unwrap())
        .unwrap();
    assert!(measure_conditions(&rec).is_err());
}

#[test]
fn forward_compression_reports_divergence_instead_of_failing() {
    // An absurd learning rate blows the forward-compressed model up.
    let mut cfg = small_config((5, 6, 4), 4, 2, Activation::Identity, Loss::Mse);
    cfg.learning_rate = 50.0;
    let mut t = cfg.trainer(Mode::CbForward).unwrap();
    let mut diverged = false;
    for it in 0..40 {
        let rec = t.run_iteration(&cfg.minibatch(it).unwrap()).unwrap();
        if rec.diverged {
            diverged = true;
            break;
        }
    }
    assert!(diverged && t.diverged());
    let after = t.run_iteration(&cfg.minibatch(99).unwrap()).unwrap();
    assert!(after.diverged && after.loss.is_nan());
}

#[test]
fn staged_model_chain_validation() {
    assert!(StagedMlp::new(&[3, 4, 5], 2, 0).is_ok());
    let task = TeacherTask::new(3, 2, 2, Loss::Mse, 0);
    let mb = task.minibatch(0, 1, 1).unwrap().microbatches.remove(0);
    let bad = Microbatch {
        input: mb.input.clone(),
        target: Matrix::zeros(5, 2),
    };
    assert!(Minibatch::new(vec![mb, bad], 1, 2).is_err());
}
