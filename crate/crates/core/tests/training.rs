mod common;

use caw_core::attacks::{pgd_attack, AttackConfig};
use caw_core::data::{generate_synthetic, Dataset, SyntheticDatasetSpec};
use caw_core::losses::{cross_entropy_loss, CawConfig};
use caw_core::model::{zero_shot_logits, DualEncoderModel, EncoderArch, ImageEncoder};
use caw_core::tensor::{Graph, Tensor};
use caw_core::training::{fit, train_step, OptimizerState, TrainConfig};
use caw_core::Error;
use common::{ce, encode, fd, kl, logits, softmax, toy_model, uniform_batch};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_data() -> Dataset {
    generate_synthetic(&SyntheticDatasetSpec {
        classes: 3,
        input_dim: 8,
        embed_dim: 4,
        samples_per_class: 12,
        ..Default::default()
    })
    .unwrap()
}

fn toy_model_for(data: &Dataset, seed: u64) -> DualEncoderModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = ImageEncoder::init(&EncoderArch::mlp(8, 10, 1, 4), &mut rng).unwrap();
    let mut m = DualEncoderModel::new(enc, data.prototypes.clone(), 0.1).unwrap();
    m.snapshot_frozen(false).unwrap();
    m
}

#[test]
fn one_step_equals_sgd_on_the_finite_difference_gradient() {
    let mut model = toy_model(1, EncoderArch::mlp(4, 5, 1, 3), 2, 0.3);
    model.snapshot_frozen(false).unwrap();
    // Move off the snapshot so the feature distance is differentiable.
    let shifted: Vec<f64> =
        model.tuned().flat_params().iter().enumerate().map(|(i, p)| p + 0.05 * (i as f64).sin()).collect();
    model.tuned_mut().set_flat_params(&shifted).unwrap();
    let (x, y) = uniform_batch(2, 6, 4, 2);
    let inner = AttackConfig::pgd(0.05, 2);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        loss: CawConfig { detach_weight: false, ..CawConfig::default() },
        inner_attack: Some(inner.clone()),
        ..TrainConfig::default()
    };
    let x_adv = pgd_attack(&model, &x, &y, &inner).unwrap().x_adv;
    let theta = model.tuned().flat_params();
    let frozen = model.frozen().clone();
    let mut probe = model.clone();
    let g = fd(
        |p| {
            probe.tuned_mut().set_flat_params(p).unwrap();
            let n = x.rows() as f64;
            let mut ca = 0.0;
            let mut reg = 0.0;
            for i in 0..x.rows() {
                let pa = softmax(&logits(&probe, probe.tuned(), x_adv.row(i)));
                let pc = softmax(&logits(&probe, &frozen, x.row(i)));
                ca += (1.0 - pa[y[i]]) * kl(&pa, &pc);
                let (a, b) = (encode(probe.tuned(), x_adv.row(i)), encode(&frozen, x_adv.row(i)));
                reg += a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            }
            ce(&probe, probe.tuned(), &x_adv, &y) + 6.0 * ca / n + 3.0 * reg / n
        },
        &theta,
        1e-6,
    );
    let mut opt = OptimizerState::new(model.tuned());
    train_step(&mut model, &mut opt, &x, &y, &cfg, 1).unwrap();
    let expected: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - 0.01 * gi).collect();
    let got = model.tuned().flat_params();
    let err = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "parameter mismatch {err}");
    assert_eq!(opt.step(), 1);
}

#[test]
fn fit_is_deterministic() {
    let data = toy_data();
    let cfg = TrainConfig { epochs: 3, batch_size: 8, learning_rate: 0.01, ..TrainConfig::default() };
    let mut a = toy_model_for(&data, 3);
    let mut b = toy_model_for(&data, 3);
    let ra = fit(&mut a, &data, &cfg).unwrap();
    let rb = fit(&mut b, &data, &cfg).unwrap();
    assert_eq!(a, b);
    let json = |r: &[caw_core::training::TrainLogRecord]| serde_json::to_string(r).unwrap();
    assert_eq!(json(&ra.records), json(&rb.records));
    assert_eq!(ra.records.len(), 3 * 36usize.div_ceil(8));
    assert!(ra.records.windows(2).all(|w| (w[0].epoch, w[0].step) < (w[1].epoch, w[1].step)));
    assert!(ra.records.iter().all(|r| r.losses.l_total.is_finite()));
}

#[test]
fn frozen_encoder_and_prototypes_never_change() {
    let data = toy_data();
    let mut model = toy_model_for(&data, 4);
    let probe = data.x.select_rows(&[0, 5, 17, 30]);
    let before = model.frozen().encode(&probe).unwrap();
    let (protos, tau) = (model.prototypes().clone(), model.temperature());
    let frozen_params = model.frozen().flat_params();
    let cfg = TrainConfig { epochs: 2, batch_size: 7, learning_rate: 0.05, ..TrainConfig::default() };
    let out = fit(&mut model, &data, &cfg).unwrap();
    assert!(out.records.len() >= 10);
    assert_eq!(model.frozen().encode(&probe).unwrap(), before);
    assert_eq!(model.frozen().flat_params(), frozen_params);
    assert_eq!(model.prototypes(), &protos);
    assert_eq!(model.temperature(), tau);
    assert_ne!(model.tuned().flat_params(), frozen_params);
}

/// Plain cross-entropy SGD with momentum, written directly against the graph.
fn reference_ce_loop(model: &mut DualEncoderModel, data: &Dataset, lr: f64, momentum: f64, batch: usize, epochs: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity: Vec<Tensor> = model.tuned().params().map(|p| Tensor::zeros(p.shape())).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let (x, y) = data.batch(chunk);
            let g = Graph::new();
            let tuned = model.tuned().bind(&g, true);
            let protos = g.constant(model.prototypes().embeddings().clone());
            let z = zero_shot_logits(tuned.encode(g.constant(x)).unwrap(), protos, model.temperature()).unwrap();
            let grads = cross_entropy_loss(z, &y).unwrap().backward().unwrap();
            let grads: Vec<Tensor> = tuned.params().iter().map(|p| grads.wrt(*p)).collect();
            for ((p, v), gr) in model.tuned_mut().params_mut().zip(&mut velocity).zip(&grads) {
                for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                    *vi = momentum * *vi + gi;
                    *pi -= lr * *vi;
                }
            }
        }
    }
}

#[test]
fn ce_only_without_attack_is_exactly_clean_training() {
    let data = toy_data();
    let cfg = TrainConfig {
        loss: CawConfig::ce_only(),
        inner_attack: None,
        epochs: 3,
        batch_size: 10,
        learning_rate: 0.05,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut a = toy_model_for(&data, 5);
    let mut b = a.clone();
    fit(&mut a, &data, &cfg).unwrap();
    reference_ce_loop(&mut b, &data, 0.05, 0.9, 10, 3, 9);
    assert_eq!(a.tuned().flat_params(), b.tuned().flat_params());
}

#[test]
fn tiny_budget_ce_training_reduces_the_loss() {
    let data = toy_data();
    let cfg = TrainConfig {
        loss: CawConfig::ce_only(),
        inner_attack: Some(AttackConfig::pgd(1e-9, 2)),
        epochs: 15,
        batch_size: 12,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let mut model = toy_model_for(&data, 6);
    let out = fit(&mut model, &data, &cfg).unwrap();
    let epoch_mean = |e: usize| {
        let r: Vec<f64> = out.records.iter().filter(|r| r.epoch == e).map(|r| r.losses.l_ce).collect();
        r.iter().sum::<f64>() / r.len() as f64
    };
    assert!(epoch_mean(15) < 0.5 * epoch_mean(1), "{} vs {}", epoch_mean(15), epoch_mean(1));
}

#[test]
fn non_finite_parameters_abort_with_a_numeric_error() {
    let data = toy_data();
    let mut model = toy_model_for(&data, 7);
    model.tuned_mut().params_mut().next().unwrap().data_mut()[0] = f64::NAN;
    let mut opt = OptimizerState::new(model.tuned());
    let (x, y) = data.batch(&[0, 1, 2]);
    for inner in [None, Some(AttackConfig::pgd(0.05, 2))] {
        let cfg = TrainConfig { inner_attack: inner, ..TrainConfig::default() };
        let e = train_step(&mut model, &mut opt, &x, &y, &cfg, 1).unwrap_err();
        assert!(matches!(e, Error::Numeric(_)), "{e:?}");
    }
}

#[test]
fn fit_requires_a_snapshot_and_matching_prototypes() {
    let data = toy_data();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let enc = ImageEncoder::init(&EncoderArch::mlp(8, 10, 1, 4), &mut rng).unwrap();
    let mut model = DualEncoderModel::new(enc, data.prototypes.clone(), 0.1).unwrap();
    assert!(matches!(fit(&mut model, &data, &TrainConfig::default()), Err(Error::Contract(_))));
    model.snapshot_frozen(false).unwrap();
    let other = generate_synthetic(&SyntheticDatasetSpec {
        classes: 3,
        input_dim: 8,
        embed_dim: 4,
        samples_per_class: 2,
        class_offset: 1,
        ..Default::default()
    })
    .unwrap();
    assert!(matches!(fit(&mut model, &other, &TrainConfig::default()), Err(Error::Contract(_))));
}
