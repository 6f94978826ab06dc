mod common;

use caw_core::attacks::AttackConfig;
use caw_core::config::RunConfig;
use caw_core::data::{generate_synthetic, load_dataset, save_dataset, Dataset, SyntheticDatasetSpec};
use caw_core::eval::{ablation_csv, evaluate, run_ablation};
use caw_core::losses::CawConfig;
use caw_core::model::{ClassPrototypeSet, DualEncoderModel, EncoderArch, ImageEncoder};
use caw_core::tensor::Tensor;
use caw_core::training::{fit, TrainConfig};
use common::{logits, rng};
use rand::Rng;

fn small_spec() -> SyntheticDatasetSpec {
    SyntheticDatasetSpec { classes: 4, input_dim: 10, embed_dim: 6, samples_per_class: 15, ..Default::default() }
}

fn model_for(data: &Dataset, seed: u64, tau: f64) -> DualEncoderModel {
    let arch = EncoderArch::mlp(data.input_dim(), 12, 1, data.prototypes.embed_dim());
    let enc = ImageEncoder::init(&arch, &mut rng(seed)).unwrap();
    let mut m = DualEncoderModel::new(enc, data.prototypes.clone(), tau).unwrap();
    m.snapshot_frozen(false).unwrap();
    m
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[test]
fn random_labels_give_chance_accuracy() {
    let (n, classes, d) = (1600usize, 8usize, 16usize);
    let mut r = rng(11);
    let x = Tensor::matrix(n, d, (0..n * d).map(|_| r.random::<f64>()).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let protos = ClassPrototypeSet::random(classes, 8, &mut r).unwrap();
    let data = Dataset::new("noise", x, labels, protos).unwrap();
    let model = model_for(&data, 12, 0.1);
    let report = evaluate(&model, &data, &[], 128).unwrap();
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((report.clean_accuracy - p).abs() <= 3.0 * sigma, "accuracy {} vs chance {p}", report.clean_accuracy);
    assert!(report.robust.is_empty());
    assert_eq!(report.primary_robust(), report.clean_accuracy);
}

#[test]
fn clean_accuracy_matches_an_independent_count() {
    let data = generate_synthetic(&small_spec()).unwrap();
    let model = model_for(&data, 3, 0.2);
    let expected = (0..data.len())
        .filter(|&i| argmax(&logits(&model, model.tuned(), data.x.row(i))) == data.labels[i])
        .count() as f64
        / data.len() as f64;
    let report = evaluate(&model, &data, &[], 7).unwrap();
    assert_eq!(report.clean_accuracy, expected);
    assert_eq!(report.samples, 60);
}

#[test]
fn evaluation_is_read_only_and_batch_invariant() {
    let data = generate_synthetic(&small_spec()).unwrap();
    let model = model_for(&data, 4, 0.2);
    let before = model.clone();
    let attacks = [AttackConfig::pgd(0.05, 5), AttackConfig::fgsm(0.05)];
    let a = evaluate(&model, &data, &attacks, 8).unwrap();
    let b = evaluate(&model, &data, &attacks, 60).unwrap();
    let c = evaluate(&model, &data, &attacks, 1).unwrap();
    assert_eq!(model, before);
    assert_eq!(a.model_digest, before.digest());
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert!(a.robust.iter().all(|r| r.accuracy <= a.clean_accuracy));
}

#[test]
fn evaluation_with_random_starts_replays() {
    let data = generate_synthetic(&small_spec()).unwrap();
    let model = model_for(&data, 5, 0.2);
    let attacks = [AttackConfig { random_start: true, step_size: 0.01, seed: 9, ..AttackConfig::pgd(0.05, 4) }];
    let a = evaluate(&model, &data, &attacks, 16).unwrap();
    let b = evaluate(&model, &data, &attacks, 16).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluation_uses_the_dataset_prototypes() {
    let spec = small_spec();
    let data = generate_synthetic(&spec).unwrap();
    let transfer = generate_synthetic(&spec.transfer(5, 1.0)).unwrap();
    assert_ne!(transfer.prototypes, data.prototypes);
    let model = model_for(&data, 6, 0.2);
    let view = model.with_prototypes(transfer.prototypes.clone()).unwrap();
    let expected = (0..transfer.len())
        .filter(|&i| argmax(&logits(&view, view.tuned(), transfer.x.row(i))) == transfer.labels[i])
        .count() as f64
        / transfer.len() as f64;
    let report = evaluate(&model, &transfer, &[], 16).unwrap();
    assert_eq!(report.clean_accuracy, expected);
    assert_eq!(report.dataset, "synthetic-transfer");
}

#[test]
fn ablation_arms_share_the_starting_point() {
    let spec = small_spec();
    let train = generate_synthetic(&spec).unwrap();
    let eval = generate_synthetic(&spec.with_seed(1)).unwrap();
    let base = model_for(&train, 7, 0.2);
    let cfg = TrainConfig { epochs: 2, batch_size: 16, learning_rate: 0.02, ..TrainConfig::default() };

    let first_ce: Vec<f64> = [(0.0, 0.0), (6.0, 0.0), (6.0, 3.0)]
        .iter()
        .map(|&(alpha, beta)| {
            let arm = TrainConfig { loss: CawConfig { alpha, beta, ..cfg.loss.clone() }, ..cfg.clone() };
            let mut m = base.clone();
            fit(&mut m, &train, &arm).unwrap().records[0].losses.l_ce
        })
        .collect();
    assert!(first_ce.iter().all(|&v| v == first_ce[0]), "{first_ce:?}");

    let attacks = [AttackConfig::pgd(0.05, 5)];
    let report = run_ablation(&base, &train, &eval, &cfg, &attacks, 32).unwrap();
    let names: Vec<&str> = report.arms.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(names, ["L_CE", "+L_CA", "+L_Reg"]);
    assert_eq!(
        report.arms.iter().map(|a| (a.alpha, a.beta)).collect::<Vec<_>>(),
        [(0.0, 0.0), (6.0, 0.0), (6.0, 3.0)]
    );
    assert_eq!(report.reference.report, evaluate(&base, &eval, &attacks, 32).unwrap());
    for arm in std::iter::once(&report.reference).chain(&report.arms) {
        assert!((arm.average - 0.5 * (arm.robust_accuracy + arm.clean_accuracy)).abs() <= 1e-12);
        assert_eq!(arm.robust_accuracy, arm.report.robust[0].accuracy);
    }
    let csv = ablation_csv(&report);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("arm,alpha,beta,robust,clean,average\n"));
}

#[test]
fn ablation_with_zero_weights_gives_identical_arms() {
    let spec = small_spec();
    let train = generate_synthetic(&spec).unwrap();
    let base = model_for(&train, 8, 0.2);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 20,
        learning_rate: 0.02,
        loss: CawConfig { alpha: 0.0, beta: 0.0, ..CawConfig::default() },
        ..TrainConfig::default()
    };
    let report = run_ablation(&base, &train, &train, &cfg, &[AttackConfig::fgsm(0.05)], 64).unwrap();
    let digests: Vec<&str> = report.arms.iter().map(|a| a.report.model_digest.as_str()).collect();
    assert!(digests.iter().all(|d| *d == digests[0]));
    assert_ne!(digests[0], report.reference.report.model_digest);
}

#[test]
fn default_task_is_learnable_by_clean_pretraining() {
    let cfg = RunConfig::default();
    assert!(cfg.pretrain.epochs <= 50);
    let train = cfg.data.train.load().unwrap();
    let eval = cfg.data.eval.load().unwrap();
    assert_eq!((train.len(), train.classes(), train.input_dim()), (1600, 8, 64));
    let (model, outcome) = cfg.reference_model(&train).unwrap();
    assert!(outcome.records.last().unwrap().losses.l_ce < outcome.records[0].losses.l_ce);
    let report = evaluate(&model, &eval, &[], 256).unwrap();
    assert!(report.clean_accuracy >= 0.95, "clean accuracy {}", report.clean_accuracy);
}

#[test]
fn synthetic_data_is_seeded_balanced_and_in_range() {
    let spec = small_spec();
    let a = generate_synthetic(&spec).unwrap();
    assert_eq!(a, generate_synthetic(&spec).unwrap());
    let b = generate_synthetic(&spec.with_seed(2)).unwrap();
    assert_ne!(a.x, b.x);
    assert_eq!(a.prototypes, b.prototypes);
    for c in 0..spec.classes {
        assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), spec.samples_per_class);
    }
    assert!(a.x.data().iter().all(|v| (spec.value_min..=spec.value_max).contains(v)));
    for i in 0..a.prototypes.len() {
        let row = a.prototypes.embeddings().row(i);
        assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_noise_collapses_each_class_to_its_center() {
    let spec = SyntheticDatasetSpec { noise_sigma: 0.0, ..small_spec() };
    let d = generate_synthetic(&spec).unwrap();
    for i in 0..d.len() {
        let first = d.labels.iter().position(|&l| l == d.labels[i]).unwrap();
        assert_eq!(d.x.row(i), d.x.row(first));
    }
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.cawd");
    let d = generate_synthetic(&small_spec()).unwrap();
    save_dataset(&path, &d).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, d);
    let model = model_for(&d, 9, 0.2);
    assert_eq!(evaluate(&model, &back, &[], 16).unwrap(), evaluate(&model, &d, &[], 16).unwrap());
}
