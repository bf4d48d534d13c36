mod common;

use sha2::{Digest, Sha256};
use syngrid_core::dataset::generate_corpus;
use syngrid_core::eval::{config_hash, evaluate, exact_match, ConstantEos, OraclePredictor};
use syngrid_core::gridworld::Action;
use syngrid_core::model::Model;
use syngrid_core::tensor::Adam;
use syngrid_core::train::{prepare, train, train_step, TrainConfig};

#[test]
fn fixed_batch_loss_strictly_decreases() {
    let cfg = common::mini_config(0.0);
    let episodes = generate_corpus(6, 32, 2).unwrap();
    let examples = prepare(&episodes, &cfg).unwrap();
    let batch: Vec<_> = examples.iter().collect();
    let mut model = Model::<f32>::new(cfg, 0).unwrap();
    let mut adam = Adam::new(3e-4);
    let losses: Vec<f64> = (0..51).map(|s| train_step(&mut model, &mut adam, &batch, s).unwrap()).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn training_is_deterministic_in_f64() {
    let episodes = generate_corpus(9, 60, 2).unwrap();
    let tc = TrainConfig { lr: 1e-3, batch_size: 16, epochs: 2, seed: 4, f64_mode: true, ..TrainConfig::default() };
    let cfg = common::tiny_config();
    let a = train::<f64>(&episodes[..40], &episodes[40..], &cfg, &tc).unwrap();
    let b = train::<f64>(&episodes[..40], &episodes[40..], &cfg, &tc).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.to_bytes(), b.best.to_bytes());
    let best = a.history.iter().filter_map(|h| h.val_exact_match).fold(f64::MIN, f64::max);
    assert_eq!(best, a.best_val_exact_match);
    let first = a.history.iter().find(|h| h.val_exact_match == Some(best)).unwrap();
    assert_eq!(first.step, a.best_step);
}

#[test]
fn checkpoint_dir_gets_history_and_models() {
    let dir = tempfile::tempdir().unwrap();
    let episodes = generate_corpus(10, 30, 1).unwrap();
    let tc = TrainConfig { epochs: 1, batch_size: 8, checkpoint_dir: Some(dir.path().to_path_buf()), ..TrainConfig::default() };
    let out = train::<f32>(&episodes[..20], &episodes[20..], &common::tiny_config(), &tc).unwrap();
    let lines = std::fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), out.history.len());
    assert_eq!(Model::<f32>::load(&dir.path().join("best.ckpt")).unwrap().to_bytes(), out.best.to_bytes());
    assert!(dir.path().join("last.ckpt").exists());
}

#[test]
fn evaluation_leaves_parameters_alone() {
    let model = Model::<f32>::new(common::mini_config(0.1), 2).unwrap();
    let before = Sha256::digest(model.to_bytes());
    let eps = generate_corpus(12, 20, 2).unwrap();
    evaluate(&model, &[("x", eps.as_slice())], 0, "h").unwrap();
    assert_eq!(Sha256::digest(model.to_bytes()), before);
}

#[test]
fn reference_harnesses_and_recount() {
    let eps = generate_corpus(13, 40, 2).unwrap();
    let hash = config_hash("oracle");
    let (report, records) = evaluate(&OraclePredictor, &[("a", &eps[..25]), ("b", &eps[25..])], 0, &hash).unwrap();
    assert!(report.splits.iter().all(|s| s.exact_match == 100.0));
    let (report, _) = evaluate(&ConstantEos, &[("a", eps.as_slice())], 0, &hash).unwrap();
    assert_eq!(report.splits[0].exact_match, 0.0);

    let model = Model::<f32>::new(common::tiny_config(), 0).unwrap();
    let (report, records_m) = evaluate(&model, &[("a", &eps[..25]), ("b", &eps[25..])], 1, "h").unwrap();
    for s in &report.splits {
        let rows: Vec<_> = records_m.iter().filter(|r| r.split == s.split).collect();
        let pct = 100.0 * rows.iter().filter(|r| r.correct).count() as f64 / rows.len() as f64;
        assert_eq!((pct * 100.0).round() / 100.0, s.exact_match);
        assert_eq!(rows.len(), s.count);
    }
    assert_eq!(records.len(), 40);
}

#[test]
fn exact_match_is_reflexive_and_symmetric() {
    let a = [Action::Walk, Action::TurnLeft];
    let b = [Action::Walk];
    assert!(exact_match(&a, &a));
    assert_eq!(exact_match(&a, &b), exact_match(&b, &a));
}
