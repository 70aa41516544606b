use dlformer::checkpoint::{Checkpoint, Provenance, TrainingMeta};
use dlformer::data::{make_windows, prepare_splits, SeriesTable, WindowSample, DEFAULT_SPLIT};
use dlformer::explain::{extract_explanation, per_horizon_explanations, ExplanationMap};
use dlformer::metrics::evaluate;
use dlformer::model::{DLFormer, ModelConfig};
use dlformer::synth::{generate, Generator};
use dlformer::training::{dataset_mse, train, TrainConfig, TrainError};

fn toy() -> ModelConfig {
    ModelConfig::new(2, 3, 2)
        .with_reference(2)
        .with_embed(8)
        .with_heads(2, 4)
        .with_blocks(1, 1)
}

fn table_from(cols: Vec<Vec<f64>>) -> SeriesTable {
    let k = cols.len();
    let names: Vec<String> = (0..k - 1).map(|i| format!("x{}", i + 1)).chain(["y".into()]).collect();
    let rows = (0..cols[0].len()).map(|t| cols.iter().map(|c| c[t]).collect()).collect();
    SeriesTable::new(names, "y", rows, None).unwrap()
}

fn windows(table: &SeriesTable, cfg: &ModelConfig) -> Vec<WindowSample> {
    make_windows(table, &cfg.window()).unwrap()
}

fn noise_table(rows: usize, seed: u64) -> SeriesTable {
    generate(&Generator::RandomWalk { sigma: 1.0 }, rows, 2, seed).unwrap().table
}

#[test]
fn constant_target_is_learned_through_the_bias() {
    let cfg = toy();
    let x: Vec<f64> = (0..80).map(|t| (t as f64 * 0.3).sin()).collect();
    let table = table_from(vec![x, vec![0.7; 80]]);
    let ws = windows(&table, &cfg);
    let tc = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 16,
        max_epochs: 50,
        patience: 50,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(DLFormer::new(cfg, 1).unwrap(), &ws, &ws, &tc, |_| {}).unwrap();
    let m = dataset_mse(&out.model, &ws, 64).unwrap();
    assert!(m <= 1e-3, "train mse {m}");
}

#[test]
fn early_stop_returns_first_epoch_when_validation_only_worsens() {
    let cfg = toy();
    let x: Vec<f64> = (0..40).map(|t| (t as f64).cos()).collect();
    let up = windows(&table_from(vec![x.clone(), vec![5.0; 40]]), &cfg);
    let down = windows(&table_from(vec![x, vec![-5.0; 40]]), &cfg);
    let tc = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        max_epochs: 20,
        patience: 1,
        seed: 2,
        ..TrainConfig::default()
    };
    let mut seen = Vec::new();
    let out = train(DLFormer::new(cfg, 2).unwrap(), &up, &down, &tc, |r| seen.push(r.clone())).unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(seen, out.history);
    assert!(out.stopped_early);
    assert_eq!(out.best_epoch, 1);
    assert!(out.history[1].valid_mse > out.history[0].valid_mse);
    let v = dataset_mse(&out.model, &down, 64).unwrap();
    assert_eq!(v, out.history[0].valid_mse);
}

#[test]
fn training_is_deterministic_and_keeps_the_best() {
    let cfg = ModelConfig::new(2, 3, 1)
        .with_embed(8)
        .with_heads(2, 4)
        .with_blocks(1, 1);
    let table = generate(&Generator::LaggedCopy { j: 1, tau: 1, sigma: 0.05 }, 200, 2, 5).unwrap().table;
    let splits = prepare_splits(&table, DEFAULT_SPLIT, cfg.window().min_rows(), true).unwrap();
    let tr = windows(&splits.train, &cfg);
    let va = windows(&splits.valid, &cfg);
    let tc = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        max_epochs: 40,
        patience: 40,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(DLFormer::new(cfg.clone(), 9).unwrap(), &tr, &va, &tc, |_| {}).unwrap();
    let b = train(DLFormer::new(cfg, 9).unwrap(), &tr, &va, &tc, |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params().fingerprint(), b.model.params().fingerprint());
    for r in &a.history {
        assert!(a.best_valid_mse <= r.valid_mse);
    }
    assert_eq!(dataset_mse(&a.model, &va, 64).unwrap(), a.best_valid_mse);
    let first = a.history[0].train_mse;
    let last = a.history.last().unwrap().train_mse;
    assert!(first / last >= 10.0, "train mse {first} -> {last}");
}

#[test]
fn threaded_gradients_match_serial_ones() {
    let cfg = toy();
    let ws = windows(&noise_table(60, 3), &cfg);
    let model = DLFormer::new(cfg, 3).unwrap();
    let batch: Vec<&WindowSample> = ws.iter().take(10).collect();
    let (l1, g1) = dlformer::training::batch_gradients(&model, &batch, 1).unwrap();
    let (l3, g3) = dlformer::training::batch_gradients(&model, &batch, 3).unwrap();
    assert!((l1 - l3).abs() < 1e-12);
    for (a, b) in g1.iter().zip(&g3) {
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

#[test]
fn empty_datasets_are_rejected() {
    let cfg = toy();
    let ws = windows(&noise_table(30, 1), &cfg);
    let m = DLFormer::new(cfg, 0).unwrap();
    assert!(matches!(
        train(m.clone(), &[], &ws, &TrainConfig::default(), |_| {}),
        Err(TrainError::EmptyDataset(_))
    ));
    assert!(train(m, &ws, &[], &TrainConfig::default(), |_| {}).is_err());
}

fn names() -> Vec<String> {
    vec!["x1".into(), "y".into()]
}

#[test]
fn explanation_of_one_and_two_samples() {
    let cfg = toy();
    let model = DLFormer::new(cfg.clone(), 4).unwrap();
    let ws = windows(&noise_table(30, 4), &cfg);
    let before = model.params().fingerprint();

    let one = extract_explanation(&model, &ws[..1], &names()).unwrap();
    let (_, rec) = model.forward(&ws[0]).unwrap();
    let rec = rec.unwrap();
    assert_eq!(one.weights.as_slice(), rec.last_row());
    assert_eq!(one.sample_count, 1);
    assert_eq!(one.row, 3);

    let two = extract_explanation(&model, &ws[..2], &names()).unwrap();
    let (_, rec2) = model.forward(&ws[1]).unwrap();
    let rec2 = rec2.unwrap();
    for p in 0..6 {
        let want = (rec.last_row()[p] + rec2.last_row()[p]) / 2.0;
        assert!((two.weights[p] - want).abs() < 1e-15);
    }

    let all = extract_explanation(&model, &ws, &names()).unwrap();
    assert!((all.total() - 1.0).abs() <= 1e-6);
    assert!(all.weights.iter().all(|&w| w >= 0.0));
    let fi = all.aggregate_by_feature();
    assert!((fi.weights.iter().sum::<f64>() - all.total()).abs() < 1e-12);
    let concat: Vec<f64> = all.lag_profiles().into_iter().flat_map(|p| p.weights).collect();
    assert_eq!(concat, all.weights);
    assert_eq!(model.params().fingerprint(), before);

    let rows = per_horizon_explanations(&model, &ws, &names()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].weights, all.weights);
    assert_eq!(rows[0].row, 2);
}

#[test]
fn explanation_edge_cases() {
    let cfg = toy();
    let ws = windows(&noise_table(30, 5), &cfg);
    let zero = DLFormer::zeros(cfg.clone()).unwrap();
    let m = extract_explanation(&zero, &ws, &names()).unwrap();
    assert!(m.weights.iter().all(|&w| (w - 1.0 / 6.0).abs() < 1e-15));
    assert!(extract_explanation(&zero, &[], &names()).is_err());
    let no_dec = DLFormer::new(cfg.with_blocks(1, 0), 1).unwrap();
    assert!(extract_explanation(&no_dec, &ws, &names()).is_err());
}

#[test]
fn explanation_exports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy();
    let model = DLFormer::new(cfg.clone(), 6).unwrap();
    let ws = windows(&noise_table(30, 6), &cfg);
    let m = extract_explanation(&model, &ws, &names()).unwrap();
    let prov = Provenance::new("abc", 6);

    let json = dir.path().join("e.json");
    m.write_json(&json, &prov).unwrap();
    let back = ExplanationMap::read_json(&json).unwrap();
    for (a, b) in back.weights.iter().zip(&m.weights) {
        assert!((a - b).abs() <= 1e-12);
    }

    let csv_path = dir.path().join("e.csv");
    m.write_csv(&csv_path, None, &prov).unwrap();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(&csv_path)
        .unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6);
    let total: f64 = rows.iter().map(|r| r[2].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert_eq!(&rows[0][0], "x1");
    assert_eq!(&rows[0][1], "1");

    m.write_csv(&csv_path, Some(4), &prov).unwrap();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(&csv_path)
        .unwrap();
    let w: Vec<f64> = rdr.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert_eq!(w.len(), 4);
    assert!(w.windows(2).all(|p| p[0] >= p[1]));
}

#[test]
fn checkpoint_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy();
    let table = noise_table(60, 7);
    let splits = prepare_splits(&table, DEFAULT_SPLIT, cfg.window().min_rows(), true).unwrap();
    let te = windows(&splits.test, &cfg);
    let ck = Checkpoint {
        model: DLFormer::new(cfg, 7).unwrap(),
        feature_names: table.feature_names().to_vec(),
        target: "y".into(),
        normalizer: splits.normalizer.clone(),
        meta: TrainingMeta {
            epoch: 3,
            best_valid_mse: Some(1.5),
            seed: 7,
            extra: Default::default(),
        },
    };
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.normalizer, ck.normalizer);
    assert_eq!(back.model.predict(&te, 8).unwrap(), ck.model.predict(&te, 8).unwrap());
    let a = evaluate(&ck.model, &te, &ck.normalizer, 1, 8).unwrap();
    let b = evaluate(&back.model, &te, &back.normalizer, 1, 8).unwrap();
    assert_eq!(a, b);
}
