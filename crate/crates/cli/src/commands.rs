use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use dlformer::checkpoint::{config_hash, Checkpoint, CheckpointError, Provenance, TrainingMeta, FORMAT_VERSION};
use dlformer::data::{
    chronological_split, latest_window, load_csv, make_windows, prepare_splits, DataError, LoadOptions,
    SeriesTable, WindowSample, DEFAULT_SPLIT,
};
use dlformer::explain::{extract_explanation, per_horizon_explanations, write_feature_importance_csv};
use dlformer::metrics::{evaluate, lag_sweep, MetricReport};
use dlformer::model::DLFormer;
use dlformer::synth::{self, Generator};
use dlformer::training::{train as run_training, EpochRecord, TrainConfig, TrainError};
use serde_json::json;

use crate::config::RunConfig;
use crate::{EvalArgs, ExplainArgs, Format, InspectArgs, PredictArgs, Split, SynthArgs, TrainArgs};

/// An error with the process exit code it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

type Outcome = std::result::Result<(), Failure>;

const USAGE: u8 = 2;
const RUNTIME: u8 = 1;

trait Classify<T> {
    fn usage(self) -> std::result::Result<T, Failure>;
    fn runtime(self) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn usage(self) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure {
            code: USAGE,
            error: e.into(),
        })
    }

    fn runtime(self) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure {
            code: RUNTIME,
            error: e.into(),
        })
    }
}

/// Column and shape problems are the caller's to fix; everything else is a
/// runtime failure.
fn data_failure(e: DataError) -> Failure {
    let code = match e {
        DataError::MissingColumn { .. }
        | DataError::DuplicateColumn(_)
        | DataError::InvalidRatios(_)
        | DataError::DegenerateSplit { .. }
        | DataError::TooShort { .. }
        | DataError::InvalidWindow(_) => USAGE,
        _ => RUNTIME,
    };
    Failure {
        code,
        error: e.into(),
    }
}

fn checkpoint_failure(e: CheckpointError) -> Failure {
    let code = match e {
        CheckpointError::Version { .. } | CheckpointError::Mismatch(_) | CheckpointError::BadMagic => USAGE,
        _ => RUNTIME,
    };
    Failure {
        code,
        error: e.into(),
    }
}

fn load_table(path: &Path, target: &str) -> std::result::Result<SeriesTable, Failure> {
    load_csv(path, target, &LoadOptions::default()).map_err(data_failure)
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()
}

pub fn train(a: TrainArgs) -> Outcome {
    let mut sets = a.sets.clone();
    if let Some(d) = &a.data {
        sets.push(format!("data={}", toml_str(&d.display().to_string())));
    }
    if let Some(t) = &a.target {
        sets.push(format!("target={}", toml_str(t)));
    }
    if let Some(o) = &a.out {
        sets.push(format!("output_dir={}", toml_str(&o.display().to_string())));
    }
    if let Some(s) = a.seed {
        sets.push(format!("seed={s}"));
    }
    if let Some(t) = a.threads {
        sets.push(format!("threads={t}"));
    }
    let cfg = RunConfig::load(a.config.as_deref(), &sets).usage()?;
    let data_path = cfg.data_path().usage()?.to_path_buf();
    let table = load_table(&data_path, cfg.target_name().usage()?)?;
    let model_cfg = cfg.model_config(table.num_features());
    model_cfg.validate().usage()?;
    let splits = prepare_splits(&table, cfg.split, model_cfg.window().min_rows(), cfg.normalize).map_err(data_failure)?;
    let spec = model_cfg.window();
    let tr = make_windows(&splits.train, &spec).map_err(data_failure)?;
    let va = make_windows(&splits.valid, &spec).map_err(data_failure)?;
    let train_cfg = cfg.train_config();
    let hash = config_hash(&model_cfg, table.feature_names(), table.target_name());
    let provenance = Provenance::new(hash, cfg.seed);

    create_dir(&cfg.output_dir)?;
    let log_path = cfg.output_dir.join("metrics.csv");
    let mut log = File::create(&log_path)
        .and_then(|mut f| {
            writeln!(f, "{}", provenance.comment_line())?;
            writeln!(f, "{}", EpochRecord::CSV_HEADER)?;
            drop(f);
            OpenOptions::new().append(true).open(&log_path)
        })
        .with_context(|| format!("opening {}", log_path.display()))
        .runtime()?;
    let mut log_err = None;
    let quiet = a.quiet;
    let model = DLFormer::new(model_cfg.clone(), cfg.seed).runtime()?;
    let result = run_training(model, &tr, &va, &train_cfg, |r| {
        if let Err(e) = writeln!(log, "{}", r.csv_row()).and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
        if !quiet {
            println!(
                "epoch {:>4}  train_mse {:.6e}  valid_mse {:.6e}{}",
                r.epoch,
                r.train_mse,
                r.valid_mse,
                if r.is_best { "  *" } else { "" }
            );
        }
    });
    if let Some(e) = log_err {
        return Err(e).context("writing metrics log").runtime();
    }
    let mut extra = serde_json::Map::new();
    let stored_path = std::fs::canonicalize(&data_path).unwrap_or_else(|_| data_path.clone());
    extra.insert("data".into(), json!(stored_path));
    extra.insert("split".into(), json!(cfg.split));
    extra.insert("normalize".into(), json!(cfg.normalize));
    extra.insert("explain_split".into(), json!(cfg.explain_split));
    extra.insert("train_config".into(), serde_json::to_value(&train_cfg).expect("serializable"));
    let ckpt_path = cfg.output_dir.join("model.ckpt");
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            reason,
            last_good,
        }) => {
            let ck = Checkpoint {
                model: last_good.model,
                feature_names: table.feature_names().to_vec(),
                target: table.target_name().to_string(),
                normalizer: splits.normalizer.clone(),
                meta: TrainingMeta {
                    epoch: last_good.best_epoch,
                    best_valid_mse: last_good.best_valid_mse.is_finite().then_some(last_good.best_valid_mse),
                    seed: cfg.seed,
                    extra,
                },
            };
            ck.save(&ckpt_path).runtime()?;
            return Err(anyhow!(
                "training diverged at epoch {epoch} ({reason}); last good weights saved to {}",
                ckpt_path.display()
            ))
            .runtime();
        }
        Err(e) => return Err(e).runtime(),
    };
    let ck = Checkpoint {
        model: outcome.model,
        feature_names: table.feature_names().to_vec(),
        target: table.target_name().to_string(),
        normalizer: splits.normalizer.clone(),
        meta: TrainingMeta {
            epoch: outcome.best_epoch,
            best_valid_mse: Some(outcome.best_valid_mse),
            seed: cfg.seed,
            extra,
        },
    };
    ck.save(&ckpt_path).runtime()?;

    let cell = evaluate(&ck.model, &va, &splits.normalizer, table.target_index(), train_cfg.batch_size).runtime()?;
    let summary = json!({
        "provenance": provenance,
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_valid_mse": outcome.best_valid_mse,
        "stopped_early": outcome.stopped_early,
        "valid_metrics": cell,
        "config": cfg,
    });
    let summary_path = cfg.output_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("json") + "\n").runtime()?;
    println!(
        "best epoch {} of {}; valid rmse {:.6} r2 {} dtw {:.6}",
        outcome.best_epoch,
        outcome.history.len(),
        cell.rmse,
        fmt_r2(cell.r2),
        cell.dtw
    );
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn fmt_r2(r2: Option<f64>) -> String {
    r2.map_or("undefined".into(), |v| format!("{v:.6}"))
}

fn load_checkpoint(path: &Path) -> std::result::Result<Checkpoint, Failure> {
    Checkpoint::load(path)
        .map_err(|e| {
            let mut f = checkpoint_failure(e);
            f.error = f.error.context(format!("loading checkpoint {}", path.display()));
            f
        })
}

fn stored<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Option<T> {
    ck.meta.extra.get(key).and_then(|v| serde_json::from_value(v.clone()).ok())
}

/// Data the checkpoint applies to: raw table, columns checked.
fn checkpoint_data(ck: &Checkpoint, data: Option<&Path>) -> std::result::Result<(PathBuf, SeriesTable), Failure> {
    let path = match data {
        Some(p) => p.to_path_buf(),
        None => stored::<PathBuf>(ck, "data")
            .ok_or_else(|| anyhow!("checkpoint records no data path; pass --data"))
            .usage()?,
    };
    let table = load_table(&path, &ck.target)?;
    ck.check_columns(table.feature_names(), table.target_name())
        .map_err(checkpoint_failure)?;
    Ok((path, table))
}

/// Chronological split of `table` normalized with the checkpoint's statistics.
fn checkpoint_split(ck: &Checkpoint, table: &SeriesTable, split: Split) -> std::result::Result<Vec<WindowSample>, Failure> {
    let ratios = stored::<[f64; 3]>(ck, "split").unwrap_or(DEFAULT_SPLIT);
    let spec = ck.model.config().window();
    let (tr, va, te) = chronological_split(table, ratios, spec.min_rows()).map_err(data_failure)?;
    let part = match split {
        Split::Train => tr,
        Split::Valid => va,
        Split::Test => te,
    };
    make_windows(&ck.normalizer.apply(&part), &spec).map_err(data_failure)
}

pub fn eval(a: EvalArgs) -> Outcome {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (data_path, table) = checkpoint_data(&ck, a.data.as_deref())?;
    let out_dir = a.out.clone().unwrap_or_else(|| parent_dir(&a.checkpoint));
    create_dir(&out_dir)?;
    let provenance = ck.provenance();
    let run = json!({
        "checkpoint": a.checkpoint,
        "data": data_path,
        "split": a.split.name(),
        "model_config": ck.model.config(),
        "feature_names": ck.feature_names,
        "target": ck.target,
    });
    if a.sweep {
        let mut tc: TrainConfig = stored(&ck, "train_config").unwrap_or_default();
        if let Some(t) = a.threads {
            tc.threads = t;
        }
        let ratios = stored::<[f64; 3]>(&ck, "split").unwrap_or(DEFAULT_SPLIT);
        let normalize = stored::<bool>(&ck, "normalize").unwrap_or(true);
        let need = a.lags.iter().max().copied().unwrap_or(1) + a.horizons.iter().max().copied().unwrap_or(1);
        let splits = prepare_splits(&table, ratios, need, normalize).map_err(data_failure)?;
        let report = lag_sweep(&splits, &a.lags, &a.horizons, ck.model.config(), &tc, provenance, |c| {
            println!(
                "L={:<3} T={:<3} rmse {:.6} r2 {} dtw {:.6}",
                c.lags,
                c.horizon,
                c.rmse,
                fmt_r2(c.r2),
                c.dtw
            )
        })
        .map_err(|e| match e {
            dlformer::metrics::MetricError::Model(m) => Failure {
                code: USAGE,
                error: m.into(),
            },
            other => Failure {
                code: RUNTIME,
                error: other.into(),
            },
        })?;
        let mut run = run;
        run["train_config"] = serde_json::to_value(&tc).expect("json");
        report.write_csv(out_dir.join("sweep.csv")).runtime()?;
        report.write_json(out_dir.join("sweep.json"), &run).runtime()?;
        println!("wrote {}", out_dir.join("sweep.csv").display());
        return Ok(());
    }
    let samples = checkpoint_split(&ck, &table, a.split)?;
    let cell = evaluate(&ck.model, &samples, &ck.normalizer, table.target_index(), 64).runtime()?;
    let report = MetricReport {
        provenance,
        lags: vec![cell.lags],
        horizons: vec![cell.horizon],
        cells: vec![cell.clone()],
    };
    report.write_csv(out_dir.join("report.csv")).runtime()?;
    report.write_json(out_dir.join("report.json"), &run).runtime()?;
    println!(
        "{} split ({} windows): rmse {:.6} r2 {} dtw {:.6}",
        a.split.name(),
        cell.samples,
        cell.rmse,
        fmt_r2(cell.r2),
        cell.dtw
    );
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn explain(a: ExplainArgs) -> Outcome {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (_, table) = checkpoint_data(&ck, a.data.as_deref())?;
    let split = a.split.unwrap_or_else(|| match stored::<String>(&ck, "explain_split").as_deref() {
        Some("train") => Split::Train,
        Some("valid") => Split::Valid,
        _ => Split::Test,
    });
    let samples = checkpoint_split(&ck, &table, split)?;
    let out_dir = a.out.clone().unwrap_or_else(|| parent_dir(&a.checkpoint));
    create_dir(&out_dir)?;
    let prov = ck.provenance();
    let map = extract_explanation(&ck.model, &samples, &ck.feature_names).runtime()?;
    let csv = a.format != Format::Json;
    let js = a.format != Format::Csv;
    if csv {
        map.write_csv(out_dir.join("explanation.csv"), a.top, &prov).runtime()?;
        write_feature_importance_csv(&map.aggregate_by_feature(), out_dir.join("feature_importance.csv"), &prov)
            .runtime()?;
    }
    if js {
        map.write_json(out_dir.join("explanation.json"), &prov).runtime()?;
    }
    if a.per_horizon {
        for (step, m) in per_horizon_explanations(&ck.model, &samples, &ck.feature_names)
            .runtime()?
            .iter()
            .enumerate()
        {
            if csv {
                m.write_csv(out_dir.join(format!("explanation_step{}.csv", step + 1)), a.top, &prov)
                    .runtime()?;
            }
            if js {
                m.write_json(out_dir.join(format!("explanation_step{}.json", step + 1)), &prov)
                    .runtime()?;
            }
        }
    }
    let fi = map.aggregate_by_feature();
    println!("{} windows from the {} split", map.sample_count, split.name());
    println!("feature importance:");
    for (f, w) in fi.features.iter().zip(&fi.weights) {
        println!("  {f:<20} {w:.6}");
    }
    println!("top pairs:");
    for (rank, p) in map.top_k(a.top.unwrap_or(10)).iter().enumerate() {
        println!("  {:>3}. {:<20} lag {:<4} {:.6}", rank + 1, p.feature, p.lag, p.weight);
    }
    Ok(())
}

pub fn predict(a: PredictArgs) -> Outcome {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (_, table) = checkpoint_data(&ck, a.data.as_deref())?;
    let spec = ck.model.config().window();
    let window = latest_window(&ck.normalizer.apply(&table), &spec).map_err(data_failure)?;
    let (pred, _) = ck.model.forward(&window).runtime()?;
    let target = table.target_index();
    let values: Vec<f64> = pred.iter().map(|&v| ck.normalizer.invert_value(target, v)).collect();
    let out = a.out.clone().unwrap_or_else(|| parent_dir(&a.checkpoint).join("forecast.csv"));
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(d)?;
    }
    let mut f = File::create(&out).with_context(|| format!("creating {}", out.display())).runtime()?;
    let mut text = format!("{}\nstep,{}\n", ck.provenance().comment_line(), ck.target);
    for (i, v) in values.iter().enumerate() {
        text.push_str(&format!("{},{}\n", i + 1, v));
    }
    f.write_all(text.as_bytes()).runtime()?;
    for (i, v) in values.iter().enumerate() {
        println!("t+{} {}", i + 1, v);
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Outcome {
    let g: Generator = a.spec.parse().usage()?;
    let data = synth::generate(&g, a.rows, a.features, a.seed).usage()?;
    if let Some(d) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(d)?;
    }
    synth::write(&data, &a.out).runtime()?;
    println!(
        "wrote {} rows x {} columns to {} (metadata {})",
        a.rows,
        a.features,
        a.out.display(),
        synth::meta_path(&a.out).display()
    );
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Outcome {
    let ck = load_checkpoint(&a.checkpoint)?;
    let params = ck.model.params();
    let doc = json!({
        "format_version": FORMAT_VERSION,
        "provenance": ck.provenance(),
        "feature_names": ck.feature_names,
        "target": ck.target,
        "model_config": ck.model.config(),
        "meta": ck.meta,
        "tensors": params.len(),
        "scalars": params.num_scalars(),
        "fingerprint": params.fingerprint(),
    });
    if a.json {
        println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
        return Ok(());
    }
    let c = ck.model.config();
    println!("checkpoint      {}", a.checkpoint.display());
    println!("format version  {FORMAT_VERSION}");
    println!("artifact        dlformer {}", ck.provenance().version);
    println!("config hash     {}", ck.config_hash());
    println!("columns         {} (target {})", ck.feature_names.join(", "), ck.target);
    println!(
        "geometry        k={} L={} T={} r={}",
        c.features, c.lags, c.horizon, c.reference
    );
    println!(
        "architecture    d_E={} d_A={} h={} n={} m={} d_ff={} d_head={}",
        c.d_embed, c.d_attn, c.heads, c.encoder_blocks, c.decoder_blocks, c.d_ff, c.d_head
    );
    println!("best epoch      {}", ck.meta.epoch);
    if let Some(v) = ck.meta.best_valid_mse {
        println!("best valid mse  {v}");
    }
    println!("seed            {}", ck.meta.seed);
    println!("parameters      {} tensors, {} scalars", params.len(), params.num_scalars());
    println!("fingerprint     {}", params.fingerprint());
    Ok(())
}
