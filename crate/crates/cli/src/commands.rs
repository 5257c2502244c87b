use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use spikenorm::checkpoint::{config_hash, Checkpoint};
use spikenorm::data::{balanced_subset, split_indices, EventDataset, ImageDataset, Partition};
use spikenorm::model::{assemble, Model};
use spikenorm::norm::effective_threshold;
use spikenorm::synth::{write_event_dataset, write_image_dataset, SynthSpec};
use spikenorm::training::{evaluate, train, SampleSource};

use crate::config::{Dataset, RunConfig};
use crate::error::{CliError, CliResult};
use crate::report::{
    diag_csv, metrics_csv, sweep_csv, DiagRow, EvalSummary, SweepRow, TrainSummary, EVAL_SCHEMA, SUMMARY_SCHEMA,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SWEEP_FILE: &str = "sweep.csv";

const CLASSES: usize = 10;

/// One partition of a dataset.
pub fn load_partition(dataset: Dataset, root: &Path, part: Partition, seed: u64) -> CliResult<Box<dyn SampleSource>> {
    let loaded: spikenorm::Result<Box<dyn SampleSource>> = match dataset {
        Dataset::NMnist => EventDataset::load(root, part).map(|d| Box::new(d) as Box<dyn SampleSource>),
        Dataset::FMnist => ImageDataset::load(root, part, seed).map(|d| Box::new(d) as Box<dyn SampleSource>),
    };
    loaded.map_err(|e| CliError::Data(e.to_string()))
}

/// Class-balanced subset of `n` samples, or everything when `n` is `None`.
fn subset(data: &dyn SampleSource, n: Option<usize>) -> CliResult<Vec<usize>> {
    let Some(n) = n else {
        return Ok((0..data.len()).collect());
    };
    let labels: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
    let mut idx = balanced_subset(&labels, CLASSES, n.div_ceil(CLASSES), 0);
    if idx.len() < n {
        return Err(CliError::Data(format!("asked for {n} samples, dataset has {} usable", idx.len())));
    }
    idx.truncate(n);
    Ok(idx)
}

pub struct Splits {
    pub train: Box<dyn SampleSource>,
    pub test: Box<dyn SampleSource>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

pub fn load_splits(cfg: &RunConfig) -> CliResult<Splits> {
    let root = cfg.data_root()?;
    let train = load_partition(cfg.dataset, &root, Partition::Train, cfg.seed)?;
    let test = load_partition(cfg.dataset, &root, Partition::Test, cfg.seed)?;
    let pool = subset(train.as_ref(), cfg.train_samples)?;
    let (keep, val) = split_indices(pool.len(), cfg.val_samples, cfg.seed)?;
    let mut train_idx: Vec<usize> = keep.iter().map(|&k| pool[k]).collect();
    let mut val_idx: Vec<usize> = val.iter().map(|&k| pool[k]).collect();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let test_idx = subset(test.as_ref(), cfg.test_samples)?;
    Ok(Splits { train, test, train_idx, val_idx, test_idx })
}

pub fn build_model(cfg: &RunConfig) -> CliResult<Model> {
    Ok(assemble(&cfg.network()?, &cfg.model_config(), cfg.seed)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Trains, then writes `metrics.csv`, `summary.json`, and `checkpoint.json`
/// (parameters from the best validation epoch) into `out_dir`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> CliResult<TrainSummary> {
    let started = Instant::now();
    cfg.validate()?;
    let data = load_splits(cfg)?;
    let mut model = build_model(cfg)?;
    fs::create_dir_all(out_dir)?;
    log::info!(
        "training {} ({} parameters) on {} samples, {} validation, {} test",
        model.spec().render(),
        model.param_count(),
        data.train_idx.len(),
        data.val_idx.len(),
        data.test_idx.len()
    );
    let outcome = train(&mut model, data.train.as_ref(), &data.train_idx, &data.val_idx, &cfg.train_config(), |m| {
        log::info!(
            "epoch {}: train loss {:.4} acc {:.4} | val acc {:.4} rate {:.5}",
            m.epoch,
            m.train_loss,
            m.train_accuracy,
            m.val.accuracy,
            m.val.total_rate
        );
    })?;
    fs::write(out_dir.join(METRICS_FILE), metrics_csv(&outcome.epochs))?;
    model.load_state(&outcome.best_state)?;
    Checkpoint::capture(&model, outcome.best_epoch, outcome.best_state.clone(), Some(outcome.optimizer.clone()))
        .save(&out_dir.join(CHECKPOINT_FILE))?;
    let test = evaluate(&mut model, data.test.as_ref(), &data.test_idx, cfg.batch_size, &cfg.loss())?;
    log::info!("test accuracy {:.4}, total firing rate {:.5}", test.accuracy, test.total_rate);
    let summary = TrainSummary {
        schema: SUMMARY_SCHEMA.into(),
        architecture: cfg.architecture.clone(),
        canonical_architecture: model.spec().render(),
        config_hash: config_hash(model.spec(), model.config()),
        weighted_layers: model.weighted_layer_count(),
        hidden_layers: model.hidden_layer_count(),
        parameters: model.param_count(),
        config: cfg.clone(),
        train_samples: data.train_idx.len(),
        epochs: outcome.epochs,
        best_epoch: outcome.best_epoch,
        test,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Evaluates a checkpoint on the test split. With `cfg_model`, the model is
/// built from that configuration and must match the checkpoint.
pub fn cmd_eval(
    checkpoint: &Path,
    data_cfg: &RunConfig,
    cfg_model: bool,
    out: Option<&Path>,
) -> CliResult<EvalSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut model = if cfg_model {
        let mut m = build_model(data_cfg)?;
        ck.apply_to(&mut m)?;
        m
    } else {
        ck.restore()?
    };
    let t_steps = model.config().t_steps;
    let test = load_partition(data_cfg.dataset, &data_cfg.data_root()?, Partition::Test, data_cfg.seed)?;
    let idx = subset(test.as_ref(), data_cfg.test_samples)?;
    let loss = spikenorm::training::LossSpec::for_window(t_steps);
    let report = evaluate(&mut model, test.as_ref(), &idx, data_cfg.batch_size, &loss)?;
    let summary = EvalSummary {
        schema: EVAL_SCHEMA.into(),
        architecture: ck.architecture.clone(),
        config_hash: ck.config_hash.clone(),
        report,
    };
    if let Some(path) = out {
        write_json(path, &summary)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    TauS,
    Lambda,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::TauS => "tau_s",
            SweepParam::Lambda => "lambda",
        }
    }

    fn apply(self, cfg: &mut RunConfig, v: f64) {
        match self {
            SweepParam::TauS => cfg.tau_s = v,
            SweepParam::Lambda => cfg.lambda = v,
        }
    }
}

/// One training run per value with a shared seed; writes `sweep.csv` plus a
/// run directory per value.
pub fn cmd_sweep(
    param: SweepParam,
    values: &[f64],
    base: &RunConfig,
    out_dir: &Path,
    parallel: bool,
) -> CliResult<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let runs: Vec<(f64, RunConfig, PathBuf)> = values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            param.apply(&mut cfg, v);
            (v, cfg, out_dir.join(format!("{}-{v}", param.name())))
        })
        .collect();
    let results: Vec<CliResult<TrainSummary>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = runs.iter().map(|(_, cfg, dir)| s.spawn(move || cmd_train(cfg, dir))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep run panicked")).collect()
        })
    } else {
        runs.iter().map(|(_, cfg, dir)| cmd_train(cfg, dir)).collect()
    };
    let mut rows = Vec::with_capacity(runs.len());
    for ((v, _, _), r) in runs.iter().zip(results) {
        let s = r?;
        rows.push(SweepRow {
            param: param.name().into(),
            value: *v,
            accuracy: s.test.accuracy,
            total_rate: s.test.total_rate,
        });
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(SWEEP_FILE), sweep_csv(&rows))?;
    Ok(rows)
}

/// Effective threshold over every `(lambda, theta, moment)` combination.
pub fn cmd_diag_threshold(lambdas: &[f64], thetas: &[f64], moments: &[f64], refractory: f64) -> CliResult<String> {
    if lambdas.is_empty() || thetas.is_empty() || moments.is_empty() {
        return Err(CliError::Config("diag-threshold grids must be non-empty".into()));
    }
    if lambdas.iter().chain(moments).any(|&v| !(v >= 0.0)) || thetas.iter().any(|&v| !(v > 0.0)) {
        return Err(CliError::Config("lambda and moment must be >= 0 and theta > 0".into()));
    }
    let mut rows = Vec::new();
    for &lambda in lambdas {
        for &theta in thetas {
            for &moment in moments {
                rows.push(DiagRow {
                    lambda,
                    theta,
                    moment,
                    theta_hat: effective_threshold(moment, lambda, theta, refractory),
                });
            }
        }
    }
    Ok(diag_csv(&rows))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionStats {
    pub partition: String,
    pub samples: usize,
    pub per_class: Vec<usize>,
    /// Input spikes / (neurons * T), over the inspected samples.
    pub spike_rate: f64,
    pub inspected: usize,
}

/// Sample counts per class and the input spike rate at `cfg.time_steps`.
pub fn cmd_inspect_data(cfg: &RunConfig, inspect: usize) -> CliResult<Vec<PartitionStats>> {
    let root = cfg.data_root()?;
    let mut out = Vec::new();
    for (name, part) in [("train", Partition::Train), ("test", Partition::Test)] {
        let data = load_partition(cfg.dataset, &root, part, cfg.seed)?;
        let mut per_class = vec![0; CLASSES];
        for i in 0..data.len() {
            per_class[data.label(i).min(CLASSES - 1)] += 1;
        }
        let n = inspect.min(data.len());
        let (mut spikes, mut slots) = (0usize, 0usize);
        for i in 0..n {
            let s = data.spikes(i, cfg.time_steps)?;
            spikes += s.count();
            slots += s.shape().len();
        }
        out.push(PartitionStats {
            partition: name.into(),
            samples: data.len(),
            per_class,
            spike_rate: if slots > 0 { spikes as f64 / slots as f64 } else { 0.0 },
            inspected: n,
        });
    }
    Ok(out)
}

/// Writes a procedural stand-in dataset in the real on-disk layout.
pub fn cmd_synth_data(dataset: Dataset, root: &Path, spec: SynthSpec) -> CliResult<()> {
    match dataset {
        Dataset::NMnist => write_event_dataset(root, spec)?,
        Dataset::FMnist => write_image_dataset(root, spec)?,
    }
    Ok(())
}
