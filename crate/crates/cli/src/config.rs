//! Run configuration: per-dataset defaults, TOML files, and `key=value`
//! overrides, all merged through the same TOML table so every field can be
//! set from any of the three.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spikenorm::arch::{parse_architecture, NetworkSpec, Style};
use spikenorm::model::ModelConfig;
use spikenorm::norm::{AxesMode, NormForm, NormalizerConfig};
use spikenorm::surrogate::{BetaMode, SurrogateConfig};
use spikenorm::training::{AdaBeliefConfig, LossSpec, TrainConfig};

use crate::error::{CliError, CliResult};

/// Environment variable naming the dataset root.
pub const DATA_ROOT_ENV: &str = "SPIKENORM_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Dataset {
    /// Event recordings: `Train|Test/<digit>/*.bin`.
    NMnist,
    /// Static images: `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`.
    FMnist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub data_root: Option<PathBuf>,
    /// Kept exactly as written; the canonical form goes alongside it in reports.
    pub architecture: String,
    pub style: Style,

    pub tau_s: f64,
    pub tau_r: f64,
    pub alpha: f64,
    pub beta: f64,
    pub beta_mode: BetaMode,
    pub theta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub weight_scale: f64,
    pub batch_size: usize,
    pub time_steps: usize,
    pub epochs: usize,

    pub norm_form: NormForm,
    pub norm_axes: AxesMode,
    pub lambda: f64,
    pub momentum: f64,
    pub project_skip: bool,

    /// Spike-count targets; default `0.3 T` and `0.01 T`.
    pub true_count: Option<f64>,
    pub false_count: Option<f64>,

    pub seed: u64,
    /// Class-balanced training subset size; `None` uses the whole split.
    pub train_samples: Option<usize>,
    /// Held out of the training subset for checkpoint selection.
    pub val_samples: usize,
    /// Class-balanced test subset size; `None` uses the whole split.
    pub test_samples: Option<usize>,
    /// Random training samples drawn afresh each epoch.
    pub subsample: Option<usize>,
    pub micro_batch: Option<usize>,
}

impl RunConfig {
    /// Published hyperparameters for `dataset` with its PSP-LN reference network.
    pub fn defaults(dataset: Dataset) -> Self {
        let (architecture, time_steps) = match dataset {
            Dataset::NMnist => ("34x34x2-n8c3-{n16c3}*5-n16c3-{n32c3}*5-10", 300),
            Dataset::FMnist => ("34x34-n16c3-{n32c3}*5-n32c3-{n64c3}*5-10", 100),
        };
        Self {
            dataset,
            data_root: None,
            architecture: architecture.into(),
            style: Style::Plain,
            tau_s: 10.0,
            tau_r: 10.0,
            alpha: 10.0,
            beta: 10.0,
            beta_mode: BetaMode::Divide,
            theta: 10.0,
            lr: 1e-2,
            weight_decay: 1e-4,
            weight_scale: 10.0,
            batch_size: 10,
            time_steps,
            epochs: 100,
            norm_form: NormForm::Psp,
            norm_axes: AxesMode::Layer,
            lambda: 0.1,
            momentum: 0.9,
            project_skip: true,
            true_count: None,
            false_count: None,
            seed: 0,
            train_samples: None,
            val_samples: 0,
            test_samples: None,
            subsample: Some(6000),
            micro_batch: None,
        }
    }

    /// Builds a config from an optional TOML file and `key=value` overrides.
    /// The dataset (from the overrides, then the file, then `fallback`)
    /// picks the defaults the rest is layered on.
    pub fn resolve(file: Option<&Path>, overrides: &[String], fallback: Dataset) -> CliResult<Self> {
        let mut layers = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            layers.push(table);
        }
        let mut table = toml::Table::new();
        for item in overrides {
            let (key, value) = parse_override(item)?;
            table.insert(key, value);
        }
        layers.push(table);

        let mut dataset = fallback;
        for layer in &layers {
            if let Some(v) = layer.get("dataset") {
                dataset = v.clone().try_into().map_err(|e| CliError::Config(format!("dataset: {e}")))?;
            }
        }
        let mut merged = toml::Table::try_from(Self::defaults(dataset)).expect("defaults serialize");
        for layer in layers {
            merged.extend(layer);
        }
        let cfg: Self = merged.try_into().map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.network()?;
        self.model_config().validate()?;
        self.train_config().validate(self.time_steps)?;
        if self.epochs == 0 {
            return Err(CliError::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn network(&self) -> CliResult<NetworkSpec> {
        Ok(parse_architecture(&self.architecture)?.with_style(self.style)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            tau_s: self.tau_s,
            tau_r: self.tau_r,
            theta: self.theta,
            weight_scale: self.weight_scale,
            t_steps: self.time_steps,
            kernel_len: None,
            norm: NormalizerConfig {
                form: self.norm_form,
                axes: self.norm_axes,
                lambda: self.lambda,
                momentum: self.momentum,
            },
            surrogate: SurrogateConfig { alpha: self.alpha, beta: self.beta, beta_mode: self.beta_mode },
            project_skip: self.project_skip,
        }
    }

    pub fn loss(&self) -> LossSpec {
        let d = LossSpec::for_window(self.time_steps);
        LossSpec {
            true_count: self.true_count.unwrap_or(d.true_count),
            false_count: self.false_count.unwrap_or(d.false_count),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: AdaBeliefConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdaBeliefConfig::default() },
            loss: self.loss(),
            subsample: self.subsample,
            micro_batch: self.micro_batch,
            seed: self.seed,
        }
    }

    /// The dataset root from the config, else from [`DATA_ROOT_ENV`].
    pub fn data_root(&self) -> CliResult<PathBuf> {
        if let Some(p) = &self.data_root {
            return Ok(p.clone());
        }
        std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Data(format!("no dataset root: set data_root or {DATA_ROOT_ENV}")))
    }
}

/// `key=value`, where `value` is read as a TOML value and falls back to a
/// bare string (so `style=resnet_pre` works without quotes).
fn parse_override(item: &str) -> CliResult<(String, toml::Value)> {
    let (key, raw) =
        item.split_once('=').ok_or_else(|| CliError::Config(format!("override {item:?} is not key=value")))?;
    let key = key.trim().replace('-', "_");
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}
