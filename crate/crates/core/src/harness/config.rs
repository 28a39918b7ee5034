//! Run configuration.
//!
//! A config is a TOML table mirroring [`RunConfig`]; every key is optional
//! and unknown keys are rejected. Overrides of the form `key=value` are
//! applied to the table before deserialization, with `value` parsed as a TOML
//! value when possible and as a bare string otherwise. Dotted keys reach into
//! nested tables (`backbone.kind=mlp`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugPolicy, AugStrategy};
use crate::dataset::{DatasetId, SynthSizes};
use crate::datastream::BoundaryMode;
use crate::error::{Error, Result};
use crate::model::{ArchSpec, Backbone};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::teacher::{lambda_of_alpha, DistillConfig, InferenceMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Er,
    Derpp,
    Erace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MkdMode {
    #[default]
    Off,
    On,
    SingleView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotMode {
    #[default]
    Off,
    /// Copy of the student taken at each detected boundary.
    LowQuality,
    /// Model trained offline for several epochs on everything seen before
    /// the boundary, starting from the run's initial weights.
    HighQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub data_seed: u64,
    pub n_tasks: usize,
    pub memory_size: usize,
    pub boundary_mode: BoundaryMode,
    pub blur_scale: usize,
    pub method: Method,
    pub mkd: MkdMode,
    pub snapshot_kd: SnapshotMode,
    pub snapshot_lambda: f64,
    pub snapshot_epochs: usize,
    /// Evaluation weights; unset means averaged with MKD and student otherwise.
    pub inference_mode: Option<InferenceMode>,
    pub alpha: f64,
    pub lambda_override: Option<f64>,
    pub tau: f64,
    pub stream_batch: usize,
    pub mem_retrieval_cap: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub aug_strategy: AugStrategy,
    pub derpp_alpha: f64,
    pub derpp_beta: f64,
    pub backbone: Backbone,
    pub feature_dim: usize,
    pub seed: u64,
    /// Extra evaluations every this many steps; 0 keeps end-of-task only.
    pub eval_every: usize,
    pub min_gap: usize,
    pub drift_every: usize,
    pub drift_probe: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "synth-digits".into(),
            train_per_class: 500,
            test_per_class: 100,
            data_seed: 0,
            n_tasks: 5,
            memory_size: 500,
            boundary_mode: BoundaryMode::Clear,
            blur_scale: 500,
            method: Method::Er,
            mkd: MkdMode::Off,
            snapshot_kd: SnapshotMode::Off,
            snapshot_lambda: 0.01,
            snapshot_epochs: 5,
            inference_mode: None,
            alpha: 0.01,
            lambda_override: None,
            tau: 4.0,
            stream_batch: 10,
            mem_retrieval_cap: 64,
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            weight_decay: 0.0,
            momentum: 0.0,
            aug_strategy: AugStrategy::Full,
            derpp_alpha: 0.1,
            derpp_beta: 0.5,
            backbone: Backbone::Cnn {
                channels: vec![8, 16, 32, 64],
            },
            feature_dim: 64,
            seed: 0,
            eval_every: 0,
            min_gap: crate::boundary::DEFAULT_MIN_GAP,
            drift_every: 50,
            drift_probe: 256,
            out_dir: None,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (dot separated) in `table`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty key `{path}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{path}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        RunConfig::from_table(table)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text, overrides)
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Rejects configs that cannot run, before any data is touched.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let id = self.dataset_id()?;
        if self.n_tasks == 0 {
            return bad("n_tasks must be positive".into());
        }
        if let DatasetId::SynthDigits | DatasetId::SynthObjects100 = id {
            let n = id.n_classes()?;
            if n % self.n_tasks != 0 {
                return Err(Error::UnevenSplit {
                    n_classes: n,
                    n_tasks: self.n_tasks,
                });
            }
            if self.train_per_class == 0 || self.test_per_class == 0 {
                return bad("per-class sizes must be positive".into());
            }
        }
        if self.stream_batch == 0 {
            return bad("stream_batch must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if let Some(l) = self.lambda_override {
            if !(l >= 0.0) {
                return bad(format!("lambda_override must be non-negative, got {l}"));
            }
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)".into());
        }
        if !(self.derpp_alpha >= 0.0 && self.derpp_beta >= 0.0 && self.snapshot_lambda >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.snapshot_kd != SnapshotMode::Off && self.method != Method::Er {
            return bad("snapshot_kd is only defined on top of er".into());
        }
        if self.snapshot_kd != SnapshotMode::Off && self.mkd != MkdMode::Off {
            return bad("snapshot_kd and mkd are mutually exclusive".into());
        }
        if self.snapshot_kd == SnapshotMode::HighQuality && self.snapshot_epochs == 0 {
            return bad("snapshot_epochs must be positive".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        match &self.backbone {
            Backbone::Cnn { channels } if channels.is_empty() || channels.contains(&0) => {
                return bad("cnn channels must be non-empty and positive".into())
            }
            Backbone::Mlp { hidden } if hidden.contains(&0) => return bad("mlp widths must be positive".into()),
            _ => {}
        }
        Ok(())
    }

    pub fn dataset_id(&self) -> Result<DatasetId> {
        self.dataset.parse()
    }

    pub fn synth_sizes(&self) -> SynthSizes {
        SynthSizes {
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            seed: self.data_seed,
        }
    }

    pub fn distill(&self) -> Result<DistillConfig> {
        let mut d = DistillConfig::from_alpha(self.alpha)?;
        d.tau = self.tau;
        d.multiview = self.mkd != MkdMode::SingleView;
        match self.lambda_override {
            Some(l) => d.with_lambda(l),
            None => Ok(d),
        }
    }

    /// Distillation weight actually used, derived from `alpha` unless overridden.
    pub fn effective_lambda(&self) -> Result<f64> {
        match self.lambda_override {
            Some(l) => Ok(l),
            None => lambda_of_alpha(self.alpha),
        }
    }

    pub fn inference(&self) -> InferenceMode {
        self.inference_mode.unwrap_or(match self.mkd {
            MkdMode::Off => InferenceMode::Student,
            _ => InferenceMode::Averaged,
        })
    }

    /// Whether an EMA teacher has to be maintained.
    pub fn needs_teacher(&self) -> bool {
        self.mkd != MkdMode::Off || self.inference() != InferenceMode::Student
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
        }
    }

    pub fn aug_policy(&self) -> AugPolicy {
        AugPolicy::new(self.aug_strategy)
    }

    pub fn arch_spec(&self, input: (usize, usize, usize), n_classes: usize) -> ArchSpec {
        ArchSpec {
            input,
            backbone: self.backbone.clone(),
            feature_dim: self.feature_dim,
            n_classes,
        }
    }

    /// Short method label such as `er+mkd` or `er+snapshot(high)`.
    pub fn label(&self) -> String {
        let base = match self.method {
            Method::Er => "er",
            Method::Derpp => "derpp",
            Method::Erace => "erace",
        };
        let extra = match (self.mkd, self.snapshot_kd) {
            (MkdMode::On, _) => "+mkd",
            (MkdMode::SingleView, _) => "+mkd(single)",
            (_, SnapshotMode::LowQuality) => "+snapshot(low)",
            (_, SnapshotMode::HighQuality) => "+snapshot(high)",
            _ => "",
        };
        format!("{base}{extra}")
    }
}
