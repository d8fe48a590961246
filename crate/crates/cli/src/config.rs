//! Run configuration.
//!
//! A config file is TOML written as flat dotted keys (`distill.ipc = 10`).
//! Any key may be omitted; omitted keys take their default. The canonical
//! text form produced by [`RunConfig::to_toml`] lists every key, so a run
//! directory always records the complete configuration it was built with.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use lgd_core::analysis::{CategoryThresholds, EvalProtocol, ProbeConfig};
use lgd_core::data::{MixtureMode, MixtureSpec};
use lgd_core::diffusion::{DiffusionSchedule, PredictorTrainConfig};
use lgd_core::distill::{DistillConfig, GuidanceMode};
use lgd_core::nn::{AdamWConfig, LrSchedule, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{CliError, Result};

/// Distillation variants. All but `lgd` are comparators derived from the
/// configured learnability settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Lgd,
    /// Plain class-conditional sampling: no guidance, one candidate per slot.
    Unguided,
    /// Learnability guidance without the reference-model term.
    LossOnly,
    /// Reference-classifier guidance toward the target class.
    ClassifierGuidance,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lgd => "lgd",
            Method::Unguided => "unguided",
            Method::LossOnly => "loss-only",
            Method::ClassifierGuidance => "classifier-guidance",
        }
    }

    /// The distillation config this method actually runs with.
    pub fn apply(self, base: &DistillConfig) -> DistillConfig {
        let mut cfg = base.clone();
        match self {
            Method::Lgd => {}
            Method::Unguided => {
                cfg.guidance = GuidanceMode::Learnability;
                cfg.learnability.lambda = 0.0;
                cfg.learnability.gamma = 0.0;
                cfg.learnability.kappa = 1;
            }
            Method::LossOnly => cfg.learnability.omega = 0.0,
            Method::ClassifierGuidance => cfg.guidance = GuidanceMode::Classifier,
        }
        cfg
    }
}

/// Synthetic class-conditional Gaussian mixture. Without explicit `modes`,
/// `classes * modes_per_class` isotropic modes are placed on a ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Seeds the data draw and the reference and diffusion models trained on
    /// it, so runs with different master seeds can share all three.
    pub seed: u64,
    pub dim: usize,
    pub classes: usize,
    pub modes_per_class: usize,
    pub samples_per_class: usize,
    pub radius: f64,
    pub std: f64,
    pub test_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<MixtureMode>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dim: 2,
            classes: 3,
            modes_per_class: 3,
            samples_per_class: 300,
            radius: 2.0,
            std: 0.3,
            test_fraction: 0.2,
            modes: None,
        }
    }
}

impl DataConfig {
    pub fn spec(&self) -> MixtureSpec {
        let mut spec = match &self.modes {
            Some(modes) => MixtureSpec {
                dim: self.dim,
                num_classes: self.classes,
                samples_per_class: self.samples_per_class,
                modes: modes.clone(),
                test_fraction: self.test_fraction,
            },
            None => MixtureSpec::ring(
                self.dim,
                self.classes,
                self.modes_per_class,
                self.radius,
                self.std,
                self.samples_per_class,
            ),
        };
        spec.test_fraction = self.test_fraction;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        Ok(DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub repeats: usize,
    pub protocol: EvalProtocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: 3,
            protocol: EvalProtocol::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Training of the per-increment models in the redundancy matrix.
    pub redundancy: EvalProtocol,
    pub probe: ProbeConfig,
    pub thresholds: CategoryThresholds,
    pub js_bins: usize,
    pub js_epsilon: f64,
    /// Reference probability below which a sample counts as low-confidence.
    pub low_confidence: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            redundancy: reference_protocol(),
            probe: ProbeConfig::default(),
            thresholds: CategoryThresholds::default(),
            js_bins: 20,
            js_epsilon: 1e-8,
            low_confidence: 0.5,
        }
    }
}

fn reference_protocol() -> EvalProtocol {
    EvalProtocol {
        train: TrainConfig {
            epochs: 200,
            batch_size: 64,
            optim: AdamWConfig::default(),
            schedule: LrSchedule::hard_label(),
        },
        ..EvalProtocol::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Master seed for distillation, evaluation and analyses.
    pub seed: u64,
    pub out: PathBuf,
    pub method: Method,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub predictor: PredictorTrainConfig,
    pub reference: EvalProtocol,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            method: Method::default(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            predictor: PredictorTrainConfig::default(),
            reference: reference_protocol(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Keys that may appear in a config file without having a default value.
const OPTIONAL_KEYS: &[&str] = &["data.modes"];

impl RunConfig {
    /// Parses a possibly partial config, filling gaps from the defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::config(format!("cannot parse config: {e}")))?;
        let mut merged = default_table()?;
        merge(&mut merged, user, "")?;
        let cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Every key on its own `a.b.c = value` line, in a fixed order.
    pub fn to_toml(&self) -> Result<String> {
        let table = Table::try_from(self).map_err(|e| CliError::runtime(format!("cannot encode config: {e}")))?;
        let mut out = String::new();
        flatten(&table, "", &mut out);
        Ok(out)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Hash of the part of the config that determines the data and the
    /// models trained on it. Runs are comparable only when this matches.
    pub fn data_hash(&self) -> Result<String> {
        let key = serde_json::to_vec(&(&self.data, &self.schedule, &self.predictor, &self.reference))?;
        Ok(hex::encode(Sha256::digest(key)))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("data.samples_per_class", self.data.samples_per_class),
            ("data.classes", self.data.classes),
            ("data.dim", self.data.dim),
            ("data.modes_per_class", self.data.modes_per_class),
            ("schedule.steps", self.schedule.steps),
            ("predictor.epochs", self.predictor.epochs),
            ("predictor.batch_size", self.predictor.batch_size),
            ("reference.train.epochs", self.reference.train.epochs),
            ("reference.train.batch_size", self.reference.train.batch_size),
            ("distill.ipc", self.distill.ipc),
            ("distill.stages", self.distill.stages),
            ("distill.train.max_epochs", self.distill.train.max_epochs),
            ("eval.repeats", self.eval.repeats),
            ("eval.protocol.train.epochs", self.eval.protocol.train.epochs),
            ("analysis.redundancy.train.epochs", self.analysis.redundancy.train.epochs),
            ("analysis.probe.epochs", self.analysis.probe.epochs),
            ("analysis.probe.batch_size", self.analysis.probe.batch_size),
            ("analysis.js_bins", self.analysis.js_bins),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CliError::config(format!("{name} must be positive")));
            }
        }
        if !(self.analysis.js_epsilon > 0.0) {
            return Err(CliError::config("analysis.js_epsilon must be positive"));
        }
        if !(0.0..=1.0).contains(&self.analysis.low_confidence) {
            return Err(CliError::config("analysis.low_confidence must lie in [0, 1]"));
        }
        self.data.spec().validate()?;
        self.schedule.build()?;
        self.distill.validate()?;
        self.method.apply(&self.distill).validate()?;
        Ok(())
    }
}

fn default_table() -> Result<Table> {
    Table::try_from(RunConfig::default()).map_err(|e| CliError::runtime(format!("cannot encode defaults: {e}")))
}

/// Overlays `user` onto `base`, rejecting keys the config does not have.
fn merge(base: &mut Table, user: Table, prefix: &str) -> Result<()> {
    for (key, value) in user {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u, &path)?,
            (Some(Value::Table(_)), _) => {
                return Err(CliError::config(format!("config key {path} must be a table")));
            }
            (Some(slot), v) => *slot = v,
            (None, v) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(key, v);
            }
            (None, _) => return Err(CliError::config(format!("unknown config key {path}"))),
        }
    }
    Ok(())
}

fn flatten(table: &Table, prefix: &str, out: &mut String) {
    for (key, value) in table {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match value {
            Value::Table(t) => flatten(t, &path, out),
            v => {
                let _ = writeln!(out, "{path} = {v}");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert!(text.lines().all(|l| l.contains(" = ") && !l.starts_with('[')));
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\ndistill.ipc = 4\ndistill.learnability.lambda = 2.0\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.distill.ipc, 4);
        assert_eq!(cfg.distill.learnability.lambda, 2.0);
        assert_eq!(cfg.distill.stages, 5);
    }

    #[test]
    fn explicit_modes_round_trip() {
        let text = "data.classes = 2\ndata.modes = [{ class = 0, mean = [1.0, 0.0], std = 0.2 }, { class = 1, mean = [-1.0, 0.0], std = 0.2 }]\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.data.spec().modes.len(), 2);
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_zero_counts() {
        assert!(RunConfig::from_toml("distill.ipcc = 3").is_err());
        assert!(RunConfig::from_toml("distill.ipc = 0").is_err());
        assert!(RunConfig::from_toml("eval.repeats = 0").is_err());
        assert!(RunConfig::from_toml("data.std = 0.0").is_err());
    }

    #[test]
    fn method_overrides() {
        let base = DistillConfig::default();
        let u = Method::Unguided.apply(&base);
        assert_eq!((u.learnability.lambda, u.learnability.gamma, u.learnability.kappa), (0.0, 0.0, 1));
        assert_eq!(Method::LossOnly.apply(&base).learnability.omega, 0.0);
        assert_eq!(Method::ClassifierGuidance.apply(&base).guidance, GuidanceMode::Classifier);
        assert_eq!(Method::Lgd.apply(&base), base);
    }
}
