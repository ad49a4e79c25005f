//! Experiment configuration: one versioned JSON document.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::bench::{BenchmarkSpec, LabelMode};
use crate::error::{Error, Result};
use crate::loss::{ClassificationMode, LossConfig};
use crate::memory::AdapterKind;
use crate::metrics::MetricKind;
use crate::optim::OptimizerConfig;
use crate::routing::{GateMode, QueryPolicy};

pub const SCHEMA_VERSION: u32 = 1;

/// Model variants compared by the ablation runner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Modality-specific pools with cross-modal guided routing.
    #[default]
    Full,
    /// A fixed dense low-rank pair per modality instead of routed factors.
    StaticLora,
    /// Missing modalities route with their dummy-derived query.
    NoCrossModalGuide,
    /// One pool of twice the size shared by both modalities.
    UnifiedPool,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::StaticLora,
        Variant::NoCrossModalGuide,
        Variant::UnifiedPool,
    ];

    pub fn adapter_kind(self) -> AdapterKind {
        match self {
            Variant::Full | Variant::NoCrossModalGuide => AdapterKind::Decomposed,
            Variant::StaticLora => AdapterKind::Static,
            Variant::UnifiedPool => AdapterKind::Shared,
        }
    }

    pub fn query_policy(self) -> QueryPolicy {
        match self {
            Variant::NoCrossModalGuide => QueryPolicy::OwnHiddenStates,
            _ => QueryPolicy::Guided,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::StaticLora => "static-lora",
            Variant::NoCrossModalGuide => "no-cross-modal-guide",
            Variant::UnifiedPool => "unified-pool",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Factor pairs per modality pool.
    pub pool_size: usize,
    /// Factors selected per pool and forward pass.
    pub rank: usize,
    pub gate_mode: GateMode,
    pub variant: Variant,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            pool_size: 16,
            rank: 4,
            gate_mode: GateMode::Softmax,
            variant: Variant::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub ema_beta: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 5,
            batch_size: 4,
            ema_beta: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// F1 assigned to a class absent from both predictions and labels.
    pub empty_class_f1: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { empty_class_f1: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub benchmark: BenchmarkSpec,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub adapters: AdapterConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "ExperimentConfig::default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            benchmark: BenchmarkSpec::default(),
            backbone: BackboneConfig::default(),
            adapters: AdapterConfig::default(),
            loss: LossConfig::default(),
            optimizer: Self::default_optimizer(),
            training: TrainingConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } if !field.starts_with(&format!("{section}.")) => Error::Config {
            field: format!("{section}.{field}"),
            message,
        },
        other => other,
    }
}

impl ExperimentConfig {
    /// Desk-scale optimizer defaults: the toy backbone trains for a few
    /// hundred steps per task, so the base rate is higher than a full-scale
    /// fine-tuning run would use.
    pub fn default_optimizer() -> OptimizerConfig {
        OptimizerConfig {
            base_lr: 5e-3,
            ..OptimizerConfig::default()
        }
    }

    /// Sets the training, benchmark and backbone seeds together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.benchmark.seed = seed;
        self.backbone.seed = seed;
        self
    }

    /// Parses and validates a config document. Syntax errors carry line
    /// and column; type and unknown-key errors carry the field path.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let field = if path.is_empty() || path == "." { "<root>".to_string() } else { path };
            Error::config(field, inner.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        self.benchmark.validate()?;
        self.backbone.validate()?;
        self.loss.validate().map_err(|e| prefixed("loss", e))?;
        self.optimizer.validate().map_err(|e| prefixed("optimizer", e))?;
        let a = &self.adapters;
        if a.pool_size == 0 {
            return Err(Error::config("adapters.pool_size", "must be at least 1"));
        }
        if a.rank == 0 || a.rank > a.pool_size {
            return Err(Error::config(
                "adapters.rank",
                format!("must lie in 1..={} (the pool size)", a.pool_size),
            ));
        }
        let t = &self.training;
        if t.epochs_per_task == 0 {
            return Err(Error::config("training.epochs_per_task", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if !(t.ema_beta > 0.0 && t.ema_beta < 1.0) {
            return Err(Error::config("training.ema_beta", "must lie in (0, 1)"));
        }
        let mode_ok = matches!(
            (self.benchmark.label_mode, self.loss.classification_mode),
            (LabelMode::Multiclass, ClassificationMode::MulticlassCe)
                | (LabelMode::Multilabel, ClassificationMode::MultilabelBce)
        );
        if !mode_ok {
            return Err(Error::config(
                "loss.classification_mode",
                "does not match benchmark.label_mode",
            ));
        }
        if !(0.0..=1.0).contains(&self.evaluation.empty_class_f1) {
            return Err(Error::config("evaluation.empty_class_f1", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn metric(&self) -> MetricKind {
        match self.loss.classification_mode {
            ClassificationMode::MulticlassCe => MetricKind::Accuracy,
            ClassificationMode::MultilabelBce => MetricKind::F1Macro,
        }
    }

    /// SHA-256 of the canonical (compact) JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_uses_defaults() {
        let cfg = ExperimentConfig::from_json_str(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn round_trip_preserves_hash() {
        let cfg = ExperimentConfig::default().with_seed(7);
        let back = ExperimentConfig::from_json_str(&cfg.to_json_pretty()).unwrap();
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(ExperimentConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = ExperimentConfig::from_json_str(r#"{"schema_version": 1, "training": {"epochs": 3}}"#)
            .unwrap_err();
        let Error::Config { field, message } = err else { panic!("expected config error") };
        assert_eq!(field, "training.epochs");
        assert!(message.contains("unknown field"), "{message}");
    }

    #[test]
    fn type_error_names_its_path() {
        let err = ExperimentConfig::from_json_str(
            "{\"schema_version\": 1,\n \"adapters\": {\"rank\": \"four\"}}",
        )
        .unwrap_err();
        let Error::Config { field, message } = err else { panic!("expected config error") };
        assert_eq!(field, "adapters.rank");
        assert!(message.contains("line 2"), "{message}");
    }

    #[test]
    fn syntax_error_has_line() {
        let err = ExperimentConfig::from_json_str("{\n\"schema_version\": 1,,}").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn semantic_errors_are_field_addressed() {
        let cases = [
            (r#"{"schema_version": 2}"#, "schema_version"),
            (r#"{"schema_version": 1, "adapters": {"rank": 20}}"#, "adapters.rank"),
            (r#"{"schema_version": 1, "optimizer": {"base_lr": -1.0}}"#, "optimizer.base_lr"),
            (r#"{"schema_version": 1, "loss": {"lambda1": -1.0}}"#, "loss.lambda1"),
            (r#"{"schema_version": 1, "benchmark": {"eta": 0.2}}"#, "benchmark.eta"),
            (r#"{"schema_version": 1, "backbone": {"n_heads": 5}}"#, "backbone.n_heads"),
            (
                r#"{"schema_version": 1, "benchmark": {"label_mode": "multilabel"}}"#,
                "loss.classification_mode",
            ),
        ];
        for (doc, want) in cases {
            let Error::Config { field, .. } = ExperimentConfig::from_json_str(doc).unwrap_err() else {
                panic!("expected config error for {doc}")
            };
            assert_eq!(field, want, "{doc}");
        }
    }
}
