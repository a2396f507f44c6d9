//! Experiment configuration.
//!
//! Configs are TOML files. Every block is optional and falls back to the
//! desk-scale defaults below; unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Where stage artifacts go. Not part of the reproducibility echo.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    /// A partial block overlays the adaptation defaults, not the pretraining ones.
    #[serde(deserialize_with = "adapt_block")]
    pub adapt: TrainConfig,
    pub selection: SelectionConfig,
    pub eval: EvalConfig,
}

fn overlay(base: &mut toml::Table, given: toml::Table) {
    for (k, v) in given {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(g)) => overlay(b, g),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn adapt_block<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<TrainConfig, D::Error> {
    use serde::de::Error as _;
    let given = toml::Table::deserialize(d)?;
    let mut base = toml::Table::try_from(TrainConfig::adapt_default()).map_err(D::Error::custom)?;
    overlay(&mut base, given);
    base.try_into().map_err(D::Error::custom)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            adapt: TrainConfig::adapt_default(),
            selection: SelectionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub n_subjects: usize,
    /// Canonical voxel length L after pooling.
    pub canonical_len: usize,
    /// Semantic embedding width D.
    pub embed_dim: usize,
    /// Raw length multiples, assigned to subjects cyclically.
    pub raw_multiples: Vec<usize>,
    pub sigma_stim: f64,
    pub noise_sigma: f64,
    pub subject_nonlinearity: bool,
    /// Boxcar duration used for each subject's BOLD gain.
    pub stimulus_duration: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_classes: 10,
            train_per_class: 20,
            test_per_class: 10,
            n_subjects: 4,
            canonical_len: 96,
            embed_dim: 64,
            raw_multiples: vec![8, 8, 8, 2],
            sigma_stim: 0.15,
            noise_sigma: 3.0,
            subject_nonlinearity: false,
            stimulus_duration: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub n_blocks: usize,
    pub projector_hidden: usize,
    pub prior_hidden: usize,
    pub adapter_depth: usize,
    pub adapter_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 128,
            n_blocks: 2,
            projector_hidden: 128,
            prior_hidden: 128,
            adapter_depth: 1,
            adapter_residual: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    None,
    Mse,
    Amp,
    Fourier,
}

impl Supervision {
    pub const ALL: [Supervision; 4] = [
        Supervision::None,
        Supervision::Mse,
        Supervision::Amp,
        Supervision::Fourier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Supervision::None => "none",
            Supervision::Mse => "mse",
            Supervision::Amp => "amp",
            Supervision::Fourier => "fourier",
        }
    }
}

impl std::str::FromStr for Supervision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "baseline" => Ok(Supervision::None),
            "mse" => Ok(Supervision::Mse),
            "amp" => Ok(Supervision::Amp),
            "fourier" => Ok(Supervision::Fourier),
            other => Err(Error::Config(format!("unknown supervision mode `{other}`"))),
        }
    }
}

/// How the few-shot training subset is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetRule {
    /// First k stimuli per class in stimulus-id order.
    First,
    /// The stimulus chosen by the selection stage (one-shot only).
    Selected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weights: LossWeights,
    pub tau: f64,
    /// Mixed with the experiment seed.
    pub seed: u64,
    pub supervision: Supervision,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub bidirectional: bool,
    pub wrap_phase_diff: bool,
    /// Whether the prior term participates (it always may be weighted to 0).
    pub use_prior: bool,
    pub checkpoint_every: usize,
    /// Adaptation only: shots per class.
    pub shots: usize,
    pub subset: SubsetRule,
    /// Adaptation only: the new subject; defaults to the last generated subject.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_subject: Option<String>,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        TrainConfig {
            epochs: 240,
            batch_size: 64,
            max_lr: 3e-4,
            weights: LossWeights::default(),
            tau: 0.1,
            seed: 0,
            supervision: Supervision::None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            bidirectional: false,
            wrap_phase_diff: false,
            use_prior: true,
            checkpoint_every: 60,
            shots: 1,
            subset: SubsetRule::First,
            new_subject: None,
        }
    }

    pub fn adapt_default() -> Self {
        TrainConfig {
            batch_size: 32,
            supervision: Supervision::Fourier,
            ..Self::pretrain_default()
        }
    }

    pub fn validate(&self, block: &str) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("[{block}] {m}")));
        if self.epochs < 1 {
            return err("epochs must be >= 1".into());
        }
        if self.batch_size < 2 {
            return err("batch_size must be >= 2".into());
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return err("max_lr must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return err("tau must be positive".into());
        }
        self.weights
            .validate()
            .map_err(|e| Error::Config(format!("[{block}] {e}")))?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return err("eps must be positive and weight_decay nonnegative".into());
        }
        if self.shots < 1 {
            return err("shots must be >= 1".into());
        }
        if self.subset == SubsetRule::Selected && self.shots != 1 {
            return err("subset = \"selected\" requires shots = 1".into());
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

impl std::str::FromStr for ProjectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(ProjectionMethod::Pca),
            "tsne" => Ok(ProjectionMethod::Tsne),
            other => Err(Error::Config(format!(
                "unknown projection method `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    KdaMax,
    KdaMin,
    Random,
}

impl SelectionStrategy {
    pub const ALL: [SelectionStrategy; 3] = [
        SelectionStrategy::KdaMax,
        SelectionStrategy::KdaMin,
        SelectionStrategy::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionStrategy::KdaMax => "kda_max",
            SelectionStrategy::KdaMin => "kda_min",
            SelectionStrategy::Random => "random",
        }
    }
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kda_max" => Ok(SelectionStrategy::KdaMax),
            "kda_min" => Ok(SelectionStrategy::KdaMin),
            "random" => Ok(SelectionStrategy::Random),
            other => Err(Error::Config(format!(
                "unknown selection strategy `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub method: ProjectionMethod,
    pub strategy: SelectionStrategy,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            method: ProjectionMethod::Pca,
            strategy: SelectionStrategy::KdaMax,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingHead {
    /// The projector output `e_b`.
    Contrastive,
    /// The prior head output.
    Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub head: EmbeddingHead,
    pub topk: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            head: EmbeddingHead::Contrastive,
            topk: vec![1, 5],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The config as recorded in manifests: everything except `output_dir`.
    pub fn echo(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.output_dir = None;
        serde_json::to_value(c).expect("config serializes")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs/default"))
    }

    pub fn new_subject_id(&self) -> String {
        self.adapt
            .new_subject
            .clone()
            .unwrap_or_else(|| crate::synthgen::subject_id(self.dataset.n_subjects - 1))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if d.n_classes < 2 {
            return err("[dataset] n_classes must be >= 2");
        }
        if d.train_per_class < 1 || d.test_per_class < 1 {
            return err("[dataset] stimuli per class must be >= 1");
        }
        if d.n_subjects < 2 {
            return err("[dataset] n_subjects must be >= 2 (pretraining needs subjects besides the new one)");
        }
        if d.canonical_len < 1 || d.embed_dim < 1 {
            return err("[dataset] canonical_len and embed_dim must be positive");
        }
        if d.raw_multiples.is_empty() || d.raw_multiples.iter().any(|m| !(2..=8).contains(m)) {
            return err("[dataset] raw_multiples must be non-empty with entries in [2, 8]");
        }
        if !(d.sigma_stim >= 0.0) || !(d.noise_sigma >= 0.0) || !(d.stimulus_duration > 0.0) {
            return err("[dataset] sigma_stim, noise_sigma must be >= 0 and stimulus_duration > 0");
        }
        let m = &self.model;
        if m.hidden < 1 || m.projector_hidden < 1 || m.prior_hidden < 1 {
            return err("[model] dimensions must be positive");
        }
        if !(1..=3).contains(&m.adapter_depth) {
            return err("[model] adapter_depth must be 1, 2 or 3");
        }
        if !m.adapter_residual && m.adapter_depth != 1 {
            return err("[model] the non-residual adapter variant is single-layer only");
        }
        self.pretrain.validate("pretrain")?;
        self.adapt.validate("adapt")?;
        if self.adapt.shots > d.train_per_class {
            return err("[adapt] shots exceeds train stimuli per class");
        }
        if let Some(s) = &self.adapt.new_subject {
            if !(0..d.n_subjects).any(|i| &crate::synthgen::subject_id(i) == s) {
                return Err(Error::Config(format!("[adapt] unknown new_subject `{s}`")));
            }
        }
        if self.eval.topk.is_empty() || self.eval.topk.contains(&0) {
            return err("[eval] topk entries must be >= 1");
        }
        Ok(())
    }
}
