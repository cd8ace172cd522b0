//! Run configuration: one flat file of typed `key = value` lines.
//!
//! The format is the flat subset of TOML (no tables), so integers, floats,
//! booleans, strings and arrays keep their types. Unknown keys are
//! rejected. Every field has a default, so an empty file is a valid
//! configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::AblationKind;
use crate::attribution::{MetricSpec, PatchConfig};
use crate::circuits::{Ranking, DEFAULT_FRACTIONS};
use crate::model::{Arch, ModelConfig};
use crate::sparsify::DEFAULT_TAUS;
use crate::steering::FitConfig;
use crate::task::{SplitCounts, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every random stream is a named substream of it.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker cap for data-parallel stages; 0 means all cores.
    pub threads: usize,

    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,

    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,

    pub train_steps: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    pub train_warmup: usize,
    pub train_clip: f64,

    /// Steering coefficient magnitude used everywhere; the sign comes from
    /// the prompt class.
    pub alpha: f64,
    /// Layer for the learned vectors; defaults to the selected DIM layer.
    pub fit_layer: Option<usize>,
    pub fit_epochs: usize,
    pub fit_batch: usize,
    pub fit_lr: f64,
    pub po_phi: f64,

    /// `logit-diff` or `dir-kl`.
    pub patch_metric: String,
    pub dirkl_threshold: f64,
    pub ig_steps: usize,
    pub patch_batch: usize,

    pub circuit_fractions: Vec<f64>,
    pub faith_threshold: f64,
    /// `absolute` or `signed`.
    pub ranking: String,
    pub random_circuit_seeds: usize,

    pub ablations: Vec<String>,
    pub svv_heads: usize,
    pub lens_top_k: usize,
    pub lens_final_norm: bool,

    pub taus: Vec<f64>,
    pub dropout_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let counts = SplitCounts::default();
        let train = TrainConfig::default();
        let fit = FitConfig::default();
        let patch = PatchConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            threads: 0,
            n_layers: model.n_layers,
            n_heads: model.n_heads,
            d_model: model.d_model,
            d_head: model.d_head,
            d_ff: model.d_ff,
            vocab: model.vocab,
            max_seq: model.max_seq,
            train_per_class: counts.train,
            val_per_class: counts.val,
            test_per_class: counts.test,
            train_steps: train.steps,
            train_lr: train.lr,
            train_batch: train.batch,
            train_warmup: train.warmup,
            train_clip: train.clip,
            alpha: 1.0,
            fit_layer: None,
            fit_epochs: fit.epochs,
            fit_batch: fit.batch,
            fit_lr: fit.lr,
            po_phi: fit.phi,
            patch_metric: "logit-diff".into(),
            dirkl_threshold: 0.0,
            ig_steps: patch.steps,
            patch_batch: patch.batch,
            circuit_fractions: DEFAULT_FRACTIONS.to_vec(),
            faith_threshold: 0.85,
            ranking: "absolute".into(),
            random_circuit_seeds: 3,
            ablations: AblationKind::ALL.iter().map(|k| k.as_str().to_string()).collect(),
            svv_heads: 6,
            lens_top_k: 5,
            lens_final_norm: false,
            taus: DEFAULT_TAUS.to_vec(),
            dropout_seeds: 3,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    /// Checks that every typed field converts and the model shape is valid.
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.metric()?;
        self.ranking()?;
        self.ablation_kinds()?;
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha {} must be a nonnegative magnitude", self.alpha)));
        }
        if self.circuit_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("circuit fractions must lie in (0, 1]".into()));
        }
        if self.taus.iter().any(|t| t.is_nan()) {
            return Err(Error::Config("tau grid contains NaN".into()));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("every split needs at least one prompt per class".into()));
        }
        if self.fit_layer.is_some_and(|l| l >= self.n_layers) {
            return Err(Error::Config("fit_layer out of range".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_head: self.d_head,
            d_ff: self.d_ff,
            vocab: self.vocab,
            max_seq: self.max_seq,
            tie_embeddings: false,
            arch: Arch::Transformer,
        }
    }

    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train_per_class,
            val: self.val_per_class,
            test: self.test_per_class,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train_steps,
            lr: self.train_lr,
            batch: self.train_batch,
            warmup: self.train_warmup,
            clip: self.train_clip,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            epochs: self.fit_epochs,
            batch: self.fit_batch,
            lr: self.fit_lr,
            phi: self.po_phi,
            seed: self.seed,
        }
    }

    pub fn metric(&self) -> Result<MetricSpec> {
        match self.patch_metric.as_str() {
            "logit-diff" => Ok(MetricSpec::LogitDiff),
            "dir-kl" => Ok(MetricSpec::DirKl {
                threshold: self.dirkl_threshold,
            }),
            other => Err(Error::Config(format!("unknown patch metric {other:?}"))),
        }
    }

    pub fn patch_config(&self) -> Result<PatchConfig> {
        Ok(PatchConfig {
            steps: self.ig_steps,
            metric: self.metric()?,
            normalize: false,
            batch: self.patch_batch,
        })
    }

    pub fn ranking(&self) -> Result<Ranking> {
        match self.ranking.as_str() {
            "absolute" => Ok(Ranking::Absolute),
            "signed" => Ok(Ranking::Signed),
            other => Err(Error::Config(format!("unknown ranking {other:?}"))),
        }
    }

    pub fn ablation_kinds(&self) -> Result<Vec<AblationKind>> {
        self.ablations.iter().map(|s| s.parse()).collect()
    }

    /// Name of the metric as used in score-source tags.
    pub fn metric_tag(&self) -> &str {
        &self.patch_metric
    }
}
