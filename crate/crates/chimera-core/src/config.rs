//! Experiment configuration: corpus shape, model dimensions, and per-stage
//! training settings. One JSON document drives a whole experiment; every
//! field except the seed has a default.

use serde::{Deserialize, Serialize};

use crate::datagen::DomainKind;
use crate::error::{ChimeraError, Result};
use crate::fusion::AssemblyMode;

/// Sample counts for one stage, per domain and split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl StageCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Shape of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Expert-backed domains, in router-class order (class i+1).
    pub expert_domains: Vec<DomainKind>,
    pub table_rows: usize,
    pub table_cols: usize,
    pub chart_len: usize,
    /// Extra digit cells in math grids beyond the two operands; they widen
    /// the content space so splits can stay disjoint, without touching the
    /// answer.
    pub math_decorations: usize,
    /// General-domain pattern canvas is `general_side` × `general_side`.
    pub general_side: usize,
    /// Fixed length of every rendered general view.
    pub general_tokens: usize,
    /// Per-domain counts for the knowledge-alignment stage.
    pub alignment: StageCounts,
    /// Per-domain counts for the instruction-tuning stage.
    pub instruction: StageCounts,
    pub vocab_size: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            expert_domains: vec![DomainKind::Table, DomainKind::Chart, DomainKind::Math],
            table_rows: 3,
            table_cols: 4,
            chart_len: 6,
            math_decorations: 2,
            general_side: 4,
            general_tokens: 16,
            alignment: StageCounts { train: 256, val: 32, test: 32 },
            instruction: StageCounts { train: 1024, val: 128, test: 128 },
            vocab_size: 24,
        }
    }
}

impl CorpusSpec {
    pub fn domains(&self) -> Vec<DomainKind> {
        let mut d = vec![DomainKind::General];
        d.extend(self.expert_domains.iter().copied());
        d
    }

    /// Router class of a domain: 0 for general, 1.. for experts in
    /// registration order.
    pub fn class_of(&self, kind: DomainKind) -> Option<usize> {
        if kind == DomainKind::General {
            return Some(0);
        }
        self.expert_domains.iter().position(|d| *d == kind).map(|i| i + 1)
    }

    pub fn num_experts(&self) -> usize {
        self.expert_domains.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.expert_domains.is_empty() {
            return Err(ChimeraError::config("expert_domains must not be empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.expert_domains {
            if *d == DomainKind::General {
                return Err(ChimeraError::config("general is not an expert domain"));
            }
            if !seen.insert(*d) {
                return Err(ChimeraError::config(format!("duplicate expert domain {d:?}")));
            }
        }
        if self.alignment.total() == 0 && self.instruction.total() == 0 {
            return Err(ChimeraError::config("per-domain counts must be >= 1"));
        }
        if self.table_rows == 0 || self.table_cols == 0 || self.table_rows > 9 || self.table_cols > 9 {
            return Err(ChimeraError::config("table shape must be within 1..=9 per side"));
        }
        if self.chart_len < 2 || self.chart_len > 9 {
            return Err(ChimeraError::config("chart_len must be in 2..=9"));
        }
        if self.general_side < 2 {
            return Err(ChimeraError::config("general_side must be >= 2"));
        }
        if self.general_side * self.general_side > self.general_tokens {
            return Err(ChimeraError::config("general pattern does not fit the view canvas"));
        }
        let needed = [
            self.table_rows * (self.table_cols + 1),
            self.chart_len + 1,
            // math: two operands joined by the operator, a separator, then
            // the decoration cells
            3 + 1 + self.math_decorations,
        ];
        if needed.iter().any(|&n| n > self.general_tokens) {
            return Err(ChimeraError::config("a domain layout does not fit general_tokens"));
        }
        if (self.vocab_size as u32) < crate::datagen::vocab::MIN_VOCAB {
            return Err(ChimeraError::config(format!(
                "vocab too small for answers: need at least {}",
                crate::datagen::vocab::MIN_VOCAB
            )));
        }
        Ok(())
    }
}

/// One expert encoder's dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertDims {
    pub domain: DomainKind,
    /// Number of feature tokens the encoder emits.
    pub token_count: usize,
    pub feature_dim: usize,
}

/// Self-supervised warm phase that pre-trains expert encoders on value
/// reconstruction before they are frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for WarmConfig {
    fn default() -> Self {
        WarmConfig { steps: 300, batch_size: 16, lr: 1e-2 }
    }
}

/// Text-only pretraining of the language model at initialization, the
/// stand-in for starting from a pretrained backbone: delayed-copy
/// sequences build the generic token-copy machinery the staged runs
/// later retarget onto visual tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmWarmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for LmWarmConfig {
    fn default() -> Self {
        LmWarmConfig { steps: 6000, batch_size: 8, lr: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LMConfig {
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// Share the output head with the token embedding (logits = x Embᵀ).
    pub tie_embeddings: bool,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig { d_lm: 48, layers: 2, heads: 4, vocab: 24, max_len: 160, tie_embeddings: true }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_lm == 0 || self.layers == 0 || self.heads == 0 {
            return Err(ChimeraError::config("lm dims must be positive"));
        }
        if self.d_lm % self.heads != 0 {
            return Err(ChimeraError::config("d_lm must be divisible by heads"));
        }
        if self.vocab < 2 {
            return Err(ChimeraError::config("lm vocab must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// General-encoder token count; must match the corpus view canvas.
    pub general_tokens: usize,
    pub d_g: usize,
    pub experts: Vec<ExpertDims>,
    pub lm: LMConfig,
    pub warm: WarmConfig,
    pub lm_warm: LmWarmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            general_tokens: 16,
            d_g: 32,
            // expert budgets keep the table/chart > math ordering at toy scale
            experts: vec![
                ExpertDims { domain: DomainKind::Table, token_count: 64, feature_dim: 24 },
                ExpertDims { domain: DomainKind::Chart, token_count: 64, feature_dim: 24 },
                ExpertDims { domain: DomainKind::Math, token_count: 16, feature_dim: 24 },
            ],
            lm: LMConfig::default(),
            warm: WarmConfig::default(),
            lm_warm: LmWarmConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, corpus: &CorpusSpec) -> Result<()> {
        self.lm.validate()?;
        if self.general_tokens != corpus.general_tokens {
            return Err(ChimeraError::config(
                "model general_tokens must match corpus general_tokens",
            ));
        }
        if self.d_g == 0 {
            return Err(ChimeraError::config("d_g must be positive"));
        }
        for d in &corpus.expert_domains {
            if !self.experts.iter().any(|e| e.domain == *d) {
                return Err(ChimeraError::config(format!("no expert dims for domain {d:?}")));
            }
        }
        for e in &self.experts {
            if e.token_count == 0 || e.feature_dim == 0 {
                return Err(ChimeraError::config("expert dims must be positive"));
            }
        }
        Ok(())
    }

    pub fn expert(&self, domain: DomainKind) -> Option<&ExpertDims> {
        self.experts.iter().find(|e| e.domain == domain)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    One,
    Two,
    Dpo,
}

/// Linear-warmup window, as an absolute step count or a fraction of the
/// total step budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    Steps(usize),
    Ratio(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Mean over answer tokens; decouples loss scale from answer length.
    #[default]
    Mean,
    /// Plain sum, for exactness checks against the objective as written.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: Warmup,
    pub weight_decay: f64,
    /// Collaboration-masking ratio; `None` disables it (stage 1).
    pub gscm_ratio: Option<f64>,
    /// Weight on the router classification loss.
    pub lambda_c: f64,
    pub loss_reduction: LossReduction,
    /// Input assembly during training.
    pub mode: AssemblyMode,
    /// Emit an intermediate checkpoint every N optimizer steps.
    pub checkpoint_every: Option<usize>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 1,
            batch_size: 32,
            lr: 2e-4, // paper-scale runs use 4e-5/2e-5 (stage 1) and 2e-5/1e-5 (stage 2)
            warmup: Warmup::Ratio(0.03),
            weight_decay: 0.01,
            gscm_ratio: None,
            lambda_c: 1.0,
            loss_reduction: LossReduction::Mean,
            mode: AssemblyMode::Chimera,
            checkpoint_every: None,
        }
    }
}

impl StageConfig {
    pub fn stage2_default() -> Self {
        StageConfig { gscm_ratio: Some(0.3), ..StageConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ChimeraError::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.lambda_c > 0.0) {
            return Err(ChimeraError::config("lr and lambda_c must be positive"));
        }
        if let Some(r) = self.gscm_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(ChimeraError::config("gscm_ratio must be in [0, 1]"));
            }
        }
        if let Warmup::Ratio(r) = self.warmup {
            if !(0.0..=1.0).contains(&r) {
                return Err(ChimeraError::config("warmup ratio must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Sampling temperature for rollouts when building preference pairs.
    pub temperature: f64,
    pub rollouts_per_prompt: usize,
    pub max_pairs: usize,
    pub weight_decay: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            lr: 1e-4,
            steps: 200,
            batch_size: 8,
            temperature: 1.5,
            rollouts_per_prompt: 4,
            max_pairs: 500,
            weight_decay: 0.0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(ChimeraError::config("dpo beta must be positive"));
        }
        if self.steps == 0 || self.batch_size == 0 || self.max_pairs == 0 {
            return Err(ChimeraError::config("dpo steps/batch/pairs must be positive"));
        }
        Ok(())
    }
}

/// The complete experiment description embedded in checkpoints for
/// provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub stage1: StageConfig,
    #[serde(default = "StageConfig::stage2_default")]
    pub stage2: StageConfig,
    #[serde(default)]
    pub dpo: DpoConfig,
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            stage1: StageConfig::default(),
            stage2: StageConfig::stage2_default(),
            dpo: DpoConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate(&self.corpus)?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.dpo.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ChimeraError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
