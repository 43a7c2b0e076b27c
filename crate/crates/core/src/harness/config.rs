use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intention::IntentionConfig;
use crate::predictor::{BaseKind, ModulationMode, PredictorConfig};
use crate::refiner::StubRules;
use crate::retrieval::DEFAULT_K;
use crate::seqmodel::ClipConfig;
use crate::trajstore::{BundleConfig, LevelLabels, WorldConfig};

/// Pipeline stages that can be switched off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Retrieve reference sequences for the refiner prompt.
    pub rag: bool,
    /// Attach the disaster-level prefix `Z^d` to prompts.
    pub soft_prompt: bool,
    /// Reserve an immobility intention class.
    pub immobility: bool,
    /// Ask the refiner backend; off keeps every predicted intention.
    pub llm_refining: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            rag: true,
            soft_prompt: true,
            immobility: true,
            llm_refining: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFlag {
    Rag,
    SoftPrompt,
    Immobility,
    LlmRefining,
}

impl AblationFlag {
    pub const ALL: [Self; 4] = [Self::Rag, Self::SoftPrompt, Self::Immobility, Self::LlmRefining];
}

impl fmt::Display for AblationFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rag => "rag",
            Self::SoftPrompt => "soft_prompt",
            Self::Immobility => "immobility",
            Self::LlmRefining => "llm_refining",
        })
    }
}

impl FromStr for AblationFlag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.to_string() == s.trim().replace('-', "_"))
            .ok_or_else(|| Error::config(format!("unknown ablation flag {s:?}")))
    }
}

impl Ablations {
    pub fn get(&self, flag: AblationFlag) -> bool {
        match flag {
            AblationFlag::Rag => self.rag,
            AblationFlag::SoftPrompt => self.soft_prompt,
            AblationFlag::Immobility => self.immobility,
            AblationFlag::LlmRefining => self.llm_refining,
        }
    }

    pub fn disable(&mut self, flag: AblationFlag) {
        match flag {
            AblationFlag::Rag => self.rag = false,
            AblationFlag::SoftPrompt => self.soft_prompt = false,
            AblationFlag::Immobility => self.immobility = false,
            AblationFlag::LlmRefining => self.llm_refining = false,
        }
    }

    /// Parses a comma-separated list of flags to switch off.
    pub fn parse_disabled(list: &str) -> Result<Vec<AblationFlag>> {
        list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
    }

    /// `full`, or `w/o` followed by the disabled flags.
    pub fn variant_name(&self) -> String {
        let off: Vec<String> = AblationFlag::ALL
            .into_iter()
            .filter(|&f| !self.get(f))
            .map(|f| f.to_string())
            .collect();
        if off.is_empty() {
            "full".into()
        } else {
            format!("w/o {}", off.join("+"))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Stub,
    /// Endpoint and token from `REFINER_ENDPOINT` / `REFINER_TOKEN`.
    Http,
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(Self::Stub),
            "http" => Ok(Self::Http),
            _ => Err(Error::config(format!("unknown backend {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerSettings {
    pub backend: BackendKind,
    pub stub: StubRules,
    pub labels: LevelLabels,
    /// Width of the disaster prefix `Z^d`.
    pub prefix_dim: usize,
    /// Requests in flight for the HTTP backend.
    pub concurrency: usize,
}

impl Default for RefinerSettings {
    fn default() -> Self {
        Self {
            backend: BackendKind::Stub,
            stub: StubRules::default(),
            labels: LevelLabels::default(),
            prefix_dim: 64,
            concurrency: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionSettings {
    pub base: BaseKind,
    pub mode: ModulationMode,
    pub model: PredictorConfig,
}

impl Default for PredictionSettings {
    fn default() -> Self {
        Self {
            base: BaseKind::Rnn,
            mode: ModulationMode::Mul,
            model: PredictorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSettings {
    pub k: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

/// Everything one pipeline run depends on.
///
/// Split fractions live in `corpora.test_fraction` (held-out share of target
/// users' disaster trajectories); the last normal day of every target user
/// is held out as the normal test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub corpora: BundleConfig,
    pub intention: IntentionConfig,
    pub clip: ClipConfig,
    pub retrieval: RetrievalSettings,
    pub refiner: RefinerSettings,
    pub predictor: PredictionSettings,
    pub ablation: Ablations,
    /// Stage artifacts are stored here when set; not part of the config hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            world: WorldConfig::default(),
            corpora: BundleConfig::default(),
            intention: IntentionConfig::default(),
            clip: ClipConfig::default(),
            retrieval: RetrievalSettings::default(),
            refiner: RefinerSettings::default(),
            predictor: PredictionSettings::default(),
            ablation: Ablations::default(),
            cache_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.corpora.mobility.validate()?;
        self.clip.validate()?;
        if self.retrieval.k == 0 {
            return Err(Error::config("retrieval.k must be at least 1"));
        }
        if self.refiner.prefix_dim == 0 {
            return Err(Error::config("refiner.prefix_dim must be positive"));
        }
        self.refiner.labels.validate()?;
        if self.refiner.labels.levels() < self.corpora.mobility.levels() {
            return Err(Error::config("refiner.labels needs one label per disaster level"));
        }
        Ok(())
    }

    /// Hash of every field that influences results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.cache_dir = None;
        crate::content_hash(&c)
    }

    pub fn with_disabled(&self, flags: &[AblationFlag]) -> Self {
        let mut c = self.clone();
        for &f in flags {
            c.ablation.disable(f);
        }
        c
    }

    /// Scaled-down settings for tests and examples: fewer users, smaller
    /// models, fewer epochs.
    pub fn quick() -> Self {
        let mut c = Self::default();
        c.corpora = BundleConfig::small();
        c.clip.width = 32;
        c.clip.ff_width = 64;
        c.clip.blocks = 1;
        c.clip.epochs = 6;
        c.predictor.model.embedding_dim = 16;
        c.predictor.model.hidden_dim = 32;
        c.predictor.model.head_hidden = 32;
        c.predictor.model.base_epochs = 10;
        c.predictor.model.fusion_epochs = 8;
        c
    }
}
