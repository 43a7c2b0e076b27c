use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intention::{extract_travel_features, IntentionModel, IntentionSpace};
use crate::nn::Matrix;
use crate::refiner::{build_prompt, DisasterEncoder, PromptBundle, PromptInputs, Refinement};
use crate::retrieval::{ReferenceSet, TrajectoryIndex};
use crate::seqmodel::{cosine_logits, ClipModel};
use crate::trajstore::{DisasterLevel, LevelLabels, Trajectory, World};

pub const STAGE_FILE_VERSION: u32 = 1;

/// One prediction position of a held-out trajectory with its predicted
/// next intention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionSample {
    /// `<trajectory>#<step>`.
    pub id: String,
    pub trajectory: String,
    pub user_id: String,
    pub level: DisasterLevel,
    /// Index of the last prefix record.
    pub step: usize,
    /// Observed intention classes of the prefix travels.
    pub history: Vec<usize>,
    /// Predicted language-space embedding `Y_T`.
    pub embedding: Vec<f64>,
    pub predicted_class: usize,
    /// Class of the travel that actually follows.
    pub true_class: usize,
    pub prefix: Vec<u32>,
    /// Next location id.
    pub truth: u32,
}

/// `predict-intentions` output: samples plus the anchors they were scored
/// against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub format_version: u32,
    pub space_hash: String,
    pub anchors: Matrix,
    pub samples: Vec<IntentionSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedSample {
    pub sample: IntentionSample,
    pub references: usize,
    pub prefix: bool,
    pub refinement: Refinement,
}

/// `refine` output, input of `predict`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedFile {
    pub format_version: u32,
    pub space_hash: String,
    pub samples: Vec<RefinedSample>,
}

fn check_version(found: u32) -> Result<()> {
    if found != STAGE_FILE_VERSION {
        return Err(Error::Version {
            expected: STAGE_FILE_VERSION,
            found,
        });
    }
    Ok(())
}

impl PredictionsFile {
    pub fn check(&self, space: &IntentionSpace) -> Result<()> {
        check_version(self.format_version)?;
        check_space(&self.space_hash, space)
    }
}

impl RefinedFile {
    pub fn check(&self, space: &IntentionSpace) -> Result<()> {
        check_version(self.format_version)?;
        check_space(&self.space_hash, space)
    }
}

pub fn space_hash(space: &IntentionSpace) -> String {
    crate::content_hash(space)
}

fn check_space(found: &str, space: &IntentionSpace) -> Result<()> {
    let expected = space_hash(space);
    if found != expected {
        return Err(Error::HashMismatch {
            what: "intention space".into(),
            expected,
            found: found.into(),
        });
    }
    Ok(())
}

/// Prediction positions of a trajectory: prefixes ending at `1..=len-2`,
/// so at least one travel of history and one next location exist.
pub fn positions(t: &Trajectory) -> std::ops::RangeInclusive<usize> {
    1..=t.len().saturating_sub(2)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the intention predictor over every position of `trajectories`.
pub fn intention_samples(
    world: &World,
    intentions: &IntentionModel,
    clip: &ClipModel,
    trajectories: &[&Trajectory],
) -> Result<Vec<IntentionSample>> {
    let anchors = clip.class_anchors();
    let tau = clip.manifest.config.class_temperature;
    let mut out = Vec::new();
    for t in trajectories {
        let features = extract_travel_features(t, world)?;
        if features.len() < 2 {
            continue;
        }
        let classes = intentions.map_features(&features)?.classes;
        let history: Vec<Vec<f64>> = features[..features.len() - 1].iter().map(|f| f.values.clone()).collect();
        let prediction = clip.predict(&history)?;
        let locs: Vec<u32> = t.locations().map(|l| l.0).collect();
        for s in positions(t) {
            let embedding = prediction.step_embeddings[s - 1].clone();
            out.push(IntentionSample {
                id: format!("{}#{s}", t.id),
                trajectory: t.id.clone(),
                user_id: t.user_id.clone(),
                level: t.disaster_level,
                step: s,
                history: classes[..s].to_vec(),
                predicted_class: argmax(&cosine_logits(&embedding, &anchors, tau)),
                embedding,
                true_class: classes[s],
                prefix: locs[..=s].to_vec(),
                truth: locs[s + 1],
            });
        }
    }
    Ok(out)
}

/// Shared inputs for turning samples into prompts.
pub struct PromptContext<'a> {
    pub space: &'a IntentionSpace,
    pub anchors: &'a Matrix,
    pub labels: &'a LevelLabels,
    /// `None` disables retrieval.
    pub index: Option<&'a TrajectoryIndex>,
    pub k: usize,
    /// `None` disables the disaster prefix.
    pub encoder: Option<&'a DisasterEncoder>,
}

/// Retrieves references for `sample` (excluding its own trajectory) and
/// assembles its prompt.
pub fn sample_prompt(sample: &IntentionSample, ctx: &PromptContext<'_>) -> Result<(PromptBundle, ReferenceSet)> {
    let references = match ctx.index {
        Some(index) => index
            .retrieve(&sample.history, sample.level, ctx.k, Some(&sample.trajectory))
            .map_err(|e| e.in_stage("retrieve"))?,
        None => ReferenceSet::default(),
    };
    let query: Vec<Vec<f64>> = sample.history.iter().map(|&c| ctx.anchors.row(c).to_vec()).collect();
    let prefix = ctx.encoder.map(|e| e.encode(sample.level)).transpose()?;
    let prompt = build_prompt(&PromptInputs {
        id: &sample.id,
        level: sample.level,
        labels: ctx.labels,
        query: &query,
        predicted: &sample.embedding,
        predicted_class: sample.predicted_class,
        references: &references,
        anchors: ctx.anchors,
        intentions: ctx.space.intention_count(),
        immobility: ctx.space.immobility_class().is_some(),
        prefix,
    })
    .map_err(|e| e.in_stage("prompt"))?;
    Ok((prompt, references))
}
