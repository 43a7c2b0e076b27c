//! Next-intention prediction aligned with a language embedding space.
//!
//! A causal transformer reads the travel features of a history and emits one
//! vector per prefix in the language space. Classes are scored by cosine
//! similarity to per-class anchors: each centroid's intention vector is
//! lifted and attends over prototypes `P = h · V` built from the vocabulary
//! `V`; the immobility anchor is a free vector started at the "stay still"
//! rows of `V`.
//!
//! Training minimises the sum of a symmetric in-batch InfoNCE term between
//! predictions and the anchors of the true next classes, and the class
//! cross-entropy.

mod clip;
mod proto;
mod vocab;

pub use clip::{
    cosine_logits, ClipConfig, ClipManifest, ClipModel, IntentionPrediction, LossParts, PrototypeProbe,
    TrainReport, TrainingSequence,
};
pub use proto::{build_prototypes, language_project, Projection};
pub use vocab::{VocabSource, Vocabulary, SYNTHETIC_STAY_STILL};

use crate::error::Result;
use crate::intention::{extract_travel_features, IntentionModel, Standardizer};
use crate::trajstore::{Trajectory, World};

/// Travel features and intention classes of each trajectory with at least
/// two travels.
pub fn training_sequences<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
    world: &World,
    intentions: &IntentionModel,
) -> Result<Vec<TrainingSequence>> {
    let mut out = Vec::new();
    for t in trajectories {
        let features = extract_travel_features(t, world)?;
        if features.len() < 2 {
            continue;
        }
        let classes = intentions.map_features(&features)?.classes;
        out.push(TrainingSequence {
            features: features.into_iter().map(|f| f.values).collect(),
            classes,
        });
    }
    Ok(out)
}

/// Builds and trains a model on `sequences`.
pub fn train_intention_clip(
    sequences: &[TrainingSequence],
    intentions: &IntentionModel,
    config: &ClipConfig,
    vocabulary: Vocabulary,
    seed: u64,
) -> Result<(ClipModel, TrainReport)> {
    let dim = intentions.transform.input_dim();
    let standardizer = Standardizer::fit(
        sequences.iter().flat_map(|s| s.features.iter().map(Vec::as_slice)),
        dim,
    );
    let mut model = ClipModel::new(config, vocabulary, &intentions.space, standardizer, seed)?;
    let report = model.train(sequences)?;
    Ok((model, report))
}
