//! Travel features, cross-city transfer, and the intention vocabulary.
//!
//! A trajectory of `n` records yields `n - 1` travels. Each travel becomes a
//! feature vector (see [`TravelFeature`]), is projected by a [`TcaTransform`]
//! fitted on source and target samples together, and is assigned an
//! intention class by an [`IntentionSpace`].
//!
//! ```
//! use intentmob::intention::{IntentionConfig, IntentionModel};
//! use intentmob::trajstore::{generate_bundle, generate_world, BundleConfig, WorldConfig};
//!
//! let world = generate_world(&WorldConfig::default(), 1).unwrap();
//! let bundle = generate_bundle(&world, &BundleConfig::small(), 1).unwrap();
//! let model = IntentionModel::fit(
//!     &world,
//!     bundle.d_ns.iter().chain(&bundle.d_ds),
//!     bundle.d_nt.iter(),
//!     &IntentionConfig::default(),
//!     1,
//! )
//! .unwrap();
//! let seq = model.map_trajectory(&bundle.d_nt[0], &world).unwrap();
//! assert_eq!(seq.len(), bundle.d_nt[0].len() - 1);
//! assert!(seq.classes.iter().all(|&c| c < model.space.class_count()));
//! ```

mod features;
mod kmeans;
mod space;
mod tca;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use features::{extract_travel_features, TravelFeature};
pub use kmeans::{kmeans_medoids, silhouette, Clustering};
pub use space::{fit_intention_clusters, ImmobilityVector, IntentionSequence, IntentionSpace};
pub use tca::{fit_tca, Kernel, Standardizer, TcaConfig, TcaTransform, TransformedTravel};

use crate::error::{Error, Result};
use crate::trajstore::{Trajectory, World};

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntentionConfig {
    /// `N_I`.
    pub intentions: usize,
    pub tca: TcaConfig,
    /// Reserve a class for same-location travels.
    pub immobility: bool,
    /// Immobility vector offset, in multiples of the largest centroid gap.
    pub immobility_scale: f64,
}

impl Default for IntentionConfig {
    fn default() -> Self {
        Self {
            intentions: 8,
            tca: TcaConfig::default(),
            immobility: true,
            immobility_scale: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionManifest {
    pub format_version: u32,
    pub intentions: usize,
    pub components: usize,
    pub mu: f64,
    pub seed: u64,
    pub world_hash: String,
}

/// Fitted transform and intention space, stored together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionModel {
    pub manifest: IntentionManifest,
    pub transform: TcaTransform,
    pub space: IntentionSpace,
}

fn collect_features<'a>(
    world: &World,
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
) -> Result<Vec<TravelFeature>> {
    let mut out = Vec::new();
    for t in trajectories {
        out.extend(extract_travel_features(t, world)?);
    }
    Ok(out)
}

impl IntentionModel {
    /// Fits TCA on `source ∪ target` travels, then clusters the projected
    /// travels of both samples.
    pub fn fit<'a>(
        world: &World,
        source: impl IntoIterator<Item = &'a Trajectory>,
        target: impl IntoIterator<Item = &'a Trajectory>,
        config: &IntentionConfig,
        seed: u64,
    ) -> Result<Self> {
        let source = collect_features(world, source)?;
        let target = collect_features(world, target)?;
        let values = |f: &[TravelFeature]| f.iter().map(|x| x.values.clone()).collect::<Vec<_>>();
        let transform = fit_tca(&values(&source), &values(&target), &config.tca)?;

        let mut points = Vec::new();
        for f in source.iter().chain(&target) {
            if config.immobility && f.is_immobility {
                continue;
            }
            points.push(transform.apply(&f.values)?);
        }
        let scale = config.immobility.then_some(config.immobility_scale);
        let space = fit_intention_clusters(&points, config.intentions, scale, seed)?;
        Ok(Self {
            manifest: IntentionManifest {
                format_version: ARTIFACT_VERSION,
                intentions: config.intentions,
                components: transform.components(),
                mu: config.tca.mu,
                seed,
                world_hash: world.hash(),
            },
            transform,
            space,
        })
    }

    pub fn map_features(&self, features: &[TravelFeature]) -> Result<IntentionSequence> {
        self.space.map(&self.transform.apply_sequence(features)?)
    }

    pub fn map_trajectory(&self, trajectory: &Trajectory, world: &World) -> Result<IntentionSequence> {
        self.map_features(&extract_travel_features(trajectory, world)?)
    }

    /// Pretty JSON: manifest, transform (standardization statistics and
    /// basis), intention space (centroids and immobility vector).
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if model.manifest.format_version != ARTIFACT_VERSION {
            return Err(Error::Version {
                expected: ARTIFACT_VERSION,
                found: model.manifest.format_version,
            });
        }
        Ok(model)
    }

    /// Fails unless the model was fitted on `world`.
    pub fn check_world(&self, world: &World) -> Result<()> {
        let found = world.hash();
        if found != self.manifest.world_hash {
            return Err(Error::HashMismatch {
                what: "world".into(),
                expected: self.manifest.world_hash.clone(),
                found,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajstore::{generate_bundle, generate_world, BundleConfig, WorldConfig};

    fn fitted(immobility: bool) -> (World, crate::trajstore::CorpusBundle, IntentionModel) {
        let world = generate_world(&WorldConfig::default(), 5).unwrap();
        let bundle = generate_bundle(&world, &BundleConfig::small(), 5).unwrap();
        let config = IntentionConfig {
            immobility,
            ..IntentionConfig::default()
        };
        let model =
            IntentionModel::fit(&world, bundle.d_ns.iter(), bundle.d_nt.iter(), &config, 5).unwrap();
        (world, bundle, model)
    }

    #[test]
    fn stays_map_to_immobility_class() {
        let (world, bundle, model) = fitted(true);
        let ic = model.space.immobility_class().unwrap();
        for t in bundle.d_dt.iter().take(20) {
            let seq = model.map_trajectory(t, &world).unwrap();
            for (w, &c) in t.records.windows(2).zip(&seq.classes) {
                assert_eq!(w[0].1 == w[1].1, c == ic);
            }
        }
    }

    #[test]
    fn refit_is_identical() {
        let (_, _, a) = fitted(true);
        let (_, _, b) = fitted(true);
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    }

    #[test]
    fn centroids_map_to_themselves() {
        let (_, _, model) = fitted(true);
        for (i, c) in model.space.centroids.iter().enumerate() {
            assert_eq!(model.space.nearest_centroid(c).unwrap(), i);
        }
    }

    #[test]
    fn without_immobility_there_are_n_classes() {
        let (_, _, model) = fitted(false);
        assert_eq!(model.space.class_count(), 8);
        assert!(model.space.immobility_class().is_none());
    }

    #[test]
    fn artifact_round_trip() {
        let (world, _, model) = fitted(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("space.json");
        model.save(&path).unwrap();
        let back = IntentionModel::load(&path).unwrap();
        assert_eq!(back, model);
        back.check_world(&world).unwrap();
    }
}
