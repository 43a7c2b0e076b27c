//! Intention-level trajectory retrieval.
//!
//! Every indexed trajectory is stored as its intention sequence. The last
//! intention is the entry's *next* intention; the rest is its *history*,
//! which is what a query history is aligned against.

mod dtw;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use dtw::{dtw_distance, dtw_with};

use crate::error::{Error, Result};
use crate::intention::{IntentionModel, IntentionSpace};
use crate::trajstore::{DisasterLevel, Scenario, Trajectory, World};

pub const INDEX_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "corpus", content = "level", rename_all = "kebab-case")]
pub enum CorpusTag {
    SourceNormal,
    SourceDisaster(u8),
    TargetNormal,
    TargetDisaster(u8),
}

impl CorpusTag {
    pub fn of(trajectory: &Trajectory, world: &World) -> Self {
        let level = trajectory.disaster_level.0;
        match (world.is_source(&trajectory.city), trajectory.scenario) {
            (true, Scenario::Normal) => Self::SourceNormal,
            (true, Scenario::Disaster) => Self::SourceDisaster(level),
            (false, Scenario::Normal) => Self::TargetNormal,
            (false, Scenario::Disaster) => Self::TargetDisaster(level),
        }
    }

    pub fn is_source(self) -> bool {
        matches!(self, Self::SourceNormal | Self::SourceDisaster(_))
    }

    pub fn level(self) -> DisasterLevel {
        match self {
            Self::SourceNormal | Self::TargetNormal => DisasterLevel::NONE,
            Self::SourceDisaster(l) | Self::TargetDisaster(l) => DisasterLevel(l),
        }
    }
}

impl fmt::Display for CorpusTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SourceNormal => write!(f, "source-normal"),
            Self::SourceDisaster(l) => write!(f, "source-disaster[{l}]"),
            Self::TargetNormal => write!(f, "target-normal"),
            Self::TargetDisaster(l) => write!(f, "target-disaster[{l}]"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub tag: CorpusTag,
    pub id: String,
    pub city: String,
    /// Intention class of every travel.
    pub classes: Vec<usize>,
}

impl IndexEntry {
    pub fn history(&self) -> &[usize] {
        &self.classes[..self.classes.len().saturating_sub(1)]
    }

    pub fn next(&self) -> usize {
        *self.classes.last().expect("entries hold at least one travel")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub space_hash: String,
    pub corpus_hash: String,
    pub default_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexFile {
    manifest: IndexManifest,
    entries: Vec<IndexEntry>,
}

/// Immutable reference database.
#[derive(Clone, Debug)]
pub struct TrajectoryIndex {
    pub manifest: IndexManifest,
    entries: Vec<IndexEntry>,
    /// Intention vector of each class.
    class_vectors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub tag: CorpusTag,
    pub id: String,
    pub distance: f64,
    pub history: Vec<usize>,
    pub next: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    /// Source-city trajectories at the query level.
    pub source: Vec<Reference>,
    /// Target-city trajectories, normal or at another level.
    pub target: Vec<Reference>,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.source.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Reference> {
        self.source.iter().chain(&self.target)
    }
}

fn space_hash(space: &IntentionSpace) -> String {
    crate::content_hash(space)
}

impl TrajectoryIndex {
    /// Maps `trajectories` through `intentions` and indexes them in order.
    pub fn build<'a>(
        world: &World,
        trajectories: impl IntoIterator<Item = &'a Trajectory>,
        intentions: &IntentionModel,
    ) -> Result<Self> {
        intentions.check_world(world)?;
        let mut entries = Vec::new();
        for t in trajectories {
            entries.push(IndexEntry {
                tag: CorpusTag::of(t, world),
                id: t.id.clone(),
                city: t.city.clone(),
                classes: intentions.map_trajectory(t, world)?.classes,
            });
        }
        Self::from_entries(entries, &intentions.space)
    }

    pub fn from_entries(entries: Vec<IndexEntry>, space: &IntentionSpace) -> Result<Self> {
        let k = space.class_count();
        for e in &entries {
            if e.classes.is_empty() {
                return Err(Error::invalid(format!("index entry {} has no travels", e.id)));
            }
            if let Some(&c) = e.classes.iter().find(|&&c| c >= k) {
                return Err(Error::invalid(format!("entry {} has class {c} outside 0..{k}", e.id)));
            }
        }
        let class_vectors = (0..k).map(|c| space.class_vector(c)).collect::<Result<_>>()?;
        Ok(Self {
            manifest: IndexManifest {
                format_version: INDEX_VERSION,
                space_hash: space_hash(space),
                corpus_hash: crate::content_hash(&entries),
                default_k: DEFAULT_K,
            },
            entries,
            class_vectors,
        })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn class_vector(&self, class: usize) -> &[f64] {
        &self.class_vectors[class]
    }

    pub fn vectors(&self, classes: &[usize]) -> Vec<Vec<f64>> {
        classes.iter().map(|&c| self.class_vectors[c].clone()).collect()
    }

    /// DTW between two class sequences over their intention vectors.
    pub fn class_distance(&self, a: &[usize], b: &[usize]) -> Result<f64> {
        dtw_with(a, b, None, |&x, &y| {
            Ok(crate::nn::euclidean(&self.class_vectors[x], &self.class_vectors[y]))
        })
    }

    /// Top-`k` source and target references for a query history at level `d`.
    ///
    /// `exclude` removes one trajectory id (normally the query's own).
    pub fn retrieve(
        &self,
        query: &[usize],
        level: DisasterLevel,
        k: usize,
        exclude: Option<&str>,
    ) -> Result<ReferenceSet> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let mut source = Vec::new();
        let mut target = Vec::new();
        if query.is_empty() {
            return Err(Error::invalid("empty query history"));
        }
        for e in &self.entries {
            if Some(e.id.as_str()) == exclude || e.history().is_empty() {
                continue;
            }
            let bucket = if e.tag.is_source() {
                if e.tag.level() != level {
                    continue;
                }
                &mut source
            } else {
                if e.tag == CorpusTag::TargetDisaster(level.0) {
                    continue;
                }
                &mut target
            };
            bucket.push(Reference {
                tag: e.tag,
                id: e.id.clone(),
                distance: self.class_distance(query, e.history())?,
                history: e.history().to_vec(),
                next: e.next(),
            });
        }
        for list in [&mut source, &mut target] {
            list.sort_by(|a, b| {
                a.distance
                    .total_cmp(&b.distance)
                    .then(a.tag.cmp(&b.tag))
                    .then(a.id.cmp(&b.id))
            });
            list.truncate(k);
        }
        Ok(ReferenceSet { source, target })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = IndexFile {
            manifest: self.manifest.clone(),
            entries: self.entries.clone(),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    /// Loads an index, checking that it was built over `space`.
    pub fn load(path: &Path, space: &IntentionSpace) -> Result<Self> {
        let file: IndexFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.manifest.format_version != INDEX_VERSION {
            return Err(Error::Version {
                expected: INDEX_VERSION,
                found: file.manifest.format_version,
            });
        }
        let found = space_hash(space);
        if found != file.manifest.space_hash {
            return Err(Error::HashMismatch {
                what: "intention space".into(),
                expected: file.manifest.space_hash,
                found,
            });
        }
        let mut index = Self::from_entries(file.entries, space)?;
        index.manifest.default_k = file.manifest.default_k;
        Ok(index)
    }

    /// Entry counts per corpus tag.
    pub fn tag_counts(&self) -> BTreeMap<CorpusTag, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.tag).or_insert(0) += 1;
        }
        out
    }
}
