//! World and trajectory data model, synthetic corpus generation and the
//! on-disk corpus format.

mod generator;
mod io;
mod precipitation;
mod world;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generator::{
    generate_bundle, generate_trajectories, BundleConfig, MobilityParams, ScenarioSpec,
    TargetSplit,
};
pub use io::{
    load_bundle, load_corpus, load_world, save_bundle, save_corpus, save_world, CorpusManifest,
    FORMAT_VERSION,
};
pub use precipitation::{disaster_level_from_precipitation, DEFAULT_THRESHOLDS};
pub use world::{generate_world, WorldConfig};

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct LocationId(pub u32);

impl fmt::Display for LocationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: LocationId,
    pub coords: [f64; 2],
    pub poi_counts: Vec<u32>,
    pub transport_distance: f64,
}

/// Road-type counts for every ordered location pair of a city.
///
/// Stored densely; serialized as a sparse list of the non-zero pairs, with
/// absent pairs reading as all-zero counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "SparseRoads", try_from = "SparseRoads")]
pub struct RoadCounts {
    locations: usize,
    road_types: usize,
    counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct SparseRoads {
    locations: usize,
    road_types: usize,
    pairs: Vec<(u32, u32, Vec<u32>)>,
}

impl From<RoadCounts> for SparseRoads {
    fn from(r: RoadCounts) -> Self {
        let mut pairs = Vec::new();
        for a in 0..r.locations {
            for b in 0..r.locations {
                let c = r.pair(a, b);
                if c.iter().any(|&v| v > 0) {
                    pairs.push((a as u32, b as u32, c.to_vec()));
                }
            }
        }
        SparseRoads {
            locations: r.locations,
            road_types: r.road_types,
            pairs,
        }
    }
}

impl TryFrom<SparseRoads> for RoadCounts {
    type Error = String;

    fn try_from(s: SparseRoads) -> Result<Self, String> {
        let mut r = RoadCounts::zeros(s.locations, s.road_types);
        for (a, b, c) in s.pairs {
            let (a, b) = (a as usize, b as usize);
            if a >= s.locations || b >= s.locations {
                return Err(format!("road pair ({a}, {b}) out of range"));
            }
            if c.len() != s.road_types {
                return Err(format!("road pair ({a}, {b}) has {} types", c.len()));
            }
            r.pair_mut(a, b).copy_from_slice(&c);
        }
        Ok(r)
    }
}

impl RoadCounts {
    pub fn zeros(locations: usize, road_types: usize) -> Self {
        Self {
            locations,
            road_types,
            counts: vec![0; locations * locations * road_types],
        }
    }

    pub fn road_types(&self) -> usize {
        self.road_types
    }

    pub fn pair(&self, from: usize, to: usize) -> &[u32] {
        let off = (from * self.locations + to) * self.road_types;
        &self.counts[off..off + self.road_types]
    }

    pub fn pair_mut(&mut self, from: usize, to: usize) -> &mut [u32] {
        let off = (from * self.locations + to) * self.road_types;
        &mut self.counts[off..off + self.road_types]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct City {
    pub name: String,
    pub locations: Vec<Location>,
    pub road_counts: RoadCounts,
}

impl City {
    /// Location ids are dense indices `0..n`.
    pub fn location(&self, id: LocationId) -> Result<&Location> {
        self.locations
            .get(id.0 as usize)
            .filter(|l| l.id == id)
            .ok_or_else(|| Error::UnknownLocation {
                city: self.name.clone(),
                location: id.0,
            })
    }

    pub fn roads(&self, from: LocationId, to: LocationId) -> &[u32] {
        self.road_counts.pair(from.0 as usize, to.0 as usize)
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    fn validate(&self, poi_categories: usize, road_types: usize) -> Result<()> {
        for (i, l) in self.locations.iter().enumerate() {
            if l.id.0 as usize != i {
                return Err(Error::invalid(format!(
                    "city {}: location at index {i} has id {}",
                    self.name, l.id
                )));
            }
            if l.poi_counts.len() != poi_categories {
                return Err(Error::invalid(format!(
                    "city {}: location {} has {} POI categories",
                    self.name,
                    l.id,
                    l.poi_counts.len()
                )));
            }
            if !(l.transport_distance >= 0.0) {
                return Err(Error::invalid(format!(
                    "city {}: location {} has negative transport distance",
                    self.name, l.id
                )));
            }
        }
        if self.road_counts.locations != self.locations.len()
            || self.road_counts.road_types != road_types
        {
            return Err(Error::invalid(format!(
                "city {}: road table shape does not match",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub poi_categories: usize,
    pub road_types: usize,
    pub source_cities: Vec<String>,
    pub target_city: String,
    pub cities: Vec<City>,
}

impl World {
    pub fn city(&self, name: &str) -> Result<&City> {
        self.cities
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown city {name}")))
    }

    pub fn is_source(&self, city: &str) -> bool {
        self.source_cities.iter().any(|c| c == city)
    }

    /// Width of a travel feature vector: two location blocks plus roads.
    pub fn travel_feature_dim(&self) -> usize {
        2 * (self.poi_categories + 1) + self.road_types
    }

    pub fn hash(&self) -> String {
        crate::content_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for c in &self.cities {
            if !names.insert(c.name.as_str()) {
                return Err(Error::invalid(format!("duplicate city {}", c.name)));
            }
            c.validate(self.poi_categories, self.road_types)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Normal,
    Disaster,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Normal => "normal",
            Scenario::Disaster => "disaster",
        })
    }
}

/// Ordinal disaster severity; `0` is "no disaster".
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct DisasterLevel(pub u8);

impl DisasterLevel {
    pub const NONE: DisasterLevel = DisasterLevel(0);

    pub fn ordinal(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for DisasterLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Text labels used in prompts, one per ordinal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LevelLabels(pub Vec<String>);

impl Default for LevelLabels {
    /// Five ordinals onto four labels: `{3, 4}` both read as severe.
    fn default() -> Self {
        Self(
            ["no disaster", "minor disaster", "general disaster", "severe disaster", "severe disaster"]
                .map(String::from)
                .to_vec(),
        )
    }
}

impl LevelLabels {
    pub const SEVERE: &'static str = "severe disaster";

    pub fn label(&self, level: DisasterLevel) -> Result<&str> {
        self.0
            .get(level.ordinal())
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("no label for disaster level {level}")))
    }

    pub fn levels(&self) -> usize {
        self.0.len()
    }

    pub fn validate(&self) -> Result<()> {
        match self.0.first().map(String::as_str) {
            Some("no disaster") => Ok(()),
            _ => Err(Error::config("ordinal 0 must be labelled \"no disaster\"")),
        }
    }
}

/// Generator-side purpose of one travel. Evaluation only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentIntention(pub u8);

impl LatentIntention {
    pub const STAY: LatentIntention = LatentIntention(u8::MAX);

    pub fn is_stay(self) -> bool {
        self == Self::STAY
    }
}

/// `(timestamp, location)`; serialized as a two-element array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record(pub i64, pub LocationId);

impl Record {
    pub fn time(&self) -> i64 {
        self.0
    }

    pub fn location(&self) -> LocationId {
        self.1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub user_id: String,
    pub city: String,
    pub scenario: Scenario,
    pub disaster_level: DisasterLevel,
    pub records: Vec<Record>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_intentions: Option<Vec<LatentIntention>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn locations(&self) -> impl Iterator<Item = LocationId> + '_ {
        self.records.iter().map(Record::location)
    }

    /// Trajectory truncated to its first `len` records.
    pub fn prefix(&self, len: usize) -> Trajectory {
        let mut t = self.clone();
        t.records.truncate(len);
        if let Some(gt) = &mut t.ground_truth_intentions {
            gt.truncate(len.saturating_sub(1));
        }
        t
    }

    pub fn validate(&self, world: &World) -> Result<()> {
        if self.records.len() < 2 {
            return Err(Error::invalid(format!("trajectory {} has < 2 records", self.id)));
        }
        if self.records.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::invalid(format!(
                "trajectory {}: timestamps not strictly increasing",
                self.id
            )));
        }
        let city = world.city(&self.city)?;
        for r in &self.records {
            city.location(r.1)?;
        }
        if let Some(gt) = &self.ground_truth_intentions {
            if gt.len() != self.records.len() - 1 {
                return Err(Error::invalid(format!(
                    "trajectory {}: {} latent intentions for {} travels",
                    self.id,
                    gt.len(),
                    self.records.len() - 1
                )));
            }
        }
        Ok(())
    }
}

/// Fraction of travels whose origin and destination coincide.
pub fn immobility_rate<'a>(corpus: impl IntoIterator<Item = &'a Trajectory>) -> f64 {
    let (mut stays, mut travels) = (0usize, 0usize);
    for t in corpus {
        for w in t.records.windows(2) {
            travels += 1;
            if w[0].1 == w[1].1 {
                stays += 1;
            }
        }
    }
    if travels == 0 {
        0.0
    } else {
        stays as f64 / travels as f64
    }
}

/// The four corpora of the transfer setting plus the held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusBundle {
    /// Normal scenario, source cities.
    pub d_ns: Vec<Trajectory>,
    /// Disaster scenarios, source cities.
    pub d_ds: Vec<Trajectory>,
    /// Normal scenario, target city.
    pub d_nt: Vec<Trajectory>,
    /// Disaster scenarios, target city.
    pub d_dt: Vec<Trajectory>,
    pub split: TargetSplit,
}

impl CorpusBundle {
    pub fn all(&self) -> impl Iterator<Item = &Trajectory> {
        self.d_ns
            .iter()
            .chain(&self.d_ds)
            .chain(&self.d_nt)
            .chain(&self.d_dt)
    }

    pub fn validate(&self, world: &World) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for t in self.all() {
            t.validate(world)?;
            if !seen.insert(t.id.as_str()) {
                return Err(Error::invalid(format!("trajectory {} appears twice", t.id)));
            }
        }
        let target = &world.target_city;
        let misplaced = self.d_ns.iter().chain(&self.d_ds).any(|t| &t.city == target)
            || self.d_nt.iter().chain(&self.d_dt).any(|t| &t.city != target);
        if misplaced {
            return Err(Error::invalid("target city trajectories outside d_nt/d_dt"));
        }
        Ok(())
    }

    pub fn corpus_hashes(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("d_ns", crate::content_hash(&self.d_ns)),
            ("d_ds", crate::content_hash(&self.d_ds)),
            ("d_nt", crate::content_hash(&self.d_nt)),
            ("d_dt", crate::content_hash(&self.d_dt)),
        ])
    }
}
