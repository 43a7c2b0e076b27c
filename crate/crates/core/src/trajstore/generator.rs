//! Routine-driven synthetic mobility with disaster-dependent sheltering.
//!
//! Every user owns a routine: a home plus one anchor location per POI
//! category, and a cyclic purpose template starting at home. A day is a walk
//! through the template where each step either stays put (a two-state Markov
//! chain whose stationary rate is the configured immobility rate of the
//! disaster level) or moves to the anchor of the next purpose. Disasters
//! raise the stay rate and its persistence and divert moves back home.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    City, CorpusBundle, DisasterLevel, LatentIntention, LocationId, Record, Scenario, Trajectory,
    World,
};
use crate::error::{Error, Result};

const SLOT_SECONDS: i64 = 3600;
const DAY_SECONDS: i64 = 86_400;
const HOME: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilityParams {
    /// Stationary probability that a travel is a stay, per disaster ordinal.
    pub immobility_rates: Vec<f64>,
    /// Extra probability of staying again right after a stay, per ordinal.
    pub stay_persistence: Vec<f64>,
    /// Probability that a move is diverted home, per ordinal.
    pub home_bias: Vec<f64>,
    /// Probability that a move goes to a non-anchor location of its category.
    pub exploration: f64,
    pub template_len: [usize; 2],
}

impl Default for MobilityParams {
    fn default() -> Self {
        Self {
            immobility_rates: vec![0.10, 0.22, 0.38, 0.55, 0.70],
            stay_persistence: vec![0.0, 0.25, 0.45, 0.6, 0.7],
            home_bias: vec![0.0, 0.1, 0.2, 0.35, 0.5],
            exploration: 0.1,
            template_len: [4, 6],
        }
    }
}

impl MobilityParams {
    pub fn levels(&self) -> usize {
        self.immobility_rates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 {
            return Err(Error::config("immobility_rates is empty"));
        }
        if self.stay_persistence.len() != l || self.home_bias.len() != l {
            return Err(Error::config(
                "immobility_rates, stay_persistence and home_bias need one entry per level",
            ));
        }
        if self.immobility_rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("immobility_rates must be strictly increasing"));
        }
        let unit = |v: &f64| (0.0..1.0).contains(v);
        if !self.immobility_rates.iter().all(unit)
            || !self.stay_persistence.iter().all(unit)
            || !self.home_bias.iter().all(|v| (0.0..=1.0).contains(v))
            || !(0.0..=1.0).contains(&self.exploration)
        {
            return Err(Error::config("mobility probabilities out of range"));
        }
        if self.template_len[0] < 2 || self.template_len[0] > self.template_len[1] {
            return Err(Error::config("template_len must satisfy 2 <= min <= max"));
        }
        Ok(())
    }

    /// `(P(stay | previous travel moved), P(stay | previous travel stayed))`
    fn stay_probabilities(&self, level: usize) -> (f64, f64) {
        let pi = self.immobility_rates[level];
        let rho = self.stay_persistence[level];
        (pi * (1.0 - rho), pi + rho * (1.0 - pi))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub city: String,
    pub scenario: Scenario,
    pub disaster_level: DisasterLevel,
    pub users: usize,
    pub days: usize,
    /// Inclusive record-count range per trajectory.
    pub length: [usize; 2],
}

impl ScenarioSpec {
    fn validate(&self, params: &MobilityParams) -> Result<()> {
        if self.disaster_level.ordinal() >= params.levels() {
            return Err(Error::config(format!(
                "disaster level {} exceeds the maximum configured level {}",
                self.disaster_level,
                params.levels() - 1
            )));
        }
        if (self.scenario == Scenario::Normal) != (self.disaster_level == DisasterLevel::NONE) {
            return Err(Error::config("normal scenarios use level 0 and disasters level >= 1"));
        }
        if self.length[0] < 2 || self.length[0] > self.length[1] {
            return Err(Error::config("trajectory length range must satisfy 2 <= min <= max"));
        }
        if self.length[1] as i64 * SLOT_SECONDS > DAY_SECONDS {
            return Err(Error::config("trajectories longer than one day of hourly slots"));
        }
        Ok(())
    }
}

struct Routine {
    /// Anchor per POI category; index 0 is home.
    anchors: Vec<LocationId>,
    /// Cyclic purpose order; starts at home, never ends at home.
    template: Vec<usize>,
}

fn weighted_pick(
    city: &City,
    category: usize,
    exclude: &BTreeSet<LocationId>,
    rng: &mut impl Rng,
) -> Option<LocationId> {
    let candidates: Vec<(LocationId, f64)> = city
        .locations
        .iter()
        .filter(|l| !exclude.contains(&l.id))
        .map(|l| (l.id, l.poi_counts[category] as f64 + 0.5))
        .collect();
    let total: f64 = candidates.iter().map(|c| c.1).sum();
    if candidates.is_empty() {
        return None;
    }
    let mut x = rng.random::<f64>() * total;
    for (id, w) in &candidates {
        if x < *w {
            return Some(*id);
        }
        x -= w;
    }
    candidates.last().map(|c| c.0)
}

impl Routine {
    fn derive(
        city: &City,
        categories: usize,
        params: &MobilityParams,
        rng: &mut impl Rng,
    ) -> Routine {
        let mut used = BTreeSet::new();
        let home = weighted_pick(city, HOME, &used, rng).expect("city has locations");
        used.insert(home);
        let mut anchors = vec![home];
        for c in 1..categories {
            // Distinct anchors while the city is large enough; never home.
            let exclude = if used.len() < city.len() {
                used.clone()
            } else {
                BTreeSet::from([home])
            };
            let a = weighted_pick(city, c, &exclude, rng).expect("at least two locations");
            used.insert(a);
            anchors.push(a);
        }

        let len = rng.random_range(params.template_len[0]..=params.template_len[1]);
        let mut template = vec![HOME];
        while template.len() < len {
            let prev = anchors[*template.last().unwrap()];
            let options: Vec<usize> = (0..categories)
                .filter(|&c| anchors[c] != prev)
                .filter(|&c| template.len() > 1 || c != HOME)
                .collect();
            template.push(*options.choose(rng).expect("home differs from other anchors"));
        }
        while *template.last().unwrap() == HOME {
            template.pop();
        }
        Routine { anchors, template }
    }
}

fn simulate_day(
    city: &City,
    routine: &Routine,
    params: &MobilityParams,
    level: usize,
    len: usize,
    day: usize,
    rng: &mut impl Rng,
) -> (Vec<Record>, Vec<LatentIntention>) {
    let (after_move, after_stay) = params.stay_probabilities(level);
    let pi = params.immobility_rates[level];
    let home = routine.anchors[HOME];
    let base = day as i64 * DAY_SECONDS;

    let mut loc = home;
    let mut ptr = 0;
    let mut last_stayed: Option<bool> = None;
    let mut records = vec![Record(base, loc)];
    let mut latent = Vec::with_capacity(len - 1);

    for slot in 1..len {
        let p_stay = match last_stayed {
            None => pi,
            Some(true) => after_stay,
            Some(false) => after_move,
        };
        if rng.random::<f64>() < p_stay {
            latent.push(LatentIntention::STAY);
            last_stayed = Some(true);
        } else {
            let purpose = if level > 0 && loc != home && rng.random::<f64>() < params.home_bias[level]
            {
                ptr = 0;
                HOME
            } else {
                ptr = (ptr + 1) % routine.template.len();
                routine.template[ptr]
            };
            let anchor = routine.anchors[purpose];
            let explore = rng.random::<f64>() < params.exploration;
            loc = if explore || anchor == loc {
                weighted_pick(city, purpose, &BTreeSet::from([loc]), rng).expect("two locations")
            } else {
                anchor
            };
            latent.push(LatentIntention(purpose as u8));
            last_stayed = Some(false);
        }
        records.push(Record(base + slot as i64 * SLOT_SECONDS, loc));
    }
    (records, latent)
}

pub fn user_id(index: usize) -> String {
    format!("u{index:04}")
}

/// Generates `spec.users × spec.days` trajectories.
///
/// A user's routine depends only on `(seed, city, user)`, so the same user
/// keeps their anchors across scenarios and disaster levels.
pub fn generate_trajectories(
    world: &World,
    spec: &ScenarioSpec,
    params: &MobilityParams,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    params.validate()?;
    spec.validate(params)?;
    let city = world.city(&spec.city)?;
    let level = spec.disaster_level.ordinal();
    let tag = format!("{}{}", spec.scenario, spec.disaster_level);

    let mut out = Vec::with_capacity(spec.users * spec.days);
    for u in 0..spec.users {
        let uid = user_id(u);
        let mut routine_rng = crate::derive_rng(seed, &["routine", &spec.city, &uid]);
        let routine = Routine::derive(city, world.poi_categories, params, &mut routine_rng);
        for day in 0..spec.days {
            let mut rng =
                crate::derive_rng(seed, &["day", &spec.city, &uid, &tag, &day.to_string()]);
            let len = rng.random_range(spec.length[0]..=spec.length[1]);
            let (records, latent) = simulate_day(city, &routine, params, level, len, day, &mut rng);
            out.push(Trajectory {
                id: format!("{}/{tag}/{uid}/d{day}", spec.city),
                user_id: uid.clone(),
                city: spec.city.clone(),
                scenario: spec.scenario,
                disaster_level: spec.disaster_level,
                records,
                ground_truth_intentions: Some(latent),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleConfig {
    pub source_normal_users: usize,
    pub source_normal_days: usize,
    pub source_disaster_users: usize,
    pub source_disaster_days: usize,
    pub source_levels: Vec<u8>,
    pub target_users: usize,
    pub target_normal_days: usize,
    pub target_disaster_days: usize,
    pub target_levels: Vec<u8>,
    pub length: [usize; 2],
    /// Fraction of target users whose disaster trajectories are held out.
    pub test_fraction: f64,
    pub mobility: MobilityParams,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            source_normal_users: 60,
            source_normal_days: 2,
            source_disaster_users: 40,
            source_disaster_days: 1,
            source_levels: vec![1, 2, 3, 4],
            target_users: 120,
            target_normal_days: 6,
            target_disaster_days: 2,
            target_levels: vec![2, 4],
            length: [10, 12],
            test_fraction: 0.3,
            mobility: MobilityParams::default(),
        }
    }
}

impl BundleConfig {
    /// A quarter-size bundle for examples and quick tests.
    pub fn small() -> Self {
        Self {
            source_normal_users: 16,
            source_disaster_users: 10,
            target_users: 30,
            ..Self::default()
        }
    }
}

/// Held-out portion of the target corpora.
///
/// Disaster trajectories are split by user; normal trajectories hold out the
/// last day of every target user.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetSplit {
    pub test_fraction: f64,
    pub test_users: BTreeSet<String>,
    pub normal_test_day: usize,
}

impl TargetSplit {
    pub fn is_disaster_test(&self, t: &Trajectory) -> bool {
        self.test_users.contains(&t.user_id)
    }

    pub fn is_normal_test(&self, t: &Trajectory) -> bool {
        t.id.ends_with(&format!("/d{}", self.normal_test_day))
    }
}

pub fn generate_bundle(world: &World, config: &BundleConfig, seed: u64) -> Result<CorpusBundle> {
    config.mobility.validate()?;
    if !(0.0..1.0).contains(&config.test_fraction) {
        return Err(Error::config("test_fraction must lie in [0, 1)"));
    }
    if config.target_normal_days < 2 {
        return Err(Error::config("target_normal_days must be >= 2 (one day is held out)"));
    }
    let spec = |city: &str, level: u8, users, days| ScenarioSpec {
        city: city.to_string(),
        scenario: if level == 0 { Scenario::Normal } else { Scenario::Disaster },
        disaster_level: DisasterLevel(level),
        users,
        days,
        length: config.length,
    };
    let mp = &config.mobility;

    let mut d_ns = Vec::new();
    let mut d_ds = Vec::new();
    for city in &world.source_cities {
        let s = spec(city, 0, config.source_normal_users, config.source_normal_days);
        d_ns.extend(generate_trajectories(world, &s, mp, seed)?);
        for &level in &config.source_levels {
            let s = spec(city, level, config.source_disaster_users, config.source_disaster_days);
            d_ds.extend(generate_trajectories(world, &s, mp, seed)?);
        }
    }
    let target = &world.target_city;
    let s = spec(target, 0, config.target_users, config.target_normal_days);
    let d_nt = generate_trajectories(world, &s, mp, seed)?;
    let mut d_dt = Vec::new();
    for &level in &config.target_levels {
        let s = spec(target, level, config.target_users, config.target_disaster_days);
        d_dt.extend(generate_trajectories(world, &s, mp, seed)?);
    }

    let mut users: Vec<String> = (0..config.target_users).map(user_id).collect();
    users.shuffle(&mut crate::derive_rng(seed, &["split"]));
    let n_test = (config.test_fraction * config.target_users as f64).round() as usize;
    let split = TargetSplit {
        test_fraction: config.test_fraction,
        test_users: users.into_iter().take(n_test).collect(),
        normal_test_day: config.target_normal_days - 1,
    };

    let bundle = CorpusBundle {
        d_ns,
        d_ds,
        d_nt,
        d_dt,
        split,
    };
    bundle.validate(world)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajstore::{generate_world, immobility_rate, WorldConfig};

    fn world() -> World {
        generate_world(&WorldConfig::default(), 3).unwrap()
    }

    fn spec(level: u8, users: usize, length: [usize; 2]) -> ScenarioSpec {
        ScenarioSpec {
            city: "cedar".into(),
            scenario: if level == 0 { Scenario::Normal } else { Scenario::Disaster },
            disaster_level: DisasterLevel(level),
            users,
            days: 1,
            length,
        }
    }

    #[test]
    fn base_immobility_rate_matches_config() {
        let p = MobilityParams::default();
        let c = generate_trajectories(&world(), &spec(0, 100, [12, 12]), &p, 11).unwrap();
        let rate = immobility_rate(&c);
        assert!((rate - p.immobility_rates[0]).abs() <= 0.05, "rate {rate}");
    }

    #[test]
    fn top_level_stays_more_than_normal() {
        let p = MobilityParams::default();
        let w = world();
        let normal = generate_trajectories(&w, &spec(0, 100, [12, 12]), &p, 5).unwrap();
        let severe = generate_trajectories(&w, &spec(4, 100, [12, 12]), &p, 5).unwrap();
        assert!(immobility_rate(&severe) > immobility_rate(&normal));
    }

    #[test]
    fn fixed_length_range() {
        let c = generate_trajectories(&world(), &spec(2, 20, [5, 5]), &MobilityParams::default(), 1)
            .unwrap();
        assert!(c.iter().all(|t| t.len() == 5));
    }

    #[test]
    fn rejects_level_beyond_configured() {
        let err = generate_trajectories(&world(), &spec(5, 1, [5, 5]), &MobilityParams::default(), 1)
            .unwrap_err();
        assert!(err.to_string().contains("maximum configured level"));
    }

    #[test]
    fn moves_never_repeat_location_and_latents_align() {
        let w = world();
        let c = generate_trajectories(&w, &spec(3, 30, [10, 12]), &MobilityParams::default(), 9)
            .unwrap();
        for t in &c {
            t.validate(&w).unwrap();
            let gt = t.ground_truth_intentions.as_ref().unwrap();
            for (pair, li) in t.records.windows(2).zip(gt) {
                assert_eq!(pair[0].1 == pair[1].1, li.is_stay());
            }
        }
    }

    #[test]
    fn disaster_shifts_visits_towards_home() {
        let w = world();
        let p = MobilityParams::default();
        let home_share = |level: u8| {
            let c = generate_trajectories(&w, &spec(level, 100, [12, 12]), &p, 4).unwrap();
            let (mut home, mut moves) = (0, 0);
            for t in &c {
                for li in t.ground_truth_intentions.as_ref().unwrap() {
                    if !li.is_stay() {
                        moves += 1;
                        home += usize::from(li.0 == 0);
                    }
                }
            }
            home as f64 / moves as f64
        };
        assert!(home_share(4) > home_share(0));
    }

    #[test]
    fn bundle_is_disjoint_and_split() {
        let w = world();
        let cfg = BundleConfig {
            source_normal_users: 5,
            source_disaster_users: 5,
            target_users: 10,
            ..BundleConfig::default()
        };
        let b = generate_bundle(&w, &cfg, 2).unwrap();
        assert_eq!(b.split.test_users.len(), 3);
        assert!(b.d_nt.iter().all(|t| t.city == "cedar"));
        assert!(b.d_ds.iter().all(|t| t.scenario == Scenario::Disaster));
    }
}
