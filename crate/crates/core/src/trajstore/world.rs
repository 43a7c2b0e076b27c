use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{City, Location, LocationId, RoadCounts, World};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub source_cities: Vec<String>,
    pub target_city: String,
    pub locations_per_city: usize,
    /// Category 0 is residential.
    pub poi_categories: usize,
    pub road_types: usize,
    pub transport_hubs: usize,
    /// Side length of the square each city occupies.
    pub extent: f64,
    /// Log-scale spread of per-city POI category multipliers.
    pub heterogeneity: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            source_cities: vec!["alder".into(), "birch".into()],
            target_city: "cedar".into(),
            locations_per_city: 24,
            poi_categories: 5,
            road_types: 3,
            transport_hubs: 3,
            extent: 10.0,
            heterogeneity: 0.4,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.source_cities.is_empty() {
            return Err(Error::config("at least one source city is required"));
        }
        if self.target_city.is_empty() {
            return Err(Error::config("target city name is empty"));
        }
        let mut names: Vec<&str> = self.source_cities.iter().map(String::as_str).collect();
        names.push(&self.target_city);
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("city names must be distinct"));
        }
        if self.locations_per_city < 4 {
            return Err(Error::config(format!(
                "locations_per_city = {} (minimum 4)",
                self.locations_per_city
            )));
        }
        if self.poi_categories < 2 {
            return Err(Error::config(format!(
                "poi_categories = {} (minimum 2)",
                self.poi_categories
            )));
        }
        if self.road_types < 1 {
            return Err(Error::config("road_types = 0 (minimum 1)"));
        }
        if !(self.extent > 0.0) || !(self.heterogeneity >= 0.0) {
            return Err(Error::config("extent must be positive, heterogeneity non-negative"));
        }
        Ok(())
    }

    pub fn city_names(&self) -> impl Iterator<Item = &str> {
        self.source_cities
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(self.target_city.as_str()))
    }
}

/// Builds every city of `config`. A pure function of `(config, seed)`.
pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let cities = config
        .city_names()
        .map(|name| {
            let mut rng = crate::derive_rng(seed, &["world", name]);
            generate_city(config, name, &mut rng)
        })
        .collect();
    let world = World {
        poi_categories: config.poi_categories,
        road_types: config.road_types,
        source_cities: config.source_cities.clone(),
        target_city: config.target_city.clone(),
        cities,
    };
    world.validate()?;
    Ok(world)
}

fn generate_city(config: &WorldConfig, name: &str, rng: &mut impl Rng) -> City {
    let n = config.locations_per_city;
    let spread = Normal::new(0.0, config.heterogeneity.max(1e-12)).expect("finite");
    let multipliers: Vec<f64> = (0..config.poi_categories)
        .map(|_| spread.sample(rng).exp())
        .collect();
    let hubs: Vec<[f64; 2]> = (0..config.transport_hubs.max(1))
        .map(|_| random_point(config.extent, rng))
        .collect();

    let locations = (0..n)
        .map(|i| {
            // Roughly a third of locations are residential.
            let dominant = if rng.random::<f64>() < 0.35 {
                0
            } else {
                rng.random_range(1..config.poi_categories)
            };
            let poi_counts = multipliers
                .iter()
                .enumerate()
                .map(|(c, m)| {
                    let base = if c == dominant {
                        rng.random_range(15.0..30.0)
                    } else {
                        rng.random_range(0.0..5.0)
                    };
                    (base * m).round() as u32
                })
                .collect();
            let coords = random_point(config.extent, rng);
            let transport_distance = hubs
                .iter()
                .map(|h| ((h[0] - coords[0]).powi(2) + (h[1] - coords[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            Location {
                id: LocationId(i as u32),
                coords,
                poi_counts,
                transport_distance,
            }
        })
        .collect::<Vec<_>>();

    let mut road_counts = RoadCounts::zeros(n, config.road_types);
    for a in 0..n {
        for b in (a + 1)..n {
            let (p, q) = (locations[a].coords, locations[b].coords);
            let dist = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            let counts: Vec<u32> = (0..config.road_types)
                .map(|k| {
                    // Higher road types are sparser but reach further.
                    let reach = config.extent * (k + 1) as f64 / config.road_types as f64;
                    let mean = 3.0 / (k + 1) as f64 * (-dist / reach).exp();
                    (mean + rng.random::<f64>()).floor() as u32
                })
                .collect();
            road_counts.pair_mut(a, b).copy_from_slice(&counts);
            road_counts.pair_mut(b, a).copy_from_slice(&counts);
        }
    }

    City {
        name: name.to_string(),
        locations,
        road_counts,
    }
}

fn random_point(extent: f64, rng: &mut impl Rng) -> [f64; 2] {
    [rng.random_range(0.0..extent), rng.random_range(0.0..extent)]
}
