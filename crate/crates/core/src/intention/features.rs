use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajstore::{Location, Trajectory, World};

/// Attributes of one travel between consecutive records.
///
/// Layout: origin POI counts, origin transport distance, destination POI
/// counts, destination transport distance, road-type counts for the pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TravelFeature {
    pub values: Vec<f64>,
    pub is_immobility: bool,
}

fn push_location(out: &mut Vec<f64>, l: &Location) {
    out.extend(l.poi_counts.iter().map(|&c| c as f64));
    out.push(l.transport_distance);
}

pub fn extract_travel_features(trajectory: &Trajectory, world: &World) -> Result<Vec<TravelFeature>> {
    if trajectory.records.len() < 2 {
        return Err(Error::invalid(format!(
            "trajectory {} has fewer than two records",
            trajectory.id
        )));
    }
    let city = world.city(&trajectory.city)?;
    let dim = world.travel_feature_dim();
    trajectory
        .records
        .windows(2)
        .map(|w| {
            let (from, to) = (w[0].location(), w[1].location());
            let mut values = Vec::with_capacity(dim);
            push_location(&mut values, city.location(from)?);
            push_location(&mut values, city.location(to)?);
            values.extend(city.roads(from, to).iter().map(|&c| c as f64));
            Ok(TravelFeature {
                values,
                is_immobility: from == to,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajstore::{
        City, DisasterLevel, LocationId, Record, RoadCounts, Scenario, World,
    };

    fn tiny_world() -> World {
        let loc = |id, poi: Vec<u32>, d| Location {
            id: LocationId(id),
            coords: [0.0, 0.0],
            poi_counts: poi,
            transport_distance: d,
        };
        let mut roads = RoadCounts::zeros(2, 1);
        roads.pair_mut(0, 1)[0] = 1;
        World {
            poi_categories: 2,
            road_types: 1,
            source_cities: vec![],
            target_city: "c".into(),
            cities: vec![City {
                name: "c".into(),
                locations: vec![loc(0, vec![2, 0], 0.5), loc(1, vec![0, 3], 1.5)],
                road_counts: roads,
            }],
        }
    }

    fn traj(locs: &[u32]) -> Trajectory {
        Trajectory {
            id: "t".into(),
            user_id: "u".into(),
            city: "c".into(),
            scenario: Scenario::Normal,
            disaster_level: DisasterLevel(0),
            records: locs
                .iter()
                .enumerate()
                .map(|(i, &l)| Record(i as i64, LocationId(l)))
                .collect(),
            ground_truth_intentions: None,
        }
    }

    #[test]
    fn same_location_is_immobility() {
        let f = extract_travel_features(&traj(&[0, 0]), &tiny_world()).unwrap();
        assert_eq!(f.len(), 1);
        assert!(f[0].is_immobility);
    }

    #[test]
    fn concatenates_origin_destination_roads() {
        let f = extract_travel_features(&traj(&[0, 1]), &tiny_world()).unwrap();
        assert_eq!(f[0].values, vec![2.0, 0.0, 0.5, 0.0, 3.0, 1.5, 1.0]);
        assert!(!f[0].is_immobility);
    }

    #[test]
    fn one_feature_per_travel() {
        let f = extract_travel_features(&traj(&[0, 1, 1, 0, 1]), &tiny_world()).unwrap();
        assert_eq!(f.len(), 4);
        let flags: Vec<bool> = f.iter().map(|x| x.is_immobility).collect();
        assert_eq!(flags, vec![false, true, false, false]);
    }

    #[test]
    fn unknown_location_is_an_error() {
        let err = extract_travel_features(&traj(&[0, 7]), &tiny_world()).unwrap_err();
        assert!(matches!(err, Error::UnknownLocation { location: 7, .. }));
    }
}
