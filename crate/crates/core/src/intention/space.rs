use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans_medoids, nearest, silhouette};
use super::tca::TransformedTravel;
use crate::error::{Error, Result};
use crate::nn::euclidean;

/// Reserved vector for the immobility class.
///
/// Intention vectors carry one extra coordinate beyond the TCA components.
/// Centroids sit at 0 on it; the immobility vector sits at the centroid mean
/// shifted by `offset` along it, so it is exactly `offset` away from the
/// centroid mean and at least that far from every centroid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImmobilityVector {
    pub vector: Vec<f64>,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionSpace {
    /// `N_I` centroids in the TCA space (width `m`).
    pub centroids: Vec<Vec<f64>>,
    /// `None` when the immobility class is disabled.
    pub immobility: Option<ImmobilityVector>,
    /// Mean silhouette of the clustering sample (diagnostic only).
    pub silhouette: f64,
}

/// Intention classes and intention vectors of one trajectory's travels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionSequence {
    pub classes: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
}

impl IntentionSequence {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// First `len` steps.
    pub fn prefix(&self, len: usize) -> IntentionSequence {
        IntentionSequence {
            classes: self.classes[..len].to_vec(),
            vectors: self.vectors[..len].to_vec(),
        }
    }
}

/// Clusters `points` into `n` intentions.
///
/// The caller decides what goes into `points`; with the immobility class
/// enabled, same-location travels should be left out.
pub fn fit_intention_clusters(
    points: &[Vec<f64>],
    n: usize,
    immobility_scale: Option<f64>,
    seed: u64,
) -> Result<IntentionSpace> {
    let mut rng = crate::derive_rng(seed, &["clusters"]);
    let clustering = kmeans_medoids(points, n, 200, &mut rng)?;
    let centroids: Vec<Vec<f64>> = clustering.medoids.iter().map(|&i| points[i].clone()).collect();
    let sil = silhouette(points, &clustering.assignments, n, 600);
    let immobility = immobility_scale.map(|scale| immobility_vector(&centroids, scale));
    Ok(IntentionSpace {
        centroids,
        immobility,
        silhouette: sil,
    })
}

fn immobility_vector(centroids: &[Vec<f64>], scale: f64) -> ImmobilityVector {
    let m = centroids[0].len();
    let mut max_pair = 0.0f64;
    for (i, a) in centroids.iter().enumerate() {
        for b in &centroids[i + 1..] {
            max_pair = max_pair.max(euclidean(a, b));
        }
    }
    let offset = scale * max_pair;
    let mut vector = vec![0.0; m + 1];
    for c in centroids {
        for (v, x) in vector.iter_mut().zip(c) {
            *v += x / centroids.len() as f64;
        }
    }
    vector[m] = offset;
    ImmobilityVector { vector, offset }
}

impl IntentionSpace {
    /// `N_I`.
    pub fn intention_count(&self) -> usize {
        self.centroids.len()
    }

    /// `N_I + 1` with the immobility class, `N_I` without.
    pub fn class_count(&self) -> usize {
        self.centroids.len() + usize::from(self.immobility.is_some())
    }

    /// TCA component count `m`.
    pub fn components(&self) -> usize {
        self.centroids[0].len()
    }

    /// Width of intention vectors, `m + 1`.
    pub fn vector_dim(&self) -> usize {
        self.components() + 1
    }

    pub fn immobility_class(&self) -> Option<usize> {
        self.immobility.as_ref().map(|_| self.centroids.len())
    }

    pub fn is_immobility_class(&self, class: usize) -> bool {
        self.immobility_class() == Some(class)
    }

    pub fn class_vector(&self, class: usize) -> Result<Vec<f64>> {
        if let Some(c) = self.centroids.get(class) {
            let mut v = c.clone();
            v.push(0.0);
            return Ok(v);
        }
        match (&self.immobility, self.immobility_class()) {
            (Some(imm), Some(ic)) if ic == class => Ok(imm.vector.clone()),
            _ => Err(Error::invalid(format!(
                "class {class} outside 0..{}",
                self.class_count()
            ))),
        }
    }

    /// Nearest centroid, lowest index on ties.
    pub fn nearest_centroid(&self, values: &[f64]) -> Result<usize> {
        if values.len() != self.components() {
            return Err(Error::Dimension {
                expected: self.components(),
                actual: values.len(),
            });
        }
        Ok(nearest(values, &self.centroids))
    }

    pub fn assign(&self, travel: &TransformedTravel) -> Result<usize> {
        let nearest = self.nearest_centroid(&travel.values)?;
        match self.immobility_class() {
            Some(ic) if travel.is_immobility => Ok(ic),
            _ => Ok(nearest),
        }
    }

    pub fn map(&self, travels: &[TransformedTravel]) -> Result<IntentionSequence> {
        let classes = travels.iter().map(|t| self.assign(t)).collect::<Result<Vec<_>>>()?;
        let vectors = classes
            .iter()
            .map(|&c| self.class_vector(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(IntentionSequence { classes, vectors })
    }

    /// Class whose vector is nearest to `v` (width `m + 1`), over all classes.
    pub fn nearest_class(&self, v: &[f64]) -> Result<usize> {
        if v.len() != self.vector_dim() {
            return Err(Error::Dimension {
                expected: self.vector_dim(),
                actual: v.len(),
            });
        }
        let all = (0..self.class_count())
            .map(|c| self.class_vector(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(nearest(v, &all))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> IntentionSpace {
        IntentionSpace {
            centroids: vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 5.0]],
            immobility: Some(immobility_vector(
                &[vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 5.0]],
                2.0,
            )),
            silhouette: 0.0,
        }
    }

    fn travel(values: Vec<f64>, is_immobility: bool) -> TransformedTravel {
        TransformedTravel {
            values,
            is_immobility,
        }
    }

    #[test]
    fn zero_distance_maps_to_own_class() {
        assert_eq!(space().assign(&travel(vec![0.0, 5.0], false)).unwrap(), 3);
    }

    #[test]
    fn flag_beats_distance() {
        assert_eq!(space().assign(&travel(vec![0.0, 5.0], true)).unwrap(), 4);
    }

    #[test]
    fn equidistant_goes_to_lower_class() {
        assert_eq!(space().assign(&travel(vec![2.0, 0.0], false)).unwrap(), 1);
    }

    #[test]
    fn immobility_vector_offset_is_twice_max_pair() {
        let s = space();
        let imm = s.immobility.as_ref().unwrap();
        let max_pair = 34f64.sqrt();
        assert!((imm.offset - 2.0 * max_pair).abs() < 1e-12);
        for c in 0..4 {
            let d = euclidean(&s.class_vector(c).unwrap(), &imm.vector);
            assert!(d >= imm.offset);
        }
    }

    #[test]
    fn disabled_immobility_uses_distance() {
        let mut s = space();
        s.immobility = None;
        assert_eq!(s.class_count(), 4);
        assert_eq!(s.assign(&travel(vec![0.0, 5.0], true)).unwrap(), 3);
        assert!(s.class_vector(4).is_err());
    }

    #[test]
    fn sequence_carries_vectors() {
        let s = space();
        let seq = s
            .map(&[travel(vec![0.9, 0.1], false), travel(vec![0.0, 0.0], true)])
            .unwrap();
        assert_eq!(seq.classes, vec![1, 4]);
        assert_eq!(seq.vectors[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(seq.vectors[1], s.immobility.unwrap().vector);
    }

    #[test]
    fn dimension_mismatch() {
        let err = space().assign(&travel(vec![1.0], false)).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 2, actual: 1 }));
    }
}
