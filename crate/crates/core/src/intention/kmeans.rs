use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{euclidean, sq_dist};

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// Cluster of each input point.
    pub assignments: Vec<usize>,
    /// Index of each cluster's medoid in the input.
    pub medoids: Vec<usize>,
}

/// Index of the nearest centre; ties go to the lowest index.
pub fn nearest(point: &[f64], centres: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centres.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

fn distinct_count(points: &[Vec<f64>], limit: usize) -> usize {
    let mut seen: Vec<&[f64]> = Vec::new();
    for p in points {
        if !seen.iter().any(|s| *s == p.as_slice()) {
            seen.push(p);
            if seen.len() >= limit {
                break;
            }
        }
    }
    seen.len()
}

/// Seeded k-means++ followed by Lloyd iterations; each cluster is then
/// represented by its medoid, the member with the smallest summed distance
/// to the other members.
pub fn kmeans_medoids(
    points: &[Vec<f64>],
    k: usize,
    max_iter: usize,
    rng: &mut impl Rng,
) -> Result<Clustering> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 clusters, got {k}")));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "{} samples cannot form {k} clusters",
            points.len()
        )));
    }
    if distinct_count(points, k) < k {
        return Err(Error::invalid(format!(
            "fewer distinct points than the {k} requested clusters"
        )));
    }

    let mut centres = plus_plus(points, k, rng);
    let mut assignments = vec![usize::MAX; points.len()];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let c = nearest(p, &centres);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the point farthest from its centre.
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        let di = sq_dist(&points[i], &centres[assignments[i]]);
                        let dj = sq_dist(&points[j], &centres[assignments[j]]);
                        di.partial_cmp(&dj).unwrap().then(j.cmp(&i))
                    })
                    .unwrap();
                centres[c] = points[far].clone();
                assignments[far] = c;
                changed = true;
            } else {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }

    let medoids = (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..points.len()).filter(|&i| assignments[i] == c).collect();
            medoid(points, &members)
        })
        .collect();
    Ok(Clustering {
        assignments,
        medoids,
    })
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centres = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = d2.iter().sum();
        let mut x = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && x < d {
                pick = i;
                break;
            }
            x -= d;
        }
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centres.push(c);
    }
    centres
}

fn medoid(points: &[Vec<f64>], members: &[usize]) -> usize {
    let mut best = members[0];
    let mut best_cost = f64::INFINITY;
    for &i in members {
        let cost: f64 = members.iter().map(|&j| euclidean(&points[i], &points[j])).sum();
        if cost < best_cost {
            best = i;
            best_cost = cost;
        }
    }
    best
}

/// Mean silhouette coefficient over at most `limit` leading points.
pub fn silhouette(points: &[Vec<f64>], assignments: &[usize], k: usize, limit: usize) -> f64 {
    let n = points.len().min(limit);
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if i != j {
                sums[assignments[j]] += euclidean(&points[i], &points[j]);
                counts[assignments[j]] += 1;
            }
        }
        let own = assignments[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() && a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}
