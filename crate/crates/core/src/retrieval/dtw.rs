use crate::error::{Error, Result};
use crate::nn::euclidean;

/// Dynamic time warping distance with Euclidean ground metric.
///
/// Steps are match, insertion and deletion; the path cost is the sum of the
/// ground distances of the aligned pairs. `window` is a Sakoe-Chiba band
/// half-width (`|i - j| ≤ window`).
pub fn dtw_distance(a: &[Vec<f64>], b: &[Vec<f64>], window: Option<usize>) -> Result<f64> {
    dtw_with(a, b, window, |x, y| {
        if x.len() != y.len() {
            return Err(Error::Dimension {
                expected: x.len(),
                actual: y.len(),
            });
        }
        Ok(euclidean(x, y))
    })
}

/// DTW under an arbitrary ground metric.
pub fn dtw_with<T>(
    a: &[T],
    b: &[T],
    window: Option<usize>,
    mut metric: impl FnMut(&T, &T) -> Result<f64>,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("DTW of an empty sequence"));
    }
    let (n, m) = (a.len(), b.len());
    let w = window.unwrap_or(n.max(m));
    if w < n.abs_diff(m) {
        return Err(Error::invalid(format!(
            "window {w} admits no path between lengths {n} and {m}"
        )));
    }
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur.fill(f64::INFINITY);
        let lo = i.saturating_sub(w).max(1);
        let hi = (i + w).min(m);
        for j in lo..=hi {
            let d = metric(&a[i - 1], &b[j - 1])?;
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = d + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn identical_is_zero() {
        let a = scalar(&[1.0, 3.0, 2.0]);
        assert_eq!(dtw_distance(&a, &a, None).unwrap(), 0.0);
    }

    #[test]
    fn single_cell_is_metric() {
        let d = dtw_distance(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]], None).unwrap();
        assert_eq!(d, 5.0);
    }

    #[test]
    fn repeated_element_absorbed() {
        let d = dtw_distance(&scalar(&[0.0, 0.0, 1.0]), &scalar(&[0.0, 1.0]), None).unwrap();
        assert_eq!(d, 0.0);
        let d = dtw_distance(&scalar(&[0.0, 0.0, 1.0]), &scalar(&[1.0, 1.0]), None).unwrap();
        assert_eq!(d, 2.0);
    }

    #[test]
    fn errors() {
        assert!(dtw_distance(&[], &scalar(&[1.0]), None).is_err());
        assert!(dtw_distance(&scalar(&[1.0; 4]), &scalar(&[1.0]), Some(2)).is_err());
        assert!(matches!(
            dtw_distance(&[vec![1.0]], &[vec![1.0, 2.0]], None),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn window_restricts_paths() {
        let a = scalar(&[0.0, 5.0, 5.0, 5.0]);
        let b = scalar(&[0.0, 0.0, 0.0, 5.0]);
        let free = dtw_distance(&a, &b, None).unwrap();
        let banded = dtw_distance(&a, &b, Some(1)).unwrap();
        assert_eq!(free, 0.0);
        assert!(banded > free);
    }
}
