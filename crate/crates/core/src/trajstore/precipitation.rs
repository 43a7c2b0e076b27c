use super::DisasterLevel;
use crate::error::{Error, Result};

/// Daily rainfall cut points in mm separating ordinals `0..=4`.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [10.0, 25.0, 50.0, 100.0];

/// Ordinal `k` such that `mm ∈ [thresholds[k-1], thresholds[k])`.
pub fn disaster_level_from_precipitation(mm_per_day: f64, thresholds: &[f64]) -> Result<DisasterLevel> {
    if !(mm_per_day >= 0.0) {
        return Err(Error::invalid(format!("precipitation {mm_per_day} is negative")));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("thresholds must be strictly increasing"));
    }
    if thresholds.len() >= u8::MAX as usize {
        return Err(Error::invalid("too many thresholds"));
    }
    let level = thresholds.partition_point(|&t| t <= mm_per_day);
    Ok(DisasterLevel(level as u8))
}
