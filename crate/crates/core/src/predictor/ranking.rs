use serde::{Deserialize, Serialize};

use crate::nn::log_sum_exp;

/// Next-location distribution sorted by descending probability, ties by
/// ascending location id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRanking {
    /// Last location of the prefix.
    pub current: u32,
    pub entries: Vec<(u32, f64)>,
    /// Top-1 equals the current location.
    pub is_immobility_prediction: bool,
}

impl PredictionRanking {
    pub fn from_logits(current: u32, logits: &[f64]) -> Self {
        let z = log_sum_exp(logits);
        let mut entries: Vec<(u32, f64)> = logits
            .iter()
            .enumerate()
            .map(|(i, &l)| (i as u32, (l - z).exp()))
            .collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let is_immobility_prediction = entries.first().is_some_and(|e| e.0 == current);
        Self {
            current,
            entries,
            is_immobility_prediction,
        }
    }

    pub fn top(&self) -> u32 {
        self.entries[0].0
    }

    /// 1-based rank of `location`.
    pub fn rank_of(&self, location: u32) -> Option<usize> {
        self.entries.iter().position(|e| e.0 == location).map(|p| p + 1)
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn probability(&self, location: u32) -> f64 {
        self.entries.iter().find(|e| e.0 == location).map_or(0.0, |e| e.1)
    }
}
