use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::config::Ablations;
use super::metrics::{ImmobilityMetrics, IntentionMetrics, RankingMetrics};
use crate::predictor::{BaseKind, ModulationMode};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationMetrics {
    pub ranking: RankingMetrics,
    pub immobility: ImmobilityMetrics,
    /// Mean of Acc@10 and F1@Immob.
    pub composite: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub protocol: String,
    pub test_fraction: f64,
    pub test_users: usize,
    pub disaster_test_trajectories: usize,
    pub normal_test_trajectories: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub samples: usize,
    pub with_references: usize,
    pub with_prefix: usize,
    /// Samples whose refined class differs from the predicted one.
    pub refined_changed: usize,
    pub fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub clip_initial_loss: f64,
    pub clip_final_loss: f64,
    pub base_final_loss: f64,
    pub modulated_initial_loss: f64,
    pub modulated_final_loss: f64,
}

/// Everything one run reports. Serialises deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    pub variant: String,
    pub config_hash: String,
    pub seed: u64,
    pub ablation: Ablations,
    pub base: BaseKind,
    pub mode: ModulationMode,
    pub backend: String,
    pub split: SplitInfo,
    /// Modulated predictor with refined intentions, held-out disaster data.
    pub modulated_disaster: LocationMetrics,
    /// Unmodulated base on the same samples.
    pub base_disaster: LocationMetrics,
    /// Unmodulated base on held-out normal days.
    pub base_normal: LocationMetrics,
    /// Refined next-intention classes against observed ones.
    pub intention: IntentionMetrics,
    pub intention_unrefined: IntentionMetrics,
    pub audit: AuditSummary,
    pub training: TrainingSummary,
    pub corpus_hashes: BTreeMap<String, String>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// Aligned-column text table of the headline metrics.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "variant: {}  seed: {}  base: {}  mode: {}  backend: {}",
            self.variant, self.seed, self.base, self.mode, self.backend
        )
        .unwrap();
        writeln!(out, "config: {}", &self.config_hash[..16]).unwrap();
        let header = ["rows", "Acc@1", "Acc@10", "MRR", "NDCG@5", "NDCG@10", "Pre@Imm", "Rec@Imm", "F1@Imm", "n"];
        let mut rows = vec![header.map(String::from).to_vec()];
        for (name, m) in [
            ("modulated/disaster", &self.modulated_disaster),
            ("base/disaster", &self.base_disaster),
            ("base/normal", &self.base_normal),
        ] {
            let r = &m.ranking;
            let i = &m.immobility;
            let flag = if i.zero_denominator { "*" } else { "" };
            rows.push(
                [
                    name.to_string(),
                    format!("{:.4}", r.acc_at_1),
                    format!("{:.4}", r.acc_at_10),
                    format!("{:.4}", r.mrr),
                    format!("{:.4}", r.ndcg_at_5),
                    format!("{:.4}", r.ndcg_at_10),
                    format!("{:.4}{flag}", i.precision),
                    format!("{:.4}{flag}", i.recall),
                    format!("{:.4}{flag}", i.f1),
                    r.samples.to_string(),
                ]
                .to_vec(),
            );
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        let it = &self.intention;
        writeln!(
            out,
            "intention  acc {:.4} (unrefined {:.4})  F1@Imm {:.4}",
            it.accuracy, self.intention_unrefined.accuracy, it.immobility.f1
        )
        .unwrap();
        let a = &self.audit;
        writeln!(
            out,
            "audit  samples {}  with references {}  with prefix {}  refined changed {}  fallbacks {}",
            a.samples, a.with_references, a.with_prefix, a.refined_changed, a.fallbacks
        )
        .unwrap();
        writeln!(out, "split  {} (test fraction {})", self.split.protocol, self.split.test_fraction).unwrap();
        if [&self.modulated_disaster, &self.base_disaster, &self.base_normal]
            .iter()
            .any(|m| m.immobility.zero_denominator)
        {
            writeln!(out, "* zero denominator, value set to 0").unwrap();
        }
        out
    }
}
