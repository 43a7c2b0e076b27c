use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::cache::{json_load, json_save, stage_key, StageCache};
use super::config::{BackendKind, ExperimentConfig};
use super::metrics::{
    composite_score, compute_immobility_prf, compute_intention_metrics, compute_ranking_metrics,
    ImmobilityMetrics, IntentionMetrics, RankingMetrics,
};
use super::report::{
    AuditSummary, ExperimentReport, LocationMetrics, SplitInfo, TrainingSummary, REPORT_VERSION,
};
use crate::error::{Error, Result};
use super::stages::{intention_samples, positions, sample_prompt, PromptContext};
use crate::intention::{IntentionConfig, IntentionModel};
use crate::predictor::{
    train_base, train_modulated, LocationPredictor, PredictionQuery, PredictionRanking,
    PredictorSequence, PredictorTrace,
};
use crate::refiner::{
    identity_refinement, refine_all, DisasterEncoder, HttpBackend, Refinement, RefinementDecision,
    RefinerBackend, StubBackend, UreqTransport,
};
use crate::retrieval::TrajectoryIndex;
use crate::seqmodel::{
    train_intention_clip, training_sequences, ClipConfig, ClipModel, LossParts, TrainReport,
};
use crate::trajstore::{generate_bundle, generate_world, CorpusBundle, Trajectory, World};

/// Per-sample provenance of one evaluated prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleAudit {
    pub trajectory: String,
    /// Index of the last prefix record.
    pub step: usize,
    pub level: u8,
    pub predicted_class: usize,
    pub refined_class: usize,
    pub true_class: usize,
    pub references: usize,
    pub prefix: bool,
    pub backend: String,
    pub decision: Option<RefinementDecision>,
    pub fallback: bool,
    pub truth: u32,
    pub modulated_top: u32,
    pub base_top: u32,
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub samples: Vec<SampleAudit>,
}

/// Target-city corpora partitioned into training and held-out parts.
pub struct TargetPartition<'a> {
    pub nt_train: Vec<&'a Trajectory>,
    pub nt_test: Vec<&'a Trajectory>,
    pub dt_train: Vec<&'a Trajectory>,
    pub dt_test: Vec<&'a Trajectory>,
}

impl<'a> TargetPartition<'a> {
    pub fn of(b: &'a CorpusBundle) -> Self {
        let (nt_test, nt_train) = b.d_nt.iter().partition(|t| b.split.is_normal_test(t));
        let (dt_test, dt_train) = b.d_dt.iter().partition(|t| b.split.is_disaster_test(t));
        Self {
            nt_train,
            nt_test,
            dt_train,
            dt_test,
        }
    }
}

/// Intention space over source corpora and the non-held-out target ones.
pub fn fit_intentions(
    world: &World,
    bundle: &CorpusBundle,
    config: &IntentionConfig,
    seed: u64,
) -> Result<IntentionModel> {
    let split = TargetPartition::of(bundle);
    IntentionModel::fit(
        world,
        bundle.d_ns.iter().chain(&bundle.d_ds),
        split.nt_train.iter().chain(&split.dt_train).copied(),
        config,
        seed,
    )
}

/// Intention-CLIP on source normal days plus target normal training days.
pub fn train_clip(
    world: &World,
    bundle: &CorpusBundle,
    intentions: &IntentionModel,
    config: &ClipConfig,
    seed: u64,
) -> Result<(ClipModel, TrainReport)> {
    let split = TargetPartition::of(bundle);
    let seqs = training_sequences(
        bundle.d_ns.iter().chain(split.nt_train.iter().copied()),
        world,
        intentions,
    )?;
    train_intention_clip(&seqs, intentions, config, config.synthetic_vocabulary()?, seed)
}

/// Reference index over d_ds and the non-held-out target trajectories.
pub fn build_reference_index(
    world: &World,
    bundle: &CorpusBundle,
    intentions: &IntentionModel,
) -> Result<TrajectoryIndex> {
    let split = TargetPartition::of(bundle);
    TrajectoryIndex::build(
        world,
        bundle
            .d_ds
            .iter()
            .chain(split.nt_train.iter().copied())
            .chain(split.dt_train.iter().copied()),
        intentions,
    )
}

/// Predictor training sequences from target normal training days. With
/// `intentions`, every travel carries the vector of its own observed class
/// (teacher forcing).
pub fn predictor_sequences(
    world: &World,
    bundle: &CorpusBundle,
    intentions: Option<&IntentionModel>,
) -> Result<Vec<PredictorSequence>> {
    TargetPartition::of(bundle)
        .nt_train
        .iter()
        .map(|t| {
            let vectors = match intentions {
                Some(m) => m
                    .map_trajectory(t, world)?
                    .classes
                    .iter()
                    .map(|&c| m.space.class_vector(c))
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            };
            Ok(PredictorSequence {
                user_id: t.user_id.clone(),
                locations: locations(t),
                intentions: vectors,
            })
        })
        .collect()
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn locations(t: &Trajectory) -> Vec<u32> {
    t.locations().map(|l| l.0).collect()
}

pub fn backend_for(config: &ExperimentConfig) -> Result<Box<dyn RefinerBackend>> {
    Ok(match config.refiner.backend {
        BackendKind::Stub => Box::new(StubBackend {
            rules: config.refiner.stub.clone(),
        }),
        BackendKind::Http => Box::new(HttpBackend::new(UreqTransport::from_env()?)),
    })
}

/// Trained artifacts shared by every evaluation of one configuration.
pub struct Artifacts {
    pub world: Arc<World>,
    pub bundle: Arc<CorpusBundle>,
    pub intentions: Arc<IntentionModel>,
    pub clip: Arc<(ClipModel, TrainReport)>,
    pub index: Arc<TrajectoryIndex>,
    pub base: Arc<(LocationPredictor, PredictorTrace)>,
    pub modulated: Arc<(LocationPredictor, PredictorTrace)>,
}

/// Runs (or fetches from `cache`) every training stage of `config`.
pub fn build_artifacts(config: &ExperimentConfig, cache: &StageCache) -> Result<Artifacts> {
    config.validate()?;
    let seed = config.seed;

    let world_key = stage_key("world", &(&config.world, seed));
    let world = stage(
        "generate",
        cache.get_or_compute("world", &world_key, json_load, json_save, || {
            generate_world(&config.world, seed)
        }),
    )?;
    let bundle_key = stage_key("bundle", &(&world_key, &config.corpora, seed));
    let bundle: Arc<CorpusBundle> = stage(
        "generate",
        cache.get_or_compute("bundle", &bundle_key, json_load, json_save, || {
            generate_bundle(&world, &config.corpora, seed)
        }),
    )?;

    let intention_config = IntentionConfig {
        immobility: config.ablation.immobility,
        ..config.intention.clone()
    };
    let intention_key = stage_key("intention", &(&bundle_key, &intention_config, seed));
    let intentions = stage(
        "intention",
        cache.get_or_compute(
            "intention",
            &intention_key,
            |p| IntentionModel::load(p),
            |m, p| m.save(p),
            || {
                fit_intentions(&world, &bundle, &intention_config, seed)
            },
        ),
    )?;

    let clip_key = stage_key("clip", &(&intention_key, &config.clip, seed));
    let clip = stage(
        "clip",
        cache.get_or_compute(
            "clip",
            &clip_key,
            |p| {
                let (report, model_path) = clip_paths(p);
                Ok((ClipModel::load(&model_path)?, json_load(&report)?))
            },
            |(m, r), p| {
                let (report, model_path) = clip_paths(p);
                m.save(&model_path)?;
                json_save(r, &report)?;
                json_save(&"ok", p)
            },
            || {
                train_clip(&world, &bundle, &intentions, &config.clip, seed)
            },
        ),
    )?;

    let index_key = stage_key("index", &intention_key);
    let index = stage(
        "index",
        cache.get_or_compute(
            "index",
            &index_key,
            |p| TrajectoryIndex::load(p, &intentions.space),
            |i, p| i.save(p),
            || {
                build_reference_index(&world, &bundle, &intentions)
            },
        ),
    )?;

    let target = world.city(&world.target_city)?.clone();
    let p = &config.predictor;
    let base_key = stage_key("predictor-base", &(&bundle_key, p.base, &p.model, seed));
    let base = stage(
        "predictor-base",
        cache.get_or_compute("predictor-base", &base_key, json_load, json_save, || {
            let seqs = predictor_sequences(&world, &bundle, None)?;
            train_base(p.base, &target, &seqs, &p.model, seed)
        }),
    )?;

    let modulated_key = stage_key("predictor-modulated", &(&base_key, &intention_key, p.mode));
    let modulated = stage(
        "predictor-modulated",
        cache.get_or_compute("predictor-modulated", &modulated_key, json_load, json_save, || {
            let seqs = predictor_sequences(&world, &bundle, Some(&intentions))?;
            train_modulated(&base.0, p.mode, &seqs)
        }),
    )?;

    Ok(Artifacts {
        world,
        bundle,
        intentions,
        clip,
        index,
        base,
        modulated,
    })
}

fn clip_paths(marker: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    (marker.with_extension("report.json"), marker.with_extension("model.json"))
}

/// Ranking and immobility metrics; a sample counts as immobile when its
/// next location equals `current`.
pub fn location_metrics(rankings: &[PredictionRanking], truth: &[u32], current: &[u32]) -> Result<LocationMetrics> {
    let ranking: RankingMetrics = compute_ranking_metrics(rankings, truth)?;
    let predicted: Vec<bool> = rankings.iter().map(|r| r.is_immobility_prediction).collect();
    let actual: Vec<bool> = truth.iter().zip(current).map(|(a, b)| a == b).collect();
    let immobility: ImmobilityMetrics = compute_immobility_prf(&predicted, &actual)?;
    Ok(LocationMetrics {
        composite: composite_score(&ranking, &immobility),
        ranking,
        immobility,
    })
}

/// Base-predictor metrics on `trajectories`.
fn evaluate_base(predictor: &LocationPredictor, trajectories: &[&Trajectory]) -> Result<LocationMetrics> {
    let mut prefixes = Vec::new();
    let mut truth = Vec::new();
    for t in trajectories {
        let locs = locations(t);
        for s in positions(t) {
            prefixes.push((t.user_id.as_str(), locs[..=s].to_vec()));
            truth.push(locs[s + 1]);
        }
    }
    let queries: Vec<PredictionQuery<'_>> = prefixes
        .iter()
        .map(|(u, p)| PredictionQuery {
            user_id: u,
            prefix: p,
            intention: None,
        })
        .collect();
    let rankings = predictor.predict_batch(&queries)?;
    let current: Vec<u32> = prefixes.iter().map(|(_, p)| *p.last().unwrap()).collect();
    location_metrics(&rankings, &truth, &current)
}

/// Full pipeline for `config`, reusing stages through `cache`.
pub fn run_experiment_with(config: &ExperimentConfig, cache: &StageCache) -> Result<ExperimentOutcome> {
    let a = build_artifacts(config, cache)?;
    let world = &a.world;
    let split = TargetPartition::of(&a.bundle);
    let space = &a.intentions.space;
    let clip = &a.clip.0;
    let anchors = clip.class_anchors();
    let backend = stage("refine", backend_for(config))?;
    let encoder = DisasterEncoder::new(
        config.corpora.mobility.levels(),
        config.refiner.prefix_dim,
        config.seed,
    )?;
    let ablation = config.ablation;

    let index = ablation.rag.then_some(a.index.as_ref());
    let encoder = ablation.soft_prompt.then_some(&encoder);
    let ctx = PromptContext {
        space,
        anchors: &anchors,
        labels: &config.refiner.labels,
        index,
        k: config.retrieval.k,
        encoder,
    };
    let intention_samples = stage(
        "intention-predict",
        intention_samples(world, &a.intentions, clip, &split.dt_test),
    )?;
    if intention_samples.is_empty() {
        return Err(Error::invalid("no evaluation samples in the held-out disaster corpus").in_stage("evaluate"));
    }
    let mut prompts = Vec::with_capacity(intention_samples.len());
    let mut reference_counts = Vec::with_capacity(intention_samples.len());
    for sample in &intention_samples {
        let (prompt, references) = sample_prompt(sample, &ctx)?;
        reference_counts.push(references.len());
        prompts.push(prompt);
    }
    let refinements: Vec<Refinement> = if ablation.llm_refining {
        refine_all(backend.as_ref(), &prompts, space, config.refiner.concurrency)
            .into_iter()
            .map(|r| stage("refine", r))
            .collect::<Result<_>>()?
    } else {
        prompts
            .iter()
            .map(|p| identity_refinement(p, space))
            .collect::<Result<_>>()?
    };

    let queries: Vec<PredictionQuery<'_>> = intention_samples
        .iter()
        .zip(&refinements)
        .map(|(s, r)| PredictionQuery {
            user_id: &s.user_id,
            prefix: &s.prefix,
            intention: Some(&r.vector),
        })
        .collect();
    let modulated = stage("predict", a.modulated.0.predict_batch(&queries))?;
    let plain: Vec<PredictionQuery<'_>> = queries
        .iter()
        .map(|q| PredictionQuery {
            intention: None,
            ..*q
        })
        .collect();
    let base = stage("predict", a.base.0.predict_batch(&plain))?;

    let current: Vec<u32> = queries.iter().map(|q| *q.prefix.last().unwrap()).collect();
    let mut samples = Vec::with_capacity(intention_samples.len());
    for ((((s, r), m), b), (p, refs)) in intention_samples
        .iter()
        .zip(&refinements)
        .zip(&modulated)
        .zip(&base)
        .zip(prompts.iter().zip(&reference_counts))
    {
        samples.push(SampleAudit {
            trajectory: s.trajectory.clone(),
            step: s.step,
            level: s.level.0,
            predicted_class: s.predicted_class,
            refined_class: r.class,
            true_class: s.true_class,
            references: *refs,
            prefix: p.disaster_prefix.is_some(),
            backend: r.provenance.backend.clone(),
            decision: r.decision,
            fallback: r.provenance.fallback,
            truth: s.truth,
            modulated_top: m.top(),
            base_top: b.top(),
        });
    }
    let truth: Vec<u32> = samples.iter().map(|s| s.truth).collect();

    let refined: Vec<usize> = samples.iter().map(|s| s.refined_class).collect();
    let predicted: Vec<usize> = samples.iter().map(|s| s.predicted_class).collect();
    let true_classes: Vec<usize> = samples.iter().map(|s| s.true_class).collect();
    let imm = space.immobility_class();
    let intention: IntentionMetrics = compute_intention_metrics(&refined, &true_classes, imm)?;
    let intention_unrefined = compute_intention_metrics(&predicted, &true_classes, imm)?;

    let loss = |l: &LossParts| l.total;
    let report = ExperimentReport {
        format_version: REPORT_VERSION,
        variant: ablation.variant_name(),
        config_hash: config.hash(),
        seed: config.seed,
        ablation,
        base: config.predictor.base,
        mode: config.predictor.mode,
        backend: if ablation.llm_refining {
            backend.id().to_string()
        } else {
            "identity".into()
        },
        split: SplitInfo {
            protocol: "target disaster trajectories split by user; last normal day of every target user held out"
                .into(),
            test_fraction: a.bundle.split.test_fraction,
            test_users: a.bundle.split.test_users.len(),
            disaster_test_trajectories: split.dt_test.len(),
            normal_test_trajectories: split.nt_test.len(),
        },
        modulated_disaster: location_metrics(&modulated, &truth, &current)?,
        base_disaster: location_metrics(&base, &truth, &current)?,
        base_normal: stage("evaluate", evaluate_base(&a.base.0, &split.nt_test))?,
        intention,
        intention_unrefined,
        audit: AuditSummary {
            samples: samples.len(),
            with_references: samples.iter().filter(|s| s.references > 0).count(),
            with_prefix: samples.iter().filter(|s| s.prefix).count(),
            refined_changed: samples.iter().filter(|s| s.refined_class != s.predicted_class).count(),
            fallbacks: samples.iter().filter(|s| s.fallback).count(),
        },
        training: TrainingSummary {
            clip_initial_loss: loss(&a.clip.1.initial),
            clip_final_loss: loss(&a.clip.1.final_loss),
            base_final_loss: a.base.1.final_loss,
            modulated_initial_loss: a.modulated.1.initial_loss,
            modulated_final_loss: a.modulated.1.final_loss,
        },
        corpus_hashes: a
            .bundle
            .corpus_hashes()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    };
    Ok(ExperimentOutcome { report, samples })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_experiment_with(config, &StageCache::new(config.cache_dir.clone()))
}
