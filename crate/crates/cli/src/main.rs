use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use intentmob::harness::{
    backend_for, build_reference_index, fit_intentions, intention_samples, location_metrics,
    predictor_sequences, run_experiment_with, sample_prompt, space_hash, train_clip, Ablations,
    BackendKind, ExperimentConfig, LocationMetrics, PredictionsFile, PromptContext, RefinedFile,
    RefinedSample, StageCache, TargetPartition, STAGE_FILE_VERSION,
};
use intentmob::intention::IntentionModel;
use intentmob::predictor::{
    train_base, train_modulated, BaseKind, LocationPredictor, ModulationMode, PredictionQuery,
};
use intentmob::refiner::{identity_refinement, refine_all, DisasterEncoder};
use intentmob::retrieval::TrajectoryIndex;
use intentmob::seqmodel::ClipModel;
use intentmob::trajstore::{
    generate_bundle, generate_world, load_bundle, save_bundle, save_world, DisasterLevel,
};

#[derive(Parser)]
#[command(name = "intentmob", version, about = "Intention-modulated next-location prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write `<out>/world.json`.
    GenerateWorld {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the world and the four corpora into `<out>`.
    GenerateCorpora {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit TCA and the intention clusters.
    FitSpace {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpora: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the reference trajectory index.
    BuildIndex {
        #[arg(long)]
        corpora: PathBuf,
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the references retrieved for one trajectory.
    QueryIndex {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        corpora: PathBuf,
        /// Trajectory id; its mapped travels form the query history.
        #[arg(long)]
        traj: String,
        #[arg(long)]
        level: u8,
        #[arg(long, default_value_t = intentmob::retrieval::DEFAULT_K)]
        k: usize,
    },
    /// Train the intention translator and predictor.
    TrainClip {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpora: PathBuf,
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict next intentions for every held-out disaster position.
    PredictIntentions {
        #[arg(long)]
        corpora: PathBuf,
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine predicted intentions with a backend.
    Refine {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_parser = parse_backend)]
        backend: BackendKind,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated flags among rag, soft_prompt, llm_refining.
        #[arg(long, default_value = "")]
        ablate: String,
    },
    /// Train a base predictor, optionally with intention modulation.
    TrainPredictor {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpora: PathBuf,
        #[arg(long)]
        base: BaseKind,
        /// Without a mode only the base model is trained.
        #[arg(long)]
        mode: Option<ModulationMode>,
        /// Required with `--mode`.
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank next locations for refined samples and report metrics.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        refined: PathBuf,
        /// Optional JSON-lines output of per-sample top-10 rankings.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline and print the report.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated flags among rag, soft_prompt, immobility, llm_refining.
        #[arg(long, default_value = "")]
        ablate: String,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
        /// Writes report.json, report.txt and samples.jsonl here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a complete config as TOML.
    ShowConfig {
        #[command(flatten)]
        config: ConfigArgs,
        /// Start from the scaled-down test settings.
        #[arg(long)]
        quick: bool,
    },
    /// Vocabulary utilities.
    Vocab {
        #[command(subcommand)]
        command: VocabCommand,
    },
}

#[derive(Subcommand)]
enum VocabCommand {
    /// Write the configured synthetic vocabulary as text.
    Export {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "stub" => Ok(BackendKind::Stub),
        "http" => Ok(BackendKind::Http),
        _ => Err(format!("unknown backend `{s}` (expected stub or http)")),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_space(path: &Path) -> Result<IntentionModel> {
    IntentionModel::load(path).with_context(|| format!("loading intention space {}", path.display()))
}

fn metrics_table(rows: &[(&str, &LocationMetrics)]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>6}",
        "rows", "Acc@1", "Acc@10", "MRR", "NDCG@5", "NDCG@10", "Pre@Imm", "Rec@Imm", "F1@Imm", "n"
    )
    .unwrap();
    for (name, m) in rows {
        let r = &m.ranking;
        let i = &m.immobility;
        writeln!(
            out,
            "{:<10} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>6}",
            name, r.acc_at_1, r.acc_at_10, r.mrr, r.ndcg_at_5, r.ndcg_at_10, i.precision, i.recall, i.f1, r.samples
        )
        .unwrap();
    }
    out
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenerateWorld { config, out } => {
            let c = config.load()?;
            let world = generate_world(&c.world, c.seed)?;
            fs::create_dir_all(&out)?;
            let path = out.join("world.json");
            save_world(&path, &world)?;
            println!("world {} ({} cities) -> {}", &world.hash()[..16], world.cities.len(), path.display());
        }
        Command::GenerateCorpora { config, out } => {
            let c = config.load()?;
            let world = generate_world(&c.world, c.seed)?;
            let bundle = generate_bundle(&world, &c.corpora, c.seed)?;
            save_bundle(&out, &world, &bundle, c.seed)?;
            for (name, corpus) in [
                ("d_ns", &bundle.d_ns),
                ("d_ds", &bundle.d_ds),
                ("d_nt", &bundle.d_nt),
                ("d_dt", &bundle.d_dt),
            ] {
                println!("{name}: {} trajectories", corpus.len());
            }
            println!("-> {}", out.display());
        }
        Command::FitSpace { config, corpora, out } => {
            let mut c = config.load()?;
            let (world, bundle, bundle_seed) = load_bundle(&corpora)?;
            if config.seed.is_none() {
                c.seed = bundle_seed;
            }
            let mut ic = c.intention.clone();
            ic.immobility = c.ablation.immobility;
            let model = fit_intentions(&world, &bundle, &ic, c.seed)?;
            model.save(&out)?;
            println!(
                "intention space: {} classes, {} components -> {}",
                model.space.class_count(),
                model.space.components(),
                out.display()
            );
        }
        Command::BuildIndex { corpora, space, out } => {
            let (world, bundle, _) = load_bundle(&corpora)?;
            let model = load_space(&space)?;
            model.check_world(&world)?;
            let index = build_reference_index(&world, &bundle, &model)?;
            index.save(&out)?;
            println!("index: {} entries -> {}", index.len(), out.display());
            for (tag, n) in index.tag_counts() {
                println!("  {tag}: {n}");
            }
        }
        Command::QueryIndex {
            index,
            space,
            corpora,
            traj,
            level,
            k,
        } => {
            let (world, bundle, _) = load_bundle(&corpora)?;
            let model = load_space(&space)?;
            let index = TrajectoryIndex::load(&index, &model.space)?;
            let Some(t) = bundle.all().find(|t| t.id == traj) else {
                bail!("trajectory `{traj}` not found in {}", corpora.display());
            };
            let classes = model.map_trajectory(t, &world)?.classes;
            let refs = index.retrieve(&classes, DisasterLevel(level), k, Some(&t.id))?;
            println!("query {traj}  level {level}  history {classes:?}");
            println!("{:<5} {:<8} {:<22} {:<24} {:>10}  {:>5}  history", "rank", "side", "corpus", "id", "dtw", "next");
            for (side, list) in [("source", &refs.source), ("target", &refs.target)] {
                for (i, r) in list.iter().enumerate() {
                    println!(
                        "{:<5} {:<8} {:<22} {:<24} {:>10.4}  {:>5}  {:?}",
                        i + 1,
                        side,
                        r.tag.to_string(),
                        r.id,
                        r.distance,
                        r.next,
                        r.history
                    );
                }
            }
        }
        Command::TrainClip {
            config,
            corpora,
            space,
            out,
        } => {
            let mut c = config.load()?;
            let (world, bundle, bundle_seed) = load_bundle(&corpora)?;
            if config.seed.is_none() {
                c.seed = bundle_seed;
            }
            let model = load_space(&space)?;
            let (clip, report) = train_clip(&world, &bundle, &model, &c.clip, c.seed)?;
            clip.save(&out)?;
            println!(
                "loss {:.4} -> {:.4} over {} epochs -> {}",
                report.initial.total,
                report.final_loss.total,
                report.epoch_losses.len(),
                out.display()
            );
        }
        Command::PredictIntentions {
            corpora,
            space,
            clip,
            out,
        } => {
            let (world, bundle, _) = load_bundle(&corpora)?;
            let model = load_space(&space)?;
            let clip = ClipModel::load(&clip)?;
            let split = TargetPartition::of(&bundle);
            let samples = intention_samples(&world, &model, &clip, &split.dt_test)?;
            let file = PredictionsFile {
                format_version: STAGE_FILE_VERSION,
                space_hash: space_hash(&model.space),
                anchors: clip.class_anchors(),
                samples,
            };
            write_json(&out, &file)?;
            let correct = file.samples.iter().filter(|s| s.predicted_class == s.true_class).count();
            println!(
                "{} samples, intention accuracy {:.4} -> {}",
                file.samples.len(),
                correct as f64 / file.samples.len().max(1) as f64,
                out.display()
            );
        }
        Command::Refine {
            config,
            backend,
            input,
            index,
            space,
            out,
            ablate,
        } => {
            let mut c = config.load()?;
            c.refiner.backend = backend;
            let mut ablation = Ablations::default();
            for f in Ablations::parse_disabled(&ablate)? {
                ablation.disable(f);
            }
            let model = load_space(&space)?;
            let predictions: PredictionsFile = read_json(&input)?;
            predictions.check(&model.space)?;
            let index = TrajectoryIndex::load(&index, &model.space)?;
            let encoder = DisasterEncoder::new(c.corpora.mobility.levels(), c.refiner.prefix_dim, c.seed)?;
            let ctx = PromptContext {
                space: &model.space,
                anchors: &predictions.anchors,
                labels: &c.refiner.labels,
                index: ablation.rag.then_some(&index),
                k: c.retrieval.k,
                encoder: ablation.soft_prompt.then_some(&encoder),
            };
            let mut prompts = Vec::new();
            let mut counts = Vec::new();
            for s in &predictions.samples {
                let (p, refs) = sample_prompt(s, &ctx)?;
                counts.push(refs.len());
                prompts.push(p);
            }
            let refinements = if ablation.llm_refining {
                let backend = backend_for(&c)?;
                refine_all(backend.as_ref(), &prompts, &model.space, c.refiner.concurrency)
                    .into_iter()
                    .collect::<intentmob::Result<Vec<_>>>()?
            } else {
                prompts
                    .iter()
                    .map(|p| identity_refinement(p, &model.space))
                    .collect::<intentmob::Result<Vec<_>>>()?
            };
            let samples: Vec<RefinedSample> = predictions
                .samples
                .into_iter()
                .zip(refinements)
                .zip(prompts.iter().zip(counts))
                .map(|((sample, refinement), (p, references))| RefinedSample {
                    sample,
                    references,
                    prefix: p.disaster_prefix.is_some(),
                    refinement,
                })
                .collect();
            let changed = samples
                .iter()
                .filter(|s| s.refinement.class != s.sample.predicted_class)
                .count();
            let fallbacks = samples.iter().filter(|s| s.refinement.provenance.fallback).count();
            let file = RefinedFile {
                format_version: STAGE_FILE_VERSION,
                space_hash: predictions.space_hash,
                samples,
            };
            write_json(&out, &file)?;
            println!(
                "{} samples refined, {changed} changed, {fallbacks} fallbacks -> {}",
                file.samples.len(),
                out.display()
            );
        }
        Command::TrainPredictor {
            config,
            corpora,
            base,
            mode,
            space,
            out,
        } => {
            let mut c = config.load()?;
            let (world, bundle, bundle_seed) = load_bundle(&corpora)?;
            if config.seed.is_none() {
                c.seed = bundle_seed;
            }
            let target = world.city(&world.target_city)?;
            let seqs = predictor_sequences(&world, &bundle, None)?;
            let (base_model, trace) = train_base(base, target, &seqs, &c.predictor.model, c.seed)?;
            println!("base {base}: loss {:.4} -> {:.4}", trace.initial_loss, trace.final_loss);
            let model = match mode {
                None => base_model,
                Some(mode) => {
                    let Some(space) = space else {
                        bail!("--mode requires --space");
                    };
                    let intentions = load_space(&space)?;
                    let seqs = predictor_sequences(&world, &bundle, Some(&intentions))?;
                    let (m, trace) = train_modulated(&base_model, mode, &seqs)?;
                    println!("mode {mode}: loss {:.4} -> {:.4}", trace.initial_loss, trace.final_loss);
                    m
                }
            };
            model.save(&out)?;
            println!("-> {}", out.display());
        }
        Command::Predict { model, refined, out } => {
            let model = LocationPredictor::load(&model)?;
            let refined: RefinedFile = read_json(&refined)?;
            let modulated = model.mode().is_some();
            let queries: Vec<PredictionQuery<'_>> = refined
                .samples
                .iter()
                .map(|s| PredictionQuery {
                    user_id: &s.sample.user_id,
                    prefix: &s.sample.prefix,
                    intention: modulated.then_some(s.refinement.vector.as_slice()),
                })
                .collect();
            let rankings = model.predict_batch(&queries)?;
            let truth: Vec<u32> = refined.samples.iter().map(|s| s.sample.truth).collect();
            let current: Vec<u32> = refined.samples.iter().map(|s| *s.sample.prefix.last().unwrap()).collect();
            let metrics = location_metrics(&rankings, &truth, &current)?;
            if let Some(out) = out {
                let mut lines = String::new();
                for (s, r) in refined.samples.iter().zip(&rankings) {
                    let top: Vec<u32> = r.ids().into_iter().take(10).collect();
                    let row = serde_json::json!({
                        "id": s.sample.id,
                        "truth": s.sample.truth,
                        "top10": top,
                        "rank": r.rank_of(s.sample.truth),
                        "immobility": r.is_immobility_prediction,
                    });
                    lines.push_str(&row.to_string());
                    lines.push('\n');
                }
                fs::write(&out, lines)?;
            }
            let name = match model.mode() {
                Some(m) => format!("{m}"),
                None => "base".into(),
            };
            print!("{}", metrics_table(&[(&name, &metrics)]));
        }
        Command::Run {
            config,
            ablate,
            json,
            out,
        } => {
            let c = config.load()?;
            let c = c.with_disabled(&Ablations::parse_disabled(&ablate)?);
            let cache = StageCache::new(c.cache_dir.clone());
            let outcome = run_experiment_with(&c, &cache)?;
            let report = &outcome.report;
            if json {
                print!("{}", report.to_json());
            } else {
                print!("{}", report.to_table());
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.json"), report.to_json())?;
                fs::write(dir.join("report.txt"), report.to_table())?;
                let mut lines = String::new();
                for s in &outcome.samples {
                    lines.push_str(&serde_json::to_string(s)?);
                    lines.push('\n');
                }
                fs::write(dir.join("samples.jsonl"), lines)?;
            }
        }
        Command::ShowConfig { config, quick } => {
            let mut c = if quick && config.config.is_none() {
                ExperimentConfig::quick()
            } else {
                config.load()?
            };
            if let Some(s) = config.seed {
                c.seed = s;
            }
            print!("{}", c.to_toml());
        }
        Command::Vocab {
            command: VocabCommand::Export { config, out },
        } => {
            let c = config.load()?;
            let v = c.clip.synthetic_vocabulary()?;
            v.save(&out)?;
            println!("vocabulary {}x{} ({}) -> {}", v.rows(), v.dim(), &v.hash()[..16], out.display());
        }
    }
    Ok(())
}
