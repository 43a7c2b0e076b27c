//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 4 7`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use intentmob::harness::{
    compute_immobility_prf, compute_ranking_metrics, run_experiment_with, AblationFlag,
    ExperimentConfig, ExperimentReport, StageCache,
};
use intentmob::intention::{fit_tca, ImmobilityVector, IntentionSpace, Standardizer, TcaConfig};
use intentmob::nn::{sq_dist, Matrix};
use intentmob::predictor::{
    BaseKind, LocationPredictor, ModulationMode, PredictionQuery, PredictionRanking,
    PredictorConfig, PredictorSequence,
};
use intentmob::refiner::{
    build_prompt, parse_answer, PromptInputs, RefinementDecision, RefinerBackend, StubBackend,
};
use intentmob::retrieval::{dtw_distance, CorpusTag, Reference, ReferenceSet};
use intentmob::seqmodel::{language_project, ClipConfig, ClipModel, TrainingSequence};
use intentmob::trajstore::{generate_world, DisasterLevel, LevelLabels, WorldConfig};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < limit_s, format!("{s:.2} s (limit {limit_s} s)"))
}

// 1 -------------------------------------------------------------------------

/// Rank of `truth` by scanning raw scores: one plus the number of locations
/// with a higher probability, or an equal one and a smaller id.
fn brute_rank(probs: &[f64], truth: usize) -> usize {
    1 + probs
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p > probs[truth] || (p == probs[truth] && i < truth))
        .count()
}

fn brute_metrics(ranks: &[usize]) -> [f64; 5] {
    let n = ranks.len() as f64;
    let (mut a1, mut a10, mut mrr, mut n5, mut n10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &r in ranks {
        a1 += if r == 1 { 1.0 } else { 0.0 };
        a10 += if r <= 10 { 1.0 } else { 0.0 };
        mrr += 1.0 / r as f64;
        // DCG over the list positions; the ideal DCG of one relevant item is 1.
        let dcg = |k: usize| {
            let mut d = 0.0;
            for pos in 0..k {
                if pos + 1 == r {
                    d += 1.0 / ((pos + 2) as f64).log2();
                }
            }
            d
        };
        n5 += dcg(5);
        n10 += dcg(10);
    }
    [a1 / n, a10 / n, mrr / n, n5 / n, n10 / n]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let locations = rng.random_range(2..30usize);
        let samples = rng.random_range(1..25usize);
        let mut rankings = Vec::new();
        let mut truth = Vec::new();
        let mut ranks = Vec::new();
        let mut predicted = Vec::new();
        let mut immobile = Vec::new();
        for _ in 0..samples {
            // Small integer logits force ties.
            let logits: Vec<f64> = (0..locations).map(|_| rng.random_range(0..6) as f64).collect();
            let current = rng.random_range(0..locations) as u32;
            let t = rng.random_range(0..locations);
            let r = PredictionRanking::from_logits(current, &logits);
            let probs: Vec<f64> = {
                let mut p = vec![0.0; locations];
                for &(id, q) in &r.entries {
                    p[id as usize] = q;
                }
                p
            };
            ranks.push(brute_rank(&probs, t));
            let top = (0..locations).find(|&i| brute_rank(&probs, i) == 1).unwrap();
            predicted.push(top as u32 == current);
            immobile.push(t as u32 == current);
            truth.push(t as u32);
            rankings.push(r);
        }
        let m = compute_ranking_metrics(&rankings, &truth).unwrap();
        let got = [m.acc_at_1, m.acc_at_10, m.mrr, m.ndcg_at_5, m.ndcg_at_10];
        if got != brute_metrics(&ranks) {
            mismatches += 1;
        }
        let prf = compute_immobility_prf(&predicted, &immobile).unwrap();
        let tp = predicted.iter().zip(&immobile).filter(|(p, t)| **p && **t).count();
        let fp = predicted.iter().zip(&immobile).filter(|(p, t)| **p && !**t).count();
        let fn_ = predicted.iter().zip(&immobile).filter(|(p, t)| !**p && **t).count();
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let p = div(tp as f64, (tp + fp) as f64);
        let rc = div(tp as f64, (tp + fn_) as f64);
        let f1 = div(2.0 * p * rc, p + rc);
        if (prf.precision, prf.recall, prf.f1) != (p, rc, f1)
            || (prf.true_positives, prf.false_positives, prf.false_negatives) != (tp, fp, fn_)
        {
            mismatches += 1;
        }
    }
    let (fast, time) = within(start.elapsed(), 10.0);
    outcome(
        mismatches == 0 && fast,
        format!("1000 instances, {mismatches} mismatches, {time}"),
    )
}

// 2 -------------------------------------------------------------------------

/// Minimum cost over every monotone path of match/insert/delete steps.
fn exhaustive_dtw(a: &[Vec<f64>], b: &[Vec<f64>], window: usize) -> f64 {
    fn walk(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, w: usize, acc: f64, best: &mut f64) {
        if i.abs_diff(j) > w {
            return;
        }
        let acc = acc + sq_dist(&a[i], &b[j]).sqrt();
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, w, acc, best);
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, w, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, w, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, window, 0.0, &mut best);
    best
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let dim = 3;
    let seqs: Vec<Vec<Vec<f64>>> = (0..200)
        .map(|_| {
            let len = rng.random_range(1..=5);
            (0..len)
                .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect()
        })
        .collect();
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for a in &seqs {
        for b in &seqs {
            let dp = dtw_distance(a, b, None).unwrap();
            worst = worst.max((dp - exhaustive_dtw(a, b, usize::MAX)).abs());
            // Banded variant with the narrowest admissible window.
            let w = a.len().abs_diff(b.len());
            let dp = dtw_distance(a, b, Some(w)).unwrap();
            worst = worst.max((dp - exhaustive_dtw(a, b, w)).abs());
            pairs += 1;
        }
    }
    let (fast, time) = within(start.elapsed(), 30.0);
    outcome(
        worst <= 1e-9 && fast,
        format!("{pairs} pairs, max |dp - exhaustive| {worst:.2e} (tol 1e-9), {time}"),
    )
}

// 3 -------------------------------------------------------------------------

fn gaussian(n: usize, mean: &[f64], std: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = rand_distr::Normal::new(0.0, std).unwrap();
    (0..n)
        .map(|_| mean.iter().map(|m| m + rng.sample(normal)).collect())
        .collect()
}

/// Linear-kernel MMD²: squared distance between the sample means.
fn mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mean = |rows: &[Vec<f64>]| {
        let mut m = vec![0.0; rows[0].len()];
        for r in rows {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v / rows.len() as f64;
            }
        }
        m
    };
    sq_dist(&mean(a), &mean(b))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut violations = 0;
    let mut ratios = Vec::new();
    for _ in 0..50 {
        let dim = rng.random_range(3..8);
        let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s = gaussian(rng.random_range(40..80), &vec![0.0; dim], 1.0, &mut rng);
        let t = gaussian(rng.random_range(40..80), &shift, 1.0, &mut rng);
        let config = TcaConfig {
            components: rng.random_range(1..dim),
            ..TcaConfig::default()
        };
        let tca = fit_tca(&s, &t, &config).unwrap();
        let std = |rows: &[Vec<f64>]| rows.iter().map(|r| tca.standardizer.apply(r)).collect::<Vec<_>>();
        let proj = |rows: &[Vec<f64>]| rows.iter().map(|r| tca.apply(r).unwrap()).collect::<Vec<_>>();
        let before = mmd(&std(&s), &std(&t));
        let after = mmd(&proj(&s), &proj(&t));
        if after > before + 1e-6 {
            violations += 1;
        }
        ratios.push(after / before);
    }
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let (fast, time) = within(start.elapsed(), 30.0);
    outcome(
        violations == 0 && fast,
        format!("50 pairs, {violations} violations, mean projected/input MMD {mean_ratio:.3}, {time}"),
    )
}

// 4 -------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_sum: f64 = 0.0;
    let mut worst_limit: f64 = 0.0;
    for _ in 0..100 {
        let n_p = rng.random_range(2..40);
        let d = rng.random_range(2..65);
        let rows: Vec<Vec<f64>> = (0..n_p)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let p = Matrix::from_rows(&rows);
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let proj = language_project(&q, &p, d as f64).unwrap();
        worst_sum = worst_sum.max((proj.weights.iter().sum::<f64>() - 1.0).abs());

        // Query aligned with prototype j at scale 1e3.
        let j = rng.random_range(0..n_p);
        let q: Vec<f64> = rows[j].iter().map(|x| 1e3 * x).collect();
        let proj = language_project(&q, &p, d as f64).unwrap();
        worst_limit = worst_limit.max(sq_dist(&proj.embedding, &rows[j]).sqrt());
    }
    outcome(
        worst_sum <= 1e-6 && worst_limit <= 1e-3,
        format!("100 draws, max |row sum - 1| {worst_sum:.1e} (tol 1e-6), max |P_j - limit| {worst_limit:.1e} (tol 1e-3)"),
    )
}

// 5 -------------------------------------------------------------------------

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn clip_gradient_error(rng: &mut ChaCha8Rng) -> f64 {
    let n = 3;
    let config = ClipConfig {
        width: 8,
        heads: 2,
        blocks: 1,
        ff_width: 8,
        max_len: 8,
        prototypes: 4,
        vocab_rows: 12,
        vocab_dim: 6,
        batch_size: 4,
        ..ClipConfig::default()
    };
    let space = IntentionSpace {
        centroids: (0..n).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect(),
        immobility: Some(ImmobilityVector {
            vector: vec![1.0, 0.5, 8.0],
            offset: 8.0,
        }),
        silhouette: 0.0,
    };
    let vocab = config.synthetic_vocabulary().unwrap();
    let mut m = ClipModel::new(&config, vocab, &space, Standardizer::identity(n), 5).unwrap();
    let seq = |classes: &[usize]| TrainingSequence {
        features: classes
            .iter()
            .map(|&c| (0..n).map(|j| if j == c { 1.0 } else { 0.1 * j as f64 }).collect())
            .collect(),
        classes: classes.to_vec(),
    };
    let data = [seq(&[0, 1, 2]), seq(&[2, 3, 0]), seq(&[1, 3])];
    let batch: Vec<&TrainingSequence> = data.iter().collect();
    let (_, grads) = m.gradients(&batch).unwrap();
    let mut worst: f64 = 0.0;
    let total = m.params.scalar_count();
    for _ in 0..10 {
        let flat = rng.random_range(0..total);
        let x = m.params.scalar(flat);
        let h = 1e-6;
        m.params.set_scalar(flat, x + h);
        let up = m.loss(&batch).unwrap().total;
        m.params.set_scalar(flat, x - h);
        let down = m.loss(&batch).unwrap().total;
        m.params.set_scalar(flat, x);
        worst = worst.max(relative_error(grads.scalar(&m.params, flat), (up - down) / (2.0 * h)));
    }
    worst
}

fn predictor_gradient_error(rng: &mut ChaCha8Rng) -> f64 {
    let world = generate_world(&WorldConfig::default(), 7).unwrap();
    let city = world.city(&world.target_city).unwrap();
    let n = city.locations.len() as u32;
    let config = PredictorConfig {
        embedding_dim: 4,
        user_dim: 3,
        hidden_dim: 5,
        head_hidden: 6,
        ..PredictorConfig::default()
    };
    let dim = 3;
    let data: Vec<PredictorSequence> = (0..3)
        .map(|u| {
            let locations: Vec<u32> = (0..5).map(|_| rng.random_range(0..n)).collect();
            PredictorSequence {
                user_id: format!("u{u}"),
                intentions: (0..4).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
                locations,
            }
        })
        .collect();
    let batch: Vec<&PredictorSequence> = data.iter().collect();
    let mut base = LocationPredictor::new_base(BaseKind::Rnn, city, &config, 3).unwrap();
    base.fit_users(&data);
    let mut worst: f64 = 0.0;
    for mode in ModulationMode::ALL {
        let mut m = base.with_mode(mode, dim).unwrap();
        // Leave the identity start so every path carries gradient.
        let total = m.params().scalar_count();
        for flat in 0..total {
            let x = m.params().scalar(flat);
            m.params_mut().set_scalar(flat, x + rng.random_range(-0.05..0.05));
        }
        let (_, grads) = m.gradients(&batch).unwrap();
        for _ in 0..10 {
            let flat = rng.random_range(0..total);
            let x = m.params().scalar(flat);
            let h = 1e-6;
            m.params_mut().set_scalar(flat, x + h);
            let up = m.loss(&batch).unwrap();
            m.params_mut().set_scalar(flat, x - h);
            let down = m.loss(&batch).unwrap();
            m.params_mut().set_scalar(flat, x);
            worst = worst.max(relative_error(grads.scalar(m.params(), flat), (up - down) / (2.0 * h)));
        }
    }
    worst
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let clip = clip_gradient_error(&mut rng);
    let predictor = predictor_gradient_error(&mut rng);
    let (fast, time) = within(start.elapsed(), 60.0);
    outcome(
        clip < 1e-4 && predictor < 1e-4 && fast,
        format!("max relative error L_C {clip:.1e}, L_M {predictor:.1e} over mul/concat/attn (tol 1e-4), {time}"),
    )
}

// 6 -------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let world = generate_world(&WorldConfig::default(), 11).unwrap();
    let city = world.city(&world.target_city).unwrap();
    let n = city.locations.len() as u32;
    let dim = 9;
    let users: Vec<String> = (0..5).map(|u| format!("u{u}")).collect();
    let data: Vec<PredictorSequence> = (0..40)
        .map(|i| PredictorSequence {
            user_id: users[i % users.len()].clone(),
            locations: (0..8).map(|_| rng.random_range(0..n)).collect(),
            intentions: Vec::new(),
        })
        .collect();
    let config = PredictorConfig {
        base_epochs: 3,
        ..PredictorConfig::default()
    };
    let mut differing = 0;
    for kind in [BaseKind::Freq, BaseKind::Rnn] {
        let mut base = LocationPredictor::new_base(kind, city, &config, 1).unwrap();
        base.train(&data, config.base_epochs).unwrap();
        let m = base.with_mode(ModulationMode::Mul, dim).unwrap();
        for _ in 0..100 {
            let len = rng.random_range(1..10);
            let prefix: Vec<u32> = (0..len).map(|_| rng.random_range(0..n)).collect();
            let user = users.choose(&mut rng).unwrap();
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
            let plain = base
                .predict_ranking(PredictionQuery { user_id: user, prefix: &prefix, intention: None })
                .unwrap();
            let fused = m
                .predict_ranking(PredictionQuery { user_id: user, prefix: &prefix, intention: Some(&x) })
                .unwrap();
            if plain != fused {
                differing += 1;
            }
        }
    }
    outcome(
        differing == 0,
        format!("100 prefixes x 2 bases, {differing} rankings differ (bit-exact comparison)"),
    )
}

// 7 -------------------------------------------------------------------------

/// Answers derived from the grammar: three canonical forms, random case,
/// whitespace and class indices.
fn valid_answers(rng: &mut ChaCha8Rng, intentions: usize) -> Vec<(String, RefinementDecision)> {
    let mut out = Vec::new();
    let casing = |s: &str, rng: &mut ChaCha8Rng| -> String {
        s.chars()
            .map(|c| if rng.random::<bool>() { c.to_ascii_uppercase() } else { c })
            .collect()
    };
    let pad = |s: String, rng: &mut ChaCha8Rng| -> String {
        let sp = |rng: &mut ChaCha8Rng| " ".repeat(rng.random_range(0..3));
        format!("{}{s}{}", sp(rng), sp(rng))
    };
    for _ in 0..300 {
        let (fields, decision) = match rng.random_range(0..3) {
            0 => (["yes", "None", "None"].map(String::from), RefinementDecision::KEEP),
            1 => (["no", "yes", "stay still"].map(String::from), RefinementDecision::STAY_STILL),
            _ => {
                let c = rng.random_range(0..intentions);
                (["no".into(), "no".into(), c.to_string()], RefinementDecision::class(c))
            }
        };
        let parts: Vec<String> = fields
            .iter()
            .map(|f| {
                let f = casing(f, rng);
                let f = pad(f, rng);
                let sep = " ".repeat(rng.random_range(0..2));
                format!("{sep}\"{f}\"{sep}")
            })
            .collect();
        out.push((format!("[{}]", parts.join(",")), decision));
    }
    out
}

fn invalid_answers(rng: &mut ChaCha8Rng, intentions: usize) -> Vec<String> {
    let mut out: Vec<String> = [
        r#"["yes", "no", "2"]"#,
        r#"["yes", "None", "2"]"#,
        r#"["yes", "yes", "stay still"]"#,
        r#"["no", "yes", "2"]"#,
        r#"["no", "yes", "None"]"#,
        r#"["no", "no", "stay still"]"#,
        r#"["no", "no", "None"]"#,
        r#"["no", "None", "None"]"#,
        r#"["no", "no", "-1"]"#,
        r#"["no", "no", "1.5"]"#,
        r#"["no", "no", 2]"#,
        r#"["maybe", "None", "None"]"#,
        r#"["no", "no"]"#,
        r#"["no", "no", "1", "2"]"#,
        r#"[]"#,
        r#"no, no, 1"#,
        r#"{"answer": ["no", "no", "1"]}"#,
        "",
    ]
    .map(String::from)
    .to_vec();
    for _ in 0..100 {
        let c = rng.random_range(intentions..intentions + 50);
        out.push(format!(r#"["no", "no", "{c}"]"#));
    }
    out
}

fn stub_prompt(level: u8, next: &[usize], predicted: usize) -> intentmob::refiner::PromptBundle {
    let references = ReferenceSet {
        source: next
            .iter()
            .map(|&n| Reference {
                tag: CorpusTag::SourceDisaster(level),
                id: format!("r{n}"),
                distance: 0.0,
                history: vec![0],
                next: n,
            })
            .collect(),
        target: vec![],
    };
    build_prompt(&PromptInputs {
        id: "q",
        level: DisasterLevel(level),
        labels: &LevelLabels::default(),
        query: &[vec![0.0]],
        predicted: &[0.0],
        predicted_class: predicted,
        references: &references,
        anchors: &Matrix::zeros(6, 1),
        intentions: 5,
        immobility: true,
        prefix: None,
    })
    .unwrap()
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let intentions = 8;
    let valid = valid_answers(&mut rng, intentions);
    let parsed = valid
        .iter()
        .filter(|(text, d)| parse_answer(text, intentions, true).ok() == Some(*d))
        .count();
    let invalid = invalid_answers(&mut rng, intentions);
    let rejected = invalid
        .iter()
        .filter(|text| parse_answer(text, intentions, true).is_err())
        .count();
    // The three answer forms of the prompt protocol.
    let stub = StubBackend::default();
    let forms = [
        (stub_prompt(4, &[5, 5, 5], 4), r#"["no","yes","stay still"]"#),
        (stub_prompt(0, &[2, 2, 5], 5), r#"["no","no","2"]"#),
        (stub_prompt(0, &[1, 2, 3], 2), r#"["yes","None","None"]"#),
    ];
    let rules = forms
        .iter()
        .filter(|(p, want)| stub.answer(p).unwrap() == *want && parse_answer(want, 5, true).is_ok())
        .count();
    outcome(
        parsed == valid.len() && rejected == invalid.len() && rules == 3,
        format!(
            "valid parsed {parsed}/{}, invalid rejected {rejected}/{}, stub rules {rules}/3",
            valid.len(),
            invalid.len()
        ),
    )
}

// 8, 9, 10 ------------------------------------------------------------------

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct SeedRuns {
    seed: u64,
    full: ExperimentReport,
    ablated: Vec<(AblationFlag, ExperimentReport)>,
}

fn benchmark() -> (Vec<SeedRuns>, Duration) {
    let start = Instant::now();
    let runs = SEEDS
        .iter()
        .map(|&seed| {
            let config = ExperimentConfig {
                seed,
                ..ExperimentConfig::default()
            };
            // One cache per seed: ablations that leave a stage's inputs
            // unchanged reuse the trained artifacts.
            let cache = StageCache::new(None);
            let full = run_experiment_with(&config, &cache).unwrap().report;
            let ablated = AblationFlag::ALL
                .iter()
                .map(|&f| (f, run_experiment_with(&config.with_disabled(&[f]), &cache).unwrap().report))
                .collect();
            SeedRuns { seed, full, ablated }
        })
        .collect();
    (runs, start.elapsed())
}

fn criterion_8(runs: &[SeedRuns], elapsed: Duration) -> Outcome {
    let mut a = 0;
    let mut b = 0;
    let mut c = 0;
    let mut rows = Vec::new();
    for r in runs {
        let f = &r.full;
        let off = &r.ablated.iter().find(|(fl, _)| *fl == AblationFlag::LlmRefining).unwrap().1;
        let base_dt = f.base_disaster.ranking.acc_at_1;
        let base_nt = f.base_normal.ranking.acc_at_1;
        let mod_dt = f.modulated_disaster.ranking.acc_at_1;
        let f1_stub = f.modulated_disaster.immobility.f1;
        let f1_off = off.modulated_disaster.immobility.f1;
        a += usize::from(base_dt < base_nt);
        b += usize::from(mod_dt > base_dt);
        c += usize::from(f1_stub > f1_off);
        rows.push(format!(
            "      seed {}: base Acc@1 d_dt {base_dt:.3} / d_nt {base_nt:.3}, modulated d_dt {mod_dt:.3}, F1@Imm stub {f1_stub:.3} / off {f1_off:.3}",
            r.seed
        ));
    }
    let (fast, time) = within(elapsed, 15.0 * 60.0);
    let n = runs.len();
    outcome(
        a == n && b >= 4 && c >= 4 && fast,
        format!(
            "(a) {a}/{n} seeds base d_dt < d_nt, (b) {b}/{n} modulated > base on d_dt, (c) {c}/{n} stub F1@Imm > off; 25 runs in {time}\n{}",
            rows.join("\n")
        ),
    )
}

fn criterion_9(runs: &[SeedRuns]) -> Outcome {
    let mean = |pick: &dyn Fn(&SeedRuns) -> f64| runs.iter().map(pick).sum::<f64>() / runs.len() as f64;
    let full = mean(&|r| r.full.modulated_disaster.composite);
    let mut ok = true;
    let mut parts = vec![format!("full {full:.4}")];
    for flag in AblationFlag::ALL {
        let v = mean(&|r| r.ablated.iter().find(|(f, _)| *f == flag).unwrap().1.modulated_disaster.composite);
        ok &= v <= full;
        parts.push(format!("w/o {flag} {v:.4}"));
    }
    outcome(ok, format!("mean composite over 5 seeds: {}", parts.join(", ")))
}

fn criterion_10(runs: &[SeedRuns]) -> Outcome {
    let first = &runs[0].full;
    let config = ExperimentConfig {
        seed: runs[0].seed,
        ..ExperimentConfig::default()
    };
    let again = run_experiment_with(&config, &StageCache::new(None)).unwrap().report;
    let (x, y) = (first.to_json(), again.to_json());
    outcome(
        x == y,
        format!("seed {} rerun with a fresh cache: {} bytes, identical = {}", config.seed, x.len(), x == y),
    )
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let names = [
        "metric oracle",
        "DTW oracle",
        "TCA MMD reduction",
        "prototype attention",
        "gradient checks",
        "MUL identity",
        "refiner answers",
        "end-to-end direction of effect",
        "ablation monotonicity",
        "reproducibility",
    ];
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let single: [(u32, fn() -> Outcome); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
    ];
    for (n, f) in single {
        if wanted(n) {
            let o = f();
            report(n, names[n as usize - 1], &o);
            results.push((n, o));
        }
    }
    if wanted(8) || wanted(9) || wanted(10) {
        let (runs, elapsed) = benchmark();
        let mut late: Vec<(u32, Outcome)> = Vec::new();
        if wanted(8) {
            late.push((8, criterion_8(&runs, elapsed)));
        }
        if wanted(9) {
            late.push((9, criterion_9(&runs)));
        }
        if wanted(10) {
            late.push((10, criterion_10(&runs)));
        }
        for (n, o) in late {
            report(n, names[n as usize - 1], &o);
            results.push((n, o));
        }
    }
    let failed: Vec<u32> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn report(n: u32, name: &str, o: &Outcome) {
    println!("[{}] criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}
