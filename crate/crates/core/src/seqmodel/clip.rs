use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::proto::{build_prototypes, language_project, project_on_tape, Projection};
use super::vocab::{VocabSource, Vocabulary};
use crate::error::{Error, Result};
use crate::intention::{IntentionSpace, Standardizer};
use crate::nn::{random_normal, Adam, Gradients, Linear, Matrix, ParamId, ParamSet, Tape, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_width: usize,
    /// Longest history the positional table covers.
    pub max_len: usize,
    /// `N_P`.
    pub prototypes: usize,
    /// `N_V` and `D_V` of the synthetic vocabulary.
    pub vocab_rows: usize,
    pub vocab_dim: usize,
    pub vocab_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub nce_temperature: f64,
    pub class_temperature: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            blocks: 2,
            ff_width: 128,
            max_len: 64,
            prototypes: 32,
            vocab_rows: 1024,
            vocab_dim: 64,
            vocab_seed: 17,
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            nce_temperature: 0.07,
            class_temperature: 0.1,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size must be at least 2 (in-batch negatives)",
            ));
        }
        if self.prototypes == 0 || self.max_len == 0 || self.ff_width == 0 {
            return Err(Error::config("prototypes, max_len and ff_width must be positive"));
        }
        if !(self.nce_temperature > 0.0 && self.class_temperature > 0.0 && self.learning_rate > 0.0) {
            return Err(Error::config("temperatures and learning rate must be positive"));
        }
        Ok(())
    }

    pub fn synthetic_vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::synthetic(self.vocab_seed, self.vocab_rows, self.vocab_dim)
    }
}

/// Raw travel features of one trajectory and the intention class of each travel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub features: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layout {
    input: Linear,
    position: ParamId,
    blocks: Vec<Block>,
    head: Linear,
    /// Vocabulary weighting `h`.
    weighting: ParamId,
    lift: Linear,
    immobility: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub format_version: u32,
    pub config: ClipConfig,
    pub seed: u64,
    pub feature_dim: usize,
    pub intentions: usize,
    pub immobility: bool,
    pub vocabulary: VocabSource,
    pub corpus_hashes: BTreeMap<String, String>,
}

/// The intention translator/predictor with its prototype attention.
#[derive(Clone, Debug)]
pub struct ClipModel {
    pub manifest: ClipManifest,
    pub params: ParamSet,
    pub standardizer: Standardizer,
    /// Intention vectors of the `N_I` centroid classes.
    pub centroid_vectors: Matrix,
    layout: Layout,
    vocabulary: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    manifest: ClipManifest,
    layout: Layout,
    standardizer: Standardizer,
    centroid_vectors: Matrix,
    params: ParamSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub nce: f64,
    pub ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial: LossParts,
    pub final_loss: LossParts,
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionPrediction {
    /// `Y_T`.
    pub embedding: Vec<f64>,
    /// Scaled cosine similarity to each class anchor.
    pub logits: Vec<f64>,
    pub class: usize,
    /// `Y_1 … Y_{T-1}`: the output after each prefix of the history.
    pub step_embeddings: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeProbe {
    /// Per prototype: `(vocabulary row, weight)` of the two largest weights.
    pub top: Vec<[(usize, f64); 2]>,
    pub all_equal: bool,
}

struct Batch {
    inputs: Matrix,
    positions: Vec<usize>,
    mask: Matrix,
    pooling: Matrix,
    targets: Vec<usize>,
    /// Last row of each segment.
    ends: Vec<usize>,
}

impl ClipModel {
    pub fn new(
        config: &ClipConfig,
        vocabulary: Vocabulary,
        space: &IntentionSpace,
        standardizer: Standardizer,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        vocabulary.validate()?;
        if config.prototypes >= vocabulary.rows() {
            return Err(Error::invalid(format!(
                "{} prototypes for a vocabulary of {} rows; prototypes must be fewer",
                config.prototypes,
                vocabulary.rows()
            )));
        }
        let feature_dim = standardizer.mean.len();
        let d_v = vocabulary.dim();
        let mut rng = crate::derive_rng(seed, &["clip-init"]);
        let mut params = ParamSet::new();
        let w = config.width;
        let input = Linear::new(&mut params, "input", feature_dim, w, &mut rng);
        let position = params.add("position", random_normal(config.max_len, w, 0.1, &mut rng));
        let blocks = (0..config.blocks)
            .map(|b| {
                let mut lin = |n: &str, i, o| Linear::new(&mut params, &format!("block{b}.{n}"), i, o, &mut rng);
                Block {
                    q: lin("q", w, w),
                    k: lin("k", w, w),
                    v: lin("v", w, w),
                    o: lin("o", w, w),
                    ff1: lin("ff1", w, config.ff_width),
                    ff2: lin("ff2", config.ff_width, w),
                }
            })
            .collect();
        let head = Linear::new(&mut params, "head", w, d_v, &mut rng);
        let weighting = params.add(
            "weighting",
            random_normal(
                config.prototypes,
                vocabulary.rows(),
                1.0 / (vocabulary.rows() as f64).sqrt(),
                &mut rng,
            ),
        );
        let lift = Linear::new(&mut params, "lift", space.vector_dim(), d_v, &mut rng);
        let immobility = params.add("immobility", Matrix::row_vector(vocabulary.stay_still()));

        let centroid_vectors = Matrix::from_rows(
            &(0..space.intention_count())
                .map(|c| space.class_vector(c))
                .collect::<Result<Vec<_>>>()?,
        );
        Ok(Self {
            manifest: ClipManifest {
                format_version: CHECKPOINT_VERSION,
                config: config.clone(),
                seed,
                feature_dim,
                intentions: space.intention_count(),
                immobility: space.immobility.is_some(),
                vocabulary: vocabulary.source.clone(),
                corpus_hashes: BTreeMap::new(),
            },
            params,
            standardizer,
            centroid_vectors,
            layout: Layout {
                input,
                position,
                blocks,
                head,
                weighting,
                lift,
                immobility,
            },
            vocabulary,
        })
    }

    /// `N_I + 1` with the immobility class, `N_I` without.
    pub fn class_count(&self) -> usize {
        self.manifest.intentions + usize::from(self.manifest.immobility)
    }

    pub fn embedding_dim(&self) -> usize {
        self.vocabulary.dim()
    }

    pub fn d_k(&self) -> f64 {
        self.vocabulary.dim() as f64
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn prototypes(&self) -> Matrix {
        build_prototypes(&self.vocabulary.matrix, self.params.get(self.layout.weighting))
            .expect("validated at construction")
    }

    pub fn immobility_embedding(&self) -> Vec<f64> {
        self.params.get(self.layout.immobility).data().to_vec()
    }

    /// `T` for an intention vector: lift, then attention over the prototypes.
    pub fn project(&self, intention_vector: &[f64]) -> Result<Projection> {
        if intention_vector.len() != self.centroid_vectors.cols() {
            return Err(Error::Dimension {
                expected: self.centroid_vectors.cols(),
                actual: intention_vector.len(),
            });
        }
        let q = self.layout.lift.apply(&self.params, intention_vector);
        language_project(&q, &self.prototypes(), self.d_k())
    }

    /// Language-modality anchor of every class, immobility last.
    pub fn class_anchors(&self) -> Matrix {
        let mut tape = Tape::new();
        let a = self.anchors_on_tape(&mut tape);
        tape.value(a).clone()
    }

    fn anchors_on_tape(&self, tape: &mut Tape) -> Var {
        let v = tape.constant(self.vocabulary.matrix.clone());
        let h = tape.param(&self.params, self.layout.weighting);
        let p = tape.matmul(h, v);
        let c = tape.constant(self.centroid_vectors.clone());
        let lifted = self.layout.lift.forward(tape, &self.params, c);
        let t = project_on_tape(tape, lifted, p, self.d_k());
        if self.manifest.immobility {
            let imm = tape.param(&self.params, self.layout.immobility);
            tape.concat_rows(&[t, imm])
        } else {
            t
        }
    }

    fn batch(&self, segments: &[(&[Vec<f64>], &[usize])]) -> Result<Batch> {
        let n: usize = segments.iter().map(|s| s.0.len()).sum();
        let dim = self.manifest.feature_dim;
        let mut inputs = Matrix::zeros(n, dim);
        let mut positions = Vec::with_capacity(n);
        let mut mask = Matrix::filled(n, n, -1e9);
        let mut pooling = Matrix::zeros(n, n);
        let mut targets = Vec::new();
        let mut ends = Vec::with_capacity(segments.len());
        let mut start = 0;
        for (features, classes) in segments {
            if features.is_empty() {
                return Err(Error::invalid("empty intention history"));
            }
            if features.len() > self.manifest.config.max_len {
                return Err(Error::invalid(format!(
                    "history of {} travels exceeds max_len {}",
                    features.len(),
                    self.manifest.config.max_len
                )));
            }
            for (i, f) in features.iter().enumerate() {
                if f.len() != dim {
                    return Err(Error::Dimension {
                        expected: dim,
                        actual: f.len(),
                    });
                }
                let row = start + i;
                inputs.row_mut(row).copy_from_slice(&self.standardizer.apply(f));
                positions.push(i);
                for j in 0..=i {
                    mask.set(row, start + j, 0.0);
                    pooling.set(row, start + j, 1.0 / (i + 1) as f64);
                }
            }
            targets.extend_from_slice(classes);
            start += features.len();
            ends.push(start - 1);
        }
        Ok(Batch {
            inputs,
            positions,
            mask,
            pooling,
            targets,
            ends,
        })
    }

    fn encode(&self, tape: &mut Tape, batch: &Batch) -> Var {
        let p = &self.params;
        let cfg = &self.manifest.config;
        let x = tape.constant(batch.inputs.clone());
        let x = self.layout.input.forward(tape, p, x);
        let pos = tape.param(p, self.layout.position);
        let pos = tape.gather(pos, &batch.positions);
        let mut x = tape.add(x, pos);
        let mask = tape.constant(batch.mask.clone());
        let head_dim = cfg.width / cfg.heads;
        for b in &self.layout.blocks {
            let h = tape.layer_norm(x, 1e-5);
            let q = b.q.forward(tape, p, h);
            let k = b.k.forward(tape, p, h);
            let v = b.v.forward(tape, p, h);
            let heads: Vec<Var> = (0..cfg.heads)
                .map(|i| {
                    let qi = tape.slice_cols(q, i * head_dim, head_dim);
                    let ki = tape.slice_cols(k, i * head_dim, head_dim);
                    let vi = tape.slice_cols(v, i * head_dim, head_dim);
                    let s = tape.matmul_nt(qi, ki);
                    let s = tape.scale(s, 1.0 / (head_dim as f64).sqrt());
                    let s = tape.add(s, mask);
                    let a = tape.softmax(s);
                    tape.matmul(a, vi)
                })
                .collect();
            let att = tape.concat_cols(&heads);
            let att = b.o.forward(tape, p, att);
            x = tape.add(x, att);
            let h = tape.layer_norm(x, 1e-5);
            let f = b.ff1.forward(tape, p, h);
            let f = tape.gelu(f);
            let f = b.ff2.forward(tape, p, f);
            x = tape.add(x, f);
        }
        let x = tape.layer_norm(x, 1e-5);
        let pool = tape.constant(batch.pooling.clone());
        let pooled = tape.matmul(pool, x);
        self.layout.head.forward(tape, p, pooled)
    }

    fn loss_on_tape(&self, tape: &mut Tape, batch: &[&TrainingSequence]) -> Result<(Var, Var, Var)> {
        if batch.len() < 2 {
            return Err(Error::invalid("contrastive loss needs at least two sequences per batch"));
        }
        let k = self.class_count();
        let mut segments = Vec::with_capacity(batch.len());
        for s in batch {
            if s.features.len() != s.classes.len() || s.features.len() < 2 {
                return Err(Error::invalid(
                    "training sequence needs matching features and classes, length >= 2",
                ));
            }
            if let Some(&c) = s.classes.iter().find(|&&c| c >= k) {
                return Err(Error::invalid(format!("class {c} outside 0..{k}")));
            }
            let n = s.features.len();
            segments.push((&s.features[..n - 1], &s.classes[1..]));
        }
        let b = self.batch(&segments)?;
        let cfg = &self.manifest.config;
        let y = self.encode(tape, &b);
        let anchors = self.anchors_on_tape(tape);
        let yn = tape.l2_normalize(y);
        let an = tape.l2_normalize(anchors);

        let logits = tape.matmul_nt(yn, an);
        let logits = tape.scale(logits, 1.0 / cfg.class_temperature);
        let ce = tape.cross_entropy(logits, &b.targets);

        let tn = tape.gather(an, &b.targets);
        let diag: Vec<usize> = (0..b.targets.len()).collect();
        let sim = tape.matmul_nt(yn, tn);
        let sim = tape.scale(sim, 1.0 / cfg.nce_temperature);
        let sim_t = tape.matmul_nt(tn, yn);
        let sim_t = tape.scale(sim_t, 1.0 / cfg.nce_temperature);
        let l1 = tape.cross_entropy(sim, &diag);
        let l2 = tape.cross_entropy(sim_t, &diag);
        let nce = tape.add(l1, l2);
        let nce = tape.scale(nce, 0.5);
        let total = tape.add(nce, ce);
        Ok((total, nce, ce))
    }

    pub fn loss(&self, batch: &[&TrainingSequence]) -> Result<LossParts> {
        let mut tape = Tape::new();
        let (t, n, c) = self.loss_on_tape(&mut tape, batch)?;
        Ok(LossParts {
            total: tape.scalar(t),
            nce: tape.scalar(n),
            ce: tape.scalar(c),
        })
    }

    pub fn gradients(&self, batch: &[&TrainingSequence]) -> Result<(LossParts, Gradients)> {
        let mut tape = Tape::new();
        let (t, n, c) = self.loss_on_tape(&mut tape, batch)?;
        let parts = LossParts {
            total: tape.scalar(t),
            nce: tape.scalar(n),
            ce: tape.scalar(c),
        };
        Ok((parts, tape.backward(t)))
    }

    /// Mean loss over consecutive batches of the configured size.
    pub fn dataset_loss(&self, sequences: &[TrainingSequence]) -> Result<LossParts> {
        let refs: Vec<&TrainingSequence> = sequences.iter().collect();
        let mut acc = LossParts {
            total: 0.0,
            nce: 0.0,
            ce: 0.0,
        };
        let mut count = 0;
        for chunk in batches(&refs, self.manifest.config.batch_size) {
            let l = self.loss(chunk)?;
            acc.total += l.total;
            acc.nce += l.nce;
            acc.ce += l.ce;
            count += 1;
        }
        let n = count.max(1) as f64;
        Ok(LossParts {
            total: acc.total / n,
            nce: acc.nce / n,
            ce: acc.ce / n,
        })
    }

    /// Seeded mini-batch Adam over `sequences`.
    pub fn train(&mut self, sequences: &[TrainingSequence]) -> Result<TrainReport> {
        let cfg = self.manifest.config.clone();
        if sequences.len() < 2 {
            return Err(Error::invalid("Intention-CLIP needs at least two training sequences"));
        }
        let initial = self.dataset_loss(sequences)?;
        let mut rng = crate::derive_rng(self.manifest.seed, &["clip-shuffle"]);
        let mut adam = Adam::new(&self.params, cfg.learning_rate);
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let refs: Vec<&TrainingSequence> = order.iter().map(|&i| &sequences[i]).collect();
            let mut sum = 0.0;
            let mut count = 0;
            for (b, chunk) in batches(&refs, cfg.batch_size).enumerate() {
                let (loss, grads) = self.gradients(chunk)?;
                if !loss.total.is_finite() || !grads.all_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite Intention-CLIP loss at epoch {epoch}, batch {b}: {loss:?}"
                    )));
                }
                adam.step(&mut self.params, &grads);
                sum += loss.total;
                count += 1;
            }
            epoch_losses.push(sum / count as f64);
        }
        let final_loss = self.dataset_loss(sequences)?;
        Ok(TrainReport {
            initial,
            final_loss,
            epoch_losses,
        })
    }

    /// Next-intention prediction for each history (raw travel features).
    pub fn predict_batch(&self, histories: &[&[Vec<f64>]]) -> Result<Vec<IntentionPrediction>> {
        let anchors = self.class_anchors();
        let tau = self.manifest.config.class_temperature;
        let mut out = Vec::with_capacity(histories.len());
        for chunk in histories.chunks(64) {
            let segments: Vec<(&[Vec<f64>], &[usize])> = chunk.iter().map(|h| (*h, &[][..])).collect();
            let b = self.batch(&segments)?;
            let mut tape = Tape::new();
            let y = self.encode(&mut tape, &b);
            let y = tape.value(y);
            let mut start = 0;
            for &end in &b.ends {
                let embedding = y.row(end).to_vec();
                let logits = cosine_logits(&embedding, &anchors, tau);
                let class = argmax(&logits);
                out.push(IntentionPrediction {
                    step_embeddings: (start..=end).map(|r| y.row(r).to_vec()).collect(),
                    embedding,
                    logits,
                    class,
                });
                start = end + 1;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, history: &[Vec<f64>]) -> Result<IntentionPrediction> {
        Ok(self.predict_batch(&[history])?.remove(0))
    }

    pub fn prototype_probe(&self) -> PrototypeProbe {
        let h = self.params.get(self.layout.weighting);
        let top = h
            .iter_rows()
            .map(|row| {
                let mut idx: Vec<usize> = (0..row.len()).collect();
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                [(idx[0], row[idx[0]]), (idx[1], row[idx[1]])]
            })
            .collect();
        let first = h.data()[0];
        PrototypeProbe {
            top,
            all_equal: h.data().iter().all(|&x| x == first),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            manifest: self.manifest.clone(),
            layout: self.layout.clone(),
            standardizer: self.standardizer.clone(),
            centroid_vectors: self.centroid_vectors.clone(),
            params: self.params.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    /// Loads a checkpoint trained on the synthetic vocabulary.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_inner(path, None)
    }

    /// Loads a checkpoint trained on a file vocabulary, checking its hash.
    pub fn load_with_vocabulary(path: &Path, vocabulary: Vocabulary) -> Result<Self> {
        Self::load_inner(path, Some(vocabulary))
    }

    fn load_inner(path: &Path, vocabulary: Option<Vocabulary>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: ck.manifest.format_version,
            });
        }
        let vocabulary = match (&ck.manifest.vocabulary, vocabulary) {
            (VocabSource::Synthetic { seed, rows, dim }, None) => Vocabulary::synthetic(*seed, *rows, *dim)?,
            (VocabSource::File { hash }, Some(v)) => {
                let found = v.hash();
                if &found != hash {
                    return Err(Error::HashMismatch {
                        what: "vocabulary".into(),
                        expected: hash.clone(),
                        found,
                    });
                }
                v
            }
            (VocabSource::File { .. }, None) => {
                return Err(Error::invalid("checkpoint needs its vocabulary file"))
            }
            (VocabSource::Synthetic { .. }, Some(_)) => {
                return Err(Error::invalid("checkpoint was trained on the synthetic vocabulary"))
            }
        };
        Ok(Self {
            manifest: ck.manifest,
            params: ck.params,
            standardizer: ck.standardizer,
            centroid_vectors: ck.centroid_vectors,
            layout: ck.layout,
            vocabulary,
        })
    }
}

fn batches<'a, T>(items: &'a [T], size: usize) -> impl Iterator<Item = &'a [T]> {
    // A trailing singleton cannot form in-batch negatives; fold it into the
    // previous batch.
    let n = items.len();
    let mut cuts: Vec<usize> = (0..n).step_by(size).collect();
    if n % size == 1 && cuts.len() > 1 {
        cuts.pop();
    }
    cuts.push(n);
    (0..cuts.len() - 1).map(move |i| &items[cuts[i]..cuts[i + 1]])
}

/// Cosine similarity of `y` to each anchor row, divided by `temperature`.
pub fn cosine_logits(y: &[f64], anchors: &Matrix, temperature: f64) -> Vec<f64> {
    let norm = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    let ny = norm(y);
    anchors
        .iter_rows()
        .map(|a| crate::nn::dot(y, a) / (ny * norm(a)) / temperature)
        .collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
