use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ranking::PredictionRanking;
use crate::error::{Error, Result};
use crate::nn::{Adam, Gradients, Linear, Matrix, ParamId, ParamSet, Tape, Var};
use crate::trajstore::City;

pub const PREDICTOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    /// Visit counting.
    Freq,
    /// Gated recurrent encoder over location embeddings.
    Rnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModulationMode {
    Mul,
    Concat,
    Attn,
}

impl ModulationMode {
    pub const ALL: [Self; 3] = [Self::Mul, Self::Concat, Self::Attn];
}

macro_rules! text_enum {
    ($t:ty, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok($v),)+
                    _ => Err(Error::config(format!("unknown {} {s:?}", stringify!($t)))),
                }
            }
        }
    };
}

text_enum!(BaseKind, BaseKind::Freq => "freq", BaseKind::Rnn => "rnn");
text_enum!(ModulationMode, ModulationMode::Mul => "mul", ModulationMode::Concat => "concat", ModulationMode::Attn => "attn");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub embedding_dim: usize,
    /// Width of the per-user embedding of the recurrent base; 0 disables it.
    pub user_dim: usize,
    /// Recurrent state width; the recurrent `H` is the state followed by
    /// the embedding of the current location.
    pub hidden_dim: usize,
    pub head_hidden: usize,
    /// Weight of the global distribution in the counting head.
    pub global_weight: f64,
    pub base_epochs: usize,
    pub fusion_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            user_dim: 16,
            hidden_dim: 64,
            head_hidden: 64,
            global_weight: 0.1,
            base_epochs: 30,
            fusion_epochs: 20,
            batch_size: 16,
            learning_rate: 3e-3,
        }
    }
}

/// One trajectory of the training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorSequence {
    pub user_id: String,
    pub locations: Vec<u32>,
    /// Intention vector of each travel; may be empty for base training.
    pub intentions: Vec<Vec<f64>>,
}

/// A prefix to rank the next location for.
#[derive(Clone, Copy, Debug)]
pub struct PredictionQuery<'a> {
    pub user_id: &'a str,
    pub prefix: &'a [u32],
    /// Required by modulated predictors, ignored otherwise.
    pub intention: Option<&'a [f64]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Gru {
    wz: Linear,
    wr: Linear,
    wn: Linear,
    uz: ParamId,
    ur: ParamId,
    un: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Encoder {
    Frequency,
    Recurrent {
        embedding: ParamId,
        /// Row 0 stands for users unseen in training.
        users: Option<ParamId>,
        gru: Gru,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Fusion {
    None,
    Mul { lift: Linear },
    Concat,
    Attn { lift: Linear, q: ParamId, k: ParamId, v: ParamId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Head {
    /// `ln(user + w · global + ε)` on the two halves of the input.
    Counting,
    Mlp { hidden: Linear, out: Linear },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layout {
    encoder: Encoder,
    fusion: Fusion,
    head: Head,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Counts {
    user: BTreeMap<String, Vec<f64>>,
    global: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorManifest {
    pub format_version: u32,
    pub base: BaseKind,
    pub mode: Option<ModulationMode>,
    pub city: String,
    pub locations: usize,
    pub intention_dim: Option<usize>,
    pub seed: u64,
    pub config: PredictorConfig,
    pub corpus_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrace {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Base predictor, optionally with an intention fusion stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationPredictor {
    pub manifest: PredictorManifest,
    params: ParamSet,
    layout: Layout,
    counts: Counts,
    #[serde(default)]
    users: BTreeMap<String, usize>,
}

const COUNT_EPS: f64 = 1e-6;

struct Rows {
    /// `(sequence, step)` of each sample; the prefix ends at `step`.
    samples: Vec<(usize, usize)>,
    targets: Vec<usize>,
}

impl LocationPredictor {
    /// Untrained unmodulated base for `city`.
    pub fn new_base(kind: BaseKind, city: &City, config: &PredictorConfig, seed: u64) -> Result<Self> {
        let n = city.len();
        if n < 2 {
            return Err(Error::invalid("a predictor needs at least two locations"));
        }
        if config.batch_size == 0 || !(config.learning_rate > 0.0) {
            return Err(Error::config("batch_size and learning_rate must be positive"));
        }
        let mut rng = crate::derive_rng(seed, &["predictor", "base"]);
        let mut params = ParamSet::new();
        let (encoder, head) = match kind {
            BaseKind::Freq => (Encoder::Frequency, Head::Counting),
            BaseKind::Rnn => {
                let (h, x) = (config.hidden_dim, config.embedding_dim + config.user_dim);
                let embedding = params.add_glorot("embedding", n, config.embedding_dim, &mut rng);
                let gru = Gru {
                    wz: Linear::new(&mut params, "gru.wz", x, h, &mut rng),
                    wr: Linear::new(&mut params, "gru.wr", x, h, &mut rng),
                    wn: Linear::new(&mut params, "gru.wn", x, h, &mut rng),
                    uz: params.add_glorot("gru.uz", h, h, &mut rng),
                    ur: params.add_glorot("gru.ur", h, h, &mut rng),
                    un: params.add_glorot("gru.un", h, h, &mut rng),
                };
                let head = Head::Mlp {
                    hidden: Linear::new(&mut params, "head.hidden", h + config.embedding_dim, config.head_hidden, &mut rng),
                    out: Linear::new(&mut params, "head.out", config.head_hidden, n, &mut rng),
                };
                let encoder = Encoder::Recurrent {
                    embedding,
                    users: None,
                    gru,
                };
                (encoder, head)
            }
        };
        Ok(Self {
            manifest: PredictorManifest {
                format_version: PREDICTOR_VERSION,
                base: kind,
                mode: None,
                city: city.name.clone(),
                locations: n,
                intention_dim: None,
                seed,
                config: config.clone(),
                corpus_hash: None,
            },
            params,
            layout: Layout {
                encoder,
                fusion: Fusion::None,
                head,
            },
            counts: Counts {
                user: BTreeMap::new(),
                global: vec![0.0; n],
            },
            users: BTreeMap::new(),
        })
    }

    /// `D_H`.
    pub fn hidden_dim(&self) -> usize {
        match self.layout.encoder {
            Encoder::Frequency => 2 * self.manifest.locations,
            Encoder::Recurrent { .. } => self.manifest.config.hidden_dim + self.manifest.config.embedding_dim,
        }
    }

    pub fn mode(&self) -> Option<ModulationMode> {
        self.manifest.mode
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Copy of this (unmodulated) base with a fresh fusion stage.
    ///
    /// MUL and ATTN keep the base head as their starting point; CONCAT gets
    /// a new head over `D_H + intention_dim` inputs. The MUL lift starts at
    /// weights 0 and bias 1, so the copy initially ranks exactly like the base.
    pub fn with_mode(&self, mode: ModulationMode, intention_dim: usize) -> Result<Self> {
        if self.manifest.mode.is_some() {
            return Err(Error::invalid("predictor is already modulated"));
        }
        if intention_dim == 0 {
            return Err(Error::invalid("intention vectors must be non-empty"));
        }
        let mut out = self.clone();
        let tag = mode.to_string();
        let mut rng = crate::derive_rng(self.manifest.seed, &["predictor", &tag]);
        let d = self.hidden_dim();
        let p = &mut out.params;
        out.layout.fusion = match mode {
            ModulationMode::Mul => {
                let lift = Linear {
                    weight: p.add_zeros("mul.lift.weight", intention_dim, d),
                    bias: p.add("mul.lift.bias", Matrix::filled(1, d, 1.0)),
                };
                Fusion::Mul { lift }
            }
            ModulationMode::Concat => {
                let cfg = &self.manifest.config;
                out.layout.head = Head::Mlp {
                    hidden: Linear::new(p, "concat.head.hidden", d + intention_dim, cfg.head_hidden, &mut rng),
                    out: Linear::new(p, "concat.head.out", cfg.head_hidden, self.manifest.locations, &mut rng),
                };
                Fusion::Concat
            }
            ModulationMode::Attn => Fusion::Attn {
                lift: Linear::new(p, "attn.lift", intention_dim, d, &mut rng),
                q: p.add_glorot("attn.q", d, d, &mut rng),
                k: p.add_glorot("attn.k", d, d, &mut rng),
                v: p.add_glorot("attn.v", d, d, &mut rng),
            },
        };
        out.manifest.mode = Some(mode);
        out.manifest.intention_dim = Some(intention_dim);
        Ok(out)
    }

    fn check_locations(&self, locations: &[u32]) -> Result<()> {
        match locations.iter().find(|&&l| l as usize >= self.manifest.locations) {
            Some(&l) => Err(Error::UnknownLocation {
                city: self.manifest.city.clone(),
                location: l,
            }),
            None => Ok(()),
        }
    }

    /// Registers the users of `sequences` with the recurrent encoder and
    /// allocates their embeddings. Only the first call has an effect.
    pub fn fit_users(&mut self, sequences: &[PredictorSequence]) {
        let dim = self.manifest.config.user_dim;
        let Encoder::Recurrent { users, .. } = &mut self.layout.encoder else {
            return;
        };
        if users.is_some() || dim == 0 {
            return;
        }
        let ids: std::collections::BTreeSet<&str> = sequences.iter().map(|s| s.user_id.as_str()).collect();
        self.users = ids.into_iter().enumerate().map(|(i, u)| (u.to_string(), i + 1)).collect();
        let mut rng = crate::derive_rng(self.manifest.seed, &["predictor", "users"]);
        *users = Some(self.params.add_glorot("user_embedding", self.users.len() + 1, dim, &mut rng));
    }

    /// Counts visits for the frequency encoder. No-op for other bases.
    pub fn fit_counts(&mut self, sequences: &[PredictorSequence]) -> Result<()> {
        if self.layout.encoder != Encoder::Frequency {
            return Ok(());
        }
        let n = self.manifest.locations;
        let mut counts = Counts {
            user: BTreeMap::new(),
            global: vec![0.0; n],
        };
        for s in sequences {
            self.check_locations(&s.locations)?;
            let user = counts.user.entry(s.user_id.clone()).or_insert_with(|| vec![0.0; n]);
            for &l in &s.locations {
                user[l as usize] += 1.0;
                counts.global[l as usize] += 1.0;
            }
        }
        self.counts = counts;
        Ok(())
    }

    fn frequency_features(&self, user_id: &str, prefix: &[u32]) -> Vec<f64> {
        let n = self.manifest.locations;
        let mut user = self.counts.user.get(user_id).cloned().unwrap_or_else(|| vec![0.0; n]);
        for &l in prefix {
            user[l as usize] += 1.0;
        }
        let normalise = |v: &mut [f64]| {
            let s: f64 = v.iter().sum();
            if s > 0.0 {
                v.iter_mut().for_each(|x| *x /= s);
            }
        };
        normalise(&mut user);
        let mut global = self.counts.global.clone();
        normalise(&mut global);
        user.extend(global);
        user
    }

    /// `H` for every `(sequence, step)` sample; the prefix is `locations[..=step]`.
    fn encode(&self, tape: &mut Tape, seqs: &[(&str, &[u32])], samples: &[(usize, usize)]) -> Var {
        match &self.layout.encoder {
            Encoder::Frequency => {
                let rows: Vec<Vec<f64>> = samples
                    .iter()
                    .map(|&(s, t)| self.frequency_features(seqs[s].0, &seqs[s].1[..=t]))
                    .collect();
                tape.constant(Matrix::from_rows(&rows))
            }
            Encoder::Recurrent { embedding, users, gru } => {
                let p = &self.params;
                let b = seqs.len();
                let user_dim = self.manifest.config.user_dim;
                let user = match users {
                    Some(table) => {
                        let table = tape.param(p, *table);
                        let rows: Vec<usize> =
                            seqs.iter().map(|(u, _)| self.users.get(*u).copied().unwrap_or(0)).collect();
                        Some(tape.gather(table, &rows))
                    }
                    None if user_dim > 0 => Some(tape.constant(Matrix::zeros(b, user_dim))),
                    None => None,
                };
                let steps = samples.iter().map(|&(_, t)| t + 1).max().unwrap_or(1);
                let emb = tape.param(p, *embedding);
                let mut h = tape.constant(Matrix::zeros(b, self.manifest.config.hidden_dim));
                let (uz, ur, un) = (tape.param(p, gru.uz), tape.param(p, gru.ur), tape.param(p, gru.un));
                let mut states = Vec::with_capacity(steps);
                for t in 0..steps {
                    let ids: Vec<usize> = seqs
                        .iter()
                        .map(|(_, locs)| locs[t.min(locs.len() - 1)] as usize)
                        .collect();
                    let loc = tape.gather(emb, &ids);
                    let x = match user {
                        Some(u) => tape.concat_cols(&[loc, u]),
                        None => loc,
                    };
                    let xz = gru.wz.forward(tape, p, x);
                    let hz = tape.matmul(h, uz);
                    let z = tape.add(xz, hz);
                    let z = tape.sigmoid(z);
                    let xr = gru.wr.forward(tape, p, x);
                    let hr = tape.matmul(h, ur);
                    let r = tape.add(xr, hr);
                    let r = tape.sigmoid(r);
                    let xn = gru.wn.forward(tape, p, x);
                    let hn = tape.matmul(h, un);
                    let rn = tape.mul(r, hn);
                    let n = tape.add(xn, rn);
                    let n = tape.tanh(n);
                    let keep = tape.mul(z, h);
                    let one_minus = tape.affine(z, -1.0, 1.0);
                    let fresh = tape.mul(one_minus, n);
                    h = tape.add(fresh, keep);
                    states.push(tape.concat_cols(&[h, loc]));
                }
                let all = tape.concat_rows(&states);
                let index: Vec<usize> = samples.iter().map(|&(s, t)| t * b + s).collect();
                tape.gather(all, &index)
            }
        }
    }

    fn fuse(&self, tape: &mut Tape, h: Var, x: Option<Var>) -> Result<Var> {
        let p = &self.params;
        let need = || Error::invalid("modulated predictor needs an intention vector");
        Ok(match &self.layout.fusion {
            Fusion::None => h,
            Fusion::Mul { lift } => {
                let l = lift.forward(tape, p, x.ok_or_else(need)?);
                tape.mul(h, l)
            }
            Fusion::Concat => tape.concat_cols(&[h, x.ok_or_else(need)?]),
            Fusion::Attn { lift, q, k, v } => {
                let l = lift.forward(tape, p, x.ok_or_else(need)?);
                let (wq, wk, wv) = (tape.param(p, *q), tape.param(p, *k), tape.param(p, *v));
                let query = tape.matmul(h, wq);
                let kl = tape.matmul(l, wk);
                let kh = tape.matmul(h, wk);
                let vl = tape.matmul(l, wv);
                let vh = tape.matmul(h, wv);
                let sl = tape.row_dot(query, kl);
                let sh = tape.row_dot(query, kh);
                let s = tape.concat_cols(&[sl, sh]);
                let s = tape.scale(s, 1.0 / (self.hidden_dim() as f64).sqrt());
                let w = tape.softmax(s);
                let wl = tape.slice_cols(w, 0, 1);
                let wh = tape.slice_cols(w, 1, 1);
                let cl = tape.mul_col(vl, wl);
                let ch = tape.mul_col(vh, wh);
                let ctx = tape.add(cl, ch);
                tape.add(h, ctx)
            }
        })
    }

    fn head(&self, tape: &mut Tape, z: Var) -> Var {
        let p = &self.params;
        match &self.layout.head {
            Head::Counting => {
                let n = self.manifest.locations;
                let u = tape.slice_cols(z, 0, n);
                let g = tape.slice_cols(z, n, n);
                let u = tape.relu(u);
                let g = tape.relu(g);
                let g = tape.scale(g, self.manifest.config.global_weight);
                let s = tape.add(u, g);
                let s = tape.affine(s, 1.0, COUNT_EPS);
                tape.ln(s)
            }
            Head::Mlp { hidden, out } => {
                let a = hidden.forward(tape, p, z);
                let a = tape.tanh(a);
                out.forward(tape, p, a)
            }
        }
    }

    fn logits_on_tape(
        &self,
        tape: &mut Tape,
        seqs: &[(&str, &[u32])],
        samples: &[(usize, usize)],
        intentions: Option<Matrix>,
    ) -> Result<Var> {
        let h = self.encode(tape, seqs, samples);
        let x = intentions.map(|m| tape.constant(m));
        let z = self.fuse(tape, h, x)?;
        Ok(self.head(tape, z))
    }

    fn training_rows(&self, batch: &[&PredictorSequence]) -> Result<Rows> {
        let mut samples = Vec::new();
        let mut targets = Vec::new();
        for (s, seq) in batch.iter().enumerate() {
            self.check_locations(&seq.locations)?;
            if seq.locations.len() < 2 {
                return Err(Error::invalid("training trajectory needs at least two records"));
            }
            if self.manifest.mode.is_some() && seq.intentions.len() != seq.locations.len() - 1 {
                return Err(Error::invalid("one intention vector per travel is required"));
            }
            for t in 0..seq.locations.len() - 1 {
                samples.push((s, t));
                targets.push(seq.locations[t + 1] as usize);
            }
        }
        Ok(Rows { samples, targets })
    }

    fn loss_on_tape(&self, tape: &mut Tape, batch: &[&PredictorSequence]) -> Result<Var> {
        let rows = self.training_rows(batch)?;
        let seqs: Vec<(&str, &[u32])> = batch.iter().map(|s| (s.user_id.as_str(), &s.locations[..])).collect();
        let x = match self.manifest.mode {
            None => None,
            Some(_) => Some(Matrix::from_rows(
                &rows
                    .samples
                    .iter()
                    .map(|&(s, t)| batch[s].intentions[t].clone())
                    .collect::<Vec<_>>(),
            )),
        };
        if let (Some(x), Some(d)) = (&x, self.manifest.intention_dim) {
            if x.cols() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: x.cols(),
                });
            }
        }
        let logits = self.logits_on_tape(tape, &seqs, &rows.samples, x)?;
        Ok(tape.cross_entropy(logits, &rows.targets))
    }

    /// Mean next-location cross-entropy over every step of `batch`.
    pub fn loss(&self, batch: &[&PredictorSequence]) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_on_tape(&mut tape, batch)?;
        Ok(tape.scalar(l))
    }

    pub fn gradients(&self, batch: &[&PredictorSequence]) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let l = self.loss_on_tape(&mut tape, batch)?;
        Ok((tape.scalar(l), tape.backward(l)))
    }

    fn dataset_loss(&self, sequences: &[PredictorSequence]) -> Result<f64> {
        let refs: Vec<&PredictorSequence> = sequences.iter().collect();
        let mut total = 0.0;
        let mut count = 0;
        for chunk in refs.chunks(self.manifest.config.batch_size) {
            total += self.loss(chunk)?;
            count += 1;
        }
        Ok(total / count.max(1) as f64)
    }

    /// Seeded mini-batch training of every parameter for `epochs` epochs.
    ///
    /// The frequency base has no parameters of its own: unmodulated it is
    /// only counted, modulated only its fusion stage and head are trained.
    pub fn train(&mut self, sequences: &[PredictorSequence], epochs: usize) -> Result<PredictorTrace> {
        if sequences.is_empty() {
            return Err(Error::invalid("empty training corpus"));
        }
        self.fit_counts(sequences)?;
        self.fit_users(sequences);
        self.manifest.corpus_hash = Some(crate::content_hash(sequences));
        let initial_loss = self.dataset_loss(sequences)?;
        let mut epoch_losses = Vec::new();
        if !self.params.is_empty() {
            let tag = self.manifest.mode.map_or_else(|| "base".to_string(), |m| m.to_string());
            let mut rng = crate::derive_rng(self.manifest.seed, &["predictor-shuffle", &tag]);
            let mut adam = Adam::new(&self.params, self.manifest.config.learning_rate);
            let mut order: Vec<usize> = (0..sequences.len()).collect();
            for epoch in 0..epochs {
                order.shuffle(&mut rng);
                let refs: Vec<&PredictorSequence> = order.iter().map(|&i| &sequences[i]).collect();
                let mut sum = 0.0;
                let mut count = 0;
                for (b, chunk) in refs.chunks(self.manifest.config.batch_size).enumerate() {
                    let (loss, grads) = self.gradients(chunk)?;
                    if !loss.is_finite() || !grads.all_finite() {
                        return Err(Error::Numerical(format!(
                            "non-finite predictor loss at epoch {epoch}, batch {b}"
                        )));
                    }
                    adam.step(&mut self.params, &grads);
                    sum += loss;
                    count += 1;
                }
                epoch_losses.push(sum / count as f64);
            }
        }
        let final_loss = self.dataset_loss(sequences)?;
        Ok(PredictorTrace {
            initial_loss,
            final_loss,
            epoch_losses,
        })
    }

    /// Rankings for many queries; identical to ranking each alone.
    pub fn predict_batch(&self, queries: &[PredictionQuery<'_>]) -> Result<Vec<PredictionRanking>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(256) {
            let mut seqs = Vec::with_capacity(chunk.len());
            let mut samples = Vec::with_capacity(chunk.len());
            let mut xs = Vec::new();
            for (i, q) in chunk.iter().enumerate() {
                if q.prefix.is_empty() {
                    return Err(Error::invalid("empty prefix"));
                }
                self.check_locations(q.prefix)?;
                seqs.push((q.user_id, q.prefix));
                samples.push((i, q.prefix.len() - 1));
                if let Some(d) = self.manifest.intention_dim {
                    let x = q
                        .intention
                        .ok_or_else(|| Error::invalid("modulated predictor needs an intention vector"))?;
                    if x.len() != d {
                        return Err(Error::Dimension {
                            expected: d,
                            actual: x.len(),
                        });
                    }
                    xs.push(x.to_vec());
                }
            }
            let x = (!xs.is_empty()).then(|| Matrix::from_rows(&xs));
            let mut tape = Tape::new();
            let logits = self.logits_on_tape(&mut tape, &seqs, &samples, x)?;
            let logits = tape.value(logits);
            for (i, q) in chunk.iter().enumerate() {
                out.push(PredictionRanking::from_logits(*q.prefix.last().unwrap(), logits.row(i)));
            }
        }
        Ok(out)
    }

    pub fn predict_ranking(&self, query: PredictionQuery<'_>) -> Result<PredictionRanking> {
        Ok(self.predict_batch(&[query])?.remove(0))
    }

    /// `H` for one prefix.
    pub fn mobility_embedding(&self, user_id: &str, prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::invalid("empty prefix"));
        }
        self.check_locations(prefix)?;
        let mut tape = Tape::new();
        let h = self.encode(&mut tape, &[(user_id, prefix)], &[(0, prefix.len() - 1)]);
        Ok(tape.value(h).row(0).to_vec())
    }

    /// Fusion output `f(H, X̂)` for a given `H`.
    pub fn modulate(&self, h: &[f64], intention: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.hidden_dim() {
            return Err(Error::Dimension {
                expected: self.hidden_dim(),
                actual: h.len(),
            });
        }
        if let Some(d) = self.manifest.intention_dim {
            if intention.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    actual: intention.len(),
                });
            }
        }
        let mut tape = Tape::new();
        let hv = tape.constant(Matrix::row_vector(h.to_vec()));
        let xv = tape.constant(Matrix::row_vector(intention.to_vec()));
        let z = self.fuse(&mut tape, hv, Some(xv))?;
        Ok(tape.value(z).row(0).to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if p.manifest.format_version != PREDICTOR_VERSION {
            return Err(Error::Version {
                expected: PREDICTOR_VERSION,
                found: p.manifest.format_version,
            });
        }
        Ok(p)
    }
}

/// Trains an unmodulated base.
pub fn train_base(
    kind: BaseKind,
    city: &City,
    sequences: &[PredictorSequence],
    config: &PredictorConfig,
    seed: u64,
) -> Result<(LocationPredictor, PredictorTrace)> {
    let mut base = LocationPredictor::new_base(kind, city, config, seed)?;
    let trace = base.train(sequences, config.base_epochs)?;
    Ok((base, trace))
}

/// Adds a fusion stage to a trained base and fine-tunes it with the
/// intention vectors attached to `sequences`.
pub fn train_modulated(
    base: &LocationPredictor,
    mode: ModulationMode,
    sequences: &[PredictorSequence],
) -> Result<(LocationPredictor, PredictorTrace)> {
    let dim = sequences
        .iter()
        .find_map(|s| s.intentions.first())
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("no intention vectors in the training corpus"))?;
    let mut m = base.with_mode(mode, dim)?;
    let epochs = m.manifest.config.fusion_epochs;
    let trace = m.train(sequences, epochs)?;
    Ok((m, trace))
}

/// `H ⊙ lifted`.
pub fn mul_fuse(h: &[f64], lifted: &[f64]) -> Result<Vec<f64>> {
    if h.len() != lifted.len() {
        return Err(Error::Dimension {
            expected: h.len(),
            actual: lifted.len(),
        });
    }
    Ok(h.iter().zip(lifted).map(|(a, b)| a * b).collect())
}

/// `[H, X̂]`.
pub fn concat_fuse(h: &[f64], intention: &[f64]) -> Vec<f64> {
    h.iter().chain(intention).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajstore::{Location, LocationId, RoadCounts};

    fn city(n: usize) -> City {
        City {
            name: "c".into(),
            locations: (0..n)
                .map(|i| Location {
                    id: LocationId(i as u32),
                    coords: [0.0, 0.0],
                    poi_counts: vec![1, 1],
                    transport_distance: 0.0,
                })
                .collect(),
            road_counts: RoadCounts::zeros(n, 1),
        }
    }

    fn small_config() -> PredictorConfig {
        PredictorConfig {
            embedding_dim: 4,
            user_dim: 3,
            hidden_dim: 5,
            head_hidden: 6,
            batch_size: 8,
            ..PredictorConfig::default()
        }
    }

    fn seq(user: &str, locs: &[u32], dim: usize) -> PredictorSequence {
        PredictorSequence {
            user_id: user.into(),
            locations: locs.to_vec(),
            intentions: locs
                .windows(2)
                .map(|w| (0..dim).map(|j| f64::from(w[1] == w[0]) + 0.1 * j as f64).collect())
                .collect(),
        }
    }

    #[test]
    fn frequency_top_is_only_visited_location() {
        let c = city(4);
        let mut p = LocationPredictor::new_base(BaseKind::Freq, &c, &small_config(), 1).unwrap();
        p.train(&[seq("u", &[2, 2, 2], 1), seq("v", &[1, 3], 1)], 5).unwrap();
        let r = p
            .predict_ranking(PredictionQuery {
                user_id: "u",
                prefix: &[2],
                intention: None,
            })
            .unwrap();
        assert_eq!(r.top(), 2);
        assert!(r.is_immobility_prediction);
        let total: f64 = r.entries.iter().map(|e| e.1).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn frequency_training_is_counting() {
        let c = city(4);
        let data = [seq("u", &[0, 1, 2], 1), seq("u", &[0, 3], 1)];
        let mut a = LocationPredictor::new_base(BaseKind::Freq, &c, &small_config(), 1).unwrap();
        let trace = a.train(&data, 5).unwrap();
        assert!(trace.epoch_losses.is_empty());
        let mut b = LocationPredictor::new_base(BaseKind::Freq, &c, &small_config(), 9).unwrap();
        b.train(&data, 5).unwrap();
        assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn mul_identity_for_both_bases() {
        let c = city(6);
        let data: Vec<PredictorSequence> = (0..6).map(|i| seq("u", &[i, (i + 1) % 6, (i + 3) % 6], 3)).collect();
        for kind in [BaseKind::Freq, BaseKind::Rnn] {
            let mut base = LocationPredictor::new_base(kind, &c, &small_config(), 2).unwrap();
            base.train(&data, 3).unwrap();
            let m = base.with_mode(ModulationMode::Mul, 3).unwrap();
            for prefix in [&[0u32][..], &[1, 2], &[5, 5, 4]] {
                let plain = base
                    .predict_ranking(PredictionQuery { user_id: "u", prefix, intention: None })
                    .unwrap();
                let x = [0.3, -2.0, 7.0];
                let fused = m
                    .predict_ranking(PredictionQuery { user_id: "u", prefix, intention: Some(&x) })
                    .unwrap();
                assert_eq!(plain, fused);
            }
        }
    }

    #[test]
    fn fuse_shapes() {
        assert_eq!(mul_fuse(&[1.0, 2.0, 3.0], &[1.0; 3]).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(mul_fuse(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(concat_fuse(&[1.0, 2.0, 3.0], &[4.0, 5.0]), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(mul_fuse(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = city(5);
        let data = [seq("u", &[0, 1, 1, 3], 2), seq("v", &[4, 2, 0], 2)];
        let batch: Vec<&PredictorSequence> = data.iter().collect();
        let mut base = LocationPredictor::new_base(BaseKind::Rnn, &c, &small_config(), 4).unwrap();
        base.fit_users(&data);
        for mode in [None, Some(ModulationMode::Mul), Some(ModulationMode::Concat), Some(ModulationMode::Attn)] {
            let mut m = match mode {
                None => base.clone(),
                Some(mode) => base.with_mode(mode, 2).unwrap(),
            };
            // Move MUL off its identity start so every path carries gradient.
            for flat in 0..m.params.scalar_count() {
                let x = m.params.scalar(flat);
                m.params.set_scalar(flat, x + 0.01 * ((flat * 7919) % 13) as f64 / 13.0);
            }
            let (_, grads) = m.gradients(&batch).unwrap();
            let n = m.params.scalar_count();
            for flat in (0..n).step_by((n / 40).max(1)) {
                let x = m.params.scalar(flat);
                let h = 1e-6;
                m.params.set_scalar(flat, x + h);
                let up = m.loss(&batch).unwrap();
                m.params.set_scalar(flat, x - h);
                let down = m.loss(&batch).unwrap();
                m.params.set_scalar(flat, x);
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.scalar(&m.params, flat);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "{mode:?} {}: {analytic} vs {numeric}", m.params.name(m.params.locate(flat).0));
            }
        }
    }

    #[test]
    fn concat_learns_intention_signal() {
        // The intention says whether the user stays; otherwise they move to
        // the next location in a fixed cycle.
        let c = city(6);
        let mut rng = crate::derive_rng(0, &["concat-test"]);
        use rand::Rng;
        let make = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut locs = vec![rng.random_range(0..6u32)];
            for _ in 0..7 {
                let last = *locs.last().unwrap();
                locs.push(if rng.random::<f64>() < 0.5 { last } else { (last + 1) % 6 });
            }
            seq("u", &locs, 2)
        };
        let train: Vec<_> = (0..60).map(|_| make(&mut rng)).collect();
        let test: Vec<_> = (0..30).map(|_| make(&mut rng)).collect();
        let config = PredictorConfig {
            base_epochs: 20,
            fusion_epochs: 80,
            learning_rate: 1e-2,
            ..small_config()
        };
        let (base, _) = train_base(BaseKind::Rnn, &c, &train, &config, 3).unwrap();
        let (modulated, trace) = train_modulated(&base, ModulationMode::Concat, &train).unwrap();
        assert!(trace.final_loss <= trace.initial_loss);
        let acc = |p: &LocationPredictor, with_x: bool| {
            let mut hits = 0;
            let mut total = 0;
            for s in &test {
                for t in 1..s.locations.len() {
                    let q = PredictionQuery {
                        user_id: "u",
                        prefix: &s.locations[..t],
                        intention: with_x.then(|| s.intentions[t - 1].as_slice()),
                    };
                    hits += usize::from(p.predict_ranking(q).unwrap().top() == s.locations[t]);
                    total += 1;
                }
            }
            hits as f64 / total as f64
        };
        let (plain, fused) = (acc(&base, false), acc(&modulated, true));
        assert!(fused > plain, "{fused} <= {plain}");
        assert!(fused > 0.9, "{fused}");
    }

    #[test]
    fn unknown_location_rejected() {
        let c = city(3);
        let p = LocationPredictor::new_base(BaseKind::Rnn, &c, &small_config(), 1).unwrap();
        let err = p
            .predict_ranking(PredictionQuery { user_id: "u", prefix: &[7], intention: None })
            .unwrap_err();
        assert!(matches!(err, Error::UnknownLocation { location: 7, .. }));
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = city(4);
        let base = LocationPredictor::new_base(BaseKind::Rnn, &c, &small_config(), 1).unwrap();
        let m = base.with_mode(ModulationMode::Attn, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        m.save(&path).unwrap();
        assert_eq!(LocationPredictor::load(&path).unwrap(), m);
    }
}
