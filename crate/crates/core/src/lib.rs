//! Next-location prediction under disaster-induced mobility shift.
//!
//! Trajectories are lifted into a city-independent *intention* space, the
//! next intention is predicted by a sequence model aligned with a language
//! embedding space, refined against retrieved reference trajectories and a
//! disaster-level prompt, and finally fused into a base location predictor.
//!
//! | module | role |
//! | --- | --- |
//! | [`trajstore`] | world model, synthetic corpora, corpus files |
//! | [`intention`] | travel features, transfer component analysis, clustering |
//! | [`seqmodel`] | intention translator/predictor and contrastive alignment |
//! | [`retrieval`] | dynamic time warping and the reference index |
//! | [`refiner`] | prompt assembly, answer parsing, refinement backends |
//! | [`predictor`] | base predictors and intention modulation |
//! | [`harness`] | metrics, pipeline orchestration, ablations, reports |

pub mod error;
pub mod harness;
pub mod intention;
pub mod nn;
pub mod predictor;
pub mod refiner;
pub mod retrieval;
pub mod seqmodel;
pub mod trajstore;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(&bytes))
}

/// Independent RNG stream for `(seed, tags…)`.
pub(crate) fn derive_rng(seed: u64, tags: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
