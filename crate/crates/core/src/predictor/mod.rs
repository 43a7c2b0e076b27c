//! Base location predictors and intention modulation.
//!
//! A base turns a trajectory prefix into a mobility embedding `H` and maps
//! it to next-location logits with a head `g`. A modulated predictor first
//! fuses `H` with an intention vector `X̂`:
//!
//! | mode | fusion |
//! | --- | --- |
//! | MUL | `H ⊙ (X̂ W + b)`, starting from `W = 0`, `b = 1` |
//! | CONCAT | `[H, X̂]` into a fresh head |
//! | ATTN | `H` attends over `{lift(X̂), H}`; the result is added to `H` |
//!
//! ```
//! use intentmob::predictor::PredictionRanking;
//!
//! let r = PredictionRanking::from_logits(0, &[3f64.ln(), 0.0]);
//! assert_eq!(r.top(), 0);
//! assert!((r.entries[0].1 - 0.75).abs() < 1e-12);
//! assert!(r.is_immobility_prediction);
//! ```

mod model;
mod ranking;

pub use model::{
    concat_fuse, mul_fuse, train_base, train_modulated, BaseKind, LocationPredictor,
    ModulationMode, PredictionQuery, PredictorConfig, PredictorManifest, PredictorSequence,
    PredictorTrace,
};
pub use ranking::PredictionRanking;
