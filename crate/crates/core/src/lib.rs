//! Feature-aware ranking with exposure-fairness diagnostics.
//!
//! The crate covers the full pipeline:
//!
//! 1. [`ingest`] — parse interaction logs and phrase-level sentiment
//!    quadruples, filter sparse users/items, split chronologically, and
//!    assign popularity groups. [`synth`] generates desk-scale datasets
//!    with a planted popularity bias for verification.
//! 2. [`matrices`] — build the user-feature attention matrix `A` and the
//!    item-feature quality matrix `B`, with column erasure and additive
//!    per-feature interventions.
//! 3. [`ranker`] / [`train`] — a small feed-forward ranking model over
//!    `(A_u, B_v)` pairs with manual backprop, top-K slate generation,
//!    and F1/NDCG evaluation.
//! 4. [`fairness`] — item-exposure counting, demographic-parity and
//!    exact-K disparity, a differentiable relaxed disparity, KL@K, and
//!    long-tail rate.
//! 5. [`cef`] — per-feature counterfactual interventions optimized with
//!    Adam against the relaxed disparity, scored by validity, proximity,
//!    and an explainability score.
//! 6. [`baselines`] — random, popularity, column-average, and Shapley
//!    feature rankings for comparison.
//! 7. [`erasure`] — erasure-based fairness-utility trade-off evaluation.

pub mod adam;
pub mod baselines;
pub mod cef;
pub mod checkpoint;
pub mod erasure;
pub mod error;
pub mod fairness;
pub mod ingest;
pub mod matrices;
pub mod ranker;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
