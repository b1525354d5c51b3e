//! Compositional zero-shot learning with mutually balanced state/object
//! components.
//!
//! The crate trains three cosine-similarity embedding heads (state, object,
//! composition) over precomputed visual features, re-weights their
//! cross-entropy objectives by how confidently the *other* component is
//! matched, and blends component scores into composition predictions at
//! inference time with a per-sample confidence ratio. Evaluation follows the
//! generalized CZSL calibration-bias protocol (seen/unseen accuracy sweep,
//! AUC, best harmonic mean).
//!
//! Module map:
//! - [`space`]: label universe and the seen/membership masks.
//! - [`numerics`]: dense tensors, hand-written backward passes, Adam,
//!   finite-difference gradient checks.
//! - [`model`]: embedding heads, label embedders, score computation.
//! - [`loss`]: re-weighted component/composition objectives and baselines.
//! - [`infer`]: composition scoring rules.
//! - [`metrics`]: bias sweep, AUC, harmonic mean, component accuracy.
//! - [`data`]: bundle file formats, synthetic generator, checkpoints.
//! - [`train`]: the optimisation loop with validation model selection.
//! - [`cli`]: run configuration, profiles and the command implementations.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod space;
pub mod train;

pub use error::{Error, Result};
pub use space::{CompositionSpace, Pair, PairId};
