//! Cross-lingual routing analysis and routing-aligned fine-tuning on a toy
//! mixture-of-experts language model.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`model`]: a small decoder-only MoE LM with routing capture, exact
//!   reverse-mode gradients, greedy decoding and perplexity.
//! - [`synth`]: synthetic parallel task corpora in disjoint-vocabulary toy languages.
//! - [`taxonomy`]: four-way correctness labels (cc / ci / ic / ii) by exact match
//!   or a perplexity proxy.
//! - [`routing`]: sequence routing distributions, Jensen–Shannon layer profiles,
//!   middle-layer detection and task-expert selection.
//! - [`align`]: the restricted KL routing-alignment loss, fine-tuning loop,
//!   ablations and routing steering.
//! - [`metrics`]: accuracy, selection rate, Pearson correlation, FLOPs accounting
//!   and divergence reports.
//! - [`pipeline`]: stage orchestration with run-directory manifests.
//!
//! Math is generic over [`Scalar`] (`f32`/`f64`); the aliases below fix `f64`,
//! which is what the pipeline uses.

pub mod align;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod routing;
pub mod scalar;
pub mod synth;
pub mod taxonomy;
pub mod tensor;

pub use error::{Error, Result};
pub use model::ModelConfig;
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Params = model::Parameters<f64>;
pub type Trace = model::RoutingTrace<f64>;
pub type Mat = tensor::Matrix<f64>;
pub type SeqDist = routing::SeqRoutingDist<f64>;
