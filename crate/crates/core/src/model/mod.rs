//! Minimal decoder-only mixture-of-experts language model.

mod backward;
mod checkpoint;
mod config;
mod decode;
mod forward;
mod loss;
mod params;
mod trace;

pub use backward::backward;
pub use checkpoint::{load_checkpoint, save_checkpoint, ArrayRecord, Checkpoint};
pub use config::ModelConfig;
pub(crate) use decode::decode_with_bias;
pub use decode::{greedy_decode, Decoded};
pub use forward::{forward, forward_biased, forward_cached, ForwardCache, RouterBias};
pub use loss::{cross_entropy, cross_entropy_with_grad, next_token_targets, sequence_ppl};
pub use params::{is_adapter_array, Expert, ExpertAdapter, Layer, Parameters};
pub use trace::{RoutingTrace, TraceRecord};
