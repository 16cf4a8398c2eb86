//! Decoder-only transformer actor with a reference-routed sparse MoE
//! sublayer, plus auxiliary heads and an MLP critic.
//!
//! Each block is: RMSNorm, grouped-query attention with per-head QK-norm,
//! rotary positions and a sigmoid output gate, residual add; then RMSNorm,
//! a shared expert plus top-k routed SiLU experts, residual add. The router
//! reads only the normalized reference slice of the observation. Auxiliary
//! heads read the residual stream entering the first MoE sublayer.

pub mod checkpoint;
pub mod config;
pub mod gaussian;
mod model;
pub mod normalizer;
pub mod router;

pub use checkpoint::Checkpoint;
pub use config::{count_params, param_specs, InterfaceDims, ModelConfig, ParamCount, ACTION_LOG_STD, VEL_STD};
pub use model::{ActorOutputs, AuxOutputs, ForwardStats, LayerRoute, PolicyModel, SeqInput, MASKED};
pub use normalizer::EmaNormalizer;
pub use router::{select_top_k, RouterDecision};
