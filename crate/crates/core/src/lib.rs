//! Dense-to-MoE reconstruction by diversity-aware pruning.
//!
//! A small decoder-only language model is trained on several synthetic
//! domains, pruned once per domain to measure which domains favour the same
//! channels, and the domains are clustered by that affinity. Each cluster
//! prunes its own copy of the feed-forward blocks, the copies become the
//! experts of a mixture-of-experts model, and a router is trained on top
//! before sparse fine-tuning with low-rank adapters.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common concrete types.

pub mod affinity;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod model;
pub mod moe;
pub mod params;
pub mod pipeline;
pub mod prune;
pub mod retrain;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{DiveError, Result};
pub use params::ParamStore;
pub use rng::DetRng;
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type DenseModel32 = model::DenseModel<f32>;
pub type DenseModel64 = model::DenseModel<f64>;
pub type MoeModel32 = moe::MoeModel<f32>;
pub type MoeModel64 = moe::MoeModel<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
