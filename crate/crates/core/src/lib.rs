//! Warehouse multi-agent task allocation with self-supervised latent-message
//! representation learning.
//!
//! The crate is organized in layers:
//!
//! * numeric substrate — [`tensor`], [`graph`] (reverse-mode differentiation
//!   over a small closed operator set), [`optim`], [`rng`];
//! * simulation — [`env`] (grid warehouse Markov game) and [`buffer`]
//!   (trajectory storage and newline-delimited JSON export);
//! * representation stack — [`encoder`] (shared encoder, message head,
//!   task attention, EMA target) and [`ssl`] (contrastive, predictive,
//!   prototype and invariance objectives with queue/EMA stabilization);
//! * training — [`trainer`] (self-supervised pretraining and PPO
//!   fine-tuning with a curriculum-scheduled auxiliary term);
//! * evaluation — [`eval`] (retrieval, temporal, clustering, probe and
//!   representation-similarity metrics plus throughput KPIs);
//! * persistence — [`config`], [`checkpoint`], [`report`].
//!
//! All numeric code is generic over [`scalar::Scalar`] (f32 or f64); the
//! aliases below pin the default f64 pipeline.

pub mod buffer;
pub mod encoder;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar precision for the full pipeline.
pub type Real = f64;

pub type Tensor = tensor::Tensor<Real>;
pub type Tape = graph::Tape<Real>;
pub type Var = graph::Var<Real>;
pub type Optimizer = optim::Optimizer<Real>;
pub type EncoderParams = encoder::EncoderParams<Real>;
pub type EmaTarget = encoder::EmaTarget<Real>;
pub type WarehouseEnv = env::WarehouseEnv<Real>;
pub type TrajectoryBuffer = buffer::TrajectoryBuffer<Real>;
pub type MemoryQueue = ssl::MemoryQueue<Real>;
pub type PrototypeBank = ssl::PrototypeBank<Real>;
