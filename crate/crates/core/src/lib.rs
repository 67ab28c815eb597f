//! Dilated self-attention.
//!
//! Restricted (windowed) self-attention gives each query a high-resolution
//! view of its neighbourhood. A dilation sequence, built by subsampling,
//! mean-pooling or attention-pooling fixed-size chunks of the keys and values,
//! is appended to every window so that distant context stays reachable at a
//! lower frame rate.
//!
//! The crate contains the attention kernels, a forward-only transformer
//! encoder built on them, a multiplication-count cost model with an
//! instrumented cross-check, and a verification harness that compares every
//! fast path against straightforward reference implementations.

pub mod attention;
pub mod complexity;
pub mod dilation;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod reference;
pub mod verify;

pub use attention::{FeedForwardParams, HeadParams, MhaParams, RestrictionWindow};
pub use complexity::{estimate_exact, estimate_paper, CostQuery, CostReport, Preset};
pub use dilation::{DilationConfig, DilationSequences, HeadDilationParams, MeanPoolDivisor, Mechanism};
pub use encoder::{AttentionType, EncoderConfig, EncoderWeights, Precision};
pub use error::{Error, Result, Shape};
pub use numerics::{Matrix, MultiplyLedger};
pub use verify::{run_suite, CheckResult, Suite};
