//! Codebook-based feature alignment for open-set verification.
//!
//! A learned set of representative vectors (the codebook) is placed between a
//! feature extractor and its classifier head. Every embedding is assigned to
//! its nearest codeword and blended with it:
//!
//! ```text
//! k*  = argmin_k ||z - p_k||²
//! ẑ   = w_ori · z + w_map · p_{k*}
//! ```
//!
//! The same operator is applied to enrollment and query vectors, so genuine
//! pairs that share a Voronoi cell contract by `(1 - w_map)` while pairs in
//! different cells keep most of their separation.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the experiment runner live in the `palmbridge` crate.
//!
//! Module map:
//! - [`features`]: synthetic identity worlds, domain shifts and evaluation splits
//! - [`backbone`]: affine feature extractor with a softmax head
//! - [`bridge`]: codebook, nearest-vector assignment and blending
//! - [`losses`]: consistency and orthogonality objectives with analytic gradients
//! - [`optim`]: bias-corrected Adam
//! - [`trainer`]: joint, naive and plug-and-play model construction
//! - [`verify`]: enrollment, scoring, EER / ROC / rank-1 / GI histograms
//! - [`diagnostics`]: assignment consistency, collisions, contraction, utilization

#![no_std]

extern crate alloc;

pub mod backbone;
pub mod bridge;
pub mod diagnostics;
mod error;
pub mod features;
pub mod linalg;
pub mod losses;
pub mod optim;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

pub use backbone::BackboneParams;
pub use bridge::{AssignmentResult, BlendingCoefficients, Codebook};
pub use features::{DomainShift, OpenSetSplit, Protocol, RawObservation, SyntheticWorld, WorldConfig};
pub use linalg::Matrix;
pub use losses::{LossReport, LossWeights};
pub use optim::{AdamConfig, AdamState};
pub use trainer::{ModelMode, TrainConfig, TrainedModel};
pub use verify::{EerResult, ScoreKind, ScoreSet};
