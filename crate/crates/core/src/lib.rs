//! Simultaneous bone surface and acoustic shadow segmentation for B-mode
//! ultrasound.
//!
//! The crate is organised around the processing chain:
//!
//! - [`phase_filters`]: local-phase and shadow-enhancement filters that turn a
//!   B-mode frame into the 4-channel network input.
//! - [`phantom`]: a seeded generator of synthetic frames with exactly
//!   consistent surface/shadow masks.
//! - [`network`]: the shared conv+transformer encoder, the two task decoders
//!   and the cross-task feature transfer block.
//! - [`losses`]: BCE, the surface/shadow mappings, the task correspondence
//!   consistency loss and the dice metric.
//! - [`trainer`]: two-phase training, subject-wise splits, k-fold evaluation,
//!   ablations, the cascaded baseline and inference.

pub mod error;
pub mod io;
pub mod losses;
pub mod network;
pub mod phantom;
pub mod phase_filters;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{LossBreakdown, MappingParams};
pub use network::{NetworkConfig, PredictionPair, SsNet};
pub use phantom::{PhantomSpec, Sample};
pub use phase_filters::{FilterParams, FilterStack, UltrasoundFrame};
pub use trainer::{Checkpoint, EvalReport, TrainConfig};

/// Mask type shared by the phantom, metric and inference code: one byte per
/// pixel, 0 or 1.
pub type Mask = ndarray::Array2<u8>;
