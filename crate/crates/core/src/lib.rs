//! Tensor-free method-of-moments estimation for conditionally-independent
//! mixture models.
//!
//! The mixing weights and componentwise means are fitted by alternating least
//! squares on a mixed-order cost over the off-diagonal entries of the sample
//! moment tensors ([`als`], [`plus`]); higher componentwise moments and
//! general means follow from a linear solve ([`general`]). No moment tensor is
//! ever formed: every quantity is assembled from the Gram caches in [`esp`].
//! The [`dense`] module builds the tensors explicitly for small problems and
//! serves as the reference implementation in tests.

pub mod als;
pub mod budget;
pub mod dense;
pub mod error;
pub mod esp;
pub mod general;
pub mod gradient;
pub mod linalg;
pub mod metrics;
pub mod partition;
pub mod plus;
pub mod qp;
pub mod zoo;

pub use als::{AlsOptions, DataMatrix, FitResult, Frame, MixtureEstimate, Problem};
pub use error::{MomError, Result};
pub use esp::{GramCache, Hyperparams, NormalEquation};
pub use partition::Partition;
pub use plus::{AaConfig, AlsPlusOptions, WarmupSchedule};

/// Highest moment order supported by the kernels.
pub const MAX_ORDER: usize = 6;
