//! Fourier neural operators for 1-d PDE parameter-to-solution maps, five
//! uncertainty quantification methods on top of them, a probabilistic
//! metric suite for out-of-domain shifts, and a closed-form
//! conservation-constrained correction of Gaussian predictive fields.

pub mod constraint;
pub mod error;
pub mod fno;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod pde_suite;
pub mod trainer;
pub mod uq;

pub use error::{Error, Result};
pub use numerics::{ComplexTensor, Tensor};
