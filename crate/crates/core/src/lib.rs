//! Numerical toolkit for operator-valued free probability over `B = M_n(C)`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convolution;
pub mod error;
pub mod killer;
pub mod measures;
pub mod moments;
pub mod numerics;
pub mod ovdist;
pub mod quadrature;
pub mod transforms;

pub use convolution::ConvolutionTask;
pub use error::{Error, Result};
pub use killer::KillerF;
pub use measures::{ScalarMeasure, Tightness, TruncationResult};
pub use moments::{IndependenceMode, Letter, ResolventWord};
pub use numerics::{c64, ComplexMatrix, HalfPlaneMargin};
pub use ovdist::{Backend, MCEstimate, MatrixModelSpec, McOptions, OVDistribution};
pub use transforms::{BasePoint, CertifiedBall, OmegaPoint};
