//! Closed-loop insulin delivery toolkit: a linear MPC regulating a nonlinear
//! glucose–insulin plant, a cost-based dataset distillation pass that reduces
//! the resulting state→action logs to a minimum-separation subset, and compact
//! neural surrogates trained on either.
//!
//! The crate is organized around the data flow:
//!
//! 1. [`glucose`] — plant dynamics, linearization, discretization, state
//!    estimation, insulin-on-board bookkeeping.
//! 2. [`mpc`] — condensed QP formulation and the controller step.
//! 3. [`qp`] — dense convex QP solvers (active-set production path plus an
//!    independent projected-gradient oracle).
//! 4. [`scenario`] — meal scenarios, closed-loop day simulation, campaigns.
//! 5. [`osd`] — pairwise cost metric, streaming distillation filter backed by
//!    an HNSW index, verification and resolution measurement.
//! 6. [`neural`] — MLP/ResNet surrogates: init, forward, backprop, training,
//!    weight serialization, footprint accounting.
//! 7. [`evaluation`] — error reports, training-regime comparison, footprint
//!    and timing comparison against the online controller.
//!
//! Numeric kernels are generic over the scalar type through [`Real`]; the
//! data pipeline instantiates them at `f64` (see the aliases at the crate
//! root), while serialized deployment weights are `f32`.

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod glucose;
pub mod mpc;
pub mod neural;
pub mod osd;
pub mod qp;
pub mod scenario;

pub use error::{Error, Result};

/// Scalar type for the numeric kernels: `f32` or `f64`.
///
/// `RealField` brings the elementary functions and linear-algebra support,
/// the primitive casts the literal conversions. All are satisfied by the two
/// IEEE float types and nothing else we care about.
pub trait Real:
    nalgebra::RealField + num_traits::FromPrimitive + num_traits::ToPrimitive + Copy + Default
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` literal into the working scalar type.
#[inline]
pub(crate) fn lit<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("literal must be representable")
}

// Concrete aliases used by the data pipeline (datasets and interchange files
// are fixed at 64-bit; deployment weights at 32-bit).
pub type LinearModel64 = mpc::LinearModel<f64>;
pub type MpcParams64 = mpc::MpcParams<f64>;
pub type AugmentedState64 = mpc::AugmentedState<f64>;
pub type QpProblem64 = qp::QpProblem<f64>;
pub type QpSolution64 = qp::QpSolution<f64>;
pub type SubjectParams64 = glucose::SubjectParams<f64>;
pub type PlantState64 = glucose::PlantState<f64>;
pub type NetParams64 = neural::NetParams<f64>;
pub type NetParams32 = neural::NetParams<f32>;
