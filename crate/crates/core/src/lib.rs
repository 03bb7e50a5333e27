//! Locating and certifying one-dimensional normally attracting invariant
//! manifolds by trajectory-based optimization.
//!
//! The numerical core is generic over the scalar type (`f32` or `f64`
//! through [`scalar::Real`]); the aliases below fix it to `f64`.

pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod lyapunov;
pub mod models;
pub mod objective;
pub mod ode;
pub mod optimizer;
pub mod scalar;

pub use error::{Error, Result};
pub use flow::{FailureReason, Method, Tolerances};
pub use objective::{ObjectiveSpec, F_T};
pub use scalar::Real;

pub type Model = models::ModelSpec<f64>;
pub type Metric = geometry::MetricField<f64>;
pub type Frame = flow::PropagatedFrame<f64>;
pub type Propagation = flow::Propagation<f64>;
pub type Curve = diagnostics::CandidateCurve<f64>;
pub type LevelSet = optimizer::LevelSetSpec<f64>;
pub type Reduced = optimizer::Embedding<f64>;
pub type Trajectory = optimizer::EmittedTrajectory<f64>;
