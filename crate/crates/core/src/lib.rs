//! Moving-horizon state estimation from binary threshold sensors.

pub mod blocktri;
pub mod costs;
pub mod estimator;
pub mod experiments;
pub mod io;
pub mod error;
pub mod linsys;
pub mod observability;
pub mod qp;
pub mod rng;
pub mod sensing;
pub mod solvers;
pub mod stability;

pub use costs::{BoxSet, EstimatorConfig, SolverSettings, SwitchingPoint, WindowEstimate, WindowProblem};
pub use error::{Error, Result};
pub use linsys::{LtiModel, NoiseBounds, Trajectory};
pub use sensing::{BinarySensorBank, Level, MeasurementWindow};
