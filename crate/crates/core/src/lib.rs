//! Time-dependent coupling pulses for two linearly coupled resonators.
//!
//! The crate covers two problems that share one model:
//!
//! * fast, high-fidelity state swaps between the resonators, simulated in a
//!   truncated Fock basis ([`fock`]);
//! * cooling a thermal target below the sideband limit, using the closed
//!   second-moment equations of the damped system ([`covariance`]) and a
//!   quasi-Newton search over piecewise-constant pulses ([`optimizer`]),
//!   compared against steady-state sideband cooling ([`baselines`]).

pub mod baselines;
pub mod covariance;
pub mod error;
pub mod fock;
pub mod linalg;
pub mod model;
pub mod optimizer;

pub use error::{Error, Result};
pub use model::{
    make_params, metrics_from_occupation, pulse_resample, Auxiliary, ControlPulse, CoolingMetrics,
    ModelParams, Segment, PERIOD,
};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
