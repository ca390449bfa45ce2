//! Low-rank matrix factorization with mixture of exponential power noise.

pub mod alm;
pub mod bench;
pub mod data;
pub mod em;
pub mod ep;
pub mod error;
pub mod mixture;
pub mod mrf;
pub mod select;
pub mod special;

pub use data::{FactorPair, ObservedMatrix};
pub use em::{fit_pmoep, objective_monotone_check, EmConfig, EmResult};
pub use ep::{ep_abs_moment, ep_log_pdf, ep_sample, EpParams, EpSampler};
pub use error::{Error, Result};
pub use mixture::{EpComponent, MoepModel, PenaltyConfig, PenaltyScale, Responsibilities};
pub use mrf::{fit_pmoep_mrf, GridShape, MrfConfig};
