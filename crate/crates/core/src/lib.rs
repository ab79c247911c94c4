//! Calibrate a patient-level generative model of (baseline covariates,
//! time-to-event outcome) pairs to published aggregate statistics.
//!
//! Calibration runs in two stages. The first reweights baseline draws by
//! entropy balancing ([`balance`]). The second tilts the conditional outcome
//! kernel with a particle Metropolis-Hastings sampler whose multipliers adapt
//! by Robbins-Monro steps ([`sampler`]). Readouts come from weighted survival
//! estimators ([`survival`]). Uncertainty comes from bootstrapped pseudo
//! patient data ([`reconstruct`], [`pipeline`]).

// Negated comparisons reject NaN; index loops follow the formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod balance;
pub mod constraints;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod reconstruct;
pub mod rng;
pub mod sampler;
pub mod survival;

pub use balance::{Cohort, DualState};
pub use constraints::{ConstraintSpec, EligibilitySpec, Mode, Predicate, StatisticFn};
pub use model::{BaselineRecord, CovariateSchema, GenerativeModel, Outcome, Value};
