//! Safe data-driven controller tuning by minimizing the worst-case regret
//! relative to a baseline controller over an identified FIR uncertainty set.
//!
//! Pipeline: [`lti`] simulation → [`sysid`] FIR identification and
//! confidence ellipsoid → [`scenario`] sampling → [`synthesis`] surrogate
//! criterion and regret program → [`solver`] → [`evaluation`] on the true
//! system. [`harness`] wires the stages into reproducible experiments.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod lti;
pub mod plot;
pub mod rng;
pub mod scenario;
pub mod solver;
pub mod synthesis;
pub mod sysid;

pub use error::{Error, Result};
