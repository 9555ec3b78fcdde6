//! Energy-efficient TDMA spectrum sharing.
//!
//! Users with minimum discounted-throughput requirements share one channel.
//! Instead of transmitting simultaneously at constant power, they take turns:
//! [`its`] picks the instantaneous rate each user runs at when it transmits,
//! and [`ldf`] decides, slot by slot, who transmits so that every user's
//! discounted average throughput converges to its target exponentially fast.
//! [`baselines`] holds the constant-power and round-robin references,
//! [`dynamics`] handles users arriving and leaving, and [`harness`] runs the
//! seeded Monte-Carlo comparisons.

pub mod baselines;
pub mod checks;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod its;
pub mod ldf;
pub mod model;
pub mod oracle;
pub mod policy;
pub mod quad;
pub mod rng;

pub use error::{Error, ErrorClass, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/rate-selection.md")]
    mod rate_selection {}
    #[doc = include_str!("../../../book/src/scheduling.md")]
    mod scheduling {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
