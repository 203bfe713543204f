//! Energy-aware routing between a lite and a heavy image encoder, with
//! tabular risk priors, late fusion heads, energy accounting and subgroup
//! fairness metrics.
//!
//! The usual flow is [`harness::RunConfig`] -> [`harness::run_cv`] ->
//! [`harness::write_run`], or [`sweep::run_sweep`] for a threshold grid.

pub mod energy;
pub mod fmt;
pub mod fusion;
pub mod harness;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod risk;
pub mod routing;
pub mod sweep;

pub use harness::{run_cv, HarnessError, RunConfig};
pub use model::{ClassTaxonomy, PredictiveDistribution, RouteDecision, RoutingConfig, Sample};
