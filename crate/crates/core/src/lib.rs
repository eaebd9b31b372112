//! Reconstruction of daily maximum temperature surfaces from sparse station
//! networks, and downstream heat-mortality analysis.
//!
//! The crate provides three routes from station or gridded records to a
//! municipality-by-day exposure surface:
//!
//! * [`gqrm`]: Bayesian spatial quantile autoregression fitted per quantile
//!   level, interpolated to a prediction grid with thin plate splines
//!   ([`tps`]) and averaged within municipalities ([`grid`]).
//! * [`ggpm`]: per-year Gaussian process with AR(1) day-to-day evolution and
//!   Matérn-correlated innovations, fitted by maximum a posteriori with a
//!   Laplace approximation.
//! * [`ingest::aggregate_cells`]: area-weighted aggregation of an external
//!   gridded reanalysis product onto municipalities.
//!
//! Downstream, [`heatwave`] turns surfaces into exceedance calendars,
//! [`casecrossover`] builds time-stratified referent sets from mortality
//! records, and [`epi`] fits conditional Poisson dose-response models with a
//! smooth binned temperature effect.
//!
//! Everything is deterministic given a root seed: random draws go through
//! named substreams ([`rng::substream`]) and parallel reductions preserve
//! operand order, so artifacts are byte-stable across thread counts.

pub mod calendar;
pub mod casecrossover;
pub mod epi;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod ggpm;
pub mod gqrm;
pub mod grid;
pub mod heatwave;
pub mod ingest;
pub mod io;
pub mod optim;
pub mod rng;
pub mod spline;
pub mod tps;
pub mod types;

pub use error::CoreError;
