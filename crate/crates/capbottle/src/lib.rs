//! Synthetic two-domain cap-on-bottle benchmark.
//!
//! Two rendered depth-image domains (a clean "simulation" and a perturbed
//! "sensor") feed a small convolutional distance-to-goal regressor trained
//! under six transfer regimes, evaluated both by held-out L1 test loss and by
//! a closed-loop cap-on-bottle controller.

pub mod config;
pub mod control;
pub mod dataset;
pub mod depthscene;
pub mod losses;
pub mod net;
pub mod report;
pub mod seed;
pub mod train;
