//! Federated learning simulator with Gaussian generative personalization.
//!
//! A shared generator maps raw inputs to a representation space modeled as a
//! Gaussian mixture. Phase 1 trains the generator federatedly together with a
//! navigator (class means and biases under unit covariance) and a covariance
//! bank; Phase 2 fits a per-client fusion head that blends those global
//! statistics with local class prototypes, then refines class biases with
//! L-BFGS.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod experiment;
pub mod fedsim;
pub mod model;
pub mod numcore;
pub mod objectives;
pub mod personalize;
pub mod selftest;
