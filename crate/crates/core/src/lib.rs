//! Safety-gated meal plan engine for human-in-the-loop automated insulin
//! delivery.
//!
//! The crate recovers personalized insulin-dynamics coefficients from IOB
//! traces with an LTC encoder and a simulating decoder, builds meal plans
//! (boluses and set-point changes), and accepts or rejects each plan by
//! forward simulation against a signal temporal logic safety criterion.

pub mod dynamics;
pub mod estimator;
pub mod llm;
pub mod planner;
pub mod provenance;
pub mod safety;
pub mod stl;
