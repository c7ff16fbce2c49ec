//! Forward-simulation safety gate, the deployment pipeline and the paired
//! scenario suite.

mod gate;
mod pipeline;
mod suite;

use thiserror::Error;

pub use gate::{
    forward_simulate, gate, with_fresh_insulin, GateOutcome, SafetyCriterion, Verdict,
    VirtualPatient,
};
pub use pipeline::{
    run_pipeline, with_insulin_on_board, CoefficientSource, PipelineError, PipelineProvenance,
    PipelineStep, PlanDecision, PlanMapper, PlanRequest, TracePredictor,
};
pub use suite::{
    draw_scenarios, run_scenario, run_scenario_suite, ModeSummary, Scenario, ScenarioFailure,
    ScenarioResult, SuiteConfig, SuiteReport, SUITE_CSV_HEADER,
};

use crate::dynamics::DynamicsError;
use crate::planner::PlannerError;
use crate::stl::StlError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SafetyError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Stl(#[from] StlError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
