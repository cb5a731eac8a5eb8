//! Scenario runner and driving metrics: collision rate, direction similarity,
//! timesteps survived and distance to the next waypoint.

mod agent;
mod metrics;
mod report;

use thiserror::Error;

use bevdrive::policy::PolicyError;
use bevdrive::simworld::SimError;

pub use agent::{Agent, ConstantAgent, EvalAgent, PolicyAgent};
pub use metrics::{
    aggregate, evaluate, roll_out, run_episode, similarity_metric, EpisodeResult, MapId, MetricRecord, ScenarioSpec,
    DEFAULT_EPISODES,
};
pub use report::{
    compare_agents, read_csv, reference_points, write_csv, AblationReport, CongestionComparison, MetricDeltas, CSV_HEADER,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("agent `{0}` does not appear in the results")]
    MissingAgent(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}
