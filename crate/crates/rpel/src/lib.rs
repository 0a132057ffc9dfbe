pub mod diagnostics;
pub mod error;
pub mod estfun;
pub mod leverage;
pub mod model;
pub mod penalty;
pub mod score;
pub mod sim;
pub mod solver;
pub mod tuning;

pub use error::{Result, RpelError};
pub use estfun::EstimatingContext;
pub use sim::{MethodConfig, MetricSummary, ScenarioSpec};
pub use solver::{ElState, SolverOptions};
pub use tuning::TuningGrid;
