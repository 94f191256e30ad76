//! Monte Carlo harness: simulated panels, replication runs and metric tables.

pub mod dgp;
pub mod replications;
pub mod table;

pub use dgp::{dgp_generate, DgpConfig, SimulatedPanel};
pub use replications::{run_replications, McConfig, McEstimator, ReplicationOutcome};
pub use table::{McReport, McRow};
