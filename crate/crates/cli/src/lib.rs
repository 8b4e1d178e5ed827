//! Library surface of the command-line workflow: run configuration,
//! orchestration with resumable stages, the results ledger, and report
//! emission. The `dra` binary is a thin dispatcher over these.

pub mod config;
pub mod ledger;
pub mod pipeline;
pub mod report;

pub use config::{Arm, RunConfig};
pub use ledger::{Ledger, LedgerRow};
pub use pipeline::{Pipeline, StageOutcome};
pub use report::{compare_to_reference, emit_report};
