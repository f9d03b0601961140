//! Discrete-event simulation of balance transfer and bailout on a credit
//! network, with adversary injection, audit and per-phase metrics.

pub mod adversary;
pub mod config;
pub mod metrics;
pub mod scenario;
pub mod sched;

pub use adversary::{
    inject_adversary, run_audit, AdversarySpec, AuditReport, Behavior, SuspectSegment,
};
pub use config::{ConfigError, SimConfig};
pub use metrics::MetricsRecord;
pub use scenario::{run_scenario, RunOutput, Scenario, SimError};
pub use sched::{Event, EventKind, ScheduleError, Scheduler};
