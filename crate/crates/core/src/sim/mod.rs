//! Discrete-event engine, scenario files and workload generation.

mod engine;
mod scenario;
mod workload;

pub use engine::{
    run, AdmissionRecord, Conservation, EventRecord, Mode, RunOptions, RunOutput, SimError, EVENTS_HEADER,
};
pub use scenario::{
    FailureSpec, HelperSpec, Monitoring, PolicySpec, PopulationSpec, Scenario, ScenarioError, ScriptedFailure,
    ServerSpec, SpecWeight, TopologySpec,
};
pub use workload::{failure_schedule, generate_workload, stream_rng, HelperPlan, PeerPlan, Stream, Workload};
