//! Coupled sampling: the generalized action-stream scheduler, the Parallel,
//! Alternating and Nested strategies, the Noisy/Enhanced/CARD baselines and
//! the call ledger.

mod config;
mod engine;
mod generalized;
mod strategies;
mod trace;

pub use config::{expected_nfe, nested_refresh_steps, CouplingConfig, GuidanceSource, Strategy};
pub(crate) use engine::Engine;
pub use engine::NfeReport;
pub use generalized::{
    alternating_block_stream, parallel_action_stream, run_generalized, ActionKind, SchedulerAction,
};
pub use strategies::{
    predict_class, run_alternating, run_baseline, run_logit_trajectory, run_nested, run_parallel,
    run_strategy, BaselineKind, RunOutput,
};
pub use trace::{Trace, TraceEvent, TraceKind};
