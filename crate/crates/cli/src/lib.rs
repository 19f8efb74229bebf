//! Config-driven experiment runner: synthetic data generation, oracle checks,
//! ERM/IRM training runs and checkpoint evaluation.

pub mod config;
pub mod data;
pub mod run;
pub mod synth;

use invarcast_core::invariance::InvarianceError;
use invarcast_core::models::ModelError;
use invarcast_core::semgen::SemError;
use invarcast_core::training::TrainError;

pub use config::{load_config, DataKind, ExperimentConfig, Overrides, RealData, CONFIG_VERSION};
pub use run::{eval, run, RunOutput, SummaryRow};
pub use synth::{oracle_check, synth_gen, OracleOptions};

/// A rejected config or argument; maps to exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Invalid(pub String);

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// 1 for validation failures anywhere in the chain, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let invalid = err.chain().any(|e| {
        e.is::<Invalid>()
            || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::Config(_)))
            || matches!(e.downcast_ref::<ModelError>(), Some(ModelError::Config(_)))
            || matches!(e.downcast_ref::<InvarianceError>(), Some(InvarianceError::Config(_)))
            || matches!(
                e.downcast_ref::<SemError>(),
                Some(SemError::InvalidConfig(_) | SemError::DuplicateEnv(_) | SemError::EmptySuite | SemError::UnknownPreset(_) | SemError::WrongMode(_))
            )
    });
    if invalid {
        EXIT_INVALID
    } else {
        EXIT_RUNTIME
    }
}
