//! Reproducible experiment harness behind the command-line tool.

pub mod ablate;
pub mod bench;
pub mod config;
pub mod metrics;
pub mod sample;
pub mod train;
pub mod verify;

pub use ablate::{cmd_ablate, AblationRow, AblationTable};
pub use bench::{cmd_benchmark, BenchReport, BenchRequest, BenchRow};
pub use config::{RunConfig, TrainMode};
pub use metrics::{MetricLog, MetricRow};
pub use sample::{cmd_sample, SampleReport, SampleRequest};
pub use train::{
    cmd_train, load_flow, load_student, load_teacher, Evaluation, Learner, TrainOutcome,
};
pub use verify::{cmd_verify, Check, Suite, VerifyReport};
