//! Federated training driven by the collected datasets.

pub mod curve;
pub mod metrics;
pub mod online;
pub mod task;

pub use curve::{measure_loss_curve, CurvePoint, CurveSettings};
pub use online::{
    admission_threshold, aggregate, local_sgd_round, run_online, ChannelPolicy, OnlineSettings,
    RoundRecord, TrainingTrace,
};
pub use task::{Dataset, SyntheticTask, TaskConfig};
