pub mod eval;
pub mod export;
pub mod losses;
pub mod metrics;
pub mod trainer;

pub use eval::{evaluate, EvalReport};
pub use metrics::DetectionReport;
pub use trainer::{EpochLog, RunFiles, SegLoss, TrainConfig, TrainOutcome, Trainer};
