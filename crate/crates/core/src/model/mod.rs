pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;
pub mod ssm;
pub mod step;

pub use config::{Aggregation, Heads, ModelConfig};
pub use forward::{forward_frame, BevMaps};
pub use params::{param_shapes, ParamStore, ParamVars};
