//! File formats and run configuration.

pub mod config;
pub mod design;
pub mod volume;

pub use config::{parse_toml, ModelConfig, Paths, PpmConfig, PriorConfig, RunConfig};
pub use design::{parse_design, read_design, write_design, Design};
pub use volume::{read_volume, write_volume, DataType, Geometry, Volume};
