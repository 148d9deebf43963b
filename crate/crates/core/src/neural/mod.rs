//! Coordinate neural-field solver.

pub mod adamw;
pub mod encoding;
pub mod field;
pub mod mlp;
pub mod solver;

pub use adamw::{adamw_step, cosine_lr, AdamConfig, AdamState};
pub use encoding::{anneal_weight, pixel_coords, EncoderConfig};
pub use field::{sigmoid, softplus, FieldOutput, HeadConfig, NeuralField};
pub use mlp::{Mlp, MlpArch};
pub use solver::{run_netmy, NetmyConfig, StageSpec, TrainingSchedule};
