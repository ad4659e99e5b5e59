//! Differentiable core: autodiff tape, layers, parameter storage, the
//! Adam optimizer, checkpoints, and the SSL trunk.

pub mod adam;
pub mod checkpoint;
pub mod init;
pub mod layers;
pub mod model;
pub mod params;
pub mod tape;

pub use adam::{Adam, GroupSettings};
pub use layers::{aggregate_neighbors, bilinear_score, mean_vars};
pub use model::{AggregationMode, ContextForward, EncoderMode, ModelDims, SslModel};
pub use params::{ParamGroup, ParamStore, VarMap};
pub use tape::{ensure_finite, Gradients, Tape, Var};
