//! Dense tensors, a reverse-mode tape and the layers of the servo network.

pub mod aggregate;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;

pub use aggregate::{GraphIndex, InterAggregate, IntraAggregate};
pub use fusion::{attention_madds, cluster_cross_attention, concat_fusion, full_cross_attention, Fusion, FusionMode, FusionOutput};
pub use gradcheck::grad_check;
pub use layers::{FeatureAlign, GruCell, Linear, Mlp};
pub use model::{ModelConfig, ServoNet, StepVars, ERROR_SCALE_REF};
pub use params::{Bound, Init, Optimizer, OptimizerKind, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
