//! Neural building blocks with hand-written forward and backward passes.

pub mod adam;
pub mod cell;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod model;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, OptimState};
pub use cell::{CellKind, RecurrentLayer, RecurrentStack};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use loss::{loss_cls, loss_cls_grad, loss_reg, loss_reg_grad, RegSeries, RegWeights};
pub use model::{
    argmax, prelu, regime_input, Checkpoint, FeatureScaler, HybridModel, KinFrame, KinematicNet, ModelConfig,
    ModelKind, RegimeNet,
};
pub use params::Params;
