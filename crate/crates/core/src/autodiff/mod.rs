//! Dense reverse-mode differentiation over `f64` matrices, the layers used by
//! the models, and Adam.

mod layers;
mod optim;
mod tape;
mod tensor;

pub use layers::{
    batchnorm_forward, conv1d_features, dense_forward, dropout, gcn_layer_forward, lstm_step, lstm_unroll, Activation,
    BatchNormState, LstmParams, Mode, BN_EPS, BN_MOMENTUM,
};
pub use optim::{AdamConfig, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
