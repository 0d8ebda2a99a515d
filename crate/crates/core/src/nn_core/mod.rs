//! Small dense networks with hand-written backprop, the losses the trainers
//! need, and plain SGD.

mod loss;
mod network;
mod params;
mod tensor;

pub use loss::{
    argmax, batch_accuracy, cross_entropy, detection_loss, log_softmax, negative_entropy,
    softmax, DetectionLoss,
};
pub use network::{init_network, Activation, ForwardCache, GradientBundle, Network, NetworkSpec};
pub use params::{sgd_step, ParamArray, ParameterSet};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}
