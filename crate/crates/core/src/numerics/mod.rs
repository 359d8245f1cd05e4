//! Dense `f64` tensors, a reverse-mode tape and the layer and optimizer
//! primitives the rest of the crate composes.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod layers;
mod optim;
mod tensor;

pub use graph::{BnMode, Graph, OpStats, Var};
pub use kernels::{ConvGeometry, Window};
pub use layers::{
    batchnorm_forward, conv2d_forward, BatchNormParams, Bindings, Conv2dParams,
    DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM,
};
pub use optim::{sgd_step, OptimizerState, Sgd};
pub use tensor::{Shape4, Tensor4};

/// Plain-tensor ReLU.
pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| if v < 0.0 { 0.0 } else { v })
}

/// Plain-tensor average pooling.
pub fn avg_pool2d(x: &Tensor4, kernel: (usize, usize), stride: (usize, usize)) -> crate::Result<Tensor4> {
    kernels::avg_pool2d(
        x,
        Window {
            kh: kernel.0,
            kw: kernel.1,
            sh: stride.0,
            sw: stride.1,
        },
    )
}

/// Plain-tensor softmax over the channel axis.
pub fn softmax_over_channels(x: &Tensor4) -> Tensor4 {
    kernels::softmax_channels(x)
}
