//! A small reverse-mode autodiff engine with the layers the separation model
//! needs: convolution, batch normalization, ReLU, fully-connected, global
//! average pooling, MSE and plain SGD.

pub mod checkpoint;
mod direct;
mod gradcheck;
mod layers;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use layers::{BatchNorm, Conv2d, Linear, Mode};
pub use optim::sgd_step;
pub use tape::{same_padding, ConvGeom, Tape, Var};
pub use tensor::{gemm, join_name, Parameterized, Scalar, Tensor};
