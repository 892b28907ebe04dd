//! Layer forward/backward kernels.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu, relu_backward};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormState, Mode};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvParams, ConvStrategy};
pub use gradcheck::{check_model, check_op, grad_check, GradCheckReport, ModelCheck};
pub use linear::{linear, linear_backward};
pub use loss::softmax_cross_entropy;
pub use pool::{global_avg_pool, max_pool, pool, PoolKind};
