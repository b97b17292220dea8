//! Neural primitives: differentiable volumetric ops plus frozen-encoder kernels.

mod conv;
mod frozen;
mod init;
mod interp;
mod norm;

pub use conv::{conv3d, conv_transpose3d, ConvSpec};
pub use frozen::{frozen_kernel, gelu, layernorm_row, matmul_plain, softmax_row, FrozenKernel};
pub use init::Initializer;
pub use interp::{interp_trilinear, resample_trilinear};
pub use norm::{instance_norm3d, INSTANCE_NORM_EPS};
