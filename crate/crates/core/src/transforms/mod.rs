//! Deterministic signal transforms shared by the learned modules.

mod hadamard;
mod minmax;
mod pyramid;
mod resample;

pub use hadamard::{hadamard_block_transform, satd, satd_with_block, SATD_BLOCK};
pub(crate) use hadamard::satd_plane;
pub use minmax::{minmax_denormalize, minmax_normalize, NormalizationSideInfo};
pub use pyramid::{pyramid_build, pyramid_collapse, Pyramid};
pub use resample::{downsample2x_bilinear, resize_bicubic, upsample2x_bilinear};
pub(crate) use resample::{upsample2x_plane, upsample2x_plane_adjoint};
