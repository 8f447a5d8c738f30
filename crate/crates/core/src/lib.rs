//! Reconstruction of isotropic 3D scalar volumes from axially under-sampled
//! scans.
//!
//! The toolkit recovers the missing axial slices of an anisotropic volume in
//! three trainable stages: 2D super-resolution of sagittal and coronal views
//! along the sparse axis ([`pipeline::train_msr`]), fusion of the two
//! super-resolved views into axial slices ([`pipeline::train_fusion`]), and
//! joint refinement of axial slabs ([`pipeline::train_refine`]). Classical
//! linear interpolation and direct 2D/3D CNN baselines are included for
//! comparison, together with a synthetic phantom generator ([`phantom`]) and
//! a quantitative evaluation suite ([`metrics`]).
//!
//! Modules:
//! - [`volgeom`]: volume data model, slicing, slabs, axial down-sampling and
//!   the linear-interpolation baseline
//! - [`ndiff`]: minimal reverse-mode differentiable tensor engine (conv2d/3d,
//!   single-axis pixel shuffle, L1 loss, Adam)
//! - [`nets`]: residual dense network architectures for all stages
//! - [`pipeline`]: stage-wise training and full-volume inference
//! - [`phantom`]: seeded analytic phantoms with per-voxel labels
//! - [`metrics`]: PSNR, SSIM, DICE, percentile Hausdorff distance, reports

pub mod metrics;
pub mod ndiff;
pub mod nets;
pub mod phantom;
pub mod pipeline;
pub mod volgeom;

pub use volgeom::{Axis, SliceRef, Slab, Volume};
