//! Occupancy-field rendering mathematics.
//!
//! The crate models a radiance field whose opacity is predicted directly as
//! an alpha value in `[0, 1]` and reinterpreted as occupancy. On top of that
//! representation it provides:
//!
//! - [`field`]: the field abstraction, analytic ground-truth shapes and a
//!   latent-conditioned FiLM-SIREN network,
//! - [`autodiff`]: a small reverse-mode tape with fused dense-layer nodes,
//! - [`sampling`]: cameras, rays, stratified / shrinking-window / hierarchical
//!   depth samples and the shrink schedule,
//! - [`rootfind`]: first-crossing bin scan with secant refinement,
//! - [`render`]: density compositing, alpha compositing and surface-only
//!   rendering, plus normal maps,
//! - [`loss`]: GAN, normal, opacity and reconstruction terms,
//! - [`metrics`]: weighted depth variance, PSNR and the surface/cumulative
//!   equivalence report,
//! - [`extract`]: marching-cubes iso-surface extraction and OBJ output,
//! - [`train`]: the photometric fitting objective, its gradient and
//!   finite-difference checks.

pub mod autodiff;
pub mod error;
pub mod extract;
pub mod field;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod render;
pub mod rootfind;
pub mod sampling;
pub mod train;

pub use error::{Error, Result};

/// Scene-space 3-vector.
pub type Vec3 = nalgebra::Vector3<f64>;

/// Numerically stable logistic function.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
