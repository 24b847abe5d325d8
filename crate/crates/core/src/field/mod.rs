//! Occupancy fields: position (+ view direction, latent) to alpha and color.

mod analytic;
mod siren;

pub use analytic::{AnalyticField, ColorModel, Shape};
pub use siren::{
    BoundSiren, Conditioning, FilmSirenField, PointVars, SirenDims, SirenLayout, TapeConditioning, MAPPING_HIDDEN, OMEGA0,
};

use crate::{Error, Result, Vec3};

/// Gradient norms below this are treated as degenerate.
pub const DEGENERATE_GRADIENT: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct FieldQuery<'a> {
    pub position: Vec3,
    pub view_direction: Vec3,
    pub latent: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub alpha: f64,
    pub color: [f64; 3],
}

/// A field with its latent code already applied. This is what rendering,
/// root-finding and extraction consume.
pub trait SceneField: Sync {
    fn alpha(&self, x: &Vec3) -> f64;

    fn output(&self, x: &Vec3, d: &Vec3) -> FieldOutput;

    fn color(&self, x: &Vec3, d: &Vec3) -> [f64; 3] {
        self.output(x, d).color
    }

    /// Raw `grad_x alpha`.
    fn raw_alpha_gradient(&self, x: &Vec3) -> Result<Vec3>;

    /// `grad_x alpha`, rejecting near-zero gradients.
    fn alpha_gradient(&self, x: &Vec3) -> Result<Vec3> {
        let g = self.raw_alpha_gradient(x)?;
        let norm = g.norm();
        if !(norm >= DEGENERATE_GRADIENT) {
            return Err(Error::DegenerateGradient { norm });
        }
        Ok(g)
    }

    /// Per-channel Lipschitz constant of color with respect to position,
    /// when one can be certified.
    fn color_lipschitz(&self) -> Option<[f64; 3]> {
        None
    }
}

/// A latent-conditioned family of fields.
pub trait Field: Sync {
    fn latent_dim(&self) -> usize;

    /// Apply a latent code.
    fn bind<'a>(&'a self, latent: &[f64]) -> Result<Box<dyn SceneField + 'a>>;

    fn check_latent(&self, latent: &[f64]) -> Result<()> {
        if latent.len() != self.latent_dim() {
            return Err(Error::Config(format!(
                "latent has dimension {}, field expects {}",
                latent.len(),
                self.latent_dim()
            )));
        }
        Ok(())
    }

    fn evaluate(&self, query: &FieldQuery<'_>) -> Result<FieldOutput> {
        let dn = query.view_direction.norm();
        if (dn - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("view direction has norm {dn}, expected 1")));
        }
        Ok(self.bind(query.latent)?.output(&query.position, &query.view_direction))
    }

    fn evaluate_alpha_gradient(&self, position: &Vec3, latent: &[f64]) -> Result<Vec3> {
        self.bind(latent)?.alpha_gradient(position)
    }
}

/// Volume density view of a field, for classic density compositing.
pub trait DensityField: Sync {
    fn density(&self, x: &Vec3) -> f64;
    fn color(&self, x: &Vec3, d: &Vec3) -> [f64; 3];
}

/// Density `peak * alpha(x)` derived from an occupancy field.
pub struct ScaledDensity<'a> {
    pub field: &'a dyn SceneField,
    pub peak: f64,
}

impl DensityField for ScaledDensity<'_> {
    fn density(&self, x: &Vec3) -> f64 {
        self.peak * self.field.alpha(x)
    }

    fn color(&self, x: &Vec3, d: &Vec3) -> [f64; 3] {
        self.field.color(x, d)
    }
}

/// Constant density and color everywhere; handy for closed-form checks.
#[derive(Debug, Clone, Copy)]
pub struct UniformDensity {
    pub sigma: f64,
    pub color: [f64; 3],
}

impl DensityField for UniformDensity {
    fn density(&self, _x: &Vec3) -> f64 {
        self.sigma
    }

    fn color(&self, _x: &Vec3, _d: &Vec3) -> [f64; 3] {
        self.color
    }
}
