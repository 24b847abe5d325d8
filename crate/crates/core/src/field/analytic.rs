use serde::{Deserialize, Serialize};

use super::{Field, FieldOutput, SceneField};
use crate::{logistic, Error, Result, Vec3};

/// Ground-truth shapes described by a signed inside distance (positive
/// inside, zero on the surface).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3] },
    /// Torus around an axis parallel to y.
    Torus { center: [f64; 3], major: f64, minor: f64 },
    Union(std::boxed::Box<Shape>, std::boxed::Box<Shape>),
    /// Everything behind the plane through `point` with outward `normal`.
    HalfSpace { point: [f64; 3], normal: [f64; 3] },
    /// Debug shape with spatially constant alpha.
    Constant { alpha: f64 },
}

impl Shape {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match self {
            Shape::Sphere { radius, .. } if !(*radius > 0.0) => bad("sphere radius must be positive"),
            Shape::Box { half_extents, .. } if half_extents.iter().any(|h| !(*h > 0.0)) => {
                bad("box half extents must be positive")
            }
            Shape::Torus { major, minor, .. } if !(*minor > 0.0 && *major > *minor) => {
                bad("torus needs major > minor > 0")
            }
            Shape::HalfSpace { normal, .. } if v3(normal).norm() < 1e-12 => bad("half-space normal is zero"),
            Shape::Constant { alpha } if !(0.0..=1.0).contains(alpha) => bad("constant alpha outside [0, 1]"),
            Shape::Union(a, b) => {
                a.validate()?;
                b.validate()
            }
            _ => Ok(()),
        }
    }

    /// Signed inside distance and its gradient; `None` for [`Shape::Constant`].
    pub fn inside_distance(&self, x: &Vec3) -> Option<(f64, Vec3)> {
        match self {
            Shape::Sphere { center, radius } => {
                let p = x - v3(center);
                let r = p.norm();
                let grad = if r > 0.0 { -p / r } else { Vec3::zeros() };
                Some((radius - r, grad))
            }
            Shape::Box { center, half_extents } => {
                let p = x - v3(center);
                let q = p.abs() - v3(half_extents);
                let outside = q.map(|c| c.max(0.0));
                let on = outside.norm();
                if on > 0.0 {
                    let g = outside.component_mul(&p.map(sign)) / on;
                    Some((-on, -g))
                } else {
                    let axis = q.imax();
                    let mut g = Vec3::zeros();
                    g[axis] = -sign(p[axis]);
                    Some((-q[axis], g))
                }
            }
            Shape::Torus { center, major, minor } => {
                let p = x - v3(center);
                let ring = (p.x * p.x + p.z * p.z).sqrt();
                let qx = ring - major;
                let qy = p.y;
                let qn = (qx * qx + qy * qy).sqrt();
                let grad = if qn > 0.0 && ring > 0.0 {
                    let dqx = Vec3::new(p.x / ring, 0.0, p.z / ring);
                    -(dqx * qx + Vec3::new(0.0, qy, 0.0)) / qn
                } else {
                    Vec3::zeros()
                };
                Some((minor - qn, grad))
            }
            Shape::Union(a, b) => {
                let (da, ga) = a.inside_distance(x)?;
                let (db, gb) = b.inside_distance(x)?;
                Some(if da >= db { (da, ga) } else { (db, gb) })
            }
            Shape::HalfSpace { point, normal } => {
                let n = v3(normal).normalize();
                Some((-(x - v3(point)).dot(&n), -n))
            }
            Shape::Constant { .. } => None,
        }
    }
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub(crate) fn v3(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

/// Surface color of an analytic field. Colors do not depend on view
/// direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ColorModel {
    Constant([f64; 3]),
    /// `clamp(base_c + slope_c . x, 0, 1)` per channel.
    Ramp { base: [f64; 3], slope: [[f64; 3]; 3] },
    /// Piecewise-constant colors hashed from the grid cell containing `x`.
    Palette { cell: f64, seed: u64 },
}

impl ColorModel {
    pub fn color(&self, x: &Vec3) -> [f64; 3] {
        match self {
            ColorModel::Constant(c) => *c,
            ColorModel::Ramp { base, slope } => {
                std::array::from_fn(|c| (base[c] + v3(&slope[c]).dot(x)).clamp(0.0, 1.0))
            }
            ColorModel::Palette { cell, seed } => {
                let idx = x.map(|v| (v / cell).floor() as i64);
                let mut h = *seed ^ 0x9e37_79b9_7f4a_7c15;
                for i in idx.iter() {
                    h = splitmix(h ^ (*i as u64));
                }
                std::array::from_fn(|c| 0.15 + 0.8 * (((h >> (16 * c)) & 0xffff) as f64 / 65535.0))
            }
        }
    }

    pub fn lipschitz(&self) -> Option<[f64; 3]> {
        match self {
            ColorModel::Constant(_) => Some([0.0; 3]),
            ColorModel::Ramp { slope, .. } => Some(std::array::from_fn(|c| v3(&slope[c]).norm())),
            ColorModel::Palette { .. } => None,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `alpha(x) = logistic(k * inside_distance(x))`: exactly 0.5 on the shape
/// surface and `k/4`-Lipschitz in `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticField {
    pub shape: Shape,
    pub sharpness: f64,
    pub color: ColorModel,
}

impl AnalyticField {
    pub fn new(shape: Shape, sharpness: f64, color: ColorModel) -> Result<Self> {
        if !(sharpness > 0.0) {
            return Err(Error::Config("sharpness must be positive".into()));
        }
        shape.validate()?;
        Ok(AnalyticField { shape, sharpness, color })
    }

    pub fn sphere(center: [f64; 3], radius: f64, sharpness: f64, color: [f64; 3]) -> Self {
        AnalyticField::new(Shape::Sphere { center, radius }, sharpness, ColorModel::Constant(color))
            .expect("valid sphere")
    }

    pub fn alpha_at(&self, x: &Vec3) -> f64 {
        match self.shape.inside_distance(x) {
            Some((d, _)) => logistic(self.sharpness * d),
            None => match self.shape {
                Shape::Constant { alpha } => alpha,
                _ => unreachable!(),
            },
        }
    }
}

impl SceneField for AnalyticField {
    fn alpha(&self, x: &Vec3) -> f64 {
        self.alpha_at(x)
    }

    fn output(&self, x: &Vec3, _d: &Vec3) -> FieldOutput {
        FieldOutput {
            alpha: self.alpha_at(x),
            color: self.color.color(x),
        }
    }

    fn raw_alpha_gradient(&self, x: &Vec3) -> Result<Vec3> {
        Ok(match self.shape.inside_distance(x) {
            Some((d, g)) => {
                let s = logistic(self.sharpness * d);
                g * (self.sharpness * s * (1.0 - s))
            }
            None => Vec3::zeros(),
        })
    }

    fn color_lipschitz(&self) -> Option<[f64; 3]> {
        self.color.lipschitz()
    }
}

impl Field for AnalyticField {
    fn latent_dim(&self) -> usize {
        0
    }

    fn bind<'a>(&'a self, latent: &[f64]) -> Result<Box<dyn SceneField + 'a>> {
        self.check_latent(latent)?;
        Ok(Box::new(self.clone()))
    }
}
