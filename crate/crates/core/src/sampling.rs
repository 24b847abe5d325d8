//! Cameras, rays and depth samples along rays.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, t_near: f64, t_far: f64) -> Result<Self> {
        if !(t_near < t_far) {
            return Err(Error::Config(format!("ray bounds [{t_near}, {t_far}] are empty")));
        }
        let n = direction.norm();
        if !(n > 0.0) {
            return Err(Error::Config("ray direction is zero".into()));
        }
        Ok(Ray {
            origin,
            direction: direction / n,
            t_near,
            t_far,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    pub fn extent(&self) -> f64 {
        self.t_far - self.t_near
    }
}

/// Camera position and orthonormal orientation. The camera looks along
/// `forward`; image rows run along `-up`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

impl Pose {
    pub fn look_at(position: Vec3, target: Vec3) -> Result<Self> {
        let forward = (target - position)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("camera position coincides with its target".into()))?;
        let right = forward
            .cross(&Vec3::y())
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("camera looks straight up or down".into()))?;
        let up = right.cross(&forward);
        Ok(Pose {
            position,
            right,
            up,
            forward,
        })
    }

    /// Camera on a sphere of `radius` around `target`. Yaw turns around the
    /// vertical axis, pitch raises the camera; (0, 0) sits on `+z`.
    pub fn orbit(yaw: f64, pitch: f64, radius: f64, target: Vec3) -> Result<Self> {
        let offset = Vec3::new(yaw.sin() * pitch.cos(), pitch.sin(), yaw.cos() * pitch.cos());
        Self::look_at(target + offset * radius, target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub pose: Pose,
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(pose: Pose, fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config("image must be at least 1x1".into()));
        }
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::Config(format!("field of view {fov_deg} outside (0, 180)")));
        }
        Ok(Camera {
            pose,
            fov_deg,
            width,
            height,
        })
    }

    /// Unit direction through the center of pixel `(i, j)` (column, row).
    pub fn pixel_direction(&self, i: usize, j: usize) -> Vec3 {
        let half = (self.fov_deg.to_radians() / 2.0).tan();
        let aspect = self.width as f64 / self.height as f64;
        let u = ((i as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * half * aspect;
        let v = (1.0 - (j as f64 + 0.5) / self.height as f64 * 2.0) * half;
        let p = &self.pose;
        (p.forward + p.right * u + p.up * v).normalize()
    }
}

/// One ray per pixel, row-major.
pub fn generate_rays(camera: &Camera, t_near: f64, t_far: f64) -> Result<Vec<Ray>> {
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for j in 0..camera.height {
        for i in 0..camera.width {
            rays.push(Ray::new(camera.pose.position, camera.pixel_direction(i, j), t_near, t_far)?);
        }
    }
    Ok(rays)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseKind {
    Gaussian,
    Uniform,
}

/// Yaw/pitch distribution for orbit cameras. For `gaussian` the sigmas are
/// standard deviations, for `uniform` half-ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDistribution {
    pub kind: PoseKind,
    pub sigma_v: f64,
    pub sigma_h: f64,
    #[serde(default = "one")]
    pub radius: f64,
    #[serde(default)]
    pub look_at: [f64; 3],
}

fn one() -> f64 {
    1.0
}

impl PoseDistribution {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_v >= 0.0 && self.sigma_h >= 0.0) {
            return Err(Error::Config("pose sigmas must be non-negative".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::Config("orbit radius must be positive".into()));
        }
        Ok(())
    }

    pub fn target(&self) -> Vec3 {
        Vec3::from(self.look_at)
    }

    /// `(yaw, pitch)` draw.
    pub fn sample_angles<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        match self.kind {
            PoseKind::Gaussian => {
                let yaw: f64 = StandardNormal.sample(rng);
                let pitch: f64 = StandardNormal.sample(rng);
                (yaw * self.sigma_h, pitch * self.sigma_v)
            }
            PoseKind::Uniform => {
                let yaw = (2.0 * rng.random::<f64>() - 1.0) * self.sigma_h;
                let pitch = (2.0 * rng.random::<f64>() - 1.0) * self.sigma_v;
                (yaw, pitch)
            }
        }
    }
}

pub fn sample_pose<R: Rng + ?Sized>(dist: &PoseDistribution, rng: &mut R) -> Result<Pose> {
    let (yaw, pitch) = dist.sample_angles(rng);
    Pose::orbit(yaw, pitch, dist.radius, dist.target())
}

/// `delta(n) = max(delta_init * exp(-gamma * n), delta_min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShrinkSchedule {
    pub delta_init: f64,
    pub gamma: f64,
    pub delta_min: f64,
}

impl ShrinkSchedule {
    pub fn new(delta_init: f64, gamma: f64, delta_min: f64) -> Result<Self> {
        let s = ShrinkSchedule {
            delta_init,
            gamma,
            delta_min,
        };
        s.validate()?;
        Ok(s)
    }

    /// Schedule starting from half the volume extent.
    pub fn for_bounds(t_near: f64, t_far: f64, gamma: f64, delta_min: f64) -> Result<Self> {
        Self::new((t_far - t_near) / 2.0, gamma, delta_min)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_min > 0.0 && self.delta_init >= self.delta_min) {
            return Err(Error::Config(format!(
                "schedule needs delta_init ({}) >= delta_min ({}) > 0",
                self.delta_init, self.delta_min
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("schedule decay rate must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn delta(&self, n: u64) -> f64 {
        (self.delta_init * (-self.gamma * n as f64).exp()).max(self.delta_min)
    }

    /// First step at which the floor is reached, if ever.
    pub fn floor_step(&self) -> Option<u64> {
        if self.delta_init == self.delta_min {
            return Some(0);
        }
        if self.gamma == 0.0 {
            return None;
        }
        let mut n = ((self.delta_init / self.delta_min).ln() / self.gamma).floor() as u64;
        while self.delta(n) > self.delta_min {
            n += 1;
        }
        while n > 0 && self.delta(n - 1) == self.delta_min {
            n -= 1;
        }
        Some(n)
    }
}

pub fn schedule_delta(schedule: &ShrinkSchedule, n: u64) -> f64 {
    schedule.delta(n)
}

/// Per-pixel generator keyed by `(seed, image, pass)` with the pixel index
/// as stream, so results do not depend on evaluation order.
pub fn pixel_rng(seed: u64, image: u64, pass: u64, pixel: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&image.to_le_bytes());
    key[16..24].copy_from_slice(&pass.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(pixel);
    rng
}

fn stratified_in<R: Rng + ?Sized>(lo: f64, hi: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let width = (hi - lo) / n as f64;
    (0..n)
        .map(|i| (lo + (i as f64 + rng.random::<f64>()) * width).min(hi))
        .collect()
}

/// One uniform draw in each of `n` equal bins of `[t_near, t_far]`.
pub fn stratified_samples<R: Rng + ?Sized>(ray: &Ray, n: usize, rng: &mut R) -> Vec<f64> {
    stratified_in(ray.t_near, ray.t_far, n, rng)
}

/// `n` equally spaced depths covering `[t_near, t_far]` end to end.
pub fn uniform_depths(ray: &Ray, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (ray.t_near + ray.t_far)];
    }
    let step = ray.extent() / (n - 1) as f64;
    (0..n).map(|i| ray.t_near + i as f64 * step).collect()
}

/// `[t_s - delta, t_s + delta]`, translated back inside the ray bounds.
/// Windows wider than the volume become the whole volume.
pub fn shrink_window(ray: &Ray, t_s: f64, delta: f64) -> (f64, f64) {
    let extent = ray.extent();
    if 2.0 * delta >= extent * (1.0 - 1e-12) {
        return (ray.t_near, ray.t_far);
    }
    let lo = (t_s - delta).clamp(ray.t_near, ray.t_far - 2.0 * delta);
    (lo, (lo + 2.0 * delta).min(ray.t_far))
}

pub fn shrink_window_samples<R: Rng + ?Sized>(ray: &Ray, t_s: f64, delta: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let (lo, hi) = shrink_window(ray, t_s, delta);
    stratified_in(lo, hi, n, rng)
}

/// Inverse-transform samples from the piecewise-constant density whose
/// bins surround the coarse depths and carry mass proportional to the coarse
/// weights. Returns coarse and fine depths merged and sorted. All-zero
/// weights fall back to uniform draws over `bounds`.
pub fn hierarchical_fine_samples<R: Rng + ?Sized>(
    coarse: &[f64],
    weights: &[f64],
    n_fine: usize,
    bounds: (f64, f64),
    rng: &mut R,
) -> Result<Vec<f64>> {
    if coarse.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: coarse.len(),
            found: weights.len(),
        });
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Config(format!("negative coarse weight {w}")));
    }
    let mut out = coarse.to_vec();
    let total: f64 = weights.iter().sum();
    let (lo, hi) = bounds;
    if total <= 0.0 || coarse.is_empty() {
        out.extend((0..n_fine).map(|_| lo + rng.random::<f64>() * (hi - lo)));
    } else {
        let mut edges = Vec::with_capacity(coarse.len() + 1);
        edges.push(lo);
        edges.extend(coarse.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        edges.push(hi);
        let mut cdf = Vec::with_capacity(coarse.len() + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for w in weights {
            acc += w / total;
            cdf.push(acc);
        }
        for _ in 0..n_fine {
            let u = rng.random::<f64>() * acc;
            // Last bin with cdf[b] <= u, skipping empty bins.
            let b = cdf.partition_point(|c| *c <= u).clamp(1, weights.len()) - 1;
            let mass = cdf[b + 1] - cdf[b];
            let frac = if mass > 0.0 { ((u - cdf[b]) / mass).clamp(0.0, 1.0) } else { 0.5 };
            out.push((edges[b] + frac * (edges[b + 1] - edges[b])).clamp(lo, hi));
        }
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}
