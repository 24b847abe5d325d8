//! Training objectives: non-saturating GAN loss with R1 penalty, surface
//! normal smoothness, opacity entropy and photometric reconstruction.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sigmoid, Tape, Var};
use crate::field::{FilmSirenField, TapeConditioning};
use crate::field::{SceneField, DEGENERATE_GRADIENT};
use crate::image::Image;
use crate::render::ALPHA_EPS;
use crate::{Error, Result, Vec3};

/// Default perturbation radius for the normal regularizer.
pub const EPS_NORMAL: f64 = 0.01;

/// `f(u) = -ln(1 + exp(-u))`.
pub fn gan_softplus(u: f64) -> f64 {
    log_sigmoid(u)
}

/// Non-saturating GAN objective as batch means:
/// `mean f(D(fake)) + mean f(-D(real)) + lambda_r1 * mean |grad D(real)|^2`.
pub fn origin_loss(fake_scores: &[f64], real_scores: &[f64], real_grad_sq_norms: &[f64], lambda_r1: f64) -> f64 {
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let fake: Vec<f64> = fake_scores.iter().map(|s| gan_softplus(*s)).collect();
    let real: Vec<f64> = real_scores.iter().map(|s| gan_softplus(-s)).collect();
    mean(&fake) + mean(&real) + lambda_r1 * mean(real_grad_sq_norms)
}

/// `lambda * |grad_I D(I)|^2` with the input gradient taken on a tape.
/// `discriminator` records a scalar-valued function of its input node.
pub fn r1_penalty(
    discriminator: impl FnOnce(&mut Tape<'static>, Var) -> Var,
    real_input: &[f64],
    lambda: f64,
) -> Result<f64> {
    let mut tape = Tape::detached();
    let x = tape.input(real_input);
    let y = discriminator(&mut tape, x);
    let out = tape.scalar(y)?;
    let grads = tape.backward(out)?;
    let g = grads.wrt(x);
    let sq: f64 = g.iter().map(|v| v * v).sum();
    if !sq.is_finite() {
        return Err(Error::Numeric {
            what: "discriminator input gradient".into(),
        });
    }
    Ok(lambda * sq)
}

/// Uniform draw on the sphere of the given radius.
pub fn random_perturbation<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
        if let Some(u) = v.try_normalize(1e-12) {
            return u * radius;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalReport {
    pub value: f64,
    pub used: usize,
    pub skipped: usize,
}

/// `sum |n(x_s) - n(x_s + eps)|` over surface points, `eps` uniform on the
/// sphere of radius `eps_norm`. Points with a degenerate gradient at either
/// end are skipped and counted.
pub fn normal_regularizer<R: Rng + ?Sized>(
    field: &dyn SceneField,
    surface_points: &[Vec3],
    eps_norm: f64,
    rng: &mut R,
) -> NormalReport {
    let mut report = NormalReport::default();
    for x in surface_points {
        let eps = random_perturbation(eps_norm, rng);
        match (field.alpha_gradient(x), field.alpha_gradient(&(x + eps))) {
            (Ok(a), Ok(b)) => {
                report.value += (a.normalize() - b.normalize()).norm();
                report.used += 1;
            }
            _ => report.skipped += 1,
        }
    }
    report
}

/// `|n(x) - n(x + eps)|` recorded on a tape, differentiable in the network
/// parameters. `None` when either gradient is degenerate.
pub fn tape_normal_difference(
    field: &FilmSirenField,
    tape: &mut Tape<'_>,
    cond: &TapeConditioning,
    x: &Vec3,
    eps: &Vec3,
) -> Option<Var> {
    let mut normal = |p: Vec3| {
        let xv = tape.constant(&[p.x, p.y, p.z]);
        let g = field.tape_point(tape, cond, xv, &Vec3::z(), true).alpha_gradient?;
        let len = tape.norm(g);
        if !(tape.value(len)[0] >= DEGENERATE_GRADIENT) {
            return None;
        }
        Some(tape.div(g, len))
    };
    let a = normal(*x)?;
    let b = normal(x + eps)?;
    let d = tape.sub(a, b);
    Some(tape.norm(d))
}

/// `mean(ln a + ln(1 - a))` over alphas clamped to `[1e-7, 1 - 1e-7]`.
pub fn opacity_regularizer(alphas: &[f64]) -> f64 {
    if alphas.is_empty() {
        return 0.0;
    }
    alphas
        .iter()
        .map(|a| {
            let a = a.clamp(ALPHA_EPS, 1.0 - ALPHA_EPS);
            a.ln() + (-a).ln_1p()
        })
        .sum::<f64>()
        / alphas.len() as f64
}

/// Opacity term over a tape node of alphas.
pub fn tape_opacity(tape: &mut Tape<'_>, alphas: Var) -> Var {
    let a = tape.clamp(alphas, ALPHA_EPS, 1.0 - ALPHA_EPS);
    let la = tape.ln(a);
    let b = tape.one_minus(a);
    let lb = tape.ln(b);
    let s = tape.add(la, lb);
    let total = tape.sum(s);
    tape.scale(total, 1.0 / alphas.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_normal: f64,
    pub lambda_opac_init: f64,
    pub gamma_opac: f64,
    #[serde(default = "opac_cap")]
    pub lambda_opac_cap: f64,
    #[serde(default = "r1_default")]
    pub lambda_r1: f64,
}

fn opac_cap() -> f64 {
    10.0
}

fn r1_default() -> f64 {
    10.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_normal: 0.0,
            lambda_opac_init: 0.0,
            gamma_opac: 0.0,
            lambda_opac_cap: opac_cap(),
            lambda_r1: r1_default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_normal, self.lambda_opac_init, self.lambda_opac_cap, self.lambda_r1]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
            && self.gamma_opac.is_finite();
        if !ok {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// `min(lambda_opac_init * exp(n * gamma_opac), cap)`.
    pub fn lambda_opacity(&self, n: u64) -> f64 {
        (self.lambda_opac_init * (n as f64 * self.gamma_opac).exp()).min(self.lambda_opac_cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub origin: f64,
    pub normal: f64,
    pub opacity: f64,
}

/// `origin + lambda_normal * normal + lambda_opacity(n) * opacity`.
pub fn total_loss(c: &LossComponents, w: &LossWeights, n: u64) -> f64 {
    c.origin + w.lambda_normal * c.normal + w.lambda_opacity(n) * c.opacity
}

/// Mean squared error over all pixels and channels.
pub fn reconstruction_loss(rendered: &Image, reference: &Image) -> Result<f64> {
    rendered.check_same_shape(reference)?;
    let n = rendered.pixels.len() * 3;
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = rendered
        .pixels
        .iter()
        .zip(&reference.pixels)
        .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).powi(2)))
        .sum();
    Ok(sum / n as f64)
}
