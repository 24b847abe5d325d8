//! First free-to-occupied crossing of the alpha field along a ray.
//!
//! The volume is split into `M` equal bins; alpha is evaluated at all
//! `M + 1` bin edges and the first bin with `alpha(t_k) < tau <= alpha(t_{k+1})`
//! is refined by `m_s` secant steps that keep a bracket around the root.

use serde::{Deserialize, Serialize};

use crate::field::SceneField;
use crate::sampling::Ray;
use crate::{Error, Result};

/// Alpha tolerance for early exit.
pub const TOL_ALPHA: f64 = 1e-3;
/// Bracket width tolerance for early exit, in scene units.
pub const TOL_T: f64 = 1e-6;
const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootFinder {
    pub bins: usize,
    pub secant_steps: usize,
    pub tau: f64,
}

impl Default for RootFinder {
    fn default() -> Self {
        RootFinder {
            bins: 12,
            secant_steps: 3,
            tau: 0.5,
        }
    }
}

impl RootFinder {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config("root finding needs at least 2 bins".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub found: bool,
    pub t_s: f64,
    /// Index of the bin holding the crossing.
    pub bin: usize,
    /// Field evaluations spent: the `M + 1` edges plus secant steps.
    pub queries_used: usize,
    /// Final bracket `(lo, hi)`.
    pub bracket: (f64, f64),
    /// Whether an early-exit tolerance was met within the step budget.
    pub converged: bool,
}

impl SurfaceHit {
    fn miss(queries_used: usize) -> Self {
        SurfaceHit {
            found: false,
            t_s: f64::NAN,
            bin: 0,
            queries_used,
            bracket: (f64::NAN, f64::NAN),
            converged: false,
        }
    }
}

pub fn locate_surface(field: &dyn SceneField, ray: &Ray, finder: &RootFinder) -> SurfaceHit {
    locate_on_profile(|t| field.alpha(&ray.at(t)), ray.t_near, ray.t_far, finder)
}

/// Root finding on an arbitrary alpha profile `t -> alpha`.
pub fn locate_on_profile(
    mut alpha: impl FnMut(f64) -> f64,
    t_near: f64,
    t_far: f64,
    finder: &RootFinder,
) -> SurfaceHit {
    let m = finder.bins;
    let tau = finder.tau;
    let step = (t_far - t_near) / m as f64;
    let edge = |k: usize| if k == m { t_far } else { t_near + k as f64 * step };
    let values: Vec<f64> = (0..=m).map(|k| alpha(edge(k))).collect();
    let mut queries = m + 1;

    let Some(k) = (0..m).find(|&k| values[k] < tau && tau <= values[k + 1]) else {
        return SurfaceHit::miss(queries);
    };

    let (mut lo, mut hi) = (edge(k), edge(k + 1));
    let (mut f_lo, mut f_hi) = (values[k] - tau, values[k + 1] - tau);
    let mut converged = f_hi.abs() < TOL_ALPHA || hi - lo <= TOL_T;
    for _ in 0..finder.secant_steps {
        if converged {
            break;
        }
        let denom = f_hi - f_lo;
        let mut t = lo - f_lo * (hi - lo) / denom;
        if denom.abs() < MIN_DENOMINATOR || !(t > lo && t < hi) {
            t = 0.5 * (lo + hi);
        }
        let f = alpha(t) - tau;
        queries += 1;
        if f < 0.0 {
            lo = t;
            f_lo = f;
        } else {
            hi = t;
            f_hi = f;
        }
        converged = f.abs() < TOL_ALPHA || hi - lo <= TOL_T;
    }

    let denom = f_hi - f_lo;
    let t_s = if denom.abs() < MIN_DENOMINATOR {
        0.5 * (lo + hi)
    } else {
        (lo - f_lo * (hi - lo) / denom).clamp(lo, hi)
    };
    SurfaceHit {
        found: true,
        t_s,
        bin: k,
        queries_used: queries,
        bracket: (lo, hi),
        converged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    Cumulative,
    SurfaceOnly,
    HierarchicalBaseline,
}

/// Nominal field queries per pixel for each rendering strategy.
pub fn query_budget(m: usize, ms: usize, n: usize, mode: BudgetMode) -> usize {
    match mode {
        BudgetMode::Cumulative => m + ms + n,
        BudgetMode::SurfaceOnly => m + ms + 1,
        BudgetMode::HierarchicalBaseline => 2 * n,
    }
}
