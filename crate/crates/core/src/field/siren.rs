//! Latent-conditioned FiLM-SIREN occupancy network.
//!
//! A mapping network turns the latent code into per-layer frequency and
//! phase vectors. Each backbone layer computes `sin(freq * (W h + b) + phase)`.
//! The alpha head is a logistic of the final features; the color head is a
//! per-channel logistic of the final features concatenated with the view
//! direction, so alpha never depends on the view direction.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Field, FieldOutput, SceneField};
use crate::autodiff::{dot, grad_wrt_input, DenseBlock, Tape, Var};
use crate::{logistic, Error, Result, Vec3};

/// Width of the three hidden layers of the mapping network.
pub const MAPPING_HIDDEN: usize = 256;
const MAPPING_HIDDEN_LAYERS: usize = 3;
const MAPPING_SLOPE: f64 = 0.2;
/// Base SIREN frequency.
pub const OMEGA0: f64 = 30.0;

const MAGIC: &[u8; 4] = b"OFNF";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SirenDims {
    pub latent_dim: usize,
    pub layers: usize,
    pub width: usize,
}

impl Default for SirenDims {
    fn default() -> Self {
        SirenDims {
            latent_dim: 16,
            layers: 4,
            width: 64,
        }
    }
}

impl SirenDims {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.layers == 0 || self.width == 0 {
            return Err(Error::Config(format!("invalid network dimensions {self:?}")));
        }
        Ok(())
    }

    /// Length of the conditioning vector (frequencies then phases).
    pub fn conditioning_len(&self) -> usize {
        2 * self.layers * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SirenLayout {
    pub mapping: Vec<DenseBlock>,
    pub backbone: Vec<DenseBlock>,
    pub alpha_head: DenseBlock,
    pub color_head: DenseBlock,
    pub total: usize,
}

impl SirenLayout {
    pub fn new(dims: SirenDims) -> Self {
        let mut offset = 0;
        let mut next = |rows, cols| {
            let (b, end) = DenseBlock::at(offset, rows, cols);
            offset = end;
            b
        };
        let mut mapping = Vec::with_capacity(MAPPING_HIDDEN_LAYERS + 1);
        mapping.push(next(MAPPING_HIDDEN, dims.latent_dim));
        for _ in 1..MAPPING_HIDDEN_LAYERS {
            mapping.push(next(MAPPING_HIDDEN, MAPPING_HIDDEN));
        }
        mapping.push(next(dims.conditioning_len(), MAPPING_HIDDEN));
        let mut backbone = vec![next(dims.width, 3)];
        for _ in 1..dims.layers {
            backbone.push(next(dims.width, dims.width));
        }
        let alpha_head = next(1, dims.width);
        let color_head = next(3, dims.width + 3);
        SirenLayout {
            mapping,
            backbone,
            alpha_head,
            color_head,
            total: offset,
        }
    }
}

/// Per-layer frequencies and phases produced by the mapping network.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub frequencies: Vec<Vec<f64>>,
    pub phases: Vec<Vec<f64>>,
}

impl Conditioning {
    fn from_flat(flat: &[f64], dims: SirenDims) -> Self {
        let (freq, phase) = flat.split_at(dims.layers * dims.width);
        Conditioning {
            frequencies: freq.chunks(dims.width).map(<[f64]>::to_vec).collect(),
            phases: phase.chunks(dims.width).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.frequencies.iter().chain(&self.phases).flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilmSirenField {
    dims: SirenDims,
    layout: SirenLayout,
    params: Vec<f64>,
}

/// Tape handles for the conditioning slices of each backbone layer.
#[derive(Debug, Clone)]
pub struct TapeConditioning {
    pub frequencies: Vec<Var>,
    pub phases: Vec<Var>,
}

/// Tape handles produced for one query point.
#[derive(Debug, Clone, Copy)]
pub struct PointVars {
    pub alpha: Var,
    pub color: Var,
    /// `grad_x alpha` as a length-3 node, when requested.
    pub alpha_gradient: Option<Var>,
}

impl FilmSirenField {
    pub fn param_count(dims: SirenDims) -> usize {
        SirenLayout::new(dims).total
    }

    /// Randomly initialized network.
    pub fn new(dims: SirenDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let layout = SirenLayout::new(dims);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |params: &mut [f64], block: &DenseBlock, w_bound: f64, b_bound: f64| {
            for p in &mut params[block.weight..block.weight + block.rows * block.cols] {
                *p = rng.random_range(-w_bound..=w_bound);
            }
            for p in &mut params[block.bias..block.bias + block.rows] {
                *p = if b_bound > 0.0 { rng.random_range(-b_bound..=b_bound) } else { 0.0 };
            }
        };

        let n_map = layout.mapping.len();
        for block in &layout.mapping[..n_map - 1] {
            let fan_in = block.cols as f64;
            let bound = (6.0 / ((1.0 + MAPPING_SLOPE * MAPPING_SLOPE) * fan_in)).sqrt();
            fill(&mut params, block, bound, 1.0 / fan_in.sqrt());
        }
        // Output layer: frequencies start near OMEGA0, phases near zero.
        let out = layout.mapping[n_map - 1];
        let base = (6.0 / out.cols as f64).sqrt() * 0.25;
        fill(&mut params, &out, base, 0.0);
        let half = dims.layers * dims.width;
        for r in 0..half {
            for p in &mut params[out.weight + r * out.cols..out.weight + (r + 1) * out.cols] {
                *p *= 15.0;
            }
            params[out.bias + r] = OMEGA0;
        }

        for (l, block) in layout.backbone.iter().enumerate() {
            let fan_in = block.cols as f64;
            let bound = if l == 0 { 1.0 / fan_in } else { (6.0 / fan_in).sqrt() / OMEGA0 };
            fill(&mut params, block, bound, 1.0 / fan_in.sqrt());
        }
        for head in [layout.alpha_head, layout.color_head] {
            fill(&mut params, &head, (6.0 / head.cols as f64).sqrt(), 0.0);
        }
        Ok(FilmSirenField { dims, layout, params })
    }

    pub fn from_params(dims: SirenDims, params: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        let layout = SirenLayout::new(dims);
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch {
                expected: layout.total,
                found: params.len(),
            });
        }
        Ok(FilmSirenField { dims, layout, params })
    }

    pub fn dims(&self) -> SirenDims {
        self.dims
    }

    pub fn layout(&self) -> &SirenLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Run the mapping network.
    pub fn condition(&self, latent: &[f64]) -> Result<Conditioning> {
        self.check_latent(latent)?;
        let mut h = latent.to_vec();
        let mut out = Vec::new();
        let n = self.layout.mapping.len();
        for (i, block) in self.layout.mapping.iter().enumerate() {
            block.apply(&self.params, &h, true, &mut out);
            if i + 1 < n {
                for v in &mut out {
                    if *v < 0.0 {
                        *v *= MAPPING_SLOPE;
                    }
                }
            }
            std::mem::swap(&mut h, &mut out);
        }
        Ok(Conditioning::from_flat(&h, self.dims))
    }

    /// `(frequencies, phases)` for every backbone layer.
    pub fn run_mapping_network(&self, latent: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let c = self.condition(latent)?;
        Ok((c.frequencies, c.phases))
    }

    fn features(&self, cond: &Conditioning, x: &Vec3) -> Vec<f64> {
        let mut h = vec![x.x, x.y, x.z];
        let mut z = Vec::with_capacity(self.dims.width);
        for (l, block) in self.layout.backbone.iter().enumerate() {
            block.apply(&self.params, &h, true, &mut z);
            let (f, p) = (&cond.frequencies[l], &cond.phases[l]);
            for i in 0..z.len() {
                z[i] = (f[i] * z[i] + p[i]).sin();
            }
            std::mem::swap(&mut h, &mut z);
        }
        h
    }

    fn alpha_from(&self, h: &[f64]) -> f64 {
        let head = self.layout.alpha_head;
        logistic(dot(head.weights(&self.params), h) + head.biases(&self.params)[0])
    }

    fn color_from(&self, h: &[f64], d: &Vec3) -> [f64; 3] {
        let head = self.layout.color_head;
        let w = head.weights(&self.params);
        let b = head.biases(&self.params);
        let width = self.dims.width;
        std::array::from_fn(|c| {
            let row = &w[c * head.cols..(c + 1) * head.cols];
            let v = dot(&row[..width], h) + row[width] * d.x + row[width + 1] * d.y + row[width + 2] * d.z + b[c];
            logistic(v)
        })
    }

    pub fn alpha_with(&self, cond: &Conditioning, x: &Vec3) -> f64 {
        self.alpha_from(&self.features(cond, x))
    }

    pub fn output_with(&self, cond: &Conditioning, x: &Vec3, d: &Vec3) -> FieldOutput {
        let h = self.features(cond, x);
        FieldOutput {
            alpha: self.alpha_from(&h),
            color: self.color_from(&h, d),
        }
    }

    /// Per-channel Lipschitz bound of color in position for a fixed view
    /// direction: product of layer operator norms times the logistic slope
    /// bound 1/4.
    pub fn color_lipschitz_with(&self, cond: &Conditioning) -> [f64; 3] {
        let mut backbone = 1.0;
        for (l, block) in self.layout.backbone.iter().enumerate() {
            let w = block.weights(&self.params);
            let f = &cond.frequencies[l];
            let m = DMatrix::from_fn(block.rows, block.cols, |r, c| f[r] * w[r * block.cols + c]);
            backbone *= spectral_norm(&m);
        }
        let head = self.layout.color_head;
        let w = head.weights(&self.params);
        let width = self.dims.width;
        std::array::from_fn(|c| {
            let row = &w[c * head.cols..c * head.cols + width];
            let row_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            // Relative slack for rounding in the singular value computation.
            0.25 * row_norm * backbone * (1.0 + 1e-9)
        })
    }

    // ---- tape construction -------------------------------------------------

    /// Mapping network on the tape; returns the flat conditioning node.
    pub fn tape_mapping(&self, tape: &mut Tape<'_>, latent: &[f64]) -> Result<Var> {
        self.check_latent(latent)?;
        let mut h = tape.constant(latent);
        let n = self.layout.mapping.len();
        for (i, block) in self.layout.mapping.iter().enumerate() {
            h = tape.affine(h, *block, true);
            if i + 1 < n {
                h = tape.leaky_relu(h, MAPPING_SLOPE);
            }
        }
        Ok(h)
    }

    /// Split a flat conditioning node into per-layer slices.
    pub fn tape_conditioning(&self, tape: &mut Tape<'_>, flat: Var) -> TapeConditioning {
        let (l, w) = (self.dims.layers, self.dims.width);
        assert_eq!(flat.len(), 2 * l * w, "conditioning length");
        TapeConditioning {
            frequencies: (0..l).map(|i| tape.slice(flat, i * w, w)).collect(),
            phases: (0..l).map(|i| tape.slice(flat, (l + i) * w, w)).collect(),
        }
    }

    /// Record alpha and color at position node `x` (length 3). With
    /// `with_gradient`, also record `grad_x alpha` by propagating position
    /// tangents through the network on the same tape, so that the gradient
    /// itself is differentiable in the parameters.
    pub fn tape_point(
        &self,
        tape: &mut Tape<'_>,
        cond: &TapeConditioning,
        x: Var,
        d: &Vec3,
        with_gradient: bool,
    ) -> PointVars {
        let mut h = x;
        let mut tangents: Vec<Var> = Vec::new();
        if with_gradient {
            tangents = (0..3)
                .map(|j| {
                    let mut e = [0.0; 3];
                    e[j] = 1.0;
                    tape.constant(&e)
                })
                .collect();
        }
        for (l, block) in self.layout.backbone.iter().enumerate() {
            let z = tape.affine(h, *block, true);
            let fz = tape.mul(cond.frequencies[l], z);
            let u = tape.add(fz, cond.phases[l]);
            if with_gradient {
                let cos_u = tape.cos(u);
                let scale = tape.mul(cos_u, cond.frequencies[l]);
                for t in tangents.iter_mut() {
                    let dz = tape.affine(*t, *block, false);
                    *t = tape.mul(scale, dz);
                }
            }
            h = tape.sin(u);
        }
        let a = tape.affine(h, self.layout.alpha_head, true);
        let alpha = tape.logistic(a);
        let dir = tape.constant(&[d.x, d.y, d.z]);
        let hc = tape.concat(&[h, dir]);
        let c = tape.affine(hc, self.layout.color_head, true);
        let color = tape.logistic(c);

        let alpha_gradient = with_gradient.then(|| {
            let om = tape.one_minus(alpha);
            let slope = tape.mul(alpha, om);
            let parts: Vec<Var> = tangents
                .iter()
                .map(|t| {
                    let da = tape.affine(*t, self.layout.alpha_head, false);
                    tape.mul(slope, da)
                })
                .collect();
            tape.concat(&parts)
        });
        PointVars {
            alpha,
            color,
            alpha_gradient,
        }
    }

    /// `grad_x alpha` through the reverse-mode tape.
    pub fn alpha_gradient_with(&self, cond: &Conditioning, x: &Vec3) -> Result<Vec3> {
        let mut tape = Tape::new(&self.params);
        let flat = tape.constant(&cond.to_flat());
        let tc = self.tape_conditioning(&mut tape, flat);
        let xv = tape.input(&[x.x, x.y, x.z]);
        let pv = self.tape_point(&mut tape, &tc, xv, &Vec3::z(), false);
        let out = tape.scalar(pv.alpha)?;
        grad_wrt_input(&mut tape, out, &[xv])
    }

    // ---- checkpoint ------------------------------------------------------

    /// 16-byte header (`OFNF`, version, latent dim, layer count; u32 LE)
    /// followed by every parameter as f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.latent_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.layers as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing OFNF header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if word(4) != VERSION as usize {
            return Err(bad("unsupported version"));
        }
        let (latent_dim, layers) = (word(8), word(12));
        let body = &bytes[16..];
        if body.len() % 8 != 0 {
            return Err(bad("parameter blob is not a whole number of f64 values"));
        }
        let count = body.len() / 8;
        // The width is not stored; recover it from the parameter count,
        // which is strictly increasing in the width.
        let mut width = None;
        for w in 1..=1 << 16 {
            let n = Self::param_count(SirenDims { latent_dim, layers, width: w });
            if n == count {
                width = Some(w);
                break;
            }
            if n > count {
                break;
            }
        }
        let width = width.ok_or_else(|| bad("parameter count matches no network width"))?;
        let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_params(SirenDims { latent_dim, layers, width }, params)
    }
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}

/// A [`FilmSirenField`] with its latent already mapped to conditioning.
pub struct BoundSiren<'a> {
    pub field: &'a FilmSirenField,
    pub conditioning: Conditioning,
}

impl SceneField for BoundSiren<'_> {
    fn alpha(&self, x: &Vec3) -> f64 {
        self.field.alpha_with(&self.conditioning, x)
    }

    fn output(&self, x: &Vec3, d: &Vec3) -> FieldOutput {
        self.field.output_with(&self.conditioning, x, d)
    }

    fn raw_alpha_gradient(&self, x: &Vec3) -> Result<Vec3> {
        self.field.alpha_gradient_with(&self.conditioning, x)
    }

    fn color_lipschitz(&self) -> Option<[f64; 3]> {
        Some(self.field.color_lipschitz_with(&self.conditioning))
    }
}

impl Field for FilmSirenField {
    fn latent_dim(&self) -> usize {
        self.dims.latent_dim
    }

    fn bind<'a>(&'a self, latent: &[f64]) -> Result<Box<dyn SceneField + 'a>> {
        Ok(Box::new(BoundSiren {
            field: self,
            conditioning: self.condition(latent)?,
        }))
    }
}
