//! Deformable radiance-field head avatar.
//!
//! A canonical voxel grid stores raw density and color at the vertices of a
//! regular lattice over `[-1, 1]^3`; lookups interpolate raw values
//! trilinearly and then activate them (`softplus` for density, logistic for
//! color). Expressions deform space through a blendshape basis: one coarse
//! displacement grid per expression coefficient, so a point `x` observed
//! under expression `e` is looked up at `x + sum_k e_k W_k(x)`.

mod checkpoint;
mod render;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use render::{
    loss_and_grad, ray_weights, render_image, render_image_with_alpha, render_ray, Gradients,
    RayTarget, RenderOptions,
};
pub use train::{
    carve, render_dataset, smoothness, train, AdamState, AvatarState, TrainConfig, TrainReport,
    TrainingFrames, ADAM_EPSILON,
};

use crate::camera::Vec3;
use crate::error::{Error, Result};

pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_DEFORM_RESOLUTION: usize = 8;
/// Raw density of a fresh grid (`softplus(-4) ~ 0.018`).
pub const INIT_DENSITY_RAW: f64 = -4.0;
/// Raw density of carved vertices (`softplus(-10) ~ 4.5e-5`).
pub const EMPTY_DENSITY_RAW: f64 = -10.0;

/// Canonical radiance grid. `params` interleaves `[density, r, g, b]` raw
/// values per vertex; vertex `(i, j, k)` sits at
/// `(-1 + 2i/(R-1), -1 + 2j/(R-1), -1 + 2k/(R-1))` with linear index
/// `(k R + j) R + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceGrid {
    pub resolution: usize,
    pub params: Vec<f64>,
}

impl RadianceGrid {
    pub const CHANNELS: usize = 4;

    pub fn new(resolution: usize) -> Self {
        assert!(resolution >= 2, "grid resolution must be at least 2");
        let mut params = vec![0.0; resolution.pow(3) * Self::CHANNELS];
        for v in params.chunks_exact_mut(Self::CHANNELS) {
            v[0] = INIT_DENSITY_RAW;
        }
        Self { resolution, params }
    }

    /// Fills every vertex from `f(position) -> (density_raw, color_raw)`.
    pub fn from_fn(resolution: usize, mut f: impl FnMut(Vec3) -> (f64, [f64; 3])) -> Self {
        let mut grid = Self::new(resolution);
        for v in 0..resolution.pow(3) {
            let (d, c) = f(vertex_position(resolution, v));
            grid.params[4 * v] = d;
            grid.params[4 * v + 1..4 * v + 4].copy_from_slice(&c);
        }
        grid
    }

    pub fn vertex_count(&self) -> usize {
        self.resolution.pow(3)
    }

    /// Density and color at canonical point `x`.
    pub fn lookup(&self, x: Vec3) -> (f64, [f64; 3]) {
        let raw = self.raw_at(x);
        (
            softplus(raw[0]),
            [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])],
        )
    }

    pub(crate) fn raw_at(&self, x: Vec3) -> [f64; 4] {
        let cell = Cell::new(self.resolution, x, false);
        let mut raw = [0.0; 4];
        for (&v, &w) in cell.idx.iter().zip(&cell.w) {
            let p = &self.params[4 * v..4 * v + 4];
            for c in 0..4 {
                raw[c] += w * p[c];
            }
        }
        raw
    }
}

/// Blendshape displacement basis. `weights[(v m + k) 3 + a]` is axis `a` of
/// grid `k` at vertex `v` (same lattice convention as [`RadianceGrid`]).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationBasis {
    pub resolution: usize,
    pub count: usize,
    pub weights: Vec<f64>,
}

impl DeformationBasis {
    pub fn zeros(resolution: usize, count: usize) -> Self {
        assert!(resolution >= 2, "basis resolution must be at least 2");
        Self {
            resolution,
            count,
            weights: vec![0.0; resolution.pow(3) * count * 3],
        }
    }

    /// Fills grid `k` from `f(k, position) -> displacement`.
    pub fn from_fn(
        resolution: usize,
        count: usize,
        mut f: impl FnMut(usize, Vec3) -> Vec3,
    ) -> Self {
        let mut basis = Self::zeros(resolution, count);
        for v in 0..resolution.pow(3) {
            let p = vertex_position(resolution, v);
            for k in 0..count {
                let i = (v * count + k) * 3;
                basis.weights[i..i + 3].copy_from_slice(&f(k, p));
            }
        }
        basis
    }

    /// `Δ(x, e) = sum_k e_k trilinear(W_k, x)`.
    pub fn offset(&self, x: Vec3, e: &[f64]) -> Result<Vec3> {
        self.check_expression(e)?;
        Ok(self.offset_unchecked(x, e))
    }

    pub(crate) fn check_expression(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.count {
            return Err(Error::CountMismatch {
                expected: self.count,
                got: e.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn offset_unchecked(&self, x: Vec3, e: &[f64]) -> Vec3 {
        let mut d = [0.0; 3];
        if e.iter().all(|&v| v == 0.0) {
            return d;
        }
        let m = self.count;
        let cell = Cell::new(self.resolution, x, false);
        for (&v, &w) in cell.idx.iter().zip(&cell.w) {
            for (k, &ek) in e.iter().enumerate() {
                let s = w * ek;
                let base = (v * m + k) * 3;
                for a in 0..3 {
                    d[a] += s * self.weights[base + a];
                }
            }
        }
        d
    }
}

/// Maps a point observed under expression `e` into canonical space.
pub fn deform(basis: &DeformationBasis, x: Vec3, e: &[f64]) -> Result<Vec3> {
    let d = basis.offset(x, e)?;
    Ok([x[0] + d[0], x[1] + d[1], x[2] + d[2]])
}

#[derive(Clone, Debug, PartialEq)]
pub struct AvatarModel {
    pub grid: RadianceGrid,
    pub basis: DeformationBasis,
    pub background: [f64; 3],
}

impl AvatarModel {
    /// Fresh model: faint uniform density, mid-gray color, no deformation,
    /// white background.
    pub fn new(resolution: usize, deform_resolution: usize, expression_dim: usize) -> Self {
        Self {
            grid: RadianceGrid::new(resolution),
            basis: DeformationBasis::zeros(deform_resolution, expression_dim),
            background: [1.0; 3],
        }
    }

    pub fn expression_dim(&self) -> usize {
        self.basis.count
    }

    /// Same shape and background, parameters reset.
    pub fn fresh_like(&self) -> Self {
        Self {
            background: self.background,
            ..Self::new(
                self.grid.resolution,
                self.basis.resolution,
                self.basis.count,
            )
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.grid.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("radiance grid".into()));
        }
        if self.basis.weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("deformation basis".into()));
        }
        Ok(())
    }
}

pub(crate) fn vertex_position(res: usize, v: usize) -> Vec3 {
    let s = 2.0 / (res - 1) as f64;
    let (i, j, k) = (v % res, (v / res) % res, v / (res * res));
    [
        -1.0 + s * i as f64,
        -1.0 + s * j as f64,
        -1.0 + s * k as f64,
    ]
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Trilinear stencil on a lattice over `[-1, 1]^3`. Coordinates outside the
/// box clamp to the boundary, where the spatial derivative is zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    /// `d w / d x`, filled only on request.
    pub dw: [[f64; 3]; 8],
}

#[inline]
fn axis(res: usize, x: f64) -> (usize, f64, f64) {
    let scale = 0.5 * (res - 1) as f64;
    let g = (x + 1.0) * scale;
    if g <= 0.0 {
        (0, 0.0, 0.0)
    } else if g >= (res - 1) as f64 {
        (res - 2, 1.0, 0.0)
    } else {
        let i = (g as usize).min(res - 2);
        (i, g - i as f64, scale)
    }
}

impl Cell {
    #[inline]
    pub fn new(res: usize, x: Vec3, with_derivative: bool) -> Self {
        let (ix, fx, sx) = axis(res, x[0]);
        let (iy, fy, sy) = axis(res, x[1]);
        let (iz, fz, sz) = axis(res, x[2]);
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        let wz = [1.0 - fz, fz];
        let mut cell = Cell {
            idx: [0; 8],
            w: [0.0; 8],
            dw: [[0.0; 3]; 8],
        };
        for c in 0..8 {
            let (bx, by, bz) = (c & 1, (c >> 1) & 1, c >> 2);
            cell.idx[c] = ((iz + bz) * res + iy + by) * res + ix + bx;
            cell.w[c] = wx[bx] * wy[by] * wz[bz];
            if with_derivative {
                let sign = |b: usize, s: f64| if b == 1 { s } else { -s };
                cell.dw[c] = [
                    sign(bx, sx) * wy[by] * wz[bz],
                    wx[bx] * sign(by, sy) * wz[bz],
                    wx[bx] * wy[by] * sign(bz, sz),
                ];
            }
        }
        cell
    }
}
