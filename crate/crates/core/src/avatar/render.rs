//! Volume rendering and its reverse-mode derivative.
//!
//! A ray is clipped to `[-1, 1]^3` and cut into `N` equal bins of width
//! `δ`; one sample per bin (bin center, or a seeded uniform position)
//! supplies density `σ_i` and color `c_i`. With `T_0 = 1` and
//! `T_{i+1} = T_i exp(-σ_i δ)` the pixel is
//! `C = sum_i T_i (1 - exp(-σ_i δ)) c_i + T_N bg`.
//!
//! Backward, with `S_i = sum_{j>i} w_j c_j + T_N bg`:
//! `dC/dσ_i = δ (T_{i+1} c_i - S_i)` and `dC/dc_i = w_i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{sigmoid, AvatarModel, Cell};
use crate::camera::{pixel_ray, Intrinsics, Pose, Ray, Vec3};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub samples: usize,
    /// Seed for stratified jitter; `None` samples bin centers.
    pub jitter_seed: Option<u64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            samples: 96,
            jitter_seed: None,
        }
    }
}

/// One supervised ray.
#[derive(Clone, Copy, Debug)]
pub struct RayTarget<'a> {
    pub ray: Ray,
    pub expression: &'a [f64],
    pub target: [f64; 3],
}

/// Loss gradients, laid out like the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub grid: Vec<f64>,
    pub basis: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &AvatarModel) -> Self {
        Self {
            grid: vec![0.0; model.grid.params.len()],
            basis: vec![0.0; model.basis.weights.len()],
        }
    }

    pub(crate) fn clear(&mut self) {
        self.grid.fill(0.0);
        self.basis.fill(0.0);
    }

    pub fn max_abs(&self) -> f64 {
        self.grid
            .iter()
            .chain(&self.basis)
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

#[derive(Clone, Copy)]
struct SampleRec {
    x: Vec3,
    xc: Vec3,
    dsigma: f64,
    color: [f64; 3],
    weight: f64,
    t_next: f64,
}

struct Marched {
    color: [f64; 3],
    residual: f64,
    delta: f64,
}

/// `(softplus(x), sigmoid(x))` from a single exponential.
#[inline]
fn softplus_and_slope(x: f64) -> (f64, f64) {
    if x > 30.0 {
        (x, 1.0)
    } else {
        let e = x.exp();
        (e.ln_1p(), e / (1.0 + e))
    }
}

fn ray_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn march(
    model: &AvatarModel,
    ray: &Ray,
    e: &[f64],
    samples: usize,
    mut rng: Option<&mut ChaCha8Rng>,
    recs: &mut Vec<SampleRec>,
) -> Marched {
    recs.clear();
    let bg = model.background;
    let Some((t0, t1)) = ray.intersect_cube(-1.0, 1.0) else {
        return Marched {
            color: bg,
            residual: 1.0,
            delta: 0.0,
        };
    };
    let delta = (t1 - t0) / samples as f64;
    let deforming = e.iter().any(|&v| v != 0.0);
    let res = model.grid.resolution;
    let params = &model.grid.params;
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    for i in 0..samples {
        let u = match rng.as_deref_mut() {
            Some(r) => r.random::<f64>(),
            None => 0.5,
        };
        let x = ray.at(t0 + (i as f64 + u) * delta);
        let xc = if deforming {
            let d = model.basis.offset_unchecked(x, e);
            [x[0] + d[0], x[1] + d[1], x[2] + d[2]]
        } else {
            x
        };
        let cell = Cell::new(res, xc, false);
        let mut raw = [0.0; 4];
        for (&v, &w) in cell.idx.iter().zip(&cell.w) {
            let p = &params[4 * v..4 * v + 4];
            raw[0] += w * p[0];
            raw[1] += w * p[1];
            raw[2] += w * p[2];
            raw[3] += w * p[3];
        }
        let (sigma, dsigma) = softplus_and_slope(raw[0]);
        let c = [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])];
        let t_next = trans * (-sigma * delta).exp();
        let weight = trans - t_next;
        for k in 0..3 {
            color[k] += weight * c[k];
        }
        recs.push(SampleRec {
            x,
            xc,
            dsigma,
            color: c,
            weight,
            t_next,
        });
        trans = t_next;
    }
    for k in 0..3 {
        color[k] += trans * bg[k];
    }
    Marched {
        color,
        residual: trans,
        delta,
    }
}

/// Accumulates `dL/dθ` given `dL/dC` for a ray marched into `recs`.
fn backprop(
    model: &AvatarModel,
    e: &[f64],
    m: &Marched,
    recs: &[SampleRec],
    dl_dc: [f64; 3],
    grads: &mut Gradients,
) {
    let Some(last) = recs.last() else {
        return;
    };
    let deforming = e.iter().any(|&v| v != 0.0);
    let res = model.grid.resolution;
    let params = &model.grid.params;
    let bg = model.background;
    let mut suffix = [
        last.t_next * bg[0],
        last.t_next * bg[1],
        last.t_next * bg[2],
    ];
    for rec in recs.iter().rev() {
        let c = rec.color;
        let mut dl_dsigma = 0.0;
        for k in 0..3 {
            dl_dsigma += dl_dc[k] * (rec.t_next * c[k] - suffix[k]);
            suffix[k] += rec.weight * c[k];
        }
        let gd = m.delta * dl_dsigma * rec.dsigma;
        let gc = [
            rec.weight * dl_dc[0] * c[0] * (1.0 - c[0]),
            rec.weight * dl_dc[1] * c[1] * (1.0 - c[1]),
            rec.weight * dl_dc[2] * c[2] * (1.0 - c[2]),
        ];
        let cell = Cell::new(res, rec.xc, deforming);
        let mut gx = [0.0; 3];
        for corner in 0..8 {
            let v = cell.idx[corner];
            let w = cell.w[corner];
            let g = &mut grads.grid[4 * v..4 * v + 4];
            g[0] += w * gd;
            g[1] += w * gc[0];
            g[2] += w * gc[1];
            g[3] += w * gc[2];
            if deforming {
                let p = &params[4 * v..4 * v + 4];
                let s = gd * p[0] + gc[0] * p[1] + gc[1] * p[2] + gc[2] * p[3];
                for a in 0..3 {
                    gx[a] += cell.dw[corner][a] * s;
                }
            }
        }
        if deforming {
            let basis = &model.basis;
            let count = basis.count;
            let dcell = Cell::new(basis.resolution, rec.x, false);
            for corner in 0..8 {
                let base = dcell.idx[corner] * count;
                for (k, &ek) in e.iter().enumerate() {
                    let s = ek * dcell.w[corner];
                    let i = (base + k) * 3;
                    for a in 0..3 {
                        grads.basis[i + a] += s * gx[a];
                    }
                }
            }
        }
    }
}

/// Color of one ray; `jitter_seed` seeds its stratified sample positions.
pub fn render_ray(
    model: &AvatarModel,
    ray: &Ray,
    e: &[f64],
    samples: usize,
    jitter_seed: Option<u64>,
) -> Result<[f64; 3]> {
    model.basis.check_expression(e)?;
    let mut rng = jitter_seed.map(|s| ray_rng(s, 0));
    Ok(march(
        model,
        ray,
        e,
        samples,
        rng.as_mut(),
        &mut Vec::with_capacity(samples),
    )
    .color)
}

/// Per-sample compositing weights and the residual transmittance.
pub fn ray_weights(
    model: &AvatarModel,
    ray: &Ray,
    e: &[f64],
    samples: usize,
) -> Result<(Vec<f64>, f64)> {
    model.basis.check_expression(e)?;
    let mut recs = Vec::with_capacity(samples);
    let m = march(model, ray, e, samples, None, &mut recs);
    Ok((recs.iter().map(|r| r.weight).collect(), m.residual))
}

fn check_camera(k: &Intrinsics, resolution: (usize, usize)) -> Result<Intrinsics> {
    k.validate()?;
    if resolution.0 == 0 || resolution.1 == 0 {
        return Err(Error::InvalidArgument(
            "render resolution must be positive".into(),
        ));
    }
    Ok(if (k.width, k.height) == resolution {
        *k
    } else {
        k.scaled_to(resolution.0, resolution.1)
    })
}

/// Renders an RGB image and its opacity `1 - T_N`.
pub fn render_image_with_alpha(
    model: &AvatarModel,
    intrinsics: &Intrinsics,
    pose: &Pose,
    e: &[f64],
    resolution: (usize, usize),
    opts: &RenderOptions,
) -> Result<(Image, Image)> {
    model.basis.check_expression(e)?;
    if opts.samples == 0 {
        return Err(Error::InvalidArgument(
            "samples per ray must be positive".into(),
        ));
    }
    let k = check_camera(intrinsics, resolution)?;
    let (w, h) = resolution;
    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut recs = Vec::with_capacity(opts.samples);
            let mut rgb = Vec::with_capacity(w * 3);
            let mut alpha = Vec::with_capacity(w);
            for x in 0..w {
                let ray = pixel_ray(&k, pose, x as f64, y as f64);
                let mut rng = opts.jitter_seed.map(|s| ray_rng(s, (y * w + x) as u64));
                let m = march(model, &ray, e, opts.samples, rng.as_mut(), &mut recs);
                rgb.extend(m.color.iter().map(|&c| c as f32));
                alpha.push((1.0 - m.residual) as f32);
            }
            (rgb, alpha)
        })
        .collect();
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut alpha = Vec::with_capacity(w * h);
    for (r, a) in rows {
        rgb.extend(r);
        alpha.extend(a);
    }
    Ok((
        Image::from_vec(w, h, 3, rgb)?,
        Image::from_vec(w, h, 1, alpha)?,
    ))
}

pub fn render_image(
    model: &AvatarModel,
    intrinsics: &Intrinsics,
    pose: &Pose,
    e: &[f64],
    resolution: (usize, usize),
    opts: &RenderOptions,
) -> Result<Image> {
    Ok(render_image_with_alpha(model, intrinsics, pose, e, resolution, opts)?.0)
}

/// Mean squared color error over `batch` (rays and channels) and its exact
/// gradient with respect to every model parameter.
pub fn loss_and_grad(
    model: &AvatarModel,
    batch: &[RayTarget<'_>],
    samples: usize,
    jitter_seed: Option<u64>,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros_like(model);
    let loss = accumulate(model, batch, samples, jitter_seed, &mut grads)?;
    Ok((loss, grads))
}

/// [`loss_and_grad`] into a caller-owned (cleared) gradient buffer.
pub(crate) fn accumulate(
    model: &AvatarModel,
    batch: &[RayTarget<'_>],
    samples: usize,
    jitter_seed: Option<u64>,
    grads: &mut Gradients,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty ray batch".into()));
    }
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "samples per ray must be positive".into(),
        ));
    }
    model.check_finite()?;
    grads.clear();
    let norm = 1.0 / (3 * batch.len()) as f64;
    let mut recs = Vec::with_capacity(samples);
    let mut loss = 0.0;
    for (i, rt) in batch.iter().enumerate() {
        model.basis.check_expression(rt.expression)?;
        let mut rng = jitter_seed.map(|s| ray_rng(s, i as u64));
        let m = march(
            model,
            &rt.ray,
            rt.expression,
            samples,
            rng.as_mut(),
            &mut recs,
        );
        let mut dl_dc = [0.0; 3];
        for k in 0..3 {
            let r = m.color[k] - rt.target[k];
            loss += r * r;
            dl_dc[k] = 2.0 * r * norm;
        }
        backprop(model, rt.expression, &m, &recs, dl_dc, grads);
    }
    Ok(loss * norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::{DeformationBasis, RadianceGrid};
    use crate::camera::normalize;

    fn constant_model(density_raw: f64, color_raw: f64) -> AvatarModel {
        let mut m = AvatarModel::new(4, 2, 0);
        m.grid = RadianceGrid::from_fn(4, |_| (density_raw, [color_raw; 3]));
        m
    }

    fn axis_ray() -> Ray {
        Ray {
            origin: [0.0, 0.0, -3.0],
            dir: [0.0, 0.0, 1.0],
        }
    }

    #[test]
    fn missing_ray_returns_background() {
        let m = constant_model(5.0, 0.0);
        let ray = Ray {
            origin: [0.0, 3.0, -3.0],
            dir: [0.0, 0.0, 1.0],
        };
        assert_eq!(render_ray(&m, &ray, &[], 16, None).unwrap(), [1.0; 3]);
    }

    #[test]
    fn near_opaque_first_voxel_gives_its_color() {
        let mut m = AvatarModel::new(8, 2, 0);
        m.grid = RadianceGrid::from_fn(8, |p| {
            if p[2] < -0.5 {
                (2000.0, [1.5, -0.5, 0.0])
            } else {
                (-30.0, [0.0; 3])
            }
        });
        let c = render_ray(&m, &axis_ray(), &[], 64, None).unwrap();
        let want = [sigmoid(1.5), sigmoid(-0.5), 0.5];
        for k in 0..3 {
            assert!((c[k] - want[k]).abs() < 1e-3, "{c:?}");
        }
    }

    #[test]
    fn matching_targets_give_zero_loss_and_gradient() {
        let mut m = AvatarModel::new(6, 3, 1);
        m.grid = RadianceGrid::from_fn(6, |p| (p[0] * 3.0, [p[1], -p[2], 0.3]));
        m.basis = DeformationBasis::from_fn(3, 1, |_, p| [0.05 * p[1], 0.0, 0.02]);
        let e = [0.7];
        let rays: Vec<Ray> = (0..5)
            .map(|i| Ray {
                origin: [0.1 * i as f64, -0.2, -3.0],
                dir: normalize([0.02 * i as f64, 0.05, 1.0]),
            })
            .collect();
        let batch: Vec<RayTarget> = rays
            .iter()
            .map(|r| RayTarget {
                ray: *r,
                expression: &e,
                target: render_ray(&m, r, &e, 24, None).unwrap(),
            })
            .collect();
        let (loss, g) = loss_and_grad(&m, &batch, 24, None).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn background_rays_leave_basis_gradient_zero() {
        let mut m = AvatarModel::new(6, 3, 2);
        m.basis = DeformationBasis::from_fn(3, 2, |_, _| [0.1, 0.1, 0.1]);
        let e = [1.0, -0.5];
        let batch = [RayTarget {
            ray: Ray {
                origin: [0.0, 5.0, -3.0],
                dir: [0.0, 0.0, 1.0],
            },
            expression: &e,
            target: [0.2, 0.4, 0.6],
        }];
        let (loss, g) = loss_and_grad(&m, &batch, 16, Some(3)).unwrap();
        assert!(loss > 0.0);
        assert!(g.basis.iter().all(|&v| v == 0.0));
        assert!(g.grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_parameters_are_named() {
        let mut m = AvatarModel::new(4, 2, 0);
        m.grid.params[7] = f64::NAN;
        let batch = [RayTarget {
            ray: axis_ray(),
            expression: &[],
            target: [0.0; 3],
        }];
        let err = loss_and_grad(&m, &batch, 8, None).unwrap_err();
        assert!(err.to_string().contains("radiance grid"), "{err}");
    }

    #[test]
    fn render_is_deterministic_per_seed() {
        let m = constant_model(0.5, 0.2);
        let k = Intrinsics::from_fov(12, 10, 0.9);
        let pose = Pose::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0]);
        let opts = RenderOptions {
            samples: 16,
            jitter_seed: Some(11),
        };
        let a = render_image(&m, &k, &pose, &[], (12, 10), &opts).unwrap();
        let b = render_image(&m, &k, &pose, &[], (12, 10), &opts).unwrap();
        assert_eq!(a, b);
    }
}
