//! Fitting the avatar to posed images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{accumulate, Gradients};
use super::{
    render_image, vertex_position, AvatarModel, RadianceGrid, RayTarget, RenderOptions,
    DEFAULT_DEFORM_RESOLUTION, DEFAULT_RESOLUTION, EMPTY_DENSITY_RAW,
};
use crate::camera::{pixel_ray, project, Intrinsics};
use crate::dataset::{FrameDataset, FrameRecord};
use crate::error::{Error, Result};
use crate::image::Image;

pub const ADAM_EPSILON: f64 = 1e-8;

/// Rejection-sampling attempts when drawing a pixel of a given mask class.
const PIXEL_DRAW_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rays_per_step: usize,
    pub samples_per_ray: usize,
    pub learning_rate: f64,
    /// Deformation basis step size as a multiple of `learning_rate`.
    pub basis_lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub steps_per_cycle: usize,
    pub rng_seed: u64,
    /// Share of each batch drawn from pixels outside the mask.
    pub background_fraction: f64,
    pub grid_resolution: usize,
    pub deform_resolution: usize,
    /// Weight of the squared-difference smoothness penalty on raw density.
    pub tv_density: f64,
    /// Same for the raw color channels.
    pub tv_color: f64,
    /// Freeze as empty every vertex that some training view sees outside
    /// its mask dilated by `carve_dilation` pixels.
    pub space_carving: bool,
    pub carve_dilation: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rays_per_step: 4096,
            samples_per_ray: 96,
            learning_rate: 5e-2,
            basis_lr_scale: 0.02,
            beta1: 0.9,
            beta2: 0.99,
            steps_per_cycle: 2000,
            rng_seed: 0,
            background_fraction: 0.1,
            grid_resolution: DEFAULT_RESOLUTION,
            deform_resolution: DEFAULT_DEFORM_RESOLUTION,
            tv_density: 0.0,
            tv_color: 0.05,
            space_carving: true,
            carve_dilation: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("training: {what}")));
        if self.rays_per_step == 0 || self.samples_per_ray == 0 {
            return bad("rays_per_step and samples_per_ray must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("moment decay rates must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return bad("background_fraction must lie in [0, 1)");
        }
        if !(self.basis_lr_scale > 0.0 && self.basis_lr_scale.is_finite()) {
            return bad("basis_lr_scale must be positive");
        }
        if !(self.tv_density >= 0.0 && self.tv_color >= 0.0) {
            return bad("smoothness weights must be nonnegative");
        }
        if self.grid_resolution < 2 || self.deform_resolution < 2 {
            return bad("grid resolutions must be at least 2");
        }
        Ok(())
    }

    /// A fresh model shaped by this config.
    pub fn new_model(&self, expression_dim: usize) -> AvatarModel {
        AvatarModel::new(self.grid_resolution, self.deform_resolution, expression_dim)
    }
}

/// First and second moment estimates, empty until the first update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    /// Updates applied so far, across all cycles.
    pub step: u64,
    pub grid_m: Vec<f64>,
    pub grid_v: Vec<f64>,
    pub basis_m: Vec<f64>,
    pub basis_v: Vec<f64>,
}

impl AdamState {
    pub fn has_moments(&self) -> bool {
        !self.grid_m.is_empty()
    }

    fn ensure(&mut self, model: &AvatarModel) {
        let (g, b) = (model.grid.params.len(), model.basis.weights.len());
        if self.grid_m.len() != g || self.basis_m.len() != b {
            self.grid_m = vec![0.0; g];
            self.grid_v = vec![0.0; g];
            self.basis_m = vec![0.0; b];
            self.basis_v = vec![0.0; b];
        }
    }
}

/// Model plus the optimizer state that resumed training carries over.
#[derive(Clone, Debug, PartialEq)]
pub struct AvatarState {
    pub model: AvatarModel,
    pub optimizer: AdamState,
}

impl AvatarState {
    pub fn new(model: AvatarModel) -> Self {
        Self {
            model,
            optimizer: AdamState::default(),
        }
    }
}

/// Posed supervision images with their masks.
#[derive(Clone, Copy, Debug)]
pub struct TrainingFrames<'a> {
    pub intrinsics: Intrinsics,
    pub frames: &'a [FrameRecord],
    pub images: &'a [Image],
    pub masks: &'a [Image],
}

impl<'a> TrainingFrames<'a> {
    pub fn new(dataset: &'a FrameDataset, images: &'a [Image], masks: &'a [Image]) -> Self {
        Self {
            intrinsics: dataset.intrinsics,
            frames: &dataset.frames,
            images,
            masks,
        }
    }

    fn validate(&self, expression_dim: usize) -> Result<()> {
        let n = self.frames.len();
        if n == 0 {
            return Err(Error::InvalidArgument("no training frames".into()));
        }
        if self.images.len() != n || self.masks.len() != n {
            return Err(Error::CountMismatch {
                expected: n,
                got: self.images.len().min(self.masks.len()),
            });
        }
        let dims = (self.intrinsics.width, self.intrinsics.height);
        for (i, (img, mask)) in self.images.iter().zip(self.masks).enumerate() {
            if img.dims() != dims || mask.dims() != dims || img.channels() < 3 {
                return Err(Error::SizeMismatch(format!(
                    "training frame {i}: expected {}x{} RGB image and mask",
                    dims.0, dims.1
                )));
            }
        }
        for f in self.frames {
            if f.expression.len() != expression_dim {
                return Err(Error::CountMismatch {
                    expected: expression_dim,
                    got: f.expression.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Batch loss of every step run.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Means over consecutive non-overlapping windows.
    pub fn windowed_means(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks_exact(window.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Runs `config.steps_per_cycle` Adam updates on random ray batches. Without
/// `resume` the model is reset to a fresh one of the same shape and the
/// optimizer restarts; with it both carry over.
pub fn train(
    state: &mut AvatarState,
    data: &TrainingFrames<'_>,
    config: &TrainConfig,
    resume: bool,
) -> Result<TrainReport> {
    config.validate()?;
    data.validate(state.model.expression_dim())?;
    if !resume {
        state.model = state.model.fresh_like();
        state.optimizer = AdamState::default();
    }
    let mut report = TrainReport::default();
    if config.steps_per_cycle == 0 {
        return Ok(report);
    }
    state.optimizer.ensure(&state.model);
    let carved = if config.space_carving {
        let carved = carve(state.model.grid.resolution, data, config.carve_dilation);
        for &v in &carved {
            state.model.grid.params[4 * v] = EMPTY_DENSITY_RAW;
        }
        carved
    } else {
        Vec::new()
    };
    let mut grads = Gradients::zeros_like(&state.model);
    let mut batch = Vec::with_capacity(config.rays_per_step);
    for _ in 0..config.steps_per_cycle {
        let step = state.optimizer.step;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        rng.set_stream(step);
        draw_batch(&mut rng, data, config, &mut batch);
        let jitter = rng.random::<u64>();
        let loss = accumulate(
            &state.model,
            &batch,
            config.samples_per_ray,
            Some(jitter),
            &mut grads,
        )?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                loss,
            });
        }
        if config.tv_density > 0.0 || config.tv_color > 0.0 {
            smoothness(
                &state.model.grid,
                config.tv_density,
                config.tv_color,
                &mut grads.grid,
            );
        }
        for &v in &carved {
            grads.grid[4 * v] = 0.0;
        }
        adam_step(state, &grads, config);
        report.losses.push(loss);
    }
    state.model.check_finite()?;
    Ok(report)
}

/// `sum_v sum_axis (p[v + axis] - p[v])^2 / V` per channel, weighted by
/// `w_density` for channel 0 and `w_color` for the others. Adds its gradient
/// to `grad` and returns the penalty.
pub fn smoothness(grid: &RadianceGrid, w_density: f64, w_color: f64, grad: &mut [f64]) -> f64 {
    let r = grid.resolution;
    let p = &grid.params;
    let scale = 1.0 / grid.vertex_count() as f64;
    let weights = [
        w_density * scale,
        w_color * scale,
        w_color * scale,
        w_color * scale,
    ];
    let strides = [1, r, r * r];
    let mut penalty = 0.0;
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                let v = (z * r + y) * r + x;
                let coords = [x, y, z];
                for a in 0..3 {
                    if coords[a] + 1 == r {
                        continue;
                    }
                    let n = v + strides[a];
                    for c in 0..4 {
                        let d = p[4 * n + c] - p[4 * v + c];
                        penalty += weights[c] * d * d;
                        let g = 2.0 * weights[c] * d;
                        grad[4 * n + c] += g;
                        grad[4 * v + c] -= g;
                    }
                }
            }
        }
    }
    penalty
}

/// Vertices whose projection falls outside the dilated mask of at least one
/// training frame. Projections off the image or behind the camera carry no
/// evidence.
pub fn carve(resolution: usize, data: &TrainingFrames<'_>, dilation: usize) -> Vec<usize> {
    let k = &data.intrinsics;
    let (w, h) = (k.width, k.height);
    let hulls: Vec<Vec<bool>> = data.masks.iter().map(|m| dilate(m, dilation)).collect();
    (0..resolution.pow(3))
        .filter(|&v| {
            let p = vertex_position(resolution, v);
            data.frames.iter().zip(&hulls).any(|(f, hull)| {
                let Some([u, y]) = project(k, &f.pose, p) else {
                    return false;
                };
                let (u, y) = (u.round(), y.round());
                if u < 0.0 || y < 0.0 || u >= w as f64 || y >= h as f64 {
                    return false;
                }
                !hull[y as usize * w + u as usize]
            })
        })
        .collect()
}

fn dilate(mask: &Image, r: usize) -> Vec<bool> {
    let (w, h) = mask.dims();
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y, 0) > 0.5 {
                for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                    for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                        out[yy * w + xx] = true;
                    }
                }
            }
        }
    }
    out
}

fn draw_batch<'a>(
    rng: &mut ChaCha8Rng,
    data: &TrainingFrames<'a>,
    config: &TrainConfig,
    batch: &mut Vec<RayTarget<'a>>,
) {
    batch.clear();
    let k = &data.intrinsics;
    let (w, h) = (k.width, k.height);
    let n_bg = (config.background_fraction * config.rays_per_step as f64).round() as usize;
    for j in 0..config.rays_per_step {
        let want_fg = j >= n_bg;
        let (mut f, mut p) = (0, 0);
        for _ in 0..PIXEL_DRAW_ATTEMPTS {
            f = rng.random_range(0..data.frames.len());
            p = rng.random_range(0..w * h);
            if (data.masks[f].data()[p] > 0.5) == want_fg {
                break;
            }
        }
        let (x, y) = (p % w, p / w);
        let rgb = data.images[f].pixel(x, y);
        batch.push(RayTarget {
            ray: pixel_ray(k, &data.frames[f].pose, x as f64, y as f64),
            expression: &data.frames[f].expression,
            target: [rgb[0] as f64, rgb[1] as f64, rgb[2] as f64],
        });
    }
}

fn adam_step(state: &mut AvatarState, grads: &Gradients, config: &TrainConfig) {
    let opt = &mut state.optimizer;
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64| {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPSILON);
        }
    };
    let lr = config.learning_rate;
    update(
        &mut state.model.grid.params,
        &grads.grid,
        &mut opt.grid_m,
        &mut opt.grid_v,
        lr,
    );
    let lr = lr * config.basis_lr_scale;
    update(
        &mut state.model.basis.weights,
        &grads.basis,
        &mut opt.basis_m,
        &mut opt.basis_v,
        lr,
    );
}

/// One render per frame at its pose and expression, in dataset order.
pub fn render_dataset(
    model: &AvatarModel,
    dataset: &FrameDataset,
    resolution: Option<(usize, usize)>,
    opts: &RenderOptions,
) -> Result<Vec<Image>> {
    let k = dataset.intrinsics;
    let res = resolution.unwrap_or((k.width, k.height));
    dataset
        .frames
        .iter()
        .map(|f| render_image(model, &k, &f.pose, &f.expression, res, opts))
        .collect()
}
