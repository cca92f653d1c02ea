//! Synthetic fixtures with known ground truth.
//!
//! [`toy_head`] is a textured opaque sphere that opens its "mouth" and
//! shears under two expression coefficients; [`write_toy_dataset`] renders
//! it along a short orbit into a regular dataset directory, with landmarks
//! obtained by carrying fixed canonical surface points through the
//! deformation. [`write_translation_dataset`] is a flat textured disc that
//! slides across the frame with exactly tracked landmarks.

use std::path::Path;

use crate::avatar::{
    render_image_with_alpha, AvatarModel, DeformationBasis, RadianceGrid, RenderOptions,
};
use crate::camera::{project, Intrinsics, Pose, Vec3};
use crate::dataset::{write_dataset, FrameDataset, FrameRecord};
use crate::error::Result;
use crate::image::Image;

pub const TOY_RADIUS: f64 = 0.6;
pub const TOY_CAMERA_DISTANCE: f64 = 3.0;
pub const TOY_FOV_DEGREES: f64 = 40.0;
/// Indices of the upper and lower lip in the toy landmark set.
pub const TOY_LIP_LANDMARKS: (usize, usize) = (3, 4);
/// Jaw drop of the first blendshape at full activation (world units).
pub const TOY_JAW_DROP: f64 = 0.2;
/// Horizontal shear of the second blendshape per unit height.
pub const TOY_SHEAR: f64 = 0.08;

/// Canonical landmark positions on the front (-z) face of the sphere,
/// as `(x, y)` with `z` placed on the surface.
const LANDMARK_XY: [[f64; 2]; 14] = [
    [-0.2, 0.2], // eyes
    [0.2, 0.2],
    [0.0, 0.05],   // nose
    [0.0, -0.12],  // upper lip
    [0.0, -0.3],   // lower lip
    [-0.15, -0.2], // mouth corners
    [0.15, -0.2],
    [0.0, -0.45], // chin
    [-0.35, -0.05],
    [0.35, -0.05],
    [-0.2, 0.34],
    [0.2, 0.34],
    [0.0, 0.45],
    [-0.42, 0.22],
];

fn logit(c: f64) -> f64 {
    let c = c.clamp(0.02, 0.98);
    (c / (1.0 - c)).ln()
}

/// Surface color of the toy head at a canonical point.
pub fn toy_color(p: Vec3) -> [f64; 3] {
    let [x, y, z] = p;
    let front = z < 0.0;
    let near = |cx: f64, cy: f64, r: f64| front && (x - cx).powi(2) + (y - cy).powi(2) < r * r;
    if near(-0.2, 0.2, 0.08) || near(0.2, 0.2, 0.08) {
        return [0.15, 0.2, 0.35];
    }
    if front && (y + 0.21).abs() < 0.06 && x.abs() < 0.2 {
        return [0.6, 0.12, 0.15];
    }
    [
        0.75 + 0.15 * (4.0 * x).sin(),
        0.55 + 0.15 * (5.0 * y + 1.0).sin(),
        0.45 + 0.15 * (4.0 * z + 3.0 * x).cos(),
    ]
}

/// Ground-truth model: opaque textured sphere with a jaw-drop and a shear
/// blendshape.
pub fn toy_head(resolution: usize, deform_resolution: usize) -> AvatarModel {
    let grid = RadianceGrid::from_fn(resolution, |p| {
        let inside = p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= TOY_RADIUS * TOY_RADIUS;
        let c = toy_color(p);
        (
            if inside { 40.0 } else { -10.0 },
            [logit(c[0]), logit(c[1]), logit(c[2])],
        )
    });
    let step = 2.0 / (deform_resolution - 1) as f64;
    let basis = DeformationBasis::from_fn(deform_resolution, 2, |k, p| match k {
        // points below the mouth look up into the canonical jaw
        0 => [
            0.0,
            TOY_JAW_DROP * ((-0.15 - p[1]) / step).clamp(0.0, 1.0),
            0.0,
        ],
        _ => [TOY_SHEAR * p[1], 0.0, 0.0],
    });
    AvatarModel {
        grid,
        basis,
        background: [1.0; 3],
    }
}

/// Camera and expression at continuous time `t` of an `n`-frame orbit:
/// azimuth sweeps -40..40 degrees, elevation wobbles by 10 degrees, the
/// mouth opens twice and the shear swings once.
pub fn toy_view(t: f64, n: usize) -> (Pose, Vec<f64>) {
    let span = (n.max(2) - 1) as f64;
    let s = t / span;
    let az = (-40.0 + 80.0 * s).to_radians();
    let el = (10.0 * (std::f64::consts::TAU * s).sin()).to_radians();
    let d = TOY_CAMERA_DISTANCE;
    let eye = [
        d * az.sin() * el.cos(),
        d * el.sin(),
        -d * az.cos() * el.cos(),
    ];
    let pose = Pose::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0]);
    let e = vec![
        0.5 - 0.5 * (2.0 * std::f64::consts::TAU * s).cos(),
        0.8 * (std::f64::consts::TAU * s).sin(),
    ];
    (pose, e)
}

pub fn toy_intrinsics(size: usize) -> Intrinsics {
    Intrinsics::from_fov(size, size, TOY_FOV_DEGREES.to_radians())
}

/// Named facial points followed by three concentric rings that cover the
/// front of the sphere out to near its silhouette.
pub fn toy_landmarks_canonical() -> Vec<Vec3> {
    let rings = [(0.28, 8), (0.45, 12), (0.56, 16)];
    let extra = rings.iter().flat_map(|&(r, n)| {
        (0..n).map(move |j| {
            let a = j as f64 * std::f64::consts::TAU / n as f64;
            [r * a.cos(), r * a.sin()]
        })
    });
    LANDMARK_XY
        .iter()
        .copied()
        .chain(extra)
        .map(|[x, y]| [x, y, -(TOY_RADIUS * TOY_RADIUS - x * x - y * y).sqrt()])
        .collect()
}

/// Pixel landmarks of `model` seen from `pose` under expression `e`: each
/// canonical point `c` is moved to the observed point `x` solving
/// `x + Δ(x, e) = c` by fixed-point iteration, then projected.
pub fn toy_landmarks(
    model: &AvatarModel,
    k: &Intrinsics,
    pose: &Pose,
    e: &[f64],
) -> Result<Vec<[f64; 2]>> {
    let lo = [-0.5, -0.5];
    let hi = [k.width as f64 - 0.5, k.height as f64 - 0.5];
    toy_landmarks_canonical()
        .into_iter()
        .map(|c| {
            let mut x = c;
            for _ in 0..50 {
                let d = model.basis.offset(x, e)?;
                x = [c[0] - d[0], c[1] - d[1], c[2] - d[2]];
            }
            let uv = project(k, pose, x).unwrap_or([k.cx, k.cy]);
            Ok([uv[0].clamp(lo[0], hi[0]), uv[1].clamp(lo[1], hi[1])])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub frames: usize,
    pub size: usize,
    pub resolution: usize,
    pub deform_resolution: usize,
    pub samples: usize,
    /// Drop the blendshapes (all expressions zero).
    pub rigid: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            frames: 20,
            size: 64,
            resolution: 64,
            deform_resolution: 8,
            samples: 96,
            rigid: false,
        }
    }
}

/// Pose, expression, image, mask and landmarks of one toy frame.
pub type ToyFrame = (Pose, Vec<f64>, Image, Image, Vec<[f64; 2]>);

/// Ground-truth render, mask and landmarks at continuous time `t`.
pub fn toy_frame(model: &AvatarModel, spec: &ToySpec, t: f64) -> Result<ToyFrame> {
    let k = toy_intrinsics(spec.size);
    let (pose, mut e) = toy_view(t, spec.frames);
    if spec.rigid {
        e.iter_mut().for_each(|v| *v = 0.0);
    }
    let opts = RenderOptions {
        samples: spec.samples,
        jitter_seed: None,
    };
    let (img, alpha) =
        render_image_with_alpha(model, &k, &pose, &e, (spec.size, spec.size), &opts)?;
    let mask = alpha.map_pixels(1, |a, m| m[0] = if a[0] > 0.5 { 1.0 } else { 0.0 });
    let landmarks = toy_landmarks(model, &k, &pose, &e)?;
    Ok((pose, e, img, mask, landmarks))
}

/// Renders the toy head along its orbit into a dataset at `root`.
pub fn write_toy_dataset(root: &Path, spec: &ToySpec) -> Result<FrameDataset> {
    let model = toy_head(spec.resolution, spec.deform_resolution);
    let mut records = Vec::with_capacity(spec.frames);
    let mut images = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let (pose, expression, img, mask, landmarks) = toy_frame(&model, spec, i as f64)?;
        records.push(FrameRecord {
            index: i,
            image_path: Default::default(),
            mask_path: Default::default(),
            pose,
            expression,
            landmarks,
        });
        images.push(img);
        masks.push(mask);
    }
    write_dataset(
        root,
        toy_intrinsics(spec.size),
        25.0,
        records,
        &images,
        &masks,
    )
}

/// Texture of the sliding disc in disc-local pixel coordinates.
pub fn disc_texture(u: f64, v: f64) -> [f32; 3] {
    [
        (0.5 + 0.35 * (u / 3.1).sin() * (v / 4.3).cos()) as f32,
        (0.5 + 0.35 * ((u + v) / 5.0).sin()) as f32,
        (0.5 + 0.35 * (u * v / 60.0).cos()) as f32,
    ]
}

/// A textured disc of radius `size / 4` whose center moves by `shift`
/// pixels per frame, on a white background. Landmarks are a fixed ring of
/// disc points moved with it. Cameras are identity and expressions empty.
pub fn write_translation_dataset(
    root: &Path,
    frames: usize,
    size: usize,
    shift: (f64, f64),
) -> Result<FrameDataset> {
    let radius = size as f64 / 4.0;
    let start = [
        size as f64 / 2.0 - shift.0 * (frames as f64 - 1.0) / 2.0,
        size as f64 / 2.0 - shift.1 * (frames as f64 - 1.0) / 2.0,
    ];
    let ring: Vec<[f64; 2]> = (0..12)
        .map(|j| {
            let a = j as f64 * std::f64::consts::TAU / 12.0;
            let r = if j % 2 == 0 { 0.8 } else { 0.45 } * radius;
            [r * a.cos(), r * a.sin()]
        })
        .chain(std::iter::once([0.0, 0.0]))
        .collect();
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for i in 0..frames {
        let c = [start[0] + shift.0 * i as f64, start[1] + shift.1 * i as f64];
        let inside = |x: usize, y: usize| {
            (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) <= radius * radius
        };
        images.push(Image::from_fn(size, size, 3, |x, y, px| {
            if inside(x, y) {
                px.copy_from_slice(&disc_texture(x as f64 - c[0], y as f64 - c[1]));
            } else {
                px.fill(1.0);
            }
        }));
        masks.push(Image::from_fn(size, size, 1, |x, y, px| {
            px[0] = if inside(x, y) { 1.0 } else { 0.0 }
        }));
        records.push(FrameRecord {
            index: i,
            image_path: Default::default(),
            mask_path: Default::default(),
            pose: Pose::IDENTITY,
            expression: Vec::new(),
            landmarks: ring.iter().map(|p| [p[0] + c[0], p[1] + c[1]]).collect(),
        });
    }
    let k = Intrinsics::from_fov(size, size, 1.0);
    write_dataset(root, k, 25.0, records, &images, &masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lip_gap_grows_with_jaw_coefficient() {
        let model = toy_head(16, 8);
        let k = toy_intrinsics(64);
        let (pose, _) = toy_view(9.5, 20);
        let gap = |e1: f64| {
            let lm = toy_landmarks(&model, &k, &pose, &[e1, 0.0]).unwrap();
            let (u, l) = TOY_LIP_LANDMARKS;
            (lm[l][1] - lm[u][1]).abs()
        };
        assert!(gap(1.0) > gap(0.0) + 2.0, "{} vs {}", gap(1.0), gap(0.0));
    }

    #[test]
    fn landmarks_invert_the_deformation() {
        let model = toy_head(16, 8);
        let e = [0.9, -0.6];
        for c in toy_landmarks_canonical() {
            let mut x = c;
            for _ in 0..50 {
                let d = model.basis.offset(x, &e).unwrap();
                x = [c[0] - d[0], c[1] - d[1], c[2] - d[2]];
            }
            let back = crate::avatar::deform(&model.basis, x, &e).unwrap();
            for a in 0..3 {
                assert!((back[a] - c[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn translation_dataset_moves_content_with_landmarks() {
        let dir = tempfile::tempdir().unwrap();
        let ds = write_translation_dataset(dir.path(), 3, 48, (2.0, 1.0)).unwrap();
        let a = ds.load_image(0).unwrap();
        let b = ds.load_image(1).unwrap();
        let d = [
            ds.frames[1].landmarks[0][0] - ds.frames[0].landmarks[0][0],
            ds.frames[1].landmarks[0][1] - ds.frames[0].landmarks[0][1],
        ];
        assert_eq!(d, [2.0, 1.0]);
        assert_eq!(a.pixel(24, 24), b.pixel(26, 25));
    }
}
