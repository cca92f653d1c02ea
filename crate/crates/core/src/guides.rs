//! Guide channels that steer exemplar-based patch synthesis.
//!
//! A [`GuideStack`] pairs every channel of the source (exemplar) frame with
//! the corresponding channel of the target frame: masked appearance, a
//! positional guide (where each target pixel is expected to come from in the
//! source, normalized by image size), and a soft segmentation mask.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{masked, FrameRecord};
use crate::error::{Error, Result};
use crate::image::Image;

/// Regularizer added to squared landmark distances, in pixels².
pub const SHEPARD_EPSILON: f64 = 1.0;

/// Blur radius of the soft segmentation guide, in pixels.
pub const SEGMENTATION_BLUR_RADIUS: usize = 3;

/// Dense map from every target pixel to a source position (pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    width: usize,
    height: usize,
    map: Vec<[f32; 2]>,
}

impl WarpField {
    pub fn identity(width: usize, height: usize) -> Self {
        let map = (0..height)
            .flat_map(|y| (0..width).map(move |x| [x as f32, y as f32]))
            .collect();
        Self { width, height, map }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f32; 2] {
        self.map[y * self.width + x]
    }

    /// Pulls `source` through the warp with bilinear sampling.
    pub fn warp(&self, source: &Image) -> Image {
        Image::from_fn(self.width, self.height, source.channels(), |x, y, out| {
            let [sx, sy] = self.at(x, y);
            source.sample_bilinear(sx, sy, out);
        })
    }
}

/// Shepard (inverse-distance-squared) interpolation of landmark
/// displacements: every target pixel `p` maps to
/// `p + sum_j w_j (src_j - tgt_j) / sum_j w_j`, with
/// `w_j = 1 / (|p - tgt_j|² + eps)`, clamped to the source image.
pub fn positional_guide(
    src_landmarks: &[[f64; 2]],
    tgt_landmarks: &[[f64; 2]],
    size: (usize, usize),
) -> Result<WarpField> {
    if src_landmarks.is_empty() {
        return Err(Error::InvalidArgument(
            "positional guide needs at least one landmark".into(),
        ));
    }
    if src_landmarks.len() != tgt_landmarks.len() {
        return Err(Error::CountMismatch {
            expected: tgt_landmarks.len(),
            got: src_landmarks.len(),
        });
    }
    let (w, h) = size;
    let disp: Vec<[f64; 2]> = src_landmarks
        .iter()
        .zip(tgt_landmarks)
        .map(|(s, t)| [s[0] - t[0], s[1] - t[1]])
        .collect();
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);
    let mut map = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64, y as f64);
            let (mut sum_w, mut dx, mut dy) = (0.0, 0.0, 0.0);
            for (t, d) in tgt_landmarks.iter().zip(&disp) {
                let r2 = (px - t[0]).powi(2) + (py - t[1]).powi(2);
                let wj = 1.0 / (r2 + SHEPARD_EPSILON);
                sum_w += wj;
                dx += wj * d[0];
                dy += wj * d[1];
            }
            let sx = (px + dx / sum_w).clamp(0.0, max_x);
            let sy = (py + dy / sum_w).clamp(0.0, max_y);
            map.push([sx as f32, sy as f32]);
        }
    }
    Ok(WarpField {
        width: w,
        height: h,
        map,
    })
}

/// Mask blurred by a normalized `(2r+1)²` box filter with edge replication.
pub fn segmentation_guide(mask: &Image, blur_radius: usize) -> Result<Image> {
    if mask.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "segmentation guide expects a single-channel mask, got {} channels",
            mask.channels()
        )));
    }
    if blur_radius == 0 {
        return Ok(mask.clone());
    }
    let (w, h) = mask.dims();
    let r = blur_radius as isize;
    let norm = 1.0 / (2 * blur_radius + 1) as f32;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horizontal = Image::from_fn(w, h, 1, |x, y, out| {
        out[0] = (-r..=r)
            .map(|d| mask.get(clamp(x as isize + d, w), y, 0))
            .sum::<f32>()
            * norm;
    });
    Ok(Image::from_fn(w, h, 1, |x, y, out| {
        let v = (-r..=r)
            .map(|d| horizontal.get(x, clamp(y as isize + d, h), 0))
            .sum::<f32>()
            * norm;
        out[0] = v.clamp(0.0, 1.0);
    }))
}

/// Relative weights of the matching-energy terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuideWeights {
    pub appearance: f32,
    pub positional: f32,
    pub segmentation: f32,
    pub style: f32,
}

impl Default for GuideWeights {
    fn default() -> Self {
        Self {
            appearance: 2.0,
            positional: 1.0,
            segmentation: 1.5,
            style: 1.0,
        }
    }
}

impl GuideWeights {
    pub fn new(appearance: f32, positional: f32, segmentation: f32, style: f32) -> Self {
        Self {
            appearance,
            positional,
            segmentation,
            style,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        let all = [
            self.appearance,
            self.positional,
            self.segmentation,
            self.style,
        ];
        all.iter().all(|w| w.is_finite() && *w >= 0.0) && all.iter().any(|w| *w > 0.0)
    }

    /// The guide terms (excluding style) must carry some weight, since the
    /// style term is inactive until a first output exists.
    pub fn check_usable(&self) -> Result<()> {
        if !self.is_well_formed() {
            return Err(Error::DegenerateWeights(format!(
                "{self:?} must be finite, nonnegative, not all zero"
            )));
        }
        if self.appearance + self.positional + self.segmentation <= 0.0 {
            return Err(Error::DegenerateWeights(
                "appearance, positional and segmentation weights are all zero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuideStack {
    pub appearance_src: Image,
    pub appearance_tgt: Image,
    pub positional_src: Image,
    pub positional_tgt: Image,
    pub seg_src: Image,
    pub seg_tgt: Image,
    pub weights: GuideWeights,
}

impl GuideStack {
    pub fn source_dims(&self) -> (usize, usize) {
        self.appearance_src.dims()
    }

    pub fn target_dims(&self) -> (usize, usize) {
        self.appearance_tgt.dims()
    }

    pub fn validate(&self) -> Result<()> {
        let src = [&self.appearance_src, &self.positional_src, &self.seg_src];
        let tgt = [&self.appearance_tgt, &self.positional_tgt, &self.seg_tgt];
        for img in src.iter().skip(1) {
            self.appearance_src
                .check_same_size(img, "source guide channels")?;
        }
        for img in tgt.iter().skip(1) {
            self.appearance_tgt
                .check_same_size(img, "target guide channels")?;
        }
        if !self.weights.is_well_formed() {
            return Err(Error::DegenerateWeights(format!("{:?}", self.weights)));
        }
        Ok(())
    }

    /// Every channel box-downsampled by `factor`.
    pub fn downsample(&self, factor: usize) -> GuideStack {
        GuideStack {
            appearance_src: self.appearance_src.downsample(factor),
            appearance_tgt: self.appearance_tgt.downsample(factor),
            positional_src: self.positional_src.downsample(factor),
            positional_tgt: self.positional_tgt.downsample(factor),
            seg_src: self.seg_src.downsample(factor),
            seg_tgt: self.seg_tgt.downsample(factor),
            weights: self.weights,
        }
    }

    /// Writes every channel as a PNG under `dir` (positional channels get a
    /// zero blue channel).
    pub fn dump_pngs(&self, dir: &Path) -> Result<()> {
        let pos_rgb = |img: &Image| img.map_pixels(3, |s, d| d.copy_from_slice(&[s[0], s[1], 0.0]));
        self.appearance_src
            .save_png(&dir.join("appearance_src.png"))?;
        self.appearance_tgt
            .save_png(&dir.join("appearance_tgt.png"))?;
        pos_rgb(&self.positional_src).save_png(&dir.join("positional_src.png"))?;
        pos_rgb(&self.positional_tgt).save_png(&dir.join("positional_tgt.png"))?;
        self.seg_src.save_png(&dir.join("seg_src.png"))?;
        self.seg_tgt.save_png(&dir.join("seg_tgt.png"))
    }
}

/// One side of a guide pair: tracked parameters plus pixels.
#[derive(Clone, Copy)]
pub struct GuideFrame<'a> {
    pub record: &'a FrameRecord,
    pub image: &'a Image,
    pub mask: &'a Image,
}

/// Positional channel for the source: each pixel's own normalized coordinates.
pub fn normalized_coordinates(width: usize, height: usize) -> Image {
    Image::from_fn(width, height, 2, |x, y, out| {
        out[0] = x as f32 / width as f32;
        out[1] = y as f32 / height as f32;
    })
}

pub fn build_guides(
    src: GuideFrame<'_>,
    tgt: GuideFrame<'_>,
    weights: GuideWeights,
    background: [f32; 3],
) -> Result<GuideStack> {
    let (sw, sh) = src.image.dims();
    let (tw, th) = tgt.image.dims();
    let warp = positional_guide(&src.record.landmarks, &tgt.record.landmarks, (sw, sh))?;
    if (tw, th) != (sw, sh) {
        return Err(Error::SizeMismatch(format!(
            "guide frames must share a resolution: {sw}x{sh} vs {tw}x{th}"
        )));
    }
    let positional_tgt = Image::from_fn(tw, th, 2, |x, y, out| {
        let [px, py] = warp.at(x, y);
        out[0] = px / sw as f32;
        out[1] = py / sh as f32;
    });
    Ok(GuideStack {
        appearance_src: masked(&src.image.to_rgb(), src.mask, &background)?,
        appearance_tgt: masked(&tgt.image.to_rgb(), tgt.mask, &background)?,
        positional_src: normalized_coordinates(sw, sh),
        positional_tgt,
        seg_src: segmentation_guide(src.mask, SEGMENTATION_BLUR_RADIUS)?,
        seg_tgt: segmentation_guide(tgt.mask, SEGMENTATION_BLUR_RADIUS)?,
        weights,
    })
}
