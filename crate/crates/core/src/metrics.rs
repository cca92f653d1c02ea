//! Objective image-sequence metrics: landmark-warped temporal consistency,
//! Laplacian-variance sharpness, and PSNR.
//!
//! Temporal consistency and sharpness are proxies for "temporal
//! consistency" and "high definition" as a human rater would judge them.
//! They are not calibrated against any rating scale.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guides::positional_guide;
use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const METRIC_NOTE: &str = "temporal_consistency and sharpness are objective proxies \
(landmark-warped color error; variance of the luma Laplacian), not human ratings";

fn mask_weight(mask: Option<&Image>, i: usize) -> f64 {
    mask.map_or(1.0, |m| m.data()[i] as f64)
}

fn check_mask(mask: Option<&Image>, image: &Image) -> Result<()> {
    if let Some(m) = mask {
        if m.channels() != 1 {
            return Err(Error::InvalidArgument("mask must be single-channel".into()));
        }
        image.check_same_size(m, "mask")?;
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over masked pixels (mask values weight pixels),
/// capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image, mask: Option<&Image>) -> Result<f64> {
    a.check_same_size(b, "psnr")?;
    if a.channels() != b.channels() {
        return Err(Error::SizeMismatch(format!(
            "psnr: {} vs {} channels",
            a.channels(),
            b.channels()
        )));
    }
    check_mask(mask, a)?;
    let c = a.channels();
    let (mut sum, mut weight) = (0.0f64, 0.0f64);
    for (i, (pa, pb)) in a
        .data()
        .chunks_exact(c)
        .zip(b.data().chunks_exact(c))
        .enumerate()
    {
        let w = mask_weight(mask, i);
        if w <= 0.0 {
            continue;
        }
        let se: f64 = pa
            .iter()
            .zip(pb)
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum();
        sum += w * se;
        weight += w * c as f64;
    }
    if weight == 0.0 {
        return Err(Error::InvalidArgument(
            "psnr: mask selects no pixels".into(),
        ));
    }
    let mse = sum / weight;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Separable `[1 4 6 4 1] / 16` blur with edge replication.
pub fn gaussian_blur5(image: &Image) -> Image {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h) = image.dims();
    let c = image.channels();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horizontal = Image::from_fn(w, h, c, |x, y, out| {
        out.fill(0.0);
        for (k, wk) in K.iter().enumerate() {
            let sx = clamp(x as isize + k as isize - 2, w);
            for (o, v) in out.iter_mut().zip(image.pixel(sx, y)) {
                *o += wk * v;
            }
        }
    });
    Image::from_fn(w, h, c, |x, y, out| {
        out.fill(0.0);
        for (k, wk) in K.iter().enumerate() {
            let sy = clamp(y as isize + k as isize - 2, h);
            for (o, v) in out.iter_mut().zip(horizontal.pixel(x, sy)) {
                *o += wk * v;
            }
        }
    })
}

/// Variance of the 4-neighbor Laplacian of luma over pixels whose mask
/// value exceeds one half (edges replicated).
pub fn sharpness(image: &Image, mask: Option<&Image>) -> Result<f64> {
    check_mask(mask, image)?;
    let luma = image.luma();
    let (w, h) = luma.dims();
    let at = |x: isize, y: isize| {
        luma.get(
            x.clamp(0, w as isize - 1) as usize,
            y.clamp(0, h as isize - 1) as usize,
            0,
        ) as f64
    };
    let mut responses = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| m.get(x, y, 0) <= 0.5) {
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            let lap = at(xi - 1, yi) + at(xi + 1, yi) + at(xi, yi - 1) + at(xi, yi + 1)
                - 4.0 * at(xi, yi);
            responses.push(lap);
        }
    }
    if responses.is_empty() {
        return Err(Error::InvalidArgument("sharpness: empty mask".into()));
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    Ok(responses.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n)
}

/// Mask-weighted mean RGB distance between frame `a` and frame `b` pulled
/// onto `a` through the landmark warp.
pub fn pair_consistency(
    a: &Image,
    b: &Image,
    mask_a: &Image,
    landmarks_a: &[[f64; 2]],
    landmarks_b: &[[f64; 2]],
) -> Result<f64> {
    a.check_same_size(b, "temporal consistency frames")?;
    check_mask(Some(mask_a), a)?;
    let warp = positional_guide(landmarks_b, landmarks_a, a.dims())?;
    let warped = warp.warp(&b.to_rgb());
    let a = a.to_rgb();
    let (mut sum, mut weight) = (0.0f64, 0.0f64);
    for (i, (pa, pb)) in a
        .data()
        .chunks_exact(3)
        .zip(warped.data().chunks_exact(3))
        .enumerate()
    {
        let w = mask_a.data()[i] as f64;
        if w <= 0.0 {
            continue;
        }
        let d: f64 = pa
            .iter()
            .zip(pb)
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum();
        sum += w * d.sqrt();
        weight += w;
    }
    if weight == 0.0 {
        return Err(Error::InvalidArgument(
            "temporal consistency: empty mask".into(),
        ));
    }
    Ok(sum / weight)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalConsistency {
    /// Mean over consecutive pairs; lower is more consistent.
    pub mean: f64,
    /// Entry `i` compares frame `i` with frame `i + 1`.
    pub per_pair: Vec<f64>,
}

/// Temporal consistency of a frame sequence, in `[0, sqrt(3)]`.
pub fn temporal_consistency(
    frames: &[Image],
    masks: &[Image],
    landmarks: &[Vec<[f64; 2]>],
) -> Result<TemporalConsistency> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "temporal consistency needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    if masks.len() != frames.len() || landmarks.len() != frames.len() {
        return Err(Error::CountMismatch {
            expected: frames.len(),
            got: masks.len().min(landmarks.len()),
        });
    }
    let per_pair = (0..frames.len() - 1)
        .map(|i| {
            pair_consistency(
                &frames[i],
                &frames[i + 1],
                &masks[i],
                &landmarks[i],
                &landmarks[i + 1],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(TemporalConsistency { mean, per_pair })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesStat {
    pub mean: f64,
    pub per_frame: Vec<f64>,
}

impl SeriesStat {
    fn from_values(per_frame: Vec<f64>) -> Self {
        let mean = per_frame.iter().sum::<f64>() / per_frame.len().max(1) as f64;
        Self { mean, per_frame }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub frames: usize,
    pub temporal_consistency: Option<TemporalConsistency>,
    pub sharpness: SeriesStat,
    pub psnr: Option<SeriesStat>,
    pub note: String,
}

/// All metrics for one frame set; PSNR only when a reference set is given.
pub fn evaluate_frames(
    label: &str,
    frames: &[Image],
    masks: &[Image],
    landmarks: &[Vec<[f64; 2]>],
    reference: Option<&[Image]>,
) -> Result<MetricReport> {
    if masks.len() != frames.len() {
        return Err(Error::CountMismatch {
            expected: frames.len(),
            got: masks.len(),
        });
    }
    let temporal_consistency = if frames.len() >= 2 {
        Some(temporal_consistency(frames, masks, landmarks)?)
    } else {
        None
    };
    let sharp = frames
        .iter()
        .zip(masks)
        .map(|(f, m)| sharpness(f, Some(m)))
        .collect::<Result<Vec<_>>>()?;
    let psnr = match reference {
        Some(refs) => {
            if refs.len() != frames.len() {
                return Err(Error::CountMismatch {
                    expected: frames.len(),
                    got: refs.len(),
                });
            }
            let values = frames
                .iter()
                .zip(refs)
                .zip(masks)
                .map(|((f, r), m)| psnr(f, r, Some(m)))
                .collect::<Result<Vec<_>>>()?;
            Some(SeriesStat::from_values(values))
        }
        None => None,
    };
    Ok(MetricReport {
        label: label.to_string(),
        frames: frames.len(),
        temporal_consistency,
        sharpness: SeriesStat::from_values(sharp),
        psnr,
        note: METRIC_NOTE.to_string(),
    })
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One row per frame: index, sharpness, psnr (blank when absent), and the
    /// consistency of the pair starting at that frame (blank for the last).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("frame,sharpness,psnr,temporal_consistency_next\n");
        for i in 0..self.frames {
            let psnr = self
                .psnr
                .as_ref()
                .map(|p| p.per_frame[i].to_string())
                .unwrap_or_default();
            let tc = self
                .temporal_consistency
                .as_ref()
                .and_then(|t| t.per_pair.get(i))
                .map(|v| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{i},{},{psnr},{tc}\n",
                self.sharpness.per_frame[i]
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
