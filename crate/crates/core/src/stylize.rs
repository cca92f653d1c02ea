//! Exemplar-guided patch synthesis.
//!
//! Given a [`GuideStack`] relating an exemplar frame (source) to a target
//! frame, and the edited exemplar (the *style*), this module synthesizes the
//! target as it would look with the same edit. A nearest-neighbor field
//! ([`NnField`]) assigns every target patch a source patch; PatchMatch
//! refines it by propagating good offsets to neighbors and sampling around
//! the current best at exponentially shrinking radii. Voting averages the
//! style pixels of all matched patches covering a target pixel. Both run
//! coarse-to-fine over an image pyramid, with the style term of the energy
//! switched on once a first voted output exists at a level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FrameDataset;
use crate::error::{Error, Result};
use crate::guides::{build_guides, GuideFrame, GuideStack, GuideWeights};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisParams {
    /// Odd patch side length in pixels.
    pub patch_size: usize,
    /// Coarsening stops once the smaller image side is at most this.
    pub pyramid_min_dim: usize,
    pub pyramid_factor: usize,
    /// PatchMatch sweeps per search.
    pub pm_iterations: usize,
    /// Search + vote rounds per pyramid level.
    pub em_rounds: usize,
    pub random_search_radius_decay: f32,
    pub rng_seed: u64,
    pub weights: GuideWeights,
    /// Color that masked-out appearance pixels are composited over.
    pub background: [f32; 3],
}

impl Default for SynthesisParams {
    fn default() -> Self {
        Self {
            patch_size: 5,
            pyramid_min_dim: 32,
            pyramid_factor: 2,
            pm_iterations: 6,
            em_rounds: 3,
            random_search_radius_decay: 0.5,
            rng_seed: 0,
            weights: GuideWeights::default(),
            background: [1.0; 3],
        }
    }
}

impl SynthesisParams {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "patch_size must be odd and >= 3, got {}",
                self.patch_size
            )));
        }
        if self.pm_iterations == 0 || self.em_rounds == 0 {
            return Err(Error::InvalidArgument(
                "pm_iterations and em_rounds must be >= 1".into(),
            ));
        }
        if self.pyramid_factor < 2 {
            return Err(Error::InvalidArgument("pyramid_factor must be >= 2".into()));
        }
        let decay = self.random_search_radius_decay;
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "random_search_radius_decay must lie in (0, 1), got {decay}"
            )));
        }
        self.weights.check_usable()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NnEntry {
    /// Source patch center.
    pub x: u32,
    pub y: u32,
    pub cost: f32,
}

/// Nearest-neighbor field over the grid of target patch centers.
///
/// Grid cell `(gx, gy)` is the target patch centered at `(gx + r, gy + r)`
/// with `r = patch_size / 2`, so every patch lies fully inside the target;
/// entries likewise keep the full source patch inside the source.
#[derive(Clone, Debug, PartialEq)]
pub struct NnField {
    width: usize,
    height: usize,
    patch_size: usize,
    entries: Vec<NnEntry>,
}

impl NnField {
    pub fn from_entries(
        width: usize,
        height: usize,
        patch_size: usize,
        entries: Vec<NnEntry>,
    ) -> Result<Self> {
        if entries.len() != width * height {
            return Err(Error::SizeMismatch(format!(
                "{} entries for a {width}x{height} field",
                entries.len()
            )));
        }
        Ok(Self {
            width,
            height,
            patch_size,
            entries,
        })
    }

    /// Every target patch mapped to the same location in the source.
    pub fn identity(target_dims: (usize, usize), patch_size: usize) -> Self {
        let r = patch_size / 2;
        let (w, h) = grid_dims(target_dims, patch_size);
        let entries = (0..h)
            .flat_map(|gy| {
                (0..w).map(move |gx| NnEntry {
                    x: (gx + r) as u32,
                    y: (gy + r) as u32,
                    cost: 0.0,
                })
            })
            .collect();
        Self {
            width: w,
            height: h,
            patch_size,
            entries,
        }
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Size of the target image this field covers.
    pub fn target_dims(&self) -> (usize, usize) {
        (
            self.width + 2 * self.radius(),
            self.height + 2 * self.radius(),
        )
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.patch_size / 2
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[NnEntry] {
        &self.entries
    }

    /// Entry for the target patch centered at `(x, y)`.
    pub fn at_center(&self, x: usize, y: usize) -> NnEntry {
        let r = self.radius();
        self.entries[(y - r) * self.width + (x - r)]
    }

    pub fn total_cost(&self) -> f64 {
        self.entries.iter().map(|e| e.cost as f64).sum()
    }

    pub fn mean_cost(&self) -> f64 {
        self.total_cost() / self.entries.len().max(1) as f64
    }
}

fn grid_dims((w, h): (usize, usize), patch_size: usize) -> (usize, usize) {
    (
        w.saturating_sub(patch_size - 1),
        h.saturating_sub(patch_size - 1),
    )
}

/// Matching energy between target patch `p` and source patch `q` (centers),
/// evaluated straight from the guide channels:
///
/// `sum_offsets w_app |A_t - A_s|² + w_pos |P_t - P_s|² + w_seg |S_t - S_s|²`
/// plus `w_sty sum_offsets |current - style|²` when `current` is given.
pub fn patch_cost(
    guides: &GuideStack,
    style: &Image,
    current: Option<&Image>,
    p: (usize, usize),
    q: (usize, usize),
    patch_size: usize,
) -> Result<f32> {
    let r = patch_size / 2;
    let inside =
        |(x, y): (usize, usize), (w, h): (usize, usize)| x >= r && y >= r && x + r < w && y + r < h;
    if !inside(p, guides.target_dims()) {
        return Err(Error::OutOfBounds(format!("target patch at {p:?}")));
    }
    if !inside(q, guides.source_dims()) {
        return Err(Error::OutOfBounds(format!("source patch at {q:?}")));
    }
    let w = guides.weights;
    let sq = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>();
    let mut cost = 0.0f32;
    for dy in 0..patch_size {
        for dx in 0..patch_size {
            let (tx, ty) = (p.0 + dx - r, p.1 + dy - r);
            let (sx, sy) = (q.0 + dx - r, q.1 + dy - r);
            cost += w.appearance
                * sq(
                    guides.appearance_tgt.pixel(tx, ty),
                    guides.appearance_src.pixel(sx, sy),
                );
            cost += w.positional
                * sq(
                    guides.positional_tgt.pixel(tx, ty),
                    guides.positional_src.pixel(sx, sy),
                );
            cost += w.segmentation * sq(guides.seg_tgt.pixel(tx, ty), guides.seg_src.pixel(sx, sy));
            if let Some(cur) = current {
                cost += w.style * sq(cur.pixel(tx, ty), style.pixel(sx, sy));
            }
        }
    }
    Ok(cost)
}

/// Per-pixel feature vectors with the square roots of the energy weights
/// folded in, so a patch cost is one squared distance over contiguous rows.
struct Features {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Features {
    fn pack(app: &Image, pos: &Image, seg: &Image, extra: Option<&Image>, w: GuideWeights) -> Self {
        let (width, height) = app.dims();
        let dim = 6 + if extra.is_some() { 3 } else { 0 };
        let (sa, sp, ss, st) = (
            w.appearance.sqrt(),
            w.positional.sqrt(),
            w.segmentation.sqrt(),
            w.style.sqrt(),
        );
        let mut data = Vec::with_capacity(width * height * dim);
        for y in 0..height {
            for x in 0..width {
                data.extend(app.pixel(x, y)[..3].iter().map(|v| v * sa));
                data.extend(pos.pixel(x, y).iter().map(|v| v * sp));
                data.push(seg.get(x, y, 0) * ss);
                if let Some(e) = extra {
                    data.extend(e.pixel(x, y)[..3].iter().map(|v| v * st));
                }
            }
        }
        Self {
            width,
            height,
            dim,
            data,
        }
    }
}

/// Packed source/target features for one search.
struct Matcher {
    tgt: Features,
    src: Features,
    patch_size: usize,
}

impl Matcher {
    fn new(guides: &GuideStack, style: &Image, current: Option<&Image>, patch_size: usize) -> Self {
        let w = guides.weights;
        let tgt = Features::pack(
            &guides.appearance_tgt,
            &guides.positional_tgt,
            &guides.seg_tgt,
            current,
            w,
        );
        let src = Features::pack(
            &guides.appearance_src,
            &guides.positional_src,
            &guides.seg_src,
            current.map(|_| style),
            w,
        );
        Self {
            tgt,
            src,
            patch_size,
        }
    }

    /// Patch distance between target center `p` and source center `q`;
    /// gives up (returning something `>= bound`) once the partial sum
    /// exceeds `bound`.
    #[inline]
    fn cost(&self, p: (usize, usize), q: (usize, usize), bound: f32) -> f32 {
        let r = self.patch_size / 2;
        let dim = self.tgt.dim;
        let row_len = self.patch_size * dim;
        let mut total = 0.0f32;
        for dy in 0..self.patch_size {
            let ti = ((p.1 + dy - r) * self.tgt.width + (p.0 - r)) * dim;
            let si = ((q.1 + dy - r) * self.src.width + (q.0 - r)) * dim;
            let a = &self.tgt.data[ti..ti + row_len];
            let b = &self.src.data[si..si + row_len];
            total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>();
            if total >= bound {
                return total;
            }
        }
        total
    }

    fn source_range(&self) -> (i64, i64, i64, i64) {
        let r = (self.patch_size / 2) as i64;
        (
            r,
            r,
            self.src.width as i64 - 1 - r,
            self.src.height as i64 - 1 - r,
        )
    }
}

fn check_search_inputs(guides: &GuideStack, style: &Image, params: &SynthesisParams) -> Result<()> {
    params.validate()?;
    guides.validate()?;
    guides.weights.check_usable()?;
    guides
        .appearance_src
        .check_same_size(style, "style vs source guides")?;
    let (tw, th) = guides.target_dims();
    let (sw, sh) = guides.source_dims();
    if tw.min(th).min(sw).min(sh) < params.patch_size {
        return Err(Error::InvalidArgument(format!(
            "images smaller than patch size {}: target {tw}x{th}, source {sw}x{sh}",
            params.patch_size
        )));
    }
    Ok(())
}

/// PatchMatch over the guide stack. Starts from `init` (or a uniformly
/// random field), recomputes its costs under the current energy, then runs
/// `pm_iterations` greedy sweeps alternating scan direction.
pub fn nnf_search(
    guides: &GuideStack,
    style: &Image,
    current: Option<&Image>,
    params: &SynthesisParams,
    init: Option<&NnField>,
) -> Result<NnField> {
    nnf_search_traced(guides, style, current, params, init).map(|(nnf, _)| nnf)
}

/// [`nnf_search`] that also returns the total field cost after
/// initialization and after every sweep.
pub fn nnf_search_traced(
    guides: &GuideStack,
    style: &Image,
    current: Option<&Image>,
    params: &SynthesisParams,
    init: Option<&NnField>,
) -> Result<(NnField, Vec<f64>)> {
    check_search_inputs(guides, style, params)?;
    if let Some(cur) = current {
        guides
            .appearance_tgt
            .check_same_size(cur, "current output vs target guides")?;
    }
    let matcher = Matcher::new(guides, style, current, params.patch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let (gw, gh) = grid_dims(guides.target_dims(), params.patch_size);
    let (x_lo, y_lo, x_hi, y_hi) = matcher.source_range();
    let r = params.patch_size / 2;

    let mut entries: Vec<NnEntry> = match init {
        Some(nnf) => {
            if nnf.grid_dims() != (gw, gh) || nnf.patch_size != params.patch_size {
                return Err(Error::SizeMismatch(format!(
                    "init field {:?} (patch {}) vs target grid {:?} (patch {})",
                    nnf.grid_dims(),
                    nnf.patch_size,
                    (gw, gh),
                    params.patch_size
                )));
            }
            nnf.entries
                .iter()
                .map(|e| NnEntry {
                    x: (e.x as i64).clamp(x_lo, x_hi) as u32,
                    y: (e.y as i64).clamp(y_lo, y_hi) as u32,
                    cost: 0.0,
                })
                .collect()
        }
        None => (0..gw * gh)
            .map(|_| NnEntry {
                x: rng.random_range(x_lo..=x_hi) as u32,
                y: rng.random_range(y_lo..=y_hi) as u32,
                cost: 0.0,
            })
            .collect(),
    };
    for (i, e) in entries.iter_mut().enumerate() {
        let p = (i % gw + r, i / gw + r);
        e.cost = matcher.cost(p, (e.x as usize, e.y as usize), f32::INFINITY);
    }

    let total = |entries: &[NnEntry]| entries.iter().map(|e| e.cost as f64).sum::<f64>();
    let mut trace = vec![total(&entries)];
    let max_radius = matcher.src.width.max(matcher.src.height) as f32;

    for sweep in 0..params.pm_iterations {
        let forward = sweep % 2 == 0;
        let step: i64 = if forward { 1 } else { -1 };
        for k in 0..gw * gh {
            let idx = if forward { k } else { gw * gh - 1 - k };
            let (gx, gy) = (idx % gw, idx / gw);
            let p = (gx + r, gy + r);
            let mut best = entries[idx];

            // propagation from the already-visited horizontal and vertical neighbors
            let neighbors = [
                (gx as i64 - step, gy as i64, step, 0i64),
                (gx as i64, gy as i64 - step, 0, step),
            ];
            for (nx, ny, ox, oy) in neighbors {
                if nx < 0 || ny < 0 || nx >= gw as i64 || ny >= gh as i64 {
                    continue;
                }
                let n = entries[ny as usize * gw + nx as usize];
                let (qx, qy) = (n.x as i64 + ox, n.y as i64 + oy);
                if qx < x_lo || qx > x_hi || qy < y_lo || qy > y_hi {
                    continue;
                }
                if (qx as u32, qy as u32) == (best.x, best.y) {
                    continue;
                }
                let c = matcher.cost(p, (qx as usize, qy as usize), best.cost);
                if c < best.cost {
                    best = NnEntry {
                        x: qx as u32,
                        y: qy as u32,
                        cost: c,
                    };
                }
            }

            // random search around the current best
            let mut radius = max_radius;
            while radius >= 1.0 {
                let rad = radius as i64;
                let (bx, by) = (best.x as i64, best.y as i64);
                let qx = rng.random_range((bx - rad).max(x_lo)..=(bx + rad).min(x_hi));
                let qy = rng.random_range((by - rad).max(y_lo)..=(by + rad).min(y_hi));
                let c = matcher.cost(p, (qx as usize, qy as usize), best.cost);
                if c < best.cost {
                    best = NnEntry {
                        x: qx as u32,
                        y: qy as u32,
                        cost: c,
                    };
                }
                radius *= params.random_search_radius_decay;
            }
            entries[idx] = best;
        }
        trace.push(total(&entries));
    }

    Ok((
        NnField {
            width: gw,
            height: gh,
            patch_size: params.patch_size,
            entries,
        },
        trace,
    ))
}

/// Reconstructs the target: every pixel is the uniform average of the style
/// pixels that matched patches place on it.
pub fn vote(nnf: &NnField, style: &Image, patch_size: usize) -> Result<Image> {
    if nnf.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot vote with an empty nearest-neighbor field".into(),
        ));
    }
    if patch_size != nnf.patch_size {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} does not match field patch size {}",
            nnf.patch_size
        )));
    }
    let r = nnf.radius();
    let (w, h) = nnf.target_dims();
    let c = style.channels();
    let (sw, sh) = style.dims();
    if nnf
        .entries
        .iter()
        .any(|e| e.x as usize + r >= sw || e.y as usize + r >= sh)
    {
        return Err(Error::OutOfBounds(
            "field points outside the style image".into(),
        ));
    }
    let mut acc = vec![0.0f64; w * h * c];
    let mut counts = vec![0u32; w * h];
    for (i, e) in nnf.entries.iter().enumerate() {
        let (px, py) = (i % nnf.width, i / nnf.width);
        for dy in 0..patch_size {
            for dx in 0..patch_size {
                let t = (py + dy) * w + (px + dx);
                let s = style.pixel(e.x as usize + dx - r, e.y as usize + dy - r);
                for (a, v) in acc[t * c..(t + 1) * c].iter_mut().zip(s) {
                    *a += *v as f64;
                }
                counts[t] += 1;
            }
        }
    }
    let mut out = Vec::with_capacity(w * h * c);
    for (px, &n) in acc.chunks_exact(c).zip(&counts) {
        out.extend(px.iter().map(|v| (v / n as f64) as f32));
    }
    Image::from_vec(w, h, c, out)
}

/// Seeds the coarsest field from the positional guide: each target patch
/// starts at the source location its positional channel points to.
fn positional_init(guides: &GuideStack, patch_size: usize) -> NnField {
    let r = patch_size / 2;
    let (sw, sh) = guides.source_dims();
    let (gw, gh) = grid_dims(guides.target_dims(), patch_size);
    let mut entries = Vec::with_capacity(gw * gh);
    for gy in 0..gh {
        for gx in 0..gw {
            let pos = guides.positional_tgt.pixel(gx + r, gy + r);
            let x = (pos[0] * sw as f32).round() as i64;
            let y = (pos[1] * sh as f32).round() as i64;
            entries.push(NnEntry {
                x: x.clamp(r as i64, (sw - 1 - r) as i64) as u32,
                y: y.clamp(r as i64, (sh - 1 - r) as i64) as u32,
                cost: 0.0,
            });
        }
    }
    NnField {
        width: gw,
        height: gh,
        patch_size,
        entries,
    }
}

/// Lifts a coarse field to the next finer level: the coarse match of the
/// parent patch is scaled by `factor` and the sub-cell offset preserved.
fn upsample_nnf(
    coarse: &NnField,
    factor: usize,
    target_dims: (usize, usize),
    source_dims: (usize, usize),
) -> NnField {
    let patch_size = coarse.patch_size;
    let r = patch_size / 2;
    let (gw, gh) = grid_dims(target_dims, patch_size);
    let (cw, ch) = coarse.target_dims();
    let (sw, sh) = source_dims;
    let mut entries = Vec::with_capacity(gw * gh);
    for gy in 0..gh {
        for gx in 0..gw {
            let (px, py) = (gx + r, gy + r);
            let cx = (px / factor).clamp(r, cw - 1 - r);
            let cy = (py / factor).clamp(r, ch - 1 - r);
            let e = coarse.at_center(cx, cy);
            let x = (e.x as i64) * factor as i64 + px as i64 - (cx * factor) as i64;
            let y = (e.y as i64) * factor as i64 + py as i64 - (cy * factor) as i64;
            entries.push(NnEntry {
                x: x.clamp(r as i64, (sw - 1 - r) as i64) as u32,
                y: y.clamp(r as i64, (sh - 1 - r) as i64) as u32,
                cost: 0.0,
            });
        }
    }
    NnField {
        width: gw,
        height: gh,
        patch_size,
        entries,
    }
}

fn level_seed(root: u64, level: usize, round: usize) -> u64 {
    root.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((level as u64) << 32)
        .wrapping_add(round as u64)
}

/// Synthesizes the full-resolution stylized target, coarse to fine.
pub fn synthesize_frame(
    guides: &GuideStack,
    style: &Image,
    params: &SynthesisParams,
) -> Result<Image> {
    check_search_inputs(guides, style, params)?;
    let style = style.to_rgb();
    let factor = params.pyramid_factor;
    let mut levels = vec![(guides.clone(), style)];
    loop {
        let (g, s) = levels.last().expect("nonempty");
        let (tw, th) = g.target_dims();
        let (sw, sh) = g.source_dims();
        let min_dim = tw.min(th).min(sw).min(sh);
        if min_dim <= params.pyramid_min_dim || min_dim.div_ceil(factor) < params.patch_size {
            break;
        }
        let next = (g.downsample(factor), s.downsample(factor));
        levels.push(next);
    }

    let mut nnf: Option<NnField> = None;
    let mut output = None;
    for (level, (g, s)) in levels.iter().enumerate().rev() {
        let mut field = match nnf.take() {
            None => positional_init(g, params.patch_size),
            Some(coarse) => upsample_nnf(&coarse, factor, g.target_dims(), g.source_dims()),
        };
        let mut current: Option<Image> = None;
        for round in 0..params.em_rounds {
            let level_params = SynthesisParams {
                rng_seed: level_seed(params.rng_seed, level, round),
                ..params.clone()
            };
            field = nnf_search(g, s, current.as_ref(), &level_params, Some(&field))?;
            current = Some(vote(&field, s, params.patch_size)?);
        }
        output = current;
        nnf = Some(field);
    }
    Ok(output.expect("at least one level"))
}

/// Propagates the edited exemplar to every frame. `targets` holds the frames
/// to stylize (original frames or avatar renders); the exemplar's own slot
/// in `targets` serves as the unedited source appearance. The exemplar slot
/// of the result is `edited_exemplar` itself.
pub fn propagate_sequence(
    dataset: &FrameDataset,
    exemplar_index: usize,
    edited_exemplar: &Image,
    targets: &[Image],
    params: &SynthesisParams,
) -> Result<Vec<Image>> {
    let masks = dataset.load_masks()?;
    propagate_with_masks(
        dataset,
        &masks,
        exemplar_index,
        edited_exemplar,
        targets,
        params,
    )
}

/// [`propagate_sequence`] with masks already in memory.
pub fn propagate_with_masks(
    dataset: &FrameDataset,
    masks: &[Image],
    exemplar_index: usize,
    edited_exemplar: &Image,
    targets: &[Image],
    params: &SynthesisParams,
) -> Result<Vec<Image>> {
    if exemplar_index >= dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "exemplar index {exemplar_index} out of range for {} frames",
            dataset.len()
        )));
    }
    if targets.len() != dataset.len() || masks.len() != dataset.len() {
        return Err(Error::CountMismatch {
            expected: dataset.len(),
            got: targets.len().min(masks.len()),
        });
    }
    params.validate()?;
    let src = GuideFrame {
        record: &dataset.frames[exemplar_index],
        image: &targets[exemplar_index],
        mask: &masks[exemplar_index],
    };
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            if i == exemplar_index {
                return Ok(edited_exemplar.clone());
            }
            let tgt = GuideFrame {
                record: &dataset.frames[i],
                image: &targets[i],
                mask: &masks[i],
            };
            let stack = build_guides(src, tgt, params.weights, params.background)?;
            let frame_params = SynthesisParams {
                rng_seed: params.rng_seed.wrapping_add(i as u64 * 7919),
                ..params.clone()
            };
            synthesize_frame(&stack, edited_exemplar, &frame_params)
        })
        .collect()
}
