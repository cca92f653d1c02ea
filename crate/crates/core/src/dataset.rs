//! Frame datasets: tracked head-video frames on disk.
//!
//! Layout:
//!
//! ```text
//! root/manifest.json
//! root/frames/NNNNNN.png   RGB, 8-bit
//! root/masks/NNNNNN.png    grayscale, 8-bit
//! ```
//!
//! The manifest carries the camera intrinsics, the frame rate, and for every
//! frame its image and mask paths (relative to `root`), a camera-to-world
//! pose as 16 row-major numbers, the expression coefficients, and the 2D
//! facial landmarks in pixel coordinates.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::camera::{Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Tolerance on `R^T R = I` for manifest poses.
pub const POSE_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    #[serde(rename = "image")]
    pub image_path: PathBuf,
    #[serde(rename = "mask")]
    pub mask_path: PathBuf,
    pub pose: Pose,
    pub expression: Vec<f64>,
    pub landmarks: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    fps: f64,
    intrinsics: Intrinsics,
    frames: Vec<FrameRecord>,
}

#[derive(Clone, Debug)]
pub struct FrameDataset {
    pub root: PathBuf,
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameRecord>,
    pub fps: f64,
}

impl FrameDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Number of expression coefficients per frame (0 for an empty dataset).
    pub fn expression_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.expression.len())
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.frames[i].image_path)
    }

    pub fn mask_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.frames[i].mask_path)
    }

    /// Loads frame `i` as RGB.
    pub fn load_image(&self, i: usize) -> Result<Image> {
        Ok(Image::load_png(&self.image_path(i))?.to_rgb())
    }

    /// Loads the single-channel mask of frame `i`.
    pub fn load_mask(&self, i: usize) -> Result<Image> {
        let m = Image::load_png(&self.mask_path(i))?;
        Ok(if m.channels() == 1 { m } else { m.luma() })
    }

    pub fn load_images(&self) -> Result<Vec<Image>> {
        (0..self.len()).map(|i| self.load_image(i)).collect()
    }

    pub fn load_masks(&self) -> Result<Vec<Image>> {
        (0..self.len()).map(|i| self.load_mask(i)).collect()
    }

    /// Frame `i` composited over `background` by its mask.
    pub fn load_masked(&self, i: usize, background: [f32; 3]) -> Result<Image> {
        masked(&self.load_image(i)?, &self.load_mask(i)?, &background)
    }

    fn to_manifest(&self) -> Manifest {
        Manifest {
            fps: self.fps,
            intrinsics: self.intrinsics,
            frames: self.frames.clone(),
        }
    }
}

/// Reads and validates `root/manifest.json`.
pub fn load_dataset(root: &Path) -> Result<FrameDataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("manifest is not valid JSON: {e}")))?;
    let manifest = parse_manifest(&value)?;
    let dataset = FrameDataset {
        root: root.to_path_buf(),
        intrinsics: manifest.intrinsics,
        frames: manifest.frames,
        fps: manifest.fps,
    };
    validate(&dataset)?;
    Ok(dataset)
}

fn field<'a>(obj: &'a Value, name: &str, ctx: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::Schema(format!("{ctx}: missing field `{name}`")))
}

fn number(v: &Value, name: &str, ctx: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Schema(format!("{ctx}: field `{name}` must be a number")))
}

fn numbers(v: &Value, name: &str, ctx: &str) -> Result<Vec<f64>> {
    let arr = v.as_array().ok_or_else(|| {
        Error::Schema(format!("{ctx}: field `{name}` must be an array of numbers"))
    })?;
    arr.iter().map(|x| number(x, name, ctx)).collect()
}

fn count(v: &Value, name: &str, ctx: &str) -> Result<usize> {
    v.as_u64().map(|n| n as usize).ok_or_else(|| {
        Error::Schema(format!(
            "{ctx}: field `{name}` must be a nonnegative integer"
        ))
    })
}

fn path(v: &Value, name: &str, ctx: &str) -> Result<PathBuf> {
    v.as_str()
        .map(PathBuf::from)
        .ok_or_else(|| Error::Schema(format!("{ctx}: field `{name}` must be a string path")))
}

fn parse_manifest(v: &Value) -> Result<Manifest> {
    let ctx = "manifest";
    let fps = number(field(v, "fps", ctx)?, "fps", ctx)?;
    let k = field(v, "intrinsics", ctx)?;
    let ictx = "intrinsics";
    let intrinsics = Intrinsics {
        fx: number(field(k, "fx", ictx)?, "fx", ictx)?,
        fy: number(field(k, "fy", ictx)?, "fy", ictx)?,
        cx: number(field(k, "cx", ictx)?, "cx", ictx)?,
        cy: number(field(k, "cy", ictx)?, "cy", ictx)?,
        width: count(field(k, "width", ictx)?, "width", ictx)?,
        height: count(field(k, "height", ictx)?, "height", ictx)?,
    };
    let frames_v = field(v, "frames", ctx)?
        .as_array()
        .ok_or_else(|| Error::Schema("manifest: field `frames` must be an array".into()))?;
    let mut frames = Vec::with_capacity(frames_v.len());
    for (pos, f) in frames_v.iter().enumerate() {
        let ctx = format!("frame {pos}");
        let ctx = ctx.as_str();
        let pose = numbers(field(f, "pose", ctx)?, "pose", ctx)?;
        let pose: [f64; 16] = pose
            .try_into()
            .map_err(|_| Error::Schema(format!("{ctx}: field `pose` must hold 16 numbers")))?;
        let landmarks_v = field(f, "landmarks", ctx)?
            .as_array()
            .ok_or_else(|| Error::Schema(format!("{ctx}: field `landmarks` must be an array")))?;
        let mut landmarks = Vec::with_capacity(landmarks_v.len());
        for l in landmarks_v {
            let xy = numbers(l, "landmarks", ctx)?;
            let xy: [f64; 2] = xy
                .try_into()
                .map_err(|_| Error::Schema(format!("{ctx}: each landmark must be [x, y]")))?;
            landmarks.push(xy);
        }
        frames.push(FrameRecord {
            index: count(field(f, "index", ctx)?, "index", ctx)?,
            image_path: path(field(f, "image", ctx)?, "image", ctx)?,
            mask_path: path(field(f, "mask", ctx)?, "mask", ctx)?,
            pose: Pose(pose),
            expression: numbers(field(f, "expression", ctx)?, "expression", ctx)?,
            landmarks,
        });
    }
    Ok(Manifest {
        fps,
        intrinsics,
        frames,
    })
}

/// Checks every dataset invariant, including file presence and resolution.
pub fn validate(ds: &FrameDataset) -> Result<()> {
    if !(ds.fps > 0.0 && ds.fps.is_finite()) {
        return Err(Error::Schema(format!(
            "manifest: fps must be positive, got {}",
            ds.fps
        )));
    }
    ds.intrinsics.validate()?;
    let (w, h) = (ds.intrinsics.width, ds.intrinsics.height);
    let first = ds.frames.first();
    for (pos, f) in ds.frames.iter().enumerate() {
        if pos > 0 && f.index <= ds.frames[pos - 1].index {
            return Err(Error::Schema(format!(
                "frame {pos}: index {} not strictly increasing",
                f.index
            )));
        }
        if let Err(msg) = f.pose.check_rigid(POSE_TOLERANCE) {
            return Err(Error::Schema(format!(
                "frame {}: field `pose`: {msg}",
                f.index
            )));
        }
        let first = first.expect("nonempty");
        if f.expression.len() != first.expression.len() {
            return Err(Error::InconsistentLength {
                what: "expression",
                frame: f.index,
            });
        }
        if f.landmarks.len() != first.landmarks.len() {
            return Err(Error::InconsistentLength {
                what: "landmark",
                frame: f.index,
            });
        }
        if f.expression.iter().any(|e| !e.is_finite()) {
            return Err(Error::Schema(format!(
                "frame {}: field `expression` not finite",
                f.index
            )));
        }
        for l in &f.landmarks {
            let inside =
                (-0.5..=w as f64 - 0.5).contains(&l[0]) && (-0.5..=h as f64 - 0.5).contains(&l[1]);
            if !inside {
                return Err(Error::Schema(format!(
                    "frame {}: landmark ({}, {}) outside {w}x{h} image",
                    f.index, l[0], l[1]
                )));
            }
        }
        for rel in [&f.image_path, &f.mask_path] {
            let full = ds.root.join(rel);
            if !full.is_file() {
                return Err(Error::MissingFile(rel.clone()));
            }
            let (iw, ih) = image::image_dimensions(&full).map_err(|e| Error::Codec {
                path: full.clone(),
                message: e.to_string(),
            })?;
            if (iw as usize, ih as usize) != (w, h) {
                return Err(Error::SizeMismatch(format!(
                    "frame {}: {} is {iw}x{ih}, intrinsics say {w}x{h}",
                    f.index,
                    rel.display()
                )));
            }
        }
    }
    Ok(())
}

fn write_manifest(dir: &Path, ds: &FrameDataset) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&ds.to_manifest()).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Writes a complete dataset directory (frames, masks, manifest) and loads it
/// back. Record image/mask paths are overwritten with the standard layout.
pub fn write_dataset(
    root: &Path,
    intrinsics: Intrinsics,
    fps: f64,
    frames: Vec<FrameRecord>,
    images: &[Image],
    masks: &[Image],
) -> Result<FrameDataset> {
    if images.len() != frames.len() || masks.len() != frames.len() {
        return Err(Error::CountMismatch {
            expected: frames.len(),
            got: images.len().min(masks.len()),
        });
    }
    let mut frames = frames;
    for ((f, img), mask) in frames.iter_mut().zip(images).zip(masks) {
        let name = frame_file_name(f.index);
        f.image_path = Path::new("frames").join(&name);
        f.mask_path = Path::new("masks").join(&name);
        img.save_png(&root.join(&f.image_path))?;
        mask.save_png(&root.join(&f.mask_path))?;
    }
    let ds = FrameDataset {
        root: root.to_path_buf(),
        intrinsics,
        frames,
        fps,
    };
    write_manifest(root, &ds)?;
    load_dataset(root)
}

/// Persists a replacement image set for `dataset` as `out/label/NNNNNN.png`
/// plus masks and a manifest, so the directory loads as a dataset of its own.
pub fn save_frameset(
    dataset: &FrameDataset,
    images: &[Image],
    out: &Path,
    label: &str,
) -> Result<PathBuf> {
    if images.len() != dataset.len() {
        return Err(Error::CountMismatch {
            expected: dataset.len(),
            got: images.len(),
        });
    }
    let dir = out.join(label);
    fs::create_dir_all(dir.join("masks")).map_err(|e| Error::io(&dir, e))?;
    let mut frames = dataset.frames.clone();
    for (i, (f, img)) in frames.iter_mut().zip(images).enumerate() {
        let name = frame_file_name(f.index);
        img.save_png(&dir.join(&name))?;
        let mask_rel = Path::new("masks").join(&name);
        let mask_src = dataset.mask_path(i);
        let mask_dst = dir.join(&mask_rel);
        if mask_src != mask_dst {
            fs::copy(&mask_src, &mask_dst).map_err(|e| Error::io(&mask_src, e))?;
        }
        f.image_path = PathBuf::from(name);
        f.mask_path = mask_rel;
    }
    let saved = FrameDataset {
        root: dir.clone(),
        intrinsics: dataset.intrinsics,
        frames,
        fps: dataset.fps,
    };
    write_manifest(&dir, &saved)?;
    Ok(dir)
}

/// `mask * image + (1 - mask) * background`, per pixel.
pub fn masked(image: &Image, mask: &Image, background: &[f32]) -> Result<Image> {
    if mask.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "mask must be single-channel, got {} channels",
            mask.channels()
        )));
    }
    image.check_same_size(mask, "masked")?;
    if background.len() != image.channels() {
        return Err(Error::InvalidArgument(format!(
            "background has {} channels, image has {}",
            background.len(),
            image.channels()
        )));
    }
    let mut out = image.clone();
    let c = image.channels();
    for (px, &m) in out.data_mut().chunks_exact_mut(c).zip(mask.data()) {
        for (v, &b) in px.iter_mut().zip(background) {
            *v = m * *v + (1.0 - m) * b;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture(dir: &Path, n: usize, m: usize, l: usize) -> FrameDataset {
        let k = Intrinsics::from_fov(8, 6, 0.8);
        let frames: Vec<_> = (0..n)
            .map(|i| FrameRecord {
                index: i,
                image_path: PathBuf::new(),
                mask_path: PathBuf::new(),
                pose: Pose::IDENTITY,
                expression: vec![0.1 * i as f64; m],
                landmarks: (0..l).map(|j| [j as f64, 1.0]).collect(),
            })
            .collect();
        let images: Vec<_> = (0..n)
            .map(|i| Image::from_fn(8, 6, 3, |x, y, p| p.fill(((x + y + i) % 5) as f32 / 4.0)))
            .collect();
        let masks: Vec<_> = (0..n).map(|_| Image::filled(8, 6, &[1.0])).collect();
        write_dataset(dir, k, 25.0, frames, &images, &masks).unwrap()
    }

    fn rewrite_manifest(dir: &Path, f: impl FnOnce(&mut Value)) {
        let p = dir.join(MANIFEST_FILE);
        let mut v: Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        f(&mut v);
        fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
    }

    #[test]
    fn loads_fixture_and_echoes_intrinsics() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = fixture(tmp.path(), 3, 2, 5);
        let again = load_dataset(tmp.path()).unwrap();
        assert_eq!(again.len(), 3);
        assert_eq!(again.intrinsics, ds.intrinsics);
        assert_eq!(again.expression_dim(), 2);
        assert_eq!(again.frames[2].landmarks.len(), 5);
    }

    #[test]
    fn rejects_inconsistent_expression_length() {
        let tmp = tempfile::tempdir().unwrap();
        fixture(tmp.path(), 3, 2, 5);
        rewrite_manifest(tmp.path(), |v| {
            v["frames"][1]["expression"] = serde_json::json!([0.0, 0.0, 0.0]);
        });
        let err = load_dataset(tmp.path()).unwrap_err();
        assert_eq!(err.to_string(), "inconsistent expression length at frame 1");
    }

    #[test]
    fn rejects_missing_frame_file() {
        let tmp = tempfile::tempdir().unwrap();
        fixture(tmp.path(), 3, 2, 5);
        fs::remove_file(tmp.path().join("frames/000002.png")).unwrap();
        let err = load_dataset(tmp.path()).unwrap_err();
        assert!(err.to_string().contains("frames/000002.png"), "{err}");
    }

    #[test]
    fn rejects_missing_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(tmp.path()),
            Err(Error::MissingManifest(_))
        ));
    }

    #[test]
    fn schema_errors_name_field_and_frame() {
        let tmp = tempfile::tempdir().unwrap();
        fixture(tmp.path(), 3, 2, 5);
        rewrite_manifest(tmp.path(), |v| {
            v["frames"][2]["pose"] = serde_json::json!([1.0, 0.0]);
        });
        let err = load_dataset(tmp.path()).unwrap_err().to_string();
        assert!(err.contains("frame 2") && err.contains("pose"), "{err}");

        fixture(tmp.path(), 3, 2, 5);
        rewrite_manifest(tmp.path(), |v| {
            v["frames"][1].as_object_mut().unwrap().remove("landmarks");
        });
        let err = load_dataset(tmp.path()).unwrap_err().to_string();
        assert!(
            err.contains("frame 1") && err.contains("landmarks"),
            "{err}"
        );
    }

    #[test]
    fn rejects_bad_pose_landmark_and_order() {
        let tmp = tempfile::tempdir().unwrap();
        fixture(tmp.path(), 3, 2, 5);
        rewrite_manifest(tmp.path(), |v| {
            v["frames"][0]["pose"][0] = serde_json::json!(1.01)
        });
        assert!(load_dataset(tmp.path())
            .unwrap_err()
            .to_string()
            .contains("orthonormal"));

        fixture(tmp.path(), 3, 2, 5);
        rewrite_manifest(tmp.path(), |v| {
            v["frames"][1]["landmarks"][0] = serde_json::json!([50.0, 1.0])
        });
        assert!(load_dataset(tmp.path())
            .unwrap_err()
            .to_string()
            .contains("outside"));

        fixture(tmp.path(), 3, 2, 5);
        rewrite_manifest(tmp.path(), |v| {
            v["frames"][2]["index"] = serde_json::json!(0)
        });
        assert!(load_dataset(tmp.path())
            .unwrap_err()
            .to_string()
            .contains("strictly increasing"));

        fixture(tmp.path(), 3, 2, 5);
        rewrite_manifest(tmp.path(), |v| {
            v["frames"][1]["landmarks"] = serde_json::json!([[1.0, 1.0]])
        });
        assert_eq!(
            load_dataset(tmp.path()).unwrap_err().to_string(),
            "inconsistent landmark length at frame 1"
        );
    }

    #[test]
    fn save_frameset_naming_and_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = fixture(&tmp.path().join("src"), 3, 2, 5);
        let edited: Vec<_> = (0..3)
            .map(|i| {
                Image::from_fn(8, 6, 3, |x, y, p| {
                    p.fill(((x * 37 + y * 3 + i) % 256) as f32 / 255.0)
                })
            })
            .collect();
        let out = tmp.path().join("out");
        let dir = save_frameset(&ds, &edited, &out, "cycle0").unwrap();
        assert_eq!(dir, out.join("cycle0"));
        for i in 0..3 {
            assert!(dir.join(format!("00000{i}.png")).is_file());
        }
        let back = load_dataset(&dir).unwrap();
        assert_eq!(back.load_images().unwrap(), edited);
        assert_eq!(back.frames[1].pose, ds.frames[1].pose);
    }

    #[test]
    fn save_frameset_count_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = fixture(&tmp.path().join("src"), 3, 2, 5);
        let err = save_frameset(&ds, &[], tmp.path(), "x").unwrap_err();
        assert!(matches!(
            err,
            Error::CountMismatch {
                expected: 3,
                got: 0
            }
        ));
    }

    #[test]
    fn masked_examples() {
        let img = Image::from_fn(4, 3, 3, |x, y, p| p.fill((x + y) as f32 / 6.0));
        let ones = Image::filled(4, 3, &[1.0]);
        assert_eq!(masked(&img, &ones, &[1.0, 1.0, 1.0]).unwrap(), img);
        let zeros = Image::filled(4, 3, &[0.0]);
        assert_eq!(
            masked(&img, &zeros, &[1.0; 3]).unwrap(),
            Image::filled(4, 3, &[1.0; 3])
        );
        let half = Image::filled(4, 3, &[0.5]);
        let black = Image::filled(4, 3, &[0.0; 3]);
        assert_eq!(
            masked(&black, &half, &[1.0; 3]).unwrap(),
            Image::filled(4, 3, &[0.5; 3])
        );
        let small = Image::filled(2, 3, &[1.0]);
        assert!(matches!(
            masked(&img, &small, &[1.0; 3]),
            Err(Error::SizeMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn masked_stays_between_image_and_background(
            pix in proptest::collection::vec(0.0f32..=1.0, 12),
            m in proptest::collection::vec(0.0f32..=1.0, 4),
            bg in proptest::array::uniform3(0.0f32..=1.0),
        ) {
            let img = Image::from_vec(2, 2, 3, pix).unwrap();
            let mask = Image::from_vec(2, 2, 1, m).unwrap();
            let out = masked(&img, &mask, &bg).unwrap();
            for (i, px) in out.data().chunks(3).enumerate() {
                for c in 0..3 {
                    let a = img.data()[i * 3 + c];
                    let lo = a.min(bg[c]) - 1e-6;
                    let hi = a.max(bg[c]) + 1e-6;
                    prop_assert!(px[c] >= lo && px[c] <= hi);
                }
            }
        }
    }
}
