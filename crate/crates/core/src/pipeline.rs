//! Instruction-driven avatar editing with iterative dataset updates.
//!
//! One exemplar frame (mouth open) is edited once. Each cycle then
//! propagates that fixed edit onto the current targets (the original frames
//! in cycle 0, avatar renders afterwards), trains the avatar on the result,
//! and persists everything under `out/cycle_NN/`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::avatar::{
    render_dataset, render_image, save_checkpoint, train, AvatarState, RenderOptions, TrainConfig,
    TrainingFrames,
};
use crate::camera::Pose;
use crate::dataset::{load_dataset, masked, save_frameset, FrameDataset};
use crate::editor::{EditParams, EditRequest, Editor, EditorSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{evaluate_frames, MetricReport, METRIC_NOTE};
use crate::stylize::{propagate_with_masks, SynthesisParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Edit once, then propagate and retrain for every cycle.
    #[default]
    Full,
    /// Edit every frame independently with one fixed seed, train once.
    OneSeedOnce,
    /// Edit once, propagate and train a single time.
    EbsynthOnce,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Mode::Full),
            "one_seed_once" => Ok(Mode::OneSeedOnce),
            "ebsynth_once" => Ok(Mode::EbsynthOnce),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::OneSeedOnce => "one_seed_once",
            Mode::EbsynthOnce => "ebsynth_once",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreviewConfig {
    /// Orbit renders around the vertical axis through the origin.
    pub orbit_views: usize,
    pub orbit_degrees: f64,
    /// Renders per expression coefficient, sweeping its dataset range.
    pub expression_steps: usize,
}

impl Default for PreviewConfig {
    fn default() -> Self {
        Self {
            orbit_views: 8,
            orbit_degrees: 60.0,
            expression_steps: 5,
        }
    }
}

fn default_cycles() -> usize {
    3
}

fn default_true() -> bool {
    true
}

fn default_render_samples() -> usize {
    RenderOptions::default().samples
}

/// Everything a run needs besides the dataset and instruction. `seed` and
/// `editor` have no defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub editor: EditorSpec,
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub edit: EditParams,
    #[serde(default)]
    pub synthesis: SynthesisParams,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub exemplar_override: Option<usize>,
    /// Later cycles fine-tune the previous model instead of starting over.
    #[serde(default = "default_true")]
    pub resume_training: bool,
    /// Landmark indices of the upper and lower lip.
    #[serde(default)]
    pub lip_landmarks: Option<[usize; 2]>,
    #[serde(default = "default_render_samples")]
    pub render_samples: usize,
    #[serde(default)]
    pub preview: PreviewConfig,
}

impl PipelineConfig {
    pub fn new(seed: u64, editor: EditorSpec) -> Self {
        Self {
            seed,
            editor,
            cycles: default_cycles(),
            mode: Mode::Full,
            edit: EditParams::default(),
            synthesis: SynthesisParams::default(),
            training: TrainConfig::default(),
            exemplar_override: None,
            resume_training: true,
            lip_landmarks: None,
            render_samples: default_render_samples(),
            preview: PreviewConfig::default(),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 {
            return Err(Error::Config("cycles must be >= 1".into()));
        }
        if self.render_samples == 0 {
            return Err(Error::Config("render_samples must be >= 1".into()));
        }
        self.edit
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.synthesis
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.training
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Cycles actually run: the ablation modes always run one.
    pub fn effective_cycles(&self) -> usize {
        match self.mode {
            Mode::Full => self.cycles,
            Mode::OneSeedOnce | Mode::EbsynthOnce => 1,
        }
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions {
            samples: self.render_samples,
            jitter_seed: None,
        }
    }

    fn background(&self) -> [f32; 3] {
        self.synthesis.background
    }
}

/// Seed of an independent random stream derived from the root seed.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng.next_u64()
}

const SYNTHESIS_STREAM: u64 = 1 << 32;
const TRAINING_STREAM: u64 = 2 << 32;

/// Frame with the widest vertical lip gap (lowest index on ties), unless
/// `exemplar_override` names one.
pub fn select_exemplar(
    dataset: &FrameDataset,
    lips: Option<[usize; 2]>,
    exemplar_override: Option<usize>,
) -> Result<usize> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot select an exemplar from an empty dataset".into(),
        ));
    }
    if let Some(i) = exemplar_override {
        if i >= dataset.len() {
            return Err(Error::Config(format!(
                "exemplar_override {i} out of range for {} frames",
                dataset.len()
            )));
        }
        return Ok(i);
    }
    let [upper, lower] =
        lips.ok_or_else(|| Error::Config("missing lip-landmark designation".into()))?;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, f) in dataset.frames.iter().enumerate() {
        let (Some(u), Some(l)) = (f.landmarks.get(upper), f.landmarks.get(lower)) else {
            return Err(Error::Config(format!(
                "lip landmarks {upper}/{lower} out of range for {} landmarks",
                f.landmarks.len()
            )));
        };
        let gap = (l[1] - u[1]).abs();
        if gap > best.1 {
            best = (i, gap);
        }
    }
    Ok(best.0)
}

/// Run state carried from cycle to cycle.
#[derive(Clone, Debug)]
pub struct PipelineState {
    pub dataset: FrameDataset,
    pub masks: Vec<Image>,
    pub exemplar_index: usize,
    pub edited_exemplar: Image,
    pub avatar: AvatarState,
}

impl PipelineState {
    pub fn new(
        dataset: FrameDataset,
        exemplar_index: usize,
        edited_exemplar: Image,
        config: &PipelineConfig,
    ) -> Result<Self> {
        let masks = dataset.load_masks()?;
        let avatar = AvatarState::new(config.training.new_model(dataset.expression_dim()));
        Ok(Self {
            dataset,
            masks,
            exemplar_index,
            edited_exemplar,
            avatar,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleArtifacts {
    pub cycle: usize,
    pub edited_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Metrics of the frames the avatar was trained on.
    pub edited_report: MetricReport,
    /// Metrics of the trained avatar rendered at every frame.
    pub render_report: MetricReport,
    pub final_loss: Option<f64>,
}

fn stage<T>(name: &'static str, cycle: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        cycle,
        source: Box::new(e),
    })
}

fn cycle_dir(out: &Path, t: usize) -> PathBuf {
    out.join(format!("cycle_{t:02}"))
}

fn mask_all(images: &[Image], masks: &[Image], bg: [f32; 3]) -> Result<Vec<Image>> {
    images
        .iter()
        .zip(masks)
        .map(|(i, m)| masked(i, m, &bg))
        .collect()
}

/// One iteration: stylize the current targets with the fixed edit, train,
/// and persist frames, checkpoint and metrics under `out/cycle_NN/`.
pub fn run_cycle(
    state: &mut PipelineState,
    t: usize,
    config: &PipelineConfig,
    out: &Path,
) -> Result<CycleArtifacts> {
    let bg = config.background();
    let targets = if t == 0 {
        stage(
            "load",
            t,
            (0..state.dataset.len())
                .map(|i| state.dataset.load_masked(i, bg))
                .collect(),
        )?
    } else {
        let renders = stage(
            "render",
            t,
            render_dataset(
                &state.avatar.model,
                &state.dataset,
                None,
                &config.render_options(),
            ),
        )?;
        stage("render", t, mask_all(&renders, &state.masks, bg))?
    };
    let params = SynthesisParams {
        rng_seed: derive_seed(config.seed, SYNTHESIS_STREAM + t as u64),
        ..config.synthesis.clone()
    };
    let propagated = stage(
        "propagate",
        t,
        propagate_with_masks(
            &state.dataset,
            &state.masks,
            state.exemplar_index,
            &state.edited_exemplar,
            &targets,
            &params,
        ),
    )?;
    let edited = stage("propagate", t, mask_all(&propagated, &state.masks, bg))?;
    train_and_persist(state, edited, t, config, out)
}

fn train_and_persist(
    state: &mut PipelineState,
    edited: Vec<Image>,
    t: usize,
    config: &PipelineConfig,
    out: &Path,
) -> Result<CycleArtifacts> {
    let dir = cycle_dir(out, t);
    let edited_dir = stage(
        "persist",
        t,
        save_frameset(&state.dataset, &edited, &dir, "edited"),
    )?;
    let training = TrainConfig {
        rng_seed: derive_seed(config.seed, TRAINING_STREAM),
        ..config.training.clone()
    };
    let frames = TrainingFrames::new(&state.dataset, &edited, &state.masks);
    let resume = config.resume_training && t >= 1;
    let report = stage(
        "train",
        t,
        train(&mut state.avatar, &frames, &training, resume),
    )?;
    let checkpoint = dir.join("avatar.avfg");
    stage("checkpoint", t, save_checkpoint(&checkpoint, &state.avatar))?;
    let renders = stage(
        "render",
        t,
        render_dataset(
            &state.avatar.model,
            &state.dataset,
            None,
            &config.render_options(),
        ),
    )?;
    for (f, img) in state.dataset.frames.iter().zip(&renders) {
        stage(
            "persist",
            t,
            img.save_png(
                &dir.join("renders")
                    .join(crate::dataset::frame_file_name(f.index)),
            ),
        )?;
    }
    let landmarks: Vec<_> = state
        .dataset
        .frames
        .iter()
        .map(|f| f.landmarks.clone())
        .collect();
    let edited_report = stage(
        "metrics",
        t,
        evaluate_frames(
            &format!("cycle {t} edited frames"),
            &edited,
            &state.masks,
            &landmarks,
            None,
        ),
    )?;
    let render_report = stage(
        "metrics",
        t,
        evaluate_frames(
            &format!("cycle {t} renders"),
            &renders,
            &state.masks,
            &landmarks,
            Some(&edited),
        ),
    )?;
    let metrics = dir.join("metrics.json");
    let summary = serde_json::json!({ "edited": edited_report, "renders": render_report });
    stage("metrics", t, write_json(&metrics, &summary))?;
    Ok(CycleArtifacts {
        cycle: t,
        edited_dir,
        checkpoint,
        metrics,
        edited_report,
        render_report,
        final_loss: report.final_loss(),
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub exemplar_index: usize,
    pub edited_exemplar: PathBuf,
    pub checkpoint: PathBuf,
    pub previews: Vec<PathBuf>,
    pub report: PathBuf,
    pub cycles: Vec<CycleArtifacts>,
    pub state: PipelineState,
}

/// Selects and edits the exemplar, runs the configured cycles, renders
/// previews, and writes `out/report.json`. Partial artifacts stay on disk
/// when a stage fails.
pub fn run_pipeline(
    dataset_root: &Path,
    instruction: &str,
    config: &PipelineConfig,
    editor: &dyn Editor,
    out: &Path,
) -> Result<PipelineOutput> {
    config.validate()?;
    let dataset = load_dataset(dataset_root)?;
    let exemplar = select_exemplar(&dataset, config.lip_landmarks, config.exemplar_override)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let bg = config.background();
    let source = stage("edit", 0, dataset.load_masked(exemplar, bg))?;
    source.save_png(&out.join("exemplar_original.png"))?;

    let mut cycles = Vec::new();
    let state = if config.mode == Mode::OneSeedOnce {
        let masks = stage("load", 0, dataset.load_masks())?;
        let mut edited = Vec::with_capacity(dataset.len());
        for i in 0..dataset.len() {
            let frame = stage("edit", 0, dataset.load_masked(i, bg))?;
            let req = EditRequest::new(frame, instruction, config.edit, config.seed);
            let img = stage("edit", 0, editor.edit(&req))?.image;
            edited.push(stage("edit", 0, masked(&img, &masks[i], &bg))?);
        }
        let mut state = PipelineState::new(dataset, exemplar, edited[exemplar].clone(), config)?;
        state
            .edited_exemplar
            .save_png(&out.join("exemplar_edited.png"))?;
        cycles.push(train_and_persist(&mut state, edited, 0, config, out)?);
        state
    } else {
        let req = EditRequest::new(source, instruction, config.edit, config.seed);
        let edited = stage("edit", 0, editor.edit(&req))?.image;
        let mask = stage("edit", 0, dataset.load_mask(exemplar))?;
        let edited = stage("edit", 0, masked(&edited, &mask, &bg))?;
        edited.save_png(&out.join("exemplar_edited.png"))?;
        let mut state = PipelineState::new(dataset, exemplar, edited, config)?;
        for t in 0..config.effective_cycles() {
            cycles.push(run_cycle(&mut state, t, config, out)?);
        }
        state
    };

    let last = cycles.last().expect("at least one cycle");
    let checkpoint = out.join("final.avfg");
    fs::copy(&last.checkpoint, &checkpoint).map_err(|e| Error::io(&last.checkpoint, e))?;
    let previews = render_previews(&state, config, &out.join("previews"))?;
    let report = out.join("report.json");
    let summary = serde_json::json!({
        "instruction": instruction,
        "mode": config.mode.to_string(),
        "exemplar_index": exemplar,
        "cycles": cycles.iter().map(|c| serde_json::json!({
            "cycle": c.cycle,
            "final_loss": c.final_loss,
            "edited_temporal_consistency": c.edited_report.temporal_consistency.as_ref().map(|t| t.mean),
            "render_temporal_consistency": c.render_report.temporal_consistency.as_ref().map(|t| t.mean),
            "render_sharpness": c.render_report.sharpness.mean,
            "render_psnr_vs_edited": c.render_report.psnr.as_ref().map(|p| p.mean),
            "metrics": c.metrics,
        })).collect::<Vec<_>>(),
        "note": METRIC_NOTE,
    });
    write_json(&report, &summary)?;
    Ok(PipelineOutput {
        exemplar_index: exemplar,
        edited_exemplar: out.join("exemplar_edited.png"),
        checkpoint,
        previews,
        report,
        cycles,
        state,
    })
}

/// Rotates a camera-to-world pose about the world `y` axis.
pub fn orbit_pose(pose: &Pose, angle: f64) -> Pose {
    let (s, c) = angle.sin_cos();
    let rot = [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]];
    let mut r = [[0.0; 3]; 3];
    for (i, row) in r.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| rot[i][k] * pose.rotation(k, j)).sum();
        }
    }
    let t = pose.translation();
    let t = std::array::from_fn(|i| (0..3).map(|k| rot[i][k] * t[k]).sum());
    Pose::from_rotation_translation(r, t)
}

/// Novel-view orbit around the exemplar camera and a per-coefficient
/// expression sweep over each coefficient's dataset range.
pub fn render_previews(
    state: &PipelineState,
    config: &PipelineConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let ds = &state.dataset;
    let model = &state.avatar.model;
    let k = ds.intrinsics;
    let res = (k.width, k.height);
    let opts = config.render_options();
    let ex = &ds.frames[state.exemplar_index];
    let mut paths = Vec::new();
    let n = config.preview.orbit_views;
    for v in 0..n {
        let a = if n > 1 {
            (v as f64 / (n - 1) as f64 - 0.5) * config.preview.orbit_degrees.to_radians()
        } else {
            0.0
        };
        let img = render_image(
            model,
            &k,
            &orbit_pose(&ex.pose, a),
            &ex.expression,
            res,
            &opts,
        )?;
        let path = dir.join(format!("orbit_{v:02}.png"));
        img.save_png(&path)?;
        paths.push(path);
    }
    let steps = config.preview.expression_steps;
    for c in 0..ds.expression_dim() {
        let values = ds.frames.iter().map(|f| f.expression[c]);
        let lo = values.clone().fold(f64::INFINITY, f64::min);
        let hi = values.fold(f64::NEG_INFINITY, f64::max);
        for s in 0..steps {
            let mut e = ex.expression.clone();
            e[c] = if steps > 1 {
                lo + (hi - lo) * s as f64 / (steps - 1) as f64
            } else {
                e[c]
            };
            let img = render_image(model, &k, &ex.pose, &e, res, &opts)?;
            let path = dir.join(format!("expression_{c:02}_{s:02}.png"));
            img.save_png(&path)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::dataset::{write_dataset, FrameRecord};
    use crate::editor::MockKind;

    fn lip_fixture(dir: &Path, gaps: &[f64]) -> FrameDataset {
        let n = gaps.len();
        let frames = gaps
            .iter()
            .enumerate()
            .map(|(i, &g)| FrameRecord {
                index: i,
                image_path: PathBuf::new(),
                mask_path: PathBuf::new(),
                pose: Pose::IDENTITY,
                expression: vec![0.0],
                landmarks: vec![[5.0, 10.0], [5.0, 10.0 + g]],
            })
            .collect();
        let imgs = vec![Image::filled(16, 24, &[0.5; 3]); n];
        let masks = vec![Image::filled(16, 24, &[1.0]); n];
        write_dataset(
            dir,
            Intrinsics::from_fov(16, 24, 1.0),
            25.0,
            frames,
            &imgs,
            &masks,
        )
        .unwrap()
    }

    #[test]
    fn widest_lip_gap_wins() {
        let dir = tempfile::tempdir().unwrap();
        let mut gaps = vec![3.0, 1.0, 2.5, 0.0, 3.0, 2.0, 1.0, 12.0, 3.0, 0.5];
        let ds = lip_fixture(dir.path(), &gaps);
        assert_eq!(select_exemplar(&ds, Some([0, 1]), None).unwrap(), 7);
        assert_eq!(select_exemplar(&ds, Some([0, 1]), Some(4)).unwrap(), 4);
        gaps.iter_mut().for_each(|g| *g = 2.0);
        let dir = tempfile::tempdir().unwrap();
        let ds = lip_fixture(dir.path(), &gaps);
        assert_eq!(select_exemplar(&ds, Some([0, 1]), None).unwrap(), 0);
    }

    #[test]
    fn override_ignores_landmarks_and_missing_designation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = lip_fixture(dir.path(), &[1.0, 5.0, 2.0, 0.0, 1.0]);
        assert_eq!(select_exemplar(&ds, None, Some(4)).unwrap(), 4);
        assert!(matches!(
            select_exemplar(&ds, None, None),
            Err(Error::Config(_))
        ));
        assert!(select_exemplar(&ds, Some([0, 9]), None).is_err());
        assert!(select_exemplar(&ds, None, Some(5)).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let spec = EditorSpec::Mock {
            kind: MockKind::Sepia,
            noise: None,
        };
        let c = PipelineConfig::new(1, spec.clone());
        assert_eq!(c.cycles, 3);
        assert!(c.resume_training);
        assert_eq!(
            (c.edit.image_guidance, c.edit.text_guidance, c.edit.steps),
            (1.5, 3.5, 100)
        );
        c.validate().unwrap();
        let zero = PipelineConfig {
            cycles: 0,
            ..c.clone()
        };
        assert!(matches!(zero.validate(), Err(Error::Config(_))));
        for mode in [Mode::OneSeedOnce, Mode::EbsynthOnce] {
            assert_eq!(PipelineConfig { mode, ..c.clone() }.effective_cycles(), 1);
        }
    }

    #[test]
    fn config_json_requires_seed_and_editor() {
        let ok: PipelineConfig =
            serde_json::from_str(r#"{"seed": 3, "editor": "mock:sepia"}"#).unwrap();
        assert_eq!(ok.cycles, 3);
        assert_eq!(ok.mode, Mode::Full);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"editor": "mock:sepia"}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"seed": 3}"#).is_err());
        let round: PipelineConfig =
            serde_json::from_str(&serde_json::to_string(&ok).unwrap()).unwrap();
        assert_eq!(round, ok);
    }

    #[test]
    fn modes_parse_with_either_separator() {
        assert_eq!("one-seed-once".parse::<Mode>().unwrap(), Mode::OneSeedOnce);
        assert_eq!("ebsynth_once".parse::<Mode>().unwrap(), Mode::EbsynthOnce);
        assert!("twice".parse::<Mode>().is_err());
    }

    #[test]
    fn orbit_pose_stays_rigid_and_keeps_distance() {
        let p = Pose::look_at([0.5, 0.2, -3.0], [0.0; 3], [0.0, 1.0, 0.0]);
        let q = orbit_pose(&p, 0.4);
        q.check_rigid(1e-9).unwrap();
        let d = |p: &Pose| crate::camera::norm(p.translation());
        assert!((d(&p) - d(&q)).abs() < 1e-12);
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(5, 0), derive_seed(5, 1));
        assert_eq!(derive_seed(5, 1), derive_seed(5, 1));
    }
}
