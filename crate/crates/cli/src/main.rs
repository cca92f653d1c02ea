//! `avatarforge` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use avatarforge::avatar::{
    load_checkpoint, render_dataset, render_image, save_checkpoint, train, AvatarState,
    RenderOptions, TrainConfig, TrainingFrames,
};
use avatarforge::dataset::{frame_file_name, load_dataset, save_frameset, FrameDataset};
use avatarforge::guides::{build_guides, GuideFrame};
use avatarforge::metrics::evaluate_frames;
use avatarforge::pipeline::{run_pipeline, select_exemplar, Mode, PipelineConfig};
use avatarforge::stylize::{propagate_with_masks, SynthesisParams};
use avatarforge::synthetic::{write_toy_dataset, write_translation_dataset, ToySpec};
use avatarforge::Image;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

#[derive(Parser)]
#[command(
    name = "avatarforge",
    version,
    about = "Instruction-driven editing of radiance-field head avatars"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit the exemplar once, then propagate and retrain for every cycle.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        instruction: String,
        /// JSON file with pipeline settings; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `mock:KIND[+noise[=A]]` or an `http(s)://` endpoint.
        #[arg(long)]
        editor: Option<String>,
        #[arg(long)]
        cycles: Option<usize>,
        /// full, one-seed-once or ebsynth-once.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Upper and lower lip landmark indices, e.g. `3,4`.
        #[arg(long, value_delimiter = ',')]
        lips: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the frame with the widest lip gap.
    SelectExemplar {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Upper and lower lip landmark indices, e.g. `3,4`.
        #[arg(long, value_delimiter = ',')]
        lips: Option<Vec<usize>>,
        #[arg(long = "override")]
        exemplar_override: Option<usize>,
    },
    /// Propagate an edited exemplar to every frame.
    Stylize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        exemplar: usize,
        /// The edited exemplar image.
        #[arg(long)]
        edited: PathBuf,
        /// Frames to stylize, as a dataset directory aligned with `--dataset`
        /// (default: the dataset's own frames).
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write every frame's guide channels under this directory.
        #[arg(long)]
        dump_guides: Option<PathBuf>,
        /// Output directory; frames land in `OUT/edited`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit an avatar to a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from this checkpoint with its optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a checkpoint at every frame of a dataset, or at one frame.
    Render {
        #[arg(long, visible_alias = "model")]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Render only this frame's camera; `--out` is then a PNG path.
        #[arg(long)]
        pose_from_frame: Option<usize>,
        /// Expression coefficients replacing the frame's own, e.g. `0.5,-0.2`.
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            requires = "pose_from_frame"
        )]
        expression: Option<Vec<f64>>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long, default_value_t = RenderOptions::default().samples)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report temporal consistency, sharpness and optional PSNR of a frame set.
    Evaluate {
        /// Dataset directory whose frames are evaluated.
        #[arg(long)]
        frames: PathBuf,
        /// Dataset directory with reference frames for PSNR.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Per-frame values as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    Synth {
        #[arg(long, value_enum, default_value_t = Fixture::Toy)]
        kind: Fixture,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    /// Sphere head with two blendshapes seen from an arc of cameras.
    Toy,
    /// Textured disc sliding across a static camera.
    Translation,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            dataset,
            instruction,
            config,
            editor,
            cycles,
            mode,
            seed,
            lips,
            out,
        } => {
            let mut value = read_config(config.as_deref())?;
            let obj = value
                .as_object_mut()
                .context("config must be a JSON object")?;
            if let Some(seed) = seed {
                obj.insert("seed".into(), seed.into());
            }
            if let Some(editor) = editor {
                obj.insert("editor".into(), editor.into());
            }
            if let Some(cycles) = cycles {
                obj.insert("cycles".into(), cycles.into());
            }
            if let Some(mode) = mode {
                let mode: Mode = mode.parse()?;
                obj.insert("mode".into(), mode.to_string().into());
            }
            if let Some(l) = lips {
                obj.insert("lip_landmarks".into(), serde_json::json!(lip_pair(&l)?));
            }
            for key in ["seed", "editor"] {
                if !obj.contains_key(key) {
                    bail!("`{key}` is required: pass --{key} or set it in the config file");
                }
            }
            let config: PipelineConfig =
                serde_json::from_value(value).context("invalid pipeline config")?;
            config.validate()?;
            let editor = config.editor.build();
            let output = run_pipeline(&dataset, &instruction, &config, &*editor, &out)?;
            println!("exemplar {}", output.exemplar_index);
            for c in &output.cycles {
                let tc = c
                    .render_report
                    .temporal_consistency
                    .as_ref()
                    .map(|t| t.mean);
                println!(
                    "cycle {} final loss {} render temporal consistency {}",
                    c.cycle,
                    fmt_opt(c.final_loss),
                    fmt_opt(tc)
                );
            }
            println!("checkpoint {}", output.checkpoint.display());
            println!("report {}", output.report.display());
        }
        Command::SelectExemplar {
            dataset,
            config,
            lips,
            exemplar_override,
        } => {
            let value = read_config(config.as_deref())?;
            let lips = match lips {
                Some(l) => Some(lip_pair(&l)?),
                None => section::<Option<[usize; 2]>>(&value, "lip_landmarks")?.flatten(),
            };
            let exemplar_override =
                exemplar_override
                    .or(section::<Option<usize>>(&value, "exemplar_override")?.flatten());
            let ds = load_dataset(&dataset)?;
            println!("{}", select_exemplar(&ds, lips, exemplar_override)?);
        }
        Command::Stylize {
            dataset,
            exemplar,
            edited,
            targets,
            config,
            dump_guides,
            out,
        } => {
            let value = read_config(config.as_deref())?;
            let params: SynthesisParams = section(&value, "synthesis")?.unwrap_or_default();
            let ds = load_dataset(&dataset)?;
            let masks = ds.load_masks()?;
            let frames = match targets {
                Some(dir) => {
                    let t = load_dataset(&dir)?;
                    if t.len() != ds.len() {
                        bail!("targets hold {} frames, dataset {}", t.len(), ds.len());
                    }
                    masked_frames(&t, params.background)?
                }
                None => masked_frames(&ds, params.background)?,
            };
            let style = Image::load_png(&edited)?;
            if let Some(dir) = dump_guides {
                let src = GuideFrame {
                    record: ds
                        .frames
                        .get(exemplar)
                        .context("exemplar index out of range")?,
                    image: &frames[exemplar],
                    mask: &masks[exemplar],
                };
                for (i, record) in ds.frames.iter().enumerate() {
                    let tgt = GuideFrame {
                        record,
                        image: &frames[i],
                        mask: &masks[i],
                    };
                    let stack = build_guides(src, tgt, params.weights, params.background)?;
                    let d = dir.join(format!("frame_{:06}", record.index));
                    fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
                    stack.dump_pngs(&d)?;
                }
            }
            let result = propagate_with_masks(&ds, &masks, exemplar, &style, &frames, &params)?;
            let dir = save_frameset(&ds, &result, &out, "edited")?;
            println!("{}", dir.display());
        }
        Command::Train {
            dataset,
            config,
            resume,
            steps,
            out,
        } => {
            let value = read_config(config.as_deref())?;
            let mut training: TrainConfig = section(&value, "training")?.unwrap_or_default();
            if let Some(steps) = steps {
                training.steps_per_cycle = steps;
            }
            let ds = load_dataset(&dataset)?;
            let images = ds.load_images()?;
            let masks = ds.load_masks()?;
            let mut state = match &resume {
                Some(path) => load_checkpoint(path)?,
                None => AvatarState::new(training.new_model(ds.expression_dim())),
            };
            let frames = TrainingFrames::new(&ds, &images, &masks);
            let report = train(&mut state, &frames, &training, resume.is_some())?;
            save_checkpoint(&out, &state)?;
            println!(
                "{} steps, final loss {}, checkpoint {}",
                report.losses.len(),
                fmt_opt(report.final_loss()),
                out.display()
            );
        }
        Command::Render {
            checkpoint,
            dataset,
            pose_from_frame,
            expression,
            width,
            height,
            samples,
            out,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&dataset)?;
            let res = match (width, height) {
                (None, None) => None,
                (w, h) => Some((
                    w.unwrap_or(ds.intrinsics.width),
                    h.unwrap_or(ds.intrinsics.height),
                )),
            };
            let opts = RenderOptions {
                samples,
                jitter_seed: None,
            };
            if let Some(k) = pose_from_frame {
                let frame = ds
                    .frames
                    .iter()
                    .find(|f| f.index == k)
                    .with_context(|| format!("no frame with index {k}"))?;
                let e = expression.unwrap_or_else(|| frame.expression.clone());
                let size = res.unwrap_or((ds.intrinsics.width, ds.intrinsics.height));
                let img = render_image(&state.model, &ds.intrinsics, &frame.pose, &e, size, &opts)?;
                if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)
                        .with_context(|| format!("creating {}", dir.display()))?;
                }
                img.save_png(&out)?;
                println!("{}", out.display());
                return Ok(());
            }
            let renders = render_dataset(&state.model, &ds, res, &opts)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (f, img) in ds.frames.iter().zip(&renders) {
                img.save_png(&out.join(frame_file_name(f.index)))?;
            }
            println!("{} frames written to {}", renders.len(), out.display());
        }
        Command::Evaluate {
            frames,
            reference,
            label,
            json,
            csv,
        } => {
            let ds = load_dataset(&frames)?;
            let images = ds.load_images()?;
            let masks = ds.load_masks()?;
            let landmarks: Vec<_> = ds.frames.iter().map(|f| f.landmarks.clone()).collect();
            let reference = reference
                .map(|r| load_dataset(&r)?.load_images())
                .transpose()?;
            let label = label.unwrap_or_else(|| frames.display().to_string());
            let report =
                evaluate_frames(&label, &images, &masks, &landmarks, reference.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(path) = json {
                report.write_json(&path)?;
            }
            if let Some(path) = csv {
                report.write_csv(&path)?;
            }
        }
        Command::Synth {
            kind,
            frames,
            size,
            out,
        } => {
            let ds = match kind {
                Fixture::Toy => {
                    let defaults = ToySpec::default();
                    let spec = ToySpec {
                        frames: frames.unwrap_or(defaults.frames),
                        size: size.unwrap_or(defaults.size),
                        ..defaults
                    };
                    write_toy_dataset(&out, &spec)?
                }
                Fixture::Translation => write_translation_dataset(
                    &out,
                    frames.unwrap_or(7),
                    size.unwrap_or(64),
                    (3.0, 1.0),
                )?,
            };
            println!("{} frames written to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<Value> {
    match path {
        None => Ok(Value::Object(Default::default())),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// Deserializes `config[key]` when present.
fn section<T: serde::de::DeserializeOwned>(config: &Value, key: &str) -> Result<Option<T>> {
    config
        .get(key)
        .map(|v| {
            serde_json::from_value(v.clone()).with_context(|| format!("invalid `{key}` section"))
        })
        .transpose()
}

fn masked_frames(ds: &FrameDataset, background: [f32; 3]) -> Result<Vec<Image>> {
    Ok((0..ds.len())
        .map(|i| ds.load_masked(i, background))
        .collect::<avatarforge::Result<_>>()?)
}

fn lip_pair(l: &[usize]) -> Result<[usize; 2]> {
    match l {
        [u, d] => Ok([*u, *d]),
        _ => bail!("--lips takes two indices, e.g. `3,4`"),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.6}"))
}
