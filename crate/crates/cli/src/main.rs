use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use cosh_core::align::{AlignConfig, CameraIntrinsics};
use cosh_core::audio::{synth_audio_features, DEFAULT_BEAT_DIM, DEFAULT_CONTENT_DIM};
use cosh_core::checkpoint::Checkpoint;
use cosh_core::dit_a::{DitA, DIT_A_MAGIC};
use cosh_core::gesture::{GestureClip, KinematicTree};
use cosh_core::gradients::{check_block, gradient_suite, BLOCKS, GRAD_TOLERANCE};
use cosh_core::io::{
    clip_records, read_gesture_dataset, read_jsonl, read_png, read_video_dataset, write_frames, write_jsonl,
    write_video_dataset, KeypointRecord,
};
use cosh_core::pipeline::{
    align_records, generate_long_motion, motion_audio_frames, prefix_tokens, render_motion_video, run_pipeline,
    stream_rng, tokenize_dataset, train_dit_a, train_dit_v, train_vq, RunConfig, Stream, POSES_DIR,
};
use cosh_core::render::{pose_sequence, synth_video_dataset};
use cosh_core::synth::synth_gesture_dataset;
use cosh_core::video::{DitV, FitStage, DIT_V_MAGIC};
use cosh_core::vq::{VqModel, VQ_MAGIC};

/// Co-speech gesture video synthesis at desk scale.
#[derive(Parser)]
#[command(name = "cosh", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Gesture,
    Video,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic gesture (keypoint JSONL) or video (PNG) dataset.
    SynthData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long, env = "COSH_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long, default_value_t = 128)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-hand camera translations to keypoint JSONL.
    Align {
        #[arg(long)]
        input: PathBuf,
        /// fx,fy,cx,cy in pixels.
        #[arg(long)]
        intrinsics: String,
        #[arg(long, default_value_t = 10.0)]
        lambda_tr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the gesture VQ tokenizer.
    TrainVq {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the audio-to-motion token denoiser.
    TrainA {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// VQ checkpoint; defaults to `paths.vq` of the config.
        #[arg(long)]
        vq: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate motion for synthetic speech features.
    SampleMotion {
        #[arg(long)]
        ckpt: PathBuf,
        /// VQ checkpoint; defaults to `vq.ckpt` next to `--ckpt`.
        #[arg(long)]
        vq: Option<PathBuf>,
        #[arg(long)]
        audio_seed: u64,
        /// Keypoint JSONL whose first clip supplies the prefix motion.
        #[arg(long)]
        prefix_from: PathBuf,
        #[arg(long, env = "COSH_SEED", default_value_t = 0)]
        seed: u64,
        /// Defaults to one denoiser window.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the video autoencoder and denoiser.
    TrainV {
        #[arg(long)]
        config: PathBuf,
        /// Directory written by `synth-data --kind video`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render motion JSONL into video frames.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        motion: PathBuf,
        /// Reference appearance; defaults to the procedural render of the
        /// first pose.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, env = "COSH_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Central-difference gradient checks of the trainable blocks.
    Gradcheck {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(BLOCKS))]
        block: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Speech → motion → video with trained checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::Align { .. } => "align",
            Command::TrainVq { .. } => "train-vq",
            Command::TrainA { .. } => "train-a",
            Command::SampleMotion { .. } => "sample-motion",
            Command::TrainV { .. } => "train-v",
            Command::Synth { .. } => "synth",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Run { .. } => "run",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("ERROR cli: {first}");
            return ExitCode::from(2);
        }
    };
    let stage = cli.command.stage();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = e
                .chain()
                .find_map(|c| match c.downcast_ref::<cosh_core::Error>() {
                    Some(cosh_core::Error::MissingCheckpoint { stage, .. }) => Some(stage.clone()),
                    _ => None,
                })
                .unwrap_or_else(|| stage.to_string());
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("ERROR {stage}: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::SynthData { kind, seed, clips, frames, height, width, out } => {
            synth_data(kind, seed, clips, frames, height, width, &out)
        }
        Command::Align { input, intrinsics, lambda_tr, out } => {
            let cam = CameraIntrinsics::parse(&intrinsics)?;
            let records: Vec<KeypointRecord> = read_jsonl(&input)?;
            let fits = align_records(&records, cam, lambda_tr, &AlignConfig::default())?;
            write_jsonl(&out, &fits)?;
            let mean = fits.iter().map(|f| f.rms_px).sum::<f64>() / fits.len() as f64;
            eprintln!("align: {} fits, mean rms {mean:.3} px", fits.len());
            Ok(())
        }
        Command::TrainVq { config, data, out } => {
            let cfg = load_config(&config)?;
            let clips: Vec<GestureClip> = read_gesture_dataset(&data)?.into_iter().map(|(c, _)| c).collect();
            let steps = cfg.train.vq_steps;
            let model = train_vq(&cfg.vq, &clips, steps, cfg.seed, &mut |s, l| {
                progress("train-vq", s, steps, l)
            })?;
            model.to_checkpoint()?.save(&out)?;
            eprintln!("train-vq: wrote {}", out.display());
            Ok(())
        }
        Command::TrainA { config, data, vq, out } => {
            let cfg = load_config(&config)?;
            let vq = load_vq(vq.as_deref().unwrap_or(&cfg.paths.vq))?;
            let mut pairs = Vec::new();
            for (i, (clip, audio)) in read_gesture_dataset(&data)?.into_iter().enumerate().take(cfg.train.dit_a_clips) {
                let audio = audio.with_context(|| format!("clip {i} carries no audio features"))?;
                pairs.push((clip, audio));
            }
            let tokens = tokenize_dataset(&vq, &pairs, cfg.dit_a.window)?;
            let steps = cfg.train.dit_a_steps;
            let model = train_dit_a(&cfg.dit_a, &tokens, steps, cfg.seed, &mut |s, l| {
                progress("train-a", s, steps, l)
            })?;
            model.to_checkpoint()?.save(&out)?;
            eprintln!("train-a: {} windows, wrote {}", tokens.len(), out.display());
            Ok(())
        }
        Command::SampleMotion { ckpt, vq, audio_seed, prefix_from, seed, frames, out } => {
            let model = DitA::from_checkpoint(&Checkpoint::load(&ckpt, DIT_A_MAGIC)?)?;
            let vq_path = vq.unwrap_or_else(|| ckpt.with_file_name("vq.ckpt"));
            let vq = load_vq(&vq_path)?;
            let c = model.config;
            let frames = frames.unwrap_or(c.window);
            let (clip, _) = read_gesture_dataset(&prefix_from)?.remove(0);
            let prefix = prefix_tokens(&vq, &clip, &c)?;
            let audio = synth_audio_features(
                audio_seed,
                motion_audio_frames(frames, c.window, c.prefix),
                DEFAULT_BEAT_DIM,
                DEFAULT_CONTENT_DIM,
            )?;
            let motion = generate_long_motion(&model, &vq, &audio, &prefix, frames, &mut stream_rng(seed, Stream::Motion))?;
            let tree = KinematicTree::default();
            let records = motion
                .gestures
                .iter()
                .enumerate()
                .map(|(i, g)| KeypointRecord::from_gesture(i, g, &tree))
                .collect::<cosh_core::Result<Vec<_>>>()?;
            write_jsonl(&out, &records)?;
            eprintln!("sample-motion: {} frames in {} windows", records.len(), motion.windows.len());
            Ok(())
        }
        Command::TrainV { config, data, out } => {
            let cfg = load_config(&config)?;
            let seqs = read_video_dataset(&data)?;
            let (ae, dit) = (cfg.dit_v.ae_iters, cfg.dit_v.iters);
            let model = train_dit_v(&cfg.dit_v, &seqs, cfg.seed, &mut |stage, s, l| match stage {
                FitStage::Autoencoder => progress("train-v autoencoder", s, ae, l),
                FitStage::Denoiser => progress("train-v denoiser", s, dit, l),
            })?;
            model.to_checkpoint()?.save(&out)?;
            eprintln!("train-v: wrote {}", out.display());
            Ok(())
        }
        Command::Synth { ckpt, motion, reference, seed, out } => {
            let model = DitV::from_checkpoint(&Checkpoint::load(&ckpt, DIT_V_MAGIC)?)?;
            let tree = KinematicTree::default();
            let records: Vec<KeypointRecord> = read_jsonl(&motion)?;
            let gestures = records
                .iter()
                .map(|r| r.to_gesture(&tree))
                .collect::<cosh_core::Result<Vec<_>>>()?;
            let reference = reference.map(|p| read_png(&p)).transpose()?;
            let v = render_motion_video(&model, &gestures, reference.as_ref(), &mut stream_rng(seed, Stream::Video))?;
            write_frames(&out, &v.video)?;
            write_frames(&out.join(POSES_DIR), &v.poses)?;
            eprintln!(
                "synth: {} frames, window latent mse {:?}",
                v.video.shape()[0],
                v.window_latent_mse
            );
            Ok(())
        }
        Command::Gradcheck { block, json } => {
            let checks = match block {
                Some(b) => vec![check_block(&b)?],
                None => gradient_suite()?,
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&checks)?);
            } else {
                for c in &checks {
                    let verdict = if c.passed() { "ok" } else { "FAIL" };
                    println!(
                        "{:<13} {:>7} params  rel {:.2e}  {:>5.1}s  {verdict}",
                        c.block, c.parameters, c.rel_error, c.seconds
                    );
                }
            }
            let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.block).collect();
            if !failed.is_empty() {
                bail!("relative error ≥ {GRAD_TOLERANCE:e} in {}", failed.join(", "));
            }
            Ok(())
        }
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let report = run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn synth_data(
    kind: DataKind,
    seed: u64,
    clips: usize,
    frames: usize,
    height: usize,
    width: usize,
    out: &Path,
) -> anyhow::Result<()> {
    match kind {
        DataKind::Gesture => {
            let tree = KinematicTree::default();
            let mut records = Vec::with_capacity(clips * frames);
            for (i, s) in synth_gesture_dataset(seed, clips, frames)?.iter().enumerate() {
                let (posed, _) = pose_sequence(&s.clip.reorthonormalized()?, height, width)?;
                records.extend(clip_records(Some(i), &s.clip, Some(&s.audio), Some(&posed), &tree)?);
            }
            write_jsonl(out, &records)?;
            eprintln!("synth-data: {clips} gesture clips × {frames} frames → {}", out.display());
        }
        DataKind::Video => {
            let seqs: Vec<_> = synth_video_dataset(seed, clips, frames, height, width)?
                .into_iter()
                .map(|s| (s.video, s.poses))
                .collect();
            write_video_dataset(out, &seqs)?;
            eprintln!("synth-data: {clips} video clips × {frames} frames → {}", out.display());
        }
    }
    Ok(())
}

/// Load a config; `COSH_SEED` overrides its seed.
fn load_config(path: &Path) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Ok(s) = std::env::var("COSH_SEED") {
        cfg.seed = s.trim().parse().with_context(|| format!("COSH_SEED={s:?} is not an unsigned integer"))?;
    }
    Ok(cfg)
}

fn load_vq(path: &Path) -> anyhow::Result<VqModel> {
    if !path.is_file() {
        return Err(cosh_core::Error::MissingCheckpoint {
            stage: "vq".into(),
            path: path.display().to_string(),
            command: "train-vq".into(),
        }
        .into());
    }
    Ok(VqModel::from_checkpoint(&Checkpoint::load(path, VQ_MAGIC)?)?)
}

fn progress(stage: &str, step: usize, total: usize, loss: f64) {
    let every = (total / 20).max(1);
    if step == 1 || step % every == 0 || step == total {
        eprintln!("{stage}: step {step}/{total} loss {loss:.5}");
    }
}
