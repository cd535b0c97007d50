//! End-to-end orchestration: run configuration, stage training drivers,
//! audio → motion → pose renders → video, and the JSON run report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{align_sequence, AlignConfig, AlignmentProblem, CameraIntrinsics, DEFAULT_LAMBDA_TR};
use crate::audio::{synth_audio_features, AudioFeatures, DEFAULT_BEAT_DIM, DEFAULT_CONTENT_DIM};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{TokenSequence, TransitionSchedule};
use crate::dit_a::{generate_motion, new_optimizer, train_step_a, DenoiserConfig, DitA, DIT_A_MAGIC};
use crate::error::{Error, Result};
use crate::gesture::{GestureClip, HandSide, HybridGesture, GESTURE_DIM, TEMPORAL_STRIDE};
use crate::io::{write_frames, write_jsonl, KeypointRecord, TranslationRecord};
use crate::render::{frames_to_tensor, pose_sequence, render_person, render_pose};
use crate::synth::synth_gesture_dataset;
use crate::tensor::Tensor;
use crate::video::{fit_video, frames_between, synthesize_long_traced, DitV, FitStage, VideoConfig, DIT_V_MAGIC};
use crate::vq::{vq_train_step, VqConfig, VqModel, VqTrainer, VQ_MAGIC};

/// Bumped whenever a report field changes meaning or is removed.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Independent RNG streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Audio = 1,
    Prefix = 2,
    Motion = 3,
    Video = 4,
    Train = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub vq: PathBuf,
    pub dit_a: PathBuf,
    pub dit_v: PathBuf,
    /// Optional reference image; without one the procedural renderer
    /// draws the person in the first generated pose.
    pub reference: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            vq: "vq.ckpt".into(),
            dit_a: "dit_a.ckpt".into(),
            dit_v: "dit_v.ckpt".into(),
            reference: None,
            out: "out".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignSection {
    pub lambda_tr: f64,
    pub learning_rate: f64,
    pub first_frame_iterations: usize,
    pub later_frame_iterations: usize,
}

impl Default for AlignSection {
    fn default() -> Self {
        let a = AlignConfig::default();
        Self {
            lambda_tr: DEFAULT_LAMBDA_TR,
            learning_rate: a.learning_rate,
            first_frame_iterations: a.first_frame_iterations,
            later_frame_iterations: a.later_frame_iterations,
        }
    }
}

impl AlignSection {
    pub fn config(&self) -> AlignConfig {
        AlignConfig {
            learning_rate: self.learning_rate,
            first_frame_iterations: self.first_frame_iterations,
            later_frame_iterations: self.later_frame_iterations,
        }
    }
}

/// Synthetic training data sizes and optimizer step counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub gesture_clips: usize,
    pub gesture_frames: usize,
    pub vq_steps: usize,
    /// Clips (taken from the front of the gesture set) the motion
    /// denoiser is trained on.
    pub dit_a_clips: usize,
    pub dit_a_steps: usize,
    pub video_clips: usize,
    pub video_frames: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            gesture_clips: 64,
            gesture_frames: 128,
            vq_steps: 1200,
            dit_a_clips: 8,
            dit_a_steps: 1000,
            video_clips: 1,
            video_frames: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Output video length.
    pub frames: usize,
    /// Seed of the synthetic speech features; defaults to the run seed.
    pub audio_seed: Option<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { frames: 65, audio_seed: None }
    }
}

/// Everything `cosh` reads from a TOML config. Relative paths are
/// resolved against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub vq: VqConfig,
    pub dit_a: DenoiserConfig,
    pub dit_v: VideoConfig,
    pub align: AlignSection,
    pub train: TrainSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsSection::default(),
            vq: VqConfig::default(),
            dit_a: DenoiserConfig::desk(),
            dit_v: VideoConfig::desk(),
            align: AlignSection::default(),
            train: TrainSection::default(),
            run: RunSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse, validate, and resolve paths against the file's directory.
    /// The reference image must exist; checkpoint and output paths must
    /// have an existing parent directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base)?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) -> Result<()> {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let p = &mut self.paths;
        for (name, path) in [("vq", &mut p.vq), ("dit_a", &mut p.dit_a), ("dit_v", &mut p.dit_v), ("out", &mut p.out)] {
            *path = join(path);
            let parent = path.parent().unwrap_or(Path::new("."));
            if !parent.as_os_str().is_empty() && !parent.is_dir() {
                return Err(Error::Config(format!("paths.{name}: directory {} does not exist", parent.display())));
            }
        }
        if let Some(r) = &mut p.reference {
            *r = join(r);
            if !r.is_file() {
                return Err(Error::Config(format!("paths.reference: {} not found", r.display())));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.vq.validate()?;
        self.dit_a.validate()?;
        self.dit_v.validate()?;
        if self.dit_a.codebook != self.vq.codebook_size {
            return Err(Error::Config(format!(
                "dit_a.codebook {} differs from vq.codebook_size {}",
                self.dit_a.codebook, self.vq.codebook_size
            )));
        }
        let t = &self.train;
        if t.gesture_frames < self.dit_a.window || t.gesture_frames % TEMPORAL_STRIDE != 0 {
            return Err(Error::Config(format!(
                "train.gesture_frames {} must be a multiple of {TEMPORAL_STRIDE} and at least dit_a.window",
                t.gesture_frames
            )));
        }
        if t.gesture_clips == 0 || t.dit_a_clips == 0 || t.dit_a_clips > t.gesture_clips || t.video_clips == 0 {
            return Err(Error::Config("train clip counts must be positive (dit_a_clips ≤ gesture_clips)".into()));
        }
        if t.video_frames < self.dit_v.frames {
            return Err(Error::Config("train.video_frames is shorter than dit_v.frames".into()));
        }
        if self.run.frames < self.dit_v.frames {
            return Err(Error::Config(format!(
                "run.frames {} is shorter than one video window ({})",
                self.run.frames, self.dit_v.frames
            )));
        }
        if !(self.align.lambda_tr >= 0.0 && self.align.learning_rate > 0.0) {
            return Err(Error::Config("align.lambda_tr must be ≥ 0 and learning_rate > 0".into()));
        }
        Ok(())
    }
}

/// `frames` rows starting at `start` of a clip.
pub fn clip_window(clip: &GestureClip, start: usize, frames: usize) -> Result<GestureClip> {
    if start + frames > clip.len() {
        return Err(Error::shape(format!("rows {start}..{} of a {}-frame clip", start + frames, clip.len())));
    }
    let rows = clip.frames().data()[start * GESTURE_DIM..(start + frames) * GESTURE_DIM].to_vec();
    GestureClip::from_raw(Tensor::new(&[frames, GESTURE_DIM], rows)?)
}

pub fn train_vq(
    config: &VqConfig,
    clips: &[GestureClip],
    steps: usize,
    seed: u64,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<VqModel> {
    let mut model = VqModel::new(*config, seed)?;
    model.fit_normalization(clips)?;
    let mut trainer = VqTrainer::new(&model, seed.wrapping_add(1));
    for step in 0..steps {
        let batch = trainer.sample_batch(&model, clips)?;
        let l = vq_train_step(&mut model, &mut trainer, &batch)?;
        progress(step + 1, l.total);
    }
    Ok(model)
}

/// Non-overlapping `window`-frame token sequences with matching audio.
pub fn tokenize_dataset(
    vq: &VqModel,
    data: &[(GestureClip, AudioFeatures)],
    window: usize,
) -> Result<Vec<(TokenSequence, AudioFeatures)>> {
    let mut out = Vec::new();
    for (clip, audio) in data {
        if audio.frames() != clip.len() {
            return Err(Error::shape(format!("{} audio frames for {} gesture frames", audio.frames(), clip.len())));
        }
        for start in (0..).step_by(window).take_while(|s| s + window <= clip.len()) {
            out.push((vq.tokenize(&clip_window(clip, start, window)?)?, audio.window(start, start + window)?));
        }
    }
    if out.is_empty() {
        return Err(Error::Input(format!("no clip holds a {window}-frame window")));
    }
    Ok(out)
}

pub fn train_dit_a(
    config: &DenoiserConfig,
    data: &[(TokenSequence, AudioFeatures)],
    steps: usize,
    seed: u64,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<DitA> {
    let mut model = DitA::new(*config, seed)?;
    let schedule = TransitionSchedule::from_params(&config.schedule_params())?;
    let mut adam = new_optimizer(&model);
    let mut rng = stream_rng(seed, Stream::Train);
    for step in 0..steps {
        let l = if data.len() <= config.batch {
            train_step_a(&mut model, &mut adam, data, &schedule, &mut rng)?
        } else {
            let batch: Vec<_> = data.choose_multiple(&mut rng, config.batch).cloned().collect();
            train_step_a(&mut model, &mut adam, &batch, &schedule, &mut rng)?
        };
        progress(step + 1, l);
    }
    Ok(model)
}

pub fn train_dit_v(
    config: &VideoConfig,
    sequences: &[(Tensor, Tensor)],
    seed: u64,
    progress: &mut dyn FnMut(FitStage, usize, f64),
) -> Result<DitV> {
    let mut model = DitV::new(*config, seed)?;
    let mut rng = stream_rng(seed, Stream::Train);
    fit_video(&mut model, sequences, &mut rng, progress)?;
    Ok(model)
}

/// Audio frames needed to generate `frames` gesture frames with chained
/// `window`-frame motion windows overlapping by `prefix`.
pub fn motion_audio_frames(frames: usize, window: usize, prefix: usize) -> usize {
    let mut end = window;
    while end < frames {
        end += window - prefix;
    }
    end
}

/// Tokens of the first `prefix` frames of `clip` (encoded in the context
/// of up to one window so the convolutional encoder sees real neighbours).
pub fn prefix_tokens(vq: &VqModel, clip: &GestureClip, config: &DenoiserConfig) -> Result<Vec<usize>> {
    let span = clip.len().min(config.window) / TEMPORAL_STRIDE * TEMPORAL_STRIDE;
    if span < config.prefix {
        return Err(Error::Input(format!(
            "prefix clip has {} frames, need at least {}",
            clip.len(),
            config.prefix
        )));
    }
    let tokens = vq.tokenize(&clip_window(clip, 0, span)?)?;
    Ok(tokens.tokens[..config.prefix_tokens()].to_vec())
}

/// Generated motion: per-window tokens and the stitched gesture rows.
#[derive(Clone, Debug)]
pub struct LongMotion {
    pub windows: Vec<TokenSequence>,
    pub gestures: Vec<HybridGesture>,
}

/// Chain motion windows: each window after the first is clamped to the
/// last prefix tokens of its predecessor and contributes only the frames
/// after that prefix.
pub fn generate_long_motion<R: Rng + ?Sized>(
    model: &DitA,
    vq: &VqModel,
    audio: &AudioFeatures,
    prefix: &[usize],
    frames: usize,
    rng: &mut R,
) -> Result<LongMotion> {
    let c = model.config;
    if vq.config.codebook_size != c.codebook {
        return Err(Error::Config("motion model and VQ disagree on codebook size".into()));
    }
    let needed = motion_audio_frames(frames, c.window, c.prefix);
    if audio.frames() < needed {
        return Err(Error::Input(format!("{} audio frames, need {needed}", audio.frames())));
    }
    let schedule = TransitionSchedule::from_params(&c.schedule_params())?;
    let mut windows = Vec::new();
    let mut gestures: Vec<HybridGesture> = Vec::with_capacity(needed);
    let mut start = 0;
    let mut prefix = prefix.to_vec();
    while gestures.len() < frames {
        let sample = generate_motion(model, vq, &audio.window(start, start + c.window)?, &prefix, &schedule, rng)?;
        let rows = sample.decoded.reorthonormalized()?;
        let skip = if windows.is_empty() { 0 } else { c.prefix };
        gestures.extend(rows.into_iter().skip(skip));
        prefix = sample.tokens.tokens[c.tokens() - c.prefix_tokens()..].to_vec();
        windows.push(sample.tokens);
        start += c.window - c.prefix;
    }
    gestures.truncate(frames);
    Ok(LongMotion { windows, gestures })
}

/// Output of `render_motion_video`.
#[derive(Clone, Debug)]
pub struct SynthesizedVideo {
    pub video: Tensor,
    pub poses: Tensor,
    pub rms_px: f64,
    /// Per window: MSE between the sampled normalized latent and the
    /// normalized latent of the procedural render of the same motion.
    pub window_latent_mse: Vec<f64>,
}

/// Pose renders from gestures, then long video synthesis. Without a
/// reference image, the procedural render of the first pose is used.
pub fn render_motion_video<R: Rng + ?Sized>(
    model: &DitV,
    gestures: &[HybridGesture],
    reference: Option<&Tensor>,
    rng: &mut R,
) -> Result<SynthesizedVideo> {
    let cfg = &model.config;
    let (h, w) = (cfg.height, cfg.width);
    let (posed, rms_px) = pose_sequence(gestures, h, w)?;
    let poses = frames_to_tensor(&posed.iter().map(|p| render_pose(p, h, w)).collect::<Vec<_>>())?;
    let procedural = frames_to_tensor(&posed.iter().map(|p| render_person(p, h, w)).collect::<Vec<_>>())?;
    let reference = match reference {
        Some(r) => {
            if r.shape() != [1, h, w, 3] {
                return Err(Error::shape(format!("reference image {:?}, model expects 1x{h}x{w}x3", r.shape())));
            }
            r.clone()
        }
        None => frames_between(&procedural, 0, 1)?,
    };
    let reference_pose = frames_between(&poses, 0, 1)?;
    let (video, latents) = synthesize_long_traced(model, &reference, &reference_pose, &poses, rng)?;
    let window_latent_mse = latents
        .iter()
        .map(|(win, z)| {
            let target = model.normalize(&model.ae.encode(&frames_between(&procedural, win.start, win.start + cfg.frames)?)?);
            z.mse(&target)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthesizedVideo { video, poses, rms_px, window_latent_mse })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub audio_seed: u64,
    /// Only known when ground-truth tokens exist; `null` for generation.
    pub token_accuracy: Option<f64>,
    pub rms_px: f64,
    pub window_latent_mse: Vec<f64>,
    pub wall_time_s: f64,
}

impl RunReport {
    /// Schema check: version, counts, and every number finite.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!("report schema {} (expected {REPORT_SCHEMA_VERSION})", self.schema_version)));
        }
        let finite = self.rms_px.is_finite()
            && self.wall_time_s.is_finite()
            && self.token_accuracy.is_none_or(f64::is_finite)
            && self.window_latent_mse.iter().all(|v| v.is_finite());
        if !finite || self.frames == 0 || self.window_latent_mse.is_empty() {
            return Err(Error::Format("report has missing or non-finite fields".into()));
        }
        Ok(())
    }
}

/// Trained models for `run_pipeline`.
pub struct Artifacts {
    pub vq: VqModel,
    pub dit_a: DitA,
    pub dit_v: DitV,
}

fn load_stage(path: &Path, stage: &str, command: &str, magic: &[u8; 7]) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingCheckpoint {
            stage: stage.into(),
            path: path.display().to_string(),
            command: command.into(),
        });
    }
    Checkpoint::load(path, magic)
}

impl Artifacts {
    pub fn load(paths: &PathsSection) -> Result<Self> {
        let vq = VqModel::from_checkpoint(&load_stage(&paths.vq, "vq", "train-vq", VQ_MAGIC)?)?;
        let dit_a = DitA::from_checkpoint(&load_stage(&paths.dit_a, "dit_a", "train-a", DIT_A_MAGIC)?)?;
        let dit_v = DitV::from_checkpoint(&load_stage(&paths.dit_v, "dit_v", "train-v", DIT_V_MAGIC)?)?;
        Ok(Self { vq, dit_a, dit_v })
    }
}

/// Files written by `run_pipeline`.
pub const FRAMES_DIR: &str = "frames";
pub const POSES_DIR: &str = "poses";
pub const MOTION_FILE: &str = "motion.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Synthetic speech → motion tokens → gestures → pose renders → video.
/// Writes frames, pose renders, motion JSONL and `report.json` under
/// `paths.out`.
pub fn run_pipeline(config: &RunConfig) -> Result<RunReport> {
    let t0 = Instant::now();
    let art = Artifacts::load(&config.paths)?;
    let reference = match &config.paths.reference {
        Some(p) => Some(crate::io::read_png(p)?),
        None => None,
    };
    let report = run_with(config, &art, reference.as_ref(), t0)?;
    Ok(report)
}

/// `run_pipeline` with already loaded models.
pub fn run_with(config: &RunConfig, art: &Artifacts, reference: Option<&Tensor>, t0: Instant) -> Result<RunReport> {
    let seed = config.seed;
    let audio_seed = config.run.audio_seed.unwrap_or(seed);
    let c = art.dit_a.config;
    let frames = config.run.frames;
    let audio = synth_audio_features(
        audio_seed,
        motion_audio_frames(frames, c.window, c.prefix),
        DEFAULT_BEAT_DIM,
        DEFAULT_CONTENT_DIM,
    )?;
    let prefix_clip = synth_gesture_dataset(stream_rng(seed, Stream::Prefix).random(), 1, c.window)?
        .remove(0)
        .clip;
    let prefix = prefix_tokens(&art.vq, &prefix_clip, &c)?;
    let motion = generate_long_motion(&art.dit_a, &art.vq, &audio, &prefix, frames, &mut stream_rng(seed, Stream::Motion))?;
    let out = render_motion_video(&art.dit_v, &motion.gestures, reference, &mut stream_rng(seed, Stream::Video))?;

    let dir = &config.paths.out;
    std::fs::create_dir_all(dir)?;
    write_frames(&dir.join(FRAMES_DIR), &out.video)?;
    write_frames(&dir.join(POSES_DIR), &out.poses)?;
    let tree = Default::default();
    let records = motion
        .gestures
        .iter()
        .enumerate()
        .map(|(i, g)| KeypointRecord::from_gesture(i, g, &tree))
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&dir.join(MOTION_FILE), &records)?;
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        frames: out.video.shape()[0],
        height: art.dit_v.config.height,
        width: art.dit_v.config.width,
        seed,
        audio_seed,
        token_accuracy: None,
        rms_px: out.rms_px,
        window_latent_mse: out.window_latent_mse,
        wall_time_s: t0.elapsed().as_secs_f64(),
    };
    report.validate()?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join(REPORT_FILE), text + "\n")?;
    Ok(report)
}

/// Fit per-hand translations for keypoint records carrying
/// `hand_joints_3d` (root-relative) and `hand_joints_2d` (pixels). Output
/// is sorted by hand, then frame.
pub fn align_records(
    records: &[KeypointRecord],
    intrinsics: CameraIntrinsics,
    lambda_tr: f64,
    config: &AlignConfig,
) -> Result<Vec<TranslationRecord>> {
    if records.is_empty() {
        return Err(Error::Input("no keypoint records".into()));
    }
    let mut out = Vec::with_capacity(2 * records.len());
    for (h, side) in [HandSide::Left, HandSide::Right].into_iter().enumerate() {
        let mut joints_3d = Vec::with_capacity(records.len());
        let mut joints_2d = Vec::with_capacity(records.len());
        for r in records {
            let (Some(j3), Some(j2)) = (&r.hand_joints_3d, &r.hand_joints_2d) else {
                return Err(Error::Input(format!("frame {}: hand_joints_3d and hand_joints_2d are required", r.frame)));
            };
            if j3.len() != 2 || j2.len() != 2 || j3[h].len() != j2[h].len() {
                return Err(Error::Input(format!("frame {}: need 2 hands with matching joint counts", r.frame)));
            }
            joints_3d.push(j3[h].clone());
            joints_2d.push(j2[h].clone());
        }
        let problem = AlignmentProblem { joints_3d, joints_2d, intrinsics, lambda_tr };
        for (r, fit) in records.iter().zip(align_sequence(&problem, config)?) {
            out.push(TranslationRecord {
                frame: r.frame,
                hand: side,
                xyz: fit.translation.to_array(),
                loss: fit.loss,
                rms_px: fit.rms_px,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        let c = RunConfig::from_toml("seed = 3\n[dit_a]\nsteps_T = 50\nleak_u = 0.5\n[run]\nframes = 70\n").unwrap();
        assert_eq!((c.seed, c.dit_a.steps, c.dit_a.leak, c.run.frames), (3, 50, 0.5, 70));
        for bad in ["sed = 1", "[vq]\ncodebook = 3", "[run]\nframes = 10", "[dit_a]\ncodebook = 64", "[extra]\n"] {
            assert!(RunConfig::from_toml(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn config_paths_resolve_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[paths]\nvq = \"a/vq.ckpt\"\n").unwrap();
        assert!(RunConfig::load(&p).unwrap_err().to_string().contains("paths.vq"));
        std::fs::create_dir(dir.path().join("a")).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.paths.vq, dir.path().join("a/vq.ckpt"));
        std::fs::write(&p, "[paths]\nreference = \"missing.png\"\n").unwrap();
        assert!(RunConfig::load(&p).unwrap_err().to_string().contains("paths.reference"));
    }

    #[test]
    fn missing_checkpoint_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let paths = PathsSection {
            vq: dir.path().join("vq.ckpt"),
            ..PathsSection::default()
        };
        let msg = Artifacts::load(&paths).err().unwrap().to_string();
        assert!(msg.contains("vq") && msg.contains("train-vq"), "{msg}");
    }

    #[test]
    fn align_records_recovers_render_translations() {
        let data = synth_gesture_dataset(4, 1, 8).unwrap();
        let rows = data[0].clip.reorthonormalized().unwrap();
        let (posed, _) = pose_sequence(&rows, 64, 64).unwrap();
        let tree = Default::default();
        let recs = crate::io::clip_records(None, &data[0].clip, None, Some(&posed), &tree).unwrap();
        let cam = crate::render::camera_for(64, 64);
        let fits = align_records(&recs, cam, DEFAULT_LAMBDA_TR, &AlignConfig::default()).unwrap();
        assert_eq!(fits.len(), 16);
        for f in &fits {
            let h = if f.hand == HandSide::Left { 0 } else { 1 };
            let truth = posed[f.frame].translations[h].to_array();
            // Depth is weakly observable for a small hand, so compare the
            // viewing ray and the reprojection rather than raw xyz.
            let dot: f64 = (0..3).map(|i| f.xyz[i] * truth[i]).sum();
            let norm = |v: [f64; 3]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = dot / (norm(f.xyz) * norm(truth));
            assert!(cos > 0.999 && f.rms_px < 0.5, "frame {} hand {h}: cos {cos} rms {}", f.frame, f.rms_px);
        }
        let mut bare = recs.clone();
        bare[3].hand_joints_2d = None;
        assert!(align_records(&bare, cam, 10.0, &AlignConfig::default()).is_err());
    }

    #[test]
    fn motion_window_arithmetic() {
        assert_eq!(motion_audio_frames(65, 128, 16), 128);
        assert_eq!(motion_audio_frames(128, 128, 16), 128);
        assert_eq!(motion_audio_frames(129, 128, 16), 240);
        assert_eq!(motion_audio_frames(300, 128, 16), 352);
    }

    #[test]
    fn long_motion_chains_prefixes() {
        let vq_cfg = VqConfig { codebook_size: 8, latent_dim: 4, hidden: 8, window: 16, batch: 2, ..VqConfig::default() };
        let data = synth_gesture_dataset(0, 2, 32).unwrap();
        let clips: Vec<_> = data.iter().map(|s| s.clip.clone()).collect();
        let vq = train_vq(&vq_cfg, &clips, 2, 0, &mut |_, _| {}).unwrap();
        let cfg = DenoiserConfig {
            layers: 1,
            model_dim: 8,
            heads: 2,
            window: 16,
            prefix: 8,
            codebook: 8,
            steps: 5,
            ..DenoiserConfig::desk()
        };
        let model = DitA::new(cfg, 1).unwrap();
        let audio = synth_audio_features(2, motion_audio_frames(40, 16, 8), 4, 32).unwrap();
        let prefix = prefix_tokens(&vq, &clips[0], &cfg).unwrap();
        let m = generate_long_motion(&model, &vq, &audio, &prefix, 40, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(m.gestures.len(), 40);
        assert_eq!(m.windows.len(), 4);
        assert_eq!(m.windows[0].tokens[0], prefix[0]);
        for pair in m.windows.windows(2) {
            assert_eq!(pair[1].tokens[0], pair[0].tokens[1]);
        }
        let again = generate_long_motion(&model, &vq, &audio, &prefix, 40, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(again.windows, m.windows);
    }
}
