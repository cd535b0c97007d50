//! File formats: keypoint and translation JSONL, PNG frames.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioFeatures, DEFAULT_BEAT_DIM};
use crate::error::{Error, Result};
use crate::gesture::{
    decode_body, encode_body, pack_gesture, unpack_gesture, BodyKeypoints2D, GestureClip, HandPose, HandSide,
    HybridGesture, KinematicTree, NUM_BODY_JOINTS, NUM_HAND_JOINTS,
};
use crate::render::PosedFrame;
use crate::tensor::Tensor;

/// One frame of keypoints. `clip` and `audio` are extensions used by the
/// bundled synthetic datasets to group frames into clips and pair them
/// with per-frame audio features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointRecord {
    pub frame: usize,
    pub body: Vec<[f64; 2]>,
    pub left_hand_rot: Vec<Vec<f64>>,
    pub right_hand_rot: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand_joints_3d: Option<Vec<Vec<[f64; 3]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand_joints_2d: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<Vec<f64>>,
}

impl KeypointRecord {
    pub fn from_gesture(frame: usize, g: &HybridGesture, tree: &KinematicTree) -> Result<Self> {
        let (body, left, right) = unpack_gesture(g)?;
        let kp = decode_body(&body, tree)?;
        Ok(Self {
            frame,
            body: kp.points.to_vec(),
            left_hand_rot: left.to_row_major(),
            right_hand_rot: right.to_row_major(),
            hand_joints_3d: None,
            hand_joints_2d: None,
            clip: None,
            audio: None,
        })
    }

    pub fn to_gesture(&self, tree: &KinematicTree) -> Result<HybridGesture> {
        if self.body.len() != NUM_BODY_JOINTS {
            return Err(Error::Format(format!(
                "frame {}: body has {} points, expected {NUM_BODY_JOINTS}",
                self.frame,
                self.body.len()
            )));
        }
        for (name, rot) in [("left", &self.left_hand_rot), ("right", &self.right_hand_rot)] {
            if rot.len() != NUM_HAND_JOINTS || rot.iter().any(|r| r.len() != 9) {
                return Err(Error::Format(format!(
                    "frame {}: {name}_hand_rot must be {NUM_HAND_JOINTS}x9",
                    self.frame
                )));
            }
        }
        let kp = BodyKeypoints2D::from_slice(&self.body)?;
        let body = encode_body(&kp, tree)?;
        let left = HandPose::from_row_major(&self.left_hand_rot, HandSide::Left)?;
        let right = HandPose::from_row_major(&self.right_hand_rot, HandSide::Right)?;
        pack_gesture(&body, &left, &right)
    }
}

/// One fitted hand translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationRecord {
    pub frame: usize,
    pub hand: HandSide,
    pub xyz: [f64; 3],
    pub loss: f64,
    pub rms_px: f64,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        let s = serde_json::to_string(item).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{s}")?;
    }
    w.flush()?;
    Ok(())
}

/// Keypoint records grouped by their `clip` field (records without one
/// form clip 0), each group sorted by frame.
pub fn group_clips(records: Vec<KeypointRecord>) -> Vec<Vec<KeypointRecord>> {
    let mut groups: std::collections::BTreeMap<usize, Vec<KeypointRecord>> = Default::default();
    for r in records {
        groups.entry(r.clip.unwrap_or(0)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|mut g| {
            g.sort_by_key(|r| r.frame);
            g
        })
        .collect()
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:06}.png")
}

/// 8-bit RGB PNG from an `H × W × 3` slice in `[0, 1]`.
pub fn write_png(path: &Path, pixels: &[f64], height: usize, width: usize) -> Result<()> {
    if pixels.len() != height * width * 3 {
        return Err(Error::shape(format!("{} values for {height}x{width} RGB", pixels.len())));
    }
    let bytes: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// PNG as a `1 × H × W × 3` tensor in `[0, 1]` (RGB or RGBA, 8-bit).
pub fn read_png(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Indexed => return Err(Error::Format("unexpanded palette image".into())),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w * 3);
    for px in buf[..info.buffer_size()].chunks(channels) {
        for c in 0..3 {
            let v = if channels < 3 { px[0] } else { px[c] };
            data.push(v as f64 / 255.0);
        }
    }
    Tensor::new(&[1, h, w, 3], data)
}

/// Write every frame of a `K × H × W × 3` video as `frame_%06d.png`.
pub fn write_frames(dir: &Path, video: &Tensor) -> Result<Vec<PathBuf>> {
    write_frames_named(dir, "frame", video)
}

/// Write every frame as `<prefix>_%06d.png`.
pub fn write_frames_named(dir: &Path, prefix: &str, video: &Tensor) -> Result<Vec<PathBuf>> {
    let s = video.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::shape(format!("video {s:?}")));
    }
    std::fs::create_dir_all(dir)?;
    let per = s[1] * s[2] * 3;
    (0..s[0])
        .map(|i| {
            let p = dir.join(format!("{prefix}_{i:06}.png"));
            write_png(&p, &video.data()[i * per..(i + 1) * per], s[1], s[2])?;
            Ok(p)
        })
        .collect()
}

/// Read `prefix_%06d.png` files from `dir` in order, stopping at the first gap.
pub fn read_frames(dir: &Path, prefix: &str) -> Result<Tensor> {
    let mut frames = Vec::new();
    loop {
        let p = dir.join(format!("{prefix}_{:06}.png", frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(read_png(&p)?);
    }
    let first = frames
        .first()
        .ok_or_else(|| Error::Input(format!("no {prefix}_000000.png in {}", dir.display())))?;
    let shape = first.shape().to_vec();
    if frames.iter().any(|f| f.shape() != shape.as_slice()) {
        return Err(Error::shape(format!("frames in {} differ in size", dir.display())));
    }
    let n = frames.len();
    let data = frames.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(&[n, shape[1], shape[2], 3], data)
}

/// Keypoint records for one clip. With `posed`, hand joints are filled
/// in: root-relative 3D points (the translation is what alignment
/// recovers) and their projections in pixels.
pub fn clip_records(
    clip_id: Option<usize>,
    clip: &GestureClip,
    audio: Option<&AudioFeatures>,
    posed: Option<&[PosedFrame]>,
    tree: &KinematicTree,
) -> Result<Vec<KeypointRecord>> {
    let rows = clip.reorthonormalized()?;
    if audio.is_some_and(|a| a.frames() != rows.len()) || posed.is_some_and(|p| p.len() != rows.len()) {
        return Err(Error::shape("audio/pose frame counts differ from the clip"));
    }
    rows.iter()
        .enumerate()
        .map(|(f, g)| {
            let mut r = KeypointRecord::from_gesture(f, g, tree)?;
            r.clip = clip_id;
            if let Some(a) = audio {
                let mut v = a.beat.row(f).to_vec();
                v.extend_from_slice(a.content.row(f));
                r.audio = Some(v);
            }
            if let Some(p) = posed {
                r.hand_joints_3d = Some(p[f].hands_3d.iter().map(|h| h.to_vec()).collect());
                r.hand_joints_2d = Some(p[f].hands.iter().map(|h| h.to_vec()).collect());
            }
            Ok(r)
        })
        .collect()
}

/// Gesture clip (and audio, when every record carries it) from records
/// of one clip, in order.
pub fn records_to_clip(records: &[KeypointRecord], tree: &KinematicTree) -> Result<(GestureClip, Option<AudioFeatures>)> {
    let rows = records.iter().map(|r| r.to_gesture(tree)).collect::<Result<Vec<_>>>()?;
    let clip = GestureClip::from_gestures(&rows)?;
    let audio = if records.iter().all(|r| r.audio.is_some()) && !records.is_empty() {
        let width = records[0].audio.as_ref().map_or(0, Vec::len);
        if width <= DEFAULT_BEAT_DIM || records.iter().any(|r| r.audio.as_ref().map_or(0, Vec::len) != width) {
            return Err(Error::Format(format!("audio rows must all have the same width > {DEFAULT_BEAT_DIM}")));
        }
        let n = records.len();
        let row = |f: usize| records[f].audio.as_ref().expect("checked");
        let beat = Tensor::from_fn(&[n, DEFAULT_BEAT_DIM], |i| row(i / DEFAULT_BEAT_DIM)[i % DEFAULT_BEAT_DIM]);
        let cw = width - DEFAULT_BEAT_DIM;
        let content = Tensor::from_fn(&[n, cw], |i| row(i / cw)[DEFAULT_BEAT_DIM + i % cw]);
        Some(AudioFeatures::new(beat, content)?)
    } else {
        None
    };
    Ok((clip, audio))
}

/// Read a keypoint JSONL file as clips (grouped by `clip`).
pub fn read_gesture_dataset(path: &Path) -> Result<Vec<(GestureClip, Option<AudioFeatures>)>> {
    let tree = KinematicTree::default();
    let groups = group_clips(read_jsonl(path)?);
    if groups.is_empty() {
        return Err(Error::Input(format!("{} holds no records", path.display())));
    }
    groups.iter().map(|g| records_to_clip(g, &tree)).collect()
}

pub const CLIP_DIR_PREFIX: &str = "clip_";

/// `dir/clip_%03d/{frame,pose}_%06d.png` per sequence.
pub fn write_video_dataset(dir: &Path, sequences: &[(Tensor, Tensor)]) -> Result<()> {
    for (i, (video, poses)) in sequences.iter().enumerate() {
        let d = dir.join(format!("{CLIP_DIR_PREFIX}{i:03}"));
        write_frames_named(&d, "frame", video)?;
        write_frames_named(&d, "pose", poses)?;
    }
    Ok(())
}

/// Inverse of `write_video_dataset`: every `clip_*` subdirectory, sorted.
pub fn read_video_dataset(dir: &Path) -> Result<Vec<(Tensor, Tensor)>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(CLIP_DIR_PREFIX)))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Input(format!("no {CLIP_DIR_PREFIX}* directories in {}", dir.display())));
    }
    dirs.iter()
        .map(|d| {
            let video = read_frames(d, "frame")?;
            let poses = read_frames(d, "pose")?;
            if video.shape() != poses.shape() {
                return Err(Error::shape(format!("{}: frames and pose renders differ", d.display())));
            }
            Ok((video, poses))
        })
        .collect()
}

/// Quantize to 8 bits, as a PNG roundtrip would.
pub fn quantize_u8(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}
