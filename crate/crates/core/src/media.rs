//! Media files: 16-bit PNG frames, frame directories with a JSON index, a
//! raw single-file video container, and pose JSON.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::conditioning::{PoseSequence, VideoTensor, JOINT_NAMES};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const INDEX_FILE: &str = "index.json";
pub const RAW_MAGIC: &[u8; 8] = b"TRYONVID";

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes frame `f` as a 16-bit RGB PNG.
pub fn save_frame(path: &Path, v: &VideoTensor, f: usize) -> Result<()> {
    ensure!(f < v.frames(), Invalid, "frame {f} out of range");
    let (h, w) = (v.height(), v.width());
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Rgb(v.rgb(f, y as usize, x as usize).map(to_u16)));
    img.save(path)?;
    Ok(())
}

/// Any RGB(A)/gray image, returned as a one-frame video in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<VideoTensor> {
    let img = image::open(path)?.into_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c];
        }
    }
    VideoTensor::from_clamped(Tensor::new(vec![1, 3, h, w], data)?)
}

pub fn save_image(path: &Path, v: &VideoTensor) -> Result<()> {
    ensure!(v.frames() == 1, Invalid, "expected a single image, got {} frames", v.frames());
    save_frame(path, v, 0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameIndex {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub bit_depth: u8,
    pub files: Vec<String>,
}

/// `frame_00000.png`, … plus `index.json`. Returns the index path.
pub fn write_video_dir(dir: &Path, v: &VideoTensor) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(v.frames());
    for f in 0..v.frames() {
        let name = format!("frame_{f:05}.png");
        save_frame(&dir.join(&name), v, f)?;
        files.push(name);
    }
    let index = FrameIndex { frames: v.frames(), height: v.height(), width: v.width(), bit_depth: 16, files };
    let path = dir.join(INDEX_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&index)?)?;
    Ok(path)
}

pub fn read_video_dir(dir: &Path) -> Result<VideoTensor> {
    let index: FrameIndex = serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join(INDEX_FILE).display())))?;
    ensure!(index.files.len() == index.frames && index.frames > 0, Format, "frame index lists {} files", index.files.len());
    let frames = index
        .files
        .iter()
        .map(|f| load_image(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    for f in &frames {
        ensure!(
            f.height() == index.height && f.width() == index.width,
            Format,
            "frame size differs from the index"
        );
    }
    VideoTensor::concat(&frames.iter().collect::<Vec<_>>())
}

/// Magic, little-endian `u32` F, H, W, then `[F, 3, H, W]` little-endian `f32`.
pub fn write_raw(path: &Path, v: &VideoTensor) -> Result<()> {
    let mut out = Vec::with_capacity(20 + 4 * v.tensor().len());
    out.extend_from_slice(RAW_MAGIC);
    for d in [v.frames(), v.height(), v.width()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in v.tensor().data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<VideoTensor> {
    let b = fs::read(path)?;
    ensure!(b.len() >= 20 && &b[..8] == RAW_MAGIC, Format, "{} is not a raw video", path.display());
    let dim = |i: usize| u32::from_le_bytes(b[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (f, h, w) = (dim(0), dim(1), dim(2));
    let n = f * 3 * h * w;
    ensure!(b.len() == 20 + 4 * n, Format, "raw video payload has the wrong length");
    let data = b[20..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    VideoTensor::new(Tensor::new(vec![f, 3, h, w], data)?)
}

/// Loads a frame directory, a raw container (`.raw`), or a single image.
pub fn load_video(path: &Path) -> Result<VideoTensor> {
    if path.is_dir() {
        read_video_dir(path)
    } else if path.extension().is_some_and(|e| e == "raw") {
        read_raw(path)
    } else {
        load_image(path)
    }
}

#[derive(Serialize, Deserialize)]
struct PoseFile {
    joints: Vec<String>,
    frames: Vec<Vec<crate::conditioning::Keypoint>>,
}

pub fn write_pose(path: &Path, pose: &PoseSequence) -> Result<()> {
    let file = PoseFile { joints: JOINT_NAMES.iter().map(|s| s.to_string()).collect(), frames: pose.frames.clone() };
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn read_pose(path: &Path) -> Result<PoseSequence> {
    let file: PoseFile = serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    ensure!(
        file.joints.iter().map(String::as_str).eq(JOINT_NAMES.iter().copied()),
        Format,
        "pose file joint layout differs from the expected one"
    );
    PoseSequence::new(file.frames)
}
