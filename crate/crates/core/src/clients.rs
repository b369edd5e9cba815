//! External model clients used by the dataset pipeline.
//!
//! Each role is a trait. [`StubModels`] implements every role as a pure
//! function of its inputs and seed; [`RemoteModels`] speaks the JSON-over-HTTP
//! protocol and validates each response before use; [`serve`] exposes the
//! stubs over that same protocol.
//!
//! Request body: `{"task", "media": [{"png_base64"} | {"path"}], "params", "seed"}`,
//! POSTed to `{endpoint}/{task}`. Images travel as 16-bit RGB PNGs.

use std::io::Cursor;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{ImageBuffer, ImageFormat, Rgb};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::conditioning::{Keypoint, PoseSequence, VideoTensor, JOINT_NAMES};
use crate::error::{ensure, Error, Result};
use crate::pipeline::{BBox, MaskImage};
use crate::tensor::Tensor;

/// Environment variable overriding every remote endpoint.
pub const ENDPOINT_ENV: &str = "TRYON_CLIENT_ENDPOINT";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanFrameVerdict {
    pub face_unoccluded: bool,
    pub eyes_open: bool,
    pub near_frontal: bool,
    /// Focus, noise and exposure, 0..=100.
    pub quality: f32,
}

/// Garment-frame criteria, each 0..=100 with higher meaning better.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentFrameScores {
    pub frontal: f32,
    pub full_body: f32,
    pub sharpness: f32,
    pub occlusion: f32,
    pub lighting: f32,
    pub composition: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

pub trait Vlm: Send + Sync {
    fn human_frame(&self, frame: &VideoTensor, seed: u64) -> Result<HumanFrameVerdict>;
    fn garment_frame(&self, frame: &VideoTensor, seed: u64) -> Result<GarmentFrameScores>;
    fn gender(&self, frame: &VideoTensor, seed: u64) -> Result<Gender>;
    fn garment_valid(&self, garment: &VideoTensor, seed: u64) -> Result<bool>;
}

pub trait Detector: Send + Sync {
    /// Face and full-body boxes.
    fn detect(&self, frame: &VideoTensor, seed: u64) -> Result<(BBox, BBox)>;
}

pub trait Segmenter: Send + Sync {
    /// Upper-clothing mask.
    fn segment(&self, frame: &VideoTensor, seed: u64) -> Result<MaskImage>;
}

pub trait TextToImage: Send + Sync {
    /// Auxiliary image following the rendered pose `pose`.
    fn generate(&self, prompt: &str, pose: &VideoTensor, seed: u64) -> Result<VideoTensor>;
}

pub trait Inpainter: Send + Sync {
    fn inpaint(&self, frame: &VideoTensor, mask: &MaskImage, prompt: &str, seed: u64) -> Result<VideoTensor>;
}

pub trait PoseEstimator: Send + Sync {
    fn estimate(&self, video: &VideoTensor, seed: u64) -> Result<PoseSequence>;
}

/// One implementation per role.
#[derive(Clone)]
pub struct ModelClientSuite {
    pub vlm: Arc<dyn Vlm>,
    pub detector: Arc<dyn Detector>,
    pub segmenter: Arc<dyn Segmenter>,
    pub t2i: Arc<dyn TextToImage>,
    pub inpainter: Arc<dyn Inpainter>,
    pub pose: Arc<dyn PoseEstimator>,
}

impl ModelClientSuite {
    pub fn stub() -> Self {
        let s = Arc::new(StubModels);
        Self { vlm: s.clone(), detector: s.clone(), segmenter: s.clone(), t2i: s.clone(), inpainter: s.clone(), pose: s }
    }

    pub fn remote(r: RemoteModels) -> Self {
        let s = Arc::new(r);
        Self { vlm: s.clone(), detector: s.clone(), segmenter: s.clone(), t2i: s.clone(), inpainter: s.clone(), pose: s }
    }
}

/// Where clients live, as read from the `--clients` file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientConfig {
    /// `None` selects the in-process stubs.
    pub endpoint: Option<String>,
    pub retries: u32,
    pub timeout_ms: u64,
}

impl ClientConfig {
    /// Applies the endpoint override from [`ENDPOINT_ENV`].
    pub fn with_env(mut self) -> Self {
        if let Ok(e) = std::env::var(ENDPOINT_ENV) {
            if !e.trim().is_empty() {
                self.endpoint = Some(e.trim().to_string());
            }
        }
        self
    }

    pub fn suite(&self) -> ModelClientSuite {
        match &self.endpoint {
            None => ModelClientSuite::stub(),
            Some(e) => ModelClientSuite::remote(RemoteModels::new(
                e,
                if self.retries == 0 { 3 } else { self.retries },
                Duration::from_millis(if self.timeout_ms == 0 { 30_000 } else { self.timeout_ms }),
            )),
        }
    }
}

pub fn encode_png(v: &VideoTensor, f: usize) -> Result<String> {
    let (h, w) = (v.height(), v.width());
    let img: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(v.rgb(f, y as usize, x as usize).map(|c| (c.clamp(0.0, 1.0) * 65535.0).round() as u16))
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(B64.encode(buf.into_inner()))
}

pub fn decode_png(s: &str) -> Result<VideoTensor> {
    let bytes = B64.decode(s).map_err(|e| Error::Client(format!("bad base64 image: {e}")))?;
    let img = image::load_from_memory(&bytes)?.into_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p.0[c];
        }
    }
    VideoTensor::from_clamped(Tensor::new(vec![1, 3, h, w], data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Media {
    Inline { png_base64: String },
    Path { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRequest {
    pub task: String,
    pub media: Vec<Media>,
    #[serde(default)]
    pub params: Value,
    pub seed: u64,
}

impl ClientRequest {
    pub fn new(task: &str, frames: &[&VideoTensor], params: Value, seed: u64) -> Result<Self> {
        let mut media = Vec::new();
        for v in frames {
            for f in 0..v.frames() {
                media.push(Media::Inline { png_base64: encode_png(v, f)? });
            }
        }
        Ok(Self { task: task.to_string(), media, params, seed })
    }

    fn image(&self, i: usize) -> Result<VideoTensor> {
        match self.media.get(i) {
            Some(Media::Inline { png_base64 }) => decode_png(png_base64),
            Some(Media::Path { path }) => crate::media::load_image(path),
            None => Err(Error::Client(format!("task {} expects media #{i}", self.task))),
        }
    }

    fn video(&self) -> Result<VideoTensor> {
        let frames = (0..self.media.len()).map(|i| self.image(i)).collect::<Result<Vec<_>>>()?;
        ensure!(!frames.is_empty(), Client, "task {} expects media", self.task);
        VideoTensor::concat(&frames.iter().collect::<Vec<_>>())
    }
}

fn mask_to_json(m: &MaskImage) -> Value {
    json!({ "width": m.width, "height": m.height, "mask_base64": B64.encode(&m.data) })
}

fn mask_from_json(v: &Value) -> Result<MaskImage> {
    let w = v["width"].as_u64().ok_or_else(|| Error::Client("mask.width missing".into()))? as usize;
    let h = v["height"].as_u64().ok_or_else(|| Error::Client("mask.height missing".into()))? as usize;
    let s = v["mask_base64"].as_str().ok_or_else(|| Error::Client("mask_base64 missing".into()))?;
    let data = B64.decode(s).map_err(|e| Error::Client(format!("bad mask encoding: {e}")))?;
    MaskImage::new(w, h, data).map_err(|e| Error::Client(e.to_string()))
}

fn bbox_from_json(v: &Value) -> Result<BBox> {
    let a: Vec<f32> = serde_json::from_value(v.clone()).map_err(|e| Error::Client(format!("bad box: {e}")))?;
    ensure!(a.len() == 4, Client, "box needs 4 coordinates");
    BBox::new(a[0], a[1], a[2], a[3]).map_err(|e| Error::Client(e.to_string()))
}

fn check_score(name: &str, x: f32) -> Result<f32> {
    ensure!((0.0..=100.0).contains(&x), Client, "{name} score {x} outside 0..=100");
    Ok(x)
}

/// Deterministic stand-ins for every role.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubModels;

fn digest(v: &VideoTensor, seed: u64, salt: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update(seed.to_le_bytes());
    v.tensor().hash_into(&mut h);
    h.finalize().into()
}

/// Bounding box of pixels brighter than the near-black background.
fn foreground_box(frame: &VideoTensor, f: usize) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = (frame.height(), frame.width());
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..h {
        for x in 0..w {
            let p = frame.rgb(f, y, x);
            if p.iter().cloned().fold(0.0, f32::max) > 0.05 {
                b = Some(match b {
                    None => (x, y, x + 1, y + 1),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                });
            }
        }
    }
    b
}

fn saturated(p: [f32; 3]) -> bool {
    let mx = p.iter().cloned().fold(f32::MIN, f32::max);
    let mn = p.iter().cloned().fold(f32::MAX, f32::min);
    mx - mn > 0.45
}

/// Named colors understood by the stub painters.
pub const COLOR_WORDS: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.85, 0.1]),
    ("purple", [0.6, 0.2, 0.8]),
    ("orange", [1.0, 0.55, 0.1]),
    ("pink", [1.0, 0.45, 0.7]),
    ("black", [0.1, 0.1, 0.1]),
];

pub fn prompt_color(prompt: &str) -> [f32; 3] {
    prompt
        .split_whitespace()
        .find_map(|w| COLOR_WORDS.iter().find(|(n, _)| *n == w).map(|(_, c)| *c))
        .unwrap_or([0.5, 0.5, 0.5])
}

impl Vlm for StubModels {
    fn human_frame(&self, frame: &VideoTensor, seed: u64) -> Result<HumanFrameVerdict> {
        let d = digest(frame, seed, "human");
        Ok(HumanFrameVerdict {
            face_unoccluded: d[0] % 8 != 0,
            eyes_open: d[1] % 8 != 0,
            near_frontal: d[2] % 4 != 0,
            quality: 90.0 + (d[3] % 11) as f32,
        })
    }

    fn garment_frame(&self, frame: &VideoTensor, seed: u64) -> Result<GarmentFrameScores> {
        let d = digest(frame, seed, "garment");
        let s = |i: usize| (d[i] % 101) as f32;
        Ok(GarmentFrameScores {
            frontal: s(0),
            full_body: if foreground_box(frame, 0).is_some() { 100.0 } else { 0.0 },
            sharpness: s(1),
            occlusion: s(2),
            lighting: s(3),
            composition: s(4),
        })
    }

    fn gender(&self, frame: &VideoTensor, seed: u64) -> Result<Gender> {
        Ok(if digest(frame, seed, "gender")[0] % 2 == 0 { Gender::Male } else { Gender::Female })
    }

    fn garment_valid(&self, garment: &VideoTensor, _seed: u64) -> Result<bool> {
        let (h, w) = (garment.height(), garment.width());
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if garment.rgb(0, y, x) != [1.0; 3] {
                    n += 1;
                }
            }
        }
        Ok(n * 50 >= h * w)
    }
}

impl Detector for StubModels {
    fn detect(&self, frame: &VideoTensor, _seed: u64) -> Result<(BBox, BBox)> {
        let (h, w) = (frame.height() as f32, frame.width() as f32);
        let (x0, y0, x1, y1) = foreground_box(frame, 0)
            .map(|(a, b, c, d)| (a as f32, b as f32, c as f32, d as f32))
            .unwrap_or((w * 0.25, h * 0.1, w * 0.75, h * 0.9));
        let body = BBox::new(x0, y0, x1, y1)?;
        let side = ((x1 - x0) * 0.4).max(1.0).min(y1 - y0);
        let cx = (x0 + x1) / 2.0;
        let face = BBox::new((cx - side / 2.0).max(0.0), y0, (cx + side / 2.0).min(w), y0 + side)?;
        Ok((face, body))
    }
}

impl Segmenter for StubModels {
    fn segment(&self, frame: &VideoTensor, _seed: u64) -> Result<MaskImage> {
        let (h, w) = (frame.height(), frame.width());
        let data = (0..h * w).map(|i| saturated(frame.rgb(0, i / w, i % w)) as u8).collect();
        MaskImage::new(w, h, data)
    }
}

impl TextToImage for StubModels {
    /// A torso block spanning the pose's shoulders and hips, widened by a
    /// seeded margin and painted in the prompt's color.
    fn generate(&self, prompt: &str, pose: &VideoTensor, seed: u64) -> Result<VideoTensor> {
        let (h, w) = (pose.height(), pose.width());
        let mut out = VideoTensor::filled(1, h, w, [0.0; 3]);
        let Some((x0, y0, x1, y1)) = foreground_box(pose, 0) else { return Ok(out) };
        let margin = (digest(pose, seed, "t2i")[0] % 3) as usize;
        let (bw, bh) = (x1 - x0, y1 - y0);
        let tx0 = (x0 + bw / 4).saturating_sub(margin);
        let tx1 = (x1 - bw / 4 + margin).min(w);
        let ty0 = y0 + bh / 5;
        let ty1 = (y0 + bh * 3 / 5 + margin).min(h);
        let color = prompt_color(prompt);
        for y in ty0..ty1 {
            for x in tx0..tx1 {
                out.set_rgb(0, y, x, color);
            }
        }
        Ok(out)
    }
}

impl Inpainter for StubModels {
    fn inpaint(&self, frame: &VideoTensor, mask: &MaskImage, prompt: &str, _seed: u64) -> Result<VideoTensor> {
        ensure!(
            mask.width == frame.width() && mask.height == frame.height(),
            Client,
            "mask does not match the frame"
        );
        let mut out = frame.clone();
        let color = prompt_color(prompt);
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(x, y) {
                    out.set_rgb(0, y, x, color);
                }
            }
        }
        Ok(out)
    }
}

impl PoseEstimator for StubModels {
    /// Joints placed proportionally inside each frame's foreground box.
    fn estimate(&self, video: &VideoTensor, _seed: u64) -> Result<PoseSequence> {
        const LAYOUT: [(f32, f32); 14] = [
            (0.5, 0.1),
            (0.5, 0.2),
            (0.2, 0.22),
            (0.1, 0.4),
            (0.05, 0.55),
            (0.8, 0.22),
            (0.9, 0.4),
            (0.95, 0.55),
            (0.35, 0.6),
            (0.35, 0.8),
            (0.35, 0.98),
            (0.65, 0.6),
            (0.65, 0.8),
            (0.65, 0.98),
        ];
        let (h, w) = ((video.height() - 1).max(1) as f32, (video.width() - 1).max(1) as f32);
        let mut frames = Vec::with_capacity(video.frames());
        for f in 0..video.frames() {
            let joints = match foreground_box(video, f) {
                Some((x0, y0, x1, y1)) => LAYOUT
                    .iter()
                    .map(|&(u, v)| Keypoint {
                        x: ((x0 as f32 + u * (x1 - x0 - 1) as f32) / w).clamp(0.0, 1.0),
                        y: ((y0 as f32 + v * (y1 - y0 - 1) as f32) / h).clamp(0.0, 1.0),
                        confidence: 0.9,
                    })
                    .collect(),
                None => vec![Keypoint { x: 0.5, y: 0.5, confidence: 0.0 }; JOINT_NAMES.len()],
            };
            frames.push(joints);
        }
        PoseSequence::new(frames)
    }
}

/// Runs one wire request against the stubs; the response is task-specific JSON.
pub fn dispatch(stub: &StubModels, req: &ClientRequest) -> Result<Value> {
    let s = req.seed;
    Ok(match req.task.as_str() {
        "vlm.human_frame" => serde_json::to_value(stub.human_frame(&req.image(0)?, s)?)?,
        "vlm.garment_frame" => serde_json::to_value(stub.garment_frame(&req.image(0)?, s)?)?,
        "vlm.gender" => json!({ "gender": stub.gender(&req.image(0)?, s)? }),
        "vlm.garment_valid" => json!({ "valid": stub.garment_valid(&req.image(0)?, s)? }),
        "detect" => {
            let (f, b) = stub.detect(&req.image(0)?, s)?;
            json!({ "face": [f.x0, f.y0, f.x1, f.y1], "body": [b.x0, b.y0, b.x1, b.y1] })
        }
        "segment" => mask_to_json(&stub.segment(&req.image(0)?, s)?),
        "t2i" => {
            let prompt = req.params["prompt"].as_str().unwrap_or_default();
            json!({ "image_png_base64": encode_png(&stub.generate(prompt, &req.image(0)?, s)?, 0)? })
        }
        "inpaint" => {
            let prompt = req.params["prompt"].as_str().unwrap_or_default();
            let mask = mask_from_json(&req.params["mask"])?;
            json!({ "image_png_base64": encode_png(&stub.inpaint(&req.image(0)?, &mask, prompt, s)?, 0)? })
        }
        "pose" => serde_json::to_value(stub.estimate(&req.video()?, s)?)?,
        t if t.starts_with("features.") => crate::metrics::serve_features(t, &req.video()?)?,
        other => return Err(Error::Client(format!("unknown task `{other}`"))),
    })
}

/// HTTP client for every role, with retries and exponential backoff.
pub struct RemoteModels {
    endpoint: String,
    retries: u32,
    agent: ureq::Agent,
}

impl RemoteModels {
    pub fn new(endpoint: &str, retries: u32, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            retries: retries.max(1),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    pub fn call(&self, req: ClientRequest) -> Result<Value> {
        let url = format!("{}/{}", self.endpoint, req.task);
        let mut last = String::new();
        for attempt in 0..self.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 << (attempt - 1)));
            }
            match self.agent.post(&url).send_json(&req) {
                Ok(resp) => {
                    return resp
                        .into_json::<Value>()
                        .map_err(|e| Error::Client(format!("{url}: unreadable response: {e}")))
                }
                Err(ureq::Error::Status(code, resp)) if code < 500 => {
                    let body = resp.into_string().unwrap_or_default();
                    return Err(Error::Client(format!("{url}: HTTP {code}: {body}")));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Client(format!("{url}: failed after {} attempts: {last}", self.retries)))
    }

    fn image_call(&self, task: &str, frame: &VideoTensor, params: Value, seed: u64) -> Result<Value> {
        self.call(ClientRequest::new(task, &[frame], params, seed)?)
    }
}

fn field<T: serde::de::DeserializeOwned>(v: &Value, task: &str) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::Client(format!("{task}: response schema: {e}")))
}

fn image_field(v: &Value, task: &str) -> Result<VideoTensor> {
    let s = v["image_png_base64"]
        .as_str()
        .ok_or_else(|| Error::Client(format!("{task}: image_png_base64 missing")))?;
    decode_png(s)
}

impl Vlm for RemoteModels {
    fn human_frame(&self, frame: &VideoTensor, seed: u64) -> Result<HumanFrameVerdict> {
        let v: HumanFrameVerdict = field(&self.image_call("vlm.human_frame", frame, Value::Null, seed)?, "vlm.human_frame")?;
        check_score("quality", v.quality)?;
        Ok(v)
    }

    fn garment_frame(&self, frame: &VideoTensor, seed: u64) -> Result<GarmentFrameScores> {
        let s: GarmentFrameScores =
            field(&self.image_call("vlm.garment_frame", frame, Value::Null, seed)?, "vlm.garment_frame")?;
        for (n, x) in [
            ("frontal", s.frontal),
            ("full_body", s.full_body),
            ("sharpness", s.sharpness),
            ("occlusion", s.occlusion),
            ("lighting", s.lighting),
            ("composition", s.composition),
        ] {
            check_score(n, x)?;
        }
        Ok(s)
    }

    fn gender(&self, frame: &VideoTensor, seed: u64) -> Result<Gender> {
        let v = self.image_call("vlm.gender", frame, Value::Null, seed)?;
        field(&v["gender"], "vlm.gender")
    }

    fn garment_valid(&self, garment: &VideoTensor, seed: u64) -> Result<bool> {
        let v = self.image_call("vlm.garment_valid", garment, Value::Null, seed)?;
        v["valid"].as_bool().ok_or_else(|| Error::Client("vlm.garment_valid: `valid` missing".into()))
    }
}

impl Detector for RemoteModels {
    fn detect(&self, frame: &VideoTensor, seed: u64) -> Result<(BBox, BBox)> {
        let v = self.image_call("detect", frame, Value::Null, seed)?;
        Ok((bbox_from_json(&v["face"])?, bbox_from_json(&v["body"])?))
    }
}

impl Segmenter for RemoteModels {
    fn segment(&self, frame: &VideoTensor, seed: u64) -> Result<MaskImage> {
        let m = mask_from_json(&self.image_call("segment", frame, Value::Null, seed)?)?;
        ensure!(m.width == frame.width() && m.height == frame.height(), Client, "segment: mask size differs from frame");
        Ok(m)
    }
}

impl TextToImage for RemoteModels {
    fn generate(&self, prompt: &str, pose: &VideoTensor, seed: u64) -> Result<VideoTensor> {
        let v = self.image_call("t2i", pose, json!({ "prompt": prompt }), seed)?;
        let img = image_field(&v, "t2i")?;
        ensure!(img.height() == pose.height() && img.width() == pose.width(), Client, "t2i: image size differs");
        Ok(img)
    }
}

impl Inpainter for RemoteModels {
    fn inpaint(&self, frame: &VideoTensor, mask: &MaskImage, prompt: &str, seed: u64) -> Result<VideoTensor> {
        let v = self.image_call("inpaint", frame, json!({ "prompt": prompt, "mask": mask_to_json(mask) }), seed)?;
        let img = image_field(&v, "inpaint")?;
        ensure!(img.height() == frame.height() && img.width() == frame.width(), Client, "inpaint: image size differs");
        Ok(img)
    }
}

impl PoseEstimator for RemoteModels {
    fn estimate(&self, video: &VideoTensor, seed: u64) -> Result<PoseSequence> {
        let v = self.call(ClientRequest::new("pose", &[video], Value::Null, seed)?)?;
        let p: PoseSequence = field(&v, "pose")?;
        let p = PoseSequence::new(p.frames).map_err(|e| Error::Client(format!("pose: {e}")))?;
        ensure!(p.len() == video.frames(), Client, "pose: {} frames for a {}-frame video", p.len(), video.frames());
        Ok(p)
    }
}

/// Serves the stubs over HTTP until `max_requests` have been handled
/// (forever when `None`).
pub fn serve(server: &tiny_http::Server, max_requests: Option<usize>) -> Result<()> {
    let stub = StubModels;
    let mut handled = 0;
    for mut request in server.incoming_requests() {
        let mut body = String::new();
        let reply = match request.as_reader().read_to_string(&mut body) {
            Err(e) => Err(Error::Client(e.to_string())),
            Ok(_) => serde_json::from_str::<ClientRequest>(&body)
                .map_err(|e| Error::Client(format!("bad request: {e}")))
                .and_then(|req| {
                    let task = request.url().trim_start_matches('/');
                    ensure!(task == req.task, Client, "task `{}` posted to /{task}", req.task);
                    dispatch(&stub, &req)
                }),
        };
        let (code, payload) = match reply {
            Ok(v) => (200, v),
            Err(e) => (400, json!({ "error": e.to_string() })),
        };
        let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
        let resp = tiny_http::Response::from_string(payload.to_string()).with_status_code(code).with_header(header);
        let _ = request.respond(resp);
        handled += 1;
        if max_requests.is_some_and(|m| handled >= m) {
            break;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::figure;

    #[test]
    fn png_wire_round_trip_is_exact_on_16_bit_values() {
        let v = crate::pipeline::quantize(&figure(0, 0).video().frame(0).unwrap());
        let back = decode_png(&encode_png(&v, 0).unwrap()).unwrap();
        assert!(back.tensor().bit_eq(v.tensor()));
    }

    #[test]
    fn stub_segmenter_finds_the_torso() {
        let fig = figure(1, 1);
        let frame = fig.video().frame(0).unwrap();
        let m = StubModels.segment(&frame, 0).unwrap();
        let expect = &fig.garment_mask()[0];
        for (i, &e) in expect.iter().enumerate() {
            assert_eq!(m.data[i] == 1, e);
        }
    }

    #[test]
    fn stubs_are_pure() {
        let frame = figure(0, 2).video().frame(0).unwrap();
        assert_eq!(StubModels.human_frame(&frame, 3).unwrap(), StubModels.human_frame(&frame, 3).unwrap());
        assert_eq!(StubModels.gender(&frame, 3).unwrap(), StubModels.gender(&frame, 3).unwrap());
    }

    #[test]
    fn http_round_trip_matches_in_process_stubs() {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", server.server_addr().to_ip().unwrap());
        let handle = std::thread::spawn(move || serve(&server, Some(4)));
        let remote = RemoteModels::new(&addr, 1, Duration::from_secs(10));
        let video = crate::pipeline::quantize(&figure(2, 1).video());
        let frame = video.frame(0).unwrap();
        assert_eq!(remote.human_frame(&frame, 9).unwrap(), StubModels.human_frame(&frame, 9).unwrap());
        assert_eq!(remote.segment(&frame, 9).unwrap(), StubModels.segment(&frame, 9).unwrap());
        assert_eq!(remote.estimate(&video, 9).unwrap(), StubModels.estimate(&video, 9).unwrap());
        let mask = StubModels.segment(&frame, 0).unwrap();
        let a = remote.inpaint(&frame, &mask, "red shirt", 1).unwrap();
        let b = StubModels.inpaint(&frame, &mask, "red shirt", 1).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()) <= 0.5 / 65535.0);
        handle.join().unwrap().unwrap();
    }

    #[test]
    fn unreachable_endpoint_is_a_client_error() {
        let remote = RemoteModels::new("http://127.0.0.1:9", 2, Duration::from_millis(200));
        let frame = figure(0, 0).video().frame(0).unwrap();
        assert!(matches!(remote.gender(&frame, 0), Err(Error::Client(_))));
    }
}
