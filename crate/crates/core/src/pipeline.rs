//! Synthetic triplet construction: alternate-outfit human images, garment
//! images extracted from videos, and pose extraction, all through
//! [`ModelClientSuite`] clients.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clients::{Gender, GarmentFrameScores, Inpainter, ModelClientSuite, Segmenter, TextToImage, Vlm};
use crate::conditioning::{PoseSequence, SourceTag, TripletSample, VideoTensor};
use crate::error::{ensure, Error, Result};
use crate::media;
use crate::tensor::Tensor;

pub const QUALITY_THRESHOLD: f32 = 95.0;
pub const FACE_SCALE: f32 = 3.0;
pub const BODY_SCALE: f32 = 1.1;
pub const DEFAULT_SAMPLES: usize = 16;
pub const DEFAULT_TOP_K: usize = 3;
pub const MASK_RETRIES: usize = 3;

/// Pixel box with `x0 < x1`, `y0 < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl BBox {
    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32) -> Result<Self> {
        ensure!(
            [x0, y0, x1, y1].iter().all(|v| v.is_finite()) && x0 < x1 && y0 < y1,
            Invalid,
            "degenerate box ({x0}, {y0}, {x1}, {y1})"
        );
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> f32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f32 {
        self.y1 - self.y0
    }

    /// Scaled by `s` about its center.
    pub fn expand(&self, s: f32) -> BBox {
        let (cx, cy) = ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0);
        let (hw, hh) = (self.width() * s / 2.0, self.height() * s / 2.0);
        BBox { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }
    }

    pub fn lerp(&self, other: &BBox, u: f32) -> BBox {
        let l = |a: f32, b: f32| a + (b - a) * u;
        BBox { x0: l(self.x0, other.x0), y0: l(self.y0, other.y0), x1: l(self.x1, other.x1), y1: l(self.y1, other.y1) }
    }

    pub fn clamp_to(&self, width: usize, height: usize) -> BBox {
        let (w, h) = (width as f32, height as f32);
        BBox { x0: self.x0.clamp(0.0, w), y0: self.y0.clamp(0.0, h), x1: self.x1.clamp(0.0, w), y1: self.y1.clamp(0.0, h) }
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width as f32 && self.y1 <= height as f32
    }
}

/// Integer crop rectangle, half-open.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn contains(&self, b: &BBox) -> bool {
        self.x as f32 <= b.x0
            && self.y as f32 <= b.y0
            && (self.x + self.width) as f32 >= b.x1
            && (self.y + self.height) as f32 >= b.y1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub rect: Rect,
    pub interpolated: BBox,
    pub u: f32,
    /// The image could not hold a 9:16 rectangle of the required size.
    pub degraded: bool,
}

/// Binary mask aligned with an image, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(data.len() == width * height, Shape, "mask has {} values for {width}×{height}", data.len());
        ensure!(data.iter().all(|&v| v <= 1), Invalid, "mask values must be 0 or 1");
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Tight bounding box of the set pixels, half-open.
    pub fn bounds(&self) -> Option<Rect> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((a, c, d, e)) => (a.min(x), c.min(y), d.max(x), e.max(y)),
                    });
                }
            }
        }
        b.map(|(x0, y0, x1, y1)| Rect { x: x0, y: y0, width: x1 - x0 + 1, height: y1 - y0 + 1 })
    }

    pub fn iou(&self, other: &MaskImage) -> f64 {
        let inter = self.data.iter().zip(&other.data).filter(|(a, b)| **a == 1 && **b == 1).count();
        let union = self.data.iter().zip(&other.data).filter(|(a, b)| **a == 1 || **b == 1).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Rounds every value to the 16-bit grid used on the wire and on disk.
pub fn quantize(v: &VideoTensor) -> VideoTensor {
    let t = v.tensor().map(|x| ((x.clamp(0.0, 1.0) * 65535.0).round() as u16) as f32 / 65535.0);
    VideoTensor::new(t).expect("quantized values stay in range")
}

/// Seeded sample of up to `n` distinct frame indices, ascending.
pub fn sample_frames(frames: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, frames, n.min(frames)).into_vec();
    idx.sort_unstable();
    idx
}

/// First sampled frame (ascending) passing every face and quality check;
/// frame 0 when none does.
pub fn select_human_frame(video: &VideoTensor, n_samples: usize, vlm: &dyn Vlm, seed: u64) -> Result<usize> {
    ensure!(video.frames() > 0, Invalid, "empty video");
    ensure!(n_samples >= 1, Invalid, "n_samples must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample_frames(video.frames(), n_samples, &mut rng) {
        let v = vlm.human_frame(&video.frame(i)?, seed)?;
        if v.face_unoccluded && v.eyes_open && v.near_frontal && v.quality >= QUALITY_THRESHOLD {
            return Ok(i);
        }
    }
    Ok(0)
}

/// Smallest 9:16 rectangle around a random blend of the expanded face and
/// body boxes, shifted inside the image.
pub fn adaptive_crop(
    width: usize,
    height: usize,
    face: &BBox,
    body: &BBox,
    scales: (f32, f32),
    rng: &mut ChaCha8Rng,
) -> Result<CropSpec> {
    ensure!(width > 0 && height > 0, Invalid, "empty image");
    for b in [face, body] {
        BBox::new(b.x0, b.y0, b.x1, b.y1)?;
    }
    let u: f32 = rng.gen();
    let fe = face.expand(scales.0);
    let be = body.expand(scales.1);
    let interpolated = fe.lerp(&be, u).clamp_to(width, height);
    let ix0 = interpolated.x0.floor() as usize;
    let iy0 = interpolated.y0.floor() as usize;
    let ix1 = (interpolated.x1.ceil() as usize).max(ix0 + 1);
    let iy1 = (interpolated.y1.ceil() as usize).max(iy0 + 1);
    let (iw, ih) = (ix1 - ix0, iy1 - iy0);
    let mut ch = ih.max((iw * 16).div_ceil(9));
    let mut cw = ((ch as f64) * 9.0 / 16.0).round() as usize;
    cw = cw.max(iw);
    let degraded = cw > width || ch > height;
    cw = cw.min(width);
    ch = ch.min(height);
    let place = |lo: usize, inner: usize, outer: usize, limit: usize| -> usize {
        let start = lo.saturating_sub((outer - inner) / 2);
        start.min(limit - outer)
    };
    let rect = Rect { x: place(ix0, iw, cw, width), y: place(iy0, ih, ch, height), width: cw, height: ch };
    Ok(CropSpec { rect, interpolated, u, degraded })
}

/// Garment type and color vocabularies for inpainting prompts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPools {
    pub types: Vec<String>,
    pub colors: Vec<String>,
}

impl Default for PromptPools {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            types: s(&["t-shirt", "shirt", "jacket", "dress", "coat", "sweater"]),
            colors: s(&["red", "green", "blue", "yellow", "purple", "orange", "pink", "black"]),
        }
    }
}

/// `"{color} {type} for {a man | a woman | a person}"`.
pub fn compose_inpaint_prompt(pools: &PromptPools, gender: Gender, rng: &mut ChaCha8Rng) -> Result<String> {
    ensure!(!pools.types.is_empty() && !pools.colors.is_empty(), Invalid, "prompt pools must be non-empty");
    let color = pools.colors.choose(rng).expect("non-empty");
    let kind = pools.types.choose(rng).expect("non-empty");
    let who = match gender {
        Gender::Male => "a man",
        Gender::Female => "a woman",
        Gender::Unknown => "a person",
    };
    Ok(format!("{color} {kind} for {who}"))
}

/// Garment mask of an auxiliary image generated for the frame's pose, so the
/// inpainted region need not follow the original garment's silhouette.
#[allow(clippy::too_many_arguments)]
pub fn build_inpaint_mask(
    pose_frame: &VideoTensor,
    t2i: &dyn TextToImage,
    segmenter: &dyn Segmenter,
    pools: &PromptPools,
    gender: Gender,
    retries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(MaskImage, String)> {
    for _ in 0..=retries {
        let prompt = compose_inpaint_prompt(pools, gender, rng)?;
        let seed = rng.gen();
        let aux = t2i.generate(&prompt, pose_frame, seed)?;
        let mask = segmenter.segment(&aux, seed)?;
        ensure!(
            mask.width == pose_frame.width() && mask.height == pose_frame.height(),
            Client,
            "segmentation does not match the frame size"
        );
        if !mask.is_empty() {
            return Ok((mask, prompt));
        }
    }
    Err(Error::Invalid(format!("empty inpainting mask after {} attempts", retries + 1)))
}

/// Inpainted frame; every pixel outside `mask` must come back unchanged.
pub fn synthesize_alt_human(
    frame: &VideoTensor,
    mask: &MaskImage,
    prompt: &str,
    inpainter: &dyn Inpainter,
    seed: u64,
) -> Result<VideoTensor> {
    ensure!(!mask.is_empty(), Invalid, "inpainting mask is empty");
    ensure!(frame.frames() == 1, Invalid, "expected a single frame");
    let out = inpainter.inpaint(frame, mask, prompt, seed)?;
    ensure!(out.height() == frame.height() && out.width() == frame.width(), Client, "inpainter changed the size");
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(x, y) && out.rgb(0, y, x).map(f32::to_bits) != frame.rgb(0, y, x).map(f32::to_bits) {
                return Err(Error::Invalid(format!("inpainter altered pixel ({x}, {y}) outside the mask")));
            }
        }
    }
    Ok(out)
}

fn lexi_key(s: &GarmentFrameScores) -> [f32; 5] {
    [s.full_body, s.sharpness, s.occlusion, s.lighting, s.composition]
}

/// Top-`k_top` frames by frontality, then the best by full-body visibility,
/// sharpness, occlusion, lighting and composition in that order. Ties go to
/// the lower frame index.
pub fn select_garment_frame(
    video: &VideoTensor,
    n_samples: usize,
    k_top: usize,
    vlm: &dyn Vlm,
    seed: u64,
) -> Result<usize> {
    ensure!(video.frames() > 0, Invalid, "empty video");
    ensure!(k_top >= 1 && n_samples >= k_top, Invalid, "need n_samples ≥ k_top ≥ 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scored = sample_frames(video.frames(), n_samples, &mut rng)
        .into_iter()
        .map(|i| Ok((i, vlm.garment_frame(&video.frame(i)?, seed)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.frontal.total_cmp(&a.1.frontal).then(a.0.cmp(&b.0)));
    scored.truncate(k_top);
    scored.sort_by(|a, b| {
        let (ka, kb) = (lexi_key(&a.1), lexi_key(&b.1));
        ka.iter()
            .zip(&kb)
            .map(|(x, y)| y.total_cmp(x))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(scored[0].0)
}

/// Garment pixels on white, shifted by a seeded offset that keeps the mask's
/// bounding box on the canvas. Empty masks yield `valid = false`.
pub fn extract_garment_image(
    frame: &VideoTensor,
    segmenter: &dyn Segmenter,
    vlm: &dyn Vlm,
    rng: &mut ChaCha8Rng,
) -> Result<(VideoTensor, bool)> {
    let (h, w) = (frame.height(), frame.width());
    let seed = rng.gen();
    let mask = segmenter.segment(frame, seed)?;
    ensure!(mask.width == w && mask.height == h, Client, "segmentation does not match the frame size");
    let mut out = VideoTensor::filled(1, h, w, [1.0; 3]);
    let Some(b) = mask.bounds() else { return Ok((out, false)) };
    let dx = rng.gen_range(-(b.x as i64)..=(w - b.x - b.width) as i64);
    let dy = rng.gen_range(-(b.y as i64)..=(h - b.y - b.height) as i64);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                out.set_rgb(0, (y as i64 + dy) as usize, (x as i64 + dx) as usize, frame.rgb(0, y, x));
            }
        }
    }
    let valid = vlm.garment_valid(&out, seed)?;
    Ok((out, valid))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    ShopPair,
    InTheWild,
    NoSynthHuman,
}

impl PipelineMode {
    pub fn name(self) -> &'static str {
        match self {
            PipelineMode::ShopPair => "shop-pair",
            PipelineMode::InTheWild => "in-the-wild",
            PipelineMode::NoSynthHuman => "no-synth-human",
        }
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [PipelineMode::ShopPair, PipelineMode::InTheWild, PipelineMode::NoSynthHuman]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pipeline mode `{s}`")))
    }
}

/// One source clip for the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceVideo {
    pub id: String,
    pub video: VideoTensor,
    /// Catalog garment images (shop-pair mode).
    pub catalog: Vec<VideoTensor>,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub source: SourceTag,
    pub human_frame: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub garment_frame: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inpaint_prompt: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TripletOutcome {
    Accepted { sample: TripletSample, provenance: Provenance },
    Rejected { stage: &'static str, reason: String },
}

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub n_samples: usize,
    pub k_top: usize,
    pub scales: (f32, f32),
    pub pools: PromptPools,
    pub mask_retries: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SAMPLES,
            k_top: DEFAULT_TOP_K,
            scales: (FACE_SCALE, BODY_SCALE),
            pools: PromptPools::default(),
            mask_retries: MASK_RETRIES,
        }
    }
}

/// Crops `rect` out of a single frame and resizes it back to `(h, w)` with
/// bilinear sampling.
pub fn crop_resize(frame: &VideoTensor, rect: Rect, h: usize, w: usize) -> VideoTensor {
    let mut data = vec![0.0f32; 3 * h * w];
    let sample = |c: usize, fy: f32, fx: f32| -> f32 {
        let y0 = fy.floor().max(0.0) as usize;
        let x0 = fx.floor().max(0.0) as usize;
        let y1 = (y0 + 1).min(rect.height - 1);
        let x1 = (x0 + 1).min(rect.width - 1);
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let p = |y: usize, x: usize| frame.pixel(0, c, rect.y + y, rect.x + x);
        (p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx) * (1.0 - ty) + (p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx) * ty
    };
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let fy = ((y as f32 + 0.5) * rect.height as f32 / h as f32 - 0.5).clamp(0.0, (rect.height - 1) as f32);
                let fx = ((x as f32 + 0.5) * rect.width as f32 / w as f32 - 0.5).clamp(0.0, (rect.width - 1) as f32);
                data[(c * h + y) * w + x] = sample(c, fy, fx);
            }
        }
    }
    VideoTensor::from_clamped(Tensor::new(vec![1, 3, h, w], data).expect("shape")).expect("finite")
}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, (&'static str, Error)> {
    r.map_err(|e| (name, e))
}

/// Runs the pipeline for one clip. Client transport failures are returned as
/// errors; every other stage failure becomes a rejection with a reason.
pub fn build_triplet(
    src: &SourceVideo,
    mode: PipelineMode,
    suite: &ModelClientSuite,
    opts: &PipelineOptions,
    seed: u64,
) -> Result<TripletOutcome> {
    match build_inner(src, mode, suite, opts, seed) {
        Ok(o) => Ok(o),
        Err((_, e @ Error::Client(_))) => Err(e),
        Err((stage, e)) => Ok(TripletOutcome::Rejected { stage, reason: e.to_string() }),
    }
}

fn build_inner(
    src: &SourceVideo,
    mode: PipelineMode,
    suite: &ModelClientSuite,
    opts: &PipelineOptions,
    seed: u64,
) -> std::result::Result<TripletOutcome, (&'static str, Error)> {
    let video = quantize(&src.video);
    let (h, w) = (video.height(), video.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = stage("pose", suite.pose.estimate(&video, rng.gen()))?;
    stage(
        "pose",
        if pose.len() == video.frames() { Ok(()) } else { Err(Error::Client("pose frame count differs".into())) },
    )?;
    let human_idx = stage("human-frame", select_human_frame(&video, opts.n_samples, suite.vlm.as_ref(), rng.gen()))?;
    let frame = stage("human-frame", video.frame(human_idx))?;

    let mut garment_frame = None;
    let garments = match (mode, src.catalog.is_empty()) {
        (PipelineMode::ShopPair, true) => {
            return Err(("garment", Error::Invalid("shop-pair mode needs a catalog garment image".into())))
        }
        (PipelineMode::ShopPair, false) | (PipelineMode::NoSynthHuman, false) => {
            src.catalog.iter().map(quantize).collect::<Vec<_>>()
        }
        _ => {
            let gi = stage(
                "garment-frame",
                select_garment_frame(&video, opts.n_samples, opts.k_top, suite.vlm.as_ref(), rng.gen()),
            )?;
            garment_frame = Some(gi);
            let gframe = stage("garment-frame", video.frame(gi))?;
            let (g, valid) = stage(
                "garment",
                extract_garment_image(&gframe, suite.segmenter.as_ref(), suite.vlm.as_ref(), &mut rng),
            )?;
            if !valid {
                return Err(("garment", Error::Invalid("garment image failed the validity check".into())));
            }
            vec![g]
        }
    };

    let (human, crop, inpaint_prompt) = if mode == PipelineMode::NoSynthHuman {
        (frame.clone(), None, None)
    } else {
        let (face, body) = stage("detect", suite.detector.detect(&frame, rng.gen()))?;
        let crop = stage("crop", adaptive_crop(w, h, &face, &body, opts.scales, &mut rng))?;
        let gender = suite.vlm.gender(&frame, rng.gen()).unwrap_or(Gender::Unknown);
        let pose_frame = PoseSequence { frames: vec![pose.frames[human_idx].clone()] }.render(h, w);
        let (mask, prompt) = stage(
            "inpaint-mask",
            build_inpaint_mask(
                &pose_frame,
                suite.t2i.as_ref(),
                suite.segmenter.as_ref(),
                &opts.pools,
                gender,
                opts.mask_retries,
                &mut rng,
            ),
        )?;
        let alt = stage("inpaint", synthesize_alt_human(&frame, &mask, &prompt, suite.inpainter.as_ref(), rng.gen()))?;
        (quantize(&crop_resize(&alt, crop.rect, h, w)), Some(crop), Some(prompt))
    };

    let source = match mode {
        PipelineMode::InTheWild => SourceTag::InTheWild,
        _ => SourceTag::Internet,
    };
    let sample = TripletSample {
        id: src.id.clone(),
        human,
        garments,
        pose,
        prompt: src.caption.clone(),
        truth: video,
        source,
    };
    stage("validate", sample.validate())?;
    Ok(TripletOutcome::Accepted {
        sample,
        provenance: Provenance { seed, source, human_frame: human_idx, garment_frame, crop, inpaint_prompt },
    })
}

/// Media paths of one manifest record, relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePaths {
    pub human: String,
    pub garments: Vec<String>,
    pub pose: String,
    pub truth: String,
}

/// One line of a triplet manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<SamplePaths>,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rejected: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

fn check_id(id: &str) -> Result<()> {
    ensure!(
        !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.'),
        Config,
        "sample id `{id}` is not a safe file name"
    );
    Ok(())
}

/// Writes the media of `sample` under `root/samples/<id>/` and returns their
/// paths relative to `root`.
pub fn write_sample(root: &Path, sample: &TripletSample) -> Result<SamplePaths> {
    check_id(&sample.id)?;
    let rel = format!("samples/{}", sample.id);
    let dir = root.join(&rel);
    fs::create_dir_all(&dir)?;
    media::save_image(&dir.join("human.png"), &sample.human)?;
    let mut garments = Vec::new();
    for (i, g) in sample.garments.iter().enumerate() {
        let name = format!("garment_{i}.png");
        media::save_image(&dir.join(&name), g)?;
        garments.push(format!("{rel}/{name}"));
    }
    media::write_pose(&dir.join("pose.json"), &sample.pose)?;
    media::write_video_dir(&dir.join("truth"), &sample.truth)?;
    Ok(SamplePaths {
        human: format!("{rel}/human.png"),
        garments,
        pose: format!("{rel}/pose.json"),
        truth: format!("{rel}/truth"),
    })
}

/// Inverse of [`write_sample`] for an accepted record.
pub fn load_sample(root: &Path, rec: &ManifestRecord) -> Result<TripletSample> {
    let paths = rec
        .paths
        .as_ref()
        .ok_or_else(|| Error::Format(format!("record `{}` has no media paths", rec.id)))?;
    let source = rec.provenance.as_ref().map(|p| p.source).unwrap_or(SourceTag::Internet);
    let sample = TripletSample {
        id: rec.id.clone(),
        human: media::load_video(&root.join(&paths.human))?,
        garments: paths.garments.iter().map(|g| media::load_video(&root.join(g))).collect::<Result<_>>()?,
        pose: media::read_pose(&root.join(&paths.pose))?,
        prompt: rec.prompt.clone(),
        truth: media::load_video(&root.join(&paths.truth))?,
        source,
    };
    sample.validate()?;
    Ok(sample)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Accepted samples of a manifest, in file order.
pub fn load_manifest_samples(path: &Path) -> Result<Vec<TripletSample>> {
    let root = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .iter()
        .filter(|r| !r.rejected)
        .map(|r| load_sample(root, r))
        .collect()
}

/// Per-clip seed, independent of clip order and worker count.
pub fn clip_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Builds every clip on a pool of `workers` threads, writes accepted media
/// under `out`, and writes `out/manifest.jsonl` in input order.
pub fn run_pipeline(
    sources: &[SourceVideo],
    mode: PipelineMode,
    suite: &ModelClientSuite,
    opts: &PipelineOptions,
    seed: u64,
    workers: usize,
    out: &Path,
) -> Result<Vec<ManifestRecord>> {
    for s in sources {
        check_id(&s.id)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<TripletOutcome>> = pool.install(|| {
        sources
            .par_iter()
            .map(|s| build_triplet(s, mode, suite, opts, clip_seed(seed, &s.id)))
            .collect()
    });
    fs::create_dir_all(out)?;
    let mut records = Vec::with_capacity(sources.len());
    for (src, outcome) in sources.iter().zip(outcomes) {
        let rec = match outcome? {
            TripletOutcome::Accepted { sample, provenance } => ManifestRecord {
                id: sample.id.clone(),
                mode: mode.name().into(),
                paths: Some(write_sample(out, &sample)?),
                prompt: sample.prompt.clone(),
                provenance: Some(provenance),
                rejected: false,
                reason: None,
            },
            TripletOutcome::Rejected { stage, reason } => ManifestRecord {
                id: src.id.clone(),
                mode: mode.name().into(),
                paths: None,
                prompt: src.caption.clone(),
                provenance: None,
                rejected: true,
                reason: Some(format!("{stage}: {reason}")),
            },
        };
        records.push(rec);
    }
    write_manifest(&out.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
