//! Media tensors, the fixed latent codec and the adapter context builders.
//!
//! The codec is training-free: every `s×s` RGB patch (optionally spanning
//! several frames) is projected onto eight orthonormal directions. Three of
//! those directions span the per-channel patch means, so decoding with the
//! transpose always reproduces each patch's mean color exactly and never does
//! worse than a patch-mean reconstruction.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::BackboneConfig;
use crate::error::{ensure, Result};
use crate::tensor::{ParamSet, Tensor};

/// Frames × 3 × H × W, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    data: Tensor,
}

impl VideoTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        ensure!(
            s.len() == 4 && s[0] >= 1 && s[1] == 3 && s[2] > 0 && s[3] > 0,
            Shape,
            "video must be [F>=1, 3, H, W], got {:?}",
            s
        );
        ensure!(
            data.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            Invalid,
            "video values must lie in [0, 1]"
        );
        Ok(Self { data })
    }

    /// Clamps into `[0, 1]` before validating; used for decoder output.
    pub fn from_clamped(data: Tensor) -> Result<Self> {
        Self::new(data.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn filled(frames: usize, height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(frames * 3 * height * width);
        for _ in 0..frames {
            for c in rgb {
                data.extend(std::iter::repeat(c).take(height * width));
            }
        }
        Self { data: Tensor::from_vec(vec![frames, 3, height, width], data) }
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }
    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn frame(&self, f: usize) -> Result<VideoTensor> {
        Ok(Self { data: self.data.slice_leading(f, f + 1)? })
    }

    pub fn concat(parts: &[&VideoTensor]) -> Result<VideoTensor> {
        let ts: Vec<&Tensor> = parts.iter().map(|p| &p.data).collect();
        Self::new(Tensor::concat_leading(&ts)?)
    }

    pub fn pixel(&self, f: usize, c: usize, y: usize, x: usize) -> f32 {
        let (h, w) = (self.height(), self.width());
        self.data.data()[((f * 3 + c) * h + y) * w + x]
    }

    pub fn rgb(&self, f: usize, y: usize, x: usize) -> [f32; 3] {
        [self.pixel(f, 0, y, x), self.pixel(f, 1, y, x), self.pixel(f, 2, y, x)]
    }

    pub fn set_rgb(&mut self, f: usize, y: usize, x: usize, rgb: [f32; 3]) {
        let (h, w) = (self.height(), self.width());
        let d = self.data.data_mut();
        for (c, v) in rgb.into_iter().enumerate() {
            d[((f * 3 + c) * h + y) * w + x] = v.clamp(0.0, 1.0);
        }
    }
}

/// T' × C × h × w latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVolume {
    data: Tensor,
}

impl LatentVolume {
    pub fn new(data: Tensor) -> Result<Self> {
        ensure!(data.shape().len() == 4, Shape, "latent must be 4-D, got {:?}", data.shape());
        ensure!(data.all_finite(), NonFinite, "latent contains non-finite values");
        Ok(Self { data })
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { data: Tensor::zeros(&[frames, channels, height, width]) }
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }
    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }
    pub fn extents(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// Frames `[start, end)`.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<LatentVolume> {
        Ok(Self { data: self.data.slice_leading(start, end)? })
    }

    pub fn concat_frames(parts: &[&LatentVolume]) -> Result<LatentVolume> {
        let nonempty: Vec<&Tensor> = parts.iter().map(|p| &p.data).filter(|t| !t.is_empty()).collect();
        if nonempty.is_empty() {
            return Ok(parts[0].clone());
        }
        Ok(Self { data: Tensor::concat_leading(&nonempty)? })
    }
}

/// Normalized keypoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub confidence: f32,
}

/// Joint layout used by the pose client and the rasterizer.
pub const JOINT_NAMES: [&str; 14] = [
    "head", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist", "r_hip",
    "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
];

pub const BONES: [(usize, usize); 13] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (1, 5),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
];

// One color per bone, evenly spaced in hue.
fn bone_color(i: usize) -> [f32; 3] {
    let h = i as f32 / BONES.len() as f32 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

const MIN_CONFIDENCE: f32 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    /// Per frame, one keypoint per entry of [`JOINT_NAMES`].
    pub frames: Vec<Vec<Keypoint>>,
}

impl PoseSequence {
    pub fn new(frames: Vec<Vec<Keypoint>>) -> Result<Self> {
        ensure!(!frames.is_empty(), Invalid, "pose sequence needs at least one frame");
        for (i, f) in frames.iter().enumerate() {
            ensure!(
                f.len() == JOINT_NAMES.len(),
                Invalid,
                "frame {i} has {} joints, expected {}",
                f.len(),
                JOINT_NAMES.len()
            );
            for k in f {
                ensure!(
                    (0.0..=1.0).contains(&k.confidence) && k.x.is_finite() && k.y.is_finite(),
                    Invalid,
                    "frame {i}: invalid keypoint {:?}",
                    k
                );
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Skeleton rendering: 3-pixel joint discs and 1-pixel bones on black,
    /// one color per limb.
    pub fn render(&self, height: usize, width: usize) -> VideoTensor {
        let mut v = VideoTensor::filled(self.frames.len(), height, width, [0.0; 3]);
        for (f, joints) in self.frames.iter().enumerate() {
            let px = |k: &Keypoint| {
                (
                    (k.x * (width as f32 - 1.0)).round() as i64,
                    (k.y * (height as f32 - 1.0)).round() as i64,
                )
            };
            for (b, &(i, j)) in BONES.iter().enumerate() {
                let (a, c) = (&joints[i], &joints[j]);
                if a.confidence < MIN_CONFIDENCE || c.confidence < MIN_CONFIDENCE {
                    continue;
                }
                let color = bone_color(b);
                for (x, y) in line_pixels(px(a), px(c)) {
                    put(&mut v, f, x, y, color);
                }
            }
            for (i, k) in joints.iter().enumerate() {
                if k.confidence < MIN_CONFIDENCE {
                    continue;
                }
                let (cx, cy) = px(k);
                let color = bone_color(i.saturating_sub(1) % BONES.len());
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        if dx * dx + dy * dy <= 1 {
                            put(&mut v, f, cx + dx, cy + dy, color);
                        }
                    }
                }
            }
        }
        v
    }
}

fn put(v: &mut VideoTensor, f: usize, x: i64, y: i64, rgb: [f32; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < v.width() && (y as usize) < v.height() {
        v.set_rgb(f, y as usize, x as usize, rgb);
    }
}

/// Bresenham segment, both endpoints included.
pub fn line_pixels(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x0, mut y0) = a;
    let (x1, y1) = b;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push((x0, y0));
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    Internet,
    Captured,
    InTheWild,
    SyntheticToy,
}

/// One training or evaluation unit.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSample {
    pub id: String,
    /// Single-frame image of the person in a different outfit.
    pub human: VideoTensor,
    pub garments: Vec<VideoTensor>,
    pub pose: PoseSequence,
    pub prompt: String,
    pub truth: VideoTensor,
    pub source: SourceTag,
}

impl TripletSample {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.human.frames() == 1, Invalid, "human image must be a single frame");
        ensure!(!self.garments.is_empty(), Invalid, "at least one garment image is required");
        for g in &self.garments {
            ensure!(g.frames() == 1, Invalid, "garment images must be single frames");
        }
        ensure!(
            self.pose.len() == self.truth.frames(),
            Invalid,
            "pose has {} frames, truth video {}",
            self.pose.len(),
            self.truth.frames()
        );
        Ok(())
    }
}

/// Fixed orthonormal patch projection.
#[derive(Clone, Debug)]
pub struct LatentCodec {
    pub spatial_stride: usize,
    pub temporal_stride: usize,
    pub channels: usize,
    /// `channels × patch_dim`, orthonormal rows.
    basis: Vec<f64>,
}

pub const LATENT_CHANNELS: usize = 8;
const CODEC_SEED: u64 = 0x5eed_c0de;

impl LatentCodec {
    pub fn new(spatial_stride: usize, temporal_stride: usize, channels: usize) -> Result<Self> {
        ensure!(spatial_stride >= 1 && temporal_stride >= 1, Invalid, "strides must be positive");
        let pdim = 3 * temporal_stride * spatial_stride * spatial_stride;
        ensure!(
            (3..=pdim).contains(&channels),
            Invalid,
            "channels {channels} must lie in 3..={pdim}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(CODEC_SEED);
        let area = temporal_stride * spatial_stride * spatial_stride;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(channels);
        // Per-channel mean directions first.
        for c in 0..3 {
            let mut r = vec![0.0; pdim];
            for j in 0..area {
                r[c * area + j] = 1.0 / (area as f64).sqrt();
            }
            rows.push(r);
        }
        while rows.len() < channels {
            let mut r: Vec<f64> =
                (0..pdim).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
            for q in &rows {
                let d: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
            let n = r.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                r.iter_mut().for_each(|a| *a /= n);
                rows.push(r);
            }
        }
        // Random rotation inside the span keeps the row space.
        let mix = random_orthogonal(channels, &mut rng);
        let mut basis = vec![0.0; channels * pdim];
        for i in 0..channels {
            for (j, row) in rows.iter().enumerate() {
                let m = mix[i * channels + j];
                for k in 0..pdim {
                    basis[i * pdim + k] += m * row[k];
                }
            }
        }
        Ok(Self { spatial_stride, temporal_stride, channels, basis })
    }

    /// Shared instance with the default strides (4 spatial, 1 temporal).
    pub fn standard() -> &'static LatentCodec {
        static CODEC: OnceLock<LatentCodec> = OnceLock::new();
        CODEC.get_or_init(|| LatentCodec::new(4, 1, LATENT_CHANNELS).expect("valid default codec"))
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.temporal_stride * self.spatial_stride * self.spatial_stride
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    fn check(&self, v: &VideoTensor) -> Result<(usize, usize, usize)> {
        let (s, st) = (self.spatial_stride, self.temporal_stride);
        ensure!(
            v.frames() % st == 0 && v.height() % s == 0 && v.width() % s == 0,
            Shape,
            "video {}x{}x{} not divisible by strides ({st}, {s}, {s})",
            v.frames(),
            v.height(),
            v.width()
        );
        Ok((v.frames() / st, v.height() / s, v.width() / s))
    }

    pub fn encode(&self, v: &VideoTensor) -> Result<LatentVolume> {
        let (tl, hl, wl) = self.check(v)?;
        let (s, st, c_out, pdim) = (self.spatial_stride, self.temporal_stride, self.channels, self.patch_dim());
        let (h, w) = (v.height(), v.width());
        let x = v.tensor().data();
        let mut out = vec![0.0f32; tl * c_out * hl * wl];
        let mut patch = vec![0.0f64; pdim];
        for t in 0..tl {
            for py in 0..hl {
                for px in 0..wl {
                    let mut j = 0;
                    for c in 0..3 {
                        for dt in 0..st {
                            for dy in 0..s {
                                for dx in 0..s {
                                    let f = t * st + dt;
                                    patch[j] = x[((f * 3 + c) * h + py * s + dy) * w + px * s + dx] as f64;
                                    j += 1;
                                }
                            }
                        }
                    }
                    for k in 0..c_out {
                        let row = &self.basis[k * pdim..(k + 1) * pdim];
                        let z: f64 = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                        out[((t * c_out + k) * hl + py) * wl + px] = z as f32;
                    }
                }
            }
        }
        LatentVolume::new(Tensor::from_vec(vec![tl, c_out, hl, wl], out))
    }

    /// Pseudo-inverse (transpose of the orthonormal basis), clamped to `[0, 1]`.
    pub fn decode(&self, z: &LatentVolume) -> Result<VideoTensor> {
        Ok(VideoTensor::from_clamped(self.decode_raw(z)?)?)
    }

    /// Unclamped pseudo-inverse.
    pub fn decode_raw(&self, z: &LatentVolume) -> Result<Tensor> {
        ensure!(
            z.channels() == self.channels,
            Shape,
            "latent has {} channels, codec {}",
            z.channels(),
            self.channels
        );
        let (s, st, c_in, pdim) = (self.spatial_stride, self.temporal_stride, self.channels, self.patch_dim());
        let [tl, _, hl, wl] = z.extents();
        let (f, h, w) = (tl * st, hl * s, wl * s);
        let zd = z.tensor().data();
        let mut out = vec![0.0f32; f * 3 * h * w];
        for t in 0..tl {
            for py in 0..hl {
                for px in 0..wl {
                    let mut j = 0;
                    for c in 0..3 {
                        for dt in 0..st {
                            for dy in 0..s {
                                for dx in 0..s {
                                    let mut acc = 0.0f64;
                                    for k in 0..c_in {
                                        acc += self.basis[k * pdim + j]
                                            * zd[((t * c_in + k) * hl + py) * wl + px] as f64;
                                    }
                                    let fr = t * st + dt;
                                    out[((fr * 3 + c) * h + py * s + dy) * w + px * s + dx] = acc as f32;
                                    j += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec(vec![f, 3, h, w], out))
    }
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut r: Vec<f64> =
            (0..n).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)).collect();
        for q in &rows {
            let d: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let norm = r.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            r.iter_mut().for_each(|a| *a /= norm);
            rows.push(r);
        }
    }
    rows.concat()
}

/// Encodes with the standard codec.
pub fn encode_latent(v: &VideoTensor) -> Result<LatentVolume> {
    LatentCodec::standard().encode(v)
}

/// Human latent (one frame) followed by the pose latents along time.
pub fn build_ham_context(z_human: &LatentVolume, z_pose: &LatentVolume) -> Result<LatentVolume> {
    ensure!(z_human.frames() == 1, Shape, "human latent must have one frame, got {}", z_human.frames());
    let [_, c, h, w] = z_human.extents();
    ensure!(
        z_pose.channels() == c && z_pose.height() == h && z_pose.width() == w,
        Shape,
        "pose latent {:?} does not match human latent {:?}",
        z_pose.extents(),
        z_human.extents()
    );
    LatentVolume::concat_frames(&[z_human, z_pose])
}

/// Garment latents in the given order, then zero frames up to `target_frames`.
pub fn build_gtm_context(garments: &[LatentVolume], target_frames: usize) -> Result<LatentVolume> {
    ensure!(!garments.is_empty(), Invalid, "at least one garment latent is required");
    let [_, c, h, w] = garments[0].extents();
    let mut total = 0;
    for g in garments {
        ensure!(g.frames() == 1, Shape, "garment latents must have one frame, got {}", g.frames());
        ensure!(
            g.channels() == c && g.height() == h && g.width() == w,
            Shape,
            "garment latent extents differ"
        );
        total += g.frames();
    }
    ensure!(
        total <= target_frames,
        Invalid,
        "{total} garment frames do not fit a context of {target_frames} frames"
    );
    let pad = LatentVolume::zeros(target_frames - total, c, h, w);
    let mut parts: Vec<&LatentVolume> = garments.iter().collect();
    parts.push(&pad);
    LatentVolume::concat_frames(&parts)
}

/// Rearranges a latent into `[N_tokens, C·pt·ph·pw]` patch rows, tokens in
/// `(t, y, x)` order and features in `(c, dt, dy, dx)` order.
pub fn latent_to_patches(z: &LatentVolume, patch: [usize; 3]) -> Result<(Tensor, [usize; 3])> {
    let [tl, c, h, w] = z.extents();
    let [pt, ph, pw] = patch;
    ensure!(
        pt > 0 && ph > 0 && pw > 0 && tl % pt == 0 && h % ph == 0 && w % pw == 0,
        Shape,
        "latent {:?} not divisible by patch {:?}",
        z.extents(),
        patch
    );
    let grid = [tl / pt, h / ph, w / pw];
    let pdim = c * pt * ph * pw;
    let n = grid[0] * grid[1] * grid[2];
    let x = z.tensor().data();
    let mut out = Vec::with_capacity(n * pdim);
    for gt in 0..grid[0] {
        for gy in 0..grid[1] {
            for gx in 0..grid[2] {
                for ch in 0..c {
                    for dt in 0..pt {
                        for dy in 0..ph {
                            for dx in 0..pw {
                                let (t, y, xx) = (gt * pt + dt, gy * ph + dy, gx * pw + dx);
                                out.push(x[((t * c + ch) * h + y) * w + xx]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(vec![n, pdim], out), grid))
}

/// Inverse of [`latent_to_patches`].
pub fn patches_to_latent(p: &Tensor, grid: [usize; 3], patch: [usize; 3], channels: usize) -> Result<LatentVolume> {
    let [pt, ph, pw] = patch;
    let pdim = channels * pt * ph * pw;
    let n = grid[0] * grid[1] * grid[2];
    ensure!(p.shape() == [n, pdim], Shape, "patch rows {:?}, expected [{n}, {pdim}]", p.shape());
    let (tl, h, w) = (grid[0] * pt, grid[1] * ph, grid[2] * pw);
    let mut out = vec![0.0f32; tl * channels * h * w];
    let x = p.data();
    let mut i = 0;
    for gt in 0..grid[0] {
        for gy in 0..grid[1] {
            for gx in 0..grid[2] {
                for ch in 0..channels {
                    for dt in 0..pt {
                        for dy in 0..ph {
                            for dx in 0..pw {
                                let (t, y, xx) = (gt * pt + dt, gy * ph + dy, gx * pw + dx);
                                out[((t * channels + ch) * h + y) * w + xx] = x[i];
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    LatentVolume::new(Tensor::from_vec(vec![tl, channels, h, w], out))
}

/// Parameters of a context projection under `prefix`: `{prefix}.w`, `{prefix}.b`.
pub fn init_projection(params: &mut ParamSet, prefix: &str, cfg: &BackboneConfig, rng: &mut ChaCha8Rng, trainable: bool) {
    let pdim = cfg.patch_dim();
    params.insert(
        format!("{prefix}.w"),
        Tensor::randn(&[pdim, cfg.model_dim], 1.0 / (pdim as f32).sqrt(), rng),
        trainable,
    );
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[cfg.model_dim]), trainable);
}

/// Convolution with kernel = stride = patch extents, i.e. a linear map of
/// non-overlapping patches, flattened to `[N_tokens, D]`.
pub fn project_context(
    g: &mut Graph,
    params: &ParamSet,
    prefix: &str,
    ctx: &LatentVolume,
    cfg: &BackboneConfig,
) -> Result<Var> {
    ensure!(
        ctx.channels() == cfg.latent_channels,
        Shape,
        "context has {} channels, backbone expects {}",
        ctx.channels(),
        cfg.latent_channels
    );
    let (rows, _) = latent_to_patches(ctx, cfg.patch)?;
    let x = g.constant(rows);
    let w = g.param(params, &format!("{prefix}.w"))?;
    let b = g.param(params, &format!("{prefix}.b"))?;
    g.linear(x, w, Some(b))
}
