//! Evaluation: pixel metrics, a perceptual-distance proxy, Fréchet distances
//! over pluggable feature extractors, and fixed-layout report tables.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::clients::{ClientRequest, RemoteModels};
use crate::conditioning::VideoTensor;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
pub const SHRINKAGE: f64 = 1e-3;
const NEG_EIG_TOL: f64 = -1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn check_pair(pred: &VideoTensor, truth: &VideoTensor) -> Result<()> {
    ensure!(
        pred.tensor().shape() == truth.tensor().shape(),
        Shape,
        "prediction {:?} vs truth {:?}",
        pred.tensor().shape(),
        truth.tensor().shape()
    );
    Ok(())
}

pub fn psnr(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable Gaussian filter of an `h × w` plane.
fn filter(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..k).map(|i| g[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| g[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean SSIM of two planes with values in `[0, 1]`.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    ensure!(h >= SSIM_WINDOW && w >= SSIM_WINDOW, Shape, "SSIM needs frames of at least {SSIM_WINDOW}×{SSIM_WINDOW}");
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (ma, mb) = (filter(a, h, w, &g), filter(b, h, w, &g));
    let (saa, sbb, sab) = (filter(&prod(a, a), h, w, &g), filter(&prod(b, b), h, w, &g), filter(&prod(a, b), h, w, &g));
    let n = ma.len();
    let mut total = 0.0;
    for i in 0..n {
        let (va, vb, cov) = (saa[i] - ma[i] * ma[i], sbb[i] - mb[i] * mb[i], sab[i] - ma[i] * mb[i]);
        total += ((2.0 * ma[i] * mb[i] + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma[i] * ma[i] + mb[i] * mb[i] + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / n as f64)
}

fn plane(v: &VideoTensor, f: usize, c: usize) -> Vec<f64> {
    let hw = v.height() * v.width();
    let off = (f * 3 + c) * hw;
    v.tensor().data()[off..off + hw].iter().map(|&x| x as f64).collect()
}

/// Frame-wise L1, PSNR and SSIM, averaged over frames.
pub fn pixel_metrics(pred: &VideoTensor, truth: &VideoTensor) -> Result<PixelMetrics> {
    check_pair(pred, truth)?;
    let (h, w, nf) = (pred.height(), pred.width(), pred.frames());
    let mut m = PixelMetrics { l1: 0.0, psnr: 0.0, ssim: 0.0 };
    for f in 0..nf {
        let (mut abs, mut sq, mut ss) = (0.0, 0.0, 0.0);
        for c in 0..3 {
            let (a, b) = (plane(pred, f, c), plane(truth, f, c));
            for (x, y) in a.iter().zip(&b) {
                abs += (x - y).abs();
                sq += (x - y) * (x - y);
            }
            ss += ssim_plane(&a, &b, h, w)?;
        }
        let n = (3 * h * w) as f64;
        m.l1 += abs / n;
        m.psnr += psnr(sq / n);
        m.ssim += ss / 3.0;
    }
    let nf = nf as f64;
    Ok(PixelMetrics { l1: m.l1 / nf, psnr: m.psnr / nf, ssim: m.ssim / nf })
}

/// `[C, H, W]` activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    Image,
    VideoClip,
}

pub trait FeatureExtractor: Send + Sync {
    fn kind(&self) -> ExtractorKind;
    fn dim(&self) -> usize;
    /// Per-layer activations of one frame (image extractors only).
    fn layers(&self, _frame: &VideoTensor) -> Result<Vec<FeatureMap>> {
        Err(Error::Invalid("extractor has no spatial layers".into()))
    }
    /// Global descriptor: of one frame for image extractors, of the whole
    /// clip for clip extractors.
    fn embed(&self, v: &VideoTensor) -> Result<Vec<f64>>;
}

/// Fixed random 3×3 convolutions with stride 2 and ReLU.
#[derive(Clone, Debug)]
pub struct ConvStack {
    widths: Vec<usize>,
    kernels: Vec<Tensor>,
}

impl ConvStack {
    pub fn new(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let mut kernels = Vec::new();
        for &c in widths {
            kernels.push(Tensor::randn(&[c, cin * 9], (2.0 / (cin * 9) as f32).sqrt(), &mut rng));
            cin = c;
        }
        Self { widths: widths.to_vec(), kernels }
    }

    pub fn standard() -> Self {
        Self::new(&[8, 16, 32], 0xf1d)
    }
}

fn conv_stride2(x: &FeatureMap, k: &Tensor, cout: usize) -> FeatureMap {
    let (cin, h, w) = (x.channels, x.height, x.width);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let kd = k.data();
    let mut out = vec![0.0f32; cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = 0.0f32;
                for c in 0..cin {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (iy, ix) = ((2 * y + dy) as i64 - 1, (2 * xo + dx) as i64 - 1);
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += kd[o * cin * 9 + c * 9 + dy * 3 + dx] * x.data[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = acc.max(0.0);
            }
        }
    }
    FeatureMap { channels: cout, height: oh, width: ow, data: out }
}

impl FeatureExtractor for ConvStack {
    fn kind(&self) -> ExtractorKind {
        ExtractorKind::Image
    }

    fn dim(&self) -> usize {
        self.widths.iter().sum()
    }

    fn layers(&self, frame: &VideoTensor) -> Result<Vec<FeatureMap>> {
        ensure!(frame.frames() == 1, Invalid, "image extractor takes one frame");
        let mut x = FeatureMap {
            channels: 3,
            height: frame.height(),
            width: frame.width(),
            data: frame.tensor().data().to_vec(),
        };
        let mut out = Vec::new();
        for (k, &c) in self.kernels.iter().zip(&self.widths) {
            x = conv_stride2(&x, k, c);
            out.push(x.clone());
        }
        Ok(out)
    }

    fn embed(&self, frame: &VideoTensor) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(self.dim());
        for m in self.layers(frame)? {
            let hw = (m.height * m.width) as f64;
            for c in 0..m.channels {
                let s: f64 = m.data[c * m.height * m.width..(c + 1) * m.height * m.width].iter().map(|&x| x as f64).sum();
                v.push(s / hw);
            }
        }
        Ok(v)
    }
}

/// Average-pool pyramid over (time, height, width) cells of the clip and,
/// optionally, of its absolute frame differences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolPyramid {
    pub temporal: Vec<usize>,
    pub spatial: Vec<usize>,
    pub motion: bool,
}

impl PoolPyramid {
    /// Stand-in for the I3D backbone.
    pub fn i3d() -> Self {
        Self { temporal: vec![1, 2], spatial: vec![1, 2, 4], motion: true }
    }

    /// Stand-in for the ResNeXt backbone.
    pub fn resnext() -> Self {
        Self { temporal: vec![1], spatial: vec![1, 2, 3], motion: false }
    }

    fn cells(&self) -> usize {
        self.temporal.iter().map(|t| self.spatial.iter().map(|s| t * s * s).sum::<usize>()).sum()
    }

    fn pool(&self, v: &[f32], f: usize, h: usize, w: usize, out: &mut Vec<f64>) {
        for &tb in &self.temporal {
            for &sb in &self.spatial {
                for ti in 0..tb {
                    let (f0, f1) = (ti * f / tb, ((ti + 1) * f / tb).max(ti * f / tb + 1).min(f));
                    for yi in 0..sb {
                        let (y0, y1) = (yi * h / sb, ((yi + 1) * h / sb).max(yi * h / sb + 1));
                        for xi in 0..sb {
                            let (x0, x1) = (xi * w / sb, ((xi + 1) * w / sb).max(xi * w / sb + 1));
                            for c in 0..3 {
                                let mut s = 0.0f64;
                                for fr in f0..f1 {
                                    for y in y0..y1 {
                                        for x in x0..x1 {
                                            s += v[((fr * 3 + c) * h + y) * w + x] as f64;
                                        }
                                    }
                                }
                                out.push(s / ((f1 - f0) * (y1 - y0) * (x1 - x0)) as f64);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl FeatureExtractor for PoolPyramid {
    fn kind(&self) -> ExtractorKind {
        ExtractorKind::VideoClip
    }

    fn dim(&self) -> usize {
        3 * self.cells() * if self.motion { 2 } else { 1 }
    }

    fn embed(&self, v: &VideoTensor) -> Result<Vec<f64>> {
        let (f, h, w) = (v.frames(), v.height(), v.width());
        ensure!(
            self.spatial.iter().all(|&s| s >= 1 && s <= h && s <= w) && self.temporal.iter().all(|&t| t >= 1),
            Shape,
            "clip {f}×{h}×{w} too small for the pooling pyramid"
        );
        let mut out = Vec::with_capacity(self.dim());
        self.pool(v.tensor().data(), f, h, w, &mut out);
        if self.motion {
            let d = v.tensor().data();
            let n = 3 * h * w;
            let diff: Vec<f32> = if f < 2 {
                vec![0.0; n]
            } else {
                (0..(f - 1) * n).map(|i| (d[i + n] - d[i]).abs()).collect()
            };
            self.pool(&diff, (f - 1).max(1), h, w, &mut out);
        }
        Ok(out)
    }
}

fn maps_to_json(maps: &[FeatureMap]) -> Value {
    Value::Array(
        maps.iter()
            .map(|m| json!({ "channels": m.channels, "height": m.height, "width": m.width, "data": m.data }))
            .collect(),
    )
}

/// Stub answers for the `features.image`, `features.clip.i3d` and
/// `features.clip.resnext` wire tasks.
pub fn serve_features(task: &str, v: &VideoTensor) -> Result<Value> {
    match task {
        "features.image" => {
            let fx = ConvStack::standard();
            Ok(json!({ "layers": maps_to_json(&fx.layers(v)?), "embedding": fx.embed(v)? }))
        }
        "features.clip.i3d" => Ok(json!({ "embedding": PoolPyramid::i3d().embed(v)? })),
        "features.clip.resnext" => Ok(json!({ "embedding": PoolPyramid::resnext().embed(v)? })),
        other => Err(Error::Client(format!("unknown task `{other}`"))),
    }
}

/// Extractor behind an HTTP endpoint speaking the client wire protocol.
pub struct RemoteExtractor {
    models: RemoteModels,
    task: String,
    kind: ExtractorKind,
    dim: usize,
}

impl RemoteExtractor {
    pub fn new(models: RemoteModels, task: &str, kind: ExtractorKind, dim: usize) -> Self {
        Self { models, task: task.into(), kind, dim }
    }

    fn query(&self, v: &VideoTensor) -> Result<Value> {
        self.models.call(ClientRequest::new(&self.task, &[v], Value::Null, 0)?)
    }
}

impl FeatureExtractor for RemoteExtractor {
    fn kind(&self) -> ExtractorKind {
        self.kind
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn layers(&self, frame: &VideoTensor) -> Result<Vec<FeatureMap>> {
        let r = self.query(frame)?;
        let layers = r["layers"].as_array().ok_or_else(|| Error::Client(format!("{}: layers missing", self.task)))?;
        layers
            .iter()
            .map(|l| {
                let get = |k: &str| l[k].as_u64().map(|x| x as usize).ok_or_else(|| Error::Client(format!("layer {k} missing")));
                let (channels, height, width) = (get("channels")?, get("height")?, get("width")?);
                let data: Vec<f32> = serde_json::from_value(l["data"].clone())
                    .map_err(|e| Error::Client(format!("{}: layer data: {e}", self.task)))?;
                ensure!(data.len() == channels * height * width, Client, "{}: layer size mismatch", self.task);
                Ok(FeatureMap { channels, height, width, data })
            })
            .collect()
    }

    fn embed(&self, v: &VideoTensor) -> Result<Vec<f64>> {
        let e: Vec<f64> = serde_json::from_value(self.query(v)?["embedding"].clone())
            .map_err(|e| Error::Client(format!("{}: embedding: {e}", self.task)))?;
        ensure!(e.len() == self.dim, Client, "{}: embedding has {} values, expected {}", self.task, e.len(), self.dim);
        ensure!(e.iter().all(|x| x.is_finite()), Client, "{}: non-finite embedding", self.task);
        Ok(e)
    }
}

/// Mean over frames and layers of the squared distance between
/// channel-normalized activations, averaged over positions.
pub fn lpips_proxy(pred: &VideoTensor, truth: &VideoTensor, fx: &dyn FeatureExtractor) -> Result<f64> {
    check_pair(pred, truth)?;
    ensure!(fx.kind() == ExtractorKind::Image, Invalid, "LPIPS proxy needs an image extractor");
    let mut total = 0.0;
    for f in 0..pred.frames() {
        let (la, lb) = (fx.layers(&pred.frame(f)?)?, fx.layers(&truth.frame(f)?)?);
        ensure!(la.len() == lb.len() && !la.is_empty(), Invalid, "extractor returned mismatched layers");
        let mut frame_d = 0.0;
        for (a, b) in la.iter().zip(&lb) {
            let hw = a.height * a.width;
            let mut d = 0.0;
            for p in 0..hw {
                let col = |m: &FeatureMap| (0..m.channels).map(|c| m.data[c * hw + p] as f64).collect::<Vec<_>>();
                let (u, v) = (col(a), col(b));
                let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-10;
                let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-10;
                d += u.iter().zip(&v).map(|(x, y)| (x / nu - y / nv).powi(2)).sum::<f64>();
            }
            frame_d += d / hw as f64;
        }
        total += frame_d / la.len() as f64;
    }
    Ok(total / pred.frames() as f64)
}

fn moments(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    ensure!(!feats.is_empty(), Invalid, "empty feature set");
    let d = feats[0].len();
    ensure!(d > 0 && feats.iter().all(|f| f.len() == d), Shape, "features must share one non-zero dimension");
    ensure!(feats.iter().flatten().all(|x| x.is_finite()), NonFinite, "non-finite features");
    let n = feats.len();
    let mut mu = DVector::zeros(d);
    for f in feats {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    if n > 1 {
        for f in feats {
            let c = DVector::from_column_slice(f) - &mu;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
    }
    if n < d + 1 {
        for i in 0..d {
            cov[(i, i)] += SHRINKAGE;
        }
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let mut vals = e.eigenvalues.clone();
    for v in vals.iter_mut() {
        ensure!(*v >= NEG_EIG_TOL, NonFinite, "covariance has eigenvalue {v} below tolerance");
        *v = v.max(0.0).sqrt();
    }
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fitted to `a` and `b`.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    ensure!(mu_a.len() == mu_b.len(), Shape, "feature dimensions differ");
    let sa = sym_sqrt(cov_a)?;
    let inner = &sa * cov_b * &sa;
    let e = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let mut tr_sqrt = 0.0;
    for &v in e.eigenvalues.iter() {
        ensure!(v >= NEG_EIG_TOL, NonFinite, "product has eigenvalue {v} below tolerance");
        tr_sqrt += v.max(0.0).sqrt();
    }
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    ensure!(d.is_finite(), NonFinite, "Fréchet distance is not finite");
    Ok(d.max(0.0))
}

pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = moments(a)?;
    let (mb, cb) = moments(b)?;
    frechet_from_moments(&ma, &ca, &mb, &cb)
}

fn embed_all(clips: &[VideoTensor], fx: &dyn FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    clips.par_iter().map(|c| fx.embed(c)).collect()
}

/// Frame-level FID over every frame of every clip.
pub fn fid(preds: &[VideoTensor], truths: &[VideoTensor], fx: &dyn FeatureExtractor) -> Result<f64> {
    ensure!(fx.kind() == ExtractorKind::Image, Invalid, "FID needs an image extractor");
    let frames = |v: &[VideoTensor]| -> Result<Vec<VideoTensor>> {
        v.iter().flat_map(|c| (0..c.frames()).map(move |f| c.frame(f))).collect()
    };
    frechet_distance(&embed_all(&frames(preds)?, fx)?, &embed_all(&frames(truths)?, fx)?)
}

pub fn vfid(preds: &[VideoTensor], truths: &[VideoTensor], fx: &dyn FeatureExtractor) -> Result<f64> {
    ensure!(fx.kind() == ExtractorKind::VideoClip, Invalid, "VFID needs a clip extractor");
    ensure!(!preds.is_empty() && !truths.is_empty(), Invalid, "VFID needs clips on both sides");
    frechet_distance(&embed_all(preds, fx)?, &embed_all(truths, fx)?)
}

/// The seven reported numbers, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub fid: f64,
    pub vfid_i3d: f64,
    pub vfid_resnext: f64,
}

pub const COLUMNS: [&str; 7] = ["L1", "PSNR", "SSIM", "LPIPS", "FID", "VFID_I3D", "VFID_ResNeXt"];
const HIGHER_IS_BETTER: [bool; 7] = [false, true, true, false, false, false, false];
const DECIMALS: [usize; 7] = [4, 2, 4, 4, 2, 2, 2];

impl Scores {
    pub fn values(&self) -> [f64; 7] {
        [self.l1, self.psnr, self.ssim, self.lpips, self.fid, self.vfid_i3d, self.vfid_resnext]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        Self { l1: v[0], psnr: v[1], ssim: v[2], lpips: v[3], fid: v[4], vfid_i3d: v[5], vfid_resnext: v[6] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub id: String,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    /// Squared distance between the pair's mean predicted and mean true
    /// frame features: the mean term of its own frame-level FID.
    pub fid_contribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub dataset: String,
    pub pairs: Vec<PairMetrics>,
    pub aggregate: Scores,
}

/// Extractors used by [`evaluate`].
pub struct Extractors {
    pub image: Box<dyn FeatureExtractor>,
    pub clip_i3d: Box<dyn FeatureExtractor>,
    pub clip_resnext: Box<dyn FeatureExtractor>,
}

impl Extractors {
    pub fn stubs() -> Self {
        Self {
            image: Box::new(ConvStack::standard()),
            clip_i3d: Box::new(PoolPyramid::i3d()),
            clip_resnext: Box::new(PoolPyramid::resnext()),
        }
    }
}

fn mean_embedding(v: &VideoTensor, fx: &dyn FeatureExtractor) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; fx.dim()];
    for f in 0..v.frames() {
        for (a, x) in acc.iter_mut().zip(fx.embed(&v.frame(f)?)?) {
            *a += x / v.frames() as f64;
        }
    }
    Ok(acc)
}

/// Scores `(id, prediction, truth)` triples.
pub fn evaluate(
    method: &str,
    dataset: &str,
    pairs: &[(String, VideoTensor, VideoTensor)],
    fx: &Extractors,
) -> Result<MetricReport> {
    ensure!(!pairs.is_empty(), Invalid, "nothing to evaluate");
    let per: Vec<PairMetrics> = pairs
        .par_iter()
        .map(|(id, p, t)| {
            let px = pixel_metrics(p, t)?;
            let (ep, et) = (mean_embedding(p, fx.image.as_ref())?, mean_embedding(t, fx.image.as_ref())?);
            Ok(PairMetrics {
                id: id.clone(),
                l1: px.l1,
                psnr: px.psnr,
                ssim: px.ssim,
                lpips: lpips_proxy(p, t, fx.image.as_ref())?,
                fid_contribution: ep.iter().zip(&et).map(|(a, b)| (a - b).powi(2)).sum(),
            })
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mean = |f: fn(&PairMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
    let preds: Vec<VideoTensor> = pairs.iter().map(|p| p.1.clone()).collect();
    let truths: Vec<VideoTensor> = pairs.iter().map(|p| p.2.clone()).collect();
    let aggregate = Scores {
        l1: mean(|p| p.l1),
        psnr: mean(|p| p.psnr),
        ssim: mean(|p| p.ssim),
        lpips: mean(|p| p.lpips),
        fid: fid(&preds, &truths, fx.image.as_ref())?,
        vfid_i3d: vfid(&preds, &truths, fx.clip_i3d.as_ref())?,
        vfid_resnext: vfid(&preds, &truths, fx.clip_resnext.as_ref())?,
    };
    Ok(MetricReport { method: method.into(), dataset: dataset.into(), pairs: per, aggregate })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Methods as rows, one seven-column group per dataset.
    Table1,
    Table2,
    /// One dataset, one row per variant.
    Ablation,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Layout::Table1),
            "table2" => Ok(Layout::Table2),
            "ablation" => Ok(Layout::Ablation),
            _ => Err(Error::Config(format!("unknown report layout `{s}`"))),
        }
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub dataset: String,
    pub scores: Scores,
}

impl From<&MetricReport> for ReportRow {
    fn from(r: &MetricReport) -> Self {
        Self { method: r.method.clone(), dataset: r.dataset.clone(), scores: r.aggregate }
    }
}

fn first_seen(items: impl Iterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Fixed-width table with `**` around the best value of each column, and
/// the same rows as CSV.
pub fn render_report(rows: &[ReportRow], layout: Layout) -> Result<(String, String)> {
    ensure!(!rows.is_empty(), Invalid, "no reports to render");
    for r in rows {
        ensure!(
            !r.method.contains(',') && !r.dataset.contains(','),
            Invalid,
            "labels must not contain commas"
        );
    }
    let methods = first_seen(rows.iter().map(|r| r.method.clone()));
    let datasets = first_seen(rows.iter().map(|r| r.dataset.clone()));
    if layout == Layout::Ablation {
        ensure!(datasets.len() == 1, Invalid, "ablation layout takes one dataset, got {}", datasets.len());
    }
    let lookup = |m: &str, d: &str| rows.iter().find(|r| r.method == m && r.dataset == d);
    for m in &methods {
        for d in &datasets {
            ensure!(
                rows.iter().filter(|r| &r.method == m && &r.dataset == d).count() <= 1,
                Invalid,
                "duplicate row for {m} on {d}"
            );
        }
    }

    let mut best = vec![[None::<f64>; 7]; datasets.len()];
    for (di, d) in datasets.iter().enumerate() {
        for r in rows.iter().filter(|r| &r.dataset == d) {
            for (c, v) in r.scores.values().into_iter().enumerate() {
                let better = match best[di][c] {
                    None => true,
                    Some(b) => if HIGHER_IS_BETTER[c] { v > b } else { v < b },
                };
                if better && v.is_finite() {
                    best[di][c] = Some(v);
                }
            }
        }
    }

    let cell_w = 14;
    let label_w = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6) + 2;
    let title = match layout {
        Layout::Table1 => "Comparison with subject-to-image + animation baselines",
        Layout::Table2 => "Comparison with image try-on + animation baselines",
        Layout::Ablation => "Ablation",
    };
    let mut txt = String::new();
    writeln!(txt, "{title}").expect("string write");
    let mut head = format!("{:<label_w$}", "");
    for d in &datasets {
        write!(head, "| {:<w$}", d, w = cell_w * 7 - 2).expect("string write");
    }
    writeln!(txt, "{}", head.trim_end()).expect("string write");
    let mut cols = format!("{:<label_w$}", "Method");
    for _ in &datasets {
        cols.push_str("| ");
        for (i, c) in COLUMNS.iter().enumerate() {
            let arrow = if HIGHER_IS_BETTER[i] { "↑" } else { "↓" };
            let w = if i == 0 { cell_w - 2 } else { cell_w };
            write!(cols, "{:>w$}", format!("{c}{arrow}")).expect("string write");
        }
    }
    writeln!(txt, "{}", cols.trim_end()).expect("string write");
    for m in &methods {
        let mut line = format!("{m:<label_w$}");
        for (di, d) in datasets.iter().enumerate() {
            line.push_str("| ");
            for c in 0..7 {
                let w = if c == 0 { cell_w - 2 } else { cell_w };
                let cell = match lookup(m, d) {
                    None => "-".to_string(),
                    Some(r) => {
                        let v = r.scores.values()[c];
                        let s = format!("{v:.p$}", p = DECIMALS[c]);
                        if best[di][c] == Some(v) {
                            format!("**{s}**")
                        } else {
                            s
                        }
                    }
                };
                write!(line, "{cell:>w$}").expect("string write");
            }
        }
        writeln!(txt, "{}", line.trim_end()).expect("string write");
    }

    let mut csv = format!("method,dataset,{}\n", COLUMNS.join(","));
    for r in rows {
        let vals: Vec<String> = r.scores.values().iter().map(|v| format!("{v:?}")).collect();
        writeln!(csv, "{},{},{}", r.method, r.dataset, vals.join(",")).expect("string write");
    }
    Ok((txt, csv))
}

pub fn parse_report_csv(csv: &str) -> Result<Vec<ReportRow>> {
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty report".into()))?;
    ensure!(
        header == format!("method,dataset,{}", COLUMNS.join(",")),
        Format,
        "unexpected report header `{header}`"
    );
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ensure!(f.len() == 9, Format, "report row has {} fields", f.len());
            let mut v = [0.0; 7];
            for (i, s) in f[2..].iter().enumerate() {
                v[i] = s.parse().map_err(|e| Error::Format(format!("bad number `{s}`: {e}")))?;
            }
            Ok(ReportRow { method: f[0].into(), dataset: f[1].into(), scores: Scores::from_values(v) })
        })
        .collect()
}

/// The numeric cells of a fixed-width table, row by row, bold markers removed.
pub fn parse_report_txt(txt: &str) -> Vec<(String, Vec<Option<f64>>)> {
    txt.lines()
        .skip(3)
        .filter_map(|l| {
            let mut parts = l.split('|');
            let label = parts.next()?.trim().to_string();
            let cells = parts
                .flat_map(|g| g.split_whitespace().map(|c| c.trim_matches('*').parse().ok()).collect::<Vec<_>>())
                .collect();
            Some((label, cells))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(f: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(&[f, 3, h, w], 0.2, &mut rng).map(|x| x + 0.5);
        VideoTensor::from_clamped(t).unwrap()
    }

    #[test]
    fn identity_extremes() {
        let v = video(2, 16, 16, 0);
        let m = pixel_metrics(&v, &v).unwrap();
        assert_eq!(m.l1, 0.0);
        assert_eq!(m.psnr, PSNR_CAP);
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_closed_form() {
        let a = VideoTensor::filled(1, 12, 12, [0.0; 3]);
        let b = VideoTensor::filled(1, 12, 12, [0.5; 3]);
        let m = pixel_metrics(&b, &a).unwrap();
        assert_eq!(m.l1, 0.5);
        assert!((m.psnr - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((m.psnr - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn extent_mismatch() {
        assert!(pixel_metrics(&video(1, 12, 12, 0), &video(2, 12, 12, 0)).is_err());
    }

    #[test]
    fn lpips_identity_and_symmetry() {
        let fx = ConvStack::standard();
        let (a, b) = (video(2, 16, 16, 1), video(2, 16, 16, 2));
        assert_eq!(lpips_proxy(&a, &a, &fx).unwrap(), 0.0);
        assert_eq!(lpips_proxy(&a, &b, &fx).unwrap(), lpips_proxy(&b, &a, &fx).unwrap());
        assert!(lpips_proxy(&a, &b, &fx).unwrap() > 0.0);
    }

    #[test]
    fn frechet_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Vec<f64>> = (0..20).map(|_| Tensor::randn(&[4], 1.0, &mut rng).data().iter().map(|&x| x as f64).collect()).collect();
        let b: Vec<Vec<f64>> = (0..20).map(|_| Tensor::randn(&[4], 2.0, &mut rng).data().iter().map(|&x| x as f64 + 1.0).collect()).collect();
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-9 * ab.max(1.0));
        assert!(ab > 0.0);
    }

    #[test]
    fn frechet_rejects_non_finite() {
        assert!(matches!(frechet_distance(&[vec![f64::NAN]], &[vec![0.0]]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn vfid_identity_and_order() {
        let clips: Vec<VideoTensor> = (0..5).map(|s| video(4, 16, 16, s)).collect();
        let other: Vec<VideoTensor> = (5..10).map(|s| video(4, 16, 16, s)).collect();
        let fx = PoolPyramid::i3d();
        assert!(vfid(&clips, &clips, &fx).unwrap().abs() < 1e-6);
        let mut shuffled = other.clone();
        shuffled.reverse();
        let (a, b) = (vfid(&clips, &other, &fx).unwrap(), vfid(&clips, &shuffled, &fx).unwrap());
        assert!((a - b).abs() < 1e-9);
        assert_eq!(fx.embed(&clips[0]).unwrap().len(), fx.dim());
        assert_eq!(PoolPyramid::resnext().embed(&clips[0]).unwrap().len(), PoolPyramid::resnext().dim());
    }

    fn ours() -> ReportRow {
        ReportRow {
            method: "Ours".into(),
            dataset: "Internet".into(),
            scores: Scores::from_values([0.0719, 17.95, 0.7550, 0.2370, 91.05, 22.52, 0.39]),
        }
    }

    #[test]
    fn second_row_better_everywhere_gets_every_marker() {
        let worse = ReportRow {
            method: "Base".into(),
            scores: Scores::from_values([0.2, 10.0, 0.5, 0.5, 200.0, 40.0, 2.0]),
            ..ours()
        };
        let (txt, _) = render_report(&[worse, ours()], Layout::Table1).unwrap();
        let base = txt.lines().find(|l| l.starts_with("Base")).unwrap();
        let our = txt.lines().find(|l| l.starts_with("Ours")).unwrap();
        assert!(!base.contains("**"));
        assert_eq!(our.matches("**").count(), 14);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![ours(), ReportRow { dataset: "ViViD".into(), scores: Scores::from_values([0.1077, 14.67, 0.6686, 0.3649, 105.89, 35.72, 1.3]), ..ours() }];
        let (txt, csv) = render_report(&rows, Layout::Table1).unwrap();
        assert_eq!(parse_report_csv(&csv).unwrap(), rows);
        let parsed = parse_report_txt(&txt);
        assert_eq!(parsed[0].1.len(), 14);
        assert_eq!(parsed[0].1[0], Some(0.0719));
        assert!(render_report(&rows, Layout::Ablation).is_err());
        assert!(render_report(&[], Layout::Table1).is_err());
    }
}
