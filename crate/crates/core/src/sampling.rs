//! Inference: Euler integration of the learned velocity field from noise
//! (`t = 0`) to data (`t = 1`), then decoding to pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::TextTokens;
use crate::checkpoint::Checkpoint;
use crate::conditioning::{LatentCodec, LatentVolume, PoseSequence, VideoTensor, LATENT_CHANNELS};
use crate::dual::{check_gamma, InjectionSchedule, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::error::{ensure, Error, Result};
use crate::model::{predict_velocity, Blend, ContextLatents, ModelConfig};
use crate::tensor::{ParamSet, Tensor};

pub const DEFAULT_STEPS: usize = 20;

/// Trained weights plus the config they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck
            .meta
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Config("checkpoint has no model config".into()))?;
        let cfg: ModelConfig = serde_json::from_value(cfg).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        for prefix in cfg.variant.trainable_prefixes() {
            ensure!(
                ck.params.names().any(|n| n.starts_with(prefix)),
                Config,
                "checkpoint lacks `{prefix}*` parameters required by variant {}",
                cfg.variant
            );
        }
        ensure!(ck.params.contains("backbone.head.w"), Config, "checkpoint lacks backbone weights");
        Ok(Self { cfg, params: ck.params.clone() })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(serde_json::json!({ "kind": "model", "model": self.cfg }), self.params.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Mode {
    /// All garments condition one GTM stream.
    Standard,
    /// Exactly two garments, blended as `γ·G_A + (1 − γ)·G_B`.
    Interpolate { gamma: f32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub human: VideoTensor,
    pub garments: Vec<VideoTensor>,
    pub pose: PoseSequence,
    pub prompt: String,
    pub steps: usize,
    pub seed: u64,
    pub alpha: f32,
    pub beta: f32,
    pub mode: Mode,
}

impl GenerationRequest {
    pub fn new(human: VideoTensor, garments: Vec<VideoTensor>, pose: PoseSequence) -> Self {
        Self {
            human,
            garments,
            pose,
            prompt: String::new(),
            steps: DEFAULT_STEPS,
            seed: 0,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            mode: Mode::Standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Invalid, "steps must be at least 1");
        ensure!(self.human.frames() == 1, Invalid, "human image must be a single frame");
        ensure!(!self.garments.is_empty(), Invalid, "at least one garment image is required");
        for g in &self.garments {
            ensure!(
                g.frames() == 1 && g.height() == self.human.height() && g.width() == self.human.width(),
                Shape,
                "garment images must be single frames the size of the human image"
            );
        }
        if let Mode::Interpolate { gamma } = self.mode {
            check_gamma(gamma)?;
            ensure!(self.garments.len() == 2, Invalid, "interpolation takes exactly two garments");
        }
        Ok(())
    }
}

/// Seeded standard-normal starting latent.
pub fn initial_latent(seed: u64, extents: [usize; 4]) -> LatentVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = extents.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    LatentVolume::new(Tensor::new(extents.to_vec(), data).expect("extents product")).expect("finite")
}

/// Latent trajectory end point for `req`.
pub fn sample_latent(req: &GenerationRequest, model: &Model) -> Result<LatentVolume> {
    req.validate()?;
    let (h, w) = (req.human.height(), req.human.width());
    let pose = req.pose.render(h, w);
    let (ctx, other) = match req.mode {
        Mode::Standard => (ContextLatents::build(&req.human, &pose, &req.garments)?, None),
        Mode::Interpolate { .. } => {
            let ctx = ContextLatents::build(&req.human, &pose, &req.garments[..1])?;
            let b = ctx.with_garments(&req.garments[1..])?;
            (ctx, Some(b))
        }
    };
    let blend = match (req.mode, other.as_ref()) {
        (Mode::Interpolate { gamma }, Some(o)) => Some(Blend { other: o, gamma }),
        _ => None,
    };
    let beta = if blend.is_some() { 1.0 } else { req.beta };
    let sched = InjectionSchedule::even(model.cfg.backbone.num_blocks, req.alpha, beta)?;
    let codec = LatentCodec::standard();
    ensure!(
        h % codec.spatial_stride == 0 && w % codec.spatial_stride == 0,
        Shape,
        "image {h}×{w} not divisible by the latent stride"
    );
    let extents = [req.pose.len(), LATENT_CHANNELS, h / codec.spatial_stride, w / codec.spatial_stride];
    let text = TextTokens::from_prompt(&req.prompt);
    let mut z = initial_latent(req.seed, extents);
    let dt = 1.0 / req.steps as f32;
    for i in 0..req.steps {
        let t = i as f32 * dt;
        let v = predict_velocity(&model.params, &model.cfg, &ctx, blend, &sched, &z, t, &text)?;
        let next = z.tensor().zip_map(v.tensor(), |a, b| a + dt * b)?;
        ensure!(next.all_finite(), NonFinite, "latent became non-finite at step {i}");
        z = LatentVolume::new(next)?;
    }
    Ok(z)
}

/// Try-on animation with one frame per pose frame.
pub fn generate(req: &GenerationRequest, model: &Model) -> Result<VideoTensor> {
    ensure!(req.mode == Mode::Standard, Invalid, "use generate_interpolated for interpolation requests");
    LatentCodec::standard().decode(&sample_latent(req, model)?)
}

/// As [`generate`], with every step blending the two garment streams.
pub fn generate_interpolated(req: &GenerationRequest, model: &Model) -> Result<VideoTensor> {
    ensure!(matches!(req.mode, Mode::Interpolate { .. }), Invalid, "request has no interpolation weight");
    LatentCodec::standard().decode(&sample_latent(req, model)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_backbone;
    use crate::model::{attach_trainables, Variant};
    use crate::toy::{figure, garment_image};

    fn model() -> Model {
        let cfg = ModelConfig::toy(Variant::DualModule);
        let mut params = init_backbone(&cfg.backbone, 1).unwrap();
        attach_trainables(&mut params, &cfg, 2).unwrap();
        // nonzero residuals so the garment streams matter
        let names: Vec<String> = params.names().filter(|n| n.contains(".out.w")).cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = cfg.backbone.model_dim;
        for n in names {
            params.get_mut(&n).unwrap().value = Tensor::randn(&[d, d], 0.05, &mut rng);
        }
        Model { cfg, params }
    }

    fn request() -> GenerationRequest {
        let fig = figure(0, 1);
        let mut r = GenerationRequest::new(fig.human_image(), vec![garment_image(1)], fig.pose());
        r.steps = 3;
        r
    }

    #[test]
    fn deterministic_and_frame_count_matches_pose() {
        let m = model();
        let a = generate(&request(), &m).unwrap();
        let b = generate(&request(), &m).unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));
        assert_eq!(a.frames(), request().pose.len());
    }

    #[test]
    fn interpolation_endpoints_match_single_garment_generation() {
        let m = model();
        let mut req = request();
        req.garments = vec![garment_image(0), garment_image(2)];
        for (gamma, pick) in [(1.0, 0), (0.0, 2)] {
            req.mode = Mode::Interpolate { gamma };
            let blended = generate_interpolated(&req, &m).unwrap();
            let mut single = request();
            single.garments = vec![garment_image(pick)];
            single.beta = 1.0;
            let direct = generate(&single, &m).unwrap();
            assert!(blended.tensor().bit_eq(direct.tensor()), "gamma {gamma}");
        }
    }

    #[test]
    fn request_validation() {
        let m = model();
        let mut req = request();
        req.steps = 0;
        assert!(generate(&req, &m).is_err());
        let mut req = request();
        req.mode = Mode::Interpolate { gamma: 0.5 };
        assert!(generate_interpolated(&req, &m).is_err());
        req.garments.push(garment_image(0));
        req.mode = Mode::Interpolate { gamma: -0.1 };
        assert!(generate_interpolated(&req, &m).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_missing_adapters() {
        let m = model();
        let ck = m.to_checkpoint();
        assert_eq!(Model::from_checkpoint(&ck).unwrap(), m);
        let mut bare = ck.clone();
        let names: Vec<String> = bare.params.names().filter(|n| n.starts_with("gtm.")).cloned().collect();
        for n in names {
            bare.params.remove(&n);
        }
        assert!(matches!(Model::from_checkpoint(&bare), Err(Error::Config(_))));
    }
}
