//! Rectified-flow training of the trainable pathway with the backbone frozen.
//!
//! `x_t = (1 − t)·noise + t·z`, target velocity `z − noise`, loss = MSE over
//! the truth-video tokens only.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{reverse_gradient, Graph, Var};
use crate::backbone::TextTokens;
use crate::checkpoint::Checkpoint;
use crate::conditioning::{encode_latent, latent_to_patches, LatentVolume, TripletSample};
use crate::dual::InjectionSchedule;
use crate::error::{ensure, Error, Result};
use crate::model::{attach_trainables, velocity_var, ContextLatents, ModelConfig, Variant};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{ParamSet, Tensor};

/// Loss above which a run is considered diverged.
pub const LOSS_ABORT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub lora_rank: usize,
    pub alpha: f32,
    pub beta: f32,
    /// Write a resumable checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DualModule,
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            lora_rank: crate::model::DEFAULT_LORA_RANK,
            alpha: crate::dual::DEFAULT_ALPHA,
            beta: crate::dual::DEFAULT_BETA,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "learning rate must be positive");
        ensure!(self.alpha.is_finite() && self.beta.is_finite(), Config, "alpha and beta must be finite");
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    /// L2 norm of the gradient per top-level parameter namespace. Always
    /// contains `backbone`.
    pub grad_norms: BTreeMap<String, f64>,
}

/// A triplet encoded for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub ctx: ContextLatents,
    pub truth: LatentVolume,
    pub text: TextTokens,
}

impl Example {
    /// Under `no-synth-human` the human image is replaced by the first truth frame.
    pub fn prepare(sample: &TripletSample, variant: Variant) -> Result<Self> {
        sample.validate()?;
        let human = match variant {
            Variant::NoSynthHuman => sample.truth.frame(0)?,
            _ => sample.human.clone(),
        };
        let pose = sample.pose.render(sample.truth.height(), sample.truth.width());
        Ok(Self {
            id: sample.id.clone(),
            ctx: ContextLatents::build(&human, &pose, &sample.garments)?,
            truth: encode_latent(&sample.truth)?,
            text: TextTokens::from_prompt(&sample.prompt),
        })
    }
}

/// Interpolant and target velocity at time `t`.
pub fn flow_pair(z: &LatentVolume, noise: &Tensor, t: f32) -> Result<(LatentVolume, Tensor)> {
    ensure!(noise.shape() == z.tensor().shape(), Shape, "noise {:?} vs latent {:?}", noise.shape(), z.extents());
    let xt = z.tensor().zip_map(noise, |zv, n| (1.0 - t) * n + t * zv)?;
    let v = z.tensor().sub(noise)?;
    Ok((LatentVolume::new(xt)?, v))
}

/// Loss node for one example on `g`.
fn prediction_and_target(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &ModelConfig,
    sched: &InjectionSchedule,
    ex: &Example,
    t: f32,
    noise: &Tensor,
) -> Result<(Var, Tensor)> {
    ensure!(t > 0.0 && t < 1.0, Invalid, "training timestep {t} outside (0, 1)");
    let (xt, v) = flow_pair(&ex.truth, noise, t)?;
    let (pred, _) = velocity_var(g, params, cfg, &ex.ctx, None, sched, &xt, t, &ex.text)?;
    let (target, _) = latent_to_patches(&LatentVolume::new(v)?, cfg.backbone.patch)?;
    Ok((pred, target))
}

pub fn flow_matching_loss_var(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &ModelConfig,
    sched: &InjectionSchedule,
    ex: &Example,
    t: f32,
    noise: &Tensor,
) -> Result<Var> {
    let (pred, target) = prediction_and_target(g, params, cfg, sched, ex, t, noise)?;
    let target = g.constant(target);
    g.mse(pred, target)
}

/// Scalar loss without a backward pass. The mean is taken in f64 rather than
/// read back from the graph's f32 scalar.
pub fn flow_matching_loss(
    params: &ParamSet,
    cfg: &ModelConfig,
    sched: &InjectionSchedule,
    ex: &Example,
    t: f32,
    noise: &Tensor,
) -> Result<f64> {
    let mut g = Graph::new();
    let (pred, target) = prediction_and_target(&mut g, params, cfg, sched, ex, t, noise)?;
    let p = g.value(pred).data();
    let sum: f64 = p.iter().zip(target.data()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
    let v = sum / p.len() as f64;
    ensure!(v.is_finite(), NonFinite, "flow-matching loss is {v}");
    Ok(v)
}

/// Loss and gradients of the trainable parameters for one example.
pub fn loss_and_gradient(
    params: &ParamSet,
    cfg: &ModelConfig,
    sched: &InjectionSchedule,
    ex: &Example,
    t: f32,
    noise: &Tensor,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let l = flow_matching_loss_var(&mut g, params, cfg, sched, ex, t, noise)?;
    let v = g.value(l).data()[0] as f64;
    ensure!(v.is_finite(), NonFinite, "flow-matching loss is {v}");
    Ok((v, reverse_gradient(&g, l)?))
}

/// One draw of the training randomness for a batch entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub index: usize,
    pub t: f32,
    pub noise: Tensor,
}

/// The randomness of step `step` depends only on `(seed, step)`, which is
/// what makes resumed runs reproduce uninterrupted ones.
pub fn draw_batch(seed: u64, step: u64, examples: &[Example], batch_size: usize) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let n = examples.len();
    let indices: Vec<usize> = if batch_size >= n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(&mut rng, n, batch_size).into_vec()
    };
    indices
        .into_iter()
        .map(|index| {
            let t = rng.gen_range(1e-3f32..1.0 - 1e-3);
            let shape = examples[index].truth.tensor().shape().to_vec();
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            Draw { index, t, noise: Tensor::new(shape, data).expect("shape product") }
        })
        .collect()
}

/// Namespace of a parameter name: everything before the first dot.
pub fn namespace(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

pub fn grad_norms(params: &ParamSet, grads: &BTreeMap<String, Tensor>) -> BTreeMap<String, f64> {
    let mut sq: BTreeMap<String, f64> = BTreeMap::new();
    for name in params.names() {
        sq.entry(namespace(name).to_string()).or_insert(0.0);
    }
    sq.entry("backbone".into()).or_insert(0.0);
    for (name, g) in grads {
        *sq.entry(namespace(name).to_string()).or_insert(0.0) += g.sq_norm();
    }
    sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

/// Mean loss and mean gradient over a batch. Per-example work runs in
/// parallel; results are reduced in batch order so the sum is deterministic.
pub fn batch_gradient(
    params: &ParamSet,
    cfg: &ModelConfig,
    sched: &InjectionSchedule,
    examples: &[Example],
    draws: &[Draw],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    ensure!(!draws.is_empty(), Invalid, "empty batch");
    let parts: Vec<(f64, BTreeMap<String, Tensor>)> = draws
        .par_iter()
        .map(|d| loss_and_gradient(params, cfg, sched, &examples[d.index], d.t, &d.noise))
        .collect::<Result<_>>()?;
    let scale = 1.0 / parts.len() as f64;
    let mut loss = 0.0;
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (l, grads) in &parts {
        loss += l;
        for (name, g) in grads {
            let a = acc.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (x, y) in a.iter_mut().zip(g.data()) {
                *x += *y as f64;
            }
        }
    }
    let mut grads = BTreeMap::new();
    for (name, a) in acc {
        let shape = params.tensor(&name)?.shape().to_vec();
        grads.insert(name, Tensor::new(shape, a.into_iter().map(|x| (x * scale) as f32).collect())?);
    }
    Ok((loss * scale, grads))
}

/// Training state: parameters, optimizer moments, step counter, examples.
pub struct Trainer {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ParamSet,
    pub opt: AdamW,
    pub step: u64,
    pub examples: Vec<Example>,
    sched: InjectionSchedule,
}

impl Trainer {
    /// Starts a run from frozen backbone weights.
    pub fn new(model: ModelConfig, cfg: TrainConfig, mut params: ParamSet, examples: Vec<Example>) -> Result<Self> {
        cfg.validate()?;
        ensure!(!examples.is_empty(), Invalid, "no training examples");
        ensure!(model.variant == cfg.variant, Config, "model variant {} vs run variant {}", model.variant, cfg.variant);
        attach_trainables(&mut params, &model, cfg.seed)?;
        let sched = InjectionSchedule::even(model.backbone.num_blocks, cfg.alpha, cfg.beta)?;
        let opt = AdamW::new(cfg.optimizer());
        Ok(Self { model, cfg, params, opt, step: 0, examples, sched })
    }

    pub fn schedule(&self) -> &InjectionSchedule {
        &self.sched
    }

    /// SHA-256 of every frozen parameter.
    pub fn frozen_hash(&self) -> String {
        let mut frozen = ParamSet::new();
        for (n, p) in self.params.iter().filter(|(_, p)| !p.trainable) {
            frozen.insert(n.clone(), p.value.clone(), false);
        }
        frozen.hash_prefix("")
    }

    /// One optimizer step on the batch drawn for the current step.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let draws = draw_batch(self.cfg.seed, self.step, &self.examples, self.cfg.batch_size);
        let (loss, grads) = batch_gradient(&self.params, &self.model, &self.sched, &self.examples, &draws)?;
        if !(loss <= LOSS_ABORT) {
            return Err(Error::NonFinite(format!("loss {loss} at step {} exceeds {LOSS_ABORT}", self.step)));
        }
        let norms = grad_norms(&self.params, &grads);
        self.opt.step(&mut self.params, &grads)?;
        let rec = LossRecord { step: self.step, loss, grad_norms: norms };
        self.step += 1;
        Ok(rec)
    }

    /// Mean loss on a fixed set of timesteps and noises, for comparing the
    /// model before and after training.
    pub fn probe_loss(&self, seed: u64) -> Result<f64> {
        probe_loss(&self.params, &self.model, &self.sched, &self.examples, seed)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "kind": "training",
            "model": self.model,
            "train": self.cfg,
            "step": self.step,
            "optimizer_step": self.opt.step,
        });
        let mut ck = Checkpoint::new(meta, self.params.clone());
        for (n, t) in &self.opt.m {
            ck.aux.insert(format!("optim.m.{n}"), t.clone());
        }
        for (n, t) in &self.opt.v {
            ck.aux.insert(format!("optim.v.{n}"), t.clone());
        }
        Ok(ck)
    }

    /// Continues a run exactly where [`Trainer::checkpoint`] left it.
    pub fn resume(ck: &Checkpoint, examples: Vec<Example>) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("training checkpoint lacks {what}"));
        let model: ModelConfig =
            serde_json::from_value(ck.meta.get("model").cloned().ok_or_else(|| bad("model"))?)?;
        let cfg: TrainConfig = serde_json::from_value(ck.meta.get("train").cloned().ok_or_else(|| bad("train"))?)?;
        let step = ck.meta.get("step").and_then(|v| v.as_u64()).ok_or_else(|| bad("step"))?;
        let ostep = ck.meta.get("optimizer_step").and_then(|v| v.as_u64()).ok_or_else(|| bad("optimizer_step"))?;
        ensure!(!examples.is_empty(), Invalid, "no training examples");
        let mut opt = AdamW::new(cfg.optimizer());
        opt.step = ostep;
        for (n, t) in &ck.aux {
            if let Some(p) = n.strip_prefix("optim.m.") {
                opt.m.insert(p.to_string(), t.clone());
            } else if let Some(p) = n.strip_prefix("optim.v.") {
                opt.v.insert(p.to_string(), t.clone());
            }
        }
        let sched = InjectionSchedule::even(model.backbone.num_blocks, cfg.alpha, cfg.beta)?;
        Ok(Self { model, cfg, params: ck.params.clone(), opt, step, examples, sched })
    }
}

pub const PROBE_TIMES: [f32; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

pub fn probe_loss(
    params: &ParamSet,
    cfg: &ModelConfig,
    sched: &InjectionSchedule,
    examples: &[Example],
    seed: u64,
) -> Result<f64> {
    let mut jobs = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ex in examples {
        for &t in &PROBE_TIMES {
            let shape = ex.truth.tensor().shape().to_vec();
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            jobs.push((ex, t, Tensor::new(shape, data)?));
        }
    }
    let losses: Vec<f64> = jobs
        .par_iter()
        .map(|(ex, t, n)| flow_matching_loss(params, cfg, sched, ex, *t, n))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_backbone;
    use crate::toy::toy_corpus;

    fn setup(variant: Variant, n: usize) -> Trainer {
        let model = ModelConfig::toy(variant);
        let params = init_backbone(&model.backbone, 11).unwrap();
        let examples = toy_corpus(n)
            .unwrap()
            .iter()
            .map(|(_, s)| Example::prepare(s, variant).unwrap())
            .collect();
        let cfg = TrainConfig { variant, steps: 3, batch_size: 2, seed: 5, ..Default::default() };
        Trainer::new(model, cfg, params, examples).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_zero_prediction_has_mean_square() {
        let z = LatentVolume::new(Tensor::new(vec![1, 1, 1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
        let noise = Tensor::new(vec![1, 1, 1, 2], vec![0.5, 0.5]).unwrap();
        let (xt, v) = flow_pair(&z, &noise, 0.25).unwrap();
        assert_eq!(xt.tensor().data(), &[0.625, -0.125]);
        assert_eq!(v.data(), &[0.5, -2.5]);
        let mut g = Graph::new();
        let a = g.constant(v.clone());
        let b = g.constant(v.clone());
        let zero = g.constant(Tensor::zeros(v.shape()));
        let l0 = g.mse(a, b).unwrap();
        let lm = g.mse(zero, b).unwrap();
        assert_eq!(g.value(l0).data()[0], 0.0);
        assert!((g.value(lm).data()[0] - (0.25 + 6.25) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn same_seed_same_records() {
        let mut a = setup(Variant::DualModule, 3);
        let mut b = setup(Variant::DualModule, 3);
        for _ in 0..3 {
            assert_eq!(a.train_step().unwrap(), b.train_step().unwrap());
        }
    }

    #[test]
    fn frozen_hash_survives_steps_and_trainables_move() {
        let mut tr = setup(Variant::DualModule, 2);
        let before = tr.frozen_hash();
        let adapters = tr.params.hash_prefix("gtm.");
        for _ in 0..2 {
            let rec = tr.train_step().unwrap();
            assert_eq!(rec.grad_norms["backbone"], 0.0);
            assert!(rec.grad_norms["ham"] > 0.0 && rec.grad_norms["gtm"] > 0.0);
        }
        assert_eq!(tr.frozen_hash(), before);
        assert_ne!(tr.params.hash_prefix("gtm."), adapters);
    }

    #[test]
    fn empty_batch_rejected() {
        let tr = setup(Variant::DualModule, 2);
        assert!(batch_gradient(&tr.params, &tr.model, tr.schedule(), &tr.examples, &[]).is_err());
    }

    #[test]
    fn batch_loss_ignores_order() {
        let tr = setup(Variant::SingleModule, 3);
        let mut draws = draw_batch(1, 0, &tr.examples, 3);
        let (a, _) = batch_gradient(&tr.params, &tr.model, tr.schedule(), &tr.examples, &draws).unwrap();
        draws.reverse();
        let (b, _) = batch_gradient(&tr.params, &tr.model, tr.schedule(), &tr.examples, &draws).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn no_synth_human_uses_a_truth_frame() {
        let (_, s) = &toy_corpus(1).unwrap()[0];
        let ex = Example::prepare(s, Variant::NoSynthHuman).unwrap();
        let direct = encode_latent(&s.truth.frame(0).unwrap()).unwrap();
        assert!(ex.ctx.ham.slice_frames(0, 1).unwrap().tensor().bit_eq(direct.tensor()));
        let synth = Example::prepare(s, Variant::DualModule).unwrap();
        assert!(!synth.ctx.ham.tensor().bit_eq(ex.ctx.ham.tensor()));
    }

    #[test]
    fn resume_reproduces_the_loss_stream() {
        let mut full = setup(Variant::DualModule, 2);
        let recs: Vec<_> = (0..3).map(|_| full.train_step().unwrap()).collect();
        let mut first = setup(Variant::DualModule, 2);
        first.train_step().unwrap();
        let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut resumed = Trainer::resume(&ck, first.examples.clone()).unwrap();
        assert_eq!(resumed.train_step().unwrap(), recs[1]);
        assert_eq!(resumed.train_step().unwrap(), recs[2]);
        assert_eq!(resumed.params, full.params);
    }

    #[test]
    fn lora_variant_only_moves_low_rank_factors() {
        let mut tr = setup(Variant::BackboneLora, 2);
        let before = tr.frozen_hash();
        let rec = tr.train_step().unwrap();
        assert_eq!(rec.grad_norms["backbone"], 0.0);
        assert!(rec.grad_norms["lora"] > 0.0);
        assert_eq!(tr.frozen_hash(), before);
    }
}
