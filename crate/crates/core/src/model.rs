//! Full velocity model: frozen backbone plus the trainable conditioning
//! pathway selected by a [`Variant`].

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{
    block_forward, block_prefix, embed_tokens, head_var, position_table, text_condition, time_condition,
    BackboneConfig, TextTokens,
};
use crate::conditioning::{
    build_gtm_context, build_ham_context, encode_latent, patches_to_latent, project_context, LatentVolume,
    VideoTensor,
};
use crate::dual::{check_gamma, inject_var, AdapterRole, AdapterStack, InjectionSchedule, Stream, GTM, HAM};
use crate::error::{ensure, Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const SINGLE: &str = "single";
pub const LORA: &str = "lora";
pub const DEFAULT_LORA_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    DualModule,
    SingleModule,
    BackboneLora,
    NoSynthHuman,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::DualModule, Variant::SingleModule, Variant::BackboneLora, Variant::NoSynthHuman];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DualModule => "dual-module",
            Variant::SingleModule => "single-module",
            Variant::BackboneLora => "backbone-lora",
            Variant::NoSynthHuman => "no-synth-human",
        }
    }

    /// Parameter-name prefixes that receive gradients under this variant.
    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Variant::DualModule | Variant::NoSynthHuman => &["ham.", "gtm."],
            Variant::SingleModule => &["single."],
            Variant::BackboneLora => &["lora."],
        }
    }

    fn uses_dual_adapters(self) -> bool {
        matches!(self, Variant::DualModule | Variant::NoSynthHuman)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub variant: Variant,
    pub lora_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(Variant::DualModule)
    }
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, variant: Variant) -> Self {
        Self { backbone, variant, lora_rank: DEFAULT_LORA_RANK }
    }

    /// Small enough to train on one CPU core in minutes: four blocks of width 32
    /// over 2×2 latent patches.
    pub fn toy(variant: Variant) -> Self {
        let backbone = BackboneConfig {
            num_blocks: 4,
            model_dim: 64,
            num_heads: 4,
            patch: [1, 2, 2],
            text_dim: 16,
            ..Default::default()
        };
        Self::new(backbone, variant)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.variant == Variant::BackboneLora {
            ensure!(self.lora_rank > 0, Config, "lora rank must be positive");
        }
        Ok(())
    }

    /// Number of trainable scalars this config adds for the LoRA variant.
    pub fn lora_parameter_count(&self) -> usize {
        let per_block: usize = self
            .backbone
            .block_linears()
            .iter()
            .map(|&(_, fi, fo)| self.lora_rank * (fi + fo))
            .sum();
        per_block * self.backbone.num_blocks
    }
}

/// Freezes the backbone and adds the variant's trainable parameters.
/// Adapter randomness comes from `seed` only, so the same backbone and seed
/// always yield the same starting point.
pub fn attach_trainables(params: &mut ParamSet, cfg: &ModelConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    params.set_all_trainable(false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bcfg = &cfg.backbone;
    match cfg.variant {
        Variant::DualModule | Variant::NoSynthHuman => {
            AdapterStack::role(AdapterRole::Ham, bcfg).init(params, bcfg, &mut rng)?;
            AdapterStack::role(AdapterRole::Gtm, bcfg).init(params, bcfg, &mut rng)?;
        }
        Variant::SingleModule => AdapterStack::new(SINGLE, bcfg).init(params, bcfg, &mut rng)?,
        Variant::BackboneLora => {
            let r = cfg.lora_rank;
            for i in 0..bcfg.num_blocks {
                for (name, fan_in, fan_out) in bcfg.block_linears() {
                    let p = format!("{LORA}.blocks.{i}.{name}");
                    let a = Tensor::randn(&[fan_in, r], 1.0 / (fan_in as f32).sqrt(), &mut rng);
                    params.insert(format!("{p}.a"), a, true);
                    params.insert(format!("{p}.b"), Tensor::zeros(&[r, fan_out]), true);
                }
            }
        }
    }
    Ok(())
}

/// HAM and GTM context latents for one request.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextLatents {
    pub ham: LatentVolume,
    pub gtm: LatentVolume,
}

impl ContextLatents {
    /// `pose` is the rendered skeleton video; the GTM context is padded to the
    /// HAM context length.
    pub fn build(human: &VideoTensor, pose: &VideoTensor, garments: &[VideoTensor]) -> Result<Self> {
        ensure!(human.frames() == 1, Shape, "human image must be a single frame");
        let zh = encode_latent(human)?;
        let zp = encode_latent(pose)?;
        let ham = build_ham_context(&zh, &zp)?;
        let zg = garments.iter().map(encode_latent).collect::<Result<Vec<_>>>()?;
        let gtm = build_gtm_context(&zg, ham.frames())?;
        Ok(Self { ham, gtm })
    }

    /// Same human and pose, different garments.
    pub fn with_garments(&self, garments: &[VideoTensor]) -> Result<LatentVolume> {
        let zg = garments.iter().map(encode_latent).collect::<Result<Vec<_>>>()?;
        build_gtm_context(&zg, self.ham.frames())
    }
}

/// A second garment context blended in with weight `1 − gamma`.
#[derive(Clone, Copy, Debug)]
pub struct Blend<'a> {
    pub other: &'a LatentVolume,
    pub gamma: f32,
}

/// Projected context tokens with grid positions.
pub fn context_tokens(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &BackboneConfig,
    prefix: &str,
    ctx: &LatentVolume,
) -> Result<Var> {
    let x = project_context(g, params, prefix, ctx, cfg)?;
    let grid = [ctx.frames() / cfg.patch[0], ctx.height() / cfg.patch[1], ctx.width() / cfg.patch[2]];
    let pos = g.constant(position_table(grid, cfg.model_dim));
    g.add(x, pos)
}

/// Velocity prediction for the truth-video tokens, `[N_main, patch_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn velocity_var(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &ModelConfig,
    ctx: &ContextLatents,
    blend: Option<Blend<'_>>,
    sched: &InjectionSchedule,
    noisy: &LatentVolume,
    t: f32,
    text: &TextTokens,
) -> Result<(Var, [usize; 3])> {
    ensure!((0.0..=1.0).contains(&t), Invalid, "timestep {t} outside [0, 1]");
    let b = &cfg.backbone;
    let (h0, grid) = embed_tokens(g, params, b, noisy)?;
    let tv = text_condition(g, params, b, text)?;
    let cond = time_condition(g, params, b, t)?;
    if blend.is_some() {
        ensure!(cfg.variant.uses_dual_adapters(), Invalid, "garment interpolation needs the dual-module variant");
    }
    let h = match cfg.variant {
        Variant::DualModule | Variant::NoSynthHuman => {
            let ham = context_tokens(g, params, b, &format!("{HAM}.proj"), &ctx.ham)?;
            let gtm = context_tokens(g, params, b, &format!("{GTM}.proj"), &ctx.gtm)?;
            let mut streams = vec![Stream { prefix: HAM, ctx: ham, weight: sched.alpha }];
            match blend {
                None => streams.push(Stream { prefix: GTM, ctx: gtm, weight: sched.beta }),
                Some(bl) => {
                    check_gamma(bl.gamma)?;
                    let other = context_tokens(g, params, b, &format!("{GTM}.proj"), bl.other)?;
                    streams.push(Stream { prefix: GTM, ctx: gtm, weight: bl.gamma });
                    streams.push(Stream { prefix: GTM, ctx: other, weight: 1.0 - bl.gamma });
                }
            }
            inject_var(g, params, b, h0, &streams, sched, tv, cond)?
        }
        Variant::SingleModule => {
            let joint = LatentVolume::concat_frames(&[&ctx.ham, &ctx.gtm])?;
            let c = context_tokens(g, params, b, &format!("{SINGLE}.proj"), &joint)?;
            let streams = [Stream { prefix: SINGLE, ctx: c, weight: sched.alpha }];
            inject_var(g, params, b, h0, &streams, sched, tv, cond)?
        }
        Variant::BackboneLora => {
            let (ham, _) = embed_tokens(g, params, b, &ctx.ham)?;
            let (gtm, _) = embed_tokens(g, params, b, &ctx.gtm)?;
            let n_main = g.shape(h0)[0];
            let mut h = g.concat_rows(&[ham, gtm, h0])?;
            for i in 0..b.num_blocks {
                let lp = format!("{LORA}.blocks.{i}");
                h = block_forward(g, params, b, &block_prefix(i), h, tv, cond, Some(&lp))?;
            }
            let n = g.shape(h)[0];
            g.slice_rows(h, n - n_main, n)?
        }
    };
    Ok((head_var(g, params, h)?, grid))
}

/// Materialized velocity with the extents of `noisy`.
#[allow(clippy::too_many_arguments)]
pub fn predict_velocity(
    params: &ParamSet,
    cfg: &ModelConfig,
    ctx: &ContextLatents,
    blend: Option<Blend<'_>>,
    sched: &InjectionSchedule,
    noisy: &LatentVolume,
    t: f32,
    text: &TextTokens,
) -> Result<LatentVolume> {
    let mut g = Graph::new();
    let (v, grid) = velocity_var(&mut g, params, cfg, ctx, blend, sched, noisy, t, text)?;
    patches_to_latent(g.value(v), grid, cfg.backbone.patch, cfg.backbone.latent_channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{backbone_forward, init_backbone};

    fn inputs(cfg: &ModelConfig) -> (ContextLatents, LatentVolume) {
        let human = VideoTensor::filled(1, 16, 16, [0.2, 0.4, 0.6]);
        let pose = VideoTensor::filled(2, 16, 16, [0.0, 0.5, 0.0]);
        let garment = VideoTensor::filled(1, 16, 16, [1.0, 0.0, 0.0]);
        let ctx = ContextLatents::build(&human, &pose, &[garment]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noisy = LatentVolume::new(Tensor::randn(&[2, cfg.backbone.latent_channels, 4, 4], 1.0, &mut rng)).unwrap();
        (ctx, noisy)
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!(matches!("triple-module".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn fresh_trainables_leave_backbone_output_unchanged() {
        for variant in Variant::ALL {
            let cfg = ModelConfig::toy(variant);
            let mut p = init_backbone(&cfg.backbone, 1).unwrap();
            let (ctx, noisy) = inputs(&cfg);
            let text = TextTokens::from_prompt("a person walks");
            attach_trainables(&mut p, &cfg, 2).unwrap();
            let sched = InjectionSchedule::standard(cfg.backbone.num_blocks);
            let v = predict_velocity(&p, &cfg, &ctx, None, &sched, &noisy, 0.3, &text).unwrap();
            if variant == Variant::BackboneLora {
                // the extended sequence changes attention, so only the shape is comparable
                assert_eq!(v.extents(), noisy.extents());
            } else {
                let base = backbone_forward(&p, &cfg.backbone, &noisy, 0.3, &text).unwrap();
                assert!(v.tensor().bit_eq(base.tensor()), "{variant}");
            }
        }
    }

    #[test]
    fn trainable_partition_follows_variant() {
        for variant in Variant::ALL {
            let cfg = ModelConfig::toy(variant);
            let mut p = init_backbone(&cfg.backbone, 1).unwrap();
            attach_trainables(&mut p, &cfg, 2).unwrap();
            for (name, param) in p.iter() {
                let expect = variant.trainable_prefixes().iter().any(|pre| name.starts_with(pre));
                assert_eq!(param.trainable, expect, "{variant}: {name}");
            }
        }
    }

    #[test]
    fn lora_count_matches_config() {
        let cfg = ModelConfig::toy(Variant::BackboneLora);
        let mut p = init_backbone(&cfg.backbone, 1).unwrap();
        attach_trainables(&mut p, &cfg, 2).unwrap();
        assert_eq!(p.trainable_count(), cfg.lora_parameter_count());
    }

    #[test]
    fn interpolation_rejected_outside_dual_variants() {
        let cfg = ModelConfig::toy(Variant::SingleModule);
        let mut p = init_backbone(&cfg.backbone, 1).unwrap();
        attach_trainables(&mut p, &cfg, 2).unwrap();
        let (ctx, noisy) = inputs(&cfg);
        let sched = InjectionSchedule::standard(4);
        let blend = Blend { other: &ctx.gtm, gamma: 0.5 };
        let r = predict_velocity(&p, &cfg, &ctx, Some(blend), &sched, &noisy, 0.3, &TextTokens::null());
        assert!(r.is_err());
    }
}
