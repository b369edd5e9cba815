//! Toy text-to-video diffusion transformer used as the frozen backbone.
//!
//! Latents are patchified into tokens, passed through `L` residual blocks
//! (timestep-modulated self-attention, text cross-attention, MLP) and mapped
//! back to patch values by a linear head. The output is a velocity field in
//! latent space with the same extents as the input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::conditioning::{latent_to_patches, patches_to_latent, LatentVolume, LATENT_CHANNELS};
use crate::error::{ensure, Result};
use crate::tensor::{ParamSet, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// Whitespace vocabulary for the learned text embedding. Index 0 is the null
/// token; word `i` of this list maps to id `i + 1`.
pub const VOCAB: &[&str] = &[
    "a", "the", "person", "man", "woman", "walks", "walking", "dances", "dancing", "turns", "turning",
    "waves", "waving", "stands", "standing", "poses", "posing", "raises", "arms", "arm", "hands",
    "steps", "forward", "left", "right", "slowly", "quickly", "in", "on", "at", "with", "and", "front",
    "of", "street", "studio", "room", "park", "white", "black", "gray", "background", "wearing",
    "shirt", "t-shirt", "dress", "pants", "skirt", "jacket", "coat", "hat", "red", "green", "blue",
    "yellow", "purple", "orange", "pink", "camera", "looks", "smiles", "jumps", "spins", "sways",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    /// Token patch extents `(t, h, w)` in latent units.
    pub patch: [usize; 3],
    pub latent_channels: usize,
    pub text_vocab: usize,
    pub text_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_blocks: 8,
            model_dim: 64,
            num_heads: 4,
            patch: [1, 4, 4],
            latent_channels: LATENT_CHANNELS,
            text_vocab: VOCAB.len() + 1,
            text_dim: 32,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.num_blocks >= 2 && self.num_blocks % 2 == 0,
            Config,
            "num_blocks must be even and at least 2, got {}",
            self.num_blocks
        );
        ensure!(
            self.num_heads > 0 && self.model_dim % self.num_heads == 0,
            Config,
            "model_dim {} not divisible by num_heads {}",
            self.model_dim,
            self.num_heads
        );
        ensure!(self.patch.iter().all(|&p| p > 0), Config, "patch extents must be positive");
        ensure!(
            self.latent_channels > 0 && self.text_vocab > 0 && self.text_dim > 0 && self.mlp_ratio > 0,
            Config,
            "dimensions must be positive"
        );
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.latent_channels * self.patch.iter().product::<usize>()
    }

    pub fn hidden_dim(&self) -> usize {
        self.model_dim * self.mlp_ratio
    }

    /// `(name, fan_in, fan_out)` of every linear layer inside one block.
    pub fn block_linears(&self) -> Vec<(&'static str, usize, usize)> {
        let (d, t, h) = (self.model_dim, self.text_dim, self.hidden_dim());
        vec![
            ("mod", d, 4 * d),
            ("attn.q", d, d),
            ("attn.k", d, d),
            ("attn.v", d, d),
            ("attn.o", d, d),
            ("cross.q", d, d),
            ("cross.k", t, d),
            ("cross.v", t, d),
            ("cross.o", d, d),
            ("mlp.fc1", d, h),
            ("mlp.fc2", h, d),
        ]
    }
}

/// Output projections of each sub-layer; zeroing these makes a block the identity.
pub const BLOCK_OUTPUTS: [&str; 3] = ["attn.o", "cross.o", "mlp.fc2"];

/// Token sequence plus the `(T', H', W')` grid it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub tokens: Tensor,
    pub grid: [usize; 3],
}

impl HiddenState {
    pub fn new(tokens: Tensor, grid: [usize; 3]) -> Result<Self> {
        let n: usize = grid.iter().product();
        ensure!(
            tokens.shape().len() == 2 && tokens.shape()[0] == n,
            Shape,
            "{:?} tokens do not match grid {:?}",
            tokens.shape(),
            grid
        );
        Ok(Self { tokens, grid })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Prompt token ids. Never empty: an empty prompt becomes the null token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokens {
    ids: Vec<usize>,
}

impl TextTokens {
    pub fn from_prompt(prompt: &str) -> Self {
        let ids: Vec<usize> = prompt
            .split_whitespace()
            .map(|w| {
                let w = w
                    .trim_matches(|c: char| !c.is_alphanumeric() && c != '-')
                    .to_lowercase();
                VOCAB.iter().position(|v| *v == w).map_or(0, |i| i + 1)
            })
            .collect();
        if ids.is_empty() {
            Self { ids: vec![0] }
        } else {
            Self { ids }
        }
    }

    pub fn null() -> Self {
        Self { ids: vec![0] }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    fn one_hot(&self, vocab: usize) -> Tensor {
        let mut data = vec![0.0f32; self.ids.len() * vocab];
        for (r, &id) in self.ids.iter().enumerate() {
            let id = if id < vocab { id } else { 0 };
            data[r * vocab + id] = 1.0;
        }
        Tensor::from_vec(vec![self.ids.len(), vocab], data)
    }
}

fn insert_linear(
    params: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f32,
    rng: &mut ChaCha8Rng,
) {
    params.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng), false);
    params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]), false);
}

/// Random "pretrained" weights, all frozen.
pub fn init_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let (d, pd) = (cfg.model_dim, cfg.patch_dim());
    insert_linear(&mut p, "backbone.patch", pd, d, 1.0 / (pd as f32).sqrt(), &mut rng);
    insert_linear(&mut p, "backbone.time.fc1", d, d, 1.0 / (d as f32).sqrt(), &mut rng);
    insert_linear(&mut p, "backbone.time.fc2", d, d, 1.0 / (d as f32).sqrt(), &mut rng);
    p.insert(
        "backbone.text.embed",
        Tensor::randn(&[cfg.text_vocab, cfg.text_dim], 1.0, &mut rng),
        false,
    );
    for i in 0..cfg.num_blocks {
        for (name, fan_in, fan_out) in cfg.block_linears() {
            let base = 1.0 / (fan_in as f32).sqrt();
            let std = match name {
                "mod" => 0.1 * base,
                n if BLOCK_OUTPUTS.contains(&n) => 0.5 * base,
                _ => base,
            };
            insert_linear(&mut p, &format!("backbone.blocks.{i}.{name}"), fan_in, fan_out, std, &mut rng);
        }
    }
    insert_linear(&mut p, "backbone.head", d, pd, 1.0 / (d as f32).sqrt(), &mut rng);
    Ok(p)
}

pub fn block_prefix(i: usize) -> String {
    format!("backbone.blocks.{i}")
}

/// Sinusoidal features of `1000·t`, cosines then sines.
pub fn timestep_features(t: f32, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t as f64 * freq;
        out[i] = arg.cos() as f32;
        out[half + i] = arg.sin() as f32;
    }
    Tensor::from_vec(vec![1, dim], out)
}

/// Fixed sinusoidal positions for a `(T', H', W')` token grid, `[N, dim]`.
/// The width is split between the three axes; each axis gets cosines then sines.
pub fn position_table(grid: [usize; 3], dim: usize) -> Tensor {
    let a = (dim / 3) & !1;
    let widths = [a, a, dim - 2 * a];
    let n: usize = grid.iter().product();
    let mut out = vec![0.0f32; n * dim];
    let mut row = 0;
    for t in 0..grid[0] {
        for y in 0..grid[1] {
            for x in 0..grid[2] {
                let mut off = row * dim;
                for (pos, w) in [t, y, x].into_iter().zip(widths) {
                    let half = w / 2;
                    for i in 0..half {
                        let freq = (-(100f64.ln()) * i as f64 / half.max(1) as f64).exp();
                        let arg = pos as f64 * freq;
                        out[off + i] = arg.cos() as f32;
                        out[off + half + i] = arg.sin() as f32;
                    }
                    off += w;
                }
                row += 1;
            }
        }
    }
    Tensor::from_vec(vec![n, dim], out)
}

/// Patch embedding plus grid positions: the token stream every block reads.
pub fn embed_tokens(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &BackboneConfig,
    latent: &LatentVolume,
) -> Result<(Var, [usize; 3])> {
    let (h, grid) = patchify_var(g, params, cfg, latent)?;
    let pos = g.constant(position_table(grid, cfg.model_dim));
    Ok((g.add(h, pos)?, grid))
}

/// `silu(MLP(sinusoid(t)))`, the `[1, D]` vector every block's modulation reads.
pub fn time_condition(g: &mut Graph, params: &ParamSet, cfg: &BackboneConfig, t: f32) -> Result<Var> {
    let x = g.constant(timestep_features(t, cfg.model_dim));
    let h = linear(g, params, "backbone.time.fc1", x, None)?;
    let h = g.silu(h);
    let h = linear(g, params, "backbone.time.fc2", h, None)?;
    Ok(g.silu(h))
}

/// Embedded prompt, `[N_text, text_dim]`.
pub fn text_condition(g: &mut Graph, params: &ParamSet, cfg: &BackboneConfig, text: &TextTokens) -> Result<Var> {
    let oh = g.constant(text.one_hot(cfg.text_vocab));
    let table = g.param(params, "backbone.text.embed")?;
    g.matmul(oh, table)
}

/// `x·W + b`, plus `(x·A)·B` when a low-rank delta exists under `lora`.
pub fn linear(g: &mut Graph, params: &ParamSet, name: &str, x: Var, lora: Option<&str>) -> Result<Var> {
    let w = g.param(params, &format!("{name}.w"))?;
    let b = g.param(params, &format!("{name}.b"))?;
    let y = g.linear(x, w, Some(b))?;
    match lora {
        Some(lp) if params.contains(&format!("{lp}.a")) => {
            let a = g.param(params, &format!("{lp}.a"))?;
            let bb = g.param(params, &format!("{lp}.b"))?;
            let xa = g.matmul(x, a)?;
            let delta = g.matmul(xa, bb)?;
            g.add(y, delta)
        }
        _ => Ok(y),
    }
}

fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let xs = g.mul_row(x, scale)?;
    let x = g.add(x, xs)?;
    g.add_row(x, shift)
}

/// One residual transformer block whose weights live under `prefix`.
/// `lora_prefix`, when given, names the low-rank deltas for this block.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &BackboneConfig,
    prefix: &str,
    h: Var,
    text: Var,
    cond: Var,
    lora_prefix: Option<&str>,
) -> Result<Var> {
    let d = cfg.model_dim;
    ensure!(
        g.shape(h).len() == 2 && g.shape(h)[1] == d,
        Shape,
        "hidden state {:?} does not match model width {d}",
        g.shape(h)
    );
    let lin = |g: &mut Graph, name: &str, x: Var| -> Result<Var> {
        let lp = lora_prefix.map(|l| format!("{l}.{name}"));
        linear(g, params, &format!("{prefix}.{name}"), x, lp.as_deref())
    };
    let m = lin(g, "mod", cond)?;
    let shift1 = g.slice_cols(m, 0, d)?;
    let scale1 = g.slice_cols(m, d, 2 * d)?;
    let shift2 = g.slice_cols(m, 2 * d, 3 * d)?;
    let scale2 = g.slice_cols(m, 3 * d, 4 * d)?;

    let x = g.layer_norm(h, LN_EPS);
    let x = modulate(g, x, shift1, scale1)?;
    let q = lin(g, "attn.q", x)?;
    let k = lin(g, "attn.k", x)?;
    let v = lin(g, "attn.v", x)?;
    let a = g.attention(q, k, v, cfg.num_heads)?;
    let a = lin(g, "attn.o", a)?;
    let h = g.add(h, a)?;

    let x = g.layer_norm(h, LN_EPS);
    let q = lin(g, "cross.q", x)?;
    let k = lin(g, "cross.k", text)?;
    let v = lin(g, "cross.v", text)?;
    let c = g.attention(q, k, v, cfg.num_heads)?;
    let c = lin(g, "cross.o", c)?;
    let h = g.add(h, c)?;

    let x = g.layer_norm(h, LN_EPS);
    let x = modulate(g, x, shift2, scale2)?;
    let f = lin(g, "mlp.fc1", x)?;
    let f = g.gelu(f);
    let f = lin(g, "mlp.fc2", f)?;
    g.add(h, f)
}

/// Patch embedding of a latent: `[N, D]` tokens and their grid.
pub fn patchify_var(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &BackboneConfig,
    latent: &LatentVolume,
) -> Result<(Var, [usize; 3])> {
    ensure!(
        latent.channels() == cfg.latent_channels,
        Shape,
        "latent has {} channels, backbone expects {}",
        latent.channels(),
        cfg.latent_channels
    );
    let (rows, grid) = latent_to_patches(latent, cfg.patch)?;
    let x = g.constant(rows);
    Ok((linear(g, params, "backbone.patch", x, None)?, grid))
}

/// Linear velocity head, `[N, D] → [N, patch_dim]`.
pub fn head_var(g: &mut Graph, params: &ParamSet, h: Var) -> Result<Var> {
    linear(g, params, "backbone.head", h, None)
}

pub fn patchify(params: &ParamSet, cfg: &BackboneConfig, latent: &LatentVolume) -> Result<HiddenState> {
    let mut g = Graph::new();
    let (v, grid) = patchify_var(&mut g, params, cfg, latent)?;
    HiddenState::new(g.value(v).clone(), grid)
}

/// Applies backbone block `index` to a materialized hidden state. `cond` is
/// the `[1, D]` output of [`time_condition`].
pub fn backbone_block(
    params: &ParamSet,
    cfg: &BackboneConfig,
    index: usize,
    h: &HiddenState,
    text: &TextTokens,
    cond: &Tensor,
) -> Result<HiddenState> {
    ensure!(index < cfg.num_blocks, Invalid, "block {index} out of range");
    let mut g = Graph::new();
    let hv = g.constant(h.tokens.clone());
    let tv = text_condition(&mut g, params, cfg, text)?;
    let cv = g.constant(cond.clone());
    let out = block_forward(&mut g, params, cfg, &block_prefix(index), hv, tv, cv, None)?;
    HiddenState::new(g.value(out).clone(), h.grid)
}

/// Evaluates `time_condition` outside of any larger graph.
pub fn time_embedding(params: &ParamSet, cfg: &BackboneConfig, t: f32) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = time_condition(&mut g, params, cfg, t)?;
    Ok(g.value(v).clone())
}

/// Backbone on its own graph; returns the `[N, patch_dim]` head output node.
pub fn backbone_var(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &BackboneConfig,
    noisy: &LatentVolume,
    t: f32,
    text: &TextTokens,
) -> Result<(Var, [usize; 3])> {
    ensure!((0.0..=1.0).contains(&t), Invalid, "timestep {t} outside [0, 1]");
    let (mut h, grid) = embed_tokens(g, params, cfg, noisy)?;
    let tv = text_condition(g, params, cfg, text)?;
    let cond = time_condition(g, params, cfg, t)?;
    for i in 0..cfg.num_blocks {
        h = block_forward(g, params, cfg, &block_prefix(i), h, tv, cond, None)?;
    }
    Ok((head_var(g, params, h)?, grid))
}

/// Velocity prediction with the same extents as `noisy`.
pub fn backbone_forward(
    params: &ParamSet,
    cfg: &BackboneConfig,
    noisy: &LatentVolume,
    t: f32,
    text: &TextTokens,
) -> Result<LatentVolume> {
    let mut g = Graph::new();
    let (out, grid) = backbone_var(&mut g, params, cfg, noisy, t, text)?;
    patches_to_latent(g.value(out), grid, cfg.patch, cfg.latent_channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig { num_blocks: 2, model_dim: 16, num_heads: 2, patch: [1, 2, 2], text_dim: 8, ..Default::default() }
    }

    fn latent(extents: [usize; 4], seed: u64) -> LatentVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentVolume::new(Tensor::randn(&extents, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        assert!(BackboneConfig { num_blocks: 3, ..Default::default() }.validate().is_err());
        assert!(BackboneConfig { num_blocks: 0, ..Default::default() }.validate().is_err());
        assert!(BackboneConfig { model_dim: 30, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn patchify_grid_arithmetic() {
        let cfg = BackboneConfig::default();
        let p = init_backbone(&cfg, 0).unwrap();
        let h = patchify(&p, &cfg, &latent([4, 8, 16, 16], 1)).unwrap();
        assert_eq!(h.grid, [4, 4, 4]);
        assert_eq!(h.len(), 64);
        let h = patchify(&p, &cfg, &latent([1, 8, 4, 4], 1)).unwrap();
        assert_eq!(h.grid, [1, 1, 1]);
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let cfg = BackboneConfig::default();
        let p = init_backbone(&cfg, 0).unwrap();
        assert!(patchify(&p, &cfg, &latent([1, 8, 6, 4], 1)).is_err());
    }

    #[test]
    fn zero_latent_gives_bias_rows() {
        let cfg = small_cfg();
        let mut p = init_backbone(&cfg, 0).unwrap();
        let bias = Tensor::randn(&[cfg.model_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        p.get_mut("backbone.patch.b").unwrap().value = bias.clone();
        let h = patchify(&p, &cfg, &LatentVolume::zeros(1, 8, 4, 4)).unwrap();
        for r in 0..h.len() {
            assert_eq!(&h.tokens.data()[r * 16..(r + 1) * 16], bias.data());
        }
    }

    #[test]
    fn zero_output_projections_make_identity_block() {
        let cfg = small_cfg();
        let mut p = init_backbone(&cfg, 0).unwrap();
        for name in BLOCK_OUTPUTS {
            for s in ["w", "b"] {
                let key = format!("backbone.blocks.0.{name}.{s}");
                let shape = p.tensor(&key).unwrap().shape().to_vec();
                p.get_mut(&key).unwrap().value = Tensor::zeros(&shape);
            }
        }
        let h = patchify(&p, &cfg, &latent([2, 8, 4, 4], 2)).unwrap();
        let cond = time_embedding(&p, &cfg, 0.3).unwrap();
        let out = backbone_block(&p, &cfg, 0, &h, &TextTokens::from_prompt("a man walks"), &cond).unwrap();
        assert!(out.tokens.bit_eq(&h.tokens));
        assert_eq!(out.grid, h.grid);
    }

    #[test]
    fn block_is_deterministic_and_per_sample() {
        let cfg = small_cfg();
        let p = init_backbone(&cfg, 0).unwrap();
        let cond = time_embedding(&p, &cfg, 0.5).unwrap();
        let text = TextTokens::from_prompt("woman dances");
        let a = patchify(&p, &cfg, &latent([1, 8, 4, 4], 10)).unwrap();
        let b = patchify(&p, &cfg, &latent([1, 8, 4, 4], 11)).unwrap();
        let run = |batch: &[&HiddenState]| -> Vec<HiddenState> {
            batch.iter().map(|h| backbone_block(&p, &cfg, 1, h, &text, &cond).unwrap()).collect()
        };
        let ab = run(&[&a, &b]);
        let ba = run(&[&b, &a]);
        assert!(ab[0].tokens.bit_eq(&ba[1].tokens));
        assert!(ab[1].tokens.bit_eq(&ba[0].tokens));
        let again = run(&[&a, &b]);
        assert!(again[0].tokens.bit_eq(&ab[0].tokens));
    }

    #[test]
    fn block_rejects_width_mismatch() {
        let cfg = small_cfg();
        let p = init_backbone(&cfg, 0).unwrap();
        let h = HiddenState::new(Tensor::zeros(&[4, 12]), [1, 2, 2]).unwrap();
        let cond = time_embedding(&p, &cfg, 0.5).unwrap();
        assert!(backbone_block(&p, &cfg, 0, &h, &TextTokens::null(), &cond).is_err());
    }

    #[test]
    fn zero_head_gives_zero_velocity() {
        let cfg = small_cfg();
        let mut p = init_backbone(&cfg, 0).unwrap();
        for s in ["w", "b"] {
            let key = format!("backbone.head.{s}");
            let shape = p.tensor(&key).unwrap().shape().to_vec();
            p.get_mut(&key).unwrap().value = Tensor::zeros(&shape);
        }
        let out = backbone_forward(&p, &cfg, &latent([2, 8, 4, 4], 4), 0.2, &TextTokens::null()).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_preserves_extents_and_is_repeatable() {
        let cfg = BackboneConfig::default();
        let p = init_backbone(&cfg, 1).unwrap();
        let z = latent([4, 8, 16, 16], 5);
        let text = TextTokens::from_prompt("");
        let a = backbone_forward(&p, &cfg, &z, 0.7, &text).unwrap();
        assert_eq!(a.extents(), z.extents());
        let b = backbone_forward(&p, &cfg, &z, 0.7, &text).unwrap();
        assert!(a.tensor().bit_eq(b.tensor()));
    }

    #[test]
    fn forward_rejects_timestep_outside_unit_interval() {
        let cfg = small_cfg();
        let p = init_backbone(&cfg, 1).unwrap();
        assert!(backbone_forward(&p, &cfg, &latent([1, 8, 4, 4], 5), 1.5, &TextTokens::null()).is_err());
    }

    #[test]
    fn positions_distinguish_every_token() {
        let p = position_table([3, 4, 4], 16);
        assert_eq!(p.shape(), &[48, 16]);
        let rows: Vec<&[f32]> = p.data().chunks(16).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert!(rows[i].iter().zip(rows[j]).any(|(a, b)| (a - b).abs() > 1e-3), "{i} vs {j}");
            }
        }
        assert_eq!(&rows[0][..4], &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn tokenizer_maps_unknown_to_null() {
        let t = TextTokens::from_prompt("A man, zorbling!");
        assert_eq!(t.ids(), &[1, 4, 0]);
        assert_eq!(TextTokens::from_prompt("   ").ids(), &[0]);
    }
}
