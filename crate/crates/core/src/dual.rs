//! Human-animation and garment-transfer adapter stacks injected into the
//! frozen backbone.
//!
//! Each stack owns one adapter block per injection site (every even backbone
//! block). An adapter block keeps its own context token stream: at its site
//! it runs a backbone-shaped block over `[context ∥ main tokens]`, keeps the
//! leading rows as the next context, and projects the trailing rows (aligned
//! with the main tokens) through a zero-initialized linear layer. The
//! projected rows are the residual added to the backbone block output:
//!
//! ```text
//! h[l+1] = B[l](h[l])                                     l odd
//! h[l+1] = B[l](h[l]) + α·HAM[l](h[l]) + β·GTM[l](h[l])   l = 2k
//! ```
//!
//! Garment interpolation replaces the GTM term with
//! `γ·GTM[l](h[l]; G_A) + (1−γ)·GTM[l](h[l]; G_B)`, two independent context
//! cascades through the same GTM weights.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{block_forward, block_prefix, text_condition, BackboneConfig, HiddenState, TextTokens};
use crate::conditioning::init_projection;
use crate::error::{ensure, Result};
use crate::tensor::{ParamSet, Tensor};

/// Token sequence `[N, D]`.
pub type TokenSeq = Tensor;

pub const HAM: &str = "ham";
pub const GTM: &str = "gtm";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterRole {
    Ham,
    Gtm,
}

impl AdapterRole {
    pub fn prefix(self) -> &'static str {
        match self {
            AdapterRole::Ham => HAM,
            AdapterRole::Gtm => GTM,
        }
    }
}

/// Describes one adapter stack; the weights themselves live in a [`ParamSet`]
/// under `{prefix}.proj.*` and `{prefix}.blocks.{k}.*`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterStack {
    pub prefix: String,
    pub sites: usize,
}

impl AdapterStack {
    pub fn new(prefix: impl Into<String>, cfg: &BackboneConfig) -> Self {
        Self { prefix: prefix.into(), sites: cfg.num_blocks / 2 }
    }

    pub fn role(role: AdapterRole, cfg: &BackboneConfig) -> Self {
        Self::new(role.prefix(), cfg)
    }

    pub fn block_prefix(&self, k: usize) -> String {
        format!("{}.blocks.{k}", self.prefix)
    }

    pub fn proj_prefix(&self) -> String {
        format!("{}.proj", self.prefix)
    }

    /// Adds trainable weights: block `k` is a copy of backbone block `2k` plus
    /// a zero output projection; the context projection is random.
    pub fn init(&self, params: &mut ParamSet, cfg: &BackboneConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<()> {
        init_projection(params, &self.proj_prefix(), cfg, rng, true);
        for k in 0..self.sites {
            let src = block_prefix(2 * k);
            let dst = self.block_prefix(k);
            let copies: Vec<(String, Tensor)> = params
                .iter()
                .filter_map(|(n, p)| {
                    n.strip_prefix(&format!("{src}."))
                        .map(|rest| (format!("{dst}.{rest}"), p.value.clone()))
                })
                .collect();
            ensure!(!copies.is_empty(), Invalid, "backbone block {src} missing; initialize the backbone first");
            for (n, t) in copies {
                params.insert(n, t, true);
            }
            let d = cfg.model_dim;
            params.insert(format!("{dst}.out.w"), Tensor::zeros(&[d, d]), true);
            params.insert(format!("{dst}.out.b"), Tensor::zeros(&[d]), true);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionSchedule {
    sites: Vec<usize>,
    pub alpha: f32,
    pub beta: f32,
}

pub const DEFAULT_ALPHA: f32 = 0.5;
pub const DEFAULT_BETA: f32 = 0.5;

impl InjectionSchedule {
    /// Sites `l = 2k` for `k = 0 .. L/2 − 1`.
    pub fn even(num_blocks: usize, alpha: f32, beta: f32) -> Result<Self> {
        ensure!(alpha.is_finite() && beta.is_finite(), Invalid, "alpha and beta must be finite");
        Ok(Self { sites: (0..num_blocks / 2).map(|k| 2 * k).collect(), alpha, beta })
    }

    /// Even sites with the default α and β.
    pub fn standard(num_blocks: usize) -> Self {
        Self::even(num_blocks, DEFAULT_ALPHA, DEFAULT_BETA).expect("finite defaults")
    }

    /// Arbitrary strictly increasing even sites.
    pub fn with_sites(sites: Vec<usize>, alpha: f32, beta: f32) -> Result<Self> {
        ensure!(alpha.is_finite() && beta.is_finite(), Invalid, "alpha and beta must be finite");
        ensure!(
            sites.windows(2).all(|w| w[0] < w[1]) && sites.iter().all(|s| s % 2 == 0),
            Invalid,
            "sites must be strictly increasing and even: {:?}",
            sites
        );
        Ok(Self { sites, alpha, beta })
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn validate(&self, cfg: &BackboneConfig) -> Result<()> {
        if let Some(&s) = self.sites.iter().find(|&&s| s >= cfg.num_blocks) {
            return Err(crate::Error::Invalid(format!(
                "injection site {s} outside a {}-block backbone",
                cfg.num_blocks
            )));
        }
        Ok(())
    }

    /// Adapter block index `k` used at backbone block `l`, if `l` is a site.
    pub fn site_index(&self, l: usize) -> Option<usize> {
        self.sites.iter().position(|&s| s == l).map(|_| l / 2)
    }
}

/// One adapter context stream taking part in a forward pass.
#[derive(Clone, Debug)]
pub struct Stream<'a> {
    pub prefix: &'a str,
    pub ctx: Var,
    pub weight: f32,
}

/// One adapter block on the graph. Returns `(residual, new_ctx)`.
#[allow(clippy::too_many_arguments)]
pub fn adapter_block_var(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &BackboneConfig,
    stack_prefix: &str,
    k: usize,
    main_h: Var,
    ctx: Var,
    text: Var,
    cond: Var,
) -> Result<(Var, Var)> {
    let (sm, sc) = (g.shape(main_h).to_vec(), g.shape(ctx).to_vec());
    ensure!(
        sm.len() == 2 && sc.len() == 2 && sm[1] == sc[1] && sm[1] == cfg.model_dim,
        Shape,
        "context tokens {:?} and main tokens {:?} disagree on width",
        sc,
        sm
    );
    let (n_ctx, n_main) = (sc[0], sm[0]);
    let prefix = format!("{stack_prefix}.blocks.{k}");
    let joint = g.concat_rows(&[ctx, main_h])?;
    let out = block_forward(g, params, cfg, &prefix, joint, text, cond, None)?;
    let new_ctx = g.slice_rows(out, 0, n_ctx)?;
    let aligned = g.slice_rows(out, n_ctx, n_ctx + n_main)?;
    let w = g.param(params, &format!("{prefix}.out.w"))?;
    let b = g.param(params, &format!("{prefix}.out.b"))?;
    let residual = g.linear(aligned, w, Some(b))?;
    Ok((residual, new_ctx))
}

/// Runs every backbone block, adding weighted adapter residuals at the
/// schedule's sites. Streams are summed in the order given.
#[allow(clippy::too_many_arguments)]
pub fn inject_var(
    g: &mut Graph,
    params: &ParamSet,
    cfg: &BackboneConfig,
    h0: Var,
    streams: &[Stream<'_>],
    sched: &InjectionSchedule,
    text: Var,
    cond: Var,
) -> Result<Var> {
    sched.validate(cfg)?;
    let mut ctxs: Vec<Var> = streams.iter().map(|s| s.ctx).collect();
    let mut h = h0;
    for l in 0..cfg.num_blocks {
        let mut next = block_forward(g, params, cfg, &block_prefix(l), h, text, cond, None)?;
        if let Some(k) = sched.site_index(l) {
            // consecutive streams sharing a module are blended before the add
            let mut pending: Option<(&str, Var)> = None;
            for (s, ctx) in streams.iter().zip(ctxs.iter_mut()) {
                let (res, new_ctx) = adapter_block_var(g, params, cfg, s.prefix, k, h, *ctx, text, cond)?;
                *ctx = new_ctx;
                let res = g.scale(res, s.weight);
                pending = match pending {
                    Some((p, acc)) if p == s.prefix => Some((p, g.add(acc, res)?)),
                    Some((_, acc)) => {
                        next = g.add(next, acc)?;
                        Some((s.prefix, res))
                    }
                    None => Some((s.prefix, res)),
                };
            }
            if let Some((_, acc)) = pending {
                next = g.add(next, acc)?;
            }
        }
        h = next;
    }
    Ok(h)
}

struct Prepared {
    g: Graph,
    h0: Var,
    text: Var,
    cond: Var,
}

fn prepare(params: &ParamSet, cfg: &BackboneConfig, h0: &HiddenState, text: &TextTokens, cond: &Tensor) -> Result<Prepared> {
    let mut g = Graph::new();
    let h0v = g.constant(h0.tokens.clone());
    let text = text_condition(&mut g, params, cfg, text)?;
    let cond = g.constant(cond.clone());
    Ok(Prepared { g, h0: h0v, text, cond })
}

/// Materialized adapter block: returns the residual and the advanced context.
#[allow(clippy::too_many_arguments)]
pub fn adapter_block(
    params: &ParamSet,
    cfg: &BackboneConfig,
    stack: &AdapterStack,
    k: usize,
    main_h: &HiddenState,
    ctx: &TokenSeq,
    text: &TextTokens,
    cond: &Tensor,
) -> Result<(Tensor, TokenSeq)> {
    ensure!(k < stack.sites, Invalid, "adapter block {k} out of range");
    let mut p = prepare(params, cfg, main_h, text, cond)?;
    let c = p.g.constant(ctx.clone());
    let (r, nc) = adapter_block_var(&mut p.g, params, cfg, &stack.prefix, k, p.h0, c, p.text, p.cond)?;
    Ok((p.g.value(r).clone(), p.g.value(nc).clone()))
}

/// Final hidden state of the injected forward pass.
#[allow(clippy::too_many_arguments)]
pub fn forward_injected(
    params: &ParamSet,
    cfg: &BackboneConfig,
    h0: &HiddenState,
    ham_ctx: &TokenSeq,
    gtm_ctx: &TokenSeq,
    sched: &InjectionSchedule,
    text: &TextTokens,
    cond: &Tensor,
) -> Result<HiddenState> {
    let mut p = prepare(params, cfg, h0, text, cond)?;
    let ham = p.g.constant(ham_ctx.clone());
    let gtm = p.g.constant(gtm_ctx.clone());
    let streams = [
        Stream { prefix: HAM, ctx: ham, weight: sched.alpha },
        Stream { prefix: GTM, ctx: gtm, weight: sched.beta },
    ];
    let out = inject_var(&mut p.g, params, cfg, p.h0, &streams, sched, p.text, p.cond)?;
    HiddenState::new(p.g.value(out).clone(), h0.grid)
}

pub fn check_gamma(gamma: f32) -> Result<()> {
    ensure!((0.0..=1.0).contains(&gamma), Invalid, "gamma {gamma} outside [0, 1]");
    Ok(())
}

/// Injected forward pass with two garment context cascades weighted `γ` and `1−γ`.
#[allow(clippy::too_many_arguments)]
pub fn forward_interpolated(
    params: &ParamSet,
    cfg: &BackboneConfig,
    h0: &HiddenState,
    ham_ctx: &TokenSeq,
    gtm_ctx_a: &TokenSeq,
    gtm_ctx_b: &TokenSeq,
    gamma: f32,
    sched: &InjectionSchedule,
    text: &TextTokens,
    cond: &Tensor,
) -> Result<HiddenState> {
    check_gamma(gamma)?;
    let mut p = prepare(params, cfg, h0, text, cond)?;
    let ham = p.g.constant(ham_ctx.clone());
    let a = p.g.constant(gtm_ctx_a.clone());
    let b = p.g.constant(gtm_ctx_b.clone());
    let streams = [
        Stream { prefix: HAM, ctx: ham, weight: sched.alpha },
        Stream { prefix: GTM, ctx: a, weight: gamma },
        Stream { prefix: GTM, ctx: b, weight: 1.0 - gamma },
    ];
    let out = inject_var(&mut p.g, params, cfg, p.h0, &streams, sched, p.text, p.cond)?;
    HiddenState::new(p.g.value(out).clone(), h0.grid)
}

/// Plain backbone pass over hidden states (no head), for equivalence checks.
pub fn forward_plain(
    params: &ParamSet,
    cfg: &BackboneConfig,
    h0: &HiddenState,
    text: &TextTokens,
    cond: &Tensor,
) -> Result<HiddenState> {
    let mut p = prepare(params, cfg, h0, text, cond)?;
    let mut h = p.h0;
    for l in 0..cfg.num_blocks {
        h = block_forward(&mut p.g, params, cfg, &block_prefix(l), h, p.text, p.cond, None)?;
    }
    HiddenState::new(p.g.value(h).clone(), h0.grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, time_embedding};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> BackboneConfig {
        BackboneConfig { num_blocks: 4, model_dim: 16, num_heads: 2, patch: [1, 2, 2], text_dim: 8, ..Default::default() }
    }

    fn setup() -> (BackboneConfig, ParamSet) {
        let cfg = cfg();
        let mut p = init_backbone(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        AdapterStack::role(AdapterRole::Ham, &cfg).init(&mut p, &cfg, &mut rng).unwrap();
        AdapterStack::role(AdapterRole::Gtm, &cfg).init(&mut p, &cfg, &mut rng).unwrap();
        (cfg, p)
    }

    fn randomize_outputs(p: &mut ParamSet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = p.names().filter(|n| n.contains(".out.")).cloned().collect();
        for n in names {
            let shape = p.tensor(&n).unwrap().shape().to_vec();
            p.get_mut(&n).unwrap().value = Tensor::randn(&shape, 0.2, &mut rng);
        }
    }

    fn tokens(n: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn schedule_sites_are_even() {
        let s = InjectionSchedule::standard(8);
        assert_eq!(s.sites(), &[0, 2, 4, 6]);
        assert_eq!((s.alpha, s.beta), (0.5, 0.5));
        assert_eq!(s.site_index(4), Some(2));
        assert_eq!(s.site_index(3), None);
        assert!(InjectionSchedule::with_sites(vec![2, 1], 0.5, 0.5).is_err());
        assert!(InjectionSchedule::even(4, f32::NAN, 0.5).is_err());
    }

    #[test]
    fn schedule_site_beyond_backbone_rejected() {
        let (cfg, p) = setup();
        let s = InjectionSchedule::with_sites(vec![0, 4], 0.5, 0.5).unwrap();
        let h0 = HiddenState::new(tokens(4, 1), [1, 2, 2]).unwrap();
        let cond = time_embedding(&p, &cfg, 0.5).unwrap();
        let r = forward_injected(&p, &cfg, &h0, &tokens(8, 2), &tokens(8, 3), &s, &TextTokens::null(), &cond);
        assert!(r.is_err());
    }

    #[test]
    fn fresh_adapter_residual_is_zero() {
        let (cfg, p) = setup();
        let stack = AdapterStack::role(AdapterRole::Ham, &cfg);
        let h = HiddenState::new(tokens(4, 1), [1, 2, 2]).unwrap();
        let cond = time_embedding(&p, &cfg, 0.5).unwrap();
        let (r, nc) = adapter_block(&p, &cfg, &stack, 0, &h, &tokens(6, 2), &TextTokens::null(), &cond).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
        assert_eq!(nc.shape(), &[6, 16]);
    }

    #[test]
    fn residual_scales_with_output_projection() {
        let (cfg, mut p) = setup();
        randomize_outputs(&mut p, 9);
        let stack = AdapterStack::role(AdapterRole::Gtm, &cfg);
        let h = HiddenState::new(tokens(4, 1), [1, 2, 2]).unwrap();
        let ctx = tokens(6, 2);
        let cond = time_embedding(&p, &cfg, 0.5).unwrap();
        let text = TextTokens::null();
        let (r1, _) = adapter_block(&p, &cfg, &stack, 1, &h, &ctx, &text, &cond).unwrap();
        for s in ["w", "b"] {
            let n = format!("gtm.blocks.1.out.{s}");
            let v = p.tensor(&n).unwrap().scale(3.0);
            p.get_mut(&n).unwrap().value = v;
        }
        let (r3, _) = adapter_block(&p, &cfg, &stack, 1, &h, &ctx, &text, &cond).unwrap();
        for (a, b) in r1.data().iter().zip(r3.data()) {
            assert!((3.0 * a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn adapter_block_rejects_width_mismatch() {
        let (cfg, p) = setup();
        let stack = AdapterStack::role(AdapterRole::Ham, &cfg);
        let h = HiddenState::new(tokens(4, 1), [1, 2, 2]).unwrap();
        let bad = Tensor::zeros(&[3, 8]);
        let cond = time_embedding(&p, &cfg, 0.5).unwrap();
        assert!(adapter_block(&p, &cfg, &stack, 0, &h, &bad, &TextTokens::null(), &cond).is_err());
    }

    #[test]
    fn adapter_weights_copy_backbone_blocks() {
        let (_, p) = setup();
        assert_eq!(p.tensor("ham.blocks.1.attn.q.w").unwrap(), p.tensor("backbone.blocks.2.attn.q.w").unwrap());
        assert!(p.get("ham.blocks.1.attn.q.w").unwrap().trainable);
        assert!(!p.get("backbone.blocks.2.attn.q.w").unwrap().trainable);
    }

    #[test]
    fn zero_scalars_reproduce_backbone() {
        let (cfg, mut p) = setup();
        randomize_outputs(&mut p, 5);
        let h0 = HiddenState::new(tokens(4, 1), [1, 2, 2]).unwrap();
        let cond = time_embedding(&p, &cfg, 0.25).unwrap();
        let text = TextTokens::from_prompt("person walks");
        let sched = InjectionSchedule::even(cfg.num_blocks, 0.0, 0.0).unwrap();
        let out = forward_injected(&p, &cfg, &h0, &tokens(8, 2), &tokens(8, 3), &sched, &text, &cond).unwrap();
        let plain = forward_plain(&p, &cfg, &h0, &text, &cond).unwrap();
        assert!(out.tokens.bit_eq(&plain.tokens));
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let (cfg, mut p) = setup();
        randomize_outputs(&mut p, 6);
        let h0 = HiddenState::new(tokens(4, 1), [1, 2, 2]).unwrap();
        let cond = time_embedding(&p, &cfg, 0.6).unwrap();
        let text = TextTokens::null();
        let (ham, a, b) = (tokens(8, 2), tokens(8, 3), tokens(8, 4));
        let sched = InjectionSchedule::even(cfg.num_blocks, 0.5, 1.0).unwrap();
        let one = forward_interpolated(&p, &cfg, &h0, &ham, &a, &b, 1.0, &sched, &text, &cond).unwrap();
        let with_a = forward_injected(&p, &cfg, &h0, &ham, &a, &sched, &text, &cond).unwrap();
        assert!(one.tokens.bit_eq(&with_a.tokens));
        let zero = forward_interpolated(&p, &cfg, &h0, &ham, &a, &b, 0.0, &sched, &text, &cond).unwrap();
        let with_b = forward_injected(&p, &cfg, &h0, &ham, &b, &sched, &text, &cond).unwrap();
        assert!(zero.tokens.bit_eq(&with_b.tokens));
        assert!(forward_interpolated(&p, &cfg, &h0, &ham, &a, &b, 1.5, &sched, &text, &cond).is_err());
    }
}
