use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tryon_core::autograd::Graph;
use tryon_core::backbone::{backbone_forward, init_backbone, BackboneConfig, HiddenState, TextTokens};
use tryon_core::conditioning::{
    build_gtm_context, build_ham_context, encode_latent, init_projection, project_context, LatentVolume, VideoTensor,
    LATENT_CHANNELS,
};
use tryon_core::dual::{forward_interpolated, InjectionSchedule};
use tryon_core::metrics::{frechet_distance, pixel_metrics, PSNR_CAP};
use tryon_core::model::{attach_trainables, ModelConfig, Variant};
use tryon_core::pipeline::{adaptive_crop, BBox};
use tryon_core::tensor::Tensor;

fn latent(f: usize, h: usize, w: usize, seed: u64) -> LatentVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentVolume::new(Tensor::randn(&[f, LATENT_CHANNELS, h, w], 1.0, &mut rng)).unwrap()
}

fn small_config() -> impl Strategy<Value = BackboneConfig> {
    (1usize..=2, 1usize..=2, 1usize..=2, prop::sample::select(vec![[1, 1, 1], [1, 2, 2], [2, 1, 2]])).prop_map(
        |(half_l, heads, per_head, patch)| BackboneConfig {
            num_blocks: 2 * half_l,
            model_dim: heads * per_head * 4,
            num_heads: heads,
            patch,
            text_dim: 8,
            mlp_ratio: 2,
            ..Default::default()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backbone_preserves_latent_extents(cfg in small_config(), ft in 1usize..=2, gh in 1usize..=3, gw in 1usize..=3,
                                         t in 0.0f32..=1.0, seed in any::<u64>()) {
        let p = init_backbone(&cfg, seed).unwrap();
        let z = latent(ft * cfg.patch[0], gh * cfg.patch[1], gw * cfg.patch[2], seed ^ 1);
        let out = backbone_forward(&p, &cfg, &z, t, &TextTokens::from_prompt("a person waves")).unwrap();
        prop_assert_eq!(out.extents(), z.extents());
        prop_assert!(out.tensor().all_finite());
    }

    #[test]
    fn ham_context_reslices_into_its_inputs(pf in 0usize..=4, h in 1usize..=3, w in 1usize..=3, seed in any::<u64>()) {
        let human = latent(1, h, w, seed);
        let pose = latent(pf, h, w, seed ^ 7);
        let ham = build_ham_context(&human, &pose).unwrap();
        prop_assert_eq!(ham.frames(), 1 + pf);
        prop_assert!(ham.slice_frames(0, 1).unwrap().tensor().bit_eq(human.tensor()));
        prop_assert!(ham.slice_frames(1, 1 + pf).unwrap().tensor().bit_eq(pose.tensor()));
    }

    #[test]
    fn gtm_context_pads_with_exact_zeros(n in 1usize..=3, extra in 0usize..=3, seed in any::<u64>()) {
        let garments: Vec<LatentVolume> = (0..n).map(|i| latent(1, 2, 2, seed.wrapping_add(i as u64))).collect();
        let target = n + extra;
        let gtm = build_gtm_context(&garments, target).unwrap();
        prop_assert_eq!(gtm.frames(), target);
        for (i, g) in garments.iter().enumerate() {
            prop_assert!(gtm.slice_frames(i, i + 1).unwrap().tensor().bit_eq(g.tensor()));
        }
        let pad = gtm.slice_frames(n, target).unwrap();
        prop_assert!(pad.tensor().data().iter().all(|&x| x.to_bits() == 0));
    }

    #[test]
    fn encoding_is_linear_in_the_input(scale in 0.05f32..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = VideoTensor::from_clamped(Tensor::randn(&[2, 3, 8, 8], 0.3, &mut rng).map(|x| x + 0.5)).unwrap();
        let scaled = VideoTensor::new(v.tensor().scale(scale)).unwrap();
        let (a, b) = (encode_latent(&v).unwrap(), encode_latent(&scaled).unwrap());
        prop_assert!(a.tensor().scale(scale).max_abs_diff(b.tensor()) < 1e-5);
        prop_assert!(encode_latent(&v).unwrap().tensor().bit_eq(a.tensor()));
    }

    #[test]
    fn context_projection_is_affine(seed in any::<u64>()) {
        let cfg = BackboneConfig { model_dim: 16, num_heads: 2, patch: [1, 2, 2], ..Default::default() };
        let mut p = tryon_core::tensor::ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_projection(&mut p, "ctx", &cfg, &mut rng, true);
        p.get_mut("ctx.b").unwrap().value = Tensor::randn(&[16], 1.0, &mut rng);
        let z = latent(3, 4, 4, seed ^ 3);
        let z2 = LatentVolume::new(z.tensor().scale(2.0)).unwrap();
        let run = |z: &LatentVolume| {
            let mut g = Graph::new();
            let v = project_context(&mut g, &p, "ctx", z, &cfg).unwrap();
            g.value(v).clone()
        };
        let bias = run(&LatentVolume::zeros(3, LATENT_CHANNELS, 4, 4));
        prop_assert_eq!(bias.shape(), &[3 * 2 * 2, 16][..]);
        let (t1, t2) = (run(&z).sub(&bias).unwrap(), run(&z2).sub(&bias).unwrap());
        prop_assert!(t1.scale(2.0).max_abs_diff(&t2) < 1e-4);
    }

    #[test]
    fn crop_is_nine_by_sixteen_contains_the_box_and_stays_inside(
        w in 16usize..=1024, h in 16usize..=1024, fx in 0.0f32..1.0, fy in 0.0f32..1.0, fs in 0.02f32..0.3,
        bx in 0.0f32..1.0, by in 0.0f32..1.0, bw in 0.05f32..1.0, bh in 0.05f32..1.0, seed in any::<u64>()
    ) {
        let (wf, hf) = (w as f32, h as f32);
        let side = (fs * wf.min(hf)).max(1.0);
        let fx0 = fx * (wf - side);
        let fy0 = fy * (hf - side);
        let face = BBox::new(fx0, fy0, fx0 + side, fy0 + side).unwrap();
        let (bw, bh) = ((bw * wf).max(1.0), (bh * hf).max(1.0));
        let bx0 = bx * (wf - bw);
        let by0 = by * (hf - bh);
        let body = BBox::new(bx0, by0, bx0 + bw, by0 + bh).unwrap();
        let c = adaptive_crop(w, h, &face, &body, (3.0, 1.1), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let r = c.rect;
        prop_assert!(r.x + r.width <= w && r.y + r.height <= h);
        prop_assert!(r.contains(&c.interpolated.clamp_to(w, h)));
        if c.degraded {
            prop_assert!(r.width == w || r.height == h);
        } else {
            prop_assert!((r.width as f64 - r.height as f64 * 9.0 / 16.0).abs() <= 1.0);
        }
    }

    #[test]
    fn frechet_is_symmetric_and_non_negative(n in 3usize..20, d in 1usize..5, shift in -2.0f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |off: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| Tensor::randn(&[d], 1.0, &mut rng).data().iter().map(|&x| x as f64 + off).collect()).collect()
        };
        let (a, b) = (draw(0.0), draw(shift));
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn identity_attains_psnr_and_ssim_extremes(f in 1usize..=2, h in 11usize..=16, w in 11usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = VideoTensor::from_clamped(Tensor::randn(&[f, 3, h, w], 0.3, &mut rng).map(|x| x + 0.5)).unwrap();
        let m = pixel_metrics(&v, &v).unwrap();
        prop_assert_eq!(m.l1, 0.0);
        prop_assert_eq!(m.psnr, PSNR_CAP);
        prop_assert!((m.ssim - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// The output change shrinks in proportion to the step in γ.
    #[test]
    fn interpolation_is_continuous_in_gamma(gamma in 0.0f32..0.98, seed in any::<u64>()) {
        let cfg = ModelConfig::toy(Variant::DualModule);
        let b = &cfg.backbone;
        let mut p = init_backbone(b, seed).unwrap();
        attach_trainables(&mut p, &cfg, seed ^ 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let names: Vec<String> = p.names().filter(|n| n.ends_with(".out.w")).cloned().collect();
        for n in names {
            p.get_mut(&n).unwrap().value = Tensor::randn(&[b.model_dim, b.model_dim], 0.2, &mut rng);
        }
        let h0 = HiddenState::new(Tensor::randn(&[4, b.model_dim], 1.0, &mut rng), [1, 2, 2]).unwrap();
        let ham = Tensor::randn(&[6, b.model_dim], 1.0, &mut rng);
        let (ga, gb) = (Tensor::randn(&[6, b.model_dim], 1.0, &mut rng), Tensor::randn(&[6, b.model_dim], 1.0, &mut rng));
        let cond = Tensor::randn(&[1, b.model_dim], 0.5, &mut rng);
        let text = TextTokens::from_prompt("a person walks right");
        let sched = InjectionSchedule::standard(b.num_blocks);
        let at = |g: f32| forward_interpolated(&p, b, &h0, &ham, &ga, &gb, g, &sched, &text, &cond).unwrap().tokens;
        let base = at(gamma);
        let big = base.max_abs_diff(&at(gamma + 1e-2)) as f64;
        let small = base.max_abs_diff(&at(gamma + 1e-4)) as f64;
        let floor = 64.0 * f32::EPSILON as f64 * base.data().iter().fold(0.0f32, |m, x| m.max(x.abs())) as f64;
        prop_assert!(big > 0.0);
        prop_assert!(small <= 0.02 * big + floor, "Δ(1e-4) {small} vs Δ(1e-2) {big}");
    }
}
