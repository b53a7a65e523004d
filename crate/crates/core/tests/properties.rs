use attnfuse::fusion::{align_prompts, blend_self, fuse_cross, BlendMask, EditConfig, EditMode};
use attnfuse::model::{
    embed_prompt, max_row_sum_error, plain_self_attend, spatiotemporal_attend, tokenize, DenoiserWeights,
    ModelConfig, START_TOKEN,
};
use attnfuse::numerics::{gaussian, matmul, maxnorm_frame, softmax_lastdim};
use attnfuse::pipeline::invert_video;
use attnfuse::schedule::{cfg_combine, ddim_invert_step, ddim_step, GuidanceScale, NoiseSchedule};
use attnfuse::store::AttentionStore;
use attnfuse::{LatentVideo, SeededRng, Tensor};
use proptest::prelude::*;

fn scalar(v: f64) -> LatentVideo {
    LatentVideo::new(Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap()).unwrap()
}

/// Schedule `[1, hi, lo]` with `1 > hi > lo > 0`.
fn three_level(hi: f64, lo_frac: f64) -> NoiseSchedule {
    NoiseSchedule::from_alpha_bar(vec![1.0, hi, hi * lo_frac]).unwrap()
}

fn small_cfg(frames: usize, layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        frames,
        height: 2,
        width: 3,
        channels: 1,
        d_model: 8,
        heads: 2,
        d_head: 4,
        layers,
        d_text: 8,
        seed,
    }
}

fn noise(cfg: &ModelConfig, seed: u64) -> LatentVideo {
    LatentVideo::new(gaussian(&mut SeededRng::new(seed), &cfg.latent_shape()).unwrap()).unwrap()
}

fn inverted_store(cfg: &ModelConfig, steps: usize, prompt: &str) -> AttentionStore {
    let w = DenoiserWeights::init(cfg).unwrap();
    let sched = NoiseSchedule::default_for(steps).unwrap();
    let p = embed_prompt(prompt, cfg);
    invert_video(&noise(cfg, 9), &p, &sched, &w).unwrap().1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-200.0f64..200.0, 1..48)) {
        let x = Tensor::new(vec![1, v.len()], v).unwrap();
        let s = softmax_lastdim(&x).unwrap();
        prop_assert!(max_row_sum_error(&s) <= 1e-12);
        prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn ddim_round_trip_both_orders(
        hi in 0.02f64..0.999,
        lo_frac in 0.02f64..0.999,
        z in -5.0f64..5.0,
        eps in -5.0f64..5.0,
    ) {
        let s = three_level(hi, lo_frac);
        let tol = 1e-9 * z.abs().max(1.0);
        let up_down = ddim_step(&ddim_invert_step(&scalar(z), &scalar(eps), 1, &s).unwrap(), &scalar(eps), 2, &s).unwrap();
        prop_assert!((up_down.data()[0] - z).abs() <= tol);
        let down_up = ddim_invert_step(&ddim_step(&scalar(z), &scalar(eps), 2, &s).unwrap(), &scalar(eps), 1, &s).unwrap();
        prop_assert!((down_up.data()[0] - z).abs() <= tol);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matmul_by_identity_is_exact(rows in 1usize..7, cols in 1usize..7, seed in any::<u64>()) {
        let a = gaussian(&mut SeededRng::new(seed), &[rows, cols]).unwrap();
        prop_assert_eq!(matmul(&a, &Tensor::identity(cols).unwrap()).unwrap(), a);
    }

    #[test]
    fn ddim_step_is_linear(
        hi in 0.05f64..0.95,
        lo_frac in 0.05f64..0.95,
        a in prop::array::uniform4(-3.0f64..3.0),
    ) {
        let s = three_level(hi, lo_frac);
        let f = |z: f64, e: f64| ddim_step(&scalar(z), &scalar(e), 2, &s).unwrap().data()[0];
        let joint = f(a[0] + a[1], a[2] + a[3]);
        prop_assert!((joint - (f(a[0], a[2]) + f(a[1], a[3]))).abs() <= 1e-12 * (1.0 + joint.abs()));
    }

    #[test]
    fn guidance_endpoints_are_exact(u in -10.0f64..10.0, c in -10.0f64..10.0) {
        let zero = cfg_combine(&scalar(u), &scalar(c), GuidanceScale::new(0.0).unwrap()).unwrap();
        let one = cfg_combine(&scalar(u), &scalar(c), GuidanceScale::UNIT).unwrap();
        prop_assert_eq!(zero.data()[0], u);
        prop_assert_eq!(one.data()[0], c);
    }

    #[test]
    fn maxnorm_peaks_at_one(v in prop::collection::vec(0.001f64..100.0, 2..32)) {
        let n = v.len() / 2 * 2;
        let x = Tensor::new(vec![2, n / 2], v[..n].to_vec()).unwrap();
        let y = maxnorm_frame(&x).unwrap();
        for f in 0..2 {
            let max = y.outer(f).iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn alignment_partitions_both_prompts(
        src in prop::collection::vec(prop::sample::select(vec!["a", "cat", "dog", "red", "big", ","]), 0..6),
        edit in prop::collection::vec(prop::sample::select(vec!["a", "cat", "dog", "red", "blue", "."]), 0..6),
    ) {
        let s: Vec<String> = std::iter::once(START_TOKEN).chain(src).map(String::from).collect();
        let e: Vec<String> = std::iter::once(START_TOKEN).chain(edit).map(String::from).collect();
        let al = align_prompts(&s, &e);
        prop_assert_eq!(al.pairs.len() + al.removed_positions.len(), s.len());
        prop_assert_eq!(al.pairs.len() + al.edited_positions.len(), e.len());
        prop_assert_eq!(al.pairs[0], (0, 0));
        for &(i, j) in &al.pairs {
            prop_assert_eq!(&s[i], &e[j]);
        }
        prop_assert!(al.pairs.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn store_is_complete_after_inversion(steps in 1usize..4, layers in 1usize..3, frames in 1usize..4) {
        let cfg = small_cfg(frames, layers, 3);
        let store = inverted_store(&cfg, steps, "a red cat");
        prop_assert_eq!(store.len(), 2 * steps * layers);
        prop_assert!(store.verify_complete().is_complete());
    }

    #[test]
    fn blended_self_maps_stay_stochastic(bits in prop::collection::vec(any::<bool>(), 18), t in 1usize..=3) {
        let cfg = small_cfg(3, 1, 4);
        let store = inverted_store(&cfg, 3, "a red cat");
        let mask = BlendMask::from_bits(3, 6, &bits, 0.3, t - 1).unwrap();
        let edit_store = inverted_store(&small_cfg(3, 1, 5), 3, "a red cat");
        let edit = &edit_store.query(t - 1, 0, attnfuse::store::AttentionKind::SelfAttn).unwrap().map;
        let cfg_full = EditConfig::new(0.0, 0.0, 0.3, GuidanceScale::UNIT, EditMode::Shape).unwrap();
        let out = blend_self(edit, &store, t, 0, &mask, &cfg_full, 3).unwrap();
        prop_assert!(max_row_sum_error(&out) <= 1e-9);
    }

    #[test]
    fn fused_cross_maps_stay_stochastic(
        edit in prop::collection::vec(prop::sample::select(vec!["a", "cat", "dog", "blue", "red"]), 1..5),
    ) {
        let cfg = small_cfg(2, 1, 6);
        let store = inverted_store(&cfg, 2, "a red cat");
        let text = edit.join(" ");
        let e = embed_prompt(&text, &cfg);
        let al = align_prompts(&tokenize_with_start("a red cat"), e.tokens());
        let mut rng = SeededRng::new(1);
        let raw = gaussian(&mut rng, &[2, 2, 6, e.len()]).unwrap();
        let c_edit = softmax_lastdim(&raw).unwrap();
        let full = EditConfig::new(0.0, 0.0, 1.0, GuidanceScale::UNIT, EditMode::Style).unwrap();
        let fused = fuse_cross(&c_edit, &store, &al, 2, 0, &full, 2).unwrap();
        prop_assert!(max_row_sum_error(&fused) <= 1e-9);
    }
}

fn tokenize_with_start(text: &str) -> Vec<String> {
    std::iter::once(START_TOKEN.to_string()).chain(tokenize(text)).collect()
}

#[test]
fn middle_frame_matches_plain_attention_for_random_draws() {
    let mut rng = SeededRng::new(77);
    for draw in 0..30u64 {
        let frames = 1 + (draw as usize % 6);
        let cfg = ModelConfig {
            seed: draw,
            ..small_cfg(frames, 1, draw)
        };
        let w = DenoiserWeights::init(&cfg).unwrap();
        let xs: Vec<Tensor> = (0..frames)
            .map(|_| gaussian(&mut rng, &[cfg.pixels(), cfg.d_model]).unwrap())
            .collect();
        let (out, map) = spatiotemporal_attend(&xs, &w.blocks[0], cfg.d_head).unwrap();
        assert_eq!(map.shape(), &[frames, cfg.heads, 6, 12]);
        let mid = frames / 2;
        let plain = plain_self_attend(&xs[mid], &w.blocks[0], cfg.d_head).unwrap();
        assert!(out[mid].max_abs_diff(&plain).unwrap() <= 1e-9);
    }
}
