//! A quick battery of invariant checks that runs in well under a second on
//! a tiny model. Exposed so the CLI can report on the build it ships with.

use std::fmt;

use crate::error::Result;
use crate::fusion::{build_blend_mask, EditConfig, EditMode};
use crate::model::{
    denoiser_forward, embed_prompt, max_row_sum_error, plain_self_attend, spatiotemporal_attend, AttentionKey,
    AttentionKind, DenoiserWeights, ModelConfig, Timestep,
};
use crate::numerics::{gaussian, softmax_lastdim, SeededRng, Tensor};
use crate::pipeline::{edit_video, invert_video, reconstruct, LatentVideo};
use crate::schedule::{ddim_invert_step, ddim_step, GuidanceScale, NoiseSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<24} {}", self.name, self.detail)
    }
}

fn tiny() -> ModelConfig {
    ModelConfig {
        frames: 3,
        height: 3,
        width: 4,
        channels: 1,
        d_model: 8,
        heads: 2,
        d_head: 4,
        layers: 2,
        d_text: 8,
        seed: 11,
    }
}

fn noise_latent(cfg: &ModelConfig, seed: u64) -> Result<LatentVideo> {
    LatentVideo::new(gaussian(&mut SeededRng::new(seed), &cfg.latent_shape())?.scale(0.5)?)
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn ddim_round_trip(seed: u64) -> Result<(bool, String)> {
    let mut rng = SeededRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let hi = 0.05 + 0.9 * rng.next_unit();
        let lo = hi * (0.05 + 0.9 * rng.next_unit());
        let sched = NoiseSchedule::from_alpha_bar(vec![1.0, hi, lo])?;
        let z = LatentVideo::new(Tensor::new(vec![1, 1, 1, 1], vec![rng.next_gaussian()])?)?;
        let eps = LatentVideo::new(Tensor::new(vec![1, 1, 1, 1], vec![rng.next_gaussian()])?)?;
        let up = ddim_invert_step(&z, &eps, 1, &sched)?;
        let back = ddim_step(&up, &eps, 2, &sched)?;
        worst = worst.max(back.tensor().max_abs_diff(z.tensor())?);
    }
    Ok((worst <= 1e-9, format!("max error {worst:.2e} over 200 triples")))
}

fn softmax_rows(seed: u64) -> Result<(bool, String)> {
    let mut rng = SeededRng::new(seed);
    let x = gaussian(&mut rng, &[100, 17])?.scale(20.0)?;
    let err = max_row_sum_error(&softmax_lastdim(&x)?);
    Ok((err <= 1e-12, format!("max row-sum error {err:.2e}")))
}

fn middle_frame_invariance() -> Result<(bool, String)> {
    let cfg = tiny();
    let w = DenoiserWeights::init(&cfg)?;
    let mut rng = SeededRng::new(5);
    let frames: Vec<Tensor> = (0..cfg.frames)
        .map(|_| gaussian(&mut rng, &[cfg.pixels(), cfg.d_model]))
        .collect::<Result<_>>()?;
    let mid = cfg.middle_frame();
    let (out, _) = spatiotemporal_attend(&frames, &w.blocks[0], cfg.d_head)?;
    let plain = plain_self_attend(&frames[mid], &w.blocks[0], cfg.d_head)?;
    let diff = out[mid].max_abs_diff(&plain)?;
    Ok((diff <= 1e-12, format!("middle frame deviates by {diff:.2e}")))
}

fn identity_edit() -> Result<(bool, String)> {
    let cfg = tiny();
    let w = DenoiserWeights::init(&cfg)?;
    let sched = NoiseSchedule::default_for(4)?;
    let z0 = noise_latent(&cfg, 2)?;
    let rec = reconstruct(&z0, "a red square", &sched, &w)?;
    let full = EditConfig::new(0.0, 0.0, 0.3, GuidanceScale::UNIT, EditMode::Shape)?;
    let ed = edit_video(&z0, "a red square", "a red square", &sched, &w, &full)?;
    let diff = ed.latent.tensor().max_abs_diff(rec.latent.tensor())?;
    Ok((diff <= 1e-12, format!("edit vs reconstruction {diff:.2e}")))
}

fn threshold_semantics() -> Result<(bool, String)> {
    let cfg = tiny();
    let w = DenoiserWeights::init(&cfg)?;
    let sched = NoiseSchedule::default_for(2)?;
    let p = embed_prompt("a red square", &cfg);
    let (_, store) = invert_video(&noise_latent(&cfg, 3)?, &p, &sched, &w)?;
    let words = [p.position("red").expect("token present")];
    let none = build_blend_mask(&store, 0, 0, &words, 1.0)?.count();
    let all = build_blend_mask(&store, 0, 0, &words, 0.0)?.count();
    let total = cfg.frames * cfg.pixels();
    Ok((
        none == 0 && all == total,
        format!("tau=1 sets {none}, tau=0 sets {all} of {total}"),
    ))
}

fn shape_contracts() -> Result<(bool, String)> {
    let cfg = tiny();
    let w = DenoiserWeights::init(&cfg)?;
    let sched = NoiseSchedule::default_for(3)?;
    let p = embed_prompt("a red square", &cfg);
    let z = noise_latent(&cfg, 4)?;
    let (eps, records) = denoiser_forward(&w, &z, Timestep::of(&sched, 1), &p, None)?;
    let (n, hw, heads) = (cfg.frames, cfg.pixels(), cfg.heads);
    let mut ok = eps.shape() == z.shape() && records.len() == 2 * cfg.layers;
    let mut worst = 0.0f64;
    for r in &records {
        let keys = match r.key.kind {
            AttentionKind::SelfAttn => 2 * hw,
            AttentionKind::Cross => p.len(),
        };
        ok &= r.map.shape() == [n, heads, hw, keys];
        worst = worst.max(max_row_sum_error(&r.map));
    }
    Ok((
        ok && worst <= 1e-9,
        format!("{} maps, max row-sum error {worst:.2e}", records.len()),
    ))
}

fn store_completeness() -> Result<(bool, String)> {
    let cfg = tiny();
    let w = DenoiserWeights::init(&cfg)?;
    let sched = NoiseSchedule::default_for(3)?;
    let p = embed_prompt("a cat", &cfg);
    let (_, mut store) = invert_video(&noise_latent(&cfg, 6)?, &p, &sched, &w)?;
    let expected = 2 * cfg.layers * sched.steps();
    let complete = store.verify_complete().is_complete() && store.len() == expected;
    let gone = AttentionKey::new(1, 1, AttentionKind::SelfAttn);
    store.remove(&gone);
    let reported = store.verify_complete().missing == vec![gone];
    Ok((
        complete && reported,
        format!("{expected} records; removal detected: {reported}"),
    ))
}

/// Runs every check; `seed` drives the randomized ones.
pub fn run_selfcheck(seed: u64) -> Vec<CheckResult> {
    vec![
        check("ddim_round_trip", ddim_round_trip(seed)),
        check("softmax_row_sums", softmax_rows(seed)),
        check("middle_frame_invariance", middle_frame_invariance()),
        check("identity_edit", identity_edit()),
        check("threshold_semantics", threshold_semantics()),
        check("shape_contracts", shape_contracts()),
        check("store_completeness", store_completeness()),
    ]
}
