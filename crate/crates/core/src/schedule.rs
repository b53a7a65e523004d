//! Noise schedule, deterministic DDIM updates and classifier-free guidance.
//!
//! Steps are indexed `0..=T` with `alpha_bar[0] = 1`, so step 0 is the clean
//! latent. [`ddim_step`] moves `t → t-1`; [`ddim_invert_step`] moves
//! `t → t+1`. Sharing the noise estimate makes the two exact inverses.

use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::numerics::Tensor;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;
pub const DEFAULT_TRAIN_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    /// Position of each step on the unit time axis, fed to the timestep embedding.
    levels: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Normalized time of step `t` in `[0, 1]`.
    pub fn level(&self, t: usize) -> f64 {
        self.levels[t]
    }

    /// Builds a schedule straight from a coefficient table. The table must
    /// start at 1 and decrease strictly while staying positive.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        validate_alpha_bar(&alpha_bar)?;
        let steps = alpha_bar.len() - 1;
        let levels = (0..=steps).map(|t| t as f64 / steps as f64).collect();
        Ok(NoiseSchedule { alpha_bar, levels })
    }

    /// DDIM sub-schedule of a `train_steps`-long linear-beta training schedule:
    /// step `k` of `T` sits at training index `round(k · train_steps / T)`.
    ///
    /// Total noise is fixed by the training schedule, so raising `T` only
    /// refines the step size.
    pub fn strided(
        steps: usize,
        train_steps: usize,
        beta_start: f64,
        beta_end: f64,
    ) -> Result<Self> {
        if steps == 0 || steps > train_steps {
            return Err(Error::contract(format!(
                "strided schedule needs 1 <= steps ({steps}) <= train_steps ({train_steps})"
            )));
        }
        let train = make_schedule(train_steps, beta_start, beta_end)?;
        let index = |k: usize| ((k * train_steps) as f64 / steps as f64).round() as usize;
        let alpha_bar: Vec<f64> = (0..=steps).map(|k| train.alpha_bar[index(k)]).collect();
        validate_alpha_bar(&alpha_bar)?;
        let levels = (0..=steps)
            .map(|k| index(k) as f64 / train_steps as f64)
            .collect();
        Ok(NoiseSchedule { alpha_bar, levels })
    }

    /// The schedule the pipeline uses unless told otherwise.
    pub fn default_for(steps: usize) -> Result<Self> {
        NoiseSchedule::strided(
            steps,
            DEFAULT_TRAIN_STEPS,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
        )
    }

    fn check_step(&self, t: usize, lo: usize, hi: usize, op: &str) -> Result<()> {
        if t < lo || t > hi {
            return Err(Error::contract(format!(
                "{op}: step {t} outside [{lo}, {hi}] for T = {}",
                self.steps()
            )));
        }
        Ok(())
    }
}

fn validate_alpha_bar(alpha_bar: &[f64]) -> Result<()> {
    if alpha_bar.len() < 2 {
        return Err(Error::contract("schedule needs at least one step"));
    }
    if alpha_bar[0] != 1.0 {
        return Err(Error::contract(format!(
            "alpha_bar[0] must be 1, got {}",
            alpha_bar[0]
        )));
    }
    for (t, w) in alpha_bar.windows(2).enumerate() {
        if !(w[1] < w[0]) || !(w[1] > 0.0) {
            return Err(Error::contract(format!(
                "alpha_bar must decrease strictly and stay positive; step {} has {} after {}",
                t + 1,
                w[1],
                w[0]
            )));
        }
    }
    Ok(())
}

/// `alpha_bar[t] = Π_{s ≤ t} (1 − β_s)` with `β_1..β_T` linearly spaced
/// from `beta_start` to `beta_end`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::contract("schedule needs T >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::contract(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for s in 0..steps {
        let beta = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * s as f64 / (steps - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

/// Shared DDIM update from coefficient `from` to coefficient `to`.
fn ddim_update(z: &Tensor, eps: &Tensor, from: f64, to: f64) -> Result<Tensor> {
    let (sa_from, sb_from) = (from.sqrt(), (1.0 - from).sqrt());
    let (sa_to, sb_to) = (to.sqrt(), (1.0 - to).sqrt());
    z.zip_with(eps, |zv, ev| {
        sa_to * (zv - sb_from * ev) / sa_from + sb_to * ev
    })
}

fn check_pair(z: &LatentVideo, eps: &LatentVideo, op: &'static str) -> Result<()> {
    z.tensor().expect_same_shape(eps.tensor(), op)
}

/// One deterministic denoising step `z_t → z_{t−1}`.
pub fn ddim_step(
    z_t: &LatentVideo,
    eps: &LatentVideo,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    sched.check_step(t, 1, sched.steps(), "ddim_step")?;
    check_pair(z_t, eps, "ddim_step")?;
    let out = ddim_update(
        z_t.tensor(),
        eps.tensor(),
        sched.alpha_bar(t),
        sched.alpha_bar(t - 1),
    )?;
    LatentVideo::new(out)
}

/// One inversion step `ẑ_t → ẑ_{t+1}`.
pub fn ddim_invert_step(
    z_t: &LatentVideo,
    eps: &LatentVideo,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    sched.check_step(t, 0, sched.steps() - 1, "ddim_invert_step")?;
    check_pair(z_t, eps, "ddim_invert_step")?;
    let out = ddim_update(
        z_t.tensor(),
        eps.tensor(),
        sched.alpha_bar(t),
        sched.alpha_bar(t + 1),
    )?;
    LatentVideo::new(out)
}

/// Classifier-free guidance weight; nonnegative and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, serde::Serialize)]
pub struct GuidanceScale(f64);

impl GuidanceScale {
    /// Scale 1: the conditional prediction alone.
    pub const UNIT: GuidanceScale = GuidanceScale(1.0);

    pub fn new(s: f64) -> Result<Self> {
        if !s.is_finite() || s < 0.0 {
            return Err(Error::contract(format!(
                "guidance scale must be finite and >= 0, got {s}"
            )));
        }
        Ok(GuidanceScale(s))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Whether the unconditional branch contributes anything.
    pub fn needs_unconditional(self) -> bool {
        self.0 != 1.0
    }
}

/// `eps_uncond + s · (eps_cond − eps_uncond)`, evaluated as
/// `(1 − s) · eps_uncond + s · eps_cond` so the scales 0 and 1 return their
/// branch exactly.
pub fn cfg_combine(
    eps_uncond: &LatentVideo,
    eps_cond: &LatentVideo,
    g: GuidanceScale,
) -> Result<LatentVideo> {
    check_pair(eps_uncond, eps_cond, "cfg_combine")?;
    let s = g.value();
    let out = eps_uncond
        .tensor()
        .zip_with(eps_cond.tensor(), |u, c| (1.0 - s) * u + s * c)?;
    LatentVideo::new(out)
}
