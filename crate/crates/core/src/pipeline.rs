//! End-to-end inversion and editing on synthetic or loaded video.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{align_prompts, EditConfig, FusionProbe, PromptAlignment};
pub use crate::latent::LatentVideo;
use crate::model::{denoiser_forward, embed_prompt, AttentionProbe, DenoiserWeights, PromptEmbedding, Timestep};
use crate::numerics::{SeededRng, Tensor};
use crate::schedule::{cfg_combine, ddim_invert_step, ddim_step, NoiseSchedule};
use crate::store::{AttentionStore, StoreMeta};

// ---------------------------------------------------------------------------
// Pixel video and synthetic source
// ---------------------------------------------------------------------------

/// Pixel frames laid out `frames × channels × height × width`, values nominally in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVideo {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PixelVideo {
    pub fn new(frames: usize, channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if frames * channels * height * width != data.len() || data.is_empty() {
            return Err(Error::contract(format!(
                "pixel video {frames}x{channels}x{height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(PixelVideo {
            frames,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.data[f * self.frame_len()..(f + 1) * self.frame_len()]
    }

    /// Rounds half-up and clamps to bytes.
    pub fn quantize(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_value(v)).collect()
    }

    /// The video after a trip through 8-bit storage.
    pub fn quantized(&self) -> PixelVideo {
        PixelVideo {
            data: self.quantize().into_iter().map(f64::from).collect(),
            ..*self
        }
    }
}

pub(crate) fn quantize_value(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Named colors known to the synthetic source and the oracle palette.
pub const COLORS: [(&str, [u8; 3]); 10] = [
    ("black", [0, 0, 0]),
    ("white", [255, 255, 255]),
    ("red", [255, 0, 0]),
    ("green", [0, 255, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("cyan", [0, 255, 255]),
    ("magenta", [255, 0, 255]),
    ("gray", [128, 128, 128]),
    ("orange", [255, 128, 0]),
];

pub fn color_rgb(name: &str) -> Result<[u8; 3]> {
    COLORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::contract(format!("unknown color {name:?}")))
}

/// Rec. 601 luma, rounded half-up.
pub fn luma(rgb: [u8; 3]) -> f64 {
    (0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64 + 0.5).floor()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectShape {
    /// Axis-aligned square; `start` is its top-left corner.
    Square { side: usize },
    /// Disc; `start` is its center.
    Disc { radius: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// 3 for RGB, 1 for luma.
    pub channels: usize,
    pub shape: ObjectShape,
    pub object_color: String,
    pub background_color: String,
    /// `(x, y)` anchor in frame 0.
    pub start: (i64, i64),
    /// `(dx, dy)` of each frame relative to `start`.
    pub offsets: Vec<(i64, i64)>,
    /// Standard deviation of additive pixel noise; 0 for clean frames.
    pub noise_std: f64,
}

impl VideoSpec {
    /// Object moving by `velocity` pixels per frame.
    #[allow(clippy::too_many_arguments)]
    pub fn moving(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        shape: ObjectShape,
        object_color: &str,
        background_color: &str,
        start: (i64, i64),
        velocity: (i64, i64),
    ) -> Self {
        VideoSpec {
            frames,
            height,
            width,
            channels,
            shape,
            object_color: object_color.to_string(),
            background_color: background_color.to_string(),
            start,
            offsets: (0..frames as i64).map(|f| (f * velocity.0, f * velocity.1)).collect(),
            noise_std: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::contract("video extents must be positive"));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::contract(format!(
                "video channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.offsets.len() != self.frames {
            return Err(Error::contract(format!(
                "{} motion offsets for {} frames",
                self.offsets.len(),
                self.frames
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::contract("noise_std must be finite and >= 0"));
        }
        color_rgb(&self.object_color)?;
        color_rgb(&self.background_color)?;
        let (w, h) = (self.width as i64, self.height as i64);
        for (f, &(dx, dy)) in self.offsets.iter().enumerate() {
            let (x, y) = (self.start.0 + dx, self.start.1 + dy);
            let (x0, y0, x1, y1) = match self.shape {
                ObjectShape::Square { side } => (x, y, x + side as i64, y + side as i64),
                ObjectShape::Disc { radius } => {
                    let r = radius as i64;
                    (x - r, y - r, x + r + 1, y + r + 1)
                }
            };
            if x0 < 0 || y0 < 0 || x1 > w || y1 > h {
                return Err(Error::contract(format!(
                    "object leaves the {w}x{h} frame at frame {f}"
                )));
            }
        }
        Ok(())
    }
}

/// Renders the spec. Returns the frames and, per frame, the exact object
/// mask over `height × width` pixels.
pub fn synth_video(spec: &VideoSpec, rng: &mut SeededRng) -> Result<(PixelVideo, Vec<Vec<bool>>)> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let paint = |name: &str| -> Result<Vec<f64>> {
        let rgb = color_rgb(name)?;
        Ok(if c == 3 {
            rgb.iter().map(|&v| v as f64).collect()
        } else {
            vec![luma(rgb)]
        })
    };
    let (fg, bg) = (paint(&spec.object_color)?, paint(&spec.background_color)?);
    let mut data = Vec::with_capacity(spec.frames * c * h * w);
    let mut masks = Vec::with_capacity(spec.frames);
    for &(dx, dy) in &spec.offsets {
        let (ax, ay) = (spec.start.0 + dx, spec.start.1 + dy);
        let mask: Vec<bool> = (0..h * w)
            .map(|p| {
                let (x, y) = ((p % w) as i64, (p / w) as i64);
                match spec.shape {
                    ObjectShape::Square { side } => {
                        let s = side as i64;
                        x >= ax && x < ax + s && y >= ay && y < ay + s
                    }
                    ObjectShape::Disc { radius } => {
                        let r = radius as i64;
                        (x - ax).pow(2) + (y - ay).pow(2) <= r * r
                    }
                }
            })
            .collect();
        for ch in 0..c {
            for &inside in &mask {
                let base = if inside { fg[ch] } else { bg[ch] };
                let v = if spec.noise_std > 0.0 {
                    (base + spec.noise_std * rng.next_gaussian()).clamp(0.0, 255.0)
                } else {
                    base
                };
                data.push(v);
            }
        }
        masks.push(mask);
    }
    Ok((PixelVideo::new(spec.frames, c, h, w, data)?, masks))
}

// ---------------------------------------------------------------------------
// Codec
// ---------------------------------------------------------------------------

/// Affine map `[0, 255] → [−1, 1]`.
pub fn encode(pixels: &PixelVideo) -> Result<LatentVideo> {
    if let Some(v) = pixels.data.iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::contract(format!("pixel value {v} outside [0, 255]")));
    }
    let data = pixels.data.iter().map(|v| v / 127.5 - 1.0).collect();
    LatentVideo::new(Tensor::new(
        vec![pixels.frames, pixels.channels, pixels.height, pixels.width],
        data,
    )?)
}

/// Inverse of [`encode`]; values are not clamped.
pub fn decode(latent: &LatentVideo) -> Result<PixelVideo> {
    let data = latent.data().iter().map(|v| (v + 1.0) * 127.5).collect();
    PixelVideo::new(
        latent.frames(),
        latent.channels(),
        latent.height(),
        latent.width(),
        data,
    )
}

// ---------------------------------------------------------------------------
// Inversion and denoising
// ---------------------------------------------------------------------------

/// DDIM inversion of `z0` under the source prompt at guidance 1, capturing
/// every attention map along the way.
pub fn invert_video(
    z0: &LatentVideo,
    p_src: &PromptEmbedding,
    sched: &NoiseSchedule,
    weights: &DenoiserWeights,
) -> Result<(LatentVideo, AttentionStore)> {
    let cfg = &weights.config;
    let mut store = AttentionStore::new(StoreMeta {
        steps: sched.steps(),
        layers: cfg.layers,
        config_hash: cfg.config_hash(),
    });
    let mut z = z0.clone();
    for t in 0..sched.steps() {
        let (eps, records) = denoiser_forward(weights, &z, Timestep::of(sched, t), p_src, None)
            .map_err(|e| e.with_context(format!("inversion step {t}")))?;
        for rec in records {
            store.record(rec.key, rec)?;
        }
        z = ddim_invert_step(&z, &eps, t, sched)?;
    }
    let report = store.verify_complete();
    if !report.is_complete() {
        return Err(Error::contract(format!(
            "inversion left {} attention records missing",
            report.missing.len()
        )));
    }
    Ok((z, store))
}

/// Stored inversion maps plus the prompt alignment used to fuse them.
#[derive(Clone, Copy)]
pub struct Fusion<'a> {
    pub store: &'a AttentionStore,
    pub alignment: &'a PromptAlignment,
}

/// DDIM sampling from `z_T` down to step 0.
///
/// The noise estimate is `cfg_combine(ε(∅), ε(p), s_cfg)`. With `fusion`
/// the conditional branch runs under a [`FusionProbe`]; the unconditional
/// branch never does, and is skipped entirely at guidance 1.
pub fn run_denoise(
    z_t: &LatentVideo,
    prompt: &PromptEmbedding,
    sched: &NoiseSchedule,
    weights: &DenoiserWeights,
    fusion: Option<Fusion<'_>>,
    cfg: &EditConfig,
) -> Result<LatentVideo> {
    let steps = sched.steps();
    let mut probe = match fusion {
        Some(f) => {
            let meta = f.store.meta();
            if meta.steps != steps || meta.layers != weights.config.layers {
                return Err(Error::contract(format!(
                    "store grid {}x{} does not match schedule T={steps} and {} layers",
                    meta.steps, meta.layers, weights.config.layers
                )));
            }
            let report = f.store.verify_complete();
            if !report.is_complete() {
                return Err(Error::contract(format!(
                    "store is missing {} records, first {}",
                    report.missing.len(),
                    report.missing[0]
                )));
            }
            if f.alignment.edit_len != prompt.len() {
                return Err(Error::contract(format!(
                    "alignment covers {} edit tokens but the prompt has {}",
                    f.alignment.edit_len,
                    prompt.len()
                )));
            }
            Some(FusionProbe::new(f.store, f.alignment, *cfg, steps))
        }
        None => None,
    };
    let uncond = embed_prompt("", &weights.config);
    let mut z = z_t.clone();
    for t in (1..=steps).rev() {
        let ts = Timestep::of(sched, t);
        let mut step = || -> Result<LatentVideo> {
            let mut conditional = || {
                let p = probe.as_mut().map(|p| p as &mut dyn AttentionProbe);
                denoiser_forward(weights, &z, ts, prompt, p).map(|r| r.0)
            };
            let eps = if cfg.s_cfg.needs_unconditional() {
                // the two branches see distinct inputs and may run side by side
                let (cond, un) = rayon::join(conditional, || {
                    denoiser_forward(weights, &z, ts, &uncond, None).map(|r| r.0)
                });
                cfg_combine(&un?, &cond?, cfg.s_cfg)?
            } else {
                conditional()?
            };
            ddim_step(&z, &eps, t, sched)
        };
        z = step().map_err(|e| e.with_context(format!("denoise step {t}")))?;
    }
    Ok(z)
}

/// Result of inverting a source and sampling it back under an edit prompt.
pub struct EditOutcome {
    pub z_t: LatentVideo,
    pub store: AttentionStore,
    pub source: PromptEmbedding,
    pub edit: PromptEmbedding,
    pub alignment: PromptAlignment,
    pub latent: LatentVideo,
}

/// Inversion under `source_prompt` followed by a fused editing pass under
/// `edit_prompt`.
pub fn edit_video(
    z0: &LatentVideo,
    source_prompt: &str,
    edit_prompt: &str,
    sched: &NoiseSchedule,
    weights: &DenoiserWeights,
    cfg: &EditConfig,
) -> Result<EditOutcome> {
    let source = embed_prompt(source_prompt, &weights.config);
    let edit = embed_prompt(edit_prompt, &weights.config);
    let alignment = align_prompts(source.tokens(), edit.tokens());
    let (z_t, store) = invert_video(z0, &source, sched, weights)?;
    let latent = run_denoise(
        &z_t,
        &edit,
        sched,
        weights,
        Some(Fusion {
            store: &store,
            alignment: &alignment,
        }),
        cfg,
    )?;
    Ok(EditOutcome {
        z_t,
        store,
        source,
        edit,
        alignment,
        latent,
    })
}

/// Inversion followed by sampling with the source prompt, full fusion
/// windows and guidance 1.
pub fn reconstruct(
    z0: &LatentVideo,
    source_prompt: &str,
    sched: &NoiseSchedule,
    weights: &DenoiserWeights,
) -> Result<EditOutcome> {
    edit_video(
        z0,
        source_prompt,
        source_prompt,
        sched,
        weights,
        &EditConfig::reconstruction(),
    )
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mse: f64,
    /// Per-frame PSNR in dB against peak 255; `None` for a lossless frame.
    pub psnr: Vec<Option<f64>>,
    pub temporal_consistency: f64,
    pub config: BTreeMap<String, String>,
}

/// Compares an output video against its source.
///
/// The temporal score is the mean absolute difference between the
/// consecutive-frame deltas of the two videos; it is 0 whenever the output
/// moves exactly like the source.
pub fn compute_metrics(source: &PixelVideo, output: &PixelVideo) -> Result<MetricsReport> {
    let dims = |v: &PixelVideo| [v.frames, v.channels, v.height, v.width];
    if dims(source) != dims(output) {
        return Err(Error::Shape {
            op: "compute_metrics",
            left: dims(source).to_vec(),
            right: dims(output).to_vec(),
        });
    }
    let sq = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
    };
    let mse = sq(&source.data, &output.data) / source.data.len() as f64;
    let psnr = (0..source.frames)
        .map(|f| {
            let m = sq(source.frame(f), output.frame(f)) / source.frame_len() as f64;
            (m > 0.0).then(|| 10.0 * (255.0 * 255.0 / m).log10())
        })
        .collect();
    let mut dev = 0.0;
    let mut count = 0usize;
    for f in 1..source.frames {
        let (s0, s1) = (source.frame(f - 1), source.frame(f));
        let (o0, o1) = (output.frame(f - 1), output.frame(f));
        for i in 0..source.frame_len() {
            dev += ((o1[i] - o0[i]) - (s1[i] - s0[i])).abs();
            count += 1;
        }
    }
    let temporal_consistency = if count == 0 { 0.0 } else { dev / count as f64 };
    Ok(MetricsReport {
        mse,
        psnr,
        temporal_consistency,
        config: BTreeMap::new(),
    })
}
