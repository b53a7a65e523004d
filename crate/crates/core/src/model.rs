//! Toy attention denoiser `ε_θ(z_t, t, p)`.
//!
//! Every frame pixel is one token. A token starts as a projection of its
//! latent channels plus a 2D sinusoidal position code plus a timestep code,
//! then passes through `L` pre-norm blocks of
//!
//! 1. spatiotemporal self-attention: frame `i` queries keys and values built
//!    from `[middle frame; frame i]`, middle frame index `n / 2`;
//! 2. cross-attention to the prompt tokens;
//! 3. a pointwise MLP,
//!
//! each added back residually, and is finally projected to `c` channels.
//!
//! Every post-softmax map is offered to an [`AttentionProbe`] before it
//! multiplies the values. That hook is where inversion-time maps get fused
//! back in during editing.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::numerics::{
    concat_outer, fnv1a64, gaussian, layer_norm_in_place, matmul_into, softmax_in_place,
    SeededRng, Tensor,
};
use crate::schedule::NoiseSchedule;

/// Width of the sinusoidal position code appended to each token.
pub const POS_FEATURES: usize = 8;
/// Width of the sinusoidal timestep code.
pub const TIME_FEATURES: usize = 4;
/// Token prepended to every prompt; alone it forms the unconditional prompt.
pub const START_TOKEN: &str = "<start>";

/// Gain on the final projection. Keeps `ε` small and smooth enough that
/// inversion followed by sampling lands back near the source latent.
const OUTPUT_GAIN: f64 = 0.05;
/// Gain on the timestep code.
const TIME_GAIN: f64 = 0.1;
/// Tolerance on the row sums of maps the model computes itself.
const ROW_SUM_TOL: f64 = 1e-9;
/// Tolerance on the row sums of maps a probe substitutes.
const PROBE_ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub layers: usize,
    pub d_text: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 4,
            height: 16,
            width: 16,
            channels: 1,
            d_model: 8,
            heads: 1,
            d_head: 8,
            layers: 2,
            d_text: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("heads", self.heads),
            ("d_head", self.d_head),
            ("layers", self.layers),
            ("d_text", self.d_text),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("model config: {name} must be >= 1")));
        }
        if self.d_model != self.heads * self.d_head {
            return Err(Error::contract(format!(
                "model config: d_model ({}) must equal heads ({}) * d_head ({})",
                self.d_model, self.heads, self.d_head
            )));
        }
        Ok(())
    }

    /// Tokens per frame, `h·w`.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn middle_frame(&self) -> usize {
        self.frames / 2
    }

    /// 64-bit FNV-1a over a canonical rendering of every field.
    pub fn config_hash(&self) -> u64 {
        let canon = format!(
            "n={};h={};w={};c={};d_model={};heads={};d_head={};layers={};d_text={};seed={}",
            self.frames,
            self.height,
            self.width,
            self.channels,
            self.d_model,
            self.heads,
            self.d_head,
            self.layers,
            self.d_text,
            self.seed
        );
        fnv1a64(canon.as_bytes())
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        [self.frames, self.channels, self.height, self.width]
    }
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    tokens: Vec<String>,
    vectors: Tensor,
}

impl PromptEmbedding {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `tokens × d_text`.
    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn position(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }
}

/// Lowercases, splits on whitespace and splits every ASCII punctuation
/// character into its own token. The start token is not included.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Vector of one token: `d_text` standard normals from a generator seeded
/// with the FNV-1a hash of the token's UTF-8 bytes.
pub fn token_vector(token: &str, d_text: usize) -> Vec<f64> {
    let mut rng = SeededRng::new(fnv1a64(token.as_bytes()));
    (0..d_text).map(|_| rng.next_gaussian()).collect()
}

/// Embeds `text` as `[START_TOKEN, tokenize(text)...]`. Empty text yields the
/// unconditional embedding.
pub fn embed_prompt(text: &str, cfg: &ModelConfig) -> PromptEmbedding {
    let mut tokens = vec![START_TOKEN.to_string()];
    tokens.extend(tokenize(text));
    let data: Vec<f64> = tokens
        .iter()
        .flat_map(|t| token_vector(t, cfg.d_text))
        .collect();
    let vectors = Tensor::new(vec![tokens.len(), cfg.d_text], data)
        .expect("gaussian draws are finite");
    PromptEmbedding { tokens, vectors }
}

// ---------------------------------------------------------------------------
// Attention records and probes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum AttentionKind {
    /// Spatiotemporal self-attention; keys are `2·h·w` long.
    #[serde(rename = "self")]
    SelfAttn,
    /// Cross-attention to prompt tokens.
    #[serde(rename = "cross")]
    Cross,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::SelfAttn => "self",
            AttentionKind::Cross => "cross",
        })
    }
}

/// Where a map was produced: timestep index, block index and kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct AttentionKey {
    pub timestep: usize,
    pub layer: usize,
    pub kind: AttentionKind,
}

impl AttentionKey {
    pub fn new(timestep: usize, layer: usize, kind: AttentionKind) -> Self {
        AttentionKey {
            timestep,
            layer,
            kind,
        }
    }
}

impl fmt::Display for AttentionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(t={}, layer={}, {})", self.timestep, self.layer, self.kind)
    }
}

/// A post-softmax attention map, `frames × heads × (h·w) × keys`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub key: AttentionKey,
    pub map: Tensor,
}

pub enum ProbeAction {
    PassThrough,
    /// Use this map instead; it must match the offered shape and stay
    /// row-stochastic.
    Replace(Tensor),
}

/// Observes, and optionally replaces, each attention map before it is applied.
pub trait AttentionProbe {
    fn intercept(&mut self, key: &AttentionKey, map: &Tensor) -> Result<ProbeAction>;
}

impl<F> AttentionProbe for F
where
    F: FnMut(&AttentionKey, &Tensor) -> Result<ProbeAction>,
{
    fn intercept(&mut self, key: &AttentionKey, map: &Tensor) -> Result<ProbeAction> {
        self(key, map)
    }
}

/// Largest deviation of any last-axis row sum from 1.
pub fn max_row_sum_error(map: &Tensor) -> f64 {
    map.rows()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Projections of one block. Matrices act on row vectors: `y = x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub q_self: Tensor,
    pub k_self: Tensor,
    pub v_self: Tensor,
    pub o_self: Tensor,
    pub q_cross: Tensor,
    /// `d_text × d_model`.
    pub k_cross: Tensor,
    /// `d_text × d_model`.
    pub v_cross: Tensor,
    pub o_cross: Tensor,
    /// `d_model × 2·d_model`.
    pub mlp_in: Tensor,
    /// `2·d_model × d_model`.
    pub mlp_out: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights {
    pub config: ModelConfig,
    /// `(channels + POS_FEATURES) × d_model`.
    pub input: Tensor,
    /// `TIME_FEATURES × d_model`; projects the sinusoidal timestep code.
    pub time_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    /// `d_model × channels`.
    pub output: Tensor,
}

fn init_matrix(rng: &mut SeededRng, rows: usize, cols: usize, gain: f64) -> Tensor {
    let scale = gain / (rows as f64).sqrt();
    gaussian(rng, &[rows, cols])
        .and_then(|t| t.scale(scale))
        .expect("finite initialization")
}

impl DenoiserWeights {
    /// Random weights from `cfg.seed`, each matrix scaled by `1/√fan_in`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed);
        let d = cfg.d_model;
        let input = init_matrix(&mut rng, cfg.channels + POS_FEATURES, d, 1.0);
        let time_embed = init_matrix(&mut rng, TIME_FEATURES, d, TIME_GAIN);
        let blocks = (0..cfg.layers)
            .map(|_| BlockWeights {
                q_self: init_matrix(&mut rng, d, d, 1.0),
                k_self: init_matrix(&mut rng, d, d, 1.0),
                v_self: init_matrix(&mut rng, d, d, 1.0),
                o_self: init_matrix(&mut rng, d, d, 1.0),
                q_cross: init_matrix(&mut rng, d, d, 1.0),
                k_cross: init_matrix(&mut rng, cfg.d_text, d, 1.0),
                v_cross: init_matrix(&mut rng, cfg.d_text, d, 1.0),
                o_cross: init_matrix(&mut rng, d, d, 1.0),
                mlp_in: init_matrix(&mut rng, d, 2 * d, 1.0),
                mlp_out: init_matrix(&mut rng, 2 * d, d, 1.0),
            })
            .collect();
        let output = init_matrix(&mut rng, d, cfg.channels, OUTPUT_GAIN);
        Ok(DenoiserWeights {
            config: *cfg,
            input,
            time_embed,
            blocks,
            output,
        })
    }

    /// Checks every matrix against the config.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.blocks.len() != cfg.layers {
            return Err(Error::contract(format!(
                "weights carry {} blocks, config says {}",
                self.blocks.len(),
                cfg.layers
            )));
        }
        let d = cfg.d_model;
        let expect = |t: &Tensor, shape: [usize; 2], name: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::contract(format!(
                    "weight {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect(&self.input, [cfg.channels + POS_FEATURES, d], "input")?;
        expect(&self.time_embed, [TIME_FEATURES, d], "time_embed")?;
        expect(&self.output, [d, cfg.channels], "output")?;
        for b in &self.blocks {
            for (t, name) in [
                (&b.q_self, "q_self"),
                (&b.k_self, "k_self"),
                (&b.v_self, "v_self"),
                (&b.o_self, "o_self"),
                (&b.q_cross, "q_cross"),
                (&b.o_cross, "o_cross"),
            ] {
                expect(t, [d, d], name)?;
            }
            expect(&b.k_cross, [cfg.d_text, d], "k_cross")?;
            expect(&b.v_cross, [cfg.d_text, d], "v_cross")?;
            expect(&b.mlp_in, [d, 2 * d], "mlp_in")?;
            expect(&b.mlp_out, [2 * d, d], "mlp_out")?;
        }
        Ok(())
    }

    /// Every matrix with a stable name, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("input".to_string(), &self.input),
            ("time_embed".to_string(), &self.time_embed),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("q_self", &b.q_self),
                ("k_self", &b.k_self),
                ("v_self", &b.v_self),
                ("o_self", &b.o_self),
                ("q_cross", &b.q_cross),
                ("k_cross", &b.k_cross),
                ("v_cross", &b.v_cross),
                ("o_cross", &b.o_cross),
                ("mlp_in", &b.mlp_in),
                ("mlp_out", &b.mlp_out),
            ] {
                out.push((format!("block{l}.{name}"), t));
            }
        }
        out.push(("output".to_string(), &self.output));
        out
    }

    /// Rebuilds weights from the output of [`named_tensors`](Self::named_tensors).
    pub fn from_named_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |name: String| {
            map.remove(&name)
                .ok_or_else(|| Error::contract(format!("weights blob lacks tensor {name}")))
        };
        let input = take("input".into())?;
        let time_embed = take("time_embed".into())?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut get = |n: &str| take(format!("block{l}.{n}"));
            blocks.push(BlockWeights {
                q_self: get("q_self")?,
                k_self: get("k_self")?,
                v_self: get("v_self")?,
                o_self: get("o_self")?,
                q_cross: get("q_cross")?,
                k_cross: get("k_cross")?,
                v_cross: get("v_cross")?,
                o_cross: get("o_cross")?,
                mlp_in: get("mlp_in")?,
                mlp_out: get("mlp_out")?,
            });
        }
        let output = take("output".into())?;
        let w = DenoiserWeights {
            config,
            input,
            time_embed,
            blocks,
            output,
        };
        w.validate()?;
        Ok(w)
    }
}

// ---------------------------------------------------------------------------
// Attention kernels
// ---------------------------------------------------------------------------

fn heads_of(width: usize, d_head: usize) -> Result<usize> {
    if d_head == 0 || width % d_head != 0 {
        return Err(Error::contract(format!(
            "attention width {width} is not a multiple of d_head {d_head}"
        )));
    }
    Ok(width / d_head)
}

/// Writes `H × Lq × Lk` softmaxed scores into `map`.
fn scores_into(qd: &[f64], kd: &[f64], lq: usize, lk: usize, width: usize, d_head: usize, map: &mut [f64]) {
    let heads = width / d_head;
    let scale = 1.0 / (d_head as f64).sqrt();
    // per-head keys transposed to d_head × Lk so each score row is a sum of
    // contiguous axpys
    let mut kt = vec![0.0; d_head * lk];
    for h in 0..heads {
        let off = h * d_head;
        for j in 0..lk {
            for e in 0..d_head {
                kt[e * lk + j] = kd[j * width + off + e] * scale;
            }
        }
        for i in 0..lq {
            let qi = &qd[i * width + off..i * width + off + d_head];
            let row = &mut map[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            for (e, &qe) in qi.iter().enumerate() {
                for (slot, &kv) in row.iter_mut().zip(&kt[e * lk..(e + 1) * lk]) {
                    *slot += qe * kv;
                }
            }
            softmax_in_place(row);
        }
    }
}

/// Writes `map · v` per head into `out` (`Lq × width`).
fn apply_into(md: &[f64], vd: &[f64], lq: usize, lk: usize, width: usize, heads: usize, out: &mut [f64]) {
    let d_head = width / heads;
    // values transposed per head to d_head × Lk so every output element is a
    // contiguous dot product
    let mut vt = vec![0.0; d_head * lk];
    for h in 0..heads {
        let off = h * d_head;
        for j in 0..lk {
            for e in 0..d_head {
                vt[e * lk + j] = vd[j * width + off + e];
            }
        }
        for i in 0..lq {
            let row = &md[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            for e in 0..d_head {
                out[i * width + off + e] = dot(row, &vt[e * lk..(e + 1) * lk]);
            }
        }
    }
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        let (x, y): (&[f64; 4], &[f64; 4]) = (x.try_into().unwrap(), y.try_into().unwrap());
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `softmax(Q_h · K_hᵀ / √d_head)` for every head `h`.
///
/// `q` is `Lq × (H·d_head)`, `k` is `Lk × (H·d_head)`; the result is
/// `H × Lq × Lk`.
pub fn attention_map(q: &Tensor, k: &Tensor, d_head: usize) -> Result<Tensor> {
    let (lq, width) = match *q.shape() {
        [a, b] => (a, b),
        _ => return Err(Error::contract(format!("query must be a matrix, got {:?}", q.shape()))),
    };
    if k.rank() != 2 || k.shape()[1] != width {
        return Err(Error::Shape {
            op: "attention_map",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let lk = k.shape()[0];
    let heads = heads_of(width, d_head)?;
    let mut map = vec![0.0; heads * lq * lk];
    scores_into(q.data(), k.data(), lq, lk, width, d_head, &mut map);
    Tensor::new(vec![heads, lq, lk], map)
}

/// Applies an `H × Lq × Lk` map to `Lk × (H·d_head)` values, giving
/// `Lq × (H·d_head)` with heads concatenated.
pub fn apply_attention(map: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (heads, lq, lk) = match *map.shape() {
        [a, b, c] => (a, b, c),
        _ => return Err(Error::contract(format!("map must be rank 3, got {:?}", map.shape()))),
    };
    if v.rank() != 2 || v.shape()[0] != lk || v.shape()[1] % heads != 0 {
        return Err(Error::Shape {
            op: "apply_attention",
            left: map.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let width = v.shape()[1];
    let mut out = vec![0.0; lq * width];
    apply_into(map.data(), v.data(), lq, lk, width, heads, &mut out);
    Tensor::new(vec![lq, width], out)
}

/// Multi-head scaled dot-product attention; returns `(output, map)`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, d_head: usize) -> Result<(Tensor, Tensor)> {
    let map = attention_map(q, k, d_head)?;
    let out = apply_attention(&map, v)?;
    Ok((out, map))
}

fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    crate::numerics::matmul(x, w)
}

/// Keys and values of frame `i` under middle-frame inflation: `[rows(mid); rows(i)]`.
fn inflate(per_frame: &[Tensor], i: usize) -> Result<Tensor> {
    concat_outer(&per_frame[per_frame.len() / 2], &per_frame[i])
}

/// Scores of every frame's queries against its own keys, stacked to
/// `n × H × Lq × Lk`.
fn stacked_scores(queries: &[Tensor], keys: &[&Tensor], d_head: usize) -> Result<Tensor> {
    let (lq, width) = (queries[0].shape()[0], queries[0].shape()[1]);
    let lk = keys[0].shape()[0];
    let heads = heads_of(width, d_head)?;
    let per = heads * lq * lk;
    let mut buf = vec![0.0; queries.len() * per];
    buf.chunks_mut(per).enumerate().for_each(|(f, m)| {
        scores_into(queries[f].data(), keys[f].data(), lq, lk, width, d_head, m);
    });
    Tensor::new(vec![queries.len(), heads, lq, lk], buf)
}

/// Spatiotemporal self-attention maps for already-normalized frame features
/// (`n` tensors of `h·w × d_model`). Returns `n × H × hw × 2hw` plus the
/// projected values each frame attends over.
fn spatiotemporal_maps(
    frames: &[Tensor],
    block: &BlockWeights,
    d_head: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let projected: Vec<(Tensor, Tensor, Tensor)> = frames
        .iter()
        .map(|f| {
            Ok((
                linear(f, &block.q_self)?,
                linear(f, &block.k_self)?,
                linear(f, &block.v_self)?,
            ))
        })
        .collect::<Result<_>>()?;
    let (queries, keys, values): (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>) = projected.into_iter().fold(
        (Vec::new(), Vec::new(), Vec::new()),
        |(mut q, mut k, mut v), (a, b, c)| {
            q.push(a);
            k.push(b);
            v.push(c);
            (q, k, v)
        },
    );
    let inflated_keys = (0..frames.len())
        .map(|i| inflate(&keys, i))
        .collect::<Result<Vec<_>>>()?;
    let inflated_values = (0..frames.len())
        .map(|i| inflate(&values, i))
        .collect::<Result<Vec<_>>>()?;
    let key_refs: Vec<&Tensor> = inflated_keys.iter().collect();
    Ok((stacked_scores(&queries, &key_refs, d_head)?, inflated_values))
}

/// Cross-attention maps, `n × H × hw × tokens`, plus the projected token values.
fn cross_maps(
    frames: &[Tensor],
    prompt: &PromptEmbedding,
    block: &BlockWeights,
    d_head: usize,
) -> Result<(Tensor, Tensor)> {
    let keys = linear(prompt.vectors(), &block.k_cross)?;
    let values = linear(prompt.vectors(), &block.v_cross)?;
    let queries = frames
        .iter()
        .map(|f| linear(f, &block.q_cross))
        .collect::<Result<Vec<_>>>()?;
    let key_refs = vec![&keys; frames.len()];
    Ok((stacked_scores(&queries, &key_refs, d_head)?, values))
}

/// Applies frame `f` of a stacked map to `values[f]`, then the output projection.
fn apply_per_frame(map: &Tensor, values: &[&Tensor], out_proj: &Tensor) -> Result<Vec<Tensor>> {
    let [_, heads, lq, lk] = *map.shape() else {
        return Err(Error::contract(format!("stacked map must be rank 4, got {:?}", map.shape())));
    };
    (0..values.len())
        .into_iter()
        .map(|f| {
            let width = values[f].shape()[1];
            let mut out = vec![0.0; lq * width];
            apply_into(map.outer(f), values[f].data(), lq, lk, width, heads, &mut out);
            linear(&Tensor::new(vec![lq, width], out)?, out_proj)
        })
        .collect()
}

/// Inflated self-attention over un-normalized per-frame features (each
/// `h·w × d_model`), output projection included. Returns per-frame outputs
/// and the `n × H × hw × 2hw` map.
pub fn spatiotemporal_attend(
    frames: &[Tensor],
    block: &BlockWeights,
    d_head: usize,
) -> Result<(Vec<Tensor>, Tensor)> {
    if frames.is_empty() {
        return Err(Error::contract("spatiotemporal attention needs at least one frame"));
    }
    let (map, values) = spatiotemporal_maps(frames, block, d_head)?;
    let refs: Vec<&Tensor> = values.iter().collect();
    let out = apply_per_frame(&map, &refs, &block.o_self)?;
    Ok((out, map))
}

/// Ordinary self-attention within one frame, output projection included.
pub fn plain_self_attend(frame: &Tensor, block: &BlockWeights, d_head: usize) -> Result<Tensor> {
    let (out, _) = attend(
        &linear(frame, &block.q_self)?,
        &linear(frame, &block.k_self)?,
        &linear(frame, &block.v_self)?,
        d_head,
    )?;
    linear(&out, &block.o_self)
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Step index paired with its position on the unit time axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestep {
    pub index: usize,
    pub level: f64,
}

impl Timestep {
    pub fn of(sched: &NoiseSchedule, t: usize) -> Self {
        Timestep {
            index: t,
            level: sched.level(t),
        }
    }
}

fn position_code(y: usize, x: usize, h: usize, w: usize) -> [f64; POS_FEATURES] {
    let fy = (y as f64 + 0.5) / h as f64;
    let fx = (x as f64 + 0.5) / w as f64;
    let mut code = [0.0; POS_FEATURES];
    for (k, pair) in code.chunks_exact_mut(4).enumerate() {
        let freq = std::f64::consts::PI * (1 << k) as f64;
        pair[0] = (freq * fy).sin();
        pair[1] = (freq * fy).cos();
        pair[2] = (freq * fx).sin();
        pair[3] = (freq * fx).cos();
    }
    code
}

fn time_code(level: f64) -> [f64; TIME_FEATURES] {
    let mut code = [0.0; TIME_FEATURES];
    for (k, pair) in code.chunks_exact_mut(2).enumerate() {
        let freq = std::f64::consts::FRAC_PI_2 * (k + 1) as f64;
        pair[0] = (freq * level).sin();
        pair[1] = (freq * level).cos();
    }
    code
}

fn normalized(frames: &[Tensor]) -> Vec<Tensor> {
    frames
        .iter()
        .map(|f| {
            let mut data = f.data().to_vec();
            for row in data.chunks_exact_mut(f.last_dim()) {
                layer_norm_in_place(row);
            }
            Tensor::new(f.shape().to_vec(), data).expect("layer norm of finite rows is finite")
        })
        .collect()
}

fn add_into(frames: &mut [Tensor], deltas: Vec<Tensor>) -> Result<()> {
    for (f, d) in frames.iter_mut().zip(deltas) {
        *f = f.add(&d)?;
    }
    Ok(())
}

fn check_map(map: &Tensor, expect: [usize; 4], key: &AttentionKey, tol: f64) -> Result<()> {
    if map.shape() != expect {
        return Err(Error::contract(format!(
            "attention map {key} has shape {:?}, expected {expect:?}",
            map.shape()
        )));
    }
    let err = max_row_sum_error(map);
    if err > tol {
        return Err(Error::contract(format!(
            "attention map {key} rows deviate from 1 by {err:e}"
        )));
    }
    Ok(())
}

/// Offers `map` to the probe and returns whichever map should be applied.
fn offer(
    probe: &mut Option<&mut dyn AttentionProbe>,
    key: &AttentionKey,
    map: &Tensor,
    expect: [usize; 4],
) -> Result<Option<Tensor>> {
    check_map(map, expect, key, ROW_SUM_TOL)?;
    let Some(p) = probe.as_deref_mut() else {
        return Ok(None);
    };
    match p.intercept(key, map)? {
        ProbeAction::PassThrough => Ok(None),
        ProbeAction::Replace(new) => {
            check_map(&new, expect, key, PROBE_ROW_SUM_TOL)
                .map_err(|e| e.with_context("probe replacement"))?;
            Ok(Some(new))
        }
    }
}

/// Predicts the noise in `z_t`. Returns `ε̂` and every attention map the
/// model computed, in `(layer, self, cross)` order. Records hold the maps as
/// computed, before any probe replacement.
pub fn denoiser_forward(
    weights: &DenoiserWeights,
    z_t: &LatentVideo,
    t: Timestep,
    prompt: &PromptEmbedding,
    mut probe: Option<&mut dyn AttentionProbe>,
) -> Result<(LatentVideo, Vec<AttentionRecord>)> {
    let cfg = &weights.config;
    if z_t.shape() != cfg.latent_shape() {
        return Err(Error::Shape {
            op: "denoiser_forward",
            left: z_t.shape().to_vec(),
            right: cfg.latent_shape().to_vec(),
        });
    }
    if prompt.vectors().shape()[1] != cfg.d_text {
        return Err(Error::contract(format!(
            "prompt width {} does not match d_text {}",
            prompt.vectors().shape()[1],
            cfg.d_text
        )));
    }
    let (n, c, hw, d) = (cfg.frames, cfg.channels, cfg.pixels(), cfg.d_model);
    let d_in = c + POS_FEATURES;

    let tcode = time_code(t.level);
    let mut time_row = vec![0.0; d];
    matmul_into(&tcode, weights.time_embed.data(), &mut time_row, 1, TIME_FEATURES, d);

    let mut hidden: Vec<Tensor> = (0..n)
        .map(|f| {
            let frame = z_t.tensor().outer(f);
            let mut feats = vec![0.0; hw * d_in];
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let p = y * cfg.width + x;
                    let row = &mut feats[p * d_in..(p + 1) * d_in];
                    for ch in 0..c {
                        row[ch] = frame[ch * hw + p];
                    }
                    row[c..].copy_from_slice(&position_code(y, x, cfg.height, cfg.width));
                }
            }
            let mut out = time_row.repeat(hw);
            matmul_into(&feats, weights.input.data(), &mut out, hw, d_in, d);
            Tensor::new(vec![hw, d], out)
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(2 * cfg.layers);
    for (layer, block) in weights.blocks.iter().enumerate() {
        // spatiotemporal self-attention
        let key = AttentionKey::new(t.index, layer, AttentionKind::SelfAttn);
        let (map, values) = spatiotemporal_maps(&normalized(&hidden), block, cfg.d_head)?;
        let replaced = offer(&mut probe, &key, &map, [n, cfg.heads, hw, 2 * hw])?;
        let refs: Vec<&Tensor> = values.iter().collect();
        let deltas = apply_per_frame(replaced.as_ref().unwrap_or(&map), &refs, &block.o_self)?;
        add_into(&mut hidden, deltas)?;
        records.push(AttentionRecord { key, map });

        // cross-attention
        let key = AttentionKey::new(t.index, layer, AttentionKind::Cross);
        let (map, values) = cross_maps(&normalized(&hidden), prompt, block, cfg.d_head)?;
        let replaced = offer(&mut probe, &key, &map, [n, cfg.heads, hw, prompt.len()])?;
        let refs: Vec<&Tensor> = vec![&values; n];
        let deltas = apply_per_frame(replaced.as_ref().unwrap_or(&map), &refs, &block.o_cross)?;
        add_into(&mut hidden, deltas)?;
        records.push(AttentionRecord { key, map });

        // pointwise MLP
        let deltas = normalized(&hidden)
            .iter()
            .map(|f| {
                let inner = linear(f, &block.mlp_in)?.map(silu)?;
                linear(&inner, &block.mlp_out)
            })
            .collect::<Result<Vec<_>>>()?;
        add_into(&mut hidden, deltas)?;
    }

    let mut eps = vec![0.0; n * c * hw];
    for (f, h) in hidden.iter().enumerate() {
        let proj = linear(h, &weights.output)?;
        for p in 0..hw {
            for ch in 0..c {
                eps[(f * c + ch) * hw + p] = proj.data()[p * c + ch];
            }
        }
    }
    let eps = LatentVideo::new(Tensor::new(cfg.latent_shape().to_vec(), eps)?)?;
    Ok((eps, records))
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Oracle denoiser
// ---------------------------------------------------------------------------

/// One entry of the oracle's token→color table; colors are 8-bit RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct PaletteEntry {
    pub token: String,
    pub rgb: [u8; 3],
}

impl PaletteEntry {
    pub fn new(token: &str, rgb: [u8; 3]) -> Self {
        PaletteEntry {
            token: token.to_lowercase(),
            rgb,
        }
    }
}

/// Key sharpness of the oracle. With post-norm color queries of magnitude
/// about 2 per channel, a matching token out-scores a mismatched one by
/// roughly `4 · ORACLE_SHARPNESS`.
const ORACLE_SHARPNESS: f64 = 2.0;

/// A single-block denoiser with hand-built cross-attention: queries are the
/// normalized color channels of each pixel, keys are palette colors.
///
/// Each palette token is keyed to its color and the start token to black,
/// so colored pixels attend to the token naming their color and black
/// background pixels attend to the start token. Self-attention, values, the
/// MLP and the output projection are zero: the oracle predicts zero noise
/// and exists to produce attention maps with known ground truth.
pub fn make_oracle_denoiser(cfg: &ModelConfig, palette: &[PaletteEntry]) -> Result<DenoiserWeights> {
    if palette.is_empty() {
        return Err(Error::contract("oracle palette must not be empty"));
    }
    if cfg.channels != 3 {
        return Err(Error::contract(format!(
            "oracle denoiser reads RGB latents; config has {} channels",
            cfg.channels
        )));
    }
    let cfg = ModelConfig { layers: 1, ..*cfg };
    cfg.validate()?;
    if cfg.d_head < 3 {
        return Err(Error::contract("oracle denoiser needs d_head >= 3"));
    }
    let (d, dh) = (cfg.d_model, cfg.d_head);

    // Sorted so the construction does not depend on palette order.
    let mut entries: Vec<(String, [u8; 3])> = palette
        .iter()
        .filter(|e| e.token != START_TOKEN)
        .map(|e| (e.token.clone(), e.rgb))
        .collect();
    entries.sort();
    entries.dedup_by(|a, b| a.0 == b.0);
    entries.push((START_TOKEN.to_string(), [0, 0, 0]));
    let m = entries.len();
    if m > cfg.d_text {
        return Err(Error::contract(format!(
            "oracle palette of {m} tokens (with start) exceeds d_text {}",
            cfg.d_text
        )));
    }

    let mut input = Tensor::zeros(&[cfg.channels + POS_FEATURES, d])?.into_data();
    for ch in 0..3 {
        input[ch * d + ch] = 1.0;
    }
    let mut q_cross = Tensor::zeros(&[d, d])?.into_data();
    for h in 0..cfg.heads {
        for ch in 0..3 {
            q_cross[ch * d + h * dh + ch] = 1.0;
        }
    }

    // Desired keys, one row per token: color mapped to [-1, 1], repeated per head.
    let scale = ORACLE_SHARPNESS * (dh as f64).sqrt() / 3.0;
    let mut desired = vec![0.0; m * d];
    for (j, (_, rgb)) in entries.iter().enumerate() {
        for h in 0..cfg.heads {
            for ch in 0..3 {
                desired[j * d + h * dh + ch] = scale * (2.0 * rgb[ch] as f64 / 255.0 - 1.0);
            }
        }
    }
    // Minimum-norm K with E·K = desired, E the m × d_text token matrix:
    // K = Eᵀ (E Eᵀ)⁻¹ desired.
    let emb: Vec<Vec<f64>> = entries
        .iter()
        .map(|(tok, _)| token_vector(tok, cfg.d_text))
        .collect();
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            gram[i * m + j] = emb[i].iter().zip(&emb[j]).map(|(a, b)| a * b).sum();
        }
    }
    let coef = solve(gram, desired, m, d)?;
    let mut k_cross = vec![0.0; cfg.d_text * d];
    for (j, e) in emb.iter().enumerate() {
        for (r, &ev) in e.iter().enumerate() {
            for col in 0..d {
                k_cross[r * d + col] += ev * coef[j * d + col];
            }
        }
    }

    let zero = |r: usize, c: usize| Tensor::zeros(&[r, c]);
    let mut rng = SeededRng::new(cfg.seed);
    let block = BlockWeights {
        q_self: init_matrix(&mut rng, d, d, 1.0),
        k_self: init_matrix(&mut rng, d, d, 1.0),
        v_self: zero(d, d)?,
        o_self: zero(d, d)?,
        q_cross: Tensor::new(vec![d, d], q_cross)?,
        k_cross: Tensor::new(vec![cfg.d_text, d], k_cross)?,
        v_cross: zero(cfg.d_text, d)?,
        o_cross: zero(d, d)?,
        mlp_in: zero(d, 2 * d)?,
        mlp_out: zero(2 * d, d)?,
    };
    let weights = DenoiserWeights {
        config: cfg,
        input: Tensor::new(vec![cfg.channels + POS_FEATURES, d], input)?,
        time_embed: zero(TIME_FEATURES, d)?,
        blocks: vec![block],
        output: zero(d, cfg.channels)?,
    };
    weights.validate()?;
    Ok(weights)
}

/// Solves `A X = B` for square `A` (`m × m`) and `B` (`m × cols`) by
/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<f64>, mut b: Vec<f64>, m: usize, cols: usize) -> Result<Vec<f64>> {
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&i, &j| a[i * m + col].abs().total_cmp(&a[j * m + col].abs()))
            .expect("non-empty range");
        if a[pivot * m + col].abs() < 1e-12 {
            return Err(Error::contract("oracle palette embeddings are linearly dependent"));
        }
        if pivot != col {
            for k in 0..m {
                a.swap(col * m + k, pivot * m + k);
            }
            for k in 0..cols {
                b.swap(col * cols + k, pivot * cols + k);
            }
        }
        for r in col + 1..m {
            let f = a[r * m + col] / a[col * m + col];
            for k in col..m {
                a[r * m + k] -= f * a[col * m + k];
            }
            for k in 0..cols {
                b[r * cols + k] -= f * b[col * cols + k];
            }
        }
    }
    let mut x = vec![0.0; m * cols];
    for r in (0..m).rev() {
        for k in 0..cols {
            let mut s = b[r * cols + k];
            for j in r + 1..m {
                s -= a[r * m + j] * x[j * cols + k];
            }
            x[r * cols + k] = s / a[r * m + r];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            frames: 3,
            height: 2,
            width: 3,
            channels: 2,
            d_model: 8,
            heads: 2,
            d_head: 4,
            layers: 2,
            d_text: 6,
            seed: 5,
        }
    }

    fn random_latent(cfg: &ModelConfig, seed: u64) -> LatentVideo {
        LatentVideo::new(gaussian(&mut SeededRng::new(seed), &cfg.latent_shape()).unwrap()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        assert!(ModelConfig { d_model: 9, ..tiny() }.validate().is_err());
        assert!(ModelConfig { frames: 0, ..tiny() }.validate().is_err());
        assert_ne!(tiny().config_hash(), ModelConfig { seed: 6, ..tiny() }.config_hash());
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("A Cat, 8K"), vec!["a", "cat", ",", "8k"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn prompt_embedding_is_per_token() {
        let cfg = tiny();
        assert_eq!(embed_prompt("cat", &cfg), embed_prompt("cat", &cfg));
        let a = embed_prompt("a cat", &cfg);
        let b = embed_prompt("a tiger", &cfg);
        assert_eq!(a.vectors().data()[..2 * 6], b.vectors().data()[..2 * 6]);
        assert_ne!(a.vectors().data()[12..], b.vectors().data()[12..]);
        let empty = embed_prompt("", &cfg);
        assert_eq!(empty.tokens(), &[START_TOKEN.to_string()]);
        assert_eq!(empty.vectors().shape(), &[1, 6]);
    }

    #[test]
    fn attend_concentrates_on_matching_key() {
        // one query aligned with key 0 at a large scale
        let q = Tensor::new(vec![1, 2], vec![10.0, 0.0]).unwrap();
        let k = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
        let v = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (_, map) = attend(&q, &k, &v, 2).unwrap();
        // softmax([10/√2, 0, 0])
        let s = 10.0 / 2f64.sqrt();
        let want = s.exp() / (s.exp() + 2.0);
        assert!((map.data()[0] - want).abs() < 1e-12);
        assert!(map.data()[0] >= 0.99);
    }

    #[test]
    fn attend_zero_query_is_uniform() {
        let q = Tensor::zeros(&[2, 4]).unwrap();
        let k = gaussian(&mut SeededRng::new(1), &[5, 4]).unwrap();
        let (_, map) = attend(&q, &k, &k, 2).unwrap();
        assert_eq!(map.shape(), &[2, 2, 5]);
        assert!(map.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn attend_matches_elementwise_oracle() {
        let mut rng = SeededRng::new(3);
        let q = gaussian(&mut rng, &[3, 4]).unwrap();
        let k = gaussian(&mut rng, &[4, 4]).unwrap();
        let v = gaussian(&mut rng, &[4, 4]).unwrap();
        let (out, _) = attend(&q, &k, &v, 2).unwrap();
        for h in 0..2 {
            for i in 0..3 {
                let scores: Vec<f64> = (0..4)
                    .map(|j| {
                        (0..2)
                            .map(|e| q.data()[i * 4 + h * 2 + e] * k.data()[j * 4 + h * 2 + e])
                            .sum::<f64>()
                            / 2f64.sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for e in 0..2 {
                    let want: f64 = (0..4)
                        .map(|j| scores[j].exp() / z * v.data()[j * 4 + h * 2 + e])
                        .sum();
                    assert!((out.data()[i * 4 + h * 2 + e] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attend_rejects_mismatched_widths() {
        let q = Tensor::zeros(&[2, 4]).unwrap();
        let k = Tensor::zeros(&[3, 6]).unwrap();
        assert!(attend(&q, &k, &k, 2).is_err());
        assert!(attend(&q, &q, &q, 3).is_err());
    }

    #[test]
    fn single_frame_inflation_equals_plain_attention() {
        let cfg = ModelConfig { frames: 1, ..tiny() };
        let w = DenoiserWeights::init(&cfg).unwrap();
        let frame = gaussian(&mut SeededRng::new(2), &[cfg.pixels(), cfg.d_model]).unwrap();
        let (out, map) = spatiotemporal_attend(&[frame.clone()], &w.blocks[0], cfg.d_head).unwrap();
        let plain = plain_self_attend(&frame, &w.blocks[0], cfg.d_head).unwrap();
        assert!(out[0].max_abs_diff(&plain).unwrap() <= 1e-9);
        assert_eq!(map.shape(), &[1, cfg.heads, 6, 12]);
    }

    #[test]
    fn middle_frame_inflation_equals_plain_attention() {
        let cfg = ModelConfig { frames: 5, ..tiny() };
        let w = DenoiserWeights::init(&cfg).unwrap();
        let mut rng = SeededRng::new(4);
        let frames: Vec<Tensor> = (0..5)
            .map(|_| gaussian(&mut rng, &[cfg.pixels(), cfg.d_model]).unwrap())
            .collect();
        let (out, _) = spatiotemporal_attend(&frames, &w.blocks[0], cfg.d_head).unwrap();
        let plain = plain_self_attend(&frames[2], &w.blocks[0], cfg.d_head).unwrap();
        assert!(out[2].max_abs_diff(&plain).unwrap() <= 1e-9);
        let other = plain_self_attend(&frames[0], &w.blocks[0], cfg.d_head).unwrap();
        assert!(out[0].max_abs_diff(&other).unwrap() > 1e-6);
    }

    #[test]
    fn eight_frame_self_map_shape() {
        let cfg = ModelConfig {
            frames: 8,
            ..tiny()
        };
        let w = DenoiserWeights::init(&cfg).unwrap();
        let p = embed_prompt("a cat", &cfg);
        let (_, recs) =
            denoiser_forward(&w, &random_latent(&cfg, 1), Timestep { index: 0, level: 0.0 }, &p, None)
                .unwrap();
        assert_eq!(recs[0].key.kind, AttentionKind::SelfAttn);
        assert_eq!(recs[0].map.shape(), &[8, cfg.heads, 6, 12]);
        assert_eq!(recs[1].map.shape(), &[8, cfg.heads, 6, 3]);
    }

    #[test]
    fn forward_is_deterministic_and_identity_probe_is_transparent() {
        let cfg = tiny();
        let w = DenoiserWeights::init(&cfg).unwrap();
        let z = random_latent(&cfg, 9);
        let p = embed_prompt("a red cat", &cfg);
        let ts = Timestep { index: 3, level: 0.3 };
        let (a, ra) = denoiser_forward(&w, &z, ts, &p, None).unwrap();
        let (b, _) = denoiser_forward(&w, &z, ts, &p, None).unwrap();
        assert_eq!(a, b);

        let mut seen = Vec::new();
        let mut probe = |k: &AttentionKey, _: &Tensor| {
            seen.push(*k);
            Ok(ProbeAction::PassThrough)
        };
        let (c, _) = denoiser_forward(&w, &z, ts, &p, Some(&mut probe)).unwrap();
        assert!(c.tensor().max_abs_diff(a.tensor()).unwrap() <= 1e-12);
        let order: Vec<(usize, AttentionKind)> = seen.iter().map(|k| (k.layer, k.kind)).collect();
        assert_eq!(
            order,
            vec![
                (0, AttentionKind::SelfAttn),
                (0, AttentionKind::Cross),
                (1, AttentionKind::SelfAttn),
                (1, AttentionKind::Cross)
            ]
        );
        assert!(ra.iter().all(|r| r.key.timestep == 3));
    }

    #[test]
    fn replaying_recorded_maps_reproduces_output() {
        let cfg = tiny();
        let w = DenoiserWeights::init(&cfg).unwrap();
        let z = random_latent(&cfg, 10);
        let p = embed_prompt("a dog", &cfg);
        let ts = Timestep { index: 1, level: 0.1 };
        let (eps, recs) = denoiser_forward(&w, &z, ts, &p, None).unwrap();
        let mut replay = |k: &AttentionKey, _: &Tensor| {
            let rec = recs.iter().find(|r| r.key == *k).unwrap();
            Ok(ProbeAction::Replace(rec.map.clone()))
        };
        let (again, _) = denoiser_forward(&w, &z, ts, &p, Some(&mut replay)).unwrap();
        assert_eq!(eps, again);
    }

    #[test]
    fn probe_wrong_shape_is_rejected() {
        let cfg = tiny();
        let w = DenoiserWeights::init(&cfg).unwrap();
        let p = embed_prompt("x", &cfg);
        let mut bad = |_: &AttentionKey, m: &Tensor| {
            Ok(ProbeAction::Replace(Tensor::full(&[1, 1, 1, m.last_dim()], 1.0 / m.last_dim() as f64)?))
        };
        let err = denoiser_forward(
            &w,
            &random_latent(&cfg, 1),
            Timestep { index: 0, level: 0.0 },
            &p,
            Some(&mut bad),
        )
        .unwrap_err();
        assert!(matches!(err.root(), Error::Contract(_)), "{err}");

        let mut unnormalized = |_: &AttentionKey, m: &Tensor| Ok(ProbeAction::Replace(m.scale(2.0)?));
        assert!(denoiser_forward(
            &w,
            &random_latent(&cfg, 1),
            Timestep { index: 0, level: 0.0 },
            &p,
            Some(&mut unnormalized),
        )
        .is_err());
    }

    #[test]
    fn forward_rejects_wrong_latent_shape() {
        let cfg = tiny();
        let w = DenoiserWeights::init(&cfg).unwrap();
        let z = LatentVideo::zeros(1, 1, 1, 1).unwrap();
        let p = embed_prompt("x", &cfg);
        assert!(denoiser_forward(&w, &z, Timestep { index: 0, level: 0.0 }, &p, None).is_err());
    }

    fn oracle_cfg() -> ModelConfig {
        ModelConfig {
            frames: 1,
            height: 4,
            width: 4,
            channels: 3,
            d_model: 16,
            heads: 2,
            d_head: 8,
            layers: 1,
            d_text: 64,
            seed: 1,
        }
    }

    fn palette() -> Vec<PaletteEntry> {
        vec![
            PaletteEntry::new("red", [255, 0, 0]),
            PaletteEntry::new("green", [0, 255, 0]),
            PaletteEntry::new("blue", [0, 0, 255]),
            PaletteEntry::new("black", [0, 0, 0]),
        ]
    }

    /// Left half red, right half black, in encoded [-1, 1] units.
    fn half_red(cfg: &ModelConfig) -> LatentVideo {
        let hw = cfg.pixels();
        let data: Vec<f64> = (0..3 * hw)
            .map(|i| {
                let (ch, p) = (i / hw, i % hw);
                let red_pixel = p % cfg.width < cfg.width / 2;
                if red_pixel && ch == 0 { 1.0 } else { -1.0 }
            })
            .collect();
        LatentVideo::new(Tensor::new(cfg.latent_shape().to_vec(), data).unwrap()).unwrap()
    }

    fn cross_map_for(w: &DenoiserWeights, prompt: &str) -> (Tensor, PromptEmbedding) {
        let cfg = w.config;
        let p = embed_prompt(prompt, &cfg);
        let (_, recs) =
            denoiser_forward(w, &half_red(&cfg), Timestep { index: 0, level: 0.0 }, &p, None).unwrap();
        (recs[1].map.clone(), p)
    }

    #[test]
    fn oracle_attends_from_color_to_its_token() {
        let w = make_oracle_denoiser(&oracle_cfg(), &palette()).unwrap();
        let (map, p) = cross_map_for(&w, "red square");
        let red = p.position("red").unwrap();
        let k = p.len();
        for h in 0..2 {
            for px in 0..16 {
                let v = map.data()[(h * 16 + px) * k + red];
                if px % 4 < 2 {
                    assert!(v >= 0.9, "red pixel {px} head {h}: {v}");
                } else {
                    assert!(v < 0.1, "background pixel {px} head {h}: {v}");
                }
            }
        }
    }

    #[test]
    fn oracle_ignores_palette_order() {
        let a = make_oracle_denoiser(&oracle_cfg(), &palette()).unwrap();
        let mut reversed = palette();
        reversed.reverse();
        let b = make_oracle_denoiser(&oracle_cfg(), &reversed).unwrap();
        assert_eq!(cross_map_for(&a, "red square").0, cross_map_for(&b, "red square").0);
        assert!(make_oracle_denoiser(&oracle_cfg(), &[]).is_err());
    }

    #[test]
    fn gaussian_elimination_solves_small_system() {
        let x = solve(vec![2.0, 1.0, 1.0, 3.0], vec![3.0, 5.0], 2, 1).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
    }
}
