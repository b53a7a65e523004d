//! Fusing inversion-time attention into the editing pass.
//!
//! Cross-attention: columns of tokens shared by the source and edit prompts
//! are taken from the stored inversion map; columns of newly introduced
//! words keep the editing map. Self-attention: a binary mask obtained by
//! thresholding the stored cross-attention of the replaced words selects
//! where the editing map survives; everywhere else the stored map is used.
//!
//! Both fusions run while the denoising step `t` (counting down from `T`)
//! is at or above their cut-off (`t_c · T` and `t_s · T`). A denoising step
//! `t → t−1` mirrors the inversion step `t−1 → t`, so it reads the maps the
//! store holds for timestep `t − 1`.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AttentionKey, AttentionKind, AttentionProbe, ProbeAction};
use crate::numerics::{maxnorm_frame, Tensor};
use crate::schedule::GuidanceScale;
use crate::store::AttentionStore;

pub const DEFAULT_EDIT_GUIDANCE: f64 = 7.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMode {
    Style,
    Attribute,
    Shape,
    Removal,
    Enhancement,
}

impl EditMode {
    pub const ALL: [EditMode; 5] = [
        EditMode::Style,
        EditMode::Attribute,
        EditMode::Shape,
        EditMode::Removal,
        EditMode::Enhancement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EditMode::Style => "style",
            EditMode::Attribute => "attribute",
            EditMode::Shape => "shape",
            EditMode::Removal => "removal",
            EditMode::Enhancement => "enhancement",
        }
    }
}

impl fmt::Display for EditMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EditMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EditMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown edit mode {s:?}; expected one of style, attribute, shape, removal, enhancement"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EditConfig {
    /// Self-attention blending runs for denoising steps `t >= t_s · T`.
    pub t_s: f64,
    /// Cross-attention fusion runs for denoising steps `t >= t_c · T`.
    pub t_c: f64,
    /// Blend-mask threshold; a pixel is set when its normalized score exceeds it.
    pub tau: f64,
    pub s_cfg: GuidanceScale,
    pub mode: EditMode,
}

impl EditConfig {
    pub fn new(t_s: f64, t_c: f64, tau: f64, s_cfg: GuidanceScale, mode: EditMode) -> Result<Self> {
        for (name, v) in [("t_s", t_s), ("t_c", t_c), ("tau", tau)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::contract(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(EditConfig {
            t_s,
            t_c,
            tau,
            s_cfg,
            mode,
        })
    }

    /// Full fusion windows, an empty blend mask and guidance 1: the settings
    /// under which editing with the source prompt reconstructs the source.
    pub fn reconstruction() -> Self {
        EditConfig {
            t_s: 0.0,
            t_c: 0.0,
            tau: 1.0,
            s_cfg: GuidanceScale::UNIT,
            mode: EditMode::Style,
        }
    }

    pub fn self_blend_active(&self, t: usize, steps: usize) -> bool {
        t as f64 >= self.t_s * steps as f64
    }

    pub fn cross_fusion_active(&self, t: usize, steps: usize) -> bool {
        t as f64 >= self.t_c * steps as f64
    }
}

/// Default hyperparameters per edit mode.
pub fn preset(mode: EditMode) -> EditConfig {
    let s_cfg = GuidanceScale::new(DEFAULT_EDIT_GUIDANCE).expect("positive constant");
    let (t_s, t_c, tau) = match mode {
        EditMode::Style | EditMode::Attribute | EditMode::Enhancement => (0.2, 0.3, 1.0),
        EditMode::Shape | EditMode::Removal => (0.5, 0.5, 0.3),
    };
    EditConfig {
        t_s,
        t_c,
        tau,
        s_cfg,
        mode,
    }
}

pub fn preset_by_name(name: &str) -> Result<EditConfig> {
    Ok(preset(name.parse()?))
}

// ---------------------------------------------------------------------------
// Prompt alignment
// ---------------------------------------------------------------------------

/// Token correspondence between a source and an edit prompt.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PromptAlignment {
    /// `(source index, edit index)`, increasing in both.
    pub pairs: Vec<(usize, usize)>,
    /// Edit-prompt tokens with no source counterpart.
    pub edited_positions: Vec<usize>,
    /// Source-prompt tokens with no edit counterpart.
    pub removed_positions: Vec<usize>,
    pub source_len: usize,
    pub edit_len: usize,
}

impl PromptAlignment {
    /// Every token matched to itself.
    pub fn identity(len: usize) -> Self {
        PromptAlignment {
            pairs: (0..len).map(|i| (i, i)).collect(),
            edited_positions: Vec::new(),
            removed_positions: Vec::new(),
            source_len: len,
            edit_len: len,
        }
    }

    /// True when every column on both sides is matched.
    pub fn is_bijective(&self) -> bool {
        self.edited_positions.is_empty() && self.removed_positions.is_empty()
    }
}

/// Longest-common-subsequence alignment over token strings. Ties prefer
/// skipping a source token before an edit token.
pub fn align_prompts(src: &[String], edit: &[String]) -> PromptAlignment {
    let (m, n) = (src.len(), edit.len());
    // lcs[i][j] = LCS length of src[i..] and edit[j..]
    let mut lcs = vec![vec![0usize; n + 1]; m + 1];
    for i in (0..m).rev() {
        for j in (0..n).rev() {
            lcs[i][j] = if src[i] == edit[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let mut out = PromptAlignment {
        source_len: m,
        edit_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (0, 0);
    while i < m && j < n {
        if src[i] == edit[j] {
            out.pairs.push((i, j));
            i += 1;
            j += 1;
        } else if lcs[i + 1][j] >= lcs[i][j + 1] {
            out.removed_positions.push(i);
            i += 1;
        } else {
            out.edited_positions.push(j);
            j += 1;
        }
    }
    out.removed_positions.extend(i..m);
    out.edited_positions.extend(j..n);
    out
}

// ---------------------------------------------------------------------------
// Fusion operators
// ---------------------------------------------------------------------------

/// Store timestep read by denoising step `t`.
pub fn source_step(t: usize) -> Result<usize> {
    t.checked_sub(1)
        .ok_or_else(|| Error::contract("denoising steps start at 1"))
}

fn dims4(map: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *map.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::contract(format!(
            "{what} must be rank 4, got {:?}",
            map.shape()
        ))),
    }
}

/// Cross-attention fusion at denoising step `t` of `steps`.
///
/// When active, each matched edit column is overwritten by its source
/// column from the stored map and rows are renormalized; a bijective
/// alignment is a pure column permutation and needs no renormalization.
pub fn fuse_cross(
    c_edit: &Tensor,
    store: &AttentionStore,
    alignment: &PromptAlignment,
    t: usize,
    layer: usize,
    cfg: &EditConfig,
    steps: usize,
) -> Result<Tensor> {
    if !cfg.cross_fusion_active(t, steps) {
        return Ok(c_edit.clone());
    }
    let src = &store
        .query(source_step(t)?, layer, AttentionKind::Cross)?
        .map;
    let [n, h, p, ke] = dims4(c_edit, "edit cross map")?;
    let [sn, sh, sp, ks] = dims4(src, "stored cross map")?;
    if (n, h, p) != (sn, sh, sp) {
        return Err(Error::Shape {
            op: "fuse_cross",
            left: c_edit.shape().to_vec(),
            right: src.shape().to_vec(),
        });
    }
    let bad_pair = alignment.pairs.iter().find(|&&(s, e)| s >= ks || e >= ke);
    let bad_edit = alignment.edited_positions.iter().find(|&&e| e >= ke);
    if bad_pair.is_some() || bad_edit.is_some() {
        return Err(Error::contract(format!(
            "alignment indices exceed token counts (source {ks}, edit {ke})"
        )));
    }
    let renormalize = !alignment.is_bijective();
    let mut out = c_edit.data().to_vec();
    for (row, src_row) in out.chunks_exact_mut(ke).zip(src.data().chunks_exact(ks)) {
        for &(s, e) in &alignment.pairs {
            row[e] = src_row[s];
        }
        if renormalize {
            let sum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    Tensor::new(c_edit.shape().to_vec(), out)
}

/// Per-frame binary mask over latent pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendMask {
    /// `frames × pixels`, entries 0 or 1.
    mask: Tensor,
    pub tau: f64,
    pub step: usize,
}

impl BlendMask {
    /// All-zero mask: stored self-attention everywhere.
    pub fn empty(frames: usize, pixels: usize, tau: f64, step: usize) -> Result<Self> {
        Ok(BlendMask {
            mask: Tensor::zeros(&[frames, pixels])?,
            tau,
            step,
        })
    }

    pub fn from_bits(frames: usize, pixels: usize, bits: &[bool], tau: f64, step: usize) -> Result<Self> {
        let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(BlendMask {
            mask: Tensor::new(vec![frames, pixels], data)?,
            tau,
            step,
        })
    }

    pub fn frames(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn pixels(&self) -> usize {
        self.mask.shape()[1]
    }

    pub fn is_set(&self, frame: usize, pixel: usize) -> bool {
        self.mask.data()[frame * self.pixels() + pixel] == 1.0
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        self.mask.outer(frame)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// Head-mean, word-summed score of the stored cross map at store timestep
/// `step`: `frames × pixels`.
pub fn word_scores(
    store: &AttentionStore,
    step: usize,
    layer: usize,
    word_positions: &[usize],
) -> Result<Tensor> {
    let map = &store.query(step, layer, AttentionKind::Cross)?.map;
    let [n, h, p, k] = dims4(map, "stored cross map")?;
    if let Some(&w) = word_positions.iter().find(|&&w| w >= k) {
        return Err(Error::contract(format!(
            "word position {w} out of range for {k} tokens"
        )));
    }
    let d = map.data();
    let mut agg = vec![0.0; n * p];
    for f in 0..n {
        for head in 0..h {
            for px in 0..p {
                let row = &d[((f * h + head) * p + px) * k..][..k];
                agg[f * p + px] += word_positions.iter().map(|&w| row[w]).sum::<f64>();
            }
        }
    }
    for v in agg.iter_mut() {
        *v /= h as f64;
    }
    Tensor::new(vec![n, p], agg)
}

/// Thresholds the max-normalized word scores: `M = 1` where the score
/// strictly exceeds `tau`.
pub fn build_blend_mask(
    store: &AttentionStore,
    step: usize,
    layer: usize,
    word_positions: &[usize],
    tau: f64,
) -> Result<BlendMask> {
    if word_positions.is_empty() {
        return Err(Error::contract("blend mask needs at least one word position"));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::contract(format!("tau must lie in [0, 1], got {tau}")));
    }
    let scores = maxnorm_frame(&word_scores(store, step, layer, word_positions)?)?;
    let (n, p) = (scores.shape()[0], scores.shape()[1]);
    let bits: Vec<bool> = scores.data().iter().map(|&v| v > tau).collect();
    BlendMask::from_bits(n, p, &bits, tau, step)
}

/// Self-attention blending at denoising step `t`: rows of query pixels
/// under the mask keep the editing map, the rest take the stored map.
pub fn blend_self(
    s_edit: &Tensor,
    store: &AttentionStore,
    t: usize,
    layer: usize,
    mask: &BlendMask,
    cfg: &EditConfig,
    steps: usize,
) -> Result<Tensor> {
    if !cfg.self_blend_active(t, steps) {
        return Ok(s_edit.clone());
    }
    let src = &store
        .query(source_step(t)?, layer, AttentionKind::SelfAttn)?
        .map;
    s_edit.expect_same_shape(src, "blend_self")?;
    let [n, h, p, k] = dims4(s_edit, "edit self map")?;
    if mask.frames() != n || mask.pixels() != p {
        return Err(Error::Shape {
            op: "blend_self",
            left: s_edit.shape().to_vec(),
            right: mask.tensor().shape().to_vec(),
        });
    }
    let mut out = src.data().to_vec();
    for f in 0..n {
        for head in 0..h {
            for px in 0..p {
                if mask.is_set(f, px) {
                    let at = ((f * h + head) * p + px) * k;
                    out[at..at + k].copy_from_slice(&s_edit.data()[at..at + k]);
                }
            }
        }
    }
    Tensor::new(s_edit.shape().to_vec(), out)
}

/// Probe applying both fusions to the conditional branch of an editing pass.
///
/// The blend mask covers the source words that the edit removes or
/// replaces; when there are none the mask is empty.
pub struct FusionProbe<'a> {
    store: &'a AttentionStore,
    alignment: &'a PromptAlignment,
    cfg: EditConfig,
    steps: usize,
    masks: Vec<BlendMask>,
}

impl<'a> FusionProbe<'a> {
    pub fn new(
        store: &'a AttentionStore,
        alignment: &'a PromptAlignment,
        cfg: EditConfig,
        steps: usize,
    ) -> Self {
        FusionProbe {
            store,
            alignment,
            cfg,
            steps,
            masks: Vec::new(),
        }
    }

    /// Masks built so far, one per (step, layer) at which blending ran.
    pub fn masks(&self) -> &[BlendMask] {
        &self.masks
    }

    fn mask_for(&self, t: usize, layer: usize, frames: usize, pixels: usize) -> Result<BlendMask> {
        let step = source_step(t)?;
        if self.alignment.removed_positions.is_empty() {
            return BlendMask::empty(frames, pixels, self.cfg.tau, step);
        }
        build_blend_mask(
            self.store,
            step,
            layer,
            &self.alignment.removed_positions,
            self.cfg.tau,
        )
    }
}

impl AttentionProbe for FusionProbe<'_> {
    fn intercept(&mut self, key: &AttentionKey, map: &Tensor) -> Result<ProbeAction> {
        let t = key.timestep;
        let fused = match key.kind {
            AttentionKind::Cross => {
                if !self.cfg.cross_fusion_active(t, self.steps) {
                    return Ok(ProbeAction::PassThrough);
                }
                fuse_cross(map, self.store, self.alignment, t, key.layer, &self.cfg, self.steps)
            }
            AttentionKind::SelfAttn => {
                if !self.cfg.self_blend_active(t, self.steps) {
                    return Ok(ProbeAction::PassThrough);
                }
                let [n, _, p, _] = dims4(map, "self map")?;
                let mask = self.mask_for(t, key.layer, n, p)?;
                let out = blend_self(map, self.store, t, key.layer, &mask, &self.cfg, self.steps);
                self.masks.push(mask);
                out
            }
        };
        fused
            .map(ProbeAction::Replace)
            .map_err(|e| e.with_context(key.to_string()))
    }
}
