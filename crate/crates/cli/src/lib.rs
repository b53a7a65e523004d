//! Config parsing and subcommand orchestration for the `attnfuse` binary.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use attnfuse::fusion::{build_blend_mask, preset, word_scores, EditConfig, EditMode};
use attnfuse::io::{self, heatmap, mask_image, write_blob, write_frames};
use attnfuse::model::{embed_prompt, make_oracle_denoiser, DenoiserWeights, ModelConfig, PaletteEntry};
use attnfuse::pipeline::{
    compute_metrics, decode, edit_video, encode, invert_video, synth_video, EditOutcome, ObjectShape,
    PixelVideo, VideoSpec, COLORS,
};
use attnfuse::schedule::{
    GuidanceScale, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS, DEFAULT_TRAIN_STEPS,
};
use attnfuse::store::AttentionStore;
use attnfuse::{SeededRng, Tensor};
use thiserror::Error;

/// Reference for the config file, shown by `--help`.
pub const CONFIG_REFERENCE: &str = "\
CONFIG FILE
  Plain `key = value` lines; `#` starts a comment; values may be quoted.
  Keys before any section header are top-level.

  (top level)
    source_prompt     required
    edit_prompt       default: same as source_prompt
    seed              default: 0        (overridden by --seed)
    out               default: out      (overridden by --out)
  [model]
    frames 4, height 16, width 16, channels 1, d_model 8, heads 1,
    d_head 8, layers 2, d_text 16
    denoiser          random | oracle   default: random (oracle needs channels = 3)
  [schedule]
    steps 50, train_steps 1000, beta_start 0.00085, beta_end 0.012
  [edit]
    preset            style | attribute | shape | removal | enhancement   default: style
    t_s, t_c, tau     override the preset; each in [0, 1]
    s_cfg             guidance scale, default 7.5
  [video]
    input             directory of .ppm/.pgm frames; replaces the synthetic source
    shape square, size 4, object_color red, background_color black,
    start_x 2, start_y 2, velocity_x 1, velocity_y 0, noise_std 0
";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] attnfuse::Error),
}

impl CliError {
    /// 1 for contract violations, 2 for I/O, 3 for configuration problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigLine { .. } | CliError::Config(_) => 3,
            CliError::Engine(e) if e.is_io() => 2,
            CliError::Engine(_) => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenoiserKind {
    Random,
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VideoSource {
    Synthetic(VideoSpec),
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub denoiser: DenoiserKind,
    pub steps: usize,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub edit: EditConfig,
    pub source_prompt: String,
    pub edit_prompt: String,
    pub video: VideoSource,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self
    }

    pub fn with_out(mut self, out: PathBuf) -> Self {
        self.out = out;
        self
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::strided(
            self.steps,
            self.train_steps,
            self.beta_start,
            self.beta_end,
        )?)
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

const SECTIONS: [(&str, &[&str]); 5] = [
    ("", &["source_prompt", "edit_prompt", "seed", "out"]),
    (
        "model",
        &[
            "frames", "height", "width", "channels", "d_model", "heads", "d_head", "layers", "d_text", "denoiser",
        ],
    ),
    ("schedule", &["steps", "train_steps", "beta_start", "beta_end"]),
    ("edit", &["preset", "t_s", "t_c", "tau", "s_cfg"]),
    (
        "video",
        &[
            "input",
            "shape",
            "size",
            "object_color",
            "background_color",
            "start_x",
            "start_y",
            "velocity_x",
            "velocity_y",
            "noise_std",
        ],
    ),
];

struct Entries {
    map: HashMap<(String, String), (String, usize)>,
    last_line: usize,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        let mut section = String::new();
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            last_line = line;
            let content = match raw.find('#') {
                Some(at) if !in_quotes(raw, at) => &raw[..at],
                _ => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err_at(line, format!("malformed section header {content:?}")))?
                    .trim();
                if !SECTIONS.iter().any(|(s, _)| *s == name) || name.is_empty() {
                    return Err(err_at(line, format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err_at(line, format!("expected `key = value`, got {content:?}")))?;
            let key = key.trim();
            let known = SECTIONS
                .iter()
                .find(|(s, _)| *s == section)
                .is_some_and(|(_, keys)| keys.contains(&key));
            if !known {
                let place = if section.is_empty() {
                    "at top level".to_string()
                } else {
                    format!("in [{section}]")
                };
                return Err(err_at(line, format!("unknown key `{key}` {place}")));
            }
            let value = unquote(value.trim());
            if map
                .insert((section.clone(), key.to_string()), (value, line))
                .is_some()
            {
                return Err(err_at(line, format!("duplicate key `{key}`")));
            }
        }
        Ok(Entries { map, last_line })
    }

    fn raw(&self, section: &str, key: &str) -> Option<&(String, usize)> {
        self.map.get(&(section.to_string(), key.to_string()))
    }

    fn get<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.raw(section, key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|_| err_at(*line, format!("invalid value {v:?} for `{key}`"))),
        }
    }

    fn fraction(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.get("edit", key, default)?;
        if !(0.0..=1.0).contains(&v) {
            let line = self.raw("edit", key).map_or(self.last_line, |r| r.1);
            return Err(err_at(line, format!("`{key}` must lie in [0, 1], got {v}")));
        }
        Ok(v)
    }
}

fn in_quotes(s: &str, at: usize) -> bool {
    s[..at].matches('"').count() % 2 == 1
}

fn unquote(v: &str) -> String {
    v.strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .unwrap_or(v)
        .to_string()
}

fn err_at(line: usize, msg: impl Into<String>) -> CliError {
    CliError::ConfigLine {
        line,
        msg: msg.into(),
    }
}

/// Parses config text. Relative `[video] input` paths resolve against `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig> {
    let e = Entries::parse(text)?;
    let seed: u64 = e.get("", "seed", 0)?;
    let source_prompt = match e.raw("", "source_prompt") {
        Some((v, _)) => v.clone(),
        None => {
            return Err(err_at(
                e.last_line,
                "missing required key `source_prompt` (reached end of file)",
            ))
        }
    };
    let edit_prompt = e
        .raw("", "edit_prompt")
        .map_or_else(|| source_prompt.clone(), |r| r.0.clone());
    let out = PathBuf::from(e.get::<String>("", "out", "out".into())?);

    let d = ModelConfig::default();
    let model = ModelConfig {
        frames: e.get("model", "frames", d.frames)?,
        height: e.get("model", "height", d.height)?,
        width: e.get("model", "width", d.width)?,
        channels: e.get("model", "channels", d.channels)?,
        d_model: e.get("model", "d_model", d.d_model)?,
        heads: e.get("model", "heads", d.heads)?,
        d_head: e.get("model", "d_head", d.d_head)?,
        layers: e.get("model", "layers", d.layers)?,
        d_text: e.get("model", "d_text", d.d_text)?,
        seed,
    };
    model
        .validate()
        .map_err(|err| CliError::Config(err.to_string()))?;
    let denoiser = match e.get::<String>("model", "denoiser", "random".into())?.as_str() {
        "random" => DenoiserKind::Random,
        "oracle" => DenoiserKind::Oracle,
        other => {
            let line = e.raw("model", "denoiser").map_or(0, |r| r.1);
            return Err(err_at(line, format!("denoiser must be random or oracle, got {other:?}")));
        }
    };

    let mode_name: String = e.get("edit", "preset", "style".into())?;
    let mode: EditMode = mode_name.parse().map_err(|err: attnfuse::Error| {
        let line = e.raw("edit", "preset").map_or(e.last_line, |r| r.1);
        err_at(line, err.to_string())
    })?;
    let base_cfg = preset(mode);
    let s_cfg_value = e.get("edit", "s_cfg", base_cfg.s_cfg.value())?;
    let s_cfg = GuidanceScale::new(s_cfg_value).map_err(|err| {
        let line = e.raw("edit", "s_cfg").map_or(e.last_line, |r| r.1);
        err_at(line, err.to_string())
    })?;
    let edit = EditConfig::new(
        e.fraction("t_s", base_cfg.t_s)?,
        e.fraction("t_c", base_cfg.t_c)?,
        e.fraction("tau", base_cfg.tau)?,
        s_cfg,
        mode,
    )?;

    let video = match e.raw("video", "input") {
        Some((dir, line)) => {
            let path = base.join(dir);
            if !path.is_dir() {
                return Err(err_at(*line, format!("input directory {} does not exist", path.display())));
            }
            VideoSource::Directory(path)
        }
        None => {
            let size: usize = e.get("video", "size", 4)?;
            let shape = match e.get::<String>("video", "shape", "square".into())?.as_str() {
                "square" => ObjectShape::Square { side: size },
                "disc" => ObjectShape::Disc { radius: size },
                other => {
                    let line = e.raw("video", "shape").map_or(0, |r| r.1);
                    return Err(err_at(line, format!("shape must be square or disc, got {other:?}")));
                }
            };
            let mut spec = VideoSpec::moving(
                model.frames,
                model.height,
                model.width,
                model.channels,
                shape,
                &e.get::<String>("video", "object_color", "red".into())?,
                &e.get::<String>("video", "background_color", "black".into())?,
                (e.get("video", "start_x", 2)?, e.get("video", "start_y", 2)?),
                (e.get("video", "velocity_x", 1)?, e.get("video", "velocity_y", 0)?),
            );
            spec.noise_std = e.get("video", "noise_std", 0.0)?;
            VideoSource::Synthetic(spec)
        }
    };

    Ok(RunConfig {
        model,
        denoiser,
        steps: e.get("schedule", "steps", DEFAULT_STEPS)?,
        train_steps: e.get("schedule", "train_steps", DEFAULT_TRAIN_STEPS)?,
        beta_start: e.get("schedule", "beta_start", DEFAULT_BETA_START)?,
        beta_end: e.get("schedule", "beta_end", DEFAULT_BETA_END)?,
        edit,
        source_prompt,
        edit_prompt,
        video,
        seed,
        out,
    })
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        CliError::Engine(attnfuse::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    parse_config_str(&text, path.parent().unwrap_or(Path::new(".")))
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Invert,
    Edit,
    Reconstruct,
}

/// What a subcommand produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub written: Vec<PathBuf>,
    pub mse: Option<f64>,
}

pub fn build_weights(cfg: &RunConfig) -> Result<DenoiserWeights> {
    Ok(match cfg.denoiser {
        DenoiserKind::Random => DenoiserWeights::init(&cfg.model)?,
        DenoiserKind::Oracle => {
            let palette: Vec<PaletteEntry> = COLORS
                .iter()
                .filter(|(name, _)| *name != "black")
                .map(|(name, rgb)| PaletteEntry::new(name, *rgb))
                .collect();
            make_oracle_denoiser(&cfg.model, &palette)?
        }
    })
}

pub fn load_source(cfg: &RunConfig) -> Result<PixelVideo> {
    let video = match &cfg.video {
        VideoSource::Synthetic(spec) => synth_video(spec, &mut SeededRng::new(cfg.seed))?.0,
        VideoSource::Directory(dir) => io::read_frames(dir)?,
    };
    let m = &cfg.model;
    let got = [video.frames, video.channels, video.height, video.width];
    if got != m.latent_shape() {
        return Err(CliError::Config(format!(
            "source video is {got:?} but the model expects {:?}",
            m.latent_shape()
        )));
    }
    Ok(video)
}

/// Writes a 2-D map as a max-normalized 8-bit PGM.
pub fn write_heatmap(map: &Tensor, path: &Path) -> Result<()> {
    let [h, w] = *map.shape() else {
        return Err(CliError::Engine(attnfuse::Error::Contract(format!(
            "heatmap needs a 2-D map, got {:?}",
            map.shape()
        ))));
    };
    heatmap(map.data(), w, h)?.write(path)?;
    Ok(())
}

fn sanitize(token: &str) -> String {
    token
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn write_masks(dir: &Path, store: &AttentionStore, outcome: &EditOutcome, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let m = &cfg.model;
    // same words and threshold the editing pass blends with, read at the
    // least noisy stored step
    let words = &outcome.alignment.removed_positions;
    let layer = m.layers - 1;
    let bits: Vec<bool> = if words.is_empty() {
        vec![false; m.frames * m.pixels()]
    } else {
        let mask = build_blend_mask(store, 0, layer, words, cfg.edit.tau)?;
        (0..m.frames)
            .flat_map(|f| (0..m.pixels()).map(move |p| (f, p)))
            .map(|(f, p)| mask.is_set(f, p))
            .collect()
    };
    let mut written = Vec::new();
    for (f, frame) in bits.chunks_exact(m.pixels()).enumerate() {
        let path = dir.join(format!("{f:04}.pgm"));
        mask_image(frame, m.width, m.height)?.write(&path)?;
        written.push(path);
    }
    Ok(written)
}

fn write_heatmaps(dir: &Path, store: &AttentionStore, outcome: &EditOutcome, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let m = &cfg.model;
    let mut written = Vec::new();
    for (pos, token) in outcome.source.tokens().iter().enumerate().skip(1) {
        let scores = word_scores(store, 0, m.layers - 1, &[pos])?;
        let sub = dir.join(format!("{pos:02}_{}", sanitize(token)));
        for f in 0..m.frames {
            let map = Tensor::new(vec![m.height, m.width], scores.outer(f).to_vec())?;
            let path = sub.join(format!("{f:04}.pgm"));
            write_heatmap(&map, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn config_echo(cfg: &RunConfig, command: Command, edit_prompt: &str) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("command", format!("{command:?}").to_lowercase());
    put("source_prompt", cfg.source_prompt.clone());
    put("edit_prompt", edit_prompt.to_string());
    put("mode", cfg.edit.mode.to_string());
    put("t_s", cfg.edit.t_s.to_string());
    put("t_c", cfg.edit.t_c.to_string());
    put("tau", cfg.edit.tau.to_string());
    put("s_cfg", cfg.edit.s_cfg.value().to_string());
    put("steps", cfg.steps.to_string());
    put("seed", cfg.seed.to_string());
    put("model_hash", format!("{:016x}", cfg.model.config_hash()));
    m
}

/// Runs `command`, writing its artifacts under `cfg.out`.
pub fn run(command: Command, cfg: &RunConfig) -> Result<Summary> {
    let sched = cfg.schedule()?;
    let weights = build_weights(cfg)?;
    let source = load_source(cfg)?;
    let z0 = encode(&source)?;
    let out = &cfg.out;

    if command == Command::Invert {
        let prompt = embed_prompt(&cfg.source_prompt, &cfg.model);
        let (z_t, store) = invert_video(&z0, &prompt, &sched, &weights)?;
        let mut written = io::dump_store(&out.join("store"), &store)?;
        let latent = out.join("latent_T.bin");
        write_blob(&latent, cfg.model.config_hash(), &[("z_T".to_string(), z_t.tensor())])?;
        let weights_path = out.join("weights.bin");
        io::save_weights(&weights_path, &weights)?;
        written.extend([latent, weights_path]);
        return Ok(Summary { written, mse: None });
    }

    let edit_prompt = match command {
        Command::Reconstruct => cfg.source_prompt.as_str(),
        _ => cfg.edit_prompt.as_str(),
    };
    let outcome = edit_video(&z0, &cfg.source_prompt, edit_prompt, &sched, &weights, &cfg.edit)?;
    let result = decode(&outcome.latent)?.quantized();
    let mut written = write_frames(&out.join("frames"), &result)?;
    written.extend(write_masks(&out.join("masks"), &outcome.store, &outcome, cfg)?);
    written.extend(write_heatmaps(&out.join("heatmaps"), &outcome.store, &outcome, cfg)?);

    let mut metrics = compute_metrics(&source, &result)?;
    metrics.config = config_echo(cfg, command, edit_prompt);
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    let path = out.join("metrics.json");
    fs::create_dir_all(out).map_err(|e| attnfuse::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    fs::write(&path, json + "\n").map_err(|e| attnfuse::Error::Io {
        path: path.clone(),
        source: e,
    })?;
    written.push(path);
    Ok(Summary {
        written,
        mse: Some(metrics.mse),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_config_str(text, Path::new("."))
    }

    #[test]
    fn tau_override_in_edit_section() {
        let cfg = parse("source_prompt = a cat\n[edit]\npreset = shape\ntau = 0.3\n").unwrap();
        assert_eq!(cfg.edit.tau, 0.3);
        assert_eq!(cfg.edit.mode, EditMode::Shape);
    }

    #[test]
    fn missing_edit_section_loads_style_preset() {
        let cfg = parse("source_prompt = \"a cat\"  # quoted\n").unwrap();
        assert_eq!(cfg.edit, preset(EditMode::Style));
        assert_eq!(cfg.source_prompt, "a cat");
        assert_eq!(cfg.edit_prompt, "a cat");
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn out_of_range_tau_reports_its_line() {
        let err = parse("source_prompt = a\n[edit]\ntau = 1.5\n").unwrap_err();
        assert!(matches!(err, CliError::ConfigLine { line: 3, .. }), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn rejects_unknown_malformed_and_missing() {
        let e = parse("source_prompt = a\n[model]\nwidth = 4\nflavor = x\n").unwrap_err();
        assert!(matches!(e, CliError::ConfigLine { line: 4, .. }), "{e}");
        let e = parse("source_prompt = a\njust words\n").unwrap_err();
        assert!(matches!(e, CliError::ConfigLine { line: 2, .. }), "{e}");
        let e = parse("# nothing\n[edit]\npreset = style\n").unwrap_err();
        assert!(e.to_string().contains("source_prompt"), "{e}");
        let e = parse("source_prompt = a\n[edit]\npreset = cubist\n").unwrap_err();
        assert!(matches!(e, CliError::ConfigLine { line: 3, .. }), "{e}");
        let e = parse("source_prompt = a\n[model]\nheads = two\n").unwrap_err();
        assert!(matches!(e, CliError::ConfigLine { line: 3, .. }), "{e}");
        let e = parse("source_prompt = a\nseed = 1\nseed = 2\n").unwrap_err();
        assert!(matches!(e, CliError::ConfigLine { line: 3, .. }), "{e}");
    }

    #[test]
    fn missing_input_directory_is_rejected_at_parse_time() {
        let e = parse("source_prompt = a\n[video]\ninput = /definitely/not/here\n").unwrap_err();
        assert!(matches!(e, CliError::ConfigLine { line: 3, .. }), "{e}");
    }

    #[test]
    fn seed_override_reaches_the_model() {
        let cfg = parse("source_prompt = a\nseed = 4\n").unwrap();
        assert_eq!(cfg.model.seed, 4);
        assert_eq!(cfg.with_seed(9).model.seed, 9);
    }

    #[test]
    fn heatmap_examples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.pgm");
        write_heatmap(&Tensor::full(&[2, 2], 0.3).unwrap(), &path).unwrap();
        let img = io::Image::read(&path).unwrap();
        assert_eq!(img.pixels, vec![255; 4]);

        let mut hot = vec![0.0; 9];
        hot[4] = 2.0;
        write_heatmap(&Tensor::new(vec![3, 3], hot).unwrap(), &path).unwrap();
        let first = fs::read(&path).unwrap();
        let img = io::Image::read(&path).unwrap();
        assert_eq!(img.pixels.iter().filter(|&&p| p == 255).count(), 1);
        write_heatmap(&Tensor::new(vec![3, 3], img.pixels.iter().map(|&p| p as f64).collect()).unwrap(), &path)
            .unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);

        assert!(write_heatmap(&Tensor::zeros(&[4]).unwrap(), &path).is_err());
    }

    #[test]
    fn exit_codes_follow_error_class() {
        let io = CliError::Engine(attnfuse::Error::Io {
            path: "x".into(),
            source: std::io::Error::other("boom"),
        });
        assert_eq!(io.exit_code(), 2);
        assert_eq!(CliError::Engine(attnfuse::Error::Contract("c".into())).exit_code(), 1);
        assert_eq!(CliError::Config("c".into()).exit_code(), 3);
    }
}
