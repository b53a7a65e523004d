//! On-disk formats: a tagged tensor blob, binary PPM/PGM images and frame
//! directories.
//!
//! Blob layout, all integers little-endian:
//!
//! ```text
//! magic "AFBL" | u32 version | u64 config hash      (16-byte header)
//! u32 tensor count
//! per tensor: u32 name length | name (UTF-8) | u32 rank | u64 × rank dims | f64 × len data
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{DenoiserWeights, ModelConfig};
use crate::numerics::Tensor;
use crate::pipeline::PixelVideo;
use crate::store::AttentionStore;

pub const BLOB_MAGIC: [u8; 4] = *b"AFBL";
pub const BLOB_VERSION: u32 = 1;
pub const BLOB_HEADER_LEN: usize = 16;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Blob
// ---------------------------------------------------------------------------

/// Decoded blob contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub config_hash: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Blob {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_blob(config_hash: u64, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 8 + n.len() + 8 * t.rank() + 8 * t.len())
        .sum();
    let mut out = Vec::with_capacity(BLOB_HEADER_LEN + 4 + payload);
    out.extend_from_slice(&BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses blob bytes; `path` only labels errors.
pub fn decode_blob(bytes: &[u8], path: &Path) -> Result<Blob> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4)? != BLOB_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = c.u32()?;
    if version != BLOB_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let config_hash = c.u64()?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| format_err(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(
                usize::try_from(c.u64()?).map_err(|_| format_err(path, "dimension overflows"))?,
            );
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_err(path, "tensor size overflows"))?;
        let raw = c.take(n.checked_mul(8).ok_or_else(|| format_err(path, "tensor size overflows"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format_err(path, format!("tensor {name:?}: {e}")))?;
        tensors.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(format_err(path, "trailing bytes after last tensor"));
    }
    Ok(Blob {
        config_hash,
        tensors,
    })
}

pub fn write_blob(path: &Path, config_hash: u64, tensors: &[(String, &Tensor)]) -> Result<()> {
    write_file(path, &encode_blob(config_hash, tensors))
}

pub fn read_blob(path: &Path) -> Result<Blob> {
    decode_blob(&read_file(path)?, path)
}

pub fn save_weights(path: &Path, weights: &DenoiserWeights) -> Result<()> {
    write_blob(path, weights.config.config_hash(), &weights.named_tensors())
}

/// Loads weights written for `config`; a blob from another config is rejected.
pub fn load_weights(path: &Path, config: ModelConfig) -> Result<DenoiserWeights> {
    let blob = read_blob(path)?;
    if blob.config_hash != config.config_hash() {
        return Err(format_err(
            path,
            format!(
                "config hash {:016x} does not match {:016x}",
                blob.config_hash,
                config.config_hash()
            ),
        ));
    }
    DenoiserWeights::from_named_tensors(config, blob.tensors)
}

/// Writes one blob per store record, named `t0000_l00_self.bin`.
pub fn dump_store(dir: &Path, store: &AttentionStore) -> Result<Vec<PathBuf>> {
    let hash = store.meta().config_hash;
    store
        .iter()
        .map(|rec| {
            let k = rec.key;
            let path = dir.join(format!("t{:04}_l{:02}_{}.bin", k.timestep, k.layer, k.kind));
            write_blob(&path, hash, &[(k.to_string(), &rec.map)])?;
            Ok(path)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Netpbm
// ---------------------------------------------------------------------------

/// A decoded 8-bit PGM (1 channel) or PPM (3 channels, interleaved).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::contract(format!("images have 1 or 3 channels, not {channels}")));
        }
        if width * height * channels != pixels.len() || pixels.is_empty() {
            return Err(Error::contract(format!(
                "{width}x{height}x{channels} image cannot hold {} bytes",
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(format_err(path, "truncated netpbm header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(format_err(path, format!("unsupported netpbm magic {other:?}"))),
        };
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| format_err(path, format!("bad {what} {s:?}")))
        };
        let (width, height, maxval) = (
            num(&fields[1], "width")?,
            num(&fields[2], "height")?,
            num(&fields[3], "maxval")?,
        );
        if maxval != 255 {
            return Err(format_err(path, format!("only maxval 255 is supported, got {maxval}")));
        }
        let need = width * height * channels;
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != need {
            return Err(format_err(
                path,
                format!("expected {need} raster bytes, found {}", raster.len()),
            ));
        }
        Image::new(width, height, channels, raster.to_vec()).map_err(|e| format_err(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Image::decode(&read_file(path)?, path)
    }
}

/// Grayscale image of `values` scaled by `255 / max`; an all-zero input maps to black.
pub fn heatmap(values: &[f64], width: usize, height: usize) -> Result<Image> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let pixels = values
        .iter()
        .map(|&v| crate::pipeline::quantize_value(v.max(0.0) * scale))
        .collect();
    Image::new(width, height, 1, pixels)
}

/// Binary mask as a 0/255 grayscale image.
pub fn mask_image(mask: &[bool], width: usize, height: usize) -> Result<Image> {
    Image::new(width, height, 1, mask.iter().map(|&m| if m { 255 } else { 0 }).collect())
}

/// Frame `f` of `video` as an image; channel planes are interleaved.
pub fn frame_image(video: &PixelVideo, f: usize) -> Result<Image> {
    let q = video.quantize();
    let hw = video.height * video.width;
    let frame = &q[f * video.frame_len()..(f + 1) * video.frame_len()];
    let pixels = (0..hw)
        .flat_map(|p| (0..video.channels).map(move |ch| frame[ch * hw + p]))
        .collect();
    Image::new(video.width, video.height, video.channels, pixels)
}

/// Writes `0000.ppm`, `0001.ppm`, … (or `.pgm` for one channel) into `dir`.
pub fn write_frames(dir: &Path, video: &PixelVideo) -> Result<Vec<PathBuf>> {
    let ext = if video.channels == 3 { "ppm" } else { "pgm" };
    (0..video.frames)
        .map(|f| {
            let path = dir.join(format!("{f:04}.{ext}"));
            frame_image(video, f)?.write(&path)?;
            Ok(path)
        })
        .collect()
}

/// Reads every `.ppm`/`.pgm` file in `dir`, in file-name order, as one video.
pub fn read_frames(dir: &Path) -> Result<PixelVideo> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if matches!(path.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")) {
            paths.push(path);
        }
    }
    paths.sort();
    let first = paths
        .first()
        .ok_or_else(|| format_err(dir, "no .ppm or .pgm frames"))?;
    let head = Image::read(first)?;
    let (w, h, c) = (head.width, head.height, head.channels);
    let mut data = Vec::with_capacity(paths.len() * w * h * c);
    for path in &paths {
        let img = Image::read(path)?;
        if (img.width, img.height, img.channels) != (w, h, c) {
            return Err(format_err(
                path,
                format!(
                    "frame is {}x{}x{}, expected {w}x{h}x{c}",
                    img.width, img.height, img.channels
                ),
            ));
        }
        for ch in 0..c {
            data.extend((0..w * h).map(|p| img.pixels[p * c + ch] as f64));
        }
    }
    PixelVideo::new(paths.len(), c, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, SeededRng};

    #[test]
    fn blob_round_trip() {
        let a = gaussian(&mut SeededRng::new(1), &[2, 3]).unwrap();
        let b = Tensor::new(vec![1], vec![-0.0]).unwrap();
        let bytes = encode_blob(0xdead_beef, &[("a".into(), &a), ("bé".into(), &b)]);
        assert_eq!(&bytes[..4], b"AFBL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), BLOB_VERSION);
        let blob = decode_blob(&bytes, Path::new("mem")).unwrap();
        assert_eq!(blob.config_hash, 0xdead_beef);
        assert_eq!(blob.get("a").unwrap(), &a);
        assert_eq!(blob.get("bé").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn blob_rejects_corruption() {
        let a = Tensor::zeros(&[2]).unwrap();
        let bytes = encode_blob(1, &[("a".into(), &a)]);
        let p = Path::new("mem");
        assert!(decode_blob(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_blob(&bad, p).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_blob(&long, p).is_err());
    }

    #[test]
    fn weights_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            height: 4,
            width: 4,
            ..ModelConfig::default()
        };
        let w = DenoiserWeights::init(&cfg).unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&path, &w).unwrap();
        assert_eq!(load_weights(&path, cfg).unwrap(), w);
        let other = ModelConfig { seed: 9, ..cfg };
        assert!(load_weights(&path, other).unwrap_err().is_io());
    }

    #[test]
    fn netpbm_round_trip_with_comments() {
        let img = Image::new(2, 1, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let bytes = img.encode();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(Image::decode(&bytes, Path::new("m")).unwrap(), img);
        let commented = b"P5\n# made by hand\n2 2\n255\n\x00\x10\x20\x30";
        let g = Image::decode(commented, Path::new("m")).unwrap();
        assert_eq!(g.pixels, vec![0, 16, 32, 48]);
        assert!(Image::decode(b"P5\n2 2\n255\n\x00", Path::new("m")).is_err());
        assert!(Image::decode(b"P3\n1 1\n255\n\x00", Path::new("m")).is_err());
    }

    #[test]
    fn heatmap_scales_to_full_range() {
        let img = heatmap(&[0.0, 0.5, 1.0, 0.25], 2, 2).unwrap();
        assert_eq!(img.pixels, vec![0, 128, 255, 64]);
        assert_eq!(heatmap(&[0.0; 4], 2, 2).unwrap().pixels, vec![0; 4]);
    }

    #[test]
    fn frame_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| (i * 10) as f64).collect();
        let v = PixelVideo::new(2, 3, 2, 2, data).unwrap();
        let paths = write_frames(dir.path(), &v).unwrap();
        assert!(paths[1].ends_with("0001.ppm"));
        assert_eq!(read_frames(dir.path()).unwrap(), v);
    }
}
