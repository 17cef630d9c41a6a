//! Entropy-image feature extraction.
//!
//! A binary is cut into fixed-size blocks; each block's byte histogram
//! yields a Shannon entropy in [0, 8] bits, which maps to a gray level
//!
//! ```text
//! pixel = round(2^entropy - 1)        // 0 bits -> 0, 8 bits -> 255
//! ```
//!
//! The per-block pixels are laid out row-major at a fixed row width,
//! the last row is zero-padded, and the grid is nearest-neighbor resized
//! to 105x105. Images are normalized to z-scores before entering the
//! model. The exponential mapping spreads the high-entropy range (packed
//! and encrypted regions) across most of the gray scale.

use crate::binfeed::{CorpusError, Lineage, Manifest, RawBinary};
use std::path::Path;
use thiserror::Error;

/// Side length of the final square image.
pub const TARGET_SIDE: usize = 105;

/// Default block size in bytes.
pub const DEFAULT_BLOCK_SIZE: usize = 256;

/// Default row width of the pre-resize grid, in blocks.
pub const DEFAULT_WIDTH_BLOCKS: usize = 105;

/// Default normalization constants for pixel/255 values.
pub const DEFAULT_MEAN: f64 = 0.52206;
pub const DEFAULT_STD: f64 = 0.08426;

#[derive(Debug, Error)]
pub enum EntropixError {
    #[error("cannot take the entropy of an empty block")]
    EmptyBlock,
    #[error("block size must be >= 1")]
    BadBlockSize,
    #[error("width in blocks must be >= 1")]
    BadWidth,
    #[error("entropy {0} outside [0, 8]")]
    EntropyOutOfRange(f64),
    #[error("unsupported rotation {0}; expected one of 90/180/270")]
    BadRotation(u32),
    #[error("std {0} too small to normalize with")]
    DegenerateStd(f64),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a valid 8-bit PGM: {msg}")]
    BadPgm {
        path: std::path::PathBuf,
        msg: String,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn io_err(path: &Path, source: std::io::Error) -> EntropixError {
    EntropixError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Byte-frequency counts for one block.
#[derive(Debug, Clone)]
pub struct ByteHistogram {
    pub counts: [u64; 256],
    pub total: u64,
}

impl ByteHistogram {
    pub fn from_block(block: &[u8]) -> Self {
        let mut counts = [0u64; 256];
        for &b in block {
            counts[b as usize] += 1;
        }
        ByteHistogram {
            counts,
            total: block.len() as u64,
        }
    }
}

/// Shannon entropy of a block in bits per byte, in [0, 8].
pub fn block_entropy(block: &[u8]) -> Result<f64, EntropixError> {
    if block.is_empty() {
        return Err(EntropixError::EmptyBlock);
    }
    let hist = ByteHistogram::from_block(block);
    let total = hist.total as f64;
    let mut ent = 0.0;
    for &c in hist.counts.iter() {
        if c > 0 {
            let p = c as f64 / total;
            ent -= p * p.log2();
        }
    }
    // Mathematically in [0, 8]; the clamp only strips float round-off.
    Ok(ent.clamp(0.0, 8.0))
}

/// Per-block entropies of a byte stream; the trailing partial block counts.
#[derive(Debug, Clone)]
pub struct EntropySequence {
    pub values: Vec<f64>,
    pub block_size: usize,
    pub source_len: usize,
}

pub fn entropy_sequence(bytes: &[u8], block_size: usize) -> Result<EntropySequence, EntropixError> {
    if block_size == 0 {
        return Err(EntropixError::BadBlockSize);
    }
    if bytes.is_empty() {
        return Err(EntropixError::EmptyBlock);
    }
    let values = bytes
        .chunks(block_size)
        .map(block_entropy)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EntropySequence {
        values,
        block_size,
        source_len: bytes.len(),
    })
}

/// Map an entropy in [0, 8] to a gray level via `round(2^e - 1)`.
pub fn entropy_to_pixel(ent: f64) -> Result<u8, EntropixError> {
    if !(0.0..=8.0).contains(&ent) {
        return Err(EntropixError::EntropyOutOfRange(ent));
    }
    Ok((ent.exp2() - 1.0).round() as u8)
}

/// A grayscale image of per-block entropy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntropyImage {
    /// Row-major pixels, `height * width` of them.
    pub pixels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    /// Row width (in blocks) of the grid before resizing.
    pub width_blocks: usize,
}

impl EntropyImage {
    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.pixels[r * self.width + c]
    }
}

/// Arrange an entropy sequence into the pre-resize pixel grid.
pub fn layout_image(
    seq: &EntropySequence,
    width_blocks: usize,
) -> Result<EntropyImage, EntropixError> {
    if width_blocks == 0 {
        return Err(EntropixError::BadWidth);
    }
    let n = seq.values.len();
    let height = n.div_ceil(width_blocks);
    let mut pixels = vec![0u8; height * width_blocks];
    for (i, &e) in seq.values.iter().enumerate() {
        pixels[i] = entropy_to_pixel(e)?;
    }
    Ok(EntropyImage {
        pixels,
        height,
        width: width_blocks,
        width_blocks,
    })
}

/// Nearest-neighbor resize; source index = floor(src_extent * i / dst_extent).
pub fn resize_nearest(img: &EntropyImage, target_h: usize, target_w: usize) -> EntropyImage {
    let mut pixels = vec![0u8; target_h * target_w];
    for r in 0..target_h {
        let sr = r * img.height / target_h;
        for c in 0..target_w {
            let sc = c * img.width / target_w;
            pixels[r * target_w + c] = img.at(sr, sc);
        }
    }
    EntropyImage {
        pixels,
        height: target_h,
        width: target_w,
        width_blocks: img.width_blocks,
    }
}

/// Block size and grid width used to turn bytes into images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderParams {
    pub block_size: usize,
    pub width_blocks: usize,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            block_size: DEFAULT_BLOCK_SIZE,
            width_blocks: DEFAULT_WIDTH_BLOCKS,
        }
    }
}

/// Full pipeline for one sample: entropies, gray mapping, layout, resize.
pub fn render_entropy_image(
    raw: &RawBinary,
    params: RenderParams,
) -> Result<EntropyImage, EntropixError> {
    let seq = entropy_sequence(&raw.bytes, params.block_size)?;
    let grid = layout_image(&seq, params.width_blocks)?;
    Ok(resize_nearest(&grid, TARGET_SIDE, TARGET_SIDE))
}

/// Rotate clockwise by 90, 180 or 270 degrees.
///
/// For 90 degrees, source pixel (r, c) of an HxW image lands at (c, H-1-r).
pub fn rotate(img: &EntropyImage, degrees: u32) -> Result<EntropyImage, EntropixError> {
    let quarter_turns = match degrees {
        90 => 1,
        180 => 2,
        270 => 3,
        other => return Err(EntropixError::BadRotation(other)),
    };
    let mut out = img.clone();
    for _ in 0..quarter_turns {
        let (h, w) = (out.height, out.width);
        let mut pixels = vec![0u8; h * w];
        for r in 0..h {
            for c in 0..w {
                // (r, c) -> (c, h - 1 - r), output is w x h
                pixels[c * h + (h - 1 - r)] = out.pixels[r * w + c];
            }
        }
        out = EntropyImage {
            pixels,
            height: w,
            width: h,
            width_blocks: out.width_blocks,
        };
    }
    Ok(out)
}

/// Render entry `idx` of a manifest, applying its lineage's rotation.
/// Augmented entries share their parent's bytes and rotate in image space.
pub fn render_for_entry(
    manifest: &Manifest,
    idx: usize,
    params: RenderParams,
) -> Result<EntropyImage, EntropixError> {
    let raw = manifest.load_raw(idx)?;
    let img = render_entropy_image(&raw, params)?;
    match raw.lineage {
        Lineage::Augmented { rotation, .. } => rotate(&img, rotation),
        _ => Ok(img),
    }
}

/// Corpus-wide pixel statistics on the pixel/255 scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub images: usize,
    pub pixels: u64,
}

/// Mean and population std of pixel/255 over every rendered image, reduced
/// in manifest order so the result is bit-stable.
pub fn corpus_stats(manifest: &Manifest, params: RenderParams) -> Result<CorpusStats, EntropixError> {
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    let mut pixels = 0u64;
    for idx in 0..manifest.len() {
        let img = render_for_entry(manifest, idx, params)?;
        for &p in &img.pixels {
            let v = p as f64 / 255.0;
            sum += v;
            sumsq += v * v;
        }
        pixels += img.pixels.len() as u64;
    }
    let n = pixels as f64;
    let mean = if pixels == 0 { 0.0 } else { sum / n };
    let var = if pixels == 0 {
        0.0
    } else {
        (sumsq / n - mean * mean).max(0.0)
    };
    Ok(CorpusStats {
        mean,
        std: var.sqrt(),
        images: manifest.len(),
        pixels,
    })
}

/// An image on the model's z-score scale.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub mean: f64,
    pub std: f64,
}

/// Scale pixels to (pixel/255 - mean) / std.
pub fn normalize(
    img: &EntropyImage,
    mean: f64,
    std: f64,
) -> Result<NormalizedImage, EntropixError> {
    if !std.is_finite() || std <= 1e-12 {
        return Err(EntropixError::DegenerateStd(std));
    }
    let values = img
        .pixels
        .iter()
        .map(|&p| (p as f64 / 255.0 - mean) / std)
        .collect();
    Ok(NormalizedImage {
        values,
        height: img.height,
        width: img.width,
        mean,
        std,
    })
}

/// Invert [`normalize`], returning float pixel values on the 0..=255 scale.
pub fn denormalize(img: &NormalizedImage) -> Vec<f64> {
    img.values
        .iter()
        .map(|&v| (v * img.std + img.mean) * 255.0)
        .collect()
}

/// Write a binary 8-bit PGM with a comment line naming the sample.
pub fn write_pgm(path: &Path, img: &EntropyImage, comment: &str) -> Result<(), EntropixError> {
    let mut out = Vec::with_capacity(img.pixels.len() + 64);
    // PGM comments must stay on one line.
    let comment: String = comment.chars().map(|c| if c == '\n' { ' ' } else { c }).collect();
    out.extend_from_slice(format!("P5\n# {}\n{} {}\n255\n", comment, img.width, img.height).as_bytes());
    out.extend_from_slice(&img.pixels);
    crate::binfeed::write_atomic(path, &out).map_err(EntropixError::from)
}

/// Read back an 8-bit PGM written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<(EntropyImage, String), EntropixError> {
    let bad = |msg: &str| EntropixError::BadPgm {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    // Header is text: magic, comments, dims, maxval, each newline-terminated.
    // Collect non-comment fields until magic + width + height + maxval are in.
    let mut pos = 0;
    let mut comment = String::new();
    let mut fields: Vec<String> = Vec::new();
    while fields.len() < 4 {
        let nl = data[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        let line = std::str::from_utf8(&data[pos..pos + nl])
            .map_err(|_| bad("non-utf8 header"))?;
        pos += nl + 1;
        if let Some(c) = line.strip_prefix('#') {
            if comment.is_empty() {
                comment = c.trim().to_string();
            }
        } else {
            fields.extend(line.split_whitespace().map(str::to_string));
        }
    }
    if fields.len() != 4 || fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 / dims / 255 header"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = data[pos..].to_vec();
    if pixels.len() != width * height {
        return Err(bad("payload size does not match dimensions"));
    }
    Ok((
        EntropyImage {
            pixels,
            height,
            width,
            width_blocks: width,
        },
        comment,
    ))
}
