//! Pyramidal slide container.
//!
//! A slide is stored as a stack of RGB8 rasters, each tagged with an integer
//! downsample factor relative to the (possibly unmaterialized) base scan.
//! The on-disk layout is little-endian throughout:
//!
//! ```text
//! "WSIP"            4 bytes magic
//! version           u32 (= 1)
//! slide_id          u16 length + UTF-8 bytes
//! level_count       u16
//! directory         level_count × { factor u32, width u32, height u32, payload_offset u64 }
//! payloads          raw RGB8 row-major rasters, in directory order
//! ```
//!
//! [`level_at_factor`] normalizes any pyramid to a requested factor with
//! area-weighted box filtering, so downstream code can always work at a
//! fixed resolution no matter which factors a slide happens to carry.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"WSIP";
pub const VERSION: u32 = 1;
/// Bytes per directory entry: factor, width, height (u32 each) and offset (u64).
pub const DIR_ENTRY_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum SlideError {
    #[error("bad magic {found:?} at offset 0, expected \"WSIP\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: need {needed} bytes at offset {offset}, file has {len}")]
    TruncatedFile { offset: u64, needed: u64, len: u64 },
    #[error("level {level} has factor {factor}, not above previous factor {previous}")]
    UnsortedLevels { level: usize, factor: u32, previous: u32 },
    #[error("pyramid has no levels")]
    EmptyPyramid,
    #[error("level {level}: {reason}")]
    InvalidLevel { level: usize, reason: String },
    #[error("slide id is not valid UTF-8")]
    BadSlideId,
    #[error("no stored level at or below factor {target} (finest stored is {finest})")]
    NoFinerLevel { target: u32, finest: u32 },
    #[error("invalid label {0:?}")]
    BadLabel(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] io::Error),
}

/// Ground-truth slide class, ordered by severity.
///
/// The discriminant doubles as the class index used by the network and the
/// score vectors: 0 = negative, 1 = ITC, 2 = micro, 3 = macro.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlideLabel {
    Negative = 0,
    Itc = 1,
    Micro = 2,
    Macro = 3,
}

impl SlideLabel {
    pub const ALL: [SlideLabel; 4] = [
        SlideLabel::Negative,
        SlideLabel::Itc,
        SlideLabel::Micro,
        SlideLabel::Macro,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<SlideLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SlideLabel::Negative => "negative",
            SlideLabel::Itc => "itc",
            SlideLabel::Micro => "micro",
            SlideLabel::Macro => "macro",
        }
    }
}

impl fmt::Display for SlideLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SlideLabel {
    type Err = SlideError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "negative" => Ok(SlideLabel::Negative),
            "itc" => Ok(SlideLabel::Itc),
            "micro" => Ok(SlideLabel::Micro),
            "macro" => Ok(SlideLabel::Macro),
            other => Err(SlideError::BadLabel(other.to_string())),
        }
    }
}

/// One resolution of a slide: an RGB8 raster at a fixed downsample factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Level {
    factor: u32,
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Level {
    pub fn new(factor: u32, width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, SlideError> {
        if factor == 0 {
            return Err(SlideError::InvalidLevel {
                level: 0,
                reason: "downsample factor must be positive".into(),
            });
        }
        if width == 0 || height == 0 {
            return Err(SlideError::InvalidLevel {
                level: 0,
                reason: format!("empty raster {width}x{height}"),
            });
        }
        if pixels.len() != width * height * 3 {
            return Err(SlideError::InvalidLevel {
                level: 0,
                reason: format!(
                    "raster has {} bytes, expected {}x{}x3 = {}",
                    pixels.len(),
                    width,
                    height,
                    width * height * 3
                ),
            });
        }
        Ok(Level {
            factor,
            width,
            height,
            pixels,
        })
    }

    /// A level filled with a single color.
    pub fn filled(factor: u32, width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, SlideError> {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Level::new(factor, width, height, pixels)
    }

    pub fn factor(&self) -> u32 {
        self.factor
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }
}

/// A multi-resolution slide. Levels are kept sorted by strictly increasing
/// downsample factor and their extents agree with the finest level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlidePyramid {
    slide_id: String,
    levels: Vec<Level>,
}

impl SlidePyramid {
    pub fn new(slide_id: impl Into<String>, levels: Vec<Level>) -> Result<Self, SlideError> {
        let slide_id = slide_id.into();
        if levels.is_empty() {
            return Err(SlideError::EmptyPyramid);
        }
        if slide_id.len() > u16::MAX as usize {
            return Err(SlideError::InvalidLevel {
                level: 0,
                reason: "slide id longer than 65535 bytes".into(),
            });
        }
        if levels.len() > u16::MAX as usize {
            return Err(SlideError::InvalidLevel {
                level: levels.len(),
                reason: "more than 65535 levels".into(),
            });
        }
        for (i, pair) in levels.windows(2).enumerate() {
            if pair[1].factor <= pair[0].factor {
                return Err(SlideError::UnsortedLevels {
                    level: i + 1,
                    factor: pair[1].factor,
                    previous: pair[0].factor,
                });
            }
        }
        let base = &levels[0];
        let base_w = base.width as u64 * base.factor as u64;
        let base_h = base.height as u64 * base.factor as u64;
        for (i, level) in levels.iter().enumerate().skip(1) {
            let f = level.factor as u64;
            let ew = base_w.div_ceil(f) as i64;
            let eh = base_h.div_ceil(f) as i64;
            if (level.width as i64 - ew).abs() > 1 || (level.height as i64 - eh).abs() > 1 {
                return Err(SlideError::InvalidLevel {
                    level: i,
                    reason: format!(
                        "extent {}x{} inconsistent with base (expected about {}x{})",
                        level.width, level.height, ew, eh
                    ),
                });
            }
        }
        Ok(SlidePyramid { slide_id, levels })
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    /// Width and height of the slide expressed in factor-1 pixels.
    pub fn base_extent(&self) -> (u64, u64) {
        let l = &self.levels[0];
        (l.width as u64 * l.factor as u64, l.height as u64 * l.factor as u64)
    }

    pub fn level_with_factor(&self, factor: u32) -> Option<&Level> {
        self.levels.iter().find(|l| l.factor == factor)
    }
}

/// Serialize a pyramid to the container byte layout.
pub fn encode_slide(pyramid: &SlidePyramid) -> Vec<u8> {
    let id = pyramid.slide_id.as_bytes();
    let header_len = 4 + 4 + 2 + id.len() + 2 + DIR_ENTRY_LEN * pyramid.levels.len();
    let payload_len: usize = pyramid.levels.iter().map(|l| l.pixels.len()).sum();
    let mut out = Vec::with_capacity(header_len + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&(pyramid.levels.len() as u16).to_le_bytes());
    let mut offset = header_len as u64;
    for level in &pyramid.levels {
        out.extend_from_slice(&level.factor.to_le_bytes());
        out.extend_from_slice(&(level.width as u32).to_le_bytes());
        out.extend_from_slice(&(level.height as u32).to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += level.pixels.len() as u64;
    }
    for level in &pyramid.levels {
        out.extend_from_slice(&level.pixels);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SlideError> {
        if self.bytes.len() - self.pos < n {
            return Err(SlideError::TruncatedFile {
                offset: self.pos as u64,
                needed: n as u64,
                len: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, SlideError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, SlideError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SlideError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse the container byte layout.
pub fn decode_slide(bytes: &[u8]) -> Result<SlidePyramid, SlideError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4).map_err(|_| {
        let mut found = [0u8; 4];
        found[..bytes.len()].copy_from_slice(bytes);
        SlideError::BadMagic { found }
    })?;
    if magic != MAGIC {
        return Err(SlideError::BadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(SlideError::UnsupportedVersion(version));
    }
    let id_len = cur.u16()? as usize;
    let slide_id = std::str::from_utf8(cur.take(id_len)?)
        .map_err(|_| SlideError::BadSlideId)?
        .to_string();
    let count = cur.u16()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let factor = cur.u32()?;
        let width = cur.u32()? as usize;
        let height = cur.u32()? as usize;
        let offset = cur.u64()?;
        entries.push((factor, width, height, offset));
    }
    let mut levels = Vec::with_capacity(count);
    let mut previous = 0u32;
    for (i, &(factor, width, height, offset)) in entries.iter().enumerate() {
        if i > 0 && factor <= previous {
            return Err(SlideError::UnsortedLevels {
                level: i,
                factor,
                previous,
            });
        }
        previous = factor;
        let len = (width as u64) * (height as u64) * 3;
        let end = offset.saturating_add(len);
        if end > bytes.len() as u64 {
            return Err(SlideError::TruncatedFile {
                offset,
                needed: len,
                len: bytes.len() as u64,
            });
        }
        let pixels = bytes[offset as usize..end as usize].to_vec();
        let level = Level::new(factor, width, height, pixels).map_err(|e| match e {
            SlideError::InvalidLevel { reason, .. } => SlideError::InvalidLevel { level: i, reason },
            other => other,
        })?;
        levels.push(level);
    }
    SlidePyramid::new(slide_id, levels)
}

pub fn write_slide(pyramid: &SlidePyramid, path: impl AsRef<Path>) -> Result<(), SlideError> {
    let bytes = encode_slide(pyramid);
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.flush()?;
    Ok(())
}

pub fn read_slide(path: impl AsRef<Path>) -> Result<SlidePyramid, SlideError> {
    let bytes = fs::read(path)?;
    decode_slide(&bytes)
}

/// Return the level at `target_factor`, resampling when it is not stored.
///
/// The source is the coarsest stored level whose factor does not exceed the
/// target. Each output pixel maps to a real-valued rectangle of source
/// pixels; partially covered source pixels are weighted by overlap area and
/// the weighted mean is rounded half-up. Output extent is
/// `ceil(base_extent / target_factor)`.
pub fn level_at_factor(pyramid: &SlidePyramid, target_factor: u32) -> Result<Level, SlideError> {
    if let Some(level) = pyramid.level_with_factor(target_factor) {
        return Ok(level.clone());
    }
    let finest = pyramid.levels[0].factor;
    let source = pyramid
        .levels
        .iter()
        .rev()
        .find(|l| l.factor <= target_factor)
        .ok_or(SlideError::NoFinerLevel {
            target: target_factor,
            finest,
        })?;
    let (base_w, base_h) = pyramid.base_extent();
    let out_w = base_w.div_ceil(target_factor as u64) as usize;
    let out_h = base_h.div_ceil(target_factor as u64) as usize;
    Ok(resample_box(source, target_factor, out_w, out_h))
}

/// Per-output-index list of (source index, overlap weight).
fn axis_weights(src_len: usize, out_len: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    (0..out_len)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = ((o + 1) as f64 * scale).min(src_len as f64);
            let mut taps = Vec::new();
            if hi <= lo {
                // output pixel lies past the source edge; replicate the last column
                taps.push((src_len - 1, 1.0));
                return taps;
            }
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src_len);
            for s in first..last {
                let w = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                if w > 0.0 {
                    taps.push((s, w));
                }
            }
            taps
        })
        .collect()
}

fn resample_box(source: &Level, target_factor: u32, out_w: usize, out_h: usize) -> Level {
    let scale = target_factor as f64 / source.factor as f64;
    let wx = axis_weights(source.width, out_w, scale);
    let wy = axis_weights(source.height, out_h, scale);
    let mut pixels = vec![0u8; out_w * out_h * 3];
    for (oy, ytaps) in wy.iter().enumerate() {
        for (ox, xtaps) in wx.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            let mut total = 0.0;
            for &(sy, wyv) in ytaps {
                let row = sy * source.width;
                for &(sx, wxv) in xtaps {
                    let w = wyv * wxv;
                    let i = (row + sx) * 3;
                    acc[0] += w * source.pixels[i] as f64;
                    acc[1] += w * source.pixels[i + 1] as f64;
                    acc[2] += w * source.pixels[i + 2] as f64;
                    total += w;
                }
            }
            let o = (oy * out_w + ox) * 3;
            for c in 0..3 {
                pixels[o + c] = (acc[c] / total + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Level {
        factor: target_factor,
        width: out_w,
        height: out_h,
        pixels,
    }
}

/// Write the one-line ground-truth sidecar `slide_id<TAB>label`.
pub fn write_label_sidecar(path: impl AsRef<Path>, slide_id: &str, label: SlideLabel) -> Result<(), SlideError> {
    fs::write(path, format!("{slide_id}\t{label}\n"))?;
    Ok(())
}

pub fn read_label_sidecar(path: impl AsRef<Path>) -> Result<(String, SlideLabel), SlideError> {
    let text = fs::read_to_string(path)?;
    let line = text.lines().next().unwrap_or("");
    let (id, label) = line
        .split_once('\t')
        .ok_or_else(|| SlideError::BadLabel(line.to_string()))?;
    Ok((id.to_string(), label.parse()?))
}
