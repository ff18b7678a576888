//! Region-of-interest selection and patch extraction.
//!
//! A pixel of the work level (factor 64) is tissue when its green intensity
//! is below `green_red_ratio` times its red intensity. The raw mask is
//! smoothed by a binary median over a disk, then patch centres are drawn
//! uniformly from the remaining foreground.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::slide::{self, Level, SlideError, SlidePyramid};
use crate::synth::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiConfig {
    pub green_red_ratio: f64,
    /// Diameter of the median filter's disk.
    pub median_disk_px: usize,
    pub work_factor: u32,
    pub patch_px: usize,
    pub num_patches: usize,
    pub sampling_seed: u64,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            green_red_ratio: 0.9,
            median_disk_px: 50,
            work_factor: 64,
            patch_px: 512,
            num_patches: 20,
            sampling_seed: 0,
        }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.green_red_ratio > 0.0 && self.green_red_ratio < 1.0) {
            return Err(format!("green_red_ratio must be in (0, 1), got {}", self.green_red_ratio));
        }
        if self.median_disk_px == 0 || self.work_factor == 0 || self.patch_px == 0 || self.num_patches == 0 {
            return Err("median_disk_px, work_factor, patch_px and num_patches must be positive".into());
        }
        Ok(())
    }
}

/// Binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Mask {
        assert_eq!(bits.len(), width * height, "mask size");
        Mask { width, height, bits }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `ratio` as an exact fraction with denominator 10⁹, so the comparison
/// `G < ratio · R` runs in integers.
fn ratio_fraction(ratio: f64) -> (u64, u64) {
    const DEN: u64 = 1_000_000_000;
    ((ratio * DEN as f64).round() as u64, DEN)
}

/// Foreground iff `G < ratio · R`. Black pixels are background.
pub fn threshold_mask(level: &Level, ratio: f64) -> Mask {
    let (num, den) = ratio_fraction(ratio);
    let bits = level
        .pixels()
        .chunks_exact(3)
        .map(|p| (p[1] as u64) * den < num * (p[0] as u64))
        .collect();
    Mask::new(level.width(), level.height(), bits)
}

/// Half-widths of the disk rows: for each `dy` in `-R..=R`, the largest `hw`
/// with `hw² + dy² ≤ (disk/2)²`.
fn disk_rows(disk_px: usize) -> Vec<(isize, isize)> {
    let d2 = (disk_px * disk_px) as isize;
    let big = (disk_px / 2) as isize;
    (-big..=big)
        .filter_map(|dy| {
            if 4 * dy * dy > d2 {
                return None;
            }
            let mut hw = 0isize;
            while 4 * ((hw + 1) * (hw + 1) + dy * dy) <= d2 {
                hw += 1;
            }
            Some((dy, hw))
        })
        .collect()
}

/// Number of pixels in the disk of diameter `disk_px`.
pub fn disk_area(disk_px: usize) -> usize {
    disk_rows(disk_px).iter().map(|&(_, hw)| (2 * hw + 1) as usize).sum()
}

/// Binary median over a disk of diameter `disk_px`: strict majority of the
/// disk is foreground. Outside pixels count as background, so ties and
/// borders lean to background.
pub fn median_filter_disk(mask: &Mask, disk_px: usize) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let rows = disk_rows(disk_px.max(1));
    let total: usize = rows.iter().map(|&(_, hw)| (2 * hw + 1) as usize).sum();
    // prefix[y][x] = foreground count of row y in columns < x
    let pw = w + 1;
    let mut prefix = vec![0u32; h * pw];
    for y in 0..h {
        for x in 0..w {
            prefix[y * pw + x + 1] = prefix[y * pw + x] + mask.bits[y * w + x] as u32;
        }
    }
    let mut bits = vec![false; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut fg = 0u32;
            for &(dy, hw) in &rows {
                let sy = y + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let lo = (x - hw).clamp(0, w as isize) as usize;
                let hi = (x + hw + 1).clamp(0, w as isize) as usize;
                let row = &prefix[sy as usize * pw..];
                fg += row[hi] - row[lo];
            }
            bits[y as usize * w + x as usize] = 2 * fg as usize > total;
        }
    }
    Mask::new(w, h, bits)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Centroids {
    pub points: Vec<(usize, usize)>,
    /// The mask was empty and every point is the raster centre.
    pub fallback: bool,
}

/// Draw `n` foreground positions uniformly, without replacement while the
/// foreground lasts and with replacement afterwards.
pub fn sample_centroids(mask: &Mask, n: usize, seed: u64) -> Centroids {
    let fg: Vec<usize> = mask.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    if fg.is_empty() {
        return Centroids {
            points: vec![(mask.width / 2, mask.height / 2); n],
            fallback: true,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let distinct = n.min(fg.len());
    let mut picks: Vec<usize> = fg.choose_multiple(&mut rng, distinct).copied().collect();
    while picks.len() < n {
        picks.push(fg[rng.gen_range(0..fg.len())]);
    }
    Centroids {
        points: picks.into_iter().map(|i| (i % mask.width, i / mask.width)).collect(),
        fallback: false,
    }
}

/// Square RGB8 crop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub pixels: Vec<u8>,
    pub px: usize,
    pub source_slide: String,
    pub center: (usize, usize),
}

/// Crop a `px × px` window whose pixel `(px/2, px/2)` sits on `center`;
/// pixels outside the level are white.
pub fn crop(level: &Level, center: (usize, usize), px: usize) -> Vec<u8> {
    let mut out = vec![255u8; px * px * 3];
    let x0 = center.0 as isize - (px / 2) as isize;
    let y0 = center.1 as isize - (px / 2) as isize;
    let (w, h) = (level.width() as isize, level.height() as isize);
    let xs = x0.max(0);
    let xe = (x0 + px as isize).min(w);
    if xs >= xe {
        return out;
    }
    for py in 0..px as isize {
        let sy = y0 + py;
        if sy < 0 || sy >= h {
            continue;
        }
        let src = &level.pixels()[((sy * w + xs) * 3) as usize..((sy * w + xe) * 3) as usize];
        let dst = ((py * px as isize + (xs - x0)) * 3) as usize;
        out[dst..dst + src.len()].copy_from_slice(src);
    }
    out
}

pub fn extract_patch(pyramid: &SlidePyramid, center: (usize, usize), cfg: &RoiConfig) -> Result<Patch, SlideError> {
    let level = slide::level_at_factor(pyramid, cfg.work_factor)?;
    Ok(Patch {
        pixels: crop(&level, center, cfg.patch_px),
        px: cfg.patch_px,
        source_slide: pyramid.slide_id().to_string(),
        center,
    })
}

/// Filtered mask and sampled patch centres of one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMap {
    pub mask: Mask,
    pub centroids: Centroids,
}

/// Threshold and filter the work level.
pub fn roi_mask(level: &Level, cfg: &RoiConfig) -> Mask {
    median_filter_disk(&threshold_mask(level, cfg.green_red_ratio), cfg.median_disk_px)
}

pub fn roi_map(level: &Level, cfg: &RoiConfig, seed: u64) -> RoiMap {
    let mask = roi_mask(level, cfg);
    let centroids = sample_centroids(&mask, cfg.num_patches, seed);
    RoiMap { mask, centroids }
}

/// Per-slide sampling seed: FNV-1a of the id mixed with `seed`.
pub fn slide_seed(seed: u64, slide_id: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in slide_id.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    mix_seed(seed, hash)
}

/// Binary PBM ("P4"): foreground pixels are 1 (black), rows padded to bytes.
pub fn encode_pbm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P4\n{} {}\n", mask.width, mask.height).into_bytes();
    let stride = mask.width.div_ceil(8);
    for y in 0..mask.height {
        let mut row = vec![0u8; stride];
        for x in 0..mask.width {
            if mask.get(x, y) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    out
}

/// Inverse of [`encode_pbm`] for the header layout it writes.
pub fn decode_pbm(bytes: &[u8]) -> Option<Mask> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    pos += 1;
    if fields[0] != "P4" {
        return None;
    }
    let (w, h): (usize, usize) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let stride = w.div_ceil(8);
    let data = bytes.get(pos..pos + stride * h)?;
    let bits = (0..h)
        .flat_map(|y| (0..w).map(move |x| data[y * stride + x / 8] & (0x80 >> (x % 8)) != 0))
        .collect();
    Some(Mask::new(w, h, bits))
}

pub fn write_roimap(map: &RoiMap, pbm: &Path, tsv: &Path) -> std::io::Result<()> {
    fs::write(pbm, encode_pbm(&map.mask))?;
    let mut s = String::new();
    for (x, y) in &map.centroids.points {
        writeln!(s, "{x}\t{y}").expect("string write");
    }
    fs::write(tsv, s)
}
