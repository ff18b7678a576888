//! Patch augmentation and class balancing.
//!
//! All transforms work on square RGB8 rasters. Random draws come from a
//! ChaCha stream keyed by `(seed, slide_id, index)`, so an augmented sample
//! does not depend on which worker produced it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::roi::slide_seed;
use crate::slide::SlideLabel;
use crate::synth::mix_seed;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("class {0} has no examples")]
    MissingClass(SlideLabel),
}

/// One of the 8 symmetries of the square: `rotation` quarter turns
/// (counter-clockwise) applied after an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);
    pub const ROT90: Dihedral = Dihedral(1);
    pub const FLIP: Dihedral = Dihedral(4);

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn new(index: u8) -> Option<Dihedral> {
        (index < 8).then_some(Dihedral(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn rotation(self) -> u8 {
        self.0 % 4
    }

    pub fn flipped(self) -> bool {
        self.0 >= 4
    }

    /// Source coordinates read by output pixel `(x, y)` of an `n × n` raster.
    fn source(self, x: usize, y: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        // undo rotation (counter-clockwise quarter turns), then undo flip
        let (mut sx, mut sy) = (x, y);
        for _ in 0..self.rotation() {
            (sx, sy) = (m - sy, sx);
        }
        if self.flipped() {
            sx = m - sx;
        }
        (sx, sy)
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(self, other: Dihedral) -> Dihedral {
        // Work out the composite by its action on a 2×2 probe.
        let probe: Vec<u8> = (0..4).collect();
        let out = apply_dihedral_channels(&apply_dihedral_channels(&probe, 2, 1, other), 2, 1, self);
        Dihedral::all()
            .find(|t| apply_dihedral_channels(&probe, 2, 1, *t) == out)
            .expect("group is closed")
    }

    pub fn inverse(self) -> Dihedral {
        Dihedral::all()
            .find(|t| self.compose(*t) == Dihedral::IDENTITY)
            .expect("every element has an inverse")
    }
}

fn apply_dihedral_channels(pixels: &[u8], n: usize, channels: usize, t: Dihedral) -> Vec<u8> {
    let mut out = vec![0u8; pixels.len()];
    for y in 0..n {
        for x in 0..n {
            let (sx, sy) = t.source(x, y, n);
            let d = (y * n + x) * channels;
            let s = (sy * n + sx) * channels;
            out[d..d + channels].copy_from_slice(&pixels[s..s + channels]);
        }
    }
    out
}

/// Exact pixel permutation of a square `px × px` RGB8 patch.
pub fn apply_dihedral(pixels: &[u8], px: usize, t: Dihedral) -> Vec<u8> {
    assert_eq!(pixels.len(), px * px * 3, "square RGB patch");
    apply_dihedral_channels(pixels, px, 3, t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub color_shift_max: i32,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            color_shift_max: 20,
            elastic_alpha: 20.0,
            elastic_sigma: 10.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.color_shift_max < 0 || !(self.elastic_alpha >= 0.0) || !(self.elastic_sigma >= 0.0) {
            return Err(format!("augmentation parameters must be nonnegative: {self:?}"));
        }
        Ok(())
    }
}

/// RNG stream for sample `index` of slide `slide_id`.
pub fn sample_rng(seed: u64, slide_id: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(slide_seed(seed, slide_id), index))
}

/// Add one offset per channel, clamping to `[0, 255]`.
pub fn shift_colors(pixels: &[u8], offsets: [i32; 3]) -> Vec<u8> {
    pixels
        .chunks_exact(3)
        .flat_map(|p| (0..3).map(move |c| (p[c] as i32 + offsets[c]).clamp(0, 255) as u8))
        .collect()
}

/// Random per-channel offsets, uniform on `[-max, max]`.
pub fn draw_color_offsets(cfg: &AugmentConfig, rng: &mut impl Rng) -> [i32; 3] {
    let m = cfg.color_shift_max;
    [rng.gen_range(-m..=m), rng.gen_range(-m..=m), rng.gen_range(-m..=m)]
}

pub fn color_shift(pixels: &[u8], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<u8> {
    shift_colors(pixels, draw_color_offsets(cfg, rng))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing with edge replication.
fn smooth(field: &[f64], n: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * field[y * n + clamp(x as isize + k as isize - r)])
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - r) * n + x])
                .sum();
        }
    }
    out
}

/// Displacement fields `(dx, dy)` for an `n × n` patch: uniform noise on
/// `[-1, 1]`, Gaussian-smoothed, scaled by `alpha`.
pub fn displacement_field(n: usize, alpha: f64, sigma: f64, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let dx: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let dy: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let k = gaussian_kernel(sigma);
    let scale = |v: Vec<f64>| v.into_iter().map(|d| d * alpha).collect::<Vec<_>>();
    (scale(smooth(&dx, n, &k)), scale(smooth(&dy, n, &k)))
}

/// Resample `pixels` at `(x + dx, y + dy)` with bilinear interpolation and
/// edge replication.
pub fn warp(pixels: &[u8], n: usize, dx: &[f64], dy: &[f64]) -> Vec<u8> {
    let last = (n - 1) as f64;
    let mut out = vec![0u8; pixels.len()];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let sx = (x as f64 + dx[i]).clamp(0.0, last);
            let sy = (y as f64 + dy[i]).clamp(0.0, last);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..3 {
                let p = |xx: usize, yy: usize| pixels[(yy * n + xx) * 3 + c] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                out[i * 3 + c] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

pub fn elastic_deform(pixels: &[u8], px: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<u8> {
    let (dx, dy) = displacement_field(px, cfg.elastic_alpha, cfg.elastic_sigma, rng);
    warp(pixels, px, &dx, &dy)
}

/// Training augmentation: random dihedral transform, colour shift, elastic
/// deformation, in that order.
pub fn augment_patch(pixels: &[u8], px: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<u8> {
    let t = Dihedral(rng.gen_range(0..8));
    let p = apply_dihedral(pixels, px, t);
    let p = color_shift(&p, cfg, rng);
    elastic_deform(&p, px, cfg, rng)
}

/// One epoch's sample order as indices into `labels`: every class is
/// brought up to the size of the largest one (minority classes are drawn
/// with replacement), then the whole list is shuffled.
pub fn balanced_epoch(labels: &[SlideLabel], seed: u64) -> Result<Vec<usize>, AugmentError> {
    let mut by_class: [Vec<usize>; 4] = Default::default();
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    for l in SlideLabel::ALL {
        if by_class[l.index()].is_empty() {
            return Err(AugmentError::MissingClass(l));
        }
    }
    let target = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(4 * target);
    for members in &by_class {
        if members.len() == target {
            order.extend_from_slice(members);
        } else {
            order.extend((0..target).map(|_| members[rng.gen_range(0..members.len())]));
        }
    }
    order.shuffle(&mut rng);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(n: usize) -> Vec<u8> {
        (0..n * n * 3).map(|i| (i % 251) as u8).collect()
    }

    #[test]
    fn rotation_four_times_is_identity() {
        let p = probe(5);
        let mut q = p.clone();
        for _ in 0..4 {
            q = apply_dihedral(&q, 5, Dihedral::ROT90);
        }
        assert_eq!(p, q);
        assert_ne!(apply_dihedral(&p, 5, Dihedral::ROT90), p);
    }

    #[test]
    fn rot90_is_counter_clockwise() {
        // 2×2 single-channel probe [a b; c d] -> [b d; a c]
        let out = apply_dihedral_channels(&[1, 2, 3, 4], 2, 1, Dihedral::ROT90);
        assert_eq!(out, vec![2, 4, 1, 3]);
        let flipped = apply_dihedral_channels(&[1, 2, 3, 4], 2, 1, Dihedral::FLIP);
        assert_eq!(flipped, vec![2, 1, 4, 3]);
    }

    #[test]
    fn clamped_shift() {
        let white = vec![255u8; 12];
        assert_eq!(shift_colors(&white, [5, 10, 20]), white);
        assert_eq!(shift_colors(&[10, 20, 30], [-20, 0, 5]), vec![0, 20, 35]);
    }

    #[test]
    fn balanced_counts() {
        use SlideLabel::*;
        let mut labels = vec![Negative; 8];
        labels.extend([Itc, Itc, Micro, Micro, Macro, Macro]);
        let e = balanced_epoch(&labels, 3).unwrap();
        assert_eq!(e.len(), 32);
        for l in SlideLabel::ALL {
            assert_eq!(e.iter().filter(|&&i| labels[i] == l).count(), 8);
        }
        assert_eq!(balanced_epoch(&labels[..8], 0), Err(AugmentError::MissingClass(Itc)));
    }
}
