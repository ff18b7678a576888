//! Synthetic H&E-like slides with known labels.
//!
//! Geometry is defined in pixels of the factor-64 level. A slide is a
//! near-white background with one or more pink tissue blobs; non-negative
//! slides carry a single lesion disk at the centre of the first blob, drawn
//! in a class-specific colour and radius. The finest level is drawn with
//! Gaussian pixel noise and every coarser level is box-filtered from it.

use std::f64::consts::TAU;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::slide::{self, Level, SlideError, SlideLabel, SlidePyramid};

/// Factor at which slide geometry is specified and ROI selection runs.
pub const GEOMETRY_FACTOR: u32 = 64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate synthetic config: {0}")]
    DegenerateConfig(String),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Full-resolution extent (factor 1).
    pub base_width: u64,
    pub base_height: u64,
    pub tissue_blob_count: usize,
    /// Radius of the first (lesion-bearing) blob at factor 64.
    pub tissue_radius_px: f64,
    pub lesion_kind: SlideLabel,
    /// Lesion radii at factor 64 for ITC, micro and macro.
    pub lesion_radius_px: [f64; 3],
    pub background_rgb: [u8; 3],
    pub tissue_rgb: [u8; 3],
    pub lesion_rgb: [u8; 3],
    pub noise_sigma: f64,
    /// Stored level factors, ascending. The first is drawn, the rest are
    /// box-filtered from it; 64 must be present.
    pub level_factors: Vec<u32>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            base_width: 96 * 64,
            base_height: 96 * 64,
            tissue_blob_count: 1,
            tissue_radius_px: 24.0,
            lesion_kind: SlideLabel::Negative,
            lesion_radius_px: [5.0, 9.0, 14.0],
            background_rgb: [242, 240, 244],
            tissue_rgb: [224, 150, 196],
            lesion_rgb: lesion_palette(SlideLabel::Negative),
            noise_sigma: 8.0,
            level_factors: vec![32, 64],
        }
    }
}

/// Lesion colour per class, far enough apart to survive ±20 colour shifts.
pub fn lesion_palette(kind: SlideLabel) -> [u8; 3] {
    match kind {
        SlideLabel::Negative => [224, 150, 196],
        SlideLabel::Itc => [70, 50, 170],
        SlideLabel::Micro => [150, 30, 60],
        SlideLabel::Macro => [60, 20, 40],
    }
}

impl SynthConfig {
    /// Default geometry for one slide of the given class.
    pub fn for_label(kind: SlideLabel, seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            lesion_kind: kind,
            lesion_rgb: lesion_palette(kind),
            ..SynthConfig::default()
        }
    }

    pub fn lesion_radius(&self) -> Option<f64> {
        match self.lesion_kind {
            SlideLabel::Negative => None,
            k => Some(self.lesion_radius_px[k.index() - 1]),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::DegenerateConfig(m));
        let r = self.lesion_radius_px;
        if !(r[0] > 0.0 && r[0] < r[1] && r[1] < r[2]) {
            return bad(format!("lesion radii must satisfy 0 < itc < micro < macro, got {r:?}"));
        }
        if let Some(lr) = self.lesion_radius() {
            if lr > self.tissue_radius_px {
                return bad(format!("lesion radius {lr} exceeds tissue blob radius {}", self.tissue_radius_px));
            }
        }
        if self.tissue_blob_count == 0 || self.tissue_radius_px <= 0.0 {
            return bad("at least one tissue blob with positive radius is required".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {}", self.noise_sigma));
        }
        let f = &self.level_factors;
        if f.is_empty() || f.windows(2).any(|w| w[1] <= w[0]) || f[0] == 0 {
            return bad(format!("level factors must be positive and ascending, got {f:?}"));
        }
        if !f.contains(&GEOMETRY_FACTOR) {
            return bad(format!("level factors {f:?} must include {GEOMETRY_FACTOR}"));
        }
        if self.base_width < GEOMETRY_FACTOR as u64 || self.base_height < GEOMETRY_FACTOR as u64 {
            return bad("base extent smaller than one factor-64 pixel".into());
        }
        Ok(())
    }

    /// Extent of the factor-64 level.
    pub fn geometry_extent(&self) -> (usize, usize) {
        let f = GEOMETRY_FACTOR as u64;
        (self.base_width.div_ceil(f) as usize, self.base_height.div_ceil(f) as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Disk {
    cx: f64,
    cy: f64,
    r: f64,
}

impl Disk {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        dx * dx + dy * dy <= self.r * self.r
    }
}

/// Blob and lesion disks in factor-64 coordinates.
fn layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<Disk>, Option<Disk>) {
    let (w, h) = cfg.geometry_extent();
    let (w, h) = (w as f64, h as f64);
    let jitter = |rng: &mut ChaCha8Rng, span: f64| rng.gen_range(-span..=span);
    let r0 = cfg.tissue_radius_px * rng.gen_range(0.92..=1.08);
    let first = Disk {
        cx: w / 2.0 + jitter(rng, w / 16.0),
        cy: h / 2.0 + jitter(rng, h / 16.0),
        r: r0,
    };
    let mut blobs = vec![first];
    for _ in 1..cfg.tissue_blob_count {
        let r = cfg.tissue_radius_px * rng.gen_range(0.4..0.7);
        let angle = rng.gen_range(0.0..TAU);
        let dist = r0 + r + rng.gen_range(2.0..8.0);
        blobs.push(Disk {
            cx: first.cx + dist * angle.cos(),
            cy: first.cy + dist * angle.sin(),
            r,
        });
    }
    let lesion = cfg.lesion_radius().map(|lr| {
        let slack = (first.r - lr).clamp(0.0, 2.0);
        Disk {
            cx: first.cx + jitter(rng, slack),
            cy: first.cy + jitter(rng, slack),
            r: lr,
        }
    });
    (blobs, lesion)
}

fn draw_level(cfg: &SynthConfig, rng: &mut ChaCha8Rng, blobs: &[Disk], lesion: Option<Disk>) -> Result<Level, SynthError> {
    let f = cfg.level_factors[0];
    let (w, h) = (cfg.base_width.div_ceil(f as u64) as usize, cfg.base_height.div_ceil(f as u64) as usize);
    let scale = f as f64 / GEOMETRY_FACTOR as f64;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut pixels = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let gy = (y as f64 + 0.5) * scale;
        for x in 0..w {
            let gx = (x as f64 + 0.5) * scale;
            let rgb = if lesion.is_some_and(|l| l.contains(gx, gy)) {
                cfg.lesion_rgb
            } else if blobs.iter().any(|b| b.contains(gx, gy)) {
                cfg.tissue_rgb
            } else {
                cfg.background_rgb
            };
            for c in rgb {
                let n = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                pixels.push((c as f64 + n).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(Level::new(f, w, h, pixels)?)
}

/// Draw a slide. Deterministic in `cfg` (including `cfg.seed`).
pub fn generate_slide(slide_id: &str, cfg: &SynthConfig) -> Result<(SlidePyramid, SlideLabel), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (blobs, lesion) = layout(cfg, &mut rng);
    let finest = draw_level(cfg, &mut rng, &blobs, lesion)?;
    let single = SlidePyramid::new(slide_id, vec![finest.clone()])?;
    let mut levels = vec![finest];
    for &f in &cfg.level_factors[1..] {
        levels.push(slide::level_at_factor(&single, f)?);
    }
    Ok((SlidePyramid::new(slide_id, levels)?, cfg.lesion_kind))
}

/// Fraction of drawn finest-level pixels that are tissue or lesion.
pub fn drawn_tissue_fraction(cfg: &SynthConfig) -> Result<f64, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (blobs, _) = layout(cfg, &mut rng);
    let f = cfg.level_factors[0];
    let (w, h) = (cfg.base_width.div_ceil(f as u64) as usize, cfg.base_height.div_ceil(f as u64) as usize);
    let scale = f as f64 / GEOMETRY_FACTOR as f64;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let (gx, gy) = ((x as f64 + 0.5) * scale, (y as f64 + 0.5) * scale);
            if blobs.iter().any(|b| b.contains(gx, gy)) {
                count += 1;
            }
        }
    }
    Ok(count as f64 / (w * h) as f64)
}

/// splitmix64 finalizer, used to derive independent per-slide seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One planned slide of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideSpec {
    pub slide_id: String,
    pub label: SlideLabel,
    pub seed: u64,
}

/// `counts[c]` slides of class `c`, interleaved by class, with independent
/// seeds.
pub fn plan_corpus(counts: [usize; 4], seed: u64) -> Vec<SlideSpec> {
    let mut out = Vec::with_capacity(counts.iter().sum());
    let max = counts.iter().copied().max().unwrap_or(0);
    for i in 0..max {
        for label in SlideLabel::ALL {
            if i < counts[label.index()] {
                let n = out.len();
                out.push(SlideSpec {
                    slide_id: format!("s{n:04}"),
                    label,
                    seed: mix_seed(seed, n as u64),
                });
            }
        }
    }
    out
}

/// Ground-truth slide labels of one synthetic patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientSpec {
    pub patient_id: String,
    pub slides: Vec<SlideSpec>,
}

/// Patients with five slides each. Label sets cycle through the five stage
/// patterns (negative, ITC only, micro only, 1–3 positive nodes with a
/// macro, 4–5 positive nodes with a macro) and are shuffled per patient.
pub fn plan_patients(count: usize, seed: u64) -> Vec<PatientSpec> {
    use SlideLabel::*;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
    (0..count)
        .map(|p| {
            let mut labels = [Negative; 5];
            match p % 5 {
                0 => {}
                1 => {
                    let k = rng.gen_range(1..=2);
                    labels[..k].fill(Itc);
                }
                2 => {
                    let k = rng.gen_range(1..=2);
                    labels[..k].fill(Micro);
                    if rng.gen_bool(0.5) {
                        labels[k] = Itc;
                    }
                }
                3 => {
                    labels[0] = Macro;
                    let extra = rng.gen_range(0..=2);
                    for l in labels.iter_mut().skip(1).take(extra) {
                        *l = if rng.gen_bool(0.5) { Micro } else { Macro };
                    }
                }
                _ => {
                    labels[0] = Macro;
                    let extra = rng.gen_range(3..=4);
                    for l in labels.iter_mut().skip(1).take(extra) {
                        *l = if rng.gen_bool(0.5) { Micro } else { Macro };
                    }
                }
            }
            for i in (1..5).rev() {
                labels.swap(i, rng.gen_range(0..=i));
            }
            let patient_id = format!("p{p:03}");
            let slides = labels
                .iter()
                .enumerate()
                .map(|(i, &label)| SlideSpec {
                    slide_id: format!("{patient_id}_s{i}"),
                    label,
                    seed: mix_seed(seed, ((p as u64) << 8) | i as u64),
                })
                .collect();
            PatientSpec { patient_id, slides }
        })
        .collect()
}

pub const SLIDE_EXT: &str = "wsip";
pub const LABEL_EXT: &str = "label";
pub const MANIFEST: &str = "patients.tsv";

pub fn slide_path(dir: &Path, slide_id: &str) -> PathBuf {
    dir.join(format!("{slide_id}.{SLIDE_EXT}"))
}

pub fn label_path(dir: &Path, slide_id: &str) -> PathBuf {
    dir.join(format!("{slide_id}.{LABEL_EXT}"))
}

/// Generate `spec` with `template` geometry and write slide and sidecar.
pub fn write_slide_spec(dir: &Path, spec: &SlideSpec, template: &SynthConfig) -> Result<(), SynthError> {
    let cfg = SynthConfig {
        seed: spec.seed,
        lesion_kind: spec.label,
        lesion_rgb: lesion_palette(spec.label),
        ..template.clone()
    };
    let (pyramid, label) = generate_slide(&spec.slide_id, &cfg)?;
    slide::write_slide(&pyramid, slide_path(dir, &spec.slide_id))?;
    slide::write_label_sidecar(label_path(dir, &spec.slide_id), &spec.slide_id, label)?;
    Ok(())
}

/// Write a labelled corpus into `dir`.
pub fn write_corpus(dir: &Path, specs: &[SlideSpec], template: &SynthConfig) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    for s in specs {
        write_slide_spec(dir, s, template)?;
    }
    Ok(())
}

/// Write patient slides, sidecars and the `patient_id<TAB>slide_id×5`
/// manifest into `dir`.
pub fn write_patients(dir: &Path, patients: &[PatientSpec], template: &SynthConfig) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    for p in patients {
        write_corpus(dir, &p.slides, template)?;
        write!(manifest, "{}", p.patient_id)?;
        for s in &p.slides {
            write!(manifest, "\t{}", s.slide_id)?;
        }
        writeln!(manifest)?;
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}
