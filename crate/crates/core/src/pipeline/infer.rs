//! Slide and patient inference, and the timing benchmark.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::aggregate::{self, AggregateError, ClassActivations, PatientStage, SlideResult, MAX_SLIDES_PER_PATIENT};
use crate::augment::{apply_dihedral, Dihedral};
use crate::densenet::{patches_to_tensor, Network};
use crate::nn::{self, NnError};
use crate::roi;
use crate::slide::{self, SlidePyramid};
use crate::synth::SLIDE_EXT;

use super::{queue, PipelineConfig, PipelineError};

/// Test-time views per patch: the full dihedral group.
pub const VIEWS: usize = 8;

/// Wall-clock breakdown and work counts of one slide.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlideTiming {
    pub read: Duration,
    pub roi: Duration,
    pub extract: Duration,
    pub forward: Duration,
    pub aggregate: Duration,
    pub patches: usize,
    pub forwards: usize,
}

impl SlideTiming {
    pub fn total(&self) -> Duration {
        self.read + self.roi + self.extract + self.forward + self.aggregate
    }
}

/// Load a checkpoint and check it against the configured architecture.
pub fn load_network(checkpoint: &Path, cfg: &PipelineConfig) -> Result<Network, PipelineError> {
    let params = nn::load_checkpoint(checkpoint).map_err(|e| match e {
        NnError::Io(io) => PipelineError::io(checkpoint, io),
        other => PipelineError::Nn(other),
    })?;
    Network::from_params(cfg.net, params).map_err(|e| PipelineError::ConfigMismatch(format!("{}: {e}", checkpoint.display())))
}

/// Sum of the eight dihedral views' class probabilities of one patch.
pub fn score_patch(net: &Network, pixels: &[u8], px: usize) -> Result<ClassActivations, PipelineError> {
    let views: Vec<Vec<u8>> = Dihedral::all().map(|t| apply_dihedral(pixels, px, t)).collect();
    let input = patches_to_tensor(views.iter().map(Vec::as_slice), px)?;
    let out = net.forward(&input)?;
    let rows = out
        .data()
        .chunks_exact(4)
        .map(ClassActivations::from_slice)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate::average_patch(&rows)?)
}

/// Score every patch with all eight views. Patches are spread over
/// `cfg.worker_threads` and merged by index.
fn score_patches(net: &Network, patches: &[Vec<u8>], cfg: &PipelineConfig) -> Result<Vec<ClassActivations>, PipelineError> {
    let px = cfg.roi.patch_px;
    if cfg.worker_threads <= 1 {
        return patches.iter().map(|p| score_patch(net, p, px)).collect();
    }
    let mut out = Vec::with_capacity(patches.len());
    let mut failure = None;
    queue::run(
        patches.len(),
        cfg.worker_threads,
        cfg.queue_capacity.max(cfg.worker_threads),
        true,
        |i| score_patch(net, &patches[i], px),
        |_, r| match r {
            Ok(a) => {
                out.push(a);
                true
            }
            Err(e) => {
                failure = Some(e);
                false
            }
        },
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// ROI map, patch extraction, eight-view scoring and slide aggregation of
/// an already loaded slide.
pub fn infer_pyramid(
    net: &Network,
    pyramid: &SlidePyramid,
    cfg: &PipelineConfig,
) -> Result<(SlideResult, SlideTiming), PipelineError> {
    if net.config != cfg.net {
        return Err(PipelineError::ConfigMismatch("network does not match net.* settings".into()));
    }
    let mut timing = SlideTiming::default();
    let t = Instant::now();
    let level = slide::level_at_factor(pyramid, cfg.roi.work_factor)?;
    let map = roi::roi_map(&level, &cfg.roi, roi::slide_seed(cfg.roi.sampling_seed, pyramid.slide_id()));
    timing.roi = t.elapsed();

    let t = Instant::now();
    let patches: Vec<Vec<u8>> = map
        .centroids
        .points
        .iter()
        .map(|&c| roi::crop(&level, c, cfg.roi.patch_px))
        .collect();
    timing.extract = t.elapsed();

    let t = Instant::now();
    let per_patch = score_patches(net, &patches, cfg)?;
    timing.forward = t.elapsed();
    timing.patches = patches.len();
    timing.forwards = patches.len() * VIEWS;

    let t = Instant::now();
    let scores = aggregate::slide_scores(&per_patch)?;
    let label = cfg.slide_rule.select(&per_patch)?;
    timing.aggregate = t.elapsed();
    let result = SlideResult {
        slide_id: pyramid.slide_id().to_string(),
        per_patch,
        label,
        scores,
        fallback: map.centroids.fallback,
    };
    Ok((result, timing))
}

/// Read a slide container and run [`infer_pyramid`] on it.
pub fn infer_slide(net: &Network, path: &Path, cfg: &PipelineConfig) -> Result<(SlideResult, SlideTiming), PipelineError> {
    let t = Instant::now();
    let pyramid = slide::read_slide(path).map_err(|e| match e {
        slide::SlideError::IoFailure(io) => PipelineError::io(path, io),
        other => PipelineError::Slide(other),
    })?;
    let read = t.elapsed();
    let (result, mut timing) = infer_pyramid(net, &pyramid, cfg)?;
    timing.read = read;
    Ok((result, timing))
}

/// Slide results and stage of one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientResult {
    pub slides: Vec<SlideResult>,
    pub timings: Vec<SlideTiming>,
    pub stage: PatientStage,
    pub wall: Duration,
}

pub fn infer_patient(net: &Network, slides: &[PathBuf], cfg: &PipelineConfig) -> Result<PatientResult, PipelineError> {
    if slides.is_empty() {
        return Err(AggregateError::EmptySlideList.into());
    }
    if slides.len() > MAX_SLIDES_PER_PATIENT {
        return Err(AggregateError::TooManySlides(slides.len()).into());
    }
    let start = Instant::now();
    let mut results = Vec::with_capacity(slides.len());
    let mut timings = Vec::with_capacity(slides.len());
    for path in slides {
        let (r, t) = infer_slide(net, path, cfg)?;
        results.push(r);
        timings.push(t);
    }
    let labels: Vec<_> = results.iter().map(|r| r.label).collect();
    let stage = aggregate::stage_patient(&labels)?;
    Ok(PatientResult {
        slides: results,
        timings,
        stage,
        wall: start.elapsed(),
    })
}

/// Benchmark summary. Times are means in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub slides: usize,
    pub patients: usize,
    pub patches: usize,
    pub forwards: usize,
    /// Forward count of every slide, in slide order.
    pub forwards_per_slide: Vec<usize>,
    pub view_seconds: f64,
    pub patch_seconds: f64,
    pub slide_seconds: f64,
    pub patient_seconds: f64,
}

impl BenchReport {
    pub fn slide_patch_ratio(&self) -> f64 {
        self.slide_seconds / self.patch_seconds
    }

    pub fn patient_slide_ratio(&self) -> f64 {
        self.patient_seconds / self.slide_seconds
    }

    pub fn to_text(&self) -> String {
        format!(
            "slides\t{}\npatients\t{}\npatches\t{}\nforwards\t{}\nview_s\t{:.6}\npatch_s\t{:.6}\nslide_s\t{:.6}\npatient_s\t{:.6}\nslide_over_patch\t{:.3}\npatient_over_slide\t{:.3}\n",
            self.slides,
            self.patients,
            self.patches,
            self.forwards,
            self.view_seconds,
            self.patch_seconds,
            self.slide_seconds,
            self.patient_seconds,
            self.slide_patch_ratio(),
            self.patient_slide_ratio(),
        )
    }
}

/// Every slide container in `dir`, sorted by file name.
pub fn slide_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))? {
        let path = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(SLIDE_EXT) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Time every slide in `dir` on its own, then the same slides again as
/// consecutive 5-slide patients (one patient of all slides if there are
/// fewer than five).
pub fn bench(net: &Network, dir: &Path, cfg: &PipelineConfig) -> Result<BenchReport, PipelineError> {
    let files = slide_files(dir)?;
    if files.is_empty() {
        return Err(PipelineError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no slide containers"),
        ));
    }
    let mut forwards_per_slide = Vec::with_capacity(files.len());
    let (mut slide_total, mut forward_total) = (Duration::ZERO, Duration::ZERO);
    for path in &files {
        let start = Instant::now();
        let (_, t) = infer_slide(net, path, cfg)?;
        slide_total += start.elapsed();
        forward_total += t.forward;
        forwards_per_slide.push(t.forwards);
    }
    let groups: Vec<&[PathBuf]> = if files.len() < MAX_SLIDES_PER_PATIENT {
        vec![&files[..]]
    } else {
        files.chunks_exact(MAX_SLIDES_PER_PATIENT).collect()
    };
    let mut patient_total = Duration::ZERO;
    for g in &groups {
        patient_total += infer_patient(net, g, cfg)?.wall;
    }
    let forwards: usize = forwards_per_slide.iter().sum();
    let patches = forwards / VIEWS;
    let view_seconds = forward_total.as_secs_f64() / forwards.max(1) as f64;
    Ok(BenchReport {
        slides: files.len(),
        patients: groups.len(),
        patches,
        forwards,
        forwards_per_slide,
        view_seconds,
        patch_seconds: view_seconds * VIEWS as f64,
        slide_seconds: slide_total.as_secs_f64() / files.len() as f64,
        patient_seconds: patient_total.as_secs_f64() / groups.len() as f64,
    })
}
