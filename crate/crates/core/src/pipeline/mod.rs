//! Training, inference and benchmarking over a directory of slides.
//!
//! A data directory holds `<slide_id>.wsip` containers, `<slide_id>.label`
//! sidecars for labelled slides, and optionally a `patients.tsv` manifest.

mod config;
mod infer;
pub mod queue;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aggregate::AggregateError;
use crate::nn::NnError;
use crate::slide::{self, SlideError, SlideLabel};
use crate::synth::{SynthError, LABEL_EXT, MANIFEST, SLIDE_EXT};

pub use config::{PipelineConfig, DEFAULT_CFG, DESK_CFG};
pub use infer::{
    bench, infer_patient, infer_pyramid, infer_slide, load_network, score_patch, slide_files, BenchReport, PatientResult, SlideTiming,
    VIEWS,
};
pub use train::{train, EpochReport, TrainReport, CHECKPOINT_NAME};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("need at least 2 slides and a non-empty train and validation part, got {0} slides")]
    TooFewSlides(usize),
    #[error("class {0} has no training slides")]
    MissingClass(SlideLabel),
    #[error("non-finite loss {loss} in epoch {epoch}, batch {batch} (slides {slides:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
        slides: Vec<String>,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> PipelineError {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Caused by the caller's input (config, files, data) rather than a
    /// failure while running.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_)
                | PipelineError::ConfigMismatch(_)
                | PipelineError::TooFewSlides(_)
                | PipelineError::MissingClass(_)
                | PipelineError::Io { .. }
                | PipelineError::BadManifest { .. }
                | PipelineError::Slide(_)
        )
    }
}

/// A labelled slide on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideEntry {
    pub slide_id: String,
    pub path: PathBuf,
    pub label: SlideLabel,
}

/// Every `<id>.label` sidecar in `dir` with its container, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<SlideEntry>, PipelineError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))? {
        let path = entry.map_err(|e| PipelineError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(LABEL_EXT) {
            continue;
        }
        let (slide_id, label) = slide::read_label_sidecar(&path)?;
        let slide_path = dir.join(format!("{slide_id}.{SLIDE_EXT}"));
        if !slide_path.is_file() {
            return Err(PipelineError::io(
                &slide_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "slide named by sidecar is missing"),
            ));
        }
        out.push(SlideEntry {
            slide_id,
            path: slide_path,
            label,
        });
    }
    out.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    Ok(out)
}

/// Rows of `patients.tsv`: patient id and slide ids.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, Vec<String>)>, PipelineError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or("").to_string();
        let slides: Vec<String> = fields.map(str::to_string).collect();
        if id.is_empty() || slides.is_empty() {
            return Err(PipelineError::BadManifest {
                line: i + 1,
                reason: "expected patient_id followed by slide ids".into(),
            });
        }
        rows.push((id, slides));
    }
    Ok(rows)
}

/// Stratified train/validation split: `fraction · n` slides (rounded) go to
/// training, allotted to classes by largest remainder; within each class a
/// seeded shuffle picks the members. Returns sorted index lists.
pub fn split_dataset(labels: &[SlideLabel], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    let n = labels.len();
    let total = (fraction * n as f64).round() as usize;
    if n < 2 || total == 0 || total >= n {
        return Err(PipelineError::TooFewSlides(n));
    }
    let mut by_class: [Vec<usize>; 4] = Default::default();
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    let quotas: Vec<f64> = by_class.iter().map(|m| fraction * m.len() as f64).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total - take.iter().sum::<usize>();
    for &c in order.iter().cycle().take(8) {
        if left == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            left -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (members, k) in by_class.iter_mut().zip(take) {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..k]);
        val.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use SlideLabel::*;

    #[test]
    fn split_arithmetic() {
        let labels = [Negative, Itc, Micro, Macro, Negative, Itc, Micro, Macro, Negative, Itc];
        let (t, v) = split_dataset(&labels, 0.8, 1).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_stratified() {
        let labels: Vec<SlideLabel> = (0..40).map(|i| SlideLabel::ALL[i % 4]).collect();
        let (t, _) = split_dataset(&labels, 0.8, 7).unwrap();
        for l in SlideLabel::ALL {
            assert_eq!(t.iter().filter(|&&i| labels[i] == l).count(), 8);
        }
        assert_eq!(split_dataset(&labels, 0.8, 7).unwrap(), split_dataset(&labels, 0.8, 7).unwrap());
    }

    #[test]
    fn split_rejects_degenerate() {
        assert!(matches!(split_dataset(&[Negative], 0.8, 0), Err(PipelineError::TooFewSlides(1))));
        assert!(split_dataset(&[Negative, Itc], 0.99, 0).is_err());
    }
}
