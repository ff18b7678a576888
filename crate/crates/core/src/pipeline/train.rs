//! The epoch loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;

use crate::augment::{self, AugmentError};
use crate::densenet::{self, patches_to_tensor};
use crate::nn::{self, Graph, NnError, ParamStore, Tensor};
use crate::roi::{self, Mask};
use crate::slide::{self, Level, SlideLabel, SlidePyramid};
use crate::synth::mix_seed;

use super::{infer_pyramid, load_dataset, queue, split_dataset, PipelineConfig, PipelineError, SlideEntry};

/// File name of the final checkpoint; per-epoch checkpoints are
/// `epoch<k>.tncp`.
pub const CHECKPOINT_NAME: &str = "model.tncp";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean per-sample cross-entropy over the epoch.
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub batches: usize,
    pub seconds: f64,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub checkpoint: PathBuf,
    pub train_slides: Vec<String>,
    pub val_slides: Vec<String>,
    /// Validation predictions of the final model, in `val_slides` order.
    pub val_predictions: Vec<SlideLabel>,
    pub seconds: f64,
}

struct TrainSlide {
    id: String,
    label: SlideLabel,
    level: Level,
    mask: Mask,
}

fn read(entry: &SlideEntry) -> Result<SlidePyramid, PipelineError> {
    slide::read_slide(&entry.path).map_err(|e| match e {
        slide::SlideError::IoFailure(io) => PipelineError::io(&entry.path, io),
        other => PipelineError::Slide(other),
    })
}

fn save(store: &ParamStore, path: &Path) -> Result<(), PipelineError> {
    nn::save_checkpoint(store, path).map_err(|e| match e {
        NnError::Io(io) => PipelineError::io(path, io),
        other => PipelineError::Nn(other),
    })
}

fn one_hot(label: SlideLabel) -> Tensor {
    let mut t = Tensor::zeros(&[1, 4]);
    t.data_mut()[label.index()] = 1.0;
    t
}

/// One training patch: a foreground position drawn afresh for this visit,
/// cropped and augmented. All randomness comes from the sample's own stream.
fn draw_sample(s: &TrainSlide, cfg: &PipelineConfig, seed: u64, index: u64) -> Vec<u8> {
    let mut rng = augment::sample_rng(seed, &s.id, index);
    let centroids = roi::sample_centroids(&s.mask, 1, rng.gen());
    let patch = roi::crop(&s.level, centroids.points[0], cfg.roi.patch_px);
    augment::augment_patch(&patch, cfg.roi.patch_px, &cfg.augment, &mut rng)
}

/// Forward, backward and one Adam update on a batch. Each sample gets its
/// own graph and its loss is scaled by `1/N`, so the accumulated gradient is
/// that of the batch-mean loss. Returns the batch-mean loss.
fn train_step(store: &mut ParamStore, cfg: &PipelineConfig, batch: &[(usize, Vec<u8>, SlideLabel)]) -> Result<f64, NnError> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    store.zero_grad();
    for (_, pixels, label) in batch {
        let mut graph = Graph::new();
        let input = patches_to_tensor([pixels.as_slice()], cfg.roi.patch_px)?;
        let probs = densenet::forward_graph(&cfg.net, store, &mut graph, input)?;
        let ce = graph.cross_entropy(probs, one_hot(*label))?;
        let loss = graph.scale(ce, scale);
        total += graph.value(loss).data()[0];
        graph.backward(loss, store)?;
    }
    Ok(total)
}

/// Train on the labelled slides in `data_dir`, writing checkpoints to
/// `out_dir`.
///
/// Slides are split into training and validation parts. Each epoch visits a
/// class-balanced ordering of the training slides, draws one augmented
/// patch per visit (labelled with its slide's label), steps Adam once per
/// batch, then scores the validation slides through the full inference path
/// and writes a checkpoint.
pub fn train(cfg: &PipelineConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainReport, PipelineError> {
    let start = Instant::now();
    cfg.validate()?;
    let entries = load_dataset(data_dir)?;
    let labels: Vec<SlideLabel> = entries.iter().map(|e| e.label).collect();
    let (train_idx, val_idx) = split_dataset(&labels, cfg.train_fraction, mix_seed(cfg.global_seed, 1))?;
    let train_labels: Vec<SlideLabel> = train_idx.iter().map(|&i| labels[i]).collect();
    if let Err(AugmentError::MissingClass(l)) = augment::balanced_epoch(&train_labels, 0) {
        return Err(PipelineError::MissingClass(l));
    }

    let mut train_set = Vec::with_capacity(train_idx.len());
    for &i in &train_idx {
        let pyramid = read(&entries[i])?;
        let level = slide::level_at_factor(&pyramid, cfg.roi.work_factor)?;
        let mask = roi::roi_mask(&level, &cfg.roi);
        train_set.push(TrainSlide {
            id: entries[i].slide_id.clone(),
            label: entries[i].label,
            level,
            mask,
        });
    }
    let val_set = val_idx.iter().map(|&i| read(&entries[i])).collect::<Result<Vec<_>, _>>()?;

    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let mut net = densenet::build(cfg.net, mix_seed(cfg.global_seed, 2))?;
    let sample_seed = mix_seed(cfg.global_seed, mix_seed(cfg.augment.seed, 3));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut val_predictions = Vec::new();
    let final_path = out_dir.join(CHECKPOINT_NAME);

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let order = augment::balanced_epoch(&train_labels, mix_seed(cfg.global_seed, 1000 + epoch as u64))
            .expect("classes checked above");
        let visits = order.len() as u64;
        let mut batch: Vec<(usize, Vec<u8>, SlideLabel)> = Vec::with_capacity(cfg.batch_size);
        let (mut loss_sum, mut batches, mut seen, mut failure) = (0.0, 0usize, 0usize, None);
        let store = &mut net.params;
        queue::run(
            order.len(),
            cfg.worker_threads,
            cfg.queue_capacity * cfg.batch_size,
            cfg.deterministic,
            |k| {
                let s = &train_set[order[k]];
                draw_sample(s, cfg, sample_seed, epoch as u64 * visits + k as u64)
            },
            |k, pixels| {
                let slide = order[k];
                batch.push((slide, pixels, train_set[slide].label));
                seen += 1;
                let last = batch.len() == cfg.batch_size || seen == order.len();
                if !last {
                    return true;
                }
                let step = train_step(store, cfg, &batch).and_then(|loss| {
                    if loss.is_finite() {
                        nn::adam_step(store, &cfg.adam)?;
                    }
                    Ok(loss)
                });
                match step {
                    Ok(loss) if loss.is_finite() => {
                        loss_sum += loss * batch.len() as f64;
                        batches += 1;
                        batch.clear();
                        true
                    }
                    Ok(loss) => {
                        failure = Some(PipelineError::NonFiniteLoss {
                            epoch,
                            batch: batches,
                            loss,
                            slides: batch.iter().map(|b| train_set[b.0].id.clone()).collect(),
                        });
                        false
                    }
                    Err(e) => {
                        failure = Some(e.into());
                        false
                    }
                }
            },
        );
        if let Some(e) = failure {
            return Err(e);
        }
        net.params.zero_grad();

        val_predictions.clear();
        for p in &val_set {
            val_predictions.push(infer_pyramid(&net, p, cfg)?.0.label);
        }
        let correct = val_idx
            .iter()
            .zip(&val_predictions)
            .filter(|(&i, &p)| labels[i] == p)
            .count();
        let path = out_dir.join(format!("epoch{}.tncp", epoch + 1));
        save(&net.params, &path)?;
        epochs.push(EpochReport {
            epoch: epoch + 1,
            train_loss: loss_sum / order.len() as f64,
            val_accuracy: correct as f64 / val_idx.len() as f64,
            batches,
            seconds: epoch_start.elapsed().as_secs_f64(),
            checkpoint: path,
        });
    }
    if cfg.epochs == 0 {
        for p in &val_set {
            val_predictions.push(infer_pyramid(&net, p, cfg)?.0.label);
        }
    }
    save(&net.params, &final_path)?;

    Ok(TrainReport {
        epochs,
        checkpoint: final_path,
        train_slides: train_idx.iter().map(|&i| entries[i].slide_id.clone()).collect(),
        val_slides: val_idx.iter().map(|&i| entries[i].slide_id.clone()).collect(),
        val_predictions,
        seconds: start.elapsed().as_secs_f64(),
    })
}

