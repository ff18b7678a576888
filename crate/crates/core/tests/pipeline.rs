//! Training and inference on small synthetic corpora.

use std::fs;
use std::path::{Path, PathBuf};

use gradepipe::aggregate::AggregateError;
use gradepipe::densenet;
use gradepipe::nn;
use gradepipe::pipeline::{self, PipelineConfig, PipelineError, CHECKPOINT_NAME, VIEWS};
use gradepipe::slide::{self, Level, SlideLabel, SlidePyramid};
use gradepipe::synth::{self, SynthConfig};

fn small_cfg() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.roi.num_patches = 2;
    cfg
}

fn template() -> SynthConfig {
    SynthConfig::for_label(SlideLabel::Negative, 0)
}

fn corpus(dir: &Path, counts: [usize; 4], seed: u64) -> PathBuf {
    let data = dir.join("data");
    synth::write_corpus(&data, &synth::plan_corpus(counts, seed), &template()).unwrap();
    data
}

fn fresh_checkpoint(dir: &Path, cfg: &PipelineConfig) -> PathBuf {
    let net = densenet::build(cfg.net, 3).unwrap();
    let path = dir.join("fresh.tncp");
    nn::save_checkpoint(&net.params, &path).unwrap();
    path
}

#[test]
fn zero_epochs_writes_untrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), [2; 4], 1);
    let mut cfg = small_cfg();
    cfg.epochs = 0;
    let out = dir.path().join("run");
    let report = pipeline::train(&cfg, &data, &out).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(report.checkpoint, out.join(CHECKPOINT_NAME));
    assert_eq!(report.val_predictions.len(), report.val_slides.len());
    let store = nn::load_checkpoint(&report.checkpoint).unwrap();
    assert_eq!(store.step(), 0);
    assert_eq!(store, densenet::build(cfg.net, gradepipe::synth::mix_seed(cfg.global_seed, 2)).unwrap().params);
}

#[test]
fn worker_threads_do_not_change_deterministic_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), [2; 4], 2);
    let mut bytes = Vec::new();
    for threads in [1, 2] {
        let mut cfg = small_cfg();
        cfg.worker_threads = threads;
        let out = dir.path().join(format!("t{threads}"));
        let report = pipeline::train(&cfg, &data, &out).unwrap();
        assert_eq!(report.epochs.len(), 1);
        assert!(report.epochs[0].train_loss.is_finite());
        assert!(out.join("epoch1.tncp").exists());
        bytes.push(fs::read(&report.checkpoint).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn missing_class_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), [3, 3, 0, 3], 3);
    let err = pipeline::train(&small_cfg(), &data, &dir.path().join("run")).unwrap_err();
    assert!(matches!(err, PipelineError::MissingClass(SlideLabel::Micro)), "{err}");
    assert!(err.is_input_error());
}

#[test]
fn inference_is_deterministic_and_counts_views() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), [1, 0, 0, 1], 4);
    let mut cfg = small_cfg();
    cfg.roi.num_patches = 20;
    let net = pipeline::load_network(&fresh_checkpoint(dir.path(), &cfg), &cfg).unwrap();
    for path in pipeline::slide_files(&data).unwrap() {
        let (a, ta) = pipeline::infer_slide(&net, &path, &cfg).unwrap();
        let (b, _) = pipeline::infer_slide(&net, &path, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.fallback);
        assert_eq!((ta.patches, ta.forwards), (20, 20 * VIEWS));
        assert_eq!(a.per_patch.len(), 20);
        assert!(a.per_patch.iter().all(|p| (p.scores.iter().sum::<f64>() - VIEWS as f64).abs() < 1e-9));
    }
}

#[test]
fn blank_slide_falls_back_and_is_labelled() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let blank = SlidePyramid::new("blank", vec![Level::filled(64, 40, 30, [250, 250, 250]).unwrap()]).unwrap();
    let path = dir.path().join("blank.wsip");
    slide::write_slide(&blank, &path).unwrap();
    let net = pipeline::load_network(&fresh_checkpoint(dir.path(), &cfg), &cfg).unwrap();
    let (r, _) = pipeline::infer_slide(&net, &path, &cfg).unwrap();
    assert!(r.fallback);
    assert_eq!(r.per_patch.len(), cfg.roi.num_patches);
    assert!(SlideLabel::ALL.contains(&r.label));
}

#[test]
fn patient_wall_clock_is_the_sum_of_its_slides() {
    let dir = tempfile::tempdir().unwrap();
    let patients = dir.path().join("patients");
    synth::write_patients(&patients, &synth::plan_patients(1, 5), &template()).unwrap();
    let mut cfg = small_cfg();
    cfg.roi.num_patches = 20;
    let net = pipeline::load_network(&fresh_checkpoint(dir.path(), &cfg), &cfg).unwrap();
    let manifest = pipeline::read_manifest(&patients).unwrap();
    let paths: Vec<PathBuf> = manifest[0].1.iter().map(|s| synth::slide_path(&patients, s)).collect();
    let r = pipeline::infer_patient(&net, &paths, &cfg).unwrap();
    assert_eq!(r.slides.len(), 5);
    let sum: f64 = r.timings.iter().map(|t| t.total().as_secs_f64()).sum();
    let wall = r.wall.as_secs_f64();
    assert!((wall - sum).abs() <= 0.1 * sum, "wall {wall} s, slide sum {sum} s");
}

#[test]
fn patient_slide_count_is_checked_before_reading() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let net = pipeline::load_network(&fresh_checkpoint(dir.path(), &cfg), &cfg).unwrap();
    let missing: Vec<PathBuf> = (0..6).map(|i| dir.path().join(format!("nope{i}.wsip"))).collect();
    let err = pipeline::infer_patient(&net, &missing, &cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Aggregate(AggregateError::TooManySlides(6))), "{err}");
    let err = pipeline::infer_patient(&net, &[], &cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Aggregate(AggregateError::EmptySlideList)), "{err}");
    let err = pipeline::infer_patient(&net, &missing[..1], &cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Io { .. }), "{err}");
}

#[test]
fn checkpoint_must_match_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg();
    let path = fresh_checkpoint(dir.path(), &cfg);
    let mut other = cfg.clone();
    other.net.growth_rate = 6;
    let err = pipeline::load_network(&path, &other).unwrap_err();
    assert!(matches!(err, PipelineError::ConfigMismatch(_)), "{err}");
    assert!(err.is_input_error());
}

#[test]
fn bench_reports_every_slide() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), [1, 1, 1, 0], 6);
    let cfg = small_cfg();
    let net = pipeline::load_network(&fresh_checkpoint(dir.path(), &cfg), &cfg).unwrap();
    let report = pipeline::bench(&net, &data, &cfg).unwrap();
    assert_eq!((report.slides, report.patients), (3, 1));
    assert_eq!(report.forwards_per_slide, vec![2 * VIEWS; 3]);
    assert!(report.view_seconds > 0.0 && report.patient_seconds > 0.0);
    assert!(report.to_text().contains("slide_over_patch"));
}
