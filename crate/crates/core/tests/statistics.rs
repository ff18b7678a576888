//! Statistical examples: elastic mass preservation, class-balancing
//! frequencies and synthetic tissue coverage.

mod common;

use common::rng;
use gradepipe::augment::{balanced_epoch, elastic_deform, AugmentConfig};
use gradepipe::roi;
use gradepipe::slide::SlideLabel;
use gradepipe::synth::{self, SynthConfig};
use rand::Rng;

#[test]
fn elastic_deformation_preserves_mean_intensity() {
    let cfg = AugmentConfig::default();
    let px = 64;
    let mut r = rng(11);
    for _ in 0..20 {
        let patch: Vec<u8> = (0..px * px * 3).map(|_| r.gen()).collect();
        let out = elastic_deform(&patch, px, &cfg, &mut r);
        assert_eq!(out.len(), patch.len());
        for c in 0..3 {
            let mean = |p: &[u8]| p.iter().skip(c).step_by(3).map(|&v| v as f64).sum::<f64>() / (px * px) as f64;
            let d = (mean(&out) - mean(&patch)).abs();
            assert!(d <= 2.0, "channel {c} mean moved by {d}");
        }
    }
}

#[test]
fn minority_items_recur_at_the_balancing_rate() {
    use SlideLabel::*;
    let mut labels = vec![Negative; 8];
    labels.extend([Itc, Itc, Micro, Micro, Macro, Macro]);
    let mut hits = vec![0usize; labels.len()];
    let epochs = 1000;
    for e in 0..epochs {
        for i in balanced_epoch(&labels, e).unwrap() {
            hits[i] += 1;
        }
    }
    for (i, &n) in hits.iter().enumerate() {
        let per_epoch = n as f64 / epochs as f64;
        if labels[i] == Negative {
            assert_eq!(n, epochs as usize);
        } else {
            assert!((per_epoch - 4.0).abs() <= 0.2, "item {i}: {per_epoch} per epoch");
        }
    }
}

#[test]
fn thresholded_foreground_tracks_drawn_tissue() {
    for (k, label) in SlideLabel::ALL.into_iter().enumerate() {
        for seed in 0..3 {
            let cfg = SynthConfig::for_label(label, 100 * k as u64 + seed);
            let (pyramid, got) = synth::generate_slide("t", &cfg).unwrap();
            assert_eq!(got, label);
            let level = &pyramid.levels()[0];
            let mask = roi::threshold_mask(level, 0.9);
            let measured = mask.count() as f64 / (level.width() * level.height()) as f64;
            let drawn = synth::drawn_tissue_fraction(&cfg).unwrap();
            assert!(drawn > 0.0);
            assert!(
                (measured - drawn).abs() <= 0.1 * drawn,
                "{label:?} seed {seed}: measured {measured}, drawn {drawn}"
            );
        }
    }
}

#[test]
fn every_synthetic_slide_has_roi_foreground() {
    let cfg = gradepipe::pipeline::PipelineConfig::desk();
    let template = SynthConfig::for_label(SlideLabel::Negative, 0);
    for spec in synth::plan_corpus([3; 4], 21) {
        let c = SynthConfig {
            seed: spec.seed,
            lesion_kind: spec.label,
            lesion_rgb: synth::lesion_palette(spec.label),
            ..template.clone()
        };
        let (pyramid, _) = synth::generate_slide(&spec.slide_id, &c).unwrap();
        let level = gradepipe::slide::level_at_factor(&pyramid, cfg.roi.work_factor).unwrap();
        let map = roi::roi_map(&level, &cfg.roi, 0);
        assert!(!map.centroids.fallback, "{} has an empty ROI", spec.slide_id);
        assert!(map.centroids.points.iter().all(|&(x, y)| map.mask.get(x, y)));
    }
}
