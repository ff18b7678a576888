//! From per-view class probabilities to slide labels and patient stages.
//!
//! Score vectors are ordered (negative, ITC, micro, macro). The 8 views of a
//! patch are summed (not averaged); a slide's score for each class is the
//! maximum of that class over its patches, and the slide label is the
//! highest-scoring class with ties going to the more severe label.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::slide::SlideLabel;

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("empty activation list")]
    EmptyList,
    #[error("activation vectors have {found} classes, expected 4")]
    WrongLength { found: usize },
    #[error("patient has no slides")]
    EmptySlideList,
    #[error("patient has {0} slides, at most 5 are allowed")]
    TooManySlides(usize),
    #[error("line {line}: {reason}")]
    BadTsv { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassActivations {
    pub scores: [f64; 4],
    /// Entries are a probability distribution.
    pub normalized: bool,
}

impl ClassActivations {
    pub fn probabilities(scores: [f64; 4]) -> ClassActivations {
        ClassActivations { scores, normalized: true }
    }

    pub fn from_slice(row: &[f64]) -> Result<ClassActivations, AggregateError> {
        let scores: [f64; 4] = row.try_into().map_err(|_| AggregateError::WrongLength { found: row.len() })?;
        Ok(ClassActivations::probabilities(scores))
    }
}

/// Index of the largest entry; ties go to the higher index (more severe).
fn severe_argmax(scores: &[f64; 4]) -> SlideLabel {
    let mut best = 3;
    for c in (0..3).rev() {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    SlideLabel::from_index(best).expect("index < 4")
}

/// Elementwise sum of the views of one patch.
pub fn average_patch(views: &[ClassActivations]) -> Result<ClassActivations, AggregateError> {
    let first = views.first().ok_or(AggregateError::EmptyList)?;
    if views.len() == 1 {
        return Ok(*first);
    }
    let mut scores = [0.0; 4];
    for v in views {
        for (s, x) in scores.iter_mut().zip(v.scores) {
            *s += x;
        }
    }
    Ok(ClassActivations {
        scores,
        normalized: false,
    })
}

/// Per-class maximum over patches.
pub fn slide_scores(per_patch: &[ClassActivations]) -> Result<[f64; 4], AggregateError> {
    if per_patch.is_empty() {
        return Err(AggregateError::EmptyList);
    }
    let mut best = [f64::NEG_INFINITY; 4];
    for p in per_patch {
        for (b, s) in best.iter_mut().zip(p.scores) {
            *b = b.max(s);
        }
    }
    Ok(best)
}

pub fn select_slide_class(per_patch: &[ClassActivations]) -> Result<SlideLabel, AggregateError> {
    Ok(severe_argmax(&slide_scores(per_patch)?))
}

/// Most severe of the per-patch argmax labels.
pub fn select_slide_class_ranked(per_patch: &[ClassActivations]) -> Result<SlideLabel, AggregateError> {
    per_patch
        .iter()
        .map(|p| severe_argmax(&p.scores))
        .max()
        .ok_or(AggregateError::EmptyList)
}

/// Slide-level selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SlideRule {
    #[default]
    Max,
    Ranked,
}

impl SlideRule {
    pub fn select(self, per_patch: &[ClassActivations]) -> Result<SlideLabel, AggregateError> {
        match self {
            SlideRule::Max => select_slide_class(per_patch),
            SlideRule::Ranked => select_slide_class_ranked(per_patch),
        }
    }
}

impl FromStr for SlideRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(SlideRule::Max),
            "ranked" => Ok(SlideRule::Ranked),
            other => Err(format!("unknown slide rule {other:?}, expected max or ranked")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatientStage {
    PN0,
    PN0ITC,
    PN1mi,
    PN1,
    PN2,
}

impl PatientStage {
    pub const ALL: [PatientStage; 5] = [
        PatientStage::PN0,
        PatientStage::PN0ITC,
        PatientStage::PN1mi,
        PatientStage::PN1,
        PatientStage::PN2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatientStage::PN0 => "pN0",
            PatientStage::PN0ITC => "pN0(i+)",
            PatientStage::PN1mi => "pN1mi",
            PatientStage::PN1 => "pN1",
            PatientStage::PN2 => "pN2",
        }
    }
}

impl fmt::Display for PatientStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatientStage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PatientStage::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

pub const MAX_SLIDES_PER_PATIENT: usize = 5;

/// pN stage from the slide labels of one patient. Only micro- and
/// macro-metastases count as positive nodes.
pub fn stage_patient(slides: &[SlideLabel]) -> Result<PatientStage, AggregateError> {
    if slides.is_empty() {
        return Err(AggregateError::EmptySlideList);
    }
    if slides.len() > MAX_SLIDES_PER_PATIENT {
        return Err(AggregateError::TooManySlides(slides.len()));
    }
    let has = |l| slides.contains(&l);
    let nodes = slides
        .iter()
        .filter(|l| matches!(l, SlideLabel::Micro | SlideLabel::Macro))
        .count();
    Ok(if has(SlideLabel::Macro) {
        if nodes <= 3 {
            PatientStage::PN1
        } else {
            PatientStage::PN2
        }
    } else if has(SlideLabel::Micro) {
        PatientStage::PN1mi
    } else if has(SlideLabel::Itc) {
        PatientStage::PN0ITC
    } else {
        PatientStage::PN0
    })
}

/// Aggregated result of one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideResult {
    pub slide_id: String,
    pub per_patch: Vec<ClassActivations>,
    pub label: SlideLabel,
    pub scores: [f64; 4],
    /// Centroids came from the empty-mask fallback.
    pub fallback: bool,
}

pub const SLIDE_TSV_HEADER: &str = "slide_id\tlabel\ts_neg\ts_itc\ts_micro\ts_macro";
pub const PATIENT_TSV_HEADER: &str = "patient_id\tstage";

/// Floats are written in shortest round-trip form.
pub fn slide_tsv(results: &[SlideResult]) -> String {
    let mut s = format!("{SLIDE_TSV_HEADER}\n");
    for r in results {
        write!(s, "{}\t{}", r.slide_id, r.label).expect("string write");
        for v in r.scores {
            write!(s, "\t{v}").expect("string write");
        }
        s.push('\n');
    }
    s
}

/// Rows of a slide TSV: `(slide_id, label, scores)`.
pub fn parse_slide_tsv(text: &str) -> Result<Vec<(String, SlideLabel, [f64; 4])>, AggregateError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line == SLIDE_TSV_HEADER || line.is_empty() {
            continue;
        }
        let bad = |reason: String| AggregateError::BadTsv { line: i + 1, reason };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", f.len())));
        }
        let label = f[1].parse::<SlideLabel>().map_err(|e| bad(e.to_string()))?;
        let mut scores = [0.0; 4];
        for (s, v) in scores.iter_mut().zip(&f[2..]) {
            *s = v.parse().map_err(|_| bad(format!("bad score {v:?}")))?;
        }
        out.push((f[0].to_string(), label, scores));
    }
    Ok(out)
}

pub fn patient_tsv(rows: &[(String, PatientStage)]) -> String {
    let mut s = format!("{PATIENT_TSV_HEADER}\n");
    for (id, stage) in rows {
        writeln!(s, "{id}\t{stage}").expect("string write");
    }
    s
}

pub fn parse_patient_tsv(text: &str) -> Result<Vec<(String, PatientStage)>, AggregateError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line == PATIENT_TSV_HEADER || line.is_empty() {
            continue;
        }
        let bad = |reason: String| AggregateError::BadTsv { line: i + 1, reason };
        let (id, stage) = line.split_once('\t').ok_or_else(|| bad("expected 2 fields".into()))?;
        out.push((id.to_string(), stage.parse().map_err(bad)?));
    }
    Ok(out)
}
