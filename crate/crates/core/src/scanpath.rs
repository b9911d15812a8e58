//! Scanpaths from viewport centres, and the Semantic Sequence Score.
//!
//! A scanpath is projected onto a string of tumor grades (one symbol per
//! viewport centre) and pairs of such strings are compared by global
//! alignment. The normalized alignment score is the Semantic Sequence Score.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Point};
use crate::ingest::{dwell_times, Grade, NavigationSession, TumorAnnotation, ViewportEvent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScanpathError {
    #[error("grade string is empty")]
    EmptyString,
    #[error("need at least two observers, got {0}")]
    NeedTwoObservers(usize),
    #[error("invalid alignment scoring: {0}")]
    InvalidScoring(String),
    #[error("unknown grade symbol {0:?}")]
    UnknownSymbol(String),
    #[error("session slide {found} does not match annotation slide {expected}")]
    SlideMismatch { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, ScanpathError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub cx: f64,
    pub cy: f64,
    pub t_ms: u64,
    pub mag: f64,
    pub dwell_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scanpath {
    pub points: Vec<ScanPoint>,
}

impl Scanpath {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// CSV with header `cx,cy,t_ms,mag,dwell_ms`.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> csv::Result<Scanpath> {
        let points = csv::Reader::from_reader(reader)
            .deserialize()
            .collect::<csv::Result<Vec<ScanPoint>>>()?;
        Ok(Scanpath { points })
    }
}

/// Midpoint of the viewport box.
pub fn viewport_center(event: &ViewportEvent) -> (f64, f64) {
    (
        (event.x0 as f64 + event.x1 as f64) / 2.0,
        (event.y0 as f64 + event.y1 as f64) / 2.0,
    )
}

pub fn build_scanpath(session: &NavigationSession) -> Scanpath {
    let points = session
        .events
        .iter()
        .zip(dwell_times(session))
        .map(|(e, dwell_ms)| {
            let (cx, cy) = viewport_center(e);
            ScanPoint {
                cx,
                cy,
                t_ms: e.t_ms,
                mag: e.mag,
                dwell_ms,
            }
        })
        .collect();
    Scanpath { points }
}

/// Sequence of grade symbols, one per scanpath point.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct GradeString(pub Vec<Grade>);

impl GradeString {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn symbols(&self) -> &[Grade] {
        &self.0
    }
}

impl fmt::Display for GradeString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, g) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(g.symbol())?;
        }
        Ok(())
    }
}

impl FromStr for GradeString {
    type Err = ScanpathError;

    /// Accepts whitespace- or hyphen-separated tokens (`B`, `G3`, `G4`, `G5`).
    fn from_str(s: &str) -> Result<Self> {
        s.split(|c: char| c.is_whitespace() || c == '-')
            .filter(|t| !t.is_empty())
            .map(|t| match t {
                "B" => Ok(Grade::Benign),
                "G3" => Ok(Grade::G3),
                "G4" => Ok(Grade::G4),
                "G5" => Ok(Grade::G5),
                other => Err(ScanpathError::UnknownSymbol(other.to_string())),
            })
            .collect::<Result<Vec<_>>>()
            .map(GradeString)
    }
}

/// How to label a point covered by several annotated regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapRule {
    #[default]
    HighestGrade,
    LowestGrade,
}

/// Grade of the region containing `p`, or `B` when none does.
pub fn label_point(annotation: &TumorAnnotation, p: Point, rule: OverlapRule) -> Grade {
    let mut hits = annotation
        .regions
        .iter()
        .filter(|r| geometry::contains(&r.polygon, p))
        .map(|r| r.grade);
    let first = match hits.next() {
        Some(g) => g,
        None => return Grade::Benign,
    };
    hits.fold(first, |acc, g| match rule {
        OverlapRule::HighestGrade => acc.max(g),
        OverlapRule::LowestGrade => acc.min(g),
    })
}

pub fn grade_string(scanpath: &Scanpath, annotation: &TumorAnnotation) -> GradeString {
    grade_string_with(scanpath, annotation, OverlapRule::default())
}

pub fn grade_string_with(scanpath: &Scanpath, annotation: &TumorAnnotation, rule: OverlapRule) -> GradeString {
    GradeString(
        scanpath
            .points
            .iter()
            .map(|p| label_point(annotation, Point::new(p.cx, p.cy), rule))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScoring {
    #[serde(rename = "match")]
    pub match_score: f64,
    pub mismatch: f64,
    pub gap: f64,
}

impl Default for AlignmentScoring {
    fn default() -> Self {
        Self {
            match_score: 1.0,
            mismatch: 0.0,
            gap: 0.0,
        }
    }
}

impl AlignmentScoring {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.match_score, self.mismatch, self.gap].iter().all(|v| v.is_finite());
        if !finite || self.match_score <= self.mismatch || self.match_score <= self.gap {
            return Err(ScanpathError::InvalidScoring(format!(
                "need match > mismatch and match > gap, got {self:?}"
            )));
        }
        Ok(())
    }

    #[inline]
    fn substitution(&self, a: Grade, b: Grade) -> f64 {
        if a == b {
            self.match_score
        } else {
            self.mismatch
        }
    }
}

/// Global (Needleman-Wunsch) alignment score, linear gap cost.
pub fn align_score(a: &GradeString, b: &GradeString, scoring: &AlignmentScoring) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(ScanpathError::EmptyString);
    }
    let (a, b) = (a.symbols(), b.symbols());
    let mut prev: Vec<f64> = (0..=b.len()).map(|j| j as f64 * scoring.gap).collect();
    let mut curr = vec![0.0; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        curr[0] = (i + 1) as f64 * scoring.gap;
        for (j, &bj) in b.iter().enumerate() {
            let diag = prev[j] + scoring.substitution(ai, bj);
            let up = prev[j + 1] + scoring.gap;
            let left = curr[j] + scoring.gap;
            curr[j + 1] = diag.max(up).max(left);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[b.len()])
}

/// Alignment score divided by `match × max(|a|, |b|)`.
pub fn semantic_sequence_score(a: &GradeString, b: &GradeString, scoring: &AlignmentScoring) -> Result<f64> {
    let raw = align_score(a, b, scoring)?;
    Ok(raw / (scoring.match_score * a.len().max(b.len()) as f64))
}

/// Grade strings for a set of sessions, in session order.
pub fn grade_strings(
    sessions: &[NavigationSession],
    annotation: &TumorAnnotation,
    rule: OverlapRule,
) -> Result<Vec<GradeString>> {
    sessions
        .iter()
        .map(|s| {
            if s.slide_id != annotation.slide_id {
                return Err(ScanpathError::SlideMismatch {
                    expected: annotation.slide_id.clone(),
                    found: s.slide_id.clone(),
                });
            }
            Ok(grade_string_with(&build_scanpath(s), annotation, rule))
        })
        .collect()
}

/// Mean SSS over all unordered pairs `i < j`, reduced in pair order.
pub fn mean_pairwise_of(strings: &[GradeString], scoring: &AlignmentScoring) -> Result<f64> {
    if strings.len() < 2 {
        return Err(ScanpathError::NeedTwoObservers(strings.len()));
    }
    let pairs: Vec<(usize, usize)> = (0..strings.len())
        .flat_map(|i| (i + 1..strings.len()).map(move |j| (i, j)))
        .collect();
    let scores = pairs
        .par_iter()
        .map(|&(i, j)| semantic_sequence_score(&strings[i], &strings[j], scoring))
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean SSS over every pair drawn one from each set.
pub fn mean_between_of(
    left: &[GradeString],
    right: &[GradeString],
    scoring: &AlignmentScoring,
) -> Result<f64> {
    if left.is_empty() || right.is_empty() {
        return Err(ScanpathError::NeedTwoObservers(left.len().min(right.len())));
    }
    let scores = left
        .par_iter()
        .flat_map_iter(|a| right.iter().map(move |b| semantic_sequence_score(a, b, scoring)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn mean_pairwise_sss(
    sessions: &[NavigationSession],
    annotation: &TumorAnnotation,
    scoring: &AlignmentScoring,
) -> Result<f64> {
    if sessions.len() < 2 {
        return Err(ScanpathError::NeedTwoObservers(sessions.len()));
    }
    let strings = grade_strings(sessions, annotation, OverlapRule::default())?;
    mean_pairwise_of(&strings, scoring)
}
