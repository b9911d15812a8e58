//! Navigation-session logs, slide manifests, and tumor annotations.
//!
//! All coordinates are base-level (highest resolution) slide pixels. Viewport
//! boxes are half-open: `[x0, x1) × [y0, y1)`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{self, Point};

/// Magnification levels a viewer typically snaps to.
pub const DEFAULT_STANDARD_MAGS: [f64; 5] = [2.0, 4.0, 10.0, 20.0, 40.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("missing session header on line 1")]
    MissingHeader,
    #[error("line {0}: timestamp decreases")]
    NonMonotonicTimestamp(usize),
    #[error("line {0}: invalid viewport box (requires x0 < x1 and y0 < y1)")]
    InvalidBox(usize),
    #[error("session end_ms {end_ms} precedes last event at {last_ms}")]
    EndBeforeLastEvent { end_ms: u64, last_ms: u64 },
    #[error("slide mismatch: expected {expected}, found {found}")]
    SlideMismatch { expected: String, found: String },
    #[error("session has no events inside the slide")]
    EmptySession,
    #[error("unknown grade {0:?}")]
    UnknownGrade(String),
    #[error("feature {0}: polygon has fewer than 3 distinct vertices")]
    DegeneratePolygon(usize),
    #[error("feature {0}: polygon ring intersects itself")]
    SelfIntersectingPolygon(usize),
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

pub type Result<T> = std::result::Result<T, IngestError>;

fn default_mags() -> Vec<f64> {
    DEFAULT_STANDARD_MAGS.to_vec()
}

/// Coordinate frame of one slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    pub width_px: u64,
    pub height_px: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_source: Option<String>,
    #[serde(default = "default_mags")]
    pub standard_mags: Vec<f64>,
    /// Magnification of the base level. Defaults to the largest standard magnification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_mag: Option<f64>,
}

impl SlideManifest {
    pub fn new(slide_id: impl Into<String>, width_px: u64, height_px: u64) -> Self {
        Self {
            slide_id: slide_id.into(),
            width_px,
            height_px,
            tile_source: None,
            standard_mags: default_mags(),
            base_mag: None,
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let manifest: SlideManifest = serde_json::from_slice(bytes)
            .map_err(|e| IngestError::InvalidManifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px == 0 || self.height_px == 0 {
            return Err(IngestError::InvalidManifest(
                "slide dimensions must be positive".into(),
            ));
        }
        if self.standard_mags.is_empty() {
            return Err(IngestError::InvalidManifest(
                "standard_mags must not be empty".into(),
            ));
        }
        if self.standard_mags.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(IngestError::InvalidManifest(
                "standard_mags must be positive".into(),
            ));
        }
        if self.standard_mags.windows(2).any(|w| w[0] >= w[1]) {
            return Err(IngestError::InvalidManifest(
                "standard_mags must be strictly increasing".into(),
            ));
        }
        if let Some(base) = self.base_mag {
            if !(base.is_finite() && base > 0.0) {
                return Err(IngestError::InvalidManifest(
                    "base_mag must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn base_magnification(&self) -> f64 {
        self.base_mag
            .unwrap_or_else(|| self.standard_mags.last().copied().unwrap_or(40.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewportEvent {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
    pub mag: f64,
    pub t_ms: u64,
}

impl ViewportEvent {
    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.mag.is_finite() && self.mag > 0.0
    }

    /// Intersection with `[0, width) × [0, height)`, or `None` if empty.
    pub fn clipped(&self, width: u64, height: u64) -> Option<ViewportEvent> {
        let x0 = self.x0.max(0);
        let y0 = self.y0.max(0);
        let x1 = self.x1.min(width as i64);
        let y1 = self.y1.min(height as i64);
        (x0 < x1 && y0 < y1).then_some(ViewportEvent {
            x0,
            y0,
            x1,
            y1,
            ..*self
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "GU")]
    GuSpecialist,
    #[serde(rename = "GEN")]
    General,
}

impl Group {
    pub fn code(self) -> &'static str {
        match self {
            Group::GuSpecialist => "GU",
            Group::General => "GEN",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavigationSession {
    pub slide_id: String,
    pub observer_id: String,
    pub group: Group,
    pub end_ms: Option<u64>,
    pub events: Vec<ViewportEvent>,
}

// Wire records. Field order here fixes the serialized field order.

#[derive(Serialize)]
struct HeaderOut<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    slide_id: &'a str,
    observer_id: &'a str,
    group: Group,
    #[serde(skip_serializing_if = "Option::is_none")]
    end_ms: Option<u64>,
}

#[derive(Deserialize)]
struct HeaderIn {
    slide_id: String,
    observer_id: String,
    group: Group,
    #[serde(default)]
    end_ms: Option<u64>,
}

#[derive(Serialize)]
struct EventOut {
    #[serde(rename = "type")]
    kind: &'static str,
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
    mag: f64,
    t_ms: u64,
}

#[derive(Deserialize)]
struct EventIn {
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
    mag: f64,
    t_ms: u64,
}

fn record_type(value: &Value) -> Option<&str> {
    value.get("type").and_then(Value::as_str)
}

/// Parses a line-delimited JSON session log. Blank lines are skipped but
/// still counted for line numbers; unknown fields are ignored.
pub fn parse_session_log(bytes: &[u8]) -> Result<NavigationSession> {
    let text = std::str::from_utf8(bytes).map_err(|e| IngestError::MalformedLine {
        line: 1,
        reason: format!("invalid UTF-8: {e}"),
    })?;

    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (header_line, header_text) = lines.next().ok_or(IngestError::MissingHeader)?;
    let header_value: Value =
        serde_json::from_str(header_text).map_err(|_| IngestError::MissingHeader)?;
    if record_type(&header_value) != Some("session") {
        return Err(IngestError::MissingHeader);
    }
    let header: HeaderIn =
        serde_json::from_value(header_value).map_err(|e| IngestError::MalformedLine {
            line: header_line,
            reason: e.to_string(),
        })?;

    let mut events = Vec::new();
    let mut last_t: Option<u64> = None;
    for (line, text) in lines {
        let malformed = |reason: String| IngestError::MalformedLine { line, reason };
        let value: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        match record_type(&value) {
            Some("viewport") => {}
            Some(other) => return Err(malformed(format!("unexpected record type {other:?}"))),
            None => return Err(malformed("missing record type".into())),
        }
        let raw: EventIn = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        if !(raw.mag.is_finite() && raw.mag > 0.0) {
            return Err(malformed(format!("magnification must be positive, got {}", raw.mag)));
        }
        if raw.x0 >= raw.x1 || raw.y0 >= raw.y1 {
            return Err(IngestError::InvalidBox(line));
        }
        if last_t.is_some_and(|t| raw.t_ms < t) {
            return Err(IngestError::NonMonotonicTimestamp(line));
        }
        last_t = Some(raw.t_ms);
        events.push(ViewportEvent {
            x0: raw.x0,
            y0: raw.y0,
            x1: raw.x1,
            y1: raw.y1,
            mag: raw.mag,
            t_ms: raw.t_ms,
        });
    }

    if events.is_empty() {
        return Err(IngestError::EmptySession);
    }
    if let (Some(end_ms), Some(last_ms)) = (header.end_ms, last_t) {
        if end_ms < last_ms {
            return Err(IngestError::EndBeforeLastEvent { end_ms, last_ms });
        }
    }

    Ok(NavigationSession {
        slide_id: header.slide_id,
        observer_id: header.observer_id,
        group: header.group,
        end_ms: header.end_ms,
        events,
    })
}

/// Serializes a session in the log format, one record per line.
pub fn write_session_log(session: &NavigationSession) -> String {
    let mut out = String::new();
    let header = HeaderOut {
        kind: "session",
        slide_id: &session.slide_id,
        observer_id: &session.observer_id,
        group: session.group,
        end_ms: session.end_ms,
    };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for e in &session.events {
        out.push_str(&event_line(e));
        out.push('\n');
    }
    out
}

pub fn event_line(e: &ViewportEvent) -> String {
    let record = EventOut {
        kind: "viewport",
        x0: e.x0,
        y0: e.y0,
        x1: e.x1,
        y1: e.y1,
        mag: e.mag,
        t_ms: e.t_ms,
    };
    serde_json::to_string(&record).expect("event serializes")
}

/// Clips every event to the slide and drops events that fall outside it.
pub fn validate_and_clip(
    session: &NavigationSession,
    manifest: &SlideManifest,
) -> Result<NavigationSession> {
    if session.slide_id != manifest.slide_id {
        return Err(IngestError::SlideMismatch {
            expected: manifest.slide_id.clone(),
            found: session.slide_id.clone(),
        });
    }
    let events: Vec<ViewportEvent> = session
        .events
        .iter()
        .filter_map(|e| e.clipped(manifest.width_px, manifest.height_px))
        .collect();
    if events.is_empty() {
        return Err(IngestError::EmptySession);
    }
    Ok(NavigationSession {
        events,
        ..session.clone()
    })
}

/// Time credited to each event: the gap to the next event, and for the final
/// event the gap to `end_ms` (zero when the session end is unknown).
pub fn dwell_times(session: &NavigationSession) -> Vec<u64> {
    let n = session.events.len();
    (0..n)
        .map(|i| {
            let t = session.events[i].t_ms;
            match session.events.get(i + 1) {
                Some(next) => next.t_ms.saturating_sub(t),
                None => session.end_ms.map_or(0, |end| end.saturating_sub(t)),
            }
        })
        .collect()
}

/// Nearest level in `levels` (ascending); equidistant ties go to the lower level.
pub fn snap_magnification(mag: f64, levels: &[f64]) -> f64 {
    let mut best = levels[0];
    let mut best_dist = (mag - best).abs();
    for &level in &levels[1..] {
        let dist = (mag - level).abs();
        if dist < best_dist {
            best = level;
            best_dist = dist;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagDwell {
    pub mag: f64,
    pub dwell_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnificationStats {
    /// One entry per level, in ascending magnification order.
    pub per_mag: Vec<MagDwell>,
    pub total_ms: u64,
}

impl MagnificationStats {
    pub fn dwell_at(&self, mag: f64) -> Option<u64> {
        self.per_mag.iter().find(|d| d.mag == mag).map(|d| d.dwell_ms)
    }

    pub fn credited_ms(&self) -> u64 {
        self.per_mag.iter().map(|d| d.dwell_ms).sum()
    }
}

pub fn magnification_stats(session: &NavigationSession, manifest: &SlideManifest) -> MagnificationStats {
    magnification_stats_with_levels(session, &manifest.standard_mags)
}

pub fn magnification_stats_with_levels(
    session: &NavigationSession,
    levels: &[f64],
) -> MagnificationStats {
    let mut per_mag: Vec<MagDwell> = levels
        .iter()
        .map(|&mag| MagDwell { mag, dwell_ms: 0 })
        .collect();
    for (event, dwell) in session.events.iter().zip(dwell_times(session)) {
        let level = snap_magnification(event.mag, levels);
        let slot = per_mag
            .iter_mut()
            .find(|d| d.mag == level)
            .expect("snapped level is one of the levels");
        slot.dwell_ms += dwell;
    }
    let first = session.events.first().map_or(0, |e| e.t_ms);
    let last = session.events.last().map_or(0, |e| e.t_ms);
    let total_ms = session.end_ms.unwrap_or(last).saturating_sub(first);
    MagnificationStats { per_mag, total_ms }
}

/// Tumor grade of an annotated region. Ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Grade {
    #[serde(rename = "B")]
    Benign,
    G3,
    G4,
    G5,
}

impl Grade {
    pub const ALL: [Grade; 4] = [Grade::Benign, Grade::G3, Grade::G4, Grade::G5];

    pub fn symbol(self) -> &'static str {
        match self {
            Grade::Benign => "B",
            Grade::G3 => "G3",
            Grade::G4 => "G4",
            Grade::G5 => "G5",
        }
    }

    pub fn is_tumor(self) -> bool {
        self != Grade::Benign
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Grade {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "G3" => Ok(Grade::G3),
            "G4" => Ok(Grade::G4),
            "G5" => Ok(Grade::G5),
            "benign" | "B" => Ok(Grade::Benign),
            other => Err(IngestError::UnknownGrade(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// Open ring (closing vertex not repeated).
    pub polygon: Vec<Point>,
    pub grade: Grade,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TumorAnnotation {
    pub slide_id: String,
    pub regions: Vec<Region>,
}

impl TumorAnnotation {
    pub fn empty(slide_id: impl Into<String>) -> Self {
        Self {
            slide_id: slide_id.into(),
            regions: Vec::new(),
        }
    }
}

/// Parses a GeoJSON `FeatureCollection` of graded polygons. Only the outer
/// ring of each polygon is used; vertices are clamped to the slide.
pub fn parse_annotation(bytes: &[u8], manifest: &SlideManifest) -> Result<TumorAnnotation> {
    let invalid = |msg: &str| IngestError::InvalidAnnotation(msg.to_string());
    let root: Value =
        serde_json::from_slice(bytes).map_err(|e| IngestError::InvalidAnnotation(e.to_string()))?;
    if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(invalid("expected a FeatureCollection"));
    }
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| invalid("missing features array"))?;

    let width = manifest.width_px as f64;
    let height = manifest.height_px as f64;
    let mut regions = Vec::with_capacity(features.len());
    for (idx, feature) in features.iter().enumerate() {
        let grade_text = feature
            .pointer("/properties/grade")
            .and_then(Value::as_str)
            .ok_or_else(|| IngestError::InvalidAnnotation(format!("feature {idx}: missing grade")))?;
        let grade: Grade = grade_text.parse()?;

        let geometry = feature
            .get("geometry")
            .ok_or_else(|| IngestError::InvalidAnnotation(format!("feature {idx}: missing geometry")))?;
        if geometry.get("type").and_then(Value::as_str) != Some("Polygon") {
            return Err(IngestError::InvalidAnnotation(format!(
                "feature {idx}: geometry must be a Polygon"
            )));
        }
        let ring = geometry
            .pointer("/coordinates/0")
            .and_then(Value::as_array)
            .ok_or_else(|| IngestError::InvalidAnnotation(format!("feature {idx}: missing ring")))?;

        let mut polygon = Vec::with_capacity(ring.len());
        for vertex in ring {
            let pair = vertex.as_array().filter(|p| p.len() >= 2);
            let coords = pair.and_then(|p| Some((p[0].as_f64()?, p[1].as_f64()?)));
            match coords {
                Some((x, y)) if x.is_finite() && y.is_finite() => polygon.push(Point::new(x, y)),
                _ => {
                    return Err(IngestError::InvalidAnnotation(format!(
                        "feature {idx}: bad vertex {vertex}"
                    )))
                }
            }
        }
        let polygon = geometry::open_ring(polygon);
        if geometry::distinct_vertex_count(&polygon) < 3 {
            return Err(IngestError::DegeneratePolygon(idx));
        }
        if !geometry::is_simple(&polygon) {
            return Err(IngestError::SelfIntersectingPolygon(idx));
        }
        let polygon = polygon
            .into_iter()
            .map(|p| Point::new(p.x.clamp(0.0, width), p.y.clamp(0.0, height)))
            .collect();
        regions.push(Region { polygon, grade });
    }

    Ok(TumorAnnotation {
        slide_id: manifest.slide_id.clone(),
        regions,
    })
}

/// Serializes an annotation back to the GeoJSON subset, closing each ring.
pub fn write_annotation(annotation: &TumorAnnotation) -> String {
    let features: Vec<Value> = annotation
        .regions
        .iter()
        .map(|r| {
            let mut ring: Vec<Value> = r
                .polygon
                .iter()
                .map(|p| serde_json::json!([p.x, p.y]))
                .collect();
            if let Some(first) = ring.first().cloned() {
                ring.push(first);
            }
            let grade = match r.grade {
                Grade::Benign => "benign",
                other => other.symbol(),
            };
            serde_json::json!({
                "type": "Feature",
                "geometry": { "type": "Polygon", "coordinates": [ring] },
                "properties": { "grade": grade },
            })
        })
        .collect();
    serde_json::to_string(&serde_json::json!({
        "type": "FeatureCollection",
        "features": features,
    }))
    .expect("annotation serializes")
}

/// Observer ids present across sessions, sorted.
pub fn observer_ids<'a>(sessions: impl IntoIterator<Item = &'a NavigationSession>) -> BTreeSet<String> {
    sessions.into_iter().map(|s| s.observer_id.clone()).collect()
}
