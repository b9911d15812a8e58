//! Reconstruction and evaluation of pathologist attention from whole-slide
//! image navigation logs.
//!
//! - [`ingest`]: session logs, slide manifests, tumor annotations.
//! - [`heatmap`]: viewport-coverage attention heatmaps.
//! - [`scanpath`]: viewport-centre scanpaths and grade-string alignment.
//! - [`metrics`]: tumor probability maps, histogram matching, correlation,
//!   Welch's t-test, and per-case evaluation.
//! - [`prediction`]: patch gridding, intensity bins, a baseline patch
//!   classifier, and heatmap reassembly.
//! - [`render`]: PNG rendering of heatmaps.
//! - [`synthetic`]: deterministic synthetic cases.

pub mod geometry;
pub mod heatmap;
pub mod ingest;
pub mod metrics;
pub mod prediction;
pub mod render;
pub mod scanpath;
pub mod synthetic;

pub use heatmap::{AttentionHeatmap, Grid2D, HeatmapParams, Scale};
pub use ingest::{Grade, Group, NavigationSession, SlideManifest, TumorAnnotation, ViewportEvent};
pub use metrics::{CaseReport, EvalConfig, MatchDirection};
pub use scanpath::{AlignmentScoring, GradeString, Scanpath};
