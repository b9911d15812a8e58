//! Case directories and the `report` pipeline.
//!
//! A case directory holds `manifest.json`, one or more `sessions/*.jsonl`
//! logs, and optionally `annotation.geojson`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use wsi_attention::heatmap::{
    average_heatmaps, build_attention_heatmap, write_ahm, AttentionHeatmap, Grid2D, HeatmapParams, MagFilter,
    REPORT_MAG_LEVELS,
};
use wsi_attention::ingest::{
    magnification_stats_with_levels, parse_annotation, parse_session_log, validate_and_clip, write_annotation,
    write_session_log, NavigationSession, SlideManifest, TumorAnnotation,
};
use wsi_attention::metrics::{
    evaluate_case, rasterize_annotation, tumor_probability_map, write_case_reports, CaseReport, ObserverSet,
};
use wsi_attention::render::{render_heatmap, RenderMode};
use wsi_attention::scanpath::{build_scanpath, grade_string_with};
use wsi_attention::synthetic::SyntheticCase;

use crate::config::{write_file, Metadata, RunConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SESSIONS_DIR: &str = "sessions";
pub const ANNOTATION_FILE: &str = "annotation.geojson";

#[derive(Debug, Clone)]
pub struct CaseInput {
    pub case_id: String,
    pub dir: PathBuf,
    pub manifest: SlideManifest,
    /// Validated and clipped, in file-name order.
    pub sessions: Vec<NavigationSession>,
    pub annotation: Option<TumorAnnotation>,
    /// Input files relative to `dir`.
    pub inputs: Vec<String>,
}

pub fn load_manifest(path: &Path) -> Result<SlideManifest> {
    let bytes = fs::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
    SlideManifest::from_json(&bytes).with_context(|| format!("invalid manifest {}", path.display()))
}

pub fn load_session(path: &Path, manifest: &SlideManifest) -> Result<NavigationSession> {
    let bytes = fs::read(path).with_context(|| format!("reading session log {}", path.display()))?;
    let session = parse_session_log(&bytes).with_context(|| format!("in session log {}", path.display()))?;
    validate_and_clip(&session, manifest).with_context(|| format!("validating session log {}", path.display()))
}

pub fn load_annotation(path: &Path, manifest: &SlideManifest) -> Result<TumorAnnotation> {
    let bytes = fs::read(path).with_context(|| format!("reading annotation {}", path.display()))?;
    parse_annotation(&bytes, manifest).with_context(|| format!("invalid annotation {}", path.display()))
}

impl CaseInput {
    pub fn load(dir: &Path) -> Result<Self> {
        let case_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .filter(|n| !n.is_empty() && n != "." && n != "..")
            .unwrap_or_else(|| "case".into());
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            bail!("missing manifest: {} not found", manifest_path.display());
        }
        let manifest = load_manifest(&manifest_path)?;
        let mut inputs = vec![MANIFEST_FILE.to_string()];

        let sessions_dir = dir.join(SESSIONS_DIR);
        let mut logs: Vec<PathBuf> = fs::read_dir(&sessions_dir)
            .with_context(|| format!("reading session directory {}", sessions_dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .with_context(|| format!("listing {}", sessions_dir.display()))?;
        logs.retain(|p| p.extension().is_some_and(|e| e == "jsonl"));
        logs.sort();
        if logs.is_empty() {
            bail!("no session logs (*.jsonl) in {}", sessions_dir.display());
        }
        let mut sessions = Vec::with_capacity(logs.len());
        let mut seen = BTreeSet::new();
        for path in &logs {
            let s = load_session(path, &manifest)?;
            if !seen.insert(s.observer_id.clone()) {
                bail!("observer {:?} appears in more than one log ({})", s.observer_id, path.display());
            }
            inputs.push(format!("{SESSIONS_DIR}/{}", path.file_name().unwrap().to_string_lossy()));
            sessions.push(s);
        }

        let annotation_path = dir.join(ANNOTATION_FILE);
        let annotation = if annotation_path.is_file() {
            inputs.push(ANNOTATION_FILE.to_string());
            Some(load_annotation(&annotation_path, &manifest)?)
        } else {
            None
        };
        Ok(Self {
            case_id,
            dir: dir.to_path_buf(),
            manifest,
            sessions,
            annotation,
            inputs,
        })
    }
}

/// Keeps observer ids usable as file names.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn mag_label(mag: f64) -> String {
    format!("{mag}x")
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub case_id: String,
    pub out_dir: PathBuf,
    pub report: Option<CaseReport>,
    /// Output files relative to `out_dir`, sorted.
    pub outputs: Vec<String>,
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        write_file(&self.dir.join(rel), bytes)?;
        self.written.push(rel.to_string());
        Ok(())
    }

    fn heatmap(&mut self, stem: &str, grid: &Grid2D, sigma: f64) -> Result<()> {
        self.write(&format!("{stem}.ahm"), write_ahm(grid, sigma))?;
        let png = render_heatmap(grid, RenderMode::Gray, None).with_context(|| format!("rendering {stem}"))?;
        self.write(&format!("{stem}.png"), png)
    }
}

fn all_zero(manifest: &SlideManifest, params: &HeatmapParams, level: f64) -> AttentionHeatmap {
    AttentionHeatmap {
        grid: Grid2D::for_slide(manifest, params.scale),
        sigma: params.sigma,
        observers: BTreeSet::new(),
        mag_filter: Some(level),
        degenerate: true,
    }
}

/// Runs the full per-case pipeline into `config.output_dir/<case_id>/`.
///
/// Group maps are means of per-observer maps. A magnification-level group
/// map averages only observers with events at that level and is all zero
/// when there are none.
pub fn run_report(case_dir: &Path, config: &RunConfig) -> Result<ReportOutcome> {
    config.validate()?;
    let case = CaseInput::load(case_dir)?;
    let out_dir = config.output_dir.join(&case.case_id);
    let mut out = Outputs {
        dir: out_dir.clone(),
        written: Vec::new(),
    };
    let params = config.heatmap_params();
    let levels: Vec<Option<f64>> = std::iter::once(None).chain(REPORT_MAG_LEVELS.iter().map(|&m| Some(m))).collect();

    // Per-observer maps for every level, computed once.
    let per_observer: Vec<Vec<Option<AttentionHeatmap>>> = case
        .sessions
        .par_iter()
        .map(|s| {
            levels
                .iter()
                .map(|level| {
                    let filter = level.map(MagFilter::report_bucket);
                    if let Some(f) = &filter {
                        if !s.events.iter().any(|e| f.matches(e.mag)) {
                            return Ok(None);
                        }
                    }
                    let p = HeatmapParams {
                        mag_filter: filter,
                        ..params.clone()
                    };
                    build_attention_heatmap(std::slice::from_ref(s), &case.manifest, &p).map(Some)
                })
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("building heatmaps for case {}", case.case_id))?;

    for set in ObserverSet::EVALUATED {
        let members: Vec<usize> = (0..case.sessions.len()).filter(|&i| set.includes(case.sessions[i].group)).collect();
        if members.is_empty() {
            continue;
        }
        for (li, level) in levels.iter().enumerate() {
            let maps: Vec<AttentionHeatmap> = members.iter().filter_map(|&i| per_observer[i][li].clone()).collect();
            let map = match (maps.is_empty(), level) {
                (true, Some(l)) => all_zero(&case.manifest, &params, *l),
                _ => average_heatmaps(&maps)?,
            };
            let stem = match level {
                None => format!("heatmaps/{}", set.code()),
                Some(m) => format!("heatmaps/{}_{}", set.code(), mag_label(*m)),
            };
            out.heatmap(&stem, &map.grid, map.sigma)?;
        }
    }

    let mut dwell = csv::Writer::from_writer(Vec::new());
    dwell.write_record(["observer_id", "group", "mag", "dwell_ms", "total_ms"])?;
    for s in &case.sessions {
        let stem = file_stem(&s.observer_id);
        let scanpath = build_scanpath(s);
        let mut csv_bytes = Vec::new();
        scanpath.write_csv(&mut csv_bytes)?;
        out.write(&format!("scanpaths/{stem}.csv"), csv_bytes)?;
        if let Some(ann) = &case.annotation {
            let grades = grade_string_with(&scanpath, ann, config.overlap_rule);
            out.write(&format!("scanpaths/{stem}.grades.txt"), format!("{grades}\n"))?;
        }
        let stats = magnification_stats_with_levels(s, &REPORT_MAG_LEVELS);
        for d in &stats.per_mag {
            dwell.write_record([
                s.observer_id.as_str(),
                s.group.code(),
                &mag_label(d.mag),
                &d.dwell_ms.to_string(),
                &stats.total_ms.to_string(),
            ])?;
        }
    }
    out.write("mag_dwell.csv", dwell.into_inner().context("flushing dwell table")?)?;

    let report = match &case.annotation {
        Some(ann) => {
            let mask = rasterize_annotation(ann, &case.manifest, config.scale);
            let tumor = tumor_probability_map(&mask, config.sigma);
            out.heatmap("tumor_map", &tumor.grid, tumor.sigma)?;
            let report = evaluate_case(&case.case_id, &case.sessions, ann, &case.manifest, &config.eval_config())
                .with_context(|| format!("evaluating case {}", case.case_id))?;
            let mut bytes = Vec::new();
            write_case_reports(std::slice::from_ref(&report), &mut bytes)?;
            out.write("report.csv", bytes)?;
            Some(report)
        }
        None => None,
    };

    out.written.sort();
    let mut meta = Metadata::new(
        "report",
        vec![case_dir.display().to_string()],
        case.inputs.clone(),
        config,
    );
    meta.outputs = out.written.clone();
    write_file(&out_dir.join("run.json"), meta.to_json())?;

    Ok(ReportOutcome {
        case_id: case.case_id,
        out_dir,
        report,
        outputs: out.written,
    })
}

/// Writes a case directory in the layout `run_report` expects.
pub fn write_case_dir(case: &SyntheticCase, dir: &Path) -> Result<()> {
    let manifest = serde_json::to_string_pretty(&case.manifest)? + "\n";
    write_file(&dir.join(MANIFEST_FILE), manifest)?;
    write_file(&dir.join(ANNOTATION_FILE), write_annotation(&case.annotation))?;
    for s in &case.sessions {
        let name = format!("{SESSIONS_DIR}/{}.jsonl", file_stem(&s.observer_id));
        write_file(&dir.join(name), write_session_log(s))?;
    }
    Ok(())
}
