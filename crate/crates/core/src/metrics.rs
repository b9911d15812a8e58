//! Evaluation of attention against tumor annotations.
//!
//! Annotations are rasterized into a binary tumor mask, smoothed into a tumor
//! probability map, and compared to attention heatmaps by Pearson
//! correlation after histogram matching. Scanpath consistency within an
//! observer set is summarized by the mean pairwise Semantic Sequence Score.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::geometry;
use crate::heatmap::{
    self, average_heatmaps, AttentionHeatmap, Grid2D, HeatmapError, HeatmapParams, Scale,
};
use crate::ingest::{Group, NavigationSession, SlideManifest, TumorAnnotation};
use crate::scanpath::{self, AlignmentScoring, OverlapRule, ScanpathError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("grid dimensions differ: {0}")]
    DimensionMismatch(String),
    #[error("correlation undefined: {0} map is constant")]
    ConstantInput(&'static str),
    #[error("t-test needs at least two samples per group (got {0} and {1})")]
    InsufficientData(usize, usize),
    #[error("t-test sample has zero variance")]
    ZeroVariance,
    #[error("no sessions to evaluate")]
    NoSessions,
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Scanpath(#[from] ScanpathError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn ensure_same_shape(a: &Grid2D, b: &Grid2D) -> Result<()> {
    if a.width == b.width && a.height == b.height {
        Ok(())
    } else {
        Err(MetricsError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )))
    }
}

/// Binary union mask of all annotated regions; a cell is set iff its centre
/// is inside some region (even-odd rule). Grades are ignored.
pub fn rasterize_annotation(annotation: &TumorAnnotation, manifest: &SlideManifest, scale: Scale) -> Grid2D {
    let mut grid = Grid2D::for_slide(manifest, scale);
    let w = grid.width;
    let mut crossings = Vec::new();
    for region in &annotation.regions {
        let (_, min_y, _, max_y) = geometry::bounds(&region.polygon);
        for y in 0..grid.height {
            let cy = scale.cell_center(y);
            if cy < min_y || cy > max_y {
                continue;
            }
            crossings.clear();
            geometry::scanline_crossings(&region.polygon, cy, &mut crossings);
            crossings.sort_by(f64::total_cmp);
            for span in crossings.chunks_exact(2) {
                let (lo, hi) = (span[0], span[1]);
                let mut x = ((lo * scale.num() as f64 / scale.den() as f64) - 0.5).ceil().max(0.0) as usize;
                while x > 0 && scale.cell_center(x - 1) >= lo {
                    x -= 1;
                }
                while x < w && scale.cell_center(x) < lo {
                    x += 1;
                }
                while x < w && scale.cell_center(x) < hi {
                    grid.values[y * w + x] = 1.0;
                    x += 1;
                }
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct TumorProbabilityMap {
    pub grid: Grid2D,
    pub sigma: f64,
}

pub fn tumor_probability_map(mask: &Grid2D, sigma: f64) -> TumorProbabilityMap {
    let smoothed = heatmap::gaussian_smooth(mask, sigma);
    TumorProbabilityMap {
        grid: heatmap::min_max_normalize(&smoothed),
        sigma,
    }
}

/// Rank-based histogram specification: the k-th smallest source cell (ties
/// by row-major index) receives the k-th smallest reference value.
pub fn histogram_match(source: &Grid2D, reference: &Grid2D) -> Result<Grid2D> {
    ensure_same_shape(source, reference)?;
    let mut order: Vec<usize> = (0..source.values.len()).collect();
    order.sort_by(|&i, &j| source.values[i].total_cmp(&source.values[j]).then(i.cmp(&j)));
    let mut sorted_ref = reference.values.clone();
    sorted_ref.sort_by(f64::total_cmp);
    let mut out = source.clone();
    for (rank, &idx) in order.iter().enumerate() {
        out.values[idx] = sorted_ref[rank];
    }
    Ok(out)
}

/// Pearson correlation over all cells.
pub fn cross_correlation(a: &Grid2D, b: &Grid2D) -> Result<f64> {
    ensure_same_shape(a, b)?;
    pearson(&a.values, &b.values)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if !(var_a > 0.0) {
        return Err(MetricsError::ConstantInput("first"));
    }
    if !(var_b > 0.0) {
        return Err(MetricsError::ConstantInput("second"));
    }
    Ok((cov / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Welch's unequal-variance t-test, two-sided.
pub fn welch_t_test(xs: &[f64], ys: &[f64]) -> Result<WelchTest> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(MetricsError::InsufficientData(xs.len(), ys.len()));
    }
    let (mx, vx) = mean_and_variance(xs);
    let (my, vy) = mean_and_variance(ys);
    if !(vx > 0.0 && vy > 0.0) {
        return Err(MetricsError::ZeroVariance);
    }
    let (nx, ny) = (xs.len() as f64, ys.len() as f64);
    let (sx, sy) = (vx / nx, vy / ny);
    let se2 = sx + sy;
    let t = (mx - my) / se2.sqrt();
    let df = se2 * se2 / (sx * sx / (nx - 1.0) + sy * sy / (ny - 1.0));
    // P(|T| > |t|) = I_{df / (df + t^2)}(df / 2, 1 / 2)
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t));
    Ok(WelchTest { t, p, df })
}

/// Which map is transformed when the two are histogram matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchDirection {
    /// Attention values are remapped onto the tumor map's distribution.
    #[default]
    AttentionToTumor,
    TumorToAttention,
    None,
}

impl MatchDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchDirection::AttentionToTumor => "attention_to_tumor",
            MatchDirection::TumorToAttention => "tumor_to_attention",
            MatchDirection::None => "none",
        }
    }
}

impl fmt::Display for MatchDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MatchDirection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attention_to_tumor" => Ok(Self::AttentionToTumor),
            "tumor_to_attention" => Ok(Self::TumorToAttention),
            "none" => Ok(Self::None),
            other => Err(format!("unknown match direction {other:?}")),
        }
    }
}

/// CC between an attention map and a tumor map after histogram matching.
pub fn attention_tumor_cc(attention: &Grid2D, tumor: &Grid2D, direction: MatchDirection) -> Result<f64> {
    match direction {
        MatchDirection::AttentionToTumor => cross_correlation(&histogram_match(attention, tumor)?, tumor),
        MatchDirection::TumorToAttention => cross_correlation(attention, &histogram_match(tumor, attention)?),
        MatchDirection::None => cross_correlation(attention, tumor),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ObserverSet {
    #[serde(rename = "all")]
    All,
    #[serde(rename = "GU")]
    GuSpecialists,
    #[serde(rename = "GEN")]
    General,
}

impl ObserverSet {
    pub const EVALUATED: [ObserverSet; 3] = [ObserverSet::All, ObserverSet::GuSpecialists, ObserverSet::General];

    pub fn code(self) -> &'static str {
        match self {
            ObserverSet::All => "all",
            ObserverSet::GuSpecialists => "GU",
            ObserverSet::General => "GEN",
        }
    }

    pub fn includes(self, group: Group) -> bool {
        match self {
            ObserverSet::All => true,
            ObserverSet::GuSpecialists => group == Group::GuSpecialist,
            ObserverSet::General => group == Group::General,
        }
    }

    pub fn select(self, sessions: &[NavigationSession]) -> Vec<NavigationSession> {
        sessions.iter().filter(|s| self.includes(s.group)).cloned().collect()
    }
}

impl fmt::Display for ObserverSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub scale: Scale,
    pub sigma: f64,
    pub scoring: AlignmentScoring,
    pub match_direction: MatchDirection,
    pub overlap_rule: OverlapRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scale: Scale::SIXTEENTH,
            sigma: 16.0,
            scoring: AlignmentScoring::default(),
            match_direction: MatchDirection::default(),
            overlap_rule: OverlapRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub set: ObserverSet,
    pub cc: f64,
    /// Mean within-set pairwise SSS; absent with fewer than two observers.
    pub sss: Option<f64>,
    pub n_observers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub match_direction: MatchDirection,
    pub rows: Vec<SetMetrics>,
}

impl CaseReport {
    pub fn row(&self, set: ObserverSet) -> Option<&SetMetrics> {
        self.rows.iter().find(|r| r.set == set)
    }
}

/// Group heatmap: mean of per-observer normalized heatmaps, renormalized.
pub fn group_heatmap(
    sessions: &[NavigationSession],
    manifest: &SlideManifest,
    params: &HeatmapParams,
) -> std::result::Result<AttentionHeatmap, HeatmapError> {
    if sessions.is_empty() {
        return Err(HeatmapError::EmptyInput);
    }
    let per_observer = sessions
        .iter()
        .map(|s| heatmap::build_attention_heatmap(std::slice::from_ref(s), manifest, params))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    average_heatmaps(&per_observer)
}

/// Attention-vs-tumor CC and within-set SSS for all observers and each group.
/// Sets without sessions are omitted from the report.
pub fn evaluate_case(
    case_id: &str,
    sessions: &[NavigationSession],
    annotation: &TumorAnnotation,
    manifest: &SlideManifest,
    config: &EvalConfig,
) -> Result<CaseReport> {
    if sessions.is_empty() {
        return Err(MetricsError::NoSessions);
    }
    config.scoring.validate()?;
    let mask = rasterize_annotation(annotation, manifest, config.scale);
    let tumor = tumor_probability_map(&mask, config.sigma);
    let params = HeatmapParams {
        scale: config.scale,
        sigma: config.sigma,
        mag_filter: None,
    };

    let mut rows = Vec::new();
    for set in ObserverSet::EVALUATED {
        let members = set.select(sessions);
        if members.is_empty() {
            continue;
        }
        let attention = group_heatmap(&members, manifest, &params)?;
        let cc = attention_tumor_cc(&attention.grid, &tumor.grid, config.match_direction)?;
        let sss = if members.len() >= 2 {
            let strings = scanpath::grade_strings(&members, annotation, config.overlap_rule)?;
            Some(scanpath::mean_pairwise_of(&strings, &config.scoring)?)
        } else {
            None
        };
        rows.push(SetMetrics {
            set,
            cc,
            sss,
            n_observers: members.len(),
        });
    }
    Ok(CaseReport {
        case_id: case_id.to_string(),
        match_direction: config.match_direction,
        rows,
    })
}

#[derive(Serialize)]
struct ReportRow<'a> {
    case_id: &'a str,
    group: &'static str,
    cc: f64,
    sss: Option<f64>,
    n_observers: usize,
    match_direction: &'static str,
}

/// CSV with header `case_id,group,cc,sss,n_observers,match_direction`.
pub fn write_case_reports<W: Write>(reports: &[CaseReport], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut wrote_any = false;
    for report in reports {
        for row in &report.rows {
            w.serialize(ReportRow {
                case_id: &report.case_id,
                group: row.set.code(),
                cc: row.cc,
                sss: row.sss,
                n_observers: row.n_observers,
                match_direction: report.match_direction.as_str(),
            })?;
            wrote_any = true;
        }
    }
    if !wrote_any {
        w.write_record(["case_id", "group", "cc", "sss", "n_observers", "match_direction"])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::ingest::{Grade, Region, ViewportEvent};

    fn grid(w: usize, h: usize, values: &[f64]) -> Grid2D {
        Grid2D::from_values(w, h, Scale::FULL, values.to_vec()).unwrap()
    }

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64, grade: Grade) -> Region {
        Region {
            polygon: vec![
                Point::new(x0, y0),
                Point::new(x1, y0),
                Point::new(x1, y1),
                Point::new(x0, y1),
            ],
            grade,
        }
    }

    #[test]
    fn rasterize_left_half() {
        let m = SlideManifest::new("S", 10, 10);
        let a = TumorAnnotation {
            slide_id: "S".into(),
            regions: vec![rect(0.0, 0.0, 5.0, 10.0, Grade::G3)],
        };
        let mask = rasterize_annotation(&a, &m, Scale::FULL);
        assert_eq!(mask.sum(), 50.0);
        assert_eq!(mask.get(4, 9), 1.0);
        assert_eq!(mask.get(5, 0), 0.0);
        let empty = rasterize_annotation(&TumorAnnotation::empty("S"), &m, Scale::FULL);
        assert_eq!(empty.sum(), 0.0);
    }

    #[test]
    fn rasterize_at_sixteenth_uses_cell_centres() {
        let m = SlideManifest::new("S", 160, 160);
        // Centres of cells 0..=2 lie at 8, 24, 40.
        let a = TumorAnnotation {
            slide_id: "S".into(),
            regions: vec![rect(0.0, 0.0, 40.0, 16.0, Grade::G4)],
        };
        let mask = rasterize_annotation(&a, &m, Scale::SIXTEENTH);
        assert_eq!(mask.width, 10);
        let row: Vec<f64> = (0..4).map(|x| mask.get(x, 0)).collect();
        assert_eq!(row, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(mask.sum(), 2.0);
    }

    #[test]
    fn tumor_map_cases() {
        let zero = Grid2D::zeros(20, 20, Scale::FULL);
        let pm = tumor_probability_map(&zero, 4.0);
        assert!(pm.grid.values.iter().all(|&v| v == 0.0));

        let mut impulse = zero.clone();
        impulse.set(10, 10, 1.0);
        let pm = tumor_probability_map(&impulse, 2.0);
        assert_eq!(pm.grid.max(), 1.0);
        assert_eq!(pm.grid.argmax(), (10, 10));
    }

    #[test]
    fn histogram_match_examples() {
        let src = grid(3, 1, &[3.0, 1.0, 2.0]);
        let reference = grid(3, 1, &[10.0, 20.0, 30.0]);
        assert_eq!(histogram_match(&src, &reference).unwrap().values, vec![30.0, 10.0, 20.0]);

        let constant = grid(3, 1, &[7.0, 7.0, 7.0]);
        assert_eq!(histogram_match(&src, &constant).unwrap().values, vec![7.0; 3]);

        let same = histogram_match(&src, &src).unwrap();
        assert_eq!(same.values, src.values);

        // Ties broken by row-major index.
        let ties = grid(3, 1, &[1.0, 1.0, 0.0]);
        assert_eq!(histogram_match(&ties, &reference).unwrap().values, vec![20.0, 30.0, 10.0]);

        assert!(matches!(
            histogram_match(&src, &grid(1, 1, &[1.0])).unwrap_err(),
            MetricsError::DimensionMismatch(_)
        ));
    }

    #[test]
    fn correlation_examples() {
        let m = grid(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!((cross_correlation(&m, &m).unwrap() - 1.0).abs() < 1e-12);
        assert!((cross_correlation(&m, &m.map(|v| -v)).unwrap() + 1.0).abs() < 1e-12);
        let b = grid(2, 2, &[2.0, 4.0, 5.0, 4.0]);
        // Hand formula: cov = 3.5, ss_a = 5, ss_b = 4.75.
        let expected = 3.5 / (5.0f64 * 4.75).sqrt();
        assert!((cross_correlation(&m, &b).unwrap() - expected).abs() < 1e-12);
        assert_eq!(
            cross_correlation(&m, &grid(2, 2, &[1.0; 4])).unwrap_err(),
            MetricsError::ConstantInput("second")
        );
    }

    #[test]
    fn welch_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let same = welch_t_test(&xs, &xs).unwrap();
        assert_eq!(same.t, 0.0);
        assert!((same.p - 1.0).abs() < 1e-9);

        let ys = [2.0, 3.0, 4.0, 5.0];
        let fwd = welch_t_test(&xs, &ys).unwrap();
        let back = welch_t_test(&ys, &xs).unwrap();
        assert_eq!(fwd.t, -back.t);
        assert_eq!(fwd.p, back.p);
        // Reference values from a 50-digit quadrature of the t density.
        assert!((fwd.t - -1.095_445_115_010_332_2).abs() < 1e-12);
        assert!((fwd.df - 6.0).abs() < 1e-12);
        assert!((fwd.p - 0.315_333_596_201_229_73).abs() < 1e-6);

        assert_eq!(welch_t_test(&[1.0], &ys).unwrap_err(), MetricsError::InsufficientData(1, 4));
        assert_eq!(welch_t_test(&[1.0, 1.0], &ys).unwrap_err(), MetricsError::ZeroVariance);
    }

    #[test]
    fn welch_unequal_sizes() {
        // Reference: t = -0.069306251289956, df = 7.91562680656, p = 0.946464663771917.
        let xs = [0.71, 0.88, 0.72, 0.78, 0.47];
        let ys = [0.765, 0.881, 0.725, 0.787, 0.437];
        let r = welch_t_test(&xs, &ys).unwrap();
        assert!((r.t - -0.069_306_251_289_956_15).abs() < 1e-12);
        assert!((r.df - 7.915_626_806_563_608).abs() < 1e-9);
        assert!((r.p - 0.946_464_663_771_917_4).abs() < 1e-6);
    }

    fn tiling_session(id: &str, group: Group, boxes: &[(i64, i64, i64, i64)]) -> NavigationSession {
        NavigationSession {
            slide_id: "S".into(),
            observer_id: id.into(),
            group,
            end_ms: None,
            events: boxes
                .iter()
                .enumerate()
                .map(|(i, &(x0, y0, x1, y1))| ViewportEvent { x0, y0, x1, y1, mag: 10.0, t_ms: 100 * i as u64 })
                .collect(),
        }
    }

    #[test]
    fn case_with_tiled_tumor_correlates() {
        let m = SlideManifest::new("S", 4096, 4096);
        let a = TumorAnnotation {
            slide_id: "S".into(),
            regions: vec![
                rect(512.0, 512.0, 1536.0, 1536.0, Grade::G4),
                rect(2560.0, 2048.0, 3584.0, 3584.0, Grade::G3),
            ],
        };
        // Each observer views exactly the two tumor rectangles.
        let tiles = [(512, 512, 1536, 1536), (2560, 2048, 3584, 3584)];
        let sessions = vec![
            tiling_session("a", Group::GuSpecialist, &tiles),
            tiling_session("b", Group::GuSpecialist, &tiles),
            tiling_session("c", Group::General, &tiles),
        ];
        let report = evaluate_case("case", &sessions, &a, &m, &EvalConfig::default()).unwrap();
        assert_eq!(report.rows.len(), 3);
        for row in &report.rows {
            assert!(row.cc >= 0.9, "{row:?}");
        }
        assert_eq!(report.row(ObserverSet::GuSpecialists).unwrap().sss, Some(1.0));
        assert_eq!(report.row(ObserverSet::General).unwrap().sss, None);

        let gu_only: Vec<_> = sessions[..2].to_vec();
        let report = evaluate_case("case", &gu_only, &a, &m, &EvalConfig::default()).unwrap();
        assert!(report.row(ObserverSet::General).is_none());
        assert_eq!(report.rows.len(), 2);

        let mut csv_out = Vec::new();
        write_case_reports(&[report], &mut csv_out).unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        assert!(text.starts_with("case_id,group,cc,sss,n_observers,match_direction\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
