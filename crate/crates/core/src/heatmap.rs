//! Attention heatmaps built from viewport coverage.
//!
//! A heatmap is the per-cell count of viewport boxes covering each grid cell,
//! smoothed by a separable Gaussian and min-max normalized to `[0, 1]`.
//! Grids live at a rational downsampling `scale` of the base slide level and
//! the smoothing sigma is expressed in grid cells.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::ingest::{snap_magnification, NavigationSession, SlideManifest};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeatmapError {
    #[error("no sessions to accumulate")]
    EmptyInput,
    #[error("grid dimensions differ: {0}")]
    DimensionMismatch(String),
    #[error("session for slide {found} does not match manifest slide {expected}")]
    SlideMismatch { expected: String, found: String },
    #[error("invalid scale: {0}")]
    InvalidScale(String),
    #[error("malformed heatmap file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, HeatmapError>;

/// Grid cells per base-level pixel, as an exact fraction in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Scale {
    num: u64,
    den: u64,
}

impl Scale {
    pub const SIXTEENTH: Scale = Scale { num: 1, den: 16 };
    pub const FULL: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(HeatmapError::InvalidScale(format!("{num}/{den} is not in (0, 1]")));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    /// Recovers an exact fraction from its `f64` value (denominators up to 2^20).
    pub fn from_f64(value: f64) -> Result<Self> {
        if !(value > 0.0 && value <= 1.0) {
            return Err(HeatmapError::InvalidScale(format!("{value} is not in (0, 1]")));
        }
        for den in 1..=(1u64 << 20) {
            let num = (value * den as f64).round();
            if num >= 1.0 && num as f64 / den as f64 == value {
                return Scale::new(num as u64, den);
            }
        }
        Err(HeatmapError::InvalidScale(format!("{value} is not a simple fraction")))
    }

    pub fn num(self) -> u64 {
        self.num
    }

    pub fn den(self) -> u64 {
        self.den
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Number of grid cells spanning `len` base pixels.
    pub fn cells(self, len: u64) -> usize {
        (len * self.num).div_ceil(self.den) as usize
    }

    /// First grid cell touched by a box starting at base coordinate `x`.
    pub fn floor_cell(self, x: i64) -> i64 {
        (x * self.num as i64).div_euclid(self.den as i64)
    }

    /// One past the last grid cell touched by a box ending at `x`.
    pub fn ceil_cell(self, x: i64) -> i64 {
        -((-x * self.num as i64).div_euclid(self.den as i64))
    }

    /// Base-level coordinate of the centre of cell `i`.
    pub fn cell_center(self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.den as f64 / self.num as f64
    }

    /// Whether the centre of cell `i` lies in the base-level span `[lo, hi)`.
    pub fn center_within(self, i: usize, lo: u64, hi: u64) -> bool {
        // centre = (2i + 1) * den / (2 * num)
        let c2 = (2 * i as u64 + 1) * self.den;
        c2 >= 2 * lo * self.num && c2 < 2 * hi * self.num
    }
}

impl Default for Scale {
    fn default() -> Self {
        Scale::SIXTEENTH
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Scale {
    type Err = HeatmapError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || HeatmapError::InvalidScale(format!("cannot parse {s:?}; expected e.g. 1/16"));
        match s.split_once('/') {
            Some((n, d)) => Scale::new(
                n.trim().parse().map_err(|_| bad())?,
                d.trim().parse().map_err(|_| bad())?,
            ),
            None => Scale::from_f64(s.trim().parse().map_err(|_| bad())?),
        }
    }
}

impl Serialize for Scale {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scale {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Row-major grid of reals at a given scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub width: usize,
    pub height: usize,
    pub scale: Scale,
    pub values: Vec<f64>,
}

impl Grid2D {
    pub fn zeros(width: usize, height: usize, scale: Scale) -> Self {
        Self {
            width,
            height,
            scale,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, scale: Scale, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(HeatmapError::DimensionMismatch(format!(
                "{} values for a {width}x{height} grid",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            scale,
            values,
        })
    }

    /// Zero grid covering the whole slide at `scale`.
    pub fn for_slide(manifest: &SlideManifest, scale: Scale) -> Self {
        Self::zeros(scale.cells(manifest.width_px), scale.cells(manifest.height_px), scale)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn same_shape(&self, other: &Grid2D) -> bool {
        self.width == other.width && self.height == other.height && self.scale == other.scale
    }

    pub fn ensure_same_shape(&self, other: &Grid2D) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(HeatmapError::DimensionMismatch(format!(
                "{}x{} @ {} vs {}x{} @ {}",
                self.width, self.height, self.scale, other.width, other.height, other.scale
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid2D {
        Grid2D {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Position of the largest value (first in row-major order).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }
}

/// Restricts accumulation to events whose magnification snaps to `level`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagFilter {
    pub level: f64,
    pub levels: Vec<f64>,
}

/// Buckets used for magnification-level heatmaps and dwell summaries.
pub const REPORT_MAG_LEVELS: [f64; 4] = [4.0, 10.0, 20.0, 40.0];

impl MagFilter {
    pub fn new(level: f64, levels: Vec<f64>) -> Self {
        Self { level, levels }
    }

    /// Filter over the report buckets (2X events fall into 4X).
    pub fn report_bucket(level: f64) -> Self {
        Self::new(level, REPORT_MAG_LEVELS.to_vec())
    }

    pub fn matches(&self, mag: f64) -> bool {
        snap_magnification(mag, &self.levels) == self.level
    }
}

/// Per-cell count of viewport boxes covering each cell.
///
/// Boxes are mapped to the grid with `floor` on their start and `ceil` on
/// their end coordinates, so every cell a box touches is counted once.
pub fn accumulate_viewports(
    sessions: &[NavigationSession],
    manifest: &SlideManifest,
    scale: Scale,
    mag_filter: Option<&MagFilter>,
) -> Result<Grid2D> {
    if sessions.is_empty() {
        return Err(HeatmapError::EmptyInput);
    }
    let mut grid = Grid2D::for_slide(manifest, scale);
    let (w, h) = (grid.width, grid.height);
    let stride = w + 1;
    // 2-D difference array over cell corners.
    let mut diff = vec![0i64; (w + 1) * (h + 1)];
    for session in sessions {
        if session.slide_id != manifest.slide_id {
            return Err(HeatmapError::SlideMismatch {
                expected: manifest.slide_id.clone(),
                found: session.slide_id.clone(),
            });
        }
        for e in &session.events {
            if mag_filter.is_some_and(|f| !f.matches(e.mag)) {
                continue;
            }
            let x0 = scale.floor_cell(e.x0).clamp(0, w as i64) as usize;
            let x1 = scale.ceil_cell(e.x1).clamp(0, w as i64) as usize;
            let y0 = scale.floor_cell(e.y0).clamp(0, h as i64) as usize;
            let y1 = scale.ceil_cell(e.y1).clamp(0, h as i64) as usize;
            if x0 >= x1 || y0 >= y1 {
                continue;
            }
            diff[y0 * stride + x0] += 1;
            diff[y0 * stride + x1] -= 1;
            diff[y1 * stride + x0] -= 1;
            diff[y1 * stride + x1] += 1;
        }
    }
    let mut above = vec![0i64; w];
    for y in 0..h {
        let mut run = 0i64;
        for x in 0..w {
            run += diff[y * stride + x];
            above[x] += run;
            grid.values[y * w + x] = above[x] as f64;
        }
    }
    Ok(grid)
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma.is_finite() && sigma > 0.0, "sigma must be positive");
    let radius = (3.0 * sigma).ceil() as isize;
    let denom = 2.0 * sigma * sigma;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / denom).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), periodic.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn convolve_line(src: &[f64], kernel: &[f64], padded: &mut Vec<f64>, dst: &mut [f64]) {
    let n = src.len();
    let r = kernel.len() / 2;
    padded.clear();
    padded.extend((0..n + 2 * r).map(|i| src[reflect_index(i as isize - r as isize, n)]));
    // Anchored at the centre sample so constant windows come out exact.
    for (x, out) in dst.iter_mut().enumerate() {
        let window = &padded[x..x + kernel.len()];
        let c = src[x];
        *out = c + window.iter().zip(kernel).map(|(v, k)| (v - c) * k).sum::<f64>();
    }
}

/// Separable Gaussian blur with reflect padding; `sigma == 0` is the identity.
pub fn gaussian_smooth(grid: &Grid2D, sigma: f64) -> Grid2D {
    assert!(sigma.is_finite() && sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 || grid.values.is_empty() {
        return grid.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let (w, h) = (grid.width, grid.height);

    let mut rows = vec![0.0; w * h];
    rows.par_chunks_mut(w)
        .zip(grid.values.par_chunks(w))
        .for_each_init(Vec::new, |padded, (dst, src)| {
            convolve_line(src, &kernel, padded, dst)
        });

    // Column pass on the transposed image.
    let mut cols = vec![0.0; w * h];
    cols.par_chunks_mut(h).enumerate().for_each_init(
        || (Vec::new(), Vec::new()),
        |(padded, column), (x, dst)| {
            column.clear();
            column.extend((0..h).map(|y| rows[y * w + x]));
            convolve_line(column, &kernel, padded, dst);
        },
    );
    let mut out = Grid2D::zeros(w, h, grid.scale);
    for x in 0..w {
        for y in 0..h {
            out.values[y * w + x] = cols[x * h + y];
        }
    }
    out
}

/// Affine map onto `[0, 1]`; a constant grid maps to all zeros.
pub fn min_max_normalize(grid: &Grid2D) -> Grid2D {
    let (lo, hi) = (grid.min(), grid.max());
    if grid.values.is_empty() || !(hi > lo) {
        return grid.map(|_| 0.0);
    }
    let range = hi - lo;
    grid.map(|v| (v - lo) / range)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeatmap {
    pub grid: Grid2D,
    /// Smoothing sigma in grid cells.
    pub sigma: f64,
    pub observers: BTreeSet<String>,
    pub mag_filter: Option<f64>,
    /// Set when the map was constant before normalization.
    pub degenerate: bool,
}

impl AttentionHeatmap {
    /// Smooths and normalizes an intermediate grid.
    pub fn from_intermediate(
        intermediate: &Grid2D,
        sigma: f64,
        observers: BTreeSet<String>,
        mag_filter: Option<f64>,
    ) -> Self {
        let smoothed = gaussian_smooth(intermediate, sigma);
        let degenerate = !(smoothed.max() > smoothed.min());
        Self {
            grid: min_max_normalize(&smoothed),
            sigma,
            observers,
            mag_filter,
            degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapParams {
    pub scale: Scale,
    pub sigma: f64,
    pub mag_filter: Option<MagFilter>,
}

impl Default for HeatmapParams {
    fn default() -> Self {
        Self {
            scale: Scale::SIXTEENTH,
            sigma: 16.0,
            mag_filter: None,
        }
    }
}

pub fn build_attention_heatmap(
    sessions: &[NavigationSession],
    manifest: &SlideManifest,
    params: &HeatmapParams,
) -> Result<AttentionHeatmap> {
    let counts = accumulate_viewports(sessions, manifest, params.scale, params.mag_filter.as_ref())?;
    Ok(AttentionHeatmap::from_intermediate(
        &counts,
        params.sigma,
        crate::ingest::observer_ids(sessions),
        params.mag_filter.as_ref().map(|f| f.level),
    ))
}

/// Cell-wise mean of normalized maps, renormalized.
pub fn average_heatmaps(heatmaps: &[AttentionHeatmap]) -> Result<AttentionHeatmap> {
    let first = heatmaps.first().ok_or(HeatmapError::EmptyInput)?;
    for h in &heatmaps[1..] {
        first.grid.ensure_same_shape(&h.grid)?;
    }
    let mut sum = Grid2D::zeros(first.grid.width, first.grid.height, first.grid.scale);
    for h in heatmaps {
        for (acc, v) in sum.values.iter_mut().zip(&h.grid.values) {
            *acc += v;
        }
    }
    let k = heatmaps.len() as f64;
    let mean = sum.map(|v| v / k);
    let degenerate = !(mean.max() > mean.min());
    let mag_filter = first
        .mag_filter
        .filter(|m| heatmaps.iter().all(|h| h.mag_filter == Some(*m)));
    Ok(AttentionHeatmap {
        grid: min_max_normalize(&mean),
        sigma: first.sigma,
        observers: heatmaps.iter().flat_map(|h| h.observers.iter().cloned()).collect(),
        mag_filter,
        degenerate,
    })
}

const AHM_MAGIC: &[u8; 4] = b"AHM1";

/// Encodes a grid as `AHM1`: little-endian header then `f32` values row-major.
pub fn write_ahm(grid: &Grid2D, sigma: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 4 * grid.values.len());
    out.extend_from_slice(AHM_MAGIC);
    out.extend_from_slice(&(grid.width as u32).to_le_bytes());
    out.extend_from_slice(&(grid.height as u32).to_le_bytes());
    out.extend_from_slice(&grid.scale.as_f64().to_le_bytes());
    out.extend_from_slice(&sigma.to_le_bytes());
    for &v in &grid.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decodes an `AHM1` file into the grid and its smoothing sigma.
pub fn read_ahm(bytes: &[u8]) -> Result<(Grid2D, f64)> {
    let fmt_err = |m: &str| HeatmapError::Format(m.to_string());
    if bytes.len() < 28 || &bytes[..4] != AHM_MAGIC {
        return Err(fmt_err("missing AHM1 header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (width, height) = (u32_at(4), u32_at(8));
    let scale = Scale::from_f64(f64_at(12))?;
    let sigma = f64_at(20);
    let body = &bytes[28..];
    if body.len() != 4 * width * height {
        return Err(fmt_err("value block length does not match dimensions"));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((Grid2D::from_values(width, height, scale, values)?, sigma))
}
