//! Patch-level attention prediction.
//!
//! A slide is cut into a grid of patches; each patch's mean attention is
//! discretized into one of `n_bins` intensity bins. A classifier maps patch
//! pixels to bins, and predicted bins are painted back onto the slide grid
//! with their representative intensity, smoothed, and normalized.
//!
//! The bundled classifier is a multinomial logistic regression over
//! hand-crafted colour and texture features. Predictions from any external
//! model can be imported instead through the predictions CSV.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::{AttentionHeatmap, Grid2D, Scale};
use crate::ingest::SlideManifest;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictionError {
    #[error("intensity {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid bin specification: {0}")]
    InvalidBinSpec(String),
    #[error("no prediction for patch ({0}, {1})")]
    MissingPrediction(u32, u32),
    #[error("patch ({0}, {1}) has no features")]
    MissingFeatures(u32, u32),
    #[error("duplicate prediction for patch ({0}, {1})")]
    DuplicatePatch(u32, u32),
    #[error("bin {bin} out of range for {n_bins} bins")]
    BinOutOfRange { bin: i64, n_bins: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("feature vector has {found} entries, expected {expected}")]
    FeatureDimMismatch { expected: usize, found: usize },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error("malformed model file: {0}")]
    Model(String),
}

pub type Result<T> = std::result::Result<T, PredictionError>;

/// Partition of `[0, 1]` into intensity bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub n_bins: usize,
    pub edges: Vec<f64>,
    pub bin_means: Vec<f64>,
}

impl BinSpec {
    /// Equal-width bins represented by their midpoints.
    pub fn equal_width(n_bins: usize) -> Self {
        assert!(n_bins > 0);
        let edges: Vec<f64> = (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect();
        let bin_means = edges.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
        Self {
            n_bins,
            edges,
            bin_means,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PredictionError::InvalidBinSpec(m.to_string()));
        if self.n_bins == 0 || self.edges.len() != self.n_bins + 1 || self.bin_means.len() != self.n_bins {
            return bad("need n_bins + 1 edges and n_bins means");
        }
        if self.edges[0] != 0.0 || self.edges[self.n_bins] != 1.0 {
            return bad("edges must start at 0 and end at 1");
        }
        if self.edges.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("edges must be strictly increasing");
        }
        for (i, &m) in self.bin_means.iter().enumerate() {
            if !(m >= self.edges[i] && m <= self.edges[i + 1]) {
                return bad("bin means must lie inside their bins");
            }
        }
        Ok(())
    }

    /// Bin `i` with `edges[i] <= x < edges[i + 1]`; `x == 1` falls in the last bin.
    pub fn discretize(&self, x: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&x) {
            return Err(PredictionError::OutOfRange(x));
        }
        let upper = self.edges[1..self.n_bins].partition_point(|&e| e <= x);
        Ok(upper.min(self.n_bins - 1))
    }
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec::equal_width(5)
    }
}

pub fn discretize_intensity(mean_intensity: f64, spec: &BinSpec) -> Result<usize> {
    spec.discretize(mean_intensity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub slide_id: String,
    pub px: u32,
    pub py: u32,
    /// Top-left corner in base-level pixels.
    pub origin: (u64, u64),
    /// Side length at the extraction magnification.
    pub size_px: u32,
    pub mag: f64,
    /// Side length in base-level pixels.
    pub footprint_px: u64,
    /// The patch extends past the right or bottom slide edge.
    pub partial: bool,
    pub features: Vec<f64>,
    pub label: Option<usize>,
    pub predicted: Option<usize>,
}

pub const DEFAULT_PATCH_SIZE: u32 = 500;
pub const DEFAULT_PATCH_MAG: f64 = 10.0;

/// Non-overlapping patch grid anchored at the slide origin, row-major.
pub fn extract_patch_grid(manifest: &SlideManifest, size_px: u32, mag: f64) -> Vec<PatchRecord> {
    let footprint = ((size_px as f64) * manifest.base_magnification() / mag).round().max(1.0) as u64;
    let cols = manifest.width_px.div_ceil(footprint);
    let rows = manifest.height_px.div_ceil(footprint);
    let mut out = Vec::with_capacity((cols * rows) as usize);
    for py in 0..rows {
        for px in 0..cols {
            let origin = (px * footprint, py * footprint);
            out.push(PatchRecord {
                slide_id: manifest.slide_id.clone(),
                px: px as u32,
                py: py as u32,
                origin,
                size_px,
                mag,
                footprint_px: footprint,
                partial: origin.0 + footprint > manifest.width_px || origin.1 + footprint > manifest.height_px,
                features: Vec::new(),
                label: None,
                predicted: None,
            });
        }
    }
    out
}

/// Cells along one axis whose centres fall in the base-level span `[lo, hi)`.
fn cells_with_centres(scale: Scale, lo: u64, hi: u64, n: usize) -> Range<usize> {
    let before_lo = |i: usize| (2 * i as u64 + 1) * scale.den() < 2 * lo * scale.num();
    let mut start = ((lo * scale.num() / scale.den()) as usize).saturating_sub(1).min(n);
    while start < n && before_lo(start) {
        start += 1;
    }
    let mut end = start;
    while end < n && scale.center_within(end, lo, hi) {
        end += 1;
    }
    start..end
}

/// Grid cells covered by a patch footprint (by cell centre).
pub fn patch_cells(grid: &Grid2D, patch: &PatchRecord) -> (Range<usize>, Range<usize>) {
    let (ox, oy) = patch.origin;
    let f = patch.footprint_px;
    (
        cells_with_centres(grid.scale, ox, ox + f, grid.width),
        cells_with_centres(grid.scale, oy, oy + f, grid.height),
    )
}

/// Mean heatmap value under a patch footprint.
pub fn patch_mean(grid: &Grid2D, patch: &PatchRecord) -> f64 {
    let (xs, ys) = patch_cells(grid, patch);
    if xs.is_empty() || ys.is_empty() {
        // Footprint smaller than one cell: use the cell under its centre.
        let c = |o: u64, n: usize| {
            let centre = 2 * o + patch.footprint_px;
            (((centre * grid.scale.num()) / (2 * grid.scale.den())) as usize).min(n - 1)
        };
        return grid.get(c(patch.origin.0, grid.width), c(patch.origin.1, grid.height));
    }
    let mut sum = 0.0;
    for y in ys.clone() {
        for x in xs.clone() {
            sum += grid.get(x, y);
        }
    }
    sum / (xs.len() * ys.len()) as f64
}

pub fn patch_label(heatmap: &AttentionHeatmap, patch: &PatchRecord, spec: &BinSpec) -> Result<usize> {
    spec.discretize(patch_mean(&heatmap.grid, patch).clamp(0.0, 1.0))
}

/// Pads a raster to `size × size` by replicating its last row and column.
pub fn pad_patch(pixels: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = pixels.dimensions();
    if w >= size && h >= size {
        return pixels.clone();
    }
    let (ow, oh) = (w.max(size), h.max(size));
    RgbImage::from_fn(ow, oh, |x, y| *pixels.get_pixel(x.min(w - 1), y.min(h - 1)))
}

pub const FEATURE_DIM: usize = 56;
const HIST_BINS: usize = 16;

fn gray(p: &image::Rgb<u8>) -> f64 {
    (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Fixed 56-dimensional descriptor of a patch raster:
/// 16-bin histograms of R, G, B (48, each summing to 1), channel means
/// then channel standard deviations on `[0, 1]` (6), and mean and standard
/// deviation of the grayscale gradient magnitude (2). Gradients are central
/// differences with replicated borders.
pub fn patch_features(pixels: &RgbImage) -> Vec<f64> {
    let (w, h) = pixels.dimensions();
    let n = (w * h) as f64;
    let mut features = vec![0.0; FEATURE_DIM];
    for p in pixels.pixels() {
        for c in 0..3 {
            features[c * HIST_BINS + (p[c] as usize >> 4)] += 1.0;
        }
    }
    for v in &mut features[..3 * HIST_BINS] {
        *v /= n;
    }
    for c in 0..3 {
        let (mean, std) = mean_std(pixels.pixels().map(move |p| p[c] as f64 / 255.0));
        features[48 + c] = mean;
        features[51 + c] = std;
    }
    let g: Vec<f64> = pixels.pixels().map(gray).collect();
    let (wu, hu) = (w as usize, h as usize);
    let at = |x: usize, y: usize| g[y * wu + x];
    let mut mags = Vec::with_capacity(g.len());
    for y in 0..hu {
        for x in 0..wu {
            let gx = (at((x + 1).min(wu - 1), y) - at(x.saturating_sub(1), y)) / 2.0;
            let gy = (at(x, (y + 1).min(hu - 1)) - at(x, y.saturating_sub(1))) / 2.0;
            mags.push((gx * gx + gy * gy).sqrt());
        }
    }
    let (gm, gs) = mean_std(mags.iter().copied());
    features[54] = gm;
    features[55] = gs;
    features
}

/// Mean HSV saturation of a raster, in `[0, 1]`.
pub fn mean_saturation(pixels: &RgbImage) -> f64 {
    let n = pixels.pixels().len() as f64;
    pixels
        .pixels()
        .map(|p| {
            let max = p.0.iter().copied().max().unwrap() as f64;
            let min = p.0.iter().copied().min().unwrap() as f64;
            if max == 0.0 {
                0.0
            } else {
                (max - min) / max
            }
        })
        .sum::<f64>()
        / n
}

/// Optional background rejection; disabled by default.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TissueFilter {
    pub min_mean_saturation: Option<f64>,
}

impl TissueFilter {
    pub fn keeps(&self, pixels: &RgbImage) -> bool {
        self.min_mean_saturation.is_none_or(|t| mean_saturation(pixels) >= t)
    }
}

/// Weights and bias of a softmax regression.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub n_bins: usize,
    pub dim: usize,
    /// Row-major `n_bins × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearParams {
    pub fn zeros(n_bins: usize, dim: usize) -> Self {
        Self {
            n_bins,
            dim,
            weights: vec![0.0; n_bins * dim],
            bias: vec![0.0; n_bins],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_bins)
            .map(|k| {
                let row = &self.weights[k * self.dim..(k + 1) * self.dim];
                self.bias[k] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn get(&self, i: usize) -> f64 {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.bias[i - self.weights.len()]
        }
    }

    fn get_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weights.len();
        if i < nw {
            &mut self.weights[i]
        } else {
            &mut self.bias[i - nw]
        }
    }

    /// Flat view: weights then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn set_flat(&mut self, i: usize, v: f64) {
        *self.get_mut(i) = v;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Class-weighted mean cross-entropy over `rows` and its gradient.
///
/// `loss = (1/|rows|) Σ_i w[y_i] · (−log softmax(W x_i + b)[y_i])`
pub fn loss_and_gradient(
    params: &LinearParams,
    xs: &[Vec<f64>],
    ys: &[usize],
    class_weights: &[f64],
    rows: &[usize],
) -> (f64, LinearParams) {
    let mut grad = LinearParams::zeros(params.n_bins, params.dim);
    let scale = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    for &i in rows {
        let x = &xs[i];
        let y = ys[i];
        let w = class_weights[y];
        let logits = params.logits(x);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += w * (log_norm - logits[y]);
        for k in 0..params.n_bins {
            let p = (logits[k] - log_norm).exp();
            let d = w * scale * (p - if k == y { 1.0 } else { 0.0 });
            grad.bias[k] += d;
            let row = &mut grad.weights[k * params.dim..(k + 1) * params.dim];
            for (g, v) in row.iter_mut().zip(x) {
                *g += d * v;
            }
        }
    }
    (loss * scale, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchClassifier {
    pub feature_dim: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub binspec: BinSpec,
    /// Trained on a single class; always predicts it.
    #[serde(default)]
    pub degenerate: bool,
}

impl PatchClassifier {
    fn params(&self) -> LinearParams {
        LinearParams {
            n_bins: self.n_bins,
            dim: self.feature_dim,
            weights: self.weights.clone(),
            bias: self.bias.clone(),
        }
    }

    pub fn standardize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.feature_means.iter().zip(&self.feature_stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn predict_proba(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim {
            return Err(PredictionError::FeatureDimMismatch {
                expected: self.feature_dim,
                found: features.len(),
            });
        }
        Ok(softmax(&self.params().logits(&self.standardize(features))))
    }

    /// Most probable bin; ties go to the lower bin.
    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        let probs = self.predict_proba(features)?;
        let mut best = 0;
        for (k, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = k;
            }
        }
        Ok(best)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("classifier serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let model: PatchClassifier =
            serde_json::from_slice(bytes).map_err(|e| PredictionError::Model(e.to_string()))?;
        model.binspec.validate()?;
        if model.weights.len() != model.n_bins * model.feature_dim
            || model.bias.len() != model.n_bins
            || model.feature_means.len() != model.feature_dim
            || model.feature_stds.len() != model.feature_dim
            || model.binspec.n_bins != model.n_bins
        {
            return Err(PredictionError::Model("parameter shapes are inconsistent".into()));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Mini-batch size; `None` trains on the full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub augment_flips: bool,
    pub class_weighting: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            epochs: 20,
            batch_size: Some(64),
            seed: 0,
            augment_flips: false,
            class_weighting: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One labelled patch. `variants` holds features of flipped copies of the
/// raster (horizontal, vertical, both) used for augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub features: Vec<f64>,
    pub label: usize,
    pub variants: Vec<Vec<f64>>,
}

impl TrainingExample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self {
            features,
            label,
            variants: Vec::new(),
        }
    }

    /// Computes features of the raster and of its three flipped copies.
    pub fn from_raster(pixels: &RgbImage, label: usize) -> Self {
        let h = image::imageops::flip_horizontal(pixels);
        let v = image::imageops::flip_vertical(pixels);
        let hv = image::imageops::flip_vertical(&h);
        Self {
            features: patch_features(pixels),
            label,
            variants: [h, v, hv].iter().map(patch_features).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub classifier: PatchClassifier,
    /// Full-data loss before training and after each epoch.
    pub loss_history: Vec<f64>,
}

/// Inverse-frequency weights with mean 1 over the examples; absent classes get 0.
pub fn class_weights(labels: &[usize], n_bins: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_bins];
    for &y in labels {
        counts[y] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (present * c as f64) })
        .collect()
}

/// Softmax regression trained with Adam on standardized features.
/// Deterministic for a given seed: the seed drives batch order and flip choice.
pub fn train_patch_classifier(
    examples: &[TrainingExample],
    binspec: &BinSpec,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    binspec.validate()?;
    let first = examples.first().ok_or(PredictionError::EmptyTrainingSet)?;
    let dim = first.features.len();
    let n_bins = binspec.n_bins;
    for ex in examples {
        if ex.label >= n_bins {
            return Err(PredictionError::BinOutOfRange {
                bin: ex.label as i64,
                n_bins,
            });
        }
        for f in std::iter::once(&ex.features).chain(&ex.variants) {
            if f.len() != dim {
                return Err(PredictionError::FeatureDimMismatch {
                    expected: dim,
                    found: f.len(),
                });
            }
        }
    }

    let n = examples.len();
    let mut feature_means = vec![0.0; dim];
    for ex in examples {
        for (m, v) in feature_means.iter_mut().zip(&ex.features) {
            *m += v;
        }
    }
    feature_means.iter_mut().for_each(|m| *m /= n as f64);
    let mut feature_stds = vec![0.0; dim];
    for ex in examples {
        for ((s, v), m) in feature_stds.iter_mut().zip(&ex.features).zip(&feature_means) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut feature_stds {
        *s = (*s / n as f64).sqrt();
        if !(*s > 0.0) {
            *s = 1.0;
        }
    }

    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let mut classifier = PatchClassifier {
        feature_dim: dim,
        n_bins,
        weights: vec![0.0; n_bins * dim],
        bias: vec![0.0; n_bins],
        feature_means,
        feature_stds,
        binspec: binspec.clone(),
        degenerate: false,
    };

    let only = labels[0];
    if labels.iter().all(|&y| y == only) {
        log::warn!("all training labels are bin {only}; returning a constant classifier");
        classifier.bias[only] = 1.0;
        classifier.degenerate = true;
        return Ok(TrainedModel {
            classifier,
            loss_history: Vec::new(),
        });
    }

    let weights = if config.class_weighting {
        class_weights(&labels, n_bins)
    } else {
        vec![1.0; n_bins]
    };
    let standardized: Vec<Vec<f64>> = examples.iter().map(|e| classifier.standardize(&e.features)).collect();
    let variants: Vec<Vec<Vec<f64>>> = examples
        .iter()
        .map(|e| e.variants.iter().map(|v| classifier.standardize(v)).collect())
        .collect();
    let all_rows: Vec<usize> = (0..n).collect();

    let mut params = LinearParams::zeros(n_bins, dim);
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = config.batch_size.unwrap_or(n).clamp(1, n);

    let mut loss_history = vec![loss_and_gradient(&params, &standardized, &labels, &weights, &all_rows).0];
    let mut order = all_rows.clone();
    let mut epoch_inputs = standardized.clone();
    for _ in 0..config.epochs {
        if config.batch_size.is_some() {
            order.shuffle(&mut rng);
        }
        if config.augment_flips {
            for (i, input) in epoch_inputs.iter_mut().enumerate() {
                let choice = rng.random_range(0..=variants[i].len());
                *input = if choice == 0 {
                    standardized[i].clone()
                } else {
                    variants[i][choice - 1].clone()
                };
            }
        }
        for rows in order.chunks(batch) {
            let (_, grad) = loss_and_gradient(&params, &epoch_inputs, &labels, &weights, rows);
            step += 1;
            let bc1 = 1.0 - config.beta1.powi(step);
            let bc2 = 1.0 - config.beta2.powi(step);
            for i in 0..params.len() {
                let g = grad.get(i);
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
                let update = config.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + config.eps);
                *params.get_mut(i) -= update;
            }
        }
        loss_history.push(loss_and_gradient(&params, &standardized, &labels, &weights, &all_rows).0);
    }

    classifier.weights = params.weights;
    classifier.bias = params.bias;
    Ok(TrainedModel {
        classifier,
        loss_history,
    })
}

/// Fraction of examples whose predicted bin equals the label.
pub fn accuracy(classifier: &PatchClassifier, examples: &[TrainingExample]) -> Result<f64> {
    let mut correct = 0;
    for ex in examples {
        if classifier.predict(&ex.features)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Externally produced bin per patch index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionSet {
    pub bins: BTreeMap<(u32, u32), usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    px: u32,
    py: u32,
    bin: i64,
}

/// Reads a predictions CSV (`px,py,bin`).
pub fn import_predictions<R: Read>(reader: R, n_bins: usize) -> Result<PredictionSet> {
    let mut set = PredictionSet::default();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    for row in rdr.deserialize::<PredictionRow>() {
        let row = row.map_err(|e| PredictionError::Csv(e.to_string()))?;
        if row.bin < 0 || row.bin as usize >= n_bins {
            return Err(PredictionError::BinOutOfRange { bin: row.bin, n_bins });
        }
        if set.bins.insert((row.px, row.py), row.bin as usize).is_some() {
            return Err(PredictionError::DuplicatePatch(row.px, row.py));
        }
    }
    Ok(set)
}

pub fn export_predictions<W: Write>(set: &PredictionSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| PredictionError::Csv(e.to_string());
    w.write_record(["px", "py", "bin"]).map_err(csv_err)?;
    for (&(px, py), &bin) in &set.bins {
        w.write_record([px.to_string(), py.to_string(), bin.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| PredictionError::Csv(e.to_string()))
}

/// One row of a patch manifest (`slide_id,px,py,path`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchFile {
    pub slide_id: String,
    pub px: u32,
    pub py: u32,
    pub path: String,
}

pub fn read_patch_manifest<R: Read>(reader: R) -> Result<Vec<PatchFile>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader)
        .deserialize()
        .collect::<csv::Result<Vec<PatchFile>>>()
        .map_err(|e| PredictionError::Csv(e.to_string()))
}

pub enum PredictionSource<'a> {
    Classifier(&'a PatchClassifier),
    Imported(&'a PredictionSet),
}

/// Predicted bin for every patch, in patch order.
pub fn predict_patches(source: &PredictionSource<'_>, patches: &[PatchRecord]) -> Result<Vec<usize>> {
    patches
        .par_iter()
        .map(|p| match source {
            PredictionSource::Classifier(model) => {
                if p.features.is_empty() {
                    return Err(PredictionError::MissingFeatures(p.px, p.py));
                }
                model.predict(&p.features)
            }
            PredictionSource::Imported(set) => set
                .bins
                .get(&(p.px, p.py))
                .copied()
                .ok_or(PredictionError::MissingPrediction(p.px, p.py)),
        })
        .collect()
}

/// Paints each patch with its bin's representative intensity.
pub fn paint_patches(
    patches: &[PatchRecord],
    bins: &[usize],
    manifest: &SlideManifest,
    spec: &BinSpec,
    scale: Scale,
) -> Result<Grid2D> {
    let mut grid = Grid2D::for_slide(manifest, scale);
    for (patch, &bin) in patches.iter().zip(bins) {
        let value = *spec.bin_means.get(bin).ok_or(PredictionError::BinOutOfRange {
            bin: bin as i64,
            n_bins: spec.n_bins,
        })?;
        let (xs, ys) = patch_cells(&grid, patch);
        for y in ys {
            for x in xs.clone() {
                grid.set(x, y, value);
            }
        }
    }
    Ok(grid)
}

/// Paint, smooth, and normalize predicted bins into a heatmap.
pub fn predict_and_reassemble(
    source: &PredictionSource<'_>,
    patches: &[PatchRecord],
    manifest: &SlideManifest,
    spec: &BinSpec,
    scale: Scale,
    sigma: f64,
) -> Result<AttentionHeatmap> {
    let expected = extract_grid_indices(patches);
    if let PredictionSource::Imported(set) = source {
        if let Some(&(px, py)) = expected.iter().find(|k| !set.bins.contains_key(k)) {
            return Err(PredictionError::MissingPrediction(px, py));
        }
    }
    let bins = predict_patches(source, patches)?;
    let painted = paint_patches(patches, &bins, manifest, spec, scale)?;
    Ok(AttentionHeatmap::from_intermediate(&painted, sigma, Default::default(), None))
}

fn extract_grid_indices(patches: &[PatchRecord]) -> Vec<(u32, u32)> {
    patches.iter().map(|p| (p.px, p.py)).collect()
}

/// Labels every patch from a ground-truth heatmap.
pub fn label_patches(heatmap: &AttentionHeatmap, patches: &mut [PatchRecord], spec: &BinSpec) -> Result<()> {
    for p in patches.iter_mut() {
        p.label = Some(patch_label(heatmap, p, spec)?);
    }
    Ok(())
}
