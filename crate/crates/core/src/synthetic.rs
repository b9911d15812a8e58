//! Deterministic synthetic cases: a slide, graded tumor polygons, and
//! navigation sessions whose viewports are drawn toward the tumor with a
//! configurable bias. Used for fixtures, demos, and end-to-end checks.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{self, Point};
use crate::ingest::{Grade, Group, NavigationSession, Region, SlideManifest, TumorAnnotation, ViewportEvent};
use crate::prediction::PatchRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub slide_id: String,
    pub width_px: u64,
    pub height_px: u64,
    pub n_gu: usize,
    pub n_general: usize,
    pub events_per_session: usize,
    /// Probability that a viewport is centred inside a tumor region.
    pub tumor_bias: f64,
    /// Viewer screen size in screen pixels; the base-level viewport is this
    /// size times `base_mag / mag`.
    pub screen: (u64, u64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            slide_id: "SYN-0001".into(),
            width_px: 12_000,
            height_px: 8_000,
            n_gu: 4,
            n_general: 4,
            events_per_session: 40,
            tumor_bias: 0.8,
            screen: (800, 500),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCase {
    pub manifest: SlideManifest,
    pub annotation: TumorAnnotation,
    pub sessions: Vec<NavigationSession>,
}

/// Viewer magnifications and how often a synthetic observer uses them.
const MAG_WEIGHTS: [(f64, f64); 5] = [(2.0, 0.05), (4.0, 0.15), (10.0, 0.4), (20.0, 0.25), (40.0, 0.15)];

/// Three graded regions laid out relative to the slide size.
pub fn synthetic_annotation(manifest: &SlideManifest) -> TumorAnnotation {
    let (w, h) = (manifest.width_px as f64, manifest.height_px as f64);
    let pt = |fx: f64, fy: f64| Point::new((fx * w).round(), (fy * h).round());
    TumorAnnotation {
        slide_id: manifest.slide_id.clone(),
        regions: vec![
            Region {
                polygon: vec![pt(0.10, 0.15), pt(0.30, 0.12), pt(0.34, 0.40), pt(0.22, 0.50), pt(0.08, 0.38)],
                grade: Grade::G4,
            },
            Region {
                polygon: vec![pt(0.45, 0.55), pt(0.62, 0.52), pt(0.66, 0.75), pt(0.48, 0.80)],
                grade: Grade::G3,
            },
            Region {
                polygon: vec![pt(0.75, 0.15), pt(0.92, 0.20), pt(0.82, 0.42)],
                grade: Grade::G5,
            },
        ],
    }
}

fn sample_mag(rng: &mut impl Rng) -> f64 {
    let mut u: f64 = rng.random();
    for &(mag, w) in &MAG_WEIGHTS {
        if u < w {
            return mag;
        }
        u -= w;
    }
    MAG_WEIGHTS[MAG_WEIGHTS.len() - 1].0
}

fn sample_inside(rng: &mut impl Rng, polygon: &[Point]) -> Point {
    let (x0, y0, x1, y1) = geometry::bounds(polygon);
    loop {
        let p = Point::new(rng.random_range(x0..x1), rng.random_range(y0..y1));
        if geometry::contains(polygon, p) {
            return p;
        }
    }
}

/// One observer's session. With probability `tumor_bias` a viewport is
/// centred inside a random tumor region, otherwise anywhere on the slide.
pub fn synthetic_session(
    rng: &mut impl Rng,
    manifest: &SlideManifest,
    annotation: &TumorAnnotation,
    observer_id: &str,
    group: Group,
    config: &SyntheticConfig,
) -> NavigationSession {
    let (w, h) = (manifest.width_px as f64, manifest.height_px as f64);
    let tumors: Vec<&Region> = annotation.regions.iter().filter(|r| r.grade.is_tumor()).collect();
    let base_mag = manifest.base_magnification();
    let mut t_ms = 0u64;
    let mut events = Vec::with_capacity(config.events_per_session);
    for _ in 0..config.events_per_session {
        let centre = if !tumors.is_empty() && rng.random::<f64>() < config.tumor_bias {
            let region = tumors[rng.random_range(0..tumors.len())];
            sample_inside(rng, &region.polygon)
        } else {
            Point::new(rng.random_range(0.0..w), rng.random_range(0.0..h))
        };
        let mag = sample_mag(rng);
        let half_w = (config.screen.0 as f64 * base_mag / mag / 2.0).max(1.0);
        let half_h = (config.screen.1 as f64 * base_mag / mag / 2.0).max(1.0);
        let x0 = ((centre.x - half_w).round() as i64).max(0);
        let y0 = ((centre.y - half_h).round() as i64).max(0);
        let x1 = ((centre.x + half_w).round() as i64).min(manifest.width_px as i64).max(x0 + 1);
        let y1 = ((centre.y + half_h).round() as i64).min(manifest.height_px as i64).max(y0 + 1);
        events.push(ViewportEvent { x0, y0, x1, y1, mag, t_ms });
        t_ms += rng.random_range(200..3000);
    }
    NavigationSession {
        slide_id: manifest.slide_id.clone(),
        observer_id: observer_id.to_string(),
        group,
        end_ms: Some(t_ms),
        events,
    }
}

pub fn synthetic_case(config: &SyntheticConfig) -> SyntheticCase {
    let manifest = SlideManifest::new(config.slide_id.clone(), config.width_px, config.height_px);
    let annotation = synthetic_annotation(&manifest);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sessions = Vec::with_capacity(config.n_gu + config.n_general);
    for i in 0..config.n_gu {
        let id = format!("gu{:02}", i + 1);
        sessions.push(synthetic_session(&mut rng, &manifest, &annotation, &id, Group::GuSpecialist, config));
    }
    for i in 0..config.n_general {
        let id = format!("gen{:02}", i + 1);
        sessions.push(synthetic_session(&mut rng, &manifest, &annotation, &id, Group::General, config));
    }
    SyntheticCase {
        manifest,
        annotation,
        sessions,
    }
}

fn hash_noise(x: u64, y: u64, seed: u64) -> u8 {
    let mut v = x.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ y.wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ seed;
    v ^= v >> 31;
    v = v.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    v ^= v >> 29;
    (v & 0x1F) as u8
}

/// H&E-like raster of one patch: dense purple texture inside tumor regions,
/// pale pink elsewhere. `size` pixels span the patch footprint.
pub fn render_patch(annotation: &TumorAnnotation, manifest: &SlideManifest, patch: &PatchRecord, size: u32) -> RgbImage {
    let step = patch.footprint_px as f64 / size as f64;
    RgbImage::from_fn(size, size, |x, y| {
        let bx = patch.origin.0 as f64 + (x as f64 + 0.5) * step;
        let by = patch.origin.1 as f64 + (y as f64 + 0.5) * step;
        if bx >= manifest.width_px as f64 || by >= manifest.height_px as f64 {
            return Rgb([255, 255, 255]);
        }
        let n = hash_noise(x as u64, y as u64, (patch.px as u64) << 32 | patch.py as u64);
        let tumor = annotation
            .regions
            .iter()
            .any(|r| r.grade.is_tumor() && geometry::contains(&r.polygon, Point::new(bx, by)));
        if tumor {
            let dark = if n > 20 { 60 } else { 0 };
            Rgb([110 - dark + n, 50 + n, 150 - dark / 2 + n])
        } else {
            Rgb([225 + n / 2, 170 + n, 200 + n / 2])
        }
    })
}
