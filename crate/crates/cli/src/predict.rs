//! Patch rasters on disk, training sets, and predicted heatmaps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::RgbImage;
use rayon::prelude::*;
use wsi_attention::heatmap::{read_ahm, AttentionHeatmap, Grid2D};
use wsi_attention::ingest::SlideManifest;
use wsi_attention::prediction::{
    extract_patch_grid, pad_patch, patch_features, patch_label, read_patch_manifest, BinSpec, PatchFile,
    PatchRecord, TissueFilter, TrainingExample,
};

/// Patch-manifest rows for one slide, keyed by grid index, with paths
/// resolved against the manifest's directory.
pub fn patch_files(path: &Path, slide_id: &str) -> Result<BTreeMap<(u32, u32), PathBuf>> {
    let file = fs::File::open(path).with_context(|| format!("opening patch manifest {}", path.display()))?;
    let rows = read_patch_manifest(file).with_context(|| format!("in patch manifest {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = BTreeMap::new();
    for PatchFile { slide_id: s, px, py, path: p } in rows {
        if s != slide_id {
            continue;
        }
        if out.insert((px, py), base.join(&p)).is_some() {
            bail!("patch ({px},{py}) of slide {slide_id} listed twice in {}", path.display());
        }
    }
    Ok(out)
}

pub fn read_raster(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).with_context(|| format!("reading patch raster {}", path.display()))?.to_rgb8())
}

/// Loads a ground-truth heatmap and checks it covers `manifest` at its scale.
pub fn load_heatmap_for(path: &Path, manifest: &SlideManifest) -> Result<AttentionHeatmap> {
    let bytes = fs::read(path).with_context(|| format!("reading heatmap {}", path.display()))?;
    let (grid, sigma) = read_ahm(&bytes).with_context(|| format!("in heatmap {}", path.display()))?;
    let expected = Grid2D::for_slide(manifest, grid.scale);
    if !expected.same_shape(&grid) {
        bail!(
            "heatmap {} is {}x{} but slide {} at scale {} needs {}x{}",
            path.display(),
            grid.width,
            grid.height,
            manifest.slide_id,
            grid.scale,
            expected.width,
            expected.height
        );
    }
    Ok(AttentionHeatmap {
        grid,
        sigma,
        observers: Default::default(),
        mag_filter: None,
        degenerate: false,
    })
}

/// Grid patches of `manifest` with features read from their rasters.
/// Patches without a raster keep empty features; rasters the tissue filter
/// rejects are reported in the second vector.
pub fn featurized_patches(
    manifest: &SlideManifest,
    files: &BTreeMap<(u32, u32), PathBuf>,
    size_px: u32,
    mag: f64,
    filter: TissueFilter,
) -> Result<(Vec<PatchRecord>, Vec<(u32, u32)>)> {
    let mut patches = extract_patch_grid(manifest, size_px, mag);
    let results: Vec<Result<Option<(Vec<f64>, bool)>>> = patches
        .par_iter()
        .map(|p| match files.get(&(p.px, p.py)) {
            None => Ok(None),
            Some(path) => {
                let raster = pad_patch(&read_raster(path)?, size_px);
                Ok(Some((patch_features(&raster), filter.keeps(&raster))))
            }
        })
        .collect();
    let mut rejected = Vec::new();
    for (p, r) in patches.iter_mut().zip(results) {
        if let Some((features, keep)) = r? {
            p.features = features;
            if !keep {
                rejected.push((p.px, p.py));
            }
        }
    }
    Ok((patches, rejected))
}

/// Training examples for one slide: every patch with a raster that passes
/// the tissue filter, labelled from the ground-truth heatmap.
pub fn training_examples(
    manifest: &SlideManifest,
    heatmap: &AttentionHeatmap,
    files: &BTreeMap<(u32, u32), PathBuf>,
    size_px: u32,
    mag: f64,
    spec: &BinSpec,
    filter: TissueFilter,
    with_flips: bool,
) -> Result<Vec<TrainingExample>> {
    let patches: Vec<PatchRecord> = extract_patch_grid(manifest, size_px, mag)
        .into_iter()
        .filter(|p| files.contains_key(&(p.px, p.py)))
        .collect();
    let examples: Vec<Result<Option<TrainingExample>>> = patches
        .par_iter()
        .map(|p| {
            let raster = pad_patch(&read_raster(&files[&(p.px, p.py)])?, size_px);
            if !filter.keeps(&raster) {
                return Ok(None);
            }
            let label = patch_label(heatmap, p, spec)?;
            Ok(Some(if with_flips {
                TrainingExample::from_raster(&raster, label)
            } else {
                TrainingExample::new(patch_features(&raster), label)
            }))
        })
        .collect();
    examples.into_iter().filter_map(|r| r.transpose()).collect()
}
