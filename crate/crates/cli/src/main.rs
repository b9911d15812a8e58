use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use wsi_attention::heatmap::{
    average_heatmaps, build_attention_heatmap, read_ahm, write_ahm, HeatmapParams, MagFilter, Scale,
};
use wsi_attention::ingest::{parse_session_log, write_session_log};
use wsi_attention::metrics::{attention_tumor_cc, welch_t_test, MatchDirection};
use wsi_attention::prediction::{
    export_predictions, import_predictions, predict_and_reassemble, predict_patches, train_patch_classifier,
    BinSpec, PatchClassifier, PredictionSet, PredictionSource, TissueFilter, TrainConfig, DEFAULT_PATCH_MAG,
    DEFAULT_PATCH_SIZE,
};
use wsi_attention::render::{render_heatmap, RenderMode};
use wsi_attention::scanpath::{
    build_scanpath, grade_string_with, mean_between_of, mean_pairwise_of, GradeString, OverlapRule,
};
use wsi_attention::synthetic::{synthetic_case, SyntheticConfig};
use wsi_attention_cli::case::{file_stem, load_annotation, load_manifest, load_session};
use wsi_attention_cli::config::{write_with_metadata, Metadata, RunConfig};
use wsi_attention_cli::{predict, run_reports, write_case_dir};

/// Reconstruct, compare, and predict pathologist attention from slide
/// navigation logs.
#[derive(Parser)]
#[command(name = "wsiattn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OverlapArg {
    Highest,
    Lowest,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatchArg {
    AttentionToTumor,
    TumorToAttention,
    None,
}

/// Flags that override fields of the run configuration.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "WSIATTN_OUT")]
    out: Option<PathBuf>,
    /// Grid cells per base pixel, as a fraction such as 1/16.
    #[arg(long)]
    scale: Option<Scale>,
    /// Gaussian sigma in grid cells.
    #[arg(long)]
    sigma: Option<f64>,
    /// Number of equal-width intensity bins.
    #[arg(long)]
    bins: Option<usize>,
    /// Which map is histogram matched before correlation.
    #[arg(long, value_enum)]
    match_direction: Option<MatchArg>,
    /// Alignment score for equal grades.
    #[arg(long)]
    match_score: Option<f64>,
    /// Alignment score for different grades.
    #[arg(long)]
    mismatch: Option<f64>,
    /// Alignment score for a gap.
    #[arg(long)]
    gap: Option<f64>,
    /// Grade given to points inside several regions.
    #[arg(long, value_enum)]
    overlap_rule: Option<OverlapArg>,
    /// Seed for training and synthetic data.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.out {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.scale {
            c.scale = v;
        }
        if let Some(v) = self.sigma {
            c.sigma = v;
        }
        if let Some(n) = self.bins {
            anyhow::ensure!(n > 0, "--bins must be positive");
            c.binspec = BinSpec::equal_width(n);
        }
        if let Some(v) = self.match_direction {
            c.match_direction = match v {
                MatchArg::AttentionToTumor => MatchDirection::AttentionToTumor,
                MatchArg::TumorToAttention => MatchDirection::TumorToAttention,
                MatchArg::None => MatchDirection::None,
            };
        }
        if let Some(v) = self.match_score {
            c.scoring.match_score = v;
        }
        if let Some(v) = self.mismatch {
            c.scoring.mismatch = v;
        }
        if let Some(v) = self.gap {
            c.scoring.gap = v;
        }
        if let Some(v) = self.overlap_rule {
            c.overlap_rule = match v {
                OverlapArg::Highest => OverlapRule::HighestGrade,
                OverlapArg::Lowest => OverlapRule::LowestGrade,
            };
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse, validate, and clip session logs; writes cleaned logs.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        /// Also validate this annotation against the manifest.
        #[arg(long)]
        annotation: Option<PathBuf>,
        #[arg(required = true)]
        sessions: Vec<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Build one attention heatmap from session logs.
    Heatmap {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(required = true)]
        sessions: Vec<PathBuf>,
        /// Keep only events at this magnification bucket (4, 10, 20, 40).
        #[arg(long)]
        mag: Option<f64>,
        /// Average per-observer maps instead of pooling all viewports.
        #[arg(long)]
        average: bool,
        /// Output file stem.
        #[arg(long, default_value = "heatmap")]
        name: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Export scanpaths (and grade strings when an annotation is given).
    Scanpath {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        annotation: Option<PathBuf>,
        #[arg(required = true)]
        sessions: Vec<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare heatmaps, grade strings, or two samples.
    Compare {
        #[command(subcommand)]
        what: CompareCommand,
    },
    /// Train the baseline patch classifier from patch rasters and ground-truth heatmaps.
    PredictTrain {
        /// Slide manifest; repeat together with --heatmap for several slides.
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        /// Ground-truth heatmap (.ahm) for the slide given at the same position.
        #[arg(long = "heatmap", required = true)]
        heatmaps: Vec<PathBuf>,
        /// Patch manifest CSV: slide_id,px,py,path.
        #[arg(long)]
        patches: PathBuf,
        #[command(flatten)]
        patch: PatchArgs,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        /// Mini-batch size; 0 trains on the full batch.
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.005)]
        lr: f64,
        /// Randomly flip patches each epoch.
        #[arg(long)]
        augment_flips: bool,
        /// Disable inverse-frequency class weighting.
        #[arg(long)]
        no_class_weighting: bool,
        #[arg(long, default_value = "model.json")]
        name: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Predict a heatmap for a slide from a model or imported predictions.
    PredictRun {
        #[arg(long)]
        manifest: PathBuf,
        /// Trained model JSON.
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        model: Option<PathBuf>,
        /// External predictions CSV: px,py,bin.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Patch manifest CSV; required with --model.
        #[arg(long)]
        patches: Option<PathBuf>,
        #[command(flatten)]
        patch: PatchArgs,
        #[arg(long, default_value = "predicted")]
        name: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Full per-case analysis of one or more case directories.
    Report {
        #[arg(required = true)]
        cases: Vec<PathBuf>,
        /// Cases processed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Render a heatmap file to PNG.
    Render {
        heatmap: PathBuf,
        #[arg(long, value_enum, default_value = "gray")]
        mode: ModeArg,
        /// Base image for overlay mode.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Output PNG; defaults to the heatmap name in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a synthetic case directory.
    Synth {
        dir: PathBuf,
        /// Probability that a viewport is centred on tumor.
        #[arg(long, default_value_t = 0.8)]
        bias: f64,
        #[arg(long, default_value_t = 4)]
        gu: usize,
        #[arg(long, default_value_t = 4)]
        general: usize,
        #[arg(long, default_value_t = 40)]
        events: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum CompareCommand {
    /// Correlation between an attention map and a reference map.
    Cc {
        attention: PathBuf,
        reference: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Mean pairwise semantic sequence score of grade-string files.
    Sss {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Score every file against each of these instead of pairwise.
        #[arg(long, num_args = 1..)]
        against: Vec<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Welch's t-test on two files of whitespace-separated numbers.
    Ttest { x: PathBuf, y: PathBuf },
}

#[derive(Args, Clone)]
struct PatchArgs {
    /// Patch side length at the extraction magnification.
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
    patch_size: u32,
    /// Extraction magnification.
    #[arg(long, default_value_t = DEFAULT_PATCH_MAG)]
    patch_mag: f64,
    /// Skip patches whose mean HSV saturation is below this value.
    #[arg(long)]
    min_saturation: Option<f64>,
}

impl PatchArgs {
    fn filter(&self) -> TissueFilter {
        TissueFilter {
            min_mean_saturation: self.min_saturation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Gray,
    Overlay,
}

fn args() -> Vec<String> {
    std::env::args().skip(1).collect()
}

fn display(paths: &[&Path]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn read_grade_string(path: &Path) -> Result<GradeString> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse().with_context(|| format!("in grade string {}", path.display()))
}

fn read_numbers(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split_whitespace()
        .map(|t| t.parse::<f64>().with_context(|| format!("bad number {t:?} in {}", path.display())))
        .collect()
}

fn print_json(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json"));
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest { manifest, annotation, sessions, run } => {
            let config = run.resolve()?;
            let m = load_manifest(&manifest)?;
            if let Some(a) = &annotation {
                let ann = load_annotation(a, &m)?;
                println!("{}: {} regions", a.display(), ann.regions.len());
            }
            for path in &sessions {
                let raw = parse_session_log(&fs::read(path).with_context(|| format!("reading {}", path.display()))?)
                    .with_context(|| format!("in session log {}", path.display()))?;
                let clean = load_session(path, &m)?;
                let out = config.output_dir.join("ingest").join(format!("{}.jsonl", file_stem(&clean.observer_id)));
                let meta = Metadata::new("ingest", args(), display(&[&manifest, path]), &config);
                write_with_metadata(&out, write_session_log(&clean), &meta)?;
                println!(
                    "{}: observer {} ({}), {} events, {} dropped",
                    path.display(),
                    clean.observer_id,
                    clean.group.code(),
                    clean.events.len(),
                    raw.events.len() - clean.events.len()
                );
            }
        }
        Command::Heatmap { manifest, sessions, mag, average, name, run } => {
            let config = run.resolve()?;
            let m = load_manifest(&manifest)?;
            let loaded = sessions.iter().map(|p| load_session(p, &m)).collect::<Result<Vec<_>>>()?;
            let params = HeatmapParams {
                mag_filter: mag.map(MagFilter::report_bucket),
                ..config.heatmap_params()
            };
            let map = if average {
                let per = loaded
                    .iter()
                    .map(|s| build_attention_heatmap(std::slice::from_ref(s), &m, &params))
                    .collect::<Result<Vec<_>, _>>()?;
                average_heatmaps(&per)?
            } else {
                build_attention_heatmap(&loaded, &m, &params)?
            };
            if map.degenerate {
                log::warn!("heatmap is constant before normalization; writing all zeros");
            }
            let mut inputs = vec![manifest.as_path()];
            inputs.extend(sessions.iter().map(PathBuf::as_path));
            let meta = Metadata::new("heatmap", args(), display(&inputs), &config);
            let stem = config.output_dir.join(&name);
            write_with_metadata(&stem.with_extension("ahm"), write_ahm(&map.grid, map.sigma), &meta)?;
            write_with_metadata(&stem.with_extension("png"), render_heatmap(&map.grid, RenderMode::Gray, None)?, &meta)?;
            println!("{}", stem.with_extension("ahm").display());
        }
        Command::Scanpath { manifest, annotation, sessions, run } => {
            let config = run.resolve()?;
            let m = load_manifest(&manifest)?;
            let ann = annotation.as_ref().map(|a| load_annotation(a, &m)).transpose()?;
            for path in &sessions {
                let s = load_session(path, &m)?;
                let sp = build_scanpath(&s);
                let mut inputs = vec![manifest.as_path(), path.as_path()];
                if let Some(a) = &annotation {
                    inputs.push(a);
                }
                let meta = Metadata::new("scanpath", args(), display(&inputs), &config);
                let stem = config.output_dir.join("scanpaths").join(file_stem(&s.observer_id));
                let mut bytes = Vec::new();
                sp.write_csv(&mut bytes)?;
                write_with_metadata(&stem.with_extension("csv"), bytes, &meta)?;
                if let Some(ann) = &ann {
                    let grades = grade_string_with(&sp, ann, config.overlap_rule);
                    write_with_metadata(&stem.with_extension("grades.txt"), format!("{grades}\n"), &meta)?;
                }
                println!("{}: {} points", path.display(), sp.len());
            }
        }
        Command::Compare { what } => match what {
            CompareCommand::Cc { attention, reference, run } => {
                let config = run.resolve()?;
                let read = |p: &Path| -> Result<_> {
                    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                    Ok(read_ahm(&bytes).with_context(|| format!("in heatmap {}", p.display()))?.0)
                };
                let (a, r) = (read(&attention)?, read(&reference)?);
                let cc = attention_tumor_cc(&a, &r, config.match_direction)?;
                print_json(json!({ "cc": cc, "match_direction": config.match_direction.as_str() }));
            }
            CompareCommand::Sss { files, against, run } => {
                let config = run.resolve()?;
                let left = files.iter().map(|p| read_grade_string(p)).collect::<Result<Vec<_>>>()?;
                let sss = if against.is_empty() {
                    mean_pairwise_of(&left, &config.scoring)?
                } else {
                    let right = against.iter().map(|p| read_grade_string(p)).collect::<Result<Vec<_>>>()?;
                    mean_between_of(&left, &right, &config.scoring)?
                };
                print_json(json!({ "sss": sss, "mode": if against.is_empty() { "within" } else { "between" } }));
            }
            CompareCommand::Ttest { x, y } => {
                let w = welch_t_test(&read_numbers(&x)?, &read_numbers(&y)?)?;
                print_json(json!({ "t": w.t, "p": w.p, "df": w.df }));
            }
        },
        Command::PredictTrain {
            manifests,
            heatmaps,
            patches,
            patch,
            epochs,
            batch_size,
            lr,
            augment_flips,
            no_class_weighting,
            name,
            run,
        } => {
            let config = run.resolve()?;
            if manifests.len() != heatmaps.len() {
                bail!("give one --heatmap per --manifest ({} vs {})", heatmaps.len(), manifests.len());
            }
            let mut examples = Vec::new();
            for (mp, hp) in manifests.iter().zip(&heatmaps) {
                let m = load_manifest(mp)?;
                let truth = predict::load_heatmap_for(hp, &m)?;
                let files = predict::patch_files(&patches, &m.slide_id)?;
                let ex = predict::training_examples(
                    &m,
                    &truth,
                    &files,
                    patch.patch_size,
                    patch.patch_mag,
                    &config.binspec,
                    patch.filter(),
                    augment_flips,
                )?;
                log::info!("{}: {} training patches", m.slide_id, ex.len());
                examples.extend(ex);
            }
            let train = TrainConfig {
                lr,
                epochs,
                batch_size: (batch_size > 0).then_some(batch_size),
                seed: config.seed,
                augment_flips,
                class_weighting: !no_class_weighting,
                ..TrainConfig::default()
            };
            let model = train_patch_classifier(&examples, &config.binspec, &train)?;
            let mut inputs: Vec<&Path> = manifests.iter().map(PathBuf::as_path).collect();
            inputs.extend(heatmaps.iter().map(PathBuf::as_path));
            inputs.push(&patches);
            let meta = Metadata::new("predict-train", args(), display(&inputs), &config);
            let out = config.output_dir.join(&name);
            write_with_metadata(&out, model.classifier.to_json() + "\n", &meta)?;
            let acc = wsi_attention::prediction::accuracy(&model.classifier, &examples)?;
            print_json(json!({
                "model": out.display().to_string(),
                "examples": examples.len(),
                "training_accuracy": acc,
                "loss_history": model.loss_history,
            }));
        }
        Command::PredictRun { manifest, model, predictions, patches, patch, name, run } => {
            let config = run.resolve()?;
            let m = load_manifest(&manifest)?;
            let mut inputs = vec![manifest.clone()];
            let (records, set) = match (&model, &predictions) {
                (Some(model_path), _) => {
                    let patches = patches.as_ref().context("--patches is required with --model")?;
                    inputs.extend([model_path.clone(), patches.clone()]);
                    let bytes = fs::read(model_path).with_context(|| format!("reading {}", model_path.display()))?;
                    let classifier = PatchClassifier::from_json(&bytes)
                        .with_context(|| format!("in model {}", model_path.display()))?;
                    let files = predict::patch_files(patches, &m.slide_id)?;
                    let (records, rejected) =
                        predict::featurized_patches(&m, &files, patch.patch_size, patch.patch_mag, patch.filter())?;
                    let mut bins = predict_patches(&PredictionSource::Classifier(&classifier), &records)?;
                    // Background patches get the lowest bin.
                    for (r, b) in records.iter().zip(bins.iter_mut()) {
                        if rejected.contains(&(r.px, r.py)) {
                            *b = 0;
                        }
                    }
                    let set = PredictionSet {
                        bins: records.iter().zip(bins).map(|(r, b)| ((r.px, r.py), b)).collect(),
                    };
                    (records, set)
                }
                (None, Some(pred_path)) => {
                    inputs.push(pred_path.clone());
                    let file = fs::File::open(pred_path).with_context(|| format!("reading {}", pred_path.display()))?;
                    let set = import_predictions(file, config.binspec.n_bins)
                        .with_context(|| format!("in predictions {}", pred_path.display()))?;
                    let records = wsi_attention::prediction::extract_patch_grid(&m, patch.patch_size, patch.patch_mag);
                    (records, set)
                }
                (None, None) => bail!("give --model or --predictions"),
            };
            let map = predict_and_reassemble(
                &PredictionSource::Imported(&set),
                &records,
                &m,
                &config.binspec,
                config.scale,
                config.sigma,
            )?;
            let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            let meta = Metadata::new("predict-run", args(), display(&input_refs), &config);
            let stem = config.output_dir.join(&name);
            let mut bins_csv = Vec::new();
            export_predictions(&set, &mut bins_csv)?;
            write_with_metadata(&stem.with_extension("bins.csv"), bins_csv, &meta)?;
            write_with_metadata(&stem.with_extension("ahm"), write_ahm(&map.grid, map.sigma), &meta)?;
            write_with_metadata(&stem.with_extension("png"), render_heatmap(&map.grid, RenderMode::Gray, None)?, &meta)?;
            println!("{}", stem.with_extension("ahm").display());
        }
        Command::Report { cases, jobs, run } => {
            let config = run.resolve()?;
            let mut ids = std::collections::BTreeSet::new();
            for c in &cases {
                let id = c.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                if !ids.insert(id.clone()) {
                    bail!("two case directories share the name {id:?}; their outputs would collide");
                }
            }
            let mut failed = false;
            for (dir, outcome) in cases.iter().zip(run_reports(&cases, &config, jobs)?) {
                match outcome {
                    Ok(o) => println!("{}: {} outputs in {}", o.case_id, o.outputs.len(), o.out_dir.display()),
                    Err(e) => {
                        failed = true;
                        eprintln!("error: case {}: {e:#}", dir.display());
                    }
                }
            }
            if failed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Render { heatmap, mode, base, output, run } => {
            let config = run.resolve()?;
            let bytes = fs::read(&heatmap).with_context(|| format!("reading {}", heatmap.display()))?;
            let (grid, _) = read_ahm(&bytes).with_context(|| format!("in heatmap {}", heatmap.display()))?;
            let base_img = base
                .as_ref()
                .map(|p| image::open(p).map(|i| i.to_rgb8()).with_context(|| format!("reading {}", p.display())))
                .transpose()?;
            let mode = match mode {
                ModeArg::Gray => RenderMode::Gray,
                ModeArg::Overlay => RenderMode::Overlay,
            };
            let png = render_heatmap(&grid, mode, base_img.as_ref())?;
            let out = output.unwrap_or_else(|| {
                config.output_dir.join(heatmap.file_name().unwrap_or_default()).with_extension("png")
            });
            let mut inputs = vec![heatmap.as_path()];
            if let Some(b) = &base {
                inputs.push(b);
            }
            let meta = Metadata::new("render", args(), display(&inputs), &config);
            write_with_metadata(&out, png, &meta)?;
            println!("{}", out.display());
        }
        Command::Synth { dir, bias, gu, general, events, seed } => {
            let case = synthetic_case(&SyntheticConfig {
                tumor_bias: bias,
                n_gu: gu,
                n_general: general,
                events_per_session: events,
                seed,
                ..SyntheticConfig::default()
            });
            write_case_dir(&case, &dir)?;
            println!("{}", dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
