use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use tempfile::TempDir;

fn wsiattn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsiattn"))
        .args(args)
        .current_dir(dir)
        .env_remove("WSIATTN_OUT")
        .output()
        .expect("running wsiattn")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = wsiattn(dir, args);
    assert!(
        out.status.success(),
        "wsiattn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth_case(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", name];
    args.extend_from_slice(extra);
    ok(dir, &args);
    dir.join(name)
}

fn sessions(case: &Path) -> Vec<String> {
    let mut out: Vec<String> = fs::read_dir(case.join("sessions"))
        .unwrap()
        .map(|e| e.unwrap().path().to_string_lossy().into_owned())
        .collect();
    out.sort();
    out
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn report_writes_every_output() {
    let tmp = TempDir::new().unwrap();
    synth_case(tmp.path(), "SYN-1", &[]);
    ok(tmp.path(), &["report", "SYN-1", "--out", "out"]);
    let out = tmp.path().join("out/SYN-1");
    for set in ["all", "GU", "GEN"] {
        for ext in ["ahm", "png"] {
            assert!(out.join(format!("heatmaps/{set}.{ext}")).is_file(), "{set}.{ext}");
            for mag in ["4x", "10x", "20x", "40x"] {
                assert!(out.join(format!("heatmaps/{set}_{mag}.{ext}")).is_file());
            }
        }
    }
    for f in ["report.csv", "mag_dwell.csv", "tumor_map.ahm", "tumor_map.png", "run.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    for s in sessions(&tmp.path().join("SYN-1")) {
        let stem = Path::new(&s).file_stem().unwrap().to_string_lossy().into_owned();
        assert!(out.join(format!("scanpaths/{stem}.csv")).is_file());
        assert!(out.join(format!("scanpaths/{stem}.grades.txt")).is_file());
    }
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 4, "{report}");
    let run: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    assert!(run["outputs"].as_array().unwrap().len() > 40);
}

#[test]
fn report_is_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    synth_case(tmp.path(), "SYN-1", &["--events", "15"]);
    ok(tmp.path(), &["report", "SYN-1", "--out", "out"]);
    let first = tree(&tmp.path().join("out"));
    fs::remove_dir_all(tmp.path().join("out")).unwrap();
    ok(tmp.path(), &["report", "SYN-1", "--out", "out", "--jobs", "4"]);
    assert_eq!(first, tree(&tmp.path().join("out")));
}

#[test]
fn missing_manifest_fails_and_names_the_file() {
    let tmp = TempDir::new().unwrap();
    fs::create_dir_all(tmp.path().join("empty/sessions")).unwrap();
    let out = wsiattn(tmp.path(), &["report", "empty", "--out", "out"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("manifest.json"), "{stderr}");
}

#[test]
fn one_failing_case_does_not_stop_the_others() {
    let tmp = TempDir::new().unwrap();
    synth_case(tmp.path(), "A", &["--events", "10"]);
    synth_case(tmp.path(), "B", &["--events", "10", "--seed", "8"]);
    fs::create_dir_all(tmp.path().join("broken")).unwrap();
    let out = wsiattn(tmp.path(), &["report", "A", "broken", "B", "--out", "out", "--jobs", "2"]);
    assert!(!out.status.success());
    assert!(tmp.path().join("out/A/report.csv").is_file());
    assert!(tmp.path().join("out/B/report.csv").is_file());
    let combined = fs::read_to_string(tmp.path().join("out/report.csv")).unwrap();
    assert_eq!(combined.lines().count(), 7, "{combined}");
}

#[test]
fn malformed_session_is_reported_with_its_path() {
    let tmp = TempDir::new().unwrap();
    let case = synth_case(tmp.path(), "C", &["--events", "5"]);
    let bad = case.join("sessions/zz.jsonl");
    fs::write(&bad, "{\"slide_id\": \"nope\"\n").unwrap();
    let out = wsiattn(tmp.path(), &["report", "C", "--out", "out"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("zz.jsonl"));
}

#[test]
fn heatmap_render_and_compare() {
    let tmp = TempDir::new().unwrap();
    let case = synth_case(tmp.path(), "H", &["--events", "20"]);
    let manifest = case.join("manifest.json").to_string_lossy().into_owned();
    let mut args = vec!["heatmap", "--manifest", &manifest, "--out", "o", "--sigma", "2"];
    let logs = sessions(&case);
    args.extend(logs.iter().map(String::as_str));
    ok(tmp.path(), &args);
    assert!(tmp.path().join("o/heatmap.ahm").is_file());
    assert!(tmp.path().join("o/heatmap.ahm.meta.json").is_file());
    let png = image::open(tmp.path().join("o/heatmap.png")).unwrap();
    assert!(png.width() > 0);

    ok(tmp.path(), &["render", "o/heatmap.ahm", "--output", "o/again.png"]);
    assert_eq!(image::open(tmp.path().join("o/again.png")).unwrap().to_luma8(), png.to_luma8());

    let cc: serde_json::Value =
        serde_json::from_str(&ok(tmp.path(), &["compare", "cc", "o/heatmap.ahm", "o/heatmap.ahm"])).unwrap();
    assert!((cc["cc"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn scanpath_then_sss() {
    let tmp = TempDir::new().unwrap();
    let case = synth_case(tmp.path(), "S", &["--events", "12"]);
    let manifest = case.join("manifest.json").to_string_lossy().into_owned();
    let annotation = case.join("annotation.geojson").to_string_lossy().into_owned();
    let logs = sessions(&case);
    let mut args = vec!["scanpath", "--manifest", &manifest, "--annotation", &annotation, "--out", "o"];
    args.extend(logs.iter().map(String::as_str));
    ok(tmp.path(), &args);

    let csv = fs::read_to_string(tmp.path().join("o/scanpaths/gu01.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13, "header plus one row per event");
    let grades = fs::read_to_string(tmp.path().join("o/scanpaths/gu01.grades.txt")).unwrap();
    assert_eq!(grades.split_whitespace().count(), 12);

    let files: Vec<String> = logs
        .iter()
        .map(|s| {
            let stem = Path::new(s).file_stem().unwrap().to_string_lossy().into_owned();
            format!("o/scanpaths/{stem}.grades.txt")
        })
        .collect();
    let mut args = vec!["compare", "sss"];
    args.extend(files.iter().map(String::as_str));
    let v: serde_json::Value = serde_json::from_str(&ok(tmp.path(), &args)).unwrap();
    assert_eq!(v["mode"], "within");
    let sss = v["sss"].as_f64().unwrap();
    assert!((0.0..1.0).contains(&sss), "{sss}");

    let same = ["compare", "sss", &files[0], &files[0]];
    let v: serde_json::Value = serde_json::from_str(&ok(tmp.path(), &same)).unwrap();
    assert_eq!(v["sss"].as_f64().unwrap(), 1.0);
}

#[test]
fn welch_from_files() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("x"), "1 2\n3 4\n").unwrap();
    fs::write(tmp.path().join("y"), "2 3 4 5").unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(tmp.path(), &["compare", "ttest", "x", "y"])).unwrap();
    assert!((v["p"].as_f64().unwrap() - 0.31533359620122973).abs() < 1e-6);
    assert_eq!(v["df"].as_f64().unwrap(), 6.0);
}

#[test]
fn ingest_writes_clean_logs() {
    let tmp = TempDir::new().unwrap();
    let case = synth_case(tmp.path(), "I", &["--events", "8"]);
    let manifest = case.join("manifest.json").to_string_lossy().into_owned();
    let log = sessions(&case)[0].clone();
    ok(tmp.path(), &["ingest", "--manifest", &manifest, &log, "--out", "o"]);
    let written: Vec<_> = tree(&tmp.path().join("o")).into_iter().filter(|(n, _)| n.ends_with(".jsonl")).collect();
    assert_eq!(written.len(), 1);
    let lines = String::from_utf8(written[0].1.clone()).unwrap();
    assert_eq!(lines.lines().count(), 9, "header plus eight events");
}

#[test]
fn config_file_and_flags_override() {
    let tmp = TempDir::new().unwrap();
    synth_case(tmp.path(), "K", &["--events", "10"]);
    fs::write(tmp.path().join("cfg.json"), r#"{"sigma": 2.0, "output_dir": "from-config"}"#).unwrap();
    ok(tmp.path(), &["report", "K", "--config", "cfg.json"]);
    let run = fs::read_to_string(tmp.path().join("from-config/K/run.json")).unwrap();
    assert!(run.contains("\"sigma\": 2.0"), "{run}");
    ok(tmp.path(), &["report", "K", "--config", "cfg.json", "--sigma", "3", "--out", "flag"]);
    let run = fs::read_to_string(tmp.path().join("flag/K/run.json")).unwrap();
    assert!(run.contains("\"sigma\": 3.0"), "{run}");
    let bad = wsiattn(tmp.path(), &["report", "K", "--sigma", "-1", "--out", "x"]);
    assert!(!bad.status.success());
}

fn write_patches(dir: &Path, slide_id: &str, cols: u32, rows: u32, hot: impl Fn(u32, u32) -> bool) {
    fs::create_dir_all(dir.join("patches")).unwrap();
    let mut csv = String::from("slide_id,px,py,path\n");
    for py in 0..rows {
        for px in 0..cols {
            let colour = if hot(px, py) { Rgb([150, 40, 110]) } else { Rgb([235, 200, 225]) };
            let name = format!("patches/{px}_{py}.png");
            RgbImage::from_pixel(32, 32, colour).save(dir.join(&name)).unwrap();
            csv.push_str(&format!("{slide_id},{px},{py},{name}\n"));
        }
    }
    fs::write(dir.join("patches.csv"), csv).unwrap();
}

#[test]
fn predict_train_and_run() {
    let tmp = TempDir::new().unwrap();
    let case = synth_case(tmp.path(), "P", &[]);
    ok(tmp.path(), &["report", "P", "--out", "out"]);
    let m = case.join("manifest.json").to_string_lossy().into_owned();
    let slide: serde_json::Value = serde_json::from_slice(&fs::read(&m).unwrap()).unwrap();
    // 500 px at 10x on a 40x slide spans 2000 base pixels.
    let (cols, rows) = (
        slide["width_px"].as_u64().unwrap().div_ceil(2000) as u32,
        slide["height_px"].as_u64().unwrap().div_ceil(2000) as u32,
    );
    write_patches(tmp.path(), slide["slide_id"].as_str().unwrap(), cols, rows, |px, py| (px + py) % 2 == 0);

    let mut train = vec!["predict-train", "--manifest", &m, "--heatmap", "out/P/heatmaps/all.ahm"];
    train.extend_from_slice(&["--patches", "patches.csv", "--out", "model", "--epochs", "5", "--seed", "3"]);
    ok(tmp.path(), &train);
    assert!(tmp.path().join("model/model.json").is_file());

    let run = |out: &str| {
        ok(
            tmp.path(),
            &["predict-run", "--manifest", &m, "--model", "model/model.json", "--patches", "patches.csv", "--out", out],
        );
        fs::read(tmp.path().join(out).join("predicted.ahm")).unwrap()
    };
    let first = run("pred");
    assert!(tmp.path().join("pred/predicted.png").is_file());
    assert_eq!(first, run("pred2"), "same model and rasters give the same bytes");

    let mut csv = String::from("px,py,bin\n");
    for py in 0..rows {
        for px in 0..cols {
            csv.push_str(&format!("{px},{py},{}\n", (px + py) % 5));
        }
    }
    fs::write(tmp.path().join("pred.csv"), csv).unwrap();
    ok(tmp.path(), &["predict-run", "--manifest", &m, "--predictions", "pred.csv", "--out", "imp"]);
    assert!(tmp.path().join("imp/predicted.ahm").is_file());

    fs::write(tmp.path().join("short.csv"), "px,py,bin\n0,0,1\n").unwrap();
    let short = wsiattn(tmp.path(), &["predict-run", "--manifest", &m, "--predictions", "short.csv", "--out", "x"]);
    assert!(!short.status.success());
}
