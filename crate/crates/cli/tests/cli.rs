use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pacgnet_core::detect::dataset::{encode_ppm, read_split};
use pacgnet_core::{FeatureMap, KeyValues, Shape};
use tempfile::TempDir;

fn pacgnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pacgnet")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Tiny architecture so train/eval round trips take well under a second.
const SMALL: &str = "image_size=32\nwidths=4,8,8,8,8\nbatch_size=2\nmin_objects=1\nmax_objects=2\n";

fn small(extra: &str) -> String {
    format!("{SMALL}{extra}")
}

fn config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p
}

fn synth(dir: &Path, cfg: &Path, count: usize) -> PathBuf {
    let out = dir.join(format!("split{count}"));
    ok(&pacgnet(&["synth", "--config", path(cfg), "--out", path(&out), "--count", &count.to_string()]));
    out
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_zero_scenes_writes_only_meta() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("empty");
    ok(&pacgnet(&["synth", "--out", path(&out), "--count", "0"]));
    let names: Vec<String> = files(&out).into_iter().map(|f| f.0).collect();
    assert_eq!(names, ["config.resolved", "meta.txt"]);
    let split = read_split(&out).unwrap();
    assert!(split.scenes.is_empty());
    assert_eq!(split.meta.get("count"), Some("0"));
}

#[test]
fn synth_hundred_scenes_at_default_size() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("s");
    ok(&pacgnet(&["synth", "--out", path(&out), "--count", "100"]));
    let names: Vec<String> = files(&out).into_iter().map(|f| f.0).collect();
    for i in 0..100 {
        for suffix in ["_rgb.ppm", "_ir.ppm", ".txt"] {
            assert!(names.contains(&format!("{i:04}{suffix}")), "{i:04}{suffix}");
        }
    }
    assert_eq!(names.len(), 302);
    let split = read_split(&out).unwrap();
    assert!(split.scenes.iter().all(|s| s.rgb.shape() == Shape::new(1, 3, 64, 64)));
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "seed=7\n");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        ok(&pacgnet(&["synth", "--config", path(&cfg), "--out", path(out), "--count", "5"]));
    }
    // the resolved config names its own output directory
    let data = |d: &Path| files(d).into_iter().filter(|f| f.0 != "config.resolved").collect::<Vec<_>>();
    assert_eq!(data(&a), data(&b));
}

#[test]
fn synth_into_unwritable_dir_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = pacgnet(&["synth", "--out", path(&blocker.join("sub")), "--count", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "learning_rate=0.1\n");
    let out = pacgnet(&["synth", "--config", path(&cfg), "--out", path(&tmp.path().join("o")), "--count", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn gradcheck_passes_and_names_components() {
    let stdout = ok(&pacgnet(&["gradcheck", "--seed", "1"]));
    for name in ["scg", "pfmg", "end-to-end"] {
        assert!(stdout.lines().any(|l| l.starts_with(name)), "{name} missing:\n{stdout}");
    }
}

#[test]
fn gradcheck_catches_corrupted_backward() {
    let out = pacgnet(&["gradcheck", "--inject-fault", "sigmoid"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sigmoid"));
}

#[test]
fn train_then_eval_is_well_formed() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &small("epochs=2\n"));
    let data = synth(tmp.path(), &cfg, 4);
    let run = tmp.path().join("run");
    ok(&pacgnet(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run)]));

    let trace = fs::read_to_string(run.join("loss_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert!(lines.next().unwrap().starts_with("epoch,"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(r.split(',').skip(1).all(|v| v.parse::<f64>().unwrap().is_finite()), "{r}");
    }
    let resolved = KeyValues::parse(&fs::read_to_string(run.join("config.resolved")).unwrap()).unwrap();
    assert_eq!(resolved.get("widths"), Some("4,8,8,8,8"));

    let report = ok(&pacgnet(&["eval", "--ckpt", path(&run.join("checkpoint.txt")), "--data", path(&data)]));
    let map: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("map50 "))
        .unwrap_or_else(|| panic!("no map50 line:\n{report}"))
        .trim()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&map));
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &small("epochs=2\n"));
    let data = synth(tmp.path(), &cfg, 2);
    let run = tmp.path().join("run");
    ok(&pacgnet(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run)]));
    let three = config(tmp.path(), &small("epochs=2\nnum_classes=3\n"));
    let other = synth(tmp.path(), &three, 3);
    let out = pacgnet(&["eval", "--ckpt", path(&run.join("checkpoint.txt")), "--data", path(&other)]);
    assert_eq!(out.status.code(), Some(2));

    let garbage = tmp.path().join("bad.txt");
    fs::write(&garbage, "not a checkpoint\n").unwrap();
    let out = pacgnet(&["eval", "--ckpt", path(&garbage), "--data", path(&data)]);
    assert_eq!(out.status.code(), Some(2));
}

/// Trains with a zero learning rate, which leaves the initial parameters.
fn untrained_checkpoint(tmp: &Path) -> PathBuf {
    let cfg = config(tmp, &small("epochs=1\nlr=0\n"));
    let data = synth(tmp, &cfg, 2);
    let run = tmp.join("init");
    ok(&pacgnet(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run)]));
    run.join("checkpoint.txt")
}

fn write_image(dir: &Path, name: &str, img: &FeatureMap) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, encode_ppm(img)).unwrap();
    p
}

fn csv_grid(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn heatmap_levels_have_pyramid_dims() {
    let tmp = TempDir::new().unwrap();
    let ckpt = untrained_checkpoint(tmp.path());
    let data = read_split(&tmp.path().join("split2")).unwrap();
    let rgb = write_image(tmp.path(), "rgb.ppm", &data.scenes[0].rgb);
    let ir = write_image(tmp.path(), "ir.ppm", &data.scenes[0].ir);
    let out = tmp.path().join("heat");
    ok(&pacgnet(&["heatmap", "--ckpt", path(&ckpt), "--scene", path(&rgb), path(&ir), "--out", path(&out)]));
    for (level, side) in [(3, 4), (4, 2), (5, 1)] {
        let pgm = fs::read(out.join(format!("p{level}.pgm"))).unwrap();
        let header = format!("P5\n{side} {side}\n255\n");
        assert!(pgm.starts_with(header.as_bytes()), "p{level}");
        assert_eq!(pgm.len(), header.len() + side * side);
        let grid = csv_grid(&fs::read_to_string(out.join(format!("p{level}.csv"))).unwrap());
        assert_eq!(grid.len(), side);
        assert!(grid.iter().all(|r| r.len() == side));
    }
}

#[test]
fn zero_images_give_uniform_heatmaps() {
    let tmp = TempDir::new().unwrap();
    let ckpt = untrained_checkpoint(tmp.path());
    let black = FeatureMap::zeros(Shape::new(1, 3, 32, 32));
    let rgb = write_image(tmp.path(), "rgb.ppm", &black);
    let ir = write_image(tmp.path(), "ir.ppm", &black);
    let out = tmp.path().join("heat");
    ok(&pacgnet(&["heatmap", "--ckpt", path(&ckpt), "--scene", path(&rgb), path(&ir), "--out", path(&out)]));
    for level in 3..=5 {
        let grid = csv_grid(&fs::read_to_string(out.join(format!("p{level}.csv"))).unwrap());
        let all: Vec<f64> = grid.into_iter().flatten().collect();
        let spread = all.iter().cloned().fold(f64::MIN, f64::max) - all.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-9, "p{level} spread {spread}");
    }
}

#[test]
fn heatmap_with_missing_scene_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let ckpt = untrained_checkpoint(tmp.path());
    let missing = tmp.path().join("nope.ppm");
    let out = pacgnet(&[
        "heatmap",
        "--ckpt",
        path(&ckpt),
        "--scene",
        path(&missing),
        path(&missing),
        "--out",
        path(&tmp.path().join("h")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn trained_model_scores_its_training_split() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "widths=8,16,32,32,32\nepochs=100\nnoise=0.01\nclutter=0.05\n");
    let data = synth(tmp.path(), &cfg, 20);
    let run = tmp.path().join("run");
    ok(&pacgnet(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run)]));
    let report = ok(&pacgnet(&["eval", "--ckpt", path(&run.join("checkpoint.txt")), "--data", path(&data)]));
    let map: f64 = report.lines().find_map(|l| l.strip_prefix("map50 ")).unwrap().trim().parse().unwrap();
    assert!(map > 0.5, "{report}");
}
