//! Runs the `amcnet` binary end to end on small phantoms.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use amcnet::data::{read_mask, read_patches, SliceLabel};
use amcnet::network::load_checkpoint;
use amcnet::{ModelSpec, ModelState, Variant};

fn amcnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amcnet")).args(args).current_dir(cwd).output().expect("spawn amcnet")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = amcnet(args, cwd);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of(args: &[&str], cwd: &Path) -> String {
    let out = amcnet(args, cwd);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

const TINY: &str = "\
variant = AMC_NET
base_channels = 2
epochs = 1
batch_size = 4
dropout_p = 0
patch.roi_boxes = 2
patch.non_infected = 1
patch.boundary = false
";

/// Two small patients prepared into patch stores under `dir`.
fn tiny_patches(dir: &Path) {
    std::fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    ok(&["phantom", "--seed", "7", "--count", "2", "--slices", "2", "--size", "256", "--out", "ph"], dir);
    ok(&["prep", "--volumes", "ph", "--seed", "1", "--config", "tiny.cfg", "--out", "pch"], dir);
}

#[test]
fn phantom_count_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = |out: &'static str| ["phantom", "--seed", "7", "--count", "3", "--slices", "2", "--size", "128", "--out", out];
    ok(&args("a"), d);
    ok(&args("b"), d);
    let a = files(&d.join("a"));
    let volumes = a.iter().filter(|p| p.extension().is_some_and(|e| e == "ctv")).count();
    let masks = a.iter().filter(|p| p.to_string_lossy().ends_with(".msk") && !p.to_string_lossy().contains("lungs")).count();
    assert_eq!((volumes, masks), (3, 3));
    for f in a.iter().filter(|p| !p.ends_with("run_manifest.json")) {
        let other = d.join("b").join(f.file_name().unwrap());
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(other).unwrap(), "{}", f.display());
    }
}

#[test]
fn zero_lesion_fraction_gives_empty_masks_and_clean_patches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["phantom", "--seed", "2", "--count", "1", "--slices", "2", "--lesion-fraction", "0", "--out", "ph"], d);
    assert_eq!(read_mask(&d.join("ph/P1.msk")).unwrap().count(), 0);
    ok(&["prep", "--volumes", "ph", "--seed", "4", "--out", "pch"], d);
    let patches = read_patches(&d.join("pch/P1.pch")).unwrap();
    assert_eq!(patches.len(), 2 * 12);
    assert!(patches.iter().all(|p| p.label == SliceLabel::NonInfected));
}

#[test]
fn prep_respects_the_per_slice_budget_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["phantom", "--seed", "5", "--count", "1", "--slices", "2", "--infected-fraction", "1", "--out", "ph"], d);
    ok(&["prep", "--volumes", "ph", "--seed", "9", "--out", "a"], d);
    ok(&["prep", "--volumes", "ph", "--seed", "9", "--out", "b"], d);
    let patches = read_patches(&d.join("a/P1.pch")).unwrap();
    assert!(patches.len() <= 64);
    assert!(patches.iter().all(|p| p.origin.slice_label == SliceLabel::Infected));
    assert!(patches.iter().filter(|p| p.label == SliceLabel::Infected).all(|p| p.mask.contains(&1)));
    let csv = |o: &str| std::fs::read(d.join(o).join("patches.csv")).unwrap();
    assert_eq!(csv("a"), csv("b"));
}

#[test]
fn lopo_training_writes_one_checkpoint_per_patient() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_patches(d);
    ok(&["train-ensemble", "--config", "tiny.cfg", "--patches", "pch", "--seed", "3", "--out", "ens"], d);
    let checkpoints = files(&d.join("ens")).into_iter().filter(|p| p.extension().is_some_and(|e| e == "amc1")).count();
    assert_eq!(checkpoints, 2);
    let stdout = ok(&["predict", "--model", "ens/bundle.json", "--volume", "ph/P1.ctv", "--out", "pred"], d);
    assert!(stdout.contains("voxels segmented"));
    assert_eq!(read_mask(&d.join("pred/P1_pred.msk")).unwrap().dims, [2, 256, 256]);
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_patches(d);
    std::fs::write(d.join("lr0.cfg"), format!("{TINY}learning_rate = 0\n")).unwrap();
    ok(&["train", "--config", "lr0.cfg", "--patches", "pch", "--seed", "11", "--out", "m"], d);
    let trained = load_checkpoint(&d.join("m/model.amc1")).unwrap();
    let spec = ModelSpec::new(Variant::AmcNet).with_base_channels(2).with_dropout(0.0).with_seed(11);
    let fresh = ModelState::<f32>::build(&spec).unwrap();
    assert_eq!(trained.params(), fresh.params());
}

#[test]
fn evaluate_severity_and_params_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["phantom", "--seed", "3", "--count", "1", "--slices", "2", "--size", "128", "--out", "ph"], d);
    let stdout = ok(&["evaluate", "--pred", "ph/P1.msk", "--truth", "ph/P1.msk", "--out", "ev"], d);
    assert!(stdout.contains("DSC: 1.0000"), "{stdout}");
    let csv = std::fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains(",0,1.000000,"), "{csv}");

    ok(&["phantom", "--seed", "3", "--count", "1", "--slices", "2", "--size", "128", "--lesion-fraction", "0", "--out", "clean"], d);
    let stdout = ok(&["severity", "--mask", "clean/P1.msk", "--lungs", "clean/P1_lungs.msk", "--out", "sev"], d);
    assert!(stdout.starts_with("CT-0"), "{stdout}");
    let stdout = ok(&["severity", "--mask", "clean/P1.msk", "--volume", "clean/P1.ctv", "--out", "sev_body"], d);
    assert!(stdout.starts_with("CT-0"), "{stdout}");

    let stdout = ok(&["params", "--variant", "AMC_NET"], d);
    let count: f64 = stdout.split_whitespace().rev().nth(1).unwrap().parse().unwrap();
    assert!((count / 3.34e6 - 1.0).abs() < 0.05, "{stdout}");
}

#[test]
fn feature_maps_are_written_per_channel() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_patches(d);
    ok(&["train", "--config", "tiny.cfg", "--patches", "pch", "--seed", "1", "--out", "m"], d);
    ok(&["features", "--model", "m/model.amc1", "--volume", "ph/P1.ctv", "--block", "5", "--out", "f"], d);
    let pngs = files(&d.join("f")).into_iter().filter(|p| p.extension().is_some_and(|e| e == "png")).count();
    // Block 5 is the bottleneck: 16 x base channels.
    assert_eq!(pngs, 32);
}

#[test]
fn failures_name_the_offending_path_or_keys() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let err = stderr_of(&["predict", "--model", "missing.json", "--volume", "v.ctv", "--out", "o"], d);
    assert!(err.contains("missing.json"), "{err}");

    std::fs::write(d.join("corrupt.msk"), b"MSK1\x01\x00").unwrap();
    std::fs::write(d.join("lungs.msk"), b"").unwrap();
    let err = stderr_of(&["severity", "--mask", "corrupt.msk", "--lungs", "lungs.msk", "--out", "o"], d);
    assert!(err.contains("corrupt.msk"), "{err}");

    std::fs::write(d.join("bad.cfg"), "epochs = 0\nbatch_size = x\nfoo = 1\n").unwrap();
    std::fs::create_dir(d.join("pch")).unwrap();
    let err = stderr_of(&["train", "--config", "bad.cfg", "--patches", "pch", "--seed", "1", "--out", "o"], d);
    for key in ["epochs", "batch_size", "foo"] {
        assert!(err.contains(key), "missing {key} in {err}");
    }

    let err = stderr_of(&["phantom", "--count", "1", "--out", "o"], d);
    assert!(err.contains("--seed"), "{err}");
}

#[test]
fn rerun_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_patches(d);
    ok(&["train", "--config", "tiny.cfg", "--patches", "pch", "--seed", "3", "--val", "P2", "--out", "m"], d);
    let manifest = d.join("m/run_manifest.json");
    let replay = d.join("replay");
    ok(&["rerun", manifest.to_str().unwrap(), "--out", replay.to_str().unwrap()], d);
    for f in ["model.amc1", "curve.csv"] {
        assert_eq!(std::fs::read(d.join("m").join(f)).unwrap(), std::fs::read(replay.join(f)).unwrap(), "{f}");
    }
    std::fs::write(d.join("tiny.cfg"), format!("{TINY}epochs = 2\n")).unwrap();
    let err = stderr_of(&["rerun", manifest.to_str().unwrap(), "--out", "again"], d);
    assert!(err.contains("changed"), "{err}");
}
