use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cardioprior::io::{read_labels, write_volume};
use cardioprior::{Grid, Volume};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cardioprior"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture_runs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/report")
}

#[test]
fn eval_shape_mismatch_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let a = Volume::new(Grid::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap(), vec![1u8; 64]).unwrap();
    let b = Volume::new(Grid::new([4, 4, 5], [1.0; 3], [0.0; 3]).unwrap(), vec![1u8; 80]).unwrap();
    write_volume(&a, dir.path().join("p")).unwrap();
    write_volume(&b, dir.path().join("g")).unwrap();
    let out = run(&["eval", "--pred", "p.mhd", "--gt", "g.mhd", "--out", "e"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("ShapeMismatch"), "{err}");
}

#[test]
fn usage_errors_exit_1_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["eval", "--bogus"], &["--jobs", "0", "report", "--runs", "x", "--out", "y"]] {
        let out = run(args, dir.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert_eq!(stderr(&out).lines().count(), 1, "{}", stderr(&out));
    }
    assert!(run(&["--help"], dir.path()).status.success());
}

#[test]
fn gradcheck_volume_passes() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gradcheck", "--loss", "volume", "--size", "8", "--seed", "0", "--out", "gc.json"], dir.path());
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gc.json")).unwrap()).unwrap();
    assert!(doc["max_rel_err"].as_f64().unwrap() < 1e-6);
    assert_eq!(doc["passed"], true);
    assert!(dir.path().join("gc.manifest.json").exists());
}

#[test]
fn unknown_loss_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--loss", "shape", "--out", "g.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("UnknownLoss"));
}

#[test]
fn report_over_four_runs() {
    let dir = tempfile::tempdir().unwrap();
    let runs = fixture_runs().join("runs");
    let names = ["baseline", "volume", "moment", "relation"];
    let mut args = vec!["report".to_string(), "--out".into(), "summary".into(), "--runs".into()];
    args.extend(names.iter().map(|n| runs.join(n).display().to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&args, dir.path());
    let csv = std::fs::read_to_string(dir.path().join("summary/summary.csv")).unwrap();
    let golden = std::fs::read_to_string(fixture_runs().join("golden/summary.csv")).unwrap();
    assert_eq!(csv, golden);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,Dice,Jaccard,HD,ASSD");
    assert_eq!(lines.len(), 5);
    for (line, name) in lines[1..].iter().zip(names) {
        assert!(line.starts_with(&format!("{name},")));
    }
    let md = std::fs::read_to_string(dir.path().join("summary/summary.md")).unwrap();
    assert_eq!(md, std::fs::read_to_string(fixture_runs().join("golden/summary.md")).unwrap());
}

#[test]
fn prep_centers_a_single_voxel() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::new([9, 7, 5], [1.0, 1.5, 2.0], [3.0, -2.0, 1.0]).unwrap();
    let mut data = vec![0u8; grid.len()];
    data[grid.index(2, 5, 1)] = 3;
    write_volume(&Volume::new(grid, data).unwrap(), dir.path().join("in_label")).unwrap();
    ok(&["prep", "--in", "in_label.mhd", "--out", "out", "--size", "16", "--spacing", "1.0"], dir.path());
    let out = read_labels(dir.path().join("out/in_label.mhd")).unwrap();
    assert_eq!(out.dims(), [16; 3]);
    assert_eq!(out.get(8, 8, 8), 3);
}

#[test]
fn phantom_first_index_continues_a_series() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["phantom", "--n", "3", "--size", "24", "--spacing", "4", "--out", "all"], dir.path());
    ok(
        &["phantom", "--n", "1", "--first-index", "2", "--size", "24", "--spacing", "4", "--out", "tail"],
        dir.path(),
    );
    for f in ["case_002_image.raw", "case_002_label.raw"] {
        let a = std::fs::read(dir.path().join("all").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("tail").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    assert!(!dir.path().join("tail/case_000_label.mhd").exists());
}

/// Runs a small pipeline in `root` and returns every non-manifest output.
fn pipeline(root: &Path, jobs: &str) -> Vec<(String, Vec<u8>)> {
    let j = ["--jobs", jobs];
    let with = |args: &[&str]| {
        let mut v: Vec<&str> = j.to_vec();
        v.extend_from_slice(args);
        ok(&v, root);
    };
    let grid = ["--size", "24", "--spacing", "4"];
    with(&[&["phantom", "--n", "4", "--out", "train"][..], &grid].concat());
    with(&[&["phantom", "--n", "2", "--first-index", "4", "--out", "test"][..], &grid].concat());
    with(&["stats", "--labels", "train", "--out", "stats.json"]);
    with(&[&["atlas", "--labels", "train", "--out", "atlas"][..], &grid].concat());
    for preset in ["baseline", "volume"] {
        let run = format!("runs/{preset}");
        with(&[
            "train", "--data", "train", "--stats", "stats.json", "--atlas", "atlas", "--preset", preset, "--epochs",
            "6", "--reg-start", "3", "--out", &run, "--predict", "test",
        ]);
        with(&["eval", "--pred", &format!("{run}/pred"), "--gt", "test", "--out", &run]);
    }
    with(&["report", "--runs", "runs/baseline", "runs/volume", "--out", "summary"]);
    let mut files = Vec::new();
    collect(root, root, &mut files);
    files.sort();
    files
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect(root, &p, out);
        } else if !p.to_string_lossy().ends_with(".manifest.json") {
            let rel = p.strip_prefix(root).unwrap().display().to_string();
            out.push((rel, std::fs::read(&p).unwrap()));
        }
    }
}

#[test]
fn pipeline_is_byte_identical_across_runs_and_jobs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = pipeline(a.path(), "1");
    let fb = pipeline(b.path(), "3");
    let names: Vec<&String> = fa.iter().map(|f| &f.0).collect();
    assert_eq!(names, fb.iter().map(|f| &f.0).collect::<Vec<_>>());
    assert!(names.iter().any(|n| n.ends_with("summary.csv")));
    for ((n, x), (_, y)) in fa.iter().zip(&fb) {
        assert!(x == y, "{n} differs");
    }
}

#[test]
fn manifests_echo_params_and_hash_inputs() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["phantom", "--n", "2", "--size", "24", "--spacing", "4", "--out", "d"], dir.path());
    ok(&["stats", "--labels", "d", "--out", "stats.json"], dir.path());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("stats.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "stats");
    assert_eq!(m["params"]["labels"], "d");
    let inputs = m["inputs"].as_array().unwrap();
    // two cases, header and payload each
    assert_eq!(inputs.len(), 4);
    assert!(inputs.iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));
    assert_eq!(m["outputs"][0], "stats.json");
    assert!(m["timestamp_unix"].as_u64().unwrap() > 0);
}
