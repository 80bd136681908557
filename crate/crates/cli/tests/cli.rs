use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn strack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_strack"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const STATIC_SPEC: &str = "\
# static textured target
frames = 12
extent = 120,100
target = 48,38,24,22
texture_seed = 5
motion = constant-velocity 0,0
background = 2
";

const MOVING_SPEC: &str = "\
frames = 10
extent = 120,100
target = 30,30,22,20
texture_seed = 8
motion = constant-velocity 1.5,0.5
background = 3
";

const DRIFT_SPEC: &str = "\
frames = 10
extent = 120,100
target = 60,40,20,24
texture_seed = 11
motion = constant-velocity -1,1
background = 7
";

const SWAY_SPEC: &str = "\
frames = 10
extent = 120,100
target = 40,50,26,18
texture_seed = 13
motion = sinusoidal 6,4,8
background = 9
";

fn synth(dir: &Path, name: &str, spec: &str, seed: &str) -> PathBuf {
    let spec_path = dir.join(format!("{name}.spec"));
    fs::write(&spec_path, spec).unwrap();
    let out = dir.join(name);
    let o = strack(&["synth", "--spec", p(&spec_path), "--out", p(&out), "--seed", seed]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

/// Quick training run; `extra` overrides the small defaults used here.
fn train(dir: &Path, data: &[&Path], seed: &str, extra: &[&str]) -> (PathBuf, Output) {
    let model = dir.join(format!("model-{seed}.bin"));
    let data = data.iter().map(|d| p(d)).collect::<Vec<_>>().join(",");
    let mut args = vec!["train", "--data", &data, "--out", p(&model), "--seed", seed];
    if extra.is_empty() {
        args.extend(["--epochs", "4", "--patches", "12", "--per-patch", "5"]);
    }
    args.extend(extra);
    (model.clone(), strack(&args))
}

#[test]
fn synth_writes_frames_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = synth(tmp.path(), "a", MOVING_SPEC, "4");
    let b = synth(tmp.path(), "b", MOVING_SPEC, "4");
    assert_eq!(fs::read_dir(a.join("frames")).unwrap().count(), 10);
    let gt = fs::read_to_string(a.join("groundtruth.txt")).unwrap();
    assert_eq!(gt.lines().count(), 10);
    for f in ["groundtruth.txt", "frames/0001.ppm", "frames/0010.ppm"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn synth_rejects_target_leaving_frame() {
    let tmp = TempDir::new().unwrap();
    let spec = tmp.path().join("bad.spec");
    fs::write(&spec, MOVING_SPEC.replace("1.5,0.5", "20,0")).unwrap();
    let o = strack(&["synth", "--spec", p(&spec), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn train_missing_dir_is_user_error() {
    let tmp = TempDir::new().unwrap();
    let (_, o) = train(tmp.path(), &[&tmp.path().join("nope")], "0", &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_divergence_exits_two() {
    let tmp = TempDir::new().unwrap();
    let seq = synth(tmp.path(), "s", MOVING_SPEC, "1");
    let model = tmp.path().join("m.bin");
    let o = strack(&[
        "train", "--data", p(&seq), "--out", p(&model), "--epochs", "3", "--patches", "12", "--per-patch", "3",
        "--lr-head", "1e308", "--lr-fam", "1e308",
    ]);
    assert_eq!(code(&o), 2, "{}", stdout(&o));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert!(!model.exists());
}

#[test]
fn train_track_eval_round_trip() {
    let tmp = TempDir::new().unwrap();
    let still = synth(tmp.path(), "still", STATIC_SPEC, "1");
    let moving = synth(tmp.path(), "moving", MOVING_SPEC, "2");
    let drift = synth(tmp.path(), "drift", DRIFT_SPEC, "3");
    let sway = synth(tmp.path(), "sway", SWAY_SPEC, "4");

    // Default plan and epochs.
    let (model, o) = train(tmp.path(), &[&still, &moving, &drift, &sway], "3", &["--epochs", "30"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mse: Vec<f64> = text
        .lines()
        .filter(|l| l.starts_with("epoch"))
        .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
        .collect();
    assert_eq!(mse.len(), 30);
    let variance: f64 = text
        .lines()
        .find(|l| l.starts_with("training set"))
        .and_then(|l| l.split_whitespace().last())
        .unwrap()
        .parse()
        .unwrap();
    assert!(mse[29] < variance, "final MSE {} vs variance {variance}", mse[29]);

    let res = tmp.path().join("still.txt");
    let o = strack(&["track", "--seq", p(&still), "--model", p(&model), "--out", p(&res), "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o).lines().find(|l| l.starts_with("mean IoU")).unwrap().to_string();
    let miou: f64 = line.split_whitespace().last().unwrap().parse().unwrap();
    assert!(miou > 0.8, "{line}");

    let res2 = tmp.path().join("still-again.txt");
    let o = strack(&["track", "--seq", p(&still), "--model", p(&model), "--out", p(&res2), "--seed", "1"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&res).unwrap(), fs::read(&res2).unwrap());

    let spatial = tmp.path().join("spatial.txt");
    let o = strack(&[
        "track", "--seq", p(&moving), "--model", p(&model), "--out", p(&spatial), "--stream", "spatial",
        "--attention", "off", "--pooling", "gap", "--scorer", "oracle",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = strack(&[
        "track", "--seq", p(&moving), "--model", p(&model), "--out", p(&spatial), "--fusion", "sum",
    ]);
    assert_eq!(code(&o), 2, "a concat-fusion model cannot run sum fusion");

    let o = strack(&[
        "eval", "--pred", &format!("{},{}", p(&res), p(&spatial)), "--gt", &format!("{},{}", p(&still), p(&moving)),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    let auc = |r: &str| r.split_whitespace().nth(1).unwrap().parse::<f64>().unwrap();
    assert!(auc(rows[0]) >= auc(rows[1]), "{table}");
    assert!(tmp.path().join("still.txt.curves").exists());
}

#[test]
fn train_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let seq = synth(tmp.path(), "s", MOVING_SPEC, "1");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    fs::create_dir(&a).unwrap();
    fs::create_dir(&b).unwrap();
    let (ma, oa) = train(&a, &[&seq], "7", &[]);
    let (mb, ob) = train(&b, &[&seq], "7", &[]);
    assert_eq!(code(&oa), 0);
    assert_eq!(code(&ob), 0);
    assert_eq!(stdout(&oa), stdout(&ob).replace(p(&b), p(&a)));
    assert_eq!(fs::read(ma).unwrap(), fs::read(mb).unwrap());
}

#[test]
fn track_oracle_needs_full_ground_truth() {
    let tmp = TempDir::new().unwrap();
    let seq = synth(tmp.path(), "s", MOVING_SPEC, "1");
    let gt = fs::read_to_string(seq.join("groundtruth.txt")).unwrap();
    fs::write(seq.join("groundtruth.txt"), gt.lines().next().unwrap()).unwrap();
    let (model, o) = train(tmp.path(), &[&synth(tmp.path(), "t", MOVING_SPEC, "2")], "0", &[]);
    assert_eq!(code(&o), 0);
    let out = tmp.path().join("r.txt");
    let o = strack(&["track", "--seq", p(&seq), "--model", p(&model), "--out", p(&out), "--scorer", "oracle"]);
    assert_eq!(code(&o), 2);
    // Without the oracle an unannotated sequence tracks fine.
    let o = strack(&["track", "--seq", p(&seq), "--model", p(&model), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    assert!(!stdout(&o).contains("mean IoU"));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 10);
}

#[test]
fn eval_perfect_prediction_and_mismatch() {
    let tmp = TempDir::new().unwrap();
    let seq = synth(tmp.path(), "s", MOVING_SPEC, "1");
    let perfect = seq.join("groundtruth.txt");
    let o = strack(&["eval", "--pred", p(&perfect), "--gt", p(&seq), "--name", "perfect"]);
    assert_eq!(code(&o), 0);
    let table = stdout(&o);
    assert!(table.lines().next().unwrap().starts_with("name"));
    let row: Vec<&str> = table.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row, vec!["perfect", "0.990", "1.000"]);

    let short = tmp.path().join("short.txt");
    let gt = fs::read_to_string(&perfect).unwrap();
    fs::write(&short, gt.lines().take(5).collect::<Vec<_>>().join("\n")).unwrap();
    let o = strack(&["eval", "--pred", p(&short), "--gt", p(&seq)]);
    assert_eq!(code(&o), 2);

    let o = strack(&["eval", "--pred", &format!("{},{}", p(&perfect), p(&perfect)), "--gt", p(&seq), "--name", "a,a"]);
    assert_eq!(code(&o), 2, "duplicate names are rejected");
}

#[test]
fn selftest_passes_and_names_corrupted_vjp() {
    let o = strack(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("all "));

    let o = strack(&["selftest", "--corrupt-vjp", "conv2d"]);
    assert_ne!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("FAILED grad/conv2d"), "{text}");
    assert!(text.lines().filter(|l| l.starts_with("FAILED")).count() == 1, "{text}");

    let o = strack(&["selftest", "--corrupt-vjp", "nonsense"]);
    assert_eq!(code(&o), 2);
}
