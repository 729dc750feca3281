use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn oft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oft"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A short-training config written into `dir`.
fn quick_config(dir: &Path, steps: usize) -> String {
    let path = dir.join("quick.json");
    let text = format!(r#"{{"train": {{"steps": {steps}, "batch_size": 2}}, "model": {{"topdown_layers": 2}}}}"#);
    fs::write(&path, text).unwrap();
    p(&path).to_string()
}

#[test]
fn dump_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = oft(&["--dump-config"]);
    assert!(first.status.success());
    let json = stdout(&first);
    assert!(json.contains("\"topdown_layers\": 8"));
    let path = dir.path().join("dumped.json");
    fs::write(&path, &json).unwrap();
    let second = oft(&["--config", p(&path), "--dump-config"]);
    assert_eq!(stdout(&second), json);
}

#[test]
fn exit_codes() {
    assert_eq!(oft(&[]).status.code(), Some(1));
    assert_eq!(oft(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(oft(&["--help"]).status.code(), Some(0));
    assert_eq!(oft(&["--threads", "0", "gradcheck"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"modle": {}}"#).unwrap();
    assert_eq!(oft(&["--config", p(&bad), "--dump-config"]).status.code(), Some(2));
    let missing = dir.path().join("nowhere");
    assert_eq!(oft(&["eval", "--pred", p(&missing), "--gt", p(&missing)]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let out = oft(&["gradcheck", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.starts_with("check,relative_error,tolerance,coordinates,status"));
    assert!(text.lines().any(|l| l.starts_with("conv2d")));
    assert!(!text.contains("FAIL"));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    assert!(oft(&["synth-gen", "--out", p(&corpus), "--count", "5"]).status.success());
    let out = oft(&["eval", "--pred", p(&corpus), "--gt", p(&corpus), "--iou", "0.7", "--class", "Car"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let summary = text.lines().nth(1).unwrap();
    assert!(summary.starts_with("bev,0.7,Car,5,"), "{summary}");
    assert!(summary.ends_with(",1.000000"), "{summary}");
    assert!(text.contains("score,recall,precision"));

    let unknown = oft(&["eval", "--pred", p(&corpus), "--gt", p(&corpus), "--class", "Tram"]);
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn train_infer_render_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 3);
    let corpus = dir.path().join("corpus");
    assert!(oft(&["--config", &cfg, "synth-gen", "--out", p(&corpus), "--count", "3"]).status.success());

    let weights = dir.path().join("w.oftw");
    let out = oft(&["--config", &cfg, "train", "--data", p(&corpus), "--out", p(&weights)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = stdout(&out);
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "epoch,steps,total,confidence,position,dimension,angle");
    // three frames in batches of two: epochs of two steps
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,2,"));
    assert!(rows[2].starts_with("1,1,"));

    let preds = dir.path().join("preds");
    let out = oft(&["--config", &cfg, "infer", "--weights", p(&weights), "--data", p(&corpus), "--out", p(&preds)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for id in ["000000", "000001", "000002"] {
        let text = fs::read_to_string(preds.join(format!("{id}.txt"))).unwrap();
        assert!(text.lines().all(|l| l.split_whitespace().count() == 16));
    }

    let map = dir.path().join("bev.pgm");
    let out = oft(&[
        "--config", &cfg, "render-bev", "--weights", p(&weights), "--data", p(&corpus), "--frame", "000001", "--out", p(&map),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = fs::read(&map).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(bytes.len(), "P5\n32 32\n255\n".len() + 32 * 32);

    // weights written for a different architecture are rejected
    let wrong = oft(&["infer", "--weights", p(&weights), "--data", p(&corpus), "--out", p(&preds)]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn single_threaded_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 2);
    let corpus = dir.path().join("corpus");
    assert!(oft(&["--config", &cfg, "synth-gen", "--out", p(&corpus), "--count", "2"]).status.success());
    let run = |name: &str| {
        let w = dir.path().join(name);
        let out = oft(&["--threads", "1", "--config", &cfg, "train", "--data", p(&corpus), "--out", p(&w)]);
        assert!(out.status.success());
        (stdout(&out), fs::read(w).unwrap())
    };
    assert_eq!(run("a.oftw"), run("b.oftw"));
}

#[test]
fn ablate_tabulates_each_depth() {
    let out = oft(&["ablate", "--layers", "0,2", "--scenes", "2", "--steps", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "layers,steps,final_loss,ap");
    assert!(rows[1].starts_with("0,2,"));
    assert!(rows[2].starts_with("2,2,"));
    assert_eq!(oft(&["ablate", "--layers", "3", "--steps", "1"]).status.code(), Some(1));
}

/// The full overfit workflow through the binary; several minutes.
#[test]
#[ignore]
fn overfit_workflow_reaches_high_ap() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    assert!(oft(&["synth-gen", "--out", p(&corpus), "--count", "20"]).status.success());
    let weights = dir.path().join("w.oftw");
    assert!(oft(&["train", "--data", p(&corpus), "--out", p(&weights)]).status.success());
    let preds = dir.path().join("preds");
    assert!(oft(&["infer", "--weights", p(&weights), "--data", p(&corpus), "--out", p(&preds)]).status.success());
    let out = oft(&["eval", "--pred", p(&preds), "--gt", p(&corpus)]);
    let summary = stdout(&out).lines().nth(1).unwrap().to_string();
    let ap: f64 = summary.rsplit(',').next().unwrap().parse().unwrap();
    assert!(ap >= 0.9, "{summary}");
}
