use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fino(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fino")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "widths = 2,3,4,5\nblocks = 1,1,1,1\nhead_width = 2\nmax_steps = 3\nbatch_size = 2\n";

fn dataset(dir: &Path, count: &str, extra: &[&str]) {
    let mut args = vec!["generate", "--out", s(dir), "--count", count, "--size", "64", "--seed", "3"];
    args.extend_from_slice(extra);
    let out = fino(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_train_eval_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, "3", &["--pseudo-frac", "0.5", "--brightness", "0.2"]);
    for sub in ["A", "B", "label"] {
        assert_eq!(fs::read_dir(data.join(sub)).unwrap().count(), 3);
    }

    let cfg = tmp.path().join("train.cfg");
    fs::write(&cfg, format!("# tiny run\n{SMALL}")).unwrap();
    let ckpt = tmp.path().join("model.ckpt");
    let out = fino(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i);
        for key in ["lr", "l_cd", "l_sal", "l_gcl", "l_rcl", "total"] {
            assert!(l[key].as_f64().unwrap().is_finite(), "{key}");
        }
    }

    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--threshold", "0.5"];
        args.extend_from_slice(extra);
        let out = fino(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let first = eval(&[]);
    let masks = tmp.path().join("masks");
    assert_eq!(first, eval(&["--dump-masks", s(&masks)]));
    let metrics: serde_json::Value = serde_json::from_str(first.trim()).unwrap();
    let total: u64 = ["tp", "fp", "fn", "tn"].iter().map(|k| metrics[*k].as_u64().unwrap()).sum();
    assert_eq!(total, 3 * 64 * 64);
    assert_eq!(fs::read_dir(&masks).unwrap().count(), 3);

    let name = fs::read_dir(data.join("A")).unwrap().next().unwrap().unwrap().file_name();
    let mask = tmp.path().join("pred.png");
    let out = fino(&[
        "predict",
        "--ckpt",
        s(&ckpt),
        "--a",
        s(&data.join("A").join(&name)),
        "--b",
        s(&data.join("B").join(&name)),
        "--out",
        s(&mask),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let predicted = fino_core::data::load_label(&mask).unwrap();
    assert_eq!(predicted.shape(), &[1, 64, 64]);
    assert_eq!(predicted, fino_core::data::load_label(&masks.join(&name)).unwrap());
}

#[test]
fn log_file_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, "2", &[]);
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let mut logs = Vec::new();
    for run in 0..2 {
        let log = tmp.path().join(format!("log{run}.jsonl"));
        let ckpt = tmp.path().join(format!("m{run}.ckpt"));
        let out = fino(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt), "--log", s(&log)]);
        assert!(out.status.success());
        assert!(out.stdout.is_empty());
        logs.push((fs::read(&log).unwrap(), fs::read(&ckpt).unwrap()));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn validation_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, "1", &[]);
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "colour = red\n").unwrap();
    let ckpt = tmp.path().join("m.ckpt");
    let out = fino(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    assert_eq!(fino(&["eval", "--ckpt", s(&ckpt), "--data", s(&data)]).status.code(), Some(1));
    assert_eq!(fino(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fino(&["gradcheck", "--module", "nope"]).status.code(), Some(1));
    let out = fino(&["generate", "--out", s(&data), "--pseudo-frac", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fino(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_label_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, "2", &[]);
    let victim = fs::read_dir(data.join("label")).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(&victim).unwrap();
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let out = fino(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    let name = victim.file_name().unwrap().to_str().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains(name));
}

#[test]
fn divergence_exits_2_and_keeps_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    dataset(&data, "2", &[]);
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, format!("{SMALL}lr = 1e300\nmax_steps = 0\nepochs = 5\n").replace("max_steps = 3\n", "")).unwrap();
    let ckpt = tmp.path().join("m.ckpt");
    let out = fino(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fino_core::Checkpoint::load(&ckpt).is_ok());
}

#[test]
fn gradcheck_module() {
    let out = fino(&["gradcheck", "--module", "cdl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok"));
}
