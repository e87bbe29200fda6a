use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use endovid_core::data::{frame_file_name, load_manifest, write_ppm};
use endovid_core::distill::read_metrics;

fn endovid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_endovid"))
        .args(args)
        .env_remove("ENDOVID_SEED")
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

fn tiny_dataset(dir: &Path) {
    let o = endovid(&[
        "make-data", "--out", p(dir), "--count", "4", "--size", "16", "--frames", "8", "--square", "5", "--speed", "0.5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn tiny_pretrain(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "pretrain", "--preset", "tiny", "--data", p(data), "--out", p(out), "--batch-size", "2", "--epochs", "2", "--seed", "4",
    ];
    args.extend_from_slice(extra);
    endovid(&args)
}

#[test]
fn make_data_is_balanced_and_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let o = endovid(&["make-data", "--out", p(&a), "--count", "64", "--classes", "2", "--seed", "9"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("64 clips"), "{text}");
    assert!(text.contains(r#"{"0":32,"1":32}"#), "{text}");
    let o2 = endovid(&["make-data", "--out", p(&b), "--count", "64", "--classes", "2", "--seed", "9"]);
    let hash = |s: &str| s.lines().last().unwrap().to_string();
    assert_eq!(hash(&text), hash(&stdout(&o2)));
    assert_eq!(load_manifest(&a).unwrap().clips.len(), 64);

    let again = endovid(&["make-data", "--out", p(&a), "--count", "4"]);
    assert_eq!(code(&again), 2);
    let forced = endovid(&["make-data", "--out", p(&a), "--count", "4", "--force"]);
    assert_eq!(code(&forced), 0);
}

#[test]
fn make_data_slices_a_frame_sequence() {
    let root = tempfile::tempdir().unwrap();
    let src = root.path().join("video");
    fs::create_dir(&src).unwrap();
    for i in 0..450 {
        write_ppm(&src.join(frame_file_name(i)), &[(i % 7) as f32 / 7.0; 3 * 2 * 2], 2, 2).unwrap();
    }
    let out = root.path().join("clips");
    let o = endovid(&[
        "make-data", "--out", p(&out), "--slice-from", p(&src), "--fps", "30", "--seconds", "5", "--label", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = load_manifest(&out).unwrap();
    assert_eq!(m.clips.len(), 3);
    assert!(m.clips.iter().all(|c| c.frames == 150 && c.label == Some(1)));
}

#[test]
fn invalid_config_exits_with_usage_code() {
    let root = tempfile::tempdir().unwrap();
    tiny_dataset(&root.path().join("d"));
    let cfg = root.path().join("bad.toml");
    fs::write(&cfg, "[distill]\nteacher_temp = 0.5\n").unwrap();
    let o = endovid(&["pretrain", "--config", p(&cfg), "--data", p(&root.path().join("d"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("distill.teacher_temp"));

    fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    assert_eq!(code(&endovid(&["pretrain", "--config", p(&cfg)])), 2);
    assert_eq!(code(&endovid(&["pretrain", "--no-such-flag"])), 2);
    assert_eq!(code(&endovid(&["pretrain", "--preset", "tiny"])), 2);
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let root = tempfile::tempdir().unwrap();
    let o = endovid(&["pretrain", "--preset", "tiny", "--data", p(&root.path().join("nothing"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.json"));
}

#[test]
fn pretrain_is_deterministic_and_snapshots_config() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("d");
    tiny_dataset(&data);
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    assert_eq!(code(&tiny_pretrain(&data, &a, &[])), 0);
    assert_eq!(code(&tiny_pretrain(&data, &b, &[])), 0);
    let csv = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(read_metrics(&a.join("metrics.csv")).unwrap().len(), 4);

    // the snapshot alone reproduces the run
    let c = root.path().join("c");
    let o = endovid(&["pretrain", "--config", p(&a.join("resolved_config.toml")), "--out", p(&c)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(csv, fs::read(c.join("metrics.csv")).unwrap());
}

#[test]
fn seed_precedence() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("d");
    tiny_dataset(&data);
    let run = |out: &str, env: Option<&str>, extra: &[&str]| {
        let out = root.path().join(out);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_endovid"));
        cmd.args(["pretrain", "--preset", "tiny", "--data", p(&data), "--out", p(&out), "--max-steps", "1"])
            .args(extra)
            .env_remove("ENDOVID_SEED");
        if let Some(e) = env {
            cmd.env("ENDOVID_SEED", e);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read_to_string(out.join("resolved_config.toml")).unwrap()
    };
    assert!(run("x", None, &[]).contains("seed = 0"));
    assert!(run("y", Some("17"), &[]).contains("seed = 17"));
    assert!(run("z", Some("17"), &["--seed", "3"]).contains("seed = 3"));
    assert!(run("w", Some("17"), &["--set", "run.seed=8"]).contains("seed = 8"));
}

#[test]
fn gradcheck_detects_injected_faults() {
    let args = ["gradcheck", "--set", "model.depth=1", "--coords", "1"];
    assert_eq!(code(&endovid(&args)), 0);
    for fault in ["wrong-backward", "non-finite"] {
        let mut a = args.to_vec();
        a.extend_from_slice(&["--inject-fault", fault]);
        let o = endovid(&a);
        assert_eq!(code(&o), 1, "{fault}");
        assert!(stdout(&o).contains("FAIL"));
    }
}

#[test]
fn export_metrics_summarises_and_rejects_empty() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("d");
    tiny_dataset(&data);
    let run = root.path().join("r");
    assert_eq!(code(&tiny_pretrain(&data, &run, &[])), 0);
    let o = endovid(&["export-metrics", "--run", p(&run), "--window", "2"]);
    assert_eq!(code(&o), 0);
    let s: serde_json::Value = serde_json::from_slice(&fs::read(run.join("summary.json")).unwrap()).unwrap();
    let keys: Vec<&str> = s.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(
        keys,
        [
            "all_finite",
            "final_lr",
            "final_teacher_entropy",
            "first_step",
            "first_window_loss",
            "last_step",
            "last_window_loss",
            "loss_decreased",
            "max_teacher_entropy",
            "min_teacher_entropy",
            "rows",
            "wall_clock_seconds",
            "window"
        ]
    );
    assert_eq!(s["rows"], 4);

    let empty = root.path().join("e");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&endovid(&["export-metrics", "--run", p(&empty)])), 1);
    fs::write(
        empty.join("metrics.csv"),
        "step,epoch,loss_cv,loss_dm,loss_total,teacher_entropy,lr\n",
    )
    .unwrap();
    assert_eq!(code(&endovid(&["export-metrics", "--run", p(&empty)])), 1);
}

#[test]
fn probe_reports_scores_and_refuses_single_class() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("d");
    let o = endovid(&[
        "make-data", "--out", p(&data), "--count", "10", "--size", "16", "--frames", "8", "--square", "5", "--speed", "0.5",
    ]);
    assert_eq!(code(&o), 0);
    let o = endovid(&["probe", "--preset", "tiny", "--data", p(&data), "--random-init", "--epochs", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["test_clips"], 2);
    assert!(r["macro_f1"].is_number() && r["binary_f1"].is_number());

    let one = root.path().join("one");
    let o = endovid(&["make-data", "--out", p(&one), "--count", "4", "--classes", "1", "--size", "16", "--square", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = endovid(&["probe", "--preset", "tiny", "--data", p(&one), "--random-init"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("two classes"));
}
