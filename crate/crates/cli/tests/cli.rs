use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn jcas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jcas"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = jcas(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: [&str; 6] = [
    "--set",
    "dataset.train=6",
    "--set",
    "dataset.test=3",
    "--set",
    "train.batch_size=2",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&SMALL);
    v
}

#[test]
fn translate_identity_is_identity_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&[
        "translate-ntm",
        "--out",
        out,
        "--set",
        r#"translate.ntm={"classes":3,"rows":[[1,0,0],[0,1,0],[0,0,1]]}"#,
        "--set",
        "translate.samples=20000",
    ]);
    let r = read_json(&dir.path().join("ntm_report.json"));
    let identity = serde_json::json!([[1.0, 0.0], [0.0, 1.0]]);
    assert_eq!(r["exact"]["rows"], identity);
    assert_eq!(r["closed_form"]["rows"], identity);
    assert_eq!(r["oracle"]["estimate"], serde_json::json!([1.0, 0.0, 0.0, 1.0]));
}

#[test]
fn noise_stats_on_uncorrupted_labels_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("data");
    let d = d.to_str().unwrap();
    ok(&with_small(&["gen-data", "--out", d]));
    ok(&with_small(&["corrupt", "--out", d, "--set", "noise.rate=0"]));
    let v = ok(&["noise-stats", "--out", d]);
    assert_eq!(v["mean_class_noise_rate"], 0.0);
    assert_eq!(v["mean_affinity_noise_rate"], 0.0);
    assert!(Path::new(d).join("noise_report.json").is_file());
}

#[test]
fn ellipse_noise_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"dataset": {"train": 5, "test": 2}, "noise": {"kind": "ellipse", "max_dilate": 2, "max_erode": 2}}"#,
    )
    .unwrap();
    let d = dir.path().join("data");
    let (c, d) = (cfg.to_str().unwrap(), d.to_str().unwrap());
    ok(&["gen-data", "--config", c, "--out", d]);
    let v = ok(&["corrupt", "--config", c, "--out", d]);
    assert!(v["mean_class_noise_rate"].as_f64().unwrap() > 0.0);
}

#[test]
fn train_then_eval_writes_documented_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&with_small(&[
        "train",
        "--out",
        out,
        "--set",
        "train.mode=jcas",
        "--set",
        "train.epochs=2",
        "--set",
        "train.warmup_epochs=1",
    ]));
    for f in ["manifest.json", "metrics.csv", "jac_curve.csv", "ntm_report.json", "noise_report.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,loss_class,loss_aff,loss_cacr,mean_dice,mean_jac,dice_0,dice_1,dice_2,dice_3,jac_0,jac_1,jac_2,jac_3"
    );
    assert_eq!(lines.count(), 2);
    let ntm = read_json(&dir.path().join("ntm_report.json"));
    assert_eq!(ntm["class_distribution"].as_array().unwrap().len(), 4);

    let e = ok(&with_small(&["eval", "--out", out]));
    assert_eq!(e["mode"], "jcas");
    assert_eq!(e["epoch"], 2);
    let last = csv.lines().last().unwrap().split(',').nth(5).unwrap().parse::<f64>().unwrap();
    let jac = e["foreground"]["mean_jac"].as_f64().unwrap();
    assert!((last - jac).abs() < 1e-6, "{last} vs {jac}");
}

#[test]
fn reruns_are_byte_identical() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        ok(&with_small(&[
            "train",
            "--out",
            d.path().to_str().unwrap(),
            "--seed",
            "5",
            "--set",
            "train.mode=calc",
            "--set",
            "train.epochs=2",
            "--set",
            "train.warmup_epochs=1",
        ]));
    }
    for f in ["metrics.csv", "jac_curve.csv", "ntm_report.json", "noise_report.json"] {
        assert_eq!(
            fs::read(dirs[0].path().join(f)).unwrap(),
            fs::read(dirs[1].path().join(f)).unwrap(),
            "{f}"
        );
    }
    let strip = |p: &Path| {
        let mut v = read_json(&p.join("manifest.json"));
        let m = v.as_object_mut().unwrap();
        m.remove("created_unix");
        m.remove("config_hash");
        m["config"].as_object_mut().unwrap().remove("out");
        v
    };
    assert_eq!(strip(dirs[0].path()), strip(dirs[1].path()));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok(&["grad-check", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(v["all_passed"], true);
    let r = read_json(&dir.path().join("grad_check.json"));
    assert!(r["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}

#[test]
fn failures_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(jcas(&["bogus"]).status.code(), Some(2));
    assert_eq!(jcas(&["gen-data"]).status.code(), Some(2));
    let bad = jcas(&["gen-data", "--out", out, "--set", "train.lr=-1"]);
    assert_eq!(bad.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&bad.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert_eq!(jcas(&["gen-data", "--out", out, "--set", "train.nonsense=1"]).status.code(), Some(3));
    assert_eq!(jcas(&["noise-stats", "--out", out]).status.code(), Some(4));
    assert_eq!(jcas(&["eval", "--out", out]).status.code(), Some(4));
    let missing = dir.path().join("absent.json");
    assert_eq!(
        jcas(&["gen-data", "--out", out, "--config", missing.to_str().unwrap()]).status.code(),
        Some(4)
    );
    let ell = jcas(&[
        "translate-ntm",
        "--out",
        out,
        "--set",
        r#"noise={"kind":"ellipse","max_dilate":1,"max_erode":1}"#,
    ]);
    assert_eq!(ell.status.code(), Some(3));
}

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&with_small(&["gen-data", "--out", d.path().to_str().unwrap(), "--seed", "3"]));
    }
    assert_eq!(
        fs::read(a.path().join("manifest.json")).unwrap(),
        fs::read(b.path().join("manifest.json")).unwrap()
    );
}
