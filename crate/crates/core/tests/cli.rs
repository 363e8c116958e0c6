use std::path::Path;
use std::process::{Command, Output};

use landmark_crf::dataset::{gt_path, pred_path, unary_path, GroundTruth, Manifest, Prediction};
use landmark_crf::io::{read_json, write_json};
use landmark_crf::unary::{write_heatmaps, Heatmap};
use landmark_crf::UnaryPrediction;
use serde_json::Value;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_landmark-crf"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(dir: &Path, num: &str) {
    ok(&[
        "gen-model",
        "--n",
        "8",
        "--k",
        "2",
        "--seed",
        "1",
        "--out",
        s(&dir.join("m.json")),
    ]);
    ok(&[
        "synth",
        "--model",
        s(&dir.join("m.json")),
        "--num",
        num,
        "--seed",
        "42",
        "--noise",
        "0.02",
        "--corrupt",
        "0.2",
        "--out",
        s(&dir.join("d")),
    ]);
}

#[test]
fn synth_writes_manifest_with_spec() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "10");
    let m = Manifest::load(&dir.path().join("d")).unwrap();
    assert_eq!(m.samples.len(), 10);
    let spec = m.spec.unwrap();
    assert_eq!(
        (spec.noise_sigma, spec.corrupt_fraction, spec.seed),
        (0.02, 0.2, 42)
    );
}

#[test]
fn synth_with_missing_model_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let r = cli(&[
        "synth",
        "--model",
        s(&dir.path().join("nope.json")),
        "--num",
        "3",
        "--seed",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_required_seed_is_a_usage_error() {
    let r = cli(&["synth", "--model", "m.json", "--num", "3", "--out", "d"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn unary_only_inference_returns_means() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "4");
    let (d, p) = (dir.path().join("d"), dir.path().join("p"));
    ok(&[
        "infer",
        "--model",
        s(&dir.path().join("m.json")),
        "--data",
        s(&d),
        "--out",
        s(&p),
        "--unary-only",
    ]);
    for id in Manifest::load(&d).unwrap().samples {
        let u = UnaryPrediction::load(&unary_path(&d, &id)).unwrap();
        assert_eq!(
            Prediction::load(&pred_path(&p, &id)).unwrap().stacked(),
            u.stacked_means()
        );
    }
}

#[test]
fn max_iters_one_gives_single_trace_entry() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "3");
    let (m, d, c, p) = (
        dir.path().join("m.json"),
        dir.path().join("d"),
        dir.path().join("c.json"),
        dir.path().join("p"),
    );
    ok(&[
        "train-crf",
        "--model",
        s(&m),
        "--data",
        s(&d),
        "--seed",
        "1",
        "--max-outer",
        "2",
        "--out",
        s(&c),
    ]);
    ok(&[
        "infer",
        "--model",
        s(&m),
        "--crf",
        s(&c),
        "--data",
        s(&d),
        "--out",
        s(&p),
        "--max-iters",
        "1",
    ]);
    for id in Manifest::load(&d).unwrap().samples {
        assert_eq!(
            Prediction::load(&pred_path(&p, &id))
                .unwrap()
                .energy_trace
                .len(),
            1
        );
    }
    let r = cli(&["infer", "--model", s(&m), "--data", s(&d), "--out", s(&p)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn training_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "5");
    let (m, d) = (dir.path().join("m.json"), dir.path().join("d"));
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    ok(&[
        "train-crf",
        "--model",
        s(&m),
        "--data",
        s(&d),
        "--seed",
        "9",
        "--max-outer",
        "3",
        "--out",
        s(&a),
    ]);
    ok(&[
        "train-crf",
        "--model",
        s(&m),
        "--data",
        s(&d),
        "--seed",
        "9",
        "--max-outer",
        "3",
        "--out",
        s(&b),
        "--jobs",
        "2",
    ]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "4");
    let (d, p) = (dir.path().join("d"), dir.path().join("p"));
    std::fs::create_dir(&p).unwrap();
    for id in Manifest::load(&d).unwrap().samples {
        let gt = GroundTruth::load(&gt_path(&d, &id)).unwrap();
        let pred = Prediction {
            landmarks: gt.landmarks,
            zeta: None,
            iters: 0,
            converged: true,
            energy_trace: vec![],
        };
        write_json(&pred_path(&p, &id), &pred).unwrap();
    }
    let (r, c) = (dir.path().join("r.json"), dir.path().join("ced.csv"));
    ok(&[
        "eval",
        "--data",
        s(&d),
        "--pred",
        s(&p),
        "--out",
        s(&r),
        "--ced",
        s(&c),
    ]);
    let report: Value = read_json(&r).unwrap();
    assert_eq!(report["auc"], 1.0);
    assert_eq!(report["failure_rate"], 0.0);
    let csv = std::fs::read_to_string(c).unwrap();
    assert_eq!(csv.lines().count(), 702);
}

#[test]
fn moments_of_a_spike() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.bin");
    let mut v = vec![0.0; 32];
    v[2 * 8 + 5] = 1.0;
    write_heatmaps(&h, &[Heatmap::new(8, 4, v).unwrap()]).unwrap();
    let out = dir.path().join("u.json");
    ok(&["moments", "--heatmaps", s(&h), "--out", s(&out)]);
    let u = UnaryPrediction::load(&out).unwrap();
    assert_eq!(u.means()[0].as_slice(), &[5.5 / 8.0, 2.5 / 4.0]);
    assert!((u.covariances()[0][(0, 0)] - 1e-8).abs() < 1e-20);
}

#[test]
fn fit_shape_on_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "3");
    let (d, p) = (dir.path().join("d"), dir.path().join("p"));
    ok(&[
        "fit-shape",
        "--model",
        s(&dir.path().join("m.json")),
        "--data",
        s(&d),
        "--out",
        s(&p),
        "--target",
        "gt",
    ]);
    for id in Manifest::load(&d).unwrap().samples {
        let gt = GroundTruth::load(&gt_path(&d, &id)).unwrap().stacked();
        let pred = Prediction::load(&pred_path(&p, &id)).unwrap().stacked();
        assert!((pred - gt).amax() < 1e-6);
    }
}

#[test]
fn config_file_supplies_options_and_arguments_override() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    ok(&[
        "gen-model",
        "--n",
        "6",
        "--k",
        "1",
        "--seed",
        "2",
        "--out",
        s(&m),
    ]);
    let cfg = dir.path().join("cfg.json");
    let json = serde_json::json!({
        "model": s(&m), "num": 4, "seed": 3, "noise": 0.01,
        "yaw_range": [-0.5, 0.5], "out": s(&dir.path().join("d")),
    });
    std::fs::write(&cfg, json.to_string()).unwrap();
    ok(&["synth", "--config", s(&cfg), "--num", "2"]);
    let m = Manifest::load(&dir.path().join("d")).unwrap();
    let spec = m.spec.unwrap();
    assert_eq!(
        (m.samples.len(), spec.noise_sigma, spec.yaw_range),
        (2, 0.01, [-0.5, 0.5])
    );
}
