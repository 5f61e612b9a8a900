use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msop::curriculum::{sigma_sequence, Regime, ScheduleConfig, Trainer};
use msop::datasets::{load_manifest, read_manifest, write_dataset, LabeledImage};
use msop::experiment::training_samples;
use msop::msop::{Checkpoint, ClassifierConfig, MsSopClassifier};
use msop::pipeline::BoundingBox;
use msop::Label;
use msop_cli::config::RunConfig;
use serde_json::Value;

fn msop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msop"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small model and fast training settings shared by the tests.
const TOY: &str = r#"
[model]
input_size = 16
stage_widths = [4, 8]
layers_per_stage = 1
normalize_covariance = true

[synth]
size = 48
normal = 2
benign = 1
malignant = 1
images_per_patient = 1

[train]
batch = 4
lr = 0.05
weight_decay = 0.0
lr_gamma = 1.0
regime = "none"
"#;

fn toy_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, format!("{extra}\n{TOY}")).unwrap();
    p
}

/// Synthesises the 4-image toy set under `dir/data`.
fn toy_data(dir: &Path) -> PathBuf {
    let cfg = toy_config(dir, "");
    let data = dir.join("data");
    let o = msop(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    data.join("manifest.jsonl")
}

fn png_count(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "png")
        })
        .count()
}

#[test]
fn synth_writes_images_manifest_and_twin() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = msop(&["synth", "--out", s(&out), "--seed", "3", "--perturbed"]);
    assert_eq!(code(&o), 0);
    let manifest = read_manifest(&out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.len(), 30);
    let base = load_manifest(&out.join("manifest.jsonl")).unwrap();
    let twin = load_manifest(&out.join("manifest_perturbed.jsonl")).unwrap();
    assert_eq!(
        fs::read_to_string(out.join("shapes.jsonl"))
            .unwrap()
            .lines()
            .count(),
        30
    );
    let provenance = fs::read_to_string(out.join("provenance.jsonl")).unwrap();
    assert_eq!(provenance.lines().count(), 20);
    assert_eq!(png_count(&out.join("images")), 30 + 20);
    for (a, b) in base.iter().zip(&twin) {
        assert_eq!(
            (a.label, &a.boxes, &a.patient_id),
            (b.label, &b.boxes, &b.patient_id)
        );
        if a.label.is_malignant() {
            assert_eq!(a.id, b.id);
        } else {
            assert_ne!(a.image, b.image);
        }
    }

    let again = dir.path().join("b");
    assert_eq!(
        code(&msop(&[
            "synth",
            "--out",
            s(&again),
            "--seed",
            "3",
            "--perturbed"
        ])),
        0
    );
    for f in [
        "manifest.jsonl",
        "manifest_perturbed.jsonl",
        "provenance.jsonl",
        "shapes.jsonl",
    ] {
        assert_eq!(
            fs::read(out.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap()
        );
    }
    for r in &twin {
        assert_eq!(
            fs::read(out.join(&r.id)).unwrap(),
            fs::read(again.join(&r.id)).unwrap()
        );
    }
}

#[test]
fn synth_rejects_bad_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[synth]\nnormal = 0\nbenign = 0\nmalignant = 0\n").unwrap();
    let o = msop(&[
        "synth",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("counts"));
}

#[test]
fn train_is_deterministic_and_predicts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_data(dir.path());
    let cfg = toy_config(dir.path(), "");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = msop(&[
            "train",
            "--config",
            s(&cfg),
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
            "--epochs",
            "1",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["checkpoint.msop", "train_log.jsonl"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let log = fs::read_to_string(a.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let ck = Checkpoint::load(&a.join("checkpoint.msop")).unwrap();
    assert_eq!(ck.model.config().input_size, 16);
    let o = msop(&[
        "predict",
        "--checkpoint",
        s(&a.join("checkpoint.msop")),
        "--manifest",
        s(&manifest),
        "--out",
        s(&a),
    ]);
    assert_eq!(code(&o), 0);
    let preds = fs::read_to_string(a.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 4);
    for line in preds.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["label"].is_string());
        assert_eq!(v["fallback_used"], false);
        assert_eq!(v["regions"].as_array().unwrap().len(), 1);
    }
}

#[test]
fn va_log_follows_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_data(dir.path());
    let cfg = toy_config(dir.path(), "");
    let out = dir.path().join("va");
    let o = msop(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--regime",
        "va",
        "--sigma0",
        "16",
        "--k",
        "2",
        "--k-prime",
        "3",
        "--epochs",
        "12",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sigmas: Vec<u64> = fs::read_to_string(out.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["sigma"]
                .as_u64()
                .unwrap()
        })
        .collect();
    let schedule = ScheduleConfig {
        sigma0: 16,
        k: 2,
        k_prime: 3,
    };
    let expected: Vec<u64> = sigma_sequence(Regime::Va, schedule, 12, 0)
        .into_iter()
        .map(u64::from)
        .collect();
    assert_eq!(sigmas, vec![16, 16, 16, 16, 8, 8, 4, 4, 2, 2, 1, 1]);
    assert_eq!(sigmas, expected);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_data(dir.path());
    let cfg_path = toy_config(dir.path(), "");
    let full = dir.path().join("full");
    let args = |out: &Path| {
        vec![
            "train".to_string(),
            "--config".into(),
            s(&cfg_path).into(),
            "--manifest".into(),
            s(&manifest).into(),
            "--out".into(),
            s(out).into(),
            "--epochs".into(),
            "4".into(),
            "--regime".into(),
            "va".into(),
            "--sigma0".into(),
            "2".into(),
            "--k".into(),
            "1".into(),
            "--k-prime".into(),
            "1".into(),
        ]
    };
    let a: Vec<String> = args(&full);
    let a: Vec<&str> = a.iter().map(String::as_str).collect();
    assert_eq!(code(&msop(&a)), 0);

    let part = dir.path().join("part");
    let mut config = RunConfig::parse(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    config.train.epochs = 4;
    config.train.regime = Regime::Va;
    config.train.sigma0 = 2;
    config.train.k = 1;
    config.train.k_prime = 1;
    let model = MsSopClassifier::new(config.model.clone(), config.seed).unwrap();
    let mut trainer = Trainer::new(model, config.train_config()).unwrap();
    let records = load_manifest(&manifest).unwrap();
    let samples = training_samples(&records, 16).unwrap();
    trainer.run_epoch(&samples).unwrap();
    trainer.run_epoch(&samples).unwrap();
    fs::create_dir_all(&part).unwrap();
    trainer
        .checkpoint()
        .save(&part.join("checkpoint.msop"))
        .unwrap();

    let r: Vec<String> = args(&part);
    let mut r: Vec<&str> = r.iter().map(String::as_str).collect();
    r.push("--resume");
    let o = msop(&r);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["checkpoint.msop", "train_log.jsonl"] {
        assert_eq!(
            fs::read(full.join(f)).unwrap(),
            fs::read(part.join(f)).unwrap(),
            "{f}"
        );
    }
}

/// Four 16x16 images of distinct brightness with light noise, one patient
/// each.
fn noise_set(dir: &Path) -> PathBuf {
    let labels = [
        Label::Normal,
        Label::Normal,
        Label::Benign,
        Label::Malignant,
    ];
    let images: Vec<LabeledImage> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut state = 0x9e37_79b9_u32.wrapping_mul(i as u32 + 1);
            LabeledImage {
                id: format!("noise/{i}.png"),
                image: image::GrayImage::from_fn(16, 16, |_, _| {
                    state ^= state << 13;
                    state ^= state >> 17;
                    state ^= state << 5;
                    image::Luma([(60 * i as u32 + 20 + (state >> 28)) as u8])
                }),
                label,
                patient_id: format!("p{i}"),
                boxes: Vec::new(),
            }
        })
        .collect();
    write_dataset(dir, "noise.jsonl", &images).unwrap()
}

#[test]
fn memorised_set_scores_full_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = noise_set(dir.path());
    let cfg = dir.path().join("memo.toml");
    fs::write(
        &cfg,
        TOY.replace("stage_widths = [4, 8]", "stage_widths = [8, 16]"),
    )
    .unwrap();
    let out = dir.path().join("m");
    let o = msop(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--epochs",
        "80",
        "--lr",
        "0.01",
    ]);
    assert_eq!(code(&o), 0);
    let o = msop(&[
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint.msop")),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(report["accuracy"], 100.0, "{}", log.lines().last().unwrap());
    assert_eq!(report["n"], 4);
}

fn gray(w: u32, h: u32) -> image::GrayImage {
    image::GrayImage::from_fn(w, h, |x, y| image::Luma([((x * 7 + y * 3) % 256) as u8]))
}

/// A model whose zeroed head predicts uniform probabilities, so every
/// region is labelled normal (first index wins ties).
fn all_normal_checkpoint(path: &Path) {
    let cfg = ClassifierConfig {
        input_size: 16,
        stage_widths: vec![4],
        layers_per_stage: 1,
        ..ClassifierConfig::default()
    };
    let mut m = MsSopClassifier::new(cfg, 0).unwrap();
    m.zero_head();
    Checkpoint::new(m).save(path).unwrap();
}

#[test]
fn eval_matches_hand_computed_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let labels = [
        Label::Normal,
        Label::Normal,
        Label::Benign,
        Label::Malignant,
    ];
    let images: Vec<LabeledImage> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| LabeledImage {
            id: format!("img/{i}.png"),
            image: gray(20, 20),
            label,
            patient_id: format!("p{i}"),
            boxes: vec![BoundingBox::new(2, 2, 18, 18).unwrap()],
        })
        .collect();
    let manifest = write_dataset(dir.path(), "m.jsonl", &images).unwrap();
    let ck = dir.path().join("zero.msop");
    all_normal_checkpoint(&ck);
    let out = dir.path().join("out");
    let o = msop(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["accuracy"], 50.0);
    assert_eq!(r["acc2"], 75.0);
    assert_eq!(r["sensitivity"], 0.0);
    assert_eq!(r["specificity"], 100.0);
    assert_eq!(
        r["confusion"],
        serde_json::json!([[2, 0, 0], [1, 0, 0], [1, 0, 0]])
    );
    assert!(r.get("detection").is_none());

    let det = dir.path().join("det.jsonl");
    fs::write(
        &det,
        "{\"image_id\":\"img/0.png\",\"x_min\":0,\"y_min\":0,\"x_max\":20,\"y_max\":20,\"confidence\":0.9}\n\
         {\"image_id\":\"img/1.png\",\"x_min\":0,\"y_min\":0,\"x_max\":4,\"y_max\":4,\"confidence\":0.2}\n",
    )
    .unwrap();
    let roi = format!("file:{}", s(&det));
    let o = msop(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--roi-source",
        &roi,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let d = &r["detection"];
    assert_eq!(
        (d["tp"].as_u64(), d["fp"].as_u64(), d["fn"].as_u64()),
        (Some(1), Some(0), Some(3))
    );
}

#[test]
fn kfold_emits_reports_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_data(dir.path());
    let cfg = toy_config(dir.path(), "");
    let out = dir.path().join("kf");
    let o = msop(&[
        "eval",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--folds",
        "2",
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("fold_0.json").exists() && out.join("fold_1.json").exists());
    assert!(!out.join("fold_2.json").exists());
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["folds"], 2);
    assert!(fs::read_to_string(out.join("summary.txt"))
        .unwrap()
        .contains('±'));
}

#[test]
fn predict_reports_unreadable_images_and_falls_back() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("zero.msop");
    all_normal_checkpoint(&ck);
    let good = dir.path().join("good.png");
    gray(24, 24).save(&good).unwrap();
    let missing = dir.path().join("missing.png");
    let out = dir.path().join("out");
    let o = msop(&[
        "predict",
        "--checkpoint",
        s(&ck),
        "--out",
        s(&out),
        "--roi-source",
        "whole",
        s(&missing),
        s(&good),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = fs::read_to_string(out.join("predictions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0]["error"].is_string());
    assert_eq!(lines[1]["fallback_used"], true);
    assert_eq!(lines[1]["label"], "normal");
    assert!(lines[1]["regions"][0]["bbox"].is_null());
}

#[test]
fn ablate_emits_full_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "[ablate]\ntest_per_class = 1\n");
    let out = dir.path().join("ab");
    let o = msop(&[
        "ablate",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t: Value =
        serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(t["rows"].as_array().unwrap().len(), 4 * 8);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 33);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Config errors.
    assert_eq!(code(&msop(&["train", "--regime", "sideways"])), 1);
    assert_eq!(code(&msop(&["train", "--out", s(&d.join("x"))])), 1);
    let bad = d.join("bad.toml");
    fs::write(&bad, "[train]\nepochz = 1\n").unwrap();
    let o = msop(&["train", "--config", s(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));
    assert_eq!(
        code(&msop(&["train", "--batch", "0", "--manifest", "m.jsonl"])),
        1
    );
    // I/O errors.
    assert_eq!(
        code(&msop(&["train", "--config", s(&d.join("absent.toml"))])),
        2
    );
    assert_eq!(
        code(&msop(&["train", "--manifest", s(&d.join("absent.jsonl"))])),
        2
    );
    let manifest = toy_data(d);
    let blocker = d.join("file");
    fs::write(&blocker, "").unwrap();
    let o = msop(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&blocker.join("sub")),
    ]);
    assert_eq!(code(&o), 2);
    let junk = d.join("junk.msop");
    fs::write(&junk, "not a checkpoint").unwrap();
    let o = msop(&[
        "eval",
        "--checkpoint",
        s(&junk),
        "--manifest",
        s(&manifest),
        "--out",
        s(&d.join("e")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));
    // Help is not an error.
    assert_eq!(code(&msop(&["--help"])), 0);
}
