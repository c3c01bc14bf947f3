//! End-to-end CLI contracts, exercising the installed binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aseg"))
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("aseg_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "model.levels=2",
    "--set",
    "model.base_channels=2",
    "--set",
    "model.input=16",
];

#[test]
fn help_enumerates_config_keys_with_defaults() {
    let out = bin().args(["--help"]).output().unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    for needle in [
        "model.levels",
        "train.lr",
        "1e-5",
        "train.epochs",
        "150",
        "model.input",
        "128",
        "train.split",
        "0.7,0.1,0.2",
        "loss.alpha",
        "precision",
    ] {
        assert!(text.contains(needle), "--help missing `{needle}`:\n{text}");
    }
}

#[test]
fn synth_writes_pairs_and_is_seed_deterministic() {
    let dir_a = tempdir("synth_a");
    let dir_b = tempdir("synth_b");
    for dir in [&dir_a, &dir_b] {
        let out = bin()
            .args(["synth", "--count", "3", "--seed", "5", "--edge", "32", "--out"])
            .arg(dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for i in 0..3 {
        let img_a = std::fs::read(dir_a.join(format!("synth{i:04}.pgm"))).unwrap();
        let img_b = std::fs::read(dir_b.join(format!("synth{i:04}.pgm"))).unwrap();
        assert_eq!(img_a, img_b);
        let mask = std::fs::read(dir_a.join(format!("synth{i:04}_mask.pgm"))).unwrap();
        assert!(!mask.is_empty());
    }
}

#[test]
fn aseg_seed_env_is_the_seed_fallback() {
    let with_env = tempdir("seed_env");
    let with_flag = tempdir("seed_flag");
    let out = bin()
        .args(["synth", "--count", "1", "--edge", "32", "--out"])
        .arg(&with_flag)
        .args(["--seed", "77"])
        .output()
        .unwrap();
    assert!(out.status.success());
    // synth takes --seed directly; the env fallback applies to train/eval.
    // Exercise it through train: two runs, one with ASEG_SEED, one with the
    // equivalent config key, must produce identical checkpoints.
    let run_a = tempdir("seed_env_run_a");
    let out = bin()
        .args(["train", "--synthetic", "4", "--epochs", "1", "--lr", "0.001"])
        .args(TINY)
        .arg("--out-dir")
        .arg(&run_a)
        .env("ASEG_SEED", "906")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let run_b = tempdir("seed_env_run_b");
    let out = bin()
        .args(["train", "--synthetic", "4", "--epochs", "1", "--lr", "0.001"])
        .args(TINY)
        .args(["--set", "train.seed=906"])
        .arg("--out-dir")
        .arg(&run_b)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        std::fs::read(run_a.join("checkpoint.aseg")).unwrap(),
        std::fs::read(run_b.join("checkpoint.aseg")).unwrap()
    );
    let _ = with_env;
}

#[test]
fn missing_dataset_dir_exits_2_without_writing() {
    let out_dir = tempdir("missing_data");
    let target = out_dir.join("run");
    let out = bin()
        .args(["train", "--dataset", "/nonexistent/path/xyz", "--out-dir"])
        .arg(&target)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(!target.exists(), "no files on config errors");
}

#[test]
fn unknown_config_key_exits_2_naming_the_key() {
    let dir = tempdir("badkey");
    let cfg = dir.join("bad.cfg");
    std::fs::write(&cfg, "model.levles = 4\n").unwrap();
    let out = bin()
        .args(["train", "--synthetic", "4", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.levles"), "{}", stderr(&out));
}

#[test]
fn zero_lr_training_checkpoints_the_initialization() {
    let dir = tempdir("zero_lr");
    let out = bin()
        .args(["train", "--lr", "0", "--synthetic", "4", "--epochs", "1", "--seed", "31"])
        .args(TINY)
        .arg("--out-dir")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));

    // re-derive the initialization through the library with the same seed
    use rand_chacha::rand_core::SeedableRng;
    let cfg = aseg::model::ModelConfig {
        levels: 2,
        base_channels: 2,
        input_hw: (16, 16),
        ..aseg::model::ModelConfig::default()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
    let init = aseg::model::ModelParams::<f32>::init(&cfg, &mut rng).unwrap();

    let loaded =
        aseg::checkpoint::load_checkpoint::<f32>(&dir.join("checkpoint.aseg")).unwrap();
    init.visit(|name, t| {
        if aseg::model::ModelParams::<f32>::is_learnable(name) {
            let mut stored = None;
            loaded.params.visit(|n, s| {
                if n == name {
                    stored = Some(s.data().to_vec());
                }
            });
            assert_eq!(
                stored.unwrap(),
                t.data(),
                "learnable {name} changed despite lr 0"
            );
        }
    });

    // the epoch log was still emitted
    let log = std::fs::read_to_string(dir.join("log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_dice,val_iou,wall_seconds"));
    assert_eq!(log.lines().count(), 2);
}

fn train_tiny(dir: &Path, extra: &[&str]) {
    let mut cmd = bin();
    cmd.args(["train", "--synthetic", "6", "--epochs", "2", "--lr", "0.001", "--seed", "3"])
        .args(TINY)
        .arg("--out-dir")
        .arg(dir);
    for e in extra {
        cmd.arg(e);
    }
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn predict_writes_binary_mask_and_per_level_heatmaps() {
    let run = tempdir("predict_run");
    train_tiny(&run, &[]);
    let data_dir = tempdir("predict_data");
    let out = bin()
        .args(["synth", "--count", "1", "--seed", "8", "--edge", "32", "--out"])
        .arg(&data_dir)
        .output()
        .unwrap();
    assert!(out.status.success());

    let mask_path = data_dir.join("pred.pgm");
    let heat_dir = data_dir.join("heat");
    let out = bin()
        .arg("predict")
        .arg(run.join("checkpoint.aseg"))
        .arg(data_dir.join("synth0000.pgm"))
        .arg("--out")
        .arg(&mask_path)
        .arg("--heatmap-dir")
        .arg(&heat_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));

    // mask: strictly 0/255 bytes at the model resolution (16x16 here)
    let mask = aseg::data::load_image_pgm(&mask_path).unwrap();
    assert_eq!((mask.w, mask.h), (16, 16));
    let raw = std::fs::read(&mask_path).unwrap();
    let payload = &raw[raw.len() - 256..];
    assert!(payload.iter().all(|&b| b == 0 || b == 255));

    // heatmaps: one per level per branch (2 levels x cbam/dal/sal)
    let mut names: Vec<String> = std::fs::read_dir(&heat_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        vec![
            "level0_cbam.pgm",
            "level0_dal.pgm",
            "level0_sal.pgm",
            "level1_cbam.pgm",
            "level1_dal.pgm",
            "level1_sal.pgm",
        ]
    );

    // determinism: predicting again produces identical bytes
    let mask2 = data_dir.join("pred2.pgm");
    let out = bin()
        .arg("predict")
        .arg(run.join("checkpoint.aseg"))
        .arg(data_dir.join("synth0000.pgm"))
        .arg("--out")
        .arg(&mask2)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(&mask_path).unwrap(), std::fs::read(&mask2).unwrap());
}

#[test]
fn eval_reports_metrics_satisfying_the_dice_iou_identity() {
    let run = tempdir("eval_run");
    train_tiny(&run, &[]);
    let out = bin()
        .arg("eval")
        .arg(run.join("checkpoint.aseg"))
        .args(["--synthetic", "6", "--split", "all", "--seed", "3"])
        .args(TINY)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let line = text.lines().find(|l| l.contains("dice")).unwrap();
    let grab = |tag: &str| -> f64 {
        let idx = line.find(tag).unwrap() + tag.len();
        line[idx..]
            .trim_start()
            .split(|c: char| c == ',' || c.is_whitespace())
            .next()
            .unwrap()
            .parse()
            .unwrap()
    };
    let (dice, iou) = (grab("dice"), grab("iou"));
    assert!((dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-5, "{line}");
    assert!(text.contains("sample_id,tp,fp,fn,tn,dice,iou"));
    // per-sample rows present
    assert!(text.lines().filter(|l| l.starts_with("synth")).count() == 6);
}

#[test]
fn gradcheck_passes_small_and_fails_when_corrupted() {
    let out = bin()
        .args(["gradcheck", "--size", "8", "--levels", "1", "--base-channels", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    // one row per parameter tensor: 1 level + bottleneck + decoder blocks
    // (conv1, bn scale/shift x2, conv2, proj) + attention + head
    let rows = text
        .lines()
        .take_while(|l| !l.is_empty())
        .skip(1)
        .count();
    let expected_tensors = {
        use rand_chacha::rand_core::SeedableRng;
        let cfg = aseg::model::ModelConfig {
            levels: 1,
            base_channels: 2,
            input_hw: (8, 8),
            ..aseg::model::ModelConfig::default()
        };
        let p = aseg::model::ModelParams::<f64>::init(
            &cfg,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let mut learnable = 0;
        p.visit(|name, _| {
            if aseg::model::ModelParams::<f64>::is_learnable(name) {
                learnable += 1;
            }
        });
        learnable
    };
    assert_eq!(rows, expected_tensors, "{text}");

    let out = bin()
        .args([
            "gradcheck",
            "--size",
            "8",
            "--levels",
            "1",
            "--base-channels",
            "2",
            "--corrupt-group",
            "hal",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(
        text.contains("group hal") && text.contains("FAIL"),
        "negative control must name the corrupted group:\n{text}"
    );
}
