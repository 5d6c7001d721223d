//! CLI-level tests on a small synthetic IDX dataset: configuration
//! validation, run-directory behavior, stage dependencies, and one
//! miniature end-to-end pipeline through every subcommand.

use patchpure::commands::{self, Ctx};
use patchpure::config::{load_config, ExperimentConfig};
use patchpure::rundir::RunDir;
use patchpure::CliError;
use std::path::{Path, PathBuf};

/// Two visually distinct classes: a bright band whose row depends on the
/// class, over a textured background.
fn write_synthetic_idx(dir: &Path, per_class: usize) -> (PathBuf, PathBuf) {
    let n = per_class * 2;
    let (h, w) = (16usize, 16usize);
    let mut images = Vec::with_capacity(16 + n * h * w);
    images.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    images.extend_from_slice(&(n as u32).to_be_bytes());
    images.extend_from_slice(&(h as u32).to_be_bytes());
    images.extend_from_slice(&(w as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    let mut state = 0x2545_f491u32;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        state
    };
    for i in 0..n {
        let class = i % 2;
        labels.push(class as u8);
        for y in 0..h {
            for _x in 0..w {
                let band = y >= 2 + class * 8 && y < 8 + class * 8;
                let base = if band { 220 } else { 30 };
                images.push((base + (next() % 24) as i32 - 12).clamp(0, 255) as u8);
            }
        }
    }
    let images_path = dir.join("train-images.idx3-ubyte");
    let labels_path = dir.join("train-labels.idx1-ubyte");
    std::fs::write(&images_path, images).unwrap();
    std::fs::write(&labels_path, labels).unwrap();
    (images_path, labels_path)
}

fn mini_config(data_dir: &Path) -> ExperimentConfig {
    let toml_text = format!(
        r#"
[dataset]
format = "idx"
path = "{}"
images = "train-images.idx3-ubyte"
labels = "train-labels.idx1-ubyte"
per_class_train = 30
per_class_val = 10
per_class_test = 10
split_seed = 7
channels = 3
height = 16
width = 16

[classifier]
backbone = "small-cnn"
epochs = 3
batch_size = 16
learning_rate = 0.002
seed = 42

[attack]
patch_sizes = [3]
target_class = 0
epochs = 2
batch_size = 16
learning_rate = 0.08
seed = 43

[defense]
epochs = 8
batch_size = 8
learning_rate = 0.001
beta1 = 0.5
beta2 = 0.999
seed = 44
random_patch_min = 2
random_patch_max = 4
random_patch_seed = 45
w_adv = 1.0
w_recon = 10.0
w_percep = 0.1
w_class = 5.0

[eval]
seed = 46
timing_repetitions = 2
"#,
        data_dir.display()
    );
    let path = data_dir.join("mini.toml");
    std::fs::write(&path, toml_text).unwrap();
    load_config(&path).unwrap()
}

#[test]
fn bundled_profiles_parse_and_have_stable_run_ids() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    for name in ["mnist-desk.toml", "signs-5class.toml"] {
        let text = std::fs::read_to_string(root.join("configs").join(name)).unwrap();
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        // hashing the effective config is deterministic
        assert_eq!(cfg.run_id(), cfg.run_id());
        assert_eq!(cfg.run_id().len(), 12);
    }
    // the two profiles land in different run directories
    let a: ExperimentConfig =
        toml::from_str(&std::fs::read_to_string(root.join("configs/mnist-desk.toml")).unwrap())
            .unwrap();
    let b: ExperimentConfig =
        toml::from_str(&std::fs::read_to_string(root.join("configs/signs-5class.toml")).unwrap())
            .unwrap();
    assert_ne!(a.run_id(), b.run_id());
}

#[test]
fn config_validation_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_idx(dir.path(), 50);
    let good = mini_config(dir.path());

    // unknown key -> typo safety
    let text = std::fs::read_to_string(dir.path().join("mini.toml")).unwrap();
    let with_typo = text.replace("timing_repetitions", "timing_repetitons");
    assert!(toml::from_str::<ExperimentConfig>(&with_typo).is_err());

    // a missing seed is an error, not an implicit default
    let without_seed = text.replace("seed = 43\n", "");
    assert!(toml::from_str::<ExperimentConfig>(&without_seed).is_err());

    // patch size 0
    let mut bad = good.clone();
    bad.attack.patch_sizes = vec![0];
    assert!(matches!(bad.validate(), Err(CliError::Validation(_))));

    // patch larger than the image
    let mut bad = good.clone();
    bad.attack.patch_sizes = vec![17];
    assert!(matches!(bad.validate(), Err(CliError::Validation(_))));

    // transfer backbone must differ
    let mut bad = good.clone();
    bad.transfer = Some(bad.classifier.clone());
    assert!(matches!(bad.validate(), Err(CliError::Validation(_))));

    // geometry the purifier cannot reach
    let mut bad = good.clone();
    bad.dataset.height = 18;
    assert!(matches!(bad.validate(), Err(CliError::Validation(_))));

    // dataset path that does not exist
    let mut bad = good.clone();
    bad.dataset.path = dir.path().join("nope");
    assert!(matches!(bad.validate(), Err(CliError::Validation(_))));

    // exit-code classification
    assert_eq!(CliError::Validation(String::new()).exit_code(), 1);
    assert_eq!(CliError::Dependency(String::new()).exit_code(), 2);
    assert_eq!(CliError::CheckFailed(String::new()).exit_code(), 3);
}

#[test]
fn run_directory_lock_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_idx(dir.path(), 50);
    let cfg = mini_config(dir.path());
    let run = RunDir::for_config(&cfg, Some(dir.path().join("run")));
    let lock = run.lock().unwrap();
    let second = run.lock();
    assert!(matches!(second, Err(CliError::Validation(msg)) if msg.contains("locked")));
    drop(lock);
    let third = run.lock();
    assert!(third.is_ok());
}

#[test]
fn stages_require_their_dependencies() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_idx(dir.path(), 50);
    let cfg = mini_config(dir.path());
    let ctx = Ctx {
        cfg,
        run: RunDir::for_config(&mini_config(dir.path()), Some(dir.path().join("run"))),
    };
    ctx.run.ensure_layout().unwrap();
    // nothing prepared yet
    let err = commands::train_classifier_cmd(&ctx, None).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    let err = commands::gen_patch(&ctx, None).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    let err = commands::train_defense(&ctx).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    let err = commands::evaluate(&ctx, false, false).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    let err = commands::purify(&ctx, dir.path(), &dir.path().join("out")).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn manifest_pins_split_membership() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_idx(dir.path(), 50);
    let cfg = mini_config(dir.path());
    let run = RunDir::for_config(&cfg, Some(dir.path().join("run")));
    run.ensure_layout().unwrap();
    let ctx = Ctx { cfg, run };
    commands::prepare_data(&ctx).unwrap();
    // same config trains fine; a different split seed is caught
    let mut changed = ctx.cfg.clone();
    changed.dataset.split_seed += 1;
    let ctx2 = Ctx { cfg: changed, run: ctx.run.clone() };
    let err = commands::train_classifier_cmd(&ctx2, None).unwrap_err();
    assert!(
        matches!(&err, CliError::Validation(msg) if msg.contains("manifest")),
        "{err}"
    );
}

#[test]
fn pipeline_end_to_end_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_idx(dir.path(), 50);
    let cfg = mini_config(dir.path());
    let run = RunDir::for_config(&cfg, Some(dir.path().join("run")));
    run.ensure_layout().unwrap();
    let ctx = Ctx { cfg, run };

    commands::prepare_data(&ctx).unwrap();
    for split in ["train", "val", "test"] {
        assert!(ctx.run.manifest(split).exists());
    }

    commands::train_classifier_cmd(&ctx, None).unwrap();
    assert!(ctx.run.model_ckpt("small-cnn").exists());
    assert!(ctx.run.train_log("small-cnn").exists());
    // re-running is a no-op, not a retrain
    commands::train_classifier_cmd(&ctx, None).unwrap();

    commands::gen_patch(&ctx, None).unwrap();
    assert!(ctx.run.patch_artifact(3).exists());
    assert!(ctx.run.patch_png(3).exists());

    commands::train_defense(&ctx).unwrap();
    assert!(ctx.run.generator_ckpt().exists());
    assert!(ctx.run.defense_log().exists());
    assert!(ctx.run.selected_marker().exists());

    // paired control first: identity generator, no checks
    commands::evaluate(&ctx, false, true).unwrap();
    let control_csv = std::fs::read_to_string(ctx.run.report_csv()).unwrap();
    for line in control_csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        // under identity purification the defense column equals the attack
        // column and every delta is zero
        assert_eq!(cols[3], cols[4], "line {line}");
        assert_eq!(cols[5], "0.000000", "line {line}");
    }

    // real evaluation
    commands::evaluate(&ctx, false, false).unwrap();
    assert!(ctx.run.report_csv().exists());
    assert!(ctx.run.report_txt().exists());
    assert!(ctx.run.timing_txt().exists());
    assert!(ctx.run.plots_dir().join("accuracy_by_size.png").exists());
    let text = std::fs::read_to_string(ctx.run.report_txt()).unwrap();
    assert!(text.contains("patch 3x3"));

    // evaluate --check against impossible thresholds exits with code 3
    let mut strict = ctx.cfg.clone();
    strict.eval.check.min_baseline = Some(1.01);
    let strict_ctx = Ctx { cfg: strict, run: ctx.run.clone() };
    let err = commands::evaluate(&strict_ctx, true, false).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");

    // purify: export a few test images as PNGs and run them through
    let input_dir = dir.path().join("inputs");
    let output_dir = dir.path().join("outputs");
    std::fs::create_dir_all(&input_dir).unwrap();
    let source = image::RgbImage::from_fn(16, 16, |x, y| {
        image::Rgb([((x * 16) % 256) as u8, ((y * 16) % 256) as u8, 128])
    });
    for name in ["a.png", "b.png", "c.png"] {
        source.save(input_dir.join(name)).unwrap();
    }
    commands::purify(&ctx, &input_dir, &output_dir).unwrap();
    for name in ["a.png", "b.png", "c.png"] {
        assert!(output_dir.join(name).exists());
    }

    // empty input directory is an explicit error
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let err = commands::purify(&ctx, &empty, &output_dir).unwrap_err();
    assert!(matches!(&err, CliError::Validation(msg) if msg.contains("no inputs")), "{err}");

    // wrong-sized input is reported per file with a nonzero exit
    let bad_dir = dir.path().join("bad");
    std::fs::create_dir_all(&bad_dir).unwrap();
    image::RgbImage::new(8, 8).save(bad_dir.join("tiny.png")).unwrap();
    let err = commands::purify(&ctx, &bad_dir, &output_dir).unwrap_err();
    assert!(matches!(&err, CliError::Validation(msg) if msg.contains("failed")), "{err}");
}
