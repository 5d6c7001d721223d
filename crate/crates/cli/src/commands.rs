//! The six subcommands. Each is a pure function of (config, run-directory
//! state, seeds): re-running a command with identical inputs reproduces its
//! artifacts bit for bit.

use crate::config::{ClassifierSection, DataFormat, ExperimentConfig};
use crate::rundir::RunDir;
use crate::CliError;
use patchpure_core::attack::{
    export_patch_png, generate_adversarial_patch, load_patch, save_patch, AdversarialPatch,
    AttackConfig,
};
use patchpure_core::data::{
    adapt, load_idx_dataset, load_image_folder, make_random_patched, membership_hash, split,
    write_dataset_manifest, LabeledDataset, RandomPatchSpec, SplitSpec,
};
use patchpure_core::defense::{
    build_generator, restore_generator, select_best_generator, train_gan, BuildMode,
    DefenseError, GanConfig, GeneratorModel, LossWeights, SavedGanMeta, SSIM_GATE,
};
use patchpure_core::eval::{
    assemble_report, emit_plots, emit_report, evaluate_baseline, evaluate_under_attack,
    evaluate_with_defense, measure_timing, transferability_eval, EvaluationReport, Purifier,
    ReportFormat, TimingReport, TransferOutcome, TransferReport,
};
use patchpure_core::models::{
    train_classifier, ClassifierModel, ClassifierSpec, FeatureExtractor,
};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Everything a command needs: validated config plus the run directory.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub run: RunDir,
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body)
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}

fn require_artifact(path: &Path, produced_by: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Dependency(format!(
            "{} (run `patchpure {produced_by}` first)",
            path.display()
        )))
    }
}

/// Load the raw source dataset and adapt it to the configured working shape.
fn load_source(cfg: &ExperimentConfig) -> Result<LabeledDataset, CliError> {
    let d = &cfg.dataset;
    let raw = match d.format {
        DataFormat::Idx => {
            let images = d.path.join(d.images.as_ref().expect("validated"));
            let labels = d.path.join(d.labels.as_ref().expect("validated"));
            load_idx_dataset(&images, &labels)?
        }
        DataFormat::Folder => {
            let (ds, warnings) = load_image_folder(&d.path)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            ds
        }
    };
    Ok(adapt(&raw, cfg.image_shape())?)
}

/// Recompute the deterministic train/val/test split from the source data.
fn prepared_splits(
    cfg: &ExperimentConfig,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset), CliError> {
    let source = load_source(cfg)?;
    let d = &cfg.dataset;
    let spec = SplitSpec {
        per_class_train: d.per_class_train,
        per_class_val: d.per_class_val,
        per_class_test: d.per_class_test,
        seed: d.split_seed,
    };
    Ok(split(&source, &spec)?)
}

/// Check a recomputed split against a pinned manifest's membership hash.
fn verify_manifest(path: &Path, dataset: &LabeledDataset) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Validation(format!("cannot read manifest {}: {e}", path.display()))
    })?;
    let pinned = text
        .lines()
        .find_map(|l| l.strip_prefix("membership_sha256 "))
        .ok_or_else(|| {
            CliError::Validation(format!("manifest {} has no membership line", path.display()))
        })?;
    let actual = membership_hash(&dataset.images, &dataset.labels);
    if pinned != actual {
        return Err(CliError::Validation(format!(
            "manifest {} pins a different split (data or config changed since prepare-data)",
            path.display()
        )));
    }
    Ok(())
}

/// Recompute the splits and verify them against the pinned manifests,
/// failing with a dependency error when `prepare-data` has not run.
fn load_prepared(
    ctx: &Ctx,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset), CliError> {
    for name in ["train", "val", "test"] {
        require_artifact(&ctx.run.manifest(name), "prepare-data")?;
    }
    let (train, val, test) = prepared_splits(&ctx.cfg)?;
    verify_manifest(&ctx.run.manifest("train"), &train)?;
    verify_manifest(&ctx.run.manifest("val"), &val)?;
    verify_manifest(&ctx.run.manifest("test"), &test)?;
    Ok((train, val, test))
}

pub fn prepare_data(ctx: &Ctx) -> Result<(), CliError> {
    let (train, val, test) = prepared_splits(&ctx.cfg)?;
    let seed = ctx.cfg.dataset.split_seed;
    for (name, ds) in [("train", &train), ("val", &val), ("test", &test)] {
        write_dataset_manifest(&ctx.run.manifest(name), name, ds, seed)?;
        println!(
            "{name}: {} images, {} classes -> {}",
            ds.len(),
            ds.num_classes(),
            ctx.run.manifest(name).display()
        );
    }
    Ok(())
}

fn classifier_spec(
    section: &ClassifierSection,
    cfg: &ExperimentConfig,
    num_classes: usize,
) -> ClassifierSpec {
    ClassifierSpec {
        backbone_id: section.backbone.clone(),
        num_classes,
        input_shape: cfg.image_shape(),
        epochs: section.epochs,
        batch_size: section.batch_size,
        learning_rate: section.learning_rate,
        seed: section.seed,
    }
}

/// Pick the classifier section a `--backbone` argument refers to.
fn section_for_backbone<'c>(
    cfg: &'c ExperimentConfig,
    backbone: Option<&str>,
) -> Result<&'c ClassifierSection, CliError> {
    match backbone {
        None => Ok(&cfg.classifier),
        Some(b) if b == cfg.classifier.backbone => Ok(&cfg.classifier),
        Some(b) => cfg
            .transfer
            .as_ref()
            .filter(|t| t.backbone == b)
            .ok_or_else(|| {
                CliError::Validation(format!(
                    "backbone {b:?} is not configured (classifier or transfer section)"
                ))
            }),
    }
}

pub fn train_classifier_cmd(ctx: &Ctx, backbone: Option<&str>) -> Result<(), CliError> {
    let section = section_for_backbone(&ctx.cfg, backbone)?;
    let ckpt = ctx.run.model_ckpt(&section.backbone);
    if ckpt.exists() {
        println!(
            "checkpoint {} already exists; nothing to do",
            ckpt.display()
        );
        return Ok(());
    }
    let (train, val, _) = load_prepared(ctx)?;
    let spec = classifier_spec(section, &ctx.cfg, train.num_classes());
    println!(
        "training {} on {} images ({} epochs)",
        spec.backbone_id,
        train.len(),
        spec.epochs
    );
    let (model, log) = train_classifier(&train, &val, &spec)?;
    model.save(&ckpt)?;
    let mut body = String::new();
    for e in &log.entries {
        let _ = writeln!(
            body,
            "epoch {} train_loss {:.6} val_accuracy {:.6}",
            e.epoch, e.train_loss, e.val_accuracy
        );
    }
    let _ = writeln!(
        body,
        "best epoch {} val_accuracy {:.6}",
        log.best_epoch, log.best_val_accuracy
    );
    write_file(&ctx.run.train_log(&section.backbone), &body)?;
    println!(
        "saved {} (best epoch {}, val accuracy {:.4})",
        ckpt.display(),
        log.best_epoch,
        log.best_val_accuracy
    );
    Ok(())
}

pub fn gen_patch(ctx: &Ctx, sizes: Option<Vec<usize>>) -> Result<(), CliError> {
    let sizes = sizes.unwrap_or_else(|| ctx.cfg.attack.patch_sizes.clone());
    if sizes.is_empty() {
        return Err(CliError::Validation("no patch sizes requested".to_string()));
    }
    let side = ctx.cfg.dataset.height.min(ctx.cfg.dataset.width);
    for &s in &sizes {
        if s == 0 || s > side {
            return Err(CliError::Validation(format!(
                "patch size {s} invalid for {side}-pixel images"
            )));
        }
    }
    let ckpt = ctx.run.model_ckpt(&ctx.cfg.classifier.backbone);
    require_artifact(&ckpt, "train-classifier")?;
    let (train, val, _) = load_prepared(ctx)?;
    let mut model = ClassifierModel::load(&ckpt)?;
    let a = &ctx.cfg.attack;
    let attack_cfg = AttackConfig {
        patch_sizes: sizes.clone(),
        target_class: a.target_class,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    for &s in &sizes {
        let artifact = ctx.run.patch_artifact(s);
        if artifact.exists() {
            println!("patch {s}x{s}: {} already exists; skipping", artifact.display());
            continue;
        }
        let (patch, log) = generate_adversarial_patch(&mut model, &train, &val, &attack_cfg, s)?;
        save_patch(&patch, &ctx.run.patch_artifact(s))?;
        export_patch_png(&patch, &ctx.run.patch_png(s))?;
        let mut body = String::new();
        for e in &log {
            let _ = writeln!(
                body,
                "epoch {} train_loss {:.6} val_success {:.6}",
                e.epoch, e.train_loss, e.val_success_rate
            );
        }
        write_file(&ctx.run.patch_log(s), &body)?;
        let last = log.last().map(|e| e.val_success_rate).unwrap_or(0.0);
        println!(
            "patch {s}x{s}: targeted success {:.4} (best epoch), {:.4} (final epoch) -> {}",
            patch.provenance.val_success_rate,
            last,
            ctx.run.patch_artifact(s).display()
        );
    }
    Ok(())
}

pub fn train_defense(ctx: &Ctx) -> Result<(), CliError> {
    if ctx.run.generator_ckpt().exists() {
        println!(
            "generator {} already exists; nothing to do",
            ctx.run.generator_ckpt().display()
        );
        return Ok(());
    }
    let ckpt = ctx.run.model_ckpt(&ctx.cfg.classifier.backbone);
    require_artifact(&ckpt, "train-classifier")?;
    let (train, val, _) = load_prepared(ctx)?;
    let mut classifier = ClassifierModel::load(&ckpt)?;
    let f = &ctx.cfg.defense;
    let paired = make_random_patched(
        &train,
        &RandomPatchSpec {
            min_size: f.random_patch_min,
            max_size: f.random_patch_max,
            seed: f.random_patch_seed,
        },
    );
    let extractor = FeatureExtractor::default_for(&classifier);
    let weights = LossWeights {
        adv: f.w_adv,
        recon: f.w_recon,
        percep: f.w_percep,
        class: f.w_class,
    };
    let gan_cfg = GanConfig {
        epochs: f.epochs,
        batch_size: f.batch_size,
        learning_rate: f.learning_rate,
        beta1: f.beta1,
        beta2: f.beta2,
        seed: f.seed,
        val_patch_min: f.random_patch_min,
        val_patch_max: f.random_patch_max,
    };
    println!(
        "training purifier on {} paired images ({} epochs)",
        paired.len(),
        f.epochs
    );
    let (mut g, d, checkpoints) =
        train_gan(&paired, &val, &mut classifier, &extractor, &weights, &gan_cfg)?;
    let mut body = String::new();
    for c in &checkpoints {
        let _ = writeln!(
            body,
            "epoch {} val_ssim {:.6} val_accuracy {:.6}",
            c.epoch, c.val_ssim, c.val_accuracy
        );
    }
    write_file(&ctx.run.defense_log(), &body)?;
    if f.keep_all_epochs {
        for c in &checkpoints {
            let mut snapshot = build_generator(classifier.input_shape(), BuildMode::Experimental, 0)?;
            restore_generator(&mut snapshot, c);
            let meta = SavedGanMeta {
                epoch: c.epoch,
                val_ssim: c.val_ssim,
                val_accuracy: c.val_accuracy,
                weights,
            };
            snapshot.save(&ctx.run.epoch_generator_ckpt(c.epoch), &meta)?;
        }
    }
    let best = match select_best_generator(&checkpoints) {
        Ok(best) => best,
        Err(DefenseError::NoQualifyingGenerator { gate }) => {
            return Err(CliError::CheckFailed(format!(
                "no epoch cleared the SSIM gate {gate}; per-epoch metrics: {}",
                ctx.run.defense_log().display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    restore_generator(&mut g, best);
    let meta = SavedGanMeta {
        epoch: best.epoch,
        val_ssim: best.val_ssim,
        val_accuracy: best.val_accuracy,
        weights,
    };
    g.save(&ctx.run.generator_ckpt(), &meta)?;
    d.save(&ctx.run.discriminator_ckpt(), &meta)?;
    write_file(
        &ctx.run.selected_marker(),
        &format!(
            "epoch {} val_ssim {:.6} val_accuracy {:.6}\n",
            best.epoch, best.val_ssim, best.val_accuracy
        ),
    )?;
    println!(
        "selected epoch {} (val_ssim {:.4}, val accuracy {:.4}) -> {}",
        best.epoch,
        best.val_ssim,
        best.val_accuracy,
        ctx.run.generator_ckpt().display()
    );
    Ok(())
}

fn load_patches(ctx: &Ctx) -> Result<Vec<AdversarialPatch>, CliError> {
    let mut patches = Vec::new();
    for &s in &ctx.cfg.attack.patch_sizes {
        let path = ctx.run.patch_artifact(s);
        require_artifact(&path, "gen-patch")?;
        patches.push(load_patch(&path)?);
    }
    Ok(patches)
}

fn render_timing(t: &TimingReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "timing report (batch size {}, {})", t.batch_size, t.hardware);
    for (name, s) in [
        ("reconstruction", &t.reconstruction),
        ("classification", &t.classification),
        ("defended pipeline", &t.defended_pipeline),
    ] {
        let _ = writeln!(
            out,
            "{name}: mean {:.3} ms, max {:.3} ms over {} samples",
            s.mean_ms, s.max_ms, s.samples
        );
    }
    for (k, v) in &t.metadata {
        let _ = writeln!(out, "{k}: {v}");
    }
    out
}

fn render_transfer(t: &TransferReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "transferability: {} -> {}", t.source_model, t.second_model);
    let clean = t.clean_overall();
    let _ = writeln!(
        out,
        "clean accuracy {:.6} ({}/{})",
        clean.accuracy().unwrap_or(0.0),
        clean.correct,
        clean.total
    );
    for (i, &s) in t.patched.patch_sizes.iter().enumerate() {
        let o = t.patched.overall(i);
        let _ = writeln!(
            out,
            "patched {s}x{s}: accuracy {:.6} ({}/{})",
            o.accuracy().unwrap_or(0.0),
            o.correct,
            o.total
        );
    }
    let verdict = match &t.outcome {
        TransferOutcome::Confirmed => "confirmed".to_string(),
        TransferOutcome::NotConfirmed => "not confirmed".to_string(),
        TransferOutcome::NotApplicable { reason } => format!("not applicable ({reason})"),
    };
    let _ = writeln!(out, "transfer: {verdict}");
    out
}

struct CheckRun {
    failures: Vec<String>,
}

impl CheckRun {
    fn new() -> Self {
        CheckRun { failures: Vec::new() }
    }

    fn record(&mut self, name: &str, pass: bool, detail: String) {
        let status = if pass { "pass" } else { "FAIL" };
        println!("check {name}: {status} ({detail})");
        if !pass {
            self.failures.push(format!("{name}: {detail}"));
        }
    }
}

fn run_checks(
    ctx: &Ctx,
    report: &EvaluationReport,
    gan_meta: &SavedGanMeta,
    transfer: Option<&TransferReport>,
) -> Result<(), CliError> {
    let check = &ctx.cfg.eval.check;
    let mut run = CheckRun::new();
    run.record(
        "ssim_gate",
        gan_meta.val_ssim > SSIM_GATE,
        format!("selected generator val_ssim {:.4} vs gate {SSIM_GATE}", gan_meta.val_ssim),
    );
    if let Some(min) = check.min_baseline {
        let got = report.baseline_overall().accuracy().unwrap_or(0.0);
        run.record("baseline_accuracy", got >= min, format!("{got:.4} vs minimum {min}"));
    }
    if let Some(max) = check.max_attacked_mean {
        let got = report.under_attack.mean_overall_accuracy();
        run.record(
            "attacked_accuracy_mean",
            got <= max,
            format!("{got:.4} vs maximum {max}"),
        );
    }
    for (i, &min) in check.min_defended.iter().enumerate() {
        let size = report.patch_sizes[i];
        let got = report.after_defense.overall(i).accuracy().unwrap_or(0.0);
        run.record(
            &format!("defended_accuracy_{size}x{size}"),
            got >= min,
            format!("{got:.4} vs minimum {min}"),
        );
    }
    if let Some(min) = check.min_delta {
        for (i, &size) in report.patch_sizes.iter().enumerate() {
            let got = report.delta_overall(i).unwrap_or(0.0);
            run.record(
                &format!("recovery_delta_{size}x{size}"),
                got >= min,
                format!("{got:.4} vs minimum {min}"),
            );
        }
    }
    if let Some(min) = check.min_delta_overall {
        let after = report.after_defense.pooled().accuracy().unwrap_or(0.0);
        let under = report.under_attack.pooled().accuracy().unwrap_or(0.0);
        let got = after - under;
        run.record("recovery_delta_overall", got >= min, format!("{got:.4} vs minimum {min}"));
    }
    if check.require_transfer {
        match transfer {
            Some(t) => {
                let pass = matches!(t.outcome, TransferOutcome::Confirmed);
                run.record(
                    "transferability",
                    pass,
                    match &t.outcome {
                        TransferOutcome::Confirmed => "patched accuracy fell 30+ points".to_string(),
                        TransferOutcome::NotConfirmed => "drop below 30 points".to_string(),
                        TransferOutcome::NotApplicable { reason } => reason.clone(),
                    },
                );
            }
            None => run.record("transferability", false, "no transfer report".to_string()),
        }
    }
    if run.failures.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "{} check(s) failed: {}",
            run.failures.len(),
            run.failures.join("; ")
        )))
    }
}

pub fn evaluate(ctx: &Ctx, check: bool, identity_generator: bool) -> Result<(), CliError> {
    let ckpt = ctx.run.model_ckpt(&ctx.cfg.classifier.backbone);
    require_artifact(&ckpt, "train-classifier")?;
    require_artifact(&ctx.run.generator_ckpt(), "train-defense")?;
    let patches = load_patches(ctx)?;
    let (_, _, test) = load_prepared(ctx)?;
    let mut model = ClassifierModel::load(&ckpt)?;
    let (mut generator, gan_meta) = GeneratorModel::load(&ctx.run.generator_ckpt())?;
    let seed = ctx.cfg.eval.seed;

    let baseline = evaluate_baseline(&mut model, &test)?;
    let under_attack = evaluate_under_attack(&mut model, &patches, &test, seed)?;
    let mut purifier = if identity_generator {
        Purifier::Identity
    } else {
        Purifier::Generator(&mut generator)
    };
    let after_defense = evaluate_with_defense(&mut model, &mut purifier, &patches, &test, seed)?;

    let mut metadata = BTreeMap::new();
    metadata.insert("run_id".to_string(), ctx.cfg.run_id());
    metadata.insert("classifier".to_string(), ctx.cfg.classifier.backbone.clone());
    metadata.insert("eval_seed".to_string(), seed.to_string());
    metadata.insert(
        "generator".to_string(),
        if identity_generator {
            "identity (control)".to_string()
        } else {
            format!(
                "epoch {} val_ssim {:.4} val_accuracy {:.4}",
                gan_meta.epoch, gan_meta.val_ssim, gan_meta.val_accuracy
            )
        },
    );
    for p in &patches {
        metadata.insert(
            format!("patch_{0}x{0}", p.size()),
            format!(
                "target class {}, attack seed {}, targeted success {:.4}",
                p.target_class, p.provenance.seed, p.provenance.val_success_rate
            ),
        );
    }
    let report = assemble_report(&test, baseline, under_attack, after_defense, metadata);
    emit_report(&report, ReportFormat::Csv, &ctx.run.report_csv())?;
    emit_report(&report, ReportFormat::StructuredText, &ctx.run.report_txt())?;
    let plots = emit_plots(&report, &ctx.run.plots_dir())?;
    println!(
        "wrote {}, {}, and {} plot(s)",
        ctx.run.report_csv().display(),
        ctx.run.report_txt().display(),
        plots.len()
    );

    let timing = measure_timing(
        &mut model,
        &mut generator,
        &test,
        ctx.cfg.eval.timing_repetitions,
    )?;
    write_file(&ctx.run.timing_txt(), &render_timing(&timing))?;
    println!(
        "timing: reconstruction {:.3} ms, classification {:.3} ms, defended {:.3} ms (means)",
        timing.reconstruction.mean_ms,
        timing.classification.mean_ms,
        timing.defended_pipeline.mean_ms
    );

    let transfer = match &ctx.cfg.transfer {
        Some(section) => {
            let t_ckpt = ctx.run.model_ckpt(&section.backbone);
            require_artifact(&t_ckpt, "train-classifier --backbone <transfer>")?;
            let mut second = ClassifierModel::load(&t_ckpt)?;
            let t = transferability_eval(&mut second, &patches, &test, seed)?;
            write_file(&ctx.run.transfer_txt(), &render_transfer(&t))?;
            println!("transfer to {}: {}", section.backbone, match &t.outcome {
                TransferOutcome::Confirmed => "confirmed",
                TransferOutcome::NotConfirmed => "not confirmed",
                TransferOutcome::NotApplicable { .. } => "not applicable",
            });
            Some(t)
        }
        None => None,
    };

    for (i, &size) in report.patch_sizes.iter().enumerate() {
        println!(
            "patch {size}x{size}: baseline {:.4}, under attack {:.4}, after defense {:.4}",
            report.baseline_overall().accuracy().unwrap_or(0.0),
            report.under_attack.overall(i).accuracy().unwrap_or(0.0),
            report.after_defense.overall(i).accuracy().unwrap_or(0.0),
        );
    }

    if check {
        run_checks(ctx, &report, &gan_meta, transfer.as_ref())?;
    }
    Ok(())
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn decode_input(
    path: &Path,
    shape: [usize; 3],
) -> Result<ndarray::Array4<f32>, String> {
    let img = image::open(path).map_err(|e| format!("decode failed: {e}"))?;
    let [c, h, w] = shape;
    let (got_w, got_h) = (img.width() as usize, img.height() as usize);
    if (got_h, got_w) != (h, w) {
        return Err(format!("expected {h}x{w} pixels, got {got_h}x{got_w}"));
    }
    let mut out = ndarray::Array4::<f32>::zeros((1, c, h, w));
    match c {
        1 => {
            let gray = img.to_luma8();
            for (x, y, p) in gray.enumerate_pixels() {
                out[(0, 0, y as usize, x as usize)] = p.0[0] as f32 / 255.0;
            }
        }
        _ => {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for ci in 0..c.min(3) {
                    out[(0, ci, y as usize, x as usize)] = p.0[ci] as f32 / 255.0;
                }
            }
        }
    }
    Ok(out)
}

fn encode_output(batch: &ndarray::Array4<f32>, path: &Path) -> Result<(), String> {
    let (_, c, h, w) = batch.dim();
    let to_u8 = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let result = if c == 1 {
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([to_u8(batch[(0, 0, y as usize, x as usize)])])
        })
        .save(path)
    } else {
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb([
                to_u8(batch[(0, 0, y as usize, x as usize)]),
                to_u8(batch[(0, 1, y as usize, x as usize)]),
                to_u8(batch[(0, 2, y as usize, x as usize)]),
            ])
        })
        .save(path)
    };
    result.map_err(|e| format!("encode failed: {e}"))
}

pub fn purify(ctx: &Ctx, input: &Path, output: &Path) -> Result<(), CliError> {
    require_artifact(&ctx.run.generator_ckpt(), "train-defense")?;
    let (mut generator, _) = GeneratorModel::load(&ctx.run.generator_ckpt())?;
    let shape = generator.input_shape();
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Validation(format!(
            "no inputs: {} contains no image files",
            input.display()
        )));
    }
    std::fs::create_dir_all(output)
        .map_err(|e| CliError::Validation(format!("cannot create {}: {e}", output.display())))?;
    let mut failures = Vec::new();
    let mut written = 0usize;
    for file in &files {
        let name = file.file_name().expect("files from read_dir have names");
        let result = decode_input(file, shape).and_then(|batch| {
            let purified = generator
                .purify(&batch)
                .map_err(|e| format!("purification failed: {e}"))?;
            encode_output(&purified, &output.join(name))
        });
        match result {
            Ok(()) => written += 1,
            Err(reason) => failures.push(format!("{}: {reason}", file.display())),
        }
    }
    println!("purified {written} of {} image(s) into {}", files.len(), output.display());
    if failures.is_empty() {
        Ok(())
    } else {
        for f in &failures {
            eprintln!("error: {f}");
        }
        Err(CliError::Validation(format!(
            "{} input(s) failed",
            failures.len()
        )))
    }
}
