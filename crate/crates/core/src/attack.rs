//! Targeted adversarial patch generation and application.
//!
//! A patch is a free `(C, s, s)` pixel tensor optimized with Adam to pull the
//! classifier's prediction toward a chosen target class from any placement.
//! The victim model is frozen throughout: forward passes run in inference
//! mode and backward passes never touch its parameter gradients. Pixels are
//! clamped to `[0, 1]` after every step.

use crate::data::{stamp_square, EpochSampler, LabeledDataset};
use crate::io::{StoreError, TensorStore};
use crate::models::{argmax_rows, ClassifierModel, ModelsError};
use crate::nn::{cross_entropy_from_logits, Adam, Mode, Param};
use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("placement ({row}, {col}) puts a {size}x{size} patch outside a {height}x{width} image")]
    PlacementOutOfBounds {
        row: usize,
        col: usize,
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("patch size {size} exceeds image side {side}")]
    PatchTooLarge { size: usize, side: usize },
    #[error("patch size must be at least 1")]
    ZeroSize,
    #[error("target class {target} out of range for {num_classes} classes")]
    TargetOutOfRange { target: usize, num_classes: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}; last finite loss {last_finite}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        last_finite: f64,
    },
    #[error(transparent)]
    Models(#[from] ModelsError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("inconsistent patch artifact: {0}")]
    InconsistentArtifact(String),
    #[error("image encode error at {path}: {reason}")]
    ImageEncode { path: std::path::PathBuf, reason: String },
}

/// Where a patch's top-left corner lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchPlacement {
    pub row: usize,
    pub col: usize,
}

/// How the patch was produced, kept with the artifact.
#[derive(Debug, Clone)]
pub struct PatchProvenance {
    pub source_model: String,
    pub epochs: usize,
    pub seed: u64,
    pub val_success_rate: f64,
}

#[derive(Debug, Clone)]
pub struct AdversarialPatch {
    /// `(channels, s, s)`, values in `[0, 1]`.
    pub pixels: Array3<f32>,
    pub target_class: usize,
    pub provenance: PatchProvenance,
}

impl AdversarialPatch {
    pub fn size(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub patch_sizes: Vec<usize>,
    pub target_class: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Copy `image` with the patch stamped at `placement`.
pub fn apply_patch(
    image: &Array3<f32>,
    patch: &AdversarialPatch,
    placement: PatchPlacement,
) -> Result<Array3<f32>, AttackError> {
    let (_, h, w) = image.dim();
    let s = patch.size();
    if placement.row + s > h || placement.col + s > w {
        return Err(AttackError::PlacementOutOfBounds {
            row: placement.row,
            col: placement.col,
            size: s,
            height: h,
            width: w,
        });
    }
    let mut out = image.clone();
    stamp_square(out.view_mut(), &patch.pixels, placement.row, placement.col);
    Ok(out)
}

/// Uniform placement over all `(H-s+1)(W-s+1)` valid positions.
pub fn random_placement(
    rng: &mut ChaCha8Rng,
    image_shape: [usize; 3],
    s: usize,
) -> Result<PatchPlacement, AttackError> {
    let [_, h, w] = image_shape;
    if s == 0 {
        return Err(AttackError::ZeroSize);
    }
    if s > h || s > w {
        return Err(AttackError::PatchTooLarge { size: s, side: h.min(w) });
    }
    Ok(PatchPlacement {
        row: rng.random_range(0..=h - s),
        col: rng.random_range(0..=w - s),
    })
}

/// Per-size deterministic seed stream derived from the config seed.
fn seed_for_size(seed: u64, s: usize) -> u64 {
    seed ^ (s as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Debug, Clone)]
pub struct AttackEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_success_rate: f64,
}

/// Optimize a `(C, s, s)` patch against a frozen classifier.
///
/// Per batch: every image gets a fresh random placement, the stamped batch is
/// pushed through the model, and the cross-entropy toward `target_class` is
/// backpropagated to the patch pixels only. After each epoch the targeted
/// success rate on freshly placed validation images is recorded; the pixels
/// from the best epoch are returned (earliest epoch on ties).
pub fn generate_adversarial_patch(
    model: &mut ClassifierModel,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &AttackConfig,
    s: usize,
) -> Result<(AdversarialPatch, Vec<AttackEpochStats>), AttackError> {
    let [c, h, w] = model.input_shape();
    if s == 0 {
        return Err(AttackError::ZeroSize);
    }
    if s > h || s > w {
        return Err(AttackError::PatchTooLarge { size: s, side: h.min(w) });
    }
    if cfg.target_class >= model.num_classes() {
        return Err(AttackError::TargetOutOfRange {
            target: cfg.target_class,
            num_classes: model.num_classes(),
        });
    }
    if train.is_empty() || val.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    let seed = seed_for_size(cfg.seed, s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patch = Param::new(
        "patch".to_string(),
        Array3::<f32>::zeros((c, s, s)).into_dyn(),
    );
    for v in patch.value.iter_mut() {
        *v = rng.random::<f32>();
    }
    let mut opt = Adam::<f32>::new(cfg.learning_rate);
    let batch_size = cfg.batch_size.clamp(1, train.len());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ndarray::ArrayD<f32>)> = None;
    let mut last_finite = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut sampler = EpochSampler::new(train.len(), batch_size, &mut rng)
            .expect("batch size clamped to dataset size");
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        while let Some(idx) = sampler.next_indices() {
            let idx = idx.to_vec();
            let (mut x, _) = train.gather(&idx);
            let n = x.dim().0;
            let patch_now = patch
                .value
                .view()
                .into_shape_with_order((c, s, s))
                .unwrap()
                .to_owned();
            let mut placements = Vec::with_capacity(n);
            for i in 0..n {
                let p = random_placement(&mut rng, [c, h, w], s)?;
                stamp_square(x.index_axis_mut(Axis(0), i), &patch_now, p.row, p.col);
                placements.push(p);
            }
            let targets = vec![cfg.target_class; n];
            let logits = model.logits(&x, Mode::Infer)?;
            let (loss, dlogits) = cross_entropy_from_logits(&logits, &targets);
            if !loss.is_finite() {
                return Err(AttackError::NonFiniteLoss {
                    epoch,
                    batch: batches,
                    last_finite,
                });
            }
            last_finite = loss as f64;
            loss_sum += loss as f64;
            batches += 1;
            let dx = model.backward_to_input(dlogits, &[], false);
            patch.zero_grad();
            {
                let g = patch
                    .grad
                    .as_slice_mut()
                    .expect("patch grad is contiguous");
                for (i, p) in placements.iter().enumerate() {
                    for ci in 0..c {
                        for dy in 0..s {
                            for dxx in 0..s {
                                g[ci * s * s + dy * s + dxx] +=
                                    dx[(i, ci, p.row + dy, p.col + dxx)];
                            }
                        }
                    }
                }
            }
            opt.step(&mut [&mut patch]);
            for v in patch.value.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
        // targeted success on freshly placed validation images
        let pixels = patch
            .value
            .view()
            .into_shape_with_order((c, s, s))
            .unwrap()
            .to_owned();
        let probe = AdversarialPatch {
            pixels,
            target_class: cfg.target_class,
            provenance: PatchProvenance {
                source_model: model.spec.backbone_id.clone(),
                epochs: cfg.epochs,
                seed,
                val_success_rate: f64::NAN,
            },
        };
        let success = attack_success_rate(
            model,
            &probe,
            val,
            SuccessMode::Targeted,
            seed.wrapping_add(epoch as u64 + 1),
        )?;
        log.push(AttackEpochStats {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_success_rate: success,
        });
        if best.as_ref().is_none_or(|(b, _)| success > *b) {
            best = Some((success, patch.value.clone()));
        }
    }
    let (best_rate, best_pixels) = best.expect("at least one epoch");
    Ok((
        AdversarialPatch {
            pixels: best_pixels.into_shape_with_order((c, s, s)).unwrap(),
            target_class: cfg.target_class,
            provenance: PatchProvenance {
                source_model: model.spec.backbone_id.clone(),
                epochs: cfg.epochs,
                seed,
                val_success_rate: best_rate,
            },
        },
        log,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuccessMode {
    /// Fraction predicted as the target class, among images whose true label
    /// differs from the target.
    Targeted,
    /// Fraction mispredicted relative to the true label, over all images.
    Untargeted,
}

/// Success rate of a patch with one fresh seeded placement per image.
pub fn attack_success_rate(
    model: &mut ClassifierModel,
    patch: &AdversarialPatch,
    dataset: &LabeledDataset,
    mode: SuccessMode,
    seed: u64,
) -> Result<f64, AttackError> {
    if dataset.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    let [c, h, w] = model.input_shape();
    let s = patch.size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dataset.len();
    let mut hits = 0usize;
    let mut denom = 0usize;
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (mut x, y) = dataset.gather(&idx);
        for i in 0..x.dim().0 {
            let p = random_placement(&mut rng, [c, h, w], s)?;
            stamp_square(x.index_axis_mut(Axis(0), i), &patch.pixels, p.row, p.col);
        }
        let pred = argmax_rows(&model.predict(&x)?);
        for (pr, tr) in pred.iter().zip(&y) {
            match mode {
                SuccessMode::Targeted => {
                    if *tr != patch.target_class {
                        denom += 1;
                        if *pr == patch.target_class {
                            hits += 1;
                        }
                    }
                }
                SuccessMode::Untargeted => {
                    denom += 1;
                    if pr != tr {
                        hits += 1;
                    }
                }
            }
        }
        start = end;
    }
    if denom == 0 {
        // every image already belongs to the target class
        return Ok(1.0);
    }
    Ok(hits as f64 / denom as f64)
}

/// Persist a patch artifact (manifest + f32 blob).
pub fn save_patch(patch: &AdversarialPatch, path: &Path) -> Result<(), AttackError> {
    let mut store = TensorStore::new();
    store.set_meta("kind", "adversarial-patch");
    store.set_meta("size", patch.size().to_string());
    store.set_meta("channels", patch.channels().to_string());
    store.set_meta("target_class", patch.target_class.to_string());
    store.set_meta("source_model", &patch.provenance.source_model);
    store.set_meta("epochs", patch.provenance.epochs.to_string());
    store.set_meta("seed", patch.provenance.seed.to_string());
    store.set_meta(
        "val_success_rate",
        format!("{}", patch.provenance.val_success_rate),
    );
    store.push(
        "pixels",
        patch.pixels.shape().to_vec(),
        patch.pixels.iter().copied().collect(),
    );
    store.save(path)?;
    Ok(())
}

pub fn load_patch(path: &Path) -> Result<AdversarialPatch, AttackError> {
    let store = TensorStore::load(path)?;
    if store.meta("kind")? != "adversarial-patch" {
        return Err(AttackError::InconsistentArtifact(
            "not a patch artifact".to_string(),
        ));
    }
    let parse = |key: &str| -> Result<u64, AttackError> {
        store
            .meta(key)?
            .parse::<u64>()
            .map_err(|_| AttackError::InconsistentArtifact(format!("meta {key} is not an integer")))
    };
    let size = parse("size")? as usize;
    let channels = parse("channels")? as usize;
    let entry = store.get("pixels")?;
    if entry.shape != [channels, size, size] {
        return Err(AttackError::InconsistentArtifact(format!(
            "pixel tensor shape {:?} does not match declared {}x{}x{}",
            entry.shape, channels, size, size
        )));
    }
    let pixels = Array3::from_shape_vec((channels, size, size), entry.data.clone())
        .expect("shape verified above");
    if pixels.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
        return Err(AttackError::InconsistentArtifact(
            "pixels outside [0,1]".to_string(),
        ));
    }
    Ok(AdversarialPatch {
        pixels,
        target_class: parse("target_class")? as usize,
        provenance: PatchProvenance {
            source_model: store.meta("source_model")?.to_string(),
            epochs: parse("epochs")? as usize,
            seed: parse("seed")?,
            val_success_rate: store
                .meta("val_success_rate")?
                .parse::<f64>()
                .map_err(|_| {
                    AttackError::InconsistentArtifact("bad val_success_rate".to_string())
                })?,
        },
    })
}

/// Export the patch as a PNG for visual inspection.
pub fn export_patch_png(patch: &AdversarialPatch, path: &Path) -> Result<(), AttackError> {
    let s = patch.size() as u32;
    let to_u8 = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let encode_err = |e: image::ImageError| AttackError::ImageEncode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    match patch.channels() {
        1 => {
            let img = image::GrayImage::from_fn(s, s, |x, y| {
                image::Luma([to_u8(patch.pixels[(0, y as usize, x as usize)])])
            });
            img.save(path).map_err(encode_err)
        }
        3 => {
            let img = image::RgbImage::from_fn(s, s, |x, y| {
                image::Rgb([
                    to_u8(patch.pixels[(0, y as usize, x as usize)]),
                    to_u8(patch.pixels[(1, y as usize, x as usize)]),
                    to_u8(patch.pixels[(2, y as usize, x as usize)]),
                ])
            });
            img.save(path).map_err(encode_err)
        }
        c => Err(AttackError::ImageEncode {
            path: path.to_path_buf(),
            reason: format!("{c}-channel patches have no raster representation"),
        }),
    }
}

/// Stamp a patch onto every image of a batch with one seeded placement each —
/// the shared helper behind patched evaluation sets.
pub fn patch_batch(
    images: &Array4<f32>,
    patch: &AdversarialPatch,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<f32>, AttackError> {
    let (n, c, h, w) = images.dim();
    let mut out = images.clone();
    for i in 0..n {
        let p = random_placement(rng, [c, h, w], patch.size())?;
        stamp_square(out.index_axis_mut(Axis(0), i), &patch.pixels, p.row, p.col);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ClassifierSpec;
    use ndarray::s;

    fn test_patch(c: usize, s: usize, fill: f32) -> AdversarialPatch {
        AdversarialPatch {
            pixels: Array3::from_elem((c, s, s), fill),
            target_class: 0,
            provenance: PatchProvenance {
                source_model: "test".to_string(),
                epochs: 0,
                seed: 0,
                val_success_rate: 0.0,
            },
        }
    }

    #[test]
    fn apply_patch_support_and_errors() {
        let image = Array3::<f32>::from_elem((3, 32, 32), 0.25);
        let patch = test_patch(3, 3, 0.75);
        let out = apply_patch(&image, &patch, PatchPlacement { row: 0, col: 0 }).unwrap();
        // top-left 3x3xC replaced, everything else bit-identical
        let mut changed = 0;
        for ((_, y, x), &b) in out.indexed_iter() {
            if b != 0.25 {
                changed += 1;
                assert!(y < 3 && x < 3, "changed pixel outside patch at ({y},{x})");
            }
        }
        assert_eq!(changed, 27);
        // idempotence
        let twice = apply_patch(&out, &patch, PatchPlacement { row: 0, col: 0 }).unwrap();
        assert_eq!(out, twice);
        // full cover
        let big = test_patch(3, 32, 0.1);
        let full = apply_patch(&image, &big, PatchPlacement { row: 0, col: 0 }).unwrap();
        assert!(full.iter().all(|&v| v == 0.1));
        // out of bounds
        assert!(matches!(
            apply_patch(&image, &patch, PatchPlacement { row: 30, col: 0 }),
            Err(AttackError::PlacementOutOfBounds { .. })
        ));
        // input not mutated
        assert!(image.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn random_placement_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // single valid position
        let p = random_placement(&mut rng, [3, 32, 32], 32).unwrap();
        assert_eq!(p, PatchPlacement { row: 0, col: 0 });
        for _ in 0..500 {
            let p = random_placement(&mut rng, [3, 32, 32], 3).unwrap();
            assert!(p.row <= 29 && p.col <= 29);
        }
        assert!(matches!(
            random_placement(&mut rng, [3, 32, 32], 33),
            Err(AttackError::PatchTooLarge { .. })
        ));
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            assert_eq!(
                random_placement(&mut a, [3, 16, 16], 4).unwrap(),
                random_placement(&mut b, [3, 16, 16], 4).unwrap()
            );
        }
    }

    fn trained_toy_model() -> (ClassifierModel, LabeledDataset, LabeledDataset) {
        // bright-band classes, easy to learn
        let mk = |n: usize, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut images = Array4::<f32>::zeros((n, 3, 16, 16));
            let mut labels = Vec::new();
            for i in 0..n {
                let class = i % 2;
                let mut img = images.index_axis_mut(Axis(0), i);
                for v in img.iter_mut() {
                    *v = rng.random::<f32>() * 0.2;
                }
                let y0 = class * 8 + 1;
                img.slice_mut(s![.., y0..y0 + 6, 1..7]).fill(0.9);
                labels.push(class);
            }
            LabeledDataset {
                images,
                labels,
                class_names: vec!["zero".to_string(), "one".to_string()],
            }
        };
        let train = mk(32, 1);
        let val = mk(16, 2);
        let spec = ClassifierSpec {
            backbone_id: "small-cnn".to_string(),
            num_classes: 2,
            input_shape: [3, 16, 16],
            epochs: 4,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 3,
        };
        let (model, _) = crate::models::train_classifier(&train, &val, &spec).unwrap();
        (model, train, val)
    }

    #[test]
    fn patch_optimization_freezes_model_and_reports_best_epoch() {
        let (mut model, train, val) = trained_toy_model();
        let before: Vec<u32> = model
            .params()
            .iter()
            .flat_map(|p| p.value.iter().map(|v| v.to_bits()))
            .collect();
        let cfg = AttackConfig {
            patch_sizes: vec![5],
            target_class: 0,
            epochs: 4,
            learning_rate: 0.05,
            batch_size: 8,
            seed: 77,
        };
        let (patch, log) = generate_adversarial_patch(&mut model, &train, &val, &cfg, 5).unwrap();
        // frozen-model property: parameters bit-identical
        let after: Vec<u32> = model
            .params()
            .iter()
            .flat_map(|p| p.value.iter().map(|v| v.to_bits()))
            .collect();
        assert_eq!(before, after, "attack must not modify the model");
        // pixels clamped
        assert!(patch.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        // monotone reporting: recorded rate equals the max over epochs
        let max_rate = log
            .iter()
            .map(|e| e.val_success_rate)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(patch.provenance.val_success_rate, max_rate);
        assert_eq!(log.len(), 4);
        // determinism
        let (patch2, _) = generate_adversarial_patch(&mut model, &train, &val, &cfg, 5).unwrap();
        assert_eq!(
            patch.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            patch2.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        // target out of range is rejected
        let bad = AttackConfig {
            target_class: 5,
            ..cfg.clone()
        };
        assert!(matches!(
            generate_adversarial_patch(&mut model, &train, &val, &bad, 5),
            Err(AttackError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn success_rate_semantics() {
        let (mut model, _, val) = trained_toy_model();
        let patch = test_patch(3, 4, 0.5);
        let t = attack_success_rate(&mut model, &patch, &val, SuccessMode::Targeted, 1).unwrap();
        let u = attack_success_rate(&mut model, &patch, &val, SuccessMode::Untargeted, 1).unwrap();
        assert!((0.0..=1.0).contains(&t));
        assert!((0.0..=1.0).contains(&u));
        // same seed -> same placements -> same rates
        let t2 = attack_success_rate(&mut model, &patch, &val, SuccessMode::Targeted, 1).unwrap();
        assert_eq!(t, t2);
        // all-target dataset: vacuous targeted success
        let only_target = LabeledDataset {
            images: val.images.slice(s![0..2, .., .., ..]).to_owned(),
            labels: vec![patch.target_class; 2],
            class_names: val.class_names.clone(),
        };
        let v = attack_success_rate(&mut model, &patch, &only_target, SuccessMode::Targeted, 1)
            .unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn patch_artifact_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut patch = test_patch(3, 4, 0.3);
        patch.target_class = 2;
        patch.provenance = PatchProvenance {
            source_model: "small-cnn".to_string(),
            epochs: 9,
            seed: 1234,
            val_success_rate: 0.875,
        };
        let path = dir.path().join("patch.ckpt");
        save_patch(&patch, &path).unwrap();
        let loaded = load_patch(&path).unwrap();
        assert_eq!(loaded.size(), 4);
        assert_eq!(loaded.target_class, 2);
        assert_eq!(loaded.provenance.epochs, 9);
        assert_eq!(loaded.provenance.seed, 1234);
        assert_eq!(loaded.provenance.val_success_rate, 0.875);
        let bits = |p: &AdversarialPatch| p.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&patch), bits(&loaded));
        // declared size disagreeing with the tensor is rejected
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("meta size 4", "meta size 5")).unwrap();
        assert!(matches!(
            load_patch(&path),
            Err(AttackError::InconsistentArtifact(_))
        ));
        // PNG export for inspection
        let png = dir.path().join("patch.png");
        export_patch_png(&patch, &png).unwrap();
        let back = image::open(&png).unwrap();
        assert_eq!(back.width(), 4);
    }
}
