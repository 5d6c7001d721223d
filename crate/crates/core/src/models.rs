//! Image classifiers with named internal feature taps.
//!
//! Three backbones share one interface: `small-cnn` (the desk-scale default),
//! `deep-residual`, and `inception-style` (architecturally distinct, used for
//! the transferability study). Downstream modules only see
//! [`ClassifierModel`] / [`FeatureExtractor`], never backbone internals.

use crate::data::LabeledDataset;
use crate::io::{StoreError, TensorStore};
use crate::nn::{
    cross_entropy_smoothed, softmax_rows, Adam, BatchNorm2d, Conv2d, Flatten, GlobalAvgPool,
    InceptionBlock, Init, Linear, MaxPool2d, Mode, Relu, ResidualBlock, Sequential,
};
use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

pub const BACKBONE_IDS: [&str; 3] = ["small-cnn", "deep-residual", "inception-style"];

#[derive(Debug, Error)]
pub enum ModelsError {
    #[error("unknown backbone {0:?}; valid: small-cnn, deep-residual, inception-style")]
    UnknownBackbone(String),
    #[error("classifier needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("input shape {0:?} too small; backbones need at least 16x16 images")]
    InputTooSmall([usize; 3]),
    #[error("input shape {0:?} is not square; backbones pool the grid down to one cell")]
    NonSquareInput([usize; 3]),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("expected input shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        actual: [usize; 3],
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown tap layer {name:?}; valid layers: {}", valid.join(", "))]
    UnknownTapLayer { name: String, valid: Vec<String> },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("inconsistent checkpoint: {0}")]
    InconsistentCheckpoint(String),
}

/// Everything needed to build and train a classifier.
#[derive(Debug, Clone)]
pub struct ClassifierSpec {
    pub backbone_id: String,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<(), ModelsError> {
        if !BACKBONE_IDS.contains(&self.backbone_id.as_str()) {
            return Err(ModelsError::UnknownBackbone(self.backbone_id.clone()));
        }
        if self.num_classes < 2 {
            return Err(ModelsError::TooFewClasses(self.num_classes));
        }
        if self.input_shape[1] < 16 || self.input_shape[2] < 16 {
            return Err(ModelsError::InputTooSmall(self.input_shape));
        }
        if self.input_shape[1] != self.input_shape[2] {
            return Err(ModelsError::NonSquareInput(self.input_shape));
        }
        Ok(())
    }
}

/// Spatial side after one 2x2/stride-2 max pool (floor semantics).
fn halved(side: usize) -> usize {
    (side - 2) / 2 + 1
}

pub struct ClassifierModel {
    pub spec: ClassifierSpec,
    pub class_names: Vec<String>,
    net: Sequential<f32>,
}

impl std::fmt::Debug for ClassifierModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierModel")
            .field("spec", &self.spec)
            .field("class_names", &self.class_names)
            .field("trainable_params", &self.count_trainable_params())
            .finish_non_exhaustive()
    }
}

fn build_backbone(spec: &ClassifierSpec) -> Result<Sequential<f32>, ModelsError> {
    spec.validate()?;
    let [c_in, _, _] = spec.input_shape;
    let k = spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rng = &mut rng;
    let mut net = Sequential::new();
    match spec.backbone_id.as_str() {
        // Scaled-down VGG: conv / max-pool stages repeated until the grid
        // collapses to a single cell, then a linear head. Each max-pool keeps
        // whatever activation dominates its local window, so the final 1x1
        // map answers "did this pattern appear anywhere" per channel — the
        // position-independent descriptor the patch-attack literature
        // exploits. (A single global pool would starve a small patch of
        // gradient; average pooling would dilute it by its area fraction;
        // a dense head over a multi-cell map only gives the patch leverage
        // at the cells it happens to land in.)
        "small-cnn" => {
            let widths = [16usize, 32, 64, 128, 128, 128];
            let mut side = spec.input_shape[1];
            let mut prev = c_in;
            let mut stage = 0;
            while side > 1 {
                stage += 1;
                let ch = widths[(stage - 1).min(widths.len() - 1)];
                let conv = format!("conv{stage}");
                net.push(conv.clone(), Conv2d::new(&conv, prev, ch, 3, 1, 1, Init::HeNormal, rng));
                net.push(format!("relu{stage}"), Relu::new());
                net.push(format!("pool{stage}"), MaxPool2d::new(2, 2, 0));
                side = halved(side);
                prev = ch;
            }
            net.push("flatten", Flatten::new());
            net.push("fc", Linear::new("fc", prev, k, Init::HeNormal, rng));
        }
        "deep-residual" => {
            net.push("stem", Conv2d::new("stem", c_in, 16, 3, 1, 1, Init::HeNormal, rng));
            net.push("stem_bn", BatchNorm2d::new("stem_bn", 16));
            net.push("stem_relu", Relu::new());
            net.push("res1", ResidualBlock::new("res1", 16, 16, 1, rng));
            net.push("res2", ResidualBlock::new("res2", 16, 32, 2, rng));
            net.push("res3", ResidualBlock::new("res3", 32, 32, 1, rng));
            net.push("res4", ResidualBlock::new("res4", 32, 64, 2, rng));
            net.push("res5", ResidualBlock::new("res5", 64, 64, 1, rng));
            net.push("flatten", Flatten::new());
            let side = spec.input_shape[1] / 4;
            net.push("fc", Linear::new("fc", 64 * side * side, k, Init::HeNormal, rng));
        }
        "inception-style" => {
            net.push("stem", Conv2d::new("stem", c_in, 16, 3, 1, 1, Init::HeNormal, rng));
            net.push("stem_relu", Relu::new());
            net.push("pool1", MaxPool2d::new(2, 2, 0));
            net.push("inc1", InceptionBlock::new("inc1", 16, 8, 8, 16, 4, 8, 8, rng));
            net.push("pool2", MaxPool2d::new(2, 2, 0));
            net.push("inc2", InceptionBlock::new("inc2", 40, 16, 16, 32, 8, 16, 16, rng));
            net.push("gap", GlobalAvgPool::new());
            net.push("fc", Linear::new("fc", 80, k, Init::HeNormal, rng));
        }
        other => return Err(ModelsError::UnknownBackbone(other.to_string())),
    }
    Ok(net)
}

/// Default perceptual tap per backbone: a deep convolutional feature map
/// that still has some spatial extent.
fn default_tap_for(backbone_id: &str) -> &'static str {
    match backbone_id {
        "small-cnn" => "relu4",
        "deep-residual" => "res5",
        "inception-style" => "inc2",
        _ => unreachable!("validated backbone"),
    }
}

impl ClassifierModel {
    /// Fresh randomly initialized model.
    pub fn new(spec: ClassifierSpec, class_names: Vec<String>) -> Result<Self, ModelsError> {
        let net = build_backbone(&spec)?;
        Ok(Self {
            spec,
            class_names,
            net,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.net.layer_names().iter().map(|s| s.to_string()).collect()
    }

    pub fn default_tap(&self) -> String {
        default_tap_for(&self.spec.backbone_id).to_string()
    }

    /// Shape after each layer for one input image.
    pub fn shape_trace(&self) -> Vec<(String, [usize; 3])> {
        self.net.shape_trace(self.spec.input_shape)
    }

    pub fn count_trainable_params(&self) -> usize {
        self.net
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    fn check_batch(&self, batch: &Array4<f32>) -> Result<(), ModelsError> {
        let (_, c, h, w) = batch.dim();
        if [c, h, w] != self.spec.input_shape {
            return Err(ModelsError::ShapeMismatch {
                expected: self.spec.input_shape,
                actual: [c, h, w],
            });
        }
        Ok(())
    }

    /// Direct access to the layer stack for in-crate training loops that
    /// fuse loss gradients; callers must uphold the shape checks themselves.
    pub(crate) fn net_mut(&mut self) -> &mut Sequential<f32> {
        &mut self.net
    }

    /// Raw class logits, shape `(N, K)`.
    pub fn logits(&mut self, batch: &Array4<f32>, mode: Mode) -> Result<Array2<f32>, ModelsError> {
        self.check_batch(batch)?;
        let out = self.net.forward(batch.clone(), mode);
        let n = out.dim().0;
        Ok(out.into_shape_with_order((n, self.spec.num_classes)).unwrap())
    }

    /// Class probabilities, shape `(N, K)`; rows sum to one.
    pub fn predict(&mut self, batch: &Array4<f32>) -> Result<Array2<f32>, ModelsError> {
        Ok(softmax_rows(&self.logits(batch, Mode::Infer)?))
    }

    /// Argmax class per image.
    pub fn predict_classes(&mut self, batch: &Array4<f32>) -> Result<Vec<usize>, ModelsError> {
        let p = self.predict(batch)?;
        Ok(argmax_rows(&p))
    }

    /// Forward pass returning logits plus the activations of `taps`, which
    /// must be validated layer names (see [`FeatureExtractor`]).
    pub fn forward_collect(
        &mut self,
        batch: &Array4<f32>,
        mode: Mode,
        taps: &[String],
    ) -> Result<(Array2<f32>, Vec<Array4<f32>>), ModelsError> {
        self.check_batch(batch)?;
        for t in taps {
            if !self.net.has_layer(t) {
                return Err(ModelsError::UnknownTapLayer {
                    name: t.clone(),
                    valid: self.layer_names(),
                });
            }
        }
        let (out, feats) = self.net.forward_collect(batch.clone(), mode, taps);
        let n = out.dim().0;
        Ok((
            out.into_shape_with_order((n, self.spec.num_classes)).unwrap(),
            feats,
        ))
    }

    /// Backpropagate `dlogits` (and optional gradients on tapped activations)
    /// to the input batch. With `accumulate = false` the classifier's own
    /// parameter gradients are left untouched — the frozen-classifier mode
    /// used by purification training.
    pub fn backward_to_input(
        &mut self,
        dlogits: Array2<f32>,
        tap_grads: &[(String, Array4<f32>)],
        accumulate: bool,
    ) -> Array4<f32> {
        let (n, k) = dlogits.dim();
        let g = dlogits.into_shape_with_order((n, k, 1, 1)).unwrap();
        self.net.backward_with_taps(g, tap_grads, accumulate)
    }

    pub fn params(&self) -> Vec<&crate::nn::Param<f32>> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut crate::nn::Param<f32>> {
        self.net.params_mut()
    }

    pub fn zero_grad(&mut self) {
        self.net.zero_grad()
    }

    pub fn clear_cache(&mut self) {
        self.net.clear_cache()
    }

    /// Persist to the manifest + f32-blob store.
    pub fn save(&self, path: &Path) -> Result<(), ModelsError> {
        let mut store = TensorStore::new();
        store.set_meta("kind", "classifier");
        store.set_meta("backbone_id", &self.spec.backbone_id);
        store.set_meta("num_classes", self.spec.num_classes.to_string());
        store.set_meta(
            "input_shape",
            format!(
                "{}x{}x{}",
                self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2]
            ),
        );
        store.set_meta("epochs", self.spec.epochs.to_string());
        store.set_meta("batch_size", self.spec.batch_size.to_string());
        store.set_meta("learning_rate", format!("{}", self.spec.learning_rate));
        store.set_meta("seed", self.spec.seed.to_string());
        store.set_meta("class_names", encode_names(&self.class_names));
        for p in self.net.params() {
            store.push(p.name.clone(), p.value.shape().to_vec(), p.value.iter().copied().collect());
        }
        store.save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelsError> {
        let store = TensorStore::load(path)?;
        let kind = store.meta("kind")?;
        if kind != "classifier" {
            return Err(ModelsError::InconsistentCheckpoint(format!(
                "expected kind=classifier, found {kind}"
            )));
        }
        let parse = |key: &str| -> Result<u64, ModelsError> {
            store.meta(key)?.parse::<u64>().map_err(|_| {
                ModelsError::InconsistentCheckpoint(format!("meta {key} is not an integer"))
            })
        };
        let input_shape = parse_shape3(store.meta("input_shape")?)
            .ok_or_else(|| ModelsError::InconsistentCheckpoint("bad input_shape".to_string()))?;
        let spec = ClassifierSpec {
            backbone_id: store.meta("backbone_id")?.to_string(),
            num_classes: parse("num_classes")? as usize,
            input_shape,
            epochs: parse("epochs")? as usize,
            batch_size: parse("batch_size")? as usize,
            learning_rate: store
                .meta("learning_rate")?
                .parse::<f64>()
                .map_err(|_| ModelsError::InconsistentCheckpoint("bad learning_rate".to_string()))?,
            seed: parse("seed")?,
        };
        let class_names = decode_names(store.meta("class_names")?);
        if class_names.len() != spec.num_classes {
            return Err(ModelsError::InconsistentCheckpoint(format!(
                "{} class names for num_classes={}",
                class_names.len(),
                spec.num_classes
            )));
        }
        let mut model = Self::new(spec, class_names)?;
        for p in model.net.params_mut() {
            let entry = store.get(&p.name)?;
            if entry.shape != p.value.shape() {
                return Err(ModelsError::InconsistentCheckpoint(format!(
                    "tensor {} has shape {:?} in the checkpoint but the {} backbone expects {:?}",
                    p.name,
                    entry.shape,
                    model.spec.backbone_id,
                    p.value.shape()
                )));
            }
            for (dst, &src) in p.value.iter_mut().zip(&entry.data) {
                *dst = src;
            }
        }
        // borrow of model.net ended above; spec reference for the error message
        Ok(model)
    }
}

fn encode_names(names: &[String]) -> String {
    names
        .iter()
        .map(|n| n.replace('%', "%25").replace(',', "%2C"))
        .collect::<Vec<_>>()
        .join(",")
}

fn decode_names(s: &str) -> Vec<String> {
    s.split(',')
        .map(|n| n.replace("%2C", ",").replace("%25", "%"))
        .collect()
}

fn parse_shape3(s: &str) -> Option<[usize; 3]> {
    let parts: Vec<usize> = s.split('x').filter_map(|p| p.parse().ok()).collect();
    (parts.len() == 3).then(|| [parts[0], parts[1], parts[2]])
}

pub fn argmax_rows(p: &Array2<f32>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}

/// Ordered list of validated tap layers over a classifier.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub tap_layers: Vec<String>,
}

impl FeatureExtractor {
    pub fn new(model: &ClassifierModel, tap_layers: Vec<String>) -> Result<Self, ModelsError> {
        let valid = model.layer_names();
        for t in &tap_layers {
            if !valid.contains(t) {
                return Err(ModelsError::UnknownTapLayer {
                    name: t.clone(),
                    valid,
                });
            }
        }
        Ok(Self { tap_layers })
    }

    /// The documented default: the backbone's last conv feature map before
    /// pooling.
    pub fn default_for(model: &ClassifierModel) -> Self {
        Self {
            tap_layers: vec![model.default_tap()],
        }
    }

    /// Features per tap layer, order preserved.
    pub fn extract(
        &self,
        model: &mut ClassifierModel,
        batch: &Array4<f32>,
    ) -> Result<Vec<Array4<f32>>, ModelsError> {
        let (_, feats) = model.forward_collect(batch, Mode::Infer, &self.tap_layers)?;
        Ok(feats)
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub entries: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

fn validate_labels(ds: &LabeledDataset, k: usize) -> Result<(), ModelsError> {
    if ds.is_empty() {
        return Err(ModelsError::EmptyDataset);
    }
    for &l in &ds.labels {
        if l >= k {
            return Err(ModelsError::LabelOutOfRange {
                label: l,
                num_classes: k,
            });
        }
    }
    Ok(())
}

/// Train a classifier, returning the epoch checkpoint with the best
/// validation accuracy (earliest epoch on ties) plus the per-epoch log.
/// Smoothing factor for the classifier training loss. Keeps logit gaps near
/// `ln((1 - eps + eps/K) / (eps/K))` instead of letting them grow without
/// bound, which matches how confident production classifiers actually behave
/// and keeps downstream robustness measurements meaningful.
const LABEL_SMOOTHING: f32 = 0.2;

pub fn train_classifier(
    train: &LabeledDataset,
    val: &LabeledDataset,
    spec: &ClassifierSpec,
) -> Result<(ClassifierModel, TrainingLog), ModelsError> {
    spec.validate()?;
    validate_labels(train, spec.num_classes)?;
    validate_labels(val, spec.num_classes)?;
    let shape = train.image_shape();
    if shape != spec.input_shape {
        return Err(ModelsError::ShapeMismatch {
            expected: spec.input_shape,
            actual: shape,
        });
    }
    let mut model = ClassifierModel::new(spec.clone(), train.class_names.clone())?;
    let mut opt = Adam::<f32>::new(spec.learning_rate);
    let mut epoch_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x0e0c_4a11));
    let batch = spec.batch_size.min(train.len());
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, Vec<ndarray::ArrayD<f32>>)> = None;
    for epoch in 0..spec.epochs {
        let mut sampler = crate::data::EpochSampler::new(train.len(), batch, &mut epoch_rng)
            .expect("batch size clamped to dataset size");
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        while let Some(idx) = sampler.next_indices() {
            let idx = idx.to_vec();
            let (x, y) = train.gather(&idx);
            let logits = model.logits(&x, Mode::Train)?;
            let (loss, dlogits) = cross_entropy_smoothed(&logits, &y, LABEL_SMOOTHING);
            loss_sum += loss as f64;
            batches += 1;
            model.zero_grad();
            model.backward_to_input(dlogits, &[], true);
            opt.step(&mut model.params_mut());
        }
        let val_acc = evaluate_accuracy(&mut model, val)?.overall;
        log.entries.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_accuracy: val_acc,
        });
        let improved = best.as_ref().map_or(true, |(b, _)| val_acc > *b);
        if improved {
            let snapshot = model.params().iter().map(|p| p.value.clone()).collect();
            best = Some((val_acc, snapshot));
            log.best_epoch = epoch;
            log.best_val_accuracy = val_acc;
        }
    }
    if let Some((_, snapshot)) = best {
        for (p, s) in model.params_mut().into_iter().zip(snapshot) {
            p.value = s;
        }
    }
    model.clear_cache();
    Ok((model, log))
}

#[derive(Debug, Clone)]
pub struct AccuracyReport {
    pub overall: f64,
    /// One entry per class; `None` when the class has no examples.
    pub per_class: Vec<Option<f64>>,
    pub total: usize,
    pub correct: usize,
}

/// Accuracy over a dataset, overall and per class.
pub fn evaluate_accuracy(
    model: &mut ClassifierModel,
    dataset: &LabeledDataset,
) -> Result<AccuracyReport, ModelsError> {
    if dataset.is_empty() {
        return Err(ModelsError::EmptyDataset);
    }
    let k = model.num_classes();
    let mut class_total = vec![0usize; k];
    let mut class_correct = vec![0usize; k];
    let n = dataset.len();
    let chunk = 256;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = dataset.gather(&idx);
        let pred = model.predict_classes(&x)?;
        for (p, t) in pred.iter().zip(&y) {
            class_total[*t] += 1;
            if p == t {
                class_correct[*t] += 1;
            }
        }
        start = end;
    }
    let total: usize = class_total.iter().sum();
    let correct: usize = class_correct.iter().sum();
    let per_class = class_total
        .iter()
        .zip(&class_correct)
        .map(|(&t, &c)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    Ok(AccuracyReport {
        overall: correct as f64 / total as f64,
        per_class,
        total,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use rand::Rng;

    fn toy_dataset(n: usize, k: usize, seed: u64) -> LabeledDataset {
        // each class is a distinct bright quadrant pattern plus noise
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Array4::<f32>::zeros((n, 3, 32, 32));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % k;
            let mut img = images.index_axis_mut(ndarray::Axis(0), i);
            for v in img.iter_mut() {
                *v = rng.random::<f32>() * 0.2;
            }
            let (y0, x0) = ((class / 2) * 14 + 2, (class % 2) * 14 + 2);
            img.slice_mut(s![.., y0..y0 + 12, x0..x0 + 12]).fill(0.9);
            labels.push(class);
        }
        LabeledDataset {
            images,
            labels,
            class_names: (0..k).map(|c| format!("c{c}")).collect(),
        }
    }

    fn quick_spec(backbone: &str, k: usize) -> ClassifierSpec {
        ClassifierSpec {
            backbone_id: backbone.to_string(),
            num_classes: k,
            input_shape: [3, 32, 32],
            epochs: 3,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 7,
        }
    }

    #[test]
    fn prediction_rows_are_distributions_for_all_backbones() {
        for backbone in BACKBONE_IDS {
            let mut m = ClassifierModel::new(quick_spec(backbone, 4), vec![]).unwrap();
            let x = Array4::<f32>::from_elem((5, 3, 32, 32), 0.3);
            let p = m.predict(&x).unwrap();
            assert_eq!(p.dim(), (5, 4));
            for row in p.rows() {
                let s: f32 = row.sum();
                assert!((s - 1.0).abs() < 1e-5, "{backbone}: row sum {s}");
                assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            }
            // identical inputs give identical rows
            let r0: Vec<f32> = p.row(0).to_vec();
            let r1: Vec<f32> = p.row(1).to_vec();
            assert_eq!(r0, r1, "{backbone}: duplicate images must agree");
        }
    }

    #[test]
    fn memorizes_a_single_example() {
        let ds = toy_dataset(2, 2, 1);
        let one = LabeledDataset {
            images: ds.images.slice(s![0..1, .., .., ..]).to_owned(),
            labels: vec![ds.labels[0]],
            class_names: ds.class_names.clone(),
        };
        let mut spec = quick_spec("small-cnn", 2);
        spec.epochs = 25;
        spec.batch_size = 1;
        let (mut model, _) = train_classifier(&one, &one, &spec).unwrap();
        let pred = model.predict_classes(&one.images).unwrap();
        assert_eq!(pred, one.labels, "1-example training must memorize");
    }

    #[test]
    fn training_learns_separable_toy_data_and_is_deterministic() {
        let train = toy_dataset(64, 4, 2);
        let val = toy_dataset(16, 4, 3);
        let spec = quick_spec("small-cnn", 4);
        let (mut m1, log1) = train_classifier(&train, &val, &spec).unwrap();
        let report = evaluate_accuracy(&mut m1, &val).unwrap();
        assert!(report.overall >= 0.9, "toy accuracy {}", report.overall);
        assert_eq!(report.per_class.len(), 4);
        assert!(report.per_class.iter().all(|c| c.is_some()));
        // fixed seed, fixed backend: identical validation curves
        let (_, log2) = train_classifier(&train, &val, &spec).unwrap();
        for (a, b) in log1.entries.iter().zip(&log2.entries) {
            assert!((a.val_accuracy - b.val_accuracy).abs() < 1e-6);
            assert!((a.train_loss - b.train_loss).abs() < 1e-6);
        }
    }

    #[test]
    fn label_out_of_range_fails_before_training() {
        let mut ds = toy_dataset(8, 2, 4);
        ds.labels[3] = 9;
        let spec = quick_spec("small-cnn", 2);
        match train_classifier(&ds, &ds, &spec) {
            Err(ModelsError::LabelOutOfRange { label: 9, num_classes: 2 }) => {}
            other => panic!("expected label error, got {other:?}"),
        }
    }

    #[test]
    fn per_class_accuracy_handles_missing_classes() {
        let mut ds = toy_dataset(8, 2, 5);
        // drop class 1 examples by relabeling the dataset subset
        let keep: Vec<usize> = (0..8).filter(|i| ds.labels[*i] == 0).collect();
        let (images, labels) = ds.gather(&keep);
        ds.images = images;
        ds.labels = labels;
        let mut m = ClassifierModel::new(quick_spec("small-cnn", 2), vec![]).unwrap();
        let report = evaluate_accuracy(&mut m, &ds).unwrap();
        assert!(report.per_class[0].is_some());
        assert!(report.per_class[1].is_none(), "absent class is undefined, not zero");
    }

    #[test]
    fn feature_taps_validate_names_and_preserve_order() {
        let mut m = ClassifierModel::new(quick_spec("small-cnn", 3), vec![]).unwrap();
        match FeatureExtractor::new(&m, vec!["nope".to_string()]) {
            Err(ModelsError::UnknownTapLayer { name, valid }) => {
                assert_eq!(name, "nope");
                assert!(valid.contains(&"relu4".to_string()));
            }
            other => panic!("expected tap error, got {other:?}"),
        }
        let fx = FeatureExtractor::new(&m, vec!["relu2".to_string(), "relu4".to_string()]).unwrap();
        let x = Array4::<f32>::from_elem((2, 3, 32, 32), 0.5);
        let feats = fx.extract(&mut m, &x).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(feats[0].dim(), (2, 32, 16, 16));
        assert_eq!(feats[1].dim(), (2, 64, 4, 4));
        // identical inputs -> identical features
        let f0 = feats[0].index_axis(ndarray::Axis(0), 0);
        let f1 = feats[0].index_axis(ndarray::Axis(0), 1);
        assert_eq!(f0, f1);
        // default tap is the last conv map before pooling
        assert_eq!(FeatureExtractor::default_for(&m).tap_layers, vec!["relu4"]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let train = toy_dataset(16, 2, 6);
        let mut spec = quick_spec("small-cnn", 2);
        spec.epochs = 1;
        let (mut model, _) = train_classifier(&train, &train, &spec).unwrap();
        let path = dir.path().join("clf.ckpt");
        model.save(&path).unwrap();
        let mut loaded = ClassifierModel::load(&path).unwrap();
        let probe = toy_dataset(4, 2, 7).images;
        let p1 = model.predict(&probe).unwrap();
        let p2 = loaded.predict(&probe).unwrap();
        let bits = |a: &Array2<f32>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p1), bits(&p2), "round trip must be bit-identical");
        assert_eq!(loaded.class_names, model.class_names);
    }

    #[test]
    fn checkpoint_consistency_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = ClassifierModel::new(quick_spec("small-cnn", 3), vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let path = dir.path().join("clf.ckpt");
        m.save(&path).unwrap();
        // tamper: change num_classes in the manifest (keeps tensor table intact)
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replace("meta num_classes 3", "meta num_classes 4");
        std::fs::write(&path, tampered).unwrap();
        match ClassifierModel::load(&path) {
            Err(ModelsError::InconsistentCheckpoint(msg)) => {
                assert!(msg.contains("class names") || msg.contains("shape"), "{msg}");
            }
            other => panic!("expected consistency error, got {other:?}"),
        }
    }

    #[test]
    fn backbones_are_architecturally_distinct() {
        let small = ClassifierModel::new(quick_spec("small-cnn", 10), vec![]).unwrap();
        let residual = ClassifierModel::new(quick_spec("deep-residual", 10), vec![]).unwrap();
        let inception = ClassifierModel::new(quick_spec("inception-style", 10), vec![]).unwrap();
        assert_ne!(small.layer_names(), residual.layer_names());
        assert_ne!(residual.layer_names(), inception.layer_names());
        for m in [&small, &residual, &inception] {
            let trace = m.shape_trace();
            assert_eq!(trace.last().unwrap().1, [10, 1, 1]);
            assert!(m.count_trainable_params() > 0);
        }
    }
}
