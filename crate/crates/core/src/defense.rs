//! GAN purifier: an encoder/decoder generator with self-attention that maps
//! patched images back to clean ones, a small convolutional discriminator,
//! the combined loss system (adversarial + reconstruction + perceptual +
//! classification), adversarial training against randomly patched images,
//! SSIM, and SSIM-gated checkpoint selection.
//!
//! Both networks emit raw logits from their final linear stage; the output
//! sigmoid of the discriminator is applied functionally so that probability
//! losses can seed gradients in logit space, which is exact even when the
//! discriminator saturates. The generator keeps its sigmoid as a layer since
//! its output is an image, not a probability.

use crate::data::{make_random_patched, LabeledDataset, PairedDataset, RandomPatchSpec};
use crate::io::{StoreError, TensorStore};
use crate::models::{evaluate_accuracy, ClassifierModel, FeatureExtractor, ModelsError};
use crate::nn::{
    log_softmax_rows, softmax_rows, Adam, Conv2d, ConvTranspose2d, Flatten, Init, LeakyRelu,
    Linear, Mode, Relu, Scalar, SelfAttention2d, Sequential, Sigmoid,
};
use ndarray::{Array2, Array4, ArrayD, ArrayView3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before entering a logarithm.
pub const EPS: f64 = 1e-7;

/// A checkpoint qualifies for deployment only above this mean SSIM.
pub const SSIM_GATE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("empty input to a probability loss")]
    EmptyInput,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("input shape {shape:?} not buildable: {detail}")]
    UnreachableShape { shape: [usize; 3], detail: String },
    #[error("non-finite {component} loss component")]
    NonFinite { component: &'static str },
    #[error("negative loss weight {name} = {value}")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("no checkpoint passes the SSIM > {gate} gate")]
    NoQualifyingGenerator { gate: f64 },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error(
        "training diverged: non-finite losses in {count} consecutive batches \
         (last at epoch {epoch}, batch {batch}); {diagnostics}"
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        count: usize,
        diagnostics: String,
    },
    #[error(transparent)]
    Models(#[from] ModelsError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("inconsistent generator checkpoint: {0}")]
    InconsistentCheckpoint(String),
}

/// Geometry policy for the network builders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildMode {
    /// Only the reference `(3, 32, 32)` geometry is accepted.
    Fidelity,
    /// Any geometry the stride-2/kernel-4 plan can round-trip is accepted.
    Experimental,
}

/// Reference channel widths of the two convolutional stages.
pub const REFERENCE_WIDTHS: (usize, usize) = (64, 128);

fn validate_geometry(shape: [usize; 3], mode: BuildMode) -> Result<(), DefenseError> {
    let [c, h, w] = shape;
    if mode == BuildMode::Fidelity && shape != [3, 32, 32] {
        return Err(DefenseError::UnreachableShape {
            shape,
            detail: "fidelity mode accepts (3, 32, 32) only".to_string(),
        });
    }
    if c == 0 {
        return Err(DefenseError::UnreachableShape {
            shape,
            detail: "zero channels".to_string(),
        });
    }
    if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
        return Err(DefenseError::UnreachableShape {
            shape,
            detail: "two stride-2 stages need sides that are multiples of 4, at least 8"
                .to_string(),
        });
    }
    Ok(())
}

/// The purifier layer stack at an arbitrary channel width.
///
/// `widths = (64, 128)` is the reference configuration; the gradient tests
/// build the same topology at `(8, 16)` in double precision. Both widths
/// must be divisible by 8 for the attention query/key reduction.
pub fn generator_net<T: Scalar>(in_channels: usize, widths: (usize, usize), seed: u64) -> Sequential<T> {
    let (w1, w2) = widths;
    assert!(w1 % 8 == 0 && w2 % 8 == 0, "attention needs widths divisible by 8");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Sequential::new();
    g.push("enc1", Conv2d::new("g.enc1", in_channels, w1, 4, 2, 1, Init::HeNormal, &mut rng));
    g.push("enc1_relu", Relu::new());
    g.push("attn1", SelfAttention2d::new("g.attn1", w1, &mut rng));
    g.push("enc2", Conv2d::new("g.enc2", w1, w2, 4, 2, 1, Init::HeNormal, &mut rng));
    g.push("enc2_relu", Relu::new());
    g.push("attn2", SelfAttention2d::new("g.attn2", w2, &mut rng));
    g.push("dec1", ConvTranspose2d::new("g.dec1", w2, w1, 4, 2, 1, Init::HeNormal, &mut rng));
    g.push("dec1_relu", Relu::new());
    g.push("attn3", SelfAttention2d::new("g.attn3", w1, &mut rng));
    g.push("dec2", ConvTranspose2d::new("g.dec2", w1, in_channels, 4, 2, 1, Init::HeNormal, &mut rng));
    g.push("out", Sigmoid::new());
    g
}

/// The discriminator layer stack, ending at a single raw logit per image.
pub fn discriminator_net<T: Scalar>(
    input_shape: [usize; 3],
    widths: (usize, usize),
    seed: u64,
) -> Sequential<T> {
    let [c, h, w] = input_shape;
    let (w1, w2) = widths;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Sequential::new();
    d.push("conv1", Conv2d::new("d.conv1", c, w1, 4, 2, 1, Init::HeNormal, &mut rng));
    d.push("lrelu1", LeakyRelu::new(0.2));
    d.push("conv2", Conv2d::new("d.conv2", w1, w2, 4, 2, 1, Init::HeNormal, &mut rng));
    d.push("lrelu2", LeakyRelu::new(0.2));
    d.push("flatten", Flatten::new());
    d.push("fc", Linear::new("d.fc", w2 * (h / 4) * (w / 4), 1, Init::HeNormal, &mut rng));
    d
}

/// The purification generator.
pub struct GeneratorModel {
    pub(crate) net: Sequential<f32>,
    input_shape: [usize; 3],
    widths: (usize, usize),
}

/// The real/reconstructed discriminator.
pub struct DiscriminatorModel {
    pub(crate) net: Sequential<f32>,
    input_shape: [usize; 3],
    widths: (usize, usize),
}

pub fn build_generator(
    input_shape: [usize; 3],
    mode: BuildMode,
    seed: u64,
) -> Result<GeneratorModel, DefenseError> {
    validate_geometry(input_shape, mode)?;
    Ok(GeneratorModel {
        net: generator_net(input_shape[0], REFERENCE_WIDTHS, seed),
        input_shape,
        widths: REFERENCE_WIDTHS,
    })
}

pub fn build_discriminator(
    input_shape: [usize; 3],
    mode: BuildMode,
    seed: u64,
) -> Result<DiscriminatorModel, DefenseError> {
    validate_geometry(input_shape, mode)?;
    Ok(DiscriminatorModel {
        net: discriminator_net(input_shape, REFERENCE_WIDTHS, seed),
        input_shape,
        widths: REFERENCE_WIDTHS,
    })
}

fn check_batch_shape(
    batch: &Array4<f32>,
    expected: [usize; 3],
) -> Result<(), DefenseError> {
    let (_, c, h, w) = batch.dim();
    if [c, h, w] != expected {
        return Err(DefenseError::ShapeMismatch {
            expected: expected.to_vec(),
            got: vec![c, h, w],
        });
    }
    Ok(())
}

impl GeneratorModel {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn widths(&self) -> (usize, usize) {
        self.widths
    }

    pub fn shape_trace(&self) -> Vec<(String, [usize; 3])> {
        self.net.shape_trace(self.input_shape)
    }

    pub fn count_trainable_params(&self) -> usize {
        self.net
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Reconstruct a batch. Output has the input's shape with every value in
    /// the open interval (0, 1); bit-identical for fixed weights and input.
    pub fn purify(&mut self, batch: &Array4<f32>) -> Result<Array4<f32>, DefenseError> {
        check_batch_shape(batch, self.input_shape)?;
        let n = batch.dim().0;
        let mut out = Array4::<f32>::zeros(batch.raw_dim());
        let chunk = 64;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let part = batch.slice(ndarray::s![start..end, .., .., ..]).to_owned();
            let y = self.net.forward(part, Mode::Infer);
            out.slice_mut(ndarray::s![start..end, .., .., ..]).assign(&y);
            start = end;
        }
        self.net.clear_cache();
        Ok(out)
    }

    pub fn save(&self, path: &Path, meta: &SavedGanMeta) -> Result<(), DefenseError> {
        save_net(&self.net, "generator", self.input_shape, self.widths, meta, path)
    }

    pub fn load(path: &Path) -> Result<(Self, SavedGanMeta), DefenseError> {
        let (store, input_shape, widths, meta) = load_net_header(path, "generator")?;
        let mut model = GeneratorModel {
            net: generator_net(input_shape[0], widths, 0),
            input_shape,
            widths,
        };
        fill_net_params(&mut model.net, &store)?;
        Ok((model, meta))
    }
}

impl DiscriminatorModel {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn shape_trace(&self) -> Vec<(String, [usize; 3])> {
        self.net.shape_trace(self.input_shape)
    }

    pub fn flatten_width(&self) -> usize {
        self.widths.1 * (self.input_shape[1] / 4) * (self.input_shape[2] / 4)
    }

    pub fn count_trainable_params(&self) -> usize {
        self.net
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Probability that each image is real, strictly inside (0, 1).
    pub fn discriminate(&mut self, batch: &Array4<f32>) -> Result<Vec<f32>, DefenseError> {
        check_batch_shape(batch, self.input_shape)?;
        let z = self.net.forward(batch.clone(), Mode::Infer);
        self.net.clear_cache();
        Ok(z.iter().map(|&v| sigmoid_f64(v as f64) as f32).collect())
    }

    pub fn save(&self, path: &Path, meta: &SavedGanMeta) -> Result<(), DefenseError> {
        save_net(&self.net, "discriminator", self.input_shape, self.widths, meta, path)
    }

    pub fn load(path: &Path) -> Result<(Self, SavedGanMeta), DefenseError> {
        let (store, input_shape, widths, meta) = load_net_header(path, "discriminator")?;
        let mut model = DiscriminatorModel {
            net: discriminator_net(input_shape, widths, 0),
            input_shape,
            widths,
        };
        fill_net_params(&mut model.net, &store)?;
        Ok((model, meta))
    }
}

/// Metadata stored with generator/discriminator checkpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SavedGanMeta {
    pub epoch: usize,
    pub val_ssim: f64,
    pub val_accuracy: f64,
    pub weights: LossWeights,
}

fn save_net(
    net: &Sequential<f32>,
    kind: &str,
    input_shape: [usize; 3],
    widths: (usize, usize),
    meta: &SavedGanMeta,
    path: &Path,
) -> Result<(), DefenseError> {
    let mut store = TensorStore::new();
    store.set_meta("kind", kind);
    store.set_meta(
        "input_shape",
        format!("{},{},{}", input_shape[0], input_shape[1], input_shape[2]),
    );
    store.set_meta("widths", format!("{},{}", widths.0, widths.1));
    store.set_meta("epoch", meta.epoch.to_string());
    store.set_meta("val_ssim", format!("{}", meta.val_ssim));
    store.set_meta("val_accuracy", format!("{}", meta.val_accuracy));
    store.set_meta("w_adv", format!("{}", meta.weights.adv));
    store.set_meta("w_recon", format!("{}", meta.weights.recon));
    store.set_meta("w_percep", format!("{}", meta.weights.percep));
    store.set_meta("w_class", format!("{}", meta.weights.class));
    for p in net.params() {
        store.push(&p.name, p.value.shape().to_vec(), p.value.iter().copied().collect());
    }
    store.save(path)?;
    Ok(())
}

fn parse_meta_f64(store: &TensorStore, key: &str) -> Result<f64, DefenseError> {
    store
        .meta(key)?
        .parse::<f64>()
        .map_err(|_| DefenseError::InconsistentCheckpoint(format!("meta {key} is not a number")))
}

fn load_net_header(
    path: &Path,
    kind: &str,
) -> Result<(TensorStore, [usize; 3], (usize, usize), SavedGanMeta), DefenseError> {
    let store = TensorStore::load(path)?;
    if store.meta("kind")? != kind {
        return Err(DefenseError::InconsistentCheckpoint(format!(
            "expected a {kind} checkpoint, found kind {}",
            store.meta("kind")?
        )));
    }
    let dims: Vec<usize> = store
        .meta("input_shape")?
        .split(',')
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| DefenseError::InconsistentCheckpoint("bad input_shape meta".to_string()))?;
    let ws: Vec<usize> = store
        .meta("widths")?
        .split(',')
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| DefenseError::InconsistentCheckpoint("bad widths meta".to_string()))?;
    if dims.len() != 3 || ws.len() != 2 {
        return Err(DefenseError::InconsistentCheckpoint(
            "malformed shape metadata".to_string(),
        ));
    }
    let epoch = store
        .meta("epoch")?
        .parse::<usize>()
        .map_err(|_| DefenseError::InconsistentCheckpoint("bad epoch meta".to_string()))?;
    let meta = SavedGanMeta {
        epoch,
        val_ssim: parse_meta_f64(&store, "val_ssim")?,
        val_accuracy: parse_meta_f64(&store, "val_accuracy")?,
        weights: LossWeights {
            adv: parse_meta_f64(&store, "w_adv")?,
            recon: parse_meta_f64(&store, "w_recon")?,
            percep: parse_meta_f64(&store, "w_percep")?,
            class: parse_meta_f64(&store, "w_class")?,
        },
    };
    Ok((store, [dims[0], dims[1], dims[2]], (ws[0], ws[1]), meta))
}

fn fill_net_params(net: &mut Sequential<f32>, store: &TensorStore) -> Result<(), DefenseError> {
    let expected = net.params().len();
    if store.tensors().len() != expected {
        return Err(DefenseError::InconsistentCheckpoint(format!(
            "checkpoint has {} tensors, architecture has {expected} parameters",
            store.tensors().len()
        )));
    }
    for p in net.params_mut() {
        let entry = store.get(&p.name)?;
        if entry.shape != p.value.shape() {
            return Err(DefenseError::InconsistentCheckpoint(format!(
                "tensor {} has shape {:?}, architecture expects {:?}",
                p.name,
                entry.shape,
                p.value.shape()
            )));
        }
        p.value = ArrayD::from_shape_vec(p.value.raw_dim(), entry.data.clone()).unwrap();
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Loss system
// ---------------------------------------------------------------------------

/// Weights of the four generator loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub recon: f64,
    pub percep: f64,
    pub class: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { adv: 1.0, recon: 10.0, percep: 0.1, class: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DefenseError> {
        for (name, value) in [
            ("adv", self.adv),
            ("recon", self.recon),
            ("percep", self.percep),
            ("class", self.class),
        ] {
            if !(value >= 0.0) {
                return Err(DefenseError::NegativeWeight { name, value });
            }
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-1/2 [ mean ln d_real + mean ln (1 - d_fake) ]`.
pub fn discriminator_loss<T: Scalar>(d_real: &[T], d_fake: &[T]) -> Result<f64, DefenseError> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(DefenseError::EmptyInput);
    }
    let mr: f64 = d_real.iter().map(|&p| clamp_prob(p.to_f64()).ln()).sum::<f64>()
        / d_real.len() as f64;
    let mf: f64 = d_fake
        .iter()
        .map(|&p| (1.0 - clamp_prob(p.to_f64())).ln())
        .sum::<f64>()
        / d_fake.len() as f64;
    Ok(-0.5 * (mr + mf))
}

/// `-mean ln d_fake` — how far the generator is from fooling the critic.
pub fn generator_adv_loss<T: Scalar>(d_fake: &[T]) -> Result<f64, DefenseError> {
    if d_fake.is_empty() {
        return Err(DefenseError::EmptyInput);
    }
    Ok(-d_fake.iter().map(|&p| clamp_prob(p.to_f64()).ln()).sum::<f64>() / d_fake.len() as f64)
}

/// Mean squared pixel difference.
pub fn recon_loss<T: Scalar>(recon: &Array4<T>, clean: &Array4<T>) -> Result<f64, DefenseError> {
    if recon.dim() != clean.dim() {
        return Err(DefenseError::ShapeMismatch {
            expected: clean.shape().to_vec(),
            got: recon.shape().to_vec(),
        });
    }
    if recon.is_empty() {
        return Err(DefenseError::EmptyInput);
    }
    let mut sum = 0.0f64;
    for (&a, &b) in recon.iter().zip(clean.iter()) {
        let d = a.to_f64() - b.to_f64();
        sum += d * d;
    }
    Ok(sum / recon.len() as f64)
}

/// Sum over tap layers of the mean squared feature difference.
pub fn percep_loss(
    model: &mut ClassifierModel,
    extractor: &FeatureExtractor,
    recon: &Array4<f32>,
    clean: &Array4<f32>,
) -> Result<f64, DefenseError> {
    if recon.dim() != clean.dim() {
        return Err(DefenseError::ShapeMismatch {
            expected: clean.shape().to_vec(),
            got: recon.shape().to_vec(),
        });
    }
    let feats_clean = extractor.extract(model, clean)?;
    let feats_recon = extractor.extract(model, recon)?;
    let mut total = 0.0f64;
    for (fr, fc) in feats_recon.iter().zip(&feats_clean) {
        let mut sum = 0.0f64;
        for (a, b) in fr.iter().zip(fc.iter()) {
            let d = (*a - *b) as f64;
            sum += d * d;
        }
        total += sum / fr.len() as f64;
    }
    Ok(total)
}

/// Mean negative log-probability of the true label on reconstructed images.
pub fn class_loss(
    model: &mut ClassifierModel,
    recon: &Array4<f32>,
    labels: &[usize],
) -> Result<f64, DefenseError> {
    let k = model.num_classes();
    for &l in labels {
        if l >= k {
            return Err(DefenseError::LabelOutOfRange { label: l, num_classes: k });
        }
    }
    if labels.len() != recon.dim().0 {
        return Err(DefenseError::ShapeMismatch {
            expected: vec![recon.dim().0],
            got: vec![labels.len()],
        });
    }
    if labels.is_empty() {
        return Err(DefenseError::EmptyInput);
    }
    let probs = model.predict(recon)?;
    let mut sum = 0.0f64;
    for (i, &l) in labels.iter().enumerate() {
        sum -= clamp_prob(probs[(i, l)] as f64).ln();
    }
    Ok(sum / labels.len() as f64)
}

/// Weighted sum of the four components.
pub fn total_generator_loss(
    adv: f64,
    recon: f64,
    percep: f64,
    class: f64,
    w: &LossWeights,
) -> Result<f64, DefenseError> {
    for (name, value) in [
        ("adv", adv),
        ("recon", recon),
        ("percep", percep),
        ("class", class),
    ] {
        if !value.is_finite() {
            return Err(DefenseError::NonFinite { component: name });
        }
    }
    w.validate()?;
    Ok(w.adv * adv + w.recon * recon + w.percep * percep + w.class * class)
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

const SSIM_WINDOW: usize = 11;
const SSIM_C1: f64 = 1e-4; // (K1 * L)^2 with K1 = 0.01, L = 1
const SSIM_C2: f64 = 9e-4; // (K2 * L)^2 with K2 = 0.03, L = 1

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let sigma = 1.5f64;
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter: `(H, W)` to `(H-10, W-10)`.
fn blur_valid(plane: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let wo = w - (SSIM_WINDOW - 1);
    let mut horiz = Array2::<f64>::zeros((h, wo));
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * plane[(y, x + i)];
            }
            horiz[(y, x)] = acc;
        }
    }
    let ho = h - (SSIM_WINDOW - 1);
    let mut out = Array2::<f64>::zeros((ho, wo));
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + i, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

fn ssim_from_moments(ma: f64, mb: f64, eaa: f64, ebb: f64, eab: f64) -> f64 {
    let va = eaa - ma * ma;
    let vb = ebb - mb * mb;
    let cov = eab - ma * mb;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean structural similarity between two `(C, H, W)` images in `[0, 1]`.
///
/// Uses an 11-tap Gaussian window (sigma 1.5) in valid mode, averaged over
/// window positions and channels. Images smaller than the window fall back
/// to a single set of global statistics per channel.
pub fn compute_ssim(a: ArrayView3<'_, f32>, b: ArrayView3<'_, f32>) -> Result<f64, DefenseError> {
    if a.dim() != b.dim() {
        return Err(DefenseError::ShapeMismatch {
            expected: b.shape().to_vec(),
            got: a.shape().to_vec(),
        });
    }
    let (c, h, w) = a.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(DefenseError::EmptyInput);
    }
    let kernel = ssim_kernel();
    let mut channel_sum = 0.0f64;
    for ci in 0..c {
        let pa = a.index_axis(Axis(0), ci).mapv(|v| v as f64);
        let pb = b.index_axis(Axis(0), ci).mapv(|v| v as f64);
        if h < SSIM_WINDOW || w < SSIM_WINDOW {
            let n = (h * w) as f64;
            let ma = pa.sum() / n;
            let mb = pb.sum() / n;
            let eaa = pa.iter().map(|v| v * v).sum::<f64>() / n;
            let ebb = pb.iter().map(|v| v * v).sum::<f64>() / n;
            let eab = pa.iter().zip(pb.iter()).map(|(x, y)| x * y).sum::<f64>() / n;
            channel_sum += ssim_from_moments(ma, mb, eaa, ebb, eab);
        } else {
            let ma = blur_valid(&pa, &kernel);
            let mb = blur_valid(&pb, &kernel);
            let eaa = blur_valid(&(&pa * &pa), &kernel);
            let ebb = blur_valid(&(&pb * &pb), &kernel);
            let eab = blur_valid(&(&pa * &pb), &kernel);
            let mut sum = 0.0;
            for ((ya, xa), &m1) in ma.indexed_iter() {
                sum += ssim_from_moments(m1, mb[(ya, xa)], eaa[(ya, xa)], ebb[(ya, xa)], eab[(ya, xa)]);
            }
            channel_sum += sum / ma.len() as f64;
        }
    }
    Ok(channel_sum / c as f64)
}

/// Batch mean of per-image SSIM.
pub fn mean_ssim(a: &Array4<f32>, b: &Array4<f32>) -> Result<f64, DefenseError> {
    if a.dim() != b.dim() {
        return Err(DefenseError::ShapeMismatch {
            expected: b.shape().to_vec(),
            got: a.shape().to_vec(),
        });
    }
    let n = a.dim().0;
    if n == 0 {
        return Err(DefenseError::EmptyInput);
    }
    let mut sum = 0.0;
    for i in 0..n {
        sum += compute_ssim(a.index_axis(Axis(0), i), b.index_axis(Axis(0), i))?;
    }
    Ok(sum / n as f64)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Scalar components of one generator update, already batch-averaged.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorLosses {
    pub adv: f64,
    pub recon: f64,
    pub percep: f64,
    pub class: f64,
    pub total: f64,
}

/// One discriminator update: forward on real then reconstructed images,
/// seeding the loss gradient directly in logit space. Leaves fresh gradients
/// in `d`'s parameters and returns the loss value.
pub fn discriminator_backward_pass<T: Scalar>(
    d: &mut Sequential<T>,
    real: &Array4<T>,
    fake: &Array4<T>,
) -> f64 {
    let nr = real.dim().0 as f64;
    let nf = fake.dim().0 as f64;
    d.zero_grad();
    let zr = d.forward(real.clone(), Mode::Train);
    let pr: Vec<f64> = zr.iter().map(|&z| sigmoid_f64(z.to_f64())).collect();
    let seed_r = zr.mapv(|z| T::from_f64(-(1.0 - sigmoid_f64(z.to_f64())) / (2.0 * nr)));
    d.backward(seed_r, true);
    let zf = d.forward(fake.clone(), Mode::Train);
    let pf: Vec<f64> = zf.iter().map(|&z| sigmoid_f64(z.to_f64())).collect();
    let seed_f = zf.mapv(|z| T::from_f64(sigmoid_f64(z.to_f64()) / (2.0 * nf)));
    d.backward(seed_f, true);
    let mr = pr.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / nr;
    let mf = pf.iter().map(|&p| (1.0 - clamp_prob(p)).ln()).sum::<f64>() / nf;
    -0.5 * (mr + mf)
}

/// One generator update: forward the generator, seed all four loss pathways
/// (adversarial through the discriminator, pixel reconstruction, perceptual
/// feature taps and classification through the frozen classifier), and
/// backpropagate the sum into the generator's parameter gradients.
///
/// The classifier runs in inference mode and the backward sweeps through it
/// and the discriminator propagate input gradients only — neither network's
/// parameter gradients are written, so both stay exactly as the caller left
/// them.
#[allow(clippy::too_many_arguments)]
pub fn generator_backward_pass<T: Scalar>(
    g: &mut Sequential<T>,
    d: &mut Sequential<T>,
    cls: &mut Sequential<T>,
    cls_taps: &[String],
    num_classes: usize,
    patched: &Array4<T>,
    clean: &Array4<T>,
    labels: &[usize],
    w: &LossWeights,
) -> GeneratorLosses {
    let n = patched.dim().0;
    assert_eq!(labels.len(), n, "one label per image");
    let fake = g.forward(patched.clone(), Mode::Train);

    // pixel reconstruction
    let numel = fake.len() as f64;
    let mut recon = 0.0f64;
    let mut dfake = Array4::<T>::zeros(fake.raw_dim());
    Zip::from(&mut dfake).and(&fake).and(clean).for_each(|d_, &f, &c| {
        let diff = f.to_f64() - c.to_f64();
        recon += diff * diff;
        *d_ = T::from_f64(w.recon * 2.0 * diff / numel);
    });
    recon /= numel;

    // perceptual + classification through the frozen classifier; clean-image
    // features must be captured before the reconstruction pass overwrites
    // the layer caches
    let (_, feats_clean) = cls.forward_collect(clean.clone(), Mode::Infer, cls_taps);
    let (logits4, feats_fake) = cls.forward_collect(fake.clone(), Mode::Infer, cls_taps);
    let logits: Array2<T> = logits4.into_shape_with_order((n, num_classes)).unwrap();
    let logp = log_softmax_rows(&logits);
    let mut class = 0.0f64;
    for (i, &l) in labels.iter().enumerate() {
        let lp = logp[(i, l)].to_f64().clamp(EPS.ln(), (1.0 - EPS).ln());
        class -= lp;
    }
    class /= n as f64;
    let mut dlogits = softmax_rows(&logits);
    for (i, &l) in labels.iter().enumerate() {
        dlogits[(i, l)] = dlogits[(i, l)] - T::one();
    }
    let scale = T::from_f64(w.class / n as f64);
    dlogits.mapv_inplace(|v| v * scale);
    let dlogits4 = dlogits.into_shape_with_order((n, num_classes, 1, 1)).unwrap();

    let mut percep = 0.0f64;
    let mut tap_grads: Vec<(String, Array4<T>)> = Vec::with_capacity(cls_taps.len());
    for (ti, (ff, fc)) in feats_fake.iter().zip(&feats_clean).enumerate() {
        let m = ff.len() as f64;
        let mut sum = 0.0f64;
        let mut grad = Array4::<T>::zeros(ff.raw_dim());
        Zip::from(&mut grad).and(ff).and(fc).for_each(|g_, &a, &b| {
            let diff = a.to_f64() - b.to_f64();
            sum += diff * diff;
            *g_ = T::from_f64(w.percep * 2.0 * diff / m);
        });
        percep += sum / m;
        tap_grads.push((cls_taps[ti].clone(), grad));
    }
    let dfake_cls = cls.backward_with_taps(dlogits4, &tap_grads, false);
    dfake += &dfake_cls;

    // adversarial feedback through the discriminator
    let zf = d.forward(fake.clone(), Mode::Train);
    let adv = zf
        .iter()
        .map(|&z| -clamp_prob(sigmoid_f64(z.to_f64())).ln())
        .sum::<f64>()
        / n as f64;
    let seed = zf.mapv(|z| T::from_f64(w.adv * (sigmoid_f64(z.to_f64()) - 1.0) / n as f64));
    let dfake_d = d.backward(seed, false);
    dfake += &dfake_d;

    g.zero_grad();
    g.backward(dfake, true);
    let total = w.adv * adv + w.recon * recon + w.percep * percep + w.class * class;
    GeneratorLosses { adv, recon, percep, class, total }
}

/// Per-epoch snapshot of the generator with its validation metrics.
#[derive(Debug, Clone)]
pub struct GeneratorCheckpoint {
    pub epoch: usize,
    pub weights: Vec<ArrayD<f32>>,
    pub val_ssim: f64,
    pub val_accuracy: f64,
}

/// Overwrite `g`'s parameters with a checkpoint snapshot.
pub fn restore_generator(g: &mut GeneratorModel, ckpt: &GeneratorCheckpoint) {
    let mut params = g.net.params_mut();
    assert_eq!(params.len(), ckpt.weights.len(), "checkpoint/architecture mismatch");
    for (p, wv) in params.iter_mut().zip(&ckpt.weights) {
        assert_eq!(p.value.shape(), wv.shape(), "parameter {} shape changed", p.name);
        p.value = wv.clone();
    }
}

/// Among checkpoints whose SSIM clears the gate, the one with the highest
/// validation accuracy; ties go to the earliest epoch.
pub fn select_best_generator(
    checkpoints: &[GeneratorCheckpoint],
) -> Result<&GeneratorCheckpoint, DefenseError> {
    let mut best: Option<&GeneratorCheckpoint> = None;
    for c in checkpoints {
        if c.val_ssim <= SSIM_GATE {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => {
                c.val_accuracy > b.val_accuracy
                    || (c.val_accuracy == b.val_accuracy && c.epoch < b.epoch)
            }
        };
        if better {
            best = Some(c);
        }
    }
    best.ok_or(DefenseError::NoQualifyingGenerator { gate: SSIM_GATE })
}

#[derive(Debug, Clone)]
pub struct GanConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Size range of the random validation patches stamped each epoch.
    pub val_patch_min: usize,
    pub val_patch_max: usize,
}

impl GanConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed,
            val_patch_min: 3,
            val_patch_max: 5,
        }
    }
}

/// Train the purifier against randomly patched images.
///
/// Builds the generator and discriminator at reference widths on the
/// classifier's input geometry, alternates one discriminator and one
/// generator step per batch, and evaluates the generator at the end of each
/// epoch on a freshly patched validation set (mean SSIM of reconstructions
/// against clean images, and classifier accuracy on the reconstructions).
/// The classifier is used frozen throughout.
pub fn train_gan(
    train: &PairedDataset,
    val: &LabeledDataset,
    classifier: &mut ClassifierModel,
    extractor: &FeatureExtractor,
    weights: &LossWeights,
    cfg: &GanConfig,
) -> Result<(GeneratorModel, DiscriminatorModel, Vec<GeneratorCheckpoint>), DefenseError> {
    let shape = classifier.input_shape();
    let mut g = build_generator(shape, BuildMode::Experimental, cfg.seed ^ 0x6a09_e667)?;
    let mut d = build_discriminator(shape, BuildMode::Experimental, cfg.seed ^ 0xbb67_ae85)?;
    let ckpts = train_gan_with(&mut g, &mut d, train, val, classifier, extractor, weights, cfg)?;
    Ok((g, d, ckpts))
}

/// [`train_gan`] with caller-supplied networks (used by tests to run scaled-
/// down widths and by resumed runs).
#[allow(clippy::too_many_arguments)]
pub fn train_gan_with(
    g: &mut GeneratorModel,
    d: &mut DiscriminatorModel,
    train: &PairedDataset,
    val: &LabeledDataset,
    classifier: &mut ClassifierModel,
    extractor: &FeatureExtractor,
    weights: &LossWeights,
    cfg: &GanConfig,
) -> Result<Vec<GeneratorCheckpoint>, DefenseError> {
    weights.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(DefenseError::EmptyInput);
    }
    let shape = classifier.input_shape();
    check_batch_shape(&train.patched, shape)?;
    check_batch_shape(&train.clean, shape)?;
    if val.image_shape() != shape {
        return Err(DefenseError::ShapeMismatch {
            expected: shape.to_vec(),
            got: val.image_shape().to_vec(),
        });
    }
    let k = classifier.num_classes();
    for &l in train.labels.iter().chain(&val.labels) {
        if l >= k {
            return Err(DefenseError::LabelOutOfRange { label: l, num_classes: k });
        }
    }

    let mut opt_g = Adam::<f32>::with_betas(cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::<f32>::with_betas(cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch_size = cfg.batch_size.clamp(1, train.len());
    let mut checkpoints = Vec::with_capacity(cfg.epochs);
    let mut consecutive_bad = 0usize;

    for epoch in 0..cfg.epochs {
        let mut sampler = crate::data::EpochSampler::new(train.len(), batch_size, &mut rng)
            .expect("batch size clamped to dataset size");
        let mut batch_index = 0usize;
        while let Some(idx) = sampler.next_indices() {
            let idx = idx.to_vec();
            let patched_b = train.patched.select(Axis(0), &idx);
            let clean_b = train.clean.select(Axis(0), &idx);
            let labels_b: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();

            // reconstructions for the discriminator step, treated as fixed
            let fake = g.net.forward(patched_b.clone(), Mode::Train);
            let d_loss = discriminator_backward_pass(&mut d.net, &clean_b, &fake);
            if d_loss.is_finite() {
                opt_d.step(&mut d.net.params_mut());
            }

            let losses = generator_backward_pass(
                &mut g.net,
                &mut d.net,
                classifier.net_mut(),
                &extractor.tap_layers,
                k,
                &patched_b,
                &clean_b,
                &labels_b,
                weights,
            );
            if losses.total.is_finite() {
                opt_g.step(&mut g.net.params_mut());
            }

            if d_loss.is_finite() && losses.total.is_finite() {
                consecutive_bad = 0;
            } else {
                consecutive_bad += 1;
                if consecutive_bad >= 3 {
                    return Err(DefenseError::Diverged {
                        epoch,
                        batch: batch_index,
                        count: consecutive_bad,
                        diagnostics: format!("d_loss {d_loss}, generator components {losses:?}"),
                    });
                }
            }
            batch_index += 1;
        }

        // fresh randomly patched validation set for this epoch
        let epoch_seed = cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let val_pairs = make_random_patched(
            val,
            &RandomPatchSpec {
                min_size: cfg.val_patch_min,
                max_size: cfg.val_patch_max,
                seed: epoch_seed,
            },
        );
        let purified = g.purify(&val_pairs.patched)?;
        let val_ssim = mean_ssim(&purified, &val_pairs.clean)?;
        let report = evaluate_accuracy(
            classifier,
            &LabeledDataset {
                images: purified,
                labels: val_pairs.labels.clone(),
                class_names: val.class_names.clone(),
            },
        )?;
        debug_assert!((-1.0..=1.0).contains(&val_ssim));
        checkpoints.push(GeneratorCheckpoint {
            epoch,
            weights: g.net.params().iter().map(|p| p.value.clone()).collect(),
            val_ssim,
            val_accuracy: report.overall,
        });
    }
    g.net.clear_cache();
    d.net.clear_cache();
    classifier.clear_cache();
    Ok(checkpoints)
}
