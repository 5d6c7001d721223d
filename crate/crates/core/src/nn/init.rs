//! Weight initialization. Box–Muller normal sampling keeps the generated
//! sequence identical across `rand` versions and float widths.

use super::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He/Kaiming normal: std = sqrt(2 / fan_in). Classifier default.
    HeNormal,
    /// Fixed-std normal. GAN convolutions use `Normal(0.02)`.
    Normal(f64),
    Zero,
}

/// Fill a slice with N(0, std) samples drawn via Box–Muller.
pub fn normal_fill<T: Scalar>(slice: &mut [T], std: f64, rng: &mut ChaCha8Rng) {
    let mut i = 0;
    while i < slice.len() {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        slice[i] = T::from_f64(r * c * std);
        i += 1;
        if i < slice.len() {
            slice[i] = T::from_f64(r * s * std);
            i += 1;
        }
    }
}

impl Init {
    pub fn fill<T: Scalar>(self, slice: &mut [T], fan_in: usize, rng: &mut ChaCha8Rng) {
        match self {
            Init::HeNormal => normal_fill(slice, (2.0 / fan_in.max(1) as f64).sqrt(), rng),
            Init::Normal(std) => normal_fill(slice, std, rng),
            Init::Zero => slice.iter_mut().for_each(|v| *v = T::zero()),
        }
    }
}
