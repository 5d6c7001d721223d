//! Activations, dropout, batch normalization, pooling, and dense layers.

use super::{gemm_into, Init, Layer, Mode, Param, Scalar};
use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Default)]
pub struct Relu<T> {
    out: Option<Array4<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { out: None }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn forward(&mut self, mut x: Array4<T>, _mode: Mode) -> Array4<T> {
        x.mapv_inplace(|v| v.max(T::zero()));
        self.out = Some(x.clone());
        x
    }

    fn backward(&mut self, mut grad_out: Array4<T>, _accumulate: bool) -> Array4<T> {
        let out = self.out.as_ref().expect("relu backward before forward");
        grad_out.zip_mut_with(out, |g, &o| {
            if o <= T::zero() {
                *g = T::zero();
            }
        });
        grad_out
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![]
    }
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }
    fn clear_cache(&mut self) {
        self.out = None;
    }
}

#[derive(Clone)]
pub struct LeakyRelu<T> {
    pub slope: T,
    out: Option<Array4<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        Self {
            slope: T::from_f64(slope),
            out: None,
        }
    }
}

impl<T: Scalar> Layer<T> for LeakyRelu<T> {
    fn forward(&mut self, mut x: Array4<T>, _mode: Mode) -> Array4<T> {
        let s = self.slope;
        x.mapv_inplace(|v| if v > T::zero() { v } else { v * s });
        self.out = Some(x.clone());
        x
    }

    fn backward(&mut self, mut grad_out: Array4<T>, _accumulate: bool) -> Array4<T> {
        let out = self.out.as_ref().expect("leaky relu backward before forward");
        let s = self.slope;
        grad_out.zip_mut_with(out, |g, &o| {
            if o <= T::zero() {
                *g = *g * s;
            }
        });
        grad_out
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![]
    }
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }
    fn clear_cache(&mut self) {
        self.out = None;
    }
}

#[derive(Clone, Default)]
pub struct Sigmoid<T> {
    out: Option<Array4<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Self { out: None }
    }
}

impl<T: Scalar> Layer<T> for Sigmoid<T> {
    fn forward(&mut self, mut x: Array4<T>, _mode: Mode) -> Array4<T> {
        x.mapv_inplace(|v| T::one() / (T::one() + (-v).exp()));
        self.out = Some(x.clone());
        x
    }

    fn backward(&mut self, mut grad_out: Array4<T>, _accumulate: bool) -> Array4<T> {
        let out = self.out.as_ref().expect("sigmoid backward before forward");
        grad_out.zip_mut_with(out, |g, &o| *g = *g * o * (T::one() - o));
        grad_out
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![]
    }
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }
    fn clear_cache(&mut self) {
        self.out = None;
    }
}

/// Inverted dropout with its own seeded generator so training runs are
/// reproducible.
#[derive(Clone)]
pub struct Dropout<T> {
    pub p: f64,
    rng: ChaCha8Rng,
    mask: Option<Array4<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64, seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Dropout<T> {
    fn forward(&mut self, mut x: Array4<T>, mode: Mode) -> Array4<T> {
        if mode == Mode::Infer || self.p == 0.0 {
            self.mask = None;
            return x;
        }
        let keep = T::from_f64(1.0 - self.p);
        let scale = T::one() / keep;
        let mut mask = Array4::<T>::zeros(x.raw_dim());
        for m in mask.iter_mut() {
            if self.rng.random::<f64>() >= self.p {
                *m = scale;
            }
        }
        x *= &mask;
        self.mask = Some(mask);
        x
    }

    fn backward(&mut self, mut grad_out: Array4<T>, _accumulate: bool) -> Array4<T> {
        if let Some(mask) = &self.mask {
            grad_out *= mask;
        }
        grad_out
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![]
    }
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }
    fn clear_cache(&mut self) {
        self.mask = None;
    }
}

/// Per-channel batch normalization with running statistics for inference.
#[derive(Clone)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: T,
    pub eps: T,
    channels: usize,
    cache: Option<BnCache<T>>,
}

#[derive(Clone)]
struct BnCache<T> {
    xhat: Array4<T>,
    invstd: Array1<T>,
    // Train mode normalizes by batch statistics, so the backward couples all
    // positions of a channel; Infer mode is a fixed affine map per channel.
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Array1::from_elem(channels, T::one()).into_dyn()),
            beta: Param::new(format!("{name}.beta"), Array1::<T>::zeros(channels).into_dyn()),
            running_mean: Param::buffer(
                format!("{name}.running_mean"),
                Array1::<T>::zeros(channels).into_dyn(),
            ),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                Array1::from_elem(channels, T::one()).into_dyn(),
            ),
            momentum: T::from_f64(0.1),
            eps: T::from_f64(1e-5),
            channels,
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let m = T::from_f64((n * h * w) as f64);
        let gamma = self.gamma.value.view().into_shape_with_order(c).unwrap();
        let beta = self.beta.value.view().into_shape_with_order(c).unwrap();
        let mut out = x;
        match mode {
            Mode::Train => {
                let mut mean = Array1::<T>::zeros(c);
                let mut var = Array1::<T>::zeros(c);
                for ci in 0..c {
                    let plane = out.slice(ndarray::s![.., ci, .., ..]);
                    let mu = plane.sum() / m;
                    let v = plane.fold(T::zero(), |acc, &x| acc + (x - mu) * (x - mu)) / m;
                    mean[ci] = mu;
                    var[ci] = v;
                }
                let invstd = var.mapv(|v| T::one() / (v + self.eps).sqrt());
                for ci in 0..c {
                    let mut plane = out.slice_mut(ndarray::s![.., ci, .., ..]);
                    let (mu, is) = (mean[ci], invstd[ci]);
                    plane.mapv_inplace(|x| (x - mu) * is);
                }
                self.cache = Some(BnCache {
                    xhat: out.clone(),
                    invstd: invstd.clone(),
                    batch_stats: true,
                });
                // update running stats
                let mom = self.momentum;
                let rm = self.running_mean.value.as_slice_mut().unwrap();
                let rv = self.running_var.value.as_slice_mut().unwrap();
                for ci in 0..c {
                    rm[ci] = rm[ci] * (T::one() - mom) + mean[ci] * mom;
                    rv[ci] = rv[ci] * (T::one() - mom) + var[ci] * mom;
                }
                for ci in 0..c {
                    let (g, b) = (gamma[ci], beta[ci]);
                    let mut plane = out.slice_mut(ndarray::s![.., ci, .., ..]);
                    plane.mapv_inplace(|x| x * g + b);
                }
                out
            }
            Mode::Infer => {
                let rm = self.running_mean.value.view().into_shape_with_order(c).unwrap();
                let rv = self.running_var.value.view().into_shape_with_order(c).unwrap();
                let invstd = Array1::from_iter(
                    (0..c).map(|ci| T::one() / (rv[ci] + self.eps).sqrt()),
                );
                for ci in 0..c {
                    let (mu, is) = (rm[ci], invstd[ci]);
                    let mut plane = out.slice_mut(ndarray::s![.., ci, .., ..]);
                    plane.mapv_inplace(|x| (x - mu) * is);
                }
                self.cache = Some(BnCache {
                    xhat: out.clone(),
                    invstd,
                    batch_stats: false,
                });
                for ci in 0..c {
                    let (g, b) = (gamma[ci], beta[ci]);
                    let mut plane = out.slice_mut(ndarray::s![.., ci, .., ..]);
                    plane.mapv_inplace(|x| x * g + b);
                }
                out
            }
        }
    }

    fn backward(&mut self, grad_out: Array4<T>, accumulate: bool) -> Array4<T> {
        let cache = self.cache.as_ref().expect("batchnorm backward before forward");
        let (n, c, h, w) = grad_out.dim();
        let m = T::from_f64((n * h * w) as f64);
        let gamma = self.gamma.value.view().into_shape_with_order(c).unwrap();
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for ci in 0..c {
            let g_plane = grad_out.slice(ndarray::s![.., ci, .., ..]);
            let xhat = cache.xhat.slice(ndarray::s![.., ci, .., ..]);
            let sum_g = g_plane.sum();
            let sum_gx = g_plane
                .iter()
                .zip(xhat.iter())
                .fold(T::zero(), |acc, (&g, &x)| acc + g * x);
            let mut dst = dx.slice_mut(ndarray::s![.., ci, .., ..]);
            if cache.batch_stats {
                let coeff = gamma[ci] * cache.invstd[ci] / m;
                ndarray::Zip::from(&mut dst)
                    .and(&g_plane)
                    .and(&xhat)
                    .for_each(|d, &g, &x| {
                        *d = coeff * (g * m - sum_g - x * sum_gx);
                    });
            } else {
                let coeff = gamma[ci] * cache.invstd[ci];
                ndarray::Zip::from(&mut dst).and(&g_plane).for_each(|d, &g| {
                    *d = coeff * g;
                });
            }
            if accumulate {
                let gg = self.gamma.grad.as_slice_mut().unwrap();
                let bg = self.beta.grad.as_slice_mut().unwrap();
                gg[ci] += sum_gx;
                bg[ci] += sum_g;
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Average pooling with zero padding; the divisor is always `k*k`.
#[derive(Clone)]
pub struct AvgPool2d<T> {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    in_dims: Option<(usize, usize, usize, usize)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> AvgPool2d<T> {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            in_dims: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for AvgPool2d<T> {
    fn forward(&mut self, x: Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let oh = super::conv::conv_output_side(h, self.kernel, self.stride, self.pad);
        let ow = super::conv::conv_output_side(w, self.kernel, self.stride, self.pad);
        let norm = T::one() / T::from_f64((self.kernel * self.kernel) as f64);
        let mut out = Array4::<T>::zeros((n, c, oh, ow));
        for in_ in 0..n {
            for ci in 0..c {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut acc = T::zero();
                        for kh in 0..self.kernel {
                            for kw in 0..self.kernel {
                                let ih = (ohi * self.stride + kh) as isize - self.pad as isize;
                                let iw = (owi * self.stride + kw) as isize - self.pad as isize;
                                if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                                    acc += x[(in_, ci, ih as usize, iw as usize)];
                                }
                            }
                        }
                        out[(in_, ci, ohi, owi)] = acc * norm;
                    }
                }
            }
        }
        self.in_dims = Some((n, c, h, w));
        out
    }

    fn backward(&mut self, grad_out: Array4<T>, _accumulate: bool) -> Array4<T> {
        let (n, c, h, w) = self.in_dims.expect("avgpool backward before forward");
        let (_, _, oh, ow) = grad_out.dim();
        let norm = T::one() / T::from_f64((self.kernel * self.kernel) as f64);
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for in_ in 0..n {
            for ci in 0..c {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let g = grad_out[(in_, ci, ohi, owi)] * norm;
                        for kh in 0..self.kernel {
                            for kw in 0..self.kernel {
                                let ih = (ohi * self.stride + kh) as isize - self.pad as isize;
                                let iw = (owi * self.stride + kw) as isize - self.pad as isize;
                                if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                                    dx[(in_, ci, ih as usize, iw as usize)] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![]
    }
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        [
            input[0],
            super::conv::conv_output_side(input[1], self.kernel, self.stride, self.pad),
            super::conv::conv_output_side(input[2], self.kernel, self.stride, self.pad),
        ]
    }
}

/// Max pooling; backward routes each output gradient to the argmax cell
/// (first maximum wins on ties). Padded cells never win.
#[derive(Clone)]
pub struct MaxPool2d<T> {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<((usize, usize, usize, usize), Vec<usize>)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> MaxPool2d<T> {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for MaxPool2d<T> {
    fn forward(&mut self, x: Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let oh = super::conv::conv_output_side(h, self.kernel, self.stride, self.pad);
        let ow = super::conv::conv_output_side(w, self.kernel, self.stride, self.pad);
        let mut out = Array4::<T>::zeros((n, c, oh, ow));
        let mut argmax = vec![0usize; n * c * oh * ow];
        let mut flat = 0usize;
        for in_ in 0..n {
            for ci in 0..c {
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut best: Option<(T, usize)> = None;
                        for kh in 0..self.kernel {
                            for kw in 0..self.kernel {
                                let ih = (ohi * self.stride + kh) as isize - self.pad as isize;
                                let iw = (owi * self.stride + kw) as isize - self.pad as isize;
                                if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                                    let (ih, iw) = (ih as usize, iw as usize);
                                    let v = x[(in_, ci, ih, iw)];
                                    let src = ((in_ * c + ci) * h + ih) * w + iw;
                                    if best.map_or(true, |(b, _)| v > b) {
                                        best = Some((v, src));
                                    }
                                }
                            }
                        }
                        let (v, src) = best.expect("pooling window entirely outside input");
                        out[(in_, ci, ohi, owi)] = v;
                        argmax[flat] = src;
                        flat += 1;
                    }
                }
            }
        }
        self.cache = Some(((n, c, h, w), argmax));
        out
    }

    fn backward(&mut self, grad_out: Array4<T>, _accumulate: bool) -> Array4<T> {
        let ((n, c, h, w), argmax) =
            self.cache.as_ref().expect("maxpool backward before forward");
        let mut dx = Array4::<T>::zeros((*n, *c, *h, *w));
        let dx_flat = dx.as_slice_mut().expect("freshly allocated dx is contiguous");
        for (g, &src) in grad_out.iter().zip(argmax.iter()) {
            dx_flat[src] += *g;
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![]
    }
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        [
            input[0],
            super::conv::conv_output_side(input[1], self.kernel, self.stride, self.pad),
            super::conv::conv_output_side(input[2], self.kernel, self.stride, self.pad),
        ]
    }
    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Mean over the spatial grid: `(N, C, H, W)` -> `(N, C, 1, 1)`.
#[derive(Clone, Default)]
pub struct GlobalAvgPool<T> {
    in_dims: Option<(usize, usize, usize, usize)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> GlobalAvgPool<T> {
    pub fn new() -> Self {
        Self {
            in_dims: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool<T> {
    fn forward(&mut self, x: Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        self.in_dims = Some((n, c, h, w));
        let m = T::from_f64((h * w) as f64);
        let mut out = Array4::<T>::zeros((n, c, 1, 1));
        for in_ in 0..n {
            for ci in 0..c {
                out[(in_, ci, 0, 0)] = x.slice(ndarray::s![in_, ci, .., ..]).sum() / m;
            }
        }
        out
    }

    fn backward(&mut self, grad_out: Array4<T>, _accumulate: bool) -> Array4<T> {
        let (n, c, h, w) = self.in_dims.expect("gap backward before forward");
        let m = T::from_f64((h * w) as f64);
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for in_ in 0..n {
            for ci in 0..c {
                let g = grad_out[(in_, ci, 0, 0)] / m;
                dx.slice_mut(ndarray::s![in_, ci, .., ..]).fill(g);
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![]
    }
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        [input[0], 1, 1]
    }
}

/// Max over the spatial grid: `(N, C, H, W)` -> `(N, C, 1, 1)`.
///
/// The backward routes each channel's gradient entirely to the argmax cell
/// (first maximum wins on ties).
#[derive(Clone, Default)]
pub struct GlobalMaxPool<T> {
    cache: Option<((usize, usize, usize, usize), Vec<usize>)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> GlobalMaxPool<T> {
    pub fn new() -> Self {
        Self {
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for GlobalMaxPool<T> {
    fn forward(&mut self, x: Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let mut out = Array4::<T>::zeros((n, c, 1, 1));
        let mut argmax = vec![0usize; n * c];
        for in_ in 0..n {
            for ci in 0..c {
                let mut best = x[(in_, ci, 0, 0)];
                let mut src = ((in_ * c + ci) * h) * w;
                for ih in 0..h {
                    for iw in 0..w {
                        let v = x[(in_, ci, ih, iw)];
                        if v > best {
                            best = v;
                            src = ((in_ * c + ci) * h + ih) * w + iw;
                        }
                    }
                }
                out[(in_, ci, 0, 0)] = best;
                argmax[in_ * c + ci] = src;
            }
        }
        self.cache = Some(((n, c, h, w), argmax));
        out
    }

    fn backward(&mut self, grad_out: Array4<T>, _accumulate: bool) -> Array4<T> {
        let ((n, c, h, w), argmax) =
            self.cache.as_ref().expect("global max pool backward before forward");
        let mut dx = Array4::<T>::zeros((*n, *c, *h, *w));
        let dx_flat = dx.as_slice_mut().expect("freshly allocated dx is contiguous");
        for (g, &src) in grad_out.iter().zip(argmax.iter()) {
            dx_flat[src] += *g;
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![]
    }
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        [input[0], 1, 1]
    }
    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Reshape `(N, C, H, W)` -> `(N, C*H*W, 1, 1)`.
#[derive(Clone, Default)]
pub struct Flatten<T> {
    in_dims: Option<(usize, usize, usize, usize)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Flatten<T> {
    pub fn new() -> Self {
        Self {
            in_dims: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for Flatten<T> {
    fn forward(&mut self, x: Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        self.in_dims = Some((n, c, h, w));
        x.into_shape_with_order((n, c * h * w, 1, 1)).unwrap()
    }

    fn backward(&mut self, grad_out: Array4<T>, _accumulate: bool) -> Array4<T> {
        let (n, c, h, w) = self.in_dims.expect("flatten backward before forward");
        grad_out.into_shape_with_order((n, c, h, w)).unwrap()
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![]
    }
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        [input[0] * input[1] * input[2], 1, 1]
    }
}

/// Fully connected layer on flattened activations `(N, F, 1, 1)`.
#[derive(Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Param<T>, // (Out, In)
    pub bias: Param<T>,   // (Out,)
    pub in_features: usize,
    pub out_features: usize,
    x: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut w = Array2::<T>::zeros((out_features, in_features)).into_dyn();
        init.fill(w.as_slice_mut().unwrap(), in_features, rng);
        Self {
            weight: Param::new(format!("{name}.weight"), w),
            bias: Param::new(format!("{name}.bias"), Array1::<T>::zeros(out_features).into_dyn()),
            in_features,
            out_features,
            x: None,
        }
    }

    fn weight_mat(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_features, self.in_features))
            .unwrap()
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward(&mut self, x: Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, f, h, w) = x.dim();
        assert_eq!((f, h, w), (self.in_features, 1, 1), "linear input shape");
        let x_mat = x.into_shape_with_order((n, self.in_features)).unwrap();
        let mut y = Array2::<T>::zeros((n, self.out_features));
        gemm_into(
            T::one(),
            &x_mat.view(),
            &self.weight_mat().reversed_axes(),
            T::zero(),
            &mut y.view_mut(),
        );
        let bias = self.bias.value.view().into_shape_with_order(self.out_features).unwrap();
        for mut row in y.rows_mut() {
            row += &bias;
        }
        self.x = Some(x_mat);
        y.into_shape_with_order((n, self.out_features, 1, 1)).unwrap()
    }

    fn backward(&mut self, grad_out: Array4<T>, accumulate: bool) -> Array4<T> {
        let x = self.x.as_ref().expect("linear backward before forward");
        let n = grad_out.dim().0;
        let g = grad_out
            .into_shape_with_order((n, self.out_features))
            .unwrap();
        if accumulate {
            let mut dw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.out_features, self.in_features))
                .unwrap();
            gemm_into(T::one(), &g.view().reversed_axes(), &x.view(), T::one(), &mut dw);
            let db = g.sum_axis(Axis(0));
            let mut bias_grad = self
                .bias
                .grad
                .view_mut()
                .into_shape_with_order(self.out_features)
                .unwrap();
            bias_grad += &db;
        }
        let mut dx = Array2::<T>::zeros((n, self.in_features));
        gemm_into(T::one(), &g.view(), &self.weight_mat(), T::zero(), &mut dx.view_mut());
        dx.into_shape_with_order((n, self.in_features, 1, 1)).unwrap()
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
    fn output_shape(&self, _input: [usize; 3]) -> [usize; 3] {
        [self.out_features, 1, 1]
    }
    fn clear_cache(&mut self) {
        self.x = None;
    }
}
