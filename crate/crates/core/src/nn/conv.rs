//! Strided 2-D convolution and transposed convolution via im2col + GEMM.

use super::{gemm_into, Init, Layer, Mode, Param, Scalar};
use ndarray::{Array2, Array4, ArrayView4, Axis};
use rand_chacha::ChaCha8Rng;

/// Output side length of a convolution along one spatial axis.
pub fn conv_output_side(side: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - kernel) / stride + 1
}

/// Gather convolution patches: `(N, C, H, W)` -> `(N*OH*OW, C*K*K)`.
///
/// Row order is `(n, oh, ow)`, column order `(c, kh, kw)`. Out-of-bounds
/// (padding) positions contribute zeros.
pub fn im2col<T: Scalar>(
    x: &ArrayView4<'_, T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let oh = conv_output_side(h, kernel, stride, pad);
    let ow = conv_output_side(w, kernel, stride, pad);
    let mut cols = Array2::<T>::zeros((n * oh * ow, c * kernel * kernel));
    let xs = x.as_slice().expect("im2col expects standard layout");
    let cs = cols.as_slice_mut().unwrap();
    let row_len = c * kernel * kernel;
    for in_ in 0..n {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = ((in_ * oh + ohi) * ow + owi) * row_len;
                for ci in 0..c {
                    let x_chan = (in_ * c + ci) * h * w;
                    for kh in 0..kernel {
                        let ih = (ohi * stride + kh) as isize - pad as isize;
                        let dst = row + (ci * kernel + kh) * kernel;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_chan + ih as usize * w;
                        for kw in 0..kernel {
                            let iw = (owi * stride + kw) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                cs[dst + kw] = xs[x_row + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into an image
/// tensor of shape `(n, c, h, w)`.
pub fn col2im<T: Scalar>(
    cols: &Array2<T>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let oh = conv_output_side(h, kernel, stride, pad);
    let ow = conv_output_side(w, kernel, stride, pad);
    debug_assert_eq!(cols.dim(), (n * oh * ow, c * kernel * kernel));
    let mut x = Array4::<T>::zeros((n, c, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("col2im expects standard layout");
    let row_len = c * kernel * kernel;
    for in_ in 0..n {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = ((in_ * oh + ohi) * ow + owi) * row_len;
                for ci in 0..c {
                    let x_chan = (in_ * c + ci) * h * w;
                    for kh in 0..kernel {
                        let ih = (ohi * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_chan + ih as usize * w;
                        let src = row + (ci * kernel + kh) * kernel;
                        for kw in 0..kernel {
                            let iw = (owi * stride + kw) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                xs[x_row + iw as usize] += cs[src + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(N*OH*OW, Cout)` row-major GEMM output -> `(N, Cout, OH, OW)`.
fn rows_to_nchw<T: Scalar>(rows: &Array2<T>, n: usize, oh: usize, ow: usize) -> Array4<T> {
    let cout = rows.dim().1;
    let mut out = Array4::<T>::zeros((n, cout, oh, ow));
    let rs = rows.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for in_ in 0..n {
        for p in 0..oh * ow {
            let src = (in_ * oh * ow + p) * cout;
            for co in 0..cout {
                os[(in_ * cout + co) * oh * ow + p] = rs[src + co];
            }
        }
    }
    out
}

/// `(N, C, OH, OW)` -> `(N*OH*OW, C)` rows, the inverse of [`rows_to_nchw`].
fn nchw_to_rows<T: Scalar>(x: &ArrayView4<'_, T>) -> Array2<T> {
    let (n, c, oh, ow) = x.dim();
    let mut rows = Array2::<T>::zeros((n * oh * ow, c));
    let xs = x.as_slice().expect("nchw_to_rows expects standard layout");
    let rs = rows.as_slice_mut().unwrap();
    for in_ in 0..n {
        for ci in 0..c {
            let src = (in_ * c + ci) * oh * ow;
            for p in 0..oh * ow {
                rs[(in_ * oh * ow + p) * c + ci] = xs[src + p];
            }
        }
    }
    rows
}

/// 2-D convolution with square kernel, bias, and zero padding.
#[derive(Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>, // (Cout, Cin, K, K)
    pub bias: Param<T>,   // (Cout,)
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Clone)]
struct ConvCache<T> {
    cols: Array2<T>,
    in_dims: (usize, usize, usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut w = Array4::<T>::zeros((out_ch, in_ch, kernel, kernel)).into_dyn();
        init.fill(
            w.as_slice_mut().unwrap(),
            in_ch * kernel * kernel,
            rng,
        );
        let b = ndarray::Array1::<T>::zeros(out_ch).into_dyn();
        Self {
            weight: Param::new(format!("{name}.weight"), w),
            bias: Param::new(format!("{name}.bias"), b),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    fn weight_mat(&self) -> ndarray::ArrayView2<'_, T> {
        // (Cout, Cin*K*K)
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.kernel * self.kernel))
            .unwrap()
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let oh = conv_output_side(h, self.kernel, self.stride, self.pad);
        let ow = conv_output_side(w, self.kernel, self.stride, self.pad);
        let cols = im2col(&x.view(), self.kernel, self.stride, self.pad);
        let mut rows = Array2::<T>::zeros((n * oh * ow, self.out_ch));
        // rows = cols @ W^T
        gemm_into(
            T::one(),
            &cols.view(),
            &self.weight_mat().reversed_axes(),
            T::zero(),
            &mut rows.view_mut(),
        );
        let bias = self.bias.value.view().into_shape_with_order(self.out_ch).unwrap();
        for mut r in rows.rows_mut() {
            r += &bias;
        }
        self.cache = Some(ConvCache {
            cols,
            in_dims: (n, c, h, w),
        });
        rows_to_nchw(&rows, n, oh, ow)
    }

    fn backward(&mut self, grad_out: Array4<T>, accumulate: bool) -> Array4<T> {
        let cache = self.cache.as_ref().expect("conv backward before forward");
        let (n, c, h, w) = cache.in_dims;
        let g_rows = nchw_to_rows(&grad_out.view());
        if accumulate {
            // dW = g^T @ cols, db = column sums of g
            let mut dw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.out_ch, self.in_ch * self.kernel * self.kernel))
                .unwrap();
            gemm_into(
                T::one(),
                &g_rows.view().reversed_axes(),
                &cache.cols.view(),
                T::one(),
                &mut dw,
            );
            let db = g_rows.sum_axis(Axis(0));
            let mut bias_grad = self.bias.grad.view_mut().into_shape_with_order(self.out_ch).unwrap();
            bias_grad += &db;
        }
        // dcols = g @ W
        let mut dcols = Array2::<T>::zeros(cache.cols.dim());
        gemm_into(
            T::one(),
            &g_rows.view(),
            &self.weight_mat(),
            T::zero(),
            &mut dcols.view_mut(),
        );
        col2im(&dcols, n, c, h, w, self.kernel, self.stride, self.pad)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        [
            self.out_ch,
            conv_output_side(input[1], self.kernel, self.stride, self.pad),
            conv_output_side(input[2], self.kernel, self.stride, self.pad),
        ]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Transposed 2-D convolution (stride-s upsampling), the exact adjoint of
/// [`Conv2d`] with the same kernel/stride/pad plan.
#[derive(Clone)]
pub struct ConvTranspose2d<T: Scalar> {
    pub weight: Param<T>, // (Cin, Cout, K, K)
    pub bias: Param<T>,   // (Cout,)
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<DeconvCache<T>>,
}

#[derive(Clone)]
struct DeconvCache<T> {
    x_rows: Array2<T>, // (N*H*W, Cin)
    in_dims: (usize, usize, usize, usize),
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut w = Array4::<T>::zeros((in_ch, out_ch, kernel, kernel)).into_dyn();
        init.fill(w.as_slice_mut().unwrap(), in_ch * kernel * kernel, rng);
        let b = ndarray::Array1::<T>::zeros(out_ch).into_dyn();
        Self {
            weight: Param::new(format!("{name}.weight"), w),
            bias: Param::new(format!("{name}.bias"), b),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side - 1) * self.stride + self.kernel - 2 * self.pad
    }

    fn weight_mat(&self) -> ndarray::ArrayView2<'_, T> {
        // (Cin, Cout*K*K)
        self.weight
            .value
            .view()
            .into_shape_with_order((self.in_ch, self.out_ch * self.kernel * self.kernel))
            .unwrap()
    }
}

impl<T: Scalar> Layer<T> for ConvTranspose2d<T> {
    fn forward(&mut self, x: Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "deconv input channels");
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        let x_rows = nchw_to_rows(&x.view());
        // cols = x_rows @ W_mat, scattered into the output image
        let mut cols =
            Array2::<T>::zeros((n * h * w, self.out_ch * self.kernel * self.kernel));
        gemm_into(
            T::one(),
            &x_rows.view(),
            &self.weight_mat(),
            T::zero(),
            &mut cols.view_mut(),
        );
        let mut out = col2im(&cols, n, self.out_ch, oh, ow, self.kernel, self.stride, self.pad);
        let bias = self.bias.value.view().into_shape_with_order(self.out_ch).unwrap();
        for in_ in 0..n {
            for co in 0..self.out_ch {
                let mut plane = out.index_axis_mut(Axis(0), in_);
                let mut plane = plane.index_axis_mut(Axis(0), co);
                plane += bias[co];
            }
        }
        self.cache = Some(DeconvCache {
            x_rows,
            in_dims: (n, c, h, w),
        });
        out
    }

    fn backward(&mut self, grad_out: Array4<T>, accumulate: bool) -> Array4<T> {
        let cache = self.cache.as_ref().expect("deconv backward before forward");
        let (n, c, h, w) = cache.in_dims;
        // The forward col2im is adjoint to im2col over the output grid.
        let dcols = im2col(&grad_out.view(), self.kernel, self.stride, self.pad);
        if accumulate {
            let mut dw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.in_ch, self.out_ch * self.kernel * self.kernel))
                .unwrap();
            gemm_into(
                T::one(),
                &cache.x_rows.view().reversed_axes(),
                &dcols.view(),
                T::one(),
                &mut dw,
            );
            let db = grad_out.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
            let mut bias_grad = self.bias.grad.view_mut().into_shape_with_order(self.out_ch).unwrap();
            bias_grad += &db;
        }
        let mut dx_rows = Array2::<T>::zeros((n * h * w, self.in_ch));
        gemm_into(
            T::one(),
            &dcols.view(),
            &self.weight_mat().reversed_axes(),
            T::zero(),
            &mut dx_rows.view_mut(),
        );
        // rows -> NCHW
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let ds = dx.as_slice_mut().unwrap();
        let rs = dx_rows.as_slice().unwrap();
        for in_ in 0..n {
            for p in 0..h * w {
                let src = (in_ * h * w + p) * c;
                for ci in 0..c {
                    ds[(in_ * c + ci) * h * w + p] = rs[src + ci];
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        [self.out_ch, self.out_side(input[1]), self.out_side(input[2])]
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut x = Array4::<f64>::zeros((2, 3, 6, 6));
        normal_fill_test(x.as_slice_mut().unwrap(), &mut rng);
        let cols = im2col(&x.view(), 4, 2, 1);
        let mut y = Array2::<f64>::zeros(cols.dim());
        normal_fill_test(y.as_slice_mut().unwrap(), &mut rng);
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(&y, 2, 3, 6, 6, 4, 2, 1);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_output_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, Init::HeNormal, &mut rng);
        let mut x = Array4::<f64>::zeros((1, 2, 5, 5));
        normal_fill_test(x.as_slice_mut().unwrap(), &mut rng);
        let y = conv.forward(x.clone(), Mode::Train);
        let (oh, ow) = (conv_output_side(5, 3, 2, 1), conv_output_side(5, 3, 2, 1));
        assert_eq!(y.dim(), (1, 3, oh, ow));
        let w = conv
            .weight
            .value
            .view()
            .into_shape_with_order((3, 2, 3, 3))
            .unwrap()
            .to_owned();
        let b = conv.bias.value.view().into_shape_with_order(3).unwrap().to_owned();
        for co in 0..3 {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..2 {
                        for kh in 0..3 {
                            for kw in 0..3 {
                                let ih = (ohi * 2 + kh) as isize - 1;
                                let iw = (owi * 2 + kw) as isize - 1;
                                if ih >= 0 && ih < 5 && iw >= 0 && iw < 5 {
                                    acc += x[(0, ci, ih as usize, iw as usize)]
                                        * w[(co, ci, kh, kw)];
                                }
                            }
                        }
                    }
                    let got = y[(0, co, ohi, owi)];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn deconv_is_conv_adjoint() {
        // <deconv(x), y> == <x, conv_data_bwd(y)> when sharing a weight tensor.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut deconv = ConvTranspose2d::<f64>::new("d", 3, 2, 4, 2, 1, Init::HeNormal, &mut rng);
        deconv.bias.value.fill(0.0);
        let mut x = Array4::<f64>::zeros((1, 3, 4, 4));
        normal_fill_test(x.as_slice_mut().unwrap(), &mut rng);
        let y = deconv.forward(x.clone(), Mode::Train);
        assert_eq!(y.dim(), (1, 2, 8, 8));
        // adjoint check through the backward pass
        let mut g = Array4::<f64>::zeros((1, 2, 8, 8));
        normal_fill_test(g.as_slice_mut().unwrap(), &mut rng);
        let dx = deconv.backward(g.clone(), false);
        let lhs: f64 = (&y * &g).sum();
        let rhs: f64 = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    fn normal_fill_test(s: &mut [f64], rng: &mut ChaCha8Rng) {
        crate::nn::normal_fill(s, 1.0, rng);
    }
}
