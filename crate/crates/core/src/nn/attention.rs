//! Self-attention over the spatial grid of a feature map.
//!
//! Query and key projections compress channels by a factor of eight; the
//! energy between two grid positions is the dot product of one position's
//! query with the other's key. Softmax over source positions yields the
//! attention weights, the value projection is mixed by those weights, and the
//! result is scaled by a learned scalar `gamma` (initialized to zero, so the
//! layer starts as the identity) before being added back to the input.

use super::{gemm_into, Layer, Mode, Param, Scalar};
use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha8Rng;

pub struct SelfAttention2d<T: Scalar> {
    pub wq: Param<T>, // (Cq, C)
    pub wk: Param<T>, // (Cq, C)
    pub wv: Param<T>, // (C, C)
    pub bq: Param<T>,
    pub bk: Param<T>,
    pub bv: Param<T>,
    pub gamma: Param<T>, // scalar, stored as shape [1]
    channels: usize,
    qk_channels: usize,
    cache: Option<Cache<T>>,
}

struct Cache<T> {
    x: Array4<T>,
    // per-image intermediates
    q: Vec<Array2<T>>,     // (Cq, L)
    k: Vec<Array2<T>>,     // (Cq, L)
    v: Vec<Array2<T>>,     // (C, L)
    alpha: Vec<Array2<T>>, // (L, L), rows sum to one
    o: Vec<Array2<T>>,     // (C, L)
}

impl<T: Scalar> SelfAttention2d<T> {
    pub fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(
            channels % 8 == 0,
            "attention channels must be divisible by 8, got {channels}"
        );
        let qk = channels / 8;
        let mk = |n: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let mut w = Array2::<T>::zeros((rows, cols)).into_dyn();
            super::Init::HeNormal.fill(w.as_slice_mut().unwrap(), cols, rng);
            Param::new(n, w)
        };
        Self {
            wq: mk(format!("{name}.wq"), qk, channels, rng),
            wk: mk(format!("{name}.wk"), qk, channels, rng),
            wv: mk(format!("{name}.wv"), channels, channels, rng),
            bq: Param::new(format!("{name}.bq"), Array1::<T>::zeros(qk).into_dyn()),
            bk: Param::new(format!("{name}.bk"), Array1::<T>::zeros(qk).into_dyn()),
            bv: Param::new(format!("{name}.bv"), Array1::<T>::zeros(channels).into_dyn()),
            gamma: Param::new(format!("{name}.gamma"), Array1::<T>::zeros(1).into_dyn()),
            channels,
            qk_channels: qk,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn qk_channels(&self) -> usize {
        self.qk_channels
    }

    fn project(
        w: &Param<T>,
        b: &Param<T>,
        x_mat: &ndarray::ArrayView2<'_, T>,
        rows: usize,
    ) -> Array2<T> {
        let l = x_mat.dim().1;
        let w_mat = w.value.view().into_shape_with_order((rows, x_mat.dim().0)).unwrap();
        let mut out = Array2::<T>::zeros((rows, l));
        gemm_into(T::one(), &w_mat, x_mat, T::zero(), &mut out.view_mut());
        let bias = b.value.view().into_shape_with_order(rows).unwrap();
        for (mut row, &bi) in out.rows_mut().into_iter().zip(bias.iter()) {
            row.mapv_inplace(|v| v + bi);
        }
        out
    }
}

fn softmax_rows_inplace<T: Scalar>(e: &mut Array2<T>) {
    for mut row in e.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl<T: Scalar> Layer<T> for SelfAttention2d<T> {
    fn forward(&mut self, x: Array4<T>, _mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "attention channel mismatch");
        let l = h * w;
        let gamma = self.gamma.value[[0]];
        let mut out = x.clone();
        let mut cache = Cache {
            x: x.clone(),
            q: Vec::with_capacity(n),
            k: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            alpha: Vec::with_capacity(n),
            o: Vec::with_capacity(n),
        };
        for i in 0..n {
            let img = x.index_axis(ndarray::Axis(0), i);
            let x_mat = img.into_shape_with_order((c, l)).unwrap();
            let q = Self::project(&self.wq, &self.bq, &x_mat, self.qk_channels);
            let k = Self::project(&self.wk, &self.bk, &x_mat, self.qk_channels);
            let v = Self::project(&self.wv, &self.bv, &x_mat, c);
            // energies: e[a, b] = q(:, a) . k(:, b)
            let mut e = Array2::<T>::zeros((l, l));
            gemm_into(T::one(), &q.view().reversed_axes(), &k.view(), T::zero(), &mut e.view_mut());
            softmax_rows_inplace(&mut e);
            // o(:, a) = sum_b alpha[a, b] v(:, b)
            let mut o = Array2::<T>::zeros((c, l));
            gemm_into(T::one(), &v.view(), &e.view().reversed_axes(), T::zero(), &mut o.view_mut());
            {
                let mut dst = out.index_axis_mut(ndarray::Axis(0), i);
                let mut dst_mat = dst.view_mut().into_shape_with_order((c, l)).unwrap();
                ndarray::Zip::from(&mut dst_mat).and(&o).for_each(|y, &oi| {
                    *y = *y + gamma * oi;
                });
            }
            cache.q.push(q);
            cache.k.push(k);
            cache.v.push(v);
            cache.alpha.push(e);
            cache.o.push(o);
        }
        self.cache = Some(cache);
        out
    }

    fn backward(&mut self, grad_out: Array4<T>, accumulate: bool) -> Array4<T> {
        let cache = self.cache.as_ref().expect("attention backward before forward");
        let (n, c, h, w) = grad_out.dim();
        let l = h * w;
        let gamma = self.gamma.value[[0]];
        let mut dx = grad_out.clone(); // identity branch
        let mut dgamma = T::zero();
        let mut dwq = Array2::<T>::zeros((self.qk_channels, c));
        let mut dwk = Array2::<T>::zeros((self.qk_channels, c));
        let mut dwv = Array2::<T>::zeros((c, c));
        let mut dbq = Array1::<T>::zeros(self.qk_channels);
        let mut dbk = Array1::<T>::zeros(self.qk_channels);
        let mut dbv = Array1::<T>::zeros(c);
        let wq = self.wq.value.view().into_shape_with_order((self.qk_channels, c)).unwrap();
        let wk = self.wk.value.view().into_shape_with_order((self.qk_channels, c)).unwrap();
        let wv = self.wv.value.view().into_shape_with_order((c, c)).unwrap();
        for i in 0..n {
            let g_img = grad_out.index_axis(ndarray::Axis(0), i);
            let dy = g_img.into_shape_with_order((c, l)).unwrap();
            let (q, k, v, alpha, o) = (
                &cache.q[i],
                &cache.k[i],
                &cache.v[i],
                &cache.alpha[i],
                &cache.o[i],
            );
            dgamma += ndarray::Zip::from(&dy).and(o).fold(T::zero(), |acc, &g, &oi| acc + g * oi);
            // do = gamma * dy
            let do_ = dy.mapv(|g| g * gamma);
            // dv = do @ alpha ; dalpha = do^T @ v
            let mut dv = Array2::<T>::zeros((c, l));
            gemm_into(T::one(), &do_.view(), &alpha.view(), T::zero(), &mut dv.view_mut());
            let mut dalpha = Array2::<T>::zeros((l, l));
            gemm_into(T::one(), &do_.view().reversed_axes(), &v.view(), T::zero(), &mut dalpha.view_mut());
            // softmax backward, row-wise
            let mut de = dalpha;
            for (mut drow, arow) in de.rows_mut().into_iter().zip(alpha.rows()) {
                let dot = drow
                    .iter()
                    .zip(arow.iter())
                    .fold(T::zero(), |acc, (&d, &a)| acc + d * a);
                for (d, &a) in drow.iter_mut().zip(arow.iter()) {
                    *d = a * (*d - dot);
                }
            }
            // dq = k @ de^T ; dk = q @ de
            let mut dq = Array2::<T>::zeros((self.qk_channels, l));
            gemm_into(T::one(), &k.view(), &de.view().reversed_axes(), T::zero(), &mut dq.view_mut());
            let mut dk = Array2::<T>::zeros((self.qk_channels, l));
            gemm_into(T::one(), &q.view(), &de.view(), T::zero(), &mut dk.view_mut());
            // projection backward: y = W x + b
            let x_img = cache.x.index_axis(ndarray::Axis(0), i);
            let x_mat = x_img.into_shape_with_order((c, l)).unwrap();
            gemm_into(T::one(), &dq.view(), &x_mat.view().reversed_axes(), T::one(), &mut dwq.view_mut());
            gemm_into(T::one(), &dk.view(), &x_mat.view().reversed_axes(), T::one(), &mut dwk.view_mut());
            gemm_into(T::one(), &dv.view(), &x_mat.view().reversed_axes(), T::one(), &mut dwv.view_mut());
            dbq += &dq.sum_axis(ndarray::Axis(1));
            dbk += &dk.sum_axis(ndarray::Axis(1));
            dbv += &dv.sum_axis(ndarray::Axis(1));
            let mut dst = dx.index_axis_mut(ndarray::Axis(0), i);
            let mut dst_mat = dst.view_mut().into_shape_with_order((c, l)).unwrap();
            gemm_into(T::one(), &wq.reversed_axes(), &dq.view(), T::one(), &mut dst_mat);
            gemm_into(T::one(), &wk.reversed_axes(), &dk.view(), T::one(), &mut dst_mat);
            gemm_into(T::one(), &wv.reversed_axes(), &dv.view(), T::one(), &mut dst_mat);
        }
        if accumulate {
            self.gamma.grad[[0]] += dgamma;
            let add = |p: &mut Param<T>, g: &[T]| {
                for (dst, &src) in p.grad.as_slice_mut().unwrap().iter_mut().zip(g) {
                    *dst += src;
                }
            };
            add(&mut self.wq, dwq.as_slice().unwrap());
            add(&mut self.wk, dwk.as_slice().unwrap());
            add(&mut self.wv, dwv.as_slice().unwrap());
            add(&mut self.bq, dbq.as_slice().unwrap());
            add(&mut self.bk, dbk.as_slice().unwrap());
            add(&mut self.bv, dbv.as_slice().unwrap());
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.wq, &self.wk, &self.wv, &self.bq, &self.bk, &self.bv, &self.gamma]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bq,
            &mut self.bk,
            &mut self.bv,
            &mut self.gamma,
        ]
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}
