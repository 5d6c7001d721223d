//! Composite building blocks: residual units and inception-style multi-branch
//! units, both assembled from the primitive layers.

use super::{AvgPool2d, BatchNorm2d, Conv2d, Init, Layer, Mode, Param, Relu, Scalar, Sequential};
use ndarray::{Array4, Axis};
use rand_chacha::ChaCha8Rng;

/// Two 3x3 convolutions with batch norm and a skip connection; the skip path
/// gets a 1x1 projection whenever the shape changes.
pub struct ResidualBlock<T: Scalar> {
    main: Sequential<T>,
    skip: Option<Sequential<T>>,
    out_channels: usize,
    stride: usize,
    sum_out: Option<Array4<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut main = Sequential::new();
        main.push(
            format!("{name}.conv1"),
            Conv2d::new(
                &format!("{name}.conv1"),
                in_channels,
                out_channels,
                3,
                stride,
                1,
                Init::HeNormal,
                rng,
            ),
        );
        main.push(
            format!("{name}.bn1"),
            BatchNorm2d::new(&format!("{name}.bn1"), out_channels),
        );
        main.push(format!("{name}.relu1"), Relu::new());
        main.push(
            format!("{name}.conv2"),
            Conv2d::new(
                &format!("{name}.conv2"),
                out_channels,
                out_channels,
                3,
                1,
                1,
                Init::HeNormal,
                rng,
            ),
        );
        main.push(
            format!("{name}.bn2"),
            BatchNorm2d::new(&format!("{name}.bn2"), out_channels),
        );
        let skip = if stride != 1 || in_channels != out_channels {
            let mut s = Sequential::new();
            s.push(
                format!("{name}.proj"),
                Conv2d::new(
                    &format!("{name}.proj"),
                    in_channels,
                    out_channels,
                    1,
                    stride,
                    0,
                    Init::HeNormal,
                    rng,
                ),
            );
            s.push(
                format!("{name}.proj_bn"),
                BatchNorm2d::new(&format!("{name}.proj_bn"), out_channels),
            );
            Some(s)
        } else {
            None
        };
        Self {
            main,
            skip,
            out_channels,
            stride,
            sum_out: None,
        }
    }
}

impl<T: Scalar> Layer<T> for ResidualBlock<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let shortcut = match &mut self.skip {
            Some(s) => s.forward(x.clone(), mode),
            None => x.clone(),
        };
        let mut out = self.main.forward(x, mode);
        out += &shortcut;
        out.mapv_inplace(|v| v.max(T::zero()));
        self.sum_out = Some(out.clone());
        out
    }

    fn backward(&mut self, mut grad_out: Array4<T>, accumulate: bool) -> Array4<T> {
        let out = self.sum_out.as_ref().expect("residual backward before forward");
        grad_out.zip_mut_with(out, |g, &o| {
            if o <= T::zero() {
                *g = T::zero();
            }
        });
        let mut dx = self.main.backward(grad_out.clone(), accumulate);
        match &mut self.skip {
            Some(s) => dx += &s.backward(grad_out, accumulate),
            None => dx += &grad_out,
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.main.params();
        if let Some(s) = &self.skip {
            p.extend(s.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.main.params_mut();
        if let Some(s) = &mut self.skip {
            p.extend(s.params_mut());
        }
        p
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        [
            self.out_channels,
            super::conv::conv_output_side(input[1], 3, self.stride, 1),
            super::conv::conv_output_side(input[2], 3, self.stride, 1),
        ]
    }

    fn clear_cache(&mut self) {
        self.main.clear_cache();
        if let Some(s) = &mut self.skip {
            s.clear_cache();
        }
        self.sum_out = None;
    }
}

/// Four parallel branches concatenated along channels: 1x1, 1x1->3x3,
/// 1x1->5x5, and 3x3 average pool -> 1x1.
pub struct InceptionBlock<T: Scalar> {
    branches: Vec<Sequential<T>>,
    branch_channels: Vec<usize>,
    in_dims: Option<(usize, usize, usize, usize)>,
}

impl<T: Scalar> InceptionBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        c1: usize,
        reduce3: usize,
        c3: usize,
        reduce5: usize,
        c5: usize,
        c_pool: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = |n: String, ci: usize, co: usize, k: usize, p: usize, rng: &mut ChaCha8Rng| {
            Conv2d::new(&n, ci, co, k, 1, p, Init::HeNormal, rng)
        };
        let mut b1 = Sequential::new();
        b1.push(format!("{name}.b1"), conv(format!("{name}.b1"), in_channels, c1, 1, 0, rng));
        b1.push(format!("{name}.b1_relu"), Relu::new());

        let mut b2 = Sequential::new();
        b2.push(
            format!("{name}.b2_reduce"),
            conv(format!("{name}.b2_reduce"), in_channels, reduce3, 1, 0, rng),
        );
        b2.push(format!("{name}.b2_reduce_relu"), Relu::new());
        b2.push(format!("{name}.b2"), conv(format!("{name}.b2"), reduce3, c3, 3, 1, rng));
        b2.push(format!("{name}.b2_relu"), Relu::new());

        let mut b3 = Sequential::new();
        b3.push(
            format!("{name}.b3_reduce"),
            conv(format!("{name}.b3_reduce"), in_channels, reduce5, 1, 0, rng),
        );
        b3.push(format!("{name}.b3_reduce_relu"), Relu::new());
        b3.push(format!("{name}.b3"), conv(format!("{name}.b3"), reduce5, c5, 5, 2, rng));
        b3.push(format!("{name}.b3_relu"), Relu::new());

        let mut b4 = Sequential::new();
        b4.push(format!("{name}.b4_pool"), AvgPool2d::new(3, 1, 1));
        b4.push(
            format!("{name}.b4"),
            conv(format!("{name}.b4"), in_channels, c_pool, 1, 0, rng),
        );
        b4.push(format!("{name}.b4_relu"), Relu::new());

        Self {
            branches: vec![b1, b2, b3, b4],
            branch_channels: vec![c1, c3, c5, c_pool],
            in_dims: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.branch_channels.iter().sum()
    }
}

impl<T: Scalar> Layer<T> for InceptionBlock<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        self.in_dims = Some(x.dim());
        let outs: Vec<Array4<T>> = self
            .branches
            .iter_mut()
            .map(|b| b.forward(x.clone(), mode))
            .collect();
        let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
        ndarray::concatenate(Axis(1), &views).expect("branch outputs share spatial dims")
    }

    fn backward(&mut self, grad_out: Array4<T>, accumulate: bool) -> Array4<T> {
        let (n, _, h, w) = self.in_dims.expect("inception backward before forward");
        debug_assert_eq!(grad_out.dim().1, self.out_channels());
        let mut dx: Option<Array4<T>> = None;
        let mut start = 0;
        for (branch, &ch) in self.branches.iter_mut().zip(&self.branch_channels) {
            let g = grad_out
                .slice(ndarray::s![.., start..start + ch, .., ..])
                .to_owned();
            start += ch;
            let d = branch.backward(g, accumulate);
            match &mut dx {
                Some(acc) => *acc += &d,
                None => dx = Some(d),
            }
        }
        let dx = dx.expect("at least one branch");
        debug_assert_eq!((dx.dim().0, dx.dim().2, dx.dim().3), (n, h, w));
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.branches.iter().flat_map(|b| b.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.branches
            .iter_mut()
            .flat_map(|b| b.params_mut())
            .collect()
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        [self.out_channels(), input[1], input[2]]
    }

    fn clear_cache(&mut self) {
        for b in self.branches.iter_mut() {
            b.clear_cache();
        }
        self.in_dims = None;
    }
}
