//! A named stack of layers with support for tapping intermediate activations.

use super::{Layer, Mode, Param, Scalar};
use ndarray::Array4;

pub struct Sequential<T: Scalar> {
    layers: Vec<(String, Box<dyn Layer<T>>)>,
}

impl<T: Scalar> Default for Sequential<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer<T> + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }

    pub fn push_boxed(&mut self, name: impl Into<String>, layer: Box<dyn Layer<T>>) {
        self.layers.push((name.into(), layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn has_layer(&self, name: &str) -> bool {
        self.layers.iter().any(|(n, _)| n == name)
    }

    pub fn layer(&self, name: &str) -> Option<&dyn Layer<T>> {
        self.layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, l)| l.as_ref())
    }

    /// Shapes after each layer for a single input of shape `[C, H, W]`.
    pub fn shape_trace(&self, input: [usize; 3]) -> Vec<(String, [usize; 3])> {
        let mut shape = input;
        self.layers
            .iter()
            .map(|(name, layer)| {
                shape = layer.output_shape(shape);
                (name.clone(), shape)
            })
            .collect()
    }

    pub fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        self.layers
            .iter_mut()
            .fold(x, |h, (_, layer)| layer.forward(h, mode))
    }

    /// Forward pass that also returns the activations after the named layers,
    /// in the order requested. Panics on a name that is not in the stack;
    /// callers validate names first via [`Sequential::has_layer`].
    pub fn forward_collect(
        &mut self,
        x: Array4<T>,
        mode: Mode,
        taps: &[String],
    ) -> (Array4<T>, Vec<Array4<T>>) {
        for t in taps {
            assert!(self.has_layer(t), "unknown tap layer: {t}");
        }
        let mut collected: Vec<Option<Array4<T>>> = vec![None; taps.len()];
        let mut h = x;
        for (name, layer) in self.layers.iter_mut() {
            h = layer.forward(h, mode);
            for (slot, t) in collected.iter_mut().zip(taps) {
                if t == name {
                    *slot = Some(h.clone());
                }
            }
        }
        (h, collected.into_iter().map(|o| o.unwrap()).collect())
    }

    pub fn backward(&mut self, grad_out: Array4<T>, accumulate: bool) -> Array4<T> {
        self.layers
            .iter_mut()
            .rev()
            .fold(grad_out, |g, (_, layer)| layer.backward(g, accumulate))
    }

    /// Backward pass where extra gradient terms are injected at tapped
    /// activations (the adjoint of [`Sequential::forward_collect`]).
    pub fn backward_with_taps(
        &mut self,
        grad_out: Array4<T>,
        tap_grads: &[(String, Array4<T>)],
        accumulate: bool,
    ) -> Array4<T> {
        let mut g = grad_out;
        for (name, layer) in self.layers.iter_mut().rev() {
            for (tap, extra) in tap_grads {
                if tap == name {
                    g += extra;
                }
            }
            g = layer.backward(g, accumulate);
        }
        g
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|(_, l)| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers
            .iter_mut()
            .flat_map(|(_, l)| l.params_mut())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        self.layers
            .iter()
            .fold(input, |s, (_, l)| l.output_shape(s))
    }

    pub fn clear_cache(&mut self) {
        for (_, l) in self.layers.iter_mut() {
            l.clear_cache();
        }
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        Sequential::forward(self, x, mode)
    }

    fn backward(&mut self, grad_out: Array4<T>, accumulate: bool) -> Array4<T> {
        Sequential::backward(self, grad_out, accumulate)
    }

    fn params(&self) -> Vec<&Param<T>> {
        Sequential::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Sequential::params_mut(self)
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        Sequential::output_shape(self, input)
    }

    fn clear_cache(&mut self) {
        Sequential::clear_cache(self)
    }
}
