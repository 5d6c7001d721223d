//! Finite-difference verification of analytic gradients.
//!
//! The check builds a random linear functional over the network output (and
//! optionally over tapped intermediate activations), backpropagates it, and
//! compares every sampled parameter/input coordinate against a central
//! difference in f64. Agreement is measured as
//! `|fd - analytic| / max(|fd|, |analytic|, 1e-4)`, so a report's `worst_rel`
//! below 1e-4 means every coordinate matched to at least four significant
//! figures (or to an absolute 1e-8 where both sides are tiny).

use super::{Mode, Scalar, Sequential};
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn random_like(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
    let mut r = Array4::<f64>::zeros(shape);
    super::normal_fill(r.as_slice_mut().unwrap(), 1.0, rng);
    r
}

fn sample_coords(len: usize, want: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    if len <= want {
        return (0..len).collect();
    }
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < want {
        picked.insert(rng.random_range(0..len));
    }
    picked.into_iter().collect()
}

fn relative_gap(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4)
}

/// Gradient-check a network in f64. `taps` adds the named intermediate
/// activations to the loss so the tap-injection backward path is exercised;
/// pass an empty slice for a plain output-only check.
pub fn gradcheck_net(
    net: &mut Sequential<f64>,
    x: &Array4<f64>,
    taps: &[String],
    coords_per_tensor: usize,
    seed: u64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y, tap_vals) = net.forward_collect(x.clone(), Mode::Train, taps);
    let r_out = random_like(y.dim(), &mut rng);
    let r_taps: Vec<Array4<f64>> = tap_vals
        .iter()
        .map(|t| random_like(t.dim(), &mut rng))
        .collect();
    let tap_grads: Vec<(String, Array4<f64>)> =
        taps.iter().cloned().zip(r_taps.iter().cloned()).collect();

    net.zero_grad();
    let dx = net.backward_with_taps(r_out.clone(), &tap_grads, true);
    let analytic: Vec<(String, bool, Vec<f64>)> = net
        .params()
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.trainable,
                p.grad.as_slice().unwrap().to_vec(),
            )
        })
        .collect();

    let eval_loss = |net: &mut Sequential<f64>, x: &Array4<f64>| -> f64 {
        let (y, tv) = net.forward_collect(x.clone(), Mode::Train, taps);
        let mut l = (&y * &r_out).sum();
        for (t, r) in tv.iter().zip(&r_taps) {
            l += (t * r).sum();
        }
        l
    };

    let h = 1e-5;
    let mut report = GradCheckReport {
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    let record = |name: &str, coord: usize, fd: f64, an: f64, report: &mut GradCheckReport| {
        let rel = relative_gap(fd, an);
        report.checked += 1;
        report.worst_rel = report.worst_rel.max(rel);
        if rel >= 1e-4 {
            report.failures.push(format!(
                "{name}[{coord}]: fd {fd:.9e} vs analytic {an:.9e} (rel {rel:.3e})"
            ));
        }
    };

    for (pi, (name, trainable, grads)) in analytic.iter().enumerate() {
        if !trainable {
            continue;
        }
        let len = grads.len();
        for c in sample_coords(len, coords_per_tensor, &mut rng) {
            let orig = {
                let mut ps = net.params_mut();
                let slot = &mut ps[pi].value.as_slice_mut().unwrap()[c];
                let orig = *slot;
                *slot = orig + h;
                orig
            };
            let lp = eval_loss(net, x);
            {
                let mut ps = net.params_mut();
                ps[pi].value.as_slice_mut().unwrap()[c] = orig - h;
            }
            let lm = eval_loss(net, x);
            {
                let mut ps = net.params_mut();
                ps[pi].value.as_slice_mut().unwrap()[c] = orig;
            }
            record(name, c, (lp - lm) / (2.0 * h), grads[c], &mut report);
        }
    }

    // input gradient
    let mut x_pert = x.clone();
    let dx_slice = dx.as_slice().unwrap();
    let len = x_pert.len();
    for c in sample_coords(len, coords_per_tensor, &mut rng) {
        let orig = x_pert.as_slice().unwrap()[c];
        x_pert.as_slice_mut().unwrap()[c] = orig + h;
        let lp = eval_loss(net, &x_pert);
        x_pert.as_slice_mut().unwrap()[c] = orig - h;
        let lm = eval_loss(net, &x_pert);
        x_pert.as_slice_mut().unwrap()[c] = orig;
        record("input", c, (lp - lm) / (2.0 * h), dx_slice[c], &mut report);
    }

    report
}

/// Random normal test input of the given shape.
pub fn probe_input<T: Scalar>(
    shape: (usize, usize, usize, usize),
    std: f64,
    seed: u64,
) -> Array4<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array4::<T>::zeros(shape);
    super::normal_fill(x.as_slice_mut().unwrap(), std, &mut rng);
    x
}

/// Add small random noise to every trainable parameter. Freshly built
/// networks have exactly-zero biases; combined with the exact zeros a ReLU
/// emits, that parks preactivations right on the kink where a finite
/// difference straddles both sides while the analytic subgradient picks one.
/// Jittering moves the network to a point of differentiability.
pub fn jitter_params(net: &mut Sequential<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.params_mut() {
        if p.trainable {
            let mut noise = vec![0.0; p.value.len()];
            super::normal_fill(&mut noise, std, &mut rng);
            for (w, n) in p.value.as_slice_mut().unwrap().iter_mut().zip(noise) {
                *w += n;
            }
        }
    }
}
