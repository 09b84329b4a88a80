//! Central finite-difference checks of analytic layer gradients.
//!
//! The probe loss is `sum(w * output)` with `w` drawn from the seed, so the
//! upstream gradient fed to the backward pass is `w` itself. Dropout masks
//! are reproduced exactly by reseeding the forward RNG on every evaluation.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::{backward_all, forward_all, Layer, Mode};
use crate::tensor::Tensor;
use crate::Scalar;

const FORWARD_STREAM: u64 = 0x5eed_f0d0;

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckOptions {
    /// Check at most this many seeded-random coordinates per tensor.
    /// `None` checks every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    /// Skip the input coordinates and check parameters only.
    pub params_only: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Human-readable location of the worst coordinate.
    pub worst: String,
    pub coords_checked: usize,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between the analytic gradients of `layer` and
/// central differences, over every parameter and input coordinate.
pub fn finite_diff_check<T: Scalar>(layer: &mut Layer<T>, input: &Tensor<T>, epsilon: f64, seed: u64) -> Result<f64> {
    finite_diff_check_with(std::slice::from_mut(layer), input, epsilon, seed, CheckOptions::default())
        .map(|r| r.max_rel_error)
}

/// Same check over a layer sequence, with optional coordinate sampling for
/// stacks too large to perturb exhaustively.
pub fn finite_diff_check_with<T: Scalar>(
    layers: &mut [Layer<T>],
    input: &Tensor<T>,
    epsilon: f64,
    seed: u64,
    options: CheckOptions,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Config(format!("epsilon must lie in (0, 1e-2], got {epsilon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let forward_seed = seed ^ FORWARD_STREAM;

    let (out, caches) = forward_all(layers, input, Mode::Training, &mut ChaCha8Rng::seed_from_u64(forward_seed))?;
    let weights = Tensor::<T>::random_uniform(out.shape(), -1.0, 1.0, &mut rng);
    let analytic = backward_all(layers, &caches, &weights)?;
    if !analytic.grad_input.is_finite() || analytic.grad_params.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("analytic gradient is not finite".into()));
    }

    let probe = |layers: &[Layer<T>], x: &Tensor<T>| -> Result<f64> {
        let (out, _) = forward_all(layers, x, Mode::Training, &mut ChaCha8Rng::seed_from_u64(forward_seed))?;
        Ok(out.dot(&weights)?.as_f64())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        coords_checked: 0,
    };
    let mut record = |where_: String, a: f64, n: f64| {
        let err = relative_error(a, n);
        report.coords_checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = format!("{where_}: analytic {a:e}, numeric {n:e}");
        }
    };
    let eps = T::lit(epsilon);

    let n_params = layers.iter().map(|l| l.params().len()).sum::<usize>();
    for pi in 0..n_params {
        let len = param_at(layers, pi).len();
        for j in pick_coords(len, options.max_coords_per_tensor, &mut rng) {
            let orig = param_at(layers, pi).data()[j];
            param_at(layers, pi).data_mut()[j] = orig + eps;
            let plus = probe(layers, input)?;
            param_at(layers, pi).data_mut()[j] = orig - eps;
            let minus = probe(layers, input)?;
            param_at(layers, pi).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            record(format!("param {pi}[{j}]"), analytic.grad_params[pi].data()[j].as_f64(), numeric);
        }
    }

    if !options.params_only {
        let mut x = input.clone();
        for j in pick_coords(x.len(), options.max_coords_per_tensor, &mut rng) {
            let orig = x.data()[j];
            x.data_mut()[j] = orig + eps;
            let plus = probe(layers, &x)?;
            x.data_mut()[j] = orig - eps;
            let minus = probe(layers, &x)?;
            x.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            record(format!("input[{j}]"), analytic.grad_input.data()[j].as_f64(), numeric);
        }
    }
    Ok(report)
}

fn param_at<T: Scalar>(layers: &mut [Layer<T>], index: usize) -> &mut Tensor<T> {
    layers
        .iter_mut()
        .flat_map(|l| l.params_mut())
        .nth(index)
        .expect("parameter index in range")
}

fn pick_coords(len: usize, budget: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match budget {
        Some(n) if n < len => {
            let mut picked = index::sample(rng, len, n).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..len).collect(),
    }
}

/// Central-difference gradient of a scalar function of a vector.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], epsilon: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + epsilon;
            let plus = f(&probe);
            probe[i] = orig - epsilon;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * epsilon)
        })
        .collect()
}
