//! Central finite-difference gradient checking in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{softmax_cross_entropy, Mode};
use crate::tensor::Tensor;

/// Step used by the central difference `(f(x+h) - f(x-h)) / 2h`.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of the scalar function
/// `f` at `x`, on `coords` (every coordinate when `None`).
pub fn grad_check(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    step: f64,
    tolerance: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    if analytic.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            lhs: analytic.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tolerance,
        passed: true,
    };
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}

/// Checks a tensor-to-tensor op through the scalar probe `sum(r * op(x))`
/// with a fixed random projection `r`. `backward(x, r)` must return the
/// vector-Jacobian product for upstream gradient `r`.
pub fn check_op(
    mut forward: impl FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
    backward: impl FnOnce(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
    x: &Tensor<f64>,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let y = forward(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_vec(y.shape(), (0..y.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let analytic = backward(x, &r)?;
    let probe = |t: &Tensor<f64>| -> Result<f64> {
        let y = forward(t)?;
        Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };
    grad_check(probe, x, &analytic, DEFAULT_STEP, tolerance, None)
}

/// Up to `count` distinct coordinates of a tensor with `len` elements.
pub fn sample_coords(len: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, count).into_vec()
}

/// Gradient check of the cross-entropy loss of a whole model (train mode)
/// with respect to every parameter tensor and the input.
///
/// Central differences are only meaningful where `f(x+h)` and `f(x-h)` run
/// through the same ReLU signs and max-pool winners. Coordinates whose
/// probes land on different sides of such a switch are counted in
/// `kinked` and replaced by other coordinates, up to `per_tensor` smooth
/// ones per tensor.
pub fn check_model(
    model: &Model<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    per_tensor: usize,
    tolerance: f64,
    seed: u64,
) -> Result<Vec<ModelCheck>> {
    let engine = Engine::sequential();
    let mut m = model.clone();
    let logits = m.forward(x, Mode::Train, &engine)?;
    let grads = m.backward(&softmax_cross_entropy(&logits, labels)?.grad_logits, &engine)?;
    let base = m.branch_pattern();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let infos = model.param_info();
    let mut out = Vec::new();
    for t in 0..=infos.len() {
        let is_input = t == infos.len();
        let (name, x0, analytic) = if is_input {
            ("input".to_string(), x.clone(), &grads.input)
        } else {
            (infos[t].name.clone(), model.params()[t].clone(), &grads.params[t])
        };
        let mut probe = model.clone();
        let mut eval = |v: &Tensor<f64>| -> Result<(f64, Vec<u64>)> {
            let logits = if is_input {
                probe.forward(v, Mode::Train, &engine)?
            } else {
                *probe.params_mut()[t] = v.clone();
                probe.forward(x, Mode::Train, &engine)?
            };
            Ok((softmax_cross_entropy(&logits, labels)?.loss, probe.branch_pattern()))
        };
        let order = sample_coords(x0.numel(), x0.numel(), &mut rng);
        let (mut smooth, mut kinked) = (Vec::new(), 0);
        let mut v = x0.clone();
        // Bounded scan so a kink-dense tensor cannot stall the check.
        for &i in order.iter().take(per_tensor.saturating_mul(20)) {
            if smooth.len() == per_tensor {
                break;
            }
            let orig = v.data()[i];
            v.data_mut()[i] = orig + DEFAULT_STEP;
            let (_, up) = eval(&v)?;
            v.data_mut()[i] = orig - DEFAULT_STEP;
            let (_, down) = eval(&v)?;
            v.data_mut()[i] = orig;
            if up == base && down == base {
                smooth.push(i);
            } else {
                kinked += 1;
            }
        }
        let report = grad_check(|p| Ok(eval(p)?.0), &x0, analytic, DEFAULT_STEP, tolerance, Some(&smooth))?;
        out.push(ModelCheck { name, report, kinked });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ModelCheck {
    pub name: String,
    pub report: GradCheckReport,
    /// Coordinates skipped because a probe crossed a ReLU or max-pool switch.
    pub kinked: usize,
}
