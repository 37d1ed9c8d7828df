use super::tape::{Tape, Var};
use super::tensor::Parameterized;
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub coords: usize,
    /// Coordinates left out because a ReLU changed state within `±eps`.
    pub kinks: usize,
}

fn perturb<M: Parameterized<f64> + ?Sized>(model: &mut M, target: usize, coord: usize, delta: f64) {
    let mut k = 0;
    model.visit("", &mut |_, t| {
        if t.requires_grad {
            if k == target {
                t.data[coord] += delta;
            }
            k += 1;
        }
    });
}

/// Scale of the relative-error floor, in units of `max(1, |f|)`.
pub const ROUNDOFF_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(p+eps) - f(p-eps)) / 2eps` for every coordinate of
/// every trainable tensor of `model`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)` with
/// `floor = ROUNDOFF_FLOOR * max(1, |f|)`: a central difference of `f` carries
/// rounding noise around `1e-16 |f| / eps`, so gradients that are zero in exact
/// arithmetic (a bias feeding batch normalization) are compared absolutely.
///
/// A coordinate whose perturbation flips any ReLU is not differentiable
/// within the stencil; it is skipped and counted in
/// [`GradCheckReport::kinks`].
pub fn grad_check<M, F>(model: &mut M, eps: f64, f: F) -> Result<GradCheckReport>
where
    M: Parameterized<f64> + ?Sized,
    F: FnMut(&mut M, &mut Tape<f64>) -> Result<Var>,
{
    grad_check_sampled(model, eps, usize::MAX, f)
}

/// Evenly spaced coordinates of a tensor of length `len`, first and last
/// included, at most `max` of them.
fn sample_coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    if max <= 1 {
        return vec![0; max];
    }
    (0..max).map(|k| k * (len - 1) / (max - 1)).collect()
}

/// [`grad_check`] over at most `max_per_tensor` evenly spaced coordinates of
/// each trainable tensor.
pub fn grad_check_sampled<M, F>(model: &mut M, eps: f64, max_per_tensor: usize, mut f: F) -> Result<GradCheckReport>
where
    M: Parameterized<f64> + ?Sized,
    F: FnMut(&mut M, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(model, &mut tape)?;
    let floor = ROUNDOFF_FLOOR * tape.value(out)[0].abs().max(1.0);
    let gates = tape.relu_gates();
    tape.backward(out)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit("", &mut |name, t| {
        if t.requires_grad {
            let g = tape.grad_of(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
            analytic.push((name.to_string(), g));
        }
    });
    drop(tape);

    let mut eval = |m: &mut M| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let v = f(m, &mut tape)?;
        Ok((tape.value(v)[0], tape.relu_gates()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        worst_pair: (0.0, 0.0),
        coords: 0,
        kinks: 0,
    };
    for (p, (name, grad)) in analytic.iter().enumerate() {
        for i in sample_coords(grad.len(), max_per_tensor) {
            let a = grad[i];
            perturb(model, p, i, eps);
            let (plus, gates_plus) = eval(model)?;
            perturb(model, p, i, -2.0 * eps);
            let (minus, gates_minus) = eval(model)?;
            perturb(model, p, i, eps);
            if gates_plus != gates || gates_minus != gates {
                report.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.coords += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{name}[{i}]");
                report.worst_pair = (a, numeric);
            }
        }
    }
    Ok(report)
}
