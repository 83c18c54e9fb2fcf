//! Projected gradient descent for box-constrained convex quadratics with a
//! frozen-coordinate mask.

use crate::linalg::spectral_upper_bound;
use crate::tensor::Tensor2D;

/// Result of a PGD run. `objective_trace[0]` is the objective at the
/// (projected) starting point; one more entry follows per executed step, so
/// the trace is non-increasing throughout.
#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub x: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// Minimizes ½xᵀQx + cᵀx over the box [lo, hi] on free coordinates, taking
/// gradient steps of size 1/L with L an upper bound on λ_max(Q), then
/// clamping. Fixed coordinates never move. Stops early when the projected
/// gradient infinity norm over the free coordinates drops below `tol`.
#[allow(clippy::too_many_arguments)]
pub fn pgd_box_minimize(
    quadratic: &Tensor2D,
    linear: &[f64],
    x0: &[f64],
    lo: f64,
    hi: f64,
    fixed: &[bool],
    iters: usize,
    tol: f64,
    seed: u64,
) -> PgdOutcome {
    let l = spectral_upper_bound(quadratic, seed);
    pgd_with_bound(quadratic, linear, x0, lo, hi, fixed, iters, tol, l)
}

/// PGD with a caller-supplied step bound, so the inner sequential loop can
/// reuse one spectral bound across many short runs on the same matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pgd_with_bound(
    quadratic: &Tensor2D,
    linear: &[f64],
    x0: &[f64],
    lo: f64,
    hi: f64,
    fixed: &[bool],
    iters: usize,
    tol: f64,
    l: f64,
) -> PgdOutcome {
    let n = x0.len();
    debug_assert_eq!(quadratic.rows(), n);
    debug_assert_eq!(linear.len(), n);
    debug_assert_eq!(fixed.len(), n);

    let step = 1.0 / l;
    let mut x: Vec<f64> = x0
        .iter()
        .zip(fixed)
        .map(|(&v, &f)| if f { v } else { v.clamp(lo, hi) })
        .collect();

    let objective = |x: &[f64]| {
        let qx = quadratic.matvec(x);
        0.5 * x.iter().zip(&qx).map(|(a, b)| a * b).sum::<f64>()
            + linear.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    };

    let mut trace = vec![objective(&x)];
    let mut iterations = 0;
    for _ in 0..iters {
        let qx = quadratic.matvec(&x);
        let mut pg_norm = 0.0f64;
        let mut grad = vec![0.0; n];
        for i in 0..n {
            grad[i] = qx[i] + linear[i];
            if fixed[i] {
                continue;
            }
            // At an active bound only the inward gradient component counts.
            let pg = if x[i] <= lo {
                grad[i].min(0.0)
            } else if x[i] >= hi {
                grad[i].max(0.0)
            } else {
                grad[i]
            };
            pg_norm = pg_norm.max(pg.abs());
        }
        if pg_norm < tol {
            break;
        }
        for i in 0..n {
            if !fixed[i] {
                x[i] = (x[i] - step * grad[i]).clamp(lo, hi);
            }
        }
        iterations += 1;
        trace.push(objective(&x));
    }

    PgdOutcome {
        x,
        objective_trace: trace,
        iterations,
    }
}
