//! Sequential integer solves with frozen scales and zeros: round-freeze-
//! reoptimize (Level1) and round-with-closed-form-compensation (Level2).

use crate::config::{derive_seed, ApproxLevel};
use crate::error::DqError;
use crate::layerwise::grid::{degenerate_groups, group_expand};
use crate::layerwise::pgd::pgd_with_bound;
use crate::layerwise::ColumnProblem;
use crate::linalg::{inverse_upper_factor, spectral_upper_bound, InverseFactor};
use crate::tensor::Tensor2D;

/// Seed tag for the spectral bound that sets the PGD step size.
const SEED_TAG_STEP_BOUND: u64 = 0x7365715f73746570;

/// One integer half-step: the new weights plus any ridge that a per-column
/// refactorization had to apply.
#[derive(Debug, Clone)]
pub(crate) struct WStep {
    pub qweights: Vec<i32>,
    pub ridge: Option<f64>,
}

/// Quadratic data for one column with (s, z) frozen: minimizing over w is
/// ½wᵀH′w + cᵀw + const with H′ = D H D, D = diag(group_expand(s)).
/// Degenerate coordinates are excluded: their H′ row/col is zeroed with a
/// unit diagonal and their linear term is zero, while their constant residual
/// (z̄ − b) still feeds the linear term of the free coordinates.
struct ColumnQp {
    hprime: Tensor2D,
    linear: Vec<f64>,
    sbar: Vec<f64>,
    zbar: Vec<f64>,
    degen: Vec<bool>,
    any_degen: bool,
}

fn build_qp(prob: &ColumnProblem<'_>, scales: &[f64], zeros: &[f64]) -> Result<ColumnQp, DqError> {
    let b = prob.target;
    let d = b.len();
    let sbar = group_expand(scales, d)?;
    let zbar = group_expand(zeros, d)?;
    let group_degen = degenerate_groups(scales);
    let rep = d / scales.len();
    let degen: Vec<bool> = (0..d).map(|i| group_degen[i / rep]).collect();
    let any_degen = degen.iter().any(|&x| x);

    let h = prob.hessian.matrix();
    let mut hprime = Tensor2D::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let v = if degen[i] || degen[j] {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            } else {
                sbar[i] * h.get(i, j) * sbar[j]
            };
            hprime.set(i, j, v);
        }
    }

    let offset: Vec<f64> = (0..d).map(|i| zbar[i] - b[i]).collect();
    let h_offset = h.matvec(&offset);
    let linear: Vec<f64> = (0..d)
        .map(|i| if degen[i] { 0.0 } else { sbar[i] * h_offset[i] })
        .collect();

    Ok(ColumnQp {
        hprime,
        linear,
        sbar,
        zbar,
        degen,
        any_degen,
    })
}

fn finish_codes(x: &[f64], degen: &[bool], alpha: i32, beta: i32) -> Vec<i32> {
    let pinned = 0i32.clamp(alpha, beta);
    x.iter()
        .zip(degen)
        .map(|(&v, &dg)| {
            if dg {
                pinned
            } else {
                v.round_ties_even().clamp(alpha as f64, beta as f64) as i32
            }
        })
        .collect()
}

/// Level1: a warm-up PGD pass over the whole box, then each coordinate in
/// index order is rounded, clipped, and frozen, with a short PGD
/// re-optimization of the remaining free coordinates after each freeze.
pub(crate) fn solve_w_level1(
    prob: &ColumnProblem<'_>,
    scales: &[f64],
    zeros: &[f64],
    start: &[i32],
) -> Result<WStep, DqError> {
    let cfg = prob.cfg;
    let qp = build_qp(prob, scales, zeros)?;
    let d = prob.target.len();
    let (lo, hi) = (cfg.alpha as f64, cfg.beta as f64);
    let step_bound = spectral_upper_bound(&qp.hprime, derive_seed(cfg.seed, SEED_TAG_STEP_BOUND));

    let mut x: Vec<f64> = start
        .iter()
        .zip(&qp.degen)
        .map(|(&w, &dg)| if dg { 0.0 } else { (w as f64).clamp(lo, hi) })
        .collect();
    let mut fixed = qp.degen.clone();

    if cfg.warmup_pgd_iters > 0 && fixed.iter().any(|f| !f) {
        x = pgd_with_bound(
            &qp.hprime,
            &qp.linear,
            &x,
            lo,
            hi,
            &fixed,
            cfg.warmup_pgd_iters,
            cfg.pgd_tolerance,
            step_bound,
        )
        .x;
    }

    for j in 0..d {
        if qp.degen[j] {
            continue;
        }
        x[j] = x[j].round_ties_even().clamp(lo, hi);
        fixed[j] = true;
        if cfg.seq_pgd_iters > 0 && fixed.iter().any(|f| !f) {
            x = pgd_with_bound(
                &qp.hprime,
                &qp.linear,
                &x,
                lo,
                hi,
                &fixed,
                cfg.seq_pgd_iters,
                cfg.pgd_tolerance,
                step_bound,
            )
            .x;
        }
    }

    Ok(WStep {
        qweights: finish_codes(&x, &qp.degen, cfg.alpha, cfg.beta),
        ridge: None,
    })
}

/// Scales column j of an upper-triangular factor by 1/s̄_j; turns a factor of
/// H⁻¹ into a factor of (DHD)⁻¹.
fn scale_factor_columns(upper: &Tensor2D, sbar: &[f64]) -> Tensor2D {
    let n = upper.rows();
    let mut out = Tensor2D::zeros(n, n);
    for i in 0..n {
        #[allow(clippy::needless_range_loop)]
        for j in i..n {
            out.set(i, j, upper.get(i, j) / sbar[j]);
        }
    }
    out
}

/// Level2: starts from the unconstrained minimizer w*ᵢ = (bᵢ − z̄ᵢ)/s̄ᵢ and,
/// in index order, rounds and clips each coordinate, then shifts the free
/// suffix by the exact unconstrained correction
/// δ_F = (q_j − w_j) · U_{j,F} / U_{j,j}, where (H′)⁻¹ = UᵀU.
///
/// When no group is degenerate the factor is derived from a single
/// layer-level factorization of H by column scaling; degenerate columns fall
/// back to factorizing their own modified H′.
pub(crate) fn solve_w_level2(
    prob: &ColumnProblem<'_>,
    scales: &[f64],
    zeros: &[f64],
    layer_factor: Option<&InverseFactor>,
) -> Result<WStep, DqError> {
    let cfg = prob.cfg;
    let qp = build_qp(prob, scales, zeros)?;
    let d = prob.target.len();
    let (lo, hi) = (cfg.alpha as f64, cfg.beta as f64);

    let mut ridge = None;
    let upper: Tensor2D = if qp.any_degen {
        let f = inverse_upper_factor(&qp.hprime)?;
        ridge = f.ridge;
        f.upper
    } else {
        match layer_factor {
            Some(f) => scale_factor_columns(&f.upper, &qp.sbar),
            None => {
                let f = inverse_upper_factor(prob.hessian.matrix())?;
                ridge = f.ridge;
                scale_factor_columns(&f.upper, &qp.sbar)
            }
        }
    };

    let mut x: Vec<f64> = (0..d)
        .map(|i| {
            if qp.degen[i] {
                0.0
            } else {
                (prob.target[i] - qp.zbar[i]) / qp.sbar[i]
            }
        })
        .collect();

    for j in 0..d {
        if qp.degen[j] {
            continue;
        }
        let q = x[j].round_ties_even().clamp(lo, hi);
        let err = q - x[j];
        x[j] = q;
        if err != 0.0 && j + 1 < d {
            let ujj = upper.get(j, j);
            #[allow(clippy::needless_range_loop)]
            for f in (j + 1)..d {
                if !qp.degen[f] {
                    x[f] += err * upper.get(j, f) / ujj;
                }
            }
        }
    }

    Ok(WStep {
        qweights: finish_codes(&x, &qp.degen, cfg.alpha, cfg.beta),
        ridge,
    })
}

/// One integer half-step with (s, z) frozen, dispatched on the configured
/// approximation level. Level1 starts from `w_start`; Level2 starts from the
/// unconstrained minimizer and ignores `w_start`.
pub fn solve_w(
    prob: &ColumnProblem<'_>,
    scales: &[f64],
    zeros: &[f64],
    w_start: &[i32],
) -> Result<Vec<i32>, DqError> {
    if w_start.len() != prob.target.len() {
        return Err(DqError::InvalidData(format!(
            "start vector length {} does not match dimension {}",
            w_start.len(),
            prob.target.len()
        )));
    }
    let step = match prob.cfg.approx_level {
        ApproxLevel::Level1 => solve_w_level1(prob, scales, zeros, w_start)?,
        ApproxLevel::Level2 => solve_w_level2(prob, scales, zeros, None)?,
    };
    Ok(step.qweights)
}
