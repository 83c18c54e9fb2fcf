//! Exhaustive enumeration oracle. Walks every integer candidate on the grid,
//! pairs each with its analytic (s, z), and returns the global minimum of the
//! reconstruction objective. Exponential in d_in; guarded by a budget.

use rayon::prelude::*;

use crate::error::DqError;
use crate::layerwise::{
    initial_guess, recon_loss_quantized, solve_sz, ColumnProblem, ColumnSolution,
};

/// Default ceiling on the number of enumerated candidates (2^20).
pub const DEFAULT_ORACLE_BUDGET: u64 = 1 << 20;

/// Chunk of the candidate space evaluated by one parallel task.
const ENUM_CHUNK: u64 = 4096;

/// Globally optimal integer assignment with its paired scale/zero solution.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub w_opt: Vec<i32>,
    pub s_opt: Vec<f64>,
    pub z_opt: Vec<f64>,
    pub g_opt: f64,
    pub candidates_evaluated: u64,
}

/// Decodes candidate `idx` into an integer vector; index 0 varies slowest, so
/// ascending indices enumerate candidates in ascending lexicographic order.
fn decode_candidate(mut idx: u64, d: usize, span: u64, alpha: i32) -> Vec<i32> {
    let mut w = vec![0i32; d];
    for i in (0..d).rev() {
        w[i] = alpha + (idx % span) as i32;
        idx /= span;
    }
    w
}

struct Best {
    idx: u64,
    g: f64,
    w: Vec<i32>,
    s: Vec<f64>,
    z: Vec<f64>,
}

/// Enumerates every w ∈ [alpha, beta]^d. For each candidate the objective is
/// evaluated at the analytic (s, z) minimizer, or at the pinned pair when the
/// config fixes one. Ties in g keep the lexicographically smallest w.
/// Candidates whose analytic solve stays singular at maximum ridge are
/// skipped; everything else is an upper bound the minimum must beat strictly.
pub fn exhaustive_solve(prob: &ColumnProblem<'_>, budget: u64) -> Result<OracleResult, DqError> {
    let cfg = prob.cfg;
    let d = prob.target.len();
    let span = cfg.grid_span() as u64;
    let total = span
        .checked_pow(u32::try_from(d).unwrap_or(u32::MAX))
        .filter(|&t| t <= budget)
        .ok_or_else(|| {
            let needed = (0..d).try_fold(1u64, |acc, _| acc.checked_mul(span));
            DqError::InvalidConfig(match needed {
                Some(n) => format!(
                    "exhaustive enumeration needs {n} candidates ({span}^{d}), \
                     which exceeds the budget of {budget}; raise the budget to at least {n}"
                ),
                None => format!(
                    "exhaustive enumeration needs {span}^{d} candidates, \
                     which overflows; this instance is far beyond any budget"
                ),
            })
        })?;

    let evaluate = |idx: u64| -> Option<Best> {
        let w = decode_candidate(idx, d, span, cfg.alpha);
        let (s, z) = match cfg.fixed_sz {
            Some((s, z)) => (vec![s; cfg.group_count], vec![z; cfg.group_count]),
            None => match solve_sz(&w, prob.target, prob.hessian, cfg.group_count) {
                Ok(sz) => (sz.scales, sz.zeros),
                Err(DqError::Singular { .. }) => return None,
                Err(_) => return None,
            },
        };
        let g = recon_loss_quantized(&w, &s, &z, prob.target, prob.hessian).ok()?;
        Some(Best { idx, g, w, s, z })
    };

    let n_chunks = total.div_ceil(ENUM_CHUNK);
    let chunk_bests: Vec<Option<Best>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * ENUM_CHUNK;
            let hi = (lo + ENUM_CHUNK).min(total);
            let mut best: Option<Best> = None;
            for idx in lo..hi {
                if let Some(cand) = evaluate(idx) {
                    // Strict improvement within ascending order keeps the
                    // lexicographically smallest candidate on ties.
                    if best.as_ref().is_none_or(|b| cand.g < b.g) {
                        best = Some(cand);
                    }
                }
            }
            best
        })
        .collect();

    let mut best: Option<Best> = None;
    for cand in chunk_bests.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some(b) => cand.g < b.g || (cand.g == b.g && cand.idx < b.idx),
        };
        if better {
            best = Some(cand);
        }
    }
    let best = best.ok_or_else(|| {
        DqError::Numerical("every enumerated candidate failed its scale/zero solve".into())
    })?;
    Ok(OracleResult {
        w_opt: best.w,
        s_opt: best.s,
        z_opt: best.z,
        g_opt: best.g,
        candidates_evaluated: total,
    })
}

/// Classical round-to-nearest baseline: the grid-search initialization alone,
/// reported in the same shape as the full solver (equivalent to running the
/// alternation for zero rounds).
pub fn rtn_baseline(prob: &ColumnProblem<'_>) -> Result<ColumnSolution, DqError> {
    let init = initial_guess(prob)?;
    Ok(ColumnSolution {
        qweights: init.qweights,
        scales: init.scales,
        zeros: init.zeros,
        g_init: init.loss,
        g_final: init.loss,
        g_trajectory: Vec::new(),
        ridge_events: Vec::new(),
        flagged: false,
    })
}
