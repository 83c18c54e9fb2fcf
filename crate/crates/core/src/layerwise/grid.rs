//! Grid primitives: group broadcasting, round-to-nearest quantization,
//! dequantization, the per-column reconstruction objective, and the
//! shrink-factor search that initializes scales and zero points.

use crate::error::DqError;
use crate::layerwise::ColumnProblem;
use crate::linalg::Hessian;

/// Groups whose |scale| falls this far below the column's largest |scale|
/// (or is exactly zero) are treated as degenerate: their integer weights
/// carry no signal and are pinned to clip(0).
pub(crate) const DEGENERATE_SCALE_RTOL: f64 = 1e-12;

/// Marks degenerate groups. A zero scale is always degenerate; others are
/// degenerate relative to the largest scale magnitude in the column.
pub(crate) fn degenerate_groups(scales: &[f64]) -> Vec<bool> {
    let max_abs = scales.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    scales
        .iter()
        .map(|&s| s == 0.0 || s.abs() < DEGENERATE_SCALE_RTOL * max_abs)
        .collect()
}

fn group_size(d_in: usize, groups: usize) -> Result<usize, DqError> {
    if groups == 0 {
        return Err(DqError::InvalidConfig("group vector is empty".into()));
    }
    if !d_in.is_multiple_of(groups) {
        return Err(DqError::InvalidConfig(format!(
            "group count {groups} does not divide input dimension {d_in}"
        )));
    }
    Ok(d_in / groups)
}

fn check_group_pair(d_in: usize, scales: &[f64], zeros: &[f64]) -> Result<usize, DqError> {
    if scales.len() != zeros.len() {
        return Err(DqError::InvalidData(format!(
            "scales ({}) and zeros ({}) disagree on group count",
            scales.len(),
            zeros.len()
        )));
    }
    group_size(d_in, scales.len())
}

/// Repeats each group value over its contiguous block of input indices.
pub fn group_expand(values: &[f64], d_in: usize) -> Result<Vec<f64>, DqError> {
    let rep = group_size(d_in, values.len())?;
    Ok(values
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, rep))
        .collect())
}

/// Round-to-nearest quantization onto the integer grid [alpha, beta] with
/// per-group affine parameters. Ties round half to even. Degenerate groups
/// produce clip(0).
pub fn rtn_quantize(
    target: &[f64],
    scales: &[f64],
    zeros: &[f64],
    alpha: i32,
    beta: i32,
) -> Result<Vec<i32>, DqError> {
    let rep = check_group_pair(target.len(), scales, zeros)?;
    let degen = degenerate_groups(scales);
    let (lo, hi) = (alpha as f64, beta as f64);
    let pinned = 0i32.clamp(alpha, beta);
    Ok(target
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let g = i / rep;
            if degen[g] {
                pinned
            } else {
                let t = ((b - zeros[g]) / scales[g]).round_ties_even();
                t.clamp(lo, hi) as i32
            }
        })
        .collect())
}

/// Affine reconstruction: group_expand(s)⊙w + group_expand(z).
pub fn dequantize(qweights: &[i32], scales: &[f64], zeros: &[f64]) -> Result<Vec<f64>, DqError> {
    let rep = check_group_pair(qweights.len(), scales, zeros)?;
    Ok(qweights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let g = i / rep;
            scales[g] * w as f64 + zeros[g]
        })
        .collect())
}

/// Quadratic reconstruction objective g = ½ rᵀHr with
/// r = group_expand(s)⊙w + group_expand(z) − b, for real-valued levels.
pub fn recon_loss(
    levels: &[f64],
    scales: &[f64],
    zeros: &[f64],
    target: &[f64],
    hessian: &Hessian,
) -> Result<f64, DqError> {
    let rep = check_group_pair(levels.len(), scales, zeros)?;
    if levels.len() != target.len() || levels.len() != hessian.dim() {
        return Err(DqError::InvalidData(format!(
            "loss dimension mismatch: levels {}, target {}, hessian {}",
            levels.len(),
            target.len(),
            hessian.dim()
        )));
    }
    let r: Vec<f64> = levels
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let g = i / rep;
            scales[g] * w + zeros[g] - target[i]
        })
        .collect();
    Ok(0.5 * hessian.quadratic_form(&r))
}

/// Same objective evaluated at an integer point.
pub fn recon_loss_quantized(
    qweights: &[i32],
    scales: &[f64],
    zeros: &[f64],
    target: &[f64],
    hessian: &Hessian,
) -> Result<f64, DqError> {
    let levels: Vec<f64> = qweights.iter().map(|&w| w as f64).collect();
    recon_loss(&levels, scales, zeros, target, hessian)
}

/// Initialization produced by the shrink-factor search.
#[derive(Debug, Clone)]
pub struct InitGuess {
    pub scales: Vec<f64>,
    pub zeros: Vec<f64>,
    pub qweights: Vec<i32>,
    /// Full reconstruction objective of the returned triple.
    pub loss: f64,
}

/// Scans shrink factors p uniformly over [grid_shrink_min, grid_shrink_max];
/// each candidate maps every group's value range [b_min, b_max] onto the
/// integer grid via s = p(b_max−b_min)/(β−α), z = p·b_min − s·α, rounds with
/// rtn_quantize, and scores the full coupled objective. Returns the best
/// candidate. With `per_group_shrink` each group picks its own p by a local
/// objective restricted to that group's Hessian block.
pub fn grid_search_init(prob: &ColumnProblem<'_>) -> Result<InitGuess, DqError> {
    let cfg = prob.cfg;
    let b = prob.target;
    let d = b.len();
    let ng = cfg.group_count;
    let rep = d / ng;
    let span = (cfg.beta - cfg.alpha) as f64;
    let alpha_f = cfg.alpha as f64;

    let mut lo = vec![f64::INFINITY; ng];
    let mut hi = vec![f64::NEG_INFINITY; ng];
    for (i, &v) in b.iter().enumerate() {
        let g = i / rep;
        lo[g] = lo[g].min(v);
        hi[g] = hi[g].max(v);
    }

    let points = cfg.grid_points;
    let shrink_at = |k: usize| {
        cfg.grid_shrink_min
            + (cfg.grid_shrink_max - cfg.grid_shrink_min) * k as f64 / (points - 1) as f64
    };
    let sz_at = |p: f64, g: usize| {
        let s = p * (hi[g] - lo[g]) / span;
        let z = p * lo[g] - s * alpha_f;
        (s, z)
    };

    if cfg.per_group_shrink {
        let h = prob.hessian.matrix();
        let mut scales = vec![0.0; ng];
        let mut zeros = vec![0.0; ng];
        for g in 0..ng {
            let rows = g * rep..(g + 1) * rep;
            let slice = &b[rows.clone()];
            let mut best: Option<(f64, f64, f64)> = None;
            for k in 0..points {
                let (s, z) = sz_at(shrink_at(k), g);
                let wg = rtn_quantize(slice, &[s], &[z], cfg.alpha, cfg.beta)?;
                let r: Vec<f64> = wg
                    .iter()
                    .zip(slice)
                    .map(|(&w, &t)| s * w as f64 + z - t)
                    .collect();
                let mut q = 0.0;
                for (ii, i) in rows.clone().enumerate() {
                    for (jj, j) in rows.clone().enumerate() {
                        q += r[ii] * h.get(i, j) * r[jj];
                    }
                }
                let local = 0.5 * q.max(0.0);
                if best.is_none_or(|(bl, _, _)| local < bl) {
                    best = Some((local, s, z));
                }
            }
            let (_, s, z) = best.expect("grid_points >= 2 guarantees a candidate");
            scales[g] = s;
            zeros[g] = z;
        }
        let qweights = rtn_quantize(b, &scales, &zeros, cfg.alpha, cfg.beta)?;
        let loss = recon_loss_quantized(&qweights, &scales, &zeros, b, prob.hessian)?;
        return Ok(InitGuess {
            scales,
            zeros,
            qweights,
            loss,
        });
    }

    let mut best: Option<InitGuess> = None;
    for k in 0..points {
        let p = shrink_at(k);
        let mut scales = vec![0.0; ng];
        let mut zeros = vec![0.0; ng];
        for g in 0..ng {
            let (s, z) = sz_at(p, g);
            scales[g] = s;
            zeros[g] = z;
        }
        let qweights = rtn_quantize(b, &scales, &zeros, cfg.alpha, cfg.beta)?;
        let loss = recon_loss_quantized(&qweights, &scales, &zeros, b, prob.hessian)?;
        if best.as_ref().is_none_or(|bb| loss < bb.loss) {
            best = Some(InitGuess {
                scales,
                zeros,
                qweights,
                loss,
            });
        }
    }
    Ok(best.expect("grid_points >= 2 guarantees a candidate"))
}
