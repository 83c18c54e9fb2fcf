//! Per-column quantization: weights are decoupled into an integer grid part
//! and per-group affine (scale, zero) parameters, then solved by alternating
//! an integer half-step with (s, z) frozen and an analytic (s, z) half-step
//! with the integers frozen. Columns are independent and may run in parallel.

pub mod grid;
pub mod pgd;
pub mod sequential;

use std::time::Instant;

use rayon::prelude::*;

use crate::config::{ApproxLevel, QuantConfig};
use crate::error::DqError;
use crate::format::{pack_codes, packed_len, unpack_codes};
use crate::linalg::{inverse_upper_factor, solve_spd, Hessian, InverseFactor};
use crate::report::{ColumnReport, ReportTimings, ReportTotals, SolveReport};
use crate::tensor::Tensor2D;

pub use grid::{
    dequantize, grid_search_init, group_expand, recon_loss, recon_loss_quantized, rtn_quantize,
    InitGuess,
};
pub use pgd::{pgd_box_minimize, PgdOutcome};
pub use sequential::solve_w;

/// One output column's quantization instance: the target weights, the shared
/// layer Hessian, and the solver configuration.
#[derive(Debug, Clone, Copy)]
pub struct ColumnProblem<'a> {
    pub target: &'a [f64],
    pub hessian: &'a Hessian,
    pub cfg: &'a QuantConfig,
}

impl<'a> ColumnProblem<'a> {
    pub fn new(
        target: &'a [f64],
        hessian: &'a Hessian,
        cfg: &'a QuantConfig,
    ) -> Result<Self, DqError> {
        cfg.validate_for_dim(target.len())?;
        if hessian.dim() != target.len() {
            return Err(DqError::InvalidData(format!(
                "hessian dimension {} does not match column length {}",
                hessian.dim(),
                target.len()
            )));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(DqError::InvalidData(
                "column contains a non-finite weight".into(),
            ));
        }
        Ok(Self {
            target,
            hessian,
            cfg,
        })
    }
}

/// Result of the analytic scale/zero half-step.
#[derive(Debug, Clone)]
pub struct SzSolve {
    pub scales: Vec<f64>,
    pub zeros: Vec<f64>,
    /// Ridge the normal-equation solve had to apply, if any.
    pub ridge: Option<f64>,
}

/// With the integers frozen, the objective is an unconstrained quadratic in
/// u = (s, z); its minimizer solves the normal equations (AᵀHA)u = AᵀHb,
/// where column g of the design matrix A carries the integer weights on group
/// g's rows and column ng+g carries ones there.
///
/// A group whose integers are all zero contributes an exactly-zero row and
/// column to AᵀHA; the ridge fallback then returns s_g = 0.0 exactly, so
/// degenerate groups stay degenerate instead of picking up noise.
pub fn solve_sz(
    qweights: &[i32],
    target: &[f64],
    hessian: &Hessian,
    group_count: usize,
) -> Result<SzSolve, DqError> {
    let d = target.len();
    if qweights.len() != d || hessian.dim() != d {
        return Err(DqError::InvalidData(format!(
            "scale/zero solve dimension mismatch: weights {}, target {d}, hessian {}",
            qweights.len(),
            hessian.dim()
        )));
    }
    if group_count == 0 || !d.is_multiple_of(group_count) {
        return Err(DqError::InvalidConfig(format!(
            "group count {group_count} does not divide input dimension {d}"
        )));
    }
    let ng = group_count;
    let rep = d / ng;
    let h = hessian.matrix();

    // ha[i][c] = (H·a_c)_i for the 2ng design columns.
    let mut ha = Tensor2D::zeros(d, 2 * ng);
    for g in 0..ng {
        let rows = g * rep..(g + 1) * rep;
        for i in 0..d {
            let mut acc_w = 0.0;
            let mut acc_one = 0.0;
            for r in rows.clone() {
                acc_w += h.get(i, r) * qweights[r] as f64;
                acc_one += h.get(i, r);
            }
            ha.set(i, g, acc_w);
            ha.set(i, ng + g, acc_one);
        }
    }

    // a_c ᵀ v restricted to the rows where column c is nonzero.
    let against = |c: usize, v: &dyn Fn(usize) -> f64| -> f64 {
        let g = c % ng;
        let rows = g * rep..(g + 1) * rep;
        if c < ng {
            rows.map(|r| qweights[r] as f64 * v(r)).sum()
        } else {
            rows.map(v).sum()
        }
    };

    // Normal matrix built exactly symmetric: upper triangle, then mirrored.
    let mut normal = Tensor2D::zeros(2 * ng, 2 * ng);
    for c1 in 0..2 * ng {
        for c2 in c1..2 * ng {
            let v = against(c1, &|r| ha.get(r, c2));
            normal.set(c1, c2, v);
            normal.set(c2, c1, v);
        }
    }
    let hb = h.matvec(target);
    let mut rhs = Tensor2D::zeros(2 * ng, 1);
    for c in 0..2 * ng {
        rhs.set(c, 0, against(c, &|r| hb[r]));
    }

    let solved = solve_spd(&normal, &rhs).map_err(|e| match e {
        DqError::Singular { max_ridge, .. } => DqError::Singular {
            context: "scale/zero solve".into(),
            max_ridge,
        },
        other => other,
    })?;
    let u = solved.solution;
    Ok(SzSolve {
        scales: (0..ng).map(|g| u.get(g, 0)).collect(),
        zeros: (0..ng).map(|g| u.get(ng + g, 0)).collect(),
        ridge: solved.ridge,
    })
}

/// Starting triple for the alternation: the shrink-factor search, or plain
/// round-to-nearest when the config pins (s, z).
pub fn initial_guess(prob: &ColumnProblem<'_>) -> Result<InitGuess, DqError> {
    match prob.cfg.fixed_sz {
        Some((s, z)) => {
            let ng = prob.cfg.group_count;
            let scales = vec![s; ng];
            let zeros = vec![z; ng];
            let qweights =
                rtn_quantize(prob.target, &scales, &zeros, prob.cfg.alpha, prob.cfg.beta)?;
            let loss = recon_loss_quantized(&qweights, &scales, &zeros, prob.target, prob.hessian)?;
            Ok(InitGuess {
                scales,
                zeros,
                qweights,
                loss,
            })
        }
        None => grid_search_init(prob),
    }
}

/// Outcome of quantizing one column.
#[derive(Debug, Clone)]
pub struct ColumnSolution {
    pub qweights: Vec<i32>,
    pub scales: Vec<f64>,
    pub zeros: Vec<f64>,
    /// Objective of the initialization.
    pub g_init: f64,
    /// Lowest recomputed objective observed anywhere along the alternation;
    /// the returned triple is the iterate that produced it.
    pub g_final: f64,
    /// Objective after every half-step: two entries per round, one per round
    /// when (s, z) are pinned.
    pub g_trajectory: Vec<f64>,
    /// Ridge values applied by any solve along the way.
    pub ridge_events: Vec<f64>,
    /// True when an analytic solve stayed singular at maximum ridge and the
    /// column returned its best earlier iterate.
    pub flagged: bool,
}

/// Runs the full alternation for one column.
pub fn solve_column(prob: &ColumnProblem<'_>) -> Result<ColumnSolution, DqError> {
    solve_column_with_factor(prob, None)
}

pub(crate) fn solve_column_with_factor(
    prob: &ColumnProblem<'_>,
    layer_factor: Option<&InverseFactor>,
) -> Result<ColumnSolution, DqError> {
    let cfg = prob.cfg;
    let init = initial_guess(prob)?;
    let g_init = init.loss;

    let mut qweights = init.qweights.clone();
    let mut scales = init.scales.clone();
    let mut zeros = init.zeros.clone();
    let mut best = (init.loss, init.qweights, init.scales, init.zeros);

    let mut trajectory = Vec::with_capacity(2 * cfg.rounds);
    let mut ridge_events = Vec::new();
    let mut flagged = false;

    'rounds: for _ in 0..cfg.rounds {
        let step = match cfg.approx_level {
            ApproxLevel::Level1 => sequential::solve_w_level1(prob, &scales, &zeros, &qweights),
            ApproxLevel::Level2 => sequential::solve_w_level2(prob, &scales, &zeros, layer_factor),
        };
        match step {
            Ok(s) => {
                qweights = s.qweights;
                if let Some(r) = s.ridge {
                    ridge_events.push(r);
                }
            }
            Err(DqError::Singular { .. }) => {
                flagged = true;
                break 'rounds;
            }
            Err(e) => return Err(e),
        }
        let g = recon_loss_quantized(&qweights, &scales, &zeros, prob.target, prob.hessian)?;
        trajectory.push(g);
        if g < best.0 {
            best = (g, qweights.clone(), scales.clone(), zeros.clone());
        }

        if cfg.fixed_sz.is_none() {
            match solve_sz(&qweights, prob.target, prob.hessian, cfg.group_count) {
                Ok(sz) => {
                    scales = sz.scales;
                    zeros = sz.zeros;
                    if let Some(r) = sz.ridge {
                        ridge_events.push(r);
                    }
                }
                Err(DqError::Singular { .. }) => {
                    flagged = true;
                    break 'rounds;
                }
                Err(e) => return Err(e),
            }
            let g = recon_loss_quantized(&qweights, &scales, &zeros, prob.target, prob.hessian)?;
            trajectory.push(g);
            if g < best.0 {
                best = (g, qweights.clone(), scales.clone(), zeros.clone());
            }
        }
    }

    let (g_final, qweights, scales, zeros) = best;
    Ok(ColumnSolution {
        qweights,
        scales,
        zeros,
        g_init,
        g_final,
        g_trajectory: trajectory,
        ridge_events,
        flagged,
    })
}

/// A fully quantized layer: packed integer codes plus 32-bit scales and zero
/// points, exactly the content of the on-disk layer format.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub bits: u8,
    pub alpha: i32,
    pub beta: i32,
    pub group_count: usize,
    /// One byte-aligned block of packed codes per output column.
    pub codes: Vec<u8>,
    /// Row-major d_out × group_count.
    pub scales: Vec<f32>,
    /// Row-major d_out × group_count.
    pub zeros: Vec<f32>,
}

impl QuantizedLayer {
    /// Bytes of packed codes per output column.
    pub fn column_stride(&self) -> usize {
        packed_len(self.d_in, self.bits)
    }

    pub fn column_codes(&self, j: usize) -> &[u8] {
        let stride = self.column_stride();
        &self.codes[j * stride..(j + 1) * stride]
    }

    pub fn column_qweights(&self, j: usize) -> Result<Vec<i32>, DqError> {
        unpack_codes(self.column_codes(j), self.d_in, self.bits, self.alpha)
    }

    pub fn column_scales(&self, j: usize) -> &[f32] {
        &self.scales[j * self.group_count..(j + 1) * self.group_count]
    }

    pub fn column_zeros(&self, j: usize) -> &[f32] {
        &self.zeros[j * self.group_count..(j + 1) * self.group_count]
    }

    /// W̃[:, j] = s̄ ⊙ w + z̄ with the stored 32-bit parameters widened.
    pub fn dequantize_column(&self, j: usize) -> Result<Vec<f64>, DqError> {
        let w = self.column_qweights(j)?;
        let s: Vec<f64> = self.column_scales(j).iter().map(|&v| v as f64).collect();
        let z: Vec<f64> = self.column_zeros(j).iter().map(|&v| v as f64).collect();
        dequantize(&w, &s, &z)
    }

    /// Dequantized weights, d_in × d_out.
    pub fn dequantize_matrix(&self) -> Result<Tensor2D, DqError> {
        let mut out = Tensor2D::zeros(self.d_in, self.d_out);
        for j in 0..self.d_out {
            for (i, v) in self.dequantize_column(j)?.into_iter().enumerate() {
                out.set(i, j, v);
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), DqError> {
        if !(2..=4).contains(&self.bits) {
            return Err(DqError::InvalidData(format!(
                "unsupported bit width {}",
                self.bits
            )));
        }
        if i64::from(self.beta) - i64::from(self.alpha) + 1 != 1i64 << self.bits {
            return Err(DqError::InvalidData(format!(
                "grid [{}, {}] inconsistent with {} bits",
                self.alpha, self.beta, self.bits
            )));
        }
        if self.d_in == 0 || self.d_out == 0 {
            return Err(DqError::InvalidData("layer has an empty dimension".into()));
        }
        if self.group_count == 0 || !self.d_in.is_multiple_of(self.group_count) {
            return Err(DqError::InvalidData(format!(
                "group count {} does not divide input dimension {}",
                self.group_count, self.d_in
            )));
        }
        if self.codes.len() != self.d_out * self.column_stride() {
            return Err(DqError::InvalidData(format!(
                "codes section holds {} bytes, expected {}",
                self.codes.len(),
                self.d_out * self.column_stride()
            )));
        }
        let n_sz = self.d_out * self.group_count;
        if self.scales.len() != n_sz || self.zeros.len() != n_sz {
            return Err(DqError::InvalidData(format!(
                "scales/zeros hold {}/{} values, expected {n_sz}",
                self.scales.len(),
                self.zeros.len()
            )));
        }
        if let Some(i) = self
            .scales
            .iter()
            .chain(&self.zeros)
            .position(|v| !v.is_finite())
        {
            return Err(DqError::InvalidData(format!(
                "non-finite scale/zero at flat index {i}"
            )));
        }
        Ok(())
    }
}

/// Quantizes every output column of `w0` (d_in × d_out) against a shared
/// Hessian. `workers` = 1 runs serially; 0 uses one thread per core. Results
/// are identical regardless of worker count.
///
/// Columns whose analytic solves fail are flagged in the report but still
/// produce output (their best earlier iterate). Scales and zeros are narrowed
/// to 32 bits first and each column's final objective is recomputed against
/// the narrowed values, so re-evaluating the written file reproduces the
/// report exactly.
pub fn quantize_layer(
    w0: &Tensor2D,
    hessian: &Hessian,
    cfg: &QuantConfig,
    workers: usize,
) -> Result<(QuantizedLayer, SolveReport), DqError> {
    cfg.validate_for_dim(w0.rows())?;
    if hessian.dim() != w0.rows() {
        return Err(DqError::InvalidData(format!(
            "hessian dimension {} does not match weight rows {}",
            hessian.dim(),
            w0.rows()
        )));
    }
    let d_in = w0.rows();
    let d_out = w0.cols();
    if d_out == 0 {
        return Err(DqError::InvalidData("layer has no output columns".into()));
    }

    let start = Instant::now();

    // Level2 shares one layer-level factorization across all columns.
    let mut layer_ridge = None;
    let factor = if cfg.approx_level == ApproxLevel::Level2 {
        let f = inverse_upper_factor(hessian.matrix())?;
        layer_ridge = f.ridge;
        Some(f)
    } else {
        None
    };

    let solve_one = |j: usize| -> Result<ColumnSolution, DqError> {
        let col = w0.column(j);
        let prob = ColumnProblem::new(&col, hessian, cfg)?;
        solve_column_with_factor(&prob, factor.as_ref())
    };

    let solutions: Vec<ColumnSolution> = if workers == 1 {
        (0..d_out).map(solve_one).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| DqError::InvalidConfig(format!("worker pool: {e}")))?;
        pool.install(|| {
            (0..d_out)
                .into_par_iter()
                .map(solve_one)
                .collect::<Result<Vec<_>, _>>()
        })?
    };

    let ng = cfg.group_count;
    let mut codes = Vec::with_capacity(d_out * packed_len(d_in, cfg.bits));
    let mut scales32 = Vec::with_capacity(d_out * ng);
    let mut zeros32 = Vec::with_capacity(d_out * ng);
    let mut per_column = Vec::with_capacity(d_out);
    let mut total_g = 0.0;
    let mut flagged_columns = 0;

    for (j, sol) in solutions.iter().enumerate() {
        codes.extend_from_slice(&pack_codes(&sol.qweights, cfg.bits, cfg.alpha)?);
        let s32: Vec<f32> = sol.scales.iter().map(|&v| v as f32).collect();
        let z32: Vec<f32> = sol.zeros.iter().map(|&v| v as f32).collect();
        if s32.iter().chain(&z32).any(|v| !v.is_finite()) {
            return Err(DqError::Numerical(format!(
                "column {j}: scale or zero does not fit in 32 bits"
            )));
        }
        let s64: Vec<f64> = s32.iter().map(|&v| v as f64).collect();
        let z64: Vec<f64> = z32.iter().map(|&v| v as f64).collect();
        let col = w0.column(j);
        let g_final = recon_loss_quantized(&sol.qweights, &s64, &z64, &col, hessian)?;
        total_g += g_final;
        flagged_columns += sol.flagged as usize;
        per_column.push(ColumnReport {
            column: j,
            g_init: sol.g_init,
            g_trajectory: sol.g_trajectory.clone(),
            g_final,
            ridge_events: sol.ridge_events.clone(),
            flagged: sol.flagged,
        });
        scales32.extend_from_slice(&s32);
        zeros32.extend_from_slice(&z32);
    }

    let total_seconds = start.elapsed().as_secs_f64();
    let layer = QuantizedLayer {
        d_in,
        d_out,
        bits: cfg.bits,
        alpha: cfg.alpha,
        beta: cfg.beta,
        group_count: ng,
        codes,
        scales: scales32,
        zeros: zeros32,
    };
    layer.validate()?;
    let report = SolveReport {
        config: cfg.clone(),
        per_column,
        totals: ReportTotals {
            total_g,
            columns: d_out,
            flagged_columns,
            hessian_factor_ridge: layer_ridge,
        },
        timings: ReportTimings {
            total_seconds,
            mean_column_seconds: total_seconds / d_out as f64,
        },
    };
    Ok((layer, report))
}
