//! Symmetric linear algebra: Hessian construction, SPD solves with ridge
//! escalation, and spectral norm upper bounds.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::DqError;
use crate::tensor::Tensor2D;

/// Relative tolerance used when validating that a matrix is symmetric.
const SYMMETRY_RTOL: f64 = 1e-12;

/// Ridge escalation runs fractions 1e-10, 1e-9, ..., 1e-4 of mean(diag).
const RIDGE_EXP_RANGE: std::ops::RangeInclusive<i32> = -10..=-4;

/// Curvature matrix of the layer reconstruction objective: H = XᵀX + λI with
/// λ = damping_fraction * mean(diag(XᵀX)). Always square, symmetric, and with
/// strictly positive diagonal.
#[derive(Debug, Clone)]
pub struct Hessian {
    matrix: Tensor2D,
    damping_lambda: f64,
    source_rows: usize,
}

impl Hessian {
    /// Wraps an already-damped matrix, e.g. one read back from disk.
    /// `damping_lambda` and `source_rows` are recorded as zero because the
    /// matrix's construction history is unknown at this point.
    pub fn from_matrix(matrix: Tensor2D) -> Result<Self, DqError> {
        validate_symmetric(&matrix, "hessian")?;
        for i in 0..matrix.rows() {
            if matrix.get(i, i) <= 0.0 {
                return Err(DqError::InvalidData(format!(
                    "hessian diagonal entry {i} is not strictly positive"
                )));
            }
        }
        Ok(Self {
            matrix,
            damping_lambda: 0.0,
            source_rows: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Tensor2D {
        &self.matrix
    }

    /// Damping value that was added to the diagonal at construction time.
    pub fn damping_lambda(&self) -> f64 {
        self.damping_lambda
    }

    /// Number of activation rows accumulated into this Hessian.
    pub fn source_rows(&self) -> usize {
        self.source_rows
    }

    /// rᵀHr, clamped at zero (fp rounding can dip a hair below for tiny r).
    pub fn quadratic_form(&self, r: &[f64]) -> f64 {
        assert_eq!(r.len(), self.dim(), "quadratic form dimension mismatch");
        let hr = self.matrix.matvec(r);
        let v: f64 = r.iter().zip(&hr).map(|(a, b)| a * b).sum();
        v.max(0.0)
    }

    pub fn builder(dim: usize) -> HessianBuilder {
        HessianBuilder::new(dim)
    }
}

/// Accumulates XᵀX over multiple activation batches before damping is applied
/// once at the end.
#[derive(Debug, Clone)]
pub struct HessianBuilder {
    dim: usize,
    gram: Tensor2D,
    rows: usize,
}

impl HessianBuilder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            gram: Tensor2D::zeros(dim, dim),
            rows: 0,
        }
    }

    /// Adds one batch of activations (rows are samples, columns are features).
    pub fn accumulate(&mut self, x: &Tensor2D) -> Result<(), DqError> {
        if x.cols() != self.dim {
            return Err(DqError::InvalidData(format!(
                "activation batch has {} columns, expected {}",
                x.cols(),
                self.dim
            )));
        }
        for i in 0..self.dim {
            for j in i..self.dim {
                let mut acc = 0.0;
                for r in 0..x.rows() {
                    acc += x.get(r, i) * x.get(r, j);
                }
                let v = self.gram.get(i, j) + acc;
                self.gram.set(i, j, v);
                self.gram.set(j, i, v);
            }
        }
        self.rows += x.rows();
        Ok(())
    }

    pub fn rows_accumulated(&self) -> usize {
        self.rows
    }

    /// Applies diagonal damping and validates the result.
    pub fn finalize(self, damping_fraction: f64) -> Result<Hessian, DqError> {
        if self.rows == 0 {
            return Err(DqError::InvalidData(
                "empty calibration set: no activation rows accumulated".into(),
            ));
        }
        if damping_fraction < 0.0 || !damping_fraction.is_finite() {
            return Err(DqError::InvalidConfig(format!(
                "damping fraction must be finite and >= 0, got {damping_fraction}"
            )));
        }
        let n = self.dim;
        let mean_diag = (0..n).map(|i| self.gram.get(i, i)).sum::<f64>() / n as f64;
        let lambda = damping_fraction * mean_diag;
        let mut matrix = self.gram;
        for i in 0..n {
            let d = matrix.get(i, i) + lambda;
            if d <= 0.0 {
                return Err(DqError::InvalidData(format!(
                    "hessian diagonal entry {i} is {d} after damping; \
                     the calibration data never activates this input"
                )));
            }
            matrix.set(i, i, d);
        }
        Ok(Hessian {
            matrix,
            damping_lambda: lambda,
            source_rows: self.rows,
        })
    }
}

/// H = XᵀX + damping_fraction * mean(diag(XᵀX)) * I from a single batch.
pub fn build_hessian(x: &Tensor2D, damping_fraction: f64) -> Result<Hessian, DqError> {
    if x.rows() == 0 {
        return Err(DqError::InvalidData(
            "empty calibration set: activation matrix has no rows".into(),
        ));
    }
    let mut b = HessianBuilder::new(x.cols());
    b.accumulate(x)?;
    b.finalize(damping_fraction)
}

/// Lower-triangular Cholesky factor of an SPD matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Returns None when a pivot is non-positive or non-finite.
    pub fn factor(a: &Tensor2D) -> Option<Self> {
        let n = a.rows();
        assert_eq!(n, a.cols(), "cholesky needs a square matrix");
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if d <= 0.0 || !d.is_finite() {
                return None;
            }
            let dj = d.sqrt();
            l[j * n + j] = dj;
            for i in (j + 1)..n {
                let mut v = a.get(i, j);
                for k in 0..j {
                    v -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = v / dj;
            }
        }
        Some(Self { n, l })
    }

    /// Solves L Lᵀ x = b.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "cholesky solve dimension mismatch");
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[i * n + k] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= self.l[k * n + i] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        y
    }

    /// Solves L Lᵀ X = B column by column.
    pub fn solve_matrix(&self, b: &Tensor2D) -> Tensor2D {
        assert_eq!(b.rows(), self.n, "cholesky solve dimension mismatch");
        let mut out = Tensor2D::zeros(b.rows(), b.cols());
        for j in 0..b.cols() {
            let col = self.solve_vec(&b.column(j));
            for (i, v) in col.into_iter().enumerate() {
                out.set(i, j, v);
            }
        }
        out
    }

    /// Explicit inverse, symmetrized so downstream factorizations see an
    /// exactly symmetric matrix.
    pub fn inverse(&self) -> Tensor2D {
        let inv = self.solve_matrix(&Tensor2D::identity(self.n));
        let mut out = Tensor2D::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in i..self.n {
                let v = 0.5 * (inv.get(i, j) + inv.get(j, i));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }

    /// Upper-triangular transpose of the stored lower factor.
    pub fn upper(&self) -> Tensor2D {
        let n = self.n;
        let mut u = Tensor2D::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                u.set(j, i, self.l[i * n + j]);
            }
        }
        u
    }
}

/// Result of an SPD solve: the solution plus the ridge that had to be added
/// to make the factorization succeed (None when the plain solve worked).
#[derive(Debug, Clone)]
pub struct SpdSolution {
    pub solution: Tensor2D,
    pub ridge: Option<f64>,
}

fn validate_symmetric(a: &Tensor2D, context: &str) -> Result<(), DqError> {
    if a.rows() != a.cols() {
        return Err(DqError::InvalidData(format!(
            "{context}: matrix is {}x{}, expected square",
            a.rows(),
            a.cols()
        )));
    }
    let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..a.rows() {
        for j in (i + 1)..a.cols() {
            if (a.get(i, j) - a.get(j, i)).abs() > SYMMETRY_RTOL * scale {
                return Err(DqError::InvalidData(format!(
                    "{context}: matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

fn add_ridge(a: &Tensor2D, ridge: f64) -> Tensor2D {
    let mut m = a.clone();
    for i in 0..m.rows() {
        let v = m.get(i, i) + ridge;
        m.set(i, i, v);
    }
    m
}

/// Tries `attempt` on A, then on A + rI for the escalating ridge schedule.
/// Returns the first success together with the ridge used.
fn with_ridge_escalation<T>(
    a: &Tensor2D,
    context: &str,
    mut attempt: impl FnMut(&Tensor2D) -> Option<T>,
) -> Result<(T, Option<f64>), DqError> {
    if let Some(t) = attempt(a) {
        return Ok((t, None));
    }
    let n = a.rows();
    let mean_diag = (0..n).map(|i| a.get(i, i)).sum::<f64>() / n.max(1) as f64;
    let mut last_ridge = 0.0;
    for exp in RIDGE_EXP_RANGE {
        let ridge = 10f64.powi(exp) * mean_diag;
        last_ridge = ridge;
        if let Some(t) = attempt(&add_ridge(a, ridge)) {
            return Ok((t, Some(ridge)));
        }
    }
    Err(DqError::Singular {
        context: context.to_string(),
        max_ridge: last_ridge,
    })
}

/// Solves A x = b for symmetric positive definite A, escalating a diagonal
/// ridge when the bare factorization fails.
pub fn solve_spd(a: &Tensor2D, b: &Tensor2D) -> Result<SpdSolution, DqError> {
    validate_symmetric(a, "solve_spd")?;
    if b.rows() != a.rows() {
        return Err(DqError::InvalidData(format!(
            "solve_spd right-hand side has {} rows, expected {}",
            b.rows(),
            a.rows()
        )));
    }
    let (solution, ridge) = with_ridge_escalation(a, "solve_spd", |m| {
        Cholesky::factor(m).map(|c| c.solve_matrix(b))
    })?;
    Ok(SpdSolution { solution, ridge })
}

/// Upper-triangular U with A⁻¹ = UᵀU, plus the ridge applied to A if any.
#[derive(Debug, Clone)]
pub struct InverseFactor {
    pub upper: Tensor2D,
    pub ridge: Option<f64>,
}

/// Factorizes the inverse of an SPD matrix as A⁻¹ = UᵀU with U upper
/// triangular, ridge-escalating A when needed.
pub fn inverse_upper_factor(a: &Tensor2D) -> Result<InverseFactor, DqError> {
    validate_symmetric(a, "inverse_upper_factor")?;
    let (upper, ridge) = with_ridge_escalation(a, "inverse_upper_factor", |m| {
        let chol = Cholesky::factor(m)?;
        let inv = chol.inverse();
        Cholesky::factor(&inv).map(|c| c.upper())
    })?;
    Ok(InverseFactor { upper, ridge })
}

/// Floor applied to spectral upper bounds so step sizes stay finite.
const SPECTRAL_FLOOR: f64 = 1e-12;

/// Upper bound on the largest eigenvalue of a symmetric PSD matrix: 50 power
/// iterations from a seeded start vector, Rayleigh estimate inflated by 1%,
/// falling back to the Gershgorin row-sum bound when the iteration dies.
pub fn spectral_upper_bound(a: &Tensor2D, seed: u64) -> f64 {
    assert_eq!(a.rows(), a.cols(), "spectral bound needs a square matrix");
    let n = a.rows();
    if n == 0 {
        return SPECTRAL_FLOOR;
    }
    let gershgorin = (0..n)
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v[0] = 1.0;
    }

    let mut grew = true;
    for _ in 0..50 {
        let w = a.matvec(&v);
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nw <= 1e-300 || !nw.is_finite() {
            grew = false;
            break;
        }
        v = w;
        v.iter_mut().for_each(|x| *x /= nw);
    }

    let mut bound = if grew {
        let av = a.matvec(&v);
        let rayleigh: f64 = v.iter().zip(&av).map(|(a, b)| a * b).sum();
        if rayleigh.is_finite() && rayleigh > 0.0 {
            1.01 * rayleigh
        } else {
            gershgorin
        }
    } else {
        gershgorin
    };
    if !bound.is_finite() {
        bound = gershgorin;
    }
    bound.max(SPECTRAL_FLOOR)
}
