//! Solver configuration.

use serde::{Deserialize, Serialize};

use crate::error::DqError;

/// How the integer subproblem is approximated inside each alternation round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApproxLevel {
    /// Projected gradient descent over the box, then coordinates are rounded
    /// and frozen one at a time with short PGD re-optimizations in between.
    Level1,
    /// Unconstrained minimizer first, then sequential rounding with an exact
    /// closed-form compensation of the remaining coordinates.
    Level2,
}

impl std::fmt::Display for ApproxLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ApproxLevel::Level1 => write!(f, "level1"),
            ApproxLevel::Level2 => write!(f, "level2"),
        }
    }
}

impl std::str::FromStr for ApproxLevel {
    type Err = DqError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "level1" | "1" => Ok(ApproxLevel::Level1),
            "level2" | "2" => Ok(ApproxLevel::Level2),
            other => Err(DqError::InvalidConfig(format!(
                "unknown approximation level '{other}' (expected level1 or level2)"
            ))),
        }
    }
}

/// Full configuration for quantizing one layer.
///
/// The integer grid is the inclusive range [alpha, beta] whose width must
/// match `bits`. Scales and zero points are stored per group; an input of
/// dimension d_in is split into `group_count` contiguous groups of equal
/// size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Bit width of the integer grid; 2, 3, and 4 are supported.
    pub bits: u8,
    /// Lowest representable integer level.
    pub alpha: i32,
    /// Highest representable integer level.
    pub beta: i32,
    /// Number of contiguous scale/zero groups along the input dimension.
    pub group_count: usize,
    /// Integer subproblem approximation.
    pub approx_level: ApproxLevel,
    /// Alternation rounds between the integer solve and the analytic
    /// scale/zero solve. Zero means the grid-search initialization is final.
    pub rounds: usize,
    /// PGD iterations after each coordinate is frozen (Level1 only).
    pub seq_pgd_iters: usize,
    /// PGD iterations for the Level1 warm-up pass over the whole box.
    pub warmup_pgd_iters: usize,
    /// Number of shrink factors scanned by the grid-search initialization.
    pub grid_points: usize,
    /// Smallest range-shrink factor scanned at initialization.
    pub grid_shrink_min: f64,
    /// Largest range-shrink factor scanned at initialization.
    pub grid_shrink_max: f64,
    /// Scan a separate shrink factor per group instead of one shared factor.
    pub per_group_shrink: bool,
    /// Diagonal damping added when building a Hessian, as a fraction of the
    /// mean Gram diagonal. Recorded here so reports echo the full setup.
    pub damping_fraction: f64,
    /// Projected-gradient infinity-norm threshold that stops PGD early.
    pub pgd_tolerance: f64,
    /// Seed for every randomized subroutine (spectral bound start vectors).
    pub seed: u64,
    /// Debugging hook: pin (scale, zero) for all groups and skip the analytic
    /// scale/zero updates entirely, solving only for the integers.
    pub fixed_sz: Option<(f64, f64)>,
}

impl QuantConfig {
    /// Defaults for a given bit width with the symmetric-ish two's-complement
    /// grid [-2^(b-1), 2^(b-1)-1].
    pub fn for_bits(bits: u8) -> Result<Self, DqError> {
        if !(2..=4).contains(&bits) {
            return Err(DqError::InvalidConfig(format!(
                "unsupported bit width {bits} (expected 2, 3, or 4)"
            )));
        }
        let half = 1i32 << (bits - 1);
        Ok(Self {
            bits,
            alpha: -half,
            beta: half - 1,
            group_count: 1,
            approx_level: ApproxLevel::Level2,
            rounds: 4,
            seq_pgd_iters: 8,
            warmup_pgd_iters: 50,
            grid_points: 51,
            grid_shrink_min: 0.5,
            grid_shrink_max: 1.0,
            per_group_shrink: false,
            damping_fraction: 0.01,
            pgd_tolerance: 1e-7,
            seed: 0,
            fixed_sz: None,
        })
    }

    /// Number of representable integer levels.
    pub fn grid_span(&self) -> i64 {
        self.beta as i64 - self.alpha as i64 + 1
    }

    pub fn validate(&self) -> Result<(), DqError> {
        if !(2..=4).contains(&self.bits) {
            return Err(DqError::InvalidConfig(format!(
                "unsupported bit width {} (expected 2, 3, or 4)",
                self.bits
            )));
        }
        if self.alpha >= self.beta {
            return Err(DqError::InvalidConfig(format!(
                "grid bounds must satisfy alpha < beta, got [{}, {}]",
                self.alpha, self.beta
            )));
        }
        if self.grid_span() != 1i64 << self.bits {
            return Err(DqError::InvalidConfig(format!(
                "grid [{}, {}] holds {} levels, but {} bits encode {}",
                self.alpha,
                self.beta,
                self.grid_span(),
                self.bits,
                1i64 << self.bits
            )));
        }
        if self.group_count == 0 {
            return Err(DqError::InvalidConfig("group count must be >= 1".into()));
        }
        if self.grid_points < 2 {
            return Err(DqError::InvalidConfig(
                "grid search needs at least 2 points".into(),
            ));
        }
        if !self.grid_shrink_min.is_finite()
            || !self.grid_shrink_max.is_finite()
            || self.grid_shrink_min <= 0.0
            || self.grid_shrink_min > self.grid_shrink_max
        {
            return Err(DqError::InvalidConfig(format!(
                "shrink range [{}, {}] must be positive and ordered",
                self.grid_shrink_min, self.grid_shrink_max
            )));
        }
        if self.damping_fraction < 0.0 || !self.damping_fraction.is_finite() {
            return Err(DqError::InvalidConfig(format!(
                "damping fraction must be finite and >= 0, got {}",
                self.damping_fraction
            )));
        }
        if self.pgd_tolerance < 0.0 || !self.pgd_tolerance.is_finite() {
            return Err(DqError::InvalidConfig(format!(
                "pgd tolerance must be finite and >= 0, got {}",
                self.pgd_tolerance
            )));
        }
        if let Some((s, z)) = self.fixed_sz {
            if !s.is_finite() || !z.is_finite() {
                return Err(DqError::InvalidConfig(
                    "pinned scale/zero values must be finite".into(),
                ));
            }
        }
        Ok(())
    }

    /// Validation that also needs the layer's input dimension.
    pub fn validate_for_dim(&self, d_in: usize) -> Result<(), DqError> {
        self.validate()?;
        if d_in == 0 {
            return Err(DqError::InvalidConfig("input dimension is zero".into()));
        }
        if !d_in.is_multiple_of(self.group_count) {
            return Err(DqError::InvalidConfig(format!(
                "group count {} does not divide input dimension {d_in}",
                self.group_count
            )));
        }
        Ok(())
    }
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self::for_bits(2).expect("2-bit defaults are valid")
    }
}

/// Deterministically derives a sub-seed for a named random subroutine.
/// SplitMix64 finalizer over the base seed and a purpose tag.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
