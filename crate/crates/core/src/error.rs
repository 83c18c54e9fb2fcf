//! Error type shared across the crate.

use thiserror::Error;

/// Failure modes surfaced by the solver, the binary formats, and the CLI.
#[derive(Debug, Error)]
pub enum DqError {
    /// Inputs violate a documented precondition (dimensions, ranges, NaN).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Configuration values are out of range or mutually inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A symmetric solve failed even after the full ridge escalation.
    #[error("singular system ({context}): not positive definite even with ridge {max_ridge:e}")]
    Singular { context: String, max_ridge: f64 },

    /// A numerical routine produced values it cannot recover from.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Underlying filesystem error, annotated with the offending path.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or truncated file content.
    #[error("format error: {0}")]
    Format(String),
}

impl DqError {
    /// Process exit code for the CLI: 1 validation, 2 I/O, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            DqError::InvalidData(_) | DqError::InvalidConfig(_) => 1,
            DqError::Io { .. } | DqError::Format(_) => 2,
            DqError::Singular { .. } | DqError::Numerical(_) => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DqError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_partition_the_variants() {
        assert_eq!(DqError::InvalidData(String::new()).exit_code(), 1);
        assert_eq!(DqError::InvalidConfig(String::new()).exit_code(), 1);
        assert_eq!(
            DqError::Io {
                path: "x".into(),
                source: std::io::Error::other("boom"),
            }
            .exit_code(),
            2
        );
        assert_eq!(DqError::Format(String::new()).exit_code(), 2);
        assert_eq!(
            DqError::Singular {
                context: "s".into(),
                max_ridge: 1e-4,
            }
            .exit_code(),
            3
        );
        assert_eq!(DqError::Numerical(String::new()).exit_code(), 3);
    }

    #[test]
    fn display_includes_context() {
        let e = DqError::Singular {
            context: "column 3".into(),
            max_ridge: 2.5e-4,
        };
        let msg = e.to_string();
        assert!(msg.contains("column 3"));
        assert!(msg.contains("2.5e-4"));
    }
}
