use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SandpileError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SandpileError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error(
        "stabilization did not converge after {topplings} topplings ({sweeps} sweeps); \
         residual excess {residual_excess:e} > eps_stop {eps_stop:e}"
    )]
    NonConvergence {
        topplings: u64,
        sweeps: u64,
        residual_excess: f64,
        eps_stop: f64,
    },

    #[error("root bracketing failed on [{lo:e}, {hi:e}]: f(lo) = {f_lo:e}, f(hi) = {f_hi:e}")]
    Bracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("check not applicable: {0}")]
    NotApplicable(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SandpileError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SandpileError::Io { path: path.into(), source }
    }
}
