use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("fixed-point iteration did not converge at z = {z_re}{z_im:+}i after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        z_re: f64,
        z_im: f64,
        iterations: usize,
        residual: f64,
    },

    /// The iteration converged to a solution violating the sign constraints on
    /// the imaginary parts, i.e. not the Stieltjes branch.
    #[error("fixed-point solution at z = {z_re}{z_im:+}i left the physical branch")]
    WrongBranch { z_re: f64, z_im: f64 },

    #[error("singular system at z = {z_re}{z_im:+}i (point is likely inside the spectral support)")]
    SingularSystem { z_re: f64, z_im: f64 },

    #[error("near-support evaluation at lambda = {0}")]
    NearSupport(f64),

    #[error("degenerate kernel at lambda = {lambda}: singular values {smallest:.3e}, {second:.3e}")]
    Multiplicity {
        lambda: f64,
        smallest: f64,
        second: f64,
    },

    #[error("internal inconsistency: {0}")]
    Inconsistency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn non_convergence(z: crate::C64, iterations: usize, residual: f64) -> Self {
        Error::NonConvergence {
            z_re: z.re,
            z_im: z.im,
            iterations,
            residual,
        }
    }

    pub(crate) fn singular(z: crate::C64) -> Self {
        Error::SingularSystem {
            z_re: z.re,
            z_im: z.im,
        }
    }

    pub(crate) fn wrong_branch(z: crate::C64) -> Self {
        Error::WrongBranch {
            z_re: z.re,
            z_im: z.im,
        }
    }

    /// True for failures that a different starting point or a path through
    /// the upper half-plane may cure.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::WrongBranch { .. } | Error::SingularSystem { .. }
        )
    }
}
