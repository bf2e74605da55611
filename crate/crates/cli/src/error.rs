use std::path::PathBuf;

use manipdiff::diffusion::DiffusionError;
use manipdiff::{GmmError, SimError, SpdError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 3,
            CliError::Validation(_) | CliError::Io { .. } => 2,
        }
    }

    /// Prefixes the message with the file it concerns.
    pub fn context(self, path: &std::path::Path) -> CliError {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            CliError::Numerical(m) => CliError::Numerical(format!("{}: {m}", path.display())),
            io @ CliError::Io { .. } => io,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

fn spd_is_numerical(e: &SpdError) -> bool {
    matches!(
        e,
        SpdError::NonFinite | SpdError::NotPositiveDefinite { .. } | SpdError::NotSymmetric { .. }
    )
}

fn gmm_is_numerical(e: &GmmError) -> bool {
    match e {
        GmmError::Spd(s) => spd_is_numerical(s),
        GmmError::SingularCovariance | GmmError::NonFiniteLikelihood(_) => true,
        _ => false,
    }
}

fn diffusion_is_numerical(e: &DiffusionError) -> bool {
    matches!(
        e,
        DiffusionError::NonFiniteLoss { .. }
            | DiffusionError::NonFiniteSample
            | DiffusionError::Cost(_)
    )
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let numerical = match &e {
            SimError::Numerical(_) => true,
            SimError::Spd(s) => spd_is_numerical(s),
            SimError::Gmm(g) => gmm_is_numerical(g),
            SimError::Diffusion(d) => diffusion_is_numerical(d),
            _ => false,
        };
        if numerical {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<GmmError> for CliError {
    fn from(e: GmmError) -> Self {
        SimError::from(e).into()
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        SimError::from(e).into()
    }
}

impl From<SpdError> for CliError {
    fn from(e: SpdError) -> Self {
        SimError::from(e).into()
    }
}
