use thiserror::Error;

/// Errors produced by the offline design and online control stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not Schur stable (spectral radius {0:.6})")]
    NotSchurStable(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("conic program infeasible: {0}")]
    Infeasible(String),

    #[error("conic solver numerical failure: {0}")]
    NumericalFailure(String),

    #[error("hard IQC violated: {0}")]
    ViolationFound(String),

    #[error("no verifiable stabilizing controller: {0}")]
    NoStabilizingController(String),

    #[error("estimator reconstruction ill-conditioned (condition number {0:.3e})")]
    ReconstructionIllConditioned(f64),

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("terminal ingredients infeasible: {0}")]
    InfeasibleTerminal(String),

    #[error("certificate check failed: {0}")]
    CertificateInvalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// The innermost error, skipping stage annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

/// Tags an error with the pipeline stage it came from.
pub fn at_stage<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage: stage.to_string(), source: Box::new(e) })
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::DimensionMismatch(msg.into()))
}
