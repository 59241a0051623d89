use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("grid mismatch")]
    GridMismatch,
    #[error("shift-out-of-domain: |gamma| = {gamma} >= L/2 = {limit}")]
    ShiftOutOfDomain { gamma: f64, limit: f64 },
    #[error("not-positive-semidefinite: most negative q_hat = {min} (max {max})")]
    NotPositiveSemidefinite { min: f64, max: f64 },
    #[error("newton-diverged after {iterations} iterations (residual {residual:e}, last sigma {last_sigma})")]
    NewtonDiverged {
        iterations: usize,
        residual: f64,
        last_sigma: f64,
    },
    #[error("degenerate-jacobian")]
    DegenerateJacobian,
    #[error("non-simple-kernel: {0}")]
    NonSimpleKernel(String),
    #[error("bordered-singular")]
    BorderedSingular,
    #[error("phase-pairing-degenerate: <phi', psi> = {0:e}")]
    PhasePairingDegenerate(f64),
    #[error("sne-out-of-range: sigma^2 q(0) = {0}")]
    SneOutOfRange(f64),
    #[error("unsupported-correction: noise coefficient couples components")]
    UnsupportedCorrection,
    #[error("blow-up at t = {0}")]
    BlowUp(f64),
    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),
    #[error("hypothesis check failed: {0}")]
    Hypothesis(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
