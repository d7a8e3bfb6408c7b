use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("shape error: expected {expected} samples, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("weight is not strictly positive: min {min:e} at theta = {theta:?}")]
    Positivity { min: f64, theta: Vec<f64> },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("resonance inside band: |n.omega(I)| |n|^tau = {value:e} at I = {action:?}, n = {mode:?}")]
    Resonance {
        action: Vec<f64>,
        mode: Vec<i64>,
        value: f64,
    },

    #[error("frequency map degenerate: sigma_min(D omega) = {sigma_min:e} at I = {action:?}")]
    Degeneracy { action: Vec<f64>, sigma_min: f64 },

    #[error("small divisor n.omega = {divisor:e} for n = {mode:?}")]
    SmallDivisor { mode: Vec<i64>, divisor: f64 },

    #[error("conjugacy is not a diffeomorphism: det D Psi = {det:e} at theta = {theta:?}")]
    DiffeomorphismViolation { det: f64, theta: Vec<f64> },

    #[error("psi inversion did not converge after {iterations} iterations (residual {residual:e})")]
    InversionFailure { iterations: usize, residual: f64 },

    #[error("step size underflow at t = {time} (h = {step:e})")]
    Stiffness { time: f64, step: f64 },

    #[error("density error: {0}")]
    Density(String),

    #[error("rejection envelope violated: density {value:e} exceeds envelope {envelope:e}")]
    Envelope { value: f64, envelope: f64 },

    #[error("degenerate stationary-phase field for n = {mode:?}: |D omega^T n| = {norm:e}")]
    DegenerateField { mode: Vec<i64>, norm: f64 },

    #[error("oscillatory quadrature did not converge for n = {mode:?} at t = {time}: {nodes} nodes per axis, error estimate {estimate:e}")]
    OscillatoryQuadrature {
        mode: Vec<i64>,
        time: f64,
        nodes: usize,
        estimate: f64,
    },

    #[error("insufficient signal: {usable} usable points (need at least {required})")]
    InsufficientSignal { usable: usize, required: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("estimators diverge at t = {time}: mc = {mc} +/- {stderr:e}, quadrature = {quad}")]
    EstimatorDivergence {
        time: f64,
        mc: f64,
        stderr: f64,
        quad: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
