use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not Hermitian (deviation {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("invalid probability {value} for {what}")]
    InvalidProbability { what: &'static str, value: f64 },

    #[error("channel is not Pauli-twirlable: recovered probability {value:e} at index {index}")]
    NotPauliTwirlable { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("qubit index {qubit} out of range for {n} qubits")]
    QubitOutOfRange { qubit: usize, n: usize },

    #[error("unsupported qubit count {n} (maximum {max})")]
    TooManyQubits { n: usize, max: usize },

    #[error("imaginary residue {residue:e} in expectation value")]
    ImaginaryResidue { residue: f64 },

    #[error("path count {count} exceeds enumeration guard {limit}")]
    PathGuardExceeded { count: String, limit: u64 },

    #[error("target Pauli index {beta} is unreachable from the initial support")]
    Unreachable { beta: usize },

    #[error("adjacency matrix is not primitive: {0}")]
    NotPrimitive(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("purity correction undefined: p_n = {p_n} does not exceed p_inf = {p_inf}")]
    NoiseSaturated { p_n: f64, p_inf: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("device profile: {0}")]
    Profile(String),

    #[error("gate on qubits ({0}, {1}) has no coupling edge in the device profile")]
    Uncoupled(usize, usize),

    #[error("config: {0}")]
    Config(String),

    #[error("campaign failed: {0}")]
    Campaign(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
