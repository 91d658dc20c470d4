//! Zero-noise extrapolation for periodic circuits: Pauli algebra, Pauli noise
//! channels, an exact density-matrix simulator, Pauli-path statistics,
//! extrapolation models and the benchmark campaigns built on them.

pub mod channel;
pub mod circuit;
pub mod error;
pub mod fit;
pub mod harness;
pub mod linalg;
pub mod paths;
pub mod pauli;
pub mod sim;

pub use channel::{AsymmetrySpec, ChannelEigenvalues, KrausChannel, NoiseChannel, PauliChannel};
pub use circuit::{Gate, PeriodicCircuit};
pub use error::{Error, Result};
pub use pauli::{PauliCoefficients, PauliString, PauliVector};
pub use sim::{DensityMatrix, GateNoise, Histogram, NoiseSpec, ReadoutModel, TwirlMode};
