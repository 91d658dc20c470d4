//! Small dense complex-matrix helpers shared by the Pauli and simulator code.

use nalgebra::DMatrix;
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);
pub const I: Complex64 = Complex64::new(0.0, 1.0);

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// Largest elementwise modulus of `a - b`.
pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// Embed a `k`-qubit operator acting on `qubits` into an `n`-qubit space.
///
/// Local basis bit `b` corresponds to global qubit `qubits[b]`; global basis
/// bit `q` is qubit `q`.
pub fn embed(local: &CMatrix, qubits: &[usize], n: usize) -> CMatrix {
    let dim = 1usize << n;
    let k = qubits.len();
    let mut out = CMatrix::zeros(dim, dim);
    let mask: usize = qubits.iter().map(|&q| 1usize << q).sum();
    for row in 0..dim {
        let lr = extract_bits(row, qubits);
        for lc in 0..(1usize << k) {
            let v = local[(lr, lc)];
            if v == ZERO {
                continue;
            }
            let col = (row & !mask) | deposit_bits(lc, qubits);
            out[(row, col)] += v;
        }
    }
    out
}

/// Gather the bits of `index` at positions `qubits` into a compact local index.
#[inline]
pub fn extract_bits(index: usize, qubits: &[usize]) -> usize {
    qubits
        .iter()
        .enumerate()
        .fold(0, |acc, (b, &q)| acc | (((index >> q) & 1) << b))
}

/// Scatter the bits of a local index back to positions `qubits`.
#[inline]
pub fn deposit_bits(local: usize, qubits: &[usize]) -> usize {
    qubits
        .iter()
        .enumerate()
        .fold(0, |acc, (b, &q)| acc | (((local >> b) & 1) << q))
}
