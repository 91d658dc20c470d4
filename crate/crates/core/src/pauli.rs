//! Pauli strings in symplectic form, Pauli-basis expansion of states and
//! Pauli transfer matrices of unitaries.
//!
//! Indexing: each qubit contributes a 2-bit code (`00 = I`, `01 = X`,
//! `10 = Z`, `11 = Y`) and qubit 0 occupies the least significant code, so
//! index 0 is always the identity and the index of a product is the XOR of
//! the factor indices. In text labels the leftmost character is qubit 0.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::circuit::Gate;
use crate::error::{Error, Result};
use crate::linalg::{CMatrix, I, ONE, ZERO};
use crate::sim::DensityMatrix;

/// Transfer entries at or below this magnitude are treated as exact zeros.
pub const TRANSFER_EPS: f64 = 1e-10;

const HERMITIAN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PauliString {
    n: usize,
    x: u64,
    z: u64,
    sign: Sign,
}

impl PauliString {
    pub fn identity(n: usize) -> Self {
        PauliString {
            n,
            x: 0,
            z: 0,
            sign: Sign::Plus,
        }
    }

    pub fn new(n: usize, x: u64, z: u64, sign: Sign) -> Result<Self> {
        let mask = if n >= 64 { u64::MAX } else { (1u64 << n) - 1 };
        if x & !mask != 0 || z & !mask != 0 {
            return Err(Error::InvalidArgument(format!(
                "bit pattern wider than {n} qubits"
            )));
        }
        Ok(PauliString { n, x, z, sign })
    }

    /// Decode an interleaved index in `0..4^n`.
    pub fn from_index(n: usize, index: usize) -> Self {
        debug_assert!(index < 1usize << (2 * n));
        let mut x = 0u64;
        let mut z = 0u64;
        for q in 0..n {
            let code = (index >> (2 * q)) & 3;
            x |= ((code & 1) as u64) << q;
            z |= (((code >> 1) & 1) as u64) << q;
        }
        PauliString {
            n,
            x,
            z,
            sign: Sign::Plus,
        }
    }

    pub fn index(&self) -> usize {
        (0..self.n).fold(0, |acc, q| acc | (self.code(q) << (2 * q)))
    }

    /// 2-bit code of qubit `q`.
    #[inline]
    pub fn code(&self, q: usize) -> usize {
        (((self.x >> q) & 1) | (((self.z >> q) & 1) << 1)) as usize
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn x_bits(&self) -> u64 {
        self.x
    }

    pub fn z_bits(&self) -> u64 {
        self.z
    }

    pub fn sign(&self) -> Sign {
        self.sign
    }

    pub fn with_sign(mut self, sign: Sign) -> Self {
        self.sign = sign;
        self
    }

    pub fn is_identity(&self) -> bool {
        self.x == 0 && self.z == 0
    }

    pub fn weight(&self) -> u32 {
        (self.x | self.z).count_ones()
    }

    /// Parse labels such as `"XZZX"` or `"-IY"`; the first letter is qubit 0.
    pub fn from_label(label: &str) -> Result<Self> {
        let (sign, body) = match label.as_bytes().first() {
            Some(b'-') => (Sign::Minus, &label[1..]),
            Some(b'+') => (Sign::Plus, &label[1..]),
            _ => (Sign::Plus, label),
        };
        let n = body.len();
        if n == 0 || n > 63 {
            return Err(Error::InvalidArgument(format!("bad Pauli label {label:?}")));
        }
        let mut x = 0u64;
        let mut z = 0u64;
        for (q, c) in body.chars().enumerate() {
            let (xb, zb) = match c {
                'I' => (0, 0),
                'X' => (1, 0),
                'Z' => (0, 1),
                'Y' => (1, 1),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "bad Pauli letter {c:?} in {label:?}"
                    )))
                }
            };
            x |= xb << q;
            z |= zb << q;
        }
        Ok(PauliString { n, x, z, sign })
    }

    pub fn label(&self) -> String {
        let body: String = (0..self.n)
            .map(|q| match self.code(q) {
                0 => 'I',
                1 => 'X',
                2 => 'Z',
                _ => 'Y',
            })
            .collect();
        match self.sign {
            Sign::Plus => body,
            Sign::Minus => format!("-{body}"),
        }
    }

    /// Whether `self` and `other` commute (symplectic form vanishes mod 2).
    pub fn commutes(&self, other: &PauliString) -> Result<bool> {
        if self.n != other.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: other.n,
            });
        }
        Ok(symplectic(self.x, self.z, other.x, other.z) == 0)
    }

    /// Dense `2^n × 2^n` matrix, including the sign.
    pub fn matrix(&self) -> CMatrix {
        let dim = 1usize << self.n;
        let mut m = CMatrix::zeros(dim, dim);
        let phase = i_pow((self.x & self.z).count_ones()) * self.sign.value();
        for a in 0..dim {
            let s = if ((a as u64) & self.z).count_ones() % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            m[((a as u64 ^ self.x) as usize, a)] = phase * s;
        }
        m
    }
}

impl fmt::Display for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[inline]
fn symplectic(x1: u64, z1: u64, x2: u64, z2: u64) -> u32 {
    ((x1 & z2) ^ (z1 & x2)).count_ones() & 1
}

/// Symplectic commutation test directly on interleaved indices.
#[inline]
pub fn commutes_index(a: usize, b: usize) -> bool {
    // Interleaved codes: even bits are x, odd bits are z.
    const EVEN: usize = 0x5555_5555_5555_5555;
    let (ax, az) = (a & EVEN, (a >> 1) & EVEN);
    let (bx, bz) = (b & EVEN, (b >> 1) & EVEN);
    ((ax & bz) ^ (az & bx)).count_ones() % 2 == 0
}

fn i_pow(k: u32) -> Complex64 {
    match k % 4 {
        0 => ONE,
        1 => I,
        2 => -ONE,
        _ => -I,
    }
}

/// Real Pauli-basis coefficients `ρ_i = tr(ρ P_i) / 2^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PauliCoefficients {
    pub n: usize,
    pub coeffs: Vec<f64>,
}

impl PauliCoefficients {
    /// `⟨P_i⟩ = 2^n ρ_i`.
    pub fn expectation(&self, index: usize) -> f64 {
        self.coeffs[index] * (1usize << self.n) as f64
    }

    /// Indices with a coefficient above the transfer threshold.
    pub fn support(&self) -> Vec<usize> {
        self.coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| c.abs() > TRANSFER_EPS)
            .map(|(i, _)| i)
            .collect()
    }

    /// `Σ_i ρ_i P_i` as a dense matrix.
    pub fn reconstruct(&self) -> CMatrix {
        let dim = 1usize << self.n;
        let mut m = CMatrix::zeros(dim, dim);
        for (i, &c) in self.coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let p = PauliString::from_index(self.n, i);
            let phase = i_pow((p.x & p.z).count_ones());
            for a in 0..dim {
                let s = if ((a as u64) & p.z).count_ones() % 2 == 0 {
                    c
                } else {
                    -c
                };
                m[((a as u64 ^ p.x) as usize, a)] += phase * s;
            }
        }
        m
    }
}

/// Expand a density matrix in the Pauli basis.
pub fn expand_state(rho: &DensityMatrix) -> Result<PauliCoefficients> {
    let dev = rho.hermiticity_deviation();
    if dev > HERMITIAN_TOL {
        return Err(Error::NotHermitian { deviation: dev });
    }
    Ok(expand_operator(rho.n(), rho.as_slice()))
}

/// Pauli coefficients of an arbitrary Hermitian operator stored row-major.
pub(crate) fn expand_operator(n: usize, data: &[Complex64]) -> PauliCoefficients {
    let dim = 1usize << n;
    let norm = 1.0 / dim as f64;
    let coeffs = (0..1usize << (2 * n))
        .map(|i| {
            let p = PauliString::from_index(n, i);
            // tr(ρP) = i^{|x∧z|} Σ_a ρ[a, a⊕x] (−1)^{a·z}
            let mut acc = ZERO;
            for a in 0..dim {
                let v = data[a * dim + (a ^ p.x as usize)];
                if ((a as u64) & p.z).count_ones() % 2 == 0 {
                    acc += v;
                } else {
                    acc -= v;
                }
            }
            (i_pow((p.x & p.z).count_ones()) * acc).re * norm
        })
        .collect();
    PauliCoefficients { n, coeffs }
}

/// Sparse real combination of Pauli strings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PauliVector {
    pub terms: Vec<(PauliString, f64)>,
}

impl PauliVector {
    pub fn coefficient(&self, p: &PauliString) -> f64 {
        self.terms
            .iter()
            .filter(|(q, _)| q.index() == p.index())
            .map(|(q, c)| c * q.sign.value())
            .sum()
    }

    pub fn norm_squared(&self) -> f64 {
        self.terms.iter().map(|(_, c)| c * c).sum()
    }
}

/// Local transfer matrix `R[out][in] = tr(P_out u P_in u†) / 2^k` of a
/// `k`-qubit unitary, stored row-major with stride `4^k`.
pub fn local_transfer(u: &CMatrix) -> Vec<f64> {
    let dim = u.nrows();
    let k = dim.trailing_zeros() as usize;
    let size = 1usize << (2 * k);
    let mats: Vec<CMatrix> = (0..size)
        .map(|i| PauliString::from_index(k, i).matrix())
        .collect();
    let ud = u.adjoint();
    let mut out = vec![0.0; size * size];
    for (i, pi) in mats.iter().enumerate() {
        let conj = u * pi * &ud;
        for (j, pj) in mats.iter().enumerate() {
            let tr = (pj * &conj).trace();
            out[j * size + i] = tr.re / dim as f64;
        }
    }
    out
}

/// Conjugate a Pauli string by a gate: returns `g P g†` as a real Pauli
/// combination, dropping entries with magnitude at or below [`TRANSFER_EPS`].
pub fn conjugate_pauli(g: &Gate, p: &PauliString) -> Result<PauliVector> {
    for q in g.qubits() {
        if q >= p.n {
            return Err(Error::QubitOutOfRange { qubit: q, n: p.n });
        }
    }
    let qubits = g.qubits();
    let k = qubits.len();
    let size = 1usize << (2 * k);
    let ptm = local_transfer(&g.matrix());
    let local_in = qubits
        .iter()
        .enumerate()
        .fold(0, |acc, (b, &q)| acc | (p.code(q) << (2 * b)));
    let base = p.index() & !qubits.iter().fold(0, |acc, &q| acc | (3 << (2 * q)));
    let terms = (0..size)
        .filter_map(|j| {
            let c = ptm[j * size + local_in] * p.sign.value();
            if c.abs() <= TRANSFER_EPS {
                return None;
            }
            let idx = qubits
                .iter()
                .enumerate()
                .fold(base, |acc, (b, &q)| acc | (((j >> (2 * b)) & 3) << (2 * q)));
            Some((PauliString::from_index(p.n, idx), c))
        })
        .collect();
    Ok(PauliVector { terms })
}

/// Apply a local transfer matrix to a dense coefficient vector over `4^n`
/// Pauli indices, acting on the codes of `qubits`.
pub fn apply_local_transfer(vec: &mut [f64], n: usize, qubits: &[usize], ptm: &[f64]) {
    let k = qubits.len();
    let size = 1usize << (2 * k);
    let mask = qubits.iter().fold(0usize, |acc, &q| acc | (3 << (2 * q)));
    let offsets: Vec<usize> = (0..size)
        .map(|l| {
            qubits
                .iter()
                .enumerate()
                .fold(0, |acc, (b, &q)| acc | (((l >> (2 * b)) & 3) << (2 * q)))
        })
        .collect();
    let mut local = vec![0.0; size];
    for base in 0..1usize << (2 * n) {
        if base & mask != 0 {
            continue;
        }
        let mut any = false;
        for (l, &o) in offsets.iter().enumerate() {
            local[l] = vec[base | o];
            any |= local[l] != 0.0;
        }
        if !any {
            continue;
        }
        for (j, &o) in offsets.iter().enumerate() {
            let row = &ptm[j * size..(j + 1) * size];
            vec[base | o] = row.iter().zip(&local).map(|(r, v)| r * v).sum();
        }
    }
}

/// Dense transfer matrix of a unitary circuit block:
/// `C[i][j] = tr(P_j U P_i U†) / 2^n`, row `i` is the input Pauli.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl TransferMatrix {
    pub fn identity(n: usize) -> Self {
        let dim = 1usize << (2 * n);
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        TransferMatrix { n, data }
    }

    pub fn dim(&self) -> usize {
        1usize << (2 * self.n)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    /// Transfer matrix of the gate sequence (first gate applied first).
    pub fn from_gates(n: usize, gates: &[Gate]) -> Result<Self> {
        let mut t = Self::identity(n);
        let dim = t.dim();
        for g in gates {
            for q in g.qubits() {
                if q >= n {
                    return Err(Error::QubitOutOfRange { qubit: q, n });
                }
            }
            let ptm = local_transfer(&g.matrix());
            let qubits = g.qubits();
            for row in t.data.chunks_mut(dim) {
                apply_local_transfer(row, n, &qubits, &ptm);
            }
        }
        Ok(t)
    }

    /// Map input coefficients through the block: `out_j = Σ_i v_i C[i][j]`.
    pub fn propagate(&self, v: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        let mut out = vec![0.0; dim];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, c) in out.iter_mut().zip(self.row(i)) {
                *o += vi * c;
            }
        }
        out
    }
}
