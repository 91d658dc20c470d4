//! Pauli noise channels: eigenvalues, composition, folding, forward/backward
//! asymmetry and Pauli twirling of general channels.
//!
//! The probability ↔ eigenvalue map is the ±1 commutation incidence
//! `M[j][k] = +1` if `[P_j, P_k] = 0` else `−1`, so `λ = M p` and
//! `p = M λ / 4^n`. `M` factorises into a tensor product of one 4×4 block per
//! qubit, which gives an `O(n·4^n)` transform.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::pauli::{commutes_index, expand_operator, PauliString};

const SUM_TOL: f64 = 1e-12;
/// Recovered probabilities below `-TWIRL_CLIP` (or above `1 + TWIRL_CLIP`)
/// mark a channel that is not Pauli-diagonal.
pub const TWIRL_CLIP: f64 = 1e-9;

/// Probability vector over the `4^n` Pauli errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PauliChannel {
    n: usize,
    probs: Vec<f64>,
}

impl PauliChannel {
    pub fn new(n: usize, probs: Vec<f64>) -> Result<Self> {
        let dim = 1usize << (2 * n);
        if probs.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: probs.len(),
            });
        }
        if let Some(&bad) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidProbability {
                what: "Pauli error probability",
                value: bad,
            });
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidProbability {
                what: "total probability",
                value: total,
            });
        }
        Ok(PauliChannel { n, probs })
    }

    pub fn identity(n: usize) -> Self {
        let mut probs = vec![0.0; 1usize << (2 * n)];
        probs[0] = 1.0;
        PauliChannel { n, probs }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn is_identity(&self) -> bool {
        self.probs[0] == 1.0
    }

    /// Eigenvalues via the fast incidence transform.
    pub fn eigenvalues(&self) -> ChannelEigenvalues {
        let mut v = self.probs.clone();
        incidence_transform(&mut v, self.n);
        ChannelEigenvalues { n: self.n, lambdas: v }
    }

    /// Rebuild a channel from eigenvalues; small negative probabilities from
    /// rounding are clipped, larger ones are rejected.
    pub fn from_eigenvalues(ev: &ChannelEigenvalues) -> Result<Self> {
        let n = ev.n;
        let mut p = ev.lambdas.clone();
        incidence_transform(&mut p, n);
        let scale = 1.0 / (1usize << (2 * n)) as f64;
        for (i, x) in p.iter_mut().enumerate() {
            *x *= scale;
            if *x < -TWIRL_CLIP || *x > 1.0 + TWIRL_CLIP || !x.is_finite() {
                return Err(Error::NotPauliTwirlable { index: i, value: *x });
            }
            *x = x.clamp(0.0, 1.0);
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        Ok(PauliChannel { n, probs: p })
    }

    /// Tensor product `self ⊗ other` with `self` on the low qubits.
    pub fn tensor(&self, other: &PauliChannel) -> PauliChannel {
        let lo = 1usize << (2 * self.n);
        let mut probs = vec![0.0; lo << (2 * other.n)];
        for (j, &b) in other.probs.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            for (i, &a) in self.probs.iter().enumerate() {
                probs[j * lo + i] = a * b;
            }
        }
        PauliChannel {
            n: self.n + other.n,
            probs,
        }
    }

    /// Embed a `k`-qubit channel acting on `qubits` into `n` qubits.
    pub fn embed(&self, qubits: &[usize], n: usize) -> Result<PauliChannel> {
        if qubits.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: qubits.len(),
            });
        }
        let mut probs = vec![0.0; 1usize << (2 * n)];
        for (l, &p) in self.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let idx = qubits
                .iter()
                .enumerate()
                .fold(0usize, |acc, (b, &q)| acc | (((l >> (2 * b)) & 3) << (2 * q)));
            probs[idx] += p;
        }
        Ok(PauliChannel { n, probs })
    }

    /// Non-zero error terms as `(pauli index, probability)`.
    pub fn terms(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, p)| (i, *p))
    }
}

/// Apply `M` (unnormalised) in place, one qubit at a time.
fn incidence_transform(v: &mut [f64], n: usize) {
    // Per-qubit block in code order I, X, Z, Y.
    const M1: [[f64; 4]; 4] = [
        [1.0, 1.0, 1.0, 1.0],
        [1.0, 1.0, -1.0, -1.0],
        [1.0, -1.0, 1.0, -1.0],
        [1.0, -1.0, -1.0, 1.0],
    ];
    for q in 0..n {
        let stride = 1usize << (2 * q);
        for base in 0..v.len() {
            if (base >> (2 * q)) & 3 != 0 {
                continue;
            }
            let x = [
                v[base],
                v[base + stride],
                v[base + 2 * stride],
                v[base + 3 * stride],
            ];
            for (r, row) in M1.iter().enumerate() {
                v[base + r * stride] = row.iter().zip(&x).map(|(m, xi)| m * xi).sum();
            }
        }
    }
}

/// Direct `O(16^n)` eigenvalue formula `λ_j = 1 − 2 Σ_{k: {P_j,P_k}=0} p_k`.
pub fn eigenvalues_by_anticommutation(ch: &PauliChannel) -> ChannelEigenvalues {
    let dim = ch.probs.len();
    let lambdas = (0..dim)
        .map(|j| {
            let anti: f64 = (0..dim)
                .filter(|&k| !commutes_index(j, k))
                .map(|k| ch.probs[k])
                .sum();
            1.0 - 2.0 * anti
        })
        .collect();
    ChannelEigenvalues { n: ch.n, lambdas }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEigenvalues {
    pub n: usize,
    pub lambdas: Vec<f64>,
}

impl ChannelEigenvalues {
    pub fn get(&self, j: usize) -> f64 {
        self.lambdas[j]
    }

    /// Eigenvalues of the folded channel `(E_f ∘ E_b)^r ∘ E_f`.
    pub fn folded(&self, backward: &ChannelEigenvalues, r: usize) -> ChannelEigenvalues {
        ChannelEigenvalues {
            n: self.n,
            lambdas: self
                .lambdas
                .iter()
                .zip(&backward.lambdas)
                .map(|(&f, &b)| folded_eigenvalue(f, b, r))
                .collect(),
        }
    }
}

pub fn eigenvalues(ch: &PauliChannel) -> ChannelEigenvalues {
    ch.eigenvalues()
}

/// `E_p(ρ) = (1 − p) ρ + p I / 2^n`.
pub fn depolarizing(n: usize, p: f64) -> Result<PauliChannel> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidProbability {
            what: "depolarizing strength",
            value: p,
        });
    }
    let dim = 1usize << (2 * n);
    let each = p / dim as f64;
    let mut probs = vec![each; dim];
    probs[0] = 1.0 - p + each;
    Ok(PauliChannel { n, probs })
}

/// Eigenvalue after `r` folds: `(λ_f λ_b)^r λ_f`.
pub fn folded_eigenvalue(lf: f64, lb: f64, r: usize) -> f64 {
    (lf * lb).powi(r as i32) * lf
}

/// Second-order forward/backward asymmetry: `λ_b,j = λ_f,j · exp(λ² w_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymmetrySpec {
    pub w: Vec<f64>,
    pub strength: f64,
}

impl AsymmetrySpec {
    pub fn new(w: Vec<f64>, strength: f64) -> Result<Self> {
        if !strength.is_finite() || w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("asymmetry entries must be finite".into()));
        }
        Ok(AsymmetrySpec { w, strength })
    }

    /// Same coefficient for every non-identity Pauli.
    pub fn uniform(n: usize, w: f64, strength: f64) -> Result<Self> {
        let mut ws = vec![w; 1usize << (2 * n)];
        ws[0] = 0.0;
        Self::new(ws, strength)
    }
}

pub fn backward_from_forward(lf: f64, spec: &AsymmetrySpec, j: usize) -> f64 {
    lf * (spec.strength * spec.strength * spec.w[j]).exp()
}

/// Backward channel whose eigenvalues follow [`backward_from_forward`].
pub fn backward_channel(forward: &PauliChannel, spec: &AsymmetrySpec) -> Result<PauliChannel> {
    if spec.w.len() != forward.probs.len() {
        return Err(Error::DimensionMismatch {
            expected: forward.probs.len(),
            got: spec.w.len(),
        });
    }
    let ev = forward.eigenvalues();
    let lambdas = ev
        .lambdas
        .iter()
        .enumerate()
        .map(|(j, &lf)| backward_from_forward(lf, spec, j))
        .collect();
    PauliChannel::from_eigenvalues(&ChannelEigenvalues { n: forward.n, lambdas })
}

/// `a ∘ b`: XOR-convolution of the error distributions.
pub fn compose(a: &PauliChannel, b: &PauliChannel) -> Result<PauliChannel> {
    if a.n != b.n {
        return Err(Error::DimensionMismatch {
            expected: a.n,
            got: b.n,
        });
    }
    let mut probs = vec![0.0; a.probs.len()];
    for (i, pa) in a.terms() {
        for (j, pb) in b.terms() {
            probs[i ^ j] += pa * pb;
        }
    }
    Ok(PauliChannel { n: a.n, probs })
}

/// `(a ∘ b)^r ∘ a` by repeated composition.
pub fn folded_channel(forward: &PauliChannel, backward: &PauliChannel, r: usize) -> Result<PauliChannel> {
    let pair = compose(forward, backward)?;
    let mut out = forward.clone();
    for _ in 0..r {
        out = compose(&pair, &out)?;
    }
    Ok(out)
}

/// Pauli transfer matrix `R[j][i] = tr(P_j E(P_i)) / 2^n` of a general channel.
pub type Ptm = DMatrix<f64>;

/// Pauli-twirl a general channel: keep the PTM diagonal and recover the
/// Pauli error probabilities.
pub fn twirl(ptm: &Ptm) -> Result<PauliChannel> {
    let dim = ptm.nrows();
    if ptm.ncols() != dim || !dim.is_power_of_two() || dim.trailing_zeros() % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "PTM must be 4^n × 4^n, got {} × {}",
            ptm.nrows(),
            ptm.ncols()
        )));
    }
    let n = dim.trailing_zeros() as usize / 2;
    let lambdas = (0..dim).map(|j| ptm[(j, j)]).collect();
    PauliChannel::from_eigenvalues(&ChannelEigenvalues { n, lambdas })
}

/// Diagonal PTM of a Pauli channel.
pub fn diagonal_ptm(ch: &PauliChannel) -> Ptm {
    Ptm::from_diagonal(&nalgebra::DVector::from_vec(ch.eigenvalues().lambdas))
}

/// Channel given by Kraus operators `ρ ↦ Σ K ρ K†`.
#[derive(Debug, Clone, PartialEq)]
pub struct KrausChannel {
    n: usize,
    ops: Vec<CMatrix>,
}

impl KrausChannel {
    pub fn new(n: usize, ops: Vec<CMatrix>) -> Result<Self> {
        let dim = 1usize << n;
        if ops.is_empty() {
            return Err(Error::InvalidArgument("Kraus channel needs an operator".into()));
        }
        let mut sum = CMatrix::zeros(dim, dim);
        for k in &ops {
            if k.nrows() != dim || k.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: k.nrows(),
                });
            }
            sum += k.adjoint() * k;
        }
        let dev = crate::linalg::max_abs_diff(&sum, &CMatrix::identity(dim, dim));
        if dev > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "Kraus operators not trace preserving (deviation {dev:e})"
            )));
        }
        Ok(KrausChannel { n, ops })
    }

    /// Single-unitary (coherent) error.
    pub fn unitary(n: usize, u: CMatrix) -> Result<Self> {
        Self::new(n, vec![u])
    }

    /// Single-qubit amplitude damping with decay probability `gamma`.
    pub fn amplitude_damping(gamma: f64) -> Result<Self> {
        use crate::linalg::{ONE, ZERO};
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidProbability {
                what: "damping",
                value: gamma,
            });
        }
        let s = num_complex::Complex64::new((1.0 - gamma).sqrt(), 0.0);
        let g = num_complex::Complex64::new(gamma.sqrt(), 0.0);
        let k0 = CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, s]);
        let k1 = CMatrix::from_row_slice(2, 2, &[ZERO, g, ZERO, ZERO]);
        Self::new(1, vec![k0, k1])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ops(&self) -> &[CMatrix] {
        &self.ops
    }

    pub fn apply(&self, m: &CMatrix) -> CMatrix {
        self.ops
            .iter()
            .map(|k| k * m * k.adjoint())
            .fold(CMatrix::zeros(m.nrows(), m.ncols()), |a, b| a + b)
    }

    pub fn ptm(&self) -> Ptm {
        let n = self.n;
        let dim = 1usize << (2 * n);
        let mut r = Ptm::zeros(dim, dim);
        for i in 0..dim {
            let out = self.apply(&PauliString::from_index(n, i).matrix());
            let data: Vec<_> = out.transpose().iter().copied().collect();
            let coeffs = expand_operator(n, &data);
            for j in 0..dim {
                r[(j, i)] = coeffs.coeffs[j];
            }
        }
        r
    }
}

/// Any channel the simulator can apply.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseChannel {
    Pauli(PauliChannel),
    Kraus(KrausChannel),
}

impl NoiseChannel {
    pub fn n(&self) -> usize {
        match self {
            NoiseChannel::Pauli(c) => c.n(),
            NoiseChannel::Kraus(c) => c.n(),
        }
    }

    /// Pauli-twirled version (identity for channels that are already Pauli).
    pub fn twirled(&self) -> Result<PauliChannel> {
        match self {
            NoiseChannel::Pauli(c) => Ok(c.clone()),
            NoiseChannel::Kraus(k) => twirl(&k.ptm()),
        }
    }
}

impl From<PauliChannel> for NoiseChannel {
    fn from(c: PauliChannel) -> Self {
        NoiseChannel::Pauli(c)
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::PauliChannel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_channel(n: usize, seed: u64) -> PauliChannel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 1usize << (2 * n);
        let mut p: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        p[0] += dim as f64 * rng.random_range(0.5..4.0);
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        PauliChannel::new(n, p).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::Gate;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use super::tests_support::random_channel;

    /// `λ_j = tr(P_j E(P_j)) / 2^n` with `E` applied as an explicit Kraus sum.
    fn eigenvalues_by_conjugation(ch: &PauliChannel) -> Vec<f64> {
        let n = ch.n();
        let dim = 1usize << n;
        let paulis: Vec<CMatrix> = (0..1usize << (2 * n))
            .map(|i| PauliString::from_index(n, i).matrix())
            .collect();
        paulis
            .iter()
            .map(|pj| {
                let mut out = CMatrix::zeros(dim, dim);
                for (k, p) in ch.terms() {
                    out += &paulis[k] * pj * &paulis[k] * num_complex::Complex64::new(p, 0.0);
                }
                (pj * out).trace().re / dim as f64
            })
            .collect()
    }

    #[test]
    fn single_qubit_bitflip_eigenvalues() {
        let ch = PauliChannel::new(1, vec![0.9, 0.1, 0.0, 0.0]).unwrap();
        let ev = ch.eigenvalues();
        let expect = [1.0, 1.0, 0.8, 0.8];
        for (a, b) in ev.lambdas.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let oracle = eigenvalues_by_conjugation(&ch);
        for (a, b) in ev.lambdas.iter().zip(oracle) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn identity_and_depolarizing() {
        assert!(PauliChannel::identity(2).eigenvalues().lambdas.iter().all(|&l| l == 1.0));
        let ch = PauliChannel::new(1, vec![0.97, 0.01, 0.01, 0.01]).unwrap();
        let ev = ch.eigenvalues();
        for j in 1..4 {
            assert_abs_diff_eq!(ev.get(j), 0.96, epsilon = 1e-15);
        }
        let d = depolarizing(1, 0.04).unwrap();
        assert!(d.eigenvalues().lambdas[1..].iter().all(|l| (l - 0.96).abs() < 1e-15));
        assert_eq!(depolarizing(3, 0.0).unwrap(), PauliChannel::identity(3));
        let d2 = depolarizing(2, 0.1).unwrap();
        assert!(d2.probs()[1..].iter().all(|p| (p - 0.00625).abs() < 1e-16));
        assert!(depolarizing(1, 1.5).is_err());
        assert!(depolarizing(1, -0.1).is_err());
    }

    #[test]
    fn channel_validation() {
        assert!(PauliChannel::new(1, vec![0.5, 0.5, 0.1, 0.0]).is_err());
        assert!(PauliChannel::new(1, vec![1.1, -0.1, 0.0, 0.0]).is_err());
        assert!(PauliChannel::new(1, vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn folding_and_asymmetry_values() {
        assert_abs_diff_eq!(folded_eigenvalue(0.96, 0.96, 1), 0.884736, epsilon = 1e-15);
        assert_eq!(folded_eigenvalue(0.7, 0.2, 0), 0.7);
        // three explicit channel eigenvalues composed: f·b·f·b·f
        let manual = 0.95 * 0.97 * 0.95 * 0.97 * 0.95;
        assert_abs_diff_eq!(folded_eigenvalue(0.95, 0.97, 2), manual, epsilon = 1e-15);
        assert_abs_diff_eq!(folded_eigenvalue(0.95, 0.97, 2), 0.95 * 0.9215f64.powi(2), epsilon = 1e-12);

        let spec = AsymmetrySpec::new(vec![0.0, 1.0], 0.1).unwrap();
        assert_eq!(backward_from_forward(0.9, &spec, 0), 0.9);
        assert_abs_diff_eq!(backward_from_forward(0.96, &spec, 1), 0.96 * 0.01f64.exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(backward_from_forward(0.96, &spec, 1), 0.969648, epsilon = 1e-6);
        let flat = AsymmetrySpec::new(vec![3.0, -2.0], 0.0).unwrap();
        assert_eq!(backward_from_forward(0.8, &flat, 1), 0.8);
        assert!(AsymmetrySpec::new(vec![f64::NAN], 0.1).is_err());
    }

    #[test]
    fn backward_channel_has_shifted_eigenvalues() {
        let f = depolarizing(1, 0.1).unwrap();
        let spec = AsymmetrySpec::uniform(1, -1.0, 0.2).unwrap();
        let b = backward_channel(&f, &spec).unwrap();
        let ev = b.eigenvalues();
        assert_abs_diff_eq!(ev.get(1), 0.9 * (-0.04f64).exp(), epsilon = 1e-14);
        // eigenvalues above one cannot come from a Pauli channel
        let bad = AsymmetrySpec::uniform(1, 100.0, 1.0).unwrap();
        assert!(backward_channel(&f, &bad).is_err());
    }

    #[test]
    fn compose_examples() {
        let flip = PauliChannel::new(1, vec![0.9, 0.1, 0.0, 0.0]).unwrap();
        let c = compose(&flip, &flip).unwrap();
        assert_abs_diff_eq!(c.probs()[0], 0.82, epsilon = 1e-15);
        assert_abs_diff_eq!(c.probs()[1], 0.18, epsilon = 1e-15);
        let r = random_channel(2, 4);
        assert_eq!(compose(&r, &PauliChannel::identity(2)).unwrap(), r);
        assert!(compose(&r, &flip).is_err());
    }

    #[test]
    fn folded_channel_matches_folded_eigenvalues() {
        let f = random_channel(2, 1);
        let b = random_channel(2, 2);
        let folded = folded_channel(&f, &b, 3).unwrap().eigenvalues();
        let expect = f.eigenvalues().folded(&b.eigenvalues(), 3);
        for (x, y) in folded.lambdas.iter().zip(&expect.lambdas) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-13);
        }
    }

    #[test]
    fn twirl_examples() {
        let d = depolarizing(2, 0.07).unwrap();
        let back = twirl(&diagonal_ptm(&d)).unwrap();
        for (a, b) in back.probs().iter().zip(d.probs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert_eq!(twirl(&Ptm::identity(4, 4)).unwrap(), PauliChannel::identity(1));

        let rz = KrausChannel::unitary(1, Gate::Rz(0, 0.1).matrix()).unwrap();
        let ev = twirl(&rz.ptm()).unwrap().eigenvalues();
        assert_abs_diff_eq!(ev.get(1), 0.1f64.cos(), epsilon = 1e-14);
        assert_abs_diff_eq!(ev.get(3), 0.1f64.cos(), epsilon = 1e-14);
        assert_abs_diff_eq!(ev.get(2), 1.0, epsilon = 1e-14);

        // non-unital damping twirls to a valid Pauli channel
        let ad = KrausChannel::amplitude_damping(0.2).unwrap();
        let pc = twirl(&ad.ptm()).unwrap();
        assert_abs_diff_eq!(pc.eigenvalues().get(2), 0.8, epsilon = 1e-14);

        // a PTM diagonal that no Pauli channel has
        let bad = Ptm::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -1.0, -1.0, -1.0]));
        assert!(matches!(twirl(&bad), Err(Error::NotPauliTwirlable { .. })));
        assert!(twirl(&Ptm::identity(3, 3)).is_err());
    }

    #[test]
    fn tensor_and_embed_agree() {
        let a = random_channel(1, 10);
        let b = random_channel(1, 11);
        let t = a.tensor(&b);
        let e = a.embed(&[0], 2).unwrap();
        let f = b.embed(&[1], 2).unwrap();
        let c = compose(&e, &f).unwrap();
        for (x, y) in t.probs().iter().zip(c.probs()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        // product eigenvalues factorise
        let ev = t.eigenvalues();
        let (ea, eb) = (a.eigenvalues(), b.eigenvalues());
        for j in 0..16 {
            assert_abs_diff_eq!(ev.get(j), ea.get(j & 3) * eb.get(j >> 2), epsilon = 1e-14);
        }
    }

    proptest! {
        #[test]
        fn fast_transform_matches_anticommutation_sum(n in 1usize..=3, seed in any::<u64>()) {
            let ch = random_channel(n, seed);
            let fast = ch.eigenvalues();
            let slow = eigenvalues_by_anticommutation(&ch);
            for (a, b) in fast.lambdas.iter().zip(&slow.lambdas) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((fast.lambdas[0] - 1.0).abs() < 1e-12);
            prop_assert!(fast.lambdas.iter().all(|l| l.abs() <= 1.0 + 1e-12));
        }

        #[test]
        fn compose_is_associative_and_multiplicative(seed in any::<u64>()) {
            let a = random_channel(2, seed);
            let b = random_channel(2, seed ^ 0x9e37);
            let c = random_channel(2, seed.wrapping_add(7));
            let ab_c = compose(&compose(&a, &b).unwrap(), &c).unwrap();
            let a_bc = compose(&a, &compose(&b, &c).unwrap()).unwrap();
            for (x, y) in ab_c.probs().iter().zip(a_bc.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let lab = compose(&a, &b).unwrap().eigenvalues();
            let (la, lb) = (a.eigenvalues(), b.eigenvalues());
            for j in 0..16 {
                prop_assert!((lab.get(j) - la.get(j) * lb.get(j)).abs() < 1e-12);
            }
        }

        #[test]
        fn twirl_inverts_diagonal_ptm(n in 1usize..=2, seed in any::<u64>()) {
            let ch = random_channel(n, seed);
            let back = twirl(&diagonal_ptm(&ch)).unwrap();
            for (x, y) in back.probs().iter().zip(ch.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
