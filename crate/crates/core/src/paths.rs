//! Pauli-path expansion of noisy periodic circuits and the uniform-path
//! Markov chain used to study the distribution of the noise factor `W`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::channel::{folded_eigenvalue, ChannelEigenvalues};
use crate::circuit::{Gate, PeriodicCircuit};
use crate::error::{Error, Result};
use crate::pauli::{expand_state, PauliString, TransferMatrix, TRANSFER_EPS};
use crate::sim::{run_ideal, stream_rng, NoiseSpec};

/// Largest qubit count for dense adjacency extraction.
pub const MAX_ADJACENCY_QUBITS: usize = 4;
/// Path enumeration guard.
pub const PATH_LIMIT: u64 = 10_000_000;
const SAMPLE_STREAM: usize = 1 << 14;

/// Binary matrix with `A[i][j] = 1` iff Pauli `i` transfers to Pauli `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyMatrix {
    dim: usize,
    bits: Vec<bool>,
}

impl AdjacencyMatrix {
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..dim * dim).map(|k| f(k / dim, k % dim)).collect();
        AdjacencyMatrix { dim, bits }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_fn(dim, |i, j| i == j)
    }

    pub fn ones(dim: usize) -> Self {
        Self::from_fn(dim, |_, _| true)
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let dim = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.len(),
            });
        }
        if rows.iter().flatten().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("adjacency entries must be 0 or 1".into()));
        }
        Ok(Self::from_fn(dim, |i, j| rows[i][j] == 1))
    }

    pub fn from_transfer(t: &TransferMatrix) -> Self {
        Self::from_fn(t.dim(), |i, j| t.get(i, j).abs() > TRANSFER_EPS)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.dim + j]
    }

    pub fn successors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.dim).filter(move |&j| self.get(i, j))
    }

    pub fn edge_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| if self.get(i, j) { 1.0 } else { 0.0 })
    }

    /// Principal submatrix on `indices` (in the given order).
    pub fn submatrix(&self, indices: &[usize]) -> Self {
        Self::from_fn(indices.len(), |a, b| self.get(indices[a], indices[b]))
    }

    /// Drop the identity Pauli, which only ever maps to itself.
    pub fn non_identity_block(&self) -> Self {
        let idx: Vec<usize> = (1..self.dim).collect();
        self.submatrix(&idx)
    }

    /// Entrywise OR of `self` with another matrix of the same shape.
    pub fn union(&self, other: &AdjacencyMatrix) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        Ok(Self::from_fn(self.dim, |i, j| self.get(i, j) || other.get(i, j)))
    }
}

pub fn adjacency_from_period(n: usize, period: &[Gate]) -> Result<AdjacencyMatrix> {
    if n > MAX_ADJACENCY_QUBITS {
        return Err(Error::TooManyQubits {
            n,
            max: MAX_ADJACENCY_QUBITS,
        });
    }
    Ok(AdjacencyMatrix::from_transfer(&TransferMatrix::from_gates(n, period)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Primitivity {
    Primitive,
    Reducible,
    Periodic(usize),
}

fn reach(a: &AdjacencyMatrix, start: usize, reverse: bool) -> Vec<Option<usize>> {
    let mut level = vec![None; a.dim];
    let mut queue = std::collections::VecDeque::from([start]);
    level[start] = Some(0);
    while let Some(u) = queue.pop_front() {
        let lu = level[u].unwrap();
        for v in 0..a.dim {
            let edge = if reverse { a.get(v, u) } else { a.get(u, v) };
            if edge && level[v].is_none() {
                level[v] = Some(lu + 1);
                queue.push_back(v);
            }
        }
    }
    level
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Irreducibility by strong connectivity, aperiodicity by the gcd of
/// `level(u) + 1 − level(v)` over all edges of a BFS from vertex 0.
pub fn primitivity_check(a: &AdjacencyMatrix) -> Primitivity {
    if a.dim == 0 {
        return Primitivity::Reducible;
    }
    let fwd = reach(a, 0, false);
    let bwd = reach(a, 0, true);
    if fwd.iter().chain(&bwd).any(Option::is_none) {
        return Primitivity::Reducible;
    }
    let mut d = 0;
    for u in 0..a.dim {
        for v in a.successors(u) {
            let lu = fwd[u].unwrap() as i64;
            let lv = fwd[v].unwrap() as i64;
            d = gcd(d, (lu + 1 - lv).unsigned_abs() as usize);
        }
    }
    if d == 1 {
        Primitivity::Primitive
    } else {
        Primitivity::Periodic(d)
    }
}

/// Wielandt bound: `A` is primitive iff `A^{(d−1)²+1}` is entrywise positive.
pub fn wielandt_primitive(a: &AdjacencyMatrix) -> bool {
    let d = a.dim;
    if d == 0 {
        return false;
    }
    let mul = |x: &AdjacencyMatrix, y: &AdjacencyMatrix| {
        AdjacencyMatrix::from_fn(d, |i, j| (0..d).any(|k| x.get(i, k) && y.get(k, j)))
    };
    let mut e = (d - 1) * (d - 1) + 1;
    let mut base = a.clone();
    let mut acc: Option<AdjacencyMatrix> = None;
    while e > 0 {
        if e & 1 == 1 {
            acc = Some(match acc {
                None => base.clone(),
                Some(m) => mul(&m, &base),
            });
        }
        e >>= 1;
        if e > 0 {
            base = mul(&base, &base);
        }
    }
    acc.is_some_and(|m| m.bits.iter().all(|&b| b))
}

/// `A = λ₁ r lᵀ + R` with `⟨l|r⟩ = 1`, `lᵀR = 0`, `R r = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerronDecomposition {
    pub lambda1: f64,
    pub right: DVector<f64>,
    pub left: DVector<f64>,
    pub residual: DMatrix<f64>,
}

impl PerronDecomposition {
    /// Spectral radius of `R`.
    pub fn residual_radius(&self) -> f64 {
        spectral_radius(&self.residual)
    }

    /// `ρ(R) / λ₁`, the geometric mixing rate of the chain.
    pub fn mixing_ratio(&self) -> f64 {
        self.residual_radius() / self.lambda1
    }

    /// `π_i = l_i r_i`.
    pub fn stationary(&self) -> DVector<f64> {
        self.left.component_mul(&self.right)
    }
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Unit null vector of `m` from its smallest singular value.
fn null_vector(m: DMatrix<f64>) -> DVector<f64> {
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap();
    v_t.row(k).transpose()
}

pub fn perron_decompose(a: &AdjacencyMatrix) -> Result<PerronDecomposition> {
    match primitivity_check(a) {
        Primitivity::Primitive => {}
        other => return Err(Error::NotPrimitive(format!("{other:?}"))),
    }
    let m = a.to_f64();
    let d = a.dim;
    let lambda1 = m
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = &m - DMatrix::identity(d, d) * lambda1;
    let mut right = null_vector(shifted.clone());
    let mut left = null_vector(shifted.transpose());
    if right.sum() < 0.0 {
        right = -right;
    }
    if left.sum() < 0.0 {
        left = -left;
    }
    // one refinement sweep: r ← A r / λ₁ keeps positivity and trims noise
    right = &m * right / lambda1;
    left = m.transpose() * left / lambda1;
    right /= right.norm();
    let s = left.dot(&right);
    left /= s;
    let residual = &m - (&right * left.transpose()) * lambda1;
    Ok(PerronDecomposition {
        lambda1,
        right,
        left,
        residual,
    })
}

/// Homogeneous uniform-path chain `P_ij = A_ij r_j / (λ₁ r_i)` and its
/// stationary law `π_i = l_i r_i`.
pub fn homogeneous_chain(pd: &PerronDecomposition, a: &AdjacencyMatrix) -> (DMatrix<f64>, DVector<f64>) {
    let d = a.dim;
    let p = DMatrix::from_fn(d, d, |i, j| {
        if a.get(i, j) {
            pd.right[j] / (pd.lambda1 * pd.right[i])
        } else {
            0.0
        }
    });
    (p, pd.stationary())
}

/// Exact path-count tables for paths `α₀ ∈ S₀ → … → α_m = β` through `A`.
#[derive(Debug, Clone)]
pub struct PathChain {
    a: AdjacencyMatrix,
    sources: Vec<usize>,
    beta: usize,
    m: usize,
    f: Vec<Vec<BigUint>>,
    g: Vec<Vec<BigUint>>,
    total: BigUint,
}

/// Row-stochastic step matrix; unreachable rows (`g(t−1,i) = 0`) are all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTransition {
    pub matrix: DMatrix<f64>,
    pub reachable: Vec<bool>,
}

impl PathChain {
    pub fn new(a: AdjacencyMatrix, sources: &[usize], beta: usize, m: usize) -> Result<Self> {
        let d = a.dim;
        if beta >= d {
            return Err(Error::DimensionMismatch { expected: d, got: beta });
        }
        if let Some(&s) = sources.iter().find(|&&s| s >= d) {
            return Err(Error::DimensionMismatch { expected: d, got: s });
        }
        let mut f0 = vec![BigUint::zero(); d];
        for &s in sources {
            f0[s] = BigUint::from(1u32);
        }
        let mut f = vec![f0];
        for t in 1..=m {
            let prev = &f[t - 1];
            let mut next = vec![BigUint::zero(); d];
            for (i, fi) in prev.iter().enumerate() {
                if fi.is_zero() {
                    continue;
                }
                for j in a.successors(i) {
                    next[j] += fi;
                }
            }
            f.push(next);
        }
        let mut g = vec![vec![BigUint::zero(); d]; m + 1];
        g[m][beta] = BigUint::from(1u32);
        for t in (1..=m).rev() {
            for i in 0..d {
                let mut acc = BigUint::zero();
                for j in a.successors(i) {
                    acc += &g[t][j];
                }
                g[t - 1][i] = acc;
            }
        }
        let total = f[m][beta].clone();
        if total.is_zero() {
            return Err(Error::Unreachable { beta });
        }
        let mut sources = sources.to_vec();
        sources.sort_unstable();
        sources.dedup();
        Ok(PathChain {
            a,
            sources,
            beta,
            m,
            f,
            g,
            total,
        })
    }

    pub fn adjacency(&self) -> &AdjacencyMatrix {
        &self.a
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn beta(&self) -> usize {
        self.beta
    }

    pub fn periods(&self) -> usize {
        self.m
    }

    /// `N`, the number of admissible paths.
    pub fn total(&self) -> &BigUint {
        &self.total
    }

    pub fn f(&self, t: usize, i: usize) -> &BigUint {
        &self.f[t][i]
    }

    pub fn g(&self, t: usize, i: usize) -> &BigUint {
        &self.g[t][i]
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.m {
            return Err(Error::InvalidArgument(format!(
                "period index {t} outside {lo}..={}",
                self.m
            )));
        }
        Ok(())
    }

    /// `μ_t(i) = f(t,i) g(t,i) / N` as exact rationals.
    pub fn marginal_exact(&self, t: usize) -> Result<Vec<BigRational>> {
        self.check_t(t, 0)?;
        let n = big_int(&self.total);
        Ok((0..self.a.dim)
            .map(|i| BigRational::new(big_int(&(&self.f[t][i] * &self.g[t][i])), n.clone()))
            .collect())
    }

    pub fn marginal(&self, t: usize) -> Result<Vec<f64>> {
        Ok(self.marginal_exact(t)?.iter().map(ratio_f64).collect())
    }

    /// `(P_t)_{ij} = g(t,j) A_ij / g(t−1,i)` as exact rationals; `None` on
    /// unreachable rows.
    pub fn transition_exact(&self, t: usize) -> Result<Vec<Option<Vec<BigRational>>>> {
        self.check_t(t, 1)?;
        Ok((0..self.a.dim)
            .map(|i| {
                let den = &self.g[t - 1][i];
                if den.is_zero() {
                    return None;
                }
                let den = big_int(den);
                Some(
                    (0..self.a.dim)
                        .map(|j| {
                            if self.a.get(i, j) {
                                BigRational::new(big_int(&self.g[t][j]), den.clone())
                            } else {
                                BigRational::zero()
                            }
                        })
                        .collect(),
                )
            })
            .collect())
    }

    pub fn transition_matrix(&self, t: usize) -> Result<StepTransition> {
        let exact = self.transition_exact(t)?;
        let d = self.a.dim;
        let reachable = exact.iter().map(Option::is_some).collect();
        let matrix = DMatrix::from_fn(d, d, |i, j| exact[i].as_ref().map_or(0.0, |row| ratio_f64(&row[j])));
        Ok(StepTransition { matrix, reachable })
    }

    /// Chain probability `μ₀(α₀) Π_t P_t(α_{t−1}, α_t)` of a full path.
    pub fn path_probability_exact(&self, path: &[usize]) -> Result<BigRational> {
        if path.len() != self.m + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.m + 1,
                got: path.len(),
            });
        }
        let mut p = self.marginal_exact(0)?[path[0]].clone();
        for t in 1..=self.m {
            if p.is_zero() {
                break;
            }
            let (i, j) = (path[t - 1], path[t]);
            if !self.a.get(i, j) {
                return Ok(BigRational::zero());
            }
            let den = &self.g[t - 1][i];
            p *= BigRational::new(big_int(&self.g[t][j]), big_int(den));
        }
        Ok(p)
    }

    /// Every admissible path, in lexicographic order.
    pub fn enumerate(&self, limit: u64) -> Result<Vec<Vec<usize>>> {
        if self.total > BigUint::from(limit) {
            return Err(Error::PathGuardExceeded {
                count: self.total.to_string(),
                limit,
            });
        }
        let mut out = Vec::new();
        let mut path = Vec::with_capacity(self.m + 1);
        for &s in &self.sources {
            if !self.g[0][s].is_zero() {
                path.push(s);
                self.extend(&mut path, &mut out);
                path.pop();
            }
        }
        Ok(out)
    }

    fn extend(&self, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let t = path.len();
        if t == self.m + 1 {
            out.push(path.clone());
            return;
        }
        let i = *path.last().unwrap();
        for j in self.a.successors(i) {
            if !self.g[t][j].is_zero() {
                path.push(j);
                self.extend(path, out);
                path.pop();
            }
        }
    }

    /// Floating-point sampling tables: initial cumulative law and, per step,
    /// per row, cumulative successor weights.
    fn sampling_tables(&self) -> (Vec<(usize, f64)>, Vec<Vec<Vec<(usize, f64)>>>) {
        let mu0 = self.marginal(0).unwrap();
        let init = cumulative(mu0.iter().copied().enumerate());
        let steps = (1..=self.m)
            .map(|t| {
                (0..self.a.dim)
                    .map(|i| {
                        if self.g[t - 1][i].is_zero() {
                            return Vec::new();
                        }
                        let den = self.g[t - 1][i].to_f64().unwrap_or(f64::INFINITY);
                        cumulative(self.a.successors(i).map(|j| {
                            let w = self.g[t][j].to_f64().unwrap_or(f64::INFINITY);
                            (j, w / den)
                        }))
                    })
                    .collect()
            })
            .collect();
        (init, steps)
    }
}

fn cumulative(items: impl Iterator<Item = (usize, f64)>) -> Vec<(usize, f64)> {
    let mut acc = 0.0;
    let mut out: Vec<(usize, f64)> = items
        .filter(|(_, w)| *w > 0.0)
        .map(|(j, w)| {
            acc += w;
            (j, acc)
        })
        .collect();
    if let Some(last) = out.last_mut() {
        last.1 = f64::INFINITY;
    }
    out
}

fn draw(table: &[(usize, f64)], u: f64) -> usize {
    let k = table.partition_point(|&(_, c)| c <= u);
    table[k.min(table.len() - 1)].0
}

fn big_int(u: &BigUint) -> num_bigint::BigInt {
    num_bigint::BigInt::from(u.clone())
}

fn ratio_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Per-period forward and backward eigenvalues (one shared entry or one per
/// period).
#[derive(Debug, Clone, PartialEq)]
pub struct PathNoise {
    pub forward: Vec<ChannelEigenvalues>,
    pub backward: Vec<ChannelEigenvalues>,
}

impl PathNoise {
    pub fn symmetric(eigenvalues: Vec<ChannelEigenvalues>) -> Self {
        PathNoise {
            backward: eigenvalues.clone(),
            forward: eigenvalues,
        }
    }

    pub fn from_spec(noise: &NoiseSpec, m: usize) -> Result<Option<Self>> {
        if !noise.has_period_noise() {
            return Ok(None);
        }
        let mut forward = Vec::with_capacity(m);
        let mut backward = Vec::with_capacity(m);
        for t in 0..m {
            let f = noise.forward(t).ok_or_else(|| Error::InvalidArgument("missing forward noise".into()))?;
            let b = noise.backward(t).ok_or_else(|| Error::InvalidArgument("missing backward noise".into()))?;
            forward.push(f.twirled()?.eigenvalues());
            backward.push(b.twirled()?.eigenvalues());
        }
        Ok(Some(PathNoise { forward, backward }))
    }

    /// `λ_{j,r}` of period `t` (0-based).
    pub fn folded(&self, t: usize, j: usize, r: usize) -> f64 {
        let pick = |v: &[ChannelEigenvalues]| if v.len() == 1 { v[0].get(j) } else { v[t].get(j) };
        folded_eigenvalue(pick(&self.forward), pick(&self.backward), r)
    }
}

/// One term `F_α W_α` of the path expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTerm {
    pub path: Vec<usize>,
    pub f: f64,
    pub w: f64,
}

/// Exact enumeration of all transfer paths that end on `beta`.
pub fn enumerate_path_terms(
    circ: &PeriodicCircuit,
    noise: &NoiseSpec,
    r: usize,
    beta: usize,
) -> Result<Vec<PathTerm>> {
    if !circ.post.is_empty() {
        return Err(Error::InvalidArgument(
            "path expansion needs the observable at the end of the last period".into(),
        ));
    }
    if noise.gate_noise().is_some_and(|g| !g.is_noiseless()) {
        return Err(Error::InvalidArgument("path expansion supports period noise only".into()));
    }
    let n = circ.n;
    let m = circ.num_periods();
    let prep = PeriodicCircuit {
        periods: Vec::new(),
        post: Vec::new(),
        ..circ.clone()
    };
    let rho0 = expand_state(&run_ideal(&prep)?)?;
    let transfers = circ
        .periods
        .iter()
        .map(|p| TransferMatrix::from_gates(n, p))
        .collect::<Result<Vec<_>>>()?;
    let pn = PathNoise::from_spec(noise, m)?;
    let dim = 1usize << (2 * n);
    if beta >= dim {
        return Err(Error::DimensionMismatch { expected: dim, got: beta });
    }

    // backward path counts through the actual per-period adjacency
    let adj: Vec<AdjacencyMatrix> = transfers.iter().map(AdjacencyMatrix::from_transfer).collect();
    let mut g = vec![BigUint::zero(); dim];
    g[beta] = BigUint::from(1u32);
    let mut reach = vec![g.clone(); m + 1];
    for t in (0..m).rev() {
        let next = &reach[t + 1];
        let cur: Vec<BigUint> = (0..dim)
            .map(|i| adj[t].successors(i).fold(BigUint::zero(), |acc, j| acc + &next[j]))
            .collect();
        reach[t] = cur;
    }
    let sources = rho0.support();
    let count: BigUint = sources.iter().map(|&s| reach[0][s].clone()).sum();
    if count > BigUint::from(PATH_LIMIT) {
        return Err(Error::PathGuardExceeded {
            count: count.to_string(),
            limit: PATH_LIMIT,
        });
    }

    let mut out = Vec::new();
    let mut path = Vec::with_capacity(m + 1);
    for &s in &sources {
        if reach[0][s].is_zero() {
            continue;
        }
        path.push(s);
        walk(&mut path, rho0.coeffs[s], 1.0, &transfers, &reach, pn.as_ref(), r, &mut out);
        path.pop();
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    path: &mut Vec<usize>,
    f: f64,
    w: f64,
    transfers: &[TransferMatrix],
    reach: &[Vec<BigUint>],
    noise: Option<&PathNoise>,
    r: usize,
    out: &mut Vec<PathTerm>,
) {
    let t = path.len() - 1;
    if t == transfers.len() {
        out.push(PathTerm {
            path: path.clone(),
            f,
            w,
        });
        return;
    }
    let i = path[t];
    for (j, &c) in transfers[t].row(i).iter().enumerate() {
        if c.abs() <= TRANSFER_EPS || reach[t + 1][j].is_zero() {
            continue;
        }
        let lam = noise.map_or(1.0, |pn| pn.folded(t, j, r));
        path.push(j);
        walk(path, f * c, w * lam, transfers, reach, noise, r, out);
        path.pop();
    }
}

/// `⟨P_β⟩(r) = 2^n Σ_α F_α W_α` by exhaustive path enumeration.
pub fn path_sum_expectation(
    circ: &PeriodicCircuit,
    noise: &NoiseSpec,
    r: usize,
    beta: &PauliString,
) -> Result<f64> {
    let terms = enumerate_path_terms(circ, noise, r, beta.index())?;
    let scale = (1usize << circ.n) as f64 * beta.sign().value();
    Ok(scale * terms.iter().map(|t| t.f * t.w).sum::<f64>())
}

/// `⟨P_β⟩ = ⟨P_β⟩₀ E[W] + 2^n N_β cov(F, W)` over the uniform path law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceDecomposition {
    pub n_paths: usize,
    pub ideal: f64,
    pub mean_w: f64,
    pub cov_fw: f64,
    pub noisy: f64,
}

impl CovarianceDecomposition {
    /// Right-hand side `⟨P_β⟩₀ E[W] + 2^n N cov(F,W)`.
    pub fn recombined(&self, n: usize) -> f64 {
        self.ideal * self.mean_w + (1usize << n) as f64 * self.n_paths as f64 * self.cov_fw
    }
}

pub fn covariance_decomposition(n: usize, terms: &[PathTerm]) -> Result<CovarianceDecomposition> {
    if terms.is_empty() {
        return Err(Error::Degenerate("no paths".into()));
    }
    let scale = (1usize << n) as f64;
    let k = terms.len() as f64;
    let mean_f = terms.iter().map(|t| t.f).sum::<f64>() / k;
    let mean_w = terms.iter().map(|t| t.w).sum::<f64>() / k;
    let cov_fw = terms.iter().map(|t| (t.f - mean_f) * (t.w - mean_w)).sum::<f64>() / k;
    Ok(CovarianceDecomposition {
        n_paths: terms.len(),
        ideal: scale * terms.iter().map(|t| t.f).sum::<f64>(),
        mean_w,
        cov_fw,
        noisy: scale * terms.iter().map(|t| t.f * t.w).sum::<f64>(),
    })
}

/// Transfer data attached to a chain so that samples carry `F_α`.
#[derive(Debug, Clone)]
pub struct PathCoefficients {
    pub initial: Vec<f64>,
    pub transfers: Vec<TransferMatrix>,
}

impl PathCoefficients {
    fn f(&self, path: &[usize]) -> f64 {
        let mut f = self.initial[path[0]];
        for t in 1..path.len() {
            let tm = if self.transfers.len() == 1 {
                &self.transfers[0]
            } else {
                &self.transfers[t - 1]
            };
            f *= tm.get(path[t - 1], path[t]);
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub path: Vec<usize>,
    /// `ln |W_α|`; `-inf` when some eigenvalue on the path is zero.
    pub ln_w: f64,
    /// Sign of `W_α`.
    pub sign: i8,
    /// `F_α` when transfer coefficients were supplied.
    pub f: Option<f64>,
    pub weight: f64,
}

/// Exactly uniform paths over the admissible set, drawn by forward sampling
/// `μ₀` then `P_1, …, P_m`. Samples are produced in fixed-size streams with
/// independent seeds and concatenated in stream order.
pub fn sample_paths(
    chain: &PathChain,
    count: usize,
    seed: u64,
    noise: &PathNoise,
    r: usize,
    coefficients: Option<&PathCoefficients>,
) -> Result<Vec<PathSample>> {
    let (init, steps) = chain.sampling_tables();
    let streams = count.div_ceil(SAMPLE_STREAM);
    let chunks: Vec<Vec<PathSample>> = (0..streams)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed, s as u64);
            let len = SAMPLE_STREAM.min(count - s * SAMPLE_STREAM);
            (0..len)
                .map(|_| {
                    let mut path = Vec::with_capacity(chain.m + 1);
                    path.push(draw(&init, rng.random::<f64>()));
                    for table in &steps {
                        let i = *path.last().unwrap();
                        path.push(draw(&table[i], rng.random::<f64>()));
                    }
                    let mut ln_w = 0.0;
                    let mut sign = 1i8;
                    for (t, &j) in path.iter().enumerate().skip(1) {
                        let lam = noise.folded(t - 1, j, r);
                        if lam < 0.0 {
                            sign = -sign;
                        }
                        ln_w += lam.abs().ln();
                    }
                    PathSample {
                        f: coefficients.map(|c| c.f(&path)),
                        path,
                        ln_w,
                        sign,
                        weight: 1.0,
                    }
                })
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Quantile levels `0.01, 0.012, …, 0.99`.
pub fn default_qq_levels() -> Vec<f64> {
    (0..=490).map(|i| 0.01 + 0.002 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqReport {
    pub levels: Vec<f64>,
    pub sample_q: Vec<f64>,
    pub normal_q: Vec<f64>,
    pub correlation: f64,
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Weighted quantile: interpolate between the cumulative-weight midpoints of
/// the sorted samples.
fn weighted_quantile(sorted: &[(f64, f64)], p: f64) -> f64 {
    let total: f64 = sorted.iter().map(|s| s.1).sum();
    let mut acc = 0.0;
    let mids: Vec<f64> = sorted
        .iter()
        .map(|&(_, w)| {
            let mid = (acc + w / 2.0) / total;
            acc += w;
            mid
        })
        .collect();
    let k = mids.partition_point(|&c| c < p);
    if k == 0 {
        return sorted[0].0;
    }
    if k == sorted.len() {
        return sorted[k - 1].0;
    }
    let (c0, c1) = (mids[k - 1], mids[k]);
    let x = if c1 > c0 { (p - c0) / (c1 - c0) } else { 0.0 };
    sorted[k - 1].0 + x * (sorted[k].0 - sorted[k - 1].0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Q-Q correlation of `values` against the standard normal. Non-finite values
/// (paths with a zero eigenvalue) are skipped.
pub fn lognormality_qq(values: &[f64], weights: Option<&[f64]>, levels: &[f64]) -> Result<QqReport> {
    if let Some(w) = weights {
        if w.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: values.len(),
                got: w.len(),
            });
        }
    }
    let mut pairs: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, &v)| (v, weights.map_or(1.0, |w| w[i])))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    if pairs.len() < 100 {
        return Err(Error::InvalidArgument(format!(
            "Q-Q analysis needs at least 100 samples, got {}",
            pairs.len()
        )));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pairs[0].0 == pairs[pairs.len() - 1].0 {
        return Err(Error::Degenerate(
            "zero variance in ln W (depolarizing-like noise)".into(),
        ));
    }
    let normal = Normal::standard();
    let sorted: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let sample_q: Vec<f64> = match weights {
        None => levels.iter().map(|&p| quantile_sorted(&sorted, p)).collect(),
        Some(_) => levels.iter().map(|&p| weighted_quantile(&pairs, p)).collect(),
    };
    let normal_q: Vec<f64> = levels.iter().map(|&p| normal.inverse_cdf(p)).collect();
    let correlation = pearson(&sample_q, &normal_q);
    Ok(QqReport {
        levels: levels.to_vec(),
        sample_q,
        normal_q,
        correlation,
    })
}

/// CSV with columns `path_id, ln_w, sign, weight`.
pub fn write_samples_csv<W: Write>(out: W, samples: &[PathSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path_id", "ln_w", "sign", "weight"])?;
    for (i, s) in samples.iter().enumerate() {
        w.write_record([
            i.to_string(),
            s.ln_w.to_string(),
            s.sign.to_string(),
            s.weight.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_qq_json<W: Write>(out: W, report: &QqReport) -> Result<()> {
    serde_json::to_writer_pretty(out, report)?;
    Ok(())
}
