//! Exact density-matrix simulation of noisy periodic circuits.
//!
//! A run is compiled into a flat list of operations (gates and channels) and
//! executed on a row-major `2^n × 2^n` matrix. The same list, reversed and
//! adjointed, gives the dual-state map.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::{backward_channel, folded_channel, AsymmetrySpec, KrausChannel, NoiseChannel, PauliChannel};
use crate::circuit::{Gate, PeriodicCircuit};
use crate::error::{Error, Result};
use crate::linalg::{deposit_bits, CMatrix, ONE, ZERO};
use crate::pauli::{PauliString, PauliVector};

pub const MAX_QUBITS: usize = 6;
pub const DEFAULT_FRAMES: usize = 32;
const STATE_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-9;
const IMAG_TOL: f64 = 1e-10;
const EXHAUSTIVE_LIMIT: u128 = 1 << 16;

/// Deterministic RNG for sub-task `stream` of a master seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    n: usize,
    data: Vec<Complex64>,
}

impl DensityMatrix {
    pub fn zero_state(n: usize) -> Self {
        let dim = 1usize << n;
        let mut data = vec![ZERO; dim * dim];
        data[0] = ONE;
        DensityMatrix { n, data }
    }

    pub fn maximally_mixed(n: usize) -> Self {
        let dim = 1usize << n;
        let mut data = vec![ZERO; dim * dim];
        let v = Complex64::new(1.0 / dim as f64, 0.0);
        for a in 0..dim {
            data[a * dim + a] = v;
        }
        DensityMatrix { n, data }
    }

    /// Full-rank random state `G G† / tr(G G†)` from a complex Ginibre matrix.
    pub fn random(n: usize, seed: u64) -> Self {
        let dim = 1usize << n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = CMatrix::from_fn(dim, dim, |_, _| {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        let m = &g * g.adjoint();
        let tr = m.trace().re;
        Self::from_matrix_unchecked(n, &(m / Complex64::new(tr, 0.0)))
    }

    /// Row-major data, no validation.
    pub fn from_raw(n: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), 1usize << (2 * n), "raw data has wrong length");
        DensityMatrix { n, data }
    }

    /// Build from a matrix and check the state invariants.
    pub fn from_matrix(n: usize, m: &CMatrix) -> Result<Self> {
        let dim = 1usize << n;
        if m.nrows() != dim || m.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: m.nrows(),
            });
        }
        let rho = Self::from_matrix_unchecked(n, m);
        rho.validate()?;
        Ok(rho)
    }

    fn from_matrix_unchecked(n: usize, m: &CMatrix) -> Self {
        let data = m.transpose().iter().copied().collect();
        DensityMatrix { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        1 << self.n
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.dim() + col]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn to_matrix(&self) -> CMatrix {
        let dim = self.dim();
        CMatrix::from_row_slice(dim, dim, &self.data)
    }

    pub fn trace(&self) -> Complex64 {
        let dim = self.dim();
        (0..dim).map(|a| self.data[a * dim + a]).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let dim = self.dim();
        (0..dim).map(|a| self.data[a * dim + a].re).collect()
    }

    pub fn hermiticity_deviation(&self) -> f64 {
        let dim = self.dim();
        let mut dev: f64 = 0.0;
        for a in 0..dim {
            for b in a..dim {
                dev = dev.max((self.data[a * dim + b] - self.data[b * dim + a].conj()).norm());
            }
        }
        dev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let m = self.to_matrix();
        let h = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
        h.symmetric_eigenvalues().min()
    }

    /// Hermitian, unit trace and positive semidefinite within tolerance.
    pub fn validate(&self) -> Result<()> {
        let dev = self.hermiticity_deviation();
        if dev > STATE_TOL {
            return Err(Error::NotHermitian { deviation: dev });
        }
        let tr = self.trace();
        if (tr - ONE).norm() > STATE_TOL {
            return Err(Error::InvalidProbability {
                what: "state trace",
                value: tr.re,
            });
        }
        let min = self.min_eigenvalue();
        if min < -PSD_TOL {
            return Err(Error::InvalidProbability {
                what: "state eigenvalue",
                value: min,
            });
        }
        Ok(())
    }

    pub fn apply_gate(&mut self, g: &Gate) {
        self.apply_unitary(&g.matrix(), &g.qubits());
    }

    /// `ρ ↦ U ρ U†` for a `k`-qubit `U` on `qubits`.
    pub fn apply_unitary(&mut self, u: &CMatrix, qubits: &[usize]) {
        let dim = self.dim();
        let sub = 1usize << qubits.len();
        let mask: usize = qubits.iter().map(|&q| 1usize << q).sum();
        let offsets: Vec<usize> = (0..sub).map(|l| deposit_bits(l, qubits)).collect();
        let ul: Vec<Complex64> = (0..sub * sub).map(|i| u[(i / sub, i % sub)]).collect();
        let mut v = vec![ZERO; sub];
        let bases: Vec<usize> = (0..dim).filter(|b| b & mask == 0).collect();
        // U ρ
        for &base in &bases {
            for col in 0..dim {
                for (l, off) in offsets.iter().enumerate() {
                    v[l] = self.data[(base | off) * dim + col];
                }
                for (i, off) in offsets.iter().enumerate() {
                    let row = &ul[i * sub..(i + 1) * sub];
                    self.data[(base | off) * dim + col] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                }
            }
        }
        // (U ρ) U†
        for r in 0..dim {
            let line = &mut self.data[r * dim..(r + 1) * dim];
            for &base in &bases {
                for (l, off) in offsets.iter().enumerate() {
                    v[l] = line[base | off];
                }
                for (i, off) in offsets.iter().enumerate() {
                    let row = &ul[i * sub..(i + 1) * sub];
                    line[base | off] = row.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
                }
            }
        }
    }

    /// `ρ ↦ P ρ P` for the Pauli with the given index.
    pub fn apply_pauli(&mut self, index: usize) {
        if index == 0 {
            return;
        }
        let p = PauliString::from_index(self.n, index);
        let (x, z) = (p.x_bits() as usize, p.z_bits() as usize);
        let dim = self.dim();
        let old = self.data.clone();
        for a in 0..dim {
            for b in 0..dim {
                let v = old[(a ^ x) * dim + (b ^ x)];
                self.data[a * dim + b] = if ((a ^ b) & z).count_ones() % 2 == 0 { v } else { -v };
            }
        }
    }

    pub fn apply_pauli_channel(&mut self, ch: &PauliChannel) -> Result<()> {
        if ch.n() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: ch.n(),
            });
        }
        PauliKernel::new(ch).apply(self);
        Ok(())
    }

    /// Apply a local Pauli channel to `qubits`.
    pub fn apply_local_pauli_channel(&mut self, ch: &PauliChannel, qubits: &[usize]) -> Result<()> {
        let global = ch.embed(qubits, self.n)?;
        PauliKernel::new(&global).apply(self);
        Ok(())
    }

    pub fn apply_kraus(&mut self, ch: &KrausChannel) -> Result<()> {
        if ch.n() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: ch.n(),
            });
        }
        let out = ch.apply(&self.to_matrix());
        *self = Self::from_matrix_unchecked(self.n, &out);
        Ok(())
    }

    fn apply_kraus_adjoint(&mut self, ch: &KrausChannel) {
        let m = self.to_matrix();
        let out = ch
            .ops()
            .iter()
            .map(|k| k.adjoint() * &m * k)
            .fold(CMatrix::zeros(m.nrows(), m.ncols()), |a, b| a + b);
        *self = Self::from_matrix_unchecked(self.n, &out);
    }

    pub fn purity(&self) -> f64 {
        purity(self)
    }
}

/// Precomputed action of a global Pauli channel:
/// `E(ρ)[a,b] = Σ_x q_x(a⊕b) ρ[a⊕x, b⊕x]` with `q_x(d) = Σ_z p(x,z)(−1)^{d·z}`.
#[derive(Debug, Clone)]
struct PauliKernel {
    terms: Vec<(usize, Vec<f64>)>,
}

impl PauliKernel {
    fn new(ch: &PauliChannel) -> Self {
        let n = ch.n();
        let dim = 1usize << n;
        let mut by_x: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (k, p) in ch.terms() {
            let ps = PauliString::from_index(n, k);
            let (x, z) = (ps.x_bits() as usize, ps.z_bits() as usize);
            let q = by_x.entry(x).or_insert_with(|| vec![0.0; dim]);
            for (d, qd) in q.iter_mut().enumerate() {
                if (d & z).count_ones() % 2 == 0 {
                    *qd += p;
                } else {
                    *qd -= p;
                }
            }
        }
        PauliKernel {
            terms: by_x.into_iter().collect(),
        }
    }

    fn apply(&self, rho: &mut DensityMatrix) {
        let dim = rho.dim();
        let mut out = vec![ZERO; dim * dim];
        for (x, q) in &self.terms {
            for a in 0..dim {
                let src = (a ^ x) * dim;
                for b in 0..dim {
                    out[a * dim + b] += rho.data[src + (b ^ x)] * q[a ^ b];
                }
            }
        }
        rho.data = out;
    }
}

/// `tr(ρ P)` for a single (signed) Pauli string.
fn pauli_trace(rho: &DensityMatrix, p: &PauliString) -> Complex64 {
    let dim = rho.dim();
    let (x, z) = (p.x_bits() as usize, p.z_bits() as usize);
    let mut acc = ZERO;
    for a in 0..dim {
        let v = rho.data[a * dim + (a ^ x)];
        if (a & z).count_ones() % 2 == 0 {
            acc += v;
        } else {
            acc -= v;
        }
    }
    let phase = match (x & z).count_ones() % 4 {
        0 => ONE,
        1 => crate::linalg::I,
        2 => -ONE,
        _ => -crate::linalg::I,
    };
    acc * phase * p.sign().value()
}

/// `tr(O ρ)` for a real combination of Pauli strings.
pub fn expectation(rho: &DensityMatrix, obs: &PauliVector) -> Result<f64> {
    let mut acc = ZERO;
    for (p, c) in &obs.terms {
        if p.n() != rho.n() {
            return Err(Error::DimensionMismatch {
                expected: rho.n(),
                got: p.n(),
            });
        }
        acc += pauli_trace(rho, p) * *c;
    }
    if acc.im.abs() > IMAG_TOL {
        return Err(Error::ImaginaryResidue { residue: acc.im });
    }
    Ok(acc.re)
}

/// `⟨P⟩` for a Pauli index.
pub fn pauli_expectation(rho: &DensityMatrix, index: usize) -> f64 {
    pauli_trace(rho, &PauliString::from_index(rho.n(), index)).re
}

/// `tr(ρ²)`.
pub fn purity(rho: &DensityMatrix) -> f64 {
    rho.data.iter().map(|v| v.norm_sqr()).sum()
}

/// Per-gate Pauli noise attached after every gate of the executed sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GateNoise {
    /// Single-qubit channel per qubit.
    pub one_qubit: BTreeMap<usize, PauliChannel>,
    /// Two-qubit channel per edge, keyed `(low, high)` with the low qubit as
    /// local qubit 0.
    pub two_qubit: BTreeMap<(usize, usize), PauliChannel>,
    /// Treat RZ and Z as error-free frame changes.
    pub virtual_z: bool,
}

impl GateNoise {
    pub fn channel_for(&self, g: &Gate) -> Option<(&PauliChannel, Vec<usize>)> {
        let qs = g.qubits();
        if qs.len() == 2 {
            let key = (qs[0].min(qs[1]), qs[0].max(qs[1]));
            return self.two_qubit.get(&key).map(|c| (c, vec![key.0, key.1]));
        }
        if self.virtual_z && matches!(g, Gate::Rz(..) | Gate::Z(_)) {
            return None;
        }
        self.one_qubit.get(&qs[0]).map(|c| (c, vec![qs[0]]))
    }

    pub fn is_noiseless(&self) -> bool {
        self.one_qubit.values().chain(self.two_qubit.values()).all(PauliChannel::is_identity)
    }
}

/// Noise attached to a periodic circuit.
///
/// Period channels act after each period unitary. A single entry is shared by
/// every period; otherwise there is one entry per period. The backward channel
/// acts after each inverted block `C†` inside a fold and defaults to the
/// forward channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    n: usize,
    forward: Vec<NoiseChannel>,
    backward: Vec<NoiseChannel>,
    gates: Option<GateNoise>,
}

impl NoiseSpec {
    pub fn noiseless(n: usize) -> Self {
        NoiseSpec {
            n,
            forward: Vec::new(),
            backward: Vec::new(),
            gates: None,
        }
    }

    /// The same channel after every period in both directions.
    pub fn per_period(forward: impl Into<NoiseChannel>) -> Self {
        let f = forward.into();
        NoiseSpec {
            n: f.n(),
            backward: vec![f.clone()],
            forward: vec![f],
            gates: None,
        }
    }

    pub fn from_periods(n: usize, forward: Vec<NoiseChannel>, backward: Vec<NoiseChannel>) -> Result<Self> {
        if forward.len() != backward.len() {
            return Err(Error::DimensionMismatch {
                expected: forward.len(),
                got: backward.len(),
            });
        }
        if let Some(c) = forward.iter().chain(&backward).find(|c| c.n() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: c.n(),
            });
        }
        Ok(NoiseSpec {
            n,
            forward,
            backward,
            gates: None,
        })
    }

    pub fn with_backward(mut self, backward: impl Into<NoiseChannel>) -> Result<Self> {
        let b = backward.into();
        if b.n() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: b.n(),
            });
        }
        self.backward = vec![b; self.forward.len().max(1)];
        if self.forward.is_empty() {
            self.forward.push(NoiseChannel::Pauli(PauliChannel::identity(self.n)));
        }
        Ok(self)
    }

    /// Derive every backward channel from its forward channel.
    pub fn with_asymmetry(mut self, spec: &AsymmetrySpec) -> Result<Self> {
        self.backward = self
            .forward
            .iter()
            .map(|f| Ok(NoiseChannel::Pauli(backward_channel(&f.twirled()?, spec)?)))
            .collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn with_gate_noise(mut self, gates: GateNoise) -> Self {
        self.gates = Some(gates);
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn gate_noise(&self) -> Option<&GateNoise> {
        self.gates.as_ref()
    }

    pub fn has_period_noise(&self) -> bool {
        !self.forward.is_empty()
    }

    pub fn is_noiseless(&self) -> bool {
        let trivial = |c: &NoiseChannel| matches!(c, NoiseChannel::Pauli(p) if p.is_identity());
        self.forward.iter().chain(&self.backward).all(trivial)
            && self.gates.as_ref().is_none_or(GateNoise::is_noiseless)
    }

    pub fn forward(&self, period: usize) -> Option<&NoiseChannel> {
        pick(&self.forward, period)
    }

    pub fn backward(&self, period: usize) -> Option<&NoiseChannel> {
        pick(&self.backward, period)
    }

    /// Pauli-twirled `(E_f ∘ E_b)^r ∘ E_f` for period `i`.
    pub fn folded_period_channel(&self, period: usize, r: usize) -> Result<Option<PauliChannel>> {
        match (self.forward(period), self.backward(period)) {
            (Some(f), Some(b)) => Ok(Some(folded_channel(&f.twirled()?, &b.twirled()?, r)?)),
            _ => Ok(None),
        }
    }

    /// Noise of the inverted circuit over `m` periods: periods reversed and the
    /// roles of forward and backward swapped.
    pub fn inverse(&self, m: usize) -> NoiseSpec {
        let rev = |v: &Vec<NoiseChannel>| {
            if v.len() <= 1 || v.len() != m {
                v.clone()
            } else {
                v.iter().rev().cloned().collect()
            }
        };
        NoiseSpec {
            n: self.n,
            forward: rev(&self.backward),
            backward: rev(&self.forward),
            gates: self.gates.clone(),
        }
    }

    fn check(&self, circ: &PeriodicCircuit) -> Result<()> {
        if self.n != circ.n {
            return Err(Error::DimensionMismatch {
                expected: circ.n,
                got: self.n,
            });
        }
        if self.forward.len() > 1 && self.forward.len() != circ.num_periods() {
            return Err(Error::DimensionMismatch {
                expected: circ.num_periods(),
                got: self.forward.len(),
            });
        }
        Ok(())
    }
}

fn pick(v: &[NoiseChannel], i: usize) -> Option<&NoiseChannel> {
    match v.len() {
        0 => None,
        1 => Some(&v[0]),
        _ => v.get(i),
    }
}

/// How non-Pauli period noise is projected onto Pauli noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TwirlMode {
    /// Replace each channel by its Pauli twirl.
    Analytic,
    /// Average over random Pauli frames, one independent frame per channel
    /// instance and trajectory.
    Sampled { seed: u64, frames: usize },
    /// Average over every frame assignment.
    Exhaustive,
}

#[derive(Debug, Clone)]
enum Op {
    Gate(Gate),
    Pauli(Arc<PauliKernel>),
    Kraus(Arc<KrausChannel>),
}

fn compile(circ: &PeriodicCircuit, noise: &NoiseSpec, r: usize, mode: TwirlMode) -> Result<Vec<Op>> {
    if circ.n > MAX_QUBITS {
        return Err(Error::TooManyQubits {
            n: circ.n,
            max: MAX_QUBITS,
        });
    }
    circ.validate()?;
    noise.check(circ)?;
    let mut ops: Vec<Op> = circ.prep.iter().copied().map(Op::Gate).collect();
    let mut gate_cache: BTreeMap<(Vec<usize>, usize), Arc<PauliKernel>> = BTreeMap::new();
    let gate_noise = noise.gate_noise().filter(|g| !g.is_noiseless());
    for (i, block) in circ.periods.iter().enumerate() {
        match gate_noise {
            Some(gn) => {
                let folded = circ.fold(r);
                for g in &folded.periods[i] {
                    ops.push(Op::Gate(*g));
                    if let Some((ch, qs)) = gn.channel_for(g) {
                        let key = (qs.clone(), ch as *const PauliChannel as usize);
                        let k = match gate_cache.get(&key) {
                            Some(k) => k.clone(),
                            None => {
                                let k = Arc::new(PauliKernel::new(&ch.embed(&qs, circ.n)?));
                                gate_cache.insert(key, k.clone());
                                k
                            }
                        };
                        ops.push(Op::Pauli(k));
                    }
                }
            }
            None => ops.extend(block.iter().copied().map(Op::Gate)),
        }
        let (Some(f), Some(b)) = (noise.forward(i), noise.backward(i)) else {
            continue;
        };
        match mode {
            TwirlMode::Analytic => {
                let ch = folded_channel(&f.twirled()?, &b.twirled()?, r)?;
                if !ch.is_identity() {
                    ops.push(Op::Pauli(Arc::new(PauliKernel::new(&ch))));
                }
            }
            TwirlMode::Sampled { .. } | TwirlMode::Exhaustive => {
                let to_op = |c: &NoiseChannel| match c {
                    NoiseChannel::Pauli(p) => Op::Pauli(Arc::new(PauliKernel::new(p))),
                    NoiseChannel::Kraus(k) => Op::Kraus(Arc::new(k.clone())),
                };
                let (fo, bo) = (to_op(f), to_op(b));
                ops.push(fo.clone());
                for _ in 0..r {
                    ops.push(bo.clone());
                    ops.push(fo.clone());
                }
            }
        }
    }
    ops.extend(circ.post.iter().copied().map(Op::Gate));
    Ok(ops)
}

/// Execute with one Pauli frame index per Kraus instance.
fn execute(rho: &mut DensityMatrix, ops: &[Op], frames: &[usize]) -> Result<()> {
    let mut f = frames.iter();
    for op in ops {
        match op {
            Op::Gate(g) => rho.apply_gate(g),
            Op::Pauli(k) => k.apply(rho),
            Op::Kraus(k) => {
                let p = f.next().copied().unwrap_or(0);
                rho.apply_pauli(p);
                rho.apply_kraus(k)?;
                rho.apply_pauli(p);
            }
        }
    }
    Ok(())
}

fn execute_adjoint(rho: &mut DensityMatrix, ops: &[Op]) {
    for op in ops.iter().rev() {
        match op {
            Op::Gate(g) => rho.apply_gate(&g.adjoint()),
            Op::Pauli(k) => k.apply(rho),
            Op::Kraus(k) => rho.apply_kraus_adjoint(k),
        }
    }
}

fn kraus_instances(ops: &[Op]) -> usize {
    ops.iter().filter(|o| matches!(o, Op::Kraus(_))).count()
}

/// Simulate `circ` folded `r` times under `noise`, starting from `|0…0⟩`.
pub fn run(circ: &PeriodicCircuit, noise: &NoiseSpec, r: usize, mode: TwirlMode) -> Result<DensityMatrix> {
    let ops = compile(circ, noise, r, mode)?;
    let n = circ.n;
    let instances = kraus_instances(&ops);
    match mode {
        _ if instances == 0 => {
            let mut rho = DensityMatrix::zero_state(n);
            execute(&mut rho, &ops, &[])?;
            Ok(rho)
        }
        TwirlMode::Analytic => unreachable!("analytic programs hold no Kraus operators"),
        TwirlMode::Sampled { seed, frames } => {
            if frames == 0 {
                return Err(Error::InvalidArgument("twirl frame count must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let paulis = 1usize << (2 * n);
            let mut acc = vec![ZERO; 1usize << (2 * n)];
            let mut assignment = vec![0usize; instances];
            for _ in 0..frames {
                assignment.iter_mut().for_each(|p| *p = rng.random_range(0..paulis));
                let mut rho = DensityMatrix::zero_state(n);
                execute(&mut rho, &ops, &assignment)?;
                acc.iter_mut().zip(&rho.data).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / frames as f64;
            acc.iter_mut().for_each(|a| *a *= scale);
            Ok(DensityMatrix { n, data: acc })
        }
        TwirlMode::Exhaustive => {
            let paulis = 1usize << (2 * n);
            let total = (paulis as u128).checked_pow(instances as u32).unwrap_or(u128::MAX);
            if total > EXHAUSTIVE_LIMIT {
                return Err(Error::InvalidArgument(format!(
                    "exhaustive twirl needs {total} frame assignments (limit {EXHAUSTIVE_LIMIT})"
                )));
            }
            let mut acc = vec![ZERO; 1usize << (2 * n)];
            let mut assignment = vec![0usize; instances];
            for code in 0..total as usize {
                let mut c = code;
                for p in assignment.iter_mut() {
                    *p = c % paulis;
                    c /= paulis;
                }
                let mut rho = DensityMatrix::zero_state(n);
                execute(&mut rho, &ops, &assignment)?;
                acc.iter_mut().zip(&rho.data).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / total as f64;
            acc.iter_mut().for_each(|a| *a *= scale);
            Ok(DensityMatrix { n, data: acc })
        }
    }
}

pub fn run_ideal(circ: &PeriodicCircuit) -> Result<DensityMatrix> {
    run(circ, &NoiseSpec::noiseless(circ.n), 0, TwirlMode::Analytic)
}

/// `ρ̃ = E_{U†}^†(|0⟩⟨0|)`, the adjoint of the noisy inverted circuit applied
/// to the initial projector. Non-Pauli noise enters through its twirl.
pub fn dual_state(circ: &PeriodicCircuit, noise: &NoiseSpec, r: usize) -> Result<DensityMatrix> {
    let inv = circ.inverse();
    let ops = compile(&inv, &noise.inverse(circ.num_periods()), r, TwirlMode::Analytic)?;
    let mut rho = DensityMatrix::zero_state(circ.n);
    execute_adjoint(&mut rho, &ops);
    Ok(rho)
}

/// `⟨0|E_{U†}(E_U(|0⟩⟨0|))|0⟩` with both halves folded `r` times.
pub fn survival_probability(circ: &PeriodicCircuit, noise: &NoiseSpec, r: usize) -> Result<f64> {
    let rho = run(circ, noise, r, TwirlMode::Analytic)?;
    survival_from_state(circ, noise, r, rho)
}

/// Survival probability given the already simulated forward state.
pub fn survival_from_state(
    circ: &PeriodicCircuit,
    noise: &NoiseSpec,
    r: usize,
    mut rho: DensityMatrix,
) -> Result<f64> {
    let inv = circ.inverse();
    let ops = compile(&inv, &noise.inverse(circ.num_periods()), r, TwirlMode::Analytic)?;
    execute(&mut rho, &ops, &[])?;
    Ok(rho.get(0, 0).re)
}

/// Per-qubit readout assignment fidelities: `f0[q] = P(read 0 | 0)`,
/// `f1[q] = P(read 1 | 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutModel {
    pub f0: Vec<f64>,
    pub f1: Vec<f64>,
}

impl ReadoutModel {
    pub fn new(f0: Vec<f64>, f1: Vec<f64>) -> Result<Self> {
        if f0.len() != f1.len() {
            return Err(Error::DimensionMismatch {
                expected: f0.len(),
                got: f1.len(),
            });
        }
        if let Some(&bad) = f0.iter().chain(&f1).find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::InvalidProbability {
                what: "readout fidelity",
                value: bad,
            });
        }
        Ok(ReadoutModel { f0, f1 })
    }

    pub fn perfect(n: usize) -> Self {
        ReadoutModel {
            f0: vec![1.0; n],
            f1: vec![1.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.f0.len()
    }

    /// Column-stochastic `[[F0, 1−F1], [1−F0, F1]]` (columns: prepared state).
    pub fn confusion(&self, q: usize) -> [[f64; 2]; 2] {
        [[self.f0[q], 1.0 - self.f1[q]], [1.0 - self.f0[q], self.f1[q]]]
    }

    /// Apply the tensor-product confusion matrix to a distribution.
    pub fn apply(&self, probs: &[f64]) -> Vec<f64> {
        let mats: Vec<_> = (0..self.n()).map(|q| self.confusion(q)).collect();
        apply_per_qubit(probs, &mats)
    }
}

fn apply_per_qubit(v: &[f64], mats: &[[[f64; 2]; 2]]) -> Vec<f64> {
    let mut out = v.to_vec();
    for (q, m) in mats.iter().enumerate() {
        let bit = 1usize << q;
        for a in 0..out.len() {
            if a & bit != 0 {
                continue;
            }
            let (x0, x1) = (out[a], out[a | bit]);
            out[a] = m[0][0] * x0 + m[0][1] * x1;
            out[a | bit] = m[1][0] * x0 + m[1][1] * x1;
        }
    }
    out
}

/// Measurement counts indexed by bitstring (bit `q` is qubit `q`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn shots(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let s = self.shots() as f64;
        self.counts.iter().map(|&c| c as f64 / s).collect()
    }
}

/// Multinomial draw of `shots` outcomes through the readout channel.
pub fn sample_counts(rho: &DensityMatrix, shots: u64, ro: &ReadoutModel, seed: u64) -> Result<Histogram> {
    if shots == 0 {
        return Err(Error::InvalidArgument("shot count must be positive".into()));
    }
    if ro.n() != rho.n() {
        return Err(Error::DimensionMismatch {
            expected: rho.n(),
            got: ro.n(),
        });
    }
    let probs: Vec<f64> = ro.apply(&rho.diagonal()).into_iter().map(|p| p.max(0.0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; probs.len()];
    let mut left = shots;
    let mut mass: f64 = probs.iter().sum();
    for (i, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == probs.len() || mass <= 0.0 {
            counts[i] = left;
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let c = Binomial::new(left, q)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .sample(&mut rng);
        counts[i] = c;
        left -= c;
        mass -= p;
    }
    Ok(Histogram { n: rho.n(), counts })
}

/// Readout mitigation by inverting the tensor-product confusion matrix.
pub fn mitigate_readout(hist: &Histogram, ro: &ReadoutModel) -> Result<Vec<f64>> {
    if ro.n() != hist.n {
        return Err(Error::DimensionMismatch {
            expected: hist.n,
            got: ro.n(),
        });
    }
    let inv = (0..ro.n())
        .map(|q| {
            let m = ro.confusion(q);
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det.abs() < 1e-12 {
                return Err(Error::Singular(format!("readout confusion of qubit {q}")));
            }
            Ok([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(apply_per_qubit(&hist.frequencies(), &inv))
}

/// Probability vector of `ρ` as an `nalgebra` vector (convenience for tests
/// and reports).
pub fn diagonal_vector(rho: &DensityMatrix) -> DVector<f64> {
    DVector::from_vec(rho.diagonal())
}
