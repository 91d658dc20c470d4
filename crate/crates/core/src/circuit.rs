//! Gates, periodic circuits and the benchmark circuit families.
//!
//! A [`PeriodicCircuit`] is `post · C_m ⋯ C_1 · prep`. The `prep` and `post`
//! blocks are ideal state-preparation and un-preparation stages; noise and
//! folding act only on the period blocks.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, I, ONE, ZERO};
use crate::pauli::{PauliString, PauliVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    Rx(usize, f64),
    Ry(usize, f64),
    Rz(usize, f64),
    H(usize),
    X(usize),
    Z(usize),
    /// `Cnot(control, target)`.
    Cnot(usize, usize),
    Cz(usize, usize),
}

impl Gate {
    /// Qubits the gate acts on; local matrix bit `b` is `qubits()[b]`.
    pub fn qubits(&self) -> QubitList {
        match *self {
            Gate::Rx(q, _) | Gate::Ry(q, _) | Gate::Rz(q, _) | Gate::H(q) | Gate::X(q) | Gate::Z(q) => {
                QubitList { q: [q, 0], len: 1 }
            }
            Gate::Cnot(a, b) | Gate::Cz(a, b) => QubitList { q: [a, b], len: 2 },
        }
    }

    pub fn is_two_qubit(&self) -> bool {
        matches!(self, Gate::Cnot(..) | Gate::Cz(..))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Gate::Rx(..) => "RX",
            Gate::Ry(..) => "RY",
            Gate::Rz(..) => "RZ",
            Gate::H(_) => "H",
            Gate::X(_) => "X",
            Gate::Z(_) => "Z",
            Gate::Cnot(..) => "CNOT",
            Gate::Cz(..) => "CZ",
        }
    }

    pub fn angle(&self) -> Option<f64> {
        match self {
            Gate::Rx(_, t) | Gate::Ry(_, t) | Gate::Rz(_, t) => Some(*t),
            _ => None,
        }
    }

    pub fn adjoint(&self) -> Gate {
        match *self {
            Gate::Rx(q, t) => Gate::Rx(q, -t),
            Gate::Ry(q, t) => Gate::Ry(q, -t),
            Gate::Rz(q, t) => Gate::Rz(q, -t),
            g => g,
        }
    }

    /// Local unitary in the basis ordered by [`Gate::qubits`].
    pub fn matrix(&self) -> CMatrix {
        let c = |t: f64| Complex64::new((t / 2.0).cos(), 0.0);
        let s = |t: f64| (t / 2.0).sin();
        match *self {
            Gate::Rx(_, t) => CMatrix::from_row_slice(2, 2, &[c(t), -I * s(t), -I * s(t), c(t)]),
            Gate::Ry(_, t) => CMatrix::from_row_slice(
                2,
                2,
                &[c(t), Complex64::new(-s(t), 0.0), Complex64::new(s(t), 0.0), c(t)],
            ),
            Gate::Rz(_, t) => CMatrix::from_row_slice(
                2,
                2,
                &[Complex64::from_polar(1.0, -t / 2.0), ZERO, ZERO, Complex64::from_polar(1.0, t / 2.0)],
            ),
            Gate::H(_) => {
                let h = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
                CMatrix::from_row_slice(2, 2, &[h, h, h, -h])
            }
            Gate::X(_) => CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO]),
            Gate::Z(_) => CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE]),
            Gate::Cnot(..) => {
                // local index = control + 2·target
                let mut m = CMatrix::zeros(4, 4);
                m[(0, 0)] = ONE;
                m[(2, 2)] = ONE;
                m[(3, 1)] = ONE;
                m[(1, 3)] = ONE;
                m
            }
            Gate::Cz(..) => {
                let mut m = CMatrix::identity(4, 4);
                m[(3, 3)] = -ONE;
                m
            }
        }
    }
}

/// Up to two qubit indices, usable as a slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QubitList {
    q: [usize; 2],
    len: usize,
}

impl std::ops::Deref for QubitList {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.q[..self.len]
    }
}

impl IntoIterator for QubitList {
    type Item = usize;
    type IntoIter = std::iter::Take<std::array::IntoIter<usize, 2>>;

    fn into_iter(self) -> Self::IntoIter {
        self.q.into_iter().take(self.len)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CircuitMeta {
    pub family: String,
    pub params: Vec<(String, String)>,
}

impl CircuitMeta {
    pub fn new(family: &str) -> Self {
        CircuitMeta {
            family: family.to_string(),
            params: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.params.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.params
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicCircuit {
    pub n: usize,
    pub prep: Vec<Gate>,
    pub periods: Vec<Vec<Gate>>,
    pub post: Vec<Gate>,
    pub meta: CircuitMeta,
}

impl PeriodicCircuit {
    pub fn new(n: usize, periods: Vec<Vec<Gate>>) -> Result<Self> {
        let c = PeriodicCircuit {
            n,
            prep: Vec::new(),
            periods,
            post: Vec::new(),
            meta: CircuitMeta::default(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("circuit needs at least one qubit".into()));
        }
        let blocks = std::iter::once(&self.prep)
            .chain(self.periods.iter())
            .chain(std::iter::once(&self.post));
        for block in blocks {
            for g in block {
                let qs = g.qubits();
                for &q in qs.iter() {
                    if q >= self.n {
                        return Err(Error::QubitOutOfRange { qubit: q, n: self.n });
                    }
                }
                if qs.len() == 2 && qs[0] == qs[1] {
                    return Err(Error::InvalidArgument(format!(
                        "{} acts twice on qubit {}",
                        g.name(),
                        qs[0]
                    )));
                }
            }
        }
        if self.periods.iter().any(|p| p.is_empty()) {
            return Err(Error::InvalidArgument("empty period block".into()));
        }
        Ok(())
    }

    pub fn num_periods(&self) -> usize {
        self.periods.len()
    }

    /// True when every period block is identical (exact periodicity).
    pub fn is_exactly_periodic(&self) -> bool {
        self.periods.windows(2).all(|w| w[0] == w[1])
    }

    pub fn gate_count(&self) -> usize {
        self.prep.len() + self.post.len() + self.periods.iter().map(Vec::len).sum::<usize>()
    }

    pub fn two_qubit_count(&self) -> usize {
        self.periods
            .iter()
            .flatten()
            .filter(|g| g.is_two_qubit())
            .count()
    }

    /// Per-period global folding: every block `C` becomes `C (C† C)^r`.
    pub fn fold(&self, r: usize) -> PeriodicCircuit {
        let periods = self
            .periods
            .iter()
            .map(|c| {
                let adj = adjoint_block(c);
                let mut out = Vec::with_capacity(c.len() * (2 * r + 1));
                out.extend_from_slice(c);
                for _ in 0..r {
                    out.extend_from_slice(&adj);
                    out.extend_from_slice(c);
                }
                out
            })
            .collect();
        PeriodicCircuit {
            periods,
            ..self.clone()
        }
    }

    /// The adjoint circuit: reversed order with every gate adjointed.
    pub fn inverse(&self) -> PeriodicCircuit {
        PeriodicCircuit {
            n: self.n,
            prep: adjoint_block(&self.post),
            periods: self.periods.iter().rev().map(|c| adjoint_block(c)).collect(),
            post: adjoint_block(&self.prep),
            meta: self.meta.clone(),
        }
    }

    /// All gates in execution order.
    pub fn gates(&self) -> impl Iterator<Item = &Gate> {
        self.prep
            .iter()
            .chain(self.periods.iter().flatten())
            .chain(self.post.iter())
    }

    /// Line-oriented text form; see [`PeriodicCircuit::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "qubits {} periods {}", self.n, self.periods.len()).unwrap();
        if !self.meta.family.is_empty() {
            write!(s, "meta {}", self.meta.family).unwrap();
            for (k, v) in &self.meta.params {
                write!(s, " {k}={v}").unwrap();
            }
            s.push('\n');
        }
        let block = |s: &mut String, tag: &str, gates: &[Gate]| {
            s.push_str(tag);
            s.push('\n');
            for g in gates {
                s.push_str(g.name());
                for q in g.qubits() {
                    write!(s, " {q}").unwrap();
                }
                if let Some(a) = g.angle() {
                    // `{:?}` prints the shortest string that parses back to the same bits.
                    write!(s, " {a:?}").unwrap();
                }
                s.push('\n');
            }
        };
        if !self.prep.is_empty() {
            block(&mut s, "prep", &self.prep);
        }
        for p in &self.periods {
            block(&mut s, "period", p);
        }
        if !self.post.is_empty() {
            block(&mut s, "post", &self.post);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<PeriodicCircuit> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let perr = |line: usize, message: &str| Error::Parse {
            line,
            message: message.to_string(),
        };
        let (hl, header) = lines.next().ok_or_else(|| perr(1, "missing header"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "qubits" || h[2] != "periods" {
            return Err(perr(hl, "expected `qubits N periods M`"));
        }
        let n: usize = h[1].parse().map_err(|_| perr(hl, "bad qubit count"))?;
        let m: usize = h[3].parse().map_err(|_| perr(hl, "bad period count"))?;

        #[derive(PartialEq)]
        enum Section {
            None,
            Prep,
            Period,
            Post,
        }
        let mut circ = PeriodicCircuit {
            n,
            prep: Vec::new(),
            periods: Vec::new(),
            post: Vec::new(),
            meta: CircuitMeta::default(),
        };
        let mut section = Section::None;
        for (ln, line) in lines {
            let tok: Vec<&str> = line.split_whitespace().collect();
            match tok[0] {
                "meta" => {
                    let family = tok.get(1).ok_or_else(|| perr(ln, "meta without family"))?;
                    circ.meta.family = family.to_string();
                    for kv in &tok[2..] {
                        let (k, v) = kv.split_once('=').ok_or_else(|| perr(ln, "bad meta pair"))?;
                        circ.meta.params.push((k.to_string(), v.to_string()));
                    }
                }
                "prep" => section = Section::Prep,
                "post" => section = Section::Post,
                "period" => {
                    section = Section::Period;
                    circ.periods.push(Vec::new());
                }
                name => {
                    let g = parse_gate(name, &tok[1..]).map_err(|e| perr(ln, &e))?;
                    match section {
                        Section::None => return Err(perr(ln, "gate outside a block")),
                        Section::Prep => circ.prep.push(g),
                        Section::Post => circ.post.push(g),
                        Section::Period => circ.periods.last_mut().unwrap().push(g),
                    }
                }
            }
        }
        if circ.periods.len() != m {
            return Err(perr(hl, "period count does not match header"));
        }
        circ.validate()?;
        Ok(circ)
    }
}

fn parse_gate(name: &str, args: &[&str]) -> std::result::Result<Gate, String> {
    let q = |i: usize| -> std::result::Result<usize, String> {
        args.get(i)
            .ok_or_else(|| format!("{name}: missing qubit"))?
            .parse()
            .map_err(|_| format!("{name}: bad qubit index"))
    };
    let a = |i: usize| -> std::result::Result<f64, String> {
        args.get(i)
            .ok_or_else(|| format!("{name}: missing angle"))?
            .parse()
            .map_err(|_| format!("{name}: bad angle"))
    };
    let arity = match name {
        "RX" | "RY" | "RZ" | "CNOT" | "CZ" => 2,
        "H" | "X" | "Z" => 1,
        _ => return Err(format!("unknown gate {name}")),
    };
    if args.len() != arity {
        return Err(format!("{name}: expected {arity} arguments"));
    }
    Ok(match name {
        "RX" => Gate::Rx(q(0)?, a(1)?),
        "RY" => Gate::Ry(q(0)?, a(1)?),
        "RZ" => Gate::Rz(q(0)?, a(1)?),
        "H" => Gate::H(q(0)?),
        "X" => Gate::X(q(0)?),
        "Z" => Gate::Z(q(0)?),
        "CNOT" => Gate::Cnot(q(0)?, q(1)?),
        _ => Gate::Cz(q(0)?, q(1)?),
    })
}

pub fn adjoint_block(gates: &[Gate]) -> Vec<Gate> {
    gates.iter().rev().map(Gate::adjoint).collect()
}

/// First-order Trotter circuit for `H = −J Σ Z_i Z_{i+1} + h Σ X_i` with open
/// boundary. Each period is an RX(2h·dt) layer followed by the ZZ layer, each
/// ZZ term built as CNOT · RZ(−2J·dt) · CNOT.
pub fn ising_trotter(n: usize, j: f64, h: f64, dt: f64, steps: usize) -> Result<PeriodicCircuit> {
    if n < 2 {
        return Err(Error::InvalidArgument("Ising chain needs n >= 2".into()));
    }
    let mut period: Vec<Gate> = (0..n).map(|q| Gate::Rx(q, 2.0 * h * dt)).collect();
    for q in 0..n - 1 {
        period.push(Gate::Cnot(q, q + 1));
        period.push(Gate::Rz(q + 1, -2.0 * j * dt));
        period.push(Gate::Cnot(q, q + 1));
    }
    let mut c = PeriodicCircuit::new(n, vec![period; steps])?;
    c.meta = CircuitMeta::new("ising")
        .with("J", j)
        .with("h", h)
        .with("dt", dt)
        .with("steps", steps);
    Ok(c)
}

/// Random structurally periodic circuit. Each period holds two layers, each a
/// layer of random RZ·RY·RZ rotations followed by CNOTs on a random pairing.
/// The pairings (structure) are drawn once; rotation angles are redrawn for
/// every period.
pub fn random_periodic(n: usize, depth2q: usize, seed: u64) -> Result<PeriodicCircuit> {
    if depth2q < 2 || depth2q % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "two-qubit depth must be even and >= 2, got {depth2q}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("random circuits need n >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers: Vec<Vec<(usize, usize)>> = (0..2)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            order
                .chunks_exact(2)
                .map(|p| if rng.random_bool(0.5) { (p[0], p[1]) } else { (p[1], p[0]) })
                .collect()
        })
        .collect();
    let periods = (0..depth2q / 2)
        .map(|_| {
            let mut block = Vec::new();
            for pairs in &layers {
                for q in 0..n {
                    block.push(Gate::Rz(q, rng.random_range(0.0..2.0 * PI)));
                    block.push(Gate::Ry(q, rng.random_range(0.0..PI)));
                    block.push(Gate::Rz(q, rng.random_range(0.0..2.0 * PI)));
                }
                block.extend(pairs.iter().map(|&(c, t)| Gate::Cnot(c, t)));
            }
            block
        })
        .collect();
    let mut c = PeriodicCircuit::new(n, periods)?;
    c.meta = CircuitMeta::new("random")
        .with("depth2q", depth2q)
        .with("seed", seed);
    Ok(c)
}

/// Multi-controlled Z on `qubits` (all symmetric) as CNOTs and RZ rotations.
///
/// Uses the phase polynomial `π·x_1⋯x_k = Σ_S θ_S ⊕_{i∈S} x_i` with
/// `θ_S = π(−1)^{|S|+1} / 2^{k−1}`, walking each subset family in Gray-code
/// order so consecutive parities differ by one CNOT. Exact up to global phase.
pub fn mcz_decomposition(qubits: &[usize]) -> Vec<Gate> {
    let k = qubits.len();
    match k {
        0 => return Vec::new(),
        1 => return vec![Gate::Z(qubits[0])],
        _ => {}
    }
    let theta = |size: u32| {
        let s = if size % 2 == 1 { 1.0 } else { -1.0 };
        s * PI / (1u64 << (k - 1)) as f64
    };
    let mut gates = Vec::new();
    for t in 0..k {
        let target = qubits[t];
        let mut prev = 0usize;
        for step in 0..1usize << t {
            let gray = step ^ (step >> 1);
            if step > 0 {
                let bit = (gray ^ prev).trailing_zeros() as usize;
                gates.push(Gate::Cnot(qubits[bit], target));
            }
            gates.push(Gate::Rz(target, theta(gray.count_ones() + 1)));
            prev = gray;
        }
        if t > 0 {
            gates.push(Gate::Cnot(qubits[t - 1], target));
        }
    }
    gates
}

/// Multi-controlled X: `H(t) · MCZ(controls ∪ {t}) · H(t)`.
pub fn mcx_decomposition(controls: &[usize], target: usize) -> Vec<Gate> {
    let mut all = controls.to_vec();
    all.push(target);
    let mut gates = vec![Gate::H(target)];
    gates.extend(mcz_decomposition(&all));
    gates.push(Gate::H(target));
    gates
}

fn parse_marked(marked: &str, n_targets: usize) -> Result<Vec<bool>> {
    if marked.len() != n_targets {
        return Err(Error::InvalidArgument(format!(
            "marked string {marked:?} must have {n_targets} bits"
        )));
    }
    marked
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(Error::InvalidArgument(format!("bad bit {c:?} in {marked:?}"))),
        })
        .collect()
}

/// Grover search over `n_targets` qubits with one phase-kickback ancilla
/// (qubit `n_targets`). `marked[i]` is the bit of target qubit `i`.
pub fn grover(n_targets: usize, marked: &str, iterations: usize) -> Result<PeriodicCircuit> {
    if n_targets < 2 {
        return Err(Error::InvalidArgument("Grover needs at least two targets".into()));
    }
    let bits = parse_marked(marked, n_targets)?;
    let targets: Vec<usize> = (0..n_targets).collect();
    let anc = n_targets;
    let mut prep: Vec<Gate> = targets.iter().map(|&q| Gate::H(q)).collect();
    prep.push(Gate::X(anc));
    prep.push(Gate::H(anc));

    let flips: Vec<Gate> = targets
        .iter()
        .filter(|&&q| !bits[q])
        .map(|&q| Gate::X(q))
        .collect();
    let mut period = flips.clone();
    period.extend(mcx_decomposition(&targets, anc));
    period.extend(flips.iter().copied());
    period.extend(targets.iter().map(|&q| Gate::H(q)));
    period.extend(targets.iter().map(|&q| Gate::X(q)));
    period.extend(mcz_decomposition(&targets));
    period.extend(targets.iter().map(|&q| Gate::X(q)));
    period.extend(targets.iter().map(|&q| Gate::H(q)));

    let mut c = PeriodicCircuit::new(n_targets + 1, vec![period; iterations])?;
    c.prep = prep;
    c.meta = CircuitMeta::new("grover")
        .with("targets", n_targets)
        .with("marked", marked)
        .with("iterations", iterations);
    Ok(c)
}

/// Projector `|marked⟩⟨marked| ⊗ I_anc` as a Pauli combination.
pub fn grover_success_observable(n_targets: usize, marked: &str) -> Result<PauliVector> {
    let bits = parse_marked(marked, n_targets)?;
    let n = n_targets + 1;
    let scale = 1.0 / (1u64 << n_targets) as f64;
    let terms = (0u64..1 << n_targets)
        .map(|zmask| {
            let sign: i32 = (0..n_targets)
                .filter(|&q| (zmask >> q) & 1 == 1 && bits[q])
                .count() as i32;
            let c = if sign % 2 == 0 { scale } else { -scale };
            (PauliString::new(n, 0, zmask, crate::pauli::Sign::Plus).unwrap(), c)
        })
        .collect();
    Ok(PauliVector { terms })
}

/// Noiseless success probability `sin²((2m+1)·asin(2^{−t/2}))`.
pub fn grover_ideal_success(n_targets: usize, iterations: usize) -> f64 {
    let theta = (1.0 / (1u64 << n_targets) as f64).sqrt().asin();
    ((2 * iterations + 1) as f64 * theta).sin().powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{embed, max_abs_diff};
    use crate::sim::{expectation, run_ideal};
    use approx::assert_abs_diff_eq;

    fn unitary(n: usize, gates: &[Gate]) -> CMatrix {
        let dim = 1 << n;
        gates
            .iter()
            .fold(CMatrix::identity(dim, dim), |u, g| embed(&g.matrix(), &g.qubits(), n) * u)
    }

    fn equal_up_to_phase(a: &CMatrix, b: &CMatrix) -> bool {
        let (mut phase, mut found) = (ONE, false);
        for (x, y) in a.iter().zip(b.iter()) {
            if y.norm() > 1e-9 {
                phase = x / y;
                found = true;
                break;
            }
        }
        found && max_abs_diff(a, &(b * phase)) < 1e-10
    }

    #[test]
    fn gate_matrices_are_unitary_and_adjoint_inverts() {
        let gates = [
            Gate::Rx(0, 0.3),
            Gate::Ry(0, -1.2),
            Gate::Rz(0, 2.5),
            Gate::H(0),
            Gate::X(0),
            Gate::Z(0),
            Gate::Cnot(0, 1),
            Gate::Cz(0, 1),
        ];
        for g in gates {
            let u = g.matrix();
            let d = u.nrows();
            assert!(max_abs_diff(&(&u * u.adjoint()), &CMatrix::identity(d, d)) < 1e-14);
            assert!(max_abs_diff(&(g.adjoint().matrix() * &u), &CMatrix::identity(d, d)) < 1e-14);
        }
        assert_eq!(Gate::Rz(2, 0.4).adjoint(), Gate::Rz(2, -0.4));
    }

    #[test]
    fn two_qubit_gate_qubit_order() {
        assert_eq!(&*Gate::Cnot(3, 1).qubits(), &[3, 1]);
        assert_eq!(&*Gate::Cz(0, 2).qubits(), &[0, 2]);
        // CNOT(0,1) on |01> (qubit 0 set) gives |11>.
        let u = unitary(2, &[Gate::Cnot(0, 1)]);
        assert_eq!(u[(3, 1)], ONE);
        assert_eq!(u[(2, 2)], ONE);
    }

    #[test]
    fn mcz_matches_diagonal() {
        for k in 2..=5 {
            let qubits: Vec<usize> = (0..k).collect();
            let gates = mcz_decomposition(&qubits);
            let dim = 1 << k;
            let mut target = CMatrix::identity(dim, dim);
            target[(dim - 1, dim - 1)] = -ONE;
            assert!(equal_up_to_phase(&unitary(k, &gates), &target), "k = {k}");
            let cnots = gates.iter().filter(|g| g.is_two_qubit()).count();
            assert_eq!(cnots, (1 << k) - 2);
        }
    }

    #[test]
    fn mcx_matches_permutation() {
        let gates = mcx_decomposition(&[0, 2], 1);
        let mut target = CMatrix::zeros(8, 8);
        for a in 0..8usize {
            let b = if a & 0b101 == 0b101 { a ^ 0b010 } else { a };
            target[(b, a)] = ONE;
        }
        assert!(equal_up_to_phase(&unitary(3, &gates), &target));
    }

    #[test]
    fn ising_shapes() {
        let c = ising_trotter(4, 0.37454, 1.0, PI / 15.0, 1).unwrap();
        assert_eq!(c.num_periods(), 1);
        let p = &c.periods[0];
        assert_eq!(p.iter().filter(|g| matches!(g, Gate::Rx(..))).count(), 4);
        assert_eq!(p.iter().filter(|g| matches!(g, Gate::Cnot(..))).count(), 6);
        assert_eq!(p.iter().filter(|g| matches!(g, Gate::Rz(..))).count(), 3);
        assert!(matches!(p[0], Gate::Rx(..)));

        let empty = ising_trotter(4, 0.5, 1.0, 0.1, 0).unwrap();
        assert_eq!(empty.gate_count(), 0);
        let rho = run_ideal(&empty).unwrap();
        assert_abs_diff_eq!(rho.get(0, 0).re, 1.0, epsilon = 1e-15);

        let c = ising_trotter(5, 0.2, 1.0, 0.1, 4).unwrap();
        assert!(c.is_exactly_periodic());
    }

    #[test]
    fn ising_without_coupling_is_single_qubit_rotation() {
        let (h, dt, m) = (1.0, PI / 15.0, 5);
        let c = ising_trotter(3, 0.0, h, dt, m).unwrap();
        let rho = run_ideal(&c).unwrap();
        for q in 0..3 {
            let mut label = ['I'; 3];
            label[q] = 'Z';
            let obs = PauliVector {
                terms: vec![(PauliString::from_label(&label.iter().collect::<String>()).unwrap(), 1.0)],
            };
            let z = expectation(&rho, &obs).unwrap();
            assert_abs_diff_eq!(z, (2.0 * h * dt * m as f64).cos(), epsilon = 1e-12);
        }
    }

    #[test]
    fn random_circuit_determinism_and_structure() {
        let a = random_periodic(4, 6, 11).unwrap();
        let b = random_periodic(4, 6, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_periods(), 3);
        assert_eq!(random_periodic(4, 2, 3).unwrap().num_periods(), 1);
        assert!(random_periodic(4, 3, 3).is_err());
        // same structure, different angles
        let shape = |blk: &Vec<Gate>| blk.iter().map(|g| (g.name(), g.qubits().to_vec())).collect::<Vec<_>>();
        assert_eq!(shape(&a.periods[0]), shape(&a.periods[2]));
        assert_ne!(a.periods[0], a.periods[1]);
    }

    #[test]
    fn grover_success_probabilities() {
        let obs = grover_success_observable(4, "0000").unwrap();
        for m in 0..=5 {
            let c = grover(4, "0000", m).unwrap();
            let rho = run_ideal(&c).unwrap();
            let p = expectation(&rho, &obs).unwrap();
            assert_abs_diff_eq!(p, grover_ideal_success(4, m), epsilon = 1e-10);
        }
        assert_abs_diff_eq!(grover_ideal_success(4, 0), 1.0 / 16.0, epsilon = 1e-15);
        assert!(grover_ideal_success(4, 3) > 0.96);
        assert!(grover_ideal_success(4, 5) < grover_ideal_success(4, 3));

        let obs = grover_success_observable(4, "1011").unwrap();
        let rho = run_ideal(&grover(4, "1011", 2).unwrap()).unwrap();
        assert_abs_diff_eq!(expectation(&rho, &obs).unwrap(), grover_ideal_success(4, 2), epsilon = 1e-10);
    }

    #[test]
    fn fold_and_inverse() {
        let c = random_periodic(3, 4, 5).unwrap();
        assert_eq!(c.fold(0), c);
        let f = c.fold(1);
        for (a, b) in f.periods.iter().zip(&c.periods) {
            assert_eq!(a.len(), 3 * b.len());
        }
        assert_eq!(c.inverse().inverse(), c);
        let ideal = run_ideal(&c).unwrap();
        let folded = run_ideal(&c.fold(2)).unwrap();
        assert!(max_abs_diff(&ideal.to_matrix(), &folded.to_matrix()) < 1e-12);

        let mut uu = c.clone();
        let inv = c.inverse();
        uu.periods.extend(inv.periods);
        let rho = run_ideal(&uu).unwrap();
        assert_abs_diff_eq!(rho.get(0, 0).re, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let mut c = grover(4, "0110", 2).unwrap();
        c.post = vec![Gate::Ry(1, 0.1 + 0.2)];
        let text = c.to_text();
        let back = PeriodicCircuit::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);

        let r = random_periodic(4, 8, 99).unwrap();
        assert_eq!(PeriodicCircuit::from_text(&r.to_text()).unwrap(), r);
    }

    #[test]
    fn text_parse_errors() {
        assert!(PeriodicCircuit::from_text("qubits 2\n").is_err());
        assert!(PeriodicCircuit::from_text("qubits 2 periods 1\nperiod\nFOO 0\n").is_err());
        assert!(PeriodicCircuit::from_text("qubits 2 periods 1\nperiod\nCNOT 0 5\n").is_err());
        assert!(PeriodicCircuit::from_text("qubits 2 periods 2\nperiod\nH 0\n").is_err());
    }
}
