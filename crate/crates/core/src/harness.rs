//! Benchmark campaigns: device-profile ingestion, the Ising, random-circuit
//! and Grover experiments, and CSV/JSON emission.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{depolarizing, ChannelEigenvalues, NoiseChannel, PauliChannel};
use crate::circuit::{adjoint_block, grover, grover_ideal_success, grover_success_observable, ising_trotter, random_periodic, Gate, PeriodicCircuit};
use crate::error::{Error, Result};
use crate::fit::{
    fit_exponential, fit_hybrid_ge, fit_hybrid_grover, fit_multi_exponential, fit_multistart, iczne_epsilon, iczne_extrapolate,
    multi_start_stability, pzne_extrapolate, DataPoint, DataSeries, FitResult, ModelFamily, StabilityReport,
};
use crate::paths::{adjacency_from_period, lognormality_qq, quantile_sorted, sample_paths, default_qq_levels, PathChain, PathNoise};
use crate::pauli::{apply_local_transfer, expand_state, local_transfer, PauliString, PauliVector};
use crate::sim::{
    expectation, mitigate_readout, purity, run, run_ideal, sample_counts, stream_rng, survival_from_state, DensityMatrix, GateNoise,
    NoiseSpec, ReadoutModel, TwirlMode, MAX_QUBITS,
};

pub const FAKE_QUITO: &str = include_str!("../data/fake_quito.json");
pub const FAKE_LIMA_DENSE: &str = include_str!("../data/fake_lima_dense.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QubitProperties {
    pub f10_ghz: f64,
    pub anharmonicity_mhz: f64,
    pub t1_us: f64,
    pub t2_us: f64,
    /// `P(read 0 | prepared 0)`.
    pub f0: f64,
    /// `P(read 1 | prepared 1)`.
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingEdge {
    pub qubits: (usize, usize),
    /// Average two-qubit gate error.
    pub cx_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    pub qubits: Vec<QubitProperties>,
    #[serde(default)]
    pub edges: Vec<CouplingEdge>,
    /// Average single-qubit gate error.
    #[serde(default)]
    pub sq_error: Option<f64>,
}

fn check_unit(field: String, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Profile(format!("{field} = {v} outside [0, 1]")))
    }
}

fn check_positive(field: String, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Profile(format!("{field} = {v} must be positive")))
    }
}

impl DeviceProfile {
    pub fn from_json(text: &str) -> Result<Self> {
        let p: DeviceProfile = serde_json::from_str(text).map_err(|e| Error::Profile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "fake_quito" => Self::from_json(FAKE_QUITO),
            "fake_lima_dense" => Self::from_json(FAKE_LIMA_DENSE),
            _ => Err(Error::Profile(format!(
                "unknown built-in profile {name:?} (expected fake_quito or fake_lima_dense)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.qubits.is_empty() {
            return Err(Error::Profile("qubits: at least one qubit required".into()));
        }
        for (i, q) in self.qubits.iter().enumerate() {
            check_unit(format!("qubits[{i}].f0"), q.f0)?;
            check_unit(format!("qubits[{i}].f1"), q.f1)?;
            check_positive(format!("qubits[{i}].t1_us"), q.t1_us)?;
            check_positive(format!("qubits[{i}].t2_us"), q.t2_us)?;
            check_positive(format!("qubits[{i}].f10_ghz"), q.f10_ghz)?;
            if !q.anharmonicity_mhz.is_finite() {
                return Err(Error::Profile(format!("qubits[{i}].anharmonicity_mhz is not finite")));
            }
        }
        let nq = self.qubits.len();
        for (i, e) in self.edges.iter().enumerate() {
            let (a, b) = e.qubits;
            if a >= nq || b >= nq {
                return Err(Error::Profile(format!(
                    "edges[{i}].qubits = ({a}, {b}) references a qubit outside 0..{nq}"
                )));
            }
            if a == b {
                return Err(Error::Profile(format!("edges[{i}].qubits = ({a}, {b}) is a self-loop")));
            }
            check_unit(format!("edges[{i}].cx_error"), e.cx_error)?;
            if self.edges[..i].iter().any(|f| edge_key(f.qubits) == edge_key(e.qubits)) {
                return Err(Error::Profile(format!("edges[{i}] duplicates coupling ({a}, {b})")));
            }
        }
        if let Some(e) = self.sq_error {
            check_unit("sq_error".into(), e)?;
        }
        Ok(())
    }

    pub fn edge_error(&self, a: usize, b: usize) -> Option<f64> {
        self.edges
            .iter()
            .find(|e| edge_key(e.qubits) == edge_key((a, b)))
            .map(|e| e.cx_error)
    }

    /// Readout model of the physical qubits `layout`.
    pub fn readout(&self, layout: &[usize]) -> Result<ReadoutModel> {
        ReadoutModel::new(
            layout.iter().map(|&q| self.qubits[q].f0).collect(),
            layout.iter().map(|&q| self.qubits[q].f1).collect(),
        )
    }
}

fn edge_key((a, b): (usize, usize)) -> (usize, usize) {
    (a.min(b), a.max(b))
}

pub fn load_device_profile(path: &Path) -> Result<DeviceProfile> {
    let text = fs::read_to_string(path)?;
    DeviceProfile::from_json(&text)
}

fn coupled_pairs(circ: &PeriodicCircuit) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = circ
        .gates()
        .filter(|g| g.is_two_qubit())
        .map(|g| {
            let q = g.qubits();
            edge_key((q[0], q[1]))
        })
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// First injective logical→physical assignment (lexicographic order) under
/// which every two-qubit gate acts on a coupling edge.
pub fn find_layout(profile: &DeviceProfile, circ: &PeriodicCircuit) -> Result<Vec<usize>> {
    let n = circ.n;
    let nq = profile.qubits.len();
    if n > nq {
        return Err(Error::Profile(format!("circuit needs {n} qubits, profile {} has {nq}", profile.name)));
    }
    let pairs = coupled_pairs(circ);
    fn extend(
        layout: &mut Vec<usize>,
        used: &mut [bool],
        n: usize,
        pairs: &[(usize, usize)],
        profile: &DeviceProfile,
    ) -> bool {
        let q = layout.len();
        if q == n {
            return true;
        }
        for p in 0..used.len() {
            if used[p] {
                continue;
            }
            let ok = pairs
                .iter()
                .filter(|&&(a, b)| b == q && a < q)
                .all(|&(a, _)| profile.edge_error(layout[a], p).is_some());
            if !ok {
                continue;
            }
            used[p] = true;
            layout.push(p);
            if extend(layout, used, n, pairs, profile) {
                return true;
            }
            layout.pop();
            used[p] = false;
        }
        false
    }
    let mut layout = Vec::with_capacity(n);
    let mut used = vec![false; nq];
    if extend(&mut layout, &mut used, n, &pairs, profile) {
        return Ok(layout);
    }
    let &(a, b) = pairs
        .iter()
        .find(|&&(a, b)| profile.edge_error(a, b).is_none())
        .or(pairs.first())
        .expect("a failed layout search implies a two-qubit gate");
    Err(Error::Uncoupled(a, b))
}

/// Depolarizing gate noise from average error rates: `p = (4/3)e` for one-qubit
/// gates and `p = (16/15)e` for two-qubit gates. RZ and Z are virtual.
pub fn profile_gate_noise(profile: &DeviceProfile, layout: &[usize]) -> Result<GateNoise> {
    let mut gn = GateNoise {
        virtual_z: true,
        ..GateNoise::default()
    };
    let sq = profile.sq_error.unwrap_or(0.0);
    if sq > 0.0 {
        let ch = depolarizing(1, (4.0 / 3.0 * sq).min(1.0))?;
        for q in 0..layout.len() {
            gn.one_qubit.insert(q, ch.clone());
        }
    }
    for a in 0..layout.len() {
        for b in a + 1..layout.len() {
            if let Some(e) = profile.edge_error(layout[a], layout[b]) {
                if e > 0.0 {
                    gn.two_qubit.insert((a, b), depolarizing(2, (16.0 / 15.0 * e).min(1.0))?);
                }
            }
        }
    }
    Ok(gn)
}

fn local_code(j: usize, qubits: &[usize]) -> usize {
    qubits
        .iter()
        .enumerate()
        .fold(0, |acc, (b, &q)| acc | (((j >> (2 * q)) & 3) << (2 * b)))
}

/// Pauli twirl of the noise of a gate block relative to its ideal unitary:
/// `λ_j = Σ_i C_U[i][j] · C_N[i][j]`, with `C_N` the transfer matrix of the
/// block with every gate followed by its channel.
pub fn twirled_block_channel(n: usize, gates: &[Gate], noise: &GateNoise) -> Result<PauliChannel> {
    let dim = 1usize << (2 * n);
    struct Step {
        qubits: Vec<usize>,
        ptm: Vec<f64>,
        damp: Option<Vec<f64>>,
    }
    let steps: Vec<Step> = gates
        .iter()
        .map(|g| {
            let qubits: Vec<usize> = g.qubits().iter().copied().collect();
            if let Some(&q) = qubits.iter().find(|&&q| q >= n) {
                return Err(Error::QubitOutOfRange { qubit: q, n });
            }
            let damp = noise.channel_for(g).filter(|(c, _)| !c.is_identity()).map(|(c, qs)| {
                let ev = c.eigenvalues();
                (0..dim).map(|j| ev.get(local_code(j, &qs))).collect()
            });
            Ok(Step {
                ptm: local_transfer(&g.matrix()),
                qubits,
                damp,
            })
        })
        .collect::<Result<_>>()?;
    if steps.iter().all(|s| s.damp.is_none()) {
        return Ok(PauliChannel::identity(n));
    }
    let rows: Vec<Vec<f64>> = (0..dim)
        .into_par_iter()
        .map(|i| {
            let mut ideal = vec![0.0; dim];
            ideal[i] = 1.0;
            let mut noisy = ideal.clone();
            for s in &steps {
                apply_local_transfer(&mut ideal, n, &s.qubits, &s.ptm);
                apply_local_transfer(&mut noisy, n, &s.qubits, &s.ptm);
                if let Some(d) = &s.damp {
                    noisy.iter_mut().zip(d).for_each(|(v, l)| *v *= l);
                }
            }
            ideal.iter().zip(&noisy).map(|(a, b)| a * b).collect()
        })
        .collect();
    let mut lambdas = vec![0.0; dim];
    for row in &rows {
        lambdas.iter_mut().zip(row).for_each(|(l, v)| *l += v);
    }
    lambdas[0] = 1.0;
    PauliChannel::from_eigenvalues(&ChannelEigenvalues { n, lambdas })
}

/// Caches twirled period channels by block content.
#[derive(Debug, Default)]
pub struct ChannelCache {
    map: HashMap<String, (PauliChannel, PauliChannel)>,
}

impl ChannelCache {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Per-period forward (`C`) and backward (`C†`) channels of `circ` under the
/// device's gate noise; prep and post stay ideal.
pub fn profile_to_noise(profile: &DeviceProfile, circ: &PeriodicCircuit) -> Result<NoiseSpec> {
    profile_to_noise_cached(profile, circ, &mut ChannelCache::default())
}

pub fn profile_to_noise_cached(profile: &DeviceProfile, circ: &PeriodicCircuit, cache: &mut ChannelCache) -> Result<NoiseSpec> {
    let layout = find_layout(profile, circ)?;
    let gn = profile_gate_noise(profile, &layout)?;
    let n = circ.n;
    if circ.periods.is_empty() || gn.is_noiseless() {
        return Ok(NoiseSpec::noiseless(n));
    }
    let mut fwd = Vec::with_capacity(circ.num_periods());
    let mut bwd = Vec::with_capacity(circ.num_periods());
    for block in &circ.periods {
        let key = format!("{layout:?}{block:?}");
        let (f, b) = match cache.map.get(&key) {
            Some(v) => v.clone(),
            None => {
                let f = twirled_block_channel(n, block, &gn)?;
                let b = twirled_block_channel(n, &adjoint_block(block), &gn)?;
                cache.map.insert(key, (f.clone(), b.clone()));
                (f, b)
            }
        };
        fwd.push(NoiseChannel::Pauli(f));
        bwd.push(NoiseChannel::Pauli(b));
    }
    if fwd.iter().chain(&bwd).all(|c| matches!(c, NoiseChannel::Pauli(p) if p.is_identity())) {
        return Ok(NoiseSpec::noiseless(n));
    }
    NoiseSpec::from_periods(n, fwd, bwd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exp,
    MultiExp,
    Iczne,
    Pzne,
    Hybrid,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Exp, Method::MultiExp, Method::Iczne, Method::Pzne, Method::Hybrid];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Exp => "exp",
            Method::MultiExp => "multi_exp",
            Method::Iczne => "iczne",
            Method::Pzne => "pzne",
            Method::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected exp, multi_exp, iczne, pzne or hybrid)")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Ising,
    Random,
    Grover,
    Qq,
    FitFile,
}

impl Experiment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::Ising => "ising",
            Experiment::Random => "random",
            Experiment::Grover => "grover",
            Experiment::Qq => "qq",
            Experiment::FitFile => "fit-file",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSource {
    /// Device profile JSON on disk.
    Profile { path: PathBuf },
    /// `fake_quito` or `fake_lima_dense`.
    Builtin { name: String },
    /// Global depolarizing channel of strength `p` after every period.
    Depolarizing { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub experiment: Experiment,
    pub qubits: usize,
    /// Trotter steps, two-qubit depths or Grover iterations.
    pub depths: Vec<usize>,
    pub circuits: usize,
    pub seed: u64,
    /// Amplification factors for the 3- and 4-parameter models.
    pub folds: Vec<usize>,
    /// Amplification factors for the 5-parameter models.
    pub folds_hybrid: Vec<usize>,
    pub noise: Option<NoiseSource>,
    pub twirl: TwirlMode,
    /// 0 = exact expectations.
    pub shots: u64,
    pub methods: Vec<Method>,
    pub starts: usize,
    pub trials: usize,
    pub stability_step: usize,
    pub qq_samples: usize,
    pub marked: String,
    pub output: Option<PathBuf>,
    /// Data file for fit-file mode.
    pub input: Option<PathBuf>,
    pub model: ModelFamily,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            experiment: Experiment::Ising,
            qubits: 4,
            depths: Vec::new(),
            circuits: 30,
            seed: 0,
            folds: vec![1, 3, 5, 7, 9],
            folds_hybrid: vec![1, 3, 5, 7, 9, 11, 13],
            noise: None,
            twirl: TwirlMode::Analytic,
            shots: 0,
            methods: Method::ALL.to_vec(),
            starts: 50,
            trials: 10,
            stability_step: 3,
            qq_samples: 100_000,
            marked: "0000".into(),
            output: None,
            input: None,
            model: ModelFamily::HybridGe,
        }
    }
}

fn check_grid(name: &str, ks: &[usize], min: usize) -> Result<()> {
    if ks.len() < min {
        return Err(Error::Config(format!("{name} needs at least {min} amplification factors")));
    }
    if ks.iter().any(|k| k % 2 == 0) {
        return Err(Error::Config(format!("{name} must hold odd factors k = 2r + 1, got {ks:?}")));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("{name} must be strictly increasing, got {ks:?}")));
    }
    Ok(())
}

impl CampaignConfig {
    pub fn new(experiment: Experiment) -> Self {
        CampaignConfig {
            experiment,
            ..Default::default()
        }
        .normalized()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: CampaignConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.normalized())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fill experiment-specific defaults.
    pub fn normalized(mut self) -> Self {
        if self.depths.is_empty() {
            self.depths = match self.experiment {
                Experiment::Ising => (1..=8).map(|s| 2 * s).collect(),
                Experiment::Random => (1..=18).map(|s| 2 * s).collect(),
                Experiment::Grover => (1..=5).collect(),
                Experiment::Qq => vec![8, 36],
                Experiment::FitFile => Vec::new(),
            };
        }
        if self.experiment == Experiment::Grover {
            self.qubits = self.marked.len() + 1;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment == Experiment::FitFile {
            if self.input.is_none() {
                return Err(Error::Config("fit-file mode needs an input file".into()));
            }
            return Ok(());
        }
        if self.depths.is_empty() {
            return Err(Error::Config("depth range is empty".into()));
        }
        if self.circuits == 0 {
            return Err(Error::Config("circuit count must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.starts == 0 {
            return Err(Error::Config("starts must be positive".into()));
        }
        check_grid("folds", &self.folds, 3)?;
        check_grid("folds_hybrid", &self.folds_hybrid, 5)?;
        let max_q = match self.experiment {
            Experiment::Random | Experiment::Qq => 4,
            _ => MAX_QUBITS,
        };
        if !(2..=max_q).contains(&self.qubits) {
            return Err(Error::Config(format!("qubits must lie in 2..={max_q}, got {}", self.qubits)));
        }
        if matches!(self.experiment, Experiment::Random | Experiment::Qq) && self.depths.iter().any(|d| d % 2 != 0 || *d == 0) {
            return Err(Error::Config("random-circuit depths must be even and positive".into()));
        }
        if self.experiment == Experiment::Grover {
            if self.marked.len() < 2 || !self.marked.chars().all(|c| c == '0' || c == '1') {
                return Err(Error::Config(format!("marked must be a bitstring of length >= 2, got {:?}", self.marked)));
            }
            if self.shots > 0 && (self.trials == 0 || self.starts < 2) {
                return Err(Error::Config("stability runs need trials >= 1 and starts >= 2".into()));
            }
        }
        if self.experiment == Experiment::Qq && self.qq_samples < 100 {
            return Err(Error::Config("Q-Q analysis needs at least 100 samples".into()));
        }
        if let Some(NoiseSource::Depolarizing { p }) = &self.noise {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Config(format!("depolarizing strength {p} outside [0, 1]")));
            }
        }
        if let TwirlMode::Sampled { frames: 0, .. } = self.twirl {
            return Err(Error::Config("twirl frame count must be positive".into()));
        }
        Ok(())
    }

    fn default_profile(&self) -> &'static str {
        match self.experiment {
            Experiment::Ising => "fake_quito",
            _ => "fake_lima_dense",
        }
    }
}

/// Resolved noise source for a campaign.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    Device(DeviceProfile),
    Depolarizing(f64),
}

impl NoiseModel {
    pub fn from_config(cfg: &CampaignConfig) -> Result<Self> {
        let cfg_err = |e: Error| match e {
            Error::Io(e) => Error::Config(e.to_string()),
            e @ Error::Profile(_) => Error::Config(e.to_string()),
            e => e,
        };
        Ok(match &cfg.noise {
            None => NoiseModel::Device(DeviceProfile::builtin(cfg.default_profile()).map_err(cfg_err)?),
            Some(NoiseSource::Builtin { name }) => NoiseModel::Device(DeviceProfile::builtin(name).map_err(cfg_err)?),
            Some(NoiseSource::Profile { path }) => NoiseModel::Device(load_device_profile(path).map_err(cfg_err)?),
            Some(NoiseSource::Depolarizing { p }) => NoiseModel::Depolarizing(*p),
        })
    }

    pub fn noise_for(&self, circ: &PeriodicCircuit, cache: &mut ChannelCache) -> Result<NoiseSpec> {
        match self {
            NoiseModel::Device(p) => profile_to_noise_cached(p, circ, cache),
            NoiseModel::Depolarizing(p) => {
                if circ.periods.is_empty() || *p == 0.0 {
                    Ok(NoiseSpec::noiseless(circ.n))
                } else {
                    Ok(NoiseSpec::per_period(depolarizing(circ.n, *p)?))
                }
            }
        }
    }

    pub fn readout(&self, circ: &PeriodicCircuit) -> Result<ReadoutModel> {
        match self {
            NoiseModel::Device(p) => p.readout(&find_layout(p, circ)?),
            NoiseModel::Depolarizing(_) => Ok(ReadoutModel::perfect(circ.n)),
        }
    }
}

/// Basis rotation taking every non-identity factor of `obs` to Z; the terms
/// must agree qubit-wise.
fn measurement_basis(obs: &PauliVector, n: usize) -> Result<Vec<Gate>> {
    let mut codes = vec![0usize; n];
    for (p, _) in &obs.terms {
        for (q, code) in codes.iter_mut().enumerate() {
            let c = p.code(q);
            if c == 0 {
                continue;
            }
            if *code != 0 && *code != c {
                return Err(Error::InvalidArgument("observable terms need a common measurement basis".into()));
            }
            *code = c;
        }
    }
    Ok(codes
        .iter()
        .enumerate()
        .filter_map(|(q, &c)| match c {
            1 => Some(Gate::H(q)),
            3 => Some(Gate::Rx(q, PI / 2.0)),
            _ => None,
        })
        .collect())
}

/// Shot estimate of `⟨obs⟩` with readout error and matrix-inversion mitigation.
pub fn sampled_expectation(rho: &DensityMatrix, obs: &PauliVector, shots: u64, ro: &ReadoutModel, seed: u64) -> Result<f64> {
    let n = rho.n();
    let mut rotated = rho.clone();
    for g in measurement_basis(obs, n)? {
        rotated.apply_gate(&g);
    }
    let probs = mitigate_readout(&sample_counts(&rotated, shots, ro, seed)?, ro)?;
    Ok(obs
        .terms
        .iter()
        .map(|(p, c)| {
            let mask = (0..n).filter(|&q| p.code(q) != 0).fold(0usize, |m, q| m | 1 << q);
            let s: f64 = probs
                .iter()
                .enumerate()
                .map(|(x, px)| if (x & mask).count_ones() % 2 == 0 { *px } else { -px })
                .sum();
            c * p.sign().value() * s
        })
        .sum())
}

/// Measurements at every fold of the union grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub ks: Vec<usize>,
    pub y: Vec<f64>,
    pub purity: Vec<f64>,
    pub survival: Vec<f64>,
}

impl Sweep {
    fn at(&self, k: usize) -> usize {
        self.ks.iter().position(|&x| x == k).expect("grid is a subset of the sweep")
    }

    pub fn series(&self, grid: &[usize]) -> Result<DataSeries> {
        DataSeries::new(
            grid.iter()
                .map(|&k| DataPoint {
                    k: k as f64,
                    y: self.y[self.at(k)],
                    sigma: None,
                })
                .collect(),
        )
    }
}

pub struct SweepSpec<'a> {
    pub obs: &'a PauliVector,
    pub ks: &'a [usize],
    pub twirl: TwirlMode,
    pub shots: u64,
    pub readout: Option<&'a ReadoutModel>,
    pub seed: u64,
}

pub fn measure(circ: &PeriodicCircuit, noise: &NoiseSpec, spec: &SweepSpec<'_>) -> Result<Sweep> {
    let mut out = Sweep {
        ks: spec.ks.to_vec(),
        y: Vec::new(),
        purity: Vec::new(),
        survival: Vec::new(),
    };
    let perfect = ReadoutModel::perfect(circ.n);
    for (i, &k) in spec.ks.iter().enumerate() {
        let r = (k - 1) / 2;
        let rho = run(circ, noise, r, spec.twirl)?;
        let y = if spec.shots > 0 {
            let ro = spec.readout.unwrap_or(&perfect);
            sampled_expectation(&rho, spec.obs, spec.shots, ro, spec.seed.wrapping_add(i as u64))?
        } else {
            expectation(&rho, spec.obs)?
        };
        out.y.push(y);
        out.purity.push(purity(&rho));
        out.survival.push(survival_from_state(circ, noise, r, rho)?);
    }
    Ok(out)
}

fn union_grid(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = a.iter().chain(b).copied().collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Context shared by every method applied to one sweep.
pub struct MethodContext<'a> {
    pub n: usize,
    pub folds: &'a [usize],
    pub folds_hybrid: &'a [usize],
    /// Identity coefficient of the observable; pZNE rescales only the rest.
    pub offset: f64,
    pub hybrid: ModelFamily,
    pub starts: usize,
    pub seed: u64,
}

pub fn apply_method(method: Method, sweep: &Sweep, ctx: &MethodContext<'_>) -> Result<FitResult> {
    match method {
        Method::Exp => fit_exponential(&sweep.series(ctx.folds)?),
        Method::MultiExp => fit_multi_exponential(&sweep.series(ctx.folds_hybrid)?, 2),
        Method::Iczne => {
            let pairs = ctx
                .folds
                .iter()
                .map(|&k| {
                    let i = sweep.at(k);
                    Ok((iczne_epsilon(sweep.survival[i].clamp(0.0, 1.0), ctx.n)?, sweep.y[i]))
                })
                .collect::<Result<Vec<_>>>()?;
            iczne_extrapolate(&pairs)
        }
        Method::Pzne => {
            let p_inf = 1.0 / (1u64 << ctx.n) as f64;
            let pts: Vec<(f64, f64)> = ctx
                .folds
                .iter()
                .map(|&k| sweep.at(k))
                .filter(|&i| sweep.purity[i] > p_inf + 1e-12)
                .map(|i| (sweep.y[i] - ctx.offset, sweep.purity[i]))
                .collect();
            if pts.is_empty() {
                return Err(Error::NoiseSaturated {
                    p_n: sweep.purity[sweep.at(ctx.folds[0])],
                    p_inf,
                });
            }
            let mut f = pzne_extrapolate(&pts, 1.0, p_inf)?;
            f.extrapolated += ctx.offset;
            if pts.len() < ctx.folds.len() {
                f.notes.push(format!("{} saturated point(s) dropped", ctx.folds.len() - pts.len()));
            }
            Ok(f)
        }
        Method::Hybrid => {
            let data = sweep.series(ctx.folds_hybrid)?;
            match ctx.hybrid {
                ModelFamily::HybridGrover => fit_hybrid_grover(&data, ctx.starts, ctx.seed),
                ModelFamily::HybridGe => fit_hybrid_ge(&data, ctx.starts, ctx.seed),
                other => fit_multistart(&data, &other.default_spec(), ctx.starts, ctx.seed),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub seed: u64,
    pub depth: usize,
    pub method: Method,
    pub k_grid: Vec<usize>,
    pub extrapolated: f64,
    pub ideal: f64,
    pub abs_error: f64,
    pub metadata: BTreeMap<String, String>,
}

impl ResultRow {
    pub fn failed(&self) -> bool {
        !self.abs_error.is_finite()
    }
}

struct RowContext<'a> {
    experiment: &'a str,
    seed: u64,
    depth: usize,
    ideal: f64,
    meta: BTreeMap<String, String>,
}

fn method_rows(sweep: &Sweep, ctx: &MethodContext<'_>, methods: &[Method], rc: RowContext<'_>) -> Vec<ResultRow> {
    let spread = sweep.y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - sweep.y.iter().cloned().fold(f64::INFINITY, f64::min);
    methods
        .iter()
        .map(|&m| {
            let grid = match m {
                Method::MultiExp | Method::Hybrid => ctx.folds_hybrid,
                _ => ctx.folds,
            };
            let mut meta = rc.meta.clone();
            let value = if spread <= 1e-12 {
                meta.insert("note".into(), "constant data".into());
                sweep.y[0]
            } else {
                match apply_method(m, sweep, ctx) {
                    Ok(f) => {
                        meta.insert("model".into(), f.model.clone());
                        meta.insert("converged".into(), f.converged.to_string());
                        if !f.notes.is_empty() {
                            meta.insert("note".into(), f.notes.join("; "));
                        }
                        f.extrapolated
                    }
                    Err(e) => {
                        meta.insert("error".into(), e.to_string());
                        f64::NAN
                    }
                }
            };
            ResultRow {
                experiment: rc.experiment.to_string(),
                seed: rc.seed,
                depth: rc.depth,
                method: m,
                k_grid: grid.to_vec(),
                extrapolated: value,
                ideal: rc.ideal,
                abs_error: (value - rc.ideal).abs(),
                metadata: meta,
            }
        })
        .collect()
}

fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (a.experiment.as_str(), a.depth, a.seed, a.method).cmp(&(b.experiment.as_str(), b.depth, b.seed, b.method))
    });
}

fn random_observable<R: Rng>(n: usize, rng: &mut R) -> PauliVector {
    let idx = rng.random_range(1..1usize << (2 * n));
    PauliVector {
        terms: vec![(PauliString::from_index(n, idx), 1.0)],
    }
}

fn ising_or_random_rows(
    cfg: &CampaignConfig,
    model: &NoiseModel,
    build: impl Fn(u64, usize) -> Result<PeriodicCircuit> + Sync,
    meta: impl Fn(&PeriodicCircuit) -> BTreeMap<String, String> + Sync,
) -> Result<Vec<ResultRow>> {
    let ks = union_grid(&cfg.folds, &cfg.folds_hybrid);
    let exp = cfg.experiment.as_str();
    let per_circuit: Vec<Vec<ResultRow>> = (0..cfg.circuits)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(cfg.seed, c as u64);
            let circuit_seed: u64 = rng.random();
            let obs = random_observable(cfg.qubits, &mut rng);
            let mut cache = ChannelCache::default();
            let mut rows = Vec::new();
            for &depth in &cfg.depths {
                let rc = |meta: BTreeMap<String, String>, ideal: f64| RowContext {
                    experiment: exp,
                    seed: circuit_seed,
                    depth,
                    ideal,
                    meta,
                };
                let failure = |e: Error| {
                    let mut m = BTreeMap::new();
                    m.insert("error".to_string(), e.to_string());
                    cfg.methods
                        .iter()
                        .map(|&method| ResultRow {
                            experiment: exp.to_string(),
                            seed: circuit_seed,
                            depth,
                            method,
                            k_grid: Vec::new(),
                            extrapolated: f64::NAN,
                            ideal: f64::NAN,
                            abs_error: f64::NAN,
                            metadata: m.clone(),
                        })
                        .collect::<Vec<_>>()
                };
                let prepared = (|| {
                    let circ = build(circuit_seed, depth)?;
                    let noise = model.noise_for(&circ, &mut cache)?;
                    let ideal = expectation(&run_ideal(&circ)?, &obs)?;
                    let ro = if cfg.shots > 0 { Some(model.readout(&circ)?) } else { None };
                    let sweep = measure(
                        &circ,
                        &noise,
                        &SweepSpec {
                            obs: &obs,
                            ks: &ks,
                            twirl: cfg.twirl,
                            shots: cfg.shots,
                            readout: ro.as_ref(),
                            seed: circuit_seed ^ depth as u64,
                        },
                    )?;
                    let mut m = meta(&circ);
                    m.insert("observable".into(), obs.terms[0].0.label());
                    Ok::<_, Error>((sweep, ideal, m))
                })();
                match prepared {
                    Ok((sweep, ideal, m)) => {
                        let ctx = MethodContext {
                            n: cfg.qubits,
                            folds: &cfg.folds,
                            folds_hybrid: &cfg.folds_hybrid,
                            offset: 0.0,
                            hybrid: ModelFamily::HybridGe,
                            starts: cfg.starts,
                            seed: circuit_seed.wrapping_add(depth as u64),
                        };
                        rows.extend(method_rows(&sweep, &ctx, &cfg.methods, rc(m, ideal)));
                    }
                    Err(e) => rows.extend(failure(e)),
                }
            }
            rows
        })
        .collect();
    let mut rows: Vec<ResultRow> = per_circuit.into_iter().flatten().collect();
    sort_rows(&mut rows);
    Ok(rows)
}

/// Transverse-field Ising sweeps: `h = 1`, `J` uniform in `[0, 1)`,
/// `dt = π/15`, one random non-identity Pauli observable per circuit.
pub fn run_ising_campaign(cfg: &CampaignConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let model = NoiseModel::from_config(cfg)?;
    let n = cfg.qubits;
    ising_or_random_rows(
        cfg,
        &model,
        |seed, steps| {
            let j = stream_rng(seed, 0).random::<f64>();
            ising_trotter(n, j, 1.0, PI / 15.0, steps)
        },
        |c| {
            let mut m = BTreeMap::new();
            m.insert("J".into(), c.meta.get("J").unwrap_or("").to_string());
            m
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqRow {
    pub depth: usize,
    pub periods: usize,
    pub samples: usize,
    pub correlation: Option<f64>,
    pub note: Option<String>,
}

/// Q-Q correlation of `ln W` over exact-uniform paths ending at `beta`.
pub fn qq_for_circuit(circ: &PeriodicCircuit, noise: &NoiseSpec, beta: usize, samples: usize, seed: u64, depth: usize) -> Result<QqRow> {
    let m = circ.num_periods();
    let mut row = QqRow {
        depth,
        periods: m,
        samples,
        correlation: None,
        note: None,
    };
    let Some(pn) = PathNoise::from_spec(noise, m)? else {
        row.note = Some("noiseless".into());
        return Ok(row);
    };
    let a = adjacency_from_period(circ.n, &circ.periods[0])?;
    let sources = expand_state(&DensityMatrix::zero_state(circ.n))?.support();
    let chain = match PathChain::new(a, &sources, beta, m) {
        Ok(c) => c,
        Err(e @ Error::Unreachable { .. }) => {
            row.note = Some(e.to_string());
            return Ok(row);
        }
        Err(e) => return Err(e),
    };
    let lw: Vec<f64> = sample_paths(&chain, samples, seed, &pn, 0, None)?.iter().map(|s| s.ln_w).collect();
    match lognormality_qq(&lw, None, &default_qq_levels()) {
        Ok(rep) => row.correlation = Some(rep.correlation),
        Err(e @ Error::Degenerate(_)) => row.note = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    Ok(row)
}

/// Q-Q correlation per depth for the first random circuit of the campaign.
pub fn run_qq(cfg: &CampaignConfig) -> Result<Vec<QqRow>> {
    cfg.validate()?;
    let model = NoiseModel::from_config(cfg)?;
    let mut rng = stream_rng(cfg.seed, 0);
    let circuit_seed: u64 = rng.random();
    let obs = random_observable(cfg.qubits, &mut rng);
    let beta = obs.terms[0].0.index();
    let mut cache = ChannelCache::default();
    cfg.depths
        .iter()
        .map(|&d| {
            let circ = random_periodic(cfg.qubits, d, circuit_seed)?;
            let noise = model.noise_for(&circ, &mut cache)?;
            qq_for_circuit(&circ, &noise, beta, cfg.qq_samples, cfg.seed ^ d as u64, d)
        })
        .collect()
}

/// Random periodic circuits over two-qubit depths, plus per-depth Q-Q rows.
pub fn run_random_campaign(cfg: &CampaignConfig) -> Result<(Vec<ResultRow>, Vec<QqRow>)> {
    cfg.validate()?;
    let model = NoiseModel::from_config(cfg)?;
    let n = cfg.qubits;
    let rows = ising_or_random_rows(cfg, &model, |seed, depth| random_periodic(n, depth, seed), |_| BTreeMap::new())?;
    let qq = run_qq(cfg)?;
    Ok((rows, qq))
}

/// Grover search: exact sweeps over iterations, then shot-based stability
/// trials at `stability_step` when `shots > 0`.
pub fn run_grover_campaign(cfg: &CampaignConfig) -> Result<(Vec<ResultRow>, Option<StabilityReport>)> {
    cfg.validate()?;
    let model = NoiseModel::from_config(cfg)?;
    let t = cfg.marked.len();
    let obs = grover_success_observable(t, &cfg.marked)?;
    let offset = obs.terms.iter().filter(|(p, _)| p.is_identity()).map(|(_, c)| c).sum();
    let ks = union_grid(&cfg.folds, &cfg.folds_hybrid);
    let mut cache = ChannelCache::default();
    let ctx = |seed: u64| MethodContext {
        n: t + 1,
        folds: &cfg.folds,
        folds_hybrid: &cfg.folds_hybrid,
        offset,
        hybrid: ModelFamily::HybridGrover,
        starts: cfg.starts,
        seed,
    };
    let mut rows = Vec::new();
    let mut prepared = Vec::new();
    for &it in &cfg.depths {
        let circ = grover(t, &cfg.marked, it)?;
        let noise = model.noise_for(&circ, &mut cache)?;
        prepared.push((it, circ, noise));
    }
    let exact: Vec<Vec<ResultRow>> = prepared
        .par_iter()
        .map(|(it, circ, noise)| {
            let sweep = measure(
                circ,
                noise,
                &SweepSpec {
                    obs: &obs,
                    ks: &ks,
                    twirl: cfg.twirl,
                    shots: 0,
                    readout: None,
                    seed: cfg.seed,
                },
            )?;
            let rc = RowContext {
                experiment: "grover",
                seed: cfg.seed,
                depth: *it,
                ideal: grover_ideal_success(t, *it),
                meta: BTreeMap::new(),
            };
            Ok(method_rows(&sweep, &ctx(cfg.seed.wrapping_add(*it as u64)), &cfg.methods, rc))
        })
        .collect::<Result<_>>()?;
    rows.extend(exact.into_iter().flatten());

    let mut stability = None;
    if cfg.shots > 0 {
        let step = cfg.stability_step;
        let circ = grover(t, &cfg.marked, step)?;
        let noise = model.noise_for(&circ, &mut cache)?;
        let ro = model.readout(&circ)?;
        let ideal = grover_ideal_success(t, step);
        let trials: Vec<(Sweep, Vec<ResultRow>)> = (0..cfg.trials as u64)
            .into_par_iter()
            .map(|trial| {
                let seed = stream_rng(cfg.seed, 1 << 32 | trial).random::<u64>();
                let sweep = measure(
                    &circ,
                    &noise,
                    &SweepSpec {
                        obs: &obs,
                        ks: &ks,
                        twirl: cfg.twirl,
                        shots: cfg.shots,
                        readout: Some(&ro),
                        seed,
                    },
                )?;
                let mut meta = BTreeMap::new();
                meta.insert("shots".into(), cfg.shots.to_string());
                let rc = RowContext {
                    experiment: "grover_shots",
                    seed: trial,
                    depth: step,
                    ideal,
                    meta,
                };
                let rows = method_rows(&sweep, &ctx(seed), &cfg.methods, rc);
                Ok((sweep, rows))
            })
            .collect::<Result<_>>()?;
        let datasets = trials
            .iter()
            .map(|(s, _)| s.series(&cfg.folds_hybrid))
            .collect::<Result<Vec<_>>>()?;
        stability = Some(multi_start_stability(
            &datasets,
            &ModelFamily::HybridGrover.default_spec(),
            cfg.starts,
            cfg.seed,
            (0.0, 1.0),
        )?);
        rows.extend(trials.into_iter().flat_map(|(_, r)| r));
    }
    sort_rows(&mut rows);
    Ok((rows, stability))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignOutput {
    pub rows: Vec<ResultRow>,
    pub qq: Vec<QqRow>,
    pub stability: Option<StabilityReport>,
    pub fit: Option<FitResult>,
}

/// Read `k,y[,sigma]` rows (with header) for fit-file mode.
pub fn read_fit_file<R: Read>(input: R) -> Result<DataSeries> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(ki), Some(yi)) = (col("k"), col("y")) else {
        return Err(Error::Config("fit file needs `k` and `y` columns".into()));
    };
    let si = col("sigma");
    let mut points = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Parse {
                    line: line + 2,
                    message: "missing column".into(),
                })?
                .parse()
                .map_err(|_| Error::Parse {
                    line: line + 2,
                    message: format!("bad number {:?}", rec.get(i).unwrap_or("")),
                })
        };
        let sigma = match si {
            Some(i) if rec.get(i).is_some_and(|s| !s.is_empty()) => Some(num(i)?),
            _ => None,
        };
        points.push(DataPoint { k: num(ki)?, y: num(yi)?, sigma });
    }
    DataSeries::new(points)
}

pub fn fit_series(data: &DataSeries, family: ModelFamily, starts: usize, seed: u64) -> Result<FitResult> {
    match family {
        ModelFamily::Exponential => fit_exponential(data),
        ModelFamily::MultiExponential(k) => fit_multi_exponential(data, k),
        ModelFamily::LinearInEpsilon => {
            let pairs: Vec<(f64, f64)> = data.points.iter().map(|p| (p.k, p.y)).collect();
            iczne_extrapolate(&pairs)
        }
        ModelFamily::HybridGe => fit_hybrid_ge(data, starts, seed),
        ModelFamily::HybridGrover => fit_hybrid_grover(data, starts, seed),
    }
}

/// Dispatch on `cfg.experiment`. Fails when every row failed.
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignOutput> {
    cfg.validate()?;
    let mut out = CampaignOutput::default();
    match cfg.experiment {
        Experiment::Ising => out.rows = run_ising_campaign(cfg)?,
        Experiment::Random => (out.rows, out.qq) = run_random_campaign(cfg)?,
        Experiment::Grover => (out.rows, out.stability) = run_grover_campaign(cfg)?,
        Experiment::Qq => out.qq = run_qq(cfg)?,
        Experiment::FitFile => {
            let path = cfg.input.as_ref().expect("validated");
            let file = fs::File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            out.fit = Some(fit_series(&read_fit_file(file)?, cfg.model, cfg.starts, cfg.seed)?);
        }
    }
    if !out.rows.is_empty() && out.rows.iter().all(ResultRow::failed) {
        let first = out.rows[0].metadata.get("error").cloned().unwrap_or_default();
        return Err(Error::Campaign(format!("every row failed; first error: {first}")));
    }
    Ok(out)
}

pub const CSV_COLUMNS: [&str; 8] = ["experiment", "seed", "depth", "method", "k_grid", "extrapolated", "ideal", "abs_error"];

fn format_grid(ks: &[usize]) -> String {
    ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";")
}

pub fn write_rows_csv<W: Write>(out: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.seed.to_string(),
            r.depth.to_string(),
            r.method.to_string(),
            format_grid(&r.k_grid),
            r.extrapolated.to_string(),
            r.ideal.to_string(),
            r.abs_error.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a results CSV back; metadata is not part of the CSV.
pub fn read_rows_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    if rdr.headers()?.iter().ne(CSV_COLUMNS) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected columns {}", CSV_COLUMNS.join(",")),
        });
    }
    rdr.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec?;
            let bad = |what: &str| Error::Parse {
                line: i + 2,
                message: format!("bad {what}"),
            };
            let f = |j: usize, what: &str| rec[j].parse::<f64>().map_err(|_| bad(what));
            Ok(ResultRow {
                experiment: rec[0].to_string(),
                seed: rec[1].parse().map_err(|_| bad("seed"))?,
                depth: rec[2].parse().map_err(|_| bad("depth"))?,
                method: Method::parse(&rec[3]).map_err(|_| bad("method"))?,
                k_grid: if rec[4].is_empty() {
                    Vec::new()
                } else {
                    rec[4].split(';').map(|k| k.parse().map_err(|_| bad("k_grid"))).collect::<Result<_>>()?
                },
                extrapolated: f(5, "extrapolated")?,
                ideal: f(6, "ideal")?,
                abs_error: f(7, "abs_error")?,
                metadata: BTreeMap::new(),
            })
        })
        .collect()
}

/// Box-plot statistics with type-7 (linear interpolation) quartiles and
/// whiskers at the most extreme data within `1.5 × IQR` of the box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&s, 0.25);
        let q3 = quantile_sorted(&s, 0.75);
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside = s.iter().copied().filter(|v| (lo..=hi).contains(v));
        Some(BoxStats {
            q1,
            median: quantile_sorted(&s, 0.5),
            q3,
            whisker_low: inside.clone().fold(f64::INFINITY, f64::min),
            whisker_high: inside.fold(f64::NEG_INFINITY, f64::max),
            outliers: s.iter().copied().filter(|v| !(lo..=hi).contains(v)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryGroup {
    pub experiment: String,
    pub depth: usize,
    pub method: Method,
    pub n: usize,
    pub n_failed: usize,
    pub mae: Option<f64>,
    pub box_stats: Option<BoxStats>,
}

/// Per-(experiment, depth, method) mean absolute error and box statistics over
/// the rows that produced a finite value.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryGroup> {
    let mut groups: BTreeMap<(String, usize, Method), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.experiment.clone(), r.depth, r.method)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((experiment, depth, method), rs)| {
            let errs: Vec<f64> = rs.iter().filter(|r| !r.failed()).map(|r| r.abs_error).collect();
            SummaryGroup {
                experiment,
                depth,
                method,
                n: rs.len(),
                n_failed: rs.len() - errs.len(),
                mae: (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64),
                box_stats: BoxStats::from_values(&errs),
            }
        })
        .collect()
}

/// Mean absolute error per method at one depth of one experiment.
pub fn mae_by_method(rows: &[ResultRow], experiment: &str, depth: usize) -> BTreeMap<Method, f64> {
    summarize(rows)
        .into_iter()
        .filter(|g| g.experiment == experiment && g.depth == depth)
        .filter_map(|g| g.mae.map(|m| (g.method, m)))
        .collect()
}

/// Write `rows.csv`, `summary.json` and, when present, `qq.json`,
/// `stability.json` and `fit.json` into `dir`.
pub fn emit(dir: &Path, out: &CampaignOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if !out.rows.is_empty() {
        let p = dir.join("rows.csv");
        write_rows_csv(fs::File::create(&p)?, &out.rows)?;
        written.push(p);
        let p = dir.join("summary.json");
        fs::write(&p, serde_json::to_string_pretty(&summarize(&out.rows))?)?;
        written.push(p);
    }
    if !out.qq.is_empty() {
        let p = dir.join("qq.json");
        fs::write(&p, serde_json::to_string_pretty(&out.qq)?)?;
        written.push(p);
    }
    if let Some(s) = &out.stability {
        let p = dir.join("stability.json");
        fs::write(&p, serde_json::to_string_pretty(s)?)?;
        written.push(p);
    }
    if let Some(f) = &out.fit {
        let p = dir.join("fit.json");
        fs::write(&p, f.to_json()?)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::eigenvalues;
    use crate::sim::pauli_expectation;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn quito() -> DeviceProfile {
        DeviceProfile::builtin("fake_quito").unwrap()
    }

    #[test]
    fn quito_fixture_parses() {
        let p = quito();
        assert_eq!(p.qubits.len(), 5);
        assert_eq!(p.qubits[0].t1_us, 59.70);
        assert_eq!(p.qubits[0].f0, 0.9882);
        let back = DeviceProfile::from_json(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        DeviceProfile::builtin("fake_lima_dense").unwrap();
        assert!(DeviceProfile::builtin("nope").is_err());
    }

    #[test]
    fn profile_validation() {
        let q = r#"{"f10_ghz": 5.0, "anharmonicity_mhz": -330.0, "t1_us": 50.0, "t2_us": 60.0, "f0": 0.98, "f1": 0.95}"#;
        let single = format!(r#"{{"name": "one", "qubits": [{q}], "edges": []}}"#);
        assert!(DeviceProfile::from_json(&single).unwrap().edges.is_empty());
        let bad = format!(r#"{{"name": "x", "qubits": [{q}, {q}], "edges": [{{"qubits": [0, 1], "cx_error": 1.5}}]}}"#);
        let msg = DeviceProfile::from_json(&bad).unwrap_err().to_string();
        assert!(msg.contains("edges[0].cx_error"), "{msg}");
        let dangling = format!(r#"{{"name": "x", "qubits": [{q}], "edges": [{{"qubits": [0, 3], "cx_error": 0.01}}]}}"#);
        assert!(DeviceProfile::from_json(&dangling).is_err());
        let unknown = format!(r#"{{"name": "x", "qubits": [{q}], "colour": 1}}"#);
        assert!(DeviceProfile::from_json(&unknown).is_err());
        let missing = r#"{"name": "x", "qubits": [{"f10_ghz": 5.0}]}"#;
        assert!(DeviceProfile::from_json(missing).unwrap_err().to_string().contains("anharmonicity_mhz"));
    }

    #[test]
    fn layout_search() {
        let p = quito();
        let chain = ising_trotter(4, 0.3, 1.0, 0.2, 1).unwrap();
        let l = find_layout(&p, &chain).unwrap();
        for w in l.windows(2) {
            assert!(p.edge_error(w[0], w[1]).is_some(), "{l:?}");
        }
        let mut star = PeriodicCircuit::new(4, vec![vec![Gate::Cnot(0, 1), Gate::Cnot(0, 2), Gate::Cnot(0, 3), Gate::Cnot(2, 3)]]).unwrap();
        assert!(matches!(find_layout(&p, &star), Err(Error::Uncoupled(..))));
        star.periods[0].pop();
        assert_eq!(find_layout(&p, &star).unwrap()[0], 1);
    }

    #[test]
    fn zero_error_profile_is_noiseless() {
        let mut p = quito();
        p.sq_error = Some(0.0);
        p.edges.iter_mut().for_each(|e| e.cx_error = 0.0);
        let c = ising_trotter(4, 0.3, 1.0, 0.2, 3).unwrap();
        assert!(profile_to_noise(&p, &c).unwrap().is_noiseless());
    }

    #[test]
    fn single_cnot_period_is_depolarizing() {
        let mut p = quito();
        p.sq_error = None;
        let c = PeriodicCircuit::new(2, vec![vec![Gate::Cnot(0, 1)]]).unwrap();
        let noise = profile_to_noise(&p, &c).unwrap();
        let NoiseChannel::Pauli(ch) = noise.forward(0).unwrap() else { panic!() };
        let e = p.edge_error(0, 1).unwrap();
        let ev = eigenvalues(ch);
        for j in 1..16 {
            assert_abs_diff_eq!(ev.get(j), 1.0 - 16.0 / 15.0 * e, epsilon = 1e-14);
        }
    }

    #[test]
    fn one_qubit_errors_give_product_channel() {
        let mut p = quito();
        p.edges.iter_mut().for_each(|e| e.cx_error = 0.0);
        p.sq_error = Some(0.002);
        let block = vec![Gate::H(0), Gate::Rx(1, 0.4), Gate::Ry(1, 1.1), Gate::Rz(0, 0.3)];
        let c = PeriodicCircuit::new(2, vec![block]).unwrap();
        let NoiseChannel::Pauli(ch) = profile_to_noise(&p, &c).unwrap().forward(0).unwrap().clone() else { panic!() };
        let ev = eigenvalues(&ch);
        let l1 = 1.0 - 4.0 / 3.0 * 0.002;
        for j in 0..16 {
            // H and Rz on qubit 0 (Rz is virtual), two noisy gates on qubit 1.
            let on0 = if j & 3 == 0 { 1.0 } else { l1 };
            let on1 = if j >> 2 == 0 { 1.0 } else { l1 * l1 };
            assert_abs_diff_eq!(ev.get(j), on0 * on1, epsilon = 1e-12);
        }
    }

    #[test]
    fn clifford_block_twirl_matches_gate_level_noise() {
        // Pauli noise commutes through Clifford gates into Pauli noise, so the
        // twirled period channel reproduces gate-level simulation of the
        // unfolded circuit exactly.
        let p = DeviceProfile::builtin("fake_lima_dense").unwrap();
        let block = vec![Gate::H(0), Gate::Cnot(0, 1), Gate::X(2), Gate::Cnot(1, 2), Gate::H(1)];
        let c = PeriodicCircuit::new(3, vec![block.clone(), block]).unwrap();
        let period = profile_to_noise(&p, &c).unwrap();
        let gates = NoiseSpec::noiseless(3).with_gate_noise(profile_gate_noise(&p, &[0, 1, 2]).unwrap());
        let a = run(&c, &period, 0, TwirlMode::Analytic).unwrap();
        let b = run(&c, &gates, 0, TwirlMode::Analytic).unwrap();
        for j in 0..64 {
            assert_abs_diff_eq!(pauli_expectation(&a, j), pauli_expectation(&b, j), epsilon = 1e-12);
        }
    }

    #[test]
    fn measurement_basis_rotations() {
        let rho = DensityMatrix::random(2, 5);
        for idx in 1..16 {
            let obs = PauliVector {
                terms: vec![(PauliString::from_index(2, idx), 1.0)],
            };
            let mut rot = rho.clone();
            for g in measurement_basis(&obs, 2).unwrap() {
                rot.apply_gate(&g);
            }
            let zmask = (0..2).filter(|&q| (idx >> (2 * q)) & 3 != 0).fold(0, |m, q| m | 2 << (2 * q));
            assert_abs_diff_eq!(pauli_expectation(&rot, zmask), expectation(&rho, &obs).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn sampled_expectation_is_unbiased_with_mitigation() {
        let rho = DensityMatrix::random(2, 9);
        let ro = ReadoutModel::new(vec![0.97, 0.95], vec![0.92, 0.9]).unwrap();
        let obs = PauliVector {
            terms: vec![(PauliString::from_label("XZ").unwrap(), 1.0)],
        };
        let exact = expectation(&rho, &obs).unwrap();
        let est = sampled_expectation(&rho, &obs, 2_000_000, &ro, 3).unwrap();
        assert!((est - exact).abs() < 5e-3, "{est} vs {exact}");
    }

    fn small_cfg(exp: Experiment) -> CampaignConfig {
        let mut cfg = CampaignConfig::new(exp);
        cfg.circuits = 2;
        cfg.starts = 8;
        cfg
    }

    #[test]
    fn steps_zero_returns_ideal() {
        let mut cfg = small_cfg(Experiment::Ising);
        cfg.depths = vec![0];
        let rows = run_ising_campaign(&cfg).unwrap();
        assert_eq!(rows.len(), 2 * Method::ALL.len());
        for r in &rows {
            assert_eq!(r.extrapolated, r.ideal, "{r:?}");
            assert_eq!(r.abs_error, 0.0);
        }
    }

    #[test]
    fn depolarizing_sanity_row() {
        let mut cfg = small_cfg(Experiment::Ising);
        cfg.depths = vec![4];
        cfg.noise = Some(NoiseSource::Depolarizing { p: 0.02 });
        cfg.methods = vec![Method::Exp, Method::Pzne];
        let rows = run_ising_campaign(&cfg).unwrap();
        for r in &rows {
            assert!(r.abs_error < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn grover_iteration_zero() {
        let mut cfg = small_cfg(Experiment::Grover);
        cfg.depths = vec![0];
        let (rows, stab) = run_grover_campaign(&cfg).unwrap();
        assert!(stab.is_none());
        for r in &rows {
            assert_abs_diff_eq!(r.extrapolated, 1.0 / 16.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn campaign_is_deterministic() {
        let mut cfg = small_cfg(Experiment::Random);
        cfg.depths = vec![2, 4];
        cfg.qq_samples = 2000;
        let a = run_campaign(&cfg).unwrap();
        let b = run_campaign(&cfg).unwrap();
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        write_rows_csv(&mut ca, &a.rows).unwrap();
        write_rows_csv(&mut cb, &b.rows).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.qq, b.qq);
        assert_eq!(a.rows.len(), 2 * 2 * Method::ALL.len());
        let order: Vec<_> = a.rows.iter().map(|r| (r.depth, r.seed, r.method)).collect();
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(order, sorted);
    }

    #[test]
    fn csv_roundtrip_and_columns() {
        let row = ResultRow {
            experiment: "ising".into(),
            seed: 7,
            depth: 4,
            method: Method::Hybrid,
            k_grid: vec![1, 3, 5],
            extrapolated: 0.123456789,
            ideal: 0.1,
            abs_error: 0.023456789000000002,
            metadata: BTreeMap::new(),
        };
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, std::slice::from_ref(&row)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("experiment,seed,depth,method,k_grid,extrapolated,ideal,abs_error\n"));
        let back = read_rows_csv(&buf[..]).unwrap();
        assert_eq!(back, vec![row]);
        assert_abs_diff_eq!(back[0].abs_error, (back[0].extrapolated - back[0].ideal).abs(), epsilon = 1e-15);
    }

    #[test]
    fn box_stats_of_one_to_nine() {
        let v: Vec<f64> = (1..=9).map(f64::from).collect();
        let b = BoxStats::from_values(&v).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (3.0, 5.0, 7.0));
        assert_eq!((b.whisker_low, b.whisker_high), (1.0, 9.0));
        assert!(b.outliers.is_empty());
        let b = BoxStats::from_values(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!(b.whisker_high, 4.0);
    }

    #[test]
    fn mae_of_constant_errors() {
        let rows: Vec<ResultRow> = (0..4)
            .map(|s| ResultRow {
                experiment: "ising".into(),
                seed: s,
                depth: 2,
                method: Method::Exp,
                k_grid: vec![1, 3, 5],
                extrapolated: 0.5 + 0.25,
                ideal: 0.5,
                abs_error: 0.25,
                metadata: BTreeMap::new(),
            })
            .collect();
        assert_eq!(mae_by_method(&rows, "ising", 2)[&Method::Exp], 0.25);
    }

    #[test]
    fn config_validation() {
        assert!(CampaignConfig::from_json(r#"{"experiment": "ising", "depths": [2, 4]}"#).unwrap().validate().is_ok());
        for bad in [
            r#"{"experiment": "ising", "folds": [1, 2, 3]}"#,
            r#"{"experiment": "ising", "folds_hybrid": [1, 3, 5]}"#,
            r#"{"experiment": "random", "depths": [3]}"#,
            r#"{"experiment": "ising", "circuits": 0}"#,
            r#"{"experiment": "ising", "noise": {"kind": "depolarizing", "p": 2.0}}"#,
            r#"{"experiment": "fit-file"}"#,
        ] {
            assert!(CampaignConfig::from_json(bad).unwrap().validate().is_err(), "{bad}");
        }
        assert!(matches!(CampaignConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
        let g = CampaignConfig::from_json(r#"{"experiment": "grover", "marked": "101"}"#).unwrap();
        assert_eq!(g.qubits, 4);
        assert_eq!(g.depths, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn fit_file_parsing() {
        let text = "k,y,sigma\n1,0.9,0.01\n3,0.75,\n5,0.62,0.01\n";
        let d = read_fit_file(text.as_bytes()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.points[1].sigma, None);
        assert!(read_fit_file("a,b\n1,2\n".as_bytes()).is_err());
        assert!(read_fit_file("k,y\n1,x\n".as_bytes()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn abs_error_recomputable(seed in 0u64..1000) {
            let mut cfg = small_cfg(Experiment::Ising);
            cfg.circuits = 1;
            cfg.depths = vec![2];
            cfg.seed = seed;
            cfg.methods = vec![Method::Exp, Method::Iczne];
            for r in run_ising_campaign(&cfg).unwrap() {
                prop_assert!(r.failed() || r.abs_error == (r.extrapolated - r.ideal).abs());
            }
        }
    }
}
