//! Reproducible Monte Carlo over trajectories.
//!
//! Trajectory `i` draws from ChaCha20 seeded with the master seed and
//! switched to stream `i`, so streams never overlap and a trajectory is the
//! same whichever worker runs it. Trajectories are grouped in fixed blocks
//! of [`BLOCK_SIZE`], blocks run in parallel and their accumulators are
//! merged in block order, which makes every output independent of the
//! worker count.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::diffusive::{DiffusiveStepper, NormLedger};
use crate::error::{Error, Result};
use crate::kernels::RateKernel;
use crate::lattice::{observables, shift_axis0, DensityMatrix, Lattice, WaveFunction};
use crate::master::DENSE_LIMIT;
use crate::pdp::{JumpEvent, PdpStepper, Unfolding};
use crate::propagator::{DriftStepper, ExternalPotential, StepSpec};

/// Trajectories per work unit.
pub const BLOCK_SIZE: usize = 16;
/// Largest tolerated fraction of aborted trajectories.
pub const ABORT_LIMIT: f64 = 0.01;
/// Bootstrap resamples used for trace-distance errors.
pub const BOOTSTRAP_RESAMPLES: usize = 64;

/// Largest coherence vector with a full covariance; beyond it correlations
/// between sites are ignored in the coherence error.
const FULL_COVARIANCE_LIMIT: usize = 512;

const C0: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Unraveling {
    /// Jumps labelled by dual modes.
    Pdp,
    /// Jumps labelled by sites.
    PdpB,
    Diffusive,
    /// Deterministic Schrödinger–Newton flow, no stochastic terms.
    None,
}

impl Unraveling {
    pub fn name(self) -> &'static str {
        match self {
            Unraveling::Pdp => "pdp",
            Unraveling::PdpB => "pdp_B",
            Unraveling::Diffusive => "diffusive",
            Unraveling::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "pdp" => Unraveling::Pdp,
            "pdp_B" => Unraveling::PdpB,
            "diffusive" => Unraveling::Diffusive,
            "none" => Unraveling::None,
            _ => return None,
        })
    }
}

/// Counter-based stream splitting of one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedPlan {
    pub master_seed: u64,
}

impl SeedPlan {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// The generator of trajectory `i`.
    pub fn stream(&self, i: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(i);
        rng
    }

    /// A stream reserved for post-processing (bootstrap resampling).
    pub fn auxiliary(&self) -> ChaCha20Rng {
        self.stream(u64::MAX)
    }
}

/// Streaming mean and covariance (Welford, merged with Chan's formula).
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub count: f64,
    pub mean: DVector<f64>,
    pub m2: DMatrix<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    /// Means and variances only; `m2` is then a single column.
    pub fn diagonal(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, 1),
        }
    }

    fn is_diagonal(&self) -> bool {
        self.m2.ncols() == 1 && self.mean.len() != 1
    }

    pub fn push(&mut self, x: &DVector<f64>) {
        self.count += 1.0;
        let delta = x - &self.mean;
        self.mean += &delta / self.count;
        let delta2 = x - &self.mean;
        if self.is_diagonal() {
            self.m2 += delta.component_mul(&delta2);
        } else {
            self.m2.ger(1.0, &delta, &delta2, 1.0);
        }
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = other.clone();
            return;
        }
        let n = self.count + other.count;
        let delta = &other.mean - &self.mean;
        self.mean += &delta * (other.count / n);
        self.m2 += &other.m2;
        let f = self.count * other.count / n;
        if self.is_diagonal() {
            self.m2 += delta.component_mul(&delta) * f;
        } else {
            self.m2.ger(f, &delta, &delta, 1.0);
        }
        self.count = n;
    }

    /// Sample covariance matrix (diagonal when only variances are kept).
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.mean.len();
        if self.count < 2.0 {
            return DMatrix::zeros(n, n);
        }
        if self.is_diagonal() {
            return DMatrix::from_diagonal(&(self.m2.column(0) / (self.count - 1.0)));
        }
        &self.m2 / (self.count - 1.0)
    }

    /// Standard error of the mean of component `i`.
    pub fn standard_error(&self, i: usize) -> f64 {
        if self.count < 2.0 {
            return 0.0;
        }
        let m2 = if self.is_diagonal() { self.m2[(i, 0)] } else { self.m2[(i, i)] };
        (m2.max(0.0) / (self.count - 1.0) / self.count).sqrt()
    }

    /// `Var(g·x)` of a linear combination, per sample.
    pub fn variance_along(&self, g: &DVector<f64>) -> f64 {
        if self.count < 2.0 {
            return 0.0;
        }
        let v = if self.is_diagonal() {
            g.component_mul(g).dot(&self.m2.column(0))
        } else {
            (g.transpose() * &self.m2 * g)[(0, 0)]
        };
        v / (self.count - 1.0)
    }
}

/// Scalar observables accumulated per trajectory, in this order.
const SCALARS: usize = 6;
const NORM: usize = 0;
const X: usize = 1;
const P: usize = 2;
const P2: usize = 3;
const JUMPS: usize = 4;
/// `‖|ψ⟩⟨ψ|‖_F²` in operator units.
const FROB: usize = 5;

/// Accumulated data for one output time.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleAccumulator {
    pub lattice: Lattice,
    pub coherence_offset: usize,
    /// `Σ |ψ⟩⟨ψ|` when the basis is small enough.
    pub rho_sum: Option<DMatrix<Complex64>>,
    pub scalars: Moments,
    /// Real and imaginary parts of `ψ(x) ψ*(x + s₀)`.
    pub coherence: Moments,
}

impl EnsembleAccumulator {
    pub fn new(lattice: Lattice, coherence_offset: usize, record_rho: bool) -> Self {
        let n = lattice.len();
        Self {
            lattice,
            coherence_offset,
            rho_sum: record_rho.then(|| DMatrix::from_element(n, n, C0)),
            scalars: Moments::new(SCALARS),
            coherence: if 2 * n <= FULL_COVARIANCE_LIMIT {
                Moments::new(2 * n)
            } else {
                Moments::diagonal(2 * n)
            },
        }
    }

    pub fn count(&self) -> f64 {
        self.scalars.count
    }

    /// Add one trajectory state. `psi` is the state to average (normalized
    /// for jump unravelings, raw for the diffusive one).
    pub fn push(&mut self, psi: &WaveFunction, jumps: usize) {
        let lat = self.lattice;
        let a = psi.amplitudes();
        let norm2 = psi.norm2();
        let o = observables(psi);
        let cv = lat.cell_volume();
        let s = DVector::from_vec(vec![
            norm2,
            norm2 * o.x_mean,
            norm2 * o.p_mean,
            norm2 * o.p2_mean,
            jumps as f64,
            norm2 * norm2,
        ]);
        self.scalars.push(&s);
        let n = lat.len();
        let mut z = DVector::zeros(2 * n);
        for x in 0..n {
            let c = a[x] * a[shift_axis0(&lat, x, self.coherence_offset)].conj() * cv;
            z[x] = c.re;
            z[n + x] = c.im;
        }
        self.coherence.push(&z);
        if let Some(r) = &mut self.rho_sum {
            for j in 0..n {
                let cj = a[j].conj();
                for i in 0..n {
                    r[(i, j)] += a[i] * cj;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &EnsembleAccumulator) {
        self.scalars.merge(&other.scalars);
        self.coherence.merge(&other.coherence);
        if let (Some(a), Some(b)) = (&mut self.rho_sum, &other.rho_sum) {
            *a += b;
        }
    }

    /// `ρ̄ = Σ|ψ⟩⟨ψ| / M`.
    pub fn mean_rho(&self) -> Option<DensityMatrix> {
        self.rho_sum.as_ref().map(|r| DensityMatrix {
            lattice: self.lattice,
            entries: r / Complex64::new(self.count().max(1.0), 0.0),
        })
    }

    /// `Σ_x |ρ̄(x, x + s₀)| Δx^D` and its delta-method standard error.
    pub fn coherence_estimate(&self) -> (f64, f64) {
        let n = self.lattice.len();
        let m = &self.coherence.mean;
        let mut value = 0.0;
        let mut grad = DVector::zeros(2 * n);
        for x in 0..n {
            let (re, im) = (m[x], m[n + x]);
            let abs = re.hypot(im);
            value += abs;
            if abs > 0.0 {
                grad[x] = re / abs;
                grad[n + x] = im / abs;
            }
        }
        let count = self.coherence.count;
        if count < 2.0 {
            return (value, 0.0);
        }
        let var = self.coherence.variance_along(&grad);
        (value, (var.max(0.0) / count).sqrt())
    }

    /// RMS size of the Monte Carlo error in trace norm, bounded through the
    /// Frobenius norm: `½ √dim · √(Σ Var ρ_ij / M)`.
    pub fn trace_noise_bound(&self) -> Option<f64> {
        let rho = self.mean_rho()?;
        let count = self.count();
        if count < 2.0 {
            return Some(0.0);
        }
        let op = rho.operator();
        let mean_f2: f64 = op.iter().map(|c| c.norm_sqr()).sum();
        let var = (self.scalars.mean[FROB] - mean_f2).max(0.0) * count / (count - 1.0);
        Some(0.5 * (self.lattice.len() as f64).sqrt() * (var / count).sqrt())
    }
}

/// One row of the observable table.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservableRow {
    pub t: f64,
    pub norm_mean: f64,
    pub norm_se: f64,
    pub x_mean: f64,
    pub x_se: f64,
    pub p_mean: f64,
    pub p_se: f64,
    pub p2_mean: f64,
    pub p2_se: f64,
    pub coherence_s0: f64,
    pub coherence_s0_se: f64,
    pub jump_count_mean: f64,
}

impl ObservableRow {
    pub fn from_accumulator(t: f64, acc: &EnsembleAccumulator) -> Self {
        let s = &acc.scalars;
        let (c, c_se) = acc.coherence_estimate();
        Self {
            t,
            norm_mean: s.mean[NORM],
            norm_se: s.standard_error(NORM),
            x_mean: s.mean[X],
            x_se: s.standard_error(X),
            p_mean: s.mean[P],
            p_se: s.standard_error(P),
            p2_mean: s.mean[P2],
            p2_se: s.standard_error(P2),
            coherence_s0: c,
            coherence_s0_se: c_se,
            jump_count_mean: s.mean[JUMPS],
        }
    }

    /// Row for an exact density matrix (zero standard errors).
    pub fn from_density(t: f64, rho: &DensityMatrix, coherence_offset: usize) -> Self {
        let o = rho.observables();
        let tr = o.norm2;
        Self {
            t,
            norm_mean: tr,
            norm_se: 0.0,
            x_mean: o.x_mean * tr,
            x_se: 0.0,
            p_mean: o.p_mean * tr,
            p_se: 0.0,
            p2_mean: o.p2_mean * tr,
            p2_se: 0.0,
            coherence_s0: o.coherence[coherence_offset] * tr,
            coherence_s0_se: 0.0,
            jump_count_mean: 0.0,
        }
    }
}

/// Initial condition of an ensemble: a single pure state, or a mixture
/// whose members are assigned to trajectories deterministically.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialState {
    Pure(WaveFunction),
    Mixture(Vec<(f64, WaveFunction)>),
}

impl InitialState {
    pub fn lattice(&self) -> &Lattice {
        match self {
            InitialState::Pure(p) => p.lattice(),
            InitialState::Mixture(m) => m[0].1.lattice(),
        }
    }

    /// Member of trajectory `i` out of `m`: systematic (stratified)
    /// assignment by weight.
    pub fn member(&self, i: usize, m: usize) -> &WaveFunction {
        match self {
            InitialState::Pure(p) => p,
            InitialState::Mixture(members) => {
                let total: f64 = members.iter().map(|(w, _)| w).sum();
                let u = (i as f64 + 0.5) / m as f64 * total;
                let mut acc = 0.0;
                for (w, psi) in members {
                    acc += w;
                    if u < acc {
                        return psi;
                    }
                }
                &members[members.len() - 1].1
            }
        }
    }

    /// Dense `ρ₀`.
    pub fn density(&self) -> Result<DensityMatrix> {
        match self {
            InitialState::Pure(p) => Ok(DensityMatrix::from_pure(&p.normalized())),
            InitialState::Mixture(m) => {
                let total: f64 = m.iter().map(|(w, _)| w).sum();
                let scaled: Vec<_> = m.iter().map(|(w, p)| (w / total, p.clone())).collect();
                crate::master::mixture(&scaled)
            }
        }
    }
}

/// Everything needed to run an ensemble.
#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub masses: Vec<f64>,
    pub kernel: RateKernel,
    pub potential: ExternalPotential,
    pub step: StepSpec,
    pub unraveling: Unraveling,
    pub initial: InitialState,
    /// Step counts at which to record; the last one ends the run.
    pub output_steps: Vec<usize>,
    pub trajectories: usize,
    pub seeds: SeedPlan,
    /// Coherence offset `s₀` in sites along the first axis.
    pub coherence_offset: usize,
    pub log_jumps: bool,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl EnsembleSpec {
    pub fn lattice(&self) -> &Lattice {
        self.initial.lattice()
    }

    fn records_rho(&self) -> bool {
        self.lattice().len() <= DENSE_LIMIT
    }
}

/// Aggregated ensemble output.
#[derive(Clone, Debug)]
pub struct EnsembleResult {
    pub unraveling: Unraveling,
    pub times: Vec<f64>,
    pub rows: Vec<ObservableRow>,
    pub accumulators: Vec<EnsembleAccumulator>,
    /// Averaged state per output time, for small bases.
    pub rho: Vec<DensityMatrix>,
    /// Final states of completed trajectories, in index order, as averaged.
    pub final_states: Vec<Vec<Complex64>>,
    /// `(trajectory index, reason)` of aborted trajectories.
    pub aborted: Vec<(usize, String)>,
    pub jumps: Vec<(usize, JumpEvent)>,
    pub completed: usize,
}

impl EnsembleResult {
    pub fn final_rho(&self) -> Option<&DensityMatrix> {
        self.rho.last()
    }

    /// Bootstrap estimate of the RMS trace-distance error of the final
    /// averaged state.
    pub fn bootstrap_se(&self, seeds: &SeedPlan) -> Result<f64> {
        let lat = self.final_rho().ok_or(Error::BasisTooLarge {
            dim: self.accumulators[0].lattice.len(),
            limit: DENSE_LIMIT,
        })?.lattice;
        bootstrap_trace_error(&lat, &self.final_states, BOOTSTRAP_RESAMPLES, &mut seeds.auxiliary())
    }
}

enum Runner {
    Pdp(PdpStepper),
    Diffusive(DiffusiveStepper),
    Drift(DriftStepper),
}

impl Runner {
    fn new(spec: &EnsembleSpec) -> Result<Self> {
        let lat = *spec.lattice();
        let drift = DriftStepper::new(lat, &spec.masses, &spec.kernel, &spec.potential, spec.step)?;
        Ok(match spec.unraveling {
            Unraveling::Pdp => Runner::Pdp(PdpStepper::new(drift, Unfolding::Momentum)),
            Unraveling::PdpB => Runner::Pdp(PdpStepper::new(drift, Unfolding::Position)),
            Unraveling::Diffusive => Runner::Diffusive(DiffusiveStepper::new(drift)?),
            Unraveling::None => Runner::Drift(drift),
        })
    }
}

/// Output of one trajectory.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// State at each output step (normalized for jump unravelings).
    pub states: Vec<WaveFunction>,
    /// Jumps so far at each output step.
    pub jump_counts: Vec<usize>,
    pub jumps: Vec<JumpEvent>,
}

fn run_one(spec: &EnsembleSpec, runner: &Runner, i: usize) -> Result<Trajectory> {
    let mut rng = spec.seeds.stream(i as u64);
    let mut psi = spec.initial.member(i, spec.trajectories).normalized();
    let dt = spec.step.dt;
    let mut out = Trajectory {
        states: Vec::with_capacity(spec.output_steps.len()),
        jump_counts: Vec::with_capacity(spec.output_steps.len()),
        jumps: Vec::new(),
    };
    let mut ledger = NormLedger::default();
    let mut next = spec.output_steps.iter().peekable();
    let last = spec.output_steps.last().copied().unwrap_or(0);
    for step in 0..=last {
        if step > 0 {
            let t = (step - 1) as f64 * dt;
            match runner {
                Runner::Pdp(s) => {
                    if let Some(e) = s.step(&mut psi, t, &mut rng)?.event {
                        out.jumps.push(e);
                    }
                }
                Runner::Diffusive(s) => s.step(&mut psi, &mut ledger, &mut rng)?,
                Runner::Drift(s) => s.step(&mut psi)?,
            }
        }
        while next.peek() == Some(&&step) {
            next.next();
            out.states.push(psi.clone());
            out.jump_counts.push(out.jumps.len());
        }
    }
    Ok(out)
}

/// Run one trajectory of `spec` with index `i`.
pub fn run_trajectory(spec: &EnsembleSpec, i: usize) -> Result<Trajectory> {
    let runner = Runner::new(spec)?;
    run_one(spec, &runner, i)
}

struct Block {
    acc: Vec<EnsembleAccumulator>,
    finals: Vec<Vec<Complex64>>,
    aborted: Vec<(usize, String)>,
    jumps: Vec<(usize, JumpEvent)>,
}

fn run_block(spec: &EnsembleSpec, runner: &Runner, block: usize) -> Block {
    let lat = *spec.lattice();
    let record = spec.records_rho();
    let mut b = Block {
        acc: spec
            .output_steps
            .iter()
            .map(|_| EnsembleAccumulator::new(lat, spec.coherence_offset, record))
            .collect(),
        finals: Vec::new(),
        aborted: Vec::new(),
        jumps: Vec::new(),
    };
    let start = block * BLOCK_SIZE;
    let end = (start + BLOCK_SIZE).min(spec.trajectories);
    for i in start..end {
        match run_one(spec, runner, i) {
            Ok(tr) => {
                for ((acc, psi), n) in b.acc.iter_mut().zip(&tr.states).zip(&tr.jump_counts) {
                    acc.push(psi, *n);
                }
                if record {
                    if let Some(last) = tr.states.last() {
                        b.finals.push(last.amplitudes().to_vec());
                    }
                }
                if spec.log_jumps {
                    b.jumps.extend(tr.jumps.into_iter().map(|e| (i, e)));
                }
            }
            Err(e) => {
                log::debug!("trajectory {i} aborted: {e}");
                b.aborted.push((i, e.to_string()));
            }
        }
    }
    b
}

fn validate(spec: &EnsembleSpec) -> Result<()> {
    if spec.trajectories < 2 {
        return Err(Error::StepGuard(format!(
            "an ensemble needs at least 2 trajectories (got {})",
            spec.trajectories
        )));
    }
    if spec.output_steps.is_empty() || spec.output_steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::StepGuard("output steps must be non-empty and increasing".into()));
    }
    if let InitialState::Mixture(m) = &spec.initial {
        if m.is_empty() || m.iter().any(|(w, _)| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidLattice("mixture weights must be positive".into()));
        }
        for (_, p) in m {
            spec.lattice().check_same(p.lattice())?;
        }
    }
    if spec.coherence_offset >= spec.lattice().points() {
        return Err(Error::InvalidLattice(format!(
            "coherence offset {} is not below {} points",
            spec.coherence_offset,
            spec.lattice().points()
        )));
    }
    Ok(())
}

/// Run `spec.trajectories` trajectories and average them.
pub fn run_ensemble(spec: &EnsembleSpec) -> Result<EnsembleResult> {
    validate(spec)?;
    let runner = Runner::new(spec)?;
    let blocks = spec.trajectories.div_ceil(BLOCK_SIZE);
    let work = || -> Vec<Block> {
        (0..blocks)
            .into_par_iter()
            .map(|b| run_block(spec, &runner, b))
            .collect()
    };
    let results = match spec.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::StepGuard(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let lat = *spec.lattice();
    let record = spec.records_rho();
    let mut acc: Vec<EnsembleAccumulator> = spec
        .output_steps
        .iter()
        .map(|_| EnsembleAccumulator::new(lat, spec.coherence_offset, record))
        .collect();
    let mut final_states = Vec::new();
    let mut aborted = Vec::new();
    let mut jumps = Vec::new();
    for b in results {
        for (a, o) in acc.iter_mut().zip(&b.acc) {
            a.merge(o);
        }
        final_states.extend(b.finals);
        aborted.extend(b.aborted);
        jumps.extend(b.jumps);
    }
    if aborted.len() as f64 > ABORT_LIMIT * spec.trajectories as f64 {
        return Err(Error::TooManyAborts {
            aborted: aborted.len(),
            total: spec.trajectories,
        });
    }
    let times: Vec<f64> = spec.output_steps.iter().map(|&s| s as f64 * spec.step.dt).collect();
    let rows = times
        .iter()
        .zip(&acc)
        .map(|(&t, a)| ObservableRow::from_accumulator(t, a))
        .collect();
    let rho = acc.iter().filter_map(|a| a.mean_rho()).collect();
    Ok(EnsembleResult {
        unraveling: spec.unraveling,
        times,
        rows,
        completed: spec.trajectories - aborted.len(),
        accumulators: acc,
        rho,
        final_states,
        aborted,
        jumps,
    })
}

/// `½ Σ |eig(ρ₁ - ρ₂)|` of the operators `ρ·Δx^D`.
pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    a.lattice.check_same(&b.lattice)?;
    let n = a.lattice.len();
    if n > DENSE_LIMIT {
        return Err(Error::BasisTooLarge { dim: n, limit: DENSE_LIMIT });
    }
    let diff = DensityMatrix {
        lattice: a.lattice,
        entries: &a.entries - &b.entries,
    };
    Ok(0.5 * diff.eigenvalues().iter().map(|e| e.abs()).sum::<f64>())
}

fn mean_of(lattice: &Lattice, states: &[Vec<Complex64>], picks: impl Iterator<Item = usize>) -> DensityMatrix {
    let n = lattice.len();
    let mut r = DMatrix::from_element(n, n, C0);
    let mut count = 0.0;
    for i in picks {
        let a = &states[i];
        for j in 0..n {
            let cj = a[j].conj();
            for k in 0..n {
                r[(k, j)] += a[k] * cj;
            }
        }
        count += 1.0;
    }
    DensityMatrix {
        lattice: *lattice,
        entries: r / Complex64::new(count, 0.0),
    }
}

/// RMS trace distance between bootstrap resamples of the averaged state and
/// the full-sample average.
pub fn bootstrap_trace_error<R: Rng + ?Sized>(
    lattice: &Lattice,
    states: &[Vec<Complex64>],
    resamples: usize,
    rng: &mut R,
) -> Result<f64> {
    let m = states.len();
    if m < 2 {
        return Ok(0.0);
    }
    let full = mean_of(lattice, states, 0..m);
    let mut sum = 0.0;
    for _ in 0..resamples {
        let picks: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
        let b = mean_of(lattice, states, picks.into_iter());
        sum += trace_distance(&b, &full)?.powi(2);
    }
    Ok((sum / resamples as f64).sqrt())
}

/// Report of [`decomposition_invariance_test`].
#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceReport {
    pub distance: f64,
    pub se_first: f64,
    pub se_second: f64,
    /// `√(se₁² + se₂²)`.
    pub combined_se: f64,
    /// `distance ≤ 3·combined_se`.
    pub consistent: bool,
    /// Distance between the two initial mixtures.
    pub initial_distance: f64,
}

/// Run two ensembles started from different decompositions of the same
/// `ρ₀` with independent seeds and compare their averaged final states.
pub fn decomposition_invariance_test(
    base: &EnsembleSpec,
    first: Vec<(f64, WaveFunction)>,
    second: Vec<(f64, WaveFunction)>,
    seeds: (SeedPlan, SeedPlan),
) -> Result<InvarianceReport> {
    let a = InitialState::Mixture(first);
    let b = InitialState::Mixture(second);
    let (ra, rb) = (a.density()?, b.density()?);
    let initial_distance = trace_distance(&ra, &rb)?;
    if initial_distance > 1e-10 {
        return Err(Error::MixtureMismatch {
            distance: initial_distance,
        });
    }
    let mut spec_a = base.clone();
    spec_a.initial = a;
    spec_a.seeds = seeds.0;
    let mut spec_b = base.clone();
    spec_b.initial = b;
    spec_b.seeds = seeds.1;
    let res_a = run_ensemble(&spec_a)?;
    let res_b = run_ensemble(&spec_b)?;
    let rho_a = res_a.final_rho().expect("dense basis");
    let rho_b = res_b.final_rho().expect("dense basis");
    let distance = trace_distance(rho_a, rho_b)?;
    let se_first = res_a.bootstrap_se(&seeds.0)?;
    let se_second = res_b.bootstrap_se(&seeds.1)?;
    let combined_se = se_first.hypot(se_second);
    Ok(InvarianceReport {
        distance,
        se_first,
        se_second,
        combined_se,
        consistent: distance <= 3.0 * combined_se,
        initial_distance,
    })
}
