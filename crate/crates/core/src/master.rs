//! Dense integrator for the averaged master equation
//!
//! `dρ/dt = -i[H, ρ] + Σ_j r_j (M_j ρ M_j† - ½{M_j†M_j, ρ})`
//!
//! over configuration space. Every jump matrix is diagonal in position, so
//! the dissipator acts entrywise: `ρ(X, X') ↦ D(X, X') ρ(X, X')` with
//! `D(X, X') = Σ_j r_j [M_j(X) M_j(X')* - ½|M_j(X)|² - ½|M_j(X')|²]`.
//! The Hamiltonian carries the kinetic and external terms only; the
//! self-gravity potential is absent from the averaged dynamics.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kernels::{DpMassProfile, RateKernel};
use crate::lattice::{DensityMatrix, KickTable, Lattice, Observables, WaveFunction};
use crate::propagator::{apply_kinetic, kinetic_table, ExternalPotential};

/// Largest configuration-space dimension handled densely.
pub const DENSE_LIMIT: usize = 64;
/// `dt·‖𝓛‖` bound for the RK4 integrator.
pub const RK4_STABILITY: f64 = 2.5;
/// Largest tolerated `|tr ρ(t) - tr ρ(0)|`.
pub const TRACE_TOLERANCE: f64 = 1e-6;

const C0: Complex64 = Complex64::new(0.0, 0.0);

/// One dissipative channel: rate `r_j` and the diagonal of `M_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct KickChannel {
    pub mode: usize,
    pub rate: f64,
    pub jump: Vec<Complex64>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    lattice: Lattice,
    hamiltonian: DMatrix<Complex64>,
    channels: Vec<KickChannel>,
    dissipator: DMatrix<f64>,
}

fn check_dense(lattice: &Lattice) -> Result<()> {
    if lattice.len() > DENSE_LIMIT {
        return Err(Error::BasisTooLarge {
            dim: lattice.len(),
            limit: DENSE_LIMIT,
        });
    }
    Ok(())
}

/// Dense `T + V` over the configuration basis.
pub fn hamiltonian(
    lattice: &Lattice,
    masses: &[f64],
    potential: &ExternalPotential,
) -> Result<DMatrix<Complex64>> {
    check_dense(lattice)?;
    if masses.len() != lattice.particles() || masses.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
        return Err(Error::InvalidLattice(format!(
            "the Hamiltonian needs {} positive masses, got {masses:?}",
            lattice.particles()
        )));
    }
    let n = lattice.len();
    let kinetic = kinetic_table(lattice, masses);
    let v = potential.evaluate(lattice, masses)?;
    let mut h = DMatrix::from_element(n, n, C0);
    let mut e = vec![C0; n];
    for c in 0..n {
        e.fill(C0);
        e[c] = Complex64::new(1.0, 0.0);
        let col = apply_kinetic(lattice, &kinetic, &e);
        for (r, x) in col.into_iter().enumerate() {
            h[(r, c)] = x;
        }
        h[(c, c)] += v[c];
    }
    // symmetrize away FFT roundoff
    let h = (&h + h.adjoint()) * Complex64::new(0.5, 0.0);
    Ok(h)
}

/// The kick channels of a kernel for particles with mass fractions
/// `weights`.
pub fn kick_channels(lattice: &Lattice, weights: &[f64], kernel: &RateKernel) -> Result<Vec<KickChannel>> {
    check_dense(lattice)?;
    lattice.check_site_geometry(kernel.lattice())?;
    let kicks = KickTable::new(lattice);
    Ok(kernel
        .active_modes()
        .iter()
        .map(|&j| KickChannel {
            mode: j,
            rate: kernel.rate(j),
            jump: kicks.weighted_row(weights, j),
        })
        .collect())
}

/// Entrywise dissipator factor `D(X, X')` of a set of channels.
pub fn kick_dissipator(lattice: &Lattice, channels: &[KickChannel]) -> DMatrix<f64> {
    let n = lattice.len();
    DMatrix::from_fn(n, n, |x, y| {
        channels
            .iter()
            .map(|c| {
                let (a, b) = (c.jump[x], c.jump[y]);
                c.rate * ((a * b.conj()).re - 0.5 * a.norm_sqr() - 0.5 * b.norm_sqr())
            })
            .sum()
    })
}

/// Entrywise dissipator of the double-commutator form
///
/// `-½ Σ_{n,ℓ} Σ_{s₁,s₂} Δx^{2d} W(s₁-s₂) [u_n(s₁), [u_ℓ(s₂), ρ]]`
///
/// built in real space from the smeared densities `u_n(s) = w_n f(s - r̂_n)`,
/// `f(r) = L^{-d} Σ_k f̃(k) e^{ik·r}`, and the spectral inverse-square kernel
/// `W(r) = Σ_{k≠0} Δk^d Λ₀ k⁻² e^{ik·r}`. With `cross_terms = false` only
/// the `n = ℓ` terms are kept.
pub fn dp_dissipator(
    lattice: &Lattice,
    weights: &[f64],
    profile: &DpMassProfile,
    lambda0: f64,
    cross_terms: bool,
) -> Result<DMatrix<f64>> {
    check_dense(lattice)?;
    let d = lattice.spatial_dim();
    let sites = lattice.sites();
    let dx = lattice.spacing();
    let ld = lattice.length().powi(d as i32);
    let dk = lattice.mode_volume();
    // offsets in site-index space, periodic per axis
    let offset_fn = |coef: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (0..sites)
            .map(|delta| {
                (0..sites)
                    .map(|j| {
                        let k = lattice.mode_vector(j);
                        let phase: f64 = (0..d)
                            .map(|a| k[a] * lattice.axis_index(delta, a, d) as f64 * dx)
                            .sum();
                        coef(j) * phase.cos()
                    })
                    .sum()
            })
            .collect()
    };
    let f_off = offset_fn(&|j| profile.transform(lattice.mode_k2(j).sqrt()) / ld);
    let w_off = offset_fn(&|j| {
        let k2 = lattice.mode_k2(j);
        if j == 0 {
            0.0
        } else {
            dk * lambda0 / k2
        }
    });
    let n_axis = lattice.points();
    let diff = |a: usize, b: usize| -> usize {
        // site index of r_a - r_b
        let mut out = 0;
        for ax in 0..d {
            let ia = lattice.axis_index(a, ax, d);
            let ib = lattice.axis_index(b, ax, d);
            out = out * n_axis + (ia + n_axis - ib) % n_axis;
        }
        out
    };
    let w_mat = DMatrix::from_fn(sites, sites, |s1, s2| w_off[diff(s1, s2)]);
    let particles = lattice.particles();
    let dim = lattice.len();
    // u[X][n] as a vector over sites
    let dens: Vec<Vec<Vec<f64>>> = (0..dim)
        .map(|x| {
            (0..particles)
                .map(|p| {
                    let site = lattice.particle_site(x, p);
                    (0..sites).map(|s| weights[p] * f_off[diff(s, site)]).collect()
                })
                .collect()
        })
        .collect();
    let vol2 = lattice.site_volume().powi(2);
    let mut out = DMatrix::zeros(dim, dim);
    let mut du = vec![vec![0.0; sites]; particles];
    let mut wdu = vec![vec![0.0; sites]; particles];
    for x in 0..dim {
        for y in 0..dim {
            for p in 0..particles {
                for s in 0..sites {
                    du[p][s] = dens[x][p][s] - dens[y][p][s];
                }
                for s1 in 0..sites {
                    wdu[p][s1] = (0..sites).map(|s2| w_mat[(s1, s2)] * du[p][s2]).sum();
                }
            }
            let mut acc = 0.0;
            for (n, dn) in du.iter().enumerate() {
                for (l, wl) in wdu.iter().enumerate() {
                    if n != l && !cross_terms {
                        continue;
                    }
                    acc += dn.iter().zip(wl).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            out[(x, y)] = -0.5 * vol2 * acc;
        }
    }
    Ok(out)
}

impl Generator {
    /// The averaged generator of the stochastic dynamics with the given
    /// kernel and external potential.
    pub fn new(
        lattice: &Lattice,
        masses: &[f64],
        kernel: &RateKernel,
        potential: &ExternalPotential,
    ) -> Result<Self> {
        let h = hamiltonian(lattice, masses, potential)?;
        let total: f64 = masses.iter().sum();
        let weights: Vec<f64> = masses.iter().map(|m| m / total).collect();
        let channels = kick_channels(lattice, &weights, kernel)?;
        let dissipator = kick_dissipator(lattice, &channels);
        Ok(Self {
            lattice: *lattice,
            hamiltonian: h,
            channels,
            dissipator,
        })
    }

    /// Generator from an explicit Hamiltonian and entrywise dissipator.
    pub fn from_parts(lattice: &Lattice, hamiltonian: DMatrix<Complex64>, dissipator: DMatrix<f64>) -> Result<Self> {
        check_dense(lattice)?;
        let n = lattice.len();
        if hamiltonian.shape() != (n, n) || dissipator.shape() != (n, n) {
            return Err(Error::LatticeMismatch(format!(
                "generator parts must be {n}×{n}"
            )));
        }
        Ok(Self {
            lattice: *lattice,
            hamiltonian,
            channels: Vec::new(),
            dissipator,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn hamiltonian(&self) -> &DMatrix<Complex64> {
        &self.hamiltonian
    }

    /// Kick channels; empty for generators assembled from parts.
    pub fn channels(&self) -> &[KickChannel] {
        &self.channels
    }

    pub fn dissipator(&self) -> &DMatrix<f64> {
        &self.dissipator
    }

    /// Upper bound on `‖𝓛‖`: the spectral width of `H` plus the largest
    /// dissipator magnitude.
    pub fn norm_bound(&self) -> f64 {
        let eig = nalgebra::linalg::SymmetricEigen::new(self.hamiltonian.clone()).eigenvalues;
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dmax = self.dissipator.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        (hi - lo) + dmax
    }

    /// `𝓛(ρ)` on raw entries.
    pub fn apply(&self, rho: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let h = &self.hamiltonian;
        let comm = h * rho - rho * h;
        let mut out = comm * Complex64::new(0.0, -1.0);
        for ((o, r), d) in out.iter_mut().zip(rho.iter()).zip(self.dissipator.iter()) {
            *o += r * d;
        }
        out
    }
}

/// `dρ/dt` for a density matrix on the generator's lattice.
pub fn apply_generator(rho: &DensityMatrix, generator: &Generator) -> Result<DensityMatrix> {
    rho.lattice.check_same(&generator.lattice)?;
    Ok(DensityMatrix {
        lattice: rho.lattice,
        entries: generator.apply(&rho.entries),
    })
}

/// Double-commutator generator for smeared mass densities, with the same
/// Hamiltonian as [`Generator::new`].
pub fn dp_generator(
    lattice: &Lattice,
    masses: &[f64],
    profile: &DpMassProfile,
    lambda0: f64,
    potential: &ExternalPotential,
) -> Result<Generator> {
    let h = hamiltonian(lattice, masses, potential)?;
    let total: f64 = masses.iter().sum();
    let weights: Vec<f64> = masses.iter().map(|m| m / total).collect();
    let d = dp_dissipator(lattice, &weights, profile, lambda0, true)?;
    Generator::from_parts(lattice, h, d)
}

/// States and observables recorded by [`integrate_master`].
#[derive(Clone, Debug)]
pub struct MasterRun {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
    pub observables: Vec<Observables>,
    /// Largest `|tr ρ(t) - tr ρ(0)|` seen.
    pub trace_drift: f64,
    /// Largest Hermiticity defect seen at output times.
    pub hermiticity_drift: f64,
}

impl MasterRun {
    pub fn final_state(&self) -> &DensityMatrix {
        self.states.last().expect("at least one output")
    }
}

fn rk4(generator: &Generator, rho: &DMatrix<Complex64>, dt: f64) -> DMatrix<Complex64> {
    let h = Complex64::new(dt, 0.0);
    let half = Complex64::new(0.5 * dt, 0.0);
    let k1 = generator.apply(rho);
    let k2 = generator.apply(&(rho + &k1 * half));
    let k3 = generator.apply(&(rho + &k2 * half));
    let k4 = generator.apply(&(rho + &k3 * h));
    rho + (k1 + k2 * Complex64::new(2.0, 0.0) + k3 * Complex64::new(2.0, 0.0) + k4)
        * Complex64::new(dt / 6.0, 0.0)
}

/// Classic RK4 from `rho0`, recording the state after each step count in
/// `output_steps` (ascending; step 0 is the initial state).
pub fn integrate_master(
    rho0: &DensityMatrix,
    generator: &Generator,
    dt: f64,
    output_steps: &[usize],
) -> Result<MasterRun> {
    rho0.lattice.check_same(&generator.lattice)?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::StepGuard(format!("dt must be positive (got {dt})")));
    }
    let bound = dt * generator.norm_bound();
    if bound > RK4_STABILITY {
        return Err(Error::StepGuard(format!(
            "dt·‖𝓛‖ = {bound:.3} exceeds the RK4 limit {RK4_STABILITY}"
        )));
    }
    if output_steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::StepGuard("output steps must be strictly increasing".into()));
    }
    let tr0 = rho0.trace().re;
    let mut rho = rho0.entries.clone();
    let mut run = MasterRun {
        times: Vec::new(),
        states: Vec::new(),
        observables: Vec::new(),
        trace_drift: 0.0,
        hermiticity_drift: 0.0,
    };
    let last = output_steps.last().copied().unwrap_or(0);
    let mut next = output_steps.iter().peekable();
    let cv = rho0.lattice.cell_volume();
    for step in 0..=last {
        if step > 0 {
            rho = rk4(generator, &rho, dt);
            let drift = (rho.trace().re * cv - tr0).abs();
            if !drift.is_finite() {
                return Err(Error::NonFinite("master-equation integration".into()));
            }
            run.trace_drift = run.trace_drift.max(drift);
            if drift > TRACE_TOLERANCE {
                return Err(Error::TraceDrift { drift });
            }
        }
        if next.peek() == Some(&&step) {
            next.next();
            let state = DensityMatrix {
                lattice: rho0.lattice,
                entries: rho.clone(),
            };
            run.hermiticity_drift = run.hermiticity_drift.max(state.hermiticity_error());
            run.times.push(step as f64 * dt);
            run.observables.push(state.observables());
            run.states.push(state);
        }
    }
    if run.states.is_empty() {
        run.times.push(0.0);
        run.observables.push(rho0.observables());
        run.states.push(rho0.clone());
    }
    Ok(run)
}

/// Integrate to `t_final` with `steps` equal steps and return `ρ(t_final)`.
pub fn evolve(rho0: &DensityMatrix, generator: &Generator, t_final: f64, steps: usize) -> Result<DensityMatrix> {
    let run = integrate_master(rho0, generator, t_final / steps as f64, &[steps])?;
    Ok(run.states.into_iter().next_back().unwrap())
}

/// Mixture `Σ p_i |ψ_i⟩⟨ψ_i|` of normalized states.
pub fn mixture(members: &[(f64, WaveFunction)]) -> Result<DensityMatrix> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidLattice("empty mixture".into()))?;
    let mut rho = DensityMatrix::zeros(*first.1.lattice());
    for (p, psi) in members {
        rho.lattice.check_same(psi.lattice())?;
        let pure = DensityMatrix::from_pure(&psi.normalized());
        rho.entries += pure.entries * Complex64::new(*p, 0.0);
    }
    Ok(rho)
}
