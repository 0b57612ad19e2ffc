//! Deterministic Schrödinger–Newton flow by Strang splitting: half a
//! kinetic step in momentum space, a full potential step in position space,
//! half a kinetic step.

use std::sync::atomic::{AtomicBool, Ordering};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kernels::{sn_expectation, sn_potential, RateKernel};
use crate::lattice::{Lattice, WaveFunction};
use crate::spectral::{fft_all, Direction};

/// Phase-wrap guard on `dt·max|V + V_SN|`.
pub const PHASE_WRAP_LIMIT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub enum ExternalPotential {
    Free,
    /// `½ m ω² x²` per particle and axis.
    Harmonic { omega: f64 },
    /// Values on the single-particle sites, shared by all particles.
    Table(Vec<f64>),
}

impl ExternalPotential {
    /// `Σ_n V_n(r_n)` over configuration space.
    pub fn evaluate(&self, lattice: &Lattice, masses: &[f64]) -> Result<Vec<f64>> {
        let site_values = |p: usize| -> Result<Vec<f64>> {
            Ok(match self {
                ExternalPotential::Free => vec![0.0; lattice.sites()],
                ExternalPotential::Harmonic { omega } => (0..lattice.sites())
                    .map(|s| {
                        let r2: f64 = lattice.site_position(s).iter().map(|x| x * x).sum();
                        0.5 * masses[p] * omega * omega * r2
                    })
                    .collect(),
                ExternalPotential::Table(v) => {
                    if v.len() != lattice.sites() {
                        return Err(Error::LatticeMismatch(format!(
                            "potential table has {} values for {} sites",
                            v.len(),
                            lattice.sites()
                        )));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite("external potential table".into()));
                    }
                    v.clone()
                }
            })
        };
        let tables = (0..lattice.particles())
            .map(site_values)
            .collect::<Result<Vec<_>>>()?;
        Ok((0..lattice.len())
            .map(|x| {
                tables
                    .iter()
                    .enumerate()
                    .map(|(p, t)| t[lattice.particle_site(x, p)])
                    .sum()
            })
            .collect())
    }

    pub fn is_translation_invariant(&self) -> bool {
        matches!(self, ExternalPotential::Free)
    }
}

/// When the nonlinear potential is evaluated within a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Refresh {
    /// From the state at the start of the step.
    Frozen,
    /// From the state after the first half kinetic step. The density does
    /// not change during the potential substep, so this is the exact
    /// midpoint value.
    #[default]
    PredictorCorrector,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSpec {
    pub dt: f64,
    pub refresh: Refresh,
}

impl StepSpec {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            refresh: Refresh::default(),
        }
    }
}

/// Kinetic energy `Σ_n |k_n|²/2m_n` for every raw-FFT index over
/// configuration space.
pub fn kinetic_table(lattice: &Lattice, masses: &[f64]) -> Vec<f64> {
    let rank = lattice.rank();
    let d = lattice.spatial_dim();
    (0..lattice.len())
        .map(|m| {
            (0..rank)
                .map(|a| {
                    let k = lattice.wave_number(lattice.axis_index(m, a, rank));
                    k * k / (2.0 * masses[a / d])
                })
                .sum()
        })
        .collect()
}

/// `T ψ` evaluated spectrally.
pub fn apply_kinetic(lattice: &Lattice, kinetic: &[f64], amps: &[Complex64]) -> Vec<Complex64> {
    let mut out = amps.to_vec();
    fft_all(&mut out, lattice.points(), lattice.rank(), Direction::Forward);
    let scale = 1.0 / lattice.len() as f64;
    for (v, t) in out.iter_mut().zip(kinetic) {
        *v *= t * scale;
    }
    fft_all(&mut out, lattice.points(), lattice.rank(), Direction::Inverse);
    out
}

/// Reusable split-operator stepper for one lattice, mass set, kernel and
/// external potential.
#[derive(Debug)]
pub struct DriftStepper {
    lattice: Lattice,
    masses: Vec<f64>,
    kernel: RateKernel,
    external: Vec<f64>,
    kinetic: Vec<f64>,
    half_kinetic: Vec<Complex64>,
    spec: StepSpec,
    warned: AtomicBool,
}

impl Clone for DriftStepper {
    fn clone(&self) -> Self {
        Self {
            lattice: self.lattice,
            masses: self.masses.clone(),
            kernel: self.kernel.clone(),
            external: self.external.clone(),
            kinetic: self.kinetic.clone(),
            half_kinetic: self.half_kinetic.clone(),
            spec: self.spec,
            warned: AtomicBool::new(self.warned.load(Ordering::Relaxed)),
        }
    }
}

impl DriftStepper {
    pub fn new(
        lattice: Lattice,
        masses: &[f64],
        kernel: &RateKernel,
        potential: &ExternalPotential,
        spec: StepSpec,
    ) -> Result<Self> {
        lattice.check_site_geometry(kernel.lattice())?;
        if masses.len() != lattice.particles() || masses.iter().any(|m| m.is_nan() || *m <= 0.0) {
            return Err(Error::InvalidLattice(format!(
                "drift needs {} positive masses (got {masses:?})",
                lattice.particles()
            )));
        }
        if !(spec.dt.is_finite() && spec.dt > 0.0) {
            return Err(Error::StepGuard(format!("dt must be positive (got {})", spec.dt)));
        }
        let kinetic = kinetic_table(&lattice, masses);
        let half_kinetic = kinetic
            .iter()
            .map(|t| Complex64::from_polar(1.0, -0.5 * spec.dt * t))
            .collect();
        Ok(Self {
            lattice,
            masses: masses.to_vec(),
            kernel: kernel.clone(),
            external: potential.evaluate(&lattice, masses)?,
            kinetic,
            half_kinetic,
            spec,
            warned: AtomicBool::new(false),
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn kernel(&self) -> &RateKernel {
        &self.kernel
    }

    pub fn spec(&self) -> StepSpec {
        self.spec
    }

    pub fn external(&self) -> &[f64] {
        &self.external
    }

    pub fn kinetic(&self) -> &[f64] {
        &self.kinetic
    }

    fn kinetic_half(&self, amps: &mut [Complex64]) {
        let n = self.lattice.points();
        let rank = self.lattice.rank();
        fft_all(amps, n, rank, Direction::Forward);
        let scale = 1.0 / self.lattice.len() as f64;
        for (v, p) in amps.iter_mut().zip(&self.half_kinetic) {
            *v *= p * scale;
        }
        fft_all(amps, n, rank, Direction::Inverse);
    }

    /// One Strang step of `i∂_t ψ = (H + H_SN) ψ`.
    pub fn step(&self, psi: &mut WaveFunction) -> Result<()> {
        let frozen = match self.spec.refresh {
            Refresh::Frozen => Some(sn_potential(psi, &self.kernel)?),
            Refresh::PredictorCorrector => None,
        };
        self.kinetic_half(psi.amplitudes_mut());
        let v_sn = match frozen {
            Some(v) => v,
            None => sn_potential(psi, &self.kernel)?,
        };
        let dt = self.spec.dt;
        let mut worst = 0.0f64;
        for ((a, v), s) in psi.amplitudes_mut().iter_mut().zip(&self.external).zip(&v_sn) {
            let v = v + s;
            worst = worst.max(v.abs());
            *a *= Complex64::from_polar(1.0, -v * dt);
        }
        if dt * worst > PHASE_WRAP_LIMIT && !self.warned.swap(true, Ordering::Relaxed) {
            log::warn!(
                "dt·max|V + V_SN| = {:.3} exceeds {PHASE_WRAP_LIMIT}; potential phases may wrap",
                dt * worst
            );
        }
        self.kinetic_half(psi.amplitudes_mut());
        if !psi.is_finite() {
            return Err(Error::NonFinite("drift step".into()));
        }
        Ok(())
    }

    /// `E = ⟨T⟩ + ⟨V⟩ + ½⟨V_SN⟩` of the normalized state.
    pub fn energy(&self, psi: &WaveFunction) -> Result<f64> {
        let norm2 = psi.norm2();
        let dv = self.lattice.cell_volume();
        let t_psi = apply_kinetic(&self.lattice, &self.kinetic, psi.amplitudes());
        let kinetic: f64 = psi
            .amplitudes()
            .iter()
            .zip(&t_psi)
            .map(|(a, b)| (a.conj() * b).re)
            .sum::<f64>()
            * dv
            / norm2;
        let external: f64 = psi
            .amplitudes()
            .iter()
            .zip(&self.external)
            .map(|(a, v)| a.norm_sqr() * v)
            .sum::<f64>()
            * dv
            / norm2;
        Ok(kinetic + external + 0.5 * sn_expectation(psi, &self.kernel)?)
    }
}

/// One drift step with a freshly built stepper. Prefer [`DriftStepper`]
/// inside loops.
pub fn drift_step(
    psi: &WaveFunction,
    kernel: &RateKernel,
    potential: &ExternalPotential,
    spec: StepSpec,
) -> Result<WaveFunction> {
    let stepper = DriftStepper::new(*psi.lattice(), psi.masses(), kernel, potential, spec)?;
    let mut out = psi.clone();
    stepper.step(&mut out)?;
    Ok(out)
}

pub fn sn_energy(psi: &WaveFunction, kernel: &RateKernel, potential: &ExternalPotential) -> Result<f64> {
    // dt only enters the cached phases, which energy() does not use
    DriftStepper::new(*psi.lattice(), psi.masses(), kernel, potential, StepSpec::new(1.0))?
        .energy(psi)
}
