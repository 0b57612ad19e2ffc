//! Diffusive Itô unraveling, stepped by Euler–Maruyama.
//!
//! `ψ' = U_dt ψ + Σ_j dW_j A_j ψ - ½ dt Σ_j r_j A_j†A_j ψ`, where `U_dt` is
//! the split-operator drift, `A_j = M_{k_j} + i⟨M_{k_j}⟩` with the expectation
//! taken in the normalized start-of-step state, and the complex increments
//! satisfy `E[dW_j* dW_l] = δ_jl r_j dt`, `E[dW_j dW_l] = 0`.
//!
//! The trajectory norm is not conserved; it is a martingale.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::RateKernel;
use crate::lattice::{characteristic_fn, KickTable, NormPolicy, WaveFunction};
use crate::propagator::DriftStepper;

/// Largest accepted `dt·Γ_tot`.
pub const STEP_GUARD: f64 = 0.1;
/// Trajectories whose `‖ψ‖²` exceeds this are aborted.
pub const NORM_EXPLOSION: f64 = 1e3;

/// One draw of complex increments, indexed like `RateKernel::active_modes`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseField {
    pub modes: Vec<usize>,
    pub increments: Vec<Complex64>,
}

impl NoiseField {
    /// `dW = (ξ₁ + iξ₂)·√(r dt / 2)` with standard normal `ξ`. Two normals
    /// are drawn per active mode, in mode order.
    pub fn draw<R: Rng + ?Sized>(kernel: &RateKernel, dt: f64, rng: &mut R) -> Self {
        let modes = kernel.active_modes().to_vec();
        let increments = modes
            .iter()
            .map(|&j| {
                let s = (0.5 * kernel.rate(j) * dt).sqrt();
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                Complex64::new(a, b) * s
            })
            .collect();
        Self { modes, increments }
    }
}

/// Running squared norm of a diffusive trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormLedger {
    pub norm2: f64,
    /// Whether displayed observables were computed from the normalized
    /// state; ensemble averages always use the raw state.
    pub normalized_observables: bool,
}

impl Default for NormLedger {
    fn default() -> Self {
        Self {
            norm2: 1.0,
            normalized_observables: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiffusiveStepper {
    drift: DriftStepper,
    kicks: KickTable,
    noise_phase: Complex64,
}

impl DiffusiveStepper {
    pub fn new(drift: DriftStepper) -> Result<Self> {
        let g = drift.spec().dt * drift.kernel().gamma_tot();
        if g > STEP_GUARD {
            return Err(Error::StepGuard(format!(
                "dt·Γ_tot = {g:.3} exceeds {STEP_GUARD} for the diffusive unraveling"
            )));
        }
        let kicks = KickTable::new(drift.lattice());
        Ok(Self {
            drift,
            kicks,
            noise_phase: Complex64::new(1.0, 0.0),
        })
    }

    /// Multiply every increment by `e^{iθ}`; the averaged dynamics is
    /// invariant under this rotation.
    pub fn with_noise_phase(mut self, theta: f64) -> Self {
        self.noise_phase = Complex64::from_polar(1.0, theta);
        self
    }

    pub fn drift(&self) -> &DriftStepper {
        &self.drift
    }

    /// Advance `psi` by one step and update `ledger`.
    pub fn step<R: Rng + ?Sized>(
        &self,
        psi: &mut WaveFunction,
        ledger: &mut NormLedger,
        rng: &mut R,
    ) -> Result<()> {
        let kernel = self.drift.kernel();
        let dt = self.drift.spec().dt;
        if kernel.is_zero() {
            self.drift.step(psi)?;
            ledger.norm2 = psi.norm2();
            return Ok(());
        }
        let noise = NoiseField::draw(kernel, dt, rng);
        let chi = characteristic_fn(psi, NormPolicy::Tracked)?;
        let w = psi.weights();
        let lat = *psi.lattice();
        let mut factor = vec![Complex64::new(0.0, 0.0); lat.len()];
        for (&j, dw) in noise.modes.iter().zip(&noise.increments) {
            let dw = dw * self.noise_phase;
            let r = kernel.rate(j);
            let im = Complex64::i() * chi.at(j);
            for (x, f) in factor.iter_mut().enumerate() {
                let a = self.kicks.weighted(&w, j, x) + im;
                *f += dw * a - 0.5 * dt * r * a.norm_sqr();
            }
        }
        let increment: Vec<Complex64> = psi
            .amplitudes()
            .iter()
            .zip(&factor)
            .map(|(a, f)| a * f)
            .collect();
        self.drift.step(psi)?;
        for (a, d) in psi.amplitudes_mut().iter_mut().zip(&increment) {
            *a += d;
        }
        if !psi.is_finite() {
            return Err(Error::NonFinite("diffusive step".into()));
        }
        let norm2 = psi.norm2();
        if norm2 > NORM_EXPLOSION {
            return Err(Error::NormExplosion { norm2 });
        }
        ledger.norm2 = norm2;
        Ok(())
    }
}

/// One diffusive step with a freshly built stepper.
pub fn diffusive_step<R: Rng + ?Sized>(
    psi: &WaveFunction,
    drift: &DriftStepper,
    rng: &mut R,
) -> Result<WaveFunction> {
    let s = DiffusiveStepper::new(drift.clone())?;
    let mut out = psi.clone();
    s.step(&mut out, &mut NormLedger::default(), rng)?;
    Ok(out)
}
