//! Piecewise deterministic (jump) unraveling.
//!
//! Each step either jumps, with probability `Λ(ψ)·dt`, or follows the
//! deterministic drift. The rate table is evaluated once at the start of
//! the step. Two jump families are available: the momentum-kick operators
//! `A_ψ(k) = M_k + i⟨M_k⟩` and their position-space unfolding
//! `B_ψ(s) = Σ_k c_k e^{ik·s} A_ψ(k)`.

use std::sync::atomic::{AtomicBool, Ordering};

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::RateKernel;
use crate::lattice::{characteristic_fn, CharacteristicTable, KickTable, Lattice, NormPolicy, WaveFunction};
use crate::propagator::DriftStepper;
use crate::spectral::{fft_all, Direction};

/// `Λ·dt` above which a step is rejected.
pub const RATE_ERROR: f64 = 0.5;
/// `Λ·dt` above which a warning is logged.
pub const RATE_WARNING: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Unfolding {
    /// Jumps labelled by dual modes `k`.
    #[default]
    Momentum,
    /// Jumps labelled by single-particle sites `s`.
    Position,
}

/// Per-label jump rates for the current state.
#[derive(Clone, Debug, PartialEq)]
pub struct JumpRateTable {
    /// Mode indices (momentum unfolding) or site indices (position unfolding).
    pub labels: Vec<usize>,
    pub rates: Vec<f64>,
    /// `‖A_ψ(k)ψ‖²` per label; `‖B_ψ(s)ψ‖²·Δx^d` for the position unfolding.
    pub operator_norms: Vec<f64>,
    pub total: f64,
    cumulative: Vec<f64>,
}

impl JumpRateTable {
    fn new(labels: Vec<usize>, rates: Vec<f64>, operator_norms: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cumulative: Vec<f64> = rates
            .iter()
            .map(|r| {
                acc += r;
                acc
            })
            .collect();
        Self {
            labels,
            rates,
            operator_norms,
            total: acc,
            cumulative,
        }
    }

    /// Inverse-CDF choice for `u ∈ [0, 1)`; returns a position in `labels`.
    pub fn sample(&self, u: f64) -> usize {
        let target = u * self.total;
        let i = self.cumulative.partition_point(|c| *c <= target);
        // skip zero-rate labels at the upper edge
        let mut i = i.min(self.rates.len() - 1);
        while self.rates[i] == 0.0 && i > 0 {
            i -= 1;
        }
        i
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JumpLabel {
    Mode(usize),
    Site(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub label: JumpLabel,
    /// `‖Aψ‖²` (or `‖Bψ‖²`) before renormalization.
    pub pre_norm: f64,
    pub post_norm: f64,
}

/// `⟨M_k† M_k⟩` over `ρ = |ψ|²` (normalized), for every active mode.
fn shift_norms(psi: &WaveFunction, kernel: &RateKernel, kicks: &KickTable) -> Vec<f64> {
    let modes = kernel.active_modes();
    if psi.lattice().particles() == 1 {
        return vec![1.0; modes.len()];
    }
    let w = psi.weights();
    let dv = psi.lattice().cell_volume() / psi.norm2();
    let rho = psi.density();
    modes
        .iter()
        .map(|&j| {
            rho.iter()
                .enumerate()
                .map(|(x, r)| r * kicks.weighted(&w, j, x).norm_sqr())
                .sum::<f64>()
                * dv
        })
        .collect()
}

/// Rates `r_j ‖A_ψ(k_j)ψ‖²` over the active modes.
pub fn jump_rates_a(
    psi: &WaveFunction,
    kernel: &RateKernel,
    kicks: &KickTable,
) -> Result<(JumpRateTable, CharacteristicTable)> {
    let chi = characteristic_fn(psi, NormPolicy::Tracked)?;
    let mm = shift_norms(psi, kernel, kicks);
    let modes = kernel.active_modes().to_vec();
    let norms: Vec<f64> = modes
        .iter()
        .zip(&mm)
        .map(|(&j, m)| m + chi.at(j).norm_sqr())
        .collect();
    let rates = modes
        .iter()
        .zip(&norms)
        .map(|(&j, a)| kernel.rate(j) * a)
        .collect();
    Ok((JumpRateTable::new(modes, rates, norms), chi))
}

fn check_mode(lattice: &Lattice, mode: usize) -> Result<()> {
    if mode == 0 {
        return Err(Error::ZeroModeRequest);
    }
    if mode >= lattice.sites() {
        return Err(Error::OffGrid(vec![mode as f64]));
    }
    Ok(())
}

fn apply_a(psi: &WaveFunction, chi: &CharacteristicTable, kicks: &KickTable, mode: usize) -> WaveFunction {
    let w = psi.weights();
    let im = Complex64::i() * chi.at(mode);
    let amps = psi
        .amplitudes()
        .iter()
        .enumerate()
        .map(|(x, a)| a * (kicks.weighted(&w, mode, x) + im))
        .collect();
    psi.with_amplitudes(amps)
}

/// `A_ψ(k)|ψ⟩`, unnormalized. The expectation value is taken in the
/// normalized state.
pub fn jump_operator_a(psi: &WaveFunction, k: &[f64]) -> Result<WaveFunction> {
    let mode = psi.lattice().mode_of(k)?;
    jump_operator_a_mode(psi, mode)
}

pub fn jump_operator_a_mode(psi: &WaveFunction, mode: usize) -> Result<WaveFunction> {
    check_mode(psi.lattice(), mode)?;
    let chi = characteristic_fn(psi, NormPolicy::Tracked)?;
    Ok(apply_a(psi, &chi, &KickTable::new(psi.lattice()), mode))
}

/// Coefficients of the position unfolding, `c_k = √(r_k / L^d)`, and their
/// synthesis `C(u) = Σ_k c_k e^{ik·u}` on grid offsets `u`.
#[derive(Clone, Debug)]
pub struct PositionUnfolding {
    lattice: Lattice,
    coeffs: Vec<Complex64>,
    offsets: Vec<Complex64>,
}

impl PositionUnfolding {
    pub fn new(kernel: &RateKernel) -> Self {
        let lat = *kernel.lattice();
        let vol = lat.length().powi(lat.spatial_dim() as i32);
        let coeffs: Vec<Complex64> = kernel
            .rates()
            .iter()
            .map(|r| Complex64::new((r / vol).sqrt(), 0.0))
            .collect();
        let mut offsets = coeffs.clone();
        fft_all(&mut offsets, lat.points(), lat.spatial_dim(), Direction::Inverse);
        Self {
            lattice: lat,
            coeffs,
            offsets,
        }
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.coeffs
    }

    /// Flat index of the per-axis offset `s - t` (mod n).
    fn offset(&self, s: usize, t: usize) -> usize {
        let lat = &self.lattice;
        let d = lat.spatial_dim();
        let n = lat.points();
        (0..d).fold(0, |acc, a| {
            let i = lat.axis_index(s, a, d);
            let j = lat.axis_index(t, a, d);
            acc * n + (i + n - j) % n
        })
    }

    /// `E(s) = Σ_k c_k ⟨M_k⟩ e^{ik·s}` for every site.
    fn expectation_field(&self, chi: &CharacteristicTable) -> Vec<Complex64> {
        let prod: Vec<Complex64> = self
            .coeffs
            .iter()
            .zip(&chi.values)
            .map(|(c, m)| c * m)
            .collect();
        self.lattice.synthesize_sites(&prod)
    }

    /// Pointwise multiplier of `B_ψ(s)` over configuration space.
    fn multiplier(&self, lat: &Lattice, weights: &[f64], e_s: Complex64, s: usize) -> Vec<Complex64> {
        let ie = Complex64::i() * e_s;
        (0..lat.len())
            .map(|x| {
                let mut acc = ie;
                for (p, w) in weights.iter().enumerate() {
                    if *w != 0.0 {
                        acc += self.offsets[self.offset(s, lat.particle_site(x, p))] * *w;
                    }
                }
                acc
            })
            .collect()
    }
}

/// Rates `‖B_ψ(s)ψ‖² Δx^d` for every site; they sum to `Λ(ψ)`.
pub fn jump_rates_b(
    psi: &WaveFunction,
    unfolding: &PositionUnfolding,
) -> Result<(JumpRateTable, CharacteristicTable)> {
    let lat = *psi.lattice();
    let chi = characteristic_fn(psi, NormPolicy::Tracked)?;
    let e = unfolding.expectation_field(&chi);
    let w = psi.weights();
    let rho = psi.density();
    let scale = lat.cell_volume() / psi.norm2() * lat.site_volume();
    let rates: Vec<f64> = (0..lat.sites())
        .map(|s| {
            unfolding
                .multiplier(&lat, &w, e[s], s)
                .iter()
                .zip(&rho)
                .map(|(b, r)| b.norm_sqr() * r)
                .sum::<f64>()
                * scale
        })
        .collect();
    Ok((
        JumpRateTable::new((0..lat.sites()).collect(), rates.clone(), rates),
        chi,
    ))
}

/// `B_ψ(s)|ψ⟩`, unnormalized.
pub fn jump_operator_b(psi: &WaveFunction, unfolding: &PositionUnfolding, site: usize) -> Result<WaveFunction> {
    let lat = *psi.lattice();
    if site >= lat.sites() {
        return Err(Error::OffGrid(vec![site as f64]));
    }
    let chi = characteristic_fn(psi, NormPolicy::Tracked)?;
    let e = unfolding.expectation_field(&chi);
    Ok(apply_b(psi, unfolding, e[site], site))
}

fn apply_b(psi: &WaveFunction, unfolding: &PositionUnfolding, e_s: Complex64, site: usize) -> WaveFunction {
    let m = unfolding.multiplier(psi.lattice(), &psi.weights(), e_s, site);
    psi.with_amplitudes(psi.amplitudes().iter().zip(m).map(|(a, b)| a * b).collect())
}

/// The norm-conserving drift field
/// `K(X) = ½ Σ_k r_k (‖A_kψ‖² - |M_k(X) + i⟨M_k⟩|²)`; identically zero for
/// one particle.
pub fn extra_drift_field(
    psi: &WaveFunction,
    kernel: &RateKernel,
    kicks: &KickTable,
    table: &JumpRateTable,
    chi: &CharacteristicTable,
) -> Vec<f64> {
    let lat = psi.lattice();
    let w = psi.weights();
    let mut k = vec![0.0; lat.len()];
    for (i, &j) in table.labels.iter().enumerate() {
        let r = kernel.rate(j);
        let a2 = table.operator_norms[i];
        let im = Complex64::i() * chi.at(j);
        for (x, v) in k.iter_mut().enumerate() {
            *v += 0.5 * r * (a2 - (kicks.weighted(&w, j, x) + im).norm_sqr());
        }
    }
    k
}

/// Result of one PDP step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PdpOutcome {
    pub event: Option<JumpEvent>,
    /// `‖ψ‖² - 1` just before the final renormalization of a drift step.
    pub norm_defect: f64,
}

#[derive(Debug)]
pub struct PdpStepper {
    drift: DriftStepper,
    kicks: KickTable,
    unfolding: Unfolding,
    position: Option<PositionUnfolding>,
    warned: AtomicBool,
}

impl Clone for PdpStepper {
    fn clone(&self) -> Self {
        Self {
            drift: self.drift.clone(),
            kicks: self.kicks.clone(),
            unfolding: self.unfolding,
            position: self.position.clone(),
            warned: AtomicBool::new(self.warned.load(Ordering::Relaxed)),
        }
    }
}

impl PdpStepper {
    pub fn new(drift: DriftStepper, unfolding: Unfolding) -> Self {
        let kicks = KickTable::new(drift.lattice());
        let position = match unfolding {
            Unfolding::Momentum => None,
            Unfolding::Position => Some(PositionUnfolding::new(drift.kernel())),
        };
        Self {
            drift,
            kicks,
            unfolding,
            position,
            warned: AtomicBool::new(false),
        }
    }

    pub fn drift(&self) -> &DriftStepper {
        &self.drift
    }

    pub fn rate_table(&self, psi: &WaveFunction) -> Result<(JumpRateTable, CharacteristicTable)> {
        match &self.position {
            None => jump_rates_a(psi, self.drift.kernel(), &self.kicks),
            Some(u) => jump_rates_b(psi, u),
        }
    }

    /// Advance `psi` (unit norm) by one step starting at time `t`. Exactly
    /// two uniforms are drawn from `rng` per step.
    pub fn step<R: Rng + ?Sized>(&self, psi: &mut WaveFunction, t: f64, rng: &mut R) -> Result<PdpOutcome> {
        let norm2 = psi.norm2();
        if (norm2 - 1.0).abs() > 1e-6 {
            return Err(Error::NonUnitNorm { norm2 });
        }
        let dt = self.drift.spec().dt;
        let u_jump: f64 = rng.random();
        let u_label: f64 = rng.random();
        let kernel = self.drift.kernel();
        if kernel.is_zero() {
            self.drift.step(psi)?;
            return Ok(PdpOutcome {
                event: None,
                norm_defect: 0.0,
            });
        }
        let (table, chi) = self.rate_table(psi)?;
        let p = table.total * dt;
        if p > RATE_ERROR {
            return Err(Error::RateOverflow { rate_dt: p });
        }
        if p > RATE_WARNING && !self.warned.swap(true, Ordering::Relaxed) {
            log::warn!("jump probability per step Λ·dt = {p:.3} exceeds {RATE_WARNING}");
        }

        if u_jump < p {
            let i = table.sample(u_label);
            let label = table.labels[i];
            let (mut next, label) = match &self.position {
                None => (apply_a(psi, &chi, &self.kicks, label), JumpLabel::Mode(label)),
                Some(u) => {
                    let e = u.expectation_field(&chi);
                    (apply_b(psi, u, e[label], label), JumpLabel::Site(label))
                }
            };
            let pre_norm = next.norm2();
            if !(pre_norm.is_finite() && pre_norm > 0.0) {
                return Err(Error::NonFinite("jump".into()));
            }
            next.normalize();
            let post_norm = next.norm2();
            *psi = next;
            return Ok(PdpOutcome {
                event: Some(JumpEvent {
                    time: t,
                    label,
                    pre_norm,
                    post_norm,
                }),
                norm_defect: 0.0,
            });
        }

        let mut defect = 0.0;
        if psi.lattice().particles() > 1 {
            let table_a = match self.unfolding {
                Unfolding::Momentum => table,
                Unfolding::Position => jump_rates_a(psi, kernel, &self.kicks)?.0,
            };
            let k = extra_drift_field(psi, kernel, &self.kicks, &table_a, &chi);
            for (a, v) in psi.amplitudes_mut().iter_mut().zip(&k) {
                *a *= (v * dt).exp();
            }
            defect = psi.norm2() - 1.0;
            psi.normalize();
        }
        self.drift.step(psi)?;
        Ok(PdpOutcome {
            event: None,
            norm_defect: defect,
        })
    }
}

/// One PDP step with a freshly built stepper.
pub fn pdp_step<R: Rng + ?Sized>(
    psi: &WaveFunction,
    drift: &DriftStepper,
    unfolding: Unfolding,
    rng: &mut R,
) -> Result<(WaveFunction, Option<JumpEvent>)> {
    let stepper = PdpStepper::new(drift.clone(), unfolding);
    let mut out = psi.clone();
    let o = stepper.step(&mut out, 0.0, rng)?;
    Ok((out, o.event))
}
