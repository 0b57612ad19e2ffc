//! Regularizers `g(k)`, the rate kernel `γ(k)` tabulated on the dual grid,
//! and the regularized Schrödinger–Newton potential built from it.
//!
//! The rate attached to one dual mode is `r_j = Δk^d γ(k_j)`; the `k = 0`
//! mode always carries rate zero. Everything downstream (potential, jump
//! rates, noise variances, the master-equation dissipator) reads these
//! per-mode rates and nothing else.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::lattice::{characteristic_fn, CharacteristicTable, Lattice, NormPolicy, WaveFunction};

/// Relative change of `Γ_tot` or `D_p` under grid doubling that counts as
/// divergence.
pub const REFINEMENT_TOLERANCE: f64 = 0.10;

/// Radial mass distribution of a DP particle, normalized to unit integral.
#[derive(Clone, Debug, PartialEq)]
pub enum DpMassProfile {
    UniformSphere { radius: f64 },
    Gaussian { width: f64 },
}

impl DpMassProfile {
    /// Fourier transform `f̃(k)`, with `f̃(0) = 1`.
    pub fn transform(&self, k: f64) -> f64 {
        match *self {
            DpMassProfile::UniformSphere { radius } => {
                let x = k * radius;
                if x.abs() < 1e-3 {
                    let x2 = x * x;
                    1.0 - x2 / 10.0 + x2 * x2 / 280.0
                } else {
                    3.0 * (x.sin() - x * x.cos()) / (x * x * x)
                }
            }
            DpMassProfile::Gaussian { width } => (-0.5 * k * k * width * width).exp(),
        }
    }

    fn validate(&self) -> Result<()> {
        let p = match *self {
            DpMassProfile::UniformSphere { radius } => radius,
            DpMassProfile::Gaussian { width } => width,
        };
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::InvalidLattice(format!("bad mass profile {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Regularizer {
    /// `g(k) = exp(-k²/2σ_k²)`
    Gaussian { sigma_k: f64 },
    /// `g(k) = |f̃(k)|²`
    DpProfile(DpMassProfile),
    /// `(|k|, g)` pairs at dual-grid radii; unlisted radii get `g = 0`.
    Table(Vec<(f64, f64)>),
    /// `g = 1`; only accepted with an explicit override.
    Unregularized,
}

impl Regularizer {
    pub fn eval(&self, k: f64) -> f64 {
        let k = k.abs();
        match self {
            Regularizer::Gaussian { sigma_k } => (-k * k / (2.0 * sigma_k * sigma_k)).exp(),
            Regularizer::DpProfile(p) => p.transform(k).powi(2),
            Regularizer::Table(rows) => rows
                .iter()
                .find(|(kk, _)| (kk - k).abs() <= 1e-9 * k.max(1.0))
                .map_or(0.0, |(_, g)| *g),
            Regularizer::Unregularized => 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Regularizer::Gaussian { sigma_k } if !(sigma_k.is_finite() && *sigma_k > 0.0) => Err(
                Error::InvalidLattice(format!("sigma_k must be positive (got {sigma_k})")),
            ),
            Regularizer::DpProfile(p) => p.validate(),
            Regularizer::Table(rows) => {
                for &(k, g) in rows {
                    if !g.is_finite() || !k.is_finite() {
                        return Err(Error::DivergentRate(format!("non-finite table row ({k}, {g})")));
                    }
                    if g < 0.0 {
                        return Err(Error::NegativeKernel { k, value: g });
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Law {
    /// `γ = Λ₀ g(k)`
    Direct,
    /// `γ = Λ₀ g(k) / k²`
    Coulomb3d,
}

impl Law {
    pub fn gamma(self, lambda0: f64, g: f64, k: f64) -> f64 {
        match self {
            Law::Direct => lambda0 * g,
            Law::Coulomb3d => lambda0 * g / (k * k),
        }
    }
}

/// Everything needed to tabulate a kernel on some lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSpec {
    pub regularizer: Regularizer,
    pub law: Law,
    pub lambda0: f64,
    /// Accept kernels that fail the refinement or infrared checks.
    pub allow_divergent: bool,
    /// Asking for the `k = 0` mode is always an error.
    pub include_zero_mode: bool,
}

impl KernelSpec {
    pub fn new(regularizer: Regularizer, law: Law, lambda0: f64) -> Self {
        Self {
            regularizer,
            law,
            lambda0,
            allow_divergent: false,
            include_zero_mode: false,
        }
    }

    pub fn allow_divergent(mut self, yes: bool) -> Self {
        self.allow_divergent = yes;
        self
    }

    pub fn build(&self, lattice: &Lattice) -> Result<RateKernel> {
        build_kernel(self, lattice)
    }
}

/// Named regularizer together with the law it is meant to be used with.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelPreset {
    pub regularizer: Regularizer,
    pub law: Law,
}

/// `csl_like` (localization length 1, Gaussian `γ`), `dp_sphere` (uniform
/// sphere of radius 1, inverse-square law) or `sn_gaussian` (`σ_k = 1`).
pub fn kernel_presets(name: &str) -> Result<KernelPreset> {
    preset_with(name, None)
}

/// Like [`kernel_presets`] with the length (`csl_like`, `dp_sphere`) or
/// `σ_k` (`sn_gaussian`) replaced.
pub fn preset_with(name: &str, parameter: Option<f64>) -> Result<KernelPreset> {
    match name {
        "csl_like" => {
            let r_c = parameter.unwrap_or(1.0);
            Ok(KernelPreset {
                // γ ∝ exp(-k² r_c²)
                regularizer: Regularizer::Gaussian {
                    sigma_k: 1.0 / (2f64.sqrt() * r_c),
                },
                law: Law::Direct,
            })
        }
        "dp_sphere" => Ok(KernelPreset {
            regularizer: Regularizer::DpProfile(DpMassProfile::UniformSphere {
                radius: parameter.unwrap_or(1.0),
            }),
            law: Law::Coulomb3d,
        }),
        "sn_gaussian" => Ok(KernelPreset {
            regularizer: Regularizer::Gaussian {
                sigma_k: parameter.unwrap_or(1.0),
            },
            law: Law::Direct,
        }),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// `γ(k_j)` on the dual grid with derived per-mode rates and moments.
#[derive(Clone, Debug, PartialEq)]
pub struct RateKernel {
    lattice: Lattice,
    lambda0: f64,
    gamma: Vec<f64>,
    rates: Vec<f64>,
    active: Vec<usize>,
    gamma_tot: f64,
    d_p: f64,
}

impl RateKernel {
    /// Kernel from explicit `γ(k_j)` values in FFT mode order. The `k = 0`
    /// entry must be zero.
    pub fn from_gamma(lattice: Lattice, lambda0: f64, gamma: Vec<f64>) -> Result<Self> {
        if gamma.len() != lattice.sites() {
            return Err(Error::LatticeMismatch(format!(
                "{} kernel values for {} modes",
                gamma.len(),
                lattice.sites()
            )));
        }
        if gamma[0] != 0.0 {
            return Err(Error::ZeroModeRequest);
        }
        for (j, &g) in gamma.iter().enumerate() {
            let k = lattice.mode_k2(j).sqrt();
            if !g.is_finite() {
                return Err(Error::DivergentRate(format!("γ is not finite at |k| = {k}")));
            }
            if g < 0.0 {
                return Err(Error::NegativeKernel { k, value: g });
            }
        }
        for j in 0..gamma.len() {
            let c = lattice.conjugate_mode(j);
            if (gamma[j] - gamma[c]).abs() > 1e-12 * gamma[j].abs().max(1e-300) {
                return Err(Error::InvalidLattice(format!(
                    "kernel is not even in k at mode {j}"
                )));
            }
        }
        let dk = lattice.mode_volume();
        let rates: Vec<f64> = gamma.iter().map(|g| g * dk).collect();
        let active = (1..rates.len()).filter(|&j| rates[j] > 0.0).collect();
        let gamma_tot = rates.iter().sum();
        let d_p = rates
            .iter()
            .enumerate()
            .map(|(j, r)| r * lattice.mode_k2(j))
            .sum();
        Ok(Self {
            lattice,
            lambda0,
            gamma,
            rates,
            active,
            gamma_tot,
            d_p,
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn gamma(&self, mode: usize) -> f64 {
        self.gamma[mode]
    }

    /// `Δk^d γ(k_j)` for every mode.
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn rate(&self, mode: usize) -> f64 {
        self.rates[mode]
    }

    /// Modes with non-zero rate (never the `k = 0` mode).
    pub fn active_modes(&self) -> &[usize] {
        &self.active
    }

    /// Base jump rate `Σ_j Δk^d γ(k_j)`.
    pub fn gamma_tot(&self) -> f64 {
        self.gamma_tot
    }

    /// Momentum diffusion coefficient `Σ_j Δk^d γ(k_j) |k_j|²`.
    pub fn momentum_diffusion(&self) -> f64 {
        self.d_p
    }

    /// Single-particle decoherence function `F(s) = Σ_j r_j (1 - cos k_j·s)`.
    pub fn decoherence_function(&self, s: &[f64]) -> f64 {
        self.active
            .iter()
            .map(|&j| {
                let ks: f64 = self
                    .lattice
                    .mode_vector(j)
                    .iter()
                    .zip(s)
                    .map(|(k, x)| k * x)
                    .sum();
                self.rates[j] * (1.0 - ks.cos())
            })
            .sum()
    }

    /// The same kernel with every rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::from_gamma(
            self.lattice,
            self.lambda0 * factor,
            self.gamma.iter().map(|g| g * factor).collect(),
        )
    }

    pub fn is_zero(&self) -> bool {
        self.active.is_empty()
    }
}

fn tabulate(spec: &KernelSpec, lattice: &Lattice) -> Result<Vec<f64>> {
    let mut gamma = vec![0.0; lattice.sites()];
    for (j, v) in gamma.iter_mut().enumerate().skip(1) {
        let k = lattice.mode_k2(j).sqrt();
        let g = spec.regularizer.eval(k);
        if g < 0.0 {
            return Err(Error::NegativeKernel { k, value: g });
        }
        *v = spec.law.gamma(spec.lambda0, g, k);
    }
    Ok(gamma)
}

/// `(Γ_tot, D_p)` of the raw tabulation, without any divergence checks.
fn raw_moments(spec: &KernelSpec, d: usize, points: usize, length: f64) -> Result<(f64, f64)> {
    let lat = Lattice::new(d, 1, points, length)?;
    let gamma = tabulate(spec, &lat)?;
    let dk = lat.mode_volume();
    let mut tot = 0.0;
    let mut dp = 0.0;
    for (j, g) in gamma.iter().enumerate() {
        tot += g * dk;
        dp += g * dk * lat.mode_k2(j);
    }
    Ok((tot, dp))
}

/// One row of a grid-refinement study.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementRow {
    pub points: usize,
    pub gamma_tot: f64,
    pub d_p: f64,
}

/// `Γ_tot` and `D_p` at `n, 2n, 4n, …` (`levels` rows) for fixed box length.
pub fn refinement_study(
    spec: &KernelSpec,
    lattice: &Lattice,
    levels: usize,
) -> Result<Vec<RefinementRow>> {
    spec.regularizer.validate()?;
    (0..levels)
        .map(|i| {
            let points = lattice.points() << i;
            let (gamma_tot, d_p) =
                raw_moments(spec, lattice.spatial_dim(), points, lattice.length())?;
            Ok(RefinementRow {
                points,
                gamma_tot,
                d_p,
            })
        })
        .collect()
}

fn relative_change(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (b - a).abs() / a.abs().max(b.abs())
    }
}

/// Infrared check for `g/k²` in fewer than three dimensions: the radial
/// integrand `g(k) k^{d-3}` must vanish faster than `1/k` near the origin.
fn infrared_integrable(reg: &Regularizer, d: usize, dk: f64) -> bool {
    if d >= 3 {
        return true;
    }
    let probe = |k: f64| reg.eval(k) * k.powi(d as i32 - 2);
    match reg {
        Regularizer::Table(_) => reg.eval(0.0) == 0.0,
        _ => {
            let a = probe(1e-4 * dk);
            let b = probe(1e-6 * dk);
            // integrable ⇔ the scaled integrand keeps shrinking toward k = 0
            b == 0.0 || b < 0.5 * a
        }
    }
}

pub fn build_kernel(spec: &KernelSpec, lattice: &Lattice) -> Result<RateKernel> {
    if spec.include_zero_mode {
        return Err(Error::ZeroModeRequest);
    }
    if !(spec.lambda0.is_finite() && spec.lambda0 >= 0.0) {
        return Err(Error::InvalidLattice(format!(
            "lambda0 must be non-negative (got {})",
            spec.lambda0
        )));
    }
    spec.regularizer.validate()?;
    let d = lattice.spatial_dim();

    if spec.law == Law::Coulomb3d
        && !infrared_integrable(&spec.regularizer, d, lattice.dual_spacing())
    {
        let msg = format!("g(k)/k² is not integrable at k = 0 in {d} dimension(s)");
        if spec.allow_divergent {
            log::warn!("{msg}; continuing because the override is set");
        } else {
            return Err(Error::DivergentRate(msg));
        }
    }

    let (t1, p1) = raw_moments(spec, d, lattice.points(), lattice.length())?;
    let (t2, p2) = raw_moments(spec, d, 2 * lattice.points(), lattice.length())?;
    if !(t1.is_finite() && p1.is_finite()) {
        return Err(Error::DivergentRate(format!(
            "Γ_tot = {t1}, D_p = {p1} are not finite"
        )));
    }
    let dt = relative_change(t1, t2);
    let dp = relative_change(p1, p2);
    if dt > REFINEMENT_TOLERANCE || dp > REFINEMENT_TOLERANCE {
        let msg = format!(
            "D_p {p1:.4e} -> {p2:.4e}, Γ_tot {t1:.4e} -> {t2:.4e} when n doubles from {}",
            lattice.points()
        );
        if spec.allow_divergent {
            log::warn!("divergent average momentum diffusion rate: {msg}");
        } else {
            return Err(Error::DivergentRate(msg));
        }
    } else if matches!(spec.regularizer, Regularizer::Unregularized) && !spec.allow_divergent {
        return Err(Error::DivergentRate(
            "unregularized kernel requires the allow_divergent override".into(),
        ));
    }

    RateKernel::from_gamma(*lattice, spec.lambda0, tabulate(spec, lattice)?)
}

/// `Λ₀` in natural units for a particle of mass `mass_kg`, with `length_m`
/// as the unit of length and `m·ℓ²/ℏ` as the unit of time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicalScale {
    pub lambda0: f64,
    pub time_unit_s: f64,
}

pub const GRAVITATIONAL_CONSTANT: f64 = 6.674_30e-11;
pub const HBAR: f64 = 1.054_571_817e-34;

pub fn physical_scale(mass_kg: f64, length_m: f64) -> PhysicalScale {
    PhysicalScale {
        lambda0: GRAVITATIONAL_CONSTANT * mass_kg.powi(3) * length_m / (2.0 * PI * PI * HBAR * HBAR),
        time_unit_s: mass_kg * length_m * length_m / HBAR,
    }
}

/// Single-site field `f(y) = -Σ_k r_k m(k)* e^{-ik·y}`; the SN potential is
/// `V(r_1..r_N) = Σ_n (m_n/M) f(r_n)`.
pub fn sn_site_field(kernel: &RateKernel, chi: &CharacteristicTable) -> Vec<f64> {
    let lat = kernel.lattice();
    let coeffs: Vec<Complex64> = chi
        .values
        .iter()
        .zip(kernel.rates())
        .map(|(m, r)| m * *r)
        .collect();
    lat.synthesize_sites(&coeffs)
        .into_iter()
        .map(|v| -v.re)
        .collect()
}

/// Expand a single-site field to configuration space with mass weights.
pub fn configuration_potential(lattice: &Lattice, weights: &[f64], site_field: &[f64]) -> Vec<f64> {
    (0..lattice.len())
        .map(|x| {
            weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(p, w)| w * site_field[lattice.particle_site(x, p)])
                .sum()
        })
        .collect()
}

/// `V_SN` over configuration space. The characteristic function is taken
/// from the normalized state, so any norm is accepted.
pub fn sn_potential(psi: &WaveFunction, kernel: &RateKernel) -> Result<Vec<f64>> {
    psi.lattice().check_site_geometry(kernel.lattice())?;
    if kernel.is_zero() {
        return Ok(vec![0.0; psi.lattice().len()]);
    }
    let chi = characteristic_fn(psi, NormPolicy::Tracked)?;
    let f = sn_site_field(kernel, &chi);
    Ok(configuration_potential(psi.lattice(), &psi.weights(), &f))
}

/// `H_SN ψ` as an amplitude array.
pub fn apply_sn_hamiltonian(psi: &WaveFunction, kernel: &RateKernel) -> Result<Vec<Complex64>> {
    let v = sn_potential(psi, kernel)?;
    Ok(psi.amplitudes().iter().zip(v).map(|(a, v)| a * v).collect())
}

/// `⟨V_SN⟩ = -Σ_k r_k |⟨M_k⟩|²`, evaluated in mode space.
pub fn sn_expectation(psi: &WaveFunction, kernel: &RateKernel) -> Result<f64> {
    let chi = characteristic_fn(psi, NormPolicy::Tracked)?;
    Ok(-kernel
        .active_modes()
        .iter()
        .map(|&j| kernel.rate(j) * chi.at(j).norm_sqr())
        .sum::<f64>())
}

impl Lattice {
    /// Kernels live on the single-particle dual grid, so only `d`, `n` and
    /// `L` have to agree.
    pub fn check_site_geometry(&self, kernel: &Lattice) -> Result<()> {
        if self.spatial_dim() != kernel.spatial_dim()
            || self.points() != kernel.points()
            || self.length() != kernel.length()
        {
            return Err(Error::LatticeMismatch(format!(
                "state on {self:?}, kernel on {kernel:?}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Packet;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_spec(sigma_k: f64) -> KernelSpec {
        KernelSpec::new(Regularizer::Gaussian { sigma_k }, Law::Direct, 1.0)
    }

    fn random_state(lat: Lattice, masses: Vec<f64>, seed: u64) -> WaveFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amps = (0..lat.len())
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        WaveFunction::new(lat, amps, masses).unwrap().normalized()
    }

    #[test]
    fn gaussian_total_rate_matches_quadrature() {
        let lat = Lattice::new(1, 1, 64, 20.0).unwrap();
        let k = gaussian_spec(2.0).build(&lat).unwrap();
        let exact = (8.0 * PI).sqrt();
        // the excluded k = 0 mode contributes Δk·g(0)
        let with_zero = k.gamma_tot() + lat.dual_spacing();
        assert!((with_zero - exact).abs() < 0.01 * exact);
        assert!((k.gamma_tot() - exact).abs() < 0.1 * exact);
    }

    #[test]
    fn sphere_profile_starts_at_one() {
        let reg = kernel_presets("dp_sphere").unwrap().regularizer;
        assert!((reg.eval(1e-9) - 1.0).abs() < 1e-12);
        assert!((reg.eval(0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sphere_transform_matches_radial_quadrature() {
        // f̃(k) = ∫ 4πr² f(r) sin(kr)/(kr) dr with f = 3/(4πR³) inside R
        let radius = 1.3;
        let profile = DpMassProfile::UniformSphere { radius };
        for k in [0.0005, 0.3, 1.0, 2.7, 6.0] {
            let steps = 20_000;
            let h = radius / steps as f64;
            let mut s = 0.0;
            for i in 0..steps {
                let r = (i as f64 + 0.5) * h;
                s += 3.0 / radius.powi(3) * r * r * (k * r).sin() / (k * r) * h;
            }
            assert!((profile.transform(k) - s).abs() < 1e-7, "k={k}");
            let g = Regularizer::DpProfile(profile.clone()).eval(k);
            assert!((g - s * s).abs() < 2e-7);
        }
    }

    #[test]
    fn unregularized_needs_override() {
        let lat = Lattice::new(1, 1, 32, 10.0).unwrap();
        let spec = KernelSpec::new(Regularizer::Unregularized, Law::Direct, 1.0);
        let err = spec.build(&lat).unwrap_err();
        assert!(matches!(err, Error::DivergentRate(_)));
        assert!(err.to_string().contains("divergent average momentum diffusion rate"));
        let k = spec.allow_divergent(true).build(&lat).unwrap();
        assert!(k.gamma_tot() > 0.0);
    }

    #[test]
    fn zero_mode_request_rejected() {
        let lat = Lattice::new(1, 1, 32, 10.0).unwrap();
        let mut spec = gaussian_spec(1.0);
        spec.include_zero_mode = true;
        assert!(matches!(spec.build(&lat), Err(Error::ZeroModeRequest)));
    }

    #[test]
    fn negative_table_rejected() {
        let lat = Lattice::new(1, 1, 16, 10.0).unwrap();
        let dk = lat.dual_spacing();
        let spec = KernelSpec::new(
            Regularizer::Table(vec![(dk, 1.0), (2.0 * dk, -0.5)]),
            Law::Direct,
            1.0,
        );
        assert!(matches!(spec.build(&lat), Err(Error::NegativeKernel { .. })));
    }

    #[test]
    fn coulomb_law_in_one_dimension_needs_infrared_suppression() {
        let lat = Lattice::new(1, 1, 32, 10.0).unwrap();
        let spec = KernelSpec::new(Regularizer::Gaussian { sigma_k: 1.0 }, Law::Coulomb3d, 1.0);
        assert!(matches!(spec.build(&lat), Err(Error::DivergentRate(_))));
        assert!(spec.allow_divergent(true).build(&lat).is_ok());
        let lat3 = Lattice::new(3, 1, 8, 10.0).unwrap();
        let spec3 = KernelSpec::new(Regularizer::Gaussian { sigma_k: 1.0 }, Law::Coulomb3d, 1.0);
        assert!(spec3.build(&lat3).is_ok());
    }

    #[test]
    fn presets() {
        assert!(matches!(kernel_presets("nope"), Err(Error::UnknownPreset(_))));
        let sn = kernel_presets("sn_gaussian").unwrap();
        assert_eq!(sn.regularizer.eval(0.0), 1.0);
        let csl = kernel_presets("csl_like").unwrap();
        let lat = Lattice::new(1, 1, 64, 20.0).unwrap();
        let k = KernelSpec::new(csl.regularizer, csl.law, 1.0).build(&lat).unwrap();
        // Gaussian in k: log γ is linear in k²
        let (a, b, c) = (k.gamma(1), k.gamma(2), k.gamma(3));
        let (k1, k2, k3) = (lat.mode_k2(1), lat.mode_k2(2), lat.mode_k2(3));
        let s1 = (b / a).ln() / (k2 - k1);
        let s2 = (c / b).ln() / (k3 - k2);
        assert!((s1 - s2).abs() < 1e-10 && (s1 + 1.0).abs() < 1e-10);
    }

    #[test]
    fn kernel_is_even() {
        let lat = Lattice::new(2, 1, 8, 6.0).unwrap();
        let k = gaussian_spec(1.5).build(&lat).unwrap();
        for j in 0..lat.sites() {
            assert_eq!(k.gamma(j), k.gamma(lat.conjugate_mode(j)));
        }
        assert_eq!(k.rate(0), 0.0);
    }

    proptest! {
        #[test]
        fn moments_monotone_in_sigma(a in 0.2f64..3.0, b in 0.2f64..3.0) {
            let lat = Lattice::new(1, 1, 64, 20.0).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let kl = gaussian_spec(lo).allow_divergent(true).build(&lat).unwrap();
            let kh = gaussian_spec(hi).allow_divergent(true).build(&lat).unwrap();
            for j in 0..lat.sites() {
                prop_assert!(kl.gamma(j) <= kh.gamma(j));
            }
            prop_assert!(kl.gamma_tot() <= kh.gamma_tot());
            prop_assert!(kl.momentum_diffusion() <= kh.momentum_diffusion());
        }
    }

    #[test]
    fn uniform_state_has_zero_potential() {
        let lat = Lattice::new(1, 1, 32, 10.0).unwrap();
        let psi = WaveFunction::uniform(lat, vec![1.0]).unwrap();
        let k = gaussian_spec(2.0).build(&lat).unwrap();
        let v = sn_potential(&psi, &k).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn potential_matches_direct_mode_sum_and_is_real() {
        let lat = Lattice::new(1, 1, 32, 10.0).unwrap();
        let psi = random_state(lat, vec![1.0], 3);
        let k = gaussian_spec(2.0).build(&lat).unwrap();
        let chi = characteristic_fn(&psi, NormPolicy::Unit).unwrap();
        let v = sn_potential(&psi, &k).unwrap();
        for (s, vs) in v.iter().enumerate() {
            let x = lat.position(s);
            let mut direct = Complex64::new(0.0, 0.0);
            for j in 1..lat.sites() {
                let kk = lat.wave_number(j);
                direct -= k.rate(j) * chi.at(j).conj() * Complex64::from_polar(1.0, -kk * x);
            }
            assert!(direct.im.abs() < 1e-10);
            assert!((direct.re - vs).abs() < 1e-10);
        }
    }

    #[test]
    fn potential_is_translation_covariant() {
        let lat = Lattice::new(1, 2, 16, 8.0).unwrap();
        let psi = random_state(lat, vec![1.0, 2.0], 4);
        let k = gaussian_spec(2.0).build(&lat).unwrap();
        let shift = [3i64, 3];
        let moved = sn_potential(&psi.translated(&shift), &k).unwrap();
        let v = sn_potential(&psi, &k).unwrap();
        let wrapped = psi
            .with_amplitudes(v.iter().map(|x| Complex64::new(*x, 0.0)).collect())
            .translated(&shift);
        for (a, b) in moved.iter().zip(wrapped.amplitudes()) {
            assert!((a - b.re).abs() < 1e-10);
        }
    }

    #[test]
    fn potential_scales_inverse_with_width() {
        // wide packets see g ≈ 1, so ⟨V⟩ ≈ -Λ₀√π/σ
        let lat = Lattice::new(1, 1, 8192, 2000.0).unwrap();
        let k = gaussian_spec(2.0).build(&lat).unwrap();
        let e = |s: f64| {
            let psi = WaveFunction::gaussian(lat, vec![1.0], &[Packet::at(0.0, s)]).unwrap();
            sn_expectation(&psi, &k).unwrap()
        };
        let ratio = e(2.0) / e(4.0);
        assert!((ratio - 2.0).abs() < 0.05 * 2.0, "ratio {ratio}");
    }

    #[test]
    fn expectation_agrees_with_configuration_sum() {
        let lat = Lattice::new(1, 2, 16, 8.0).unwrap();
        let psi = random_state(lat, vec![1.0, 0.5], 6);
        let k = gaussian_spec(1.5).build(&lat).unwrap();
        let v = sn_potential(&psi, &k).unwrap();
        let direct: f64 = v
            .iter()
            .zip(psi.amplitudes())
            .map(|(v, a)| v * a.norm_sqr())
            .sum::<f64>()
            * lat.cell_volume();
        assert!((direct - sn_expectation(&psi, &k).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn two_particle_energy_matches_pair_quadrature() {
        let lat = Lattice::new(1, 2, 32, 16.0).unwrap();
        let psi = WaveFunction::gaussian(
            lat,
            vec![1.0, 1.0],
            &[Packet::at(-4.0, 0.8), Packet::at(4.0, 0.8)],
        )
        .unwrap();
        let k = gaussian_spec(1.0).build(&lat).unwrap();
        // U(u) = Σ_k r_k cos(k u), the smeared pair kernel
        let u = |d: f64| -> f64 {
            (1..lat.sites())
                .map(|j| k.rate(j) * (lat.wave_number(j) * d).cos())
                .sum()
        };
        let rho = psi.density();
        let dv = lat.cell_volume();
        let w = [0.5, 0.5];
        let mut e = 0.0;
        for x in 0..lat.len() {
            for y in 0..lat.len() {
                let mut pair = 0.0;
                for n in 0..2 {
                    for l in 0..2 {
                        let a = lat.position(lat.particle_site(x, n));
                        let b = lat.position(lat.particle_site(y, l));
                        pair += w[n] * w[l] * u(a - b);
                    }
                }
                e -= rho[x] * rho[y] * pair * dv * dv;
            }
        }
        let got = sn_expectation(&psi, &k).unwrap();
        assert!((got - e).abs() < 1e-6 * e.abs(), "{got} vs {e}");
    }

    #[test]
    fn single_particle_reduction_is_exact() {
        let lat = Lattice::new(1, 1, 32, 10.0).unwrap();
        let psi = random_state(lat, vec![2.0], 8);
        let k = gaussian_spec(2.0).build(&lat).unwrap();
        let chi = characteristic_fn(&psi, NormPolicy::Tracked).unwrap();
        let f = sn_site_field(&k, &chi);
        assert_eq!(sn_potential(&psi, &k).unwrap(), f);
    }

    #[test]
    fn refinement_flags_unregularized_growth() {
        let lat = Lattice::new(1, 1, 32, 10.0).unwrap();
        let spec = KernelSpec::new(Regularizer::Unregularized, Law::Direct, 1.0);
        let rows = refinement_study(&spec, &lat, 3).unwrap();
        assert!(rows[1].d_p > 1.1 * rows[0].d_p);
        let g = refinement_study(&gaussian_spec(1.0), &lat, 3).unwrap();
        assert!((g[1].d_p - g[0].d_p).abs() < 1e-9 * g[0].d_p);
    }

    #[test]
    fn physical_scale_underflows_at_desk_scale() {
        let s = physical_scale(1.66e-27, 1e-9);
        assert!(s.lambda0 < 1e-20);
        assert!(s.lambda0 > 0.0);
    }
}
