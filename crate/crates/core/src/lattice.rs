//! Periodic configuration-space lattice, wave functions, density matrices
//! and the spectral conventions shared by every other module.
//!
//! Positions along each axis are centred, `x_i = (i - n/2)·Δx` for
//! `i = 0..n`. Dual-grid arrays are stored in FFT order: index `idx` holds
//! the wave number `k = j·Δk` with `j = idx` for `idx < n/2` and
//! `j = idx - n` otherwise, so the Nyquist entry is `j = -n/2`.
//!
//! The physical forward transform is
//! `φ(k) = Σ_r ψ(r) e^{-ik·r} Δx^D`, and its inverse is
//! `ψ(r) = L^{-D} Σ_k φ(k) e^{ik·r}`.
//!
//! A configuration index is particle-major: the `d` axes of particle 0 come
//! first, then particle 1, and so on, so the single-particle *site* of
//! particle `p` can be read off with [`Lattice::particle_site`].

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectral::{fft_all, fft_axes, Direction};

const C0: Complex64 = Complex64::new(0.0, 0.0);

/// Tolerance on `‖ψ‖²` when a caller promises a unit-norm state.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    spatial_dim: usize,
    particles: usize,
    points: usize,
    length: f64,
}

impl Lattice {
    pub fn new(spatial_dim: usize, particles: usize, points: usize, length: f64) -> Result<Self> {
        if !(1..=3).contains(&spatial_dim) {
            return Err(Error::InvalidLattice(format!(
                "spatial_dim must be 1, 2 or 3 (got {spatial_dim})"
            )));
        }
        if particles == 0 {
            return Err(Error::InvalidLattice("particle count must be ≥ 1".into()));
        }
        if points < 2 || !points.is_power_of_two() {
            return Err(Error::InvalidLattice(format!(
                "points_per_axis must be a power of two (got {points})"
            )));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidLattice(format!(
                "axis_length must be positive (got {length})"
            )));
        }
        let rank = spatial_dim * particles;
        if rank > 6 || (points as f64).powi(rank as i32) > 1.0e8 {
            return Err(Error::InvalidLattice(format!(
                "configuration space n^D = {points}^{rank} is too large"
            )));
        }
        Ok(Self {
            spatial_dim,
            particles,
            points,
            length,
        })
    }

    pub fn spatial_dim(&self) -> usize {
        self.spatial_dim
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Configuration-space dimension `D = d·N`.
    pub fn rank(&self) -> usize {
        self.spatial_dim * self.particles
    }

    /// Number of configuration-space points `n^D`.
    pub fn len(&self) -> usize {
        self.points.pow(self.rank() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of single-particle sites (and of dual modes) `n^d`.
    pub fn sites(&self) -> usize {
        self.points.pow(self.spatial_dim as u32)
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.points as f64
    }

    pub fn dual_spacing(&self) -> f64 {
        2.0 * PI / self.length
    }

    /// `Δx^D`
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.rank() as i32)
    }

    /// `Δx^d`, the measure of one single-particle site.
    pub fn site_volume(&self) -> f64 {
        self.spacing().powi(self.spatial_dim as i32)
    }

    /// `Δk^d`, the measure of one dual mode.
    pub fn mode_volume(&self) -> f64 {
        self.dual_spacing().powi(self.spatial_dim as i32)
    }

    /// Same geometry with `points` replaced, used for refinement checks.
    pub fn with_points(&self, points: usize) -> Result<Self> {
        Self::new(self.spatial_dim, self.particles, points, self.length)
    }

    pub fn position(&self, i: usize) -> f64 {
        (i as f64 - (self.points / 2) as f64) * self.spacing()
    }

    /// Signed integer wave index for an FFT-order index.
    pub fn wave_index(&self, idx: usize) -> i64 {
        let n = self.points as i64;
        let idx = idx as i64;
        if idx < n / 2 {
            idx
        } else {
            idx - n
        }
    }

    pub fn wave_number(&self, idx: usize) -> f64 {
        self.wave_index(idx) as f64 * self.dual_spacing()
    }

    /// Index along `axis` of a flat index into an array of the given rank.
    pub fn axis_index(&self, flat: usize, axis: usize, rank: usize) -> usize {
        (flat / self.points.pow((rank - 1 - axis) as u32)) % self.points
    }

    /// Single-particle site of particle `p` for configuration index `x`.
    pub fn particle_site(&self, x: usize, p: usize) -> usize {
        let sites = self.sites();
        (x / sites.pow((self.particles - 1 - p) as u32)) % sites
    }

    /// Wave vector of a d-dimensional mode (FFT-order flat index).
    pub fn mode_vector(&self, mode: usize) -> Vec<f64> {
        (0..self.spatial_dim)
            .map(|a| self.wave_number(self.axis_index(mode, a, self.spatial_dim)))
            .collect()
    }

    pub fn mode_k2(&self, mode: usize) -> f64 {
        self.mode_vector(mode).iter().map(|k| k * k).sum()
    }

    /// Mode holding `-k` (the Nyquist component maps onto itself).
    pub fn conjugate_mode(&self, mode: usize) -> usize {
        let n = self.points;
        (0..self.spatial_dim).fold(0, |acc, a| {
            let idx = self.axis_index(mode, a, self.spatial_dim);
            acc * n + (n - idx) % n
        })
    }

    /// Mode sum `k + q` on the periodic dual grid.
    pub fn add_modes(&self, a: usize, b: usize) -> usize {
        let n = self.points;
        (0..self.spatial_dim).fold(0, |acc, ax| {
            let i = self.axis_index(a, ax, self.spatial_dim);
            let j = self.axis_index(b, ax, self.spatial_dim);
            acc * n + (i + j) % n
        })
    }

    /// Locate a wave vector on the dual grid.
    pub fn mode_of(&self, k: &[f64]) -> Result<usize> {
        if k.len() != self.spatial_dim {
            return Err(Error::OffGrid(k.to_vec()));
        }
        let n = self.points as i64;
        let mut flat = 0usize;
        for &ka in k {
            let j = ka / self.dual_spacing();
            let jr = j.round();
            if !j.is_finite() || (j - jr).abs() > 1e-9 * jr.abs().max(1.0) {
                return Err(Error::OffGrid(k.to_vec()));
            }
            let jr = jr as i64;
            if jr < -n / 2 || jr >= n / 2 {
                return Err(Error::OffGrid(k.to_vec()));
            }
            flat = flat * self.points + jr.rem_euclid(n) as usize;
        }
        Ok(flat)
    }

    /// `e^{-ik·r}` for a d-dimensional mode and site, evaluated from integer
    /// arithmetic so that all kicks are exactly unit-modulus.
    pub fn kick_phase(&self, mode: usize, site: usize) -> Complex64 {
        let n = self.points as i64;
        let half = n / 2;
        let mut q = 0i64;
        for a in 0..self.spatial_dim {
            let j = self.wave_index(self.axis_index(mode, a, self.spatial_dim));
            let i = self.axis_index(site, a, self.spatial_dim) as i64 - half;
            q += j * i;
        }
        let q = q.rem_euclid(n);
        Complex64::from_polar(1.0, -2.0 * PI * q as f64 / n as f64)
    }

    /// Coordinates of a single-particle site.
    pub fn site_position(&self, site: usize) -> Vec<f64> {
        (0..self.spatial_dim)
            .map(|a| self.position(self.axis_index(site, a, self.spatial_dim)))
            .collect()
    }

    /// `(-1)^{Σ idx}` relating the raw DFT to the centred-grid transform.
    pub(crate) fn grid_sign(&self, flat: usize, rank: usize) -> f64 {
        let parity: usize = (0..rank).map(|a| self.axis_index(flat, a, rank)).sum();
        if parity.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }

    /// `Σ_r f(r) e^{-ik·r}` over single-particle sites, for every mode.
    pub fn analyze_sites(&self, field: &[Complex64]) -> Vec<Complex64> {
        let d = self.spatial_dim;
        let mut out = field.to_vec();
        fft_all(&mut out, self.points, d, Direction::Forward);
        for (m, v) in out.iter_mut().enumerate() {
            *v *= self.grid_sign(m, d);
        }
        out
    }

    /// `Σ_k c(k) e^{ik·r}` over modes, for every single-particle site.
    pub fn synthesize_sites(&self, coeffs: &[Complex64]) -> Vec<Complex64> {
        let d = self.spatial_dim;
        let mut out: Vec<Complex64> = coeffs
            .iter()
            .enumerate()
            .map(|(m, c)| c * self.grid_sign(m, d))
            .collect();
        fft_all(&mut out, self.points, d, Direction::Inverse);
        out
    }

    pub fn check_same(&self, other: &Lattice) -> Result<()> {
        if self != other {
            return Err(Error::LatticeMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveFunction {
    lattice: Lattice,
    amplitudes: Vec<Complex64>,
    masses: Vec<f64>,
}

/// A Gaussian packet of one particle: `|ψ|²` has per-axis variance `width²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Packet {
    pub center: Vec<f64>,
    pub momentum: Vec<f64>,
    pub width: f64,
}

impl Packet {
    pub fn at(center: f64, width: f64) -> Self {
        Self {
            center: vec![center],
            momentum: vec![0.0],
            width,
        }
    }

    fn amplitude(&self, lattice: &Lattice, site: usize) -> Complex64 {
        let l = lattice.length();
        let mut expo = 0.0;
        let mut phase = 0.0;
        for (a, x) in lattice.site_position(site).into_iter().enumerate() {
            // minimum image keeps packets near the boundary smooth
            let mut dx = x - self.center[a];
            dx -= l * (dx / l).round();
            expo -= dx * dx / (4.0 * self.width * self.width);
            phase += self.momentum[a] * x;
        }
        Complex64::from_polar(expo.exp(), phase)
    }
}

impl WaveFunction {
    pub fn new(lattice: Lattice, amplitudes: Vec<Complex64>, masses: Vec<f64>) -> Result<Self> {
        if amplitudes.len() != lattice.len() {
            return Err(Error::LatticeMismatch(format!(
                "{} amplitudes for a lattice of {} points",
                amplitudes.len(),
                lattice.len()
            )));
        }
        if masses.len() != lattice.particles() {
            return Err(Error::LatticeMismatch(format!(
                "{} masses for {} particles",
                masses.len(),
                lattice.particles()
            )));
        }
        if masses.iter().any(|m| !(m.is_finite() && *m >= 0.0)) || masses.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidLattice(format!("invalid masses {masses:?}")));
        }
        Ok(Self {
            lattice,
            amplitudes,
            masses,
        })
    }

    /// Normalized product of Gaussian packets, one per particle.
    pub fn gaussian(lattice: Lattice, masses: Vec<f64>, packets: &[Packet]) -> Result<Self> {
        if packets.len() != lattice.particles() {
            return Err(Error::LatticeMismatch(format!(
                "{} packets for {} particles",
                packets.len(),
                lattice.particles()
            )));
        }
        for p in packets {
            if p.center.len() != lattice.spatial_dim()
                || p.momentum.len() != lattice.spatial_dim()
                || p.width <= 0.0
            {
                return Err(Error::InvalidLattice(format!("bad packet {p:?}")));
            }
        }
        let amps = (0..lattice.len())
            .map(|x| {
                packets
                    .iter()
                    .enumerate()
                    .map(|(p, pk)| pk.amplitude(&lattice, lattice.particle_site(x, p)))
                    .product()
            })
            .collect();
        let mut psi = Self::new(lattice, amps, masses)?;
        psi.normalize();
        Ok(psi)
    }

    /// Normalized coherent sum `Σ c_i ψ_i`.
    pub fn superposition(terms: &[(Complex64, WaveFunction)]) -> Result<Self> {
        let first = &terms
            .first()
            .ok_or_else(|| Error::InvalidLattice("empty superposition".into()))?
            .1;
        let mut amps = vec![C0; first.lattice.len()];
        for (c, psi) in terms {
            first.lattice.check_same(&psi.lattice)?;
            for (a, b) in amps.iter_mut().zip(&psi.amplitudes) {
                *a += c * b;
            }
        }
        let mut out = Self::new(first.lattice, amps, first.masses.clone())?;
        out.normalize();
        Ok(out)
    }

    /// Single-particle plane wave `e^{ik·r}/√V`.
    pub fn plane_wave(lattice: Lattice, mass: f64, k: &[f64]) -> Result<Self> {
        if lattice.particles() != 1 {
            return Err(Error::InvalidLattice("plane_wave is single-particle".into()));
        }
        let mode = lattice.mode_of(k)?;
        let amp = lattice.length().powf(-(lattice.spatial_dim() as f64) / 2.0);
        let amps = (0..lattice.len())
            .map(|s| lattice.kick_phase(mode, s).conj() * amp)
            .collect();
        Self::new(lattice, amps, vec![mass])
    }

    pub fn uniform(lattice: Lattice, masses: Vec<f64>) -> Result<Self> {
        let amp = lattice.length().powf(-(lattice.rank() as f64) / 2.0);
        Self::new(lattice, vec![Complex64::new(amp, 0.0); lattice.len()], masses)
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn amplitudes_mut(&mut self) -> &mut [Complex64] {
        &mut self.amplitudes
    }

    pub fn into_amplitudes(self) -> Vec<Complex64> {
        self.amplitudes
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Mass weights `m_n / M`.
    pub fn weights(&self) -> Vec<f64> {
        let m = self.total_mass();
        self.masses.iter().map(|x| x / m).collect()
    }

    /// Same lattice and masses, new amplitudes.
    pub fn with_amplitudes(&self, amplitudes: Vec<Complex64>) -> Self {
        assert_eq!(amplitudes.len(), self.amplitudes.len());
        Self {
            lattice: self.lattice,
            amplitudes,
            masses: self.masses.clone(),
        }
    }

    pub fn norm2(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>() * self.lattice.cell_volume()
    }

    pub fn normalize(&mut self) {
        let s = self.norm2().sqrt();
        if s > 0.0 {
            for a in &mut self.amplitudes {
                *a /= s;
            }
        }
    }

    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        out.normalize();
        out
    }

    /// `⟨self|other⟩ = Σ conj(ψ) χ Δx^D`
    pub fn inner(&self, other: &WaveFunction) -> Complex64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum::<Complex64>()
            * self.lattice.cell_volume()
    }

    pub fn is_finite(&self) -> bool {
        self.amplitudes
            .iter()
            .all(|a| a.re.is_finite() && a.im.is_finite())
    }

    pub fn density(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    /// Marginal `|ψ|²` of one particle on its single-particle sites.
    pub fn marginal(&self, particle: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.lattice.sites()];
        for (x, a) in self.amplitudes.iter().enumerate() {
            out[self.lattice.particle_site(x, particle)] += a.norm_sqr();
        }
        out
    }

    /// Periodic grid translation by whole grid points along each axis.
    pub fn translated(&self, shifts: &[i64]) -> Self {
        let lat = self.lattice;
        let rank = lat.rank();
        assert_eq!(shifts.len(), rank);
        let n = lat.points() as i64;
        let mut out = vec![C0; lat.len()];
        for (x, a) in self.amplitudes.iter().enumerate() {
            let mut y = 0usize;
            for (ax, s) in shifts.iter().enumerate() {
                let i = lat.axis_index(x, ax, rank) as i64;
                y = y * lat.points() + (i + s).rem_euclid(n) as usize;
            }
            out[y] = *a;
        }
        self.with_amplitudes(out)
    }

    /// Swap the coordinates of two particles.
    pub fn swapped(&self, p: usize, q: usize) -> Self {
        let lat = self.lattice;
        let sites = lat.sites();
        let np = lat.particles();
        let mut out = vec![C0; lat.len()];
        for (x, a) in self.amplitudes.iter().enumerate() {
            let mut s: Vec<usize> = (0..np).map(|i| lat.particle_site(x, i)).collect();
            s.swap(p, q);
            let y = s.iter().fold(0, |acc, v| acc * sites + v);
            out[y] = *a;
        }
        self.with_amplitudes(out)
    }
}

/// Momentum-space amplitudes `φ(k) = Σ ψ(r) e^{-ik·r} Δx^D`, FFT order over
/// all `D` configuration axes.
pub fn forward_transform(psi: &WaveFunction) -> Vec<Complex64> {
    let lat = psi.lattice;
    let rank = lat.rank();
    let mut out = psi.amplitudes.clone();
    fft_all(&mut out, lat.points(), rank, Direction::Forward);
    let dv = lat.cell_volume();
    for (m, v) in out.iter_mut().enumerate() {
        *v *= lat.grid_sign(m, rank) * dv;
    }
    out
}

/// Inverse of [`forward_transform`].
pub fn inverse_transform(lattice: &Lattice, phi: &[Complex64]) -> Vec<Complex64> {
    let rank = lattice.rank();
    let mut out: Vec<Complex64> = phi
        .iter()
        .enumerate()
        .map(|(m, v)| v * lattice.grid_sign(m, rank))
        .collect();
    fft_all(&mut out, lattice.points(), rank, Direction::Inverse);
    let scale = lattice.length().powi(rank as i32).recip();
    for v in &mut out {
        *v *= scale;
    }
    out
}

/// How [`characteristic_fn`] treats the norm of its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPolicy {
    /// The state must be unit-norm within [`UNIT_NORM_TOL`].
    Unit,
    /// Divide by `‖ψ‖²` (diffusive trajectories).
    Tracked,
}

/// `m(k)` for one particle, or `⟨M_k⟩` for N particles, on the d-dimensional
/// dual grid (FFT order, `k = 0` included).
#[derive(Clone, Debug, PartialEq)]
pub struct CharacteristicTable {
    pub lattice: Lattice,
    pub values: Vec<Complex64>,
}

impl CharacteristicTable {
    pub fn at(&self, mode: usize) -> Complex64 {
        self.values[mode]
    }
}

pub fn characteristic_fn(psi: &WaveFunction, policy: NormPolicy) -> Result<CharacteristicTable> {
    let lat = psi.lattice;
    let norm2 = psi.norm2();
    if policy == NormPolicy::Unit && (norm2 - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::NonUnitNorm { norm2 });
    }
    let mut values = vec![C0; lat.sites()];
    let scale = lat.cell_volume() / norm2;
    for (p, w) in psi.weights().into_iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let marginal: Vec<Complex64> = psi
            .marginal(p)
            .into_iter()
            .map(|r| Complex64::new(r, 0.0))
            .collect();
        for (v, t) in values.iter_mut().zip(lat.analyze_sites(&marginal)) {
            *v += t * (w * scale);
        }
    }
    Ok(CharacteristicTable {
        lattice: lat,
        values,
    })
}

/// Which shift operator [`apply_shift`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftTarget {
    /// `e^{-ik·r_p}` on one particle (unitary).
    Particle(usize),
    /// `M_k = Σ_n (m_n/M) e^{-ik·r_n}` (non-unitary for N > 1).
    Weighted,
}

/// Pointwise value of `M_k` (or a single-particle kick) at configuration `x`.
pub(crate) fn shift_factor(
    lat: &Lattice,
    weights: &[f64],
    mode: usize,
    x: usize,
    target: ShiftTarget,
) -> Complex64 {
    match target {
        ShiftTarget::Particle(p) => lat.kick_phase(mode, lat.particle_site(x, p)),
        ShiftTarget::Weighted => weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(p, w)| lat.kick_phase(mode, lat.particle_site(x, p)) * *w)
            .sum(),
    }
}

pub fn apply_shift(psi: &WaveFunction, k: &[f64], target: ShiftTarget) -> Result<WaveFunction> {
    let lat = psi.lattice;
    let mode = lat.mode_of(k)?;
    apply_shift_mode(psi, mode, target)
}

pub fn apply_shift_mode(
    psi: &WaveFunction,
    mode: usize,
    target: ShiftTarget,
) -> Result<WaveFunction> {
    let lat = psi.lattice;
    if let ShiftTarget::Particle(p) = target {
        if p >= lat.particles() {
            return Err(Error::InvalidLattice(format!("no particle {p}")));
        }
    }
    let w = psi.weights();
    let amps = psi
        .amplitudes
        .iter()
        .enumerate()
        .map(|(x, a)| a * shift_factor(&lat, &w, mode, x, target))
        .collect();
    Ok(psi.with_amplitudes(amps))
}

/// Precomputed integer data for fast, exact `e^{-ik·r}` lookups.
#[derive(Clone, Debug)]
pub struct KickTable {
    lattice: Lattice,
    wave: Vec<[i64; 3]>,
    centred: Vec<[i64; 3]>,
    roots: Vec<Complex64>,
}

impl KickTable {
    pub fn new(lattice: &Lattice) -> Self {
        let d = lattice.spatial_dim();
        let n = lattice.points();
        let half = (n / 2) as i64;
        let mut wave = Vec::with_capacity(lattice.sites());
        let mut centred = Vec::with_capacity(lattice.sites());
        for m in 0..lattice.sites() {
            let mut w = [0i64; 3];
            let mut c = [0i64; 3];
            for a in 0..d {
                let idx = lattice.axis_index(m, a, d);
                w[a] = lattice.wave_index(idx);
                c[a] = idx as i64 - half;
            }
            wave.push(w);
            centred.push(c);
        }
        let roots = (0..n)
            .map(|q| Complex64::from_polar(1.0, -2.0 * PI * q as f64 / n as f64))
            .collect();
        Self {
            lattice: *lattice,
            wave,
            centred,
            roots,
        }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    /// `e^{-ik_mode·r_site}`
    #[inline]
    pub fn phase(&self, mode: usize, site: usize) -> Complex64 {
        let w = &self.wave[mode];
        let c = &self.centred[site];
        let q = w[0] * c[0] + w[1] * c[1] + w[2] * c[2];
        self.roots[q.rem_euclid(self.roots.len() as i64) as usize]
    }

    /// `M_k(X) = Σ_n w_n e^{-ik·r_n}` at configuration index `x`.
    #[inline]
    pub fn weighted(&self, weights: &[f64], mode: usize, x: usize) -> Complex64 {
        if weights.len() == 1 {
            return self.phase(mode, x);
        }
        let mut acc = C0;
        for (p, w) in weights.iter().enumerate() {
            if *w != 0.0 {
                acc += self.phase(mode, self.lattice.particle_site(x, p)) * *w;
            }
        }
        acc
    }

    /// `M_k` over all of configuration space.
    pub fn weighted_row(&self, weights: &[f64], mode: usize) -> Vec<Complex64> {
        (0..self.lattice.len())
            .map(|x| self.weighted(weights, mode, x))
            .collect()
    }
}

/// Expectation values along configuration axis 0 (the first coordinate of
/// particle 0), normalized by the state's norm or trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Observables {
    pub norm2: f64,
    pub x_mean: f64,
    pub x2_mean: f64,
    pub p_mean: f64,
    pub p2_mean: f64,
    /// `|ψ(r)|²` (or the diagonal of ρ) divided by the norm.
    pub density: Vec<f64>,
    /// `ℓ(s) = Σ_r |ρ(r, r + s ê₀)| Δx^D` for lags `s = 0, Δx, …`.
    pub coherence: Vec<f64>,
}

fn axis0_moments(lat: &Lattice, spectrum: &[Complex64]) -> (f64, f64, f64) {
    let rank = lat.rank();
    let (mut w, mut p, mut p2) = (0.0, 0.0, 0.0);
    for (m, v) in spectrum.iter().enumerate() {
        let k = lat.wave_number(lat.axis_index(m, 0, rank));
        let a = v.norm_sqr();
        w += a;
        p += k * a;
        p2 += k * k * a;
    }
    (w, p, p2)
}

pub fn observables(psi: &WaveFunction) -> Observables {
    let lat = psi.lattice;
    let rank = lat.rank();
    let dv = lat.cell_volume();
    let norm2 = psi.norm2();
    let mut x1 = 0.0;
    let mut x2 = 0.0;
    for (i, a) in psi.amplitudes.iter().enumerate() {
        let x = lat.position(lat.axis_index(i, 0, rank));
        x1 += x * a.norm_sqr();
        x2 += x * x * a.norm_sqr();
    }
    let mut spec = psi.amplitudes.clone();
    fft_axes(&mut spec, lat.points(), rank, &[0], Direction::Forward);
    let (w, p1, p2) = axis0_moments(&lat, &spec);
    let coherence = (0..lat.points())
        .map(|s| {
            (0..lat.len())
                .map(|x| (psi.amplitudes[x] * psi.amplitudes[shift_axis0(&lat, x, s)].conj()).norm())
                .sum::<f64>()
                * dv
                / norm2
        })
        .collect();
    Observables {
        norm2,
        x_mean: x1 * dv / norm2,
        x2_mean: x2 * dv / norm2,
        p_mean: p1 / w,
        p2_mean: p2 / w,
        density: psi.density().into_iter().map(|r| r / norm2).collect(),
        coherence,
    }
}

/// Configuration index reached from `x` by `s` grid steps along axis 0.
pub(crate) fn shift_axis0(lat: &Lattice, x: usize, s: usize) -> usize {
    let rank = lat.rank();
    let stride = lat.points().pow((rank - 1) as u32);
    let i = lat.axis_index(x, 0, rank);
    let j = (i + s) % lat.points();
    x - i * stride + j * stride
}

/// Position-basis density matrix `ρ(r, r')` normalized so that
/// `tr ρ · Δx^D = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    pub lattice: Lattice,
    pub entries: DMatrix<Complex64>,
}

impl DensityMatrix {
    pub fn zeros(lattice: Lattice) -> Self {
        let n = lattice.len();
        Self {
            lattice,
            entries: DMatrix::zeros(n, n),
        }
    }

    /// `|ψ⟩⟨ψ|` without renormalization.
    pub fn from_pure(psi: &WaveFunction) -> Self {
        let a = psi.amplitudes();
        let n = a.len();
        Self {
            lattice: psi.lattice,
            entries: DMatrix::from_fn(n, n, |i, j| a[i] * a[j].conj()),
        }
    }

    /// `tr ρ · Δx^D`
    pub fn trace(&self) -> Complex64 {
        self.entries.trace() * self.lattice.cell_volume()
    }

    pub fn hermiticity_error(&self) -> f64 {
        let e = &self.entries;
        let mut worst = 0.0f64;
        for i in 0..e.nrows() {
            for j in 0..=i {
                worst = worst.max((e[(i, j)] - e[(j, i)].conj()).norm());
            }
        }
        worst
    }

    /// The operator matrix in the orthonormal grid basis (`ρ·Δx^D`).
    pub fn operator(&self) -> DMatrix<Complex64> {
        &self.entries * Complex64::new(self.lattice.cell_volume(), 0.0)
    }

    pub fn observables(&self) -> Observables {
        let lat = self.lattice;
        let rank = lat.rank();
        let dv = lat.cell_volume();
        let e = &self.entries;
        let tr = self.trace().re;
        let mut x1 = 0.0;
        let mut x2 = 0.0;
        for i in 0..lat.len() {
            let x = lat.position(lat.axis_index(i, 0, rank));
            x1 += x * e[(i, i)].re;
            x2 += x * x * e[(i, i)].re;
        }
        // tr(p^s ρ): apply p^s to each column and read the diagonal
        let mut p1 = C0;
        let mut p2 = C0;
        let n = lat.points() as f64;
        let mut col = vec![C0; lat.len()];
        let mut buf = vec![C0; lat.len()];
        for c in 0..lat.len() {
            for (r, v) in col.iter_mut().enumerate() {
                *v = e[(r, c)];
            }
            fft_axes(&mut col, lat.points(), rank, &[0], Direction::Forward);
            for power in [1, 2] {
                for (m, (b, v)) in buf.iter_mut().zip(&col).enumerate() {
                    let k = lat.wave_number(lat.axis_index(m, 0, rank));
                    *b = v * k.powi(power);
                }
                fft_axes(&mut buf, lat.points(), rank, &[0], Direction::Inverse);
                let d = buf[c] / n;
                if power == 1 {
                    p1 += d;
                } else {
                    p2 += d;
                }
            }
        }
        let coherence = (0..lat.points())
            .map(|s| {
                (0..lat.len())
                    .map(|x| e[(x, shift_axis0(&lat, x, s))].norm())
                    .sum::<f64>()
                    * dv
                    / tr
            })
            .collect();
        Observables {
            norm2: tr,
            x_mean: x1 * dv / tr,
            x2_mean: x2 * dv / tr,
            p_mean: p1.re * dv / tr,
            p2_mean: p2.re * dv / tr,
            density: (0..lat.len()).map(|i| e[(i, i)].re / tr).collect(),
            coherence,
        }
    }

    /// Eigenvalues of the Hermitian part of the operator `ρ·Δx^D`.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let op = self.operator();
        let herm = (&op + op.adjoint()) * Complex64::new(0.5, 0.0);
        nalgebra::linalg::SymmetricEigen::new(herm)
            .eigenvalues
            .iter()
            .copied()
            .collect()
    }

    /// Imaginary residue of the momentum moments, for consistency checks.
    pub fn momentum_imag_residue(&self) -> f64 {
        let lat = self.lattice;
        let rank = lat.rank();
        let mut acc = C0;
        let e = &self.entries;
        let mut col = vec![C0; lat.len()];
        for c in 0..lat.len() {
            for (r, v) in col.iter_mut().enumerate() {
                *v = e[(r, c)];
            }
            fft_axes(&mut col, lat.points(), rank, &[0], Direction::Forward);
            for (m, v) in col.iter_mut().enumerate() {
                *v *= lat.wave_number(lat.axis_index(m, 0, rank));
            }
            fft_axes(&mut col, lat.points(), rank, &[0], Direction::Inverse);
            acc += col[c] / lat.points() as f64;
        }
        (acc * lat.cell_volume()).im.abs()
    }
}
