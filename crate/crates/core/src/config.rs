//! TOML run configuration.
//!
//! Parsing collects every violation instead of stopping at the first one,
//! rejects unknown keys, fills defaults, and then checks the guards of the
//! downstream modules. [`RunConfig::emit`] writes a document that parses
//! back to an identical configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use toml::{Table, Value};

use crate::ensemble::{EnsembleSpec, InitialState, SeedPlan, Unraveling};
use crate::error::{Error, Result};
use crate::kernels::{preset_with, DpMassProfile, KernelSpec, Law, RateKernel, Regularizer};
use crate::lattice::{Lattice, Packet, WaveFunction};
use crate::master::DENSE_LIMIT;
use crate::pdp::RATE_ERROR;
use crate::diffusive::STEP_GUARD;
use crate::propagator::{ExternalPotential, Refresh, StepSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatticeSection {
    pub spatial_dim: usize,
    pub particles: usize,
    pub points_per_axis: usize,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelSection {
    pub preset: Option<String>,
    pub regularizer: Regularizer,
    pub law: Law,
    pub lambda0: f64,
    /// Rescale `Λ₀` so that `Γ_tot` takes this value on the run lattice.
    pub gamma_tot: Option<f64>,
    pub allow_divergent: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsSection {
    pub unraveling: Unraveling,
    pub dt: f64,
    pub t_final: f64,
    pub output_times: Vec<f64>,
    pub refresh: Refresh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSection {
    pub trajectories: usize,
    pub master_seed: u64,
    pub workers: Option<usize>,
    pub log_jumps: bool,
}

/// How to build a wave function.
#[derive(Clone, Debug, PartialEq)]
pub enum StateSpec {
    /// One packet per particle.
    Gaussian(Vec<Packet>),
    /// Normalized sum of product packets with complex amplitudes.
    Superposition(Vec<(Complex64, Vec<Packet>)>),
    /// Amplitudes stored by [`crate::io::write_state`].
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoSignalSection {
    pub first: Vec<(f64, StateSpec)>,
    pub second: Vec<(f64, StateSpec)>,
    pub seeds: [u64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Coherence offset `s₀` in sites along the first axis.
    pub coherence_offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalSection {
    pub mass_kg: f64,
    pub length_m: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub lattice: LatticeSection,
    pub masses: Vec<f64>,
    pub potential: ExternalPotential,
    pub kernel: KernelSection,
    pub dynamics: DynamicsSection,
    pub ensemble: EnsembleSection,
    pub initial: StateSpec,
    pub nosignal: Option<NoSignalSection>,
    pub output: OutputSection,
    pub physical: Option<PhysicalSection>,
}

struct Walker {
    violations: Vec<Violation>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

impl Walker {
    fn fail(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }

    fn keys(&mut self, t: &Table, path: &str, allowed: &[&str]) {
        for k in t.keys() {
            if !allowed.contains(&k.as_str()) {
                self.fail(join(path, k), "unknown key");
            }
        }
    }

    fn table<'a>(&mut self, t: &'a Table, key: &str, path: &str, required: bool) -> Option<&'a Table> {
        match t.get(key) {
            Some(Value::Table(x)) => Some(x),
            Some(v) => {
                self.fail(join(path, key), format!("expected a table, found {}", type_name(v)));
                None
            }
            None => {
                if required {
                    self.fail(join(path, key), "missing section");
                }
                None
            }
        }
    }

    fn float(&mut self, t: &Table, key: &str, path: &str) -> Option<f64> {
        match t.get(key) {
            Some(Value::Float(x)) => Some(*x),
            Some(Value::Integer(i)) => Some(*i as f64),
            Some(v) => {
                self.fail(join(path, key), format!("expected a number, found {}", type_name(v)));
                None
            }
            None => None,
        }
    }

    fn req_float(&mut self, t: &Table, key: &str, path: &str) -> Option<f64> {
        let v = self.float(t, key, path);
        if v.is_none() && !t.contains_key(key) {
            self.fail(join(path, key), "missing key");
        }
        v
    }

    fn int(&mut self, t: &Table, key: &str, path: &str) -> Option<u64> {
        match t.get(key) {
            Some(Value::Integer(i)) if *i >= 0 => Some(*i as u64),
            Some(Value::Integer(_)) => {
                self.fail(join(path, key), "must be non-negative");
                None
            }
            Some(v) => {
                self.fail(join(path, key), format!("expected an integer, found {}", type_name(v)));
                None
            }
            None => None,
        }
    }

    fn req_int(&mut self, t: &Table, key: &str, path: &str) -> Option<u64> {
        let v = self.int(t, key, path);
        if v.is_none() && !t.contains_key(key) {
            self.fail(join(path, key), "missing key");
        }
        v
    }

    fn boolean(&mut self, t: &Table, key: &str, path: &str) -> Option<bool> {
        match t.get(key) {
            Some(Value::Boolean(b)) => Some(*b),
            Some(v) => {
                self.fail(join(path, key), format!("expected a boolean, found {}", type_name(v)));
                None
            }
            None => None,
        }
    }

    fn string<'a>(&mut self, t: &'a Table, key: &str, path: &str) -> Option<&'a str> {
        match t.get(key) {
            Some(Value::String(s)) => Some(s),
            Some(v) => {
                self.fail(join(path, key), format!("expected a string, found {}", type_name(v)));
                None
            }
            None => None,
        }
    }

    fn floats(&mut self, t: &Table, key: &str, path: &str) -> Option<Vec<f64>> {
        match t.get(key) {
            Some(Value::Array(a)) => {
                let mut out = Vec::with_capacity(a.len());
                for (i, v) in a.iter().enumerate() {
                    match v {
                        Value::Float(x) => out.push(*x),
                        Value::Integer(x) => out.push(*x as f64),
                        other => {
                            self.fail(
                                format!("{}[{i}]", join(path, key)),
                                format!("expected a number, found {}", type_name(other)),
                            );
                            return None;
                        }
                    }
                }
                Some(out)
            }
            Some(v) => {
                self.fail(join(path, key), format!("expected an array, found {}", type_name(v)));
                None
            }
            None => None,
        }
    }

    fn tables<'a>(&mut self, t: &'a Table, key: &str, path: &str) -> Option<Vec<&'a Table>> {
        match t.get(key) {
            Some(Value::Array(a)) => {
                let mut out = Vec::new();
                for (i, v) in a.iter().enumerate() {
                    match v {
                        Value::Table(x) => out.push(x),
                        other => {
                            self.fail(
                                format!("{}[{i}]", join(path, key)),
                                format!("expected a table, found {}", type_name(other)),
                            );
                            return None;
                        }
                    }
                }
                Some(out)
            }
            Some(v) => {
                self.fail(join(path, key), format!("expected an array of tables, found {}", type_name(v)));
                None
            }
            None => None,
        }
    }

    fn packet(&mut self, t: &Table, path: &str, d: usize) -> Option<Packet> {
        self.keys(t, path, &["center", "momentum", "width"]);
        let center = self.floats(t, "center", path);
        if center.is_none() && !t.contains_key("center") {
            self.fail(join(path, "center"), "missing key");
        }
        let momentum = self.floats(t, "momentum", path).unwrap_or_else(|| vec![0.0; d]);
        let width = self.req_float(t, "width", path);
        let center = center?;
        let width = width?;
        if center.len() != d {
            self.fail(join(path, "center"), format!("needs {d} components"));
        }
        if momentum.len() != d {
            self.fail(join(path, "momentum"), format!("needs {d} components"));
        }
        if !(width.is_finite() && width > 0.0) {
            self.fail(join(path, "width"), "must be positive");
        }
        Some(Packet {
            center,
            momentum,
            width,
        })
    }

    fn packets(&mut self, t: &Table, path: &str, d: usize, particles: usize) -> Option<Vec<Packet>> {
        let list = self.tables(t, "packets", path);
        if list.is_none() && !t.contains_key("packets") {
            self.fail(join(path, "packets"), "missing key");
        }
        let list = list?;
        if list.len() != particles {
            self.fail(
                join(path, "packets"),
                format!("needs one packet per particle ({particles})"),
            );
        }
        let out: Vec<Option<Packet>> = list
            .iter()
            .enumerate()
            .map(|(i, p)| self.packet(p, &format!("{}[{i}]", join(path, "packets")), d))
            .collect();
        out.into_iter().collect()
    }

    fn state(&mut self, t: &Table, path: &str, d: usize, particles: usize, extra: &[&str]) -> Option<StateSpec> {
        let kind = self.string(t, "kind", path).unwrap_or("gaussian").to_string();
        match kind.as_str() {
            "gaussian" => {
                let mut allowed = vec!["kind", "packets"];
                allowed.extend_from_slice(extra);
                self.keys(t, path, &allowed);
                self.packets(t, path, d, particles).map(StateSpec::Gaussian)
            }
            "superposition" => {
                let mut allowed = vec!["kind", "terms"];
                allowed.extend_from_slice(extra);
                self.keys(t, path, &allowed);
                let terms = self.tables(t, "terms", path);
                if terms.is_none() && !t.contains_key("terms") {
                    self.fail(join(path, "terms"), "missing key");
                }
                let terms = terms?;
                if terms.is_empty() {
                    self.fail(join(path, "terms"), "needs at least one term");
                }
                let mut out = Vec::new();
                let mut ok = true;
                for (i, term) in terms.iter().enumerate() {
                    let p = format!("{}[{i}]", join(path, "terms"));
                    self.keys(term, &p, &["amplitude", "packets"]);
                    let amp = match self.floats(term, "amplitude", &p) {
                        Some(a) if a.len() == 2 => Complex64::new(a[0], a[1]),
                        Some(_) => {
                            self.fail(join(&p, "amplitude"), "expected [re, im]");
                            ok = false;
                            continue;
                        }
                        None => Complex64::new(1.0, 0.0),
                    };
                    match self.packets(term, &p, d, particles) {
                        Some(pk) => out.push((amp, pk)),
                        None => ok = false,
                    }
                }
                ok.then_some(StateSpec::Superposition(out))
            }
            "file" => {
                let mut allowed = vec!["kind", "path"];
                allowed.extend_from_slice(extra);
                self.keys(t, path, &allowed);
                match self.string(t, "path", path) {
                    Some(p) => Some(StateSpec::File(PathBuf::from(p))),
                    None => {
                        if !t.contains_key("path") {
                            self.fail(join(path, "path"), "missing key");
                        }
                        None
                    }
                }
            }
            other => {
                self.fail(
                    join(path, "kind"),
                    format!("unknown state kind `{other}` (gaussian, superposition, file)"),
                );
                None
            }
        }
    }

    fn members(&mut self, t: &Table, key: &str, path: &str, d: usize, particles: usize) -> Option<Vec<(f64, StateSpec)>> {
        let list = self.tables(t, key, path);
        if list.is_none() && !t.contains_key(key) {
            self.fail(join(path, key), "missing key");
        }
        let list = list?;
        if list.is_empty() {
            self.fail(join(path, key), "needs at least one member");
        }
        let mut out = Vec::new();
        let mut ok = true;
        for (i, m) in list.iter().enumerate() {
            let p = format!("{}[{i}]", join(path, key));
            let w = self.req_float(m, "weight", &p);
            if let Some(w) = w {
                if !(w.is_finite() && w > 0.0) {
                    self.fail(join(&p, "weight"), "must be positive");
                }
            }
            let s = self.state(m, &p, d, particles, &["weight"]);
            match (w, s) {
                (Some(w), Some(s)) => out.push((w, s)),
                _ => ok = false,
            }
        }
        ok.then_some(out)
    }
}

/// `fallback` supplies parameters a preset fixes when the document omits them.
fn parse_regularizer(w: &mut Walker, t: &Table, path: &str, name: &str, fallback: Option<&Regularizer>) -> Option<Regularizer> {
    let preset_value = |key: &str| match (key, fallback) {
        ("sigma_k", Some(Regularizer::Gaussian { sigma_k })) => Some(*sigma_k),
        ("radius", Some(Regularizer::DpProfile(DpMassProfile::UniformSphere { radius }))) => Some(*radius),
        ("width", Some(Regularizer::DpProfile(DpMassProfile::Gaussian { width }))) => Some(*width),
        _ => None,
    };
    let need = |w: &mut Walker, key: &str| -> Option<f64> {
        let v = match preset_value(key) {
            Some(d) if !t.contains_key(key) => d,
            _ => w.req_float(t, key, path)?,
        };
        if !(v.is_finite() && v > 0.0) {
            w.fail(join(path, key), "must be positive");
            return None;
        }
        Some(v)
    };
    match name {
        "gaussian" => need(w, "sigma_k").map(|sigma_k| Regularizer::Gaussian { sigma_k }),
        "dp_sphere" => need(w, "radius").map(|radius| Regularizer::DpProfile(DpMassProfile::UniformSphere { radius })),
        "dp_gaussian" => need(w, "width").map(|width| Regularizer::DpProfile(DpMassProfile::Gaussian { width })),
        "table" => match t.get("table") {
            None if matches!(fallback, Some(Regularizer::Table(_))) => fallback.cloned(),
            Some(Value::Array(rows)) => {
                let mut out = Vec::new();
                for (i, r) in rows.iter().enumerate() {
                    let pair = r.as_array().and_then(|a| {
                        let f = |v: &Value| v.as_float().or_else(|| v.as_integer().map(|i| i as f64));
                        (a.len() == 2).then(|| Some((f(&a[0])?, f(&a[1])?))).flatten()
                    });
                    match pair {
                        Some(p) => out.push(p),
                        None => {
                            w.fail(format!("{path}.table[{i}]"), "expected [|k|, g]");
                            return None;
                        }
                    }
                }
                Some(Regularizer::Table(out))
            }
            _ => {
                w.fail(join(path, "table"), "expected an array of [|k|, g] pairs");
                None
            }
        },
        "unregularized" => Some(Regularizer::Unregularized),
        other => {
            w.fail(
                join(path, "regularizer"),
                format!("unknown regularizer `{other}` (gaussian, dp_sphere, dp_gaussian, table, unregularized)"),
            );
            None
        }
    }
}

fn regularizer_name(r: &Regularizer) -> &'static str {
    match r {
        Regularizer::Gaussian { .. } => "gaussian",
        Regularizer::DpProfile(DpMassProfile::UniformSphere { .. }) => "dp_sphere",
        Regularizer::DpProfile(DpMassProfile::Gaussian { .. }) => "dp_gaussian",
        Regularizer::Table(_) => "table",
        Regularizer::Unregularized => "unregularized",
    }
}

/// Parse and fully validate a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let doc: Table = text.parse().map_err(|e: toml::de::Error| {
        Error::Config(vec![Violation {
            path: String::new(),
            message: format!("not a valid TOML document: {}", e.message()),
        }])
    })?;
    let mut w = Walker { violations: Vec::new() };
    w.keys(
        &doc,
        "",
        &[
            "lattice", "particles", "potential", "kernel", "dynamics", "ensemble", "initial", "nosignal", "output",
            "physical",
        ],
    );

    // [lattice]
    let empty = Table::new();
    let lt = w.table(&doc, "lattice", "", true).unwrap_or(&empty);
    w.keys(lt, "lattice", &["spatial_dim", "particles", "points_per_axis", "length"]);
    let spatial_dim = w.int(lt, "spatial_dim", "lattice").unwrap_or(1) as usize;
    let particles = w.int(lt, "particles", "lattice").unwrap_or(1) as usize;
    let points = w.req_int(lt, "points_per_axis", "lattice").map(|p| p as usize);
    let length = w.req_float(lt, "length", "lattice");
    if !(1..=3).contains(&spatial_dim) {
        w.fail("lattice.spatial_dim", "must be 1, 2 or 3");
    }
    if particles == 0 {
        w.fail("lattice.particles", "must be at least 1");
    }
    if let Some(p) = points {
        if p < 2 || !p.is_power_of_two() {
            w.fail("lattice.points_per_axis", "points_per_axis must be a power of two");
        }
    }
    if let Some(l) = length {
        if !(l.is_finite() && l > 0.0) {
            w.fail("lattice.length", "must be positive");
        }
    }
    let lattice_section = LatticeSection {
        spatial_dim,
        particles,
        points_per_axis: points.unwrap_or(0),
        length: length.unwrap_or(0.0),
    };
    let lattice = if w.violations.is_empty() {
        match Lattice::new(spatial_dim, particles, lattice_section.points_per_axis, lattice_section.length) {
            Ok(l) => Some(l),
            Err(e) => {
                w.fail("lattice", e.to_string());
                None
            }
        }
    } else {
        None
    };
    let d = spatial_dim.clamp(1, 3);
    let np = particles.max(1);

    // [particles]
    let pt = w.table(&doc, "particles", "", false).unwrap_or(&empty);
    w.keys(pt, "particles", &["masses"]);
    let masses = w.floats(pt, "masses", "particles").unwrap_or_else(|| vec![1.0; np]);
    if masses.len() != np {
        w.fail("particles.masses", format!("needs one mass per particle ({np})"));
    }
    if masses.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
        w.fail("particles.masses", "masses must be positive");
    }

    // [potential]
    let vt = w.table(&doc, "potential", "", false).unwrap_or(&empty);
    let potential = match w.string(vt, "kind", "potential").unwrap_or("free") {
        "free" => {
            w.keys(vt, "potential", &["kind"]);
            ExternalPotential::Free
        }
        "harmonic" => {
            w.keys(vt, "potential", &["kind", "omega"]);
            let omega = w.req_float(vt, "omega", "potential").unwrap_or(0.0);
            if !(omega.is_finite() && omega >= 0.0) {
                w.fail("potential.omega", "must be non-negative");
            }
            ExternalPotential::Harmonic { omega }
        }
        "table" => {
            w.keys(vt, "potential", &["kind", "values"]);
            let v = w.floats(vt, "values", "potential").unwrap_or_default();
            if let Some(l) = &lattice {
                if v.len() != l.sites() {
                    w.fail("potential.values", format!("needs {} values", l.sites()));
                }
            }
            ExternalPotential::Table(v)
        }
        other => {
            w.fail("potential.kind", format!("unknown potential `{other}` (free, harmonic, table)"));
            ExternalPotential::Free
        }
    };

    // [kernel]
    let kt = w.table(&doc, "kernel", "", true).unwrap_or(&empty);
    w.keys(
        kt,
        "kernel",
        &[
            "preset", "regularizer", "sigma_k", "radius", "width", "table", "law", "lambda0", "gamma_tot",
            "allow_divergent", "include_zero_mode",
        ],
    );
    let preset_name = w.string(kt, "preset", "kernel").map(str::to_string);
    let preset = match &preset_name {
        Some(p) => match preset_with(p, None) {
            Ok(p) => Some(p),
            Err(e) => {
                w.fail("kernel.preset", e.to_string());
                None
            }
        },
        None => None,
    };
    let fallback = preset.as_ref().map(|p| &p.regularizer);
    let regularizer = match w.string(kt, "regularizer", "kernel").map(str::to_string) {
        Some(name) => parse_regularizer(&mut w, kt, "kernel", &name, fallback),
        None => match fallback {
            Some(r) => parse_regularizer(&mut w, kt, "kernel", regularizer_name(r), fallback),
            None => {
                if preset_name.is_none() {
                    w.fail("kernel.regularizer", "missing key (or give a preset)");
                }
                None
            }
        },
    };
    let law = match w.string(kt, "law", "kernel") {
        Some("direct") => Law::Direct,
        Some("coulomb3d") => Law::Coulomb3d,
        Some(other) => {
            w.fail("kernel.law", format!("unknown law `{other}` (direct, coulomb3d)"));
            Law::Direct
        }
        None => preset.as_ref().map_or(Law::Direct, |p| p.law),
    };
    let lambda0 = w.req_float(kt, "lambda0", "kernel").unwrap_or(0.0);
    if !(lambda0.is_finite() && lambda0 >= 0.0) {
        w.fail("kernel.lambda0", "must be non-negative");
    }
    let gamma_tot = w.float(kt, "gamma_tot", "kernel");
    if let Some(g) = gamma_tot {
        if !(g.is_finite() && g >= 0.0) {
            w.fail("kernel.gamma_tot", "must be non-negative");
        }
    }
    let allow_divergent = w.boolean(kt, "allow_divergent", "kernel").unwrap_or(false);
    if w.boolean(kt, "include_zero_mode", "kernel") == Some(true) {
        w.fail("kernel.include_zero_mode", Error::ZeroModeRequest.to_string());
    }
    let kernel_section = KernelSection {
        preset: preset_name,
        regularizer: regularizer.unwrap_or(Regularizer::Unregularized),
        law,
        lambda0,
        gamma_tot,
        allow_divergent,
    };

    // [dynamics]
    let dt_ = w.table(&doc, "dynamics", "", true).unwrap_or(&empty);
    w.keys(
        dt_,
        "dynamics",
        &["unraveling", "dt", "t_final", "output_times", "output_count", "refresh"],
    );
    let name = w.string(dt_, "unraveling", "dynamics").unwrap_or("pdp");
    let unraveling = Unraveling::parse(name).unwrap_or_else(|| {
        w.fail(
            "dynamics.unraveling",
            format!("unknown unraveling `{name}` (pdp, pdp_B, diffusive, none)"),
        );
        Unraveling::Pdp
    });
    let dt = w.req_float(dt_, "dt", "dynamics").unwrap_or(0.0);
    let t_final = w.req_float(dt_, "t_final", "dynamics").unwrap_or(0.0);
    if !(dt.is_finite() && dt > 0.0) {
        w.fail("dynamics.dt", "must be positive");
    }
    if !(t_final.is_finite() && t_final > 0.0) {
        w.fail("dynamics.t_final", "must be positive");
    }
    let explicit = w.floats(dt_, "output_times", "dynamics");
    let count = w.int(dt_, "output_count", "dynamics");
    let output_times = match (explicit, count) {
        (Some(_), Some(_)) => {
            w.fail("dynamics.output_count", "give output_times or output_count, not both");
            vec![0.0, t_final]
        }
        (Some(v), None) => v,
        (None, Some(c)) if c >= 2 => {
            let steps = (t_final / dt).round();
            (0..c)
                .map(|i| ((i as f64 * steps / (c - 1) as f64).round()) * dt)
                .collect()
        }
        (None, Some(_)) => {
            w.fail("dynamics.output_count", "must be at least 2");
            vec![0.0, t_final]
        }
        (None, None) => vec![0.0, t_final],
    };
    let refresh = match w.string(dt_, "refresh", "dynamics").unwrap_or("predictor_corrector") {
        "predictor_corrector" => Refresh::PredictorCorrector,
        "frozen" => Refresh::Frozen,
        other => {
            w.fail(
                "dynamics.refresh",
                format!("unknown refresh `{other}` (predictor_corrector, frozen)"),
            );
            Refresh::PredictorCorrector
        }
    };
    let dynamics = DynamicsSection {
        unraveling,
        dt,
        t_final,
        output_times,
        refresh,
    };

    // [ensemble]
    let et = w.table(&doc, "ensemble", "", false).unwrap_or(&empty);
    w.keys(et, "ensemble", &["trajectories", "master_seed", "workers", "log_jumps"]);
    let ensemble = EnsembleSection {
        trajectories: w.int(et, "trajectories", "ensemble").unwrap_or(100) as usize,
        master_seed: w.int(et, "master_seed", "ensemble").unwrap_or(0),
        workers: w.int(et, "workers", "ensemble").map(|x| x as usize),
        log_jumps: w.boolean(et, "log_jumps", "ensemble").unwrap_or(false),
    };
    if ensemble.trajectories < 2 {
        w.fail("ensemble.trajectories", "must be at least 2");
    }
    if ensemble.workers == Some(0) {
        w.fail("ensemble.workers", "must be at least 1");
    }

    // [initial]
    let it = w.table(&doc, "initial", "", true).unwrap_or(&empty);
    let initial = w.state(it, "initial", d, np, &[]);

    // [nosignal]
    let nosignal = match w.table(&doc, "nosignal", "", false) {
        Some(nt) => {
            w.keys(nt, "nosignal", &["first", "second", "seeds"]);
            let first = w.members(nt, "first", "nosignal", d, np);
            let second = w.members(nt, "second", "nosignal", d, np);
            let seeds = match w.floats(nt, "seeds", "nosignal") {
                Some(s) if s.len() == 2 && s.iter().all(|x| *x >= 0.0 && x.fract() == 0.0) => [s[0] as u64, s[1] as u64],
                Some(_) => {
                    w.fail("nosignal.seeds", "expected two non-negative integers");
                    [0, 0]
                }
                None => [ensemble.master_seed, ensemble.master_seed.wrapping_add(1)],
            };
            match (first, second) {
                (Some(first), Some(second)) => Some(NoSignalSection { first, second, seeds }),
                _ => None,
            }
        }
        None => None,
    };

    // [output]
    let ot = w.table(&doc, "output", "", false).unwrap_or(&empty);
    w.keys(ot, "output", &["directory", "coherence_offset"]);
    let output = OutputSection {
        directory: PathBuf::from(w.string(ot, "directory", "output").unwrap_or("out")),
        coherence_offset: w
            .int(ot, "coherence_offset", "output")
            .map_or(lattice_section.points_per_axis / 4, |x| x as usize),
    };

    // [physical]
    let physical = match w.table(&doc, "physical", "", false) {
        Some(pt) => {
            w.keys(pt, "physical", &["mass_kg", "length_m"]);
            let m = w.req_float(pt, "mass_kg", "physical");
            let l = w.req_float(pt, "length_m", "physical");
            for (k, v) in [("mass_kg", m), ("length_m", l)] {
                if let Some(v) = v {
                    if !(v.is_finite() && v > 0.0) {
                        w.fail(join("physical", k), "must be positive");
                    }
                }
            }
            match (m, l) {
                (Some(mass_kg), Some(length_m)) => Some(PhysicalSection { mass_kg, length_m }),
                _ => None,
            }
        }
        None => None,
    };

    let config = RunConfig {
        lattice: lattice_section,
        masses,
        potential,
        kernel: kernel_section,
        dynamics,
        ensemble,
        initial: initial.unwrap_or(StateSpec::Gaussian(Vec::new())),
        nosignal,
        output,
        physical,
    };
    if w.violations.is_empty() {
        semantic_checks(&config, &mut w);
    }
    if w.violations.is_empty() {
        Ok(config)
    } else {
        Err(Error::Config(w.violations))
    }
}

/// Guards of the downstream modules, checked once the document is
/// structurally sound.
fn semantic_checks(c: &RunConfig, w: &mut Walker) {
    let lattice = match c.lattice() {
        Ok(l) => l,
        Err(e) => return w.fail("lattice", e.to_string()),
    };
    if lattice.rank() > 2 && c.dynamics.unraveling != Unraveling::None {
        w.fail(
            "lattice",
            "configuration rank above 2 is only supported for deterministic runs (unraveling = \"none\")",
        );
    }
    let kernel = match c.kernel() {
        Ok(k) => Some(k),
        Err(e) => {
            w.fail("kernel", e.to_string());
            None
        }
    };
    let d = &c.dynamics;
    if let Some(k) = &kernel {
        match d.unraveling {
            Unraveling::Pdp | Unraveling::PdpB => {
                // ‖A_ψ(k)ψ‖² ≤ 2 for unit-norm states
                let worst = 2.0 * k.gamma_tot() * d.dt;
                if worst > RATE_ERROR {
                    w.fail(
                        "dynamics.dt",
                        format!("worst-case jump probability per step 2·Γ_tot·dt = {worst:.3} exceeds {RATE_ERROR}"),
                    );
                }
            }
            Unraveling::Diffusive => {
                let g = k.gamma_tot() * d.dt;
                if g > STEP_GUARD {
                    w.fail("dynamics.dt", format!("dt·Γ_tot = {g:.3} exceeds {STEP_GUARD}"));
                }
            }
            Unraveling::None => {}
        }
    }
    let mut last = -1i64;
    for (i, t) in d.output_times.iter().enumerate() {
        let s = t / d.dt;
        let r = s.round();
        if !(t.is_finite() && *t >= 0.0 && *t <= d.t_final * (1.0 + 1e-12)) {
            w.fail(format!("dynamics.output_times[{i}]"), "must lie in [0, t_final]");
        } else if (s - r).abs() > 1e-6 * r.max(1.0) {
            w.fail(format!("dynamics.output_times[{i}]"), "must be a multiple of dt");
        } else if (r as i64) <= last {
            w.fail(format!("dynamics.output_times[{i}]"), "must be strictly increasing");
        }
        last = r as i64;
    }
    let total = (d.t_final / d.dt).round();
    if ((d.t_final / d.dt) - total).abs() > 1e-6 * total.max(1.0) {
        w.fail("dynamics.t_final", "must be a multiple of dt");
    }
    if d.output_times.last().map(|t| (t / d.dt).round()) != Some(total) {
        w.fail("dynamics.output_times", "the last output time must equal t_final");
    }
    if c.output.coherence_offset >= lattice.points() {
        w.fail("output.coherence_offset", format!("must be below {}", lattice.points()));
    }
    if let StateSpec::Superposition(terms) = &c.initial {
        if terms.iter().all(|(a, _)| a.norm() == 0.0) {
            w.fail("initial.terms", "amplitudes must not all vanish");
        }
    }
}

fn packet_value(p: &Packet) -> Value {
    let mut t = Table::new();
    t.insert("center".into(), floats_value(&p.center));
    t.insert("momentum".into(), floats_value(&p.momentum));
    t.insert("width".into(), Value::Float(p.width));
    Value::Table(t)
}

fn floats_value(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

fn state_table(s: &StateSpec) -> Table {
    let mut t = Table::new();
    match s {
        StateSpec::Gaussian(p) => {
            t.insert("kind".into(), "gaussian".into());
            t.insert("packets".into(), Value::Array(p.iter().map(packet_value).collect()));
        }
        StateSpec::Superposition(terms) => {
            t.insert("kind".into(), "superposition".into());
            let terms = terms
                .iter()
                .map(|(a, p)| {
                    let mut x = Table::new();
                    x.insert("amplitude".into(), floats_value(&[a.re, a.im]));
                    x.insert("packets".into(), Value::Array(p.iter().map(packet_value).collect()));
                    Value::Table(x)
                })
                .collect();
            t.insert("terms".into(), Value::Array(terms));
        }
        StateSpec::File(p) => {
            t.insert("kind".into(), "file".into());
            t.insert("path".into(), p.to_string_lossy().into_owned().into());
        }
    }
    t
}

fn seed_value(s: u64) -> Value {
    Value::Integer(s as i64)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        parse_config(text)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        parse_config(&text)
    }

    /// TOML document that parses back to `self`.
    pub fn emit(&self) -> String {
        let mut doc = Table::new();
        let l = &self.lattice;
        let mut t = Table::new();
        t.insert("spatial_dim".into(), Value::Integer(l.spatial_dim as i64));
        t.insert("particles".into(), Value::Integer(l.particles as i64));
        t.insert("points_per_axis".into(), Value::Integer(l.points_per_axis as i64));
        t.insert("length".into(), Value::Float(l.length));
        doc.insert("lattice".into(), Value::Table(t));

        let mut t = Table::new();
        t.insert("masses".into(), floats_value(&self.masses));
        doc.insert("particles".into(), Value::Table(t));

        let mut t = Table::new();
        match &self.potential {
            ExternalPotential::Free => {
                t.insert("kind".into(), "free".into());
            }
            ExternalPotential::Harmonic { omega } => {
                t.insert("kind".into(), "harmonic".into());
                t.insert("omega".into(), Value::Float(*omega));
            }
            ExternalPotential::Table(v) => {
                t.insert("kind".into(), "table".into());
                t.insert("values".into(), floats_value(v));
            }
        }
        doc.insert("potential".into(), Value::Table(t));

        let k = &self.kernel;
        let mut t = Table::new();
        if let Some(p) = &k.preset {
            t.insert("preset".into(), p.clone().into());
        }
        t.insert("regularizer".into(), regularizer_name(&k.regularizer).into());
        match &k.regularizer {
            Regularizer::Gaussian { sigma_k } => {
                t.insert("sigma_k".into(), Value::Float(*sigma_k));
            }
            Regularizer::DpProfile(DpMassProfile::UniformSphere { radius }) => {
                t.insert("radius".into(), Value::Float(*radius));
            }
            Regularizer::DpProfile(DpMassProfile::Gaussian { width }) => {
                t.insert("width".into(), Value::Float(*width));
            }
            Regularizer::Table(rows) => {
                t.insert(
                    "table".into(),
                    Value::Array(rows.iter().map(|(a, b)| floats_value(&[*a, *b])).collect()),
                );
            }
            Regularizer::Unregularized => {}
        }
        t.insert(
            "law".into(),
            match k.law {
                Law::Direct => "direct",
                Law::Coulomb3d => "coulomb3d",
            }
            .into(),
        );
        t.insert("lambda0".into(), Value::Float(k.lambda0));
        if let Some(g) = k.gamma_tot {
            t.insert("gamma_tot".into(), Value::Float(g));
        }
        t.insert("allow_divergent".into(), Value::Boolean(k.allow_divergent));
        doc.insert("kernel".into(), Value::Table(t));

        let d = &self.dynamics;
        let mut t = Table::new();
        t.insert("unraveling".into(), d.unraveling.name().into());
        t.insert("dt".into(), Value::Float(d.dt));
        t.insert("t_final".into(), Value::Float(d.t_final));
        t.insert("output_times".into(), floats_value(&d.output_times));
        t.insert(
            "refresh".into(),
            match d.refresh {
                Refresh::PredictorCorrector => "predictor_corrector",
                Refresh::Frozen => "frozen",
            }
            .into(),
        );
        doc.insert("dynamics".into(), Value::Table(t));

        let e = &self.ensemble;
        let mut t = Table::new();
        t.insert("trajectories".into(), Value::Integer(e.trajectories as i64));
        t.insert("master_seed".into(), seed_value(e.master_seed));
        if let Some(w) = e.workers {
            t.insert("workers".into(), Value::Integer(w as i64));
        }
        t.insert("log_jumps".into(), Value::Boolean(e.log_jumps));
        doc.insert("ensemble".into(), Value::Table(t));

        doc.insert("initial".into(), Value::Table(state_table(&self.initial)));

        if let Some(n) = &self.nosignal {
            let members = |m: &[(f64, StateSpec)]| {
                Value::Array(
                    m.iter()
                        .map(|(w, s)| {
                            let mut t = state_table(s);
                            t.insert("weight".into(), Value::Float(*w));
                            Value::Table(t)
                        })
                        .collect(),
                )
            };
            let mut t = Table::new();
            t.insert("first".into(), members(&n.first));
            t.insert("second".into(), members(&n.second));
            t.insert(
                "seeds".into(),
                Value::Array(n.seeds.iter().map(|s| seed_value(*s)).collect()),
            );
            doc.insert("nosignal".into(), Value::Table(t));
        }

        let mut t = Table::new();
        t.insert("directory".into(), self.output.directory.to_string_lossy().into_owned().into());
        t.insert("coherence_offset".into(), Value::Integer(self.output.coherence_offset as i64));
        doc.insert("output".into(), Value::Table(t));

        if let Some(p) = &self.physical {
            let mut t = Table::new();
            t.insert("mass_kg".into(), Value::Float(p.mass_kg));
            t.insert("length_m".into(), Value::Float(p.length_m));
            doc.insert("physical".into(), Value::Table(t));
        }
        toml::to_string(&doc).expect("configuration tables serialize")
    }

    pub fn lattice(&self) -> Result<Lattice> {
        let l = &self.lattice;
        Lattice::new(l.spatial_dim, l.particles, l.points_per_axis, l.length)
    }

    /// The rate kernel on the run lattice, rescaled to `gamma_tot` if set.
    pub fn kernel(&self) -> Result<RateKernel> {
        let lattice = self.lattice()?;
        let k = &self.kernel;
        let spec = KernelSpec::new(k.regularizer.clone(), k.law, k.lambda0).allow_divergent(k.allow_divergent);
        let kernel = spec.build(&lattice)?;
        match k.gamma_tot {
            Some(target) if kernel.gamma_tot() > 0.0 => kernel.scaled(target / kernel.gamma_tot()),
            Some(target) if target > 0.0 => Err(Error::DivergentRate(
                "cannot rescale a kernel with Γ_tot = 0 (is lambda0 zero?)".into(),
            )),
            _ => Ok(kernel),
        }
    }

    pub fn step_spec(&self) -> StepSpec {
        StepSpec {
            dt: self.dynamics.dt,
            refresh: self.dynamics.refresh,
        }
    }

    /// Output times as step counts.
    pub fn output_steps(&self) -> Vec<usize> {
        self.dynamics
            .output_times
            .iter()
            .map(|t| (t / self.dynamics.dt).round() as usize)
            .collect()
    }

    /// Build a state, resolving relative file paths against `base`.
    pub fn build_state(&self, spec: &StateSpec, base: &Path) -> Result<WaveFunction> {
        let lattice = self.lattice()?;
        match spec {
            StateSpec::Gaussian(p) => WaveFunction::gaussian(lattice, self.masses.clone(), p),
            StateSpec::Superposition(terms) => {
                let parts = terms
                    .iter()
                    .map(|(a, p)| Ok((*a, WaveFunction::gaussian(lattice, self.masses.clone(), p)?)))
                    .collect::<Result<Vec<_>>>()?;
                WaveFunction::superposition(&parts)
            }
            StateSpec::File(p) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                let amps = crate::io::read_state(&path, &lattice)?;
                Ok(WaveFunction::new(lattice, amps, self.masses.clone())?.normalized())
            }
        }
    }

    pub fn initial_state(&self, base: &Path) -> Result<WaveFunction> {
        self.build_state(&self.initial, base)
    }

    /// Ensemble description; `workers` overrides the configured count.
    pub fn ensemble_spec(&self, base: &Path, workers: Option<usize>) -> Result<EnsembleSpec> {
        Ok(EnsembleSpec {
            masses: self.masses.clone(),
            kernel: self.kernel()?,
            potential: self.potential.clone(),
            step: self.step_spec(),
            unraveling: self.dynamics.unraveling,
            initial: InitialState::Pure(self.initial_state(base)?),
            output_steps: self.output_steps(),
            trajectories: self.ensemble.trajectories,
            seeds: SeedPlan::new(self.ensemble.master_seed),
            coherence_offset: self.output.coherence_offset,
            log_jumps: self.ensemble.log_jumps,
            workers: workers.or(self.ensemble.workers),
        })
    }

    /// Refuse bases too large for the dense oracle.
    pub fn require_dense(&self) -> Result<()> {
        let lattice = self.lattice()?;
        if lattice.len() > DENSE_LIMIT {
            return Err(Error::Config(vec![Violation {
                path: "lattice".into(),
                message: Error::BasisTooLarge {
                    dim: lattice.len(),
                    limit: DENSE_LIMIT,
                }
                .to_string(),
            }]));
        }
        Ok(())
    }
}
