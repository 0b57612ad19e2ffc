//! Subcommand dispatch: every run is driven by one [`RunConfig`] and writes
//! its artifacts, plus a checksummed `manifest.json`, into the configured
//! output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::ensemble::{
    decomposition_invariance_test, run_ensemble, run_trajectory, trace_distance, ObservableRow, SeedPlan,
};
use crate::error::{Error, Result};
use crate::io::{self, Artifacts};
use crate::kernels::{physical_scale, refinement_study, KernelSpec, REFINEMENT_TOLERANCE};
use crate::lattice::{forward_transform, inverse_transform, observables, DensityMatrix, WaveFunction};
use crate::master::{integrate_master, Generator};
use crate::propagator::DriftStepper;

/// Largest `dt·‖𝓛‖` used for master-equation substeps.
const MASTER_SUBSTEP_BOUND: f64 = 1.0;
/// Tolerance of the free-dispersion gate of `deterministic`.
pub const DISPERSION_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Trajectory,
    Ensemble,
    Master,
    Compare,
    Deterministic,
    KernelsValidate,
    NoSignalTest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Trajectory => "trajectory",
            Command::Ensemble => "ensemble",
            Command::Master => "master",
            Command::Compare => "compare",
            Command::Deterministic => "deterministic",
            Command::KernelsValidate => "kernels-validate",
            Command::NoSignalTest => "nosignal-test",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory that relative input paths are resolved against.
    pub base_dir: PathBuf,
    /// Replaces `[output] directory` when set.
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    /// Trajectory index for `trajectory`.
    pub trajectory_index: usize,
}

/// What a run produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Human-readable lines for the terminal.
    pub summary: Vec<String>,
    /// False when a validation gate of the subcommand failed; artifacts are
    /// still written so the failure can be inspected.
    pub gates_passed: bool,
}

fn output_dir(config: &RunConfig, opts: &RunOptions) -> PathBuf {
    opts.output_dir.clone().unwrap_or_else(|| config.output.directory.clone())
}

fn manifest(config: &RunConfig, command: Command) -> Map<String, Value> {
    let Value::Object(m) = json!({
        "build": format!("snstoch {}", env!("CARGO_PKG_VERSION")),
        "command": command.name(),
        "config": config.emit(),
        "master_seed": config.ensemble.master_seed,
    }) else {
        unreachable!()
    };
    m
}

pub fn execute(command: Command, config: &RunConfig, opts: &RunOptions) -> Result<Outcome> {
    let mut artifacts = Artifacts::create(&output_dir(config, opts))?;
    let mut m = manifest(config, command);
    let (summary, gates_passed) = match command {
        Command::Trajectory => trajectory(config, opts, &mut artifacts, &mut m)?,
        Command::Ensemble => ensemble(config, opts, &mut artifacts, &mut m)?,
        Command::Master => master(config, opts, &mut artifacts, &mut m)?,
        Command::Compare => compare(config, opts, &mut artifacts, &mut m)?,
        Command::Deterministic => deterministic(config, opts, &mut artifacts, &mut m)?,
        Command::KernelsValidate => kernels_validate(config, &mut artifacts, &mut m)?,
        Command::NoSignalTest => nosignal(config, opts, &mut artifacts, &mut m)?,
    };
    m.insert("gates_passed".into(), json!(gates_passed));
    let files = artifacts.finish(m)?;
    Ok(Outcome {
        files,
        summary,
        gates_passed,
    })
}

type Section = (Vec<String>, bool);

fn pure_row(t: f64, psi: &WaveFunction, jumps: usize, offset: usize) -> ObservableRow {
    let o = observables(psi);
    ObservableRow {
        t,
        norm_mean: o.norm2,
        norm_se: 0.0,
        x_mean: o.x_mean,
        x_se: 0.0,
        p_mean: o.p_mean,
        p_se: 0.0,
        p2_mean: o.p2_mean,
        p2_se: 0.0,
        coherence_s0: o.coherence[offset] * o.norm2,
        coherence_s0_se: 0.0,
        jump_count_mean: jumps as f64,
    }
}

fn trajectory(config: &RunConfig, opts: &RunOptions, a: &mut Artifacts, m: &mut Map<String, Value>) -> Result<Section> {
    let spec = config.ensemble_spec(&opts.base_dir, opts.workers)?;
    let i = opts.trajectory_index;
    let tr = run_trajectory(&spec, i)?;
    let lat = *spec.lattice();
    let times: Vec<f64> = spec.output_steps.iter().map(|&s| s as f64 * spec.step.dt).collect();
    let rows: Vec<ObservableRow> = tr
        .states
        .iter()
        .zip(&tr.jump_counts)
        .zip(&times)
        .map(|((psi, n), t)| pure_row(*t, psi, *n, spec.coherence_offset))
        .collect();
    a.write("observables.csv", io::observables_csv(&rows).as_bytes())?;
    for (k, psi) in tr.states.iter().enumerate() {
        a.write(&format!("state_{k:04}.bin"), &io::state_bytes(&lat, psi.amplitudes()))?;
    }
    let jumps: Vec<_> = tr.jumps.iter().map(|e| (i, *e)).collect();
    a.write("jumps.csv", io::jumps_csv(&jumps).as_bytes())?;
    m.insert("trajectory_index".into(), json!(i));
    m.insert("aborted".into(), json!([]));
    let last = tr.states.last().expect("at least one output");
    Ok((
        vec![format!(
            "trajectory {i}: {} jumps, final norm² {:.12}",
            tr.jumps.len(),
            last.norm2()
        )],
        true,
    ))
}

fn aborted_json(list: &[(usize, String)]) -> Value {
    Value::Array(list.iter().map(|(i, e)| json!({ "trajectory": i, "error": e })).collect())
}

fn ensemble(config: &RunConfig, opts: &RunOptions, a: &mut Artifacts, m: &mut Map<String, Value>) -> Result<Section> {
    let spec = config.ensemble_spec(&opts.base_dir, opts.workers)?;
    let res = run_ensemble(&spec)?;
    a.write("observables.csv", io::observables_csv(&res.rows).as_bytes())?;
    if let Some(rho) = res.final_rho() {
        a.write("rho_final.bin", &io::density_bytes(rho))?;
    }
    if spec.log_jumps {
        a.write("jumps.csv", io::jumps_csv(&res.jumps).as_bytes())?;
    }
    m.insert("aborted".into(), aborted_json(&res.aborted));
    m.insert("completed".into(), json!(res.completed));
    Ok((
        vec![format!(
            "{} ensemble: {} of {} trajectories completed",
            res.unraveling.name(),
            res.completed,
            spec.trajectories
        )],
        true,
    ))
}

/// Dense oracle on the configured output times, with RK4 substeps small
/// enough for stability.
fn run_master(config: &RunConfig, opts: &RunOptions) -> Result<(Vec<f64>, Vec<DensityMatrix>, f64)> {
    config.require_dense()?;
    let lat = config.lattice()?;
    let gen = Generator::new(&lat, &config.masses, &config.kernel()?, &config.potential)?;
    let dt = config.dynamics.dt;
    let sub = ((dt * gen.norm_bound() / MASTER_SUBSTEP_BOUND).ceil() as usize).max(1);
    let steps: Vec<usize> = config.output_steps().iter().map(|s| s * sub).collect();
    let rho0 = DensityMatrix::from_pure(&config.initial_state(&opts.base_dir)?.normalized());
    let run = integrate_master(&rho0, &gen, dt / sub as f64, &steps)?;
    let times = config.output_steps().iter().map(|&s| s as f64 * dt).collect();
    Ok((times, run.states, run.trace_drift))
}

fn master(config: &RunConfig, opts: &RunOptions, a: &mut Artifacts, m: &mut Map<String, Value>) -> Result<Section> {
    let (times, states, drift) = run_master(config, opts)?;
    let rows: Vec<ObservableRow> = times
        .iter()
        .zip(&states)
        .map(|(t, r)| ObservableRow::from_density(*t, r, config.output.coherence_offset))
        .collect();
    a.write("observables.csv", io::observables_csv(&rows).as_bytes())?;
    a.write("rho_final.bin", &io::density_bytes(states.last().expect("outputs")))?;
    m.insert("trace_drift".into(), json!(drift));
    Ok((vec![format!("master equation: trace drift {drift:.3e}")], true))
}

fn compare(config: &RunConfig, opts: &RunOptions, a: &mut Artifacts, m: &mut Map<String, Value>) -> Result<Section> {
    let (_, states, drift) = run_master(config, opts)?;
    let spec = config.ensemble_spec(&opts.base_dir, opts.workers)?;
    let res = run_ensemble(&spec)?;
    let mut csv = String::from("t,trace_distance,mc_se_bound\n");
    let mut last = (0.0, 0.0);
    for ((t, acc), exact) in res.times.iter().zip(&res.accumulators).zip(&states) {
        let mean = acc.mean_rho().expect("dense basis");
        let d = trace_distance(&mean, exact)?;
        let bound = acc.trace_noise_bound().unwrap_or(f64::NAN);
        let _ = writeln!(csv, "{t},{d},{bound}");
        last = (d, bound);
    }
    a.write("distance.csv", csv.as_bytes())?;
    a.write("observables.csv", io::observables_csv(&res.rows).as_bytes())?;
    a.write("rho_final.bin", &io::density_bytes(res.final_rho().expect("dense basis")))?;
    let se = res.bootstrap_se(&spec.seeds)?;
    m.insert("aborted".into(), aborted_json(&res.aborted));
    m.insert("trace_drift".into(), json!(drift));
    m.insert("final_trace_distance".into(), json!(last.0));
    m.insert("final_bootstrap_se".into(), json!(se));
    Ok((
        vec![format!(
            "{}: final trace distance {:.4} (bootstrap SE {:.4}, Frobenius bound {:.4})",
            res.unraveling.name(),
            last.0,
            se,
            last.1
        )],
        true,
    ))
}

/// `p ψ` along configuration axis 0 for a single coordinate.
fn momentum_applied(psi: &WaveFunction) -> Vec<Complex64> {
    let lat = *psi.lattice();
    let phi: Vec<Complex64> = forward_transform(psi)
        .into_iter()
        .enumerate()
        .map(|(j, v)| v * lat.wave_number(j))
        .collect();
    inverse_transform(&lat, &phi)
}

/// Position variance predicted by free motion from the initial moments.
fn free_variance(psi: &WaveFunction, mass: f64, t: f64) -> f64 {
    let lat = *psi.lattice();
    let o = observables(psi);
    let p_psi = momentum_applied(psi);
    let dx = lat.spacing();
    let n2 = psi.norm2();
    // ⟨xp + px⟩ = 2 Re⟨ψ|x p ψ⟩
    let xp: f64 = psi
        .amplitudes()
        .iter()
        .zip(&p_psi)
        .enumerate()
        .map(|(i, (a, b))| (a.conj() * b).re * lat.position(i))
        .sum::<f64>()
        * 2.0
        * dx
        / n2;
    let var_x = o.x2_mean - o.x_mean * o.x_mean;
    let cov = xp - 2.0 * o.x_mean * o.p_mean;
    let var_p = o.p2_mean - o.p_mean * o.p_mean;
    var_x + t * cov / mass + t * t * var_p / (mass * mass)
}

fn deterministic(config: &RunConfig, opts: &RunOptions, a: &mut Artifacts, m: &mut Map<String, Value>) -> Result<Section> {
    let lat = config.lattice()?;
    let kernel = config.kernel()?;
    let mut psi = config.initial_state(&opts.base_dir)?;
    let stepper = DriftStepper::new(lat, &config.masses, &kernel, &config.potential, config.step_spec())?;
    let steps = config.output_steps();
    let dt = config.dynamics.dt;
    let e0 = stepper.energy(&psi)?;
    let dispersion = kernel.is_zero() && lat.rank() == 1 && config.potential.is_translation_invariant();
    let initial = psi.clone();
    let mut rows = Vec::new();
    let mut ledger = String::from("t,energy,relative_energy_change,x_variance,free_variance\n");
    let (mut worst_energy, mut worst_dispersion) = (0.0f64, 0.0f64);
    let mut next = steps.iter().peekable();
    for step in 0..=*steps.last().expect("outputs") {
        if step > 0 {
            stepper.step(&mut psi)?;
        }
        if next.peek() == Some(&&step) {
            next.next();
            let t = step as f64 * dt;
            rows.push(pure_row(t, &psi, 0, config.output.coherence_offset));
            let e = stepper.energy(&psi)?;
            let rel = (e - e0).abs() / e0.abs().max(f64::MIN_POSITIVE);
            worst_energy = worst_energy.max(rel);
            let o = observables(&psi);
            let var = o.x2_mean - o.x_mean * o.x_mean;
            let free = if dispersion {
                let f = free_variance(&initial, config.masses[0], t);
                worst_dispersion = worst_dispersion.max((var - f).abs() / f);
                f
            } else {
                f64::NAN
            };
            let _ = writeln!(ledger, "{t},{e},{rel},{var},{free}");
        }
    }
    a.write("observables.csv", io::observables_csv(&rows).as_bytes())?;
    a.write("energy.csv", ledger.as_bytes())?;
    m.insert("max_relative_energy_change".into(), json!(worst_energy));
    let mut summary = vec![format!("deterministic flow: max relative energy change {worst_energy:.3e}")];
    let mut ok = true;
    if dispersion {
        ok = worst_dispersion <= DISPERSION_TOLERANCE;
        m.insert("max_relative_dispersion_error".into(), json!(worst_dispersion));
        summary.push(format!(
            "free dispersion: max relative variance error {worst_dispersion:.3e} (gate {DISPERSION_TOLERANCE:e}) {}",
            if ok { "pass" } else { "FAIL" }
        ));
    }
    Ok((summary, ok))
}

fn kernels_validate(config: &RunConfig, a: &mut Artifacts, m: &mut Map<String, Value>) -> Result<Section> {
    let lat = config.lattice()?;
    let k = &config.kernel;
    let spec = KernelSpec::new(k.regularizer.clone(), k.law, k.lambda0).allow_divergent(true);
    let rows = refinement_study(&spec, &lat, 3)?;
    let mut csv = String::from("points,gamma_tot,d_p,d_p_relative_change\n");
    let mut diverging = false;
    for (i, r) in rows.iter().enumerate() {
        let change = if i == 0 {
            0.0
        } else {
            let prev = rows[i - 1].d_p;
            (r.d_p - prev).abs() / prev.abs().max(r.d_p.abs()).max(f64::MIN_POSITIVE)
        };
        diverging |= change > REFINEMENT_TOLERANCE;
        let _ = writeln!(csv, "{},{},{},{}", r.points, r.gamma_tot, r.d_p, change);
    }
    let mut summary = vec![csv.trim_end().to_string()];
    match config.kernel() {
        Ok(kernel) => {
            summary.push(format!(
                "run kernel: Λ₀ = {}, Γ_tot = {}, D_p = {}",
                kernel.lambda0(),
                kernel.gamma_tot(),
                kernel.momentum_diffusion()
            ));
            m.insert("gamma_tot".into(), json!(kernel.gamma_tot()));
            m.insert("d_p".into(), json!(kernel.momentum_diffusion()));
        }
        Err(e) => summary.push(format!("run kernel: {e}")),
    }
    if diverging {
        summary.push("divergent average momentum diffusion rate under refinement".into());
    }
    m.insert("diverging".into(), json!(diverging));
    a.write("kernels.csv", csv.as_bytes())?;
    Ok((summary, true))
}

fn nosignal(config: &RunConfig, opts: &RunOptions, a: &mut Artifacts, m: &mut Map<String, Value>) -> Result<Section> {
    let ns = config.nosignal.as_ref().ok_or_else(|| {
        Error::Config(vec![crate::config::Violation {
            path: "nosignal".into(),
            message: "nosignal-test needs a [nosignal] section".into(),
        }])
    })?;
    let build = |members: &[(f64, crate::config::StateSpec)]| -> Result<Vec<(f64, WaveFunction)>> {
        members
            .iter()
            .map(|(w, s)| Ok((*w, config.build_state(s, &opts.base_dir)?.normalized())))
            .collect()
    };
    let base = config.ensemble_spec(&opts.base_dir, opts.workers)?;
    let report = decomposition_invariance_test(
        &base,
        build(&ns.first)?,
        build(&ns.second)?,
        (SeedPlan::new(ns.seeds[0]), SeedPlan::new(ns.seeds[1])),
    )?;
    let json = json!({
        "unraveling": base.unraveling.name(),
        "distance": report.distance,
        "se_first": report.se_first,
        "se_second": report.se_second,
        "combined_se": report.combined_se,
        "consistent": report.consistent,
        "initial_distance": report.initial_distance,
    });
    a.write("nosignal.json", (serde_json::to_string_pretty(&json)? + "\n").as_bytes())?;
    m.insert("nosignal".into(), json);
    Ok((
        vec![format!(
            "{}: distance {:.4}, combined SE {:.4} -> {}",
            base.unraveling.name(),
            report.distance,
            report.combined_se,
            if report.consistent {
                "consistent with a linear averaged evolution"
            } else {
                "decompositions distinguishable"
            }
        )],
        true,
    ))
}

/// Natural-unit coupling for the `[physical]` section, and whether the
/// resulting rates vanish in double precision over the run.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalReport {
    pub lambda0: f64,
    pub time_unit_s: f64,
    /// `Γ_tot·T` with the physical `Λ₀` on the configured kernel shape.
    pub gamma_t: f64,
    pub underflow: bool,
}

pub fn physical_report(config: &RunConfig) -> Result<Option<PhysicalReport>> {
    let Some(p) = &config.physical else {
        return Ok(None);
    };
    let scale = physical_scale(p.mass_kg, p.length_m);
    let lat = config.lattice()?;
    let k = &config.kernel;
    let unit = KernelSpec::new(k.regularizer.clone(), k.law, 1.0)
        .allow_divergent(k.allow_divergent)
        .build(&lat)?;
    let gamma_t = scale.lambda0 * unit.gamma_tot() * config.dynamics.t_final;
    Ok(Some(PhysicalReport {
        lambda0: scale.lambda0,
        time_unit_s: scale.time_unit_s,
        gamma_t,
        underflow: gamma_t < f64::EPSILON,
    }))
}

pub fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path, extra: &str) -> RunConfig {
        let text = format!(
            r#"
[lattice]
points_per_axis = 32
length = 24.0
[kernel]
regularizer = "gaussian"
sigma_k = 1.0
lambda0 = 0.0
[dynamics]
unraveling = "none"
dt = 0.01
t_final = 2.0
output_count = 5
[initial]
packets = [{{ center = [1.0], momentum = [0.5], width = 1.5 }}]
[output]
directory = "{}"
{extra}
"#,
            dir.display()
        );
        RunConfig::parse(&text).unwrap()
    }

    #[test]
    fn free_dispersion_gate() {
        let root = tempfile::tempdir().unwrap();
        let c = config(&root.path().join("det"), "");
        let out = execute(Command::Deterministic, &c, &RunOptions::default()).unwrap();
        assert!(out.gates_passed, "{:?}", out.summary);
        let manifest: Value =
            serde_json::from_slice(&std::fs::read(root.path().join("det/manifest.json")).unwrap()).unwrap();
        assert!(manifest["max_relative_dispersion_error"].as_f64().unwrap() <= DISPERSION_TOLERANCE);
        let names: Vec<&str> = manifest["files"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| f["name"].as_str().unwrap())
            .collect();
        assert_eq!(names, ["observables.csv", "energy.csv"]);
    }

    #[test]
    fn failed_runs_leave_nothing_behind() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("m");
        let c = config(&dir, "");
        // 32 points fit, but a missing nosignal section fails after setup
        assert!(execute(Command::NoSignalTest, &c, &RunOptions::default()).is_err());
        assert!(!dir.exists());
    }

    #[test]
    fn physical_helper_flags_underflow() {
        let root = tempfile::tempdir().unwrap();
        let c = config(root.path(), "[physical]\nmass_kg = 1e-25\nlength_m = 1e-7");
        let r = physical_report(&c).unwrap().unwrap();
        assert!(r.lambda0 > 0.0 && r.underflow);
    }
}
