use serde::Serialize;
use sfe_core::functionals::{solve_heat_system, v_eps_with, ControlValueReport};
use sfe_core::hpath::{endpoint_diagnostics, simulate, DiagnosticOptions, EndpointReport, SimulationOptions};
use sfe_core::io::{fmt_f64, write_columns, write_density, write_plan, SolutionRecord};
use sfe_core::measure::Support;
use sfe_core::moment::{
    geometric_schedule, zero_noise_continuation, EpsDiagnostics, FixedPointOptions, Init,
};
use sfe_core::solver::{solve_with, Exhaustion, SolveOptions};
use sfe_core::stability::{
    default_index_set, make_family, reference_instance, run_convergence, ConvergenceOptions, ConvergenceReport,
    FamilyKind, FamilyParams,
};

use crate::artifacts::Artifacts;
use crate::config::{Command, RunConfig};
use crate::inputs::{density, grid, kernel, measure, InputFiles};
use crate::CliError;

/// Whether every solve in the run met its tolerance.
pub type Converged = bool;

/// Parses and validates every input before any computation, then runs.
pub fn dispatch(cfg: &RunConfig, out: &mut Artifacts, files: &mut InputFiles) -> Result<Converged, CliError> {
    match cfg.command {
        Command::Solve => solve_cmd(cfg, out, files),
        Command::Control => control_cmd(cfg, out, files),
        Command::Bridge => bridge_cmd(cfg, out, files),
        Command::Moment => moment_cmd(cfg, out, files),
        Command::Stability => stability_cmd(cfg, out, files),
    }
}

fn solve_options(cfg: &RunConfig, tol: f64, max_iters: usize) -> Result<SolveOptions, CliError> {
    let exhaustion = match cfg.get("exhaustion").unwrap_or("balls") {
        "balls" => Exhaustion::Balls,
        "compact" => Exhaustion::Compact,
        other => return Err(CliError::Invalid(format!("unknown exhaustion {other:?}"))),
    };
    Ok(SolveOptions {
        exhaustion,
        record_history: false,
        ..SolveOptions::with_tol(cfg.parse_or("tol", tol)?, cfg.parse_or("max_iters", max_iters)?)
    })
}

fn point_columns(s: &Support, prefix: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let d = s.dim();
    let names = (1..=d).map(|k| format!("{prefix}{k}")).collect();
    let cols = (0..d).map(|k| s.points().map(|x| x[k]).collect()).collect();
    (names, cols)
}

fn write_potential(out: &mut Artifacts, name: &str, s: &Support, u: &[f64], label: &str) -> Result<(), CliError> {
    let (mut names, mut cols) = point_columns(s, "x_");
    names.push(label.to_string());
    cols.push(u.to_vec());
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let cols: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    out.write_csv(name, |w| write_columns(w, &names, &cols))
}

fn solve_cmd(cfg: &RunConfig, out: &mut Artifacts, files: &mut InputFiles) -> Result<Converged, CliError> {
    let g = grid(cfg)?;
    let mu1 = measure(cfg, "mu1", g.as_ref(), files)?;
    let mu2 = measure(cfg, "mu2", g.as_ref(), files)?;
    let q = kernel(cfg, mu1.support().clone(), mu2.support().clone(), files)?;
    let opts = solve_options(cfg, 1e-10, 50_000)?;
    let sol = solve_with(&q, &mu1, &mu2, &opts)?;
    out.write_json("solution.json", &SolutionRecord::from(&sol))?;
    out.write_csv("plan.csv", |w| write_plan(w, &sol))?;
    write_potential(out, "potential_source.csv", sol.source(), &sol.u1, "u1")?;
    write_potential(out, "potential_target.csv", sol.target(), &sol.u2, "u2")?;
    Ok(sol.converged)
}

#[derive(Serialize)]
struct ControlRecord {
    eps: f64,
    report: ControlValueReport,
}

fn control_cmd(cfg: &RunConfig, out: &mut Artifacts, files: &mut InputFiles) -> Result<Converged, CliError> {
    let g = grid(cfg)?;
    let p0 = density(cfg, "p0", g.as_ref(), files)?;
    let p1 = density(cfg, "p1", g.as_ref(), files)?;
    let eps: f64 = cfg.parse_required("eps")?;
    let sweep: Option<Vec<f64>> = cfg.list("eps_sweep")?;
    let opts = solve_options(cfg, 1e-12, 200_000)?;
    let report = v_eps_with(&p0, &p1, eps, &opts)?;
    let mut converged = report.converged;
    out.write_json("control.json", &ControlRecord { eps, report })?;
    if let Some(list) = sweep {
        let mut v = Vec::with_capacity(list.len());
        let mut gap = Vec::with_capacity(list.len());
        for &e in &list {
            let r = v_eps_with(&p0, &p1, e, &opts)?;
            converged &= r.converged;
            v.push(r.v_eps);
            gap.push(r.max_pairwise_gap);
        }
        out.write_csv("sweep.csv", |w| write_columns(w, &["eps", "v_eps", "gap"], &[&list, &v, &gap]))?;
    }
    Ok(converged)
}

#[derive(Serialize)]
struct BridgeRecord {
    eps: f64,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    solver_converged: bool,
    endpoints: EndpointReport,
}

fn bridge_cmd(cfg: &RunConfig, out: &mut Artifacts, files: &mut InputFiles) -> Result<Converged, CliError> {
    let g = grid(cfg)?;
    let p0 = density(cfg, "p0", g.as_ref(), files)?;
    let p1 = density(cfg, "p1", g.as_ref(), files)?;
    let eps: f64 = cfg.parse_required("eps")?;
    let seed: u64 = cfg
        .parse("seed")?
        .ok_or_else(|| CliError::Invalid("bridge is stochastic: `seed` is required".into()))?;
    let sim = SimulationOptions {
        n_paths: cfg.parse_or("n_paths", 10_000)?,
        n_steps: cfg.parse_or("n_steps", 200)?,
        seed,
        full_paths: cfg.bool_or("full_paths", false)?,
    };
    let diag = DiagnosticOptions {
        bins_per_axis: cfg.parse_or("bins", 50)?,
        bootstrap: cfg.parse_or("bootstrap", 16)?,
        seed,
        ..Default::default()
    };
    let opts = solve_options(cfg, 1e-12, 200_000)?;
    let sol = solve_heat_system(&p0, &p1, eps, &opts)?;
    let ens = simulate(&p0, &sol, eps, &sim)?;
    let report = endpoint_diagnostics(&ens, &sol, &p1, &diag)?;

    let d = ens.dim;
    let mut names: Vec<String> = (1..=d).map(|k| format!("x0_{k}")).collect();
    names.extend((1..=d).map(|k| format!("x1_{k}")));
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|k| (0..ens.n_paths).map(|i| ens.initial_state(i)[k]).collect())
        .chain((0..d).map(|k| (0..ens.n_paths).map(|i| ens.terminal_state(i)[k]).collect()))
        .collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let cols: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    out.write_csv("endpoints.csv", |w| write_columns(w, &names, &cols))?;
    if let Some(paths) = &ens.paths {
        let mut bytes = format!("shape {} {} {}\n", ens.n_paths, ens.times.len(), d).into_bytes();
        for v in paths {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_bytes("paths.bin", &bytes)?;
    }
    out.write_json(
        "bridge.json",
        &BridgeRecord {
            eps,
            n_paths: sim.n_paths,
            n_steps: sim.n_steps,
            seed,
            solver_converged: sol.converged,
            endpoints: report,
        },
    )?;
    Ok(sol.converged)
}

#[derive(Serialize)]
struct GridFunction {
    dim: usize,
    points: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct MomentRecord {
    p0: GridFunction,
    u_bar: Vec<f64>,
    eps_schedule: Vec<f64>,
    pushforward_error: f64,
    pushforward_threshold: Option<f64>,
    w2_check: f64,
    convexity_defect: f64,
    self_consistency: Vec<f64>,
    shift: Vec<f64>,
    converged: bool,
}

pub fn moment_options(cfg: &RunConfig) -> Result<(f64, Vec<f64>, FixedPointOptions), CliError> {
    let r: f64 = cfg.parse_required("r")?;
    let schedule = match cfg.list::<f64>("eps_schedule")? {
        Some(s) => s,
        None => geometric_schedule(cfg.parse_or("eps0", 1.0)?, cfg.parse_or("steps", 8)?),
    };
    let init = match cfg.get("init").unwrap_or("uniform") {
        "uniform" => Init::Uniform,
        "target" => Init::Target,
        other => return Err(CliError::Invalid(format!("unknown init {other:?}"))),
    };
    let opts = FixedPointOptions {
        damping: cfg.parse_or("damping", 0.5)?,
        tol: cfg.parse_or("tol", 1e-10)?,
        max_outer: cfg.parse_or("max_outer", 2_000)?,
        init,
        inner_tol: cfg.parse_or("inner_tol", 1e-12)?,
        ..Default::default()
    };
    Ok((r, schedule, opts))
}

fn moment_cmd(cfg: &RunConfig, out: &mut Artifacts, files: &mut InputFiles) -> Result<Converged, CliError> {
    let g = grid(cfg)?;
    let p1 = density(cfg, "p1", g.as_ref(), files)?;
    let (r, schedule, opts) = moment_options(cfg)?;
    let threshold: Option<f64> = cfg.parse("pushforward_threshold")?;
    let res = zero_noise_continuation(&p1, r, &schedule, &opts)?;
    let s = res.p0.support();
    out.write_json(
        "moment.json",
        &MomentRecord {
            p0: GridFunction {
                dim: s.dim(),
                points: s.coordinates().to_vec(),
                values: res.p0.values().to_vec(),
            },
            u_bar: res.u_bar.clone(),
            eps_schedule: res.eps_schedule.clone(),
            pushforward_error: res.pushforward_error,
            pushforward_threshold: threshold,
            w2_check: res.w2_check,
            convexity_defect: res.convexity_defect,
            self_consistency: res.traces.iter().map(|t| t.self_consistency).collect(),
            shift: res.shift.clone(),
            converged: res.converged,
        },
    )?;
    let col = |f: fn(&EpsDiagnostics) -> f64| res.diagnostics.iter().map(f).collect::<Vec<f64>>();
    let cols = [
        col(|d| d.eps),
        col(|d| d.residual),
        col(|d| d.objective),
        col(|d| d.bl_drift),
        col(|d| d.convexity_defect),
        col(|d| d.pushforward_error),
    ];
    let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    out.write_csv("diagnostics.csv", |w| {
        write_columns(
            w,
            &["eps", "residual", "objective", "bl_drift", "convexity_defect", "pushforward_error"],
            &refs,
        )
    })?;
    out.write_csv("p0.csv", |w| write_density(w, &res.p0))?;
    write_potential(out, "u_bar.csv", s, &res.u_bar, "u_bar")?;
    Ok(res.converged)
}

#[derive(Serialize)]
struct StabilityRecord {
    family: FamilyKind,
    params: FamilyParams,
    report: ConvergenceReport,
}

fn stability_cmd(cfg: &RunConfig, out: &mut Artifacts, files: &mut InputFiles) -> Result<Converged, CliError> {
    let (q, mu1, mu2) = match cfg.get("instance").unwrap_or("reference") {
        "reference" => reference_instance()?,
        "custom" => {
            let g = grid(cfg)?;
            let mu1 = measure(cfg, "mu1", g.as_ref(), files)?;
            let mu2 = measure(cfg, "mu2", g.as_ref(), files)?;
            let q = kernel(cfg, mu1.support().clone(), mu2.support().clone(), files)?;
            (q, mu1, mu2)
        }
        other => return Err(CliError::Invalid(format!("unknown instance {other:?}"))),
    };
    let kind: FamilyKind = cfg.require("family")?.parse()?;
    let seed: Option<u64> = cfg.parse("seed")?;
    if kind == FamilyKind::MarginalEmpirical && seed.is_none() {
        return Err(CliError::Invalid("empirical family is stochastic: `seed` is required".into()));
    }
    let defaults = FamilyParams::default();
    let params = FamilyParams {
        amplitude: cfg.parse_or("amplitude", defaults.amplitude)?,
        bandwidth: cfg.parse_or("bandwidth", defaults.bandwidth)?,
        seed: seed.unwrap_or(0),
    };
    let indices = cfg.list::<usize>("indices")?.unwrap_or_else(default_index_set);
    let family = make_family(&q, &mu1, &mu2, kind, &indices, &params)?;
    let r_max = q.source().max_norm();
    let opts = ConvergenceOptions {
        probe_drift: cfg.parse_or("probe_drift", 0.0)?,
        r_prime: Some(cfg.parse_or("r_prime", 0.75 * r_max)?),
        solve: SolveOptions::with_tol(cfg.parse_or("tol", 1e-12)?, 50_000),
        ..Default::default()
    };
    let report = run_convergence(&q, &mu1, &mu2, &family, &opts)?;
    let col = |f: fn(&sfe_core::stability::ConvergenceRow) -> f64| report.rows.iter().map(f).collect::<Vec<f64>>();
    let cols = [
        col(|r| r.n as f64),
        col(|r| r.plan_bl),
        col(|r| r.product_gap),
        col(|r| r.potential_gap),
        col(|r| r.supnorm_gap.unwrap_or(f64::NAN)),
    ];
    let mut buf = String::from("n,plan_bl,product_gap,potential_gap,supnorm_gap\n");
    for i in 0..report.rows.len() {
        buf.push_str(&report.rows[i].n.to_string());
        for c in &cols[1..] {
            buf.push(',');
            buf.push_str(&fmt_f64(c[i]));
        }
        buf.push('\n');
    }
    out.write_bytes("stability.csv", buf.as_bytes())?;
    let converged = report.rows.iter().all(|r| r.error.is_none());
    out.write_json(
        "stability.json",
        &StabilityRecord {
            family: kind,
            params,
            report,
        },
    )?;
    Ok(converged)
}
