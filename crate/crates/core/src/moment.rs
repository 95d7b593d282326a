//! Convex potentials with a prescribed moment measure, obtained as zero-noise
//! limits of the fixed point
//!
//! ```text
//! p(x) ∝ 1_{B_r}(x) exp(-ε u₁(x; g_ε(1), p, P₁) - |x|²/2)
//! ```
//!
//! iterated with geometric damping and continued along a decreasing ε schedule.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::functionals::{control_value, psi_terms, uniform_bound_on};
use crate::measure::{bl_distance, w2_distance_1d, w2_distance_lp, Density, DiscreteMeasure, KernelSpec, Support};
use crate::numeric::logsumexp;
use crate::solver::{solve_with, SchroedingerSolution, SolveOptions};
use crate::{Error, Result};

/// Largest number of atoms per side handed to the transport LP.
const W2_SUBSAMPLE: usize = 200;

#[derive(Debug, Clone, Default)]
pub enum Init {
    /// Uniform on the domain.
    #[default]
    Uniform,
    /// `P₁` restricted to the domain.
    Target,
    Given(Density),
}

#[derive(Debug, Clone)]
pub struct FixedPointOptions {
    pub damping: f64,
    /// Stop when `sup |step(p) - p| ≤ tol`.
    pub tol: f64,
    pub max_outer: usize,
    pub init: Init,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    /// Keep every iterate in the trace.
    pub keep_iterates: bool,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-10,
            max_outer: 2_000,
            init: Init::Uniform,
            inner_tol: 1e-12,
            inner_max_iters: 200_000,
            keep_iterates: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointTrace {
    pub eps: f64,
    pub damping: f64,
    pub converged: bool,
    /// `sup |step(p) - p|` at the last iterate.
    pub residual: f64,
    pub residuals: Vec<f64>,
    pub objective_values: Vec<f64>,
    /// `∫ū₂ dP₁ - ū₂(y₀)` per outer iteration.
    pub jensen_slacks: Vec<f64>,
    pub iterates: Vec<Density>,
    /// The returned density `step(p)` for the last iterate `p`.
    pub density: Density,
    /// `ε u₁ + ½|x|²` on the domain, shifted to minimum zero.
    pub u_bar1: Vec<f64>,
    /// `ε u₂ + ½|y|²` on the target support.
    pub u_bar2: Vec<f64>,
    /// `sup |step(density) - density|`.
    pub self_consistency: f64,
    pub objective: f64,
    /// `-log C - ε S(P₁) + ∫ū₂ dP₁ - ½∫|y|² dP₁` at the returned density.
    pub consistency_value: f64,
    pub upper_bound: f64,
    /// Barycenter of the input target; the target is solved recentred.
    pub shift: Vec<f64>,
    /// `log ν₂` of the last inner solve, for warm starts.
    pub warm_start: Vec<f64>,
}

struct Stepper {
    target: Density,
    eps: f64,
    domain: Arc<Support>,
    half_sq: Vec<f64>,
    log_vol: Vec<f64>,
    solve: SolveOptions,
}

struct StepOut {
    log_next: Vec<f64>,
    next: Density,
    sol: SchroedingerSolution,
}

impl Stepper {
    fn new(target: Density, eps: f64, domain: Arc<Support>, inner_tol: f64, inner_max: usize) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
        }
        let half_sq = domain.points().map(|x| 0.5 * x.iter().map(|v| v * v).sum::<f64>()).collect();
        let log_vol = domain.cell_volumes().iter().map(|v| v.ln()).collect();
        Ok(Self {
            target,
            eps,
            domain,
            half_sq,
            log_vol,
            solve: SolveOptions {
                record_history: false,
                ..SolveOptions::with_tol(inner_tol, inner_max)
            },
        })
    }

    fn step(&self, p: &Density, warm: Option<Vec<f64>>) -> Result<StepOut> {
        let q = KernelSpec::gaussian_heat(1.0, self.eps, self.domain.clone(), self.target.support().clone())?;
        let opts = SolveOptions {
            warm_start: warm,
            ..self.solve.clone()
        };
        let sol = solve_with(&q, &p.to_measure(), &self.target.to_measure(), &opts)?;
        if !sol.converged {
            return Err(Error::NotConverged(format!(
                "inner solve stopped at residual {:.3e}",
                sol.final_residual
            )));
        }
        let mut log_next: Vec<f64> = sol
            .u1
            .iter()
            .zip(&self.half_sq)
            .map(|(u, h)| -self.eps * u - h)
            .collect();
        let log_c = logsumexp(log_next.iter().zip(&self.log_vol).map(|(l, v)| l + v));
        log_next.iter_mut().for_each(|l| *l -= log_c);
        let next = Density::nonnegative(self.domain.clone(), log_next.iter().map(|l| l.exp()).collect())?;
        Ok(StepOut {
            log_next,
            next,
            sol,
        })
    }

    /// `ε u₂ + ½|y|²` on the target support, and its value at the barycenter.
    fn u_bar2(&self, sol: &SchroedingerSolution) -> (Vec<f64>, f64) {
        let t = self.target.support();
        let ub: Vec<f64> = t
            .points()
            .zip(&sol.u2)
            .map(|(y, u)| self.eps * u + 0.5 * y.iter().map(|v| v * v).sum::<f64>())
            .collect();
        let y0 = self.target.to_measure().barycenter();
        let at_y0 = self.eps * sol.u2_at(&y0).expect("heat kernel has a closed form")
            + 0.5 * y0.iter().map(|v| v * v).sum::<f64>();
        (ub, at_y0)
    }

    fn objective(&self, p: &Density, sol: &SchroedingerSolution) -> Result<f64> {
        let v = control_value(sol, p, &self.target)?;
        Ok(psi_terms(p, self.eps, v.v_eps, sol.converged).objective)
    }
}

fn sup_gap(a: &Density, b: &Density) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `P₁` translated to barycenter zero, with the shift.
pub fn recenter(p1: &Density) -> Result<(Density, Vec<f64>)> {
    let shift = p1.to_measure().barycenter();
    let support = Arc::new(p1.support().translated(&shift)?);
    Ok((Density::normalized(support, p1.values().to_vec())?, shift))
}

/// The grid cells of the (recentred) target support inside `B_r`.
pub fn domain_for(target: &Density, r: f64) -> Result<Arc<Support>> {
    if !(r > 0.0) {
        return Err(Error::InvalidInput(format!("radius must be positive, got {r}")));
    }
    let idx = target.support().indices_within(r);
    Ok(Arc::new(target.support().restricted(&idx)?))
}

fn check_domain(p: &Density, r: f64) -> Result<()> {
    let worst = p.support().max_norm();
    if worst > r * (1.0 + 1e-12) {
        return Err(Error::OutsideBall { radius: r, norm: worst });
    }
    Ok(())
}

/// One application of the fixed-point map.
pub fn fixed_point_step(p: &Density, p1: &Density, eps: f64, r: f64) -> Result<Density> {
    check_domain(p, r)?;
    let stepper = Stepper::new(p1.clone(), eps, p.support().clone(), 1e-12, 200_000)?;
    Ok(stepper.step(p, None)?.next)
}

fn initial_density(init: &Init, domain: &Arc<Support>, target: &Density, r: f64) -> Result<Density> {
    match init {
        Init::Uniform => Density::from_fn(domain.clone(), |_| 1.0),
        Init::Target => {
            let vals = target
                .support()
                .indices_within(r)
                .iter()
                .map(|&i| target.values()[i])
                .collect();
            Density::normalized(domain.clone(), vals)
        }
        Init::Given(p) => {
            if !p.support().same_points(domain) {
                return Err(Error::InvalidInput(
                    "initial density must live on the fixed-point domain".into(),
                ));
            }
            Density::normalized(domain.clone(), p.values().to_vec())
        }
    }
}

pub fn solve_fixed_point(p1: &Density, eps: f64, r: f64, opts: &FixedPointOptions) -> Result<FixedPointTrace> {
    solve_fixed_point_warm(p1, eps, r, opts, None)
}

fn solve_fixed_point_warm(
    p1: &Density,
    eps: f64,
    r: f64,
    opts: &FixedPointOptions,
    warm: Option<Vec<f64>>,
) -> Result<FixedPointTrace> {
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidInput(format!("damping must lie in (0, 1], got {}", opts.damping)));
    }
    let (target, shift) = recenter(p1)?;
    let domain = domain_for(&target, r)?;
    let stepper = Stepper::new(target.clone(), eps, domain.clone(), opts.inner_tol, opts.inner_max_iters)?;
    let mut p = initial_density(&opts.init, &domain, &target, r)?;
    let mut log_p = p.log_values();
    let mut warm = warm;
    let (mut residuals, mut objectives, mut slacks, mut iterates) = (vec![], vec![], vec![], vec![]);
    let mut converged = false;
    let mut out = stepper.step(&p, warm.take())?;
    for _ in 0..opts.max_outer {
        if opts.keep_iterates {
            iterates.push(p.clone());
        }
        let residual = sup_gap(&out.next, &p);
        residuals.push(residual);
        objectives.push(stepper.objective(&p, &out.sol)?);
        let (ub2, at_y0) = stepper.u_bar2(&out.sol);
        let mean: f64 = ub2.iter().zip(target.to_measure().weights()).map(|(u, w)| u * w).sum();
        slacks.push(mean - at_y0);
        if residual <= opts.tol {
            converged = true;
            break;
        }
        let theta = opts.damping;
        for (l, n) in log_p.iter_mut().zip(&out.log_next) {
            *l = if *l == f64::NEG_INFINITY { *n } else { (1.0 - theta) * *l + theta * n };
        }
        let lc = logsumexp(log_p.iter().zip(&stepper.log_vol).map(|(l, v)| l + v));
        log_p.iter_mut().for_each(|l| *l -= lc);
        p = Density::nonnegative(domain.clone(), log_p.iter().map(|l| l.exp()).collect())?;
        let b = out.sol.log_nu2.clone();
        out = stepper.step(&p, Some(b))?;
    }
    let residual = *residuals.last().unwrap_or(&f64::INFINITY);

    // The returned density is step(p); its own solve gives the final diagnostics.
    let density = out.next.clone();
    let u1 = &out.sol.u1;
    let raw: Vec<f64> = u1.iter().zip(&stepper.half_sq).map(|(u, h)| eps * u + h).collect();
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let u_bar1: Vec<f64> = raw.iter().map(|v| v - min).collect();
    let last = stepper.step(&density, Some(out.sol.log_nu2.clone()))?;
    let self_consistency = sup_gap(&last.next, &density);
    let objective = stepper.objective(&density, &last.sol)?;
    let (u_bar2, _) = stepper.u_bar2(&last.sol);
    let consistency_value = consistency_value(&stepper, &last.sol)?;
    let upper_bound = uniform_bound_on(&domain, r)?;
    Ok(FixedPointTrace {
        eps,
        damping: opts.damping,
        converged,
        residual,
        residuals,
        objective_values: objectives,
        jensen_slacks: slacks,
        iterates,
        density,
        u_bar1,
        u_bar2,
        self_consistency,
        objective,
        consistency_value,
        upper_bound,
        shift,
        warm_start: last.sol.log_nu2.clone(),
    })
}

/// `-log C - ε S(P₁) + ∫ū₂ dP₁ - ½∫|y|² dP₁` with `C` the normaliser of
/// `exp(-ε u₁ - ½|x|²)` on the domain.
fn consistency_value(stepper: &Stepper, sol: &SchroedingerSolution) -> Result<f64> {
    let eps = stepper.eps;
    let log_c = logsumexp(
        sol.u1
            .iter()
            .zip(&stepper.half_sq)
            .zip(&stepper.log_vol)
            .map(|((u, h), v)| -eps * u - h + v),
    );
    let (ub2, _) = stepper.u_bar2(sol);
    let m = stepper.target.to_measure();
    let mean_ub2: f64 = ub2.iter().zip(m.weights()).map(|(u, w)| u * w).sum();
    Ok(-log_c - eps * stepper.target.entropy() + mean_ub2 - 0.5 * m.second_moment())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpsDiagnostics {
    pub eps: f64,
    pub residual: f64,
    pub objective: f64,
    pub upper_bound: f64,
    /// BL distance to the previous ε's density (zero for the first).
    pub bl_drift: f64,
    pub convexity_defect: f64,
    pub pushforward_error: f64,
    pub outer_iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct MomentMeasureResult {
    pub p0: Density,
    pub u_bar: Vec<f64>,
    pub eps_schedule: Vec<f64>,
    pub pushforward_error: f64,
    pub w2_check: f64,
    pub convexity_defect: f64,
    pub shift: Vec<f64>,
    pub diagnostics: Vec<EpsDiagnostics>,
    /// False when some ε failed to converge; the schedule stops there.
    pub converged: bool,
    pub traces: Vec<FixedPointTrace>,
}

/// `ε₀ 2^{-k}` for `k = 0..steps`.
pub fn geometric_schedule(eps0: f64, steps: usize) -> Vec<f64> {
    (0..steps).map(|k| eps0 * 0.5f64.powi(k as i32)).collect()
}

pub fn zero_noise_continuation(
    p1: &Density,
    r: f64,
    eps_schedule: &[f64],
    opts: &FixedPointOptions,
) -> Result<MomentMeasureResult> {
    if eps_schedule.is_empty() || eps_schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput("eps schedule must be non-empty and strictly decreasing".into()));
    }
    let (target, shift) = recenter(p1)?;
    let mut traces: Vec<FixedPointTrace> = Vec::new();
    let mut diagnostics = Vec::new();
    let mut converged = true;
    for &eps in eps_schedule {
        let (init, warm) = match traces.last() {
            None => (opts.init.clone(), None),
            Some(prev) => {
                let scale = prev.eps / eps;
                (
                    Init::Given(prev.density.clone()),
                    Some(prev.warm_start.iter().map(|b| b * scale).collect()),
                )
            }
        };
        let step_opts = FixedPointOptions { init, ..opts.clone() };
        let trace = solve_fixed_point_warm(&target, eps, r, &step_opts, warm)?;
        let check = verify_moment_measure(&trace.u_bar1, trace.density.support(), &target)?;
        let bl_drift = match traces.last() {
            None => 0.0,
            Some(prev) => bl_distance(&prev.density.to_measure(), &trace.density.to_measure()),
        };
        diagnostics.push(EpsDiagnostics {
            eps,
            residual: trace.residual,
            objective: trace.objective,
            upper_bound: trace.upper_bound,
            bl_drift,
            convexity_defect: check_convexity(&trace.u_bar1, trace.density.support())?,
            pushforward_error: check.pushforward_error,
            outer_iterations: trace.residuals.len(),
            converged: trace.converged,
        });
        let ok = trace.converged;
        traces.push(trace);
        if !ok {
            converged = false;
            break;
        }
    }
    let last = traces.last().expect("non-empty schedule");
    let check = verify_moment_measure(&last.u_bar1, last.density.support(), &target)?;
    Ok(MomentMeasureResult {
        p0: last.density.clone(),
        u_bar: last.u_bar1.clone(),
        eps_schedule: traces.iter().map(|t| t.eps).collect(),
        pushforward_error: check.pushforward_error,
        w2_check: check.w2_check,
        convexity_defect: check_convexity(&last.u_bar1, last.density.support())?,
        shift,
        diagnostics,
        converged,
        traces,
    })
}

/// Gradient of a grid function by central differences, with second-order
/// one-sided stencils where a neighbour is missing.
pub fn lattice_gradient(u: &[f64], support: &Support) -> Result<Vec<f64>> {
    let lat = support
        .lattice()
        .ok_or_else(|| Error::InvalidInput("gradient needs a regular lattice".into()))?;
    let d = support.dim();
    let h = lat.spacing;
    let mut grad = vec![0.0; support.len() * d];
    let mut key = vec![0i64; d];
    for i in 0..support.len() {
        let c = lat.coords(i, d);
        for k in 0..d {
            key.copy_from_slice(c);
            let mut at = |off: i64| {
                key[k] = c[k] + off;
                lat.lookup(&key).map(|j| u[j])
            };
            let (m2, m1, p1, p2) = (at(-2), at(-1), at(1), at(2));
            let g = match (m2, m1, p1, p2) {
                (_, Some(a), Some(b), _) => (b - a) / (2.0 * h),
                (_, _, Some(b), Some(bb)) => (-3.0 * u[i] + 4.0 * b - bb) / (2.0 * h),
                (Some(aa), Some(a), _, _) => (3.0 * u[i] - 4.0 * a + aa) / (2.0 * h),
                (_, _, Some(b), None) => (b - u[i]) / h,
                (_, Some(a), None, _) => (u[i] - a) / h,
                _ => return Err(Error::NonFiniteGradient(i)),
            };
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(i));
            }
            grad[i * d + k] = g;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MomentVerification {
    /// BL distance between `(Dū)_#(e^{-ū}dx)` and `P₁`.
    pub pushforward_error: f64,
    pub pushforward_w2: f64,
    /// `∫|x - Dū(x)|² e^{-ū}dx`.
    pub transport_cost: f64,
    /// `W₂(e^{-ū}dx, P₁)²`.
    pub w2_squared: f64,
    /// `transport_cost - w2_squared`.
    pub w2_check: f64,
}

/// The normalized measure `e^{-ū} vol` on the support.
pub fn gibbs_measure(u_bar: &[f64], support: &Arc<Support>) -> Result<DiscreteMeasure> {
    let min = u_bar.iter().copied().fold(f64::INFINITY, f64::min);
    let w = u_bar
        .iter()
        .zip(support.cell_volumes())
        .map(|(u, v)| (min - u).exp() * v)
        .collect();
    DiscreteMeasure::normalized(support.clone(), w)
}

/// `(Dū)_#(e^{-ū}dx)` with merged atoms.
pub fn pushforward(u_bar: &[f64], support: &Arc<Support>) -> Result<DiscreteMeasure> {
    if u_bar.len() != support.len() {
        return Err(Error::InvalidInput("potential length does not match the support".into()));
    }
    if let Some(i) = u_bar.iter().position(|u| !u.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    let grad = lattice_gradient(u_bar, support)?;
    let gibbs = gibbs_measure(u_bar, support)?;
    DiscreteMeasure::from_atoms(support.dim(), &grad, gibbs.weights())
}

fn thin(m: &DiscreteMeasure, cap: usize) -> Result<DiscreteMeasure> {
    if m.weights().len() <= cap {
        return Ok(m.clone());
    }
    // Keep the heaviest atoms; the rest of the mass is dropped before renormalising.
    let mut order: Vec<usize> = (0..m.weights().len()).collect();
    order.sort_by(|&a, &b| m.weights()[b].total_cmp(&m.weights()[a]).then(a.cmp(&b)));
    order.truncate(cap);
    order.sort_unstable();
    let d = m.dim();
    let pts: Vec<f64> = order.iter().flat_map(|&i| m.support().point(i).to_vec()).collect();
    let w: Vec<f64> = order.iter().map(|&i| m.weights()[i]).collect();
    DiscreteMeasure::from_atoms(d, &pts, &w)
}

fn w2(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    if a.dim() == 1 {
        w2_distance_1d(a, b)
    } else {
        w2_distance_lp(&thin(a, W2_SUBSAMPLE)?, &thin(b, W2_SUBSAMPLE)?, 2 * W2_SUBSAMPLE)
    }
}

pub fn verify_moment_measure(u_bar: &[f64], support: &Arc<Support>, p1: &Density) -> Result<MomentVerification> {
    let push = pushforward(u_bar, support)?;
    let target = p1.to_measure();
    let pushforward_error = bl_distance(&push, &target);
    let pushforward_w2 = w2(&push, &target)?;
    let gibbs = gibbs_measure(u_bar, support)?;
    let grad = lattice_gradient(u_bar, support)?;
    let d = support.dim();
    let transport_cost: f64 = support
        .points()
        .enumerate()
        .map(|(i, x)| {
            let g = &grad[i * d..(i + 1) * d];
            gibbs.weights()[i] * x.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum();
    let w = w2(&gibbs, &target)?;
    Ok(MomentVerification {
        pushforward_error,
        pushforward_w2,
        transport_cost,
        w2_squared: w * w,
        w2_check: transport_cost - w * w,
    })
}

/// Largest midpoint-convexity violation `ū(x) - ½ū(x-h) - ½ū(x+h)` over axis
/// and diagonal lattice triples, clipped at zero.
pub fn check_convexity(u_bar: &[f64], support: &Support) -> Result<f64> {
    let lat = support
        .lattice()
        .ok_or_else(|| Error::InvalidInput("convexity check needs a regular lattice".into()))?;
    let d = support.dim();
    let mut dirs: Vec<Vec<i64>> = Vec::new();
    for k in 0..d {
        let mut v = vec![0; d];
        v[k] = 1;
        dirs.push(v);
        for l in k + 1..d {
            for s in [1, -1] {
                let mut v = vec![0; d];
                v[k] = 1;
                v[l] = s;
                dirs.push(v);
            }
        }
    }
    let mut worst = 0.0f64;
    let mut a = vec![0i64; d];
    let mut b = vec![0i64; d];
    for i in 0..support.len() {
        let c = lat.coords(i, d);
        for v in &dirs {
            for k in 0..d {
                a[k] = c[k] - v[k];
                b[k] = c[k] + v[k];
            }
            if let (Some(ia), Some(ib)) = (lat.lookup(&a), lat.lookup(&b)) {
                worst = worst.max(u_bar[i] - 0.5 * u_bar[ia] - 0.5 * u_bar[ib]);
            }
        }
    }
    Ok(worst)
}

/// `ū(x) - ½|x|²` after removing its mean over `|x| ≤ radius`, as a sup-norm
/// distance to the quadratic `½|x|² + const`.
pub fn distance_to_quadratic(u_bar: &[f64], support: &Support, radius: f64) -> f64 {
    let idx = support.indices_within(radius);
    let diffs: Vec<f64> = idx
        .iter()
        .map(|&i| u_bar[i] - 0.5 * support.point(i).iter().map(|x| x * x).sum::<f64>())
        .collect();
    let lo = diffs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    0.5 * (hi - lo)
}
