//! Convergence ladders for plans, factor products and potentials under
//! perturbed kernels and marginals.

use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::measure::{
    bl_distance, make_grid, BlDictionary, DiscreteMeasure, KernelKind, KernelSpec, ProductMeasure, Support,
    TiltField,
};
use crate::sampling::{stream_rng, GridSampler};
use crate::solver::{solve_with, truncated_potential_at, Exhaustion, SchroedingerSolution, Side, SolveOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    KernelPerturbation,
    MarginalMollification,
    MarginalEmpirical,
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernel_perturbation" => Ok(Self::KernelPerturbation),
            "marginal_mollification" => Ok(Self::MarginalMollification),
            "marginal_empirical" => Ok(Self::MarginalEmpirical),
            other => Err(Error::InvalidInput(format!("unknown family kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FamilyParams {
    /// `A` in `a_n = A/n`.
    pub amplitude: f64,
    /// `h` in the mollifier bandwidth `h/n`.
    pub bandwidth: f64,
    pub seed: u64,
}

impl Default for FamilyParams {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            bandwidth: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FamilyMember {
    pub n: usize,
    pub kernel: KernelSpec,
    pub mu1: DiscreteMeasure,
    pub mu2: DiscreteMeasure,
    /// `max |q_n - q|` over the grid.
    pub kernel_sup_gap: f64,
}

#[derive(Debug, Clone)]
pub struct PerturbationFamily {
    pub kind: FamilyKind,
    pub index_set: Vec<usize>,
    pub params: FamilyParams,
    pub members: Vec<FamilyMember>,
}

pub fn default_index_set() -> Vec<usize> {
    vec![4, 8, 16, 32, 64]
}

fn kernel_sup_gap(a: &KernelSpec, b: &KernelSpec) -> f64 {
    let (la, lb) = (a.log_matrix(), b.log_matrix());
    la.iter()
        .zip(lb.iter())
        .map(|(x, y)| (x.exp() - y.exp()).abs())
        .fold(0.0, f64::max)
}

/// Gaussian smoothing with bandwidth `h`, each atom spread over the same grid.
pub fn mollify(mu: &DiscreteMeasure, h: f64) -> Result<DiscreteMeasure> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")));
    }
    let s = mu.support();
    let vols = s.cell_volumes();
    let mut out = vec![0.0; s.len()];
    let mut logs = vec![0.0; s.len()];
    for (i, x) in s.points().enumerate() {
        let w = mu.weights()[i];
        if w == 0.0 {
            continue;
        }
        for (j, y) in s.points().enumerate() {
            let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
            logs[j] = -d2 / (2.0 * h * h) + vols[j].ln();
        }
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - top).exp()).sum();
        for (o, l) in out.iter_mut().zip(&logs) {
            *o += w * (l - top).exp() / z;
        }
    }
    DiscreteMeasure::normalized(s.clone(), out)
}

/// Empirical measure of `n` seeded draws, each assigned to its grid cell.
pub fn empirical(mu: &DiscreteMeasure, n: usize, seed: u64, stream: u64) -> Result<DiscreteMeasure> {
    if n == 0 {
        return Err(Error::InvalidInput("empirical measure needs at least one sample".into()));
    }
    let sampler = GridSampler::new(mu, false)?;
    let mut rng = stream_rng(seed, stream);
    let mut counts = vec![0.0; mu.support().len()];
    for _ in 0..n {
        counts[sampler.pick(&mut rng)] += 1.0;
    }
    DiscreteMeasure::normalized(mu.support().clone(), counts)
}

pub fn make_family(
    base_q: &KernelSpec,
    base_mu1: &DiscreteMeasure,
    base_mu2: &DiscreteMeasure,
    kind: FamilyKind,
    index_set: &[usize],
    params: &FamilyParams,
) -> Result<PerturbationFamily> {
    if index_set.contains(&0) {
        return Err(Error::InvalidInput("family indices must be positive".into()));
    }
    let members = index_set
        .iter()
        .map(|&n| {
            let (kernel, mu1, mu2) = match kind {
                FamilyKind::KernelPerturbation => {
                    let a = params.amplitude / n as f64;
                    let kind = if a == 0.0 {
                        base_q.kind().clone()
                    } else {
                        KernelKind::Tilted {
                            base: Box::new(base_q.kind().clone()),
                            amplitude: a,
                            field: TiltField::SinProduct,
                        }
                    };
                    let q = KernelSpec::new(kind, base_q.source().clone(), base_q.target().clone())?;
                    (q, base_mu1.clone(), base_mu2.clone())
                }
                FamilyKind::MarginalMollification => {
                    let h = params.bandwidth / n as f64;
                    (base_q.clone(), mollify(base_mu1, h)?, mollify(base_mu2, h)?)
                }
                FamilyKind::MarginalEmpirical => (
                    base_q.clone(),
                    empirical(base_mu1, n, params.seed, 2 * n as u64)?,
                    empirical(base_mu2, n, params.seed, 2 * n as u64 + 1)?,
                ),
            };
            if let Some(v) = kernel.log_matrix().iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("perturbed kernel is not positive: log q = {v}")));
            }
            Ok(FamilyMember {
                n,
                kernel_sup_gap: kernel_sup_gap(&kernel, base_q),
                kernel,
                mu1,
                mu2,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbationFamily {
        kind,
        index_set: index_set.to_vec(),
        params: params.clone(),
        members,
    })
}

/// A pair of probe points `(x, y)`; member `n` is probed at `(x + c/n·e, y + c/n·e)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvergenceOptions {
    pub probes: Vec<Probe>,
    /// Truncation level; defaults to the largest normalization index in play.
    pub m: Option<usize>,
    /// `c` in the moving-probe offset `c/n`; zero keeps probes fixed.
    pub probe_drift: f64,
    /// Radius for the sup-norm gap; skipped when `None`.
    pub r_prime: Option<f64>,
    pub solve: SolveOptions,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        Self {
            probes: Vec::new(),
            m: None,
            probe_drift: 0.0,
            r_prime: None,
            solve: SolveOptions::with_tol(1e-12, 50_000),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub plan_bl: f64,
    pub product_gap: f64,
    /// Gap of `u_{1|m} + u_{2|m}` at the probes.
    pub potential_gap: f64,
    /// `|u₁ gap| + |u₂ gap|` at the probes in the compact gauge.
    pub potential_gap_individual: f64,
    pub supnorm_gap: Option<f64>,
    /// Largest BL distance between member and base marginals.
    pub input_bl: f64,
    pub kernel_sup_gap: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Trend {
    pub first: f64,
    pub last: f64,
    /// `first / last`.
    pub reduction: f64,
    pub non_increasing: bool,
}

impl Trend {
    pub fn of(values: &[f64]) -> Option<Self> {
        let (first, last) = (*values.first()?, *values.last()?);
        Some(Self {
            first,
            last,
            reduction: first / last,
            non_increasing: values.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceReport {
    pub kind: FamilyKind,
    pub m: usize,
    pub rows: Vec<ConvergenceRow>,
    pub plan_bl: Option<Trend>,
    pub product_gap: Option<Trend>,
    pub potential_gap: Option<Trend>,
    pub supnorm_gap: Option<Trend>,
}

/// Default probes: a few symmetric pairs inside the base grid.
pub fn default_probes(support: &Support) -> Vec<Probe> {
    let r = 0.5 * support.max_norm();
    let d = support.dim();
    let at = |s: f64| vec![s * r / (d as f64).sqrt(); d];
    vec![
        Probe { x: at(0.0), y: at(0.0) },
        Probe { x: at(-0.5), y: at(0.5) },
        Probe { x: at(1.0), y: at(-1.0) },
    ]
}

fn moved(p: &[f64], shift: f64) -> Vec<f64> {
    p.iter().map(|v| v + shift).collect()
}

fn factor_product(sol: &SchroedingerSolution) -> DiscreteMeasure {
    let mass = Array2::from_shape_fn((sol.log_nu1.len(), sol.log_nu2.len()), |(i, j)| {
        (sol.log_nu1[i] + sol.log_nu2[j]).exp()
    });
    ProductMeasure {
        source: sol.source().clone(),
        target: sol.target().clone(),
        mass,
    }
    .to_discrete()
}

fn potential_at(sol: &SchroedingerSolution, side: Side, p: &[f64], m: usize) -> Result<f64> {
    truncated_potential_at(sol, side, p, m)
}

/// `max |(u_{1|m} + u_{2|m})(member) - (u_{1|m} + u_{2|m})(base)|` over the probes.
pub fn potential_sum_gap(
    base: &SchroedingerSolution,
    member: &SchroedingerSolution,
    probes: &[Probe],
    shift: f64,
    m: usize,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for p in probes {
        let (xn, yn) = (moved(&p.x, shift), moved(&p.y, shift));
        let a = potential_at(member, Side::First, &xn, m)? + potential_at(member, Side::Second, &yn, m)?;
        let b = potential_at(base, Side::First, &p.x, m)? + potential_at(base, Side::Second, &p.y, m)?;
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

fn individual_gap(base: &SchroedingerSolution, member: &SchroedingerSolution, probes: &[Probe], shift: f64) -> Result<f64> {
    let no_form = || Error::InvalidInput("kernel has no closed form away from the grid".into());
    let mut worst = 0.0f64;
    for p in probes {
        let (xn, yn) = (moved(&p.x, shift), moved(&p.y, shift));
        let g1 = member.u1_at(&xn).ok_or_else(no_form)? - base.u1_at(&p.x).ok_or_else(no_form)?;
        let g2 = member.u2_at(&yn).ok_or_else(no_form)? - base.u2_at(&p.y).ok_or_else(no_form)?;
        worst = worst.max(g1.abs() + g2.abs());
    }
    Ok(worst)
}

/// `sup_{B_{r'}} |u₁ⁿ - u₁| + sup_{B_{r'}} |u₂ⁿ - u₂|` on the shared grid, compact gauge.
pub fn supnorm_gap(base: &SchroedingerSolution, member: &SchroedingerSolution, r_prime: f64) -> Result<f64> {
    if !base.source().same_points(member.source()) || !base.target().same_points(member.target()) {
        return Err(Error::InvalidInput("sup-norm gap needs members on the base grid".into()));
    }
    let side = |s: &Support, a: &[f64], b: &[f64]| {
        s.indices_within(r_prime)
            .into_iter()
            .map(|i| (a[i] - b[i]).abs())
            .fold(0.0, f64::max)
    };
    Ok(side(base.source(), &member.u1, &base.u1) + side(base.target(), &member.u2, &base.u2))
}

fn solve_member(q: &KernelSpec, mu1: &DiscreteMeasure, mu2: &DiscreteMeasure, opts: &SolveOptions) -> Result<SchroedingerSolution> {
    let sol = solve_with(q, mu1, mu2, opts)?;
    if !sol.converged {
        return Err(Error::NotConverged(format!(
            "member solve stopped at residual {:.3e}",
            sol.final_residual
        )));
    }
    Ok(sol)
}

pub fn run_convergence(
    base_q: &KernelSpec,
    base_mu1: &DiscreteMeasure,
    base_mu2: &DiscreteMeasure,
    family: &PerturbationFamily,
    opts: &ConvergenceOptions,
) -> Result<ConvergenceReport> {
    let base = solve_member(base_q, base_mu1, base_mu2, &opts.solve)?;
    let solved: Vec<Result<SchroedingerSolution>> = family
        .members
        .par_iter()
        .map(|mem| solve_member(&mem.kernel, &mem.mu1, &mem.mu2, &opts.solve))
        .collect();
    let m = opts.m.unwrap_or_else(|| {
        solved
            .iter()
            .filter_map(|s| s.as_ref().ok().map(|s| s.m_index))
            .fold(base.m_index, usize::max)
    });
    let base_compact = base.renormalized(Exhaustion::Compact);
    let base_plan = base.plan().to_discrete();
    let base_product = factor_product(&base);
    let dictionary = BlDictionary::covering(&base_plan, &base_plan);
    let probes = if opts.probes.is_empty() {
        default_probes(base_q.source())
    } else {
        opts.probes.clone()
    };
    let rows: Vec<ConvergenceRow> = family
        .members
        .iter()
        .zip(solved)
        .map(|(mem, sol)| {
            let mut row = ConvergenceRow {
                n: mem.n,
                plan_bl: f64::NAN,
                product_gap: f64::NAN,
                potential_gap: f64::NAN,
                potential_gap_individual: f64::NAN,
                supnorm_gap: None,
                input_bl: bl_distance(&mem.mu1, base_mu1).max(bl_distance(&mem.mu2, base_mu2)),
                kernel_sup_gap: mem.kernel_sup_gap,
                error: None,
            };
            let filled = sol.and_then(|sol| {
                let shift = opts.probe_drift / mem.n as f64;
                row.plan_bl = dictionary.distance(&sol.plan().to_discrete(), &base_plan);
                row.product_gap = dictionary.distance(&factor_product(&sol), &base_product);
                row.potential_gap = potential_sum_gap(&base, &sol, &probes, shift, m)?;
                let compact = sol.renormalized(Exhaustion::Compact);
                row.potential_gap_individual = individual_gap(&base_compact, &compact, &probes, shift)?;
                if let Some(r) = opts.r_prime {
                    row.supnorm_gap = Some(supnorm_gap(&base_compact, &compact, r)?);
                }
                Ok(())
            });
            if let Err(e) = filled {
                row.error = Some(e.to_string());
            }
            row
        })
        .collect();
    let column = |f: &dyn Fn(&ConvergenceRow) -> Option<f64>| -> Option<Trend> {
        let vals: Option<Vec<f64>> = rows.iter().map(f).collect();
        vals.and_then(|v| Trend::of(&v))
    };
    let ok = |v: f64| if v.is_nan() { None } else { Some(v) };
    Ok(ConvergenceReport {
        kind: family.kind,
        m,
        plan_bl: column(&|r| ok(r.plan_bl)),
        product_gap: column(&|r| ok(r.product_gap)),
        potential_gap: column(&|r| ok(r.potential_gap)),
        supnorm_gap: column(&|r| r.supnorm_gap),
        rows,
    })
}

/// `C_r` such that `C_r|x|² + log q(x, y)` is convex on `B_r` in each variable,
/// or `None` when the grid has no interior triple inside the ball.
pub fn check_a3r(q: &KernelSpec, r: f64) -> Option<f64> {
    match q.kind() {
        KernelKind::GaussianHeat { t, eps } => return Some(1.0 / (2.0 * eps * t)),
        KernelKind::Constant(_) => return Some(0.0),
        _ => {}
    }
    let lq = q.log_matrix();
    let min_x = min_second_difference(q.source(), r, |i, j| lq[[i, j]], q.target().len());
    let min_y = min_second_difference(q.target(), r, |j, i| lq[[i, j]], q.source().len());
    let lowest = match (min_x, min_y) {
        (None, None) => return None,
        (a, b) => a.unwrap_or(f64::INFINITY).min(b.unwrap_or(f64::INFINITY)),
    };
    Some((-lowest / 2.0).max(0.0))
}

/// Smallest `[f(x-hv) - 2f(x) + f(x+hv)] / (h|v|)²` over lattice triples in
/// `B_r` along axis and diagonal directions, for every value of the other variable.
fn min_second_difference(
    s: &Support,
    r: f64,
    f: impl Fn(usize, usize) -> f64,
    others: usize,
) -> Option<f64> {
    let lat = s.lattice()?;
    let d = s.dim();
    let h = lat.spacing;
    let mut dirs: Vec<Vec<i64>> = Vec::new();
    for k in 0..d {
        let mut v = vec![0; d];
        v[k] = 1;
        dirs.push(v);
        for l in k + 1..d {
            for sgn in [1, -1] {
                let mut v = vec![0; d];
                v[k] = 1;
                v[l] = sgn;
                dirs.push(v);
            }
        }
    }
    let inside = s.indices_within(r);
    let mut inside_mask = vec![false; s.len()];
    inside.iter().for_each(|&i| inside_mask[i] = true);
    let mut best: Option<f64> = None;
    let (mut a, mut b) = (vec![0i64; d], vec![0i64; d]);
    for &i in &inside {
        let c = lat.coords(i, d);
        for v in &dirs {
            for k in 0..d {
                a[k] = c[k] - v[k];
                b[k] = c[k] + v[k];
            }
            let (Some(ia), Some(ib)) = (lat.lookup(&a), lat.lookup(&b)) else {
                continue;
            };
            if !(inside_mask[ia] && inside_mask[ib]) {
                continue;
            }
            let step2 = h * h * v.iter().map(|x| (x * x) as f64).sum::<f64>();
            for o in 0..others {
                let sd = (f(ia, o) - 2.0 * f(i, o) + f(ib, o)) / step2;
                best = Some(best.map_or(sd, |m: f64| m.min(sd)));
            }
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SupnormRow {
    pub n: usize,
    pub gap: f64,
}

pub fn run_supnorm_convergence(
    base_q: &KernelSpec,
    base_mu1: &DiscreteMeasure,
    base_mu2: &DiscreteMeasure,
    family: &PerturbationFamily,
    r_prime: f64,
    solve: &SolveOptions,
) -> Result<Vec<SupnormRow>> {
    let r = base_q.source().max_norm().max(base_q.target().max_norm());
    if r_prime > r {
        return Err(Error::InvalidInput(format!("r' = {r_prime} exceeds the grid radius {r}")));
    }
    for mem in &family.members {
        if check_a3r(&mem.kernel, r).is_none() {
            return Err(Error::InvalidInput(format!(
                "convexity condition could not be checked for member n = {}",
                mem.n
            )));
        }
    }
    let base = solve_member(base_q, base_mu1, base_mu2, solve)?.renormalized(Exhaustion::Compact);
    family
        .members
        .par_iter()
        .map(|mem| {
            let sol = solve_member(&mem.kernel, &mem.mu1, &mem.mu2, solve)?.renormalized(Exhaustion::Compact);
            Ok(SupnormRow {
                n: mem.n,
                gap: supnorm_gap(&base, &sol, r_prime)?,
            })
        })
        .collect()
}

/// The shipped reference instance: heat kernel `g_{1/2}(1)` on a 41-point grid
/// over `[-2, 2]`, a Gaussian source and a two-bump target.
pub fn reference_instance() -> Result<(KernelSpec, DiscreteMeasure, DiscreteMeasure)> {
    let g = Arc::new(make_grid(1, 2.0, 41)?);
    let q = KernelSpec::gaussian_heat(1.0, 0.5, g.clone(), g.clone())?;
    let w1 = g.points().map(|x| (-(x[0] - 0.4).powi(2) / 0.5).exp()).collect();
    let w2 = g
        .points()
        .map(|x| (-(x[0] + 0.6).powi(2) / 0.3).exp() + 0.5 * (-(x[0] - 1.0).powi(2) / 0.2).exp())
        .collect();
    Ok((q, DiscreteMeasure::normalized(g.clone(), w1)?, DiscreteMeasure::normalized(g, w2)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> ConvergenceOptions {
        ConvergenceOptions {
            r_prime: Some(1.5),
            ..Default::default()
        }
    }

    #[test]
    fn zero_amplitude_family_equals_base() {
        let (q, mu1, mu2) = reference_instance().unwrap();
        let params = FamilyParams {
            amplitude: 0.0,
            ..Default::default()
        };
        let fam = make_family(&q, &mu1, &mu2, FamilyKind::KernelPerturbation, &[4, 16], &params).unwrap();
        for m in &fam.members {
            assert_eq!(m.kernel_sup_gap, 0.0);
            assert_eq!(m.mu1.weights(), mu1.weights());
        }
        let rep = run_convergence(&q, &mu1, &mu2, &fam, &opts()).unwrap();
        for row in &rep.rows {
            assert!(row.error.is_none());
            assert!(row.plan_bl <= 2e-12);
            assert!(row.product_gap <= 2e-12);
            assert!(row.potential_gap <= 2e-12);
            assert!(row.supnorm_gap.unwrap() <= 2e-12);
        }
    }

    #[test]
    fn kernel_ladder_decreases() {
        let (q, mu1, mu2) = reference_instance().unwrap();
        let fam = make_family(&q, &mu1, &mu2, FamilyKind::KernelPerturbation, &default_index_set(), &FamilyParams::default()).unwrap();
        assert!(fam.members.windows(2).all(|w| w[1].kernel_sup_gap < w[0].kernel_sup_gap));
        let rep = run_convergence(
            &q,
            &mu1,
            &mu2,
            &fam,
            &ConvergenceOptions {
                probe_drift: 0.5,
                ..opts()
            },
        )
        .unwrap();
        for t in [&rep.plan_bl, &rep.product_gap, &rep.potential_gap, &rep.supnorm_gap] {
            let t = t.as_ref().unwrap();
            assert!(t.non_increasing);
            assert!(t.reduction >= 4.0, "{t:?}");
        }
    }

    #[test]
    fn sum_gap_ignores_factor_rescaling() {
        let (q, mu1, mu2) = reference_instance().unwrap();
        let sol = solve_with(&q, &mu1, &mu2, &SolveOptions::with_tol(1e-12, 50_000)).unwrap();
        let probes = default_probes(q.source());
        let other = sol.rescaled(7.3);
        let gap = potential_sum_gap(&sol, &other, &probes, 0.0, sol.m_index).unwrap();
        assert!(gap <= 1e-12, "{gap}");
    }

    #[test]
    fn mollified_marginals_approach_base() {
        let (_, mu1, _) = reference_instance().unwrap();
        let mut prev = f64::INFINITY;
        for n in [1, 4, 16] {
            let m = mollify(&mu1, 0.5 / n as f64).unwrap();
            assert!((m.total_mass() - 1.0).abs() < 1e-12);
            let d = bl_distance(&m, &mu1);
            assert!(d < prev);
            prev = d;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn empirical_ladder_decreases() {
        let (_, mu1, _) = reference_instance().unwrap();
        let d: Vec<f64> = [100, 1_000, 10_000]
            .iter()
            .map(|&n| bl_distance(&empirical(&mu1, n, 9, n as u64).unwrap(), &mu1))
            .collect();
        assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
    }

    #[test]
    fn a3r_examples() {
        let g = Arc::new(make_grid(1, 2.0, 21).unwrap());
        let heat = KernelSpec::gaussian_heat(1.0, 0.25, g.clone(), g.clone()).unwrap();
        assert_eq!(check_a3r(&heat, 2.0), Some(2.0));
        let c = KernelSpec::new(KernelKind::Constant(3.0), g.clone(), g.clone()).unwrap();
        assert_eq!(check_a3r(&c, 2.0), Some(0.0));
        // Finite differences of the heat kernel recover 1/(2ε).
        let dense = KernelSpec::dense(heat.log_matrix().mapv(f64::exp), g.clone(), g.clone()).unwrap();
        assert!((check_a3r(&dense, 2.0).unwrap() - 2.0).abs() < 1e-6);
        let gp = Arc::new(make_grid(1, std::f64::consts::PI, 101).unwrap());
        let tilted = KernelSpec::new(
            KernelKind::Tilted {
                base: Box::new(KernelKind::Constant(1.0)),
                amplitude: 1.0,
                field: TiltField::SinProduct,
            },
            gp.clone(),
            gp,
        )
        .unwrap();
        let c = check_a3r(&tilted, std::f64::consts::PI).unwrap();
        assert!((c - 0.5).abs() < 5e-3, "{c}");
    }

    #[test]
    fn supnorm_gap_is_monotone_in_radius() {
        let (q, mu1, mu2) = reference_instance().unwrap();
        let fam = make_family(&q, &mu1, &mu2, FamilyKind::MarginalMollification, &[2, 8], &FamilyParams::default()).unwrap();
        let solve = SolveOptions::with_tol(1e-12, 50_000);
        let small = run_supnorm_convergence(&q, &mu1, &mu2, &fam, 1.0, &solve).unwrap();
        let large = run_supnorm_convergence(&q, &mu1, &mu2, &fam, 1.9, &solve).unwrap();
        for (a, b) in small.iter().zip(&large) {
            assert!(b.gap >= a.gap);
        }
        assert!(large[1].gap < large[0].gap);
    }

    #[test]
    fn bad_family_parameters_are_rejected() {
        let (q, mu1, mu2) = reference_instance().unwrap();
        assert!(make_family(&q, &mu1, &mu2, FamilyKind::KernelPerturbation, &[0], &FamilyParams::default()).is_err());
        let p = FamilyParams {
            bandwidth: 0.0,
            ..Default::default()
        };
        assert!(make_family(&q, &mu1, &mu2, FamilyKind::MarginalMollification, &[4], &p).is_err());
    }
}
