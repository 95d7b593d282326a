//! Log-domain iterative proportional fitting for the Schrödinger system
//!
//! ```text
//! μ₁(dx) = ν₁(dx) ∫ q(x, y) ν₂(dy),    μ₂(dy) = ν₂(dy) ∫ q(x, y) ν₁(dx)
//! ```
//!
//! on finite supports. The factors are kept as logarithms (`a = log ν₁`,
//! `b = log ν₂`), so Gaussian kernels with very small diffusivity stay finite.
//! After convergence the pair is rescaled to `(Cν₁, ν₂/C)` so that both factors
//! give equal mass to the first exhaustion set charged by both marginals.

use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;

use crate::measure::{
    eval_kernel, total_variation, DiscreteMeasure, KernelSpec, ProductMeasure, Support,
};
use crate::numeric::{ln_or_neg_inf, logsumexp, logsumexp_pair, norm};
use crate::{Error, Result};

/// Matrix size above which reductions are split across threads.
const PAR_THRESHOLD: usize = 1 << 16;

/// How the compact sets `K_m` used by the normalization are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exhaustion {
    /// `K_m = B_m ∩ support`.
    #[default]
    Balls,
    /// `K_m = support` for every `m`, so that `ν₁(S) = ν₂(S)`.
    Compact,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Stop when both marginal total-variation defects are at most this.
    pub tol: f64,
    pub max_iters: usize,
    pub exhaustion: Exhaustion,
    /// Initial `log ν₂`; zeros when absent.
    pub warm_start: Option<Vec<f64>>,
    pub record_history: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 50_000,
            exhaustion: Exhaustion::Balls,
            warm_start: None,
            record_history: true,
        }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64, max_iters: usize) -> Self {
        Self {
            tol,
            max_iters,
            ..Self::default()
        }
    }
}

#[derive(Debug)]
struct LogKernel {
    rows: Array2<f64>,
    cols: Array2<f64>,
}

impl LogKernel {
    fn new(rows: Array2<f64>) -> Self {
        let cols = rows.t().as_standard_layout().to_owned();
        Self { rows, cols }
    }

    fn reduce(mat: &Array2<f64>, other: &[f64]) -> Vec<f64> {
        let n = mat.nrows();
        let row = |i: usize| {
            logsumexp_pair(
                mat.row(i).to_slice().expect("standard layout"),
                other,
            )
        };
        if mat.len() >= PAR_THRESHOLD {
            (0..n).into_par_iter().map(row).collect()
        } else {
            (0..n).map(row).collect()
        }
    }

    /// `log Σ_j q_ij exp(b_j)` for every row `i`.
    fn row_lse(&self, b: &[f64]) -> Vec<f64> {
        Self::reduce(&self.rows, b)
    }

    /// `log Σ_i q_ij exp(a_i)` for every column `j`.
    fn col_lse(&self, a: &[f64]) -> Vec<f64> {
        Self::reduce(&self.cols, a)
    }
}

/// Converged (or best available) solution of the Schrödinger system.
#[derive(Debug, Clone)]
pub struct SchroedingerSolution {
    /// `log ν₁`; the factors themselves may overflow for very peaked kernels.
    pub log_nu1: Vec<f64>,
    pub log_nu2: Vec<f64>,
    /// `u₁(x) = log ∫ q(x, y) ν₂(dy)`.
    pub u1: Vec<f64>,
    /// `u₂(y) = log ∫ q(x, y) ν₁(dx)`.
    pub u2: Vec<f64>,
    pub m_index: usize,
    pub scale_c: f64,
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
    /// Row-marginal defect at the start of every sweep.
    pub defect_history: Vec<f64>,
    pub exhaustion: Exhaustion,
    pub kernel: KernelSpec,
    pub mu1: DiscreteMeasure,
    pub mu2: DiscreteMeasure,
    log_kernel: Arc<LogKernel>,
}

fn validate_inputs(q: &KernelSpec, mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Result<()> {
    if q.source().len() != mu1.weights().len() || q.target().len() != mu2.weights().len() {
        return Err(Error::InvalidInput(
            "kernel supports do not match the marginals".into(),
        ));
    }
    if !q.source().same_points(mu1.support()) || !q.target().same_points(mu2.support()) {
        return Err(Error::InvalidInput(
            "kernel supports differ from the marginal supports".into(),
        ));
    }
    for m in [mu1, mu2] {
        if (m.total_mass() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "marginals must be probability measures, found mass {}",
                m.total_mass()
            )));
        }
    }
    Ok(())
}

/// Solves with default options apart from `tol` and `max_iters`.
pub fn solve(
    q: &KernelSpec,
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    tol: f64,
    max_iters: usize,
) -> Result<SchroedingerSolution> {
    solve_with(q, mu1, mu2, &SolveOptions::with_tol(tol, max_iters))
}

pub fn solve_with(
    q: &KernelSpec,
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    opts: &SolveOptions,
) -> Result<SchroedingerSolution> {
    validate_inputs(q, mu1, mu2)?;
    if !(opts.tol > 0.0) || opts.max_iters == 0 {
        return Err(Error::InvalidInput("tol and max_iters must be positive".into()));
    }
    let kernel = Arc::new(LogKernel::new(q.log_matrix()));
    let log_mu1: Vec<f64> = mu1.weights().iter().map(|w| ln_or_neg_inf(*w)).collect();
    let log_mu2: Vec<f64> = mu2.weights().iter().map(|w| ln_or_neg_inf(*w)).collect();
    let mut a = log_mu1.clone();
    let mut b = match &opts.warm_start {
        Some(w) if w.len() == log_mu2.len() => w
            .iter()
            .zip(&log_mu2)
            .map(|(x, l)| if *l == f64::NEG_INFINITY { *l } else { *x })
            .collect(),
        Some(_) => return Err(Error::InvalidInput("warm start length mismatch".into())),
        None => vec![0.0; log_mu2.len()],
    };
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let r = kernel.row_lse(&b);
        let row_defect = marginal_defect(&a, &r, mu1.weights());
        if opts.record_history {
            history.push(row_defect);
        }
        if row_defect <= opts.tol {
            let c = kernel.col_lse(&a);
            if marginal_defect(&b, &c, mu2.weights()) <= opts.tol {
                converged = true;
                break;
            }
        }
        for ((ai, lm), ri) in a.iter_mut().zip(&log_mu1).zip(&r) {
            *ai = lm - ri;
        }
        let c = kernel.col_lse(&a);
        for ((bj, lm), cj) in b.iter_mut().zip(&log_mu2).zip(&c) {
            *bj = lm - cj;
        }
        iterations += 1;
    }
    finish(
        q.clone(),
        mu1.clone(),
        mu2.clone(),
        kernel,
        a,
        b,
        opts.exhaustion,
        iterations,
        converged,
        history,
    )
}

/// Plain-arithmetic IPFP, kept for cross-validating the log-domain solver on
/// well-conditioned instances.
pub fn solve_plain(
    q: &KernelSpec,
    mu1: &DiscreteMeasure,
    mu2: &DiscreteMeasure,
    opts: &SolveOptions,
) -> Result<SchroedingerSolution> {
    validate_inputs(q, mu1, mu2)?;
    let km = eval_kernel(q);
    if km.log_domain {
        return Err(Error::InvalidInput(
            "kernel underflows; use the log-domain solver".into(),
        ));
    }
    let k = &km.values;
    let (n, m) = k.dim();
    let mut nu1 = mu1.weights().to_vec();
    let mut nu2 = vec![1.0; m];
    let mut iterations = 0;
    let mut converged = false;
    let mut history = Vec::new();
    for _ in 0..opts.max_iters {
        let kv: Vec<f64> = (0..n).map(|i| (0..m).map(|j| k[[i, j]] * nu2[j]).sum()).collect();
        let row_defect = 0.5
            * (0..n)
                .map(|i| (nu1[i] * kv[i] - mu1.weights()[i]).abs())
                .sum::<f64>();
        history.push(row_defect);
        if row_defect <= opts.tol {
            let ku: Vec<f64> = (0..m).map(|j| (0..n).map(|i| k[[i, j]] * nu1[i]).sum()).collect();
            let col_defect = 0.5
                * (0..m)
                    .map(|j| (nu2[j] * ku[j] - mu2.weights()[j]).abs())
                    .sum::<f64>();
            if col_defect <= opts.tol {
                converged = true;
                break;
            }
        }
        for i in 0..n {
            nu1[i] = mu1.weights()[i] / kv[i];
        }
        for j in 0..m {
            let s: f64 = (0..n).map(|i| k[[i, j]] * nu1[i]).sum();
            nu2[j] = mu2.weights()[j] / s;
        }
        iterations += 1;
    }
    let a = nu1.iter().map(|v| ln_or_neg_inf(*v)).collect();
    let b = nu2.iter().map(|v| ln_or_neg_inf(*v)).collect();
    let kernel = Arc::new(LogKernel::new(km.log_values));
    finish(
        q.clone(),
        mu1.clone(),
        mu2.clone(),
        kernel,
        a,
        b,
        opts.exhaustion,
        iterations,
        converged,
        history,
    )
}

fn marginal_defect(log_factor: &[f64], log_integral: &[f64], target: &[f64]) -> f64 {
    let marginal: Vec<f64> = log_factor
        .iter()
        .zip(log_integral)
        .map(|(a, r)| if *a == f64::NEG_INFINITY { 0.0 } else { (a + r).exp() })
        .collect();
    total_variation(&marginal, target)
}

/// Smallest `m ≥ 1` with `μ₁(K_m) μ₂(K_m) > 0`.
fn m_index(mu1: &DiscreteMeasure, mu2: &DiscreteMeasure, exhaustion: Exhaustion) -> usize {
    match exhaustion {
        Exhaustion::Compact => 1,
        Exhaustion::Balls => {
            let reach = mu1.support().max_norm().max(mu2.support().max_norm());
            let last = reach.ceil().max(1.0) as usize;
            (1..=last)
                .find(|&m| mu1.mass_within(m as f64) * mu2.mass_within(m as f64) > 0.0)
                .unwrap_or(last)
        }
    }
}

fn log_mass_on(log_factor: &[f64], support: &Support, exhaustion: Exhaustion, m: usize) -> f64 {
    match exhaustion {
        Exhaustion::Compact => logsumexp(log_factor.iter().copied()),
        Exhaustion::Balls => {
            logsumexp(support.indices_within(m as f64).into_iter().map(|i| log_factor[i]))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    kernel_spec: KernelSpec,
    mu1: DiscreteMeasure,
    mu2: DiscreteMeasure,
    kernel: Arc<LogKernel>,
    mut a: Vec<f64>,
    mut b: Vec<f64>,
    exhaustion: Exhaustion,
    iterations: usize,
    converged: bool,
    defect_history: Vec<f64>,
) -> Result<SchroedingerSolution> {
    let m = m_index(&mu1, &mu2, exhaustion);
    let log_c = 0.5
        * (log_mass_on(&b, mu2.support(), exhaustion, m)
            - log_mass_on(&a, mu1.support(), exhaustion, m));
    if !log_c.is_finite() {
        return Err(Error::NotConverged(
            "normalization constant is not finite".into(),
        ));
    }
    a.iter_mut().for_each(|x| *x += log_c);
    b.iter_mut().for_each(|x| *x -= log_c);
    let u1 = kernel.row_lse(&b);
    let u2 = kernel.col_lse(&a);
    let row = marginal_defect(&a, &u1, mu1.weights());
    let col = marginal_defect(&b, &u2, mu2.weights());
    Ok(SchroedingerSolution {
        log_nu1: a,
        log_nu2: b,
        u1,
        u2,
        m_index: m,
        scale_c: log_c.exp(),
        iterations,
        final_residual: row.max(col),
        converged,
        defect_history,
        exhaustion,
        kernel: kernel_spec,
        mu1,
        mu2,
        log_kernel: kernel,
    })
}

impl SchroedingerSolution {
    /// `log q(x_i, y_j)` on the supports.
    pub fn log_kernel(&self) -> &Array2<f64> {
        &self.log_kernel.rows
    }

    pub fn source(&self) -> &Arc<Support> {
        self.mu1.support()
    }

    pub fn target(&self) -> &Arc<Support> {
        self.mu2.support()
    }

    /// `log` of the plan masses `ν₁ q ν₂`.
    pub fn log_plan(&self) -> Array2<f64> {
        let l = self.log_kernel();
        Array2::from_shape_fn(l.dim(), |(i, j)| self.log_nu1[i] + l[[i, j]] + self.log_nu2[j])
    }

    /// The coupling `μ(dx dy) = ν₁(dx) q(x, y) ν₂(dy)`.
    pub fn plan(&self) -> ProductMeasure {
        ProductMeasure {
            source: self.source().clone(),
            target: self.target().clone(),
            mass: self.log_plan().mapv(f64::exp),
        }
    }

    /// The same coupling written as `q exp(-u₁ - u₂) μ₁ ⊗ μ₂`.
    pub fn plan_from_potentials(&self) -> ProductMeasure {
        let l = self.log_kernel();
        let w1 = self.mu1.weights();
        let w2 = self.mu2.weights();
        let mass = Array2::from_shape_fn(l.dim(), |(i, j)| {
            (l[[i, j]] - self.u1[i] - self.u2[j]).exp() * w1[i] * w2[j]
        });
        ProductMeasure {
            source: self.source().clone(),
            target: self.target().clone(),
            mass,
        }
    }

    /// `(Cν₁, ν₂/C)`; the plan and `u₁(x) + u₂(y)` are unchanged.
    pub fn rescaled(&self, c: f64) -> SchroedingerSolution {
        let lc = c.ln();
        let mut out = self.clone();
        out.log_nu1.iter_mut().for_each(|x| *x += lc);
        out.log_nu2.iter_mut().for_each(|x| *x -= lc);
        out.u1.iter_mut().for_each(|x| *x -= lc);
        out.u2.iter_mut().for_each(|x| *x += lc);
        out.scale_c *= c;
        out
    }

    /// Re-applies the normalization under a different exhaustion.
    pub fn renormalized(&self, exhaustion: Exhaustion) -> SchroedingerSolution {
        let m = m_index(&self.mu1, &self.mu2, exhaustion);
        let log_c = 0.5
            * (log_mass_on(&self.log_nu2, self.target(), exhaustion, m)
                - log_mass_on(&self.log_nu1, self.source(), exhaustion, m));
        let mut out = self.rescaled(log_c.exp());
        out.m_index = m;
        out.exhaustion = exhaustion;
        out
    }

    /// `ν₁` as a finite measure; fails if a factor overflows.
    pub fn nu1(&self) -> Result<DiscreteMeasure> {
        DiscreteMeasure::finite(
            self.source().clone(),
            self.log_nu1.iter().map(|x| x.exp()).collect(),
        )
    }

    pub fn nu2(&self) -> Result<DiscreteMeasure> {
        DiscreteMeasure::finite(
            self.target().clone(),
            self.log_nu2.iter().map(|x| x.exp()).collect(),
        )
    }

    /// `u₁` at an arbitrary point, for kernels with a closed form.
    pub fn u1_at(&self, x: &[f64]) -> Option<f64> {
        let mut terms = Vec::with_capacity(self.log_nu2.len());
        for (j, y) in self.target().points().enumerate() {
            terms.push(self.kernel.log_at(x, y)? + self.log_nu2[j]);
        }
        Some(logsumexp(terms))
    }

    /// `u₂` at an arbitrary point, for kernels with a closed form.
    pub fn u2_at(&self, y: &[f64]) -> Option<f64> {
        let mut terms = Vec::with_capacity(self.log_nu1.len());
        for (i, x) in self.source().points().enumerate() {
            terms.push(self.kernel.log_at(x, y)? + self.log_nu1[i]);
        }
        Some(logsumexp(terms))
    }

    /// Whether the defect history never increases (up to rounding).
    pub fn defect_monotone(&self) -> bool {
        self.defect_history
            .windows(2)
            .all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15)
    }
}

/// Cutoff `φ_m`: 1 on `B_m`, linear down to 0 on `B_{m+1} \ B_m`, 0 outside.
pub fn cutoff(m: usize, x: &[f64]) -> f64 {
    (m as f64 + 1.0 - norm(x)).clamp(0.0, 1.0)
}

fn log_cutoffs(m: usize, support: &Support) -> Vec<f64> {
    support.points().map(|x| ln_or_neg_inf(cutoff(m, x))).collect()
}

/// `u_{i|m}(x) = log ∫ q φ_m ν_j` on both supports.
pub fn truncated_potentials(sol: &SchroedingerSolution, m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if m < sol.m_index {
        return Err(Error::TruncationBelowIndex {
            m,
            m_index: sol.m_index,
        });
    }
    let phi1 = log_cutoffs(m, sol.source());
    let phi2 = log_cutoffs(m, sol.target());
    let b: Vec<f64> = sol.log_nu2.iter().zip(&phi2).map(|(x, p)| x + p).collect();
    let a: Vec<f64> = sol.log_nu1.iter().zip(&phi1).map(|(x, p)| x + p).collect();
    let u1 = sol.log_kernel.row_lse(&b);
    let u2 = sol.log_kernel.col_lse(&a);
    if u1.iter().chain(&u2).any(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::TruncationBelowIndex {
            m,
            m_index: sol.m_index,
        });
    }
    Ok((u1, u2))
}

/// Which factor a potential belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    First,
    Second,
}

/// `u_{1|m}` or `u_{2|m}` at an arbitrary point (closed-form kernels only).
pub fn truncated_potential_at(
    sol: &SchroedingerSolution,
    side: Side,
    point: &[f64],
    m: usize,
) -> Result<f64> {
    if m < sol.m_index {
        return Err(Error::TruncationBelowIndex {
            m,
            m_index: sol.m_index,
        });
    }
    let (support, log_factor) = match side {
        Side::First => (sol.target(), &sol.log_nu2),
        Side::Second => (sol.source(), &sol.log_nu1),
    };
    let mut terms = Vec::with_capacity(support.len());
    for (k, z) in support.points().enumerate() {
        let lq = match side {
            Side::First => sol.kernel.log_at(point, z),
            Side::Second => sol.kernel.log_at(z, point),
        }
        .ok_or_else(|| {
            Error::InvalidInput("kernel has no closed form away from the grid".into())
        })?;
        terms.push(lq + log_factor[k] + ln_or_neg_inf(cutoff(m, z)));
    }
    let v = logsumexp(terms);
    if v == f64::NEG_INFINITY {
        return Err(Error::TruncationBelowIndex {
            m,
            m_index: sol.m_index,
        });
    }
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct BeurlingReport {
    pub m_qr: f64,
    pub big_m_qr: f64,
    pub lower: f64,
    pub upper: f64,
    /// Smallest distance (in log space) from any `u_i` to the nearer bound.
    pub worst_slack: f64,
    pub worst_point: (Side, usize),
}

/// Checks `m/√M ≤ exp(u_i) ≤ M/√m` with `m, M` the extreme kernel values on
/// `B_r`. The potentials are taken in the compact gauge `ν₁(S) = ν₂(S)`.
pub fn check_beurling_bounds(sol: &SchroedingerSolution, r: f64) -> Result<BeurlingReport> {
    for s in [sol.source(), sol.target()] {
        if s.max_norm() > r * (1.0 + 1e-12) {
            return Err(Error::OutsideBall {
                radius: r,
                norm: s.max_norm(),
            });
        }
    }
    let compact = sol.renormalized(Exhaustion::Compact);
    let l = sol.log_kernel();
    let log_min = l.iter().copied().fold(f64::INFINITY, f64::min);
    let log_max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lower = log_min - 0.5 * log_max;
    let upper = log_max - 0.5 * log_min;
    let tol = 1e-9 * (1.0 + lower.abs().max(upper.abs())) + 2.0 * sol.final_residual;
    let mut worst = (f64::INFINITY, (Side::First, 0));
    for (side, us) in [(Side::First, &compact.u1), (Side::Second, &compact.u2)] {
        for (k, &u) in us.iter().enumerate() {
            let slack = (u - lower).min(upper - u);
            if slack < -tol {
                return Err(Error::BoundViolation(format!(
                    "Beurling bound fails for {side:?} potential at point {k}: \
                     u = {u}, bounds [{lower}, {upper}]"
                )));
            }
            if slack < worst.0 {
                worst = (slack, (side, k));
            }
        }
    }
    Ok(BeurlingReport {
        m_qr: log_min.exp(),
        big_m_qr: log_max.exp(),
        lower: lower.exp(),
        upper: upper.exp(),
        worst_slack: worst.0,
        worst_point: worst.1,
    })
}

#[derive(Debug, Clone)]
pub struct PairCheck {
    pub source_index: usize,
    pub target_index: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct ProductIdentityReport {
    pub pairs: Vec<PairCheck>,
    pub max_relative_error: f64,
}

/// Checks
/// `exp(u_{1|m}(x₁) + u_{2|m}(x₂)) = ∫∫ q(x₁,y) q(x,x₂)/q(x,y) φ_m(x) φ_m(y) μ(dx dy)`
/// at the given (source index, target index) pairs, together with the
/// min/max sandwich of the ratio over `supp φ_m`.
pub fn check_product_identity(
    sol: &SchroedingerSolution,
    m: usize,
    sample_pairs: &[(usize, usize)],
) -> Result<ProductIdentityReport> {
    let (u1m, u2m) = truncated_potentials(sol, m)?;
    let l = sol.log_kernel();
    let phi1 = log_cutoffs(m, sol.source());
    let phi2 = log_cutoffs(m, sol.target());
    let log_plan = sol.log_plan();
    let (n, k) = l.dim();
    let log_mass_phi = logsumexp(
        (0..n).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| phi1[i] + phi2[j] + log_plan[[i, j]]),
    );
    let mut pairs = Vec::with_capacity(sample_pairs.len());
    let mut max_rel = 0.0f64;
    for &(i1, j2) in sample_pairs {
        if i1 >= n || j2 >= k {
            return Err(Error::InvalidInput(format!("pair ({i1}, {j2}) out of range")));
        }
        let mut terms = Vec::with_capacity(n * k);
        let mut ratio_min = f64::INFINITY;
        let mut ratio_max = f64::NEG_INFINITY;
        for i in 0..n {
            if phi1[i] == f64::NEG_INFINITY {
                continue;
            }
            for j in 0..k {
                if phi2[j] == f64::NEG_INFINITY {
                    continue;
                }
                let ratio = l[[i1, j]] + l[[i, j2]] - l[[i, j]];
                ratio_min = ratio_min.min(ratio);
                ratio_max = ratio_max.max(ratio);
                terms.push(ratio + phi1[i] + phi2[j] + log_plan[[i, j]]);
            }
        }
        let lhs_log = u1m[i1] + u2m[j2];
        let rhs_log = logsumexp(terms);
        let rel = (lhs_log - rhs_log).exp_m1().abs();
        if rel > 1e-8 {
            return Err(Error::IdentityMismatch(format!(
                "product identity fails at pair ({i1}, {j2}): relative error {rel}"
            )));
        }
        let lower = (ratio_min + log_mass_phi).exp();
        let upper = ratio_max.exp();
        let lhs = lhs_log.exp();
        let slack = 1e-9 * lhs;
        if lhs < lower - slack || lhs > upper + slack {
            return Err(Error::BoundViolation(format!(
                "product sandwich fails at pair ({i1}, {j2}): {lower} ≤ {lhs} ≤ {upper}"
            )));
        }
        max_rel = max_rel.max(rel);
        pairs.push(PairCheck {
            source_index: i1,
            target_index: j2,
            lhs,
            rhs: rhs_log.exp(),
            lower,
            upper,
        });
    }
    Ok(ProductIdentityReport {
        pairs,
        max_relative_error: max_rel,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LevelBoundReport {
    pub lower: f64,
    pub middle: f64,
    pub upper: f64,
}

/// `min_{K_m} q⁻¹ μ(K_m × K_m) ≤ ∫φ_m dν₁ ∫φ_m dν₂ ≤ max_{supp φ_m} q⁻¹`.
pub fn check_level_bounds(sol: &SchroedingerSolution, m: usize) -> Result<LevelBoundReport> {
    let l = sol.log_kernel();
    let src = sol.source();
    let tgt = sol.target();
    let k1 = src.indices_within(m as f64);
    let k2 = tgt.indices_within(m as f64);
    let plan = sol.plan();
    let mut max_q_k = f64::NEG_INFINITY;
    let mut mass_k = 0.0;
    for &i in &k1 {
        for &j in &k2 {
            max_q_k = max_q_k.max(l[[i, j]]);
            mass_k += plan.mass[[i, j]];
        }
    }
    let supp1: Vec<usize> = (0..src.len()).filter(|&i| cutoff(m, src.point(i)) > 0.0).collect();
    let supp2: Vec<usize> = (0..tgt.len()).filter(|&j| cutoff(m, tgt.point(j)) > 0.0).collect();
    let mut min_q_supp = f64::INFINITY;
    for &i in &supp1 {
        for &j in &supp2 {
            min_q_supp = min_q_supp.min(l[[i, j]]);
        }
    }
    let lower = if k1.is_empty() || k2.is_empty() {
        0.0
    } else {
        (-max_q_k).exp() * mass_k
    };
    let upper = (-min_q_supp).exp();
    let log_int = |s: &Support, f: &[f64]| {
        logsumexp(s.points().zip(f).map(|(x, a)| a + ln_or_neg_inf(cutoff(m, x))))
    };
    let middle = (log_int(src, &sol.log_nu1) + log_int(tgt, &sol.log_nu2)).exp();
    let tol = 1e-9 * middle + 2.0 * sol.final_residual;
    if middle < lower - tol || middle > upper + tol {
        return Err(Error::BoundViolation(format!(
            "level bound fails at m = {m}: {lower} ≤ {middle} ≤ {upper}"
        )));
    }
    Ok(LevelBoundReport {
        lower,
        middle,
        upper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{make_grid, KernelKind};
    use approx::assert_relative_eq;
    use ndarray::array;

    fn two_points() -> Arc<Support> {
        Arc::new(Support::new(1, vec![-0.5, 0.5], vec![1.0, 1.0]).unwrap())
    }

    fn two_by_two(mu2: Vec<f64>) -> (KernelSpec, DiscreteMeasure, DiscreteMeasure) {
        let s = two_points();
        let q = KernelSpec::dense(array![[2.0, 1.0], [1.0, 2.0]], s.clone(), s.clone()).unwrap();
        let mu1 = DiscreteMeasure::probability(s.clone(), vec![0.5, 0.5]).unwrap();
        let mu2 = DiscreteMeasure::probability(s, mu2).unwrap();
        (q, mu1, mu2)
    }

    /// Independent oracle: plain fixed-point iteration of the system.
    fn plain_oracle(q: [[f64; 2]; 2], mu1: [f64; 2], mu2: [f64; 2], iters: usize) -> ([f64; 2], [f64; 2]) {
        let mut n1 = [1.0, 1.0];
        let mut n2 = [1.0, 1.0];
        for _ in 0..iters {
            for i in 0..2 {
                n1[i] = mu1[i] / (q[i][0] * n2[0] + q[i][1] * n2[1]);
            }
            for j in 0..2 {
                n2[j] = mu2[j] / (q[0][j] * n1[0] + q[1][j] * n1[1]);
            }
        }
        // Both points lie in B_1, so K_1 is the whole support.
        let c = ((n2[0] + n2[1]) / (n1[0] + n1[1])).sqrt();
        ([n1[0] * c, n1[1] * c], [n2[0] / c, n2[1] / c])
    }

    #[test]
    fn symmetric_two_by_two() {
        let (q, mu1, mu2) = two_by_two(vec![0.5, 0.5]);
        let sol = solve(&q, &mu1, &mu2, 1e-13, 10_000).unwrap();
        assert!(sol.converged);
        let (o1, o2) = plain_oracle([[2.0, 1.0], [1.0, 2.0]], [0.5, 0.5], [0.5, 0.5], 10_000);
        let expected = 6f64.powf(-0.5);
        for k in 0..2 {
            assert_relative_eq!(sol.nu1().unwrap().weights()[k], expected, epsilon = 1e-12);
            assert_relative_eq!(sol.nu2().unwrap().weights()[k], expected, epsilon = 1e-12);
            assert_relative_eq!(o1[k], expected, epsilon = 1e-12);
            assert_relative_eq!(o2[k], expected, epsilon = 1e-12);
        }
        let plan = sol.plan();
        assert_relative_eq!(plan.mass[[0, 0]], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(plan.mass[[0, 1]], 1.0 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(plan.mass[[1, 1]], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(sol.u1[0], (3.0 / 6f64.sqrt()).ln(), epsilon = 1e-12);
    }

    #[test]
    fn asymmetric_two_by_two_matches_oracle() {
        let (q, mu1, mu2) = two_by_two(vec![0.75, 0.25]);
        let sol = solve(&q, &mu1, &mu2, 1e-14, 10_000).unwrap();
        assert!(sol.final_residual <= 1e-12);
        let (o1, o2) = plain_oracle([[2.0, 1.0], [1.0, 2.0]], [0.5, 0.5], [0.75, 0.25], 10_000);
        for k in 0..2 {
            assert_relative_eq!(sol.nu1().unwrap().weights()[k], o1[k], epsilon = 1e-12);
            assert_relative_eq!(sol.nu2().unwrap().weights()[k], o2[k], epsilon = 1e-12);
        }
        // Golden values from the oracle run.
        assert_relative_eq!(o1[0], 0.33985302415522, epsilon = 1e-12);
        assert_relative_eq!(o1[1], 0.4904080729631687, epsilon = 1e-12);
        assert_relative_eq!(o2[0], 0.6409631217711174, epsilon = 1e-12);
        assert_relative_eq!(o2[1], 0.18929797534727136, epsilon = 1e-12);
    }

    #[test]
    fn constant_kernel_gives_product_measure() {
        let g = Arc::new(make_grid(1, 1.0, 5).unwrap());
        let q = KernelSpec::new(KernelKind::Constant(1.0), g.clone(), g.clone()).unwrap();
        let mu1 = DiscreteMeasure::normalized(g.clone(), vec![1.0, 2.0, 3.0, 2.0, 1.0]).unwrap();
        let mu2 = DiscreteMeasure::normalized(g, vec![5.0, 1.0, 1.0, 1.0, 2.0]).unwrap();
        let sol = solve(&q, &mu1, &mu2, 1e-13, 100).unwrap();
        for k in 0..5 {
            assert_relative_eq!(sol.nu1().unwrap().weights()[k], mu1.weights()[k], epsilon = 1e-13);
            assert_relative_eq!(sol.nu2().unwrap().weights()[k], mu2.weights()[k], epsilon = 1e-13);
            assert!(sol.u1[k].abs() < 1e-13 && sol.u2[k].abs() < 1e-13);
        }
        let outer = ProductMeasure::outer(&mu1, &mu2);
        for (a, b) in sol.plan().mass.iter().zip(outer.mass.iter()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-14);
        }
    }

    fn gaussian_instance(n: usize, eps: f64) -> (KernelSpec, DiscreteMeasure, DiscreteMeasure) {
        let g = Arc::new(make_grid(1, 2.0, n).unwrap());
        let q = KernelSpec::gaussian_heat(1.0, eps, g.clone(), g.clone()).unwrap();
        let w1: Vec<f64> = g.points().map(|x| (-(x[0] - 0.3).powi(2) / 0.5).exp()).collect();
        let w2: Vec<f64> = g.points().map(|x| (-(x[0] + 0.5).powi(2)).exp() + 0.1).collect();
        (
            q,
            DiscreteMeasure::normalized(g.clone(), w1).unwrap(),
            DiscreteMeasure::normalized(g, w2).unwrap(),
        )
    }

    #[test]
    fn marginals_and_potential_identities() {
        let (q, mu1, mu2) = gaussian_instance(40, 0.5);
        let sol = solve(&q, &mu1, &mu2, 1e-12, 10_000).unwrap();
        assert!(sol.converged);
        let plan = sol.plan();
        for (a, b) in plan.row_sums().iter().zip(mu1.weights()) {
            assert!((a - b).abs() <= 1e-11);
        }
        for (a, b) in plan.col_sums().iter().zip(mu2.weights()) {
            assert!((a - b).abs() <= 1e-11);
        }
        let alt = sol.plan_from_potentials();
        for (a, b) in plan.mass.iter().zip(alt.mass.iter()) {
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300));
        }
        // exp(u1[i]) = Σ_j q_ij ν₂[j]
        let k = eval_kernel(&q).values;
        for i in 0..mu1.weights().len() {
            let s: f64 = (0..mu2.weights().len()).map(|j| k[[i, j]] * sol.nu2().unwrap().weights()[j]).sum();
            assert_relative_eq!(sol.u1[i].exp(), s, max_relative = 1e-12);
        }
        // Normalization: ν₁(K_m) = ν₂(K_m).
        let m = sol.m_index as f64;
        assert_relative_eq!(sol.nu1().unwrap().mass_within(m), sol.nu2().unwrap().mass_within(m), max_relative = 1e-10);
        assert!(sol.defect_monotone());
    }

    #[test]
    fn scale_invariance_and_idempotent_normalization() {
        let (q, mu1, mu2) = gaussian_instance(25, 1.0);
        let sol = solve(&q, &mu1, &mu2, 1e-12, 10_000).unwrap();
        let scaled = sol.rescaled(3.7);
        for (a, b) in sol.plan().mass.iter().zip(scaled.plan().mass.iter()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-13);
        }
        assert_relative_eq!(sol.u1[3] + sol.u2[7], scaled.u1[3] + scaled.u2[7], epsilon = 1e-12);
        let again = scaled.renormalized(Exhaustion::Balls);
        for (a, b) in again.log_nu1.iter().zip(&sol.log_nu1) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn swapping_marginals_transposes_plan() {
        let (q, mu1, mu2) = gaussian_instance(20, 0.8);
        let sol = solve(&q, &mu1, &mu2, 1e-13, 10_000).unwrap();
        let swapped = solve(&q.transposed(), &mu2, &mu1, 1e-13, 10_000).unwrap();
        let p = sol.plan();
        let pt = swapped.plan();
        for i in 0..20 {
            for j in 0..20 {
                assert!((p.mass[[i, j]] - pt.mass[[j, i]]).abs() < 1e-12);
            }
            assert_relative_eq!(sol.u1[i], swapped.u2[i], epsilon = 1e-10);
            assert_relative_eq!(sol.u2[i], swapped.u1[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn log_and_plain_domains_agree() {
        let (q, mu1, mu2) = gaussian_instance(30, 1.0);
        let opts = SolveOptions::with_tol(1e-12, 10_000);
        let a = solve_with(&q, &mu1, &mu2, &opts).unwrap();
        let b = solve_plain(&q, &mu1, &mu2, &opts).unwrap();
        for (x, y) in a.nu1().unwrap().weights().iter().zip(b.nu1().unwrap().weights()) {
            assert_relative_eq!(*x, *y, max_relative = 1e-8);
        }
        for (x, y) in a.u2.iter().zip(&b.u2) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn small_eps_stays_finite() {
        let (q, mu1, mu2) = gaussian_instance(60, 1e-3);
        let sol = solve(&q, &mu1, &mu2, 1e-9, 50_000).unwrap();
        assert!(sol.converged);
        assert!(sol.u1.iter().chain(&sol.u2).all(|v| v.is_finite()));
    }

    #[test]
    fn non_convergence_is_flagged() {
        let (q, mu1, mu2) = gaussian_instance(30, 0.05);
        let sol = solve(&q, &mu1, &mu2, 1e-14, 3).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 3);
        assert!(sol.final_residual > 1e-14);
    }

    #[test]
    fn zero_mass_points_get_zero_factor() {
        let g = Arc::new(make_grid(1, 1.0, 4).unwrap());
        let q = KernelSpec::gaussian_heat(1.0, 1.0, g.clone(), g.clone()).unwrap();
        let mu1 = DiscreteMeasure::probability(g.clone(), vec![0.5, 0.0, 0.25, 0.25]).unwrap();
        let mu2 = DiscreteMeasure::probability(g, vec![0.25; 4]).unwrap();
        let sol = solve(&q, &mu1, &mu2, 1e-12, 1000).unwrap();
        assert_eq!(sol.nu1().unwrap().weights()[1], 0.0);
        assert!(sol.u1[1].is_finite());
    }

    #[test]
    fn truncation_examples() {
        let (q, mu1, mu2) = two_by_two(vec![0.5, 0.5]);
        let sol = solve(&q, &mu1, &mu2, 1e-13, 1000).unwrap();
        let (u1m, u2m) = truncated_potentials(&sol, 1).unwrap();
        assert_relative_eq!(u1m[0], (3.0 / 6f64.sqrt()).ln(), epsilon = 1e-12);
        assert!((u1m[0] - 0.2027).abs() < 1e-4);
        assert_eq!(u1m, sol.u1);
        assert_eq!(u2m, sol.u2);
        assert!(matches!(
            truncated_potentials(&sol, 0),
            Err(Error::TruncationBelowIndex { .. })
        ));
    }

    #[test]
    fn truncated_potentials_nondecreasing_in_m() {
        let g = Arc::new(make_grid(1, 3.5, 30).unwrap());
        let q = KernelSpec::gaussian_heat(1.0, 1.0, g.clone(), g.clone()).unwrap();
        let w: Vec<f64> = g.points().map(|x| 1.0 + x[0].sin().abs()).collect();
        let mu1 = DiscreteMeasure::normalized(g.clone(), w.clone()).unwrap();
        let mu2 = DiscreteMeasure::normalized(g, w.into_iter().rev().collect()).unwrap();
        let sol = solve(&q, &mu1, &mu2, 1e-12, 10_000).unwrap();
        let mut prev = truncated_potentials(&sol, 1).unwrap();
        for m in 2..6 {
            let cur = truncated_potentials(&sol, m).unwrap();
            for (a, b) in cur.0.iter().zip(&prev.0) {
                assert!(a >= b);
            }
            for (a, b) in cur.1.iter().zip(&prev.1) {
                assert!(a >= b);
            }
            prev = cur;
        }
        assert_eq!(prev.0, sol.u1);
    }

    #[test]
    fn beurling_examples() {
        let (q, mu1, mu2) = two_by_two(vec![0.5, 0.5]);
        let sol = solve(&q, &mu1, &mu2, 1e-13, 1000).unwrap();
        let rep = check_beurling_bounds(&sol, 1.0).unwrap();
        assert_relative_eq!(rep.lower, 0.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(rep.upper, 2.0, epsilon = 1e-12);
        assert!(rep.worst_slack > 0.0);

        let g = Arc::new(make_grid(1, 1.0, 6).unwrap());
        let q = KernelSpec::new(KernelKind::Constant(4.0), g.clone(), g.clone()).unwrap();
        let mu = DiscreteMeasure::normalized(g, vec![1.0, 2.0, 3.0, 1.0, 1.0, 2.0]).unwrap();
        let sol = solve(&q, &mu, &mu, 1e-13, 100).unwrap();
        let rep = check_beurling_bounds(&sol, 1.0).unwrap();
        assert_relative_eq!(rep.lower, 2.0, epsilon = 1e-12);
        assert_relative_eq!(rep.upper, 2.0, epsilon = 1e-12);
        for u in sol.u1.iter().chain(&sol.u2) {
            assert_relative_eq!(u.exp(), 2.0, epsilon = 1e-10);
        }
        assert!(check_beurling_bounds(&sol, 0.5).is_err());
    }

    #[test]
    fn product_identity_and_level_bounds() {
        let (q, mu1, mu2) = two_by_two(vec![0.5, 0.5]);
        let sol = solve(&q, &mu1, &mu2, 1e-13, 1000).unwrap();
        let rep = check_product_identity(&sol, 1, &[(0, 0), (0, 1), (1, 0)]).unwrap();
        assert!(rep.max_relative_error < 1e-12);
        let lv = check_level_bounds(&sol, 1).unwrap();
        assert_relative_eq!(lv.lower, 0.5, epsilon = 1e-12);
        assert_relative_eq!(lv.middle, 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(lv.upper, 1.0, epsilon = 1e-12);

        let g = Arc::new(make_grid(1, 1.0, 5).unwrap());
        let q = KernelSpec::new(KernelKind::Constant(1.0), g.clone(), g.clone()).unwrap();
        let mu = DiscreteMeasure::normalized(g, vec![1.0, 3.0, 1.0, 2.0, 1.0]).unwrap();
        let sol = solve(&q, &mu, &mu, 1e-13, 100).unwrap();
        let rep = check_product_identity(&sol, 1, &[(0, 4), (2, 2)]).unwrap();
        for p in &rep.pairs {
            assert_relative_eq!(p.lhs, 1.0, epsilon = 1e-12);
        }
        let lv = check_level_bounds(&sol, 1).unwrap();
        for v in [lv.lower, lv.middle, lv.upper] {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
    }
}
