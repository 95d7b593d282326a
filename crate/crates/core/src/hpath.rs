//! Euler–Maruyama simulation of the h-path process
//!
//! ```text
//! dX(t) = ε ∇ log h(t, X(t)) dt + √ε dW(t),   h(t, x) = ∫ g_ε(1-t)(x, y) ν₂(dy)
//! ```
//!
//! whose endpoint law is the Schrödinger plan of a heat-kernel solve.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::measure::{bl_distance, w2_distance_1d, w2_distance_lp, Density, DiscreteMeasure, Support};
use crate::numeric::squared_distance;
use crate::sampling::{chi_square, stream_rng, GridSampler};
use crate::solver::SchroedingerSolution;
use crate::{Error, Result};

/// Terms more than this many nats below the largest are skipped.
const LOG_WINDOW: f64 = 40.0;

/// Drift field built from the terminal factor `ν₂` of a heat-kernel solve.
#[derive(Debug, Clone)]
pub struct DriftField {
    dim: usize,
    atoms: Vec<f64>,
    log_weights: Vec<f64>,
    eps: f64,
}

impl DriftField {
    pub fn new(sol: &SchroedingerSolution, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
        }
        let target = sol.target();
        let dim = target.dim();
        let mut atoms = Vec::new();
        let mut log_weights = Vec::new();
        for (y, &lw) in target.points().zip(&sol.log_nu2) {
            if lw > f64::NEG_INFINITY {
                atoms.extend_from_slice(y);
                log_weights.push(lw);
            }
        }
        if log_weights.is_empty() {
            return Err(Error::InvalidInput("terminal factor has no mass".into()));
        }
        Ok(Self {
            dim,
            atoms,
            log_weights,
            eps,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn atom(&self, j: usize) -> &[f64] {
        &self.atoms[j * self.dim..(j + 1) * self.dim]
    }

    fn check_time(t: f64) -> Result<()> {
        if !(0.0..1.0).contains(&t) {
            return Err(Error::InvalidInput(format!("drift needs t in [0, 1), got {t}")));
        }
        Ok(())
    }

    /// `log h(t, x)`.
    pub fn log_h(&self, t: f64, x: &[f64]) -> Result<f64> {
        Self::check_time(t)?;
        let s = self.eps * (1.0 - t);
        let norm = -0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * s).ln();
        Ok(norm
            + crate::numeric::logsumexp(
                (0..self.log_weights.len())
                    .map(|j| self.log_weights[j] - squared_distance(self.atom(j), x) / (2.0 * s)),
            ))
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Self::check_time(t)?;
        let mut out = vec![0.0; self.dim];
        let mut scratch = Vec::with_capacity(self.log_weights.len());
        self.eval_into(t, x, &mut out, &mut scratch);
        Ok(out)
    }

    /// `Σ_j w_j (y_j - x) / (1 - t)` with softmax weights; `t` must be in `[0, 1)`.
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        let s = self.eps * (1.0 - t);
        let inv = 1.0 / (2.0 * s);
        scratch.clear();
        let mut max = f64::NEG_INFINITY;
        for j in 0..self.log_weights.len() {
            let e = self.log_weights[j] - squared_distance(self.atom(j), x) * inv;
            max = max.max(e);
            scratch.push(e);
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        if !max.is_finite() {
            let j = self.nearest(x);
            for (k, o) in out.iter_mut().enumerate() {
                *o = (self.atom(j)[k] - x[k]) / (1.0 - t);
            }
            return;
        }
        let cut = max - LOG_WINDOW;
        let mut total = 0.0;
        for (j, &e) in scratch.iter().enumerate() {
            if e < cut {
                continue;
            }
            let w = (e - max).exp();
            total += w;
            for (k, o) in out.iter_mut().enumerate() {
                *o += w * self.atoms[j * self.dim + k];
            }
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o = (*o / total - x[k]) / (1.0 - t);
        }
    }

    fn nearest(&self, x: &[f64]) -> usize {
        (0..self.log_weights.len())
            .min_by(|&a, &b| {
                squared_distance(self.atom(a), x).total_cmp(&squared_distance(self.atom(b), x))
            })
            .expect("non-empty")
    }
}

/// `ε ∇ log ∫ g_ε(1-t)(x, y) ν₂(dy)`.
pub fn drift(t: f64, x: &[f64], sol: &SchroedingerSolution, eps: f64) -> Result<Vec<f64>> {
    DriftField::new(sol, eps)?.eval(t, x)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationOptions {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Keep every intermediate state, not only the endpoints.
    pub full_paths: bool,
}

#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub times: Vec<f64>,
    pub dim: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub eps: f64,
    /// Row-major `n_paths × dim`.
    pub initial: Vec<f64>,
    pub terminal: Vec<f64>,
    /// Row-major `n_paths × (n_steps + 1) × dim` when requested.
    pub paths: Option<Vec<f64>>,
    /// Index of the `P₀` cell each initial state was drawn from.
    pub initial_cells: Vec<usize>,
}

impl PathEnsemble {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn terminal_state(&self, i: usize) -> &[f64] {
        &self.terminal[i * self.dim..(i + 1) * self.dim]
    }

    pub fn initial_state(&self, i: usize) -> &[f64] {
        &self.initial[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn simulate(
    p0: &Density,
    sol: &SchroedingerSolution,
    eps: f64,
    opts: &SimulationOptions,
) -> Result<PathEnsemble> {
    if opts.n_steps < 2 {
        return Err(Error::InvalidInput("n_steps must be at least 2".into()));
    }
    if opts.n_paths == 0 {
        return Err(Error::InvalidInput("n_paths must be positive".into()));
    }
    let field = DriftField::new(sol, eps)?;
    if p0.support().dim() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            found: p0.support().dim(),
        });
    }
    let sampler = GridSampler::new(&p0.to_measure(), true)?;
    let d = field.dim();
    let n = opts.n_steps;
    let dt = 1.0 / n as f64;
    let last_t = 1.0 - dt;
    let noise = (eps * dt).sqrt();
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();

    let run = |p: usize| {
        let mut rng = stream_rng(opts.seed, p as u64);
        let mut x = vec![0.0; d];
        let cell = sampler.sample_into(&mut rng, &mut x);
        let x0 = x.clone();
        let mut path = if opts.full_paths {
            let mut v = Vec::with_capacity((n + 1) * d);
            v.extend_from_slice(&x);
            Some(v)
        } else {
            None
        };
        let mut b = vec![0.0; d];
        let mut scratch = Vec::new();
        for &t in &times[..n] {
            field.eval_into(t.min(last_t), &x, &mut b, &mut scratch);
            for k in 0..d {
                let xi: f64 = StandardNormal.sample(&mut rng);
                x[k] += b[k] * dt + noise * xi;
            }
            if let Some(v) = path.as_mut() {
                v.extend_from_slice(&x);
            }
        }
        (cell, x0, x, path)
    };
    let results: Vec<_> = (0..opts.n_paths).into_par_iter().map(run).collect();

    let mut initial = Vec::with_capacity(opts.n_paths * d);
    let mut terminal = Vec::with_capacity(opts.n_paths * d);
    let mut cells = Vec::with_capacity(opts.n_paths);
    let mut paths = opts.full_paths.then(|| Vec::with_capacity(opts.n_paths * (n + 1) * d));
    for (cell, x0, x1, path) in results {
        cells.push(cell);
        initial.extend(x0);
        terminal.extend(x1);
        if let (Some(all), Some(p)) = (paths.as_mut(), path) {
            all.extend(p);
        }
    }
    Ok(PathEnsemble {
        times,
        dim: d,
        n_paths: opts.n_paths,
        seed: opts.seed,
        eps,
        initial,
        terminal,
        paths,
        initial_cells: cells,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Estimate {
    pub value: f64,
    /// Bootstrap standard deviation.
    pub error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EndpointReport {
    pub n_paths: usize,
    pub terminal_bl: Estimate,
    pub terminal_w2: Estimate,
    /// `W₂` between the target and as many direct draws from it.
    pub monte_carlo_floor: f64,
    pub joint_tv: Estimate,
    pub joint_relative_entropy: Estimate,
    pub bins_per_axis: usize,
    /// Chi-square statistic of initial cells against `P₀`, with its degrees of freedom.
    pub initial_chi_square: (f64, usize),
}

#[derive(Debug, Clone)]
pub struct DiagnosticOptions {
    pub bins_per_axis: usize,
    pub bootstrap: usize,
    pub seed: u64,
    /// Sample size used for `W₂` in dimension two and above.
    pub w2_subsample: usize,
}

impl Default for DiagnosticOptions {
    fn default() -> Self {
        Self {
            bins_per_axis: 50,
            bootstrap: 16,
            seed: 0x5eed,
            w2_subsample: 200,
        }
    }
}

/// Axis-aligned binning of `[-R, R]^d` into `bins^d` cells.
struct Binning {
    dim: usize,
    bins: usize,
    half_width: f64,
}

impl Binning {
    fn cell(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for &c in x.iter().take(self.dim) {
            let k = ((c + self.half_width) / (2.0 * self.half_width) * self.bins as f64).floor();
            let k = (k.max(0.0) as usize).min(self.bins - 1);
            idx = idx * self.bins + k;
        }
        idx
    }

    fn count(&self) -> usize {
        self.bins.pow(self.dim as u32)
    }
}

fn empirical(dim: usize, points: &[f64]) -> Result<DiscreteMeasure> {
    let n = points.len() / dim;
    DiscreteMeasure::from_atoms(dim, points, &vec![1.0; n])
}

fn w2_to_target(dim: usize, points: &[f64], p1: &DiscreteMeasure, sub: usize, seed: u64) -> Result<f64> {
    if dim == 1 {
        return w2_distance_1d(&empirical(1, points)?, p1);
    }
    // Two equally sized empirical measures keep the transport problem small.
    let n = points.len() / dim;
    let k = sub.min(n);
    let stride = n / k;
    let picked: Vec<f64> = (0..k).flat_map(|i| points[i * stride * dim..(i * stride + 1) * dim].to_vec()).collect();
    let draws = GridSampler::new(p1, true)?.sample_n(k, seed);
    w2_distance_lp(&empirical(dim, &picked)?, &empirical(dim, &draws)?, 2 * k)
}

/// `W₂` between `n` direct draws from `P₁` and `P₁` itself.
pub fn monte_carlo_floor(p1: &Density, n: usize, seed: u64, w2_subsample: usize) -> Result<f64> {
    let m = p1.to_measure();
    let draws = GridSampler::new(&m, true)?.sample_n(n, seed);
    w2_to_target(m.dim(), &draws, &m, w2_subsample, seed ^ 0x9e37_79b9)
}

struct JointStats {
    tv: f64,
    relative_entropy: f64,
}

fn joint_stats(
    ens: &PathEnsemble,
    rows: &[usize],
    src_bins: &Binning,
    tgt_bins: &Binning,
    plan_binned: &Array2<f64>,
) -> JointStats {
    let mut hist = Array2::<f64>::zeros(plan_binned.dim());
    let w = 1.0 / rows.len() as f64;
    for &i in rows {
        hist[[src_bins.cell(ens.initial_state(i)), tgt_bins.cell(ens.terminal_state(i))]] += w;
    }
    let tv = 0.5
        * hist
            .iter()
            .zip(plan_binned.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    let relative_entropy = crate::measure::relative_entropy(
        hist.as_slice().expect("standard layout"),
        plan_binned.as_slice().expect("standard layout"),
    );
    JointStats {
        tv,
        relative_entropy,
    }
}

fn covering_width(s: &Support) -> f64 {
    s.coordinates().iter().fold(0.0f64, |m, x| m.max(x.abs())) * (1.0 + 1e-9) + 1e-12
}

fn mean_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn endpoint_diagnostics(
    ens: &PathEnsemble,
    sol: &SchroedingerSolution,
    p1: &Density,
    opts: &DiagnosticOptions,
) -> Result<EndpointReport> {
    let d = ens.dim;
    let target = p1.to_measure();
    let src_bins = Binning {
        dim: d,
        bins: opts.bins_per_axis,
        half_width: covering_width(sol.source()),
    };
    let tgt_bins = Binning {
        dim: d,
        bins: opts.bins_per_axis,
        half_width: covering_width(sol.target()),
    };
    let plan = sol.plan();
    let mut plan_binned = Array2::<f64>::zeros((src_bins.count(), tgt_bins.count()));
    let src_cells: Vec<usize> = sol.source().points().map(|x| src_bins.cell(x)).collect();
    let tgt_cells: Vec<usize> = sol.target().points().map(|y| tgt_bins.cell(y)).collect();
    for ((i, j), m) in plan.mass.indexed_iter() {
        plan_binned[[src_cells[i], tgt_cells[j]]] += m;
    }

    let all: Vec<usize> = (0..ens.n_paths).collect();
    let base = joint_stats(ens, &all, &src_bins, &tgt_bins, &plan_binned);
    let bl = bl_distance(&empirical(d, &ens.terminal)?, &target);
    let w2 = w2_to_target(d, &ens.terminal, &target, opts.w2_subsample, opts.seed)?;

    let mut boot = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut tvs, mut res, mut bls, mut w2s) = (vec![], vec![], vec![], vec![]);
    for b in 0..opts.bootstrap {
        let rows: Vec<usize> = (0..ens.n_paths)
            .map(|_| rand::Rng::gen_range(&mut boot, 0..ens.n_paths))
            .collect();
        let st = joint_stats(ens, &rows, &src_bins, &tgt_bins, &plan_binned);
        tvs.push(st.tv);
        res.push(st.relative_entropy);
        let pts: Vec<f64> = rows.iter().flat_map(|&i| ens.terminal_state(i).to_vec()).collect();
        bls.push(bl_distance(&empirical(d, &pts)?, &target));
        w2s.push(w2_to_target(d, &pts, &target, opts.w2_subsample, opts.seed.wrapping_add(b as u64))?);
    }

    let p0_weights = sol.mu1.weights();
    let mut counts = vec![0usize; p0_weights.len()];
    for &c in &ens.initial_cells {
        counts[c] += 1;
    }
    Ok(EndpointReport {
        n_paths: ens.n_paths,
        terminal_bl: Estimate {
            value: bl,
            error: mean_sd(&bls),
        },
        terminal_w2: Estimate {
            value: w2,
            error: mean_sd(&w2s),
        },
        monte_carlo_floor: monte_carlo_floor(p1, ens.n_paths, opts.seed ^ 0xf1007, opts.w2_subsample)?,
        joint_tv: Estimate {
            value: base.tv,
            error: mean_sd(&tvs),
        },
        joint_relative_entropy: Estimate {
            value: base.relative_entropy,
            error: mean_sd(&res),
        },
        bins_per_axis: opts.bins_per_axis,
        initial_chi_square: chi_square(&counts, p0_weights),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use crate::functionals::solve_heat_system;
    use crate::measure::{make_grid, KernelSpec};
    use crate::sampling::chi_square_threshold;
    use crate::solver::{solve, SolveOptions};
    use approx::assert_relative_eq;

    fn single_atom(y0: f64, eps: f64) -> SchroedingerSolution {
        let src = Arc::new(make_grid(1, 1.0, 10).unwrap());
        let tgt = Arc::new(Support::new(1, vec![y0], vec![1.0]).unwrap());
        let q = KernelSpec::gaussian_heat(1.0, eps, src.clone(), tgt.clone()).unwrap();
        let mu1 = DiscreteMeasure::normalized(src, vec![1.0; 10]).unwrap();
        let mu2 = DiscreteMeasure::probability(tgt, vec![1.0]).unwrap();
        solve(&q, &mu1, &mu2, 1e-12, 100).unwrap()
    }

    #[test]
    fn single_atom_gives_bridge_drift() {
        let sol = single_atom(0.7, 0.3);
        for (t, x) in [(0.0, -0.2), (0.5, 1.3), (0.9, 0.0)] {
            let b = drift(t, &[x], &sol, 0.3).unwrap();
            assert_relative_eq!(b[0], (0.7 - x) / (1.0 - t), epsilon = 1e-12);
        }
        assert!(drift(1.0, &[0.0], &sol, 0.3).is_err());
    }

    #[test]
    fn symmetric_atoms_cancel_at_midpoint() {
        let src = Arc::new(make_grid(2, 1.0, 4).unwrap());
        let tgt = Arc::new(Support::new(2, vec![-1.0, 0.0, 1.0, 0.0], vec![1.0, 1.0]).unwrap());
        let q = KernelSpec::gaussian_heat(1.0, 0.5, src.clone(), tgt.clone()).unwrap();
        let mu1 = DiscreteMeasure::normalized(src.clone(), vec![1.0; src.len()]).unwrap();
        let mu2 = DiscreteMeasure::probability(tgt, vec![0.5, 0.5]).unwrap();
        let sol = solve(&q, &mu1, &mu2, 1e-12, 1000).unwrap();
        let b = drift(0.4, &[0.0, 0.3], &sol, 0.5).unwrap();
        assert!(b[0].abs() < 1e-12);
        assert_relative_eq!(b[1], -0.3 / 0.6, epsilon = 1e-12);
    }

    fn gaussian_instance(eps: f64) -> (Density, Density, SchroedingerSolution) {
        let g = Arc::new(make_grid(1, 4.0, 100).unwrap());
        let p0 = Density::from_fn(g.clone(), |x| (-x[0] * x[0] / 0.5).exp()).unwrap();
        let p1 = Density::from_fn(g, |x| (-x[0] * x[0]).exp()).unwrap();
        let sol = solve_heat_system(&p0, &p1, eps, &SolveOptions::with_tol(1e-12, 100_000)).unwrap();
        (p0, p1, sol)
    }

    #[test]
    fn drift_is_gradient_of_log_h() {
        let (_, _, sol) = gaussian_instance(0.5);
        let field = DriftField::new(&sol, 0.5).unwrap();
        let mut rng = stream_rng(1, 0);
        for _ in 0..50 {
            let t: f64 = rand::Rng::gen_range(&mut rng, 0.0..0.95);
            let x: f64 = rand::Rng::gen_range(&mut rng, -2.5..2.5);
            let h = 1e-5;
            let fd = 0.5 * (field.log_h(t, &[x + h]).unwrap() - field.log_h(t, &[x - h]).unwrap())
                / (2.0 * h);
            let b = field.eval(t, &[x]).unwrap()[0];
            assert!((fd - b).abs() <= 1e-5 * (1.0 + b.abs()), "t={t} x={x}: {fd} vs {b}");
        }
    }

    #[test]
    fn drift_at_time_zero_matches_potential_gradient() {
        let (_, _, sol) = gaussian_instance(0.5);
        for x in [-1.3, -0.2, 0.45, 1.9] {
            let h = 1e-5;
            let fd = 0.5 * (sol.u1_at(&[x + h]).unwrap() - sol.u1_at(&[x - h]).unwrap()) / (2.0 * h);
            let b = drift(0.0, &[x], &sol, 0.5).unwrap()[0];
            assert!((fd - b).abs() < 1e-4);
        }
    }

    #[test]
    fn bridge_to_atom_concentrates() {
        let eps = 0.01;
        let sol = single_atom(0.5, eps);
        let g = sol.source().clone();
        let p0 = Density::from_fn(g, |x| (-x[0] * x[0] / 0.01).exp()).unwrap();
        let ens = simulate(
            &p0,
            &sol,
            eps,
            &SimulationOptions {
                n_paths: 500,
                n_steps: 100,
                seed: 9,
                full_paths: false,
            },
        )
        .unwrap();
        let scale = (eps / 100.0f64).sqrt();
        for i in 0..ens.n_paths {
            assert!((ens.terminal_state(i)[0] - 0.5).abs() < 6.0 * scale);
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (p0, _, sol) = gaussian_instance(0.5);
        let opts = SimulationOptions {
            n_paths: 300,
            n_steps: 20,
            seed: 42,
            full_paths: true,
        };
        let a = simulate(&p0, &sol, 0.5, &opts).unwrap();
        let b = simulate(&p0, &sol, 0.5, &opts).unwrap();
        assert_eq!(a.terminal, b.terminal);
        assert_eq!(a.paths, b.paths);
        let paths = a.paths.unwrap();
        assert_eq!(paths.len(), 300 * 21);
        assert_eq!(paths[21 * 7 + 20], a.terminal[7]);
        assert_eq!(paths[21 * 7], a.initial[7]);
        assert_eq!(a.times[0], 0.0);
        assert_eq!(*a.times.last().unwrap(), 1.0);
        let c = simulate(&p0, &sol, 0.5, &SimulationOptions { seed: 43, ..opts }).unwrap();
        assert_ne!(a.terminal, c.terminal);
    }

    #[test]
    fn initial_states_follow_p0_and_tv_shrinks() {
        let (p0, p1, sol) = gaussian_instance(0.5);
        let mut prev = f64::INFINITY;
        for n in [1_000, 4_000, 16_000] {
            let ens = simulate(
                &p0,
                &sol,
                0.5,
                &SimulationOptions {
                    n_paths: n,
                    n_steps: 50,
                    seed: 7,
                    full_paths: false,
                },
            )
            .unwrap();
            let rep = endpoint_diagnostics(
                &ens,
                &sol,
                &p1,
                &DiagnosticOptions {
                    bootstrap: 2,
                    ..Default::default()
                },
            )
            .unwrap();
            let (stat, dof) = rep.initial_chi_square;
            assert!(stat < chi_square_threshold(dof, 4.0));
            assert!(rep.joint_tv.value < prev);
            prev = rep.joint_tv.value;
        }
    }

    #[test]
    fn two_dimensional_diagnostics_run() {
        let g = Arc::new(make_grid(2, 2.0, 12).unwrap());
        let p0 = Density::from_fn(g.clone(), |x| (-(x[0] * x[0] + x[1] * x[1])).exp()).unwrap();
        let p1 = Density::from_fn(g, |x| (-((x[0] - 0.5).powi(2) + x[1] * x[1])).exp()).unwrap();
        let sol = solve_heat_system(&p0, &p1, 0.5, &SolveOptions::default()).unwrap();
        let ens = simulate(
            &p0,
            &sol,
            0.5,
            &SimulationOptions {
                n_paths: 2000,
                n_steps: 40,
                seed: 1,
                full_paths: false,
            },
        )
        .unwrap();
        let rep = endpoint_diagnostics(
            &ens,
            &sol,
            &p1,
            &DiagnosticOptions {
                bins_per_axis: 6,
                bootstrap: 2,
                w2_subsample: 100,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(rep.terminal_w2.value.is_finite());
        assert!(rep.terminal_bl.value < 0.2);
    }
}
