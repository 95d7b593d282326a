//! Entropic control value, its dual variables, and the variational objective
//! whose minimizers are moment measures.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::measure::{relative_entropy_from_logs, Density, KernelSpec, Support};
use crate::numeric::{ball_volume, ln_or_neg_inf, logsumexp, norm};
use crate::solver::{solve_with, SchroedingerSolution, SolveOptions};
use crate::{Error, Result};

/// Value of the entropic control problem together with the equivalent forms
/// it is computed from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ControlValueReport {
    pub v_eps: f64,
    /// `H(plan | P₀ ⊗ g_ε(1)·Leb)`.
    pub h_plan_vs_product: f64,
    /// `S(P₁) - ∫u₂ dP₁ - ∫u₁ dP₀`.
    pub entropy_form: f64,
    /// `∫f_o dP₁ - ∫φ(0,·;f_o) dP₀`.
    pub dual_form: f64,
    /// `S(P₁) - H(P₀⊗P₁ | plan) - ∫∫ log g_ε(1) dP₀ dP₁`.
    pub product_form: f64,
    pub max_pairwise_gap: f64,
    pub converged: bool,
}

impl ControlValueReport {
    /// Whether all forms agree within `rel · (1 + |entropy_form|)`.
    pub fn forms_agree(&self, rel: f64) -> bool {
        self.max_pairwise_gap <= rel * (1.0 + self.entropy_form.abs())
    }
}

fn check_pair(p0: &Density, p1: &Density) -> Result<()> {
    if p0.support().dim() != p1.support().dim() {
        return Err(Error::DimensionMismatch {
            expected: p0.support().dim(),
            found: p1.support().dim(),
        });
    }
    for p in [p0, p1] {
        if (p.mass() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "expected a probability density, found mass {}",
                p.mass()
            )));
        }
    }
    Ok(())
}

/// Solves the heat-kernel Schrödinger system between `P₀` and `P₁`.
pub fn solve_heat_system(
    p0: &Density,
    p1: &Density,
    eps: f64,
    opts: &SolveOptions,
) -> Result<SchroedingerSolution> {
    check_pair(p0, p1)?;
    let q = KernelSpec::gaussian_heat(1.0, eps, p0.support().clone(), p1.support().clone())?;
    solve_with(&q, &p0.to_measure(), &p1.to_measure(), opts)
}

pub fn v_eps(p0: &Density, p1: &Density, eps: f64) -> Result<ControlValueReport> {
    v_eps_with(p0, p1, eps, &SolveOptions::with_tol(1e-12, 200_000))
}

pub fn v_eps_with(
    p0: &Density,
    p1: &Density,
    eps: f64,
    opts: &SolveOptions,
) -> Result<ControlValueReport> {
    let sol = solve_heat_system(p0, p1, eps, opts)?;
    control_value(&sol, p0, p1)
}

/// All forms of the control value for an already solved heat-kernel system.
pub fn control_value(
    sol: &SchroedingerSolution,
    p0: &Density,
    p1: &Density,
) -> Result<ControlValueReport> {
    let (f_o, phi0) = dual_variables(sol, p1)?;
    let mu1 = p0.to_measure();
    let mu2 = p1.to_measure();
    let w1 = mu1.weights();
    let w2 = mu2.weights();
    let s1 = p1.entropy();
    let l = sol.log_kernel();
    let (n, m) = l.dim();
    let log_plan = sol.log_plan();
    let log_w1: Vec<f64> = w1.iter().map(|w| ln_or_neg_inf(*w)).collect();
    let log_vol: Vec<f64> = p1.support().cell_volumes().iter().map(|v| v.ln()).collect();
    let log_ref: Vec<f64> = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| log_w1[i] + l[[i, j]] + log_vol[j])
        .collect();
    let h = relative_entropy_from_logs(log_plan.as_slice().expect("standard layout"), &log_ref);

    let int = |f: &[f64], w: &[f64]| -> f64 {
        f.iter().zip(w).filter(|(_, w)| **w > 0.0).map(|(f, w)| f * w).sum()
    };
    let entropy_form = s1 - int(&sol.u2, w2) - int(&sol.u1, w1);
    let dual_form = int(&f_o, w2) - int(&phi0, w1);

    let mut h_indep = 0.0;
    let mut cross = 0.0;
    for i in 0..n {
        if w1[i] == 0.0 {
            continue;
        }
        for j in 0..m {
            if w2[j] == 0.0 {
                continue;
            }
            let mass = w1[i] * w2[j];
            h_indep += mass * (log_w1[i] + w2[j].ln() - log_plan[[i, j]]);
            cross += mass * l[[i, j]];
        }
    }
    let product_form = s1 - h_indep - cross;

    let forms = [h, entropy_form, dual_form, product_form];
    let mut gap = 0.0f64;
    for a in &forms {
        for b in &forms {
            gap = gap.max((a - b).abs());
        }
    }
    Ok(ControlValueReport {
        v_eps: h,
        h_plan_vs_product: h,
        entropy_form,
        dual_form,
        product_form,
        max_pairwise_gap: gap,
        converged: sol.converged,
    })
}

/// `f_o = log p₁ - u₂` and `φ(0,·;f_o) = u₁`, in the gauge fixed by the
/// solver's normalization, where `u₁ = log ∫ g_ε(1)(·, y) e^{f_o(y)} dy` holds
/// on the grid.
pub fn dual_variables(sol: &SchroedingerSolution, p1: &Density) -> Result<(Vec<f64>, Vec<f64>)> {
    if !sol.target().same_points(p1.support()) {
        return Err(Error::InvalidInput(
            "density and solution live on different supports".into(),
        ));
    }
    for (j, (&w, &p)) in sol.mu2.weights().iter().zip(p1.values()).enumerate() {
        if w > 0.0 && p == 0.0 {
            return Err(Error::InconsistentDensity(format!(
                "density vanishes at support point {j} which carries mass {w}"
            )));
        }
    }
    let f_o = p1
        .log_values()
        .iter()
        .zip(&sol.u2)
        .map(|(lp, u)| lp - u)
        .collect();
    Ok((f_o, sol.u1.clone()))
}

/// `log Σ_j g(x_i, y_j) e^{f(y_j)} vol_j`, the initial value of the
/// Hopf–Cole solution with terminal data `f`.
pub fn hopf_cole_initial(sol: &SchroedingerSolution, f: &[f64]) -> Vec<f64> {
    let l = sol.log_kernel();
    let vol = sol.target().cell_volumes();
    (0..l.nrows())
        .map(|i| logsumexp((0..l.ncols()).map(|j| l[[i, j]] + f[j] + vol[j].ln())))
        .collect()
}

/// The terms of the variational objective at one candidate `P`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PsiReport {
    pub entropy: f64,
    pub control_value: f64,
    pub half_second_moment: f64,
    pub objective: f64,
    pub converged: bool,
}

fn check_in_ball(p: &Density, r: f64) -> Result<()> {
    let worst = p
        .support()
        .points()
        .zip(p.values())
        .filter(|(_, v)| **v > 0.0)
        .map(|(x, _)| norm(x))
        .fold(0.0f64, f64::max);
    if worst > r * (1.0 + 1e-12) {
        return Err(Error::OutsideBall {
            radius: r,
            norm: worst,
        });
    }
    Ok(())
}

/// `S(P) - ε V_ε(P, P₁) + ½∫|x|² dP`.
pub fn psi_objective(p: &Density, p1: &Density, eps: f64, r: f64) -> Result<f64> {
    Ok(psi_report(p, p1, eps, r)?.objective)
}

pub fn psi_report(p: &Density, p1: &Density, eps: f64, r: f64) -> Result<PsiReport> {
    check_in_ball(p, r)?;
    let control = v_eps(p, p1, eps)?;
    Ok(psi_terms(p, eps, control.v_eps, control.converged))
}

pub(crate) fn psi_terms(p: &Density, eps: f64, control_value: f64, converged: bool) -> PsiReport {
    let entropy = p.entropy();
    let half_second_moment = 0.5 * p.to_measure().second_moment();
    PsiReport {
        entropy,
        control_value,
        half_second_moment,
        objective: entropy - eps * control_value + half_second_moment,
        converged,
    }
}

/// `-log Vol(B_r) + ½ ∫_{B_r} |x|² dx / Vol(B_r)`, with both integrals taken
/// over the cells of `P₁`'s grid lying in `B_r`.
pub fn psi_upper_bound(p1: &Density, _eps: f64, r: f64) -> Result<f64> {
    uniform_bound_on(p1.support(), r)
}

pub(crate) fn uniform_bound_on(support: &Arc<Support>, r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(Error::InvalidInput(format!("radius must be positive, got {r}")));
    }
    let idx = support.indices_within(r);
    if idx.is_empty() {
        return Err(Error::InvalidInput(format!("no grid cells inside B_{r}")));
    }
    let vols = support.cell_volumes();
    let vol: f64 = idx.iter().map(|&i| vols[i]).sum();
    let moment: f64 = idx
        .iter()
        .map(|&i| 0.5 * support.point(i).iter().map(|x| x * x).sum::<f64>() * vols[i])
        .sum();
    Ok(-vol.ln() + moment / vol)
}

/// The same bound with exact ball volume and moment.
pub fn psi_upper_bound_exact(dim: usize, r: f64) -> f64 {
    -ball_volume(dim, r).ln() + 0.5 * dim as f64 * r * r / (dim as f64 + 2.0)
}

/// Closed-form control value between centred 1-D Gaussians of standard
/// deviations `a` and `b` under the heat kernel with diffusivity `eps`.
pub fn gaussian_control_value(a: f64, b: f64, eps: f64) -> f64 {
    let c = 0.5 * (-eps + (eps * eps + 4.0 * a * a * b * b).sqrt());
    -0.5 - 0.5 * (a * a * b * b - c * c).ln()
        + (a * a).ln() * 0.5
        + 0.5 * eps.ln()
        + (a * a + b * b - 2.0 * c) / (2.0 * eps)
}
