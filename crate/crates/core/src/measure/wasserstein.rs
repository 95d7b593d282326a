//! Exact quadratic Wasserstein distance between discrete probability measures.
//!
//! In one dimension the monotone (quantile) coupling is optimal and is used
//! directly. Otherwise the transportation problem is solved exactly by the
//! transportation simplex (MODI potentials on a spanning-tree basis), which is
//! only practical for small supports and is guarded by a size cap.

use std::collections::VecDeque;

use ndarray::Array2;

use super::DiscreteMeasure;
use crate::numeric::squared_distance;
use crate::{Error, Result};

pub const W2_DEFAULT_CAP: usize = 400;

const MASS_TOL: f64 = 1e-9;

fn check_pair(mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Result<()> {
    if mu1.dim() != mu2.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu1.dim(),
            found: mu2.dim(),
        });
    }
    for m in [mu1, mu2] {
        let total = m.total_mass();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidInput(format!(
                "W2 needs probability measures, found total mass {total}"
            )));
        }
    }
    Ok(())
}

/// `W₂(μ₁, μ₂)`; exact quantile coupling in 1-D, transportation simplex
/// (combined support capped at [`W2_DEFAULT_CAP`]) otherwise.
pub fn w2_distance(mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Result<f64> {
    w2_distance_with_cap(mu1, mu2, W2_DEFAULT_CAP)
}

pub fn w2_distance_with_cap(mu1: &DiscreteMeasure, mu2: &DiscreteMeasure, cap: usize) -> Result<f64> {
    check_pair(mu1, mu2)?;
    if mu1.dim() == 1 {
        w2_distance_1d(mu1, mu2)
    } else {
        w2_distance_lp(mu1, mu2, cap)
    }
}

/// Quantile-coupling distance for measures on the real line.
pub fn w2_distance_1d(mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Result<f64> {
    check_pair(mu1, mu2)?;
    if mu1.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            found: mu1.dim(),
        });
    }
    let sorted = |m: &DiscreteMeasure| {
        let total = m.total_mass();
        let mut atoms: Vec<(f64, f64)> = m
            .support()
            .coordinates()
            .iter()
            .zip(m.weights())
            .filter(|(_, w)| **w > 0.0)
            .map(|(x, w)| (*x, w / total))
            .collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        atoms
    };
    let a = sorted(mu1);
    let b = sorted(mu2);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut cost = 0.0;
    loop {
        let d = a[i].0 - b[j].0;
        if ra <= rb {
            cost += ra * d * d;
            rb -= ra;
            i += 1;
            if i == a.len() {
                break;
            }
            ra = a[i].1;
        } else {
            cost += rb * d * d;
            ra -= rb;
            j += 1;
            if j == b.len() {
                break;
            }
            rb = b[j].1;
        }
    }
    Ok(cost.max(0.0).sqrt())
}

/// Exact distance through the transportation simplex, any dimension.
pub fn w2_distance_lp(mu1: &DiscreteMeasure, mu2: &DiscreteMeasure, cap: usize) -> Result<f64> {
    check_pair(mu1, mu2)?;
    let rows: Vec<usize> = (0..mu1.weights().len())
        .filter(|&i| mu1.weights()[i] > 0.0)
        .collect();
    let cols: Vec<usize> = (0..mu2.weights().len())
        .filter(|&j| mu2.weights()[j] > 0.0)
        .collect();
    let size = rows.len() + cols.len();
    if size > cap {
        return Err(Error::OracleTooLarge { size, cap });
    }
    let t1 = mu1.total_mass();
    let t2 = mu2.total_mass();
    let a: Vec<f64> = rows.iter().map(|&i| mu1.weights()[i] / t1).collect();
    let b: Vec<f64> = cols.iter().map(|&j| mu2.weights()[j] / t2).collect();
    let cost = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| {
        squared_distance(mu1.support().point(rows[i]), mu2.support().point(cols[j]))
    });
    let total = transport_simplex(&a, &b, &cost)?;
    Ok(total.max(0.0).sqrt())
}

struct Basis {
    cells: Vec<(usize, usize, f64)>,
}

/// Minimum of `Σ c_ij π_ij` over couplings of `a` and `b` (equal total mass).
pub(crate) fn transport_simplex(a: &[f64], b: &[f64], cost: &Array2<f64>) -> Result<f64> {
    let (n, m) = (a.len(), b.len());
    let mut basis = northwest_corner(a, b);
    let scale = 1.0 + cost.iter().copied().fold(0.0, f64::max);
    let tol = 1e-12 * scale;
    let max_pivots = 50 * (n + m) * (n + m) + 1000;
    let mut in_basis = Array2::from_elem((n, m), false);
    for &(i, j, _) in &basis.cells {
        in_basis[[i, j]] = true;
    }
    let mut degenerate_run = 0usize;
    for _ in 0..max_pivots {
        let (u, v) = potentials(&basis, n, m, cost);
        let bland = degenerate_run > n + m;
        let mut entering = None;
        let mut best = -tol;
        'scan: for i in 0..n {
            for j in 0..m {
                if in_basis[[i, j]] {
                    continue;
                }
                let r = cost[[i, j]] - u[i] - v[j];
                if r < best {
                    entering = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = r;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            return Ok(basis.cells.iter().map(|&(i, j, x)| x * cost[[i, j]]).sum());
        };
        let path = tree_path(&basis, n, m, ei, ej);
        // Path cells alternate -, +, -, ... walking back from column ej to row ei.
        let minus: Vec<usize> = path.iter().rev().step_by(2).copied().collect();
        let plus: Vec<usize> = path.iter().rev().skip(1).step_by(2).copied().collect();
        let (leave, theta) = minus
            .iter()
            .map(|&k| (k, basis.cells[k].2))
            .fold((usize::MAX, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
        for &k in &plus {
            basis.cells[k].2 += theta;
        }
        for &k in &minus {
            basis.cells[k].2 = (basis.cells[k].2 - theta).max(0.0);
        }
        degenerate_run = if theta == 0.0 { degenerate_run + 1 } else { 0 };
        let (li, lj, _) = basis.cells[leave];
        in_basis[[li, lj]] = false;
        in_basis[[ei, ej]] = true;
        basis.cells[leave] = (ei, ej, theta);
    }
    Err(Error::SimplexStalled(max_pivots))
}

fn northwest_corner(a: &[f64], b: &[f64]) -> Basis {
    let (n, m) = (a.len(), b.len());
    let mut cells = Vec::with_capacity(n + m - 1);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0], b[0]);
    loop {
        let x = ra.min(rb);
        cells.push((i, j, x));
        ra -= x;
        rb -= x;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if i == n - 1 || (j < m - 1 && rb <= ra) {
            j += 1;
            rb = b[j];
        } else {
            i += 1;
            ra = a[i];
        }
    }
    Basis { cells }
}

fn adjacency(basis: &Basis, n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    // Nodes 0..n are rows, n..n+m are columns; each entry is (neighbour, cell index).
    let mut adj = vec![Vec::new(); n + m];
    for (k, &(i, j, _)) in basis.cells.iter().enumerate() {
        adj[i].push((n + j, k));
        adj[n + j].push((i, k));
    }
    adj
}

fn potentials(basis: &Basis, n: usize, m: usize, cost: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let adj = adjacency(basis, n, m);
    let mut pot = vec![f64::NAN; n + m];
    pot[0] = 0.0;
    let mut queue = VecDeque::from([0usize]);
    while let Some(node) = queue.pop_front() {
        for &(next, k) in &adj[node] {
            if pot[next].is_nan() {
                let (i, j, _) = basis.cells[k];
                pot[next] = cost[[i, j]] - pot[node];
                queue.push_back(next);
            }
        }
    }
    let u = pot[..n].to_vec();
    let v = pot[n..].to_vec();
    (u, v)
}

/// Basis cells on the tree path from row `i` to column `j`, ordered from the row end.
fn tree_path(basis: &Basis, n: usize, m: usize, i: usize, j: usize) -> Vec<usize> {
    let adj = adjacency(basis, n, m);
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n + m];
    let mut seen = vec![false; n + m];
    seen[i] = true;
    let mut queue = VecDeque::from([i]);
    let goal = n + j;
    while let Some(node) = queue.pop_front() {
        if node == goal {
            break;
        }
        for &(next, k) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, k));
                queue.push_back(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = goal;
    while let Some((prev, k)) = parent[node] {
        path.push(k);
        node = prev;
    }
    path.reverse();
    path
}
