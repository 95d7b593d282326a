//! Discrete supports, measures and densities on compact balls of `R^d`.
//!
//! Lebesgue integrals are midpoint sums: a [`Density`] value times the cell
//! volume of its point is the mass carried by that point. Entropies use the
//! convention `0 log 0 = 0`.

mod bounded_lipschitz;
mod kernel;
mod wasserstein;

pub use bounded_lipschitz::{bl_distance, default_levels, BlDictionary, TestFunction, DICTIONARY_VERSION};
pub use kernel::{eval_kernel, KernelKind, KernelMatrix, KernelSpec, TiltField, LOG_UNDERFLOW};
pub use wasserstein::{
    w2_distance, w2_distance_1d, w2_distance_lp, w2_distance_with_cap, W2_DEFAULT_CAP,
};

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::Array2;

use crate::numeric::{ln_or_neg_inf, norm, xlogx};
use crate::{Error, Result};

/// Default cap on the number of lattice points `make_grid` may produce.
pub const DEFAULT_POINT_BUDGET: usize = 1_000_000;

/// Integer coordinates of a regular lattice, used for finite differences.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub spacing: f64,
    /// Coordinate of lattice index 0 along each axis.
    pub origin: Vec<f64>,
    coords: Vec<i64>,
    index: HashMap<Vec<i64>, usize>,
}

impl Lattice {
    fn new(dim: usize, spacing: f64, origin: Vec<f64>, coords: Vec<i64>) -> Self {
        let index = coords
            .chunks(dim)
            .enumerate()
            .map(|(i, c)| (c.to_vec(), i))
            .collect();
        Self {
            spacing,
            origin,
            coords,
            index,
        }
    }

    pub fn coords(&self, i: usize, dim: usize) -> &[i64] {
        &self.coords[i * dim..(i + 1) * dim]
    }

    pub fn lookup(&self, coords: &[i64]) -> Option<usize> {
        self.index.get(coords).copied()
    }
}

/// A finite set of distinct points in `R^d` with positive quadrature weights.
#[derive(Debug, Clone)]
pub struct Support {
    points: Vec<f64>,
    cell_volumes: Vec<f64>,
    dim: usize,
    bounding_radius: f64,
    lattice: Option<Lattice>,
}

impl Support {
    /// Builds a support from row-major coordinates. The bounding radius is the
    /// largest point norm.
    pub fn new(dim: usize, points: Vec<f64>, cell_volumes: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        if !points.len().is_multiple_of(dim) || points.len() / dim != cell_volumes.len() {
            return Err(Error::InvalidInput(format!(
                "{} coordinates do not match {} cell volumes in dimension {dim}",
                points.len(),
                cell_volumes.len()
            )));
        }
        if cell_volumes.is_empty() {
            return Err(Error::InvalidInput("support must contain a point".into()));
        }
        if let Some(v) = cell_volumes.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "cell volumes must be positive, found {v}"
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite coordinate".into()));
        }
        let support = Self::from_parts(dim, points, cell_volumes, None);
        support.check_distinct()?;
        Ok(support)
    }

    fn from_parts(
        dim: usize,
        points: Vec<f64>,
        cell_volumes: Vec<f64>,
        lattice: Option<Lattice>,
    ) -> Self {
        let bounding_radius = points.chunks(dim).map(norm).fold(0.0, f64::max);
        Self {
            points,
            cell_volumes,
            dim,
            bounding_radius,
            lattice,
        }
    }

    fn check_distinct(&self) -> Result<()> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.point(a)
                .iter()
                .zip(self.point(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for w in order.windows(2) {
            if self.point(w[0]) == self.point(w[1]) {
                return Err(Error::InvalidInput(format!(
                    "support points {} and {} coincide",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// Declares the support a subset of `B_radius`, failing if a point lies outside.
    pub fn with_radius(mut self, radius: f64) -> Result<Self> {
        if self.bounding_radius > radius * (1.0 + 1e-12) + 1e-300 {
            return Err(Error::OutsideBall {
                radius,
                norm: self.bounding_radius,
            });
        }
        self.bounding_radius = radius;
        Ok(self)
    }

    /// Tries to recognise a regular lattice with common spacing on every axis
    /// and attaches it, enabling finite differences.
    pub fn detect_lattice(mut self) -> Self {
        let dim = self.dim;
        let mut spacing = f64::INFINITY;
        let mut origin = vec![0.0; dim];
        for (axis, o) in origin.iter_mut().enumerate() {
            let mut coords: Vec<f64> = self.points.iter().skip(axis).step_by(dim).copied().collect();
            coords.sort_by(f64::total_cmp);
            coords.dedup();
            *o = coords[0];
            for w in coords.windows(2) {
                spacing = spacing.min(w[1] - w[0]);
            }
        }
        if !spacing.is_finite() || spacing <= 0.0 {
            return self;
        }
        let mut ints = Vec::with_capacity(self.points.len());
        for (k, &x) in self.points.iter().enumerate() {
            let o = origin[k % dim];
            let n = ((x - o) / spacing).round();
            if ((x - o) - n * spacing).abs() > 1e-6 * spacing {
                return self;
            }
            ints.push(n as i64);
        }
        self.lattice = Some(Lattice::new(dim, spacing, origin, ints));
        self
    }

    /// The sub-support at the given indices, keeping cells and lattice labels.
    pub fn restricted(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("restriction to an empty set".into()));
        }
        let points: Vec<f64> = indices.iter().flat_map(|&i| self.point(i).to_vec()).collect();
        let vols = indices.iter().map(|&i| self.cell_volumes[i]).collect();
        let lattice = self.lattice.as_ref().map(|l| {
            let coords = indices
                .iter()
                .flat_map(|&i| l.coords(i, self.dim).to_vec())
                .collect();
            Lattice::new(self.dim, l.spacing, l.origin.clone(), coords)
        });
        Ok(Self::from_parts(self.dim, points, vols, lattice))
    }

    pub fn len(&self) -> usize {
        self.cell_volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_volumes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks(self.dim)
    }

    pub fn coordinates(&self) -> &[f64] {
        &self.points
    }

    pub fn cell_volumes(&self) -> &[f64] {
        &self.cell_volumes
    }

    pub fn total_volume(&self) -> f64 {
        self.cell_volumes.iter().sum()
    }

    pub fn bounding_radius(&self) -> f64 {
        self.bounding_radius
    }

    pub fn lattice(&self) -> Option<&Lattice> {
        self.lattice.as_ref()
    }

    /// Largest point norm (independent of the declared bounding radius).
    pub fn max_norm(&self) -> f64 {
        self.points().map(norm).fold(0.0, f64::max)
    }

    /// Same cells, every point translated by `-shift`.
    pub fn translated(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: shift.len(),
            });
        }
        let points = self
            .points
            .chunks(self.dim)
            .flat_map(|p| p.iter().zip(shift).map(|(x, c)| x - c))
            .collect();
        let mut out = Support::new(self.dim, points, self.cell_volumes.clone())?;
        out.lattice = self.lattice.as_ref().map(|l| Lattice {
            origin: l.origin.iter().zip(shift).map(|(o, c)| o - c).collect(),
            ..l.clone()
        });
        Ok(out)
    }

    /// Indices of points within the closed ball of radius `r`.
    pub fn indices_within(&self, r: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| norm(self.point(i)) <= r * (1.0 + 1e-12))
            .collect()
    }

    /// Point-for-point equality of coordinates and cells.
    pub fn same_points(&self, other: &Support) -> bool {
        self.dim == other.dim
            && self.points == other.points
            && self.cell_volumes == other.cell_volumes
    }
}

/// Regular lattice over `[-radius, radius]^dim` restricted to the closed ball
/// `B_radius`, with cell centres at `-radius + (k + 1/2) h`, `h = 2 radius / n`.
pub fn make_grid(dim: usize, radius: f64, points_per_axis: usize) -> Result<Support> {
    make_grid_with_budget(dim, radius, points_per_axis, DEFAULT_POINT_BUDGET)
}

pub fn make_grid_with_budget(
    dim: usize,
    radius: f64,
    points_per_axis: usize,
    budget: usize,
) -> Result<Support> {
    if dim == 0 {
        return Err(Error::InvalidInput("dimension must be positive".into()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidInput(format!("radius must be positive, got {radius}")));
    }
    if points_per_axis < 2 {
        return Err(Error::InvalidInput("need at least 2 points per axis".into()));
    }
    let requested = (points_per_axis as f64).powi(dim as i32);
    if requested > budget as f64 {
        return Err(Error::PointBudget { requested, budget });
    }
    let h = 2.0 * radius / points_per_axis as f64;
    let origin = -radius + 0.5 * h;
    let volume = h.powi(dim as i32);
    let mut points = Vec::new();
    let mut ints = Vec::new();
    let mut idx = vec![0usize; dim];
    let total = requested as usize;
    for _ in 0..total {
        let p: Vec<f64> = idx.iter().map(|&k| origin + k as f64 * h).collect();
        if norm(&p) <= radius * (1.0 + 1e-12) {
            points.extend_from_slice(&p);
            ints.extend(idx.iter().map(|&k| k as i64));
        }
        for k in idx.iter_mut().rev() {
            *k += 1;
            if *k < points_per_axis {
                break;
            }
            *k = 0;
        }
    }
    if points.is_empty() {
        return Err(Error::InvalidInput("grid retains no points".into()));
    }
    let n = points.len() / dim;
    let mut support = Support::from_parts(dim, points, vec![volume; n], None);
    support.bounding_radius = radius;
    support.lattice = Some(Lattice::new(dim, h, vec![origin; dim], ints));
    Ok(support)
}

/// Nonnegative weights over a support; optionally a probability measure.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    support: Arc<Support>,
    weights: Vec<f64>,
    is_probability: bool,
}

impl DiscreteMeasure {
    /// A probability measure; weights must already sum to one within 1e-12.
    pub fn probability(support: Arc<Support>, weights: Vec<f64>) -> Result<Self> {
        let m = Self::finite(support, weights)?;
        let total = m.total_mass();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "probability weights sum to {total}, not 1"
            )));
        }
        Ok(Self {
            is_probability: true,
            ..m
        })
    }

    /// Rescales nonnegative weights to a probability measure.
    pub fn normalized(support: Arc<Support>, weights: Vec<f64>) -> Result<Self> {
        let m = Self::finite(support, weights)?;
        let total = m.total_mass();
        if !(total > 0.0) {
            return Err(Error::InvalidInput("measure has zero mass".into()));
        }
        let weights = m.weights.iter().map(|w| w / total).collect();
        Ok(Self {
            support: m.support,
            weights,
            is_probability: true,
        })
    }

    pub fn finite(support: Arc<Support>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != support.len() {
            return Err(Error::InvalidInput(format!(
                "{} weights for {} support points",
                weights.len(),
                support.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput(format!("negative or non-finite weight {w}")));
        }
        Ok(Self {
            support,
            weights,
            is_probability: false,
        })
    }

    /// Point masses at arbitrary (possibly repeated) locations; repeated atoms
    /// are merged and the result is normalized to a probability measure.
    pub fn from_atoms(dim: usize, points: &[f64], weights: &[f64]) -> Result<Self> {
        if points.len() != weights.len() * dim {
            return Err(Error::InvalidInput("atom coordinates and weights disagree".into()));
        }
        let mut order: Vec<usize> = (0..weights.len()).collect();
        let pt = |i: usize| &points[i * dim..(i + 1) * dim];
        order.sort_by(|&a, &b| {
            pt(a)
                .iter()
                .zip(pt(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut merged_points: Vec<f64> = Vec::new();
        let mut merged_weights: Vec<f64> = Vec::new();
        for &i in &order {
            let n = merged_weights.len();
            if n > 0 && &merged_points[(n - 1) * dim..] == pt(i) {
                merged_weights[n - 1] += weights[i];
            } else {
                merged_points.extend_from_slice(pt(i));
                merged_weights.push(weights[i]);
            }
        }
        let n = merged_weights.len();
        let support = Support::new(dim, merged_points, vec![1.0; n])?;
        Self::normalized(Arc::new(support), merged_weights)
    }

    pub fn support(&self) -> &Arc<Support> {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_probability(&self) -> bool {
        self.is_probability
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    /// Mass of the points inside the closed ball of radius `r`.
    pub fn mass_within(&self, r: f64) -> f64 {
        self.support
            .indices_within(r)
            .into_iter()
            .map(|i| self.weights[i])
            .sum()
    }

    pub fn barycenter(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dim()];
        let total = self.total_mass();
        for (p, w) in self.support.points().zip(&self.weights) {
            for (ck, xk) in c.iter_mut().zip(p) {
                *ck += w * xk / total;
            }
        }
        c
    }

    pub fn second_moment(&self) -> f64 {
        self.support
            .points()
            .zip(&self.weights)
            .map(|(p, w)| w * p.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }
}

/// Density per unit Lebesgue measure over a support.
#[derive(Debug, Clone)]
pub struct Density {
    support: Arc<Support>,
    values: Vec<f64>,
    is_probability: bool,
}

impl Density {
    /// A probability density; `Σ values · cell_volumes` must equal one within 1e-10.
    pub fn probability(support: Arc<Support>, values: Vec<f64>) -> Result<Self> {
        let d = Self::nonnegative(support, values)?;
        let mass = d.mass();
        if (mass - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "density integrates to {mass}, not 1"
            )));
        }
        Ok(Self {
            is_probability: true,
            ..d
        })
    }

    /// Rescales nonnegative values so that the density integrates to one.
    pub fn normalized(support: Arc<Support>, values: Vec<f64>) -> Result<Self> {
        let d = Self::nonnegative(support, values)?;
        let mass = d.mass();
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidInput(format!("density has mass {mass}")));
        }
        let values = d.values.iter().map(|v| v / mass).collect();
        Ok(Self {
            support: d.support,
            values,
            is_probability: true,
        })
    }

    /// Density proportional to `f` evaluated at the support points.
    pub fn from_fn(support: Arc<Support>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = support.points().map(f).collect();
        Self::normalized(support, values)
    }

    /// Density proportional to `exp(-potential)`, computed stably.
    pub fn from_potential(support: Arc<Support>, potential: &[f64]) -> Result<Self> {
        if potential.len() != support.len() {
            return Err(Error::InvalidInput("potential length mismatch".into()));
        }
        let min = potential.iter().copied().fold(f64::INFINITY, f64::min);
        let values = potential.iter().map(|u| (min - u).exp()).collect();
        Self::normalized(support, values)
    }

    pub fn nonnegative(support: Arc<Support>, values: Vec<f64>) -> Result<Self> {
        if values.len() != support.len() {
            return Err(Error::InvalidInput(format!(
                "{} density values for {} support points",
                values.len(),
                support.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!("negative or non-finite density {v}")));
        }
        Ok(Self {
            support,
            values,
            is_probability: false,
        })
    }

    pub fn support(&self) -> &Arc<Support> {
        &self.support
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_probability(&self) -> bool {
        self.is_probability
    }

    pub fn mass(&self) -> f64 {
        self.values
            .iter()
            .zip(self.support.cell_volumes())
            .map(|(v, c)| v * c)
            .sum()
    }

    /// Point masses `values × cell_volumes`.
    pub fn to_measure(&self) -> DiscreteMeasure {
        let weights = self
            .values
            .iter()
            .zip(self.support.cell_volumes())
            .map(|(v, c)| v * c)
            .collect();
        DiscreteMeasure {
            support: self.support.clone(),
            weights,
            is_probability: self.is_probability,
        }
    }

    /// `∫ p log p dx`.
    pub fn entropy(&self) -> f64 {
        self.values
            .iter()
            .zip(self.support.cell_volumes())
            .map(|(v, c)| xlogx(*v) * c)
            .sum()
    }

    pub fn log_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| ln_or_neg_inf(*v)).collect()
    }
}

/// A probability law that may or may not have a density.
#[derive(Debug, Clone)]
pub enum Law {
    Density(Density),
    Singular(DiscreteMeasure),
}

/// `S(P) = ∫ p log p dx`, or `+inf` when `P` has no density.
pub fn entropy_s(law: &Law) -> f64 {
    match law {
        Law::Density(p) => p.entropy(),
        Law::Singular(_) => f64::INFINITY,
    }
}

/// Relative entropy `Σ m log(m / n)` over matching index sets; `+inf` when `m`
/// charges a point that `n` does not.
pub fn relative_entropy(m: &[f64], n: &[f64]) -> f64 {
    assert_eq!(m.len(), n.len(), "relative entropy on mismatched supports");
    let mut h = 0.0;
    for (&a, &b) in m.iter().zip(n) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            h += a * (a / b).ln();
        }
    }
    h
}

/// Relative entropy from log-masses, `Σ exp(lm) (lm - ln)`; robust when the
/// masses themselves underflow.
pub fn relative_entropy_from_logs(log_m: &[f64], log_n: &[f64]) -> f64 {
    assert_eq!(log_m.len(), log_n.len());
    let mut h = 0.0;
    for (&a, &b) in log_m.iter().zip(log_n) {
        if a > f64::NEG_INFINITY {
            if b == f64::NEG_INFINITY {
                return f64::INFINITY;
            }
            h += a.exp() * (a - b);
        }
    }
    h
}

/// Nonnegative mass on the product of two supports (source rows, target columns).
#[derive(Debug, Clone)]
pub struct ProductMeasure {
    pub source: Arc<Support>,
    pub target: Arc<Support>,
    pub mass: Array2<f64>,
}

impl ProductMeasure {
    pub fn new(source: Arc<Support>, target: Arc<Support>, mass: Array2<f64>) -> Result<Self> {
        if mass.dim() != (source.len(), target.len()) {
            return Err(Error::InvalidInput("product mass shape mismatch".into()));
        }
        Ok(Self {
            source,
            target,
            mass,
        })
    }

    /// Outer product `μ₁ ⊗ μ₂`.
    pub fn outer(mu1: &DiscreteMeasure, mu2: &DiscreteMeasure) -> Self {
        let mass = Array2::from_shape_fn((mu1.weights.len(), mu2.weights.len()), |(i, j)| {
            mu1.weights[i] * mu2.weights[j]
        });
        Self {
            source: mu1.support.clone(),
            target: mu2.support.clone(),
            mass,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.mass.rows().into_iter().map(|r| r.sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.mass.columns().into_iter().map(|c| c.sum()).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.sum()
    }

    /// The same masses as a measure on the concatenated points `(x, y) ∈ R^{2d}`.
    pub fn to_discrete(&self) -> DiscreteMeasure {
        let (n, m) = self.mass.dim();
        let d = self.source.dim() + self.target.dim();
        let mut points = Vec::with_capacity(n * m * d);
        let mut vols = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                points.extend_from_slice(self.source.point(i));
                points.extend_from_slice(self.target.point(j));
                vols.push(self.source.cell_volumes()[i] * self.target.cell_volumes()[j]);
            }
        }
        let support = Support::from_parts(d, points, vols, None);
        let weights: Vec<f64> = self.mass.iter().copied().collect();
        let is_probability = (weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12;
        DiscreteMeasure {
            support: Arc::new(support),
            weights,
            is_probability,
        }
    }
}

/// Relative entropy between two measures on the same product support.
pub fn relative_entropy_product(m: &ProductMeasure, n: &ProductMeasure) -> f64 {
    relative_entropy(
        m.mass.as_slice().expect("standard layout"),
        n.mass.as_slice().expect("standard layout"),
    )
}

/// Total variation `½ Σ |a - b|`.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn grid_1d_four_points() {
        let g = make_grid(1, 1.0, 4).unwrap();
        let xs: Vec<f64> = g.coordinates().to_vec();
        assert_eq!(xs, vec![-0.75, -0.25, 0.25, 0.75]);
        assert!(g.cell_volumes().iter().all(|&v| v == 0.5));
        assert_eq!(g.bounding_radius(), 1.0);
    }

    #[test]
    fn grid_2d_corners_inside_ball() {
        let g = make_grid(2, 1.0, 2).unwrap();
        assert_eq!(g.len(), 4);
        for p in g.points() {
            assert_eq!(p[0].abs(), 0.5);
            assert_eq!(p[1].abs(), 0.5);
        }
    }

    #[test]
    fn grid_total_volume() {
        let g = make_grid(1, 2.0, 100).unwrap();
        assert_eq!(g.len(), 100);
        assert_relative_eq!(g.total_volume(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_ball_restriction_and_budget() {
        let g = make_grid(2, 1.0, 20).unwrap();
        assert!(g.len() < 400);
        assert!(g.max_norm() <= 1.0);
        assert!(matches!(
            make_grid(3, 1.0, 200),
            Err(Error::PointBudget { .. })
        ));
        assert!(make_grid(1, 1.0, 1).is_err());
    }

    #[test]
    fn support_rejects_duplicates_and_bad_volumes() {
        assert!(Support::new(1, vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(Support::new(1, vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(Support::new(1, vec![0.0, 1.0], vec![1.0, 1.0]).is_ok());
    }

    #[test]
    fn detect_lattice_recovers_grid() {
        let g = make_grid(2, 1.5, 7).unwrap();
        let raw = Support::new(2, g.coordinates().to_vec(), g.cell_volumes().to_vec())
            .unwrap()
            .detect_lattice();
        let lat = raw.lattice().unwrap();
        assert_relative_eq!(lat.spacing, g.lattice().unwrap().spacing, epsilon = 1e-12);
    }

    #[test]
    fn entropy_of_uniforms() {
        let g = Arc::new(make_grid(1, 1.0, 50).unwrap());
        let p = Density::from_fn(g, |_| 1.0).unwrap();
        assert_relative_eq!(p.entropy(), -(2f64.ln()), epsilon = 1e-12);

        let unit = Arc::new(
            Support::new(1, (0..10).map(|k| 0.05 + 0.1 * k as f64).collect(), vec![0.1; 10])
                .unwrap(),
        );
        let p = Density::from_fn(unit, |_| 1.0).unwrap();
        assert!(p.entropy().abs() < 1e-12);
    }

    #[test]
    fn entropy_of_truncated_gaussian() {
        // Differential entropy of N(0,1) is (1 + log 2π)/2.
        let g = Arc::new(make_grid(1, 5.0, 2000).unwrap());
        let p = Density::from_fn(g, |x| (-0.5 * x[0] * x[0]).exp()).unwrap();
        let expected = -0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        assert!((p.entropy() - expected).abs() < 1e-3);
    }

    #[test]
    fn singular_law_has_infinite_entropy() {
        let g = Arc::new(make_grid(1, 1.0, 4).unwrap());
        let m = DiscreteMeasure::probability(g, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(entropy_s(&Law::Singular(m)), f64::INFINITY);
    }

    #[test]
    fn relative_entropy_examples() {
        assert_eq!(relative_entropy(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_relative_eq!(relative_entropy(&[1.0, 0.0], &[0.5, 0.5]), 2f64.ln());
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert_relative_eq!(relative_entropy(&[0.75, 0.25], &[0.5, 0.5]), expected);
        assert!((expected - 0.13081).abs() < 1e-5);
        assert_eq!(relative_entropy(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
    }

    #[test]
    fn relative_entropy_logs_agree() {
        let m = [0.2, 0.0, 0.8];
        let n = [0.4, 0.3, 0.3];
        let lm: Vec<f64> = m.iter().map(|x| ln_or_neg_inf(*x)).collect();
        let ln: Vec<f64> = n.iter().map(|x| ln_or_neg_inf(*x)).collect();
        assert_relative_eq!(
            relative_entropy_from_logs(&lm, &ln),
            relative_entropy(&m, &n),
            epsilon = 1e-15
        );
    }

    #[test]
    fn from_atoms_merges_duplicates() {
        let m = DiscreteMeasure::from_atoms(1, &[1.0, 0.0, 1.0], &[1.0, 1.0, 2.0]).unwrap();
        assert_eq!(m.support().len(), 2);
        assert_relative_eq!(m.weights()[1], 0.75);
    }

    proptest! {
        #[test]
        fn entropy_jensen_lower_bound(vals in proptest::collection::vec(0.0f64..5.0, 12)) {
            prop_assume!(vals.iter().sum::<f64>() > 1e-3);
            let g = Arc::new(make_grid(1, 1.5, 12).unwrap());
            let p = Density::normalized(g.clone(), vals).unwrap();
            prop_assert!(p.entropy() >= -g.total_volume().ln() - 1e-12);
        }

        #[test]
        fn relative_entropy_nonnegative(
            a in proptest::collection::vec(0.0f64..1.0, 8),
            b in proptest::collection::vec(1e-3f64..1.0, 8),
        ) {
            let sa: f64 = a.iter().sum();
            prop_assume!(sa > 1e-6);
            let sb: f64 = b.iter().sum();
            let a: Vec<f64> = a.iter().map(|x| x / sa).collect();
            let b: Vec<f64> = b.iter().map(|x| x / sb).collect();
            prop_assert!(relative_entropy(&a, &b) >= -1e-12);
        }
    }
}
