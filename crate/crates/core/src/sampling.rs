//! Seeded sampling from grid measures: pick a cell, then jitter uniformly
//! inside it.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedAliasIndex};

use crate::measure::{DiscreteMeasure, Support};
use crate::{Error, Result};

/// A seeded stream for item `index` of a run; independent of thread count.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

enum CellPicker {
    /// Cumulative weights for inverse-CDF lookup.
    Cdf(Vec<f64>),
    Alias(WeightedAliasIndex<f64>),
}

pub struct GridSampler {
    support: std::sync::Arc<Support>,
    picker: CellPicker,
    /// Side length of the cube around each point; zero disables jitter.
    sides: Vec<f64>,
}

impl GridSampler {
    /// Sampler for a probability measure on a grid; `jitter` spreads each atom
    /// uniformly over its cell.
    pub fn new(measure: &DiscreteMeasure, jitter: bool) -> Result<Self> {
        let support = measure.support().clone();
        let d = support.dim();
        let picker = if d == 1 {
            let mut acc = 0.0;
            let cdf: Vec<f64> = measure
                .weights()
                .iter()
                .map(|w| {
                    acc += w;
                    acc
                })
                .collect();
            if !(acc > 0.0) {
                return Err(Error::InvalidInput("cannot sample a zero measure".into()));
            }
            CellPicker::Cdf(cdf.into_iter().map(|c| c / acc).collect())
        } else {
            CellPicker::Alias(
                WeightedAliasIndex::new(measure.weights().to_vec())
                    .map_err(|e| Error::InvalidInput(format!("cannot sample measure: {e}")))?,
            )
        };
        let sides = if jitter {
            match support.lattice() {
                Some(l) => vec![l.spacing; support.len()],
                None => support
                    .cell_volumes()
                    .iter()
                    .map(|v| v.powf(1.0 / d as f64))
                    .collect(),
            }
        } else {
            vec![0.0; support.len()]
        };
        Ok(Self {
            support,
            picker,
            sides,
        })
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    /// Index of the cell a draw falls in.
    pub fn pick<R: Rng>(&self, rng: &mut R) -> usize {
        match &self.picker {
            CellPicker::Cdf(cdf) => {
                let u: f64 = rng.gen();
                cdf.partition_point(|c| *c <= u).min(cdf.len() - 1)
            }
            CellPicker::Alias(a) => a.sample(rng),
        }
    }

    pub fn sample_into<R: Rng>(&self, rng: &mut R, out: &mut [f64]) -> usize {
        let k = self.pick(rng);
        let side = self.sides[k];
        for (o, c) in out.iter_mut().zip(self.support.point(k)) {
            *o = if side > 0.0 {
                c + side * (rng.gen::<f64>() - 0.5)
            } else {
                *c
            };
        }
        k
    }

    /// `n` draws from a single stream, flattened row-major.
    pub fn sample_n(&self, n: usize, seed: u64) -> Vec<f64> {
        let d = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![0.0; n * d];
        for chunk in out.chunks_mut(d) {
            self.sample_into(&mut rng, chunk);
        }
        out
    }
}

/// Chi-square statistic of observed cell counts against expected
/// probabilities, pooling cells whose expectation is below 5.
pub fn chi_square(counts: &[usize], probs: &[f64]) -> (f64, usize) {
    let n: usize = counts.iter().sum();
    let n = n as f64;
    let mut stat = 0.0;
    let mut cells = 0usize;
    let mut pooled_obs = 0.0;
    let mut pooled_exp = 0.0;
    for (&c, &p) in counts.iter().zip(probs) {
        let e = n * p;
        if e < 5.0 {
            pooled_obs += c as f64;
            pooled_exp += e;
            continue;
        }
        stat += (c as f64 - e).powi(2) / e;
        cells += 1;
    }
    if pooled_exp > 0.0 {
        stat += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
        cells += 1;
    }
    (stat, cells.saturating_sub(1))
}

/// Upper chi-square quantile at normal score `z` (Wilson–Hilferty).
pub fn chi_square_threshold(dof: usize, z: f64) -> f64 {
    let k = dof as f64;
    let a = 2.0 / (9.0 * k);
    k * (1.0 - a + z * a.sqrt()).powi(3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::make_grid;
    use std::sync::Arc;

    #[test]
    fn draws_stay_in_their_cells() {
        let g = Arc::new(make_grid(1, 1.0, 8).unwrap());
        let m = DiscreteMeasure::normalized(g.clone(), (1..=8).map(f64::from).collect()).unwrap();
        let s = GridSampler::new(&m, true).unwrap();
        let mut rng = stream_rng(3, 0);
        let mut x = [0.0];
        for _ in 0..1000 {
            let k = s.sample_into(&mut rng, &mut x);
            assert!((x[0] - g.point(k)[0]).abs() <= 0.125);
        }
    }

    #[test]
    fn frequencies_pass_chi_square() {
        for dim in [1, 2] {
            let g = Arc::new(make_grid(dim, 1.0, 6).unwrap());
            let w: Vec<f64> = g.points().map(|p| 1.0 + p.iter().sum::<f64>().abs()).collect();
            let m = DiscreteMeasure::normalized(g.clone(), w).unwrap();
            let s = GridSampler::new(&m, false).unwrap();
            let mut rng = stream_rng(11, 0);
            let mut counts = vec![0; g.len()];
            for _ in 0..50_000 {
                counts[s.pick(&mut rng)] += 1;
            }
            let (stat, dof) = chi_square(&counts, m.weights());
            assert!(stat < chi_square_threshold(dof, 4.0), "{stat} with {dof} dof");
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| stream_rng(5, 1).gen()).collect();
        let mut r = stream_rng(5, 1);
        let b: u64 = r.gen();
        assert_eq!(a[0], b);
        let mut other = stream_rng(5, 2);
        assert_ne!(b, other.gen::<u64>());
    }

    #[test]
    fn wilson_hilferty_is_close() {
        // 99.9% quantile of chi-square with 10 dof is 29.588.
        assert!((chi_square_threshold(10, 3.0902) - 29.588).abs() < 0.3);
    }
}
