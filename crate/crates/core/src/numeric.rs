//! Small numerical kernels shared by the solvers.

/// `log Σ exp(v)`, ignoring `-inf` entries. Returns `-inf` for an empty or all-`-inf` input.
pub fn logsumexp(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for v in values {
        if v == f64::NEG_INFINITY {
            continue;
        }
        if v == f64::INFINITY {
            return f64::INFINITY;
        }
        if v > max {
            sum = sum * (max - v).exp() + 1.0;
            max = v;
        } else {
            sum += (v - max).exp();
        }
    }
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + sum.ln()
}

/// `log Σ_j exp(a[j] + b[j])` over two equally long slices.
pub fn logsumexp_pair(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut max = f64::NEG_INFINITY;
    for (x, y) in a.iter().zip(b) {
        let s = x + y;
        if s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        let s = x + y;
        if s > f64::NEG_INFINITY {
            sum += (s - max).exp();
        }
    }
    max + sum.ln()
}

/// Natural log that maps 0 to `-inf` without warnings.
#[inline]
pub fn ln_or_neg_inf(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `x log x` with the convention `0 log 0 = 0`.
#[inline]
pub fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest absolute elementwise difference.
pub fn sup_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Volume of the closed Euclidean ball of radius `r` in dimension `d`.
pub fn ball_volume(d: usize, r: f64) -> f64 {
    // Γ(d/2 + 1) by recursion from Γ(1) = 1 or Γ(1/2) = √π.
    let mut gamma = if d.is_multiple_of(2) {
        1.0
    } else {
        std::f64::consts::PI.sqrt() / 2.0
    };
    let mut k = if d.is_multiple_of(2) { 1.0 } else { 1.5 };
    while k < d as f64 / 2.0 + 1.0 - 1e-9 {
        gamma *= k;
        k += 1.0;
    }
    std::f64::consts::PI.powf(d as f64 / 2.0) * r.powi(d as i32) / gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logsumexp_handles_neg_inf() {
        assert_eq!(logsumexp([f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_relative_eq!(
            logsumexp([0.0, f64::NEG_INFINITY, 0.0]),
            2f64.ln(),
            epsilon = 1e-15
        );
        assert_relative_eq!(logsumexp([1000.0, 1000.0]), 1000.0 + 2f64.ln());
    }

    #[test]
    fn pair_matches_single() {
        let a = [0.3, -1.2, 4.0];
        let b = [1.0, 2.0, -3.0];
        let joint: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert_relative_eq!(logsumexp_pair(&a, &b), logsumexp(joint), epsilon = 1e-14);
    }

    #[test]
    fn ball_volumes() {
        assert_relative_eq!(ball_volume(1, 1.0), 2.0, epsilon = 1e-14);
        assert_relative_eq!(ball_volume(2, 1.0), std::f64::consts::PI, epsilon = 1e-14);
        assert_relative_eq!(
            ball_volume(3, 2.0),
            4.0 / 3.0 * std::f64::consts::PI * 8.0,
            epsilon = 1e-12
        );
    }
}
