use std::sync::Arc;

use ndarray::Array2;

use super::Support;
use crate::numeric::squared_distance;
use crate::{Error, Result};

/// Log-kernel values below this are clamped to the smallest normal `f64` in the
/// plain matrix, and the matrix is flagged for log-domain use.
pub const LOG_UNDERFLOW: f64 = -745.0;

/// Smooth fields `ψ(x, y)` used to tilt a kernel, `q·exp(a ψ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TiltField {
    /// `ψ(x, y) = sin(Σ x_k) · sin(Σ y_k)`.
    SinProduct,
}

impl TiltField {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            TiltField::SinProduct => x.iter().sum::<f64>().sin() * y.iter().sum::<f64>().sin(),
        }
    }
}

/// The functional form of a strictly positive kernel.
#[derive(Debug, Clone)]
pub enum KernelKind {
    /// Explicit values indexed by (source point, target point).
    Dense(Array2<f64>),
    Constant(f64),
    /// Heat kernel `g_ε(t)(x, y) = (2π ε t)^{-d/2} exp(-|y - x|² / (2 ε t))`.
    GaussianHeat { t: f64, eps: f64 },
    /// `base(x, y) · exp(amplitude · field(x, y))`.
    Tilted {
        base: Box<KernelKind>,
        amplitude: f64,
        field: TiltField,
    },
}

impl KernelKind {
    fn validate(&self, source: &Support, target: &Support) -> Result<()> {
        match self {
            KernelKind::Dense(values) => {
                if values.dim() != (source.len(), target.len()) {
                    return Err(Error::InvalidInput(format!(
                        "kernel matrix is {:?}, supports are {}x{}",
                        values.dim(),
                        source.len(),
                        target.len()
                    )));
                }
                if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                    return Err(Error::InvalidInput(format!(
                        "kernel must be strictly positive, found {v}"
                    )));
                }
            }
            KernelKind::Constant(c) => {
                if !(*c > 0.0 && c.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "constant kernel must be positive, found {c}"
                    )));
                }
            }
            KernelKind::GaussianHeat { t, eps } => {
                if !(*t > 0.0 && *eps > 0.0 && t.is_finite() && eps.is_finite()) {
                    return Err(Error::InvalidInput(format!(
                        "heat kernel needs t > 0 and eps > 0, got t = {t}, eps = {eps}"
                    )));
                }
            }
            KernelKind::Tilted {
                base, amplitude, ..
            } => {
                if !amplitude.is_finite() {
                    return Err(Error::InvalidInput("tilt amplitude must be finite".into()));
                }
                base.validate(source, target)?;
            }
        }
        Ok(())
    }

    /// `log q(x, y)` for kernels with a closed form; `None` for dense matrices.
    pub fn log_at(&self, x: &[f64], y: &[f64]) -> Option<f64> {
        match self {
            KernelKind::Dense(_) => None,
            KernelKind::Constant(c) => Some(c.ln()),
            KernelKind::GaussianHeat { t, eps } => {
                let d = x.len() as f64;
                let s = eps * t;
                Some(
                    -0.5 * d * (2.0 * std::f64::consts::PI * s).ln()
                        - squared_distance(x, y) / (2.0 * s),
                )
            }
            KernelKind::Tilted {
                base,
                amplitude,
                field,
            } => base
                .log_at(x, y)
                .map(|l| l + amplitude * field.eval(x, y)),
        }
    }

    fn log_entry(&self, source: &Support, target: &Support, i: usize, j: usize) -> f64 {
        match self {
            KernelKind::Dense(values) => values[[i, j]].ln(),
            KernelKind::Tilted {
                base,
                amplitude,
                field,
            } => {
                base.log_entry(source, target, i, j)
                    + amplitude * field.eval(source.point(i), target.point(j))
            }
            other => other
                .log_at(source.point(i), target.point(j))
                .expect("closed-form kernel"),
        }
    }

    /// Whether `log_at` works away from the grid.
    pub fn is_closed_form(&self) -> bool {
        match self {
            KernelKind::Dense(_) => false,
            KernelKind::Tilted { base, .. } => base.is_closed_form(),
            _ => true,
        }
    }
}

/// A kernel bound to a (source, target) pair of supports.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    kind: KernelKind,
    source: Arc<Support>,
    target: Arc<Support>,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, source: Arc<Support>, target: Arc<Support>) -> Result<Self> {
        if source.dim() != target.dim() {
            return Err(Error::DimensionMismatch {
                expected: source.dim(),
                found: target.dim(),
            });
        }
        kind.validate(&source, &target)?;
        Ok(Self {
            kind,
            source,
            target,
        })
    }

    pub fn gaussian_heat(t: f64, eps: f64, source: Arc<Support>, target: Arc<Support>) -> Result<Self> {
        Self::new(KernelKind::GaussianHeat { t, eps }, source, target)
    }

    pub fn dense(values: Array2<f64>, source: Arc<Support>, target: Arc<Support>) -> Result<Self> {
        Self::new(KernelKind::Dense(values), source, target)
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    pub fn source(&self) -> &Arc<Support> {
        &self.source
    }

    pub fn target(&self) -> &Arc<Support> {
        &self.target
    }

    pub fn log_entry(&self, i: usize, j: usize) -> f64 {
        self.kind.log_entry(&self.source, &self.target, i, j)
    }

    pub fn log_at(&self, x: &[f64], y: &[f64]) -> Option<f64> {
        self.kind.log_at(x, y)
    }

    /// Dense matrix of `log q(x_i, y_j)`.
    pub fn log_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.source.len(), self.target.len()), |(i, j)| {
            self.log_entry(i, j)
        })
    }

    /// `q` with the roles of source and target exchanged.
    pub fn transposed(&self) -> KernelSpec {
        let kind = transpose_kind(&self.kind);
        KernelSpec {
            kind,
            source: self.target.clone(),
            target: self.source.clone(),
        }
    }
}

fn transpose_kind(kind: &KernelKind) -> KernelKind {
    match kind {
        KernelKind::Dense(v) => KernelKind::Dense(v.t().to_owned()),
        KernelKind::Tilted {
            base,
            amplitude,
            field: TiltField::SinProduct,
        } => KernelKind::Tilted {
            base: Box::new(transpose_kind(base)),
            amplitude: *amplitude,
            field: TiltField::SinProduct,
        },
        other => other.clone(),
    }
}

/// Kernel values on the supports, with the log matrix carried alongside.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub values: Array2<f64>,
    pub log_values: Array2<f64>,
    /// Set when some entry underflowed and was clamped in `values`.
    pub log_domain: bool,
}

pub fn eval_kernel(k: &KernelSpec) -> KernelMatrix {
    let log_values = k.log_matrix();
    let mut log_domain = false;
    let values = log_values.mapv(|l| {
        if l < LOG_UNDERFLOW {
            log_domain = true;
            f64::MIN_POSITIVE
        } else {
            l.exp()
        }
    });
    KernelMatrix {
        values,
        log_values,
        log_domain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn pts(xs: &[f64]) -> Arc<Support> {
        Arc::new(Support::new(1, xs.to_vec(), vec![1.0; xs.len()]).unwrap())
    }

    #[test]
    fn heat_kernel_at_origin() {
        let s = pts(&[0.0]);
        let k = KernelSpec::gaussian_heat(1.0, 1.0, s.clone(), s).unwrap();
        let m = eval_kernel(&k);
        assert_relative_eq!(m.values[[0, 0]], 0.3989422804014327, epsilon = 1e-12);
    }

    #[test]
    fn heat_kernel_unit_distance() {
        let k = KernelSpec::gaussian_heat(0.5, 2.0, pts(&[0.0]), pts(&[1.0])).unwrap();
        let m = eval_kernel(&k);
        let expected = (2.0 * std::f64::consts::PI).powf(-0.5) * (-0.5f64).exp();
        assert_relative_eq!(m.values[[0, 0]], expected, epsilon = 1e-14);
        assert!((m.values[[0, 0]] - 0.2419707).abs() < 1e-7);
    }

    #[test]
    fn dense_passthrough() {
        let s = pts(&[0.0, 1.0]);
        let v = array![[2.0, 1.0], [1.0, 2.0]];
        let k = KernelSpec::dense(v.clone(), s.clone(), s).unwrap();
        let m = eval_kernel(&k);
        for (a, b) in m.values.iter().zip(v.iter()) {
            assert_relative_eq!(*a, *b, epsilon = 1e-15);
        }
        assert!(!m.log_domain);
    }

    #[test]
    fn rejects_nonpositive_kernels() {
        let s = pts(&[0.0, 1.0]);
        assert!(KernelSpec::dense(array![[1.0, 0.0], [1.0, 1.0]], s.clone(), s.clone()).is_err());
        assert!(KernelSpec::new(KernelKind::Constant(-1.0), s.clone(), s.clone()).is_err());
        assert!(KernelSpec::gaussian_heat(0.0, 1.0, s.clone(), s).is_err());
    }

    #[test]
    fn underflow_sets_log_domain_flag() {
        let k = KernelSpec::gaussian_heat(1.0, 1e-3, pts(&[0.0]), pts(&[3.0])).unwrap();
        let m = eval_kernel(&k);
        assert!(m.log_domain);
        assert_eq!(m.values[[0, 0]], f64::MIN_POSITIVE);
        assert!(m.log_values[[0, 0]] < -4000.0);
    }

    #[test]
    fn heat_kernel_symmetric_and_translation_invariant() {
        let kind = KernelKind::GaussianHeat { t: 0.7, eps: 0.3 };
        let pairs = [([0.1, -0.4], [1.2, 0.5]), ([-2.0, 0.0], [0.3, 0.3])];
        for (x, y) in pairs {
            let a = kind.log_at(&x, &y).unwrap();
            assert_eq!(a, kind.log_at(&y, &x).unwrap());
            let c = [0.25, -0.5];
            let xs = [x[0] + c[0], x[1] + c[1]];
            let ys = [y[0] + c[0], y[1] + c[1]];
            assert_relative_eq!(a, kind.log_at(&xs, &ys).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn tilted_kernel_on_and_off_grid_agree() {
        let s = pts(&[-0.5, 0.5]);
        let kind = KernelKind::Tilted {
            base: Box::new(KernelKind::GaussianHeat { t: 1.0, eps: 0.5 }),
            amplitude: 0.3,
            field: TiltField::SinProduct,
        };
        let k = KernelSpec::new(kind, s.clone(), s).unwrap();
        assert_relative_eq!(
            k.log_entry(0, 1),
            k.log_at(&[-0.5], &[0.5]).unwrap(),
            epsilon = 1e-15
        );
    }
}
