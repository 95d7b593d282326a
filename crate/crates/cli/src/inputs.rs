//! Measures, densities and kernels named in a configuration: CSV files or
//! analytic laws evaluated on the configured grid.

use std::path::PathBuf;
use std::sync::Arc;

use sfe_core::measure::{make_grid, Density, DiscreteMeasure, KernelKind, KernelSpec, Support};

use crate::config::RunConfig;
use crate::CliError;

/// Files read during a run, keyed by configuration key.
#[derive(Debug, Default, Clone)]
pub struct InputFiles {
    pub files: Vec<(String, String, PathBuf)>,
}

impl InputFiles {
    fn record(&mut self, key: &str, raw: &str, path: PathBuf) {
        self.files.push((key.to_string(), raw.to_string(), path));
    }
}

pub fn grid(cfg: &RunConfig) -> Result<Option<Arc<Support>>, CliError> {
    let Some(spec) = cfg.get("grid") else {
        return Ok(None);
    };
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let bad = || CliError::Invalid(format!("grid must be `d,r,n`, found {spec:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let d: usize = parts[0].parse().map_err(|_| bad())?;
    let r: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    Ok(Some(Arc::new(make_grid(d, r, n)?)))
}

/// `name(a, b, ...)` or a bare `name`.
fn parse_law(value: &str) -> Option<(&str, Vec<f64>)> {
    let value = value.trim();
    let (name, args) = match value.split_once('(') {
        Some((name, rest)) => (name.trim(), rest.strip_suffix(')')?),
        None => (value, ""),
    };
    if !matches!(name, "normal" | "uniform" | "bimodal") {
        return None;
    }
    let args = if args.trim().is_empty() {
        Vec::new()
    } else {
        args.split(',').map(|a| a.trim().parse().ok()).collect::<Option<Vec<f64>>>()?
    };
    Some((name, args))
}

/// Unnormalized law on the grid:
/// `normal(var)` / `normal(mean, var)` isotropic with every coordinate of the
/// mean equal to `mean`; `bimodal(a, var)` the even mixture of normals at
/// `±a` along the first axis; `uniform`.
fn law_density(name: &str, args: &[f64], g: Arc<Support>) -> Result<Density, CliError> {
    let bad = |msg: &str| CliError::Invalid(format!("{name}: {msg}"));
    let sq = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    let d = match (name, args) {
        ("uniform", []) => Density::from_fn(g, |_| 1.0)?,
        ("normal", &[var]) | ("normal", &[_, var]) if var <= 0.0 => return Err(bad("variance must be positive")),
        ("normal", &[var]) => Density::from_fn(g, |x| (-sq(x, 0.0) / (2.0 * var)).exp())?,
        ("normal", &[m, var]) => Density::from_fn(g, |x| (-sq(x, m) / (2.0 * var)).exp())?,
        ("bimodal", &[_, var]) if var <= 0.0 => return Err(bad("variance must be positive")),
        ("bimodal", &[a, var]) => Density::from_fn(g, |x| {
            let rest: f64 = x[1..].iter().map(|v| v * v).sum();
            ((-(x[0] - a).powi(2) - rest) / (2.0 * var)).exp() + ((-(x[0] + a).powi(2) - rest) / (2.0 * var)).exp()
        })?,
        _ => return Err(bad("wrong number of arguments")),
    };
    Ok(d)
}

pub fn density(
    cfg: &RunConfig,
    key: &str,
    grid: Option<&Arc<Support>>,
    files: &mut InputFiles,
) -> Result<Density, CliError> {
    let value = cfg.require(key)?;
    if let Some((name, args)) = parse_law(value) {
        let g = grid.ok_or_else(|| CliError::Invalid(format!("{key} = {value} needs a `grid`")))?;
        return law_density(name, &args, g.clone());
    }
    let path = cfg.resolve(value);
    let d = sfe_core::io::read_density_file(&path).map_err(|e| CliError::Invalid(format!("{key}: {e}")))?;
    files.record(key, value, path);
    Ok(d)
}

pub fn measure(
    cfg: &RunConfig,
    key: &str,
    grid: Option<&Arc<Support>>,
    files: &mut InputFiles,
) -> Result<DiscreteMeasure, CliError> {
    let value = cfg.require(key)?;
    if let Some((name, args)) = parse_law(value) {
        let g = grid.ok_or_else(|| CliError::Invalid(format!("{key} = {value} needs a `grid`")))?;
        return Ok(law_density(name, &args, g.clone())?.to_measure());
    }
    let path = cfg.resolve(value);
    let m = sfe_core::io::read_measure_file(&path).map_err(|e| CliError::Invalid(format!("{key}: {e}")))?;
    files.record(key, value, path);
    Ok(m)
}

/// `heat` (with `eps`, `t`), `constant(c)`, or a CSV matrix path.
pub fn kernel(
    cfg: &RunConfig,
    source: Arc<Support>,
    target: Arc<Support>,
    files: &mut InputFiles,
) -> Result<KernelSpec, CliError> {
    let value = cfg.require("kernel")?;
    if value == "heat" {
        let eps: f64 = cfg.parse_required("eps")?;
        let t: f64 = cfg.parse_or("t", 1.0)?;
        return Ok(KernelSpec::gaussian_heat(t, eps, source, target)?);
    }
    if let Some(c) = value.strip_prefix("constant(").and_then(|s| s.strip_suffix(')')) {
        let c: f64 = c
            .trim()
            .parse()
            .map_err(|_| CliError::Invalid(format!("cannot parse kernel = {value:?}")))?;
        return Ok(KernelSpec::new(KernelKind::Constant(c), source, target)?);
    }
    let path = cfg.resolve(value);
    let k = sfe_core::io::read_kernel_file(&path, source, target)
        .map_err(|e| CliError::Invalid(format!("kernel: {e}")))?;
    files.record("kernel", value, path);
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn law_syntax() {
        assert_eq!(parse_law("normal(0, 1)"), Some(("normal", vec![0.0, 1.0])));
        assert_eq!(parse_law("uniform"), Some(("uniform", vec![])));
        assert_eq!(parse_law("data/p.csv"), None);
        assert_eq!(parse_law("normal(a)"), None);
    }

    #[test]
    fn normal_law_is_centred() {
        let g = Arc::new(make_grid(1, 4.0, 80).unwrap());
        let d = law_density("normal", &[0.5, 1.0], g).unwrap();
        let b = d.to_measure().barycenter()[0];
        assert!((b - 0.5).abs() < 1e-3, "{b}");
        assert!(law_density("normal", &[0.0], Arc::new(make_grid(1, 1.0, 4).unwrap())).is_err());
    }
}
