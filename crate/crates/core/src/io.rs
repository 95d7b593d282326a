//! CSV and JSON exchange formats for measures, densities, kernels and solutions.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::measure::{Density, DiscreteMeasure, KernelSpec, Support};
use crate::solver::SchroedingerSolution;
use crate::{Error, Result};

/// Fixed float format: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

struct Table {
    dim: usize,
    points: Vec<f64>,
    values: Vec<f64>,
    volumes: Option<Vec<f64>>,
}

fn read_table<R: Read>(reader: R, value_names: &[&str]) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut dim = 0;
    while headers.get(dim).is_some_and(|h| h == format!("x_{}", dim + 1)) {
        dim += 1;
    }
    if dim == 0 {
        return Err(Error::Csv("line 1: header must start with x_1".into()));
    }
    let value_col = headers
        .iter()
        .position(|h| value_names.contains(&h))
        .ok_or_else(|| Error::Csv(format!("line 1: header needs one of {value_names:?}")))?;
    let volume_col = headers.iter().position(|h| h == "volume");
    let (mut points, mut values, mut volumes) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |k: usize| -> Result<f64> {
            let s = rec
                .get(k)
                .ok_or_else(|| Error::Csv(format!("line {line}: missing column {}", k + 1)))?;
            s.parse::<f64>()
                .map_err(|_| Error::Csv(format!("line {line}: cannot parse {s:?} as a number")))
        };
        for k in 0..dim {
            points.push(field(k)?);
        }
        values.push(field(value_col)?);
        if let Some(c) = volume_col {
            volumes.push(field(c)?);
        }
    }
    if values.is_empty() {
        return Err(Error::Csv("no data rows".into()));
    }
    Ok(Table {
        dim,
        points,
        values,
        volumes: volume_col.map(|_| volumes),
    })
}

/// Builds the support; without a `volume` column cells get the lattice
/// spacing to the power `d`, or unit volume when no lattice is recognised.
fn table_support(t: &Table) -> Result<Arc<Support>> {
    let n = t.values.len();
    let support = match &t.volumes {
        Some(v) => Support::new(t.dim, t.points.clone(), v.clone())?.detect_lattice(),
        None => {
            let probe = Support::new(t.dim, t.points.clone(), vec![1.0; n])?.detect_lattice();
            match probe.lattice() {
                Some(l) if n > 1 => {
                    let vol = l.spacing.powi(t.dim as i32);
                    Support::new(t.dim, t.points.clone(), vec![vol; n])?.detect_lattice()
                }
                _ => probe,
            }
        }
    };
    Ok(Arc::new(support))
}

/// Weights already summing to one are kept as written; others are normalized.
pub fn read_measure<R: Read>(reader: R) -> Result<DiscreteMeasure> {
    let t = read_table(reader, &["weight"])?;
    let support = table_support(&t)?;
    DiscreteMeasure::probability(support.clone(), t.values.clone())
        .or_else(|_| DiscreteMeasure::normalized(support, t.values))
}

pub fn read_density<R: Read>(reader: R) -> Result<Density> {
    let t = read_table(reader, &["density"])?;
    let support = table_support(&t)?;
    Density::probability(support.clone(), t.values.clone()).or_else(|_| Density::normalized(support, t.values))
}

pub fn read_measure_file(path: &Path) -> Result<DiscreteMeasure> {
    read_measure(open(path)?)
}

pub fn read_density_file(path: &Path) -> Result<Density> {
    read_density(open(path)?)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn write_table<W: Write>(w: W, support: &Support, name: &str, values: &[f64]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (1..=support.dim()).map(|k| format!("x_{k}")).collect();
    header.push(name.into());
    header.push("volume".into());
    wr.write_record(&header)?;
    for (i, x) in support.points().enumerate() {
        let mut row: Vec<String> = x.iter().map(|v| fmt_f64(*v)).collect();
        row.push(fmt_f64(values[i]));
        row.push(fmt_f64(support.cell_volumes()[i]));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_measure<W: Write>(w: W, m: &DiscreteMeasure) -> Result<()> {
    write_table(w, m.support(), "weight", m.weights())
}

pub fn write_density<W: Write>(w: W, p: &Density) -> Result<()> {
    write_table(w, p.support(), "density", p.values())
}

/// A kernel matrix without header: one row per source point.
pub fn read_kernel<R: Read>(reader: R, source: Arc<Support>, target: Arc<Support>) -> Result<KernelSpec> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != target.len() {
            return Err(Error::Csv(format!(
                "line {line}: expected {} columns, found {}",
                target.len(),
                rec.len()
            )));
        }
        for s in rec.iter() {
            values.push(
                s.parse::<f64>()
                    .map_err(|_| Error::Csv(format!("line {line}: cannot parse {s:?} as a number")))?,
            );
        }
        rows += 1;
    }
    if rows != source.len() {
        return Err(Error::Csv(format!("expected {} kernel rows, found {rows}", source.len())));
    }
    let m = Array2::from_shape_vec((rows, target.len()), values).expect("shape checked");
    KernelSpec::dense(m, source, target)
}

pub fn read_kernel_file(path: &Path, source: Arc<Support>, target: Arc<Support>) -> Result<KernelSpec> {
    read_kernel(open(path)?, source, target)
}

/// Plan masses as `(i, j, mass)` rows.
pub fn write_plan<W: Write>(w: W, sol: &SchroedingerSolution) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["i", "j", "mass"])?;
    let plan = sol.plan();
    for ((i, j), m) in plan.mass.indexed_iter() {
        wr.write_record([i.to_string(), j.to_string(), fmt_f64(*m)])?;
    }
    wr.flush()?;
    Ok(())
}

/// Rows of equal-length numeric columns with a header.
pub fn write_columns<W: Write>(w: W, names: &[&str], columns: &[&[f64]]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(names)?;
    let n = columns.first().map_or(0, |c| c.len());
    for i in 0..n {
        wr.write_record(columns.iter().map(|c| fmt_f64(c[i])))?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolutionRecord {
    /// `None` when a factor overflows; the log factors are always present.
    pub nu1: Option<Vec<f64>>,
    pub nu2: Option<Vec<f64>>,
    pub log_nu1: Vec<f64>,
    pub log_nu2: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub m_index: usize,
    #[serde(rename = "scale_C")]
    pub scale_c: f64,
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

impl From<&SchroedingerSolution> for SolutionRecord {
    fn from(sol: &SchroedingerSolution) -> Self {
        Self {
            nu1: sol.nu1().ok().map(|m| m.weights().to_vec()),
            nu2: sol.nu2().ok().map(|m| m.weights().to_vec()),
            log_nu1: sol.log_nu1.clone(),
            log_nu2: sol.log_nu2.clone(),
            u1: sol.u1.clone(),
            u2: sol.u2.clone(),
            m_index: sol.m_index,
            scale_c: sol.scale_c,
            iterations: sol.iterations,
            final_residual: sol.final_residual,
            converged: sol.converged,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::make_grid;

    #[test]
    fn measure_round_trip_is_exact() {
        let g = Arc::new(make_grid(2, 1.0, 5).unwrap());
        let w: Vec<f64> = (0..g.len()).map(|i| 1.0 + (i as f64).sin().abs()).collect();
        let m = DiscreteMeasure::normalized(g, w).unwrap();
        let mut buf = Vec::new();
        write_measure(&mut buf, &m).unwrap();
        let back = read_measure(buf.as_slice()).unwrap();
        assert_eq!(back.weights(), m.weights());
        assert!(back.support().same_points(m.support()));
        assert_eq!(back.support().cell_volumes(), m.support().cell_volumes());
        assert!(back.support().lattice().is_some());
        let mut again = Vec::new();
        write_measure(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn lattice_volumes_are_inferred() {
        let csv = "x_1,weight\n0.0,1\n0.5,1\n1.0,2\n";
        let m = read_measure(csv.as_bytes()).unwrap();
        assert_eq!(m.support().cell_volumes(), &[0.5, 0.5, 0.5]);
        assert_eq!(m.weights(), &[0.25, 0.25, 0.5]);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let csv = "x_1,weight\n0.0,1\n0.5,abc\n";
        let err = read_measure(csv.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = read_measure("y,weight\n1,1\n".as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        let err = read_measure("x_1,weight\n1\n".as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn kernel_shape_is_checked() {
        let g = Arc::new(Support::new(1, vec![0.0, 1.0], vec![1.0, 1.0]).unwrap());
        let k = read_kernel("2,1\n1,2\n".as_bytes(), g.clone(), g.clone()).unwrap();
        assert_eq!(k.log_entry(0, 1), 0.0);
        assert!(read_kernel("2,1\n".as_bytes(), g.clone(), g.clone()).is_err());
        let err = read_kernel("2,1\n1\n".as_bytes(), g.clone(), g).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
