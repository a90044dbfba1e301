//! File formats: path and matrix CSV with 17 significant digits, JSON
//! documents, and the Wiener–Hopf cache bundle.

use std::fs;
use std::path::Path;

use gvpj::prediction::PredictionLaw;
use gvpj::simulation::MixedPath;
use gvpj::wiener_hopf::WhSolution;
use gvpj::{SamplePath, TimeGrid};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const PATH_HEADER: [&str; 4] = ["time", "G", "J", "X"];

/// Shortest form is not used: every value carries 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn create_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_rows(path: &Path, header: Option<&[&str]>, rows: impl Iterator<Item = Vec<f64>>) -> CliResult<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    if let Some(h) = header {
        w.write_record(h).map_err(|e| CliError::io(path, e))?;
    }
    for row in rows {
        w.write_record(row.iter().map(|&x| fmt17(x))).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn read_rows(path: &Path, has_header: bool) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    let header = if has_header {
        r.headers()
            .map_err(|e| CliError::io(path, e))?
            .iter()
            .map(str::to_owned)
            .collect()
    } else {
        Vec::new()
    };
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| {
                    CliError::Validation(format!("{}: row {}: {e}: {s:?}", path.display(), i + 1))
                })
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn write_path_csv(path: &Path, p: &MixedPath) -> CliResult<()> {
    let times = p.grid().times();
    let rows = (0..times.len()).map(|i| vec![times[i], p.g.values()[i], p.j.values()[i], p.x.values()[i]]);
    write_rows(path, Some(&PATH_HEADER), rows)
}

/// Decomposed path as read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFile {
    pub g: SamplePath,
    pub j: SamplePath,
    pub x: SamplePath,
}

pub fn read_path_csv(path: &Path) -> CliResult<PathFile> {
    let (header, rows) = read_rows(path, true)?;
    if header != PATH_HEADER {
        return Err(CliError::Validation(format!(
            "{}: header must be {}, got {}",
            path.display(),
            PATH_HEADER.join(","),
            header.join(",")
        )));
    }
    let bad = |msg: String| CliError::Validation(format!("{}: {msg}", path.display()));
    let mut cols: [Vec<f64>; 4] = Default::default();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != 4 {
            return Err(bad(format!("row {} has {} fields", i + 1, row.len())));
        }
        let scale = 1.0 + row[1].abs() + row[2].abs();
        if (row[3] - row[1] - row[2]).abs() > 1e-12 * scale {
            return Err(bad(format!("row {}: X differs from G + J", i + 1)));
        }
        for (c, &v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }
    let [times, g, j, x] = cols;
    let grid = TimeGrid::new(times).map_err(|e| bad(e.to_string()))?;
    Ok(PathFile {
        g: SamplePath::new(grid.clone(), g)?,
        j: SamplePath::new(grid.clone(), j)?,
        x: SamplePath::new(grid, x)?,
    })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

/// Prediction summary with the field names of the JSON schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub model: String,
    pub u: f64,
    pub t: f64,
    pub m_hat: f64,
    pub r_hat_tt: f64,
    pub gaussian_mean: f64,
    pub gaussian_var: f64,
    pub lambda_term_mean: f64,
    pub lambda_term_var: f64,
    #[serde(rename = "N_max")]
    pub n_max: usize,
    pub tail_mass: f64,
    pub mass_defect: f64,
    pub value_grid: ValueGridSummary,
    /// `[location, mass]` pairs; also folded into the density CSV.
    pub atoms: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueGridSummary {
    pub lo: f64,
    pub h: f64,
    pub cells: usize,
}

impl PredictionSummary {
    pub fn new(model: String, law: &PredictionLaw) -> Self {
        let g = law.density.grid;
        Self {
            model,
            u: law.u,
            t: law.t,
            m_hat: law.m_hat,
            r_hat_tt: law.r_hat_tt,
            gaussian_mean: law.gaussian_mean,
            gaussian_var: law.gaussian_var,
            lambda_term_mean: law.lambda_term_mean,
            lambda_term_var: law.lambda_term_var,
            n_max: law.n_max,
            tail_mass: law.tail_mass,
            mass_defect: law.mass_defect,
            value_grid: ValueGridSummary {
                lo: g.lo,
                h: g.h,
                cells: g.len,
            },
            atoms: law.density.atoms.iter().map(|&(x, m)| [x, m]).collect(),
        }
    }
}

/// Columns `x,pdf,mass,cdf` at cell centers; atoms are folded into cells.
pub fn write_density_csv(path: &Path, law: &PredictionLaw) -> CliResult<()> {
    let d = &law.density;
    let masses = d.binned();
    let cdf = d.cell_cdf();
    let rows = (0..d.grid.len).map(|k| vec![d.grid.center(k), masses[k] / d.grid.h, masses[k], cdf[k]]);
    write_rows(path, Some(&["x", "pdf", "mass", "cdf"]), rows)
}

fn write_matrix(path: &Path, m: &DMatrix<f64>) -> CliResult<()> {
    write_rows(path, None, (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()))
}

fn read_matrix(path: &Path, n: usize) -> CliResult<DMatrix<f64>> {
    let (_, rows) = read_rows(path, false)?;
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Validation(format!("{}: expected a {n}x{n} matrix", path.display())));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Parameters and diagnostics of a cached Wiener–Hopf solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhSummary {
    pub hurst: f64,
    pub n: usize,
    pub horizon: f64,
    pub residual_l: f64,
    pub residual_q: f64,
    /// Relative Gram error at interior pairs; omitted for large grids.
    pub covariance_error: Option<f64>,
}

const WH_SUMMARY: &str = "summary.json";

pub fn write_wh_cache(dir: &Path, sol: &WhSolution, summary: &WhSummary) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_matrix(&dir.join("l.csv"), &sol.l)?;
    write_matrix(&dir.join("q.csv"), &sol.q)?;
    write_matrix(&dir.join("ktilde.csv"), &sol.ktilde)?;
    let times = sol.grid.times();
    write_rows(
        &dir.join("vectors.csv"),
        Some(&["time", "phi", "dv"]),
        (0..times.len()).map(|i| vec![times[i], sol.phi[i], sol.dv[i]]),
    )?;
    // Written last so that a partial bundle is never taken for a cache hit.
    write_json(&dir.join(WH_SUMMARY), summary)
}

/// Loads the cache in `dir` when it was solved for `(hurst, grid)`.
pub fn load_wh_cache(dir: &Path, hurst: f64, grid: &TimeGrid) -> CliResult<Option<(WhSolution, WhSummary)>> {
    let summary_path = dir.join(WH_SUMMARY);
    if !summary_path.exists() {
        return Ok(None);
    }
    let summary: WhSummary = read_json(&summary_path)?;
    if summary.hurst != hurst || summary.n != grid.len() || summary.horizon != grid.horizon() {
        return Ok(None);
    }
    let n = grid.len();
    let (_, vectors) = read_rows(&dir.join("vectors.csv"), true)?;
    if vectors.len() != n || vectors.iter().any(|r| r.len() != 3) {
        return Err(CliError::Validation(format!("{}: malformed vectors.csv", dir.display())));
    }
    let times: Vec<f64> = vectors.iter().map(|r| r[0]).collect();
    if !grid.same_nodes(&TimeGrid::new(times)?) {
        return Err(CliError::Validation(format!("{}: cached grid differs from the configured grid", dir.display())));
    }
    let sol = WhSolution {
        grid: grid.clone(),
        h: hurst,
        l: read_matrix(&dir.join("l.csv"), n)?,
        phi: vectors.iter().map(|r| r[1]).collect(),
        q: read_matrix(&dir.join("q.csv"), n)?,
        ktilde: read_matrix(&dir.join("ktilde.csv"), n)?,
        dv: vectors.iter().map(|r| r[2]).collect(),
        residual_l: summary.residual_l,
        residual_q: summary.residual_q,
    };
    Ok(Some((sol, summary)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0] {
            let s = fmt17(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
            let digits = s.split('e').next().unwrap().chars().filter(char::is_ascii_digit).count();
            assert_eq!(digits, 17);
        }
    }

    #[test]
    fn path_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let g = SamplePath::new(grid.clone(), vec![0.1, -0.2, 0.3, 1.0 / 3.0]).unwrap();
        let jumps = gvpj::simulation::JumpRecord {
            times: vec![0.6],
            sizes: vec![0.7],
        };
        let p = MixedPath::from_parts(g, jumps, None).unwrap();
        let file = dir.path().join("p.csv");
        write_path_csv(&file, &p).unwrap();
        let back = read_path_csv(&file).unwrap();
        assert_eq!(back.g, p.g);
        assert_eq!(back.j, p.j);
        assert_eq!(back.x, p.x);
        let text = fs::read_to_string(&file).unwrap();
        assert!(text.starts_with("time,G,J,X\n"));
    }

    #[test]
    fn inconsistent_paths_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("p.csv");
        fs::write(&file, "time,G,J,X\n0.5,1,0,2\n1,1,0,1\n").unwrap();
        assert!(matches!(read_path_csv(&file), Err(CliError::Validation(_))));
        fs::write(&file, "t,G,J,X\n0.5,1,0,1\n").unwrap();
        assert!(matches!(read_path_csv(&file), Err(CliError::Validation(_))));
        fs::write(&file, "time,G,J,X\n0.5,1,0,1\n0.5,1,0,1\n").unwrap();
        assert!(matches!(read_path_csv(&file), Err(CliError::Validation(_))));
    }
}
