use std::path::{Path, PathBuf};
use std::sync::Arc;

use gvpj::model::{CcmFbmModel, CellRule, FbmModel, MfbmModel, VolterraModel};
use gvpj::operators::{build_operator, DiscreteOperator};
use gvpj::prediction::{mixed_conditional_density_with_width, Observation};
use gvpj::simulation::simulate_mixed;
use gvpj::verification::{run_suite, SuiteConfig, SuiteReport};
use gvpj::wiener_hopf::WhSolution;
use gvpj::TimeGrid;
use serde::Serialize;

use crate::config::{ModelConfig, RunConfig};
use crate::error::{CliError, CliResult};
use crate::formats::{
    load_wh_cache, read_path_csv, write_density_csv, write_json, write_path_csv, write_wh_cache,
    PredictionSummary, WhSummary,
};

pub const PATH_FILE: &str = "path.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PREDICTION_FILE: &str = "prediction.json";
pub const DENSITY_FILE: &str = "density.csv";
pub const REPORT_FILE: &str = "report.json";

/// Largest grid for which `solve-wh` also reports the Gram error.
const COVARIANCE_CHECK_MAX_N: usize = 512;

#[derive(Debug, Serialize)]
struct Versions {
    gvpj: &'static str,
}

const VERSIONS: Versions = Versions {
    gvpj: env!("CARGO_PKG_VERSION"),
};

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'static str,
    model: String,
    seed: u64,
    jump_count: usize,
    outputs: Vec<&'static str>,
    versions: Versions,
    config: &'a RunConfig,
}

/// Whether a Wiener–Hopf solution came from disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WhSource {
    Cache,
    Solved,
}

#[derive(Debug, Serialize)]
pub struct WhReport {
    pub source: WhSource,
    pub cache: PathBuf,
    #[serde(flatten)]
    pub summary: WhSummary,
}

fn summarize(sol: &WhSolution) -> CliResult<WhSummary> {
    let n = sol.grid.len();
    let covariance_error = if n <= COVARIANCE_CHECK_MAX_N {
        Some(sol.covariance_error(n / 8)?)
    } else {
        None
    };
    Ok(WhSummary {
        hurst: sol.h,
        n,
        horizon: sol.grid.horizon(),
        residual_l: sol.residual_l,
        residual_q: sol.residual_q,
        covariance_error,
    })
}

/// Cached solution when present for `(hurst, grid)`, else a fresh solve that
/// is written to the cache.
fn wiener_hopf(cfg: &RunConfig, hurst: f64, grid: &TimeGrid) -> CliResult<(WhSolution, WhReport)> {
    let dir = cfg.output.wh_cache_dir();
    if let Some((sol, summary)) = load_wh_cache(&dir, hurst, grid)? {
        let report = WhReport {
            source: WhSource::Cache,
            cache: dir,
            summary,
        };
        return Ok((sol, report));
    }
    let sol = WhSolution::solve(grid, hurst)?;
    let summary = summarize(&sol)?;
    write_wh_cache(&dir, &sol, &summary)?;
    let report = WhReport {
        source: WhSource::Solved,
        cache: dir,
        summary,
    };
    Ok((sol, report))
}

fn model_for(cfg: &RunConfig, grid: &TimeGrid) -> CliResult<Arc<dyn VolterraModel>> {
    Ok(match cfg.model {
        ModelConfig::Fbm { hurst } => Arc::new(FbmModel::new(hurst)?),
        ModelConfig::Ccmfbm { a, b, hurst } => Arc::new(CcmFbmModel::new(a, b, hurst)?),
        ModelConfig::Mfbm { hurst, .. } => Arc::new(MfbmModel::new(wiener_hopf(cfg, hurst, grid)?.0)),
    })
}

fn operator_for(cfg: &RunConfig) -> CliResult<DiscreteOperator> {
    let grid = cfg.time_grid()?;
    let model = model_for(cfg, &grid)?;
    Ok(build_operator(model, &grid, CellRule::Energy)?)
}

/// Writes `path.csv` and `manifest.json` into the output directory.
pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<PathBuf> {
    let op = operator_for(cfg)?;
    let path = simulate_mixed(&op, &cfg.jumps, cfg.seeds.simulate)?;
    let dir = &cfg.output.dir;
    write_path_csv(&dir.join(PATH_FILE), &path)?;
    let manifest = Manifest {
        command: "simulate",
        model: op.model().map(|m| m.describe()).unwrap_or_default(),
        seed: cfg.seeds.simulate,
        jump_count: path.jumps.len(),
        outputs: vec![PATH_FILE],
        versions: VERSIONS,
        config: cfg,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(dir.join(PATH_FILE))
}

/// Writes `prediction.json` and `density.csv` for the path in `path_file`.
pub fn cmd_predict(cfg: &RunConfig, path_file: &Path) -> CliResult<PredictionSummary> {
    let data = read_path_csv(path_file)?;
    let grid = cfg.time_grid()?;
    if !data.g.grid().same_nodes(&grid) {
        return Err(CliError::Validation(format!(
            "{}: path grid ({} points up to {}) does not match grid (n={}, horizon={})",
            path_file.display(),
            data.g.len(),
            data.g.grid().horizon(),
            cfg.grid.n,
            cfg.grid.horizon
        )));
    }
    let op = operator_for(cfg)?;
    let obs = Observation {
        x: data.x,
        g: Some(data.g),
        j: Some(data.j),
    };
    let p = &cfg.prediction;
    let law = mixed_conditional_density_with_width(&op, &cfg.jumps, &obs, p.u, p.t, p.width, p.tail_tol)?;
    let summary = PredictionSummary::new(op.model().map(|m| m.describe()).unwrap_or_default(), &law);
    let dir = &cfg.output.dir;
    write_json(&dir.join(PREDICTION_FILE), &summary)?;
    write_density_csv(&dir.join(DENSITY_FILE), &law)?;
    Ok(summary)
}

/// Runs the verification suite and writes `report.json`; failing checks turn
/// into [`CliError::ChecksFailed`] after the report is written.
pub fn cmd_verify(cfg: &RunConfig, threads: usize) -> CliResult<SuiteReport> {
    let report = run_suite(&SuiteConfig {
        seed: cfg.seeds.verify,
        tolerance_scale: cfg.verify.tolerance_scale,
        mc_paths: cfg.verify.mc_paths,
        threads,
    });
    write_json(&cfg.output.dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Solves or loads the Wiener–Hopf system of an mfBm config.
pub fn cmd_solve_wh(cfg: &RunConfig) -> CliResult<WhReport> {
    let ModelConfig::Mfbm { hurst, .. } = cfg.model else {
        return Err(CliError::Validation("model.kind: solve-wh needs kind = \"mfbm\"".into()));
    };
    let grid = cfg.time_grid()?;
    Ok(wiener_hopf(cfg, hurst, &grid)?.1)
}
