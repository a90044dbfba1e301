//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use gvpj::simulation::JumpSpec;
use gvpj::TimeGrid;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Largest accepted grid size.
pub const MAX_GRID_N: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default = "JumpSpec::none")]
    pub jumps: JumpSpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub prediction: PredictionConfig,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Fbm {
        hurst: f64,
    },
    Ccmfbm {
        a: f64,
        b: f64,
        hurst: f64,
    },
    Mfbm {
        hurst: f64,
        /// Wiener–Hopf grid size; must equal `grid.n` when given.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wh_grid_n: Option<usize>,
    },
}

impl ModelConfig {
    fn set_hurst(&mut self, h: f64) {
        match self {
            Self::Fbm { hurst } | Self::Ccmfbm { hurst, .. } | Self::Mfbm { hurst, .. } => *hurst = h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: 1.0, n: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    pub u: f64,
    pub t: f64,
    /// Half-width of the value grid in standard deviations.
    pub width: f64,
    pub tail_tol: f64,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            u: 0.5,
            t: 0.75,
            width: 8.0,
            tail_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub simulate: u64,
    pub verify: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            simulate: 20261018,
            verify: 20261018,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub mc_paths: usize,
    pub tolerance_scale: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            mc_paths: 20_000,
            tolerance_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Wiener–Hopf cache directory; `<dir>/wh` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wh_cache: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            wh_cache: None,
        }
    }
}

impl OutputConfig {
    pub fn wh_cache_dir(&self) -> PathBuf {
        self.wh_cache.clone().unwrap_or_else(|| self.dir.join("wh"))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::Fbm { hurst: 0.75 },
            jumps: JumpSpec::none(),
            grid: GridConfig::default(),
            prediction: PredictionConfig::default(),
            seeds: SeedConfig::default(),
            verify: VerifyConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Flag values that replace config entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub hurst: Option<f64>,
    pub n: Option<usize>,
    pub horizon: Option<f64>,
    pub lambda: Option<f64>,
    pub u: Option<f64>,
    pub t: Option<f64>,
    pub width: Option<f64>,
    pub tail_tol: Option<f64>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub wh_cache: Option<PathBuf>,
    pub mc_paths: Option<usize>,
    pub tolerance_scale: Option<f64>,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{field}: {msg}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Validation(msg) => CliError::Validation(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(h) = o.hurst {
            self.model.set_hurst(h);
        }
        if let Some(n) = o.n {
            self.grid.n = n;
        }
        if let Some(x) = o.horizon {
            self.grid.horizon = x;
        }
        if let Some(x) = o.lambda {
            self.jumps.lambda = x;
        }
        if let Some(x) = o.u {
            self.prediction.u = x;
        }
        if let Some(x) = o.t {
            self.prediction.t = x;
        }
        if let Some(x) = o.width {
            self.prediction.width = x;
        }
        if let Some(x) = o.tail_tol {
            self.prediction.tail_tol = x;
        }
        if let Some(s) = o.seed {
            self.seeds.simulate = s;
            self.seeds.verify = s;
        }
        if let Some(d) = &o.out_dir {
            self.output.dir = d.clone();
        }
        if let Some(d) = &o.wh_cache {
            self.output.wh_cache = Some(d.clone());
        }
        if let Some(x) = o.mc_paths {
            self.verify.mc_paths = x;
        }
        if let Some(x) = o.tolerance_scale {
            self.verify.tolerance_scale = x;
        }
    }

    /// Re-checks every precondition the commands rely on.
    pub fn validate(&self) -> CliResult<()> {
        match self.model {
            ModelConfig::Fbm { hurst } => {
                if !(hurst > 0.0 && hurst < 1.0) {
                    return Err(invalid("model.hurst", format!("must lie in (0, 1), got {hurst}")));
                }
            }
            ModelConfig::Ccmfbm { a, b, hurst } => {
                if !(hurst > 0.5 && hurst < 1.0) {
                    return Err(invalid("model.hurst", format!("ccmfbm needs 1/2 < H < 1, got {hurst}")));
                }
                if !(a.is_finite() && a != 0.0) {
                    return Err(invalid("model.a", format!("must be finite and nonzero, got {a}")));
                }
                if !b.is_finite() {
                    return Err(invalid("model.b", format!("must be finite, got {b}")));
                }
            }
            ModelConfig::Mfbm { hurst, wh_grid_n } => {
                if !(hurst > 0.5 && hurst < 1.0) {
                    return Err(invalid("model.hurst", format!("mfbm needs 1/2 < H < 1, got {hurst}")));
                }
                if let Some(m) = wh_grid_n {
                    if m != self.grid.n {
                        return Err(invalid(
                            "model.wh_grid_n",
                            format!("must equal grid.n ({}), got {m}", self.grid.n),
                        ));
                    }
                }
            }
        }
        if !(self.jumps.lambda >= 0.0 && self.jumps.lambda.is_finite()) {
            return Err(invalid("jumps.lambda", format!("must be finite and >= 0, got {}", self.jumps.lambda)));
        }
        self.jumps
            .dist
            .validate()
            .map_err(|e| invalid("jumps.dist", e))?;
        let g = &self.grid;
        if !(g.horizon > 0.0 && g.horizon.is_finite()) {
            return Err(invalid("grid.horizon", format!("must be positive, got {}", g.horizon)));
        }
        if !(1..=MAX_GRID_N).contains(&g.n) {
            return Err(invalid("grid.n", format!("must lie in 1..={MAX_GRID_N}, got {}", g.n)));
        }
        let p = &self.prediction;
        if !(p.u > 0.0 && p.u <= p.t && p.t <= g.horizon) {
            return Err(invalid(
                "prediction",
                format!("need 0 < u <= t <= horizon, got u={}, t={}, horizon={}", p.u, p.t, g.horizon),
            ));
        }
        let grid = self.time_grid()?;
        for (field, x) in [("prediction.u", p.u), ("prediction.t", p.t)] {
            if grid.index_of(x).is_err() {
                return Err(invalid(field, format!("{x} is not a node of the {}-point grid", g.n)));
            }
        }
        if !(p.width > 0.0 && p.width.is_finite()) {
            return Err(invalid("prediction.width", format!("must be positive, got {}", p.width)));
        }
        if !(p.tail_tol > 0.0 && p.tail_tol < 1.0) {
            return Err(invalid("prediction.tail_tol", format!("must lie in (0, 1), got {}", p.tail_tol)));
        }
        if self.verify.mc_paths < 100 {
            return Err(invalid("verify.mc_paths", format!("must be at least 100, got {}", self.verify.mc_paths)));
        }
        let s = self.verify.tolerance_scale;
        if !(s >= 0.0 && s.is_finite()) {
            return Err(invalid("verify.tolerance_scale", format!("must be finite and >= 0, got {s}")));
        }
        Ok(())
    }

    pub fn time_grid(&self) -> CliResult<TimeGrid> {
        TimeGrid::uniform(self.grid.horizon, self.grid.n).map_err(|e| invalid("grid", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
[model]
kind = "ccmfbm"
a = 1.0
b = 0.5
hurst = 0.75

[jumps]
lambda = 5.0
[jumps.dist]
kind = "two_point"
x1 = -0.2
p = 0.4
x2 = 0.3

[grid]
horizon = 2.0
n = 64

[prediction]
u = 1.0
t = 1.5
"#;

    #[test]
    fn parses_every_section() {
        let cfg = RunConfig::from_toml(FULL).unwrap();
        assert_eq!(cfg.model, ModelConfig::Ccmfbm { a: 1.0, b: 0.5, hurst: 0.75 });
        assert_eq!(cfg.jumps.lambda, 5.0);
        assert_eq!(cfg.grid, GridConfig { horizon: 2.0, n: 64 });
        assert_eq!(cfg.prediction.tail_tol, 1e-8);
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flags_win() {
        let mut cfg = RunConfig::from_toml(FULL).unwrap();
        cfg.apply(&Overrides {
            hurst: Some(0.9),
            n: Some(128),
            seed: Some(7),
            ..Overrides::default()
        });
        assert!(matches!(cfg.model, ModelConfig::Ccmfbm { hurst, .. } if hurst == 0.9));
        assert_eq!(cfg.grid.n, 128);
        assert_eq!(cfg.seeds.simulate, 7);
    }

    fn message(cfg: &RunConfig) -> String {
        match cfg.validate() {
            Err(CliError::Validation(m)) => m,
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        let mut cfg = RunConfig::default();
        cfg.grid.n = MAX_GRID_N + 1;
        assert!(message(&cfg).starts_with("grid.n:"));

        let cfg = RunConfig {
            model: ModelConfig::Mfbm { hurst: 0.4, wh_grid_n: None },
            ..RunConfig::default()
        };
        assert!(message(&cfg).starts_with("model.hurst:"));

        let cfg = RunConfig {
            model: ModelConfig::Mfbm { hurst: 0.75, wh_grid_n: Some(64) },
            ..RunConfig::default()
        };
        assert!(message(&cfg).starts_with("model.wh_grid_n:"));

        let mut cfg = RunConfig::default();
        cfg.prediction.t = 0.7;
        assert!(message(&cfg).starts_with("prediction.t:"));

        let mut cfg = RunConfig::default();
        cfg.jumps.lambda = -1.0;
        assert!(message(&cfg).starts_with("jumps.lambda:"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[model]\nkind = \"fbm\"\nhurst = 0.7\nhurts = 1\n").unwrap_err();
        assert!(err.to_string().contains("hurts"));
    }
}
