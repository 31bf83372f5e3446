//! Pipeline configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: InputConfig,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub grading: GradingConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub path: PathBuf,
    pub id_col: String,
    #[serde(default)]
    pub estimate_col: Option<String>,
    #[serde(default)]
    pub se_col: Option<String>,
    #[serde(default)]
    pub group_col: Option<String>,
    #[serde(default)]
    pub successes_col: Option<String>,
    #[serde(default)]
    pub trials_col: Option<String>,
    /// Measurement transform: "passthrough", "arcsine", or "log-gap".
    #[serde(default = "default_transform")]
    pub transform: String,
    /// Columns for the log-gap transform.
    #[serde(default)]
    pub rate_w_col: Option<String>,
    #[serde(default)]
    pub rate_b_col: Option<String>,
    #[serde(default)]
    pub var_w_col: Option<String>,
    #[serde(default)]
    pub var_b_col: Option<String>,
    #[serde(default)]
    pub cov_col: Option<String>,
}

fn default_transform() -> String {
    "passthrough".to_string()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    #[serde(default)]
    pub min_rate: Option<f64>,
    #[serde(default)]
    pub min_trials: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// "baseline" or "hierarchical".
    #[serde(default = "default_model_kind")]
    pub kind: String,
    /// "gmm" fits the precision model; "none" fixes beta = 0 and calibrates
    /// against bias-corrected sample moments.
    #[serde(default = "default_precision")]
    pub precision: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_model_kind() -> String {
    "baseline".to_string()
}

fn default_precision() -> String {
    "gmm".to_string()
}

fn default_seed() -> u64 {
    17
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: default_model_kind(),
            precision: default_precision(),
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_eta_grid_points")]
    pub eta_grid_points: usize,
    #[serde(default = "default_spline_order")]
    pub spline_order: usize,
    /// "orthogonal_natural" or "truncated_power".
    #[serde(default = "default_basis")]
    pub basis: String,
    /// Fixed penalty; calibrated when absent and `calibrate` is true.
    #[serde(default)]
    pub penalty: Option<f64>,
    #[serde(default)]
    pub penalty_eta: Option<f64>,
    #[serde(default = "default_true")]
    pub calibrate: bool,
    /// Monte-Carlo draws for hierarchical posteriors.
    #[serde(default = "default_draws")]
    pub draws: usize,
}

fn default_grid_points() -> usize {
    1000
}

fn default_eta_grid_points() -> usize {
    200
}

fn default_spline_order() -> usize {
    5
}

fn default_basis() -> String {
    "orthogonal_natural".to_string()
}

fn default_true() -> bool {
    true
}

fn default_draws() -> usize {
    100_000
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            grid_points: default_grid_points(),
            eta_grid_points: default_eta_grid_points(),
            spline_order: default_spline_order(),
            basis: default_basis(),
            penalty: None,
            penalty_eta: None,
            calibrate: true,
            draws: default_draws(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradingConfig {
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub p: u8,
    /// "exact", "heuristic", or "auto".
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_exact_limit")]
    pub exact_limit: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_lambdas() -> Vec<f64> {
    vec![0.25, 1.0]
}

fn default_mode() -> String {
    "auto".to_string()
}

fn default_exact_limit() -> usize {
    12
}

fn default_restarts() -> usize {
    50
}

impl Default for GradingConfig {
    fn default() -> Self {
        GradingConfig {
            lambdas: default_lambdas(),
            p: 0,
            mode: default_mode(),
            exact_limit: default_exact_limit(),
            restarts: default_restarts(),
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// "stars_best" (more stars = less biased, default) or "stars_worst".
    #[serde(default = "default_polarity")]
    pub polarity: String,
    #[serde(default)]
    pub anonymize: bool,
}

fn default_polarity() -> String {
    "stars_best".to_string()
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let raw = std::fs::read_to_string(path.as_ref())?;
        let config: PipelineConfig = toml::from_str(&raw)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        match self.input.transform.as_str() {
            "passthrough" | "arcsine" | "log-gap" => {}
            other => anyhow::bail!("unknown transform `{other}`"),
        }
        match self.model.kind.as_str() {
            "baseline" | "hierarchical" => {}
            other => anyhow::bail!("unknown model kind `{other}`"),
        }
        match self.model.precision.as_str() {
            "gmm" | "none" => {}
            other => anyhow::bail!("unknown precision mode `{other}`"),
        }
        match self.prior.basis.as_str() {
            "orthogonal_natural" | "truncated_power" => {}
            other => anyhow::bail!("unknown basis `{other}`"),
        }
        match self.grading.mode.as_str() {
            "exact" | "heuristic" | "auto" => {}
            other => anyhow::bail!("unknown solver mode `{other}`"),
        }
        if !matches!(self.grading.p, 0 | 2) {
            anyhow::bail!("exponent p must be 0 or 2, got {}", self.grading.p);
        }
        for &l in &self.grading.lambdas {
            if !(0.0..=1.0).contains(&l) {
                anyhow::bail!("lambda {l} outside [0, 1]");
            }
        }
        if self.grading.lambdas.is_empty() {
            anyhow::bail!("at least one lambda is required");
        }
        match self.output.polarity.as_str() {
            "stars_best" | "stars_worst" => {}
            other => anyhow::bail!("unknown polarity `{other}`"),
        }
        Ok(())
    }

    pub fn basis_kind(&self) -> reportcard::spline::BasisKind {
        match self.prior.basis.as_str() {
            "truncated_power" => reportcard::spline::BasisKind::TruncatedPower { standardize: true },
            _ => reportcard::spline::BasisKind::OrthogonalNatural,
        }
    }

    pub fn solve_options(&self) -> reportcard::solver::SolveOptions {
        reportcard::solver::SolveOptions {
            mode: match self.grading.mode.as_str() {
                "exact" => reportcard::solver::SolveMode::Exact,
                "heuristic" => reportcard::solver::SolveMode::Heuristic,
                _ => reportcard::solver::SolveMode::Auto,
            },
            exact_limit: self.grading.exact_limit,
            restarts: self.grading.restarts,
            seed: self.grading.seed,
        }
    }
}
