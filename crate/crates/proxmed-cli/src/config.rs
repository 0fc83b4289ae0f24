//! Analysis configuration: parsing, validation and defaulting.
//!
//! Every default is materialized into the echoed config so reports carry
//! full provenance. Validation errors name the offending field with a
//! JSON-pointer style path.

use anyhow::{bail, Context, Result};
use proxmed::dataset::{ColumnKind, RoleConfig};
use proxmed::estimator::WeakTestVariant;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    /// Declared column kinds; columns not listed default to continuous.
    #[serde(default)]
    pub kinds: BTreeMap<String, ColumnKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Scale on the adversarial IV penalty n^0.3.
    #[serde(default = "one")]
    pub alpha_scale: f64,
    /// Two-sided miscoverage level for confidence intervals.
    #[serde(default = "p05")]
    pub alpha_level: f64,
    /// Explicit lasso penalty grid; empty means the per-column default path.
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "three")]
    pub n_splits: usize,
    #[serde(default)]
    pub cross_fit: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            alpha_scale: 1.0,
            alpha_level: 0.05,
            lambda_grid: Vec::new(),
            n_splits: 3,
            cross_fit: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestsConfig {
    #[serde(default = "p05")]
    pub alpha_sig: f64,
    #[serde(default = "p10")]
    pub tau_star: f64,
    /// z-test slack; absent means 0.01 * E_n[D~^2].
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "orthogonal")]
    pub weak_variant: WeakVariantConfig,
    #[serde(default = "ten_thousand")]
    pub n_mc: usize,
}

impl Default for TestsConfig {
    fn default() -> Self {
        TestsConfig {
            alpha_sig: 0.05,
            tau_star: 0.1,
            epsilon: None,
            weak_variant: WeakVariantConfig::Orthogonal,
            n_mc: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum WeakVariantConfig {
    Heuristic,
    Orthogonal,
}

impl From<WeakVariantConfig> for WeakTestVariant {
    fn from(v: WeakVariantConfig) -> WeakTestVariant {
        match v {
            WeakVariantConfig::Heuristic => WeakTestVariant::Heuristic,
            WeakVariantConfig::Orthogonal => WeakTestVariant::Orthogonal,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySelectionConfig {
    #[serde(default = "one_fifty")]
    pub k: usize,
    #[serde(default = "p10")]
    pub delta: f64,
    #[serde(default = "two")]
    pub iterations: usize,
    /// Sparsity multiple on moment standard errors.
    #[serde(default = "two_f")]
    pub c_sparse: f64,
    /// Fraction of rows held out for selection; absent means selection and
    /// estimation share the full dataset (a warning is emitted).
    #[serde(default)]
    pub selection_fraction: Option<f64>,
}

impl Default for ProxySelectionConfig {
    fn default() -> Self {
        ProxySelectionConfig {
            k: 150,
            delta: 0.1,
            iterations: 2,
            c_sparse: 2.0,
            selection_fraction: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakCiConfig {
    #[serde(default = "neg_one")]
    pub low: f64,
    #[serde(default = "one")]
    pub high: f64,
    #[serde(default = "milli")]
    pub step: f64,
}

impl Default for WeakCiConfig {
    fn default() -> Self {
        WeakCiConfig {
            low: -1.0,
            high: 1.0,
            step: 0.001,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "three")]
    pub stage: usize,
    #[serde(default = "thousand")]
    pub k: usize,
    #[serde(default = "half")]
    pub fraction: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            stage: 3,
            k: 1000,
            fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "one")]
    pub a: f64,
    #[serde(default = "one")]
    pub b: f64,
    #[serde(default)]
    pub g: f64,
    #[serde(default = "half")]
    pub theta: f64,
    #[serde(default = "one")]
    pub sigma_y: f64,
    #[serde(default = "yes")]
    pub binarize: bool,
    #[serde(default = "ten_thousand")]
    pub n: usize,
    #[serde(default = "hundred")]
    pub replicates: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            a: 1.0,
            b: 1.0,
            g: 0.0,
            theta: 0.5,
            sigma_y: 1.0,
            binarize: true,
            n: 10_000,
            replicates: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub data: DataConfig,
    pub roles: RoleConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub tests: TestsConfig,
    #[serde(default)]
    pub proxy_selection: ProxySelectionConfig,
    #[serde(default)]
    pub weak_ci: WeakCiConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    /// Minimum rows per stratum for stratified re-estimation.
    #[serde(default = "five_hundred")]
    pub stratum_min_size: usize,
}

fn one() -> f64 {
    1.0
}
fn neg_one() -> f64 {
    -1.0
}
fn p05() -> f64 {
    0.05
}
fn p10() -> f64 {
    0.1
}
fn milli() -> f64 {
    0.001
}
fn half() -> f64 {
    0.5
}
fn two_f() -> f64 {
    2.0
}
fn two() -> usize {
    2
}
fn three() -> usize {
    3
}
fn hundred() -> usize {
    100
}
fn thousand() -> usize {
    1000
}
fn ten_thousand() -> usize {
    10_000
}
fn one_fifty() -> usize {
    150
}
fn five_hundred() -> usize {
    500
}
fn yes() -> bool {
    true
}
fn orthogonal() -> WeakVariantConfig {
    WeakVariantConfig::Orthogonal
}
fn default_out() -> PathBuf {
    PathBuf::from("proxmed-out")
}

impl AnalysisConfig {
    /// Reads TOML or JSON depending on the file extension.
    pub fn load(path: &Path) -> Result<AnalysisConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: AnalysisConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .with_context(|| format!("parsing JSON config {}", path.display()))?,
            _ => toml::from_str(&text)
                .with_context(|| format!("parsing TOML config {}", path.display()))?,
        };
        if let Ok(seed) = std::env::var("PROXMED_SEED") {
            cfg.seed = seed
                .parse()
                .context("PROXMED_SEED must be an unsigned integer")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.roles.attribute.is_empty() {
            bail!("/roles/attribute: must be non-empty");
        }
        if self.roles.outcome.is_empty() {
            bail!("/roles/outcome: must be non-empty");
        }
        if self.roles.z_proxies.is_empty() {
            bail!("/roles/z_proxies: at least one treatment proxy required");
        }
        if self.roles.x_proxies.is_empty() {
            bail!("/roles/x_proxies: at least one outcome proxy required");
        }
        if !(0.0 < self.estimator.alpha_level && self.estimator.alpha_level < 1.0) {
            bail!("/estimator/alpha_level: must be in (0,1)");
        }
        if self.estimator.alpha_scale < 0.0 {
            bail!("/estimator/alpha_scale: must be >= 0");
        }
        if self.estimator.n_splits < 2 {
            bail!("/estimator/n_splits: must be >= 2");
        }
        if !(0.0 < self.tests.alpha_sig && self.tests.alpha_sig < 1.0) {
            bail!("/tests/alpha_sig: must be in (0,1)");
        }
        if self.tests.tau_star <= 0.0 {
            bail!("/tests/tau_star: must be > 0");
        }
        if !(0.0..1.0).contains(&self.proxy_selection.delta) {
            bail!("/proxy_selection/delta: must be in [0,1)");
        }
        if self.proxy_selection.k == 0 {
            bail!("/proxy_selection/k: must be >= 1");
        }
        if let Some(f) = self.proxy_selection.selection_fraction {
            if !(0.0 < f && f < 1.0) {
                bail!("/proxy_selection/selection_fraction: must be in (0,1)");
            }
        }
        if self.weak_ci.low >= self.weak_ci.high {
            bail!("/weak_ci: low must be < high");
        }
        if self.weak_ci.step <= 0.0 {
            bail!("/weak_ci/step: must be > 0");
        }
        if !(1..=3).contains(&self.bootstrap.stage) {
            bail!("/bootstrap/stage: must be 1, 2 or 3");
        }
        if !(0.0 < self.bootstrap.fraction && self.bootstrap.fraction < 1.0) {
            bail!("/bootstrap/fraction: must be in (0,1)");
        }
        if self.simulate.n == 0 {
            bail!("/simulate/n: must be >= 1");
        }
        if self.simulate.sigma_y < 0.0 {
            bail!("/simulate/sigma_y: must be >= 0");
        }
        Ok(())
    }

    pub fn pipeline_options(&self) -> proxmed::estimator::PipelineOptions {
        proxmed::estimator::PipelineOptions {
            lambda_grid: if self.estimator.lambda_grid.is_empty() {
                None
            } else {
                Some(self.estimator.lambda_grid.clone())
            },
            n_splits: self.estimator.n_splits,
            alpha_scale: self.estimator.alpha_scale,
            alpha_level: self.estimator.alpha_level,
            alpha_sig: self.tests.alpha_sig,
            tau_star: self.tests.tau_star,
            epsilon: self.tests.epsilon,
            weak_variant: self.tests.weak_variant.into(),
            n_mc: self.tests.n_mc,
            weak_ci_grid: (self.weak_ci.low, self.weak_ci.high, self.weak_ci.step),
            seed: self.seed,
            cross_fit: self.estimator.cross_fit,
        }
    }
}
