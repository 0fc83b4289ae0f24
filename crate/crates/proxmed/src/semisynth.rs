//! Semi-synthetic data generation and the evaluation metrics used for
//! calibration studies.
//!
//! A generator is fit on one half of a real (or stand-in) dataset: a logistic
//! propensity for the attribute, per-column L1 conditional means for the
//! proxy and outcome blocks, and a low-rank factor structure for the hidden
//! mediator read off the SVD of the proxy residual covariance, keeping only
//! the statistically significant singular triples. Sampling resamples
//! confounders and noise rows from the held-out half, so marginals stay
//! realistic while the structural parameters (a, b, g, theta, sigma_Y) are
//! user-chosen.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::dataset::{split_indices, ColumnKind, DesignMatrices};
use crate::diagnostics::{rank_test_on, DiagnosticsReport};
use crate::estimator::EffectEstimate;
use crate::numerics::{min_norm_solve, thin_svd};
use crate::regress::{fit_logistic, select_penalty_semi_crossfit, fit_lasso, LinearModel};
use crate::{derive_seed, Error, Result};

/// A fitted semi-synthetic structural model.
pub struct GeneratorModel {
    /// Logistic propensity of the attribute on the confounders.
    pub propensity: LinearModel,
    /// Per-column conditional means of the Z block given W.
    pub f_z: Vec<LinearModel>,
    /// Per-column conditional means of the X block given W.
    pub f_x: Vec<LinearModel>,
    /// Conditional mean of the outcome given W.
    pub f_y: LinearModel,
    /// Mediator-to-Z loadings (p_Z x K), orthonormal columns.
    pub g_load: DMatrix<f64>,
    /// Mediator-to-X loadings (p_X x K), orthonormal columns.
    pub f_load: DMatrix<f64>,
    /// Mediator component variances (the significant singular values).
    pub mediator_variances: Vec<f64>,
    /// All singular values of the proxy residual covariance.
    pub singular_values: Vec<f64>,
    /// Significance threshold that selected K.
    pub rank_threshold: f64,
    /// Held-out rows used as sampling pools.
    pub pool_w: DMatrix<f64>,
    pub pool_z: DMatrix<f64>,
    pub pool_x: DMatrix<f64>,
    pub pool_y: DVector<f64>,
    /// Indices of Z columns that were binary in the source data.
    pub z_binary_cols: Vec<usize>,
    pub w_labels: Vec<String>,
    pub z_labels: Vec<String>,
    pub x_labels: Vec<String>,
    pub d_label: String,
    pub y_label: String,
}

impl GeneratorModel {
    pub fn mediator_dim(&self) -> usize {
        self.mediator_variances.len()
    }
}

/// User-chosen structural parameters for sampling.
#[derive(Debug, Clone, Serialize)]
pub struct SynthParams {
    /// Influence of the attribute on every mediator component.
    pub a: f64,
    /// Influence of the mediator mean on the outcome.
    pub b: f64,
    /// Direct effect of the first X proxy on the outcome.
    pub g: f64,
    /// True controlled direct effect.
    pub theta: f64,
    /// Outcome noise scale.
    pub sigma_y: f64,
    /// Threshold originally-binary Z columns at zero.
    pub binarize: bool,
    pub n: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            a: 1.0,
            b: 1.0,
            g: 0.0,
            theta: 0.5,
            sigma_y: 1.0,
            binarize: true,
            n: 10_000,
            seed: 0,
        }
    }
}

/// Settings for [`fit_generator`].
#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub alpha_sig: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub n_splits: usize,
    /// L2 penalty for the propensity fit; floored at 1e-8 so a perfectly
    /// predictive confounder saturates the clipped probabilities instead of
    /// failing.
    pub propensity_penalty: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            alpha_sig: 0.05,
            n_mc: 10_000,
            seed: 0,
            n_splits: 3,
            propensity_penalty: 1e-4,
        }
    }
}

fn fit_lasso_column(
    w: &DMatrix<f64>,
    target: &DVector<f64>,
    n_splits: usize,
    seed: u64,
) -> Result<LinearModel> {
    if w.ncols() == 0 {
        return fit_lasso(w, target, 0.0);
    }
    let grid = crate::regress::default_lambda_grid(w, target);
    let lambda = if grid.len() == 1 {
        grid[0]
    } else {
        select_penalty_semi_crossfit(w, target, &grid, n_splits, seed)?
    };
    fit_lasso(w, target, lambda)
}

/// Fits the generator on an internal train half, keeping the other half as
/// the sampling pool.
pub fn fit_generator(data: &DesignMatrices, cfg: &GeneratorConfig) -> Result<GeneratorModel> {
    if data.z.ncols() == 0 || data.x.ncols() == 0 {
        return Err(Error::InvalidInput("generator needs p_Z, p_X >= 1".into()));
    }
    let n = data.n();
    if n < 20 {
        return Err(Error::InvalidInput("generator needs n >= 20".into()));
    }
    let (train_idx, pool_idx) = split_indices(n, 0.5, derive_seed(cfg.seed, 0));
    let train = data.select(&train_idx);
    let pool = data.select(&pool_idx);

    let propensity = fit_logistic(&train.w, &train.d, cfg.propensity_penalty.max(1e-8))?;

    let mut f_z = Vec::with_capacity(train.z.ncols());
    for j in 0..train.z.ncols() {
        let col = train.z.column(j).into_owned();
        f_z.push(fit_lasso_column(
            &train.w,
            &col,
            cfg.n_splits,
            derive_seed(cfg.seed, 100 + j as u64),
        )?);
    }
    let mut f_x = Vec::with_capacity(train.x.ncols());
    for j in 0..train.x.ncols() {
        let col = train.x.column(j).into_owned();
        f_x.push(fit_lasso_column(
            &train.w,
            &col,
            cfg.n_splits,
            derive_seed(cfg.seed, 200 + j as u64),
        )?);
    }
    let f_y = fit_lasso_column(&train.w, &train.y, cfg.n_splits, derive_seed(cfg.seed, 300))?;

    // Proxy residuals on the training half.
    let mut z_res = train.z.clone();
    for j in 0..z_res.ncols() {
        let pred = f_z[j].predict(&train.w);
        for i in 0..z_res.nrows() {
            z_res[(i, j)] -= pred[i];
        }
    }
    let mut x_res = train.x.clone();
    for j in 0..x_res.ncols() {
        let pred = f_x[j].predict(&train.w);
        for i in 0..x_res.nrows() {
            x_res[(i, j)] -= pred[i];
        }
    }

    // SVD of Cov(Z~, X~) with the rank-test threshold selecting K.
    let rank = rank_test_on(&x_res, &z_res, cfg.alpha_sig, cfg.n_mc, derive_seed(cfg.seed, 400))?;
    let k = rank.significant_rank;
    if k == 0 {
        return Err(Error::Numeric(
            "no significant mediator dimension in the proxy covariance".into(),
        ));
    }
    let cov_zx = crate::numerics::cross_moment(&z_res, &x_res);
    let svd = thin_svd(&cov_zx);
    let g_load = svd.u.columns(0, k).into_owned();
    let f_load = svd.v.columns(0, k).into_owned();
    let mediator_variances: Vec<f64> = (0..k).map(|i| svd.singular_values[i]).collect();

    // Z columns that came from binary/categorical sources get thresholded in
    // mixed-type sampling.
    let mut z_binary_cols = Vec::new();
    let mut offset = 0usize;
    for src in &data.report.z {
        for _ in &src.encoded {
            if src.kind != ColumnKind::Continuous {
                z_binary_cols.push(offset);
            }
            offset += 1;
        }
    }
    if offset != data.z.ncols() {
        // No encoding report (matrices built directly): detect two-valued
        // columns instead.
        z_binary_cols = (0..data.z.ncols())
            .filter(|&j| {
                let mut vals: Vec<f64> = data.z.column(j).iter().cloned().collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                vals.dedup();
                vals.len() == 2
            })
            .collect();
    }

    Ok(GeneratorModel {
        propensity,
        f_z,
        f_x,
        f_y,
        g_load,
        f_load,
        mediator_variances,
        singular_values: rank.singular_values,
        rank_threshold: rank.threshold,
        pool_w: pool.w.clone(),
        pool_z: pool.z.clone(),
        pool_x: pool.x.clone(),
        pool_y: pool.y.clone(),
        z_binary_cols,
        w_labels: data.w_labels.clone(),
        z_labels: data.z_labels.clone(),
        x_labels: data.x_labels.clone(),
        d_label: data.d_label.clone(),
        y_label: data.y_label.clone(),
    })
}

/// Draws a semi-synthetic dataset plus the hidden mediator draws (n x K).
pub fn sample(model: &GeneratorModel, params: &SynthParams) -> Result<(DesignMatrices, DMatrix<f64>)> {
    if params.n == 0 {
        return Err(Error::InvalidInput("sample size must be >= 1".into()));
    }
    let n = params.n;
    let k = model.mediator_dim();
    let pool_n = model.pool_w.nrows();
    let p_w = model.pool_w.ncols();
    let p_z = model.g_load.nrows();
    let p_x = model.f_load.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut w = DMatrix::zeros(n, p_w);
    for i in 0..n {
        let row = rng.gen_range(0..pool_n);
        for j in 0..p_w {
            w[(i, j)] = model.pool_w[(row, j)];
        }
    }
    let prop = model.propensity.predict_proba(&w);
    let d = DVector::from_fn(n, |i, _| if rng.gen::<f64>() < prop[i] { 1.0 } else { 0.0 });

    let sds: Vec<f64> = model.mediator_variances.iter().map(|v| v.sqrt()).collect();
    let mut m = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            let eps: f64 = rng.sample(StandardNormal);
            m[(i, j)] = params.a * d[i] + sds[j] * eps;
        }
    }

    let mut z = &m * model.g_load.transpose();
    for j in 0..p_z {
        let pred = model.f_z[j].predict(&w);
        for i in 0..n {
            z[(i, j)] += pred[i];
        }
    }
    for i in 0..n {
        let row = rng.gen_range(0..pool_n);
        for j in 0..p_z {
            z[(i, j)] += model.pool_z[(row, j)];
        }
    }

    let mut x = &m * model.f_load.transpose();
    for j in 0..p_x {
        let pred = model.f_x[j].predict(&w);
        for i in 0..n {
            x[(i, j)] += pred[i];
        }
    }
    for i in 0..n {
        let row = rng.gen_range(0..pool_n);
        for j in 0..p_x {
            x[(i, j)] += model.pool_x[(row, j)];
        }
    }

    let fy = model.f_y.predict(&w);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let row = rng.gen_range(0..pool_n);
        let eps_y = model.pool_y[row];
        let m_mean: f64 = (0..k).map(|j| m[(i, j)]).sum::<f64>() / k as f64;
        y[i] = params.b * m_mean
            + params.theta * d[i]
            + params.g * x[(i, 0)]
            + fy[i]
            + params.sigma_y * eps_y;
    }

    if params.binarize {
        for &j in &model.z_binary_cols {
            for i in 0..n {
                z[(i, j)] = if z[(i, j)] > 0.0 { 0.5 } else { -0.5 };
            }
        }
    }

    let data = DesignMatrices {
        w,
        d,
        z,
        x,
        y,
        w_labels: model.w_labels.clone(),
        z_labels: model.z_labels.clone(),
        x_labels: model.x_labels.clone(),
        d_label: model.d_label.clone(),
        y_label: model.y_label.clone(),
        report: Default::default(),
    };
    Ok((data, m))
}

/// Replicate-level evaluation metrics.
#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub mean_theta: f64,
    pub sd_theta: f64,
    /// Fraction of replicate intervals containing the truth.
    pub coverage: f64,
    pub rmse: f64,
    pub bias_abs: f64,
    pub mean_ci_halfwidth: f64,
    pub pass_rates: Option<TestPassRates>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TestPassRates {
    pub primal: f64,
    pub dual: f64,
    pub f_test: f64,
    pub z_test: f64,
    pub rank: f64,
}

/// Aggregates replicate estimates (and optionally their diagnostics) against
/// the known truth.
pub fn evaluate(
    estimates: &[EffectEstimate],
    diagnostics: &[DiagnosticsReport],
    theta0: f64,
) -> Result<Metrics> {
    if estimates.is_empty() {
        return Err(Error::InvalidInput("no replicate estimates".into()));
    }
    let k = estimates.len() as f64;
    let mean_theta = estimates.iter().map(|e| e.theta).sum::<f64>() / k;
    let sd_theta = (estimates
        .iter()
        .map(|e| (e.theta - mean_theta).powi(2))
        .sum::<f64>()
        / k)
        .sqrt();
    let coverage = estimates
        .iter()
        .filter(|e| e.ci_low <= theta0 && theta0 <= e.ci_high)
        .count() as f64
        / k;
    let rmse = (estimates
        .iter()
        .map(|e| (e.theta - theta0).powi(2))
        .sum::<f64>()
        / k)
        .sqrt();
    let bias_abs = (mean_theta - theta0).abs();
    let mean_ci_halfwidth = estimates
        .iter()
        .map(|e| 0.5 * (e.ci_high - e.ci_low))
        .sum::<f64>()
        / k;
    let pass_rates = if diagnostics.is_empty() {
        None
    } else {
        let kd = diagnostics.len() as f64;
        let rate = |f: &dyn Fn(&DiagnosticsReport) -> bool| {
            diagnostics.iter().filter(|r| f(r)).count() as f64 / kd
        };
        Some(TestPassRates {
            primal: rate(&|r| r.primal.passed),
            dual: rate(&|r| r.dual.passed),
            f_test: rate(&|r| r.f_test.passed),
            z_test: rate(&|r| r.z_test.passed),
            rank: rate(&|r| r.rank.significant_rank >= 1),
        })
    };
    Ok(Metrics {
        mean_theta,
        sd_theta,
        coverage,
        rmse,
        bias_abs,
        mean_ci_halfwidth,
        pass_rates,
    })
}

/// Which covariate set the OLS baseline regresses the outcome on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Oracle: regress on (W, D, X, M) using the hidden mediator draws.
    WithM,
    /// Feasible but misspecified: regress on (W, D, X, Z).
    WithZ,
}

/// OLS coefficient on D for the chosen baseline; the second return flags a
/// rank-deficient design solved by minimum norm.
pub fn baseline_ols(
    data: &DesignMatrices,
    hidden_m: Option<&DMatrix<f64>>,
    which: BaselineKind,
) -> Result<(f64, bool)> {
    let n = data.n();
    let extra: &DMatrix<f64> = match which {
        BaselineKind::WithM => hidden_m
            .ok_or_else(|| Error::InvalidInput("oracle baseline needs the hidden mediator".into()))?,
        BaselineKind::WithZ => &data.z,
    };
    if extra.nrows() != n {
        return Err(Error::InvalidInput("mediator rows mismatch".into()));
    }
    let p = 1 + data.w.ncols() + 1 + data.x.ncols() + extra.ncols();
    let mut design = DMatrix::zeros(n, p);
    let mut col = 0usize;
    design.set_column(col, &DVector::from_element(n, 1.0));
    col += 1;
    for j in 0..data.w.ncols() {
        design.set_column(col, &data.w.column(j).into_owned());
        col += 1;
    }
    let d_col = col;
    design.set_column(col, &data.d);
    col += 1;
    for j in 0..data.x.ncols() {
        design.set_column(col, &data.x.column(j).into_owned());
        col += 1;
    }
    for j in 0..extra.ncols() {
        design.set_column(col, &extra.column(j).into_owned());
        col += 1;
    }
    let svd = thin_svd(&design);
    let tol = crate::numerics::SVD_RTOL * svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let rank_deficient = rank < p;
    let beta = min_norm_solve(&design, &data.y);
    Ok((beta[d_col], rank_deficient))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{estimate_from_residuals, PipelineOptions};
    use crate::regress::{residualize, ResidualizeConfig};
    use crate::testutil::randn;

    /// A stand-in "real" dataset generated from a known K-factor SCM with a
    /// few confounders, mixed binary/continuous Z block.
    pub(crate) fn stand_in_real_data(
        seed: u64,
        n: usize,
        k_true: usize,
        p_z: usize,
        p_x: usize,
    ) -> DesignMatrices {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p_w = 3;
        let w = randn(&mut rng, n, p_w);
        let wd = randn(&mut rng, p_w, 1);
        let d = DVector::from_fn(n, |i, _| {
            let eta: f64 = w.row(i).transpose().dot(&wd.column(0)) * 0.8;
            let p = 1.0 / (1.0 + (-eta).exp());
            if rng.gen::<f64>() < p {
                1.0
            } else {
                0.0
            }
        });
        let mut m = randn(&mut rng, n, k_true);
        for i in 0..n {
            for j in 0..k_true {
                m[(i, j)] += 0.8 * d[i];
            }
        }
        // Orthonormal-ish strong loadings.
        let g_load = randn(&mut rng, k_true, p_z) * 1.2;
        let f_load = randn(&mut rng, k_true, p_x) * 1.2;
        let wz = randn(&mut rng, p_w, p_z) * 0.5;
        let wx = randn(&mut rng, p_w, p_x) * 0.5;
        let mut z = &m * &g_load + &w * &wz + 0.8 * randn(&mut rng, n, p_z);
        let x = &m * &f_load + &w * &wx + 0.8 * randn(&mut rng, n, p_x);
        // Two binary Z columns, coded +-0.5 as the encoder would produce.
        for j in 0..2.min(p_z) {
            for i in 0..n {
                z[(i, j)] = if z[(i, j)] > 0.0 { 0.5 } else { -0.5 };
            }
        }
        let b = DVector::from_element(k_true, 0.6);
        let wy = randn(&mut rng, p_w, 1) * 0.5;
        let y = &m * &b
            + 0.4 * &d
            + &w * wy.column(0)
            + randn(&mut rng, n, 1).column(0).into_owned();
        let mut report = crate::dataset::EncodingReport::default();
        for j in 0..p_z {
            report.z.push(crate::dataset::EncodedSource {
                source: format!("z{j}"),
                kind: if j < 2 {
                    ColumnKind::Binary
                } else {
                    ColumnKind::Continuous
                },
                encoded: vec![format!("z{j}")],
            });
        }
        DesignMatrices {
            w,
            d,
            z,
            x,
            y,
            w_labels: (0..p_w).map(|j| format!("w{j}")).collect(),
            z_labels: (0..p_z).map(|j| format!("z{j}")).collect(),
            x_labels: (0..p_x).map(|j| format!("x{j}")).collect(),
            d_label: "d".into(),
            y_label: "y".into(),
            report,
        }
    }

    #[test]
    fn generator_recovers_planted_dimension() {
        let data = stand_in_real_data(1, 8000, 3, 6, 6);
        let model = fit_generator(&data, &GeneratorConfig::default()).unwrap();
        assert_eq!(model.mediator_dim(), 3, "svals {:?}", model.singular_values);
        // Loadings orthonormal.
        let gtg = model.g_load.transpose() * &model.g_load;
        assert!((gtg - DMatrix::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn propensities_clipped_under_perfect_separation() {
        let mut data = stand_in_real_data(2, 2000, 2, 4, 4);
        // Plant a perfectly predictive confounder column.
        for i in 0..2000 {
            data.w[(i, 0)] = if data.d[i] > 0.5 { 5.0 } else { -5.0 };
        }
        let cfg = GeneratorConfig {
            propensity_penalty: 0.0,
            ..GeneratorConfig::default()
        };
        let model = fit_generator(&data, &cfg).unwrap();
        let p = model.propensity.predict_proba(&data.w);
        assert!(p.iter().all(|&v| (1e-6..=1.0 - 1e-6).contains(&v)));
        assert!(p.max() > 0.99 && p.min() < 0.01, "saturated fit expected");
    }

    #[test]
    fn constant_outcome_gives_constant_fy() {
        let mut data = stand_in_real_data(3, 2000, 2, 4, 4);
        let with_y = fit_generator(&data, &GeneratorConfig::default()).unwrap();
        data.y = DVector::from_element(2000, 7.5);
        let model = fit_generator(&data, &GeneratorConfig::default()).unwrap();
        assert!(model.f_y.coefficients.amax() < 1e-12);
        assert!((model.f_y.intercept - 7.5).abs() < 1e-9);
        // The proxy covariance does not involve Y.
        for (a, b) in model
            .singular_values
            .iter()
            .zip(with_y.singular_values.iter())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_collapse_recovers_theta_exactly() {
        let data = stand_in_real_data(4, 3000, 2, 4, 4);
        let model = fit_generator(&data, &GeneratorConfig::default()).unwrap();
        let params = SynthParams {
            a: 1.0,
            b: 0.0,
            g: 0.0,
            theta: 0.37,
            sigma_y: 0.0,
            binarize: false,
            n: 500,
            seed: 5,
        };
        let (gen, _m) = sample(&model, &params).unwrap();
        let fy = model.f_y.predict(&gen.w);
        for i in 0..500 {
            assert!((gen.y[i] - fy[i] - 0.37 * gen.d[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let data = stand_in_real_data(6, 2000, 2, 4, 4);
        let model = fit_generator(&data, &GeneratorConfig::default()).unwrap();
        let params = SynthParams {
            n: 300,
            seed: 9,
            ..SynthParams::default()
        };
        let (a, ma) = sample(&model, &params).unwrap();
        let (b, mb) = sample(&model, &params).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(ma, mb);
        let (c, _) = sample(&model, &SynthParams { seed: 10, ..params }).unwrap();
        assert_ne!(a.d, c.d, "different seeds should differ in draws");
    }

    #[test]
    fn generated_covariance_rank_bounded_by_k() {
        let data = stand_in_real_data(7, 6000, 2, 5, 5);
        let model = fit_generator(&data, &GeneratorConfig::default()).unwrap();
        let k = model.mediator_dim();
        let params = SynthParams {
            binarize: false,
            n: 20_000,
            seed: 11,
            ..SynthParams::default()
        };
        let (gen, m) = sample(&model, &params).unwrap();
        // Residualize against W by regressing on the pools' fitted means.
        let mut z_res = gen.z.clone();
        for j in 0..z_res.ncols() {
            let pred = model.f_z[j].predict(&gen.w);
            for i in 0..z_res.nrows() {
                z_res[(i, j)] -= pred[i];
            }
        }
        let mut x_res = gen.x.clone();
        for j in 0..x_res.ncols() {
            let pred = model.f_x[j].predict(&gen.w);
            for i in 0..x_res.nrows() {
                x_res[(i, j)] -= pred[i];
            }
        }
        let cov = crate::numerics::cross_moment(&z_res, &x_res);
        let svals = thin_svd(&cov).singular_values;
        // Noise singular values beyond K stay at the sampling-noise level.
        for i in k..svals.len() {
            assert!(
                svals[i] < 0.15 * svals[0],
                "spurious structure beyond K: {svals:?}"
            );
        }
        // Oracle consistency: regressing generated X on hidden M (both
        // centered, since the noise pool and mediator have nonzero means)
        // recovers the loading columns up to sign.
        let nf = gen.n() as f64;
        let mut mc = m.clone();
        for j in 0..mc.ncols() {
            let mean = mc.column(j).sum() / nf;
            for i in 0..mc.nrows() {
                mc[(i, j)] -= mean;
            }
        }
        let mut xt = &gen.x - {
            let mut fx = DMatrix::zeros(gen.n(), x_res.ncols());
            for j in 0..x_res.ncols() {
                fx.set_column(j, &model.f_x[j].predict(&gen.w));
            }
            fx
        };
        for j in 0..xt.ncols() {
            let mean = xt.column(j).sum() / nf;
            for i in 0..xt.nrows() {
                xt[(i, j)] -= mean;
            }
        }
        let mtm = mc.transpose() * &mc;
        let mtx = mc.transpose() * &xt;
        let recovered = mtm.lu().solve(&mtx).unwrap().transpose();
        let mut err = 0.0;
        for j in 0..k {
            let a = recovered.column(j).into_owned();
            let b = model.f_load.column(j).into_owned();
            let diff_plus = (&a - &b).norm();
            let diff_minus = (&a + &b).norm();
            err += diff_plus.min(diff_minus).powi(2);
        }
        assert!(err.sqrt() < 0.05, "loading recovery error {}", err.sqrt());
    }

    #[test]
    fn null_effect_calibration_smoke() {
        let data = stand_in_real_data(8, 4000, 2, 4, 4);
        let model = fit_generator(&data, &GeneratorConfig::default()).unwrap();
        let params = SynthParams {
            a: 0.0,
            theta: 0.0,
            n: 4000,
            seed: 13,
            ..SynthParams::default()
        };
        let (gen, _) = sample(&model, &params).unwrap();
        let res = residualize(&gen, &ResidualizeConfig::default()).unwrap();
        let report = estimate_from_residuals(&res, &PipelineOptions::default()).unwrap();
        assert!(
            report.estimate.theta.abs() < 2.0 * report.estimate.se + 0.05,
            "null effect outside tolerance: {} (se {})",
            report.estimate.theta,
            report.estimate.se
        );
    }

    #[test]
    fn evaluate_metric_edge_cases() {
        let exact = vec![
            EffectEstimate {
                theta: 0.5,
                se: 0.1,
                ci_low: 0.3,
                ci_high: 0.7,
                alpha_level: 0.05,
            };
            4
        ];
        let m = evaluate(&exact, &[], 0.5).unwrap();
        assert_eq!(m.coverage, 1.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.bias_abs, 0.0);

        let off = vec![EffectEstimate {
            theta: 1.5,
            se: 1e-12,
            ci_low: 1.5 - 2e-12,
            ci_high: 1.5 + 2e-12,
            alpha_level: 0.05,
        }];
        let m = evaluate(&off, &[], 0.5).unwrap();
        assert_eq!(m.coverage, 0.0);
        assert!((m.rmse - 1.0).abs() < 1e-12);
        assert!((m.bias_abs - 1.0).abs() < 1e-12);
        assert!(evaluate(&[], &[], 0.0).is_err());
    }

    #[test]
    fn baseline_ols_noiseless_exact_and_rank_warning() {
        let data = stand_in_real_data(9, 2000, 2, 4, 4);
        let model = fit_generator(&data, &GeneratorConfig::default()).unwrap();
        let params = SynthParams {
            a: 1.0,
            b: 0.0,
            g: 0.0,
            theta: 0.25,
            sigma_y: 0.0,
            binarize: false,
            n: 1500,
            seed: 17,
        };
        let (gen, m) = sample(&model, &params).unwrap();
        let (coef, deficient) = baseline_ols(&gen, Some(&m), BaselineKind::WithM).unwrap();
        assert!((coef - 0.25).abs() < 1e-8, "coef {coef}");
        assert!(!deficient);

        // Duplicate column forces rank deficiency; min-norm still answers.
        let mut dup = gen.clone();
        let copy = dup.x.column(0).into_owned();
        dup.x = {
            let mut x = DMatrix::zeros(dup.x.nrows(), dup.x.ncols() + 1);
            x.view_mut((0, 0), (dup.x.nrows(), dup.x.ncols())).copy_from(&dup.x);
            x.set_column(dup.x.ncols(), &copy);
            x
        };
        dup.x_labels.push("x_dup".into());
        let (_, deficient) = baseline_ols(&dup, Some(&m), BaselineKind::WithM).unwrap();
        assert!(deficient);
    }

    #[test]
    fn baseline_with_z_is_biased_upward_on_mediated_data() {
        let data = stand_in_real_data(10, 4000, 2, 4, 4);
        let model = fit_generator(&data, &GeneratorConfig::default()).unwrap();
        let params = SynthParams {
            n: 8000,
            seed: 21,
            ..SynthParams::default()
        };
        let (gen, m) = sample(&model, &params).unwrap();
        let (with_m, _) = baseline_ols(&gen, Some(&m), BaselineKind::WithM).unwrap();
        let (with_z, _) = baseline_ols(&gen, None, BaselineKind::WithZ).unwrap();
        assert!((with_m - 0.5).abs() < 0.1, "oracle {with_m}");
        assert!(
            (with_z - 0.5).abs() > 2.0 * (with_m - 0.5).abs() + 0.05,
            "proxy-controlled OLS should be visibly biased: {with_z} vs oracle {with_m}"
        );
    }
}
