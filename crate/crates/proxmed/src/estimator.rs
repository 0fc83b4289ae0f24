//! The end-to-end estimation pipeline: primal fit, dual fit, and the
//! Neyman-orthogonal final estimate with its standard error.
//!
//! The final moment `E[(Y~ - h^T X~ - theta D~)(D~ - gamma^T Z~)] = 0` is
//! first-order insensitive to errors in both nuisance fits, so the same data
//! are used for the nuisances and the final moment by default (the nuisances
//! are low-dimensional); an optional two-fold cross-fit is available.

use nalgebra::DVector;
use serde::Serialize;

use crate::adviv::{adviv_fit, default_penalty};
use crate::dataset::DesignMatrices;
use crate::diagnostics::{run_all, DiagnosticsConfig, DiagnosticsReport};
use crate::numerics::{hstack_vec, normal_quantile};
use crate::regress::{residualize, ResidualizeConfig, ResidualizedData};
use crate::robust::{weak_ci, WeakCiResult};
use crate::{derive_seed, Error, Result};

/// Fitted nuisance parameters for the final moment.
#[derive(Debug, Clone)]
pub struct NuisanceEstimates {
    /// Outcome-bridge coefficients on the X residuals.
    pub h: DVector<f64>,
    /// The primal's coefficient on D; reported for debugging, never used
    /// downstream.
    pub theta_pre: f64,
    /// Dual coefficients on the Z residuals.
    pub gamma: DVector<f64>,
    /// Penalty used for the primal fit.
    pub alpha_primal: f64,
    /// Penalty used for the dual fit.
    pub alpha_dual: f64,
}

/// Point estimate with normal-approximation confidence interval.
#[derive(Debug, Clone, Serialize)]
pub struct EffectEstimate {
    pub theta: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha_level: f64,
}

/// Solves the primal moment equation and returns `(h, theta_pre)`.
///
/// Instruments are `(Z~; D~)`, treatments `(X~; D~)`, outcome `Y~`.
pub fn solve_primal(res: &ResidualizedData, alpha: f64) -> Result<(DVector<f64>, f64)> {
    let instruments = hstack_vec(&res.z, &res.d);
    let treatments = hstack_vec(&res.x, &res.d);
    let fit = adviv_fit(&instruments, &treatments, &res.y, alpha)?;
    let p_x = res.p_x();
    let h = fit.coefficients.rows(0, p_x).into_owned();
    let theta_pre = fit.coefficients[p_x];
    Ok((h, theta_pre))
}

/// Solves the dual moment equation and returns `gamma`.
///
/// Instruments are `X~`, treatments `Z~`, outcome `D~`.
pub fn solve_dual(res: &ResidualizedData, alpha: f64) -> Result<DVector<f64>> {
    let fit = adviv_fit(&res.x, &res.z, &res.d, alpha)?;
    Ok(fit.coefficients)
}

/// Final Neyman-orthogonal estimate.
///
/// `theta = E_n[(Y~ - h^T X~)(D~ - gamma^T Z~)] / E_n[D~ (D~ - gamma^T Z~)]`,
/// with the plug-in standard error of the orthogonal moment.
pub fn final_estimate(
    res: &ResidualizedData,
    h: &DVector<f64>,
    gamma: &DVector<f64>,
    alpha_level: f64,
) -> Result<EffectEstimate> {
    let n = res.n() as f64;
    let v = &res.d - &res.z * gamma;
    let ybar = &res.y - &res.x * h;
    let denom = res.d.dot(&v) / n;
    if denom.abs() < 1e-12 {
        return Err(Error::Numeric(
            "weakly identified: run weak-IV tests (final moment denominator ~ 0)".into(),
        ));
    }
    let theta = ybar.dot(&v) / n / denom;
    let mut s2 = 0.0;
    for i in 0..res.n() {
        let r = ybar[i] - res.d[i] * theta;
        s2 += (r * v[i]).powi(2);
    }
    s2 /= n;
    let se = (s2 / (denom * denom)).sqrt() / n.sqrt();
    let z = normal_quantile(1.0 - alpha_level / 2.0);
    Ok(EffectEstimate {
        theta,
        se,
        ci_low: theta - z * se,
        ci_high: theta + z * se,
        alpha_level,
    })
}

/// Variant of the weak-instrument test construction to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WeakTestVariant {
    /// Influence-function correction for the estimated `gamma`.
    Heuristic,
    /// Debiased construction with the auxiliary IV parameter (default).
    Orthogonal,
}

/// Knobs for the full pipeline.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    /// Explicit lasso penalty grid for residualization (per-column default
    /// path when absent).
    pub lambda_grid: Option<Vec<f64>>,
    /// Folds for the semi-cross-fit penalty selection.
    pub n_splits: usize,
    /// Scale on the default adversarial IV penalty `n^{0.3}`.
    pub alpha_scale: f64,
    /// Two-sided level for the normal CI.
    pub alpha_level: f64,
    /// Significance level shared by the validity tests.
    pub alpha_sig: f64,
    /// Nagar-bias bound for the F-test critical value.
    pub tau_star: f64,
    /// Slack for the z-test; `None` defaults to `0.01 * E_n[D~^2]`.
    pub epsilon: Option<f64>,
    pub weak_variant: WeakTestVariant,
    /// Monte Carlo draws for the rank-test calibration.
    pub n_mc: usize,
    /// Weak-IV confidence region grid.
    pub weak_ci_grid: (f64, f64, f64),
    /// Master seed; every stage derives its own stream.
    pub seed: u64,
    /// Fit nuisances on half the data and evaluate the moment on the other
    /// half (two-fold, swapped and pooled). Off by default.
    pub cross_fit: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            lambda_grid: None,
            n_splits: 3,
            alpha_scale: 1.0,
            alpha_level: 0.05,
            alpha_sig: 0.05,
            tau_star: 0.1,
            epsilon: None,
            weak_variant: WeakTestVariant::Orthogonal,
            n_mc: 10_000,
            weak_ci_grid: (-1.0, 1.0, 0.001),
            seed: 0,
            cross_fit: false,
        }
    }
}

/// Everything the pipeline produces for one analysis pair.
pub struct EffectReport {
    pub estimate: EffectEstimate,
    pub weak_ci: WeakCiResult,
    pub diagnostics: DiagnosticsReport,
    pub nuisances: NuisanceEstimates,
    /// Penalty levels chosen per residualized column, labeled.
    pub residual_penalties: Vec<(String, Option<f64>)>,
}

/// Runs residualize -> primal -> dual -> final estimate -> diagnostics.
pub fn estimate_pipeline(data: &DesignMatrices, opts: &PipelineOptions) -> Result<EffectReport> {
    if data.z.ncols() == 0 {
        return Err(Error::InvalidInput("treatment proxies required (p_Z = 0)".into()));
    }
    if data.x.ncols() == 0 {
        return Err(Error::InvalidInput("outcome proxies required (p_X = 0)".into()));
    }
    let res = residualize(
        data,
        &ResidualizeConfig {
            grid: opts.lambda_grid.clone(),
            n_splits: opts.n_splits,
            seed: derive_seed(opts.seed, 1),
        },
    )
    .map_err(|e| e.in_stage("residualize"))?;
    estimate_from_residuals(&res, opts)
}

/// The pipeline from already-residualized data onward.
pub fn estimate_from_residuals(
    res: &ResidualizedData,
    opts: &PipelineOptions,
) -> Result<EffectReport> {
    let (nuisances, estimate) = if opts.cross_fit {
        cross_fit_estimate(res, opts)?
    } else {
        let alpha = opts.alpha_scale * default_penalty(res.n());
        let (h, theta_pre) = solve_primal(res, alpha).map_err(|e| e.in_stage("primal"))?;
        let gamma = solve_dual(res, alpha).map_err(|e| e.in_stage("dual"))?;
        let nuis = NuisanceEstimates {
            h,
            theta_pre,
            gamma,
            alpha_primal: alpha,
            alpha_dual: alpha,
        };
        let est = final_estimate(res, &nuis.h, &nuis.gamma, opts.alpha_level)
            .map_err(|e| e.in_stage("final"))?;
        (nuis, est)
    };

    let diagnostics = run_all(
        res,
        &nuisances,
        &DiagnosticsConfig {
            alpha_sig: opts.alpha_sig,
            tau_star: opts.tau_star,
            epsilon: opts.epsilon,
            weak_variant: opts.weak_variant,
            n_mc: opts.n_mc,
            alpha_scale: opts.alpha_scale,
            seed: derive_seed(opts.seed, 2),
        },
    )
    .map_err(|e| e.in_stage("diagnostics"))?;

    let (lo, hi, step) = opts.weak_ci_grid;
    let weak = weak_ci(
        res,
        &nuisances.h,
        &nuisances.gamma,
        opts.alpha_level,
        lo,
        hi,
        step,
    )
    .map_err(|e| e.in_stage("weak-ci"))?;

    let residual_penalties = res
        .fits
        .iter()
        .map(|f| (f.label.clone(), f.penalty))
        .collect();
    Ok(EffectReport {
        estimate,
        weak_ci: weak,
        diagnostics,
        nuisances,
        residual_penalties,
    })
}

/// Two-fold cross-fit: nuisances fit on the complementary half, the final
/// moment pooled over both folds.
fn cross_fit_estimate(
    res: &ResidualizedData,
    opts: &PipelineOptions,
) -> Result<(NuisanceEstimates, EffectEstimate)> {
    let n = res.n();
    let (fold_a, fold_b) = crate::dataset::split_indices(n, 0.5, derive_seed(opts.seed, 3));
    let mut num = 0.0;
    let mut den = 0.0;
    let mut s2_terms: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut pooled: Option<NuisanceEstimates> = None;
    for (eval, fit) in [(&fold_a, &fold_b), (&fold_b, &fold_a)] {
        let fit_res = res.select_rows(fit);
        let alpha = opts.alpha_scale * default_penalty(fit_res.n());
        let (h, theta_pre) = solve_primal(&fit_res, alpha).map_err(|e| e.in_stage("primal"))?;
        let gamma = solve_dual(&fit_res, alpha).map_err(|e| e.in_stage("dual"))?;
        for &i in eval.iter() {
            let zi = res.z.row(i).transpose();
            let xi = res.x.row(i).transpose();
            let v = res.d[i] - gamma.dot(&zi);
            let ybar = res.y[i] - h.dot(&xi);
            num += ybar * v;
            den += res.d[i] * v;
            s2_terms.push((ybar, v));
        }
        // The reported nuisances come from the first fit (fold B fit,
        // evaluated on fold A); diagnostics refit internally anyway.
        if pooled.is_none() {
            pooled = Some(NuisanceEstimates {
                h,
                theta_pre,
                gamma,
                alpha_primal: alpha,
                alpha_dual: alpha,
            });
        }
    }
    let denom = den / n as f64;
    if denom.abs() < 1e-12 {
        return Err(Error::Numeric(
            "weakly identified: run weak-IV tests (final moment denominator ~ 0)".into(),
        ));
    }
    let theta = num / den;
    let mut s2 = 0.0;
    // The eval order above interleaves folds; recompute the per-row residual
    // products against the pooled theta.
    let mut k = 0usize;
    for (eval, _) in [(&fold_a, &fold_b), (&fold_b, &fold_a)] {
        for &i in eval.iter() {
            let (ybar, v) = s2_terms[k];
            k += 1;
            let r = ybar - res.d[i] * theta;
            s2 += (r * v).powi(2);
        }
    }
    s2 /= n as f64;
    let se = (s2 / (denom * denom)).sqrt() / (n as f64).sqrt();
    let z = normal_quantile(1.0 - opts.alpha_level / 2.0);
    Ok((
        pooled.expect("two folds processed"),
        EffectEstimate {
            theta,
            se,
            ci_low: theta - z * se,
            ci_high: theta + z * se,
            alpha_level: opts.alpha_level,
        },
    ))
}
