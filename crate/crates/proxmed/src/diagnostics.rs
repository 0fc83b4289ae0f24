//! The validity test suite: primal/dual chi-square violation tests on a
//! half split, the two weak-identification tests (heuristic and
//! Neyman-orthogonal variants), and the proxy covariance rank test.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::collections::BTreeMap;

use crate::adviv::{adviv_fit, default_penalty};
use crate::dataset::split_indices;
use crate::estimator::{NuisanceEstimates, WeakTestVariant};
use crate::numerics::{
    chisq_quantile, cross_moment, folded_normal_quantile, gram, hstack_vec,
    noncentral_chisq1_quantile, pinv, soft_threshold_projector, sym_inv_sqrt, sym_sqrt,
    weighted_chisq_quantile,
};
use crate::regress::ResidualizedData;
use crate::{derive_seed, Error, Result};

/// Comparison direction that counts as a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PassDirection {
    /// Pass when `statistic < critical_value`.
    Below,
    /// Pass when `statistic > critical_value`.
    Above,
}

/// Outcome of one validity test.
#[derive(Debug, Clone, Serialize)]
pub struct TestResult {
    pub name: String,
    pub statistic: f64,
    pub critical_value: f64,
    pub passed: bool,
    pub direction: PassDirection,
    pub dof: Option<usize>,
    /// Extra distribution parameters (noncentrality, slack, scale, ...).
    pub params: BTreeMap<String, f64>,
    pub alpha_sig: f64,
}

impl TestResult {
    fn new(
        name: &str,
        statistic: f64,
        critical_value: f64,
        direction: PassDirection,
        dof: Option<usize>,
        alpha_sig: f64,
    ) -> TestResult {
        let passed = match direction {
            PassDirection::Below => statistic < critical_value,
            PassDirection::Above => statistic > critical_value,
        };
        TestResult {
            name: name.to_string(),
            statistic,
            critical_value,
            passed,
            direction,
            dof,
            params: BTreeMap::new(),
            alpha_sig,
        }
    }
}

/// Outcome of the covariance rank test.
#[derive(Debug, Clone, Serialize)]
pub struct RankResult {
    pub singular_values: Vec<f64>,
    pub threshold: f64,
    pub significant_rank: usize,
    /// True when the eigenvalue computation fell back to the diagonal
    /// approximation because `p_X * p_Z` exceeded the exact-size cap.
    pub diagonal_approx: bool,
}

/// All five results plus the conjunction flag.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub primal: TestResult,
    pub dual: TestResult,
    pub f_test: TestResult,
    pub z_test: TestResult,
    pub rank: RankResult,
    pub valid: bool,
}

/// Settings shared by the test suite.
#[derive(Debug, Clone)]
pub struct DiagnosticsConfig {
    pub alpha_sig: f64,
    pub tau_star: f64,
    /// z-test slack; `None` defaults to `0.01 * E_n[D~^2]`.
    pub epsilon: Option<f64>,
    pub weak_variant: WeakTestVariant,
    pub n_mc: usize,
    pub alpha_scale: f64,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            alpha_sig: 0.05,
            tau_star: 0.1,
            epsilon: None,
            weak_variant: WeakTestVariant::Orthogonal,
            n_mc: 10_000,
            alpha_scale: 1.0,
            seed: 0,
        }
    }
}

/// Exact-eigendecomposition cap for the rank-test covariance operator.
const RANK_TEST_EXACT_CAP: usize = 4096;

/// Shared split-half chi-square machinery for the primal and dual tests.
///
/// `w_*` are the moment weight rows (the instruments of the tested equation),
/// `t_*` the treatment rows entering the whitened covariance, `r_*` the
/// per-row equation residuals under the train-half fit.
fn split_moment_statistic(
    w_train: &DMatrix<f64>,
    t_train: &DMatrix<f64>,
    r_train: &DVector<f64>,
    w_test: &DMatrix<f64>,
    r_test: &DVector<f64>,
    n_total: usize,
) -> Result<f64> {
    let n_train = w_train.nrows();
    let n_test = w_test.nrows();
    let p = w_train.ncols();

    // Test-half moment mean and centered covariance.
    let mut m_hat = DVector::<f64>::zeros(p);
    for i in 0..n_test {
        m_hat += w_test.row(i).transpose() * r_test[i];
    }
    m_hat /= n_test as f64;
    let mut test_cov = DMatrix::<f64>::zeros(p, p);
    for i in 0..n_test {
        let mi = w_test.row(i).transpose() * r_test[i] - &m_hat;
        test_cov.syger(1.0 / n_test as f64, &mi, &mi, 1.0);
    }
    test_cov.fill_upper_triangle_with_lower_triangle();

    // Train-half influence term J Phi with the soft-thresholded projector.
    let a_tr = gram(w_train);
    let a_sqrt = sym_sqrt(&a_tr);
    let a_inv_sqrt = sym_inv_sqrt(&a_tr);
    let sigma_tilde = &a_inv_sqrt * cross_moment(w_train, t_train);
    let p_hat = soft_threshold_projector(&sigma_tilde, n_total);
    let j_hat = &a_sqrt * p_hat * &a_inv_sqrt;
    let mut phi_cov = DMatrix::<f64>::zeros(p, p);
    for i in 0..n_train {
        let phi = &j_hat * (w_train.row(i).transpose() * r_train[i]);
        phi_cov.syger(1.0 / n_train as f64, &phi, &phi, 1.0);
    }
    phi_cov.fill_upper_triangle_with_lower_triangle();

    // Var(M_hat) = test covariance / n_test + influence covariance / n_train.
    let a_over_n = test_cov / n_test as f64 + phi_cov / n_train as f64;
    let eig = nalgebra::SymmetricEigen::new(a_over_n);
    let emax = eig.eigenvalues.max();
    let emin = eig.eigenvalues.min();
    if emin <= 0.0 || emax / emin > 1e12 {
        return Err(Error::Numeric(format!(
            "singular moment variance (condition {:.3e})",
            if emin > 0.0 { emax / emin } else { f64::INFINITY }
        )));
    }
    let proj = eig.eigenvectors.transpose() * &m_hat;
    let mut stat = 0.0;
    for i in 0..p {
        stat += proj[i] * proj[i] / eig.eigenvalues[i];
    }
    Ok(stat)
}

/// Split-half chi-square test of whether the primal equation admits a
/// solution. Degrees of freedom `p_Z + 1`; passes when the statistic is
/// below the critical value.
pub fn primal_violation_test(
    res: &ResidualizedData,
    alpha: Option<f64>,
    alpha_sig: f64,
    seed: u64,
) -> Result<TestResult> {
    let n = res.n();
    if n < 10 {
        return Err(Error::InvalidInput("primal test needs n >= 10".into()));
    }
    let (train_idx, test_idx) = split_indices(n, 0.5, seed);
    let train = res.select_rows(&train_idx);
    let test = res.select_rows(&test_idx);
    let alpha = alpha.unwrap_or_else(|| default_penalty(train.n()));

    let w_train = hstack_vec(&train.z, &train.d);
    let w_test = hstack_vec(&test.z, &test.d);
    let t_train = hstack_vec(&train.x, &train.d);
    let fit = adviv_fit(&w_train, &t_train, &train.y, alpha)?;
    let resid = |r: &ResidualizedData| -> DVector<f64> {
        let p_x = r.p_x();
        let h = fit.coefficients.rows(0, p_x).into_owned();
        let theta = fit.coefficients[p_x];
        &r.y - &r.x * h - theta * &r.d
    };
    let stat = split_moment_statistic(&w_train, &t_train, &resid(&train), &w_test, &resid(&test), n)?;
    let dof = res.p_z() + 1;
    let critical = chisq_quantile(dof, alpha_sig)?;
    Ok(TestResult::new(
        "primal_violation",
        stat,
        critical,
        PassDirection::Below,
        Some(dof),
        alpha_sig,
    ))
}

/// Split-half chi-square test of whether the dual equation admits a
/// solution. Degrees of freedom `p_X`; passes below the critical value.
pub fn dual_violation_test(
    res: &ResidualizedData,
    alpha: Option<f64>,
    alpha_sig: f64,
    seed: u64,
) -> Result<TestResult> {
    let n = res.n();
    if n < 10 {
        return Err(Error::InvalidInput("dual test needs n >= 10".into()));
    }
    let (train_idx, test_idx) = split_indices(n, 0.5, seed);
    let train = res.select_rows(&train_idx);
    let test = res.select_rows(&test_idx);
    let alpha = alpha.unwrap_or_else(|| default_penalty(train.n()));

    let fit = adviv_fit(&train.x, &train.z, &train.d, alpha)?;
    let gamma = fit.coefficients.clone();
    let r_train = &train.d - &train.z * &gamma;
    let r_test = &test.d - &test.z * &gamma;
    let stat = split_moment_statistic(&train.x, &train.z, &r_train, &test.x, &r_test, n)?;
    let dof = res.p_x();
    let critical = chisq_quantile(dof, alpha_sig)?;
    Ok(TestResult::new(
        "dual_violation",
        stat,
        critical,
        PassDirection::Below,
        Some(dof),
        alpha_sig,
    ))
}

/// Influence rows of the dual nuisance estimate, used to correct the weak
/// test variances for the estimation of gamma.
fn gamma_influence(res: &ResidualizedData, gamma: &DVector<f64>, alpha: f64) -> DMatrix<f64> {
    let n = res.n();
    // Q = E_n[Z X^T] E_n[X X^T]^+ X, the projection of Z on X.
    let b = pinv(&gram(&res.x)) * cross_moment(&res.x, &res.z);
    let q = &res.x * &b;
    let mut qq = gram(&q);
    let lambda = alpha / n as f64;
    for i in 0..qq.nrows() {
        qq[(i, i)] += lambda;
    }
    let qq_inv = pinv(&qq);
    let v = &res.d - &res.z * gamma;
    let mut out = DMatrix::zeros(n, res.p_z());
    for i in 0..n {
        let phi = &qq_inv * (q.row(i).transpose() * v[i]);
        out.row_mut(i).copy_from(&phi.transpose());
    }
    out
}

/// Effective F-test of the engineered instrument's strength.
///
/// The first stage regresses the attribute residual on `V = D~ - gamma^T Z~`;
/// under the null that the Nagar bias exceeds `tau_star` the statistic is
/// noncentral chi-square(1) with noncentrality `1 / tau_star`. Passes when
/// the statistic exceeds the critical value.
pub fn weak_iv_f_test(
    res: &ResidualizedData,
    gamma: &DVector<f64>,
    tau_star: f64,
    alpha_sig: f64,
    variant: WeakTestVariant,
    alpha: f64,
) -> Result<TestResult> {
    let (f, extra) = f_statistic(res, gamma, variant, alpha, true)?;
    let critical = noncentral_chisq1_quantile(1.0 / tau_star, alpha_sig)?;
    let mut result = TestResult::new(
        "weak_iv_f",
        f,
        critical,
        PassDirection::Above,
        Some(1),
        alpha_sig,
    );
    result.params.insert("noncentrality".into(), 1.0 / tau_star);
    result.params.extend(extra);
    Ok(result)
}

fn f_statistic(
    res: &ResidualizedData,
    gamma: &DVector<f64>,
    variant: WeakTestVariant,
    alpha: f64,
    include_correction: bool,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let n = res.n();
    let nf = n as f64;
    let ed2 = res.d.norm_squared() / nf;
    if ed2 <= 0.0 {
        return Err(Error::InvalidInput("zero variance of D~".into()));
    }
    let v = &res.d - &res.z * gamma;
    let ev2 = v.norm_squared() / nf;
    if ev2 <= 0.0 {
        return Err(Error::Numeric("engineered instrument has zero variance".into()));
    }
    let (pi, phi): (f64, DVector<f64>) = match variant {
        WeakTestVariant::Heuristic => {
            let pi = res.d.dot(&v) / nf / ev2;
            // Correction for the estimated gamma through its influence rows.
            let j_tilde: DVector<f64> = {
                let mut s = DVector::zeros(res.p_z());
                for i in 0..n {
                    s += res.z.row(i).transpose() * (2.0 * pi * v[i] - res.d[i]);
                }
                s / nf
            };
            let phi_gamma = if include_correction {
                Some(gamma_influence(res, gamma, alpha))
            } else {
                None
            };
            let mut phi = DVector::zeros(n);
            for i in 0..n {
                let corr = match &phi_gamma {
                    Some(pg) => j_tilde.dot(&pg.row(i).transpose()),
                    None => 0.0,
                };
                phi[i] = (v[i] * (res.d[i] - pi * v[i]) + corr) / ev2;
            }
            (pi, phi)
        }
        WeakTestVariant::Orthogonal => {
            // Plug-in pi for the gradient outcome, then the debiased moment.
            let pi0 = res.d.dot(&v) / nf / ev2;
            let j0 = DVector::from_fn(n, |i, _| 2.0 * pi0 * v[i] - res.d[i]);
            let zeta = adviv_fit(&res.z, &res.x, &j0, alpha)?.coefficients;
            let xz = &res.x * &zeta;
            let mut num = 0.0;
            for i in 0..n {
                num += v[i] * (res.d[i] + xz[i]);
            }
            let pi = num / nf / ev2;
            let mut phi = DVector::zeros(n);
            for i in 0..n {
                phi[i] = (v[i] * (res.d[i] - pi * v[i]) + xz[i] * v[i]) / ev2;
            }
            (pi, phi)
        }
    };
    let sigma_pi2 = phi.norm_squared() / nf / nf;
    if sigma_pi2 <= 0.0 {
        return Err(Error::Numeric("degenerate first-stage variance".into()));
    }
    let f = pi * pi / sigma_pi2;
    let mut extra = BTreeMap::new();
    extra.insert("pi_hat".into(), pi);
    extra.insert("sigma_pi".into(), sigma_pi2.sqrt());
    Ok((f, extra))
}

#[cfg(test)]
pub(crate) fn f_statistic_no_correction(
    res: &ResidualizedData,
    gamma: &DVector<f64>,
) -> Result<f64> {
    Ok(f_statistic(res, gamma, WeakTestVariant::Heuristic, 0.0, false)?.0)
}

/// z-test that `E[D~ V]` is bounded away from zero.
///
/// The statistic `sqrt(n) |pi_hat|` is compared against the `1 - alpha`
/// quantile of a folded normal centered at the slack `epsilon` with the
/// estimated scale. Passes above the critical value.
pub fn weak_iv_z_test(
    res: &ResidualizedData,
    gamma: &DVector<f64>,
    epsilon: f64,
    alpha_sig: f64,
    variant: WeakTestVariant,
    alpha: f64,
) -> Result<TestResult> {
    if epsilon < 0.0 {
        return Err(Error::InvalidInput("epsilon must be >= 0".into()));
    }
    let n = res.n();
    let nf = n as f64;
    let v = &res.d - &res.z * gamma;
    let (pi, phi): (f64, DVector<f64>) = match variant {
        WeakTestVariant::Heuristic => {
            let pi = res.d.dot(&v) / nf;
            let j: DVector<f64> = crate::numerics::moment_vec(&res.z, &res.d);
            let phi_gamma = gamma_influence(res, gamma, alpha);
            let mut phi = DVector::zeros(n);
            for i in 0..n {
                let corr = -j.dot(&phi_gamma.row(i).transpose());
                phi[i] = res.d[i] * v[i] - pi + corr;
            }
            (pi, phi)
        }
        WeakTestVariant::Orthogonal => {
            let neg_d = -&res.d;
            let zeta = adviv_fit(&res.z, &res.x, &neg_d, alpha)?.coefficients;
            let xz = &res.x * &zeta;
            let mut num = 0.0;
            for i in 0..n {
                num += v[i] * (res.d[i] + xz[i]);
            }
            let pi = num / nf;
            let mut phi = DVector::zeros(n);
            for i in 0..n {
                phi[i] = v[i] * res.d[i] - pi + xz[i] * v[i];
            }
            (pi, phi)
        }
    };
    let sigma = (phi.norm_squared() / nf).sqrt().max(1e-300);
    let statistic = nf.sqrt() * pi.abs();
    let critical = folded_normal_quantile(epsilon, sigma, alpha_sig)?;
    let mut result = TestResult::new(
        "weak_iv_z",
        statistic,
        critical,
        PassDirection::Above,
        None,
        alpha_sig,
    );
    result.params.insert("epsilon".into(), epsilon);
    result.params.insert("scale".into(), sigma);
    result.params.insert("pi_hat".into(), pi);
    Ok(result)
}

/// Singular values of `E_n[X~ Z~^T]` and the significance threshold derived
/// from the weighted chi-square bound on the Frobenius error.
pub fn covariance_rank_test(
    res: &ResidualizedData,
    alpha_sig: f64,
    n_mc: usize,
    seed: u64,
) -> Result<RankResult> {
    rank_test_on(&res.x, &res.z, alpha_sig, n_mc, seed)
}

/// Rank test on arbitrary paired residual blocks (also used by the
/// semi-synthetic generator and proxy scoring).
pub fn rank_test_on(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    alpha_sig: f64,
    n_mc: usize,
    seed: u64,
) -> Result<RankResult> {
    if x.ncols() == 0 || z.ncols() == 0 {
        return Err(Error::InvalidInput("rank test needs p_X, p_Z >= 1".into()));
    }
    let n = x.nrows();
    let c = cross_moment(x, z);
    let svals: Vec<f64> = crate::numerics::thin_svd(&c)
        .singular_values
        .iter()
        .cloned()
        .collect();
    let p = x.ncols() * z.ncols();
    let (weights, diagonal_approx) = product_covariance_weights(x, z, p <= RANK_TEST_EXACT_CAP);
    // Entries of V are Cov_n(X_i Z_j, X_k Z_l) / n.
    let weights: Vec<f64> = weights.iter().map(|w| (w / n as f64).max(0.0)).collect();
    let threshold = weighted_chisq_quantile(&weights, alpha_sig, n_mc, seed).sqrt();
    let significant_rank = svals.iter().filter(|&&s| s > threshold).count();
    Ok(RankResult {
        singular_values: svals,
        threshold,
        significant_rank,
        diagonal_approx,
    })
}

/// Eigenvalues of the covariance operator of the entry-wise products
/// `X_i Z_j` (exact) or just its diagonal (approximation for large blocks).
fn product_covariance_weights(x: &DMatrix<f64>, z: &DMatrix<f64>, exact: bool) -> (Vec<f64>, bool) {
    let n = x.nrows();
    let px = x.ncols();
    let pz = z.ncols();
    let p = px * pz;
    let mut products = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        for a in 0..px {
            let xa = x[(i, a)];
            for b in 0..pz {
                products[(i, a * pz + b)] = xa * z[(i, b)];
            }
        }
    }
    let means = DVector::<f64>::from_fn(p, |j, _| products.column(j).sum() / n as f64);
    if exact {
        let mut cov = products.transpose() * &products / n as f64;
        cov.syger(-1.0, &means, &means, 1.0);
        let eig = nalgebra::SymmetricEigen::new(cov);
        (eig.eigenvalues.iter().cloned().collect(), false)
    } else {
        let vars: Vec<f64> = (0..p)
            .map(|j| {
                products
                    .column(j)
                    .iter()
                    .map(|v| (v - means[j]).powi(2))
                    .sum::<f64>()
                    / n as f64
            })
            .collect();
        (vars, true)
    }
}

/// Runs all five tests and combines them into the overall validity flag.
pub fn run_all(
    res: &ResidualizedData,
    nuisances: &NuisanceEstimates,
    cfg: &DiagnosticsConfig,
) -> Result<DiagnosticsReport> {
    if res.p_z() == 0 {
        return Err(Error::InvalidInput("diagnostics need p_Z >= 1".into()));
    }
    if res.p_x() == 0 {
        return Err(Error::InvalidInput("diagnostics need p_X >= 1".into()));
    }
    let n_train = res.n() / 2;
    let alpha_split = Some(cfg.alpha_scale * default_penalty(n_train.max(2)));
    let primal = primal_violation_test(res, alpha_split, cfg.alpha_sig, derive_seed(cfg.seed, 10))?;
    let dual = dual_violation_test(res, alpha_split, cfg.alpha_sig, derive_seed(cfg.seed, 11))?;
    let epsilon = cfg
        .epsilon
        .unwrap_or_else(|| 0.01 * res.d.norm_squared() / res.n() as f64);
    let f_test = weak_iv_f_test(
        res,
        &nuisances.gamma,
        cfg.tau_star,
        cfg.alpha_sig,
        cfg.weak_variant,
        nuisances.alpha_dual,
    )?;
    let z_test = weak_iv_z_test(
        res,
        &nuisances.gamma,
        epsilon,
        cfg.alpha_sig,
        cfg.weak_variant,
        nuisances.alpha_dual,
    )?;
    let rank = covariance_rank_test(res, cfg.alpha_sig, cfg.n_mc, derive_seed(cfg.seed, 12))?;
    let valid =
        primal.passed && dual.passed && f_test.passed && z_test.passed && rank.significant_rank >= 1;
    Ok(DiagnosticsReport {
        primal,
        dual,
        f_test,
        z_test,
        rank,
        valid,
    })
}
