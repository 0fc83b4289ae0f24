//! Penalized regression primitives and the residualization step that removes
//! the confounders from every working variable.
//!
//! The residualizer is a strategy: anything that can fit `E[target | W]` and
//! predict it back can stand in for the default L1 path (for example a
//! boosted-tree regressor), without touching the estimator.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;

use crate::dataset::DesignMatrices;
use crate::{derive_seed, Error, Result};

const LASSO_TOL: f64 = 1e-7;
const LASSO_MAX_SWEEPS: usize = 10_000;

/// A fitted linear model on the original feature scale.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub coefficients: DVector<f64>,
    pub intercept: f64,
    pub penalty: f64,
}

impl LinearModel {
    pub fn predict(&self, features: &DMatrix<f64>) -> DVector<f64> {
        assert_eq!(features.ncols(), self.coefficients.len());
        features * &self.coefficients + DVector::from_element(features.nrows(), self.intercept)
    }

    /// Predicted probabilities for a logistic model, clipped away from 0 and 1.
    pub fn predict_proba(&self, features: &DMatrix<f64>) -> DVector<f64> {
        self.predict(features)
            .map(|t| (1.0 / (1.0 + (-t).exp())).clamp(1e-6, 1.0 - 1e-6))
    }
}

fn check_finite(features: &DMatrix<f64>, target: &DVector<f64>) -> Result<()> {
    if features.iter().any(|v| !v.is_finite()) || target.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite input".into()));
    }
    Ok(())
}

struct Standardized {
    cols: DMatrix<f64>,
    means: DVector<f64>,
    sds: DVector<f64>,
}

fn standardize(features: &DMatrix<f64>) -> Standardized {
    let n = features.nrows() as f64;
    let p = features.ncols();
    let mut cols = features.clone();
    let mut means = DVector::zeros(p);
    let mut sds = DVector::zeros(p);
    for j in 0..p {
        let mean = features.column(j).sum() / n;
        let var = features
            .column(j)
            .iter()
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        means[j] = mean;
        sds[j] = sd;
        for i in 0..features.nrows() {
            cols[(i, j)] = if sd > 0.0 {
                (features[(i, j)] - mean) / sd
            } else {
                0.0
            };
        }
    }
    Standardized { cols, means, sds }
}

fn soft(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// L1-penalized least squares by cyclic coordinate descent.
///
/// Minimizes `(1/n) sum_i (y_i - beta . x_i - b)^2 + lambda ||beta||_1` with an
/// unpenalized intercept. Coordinates are updated on internally standardized
/// features; returned coefficients are on the original scale.
pub fn fit_lasso(
    features: &DMatrix<f64>,
    target: &DVector<f64>,
    lambda: f64,
) -> Result<LinearModel> {
    if features.nrows() != target.len() || target.is_empty() {
        return Err(Error::InvalidInput("feature/target size mismatch".into()));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidInput("lambda must be >= 0".into()));
    }
    check_finite(features, target)?;
    let n = target.len() as f64;
    let p = features.ncols();
    let y_mean = target.sum() / n;
    if p == 0 {
        return Ok(LinearModel {
            coefficients: DVector::zeros(0),
            intercept: y_mean,
            penalty: lambda,
        });
    }
    let std = standardize(features);
    let yc = target.map(|v| v - y_mean);

    // Penalty applies to the original coefficient beta_j = beta_std_j / sd_j,
    // so each standardized coordinate carries threshold lambda / (2 sd_j).
    let mut beta = DVector::<f64>::zeros(p);
    let mut residual = yc.clone();
    let mut gap = f64::INFINITY;
    let mut converged = false;
    for _ in 0..LASSO_MAX_SWEEPS {
        let mut max_update: f64 = 0.0;
        for j in 0..p {
            let sd = std.sds[j];
            if sd == 0.0 {
                continue;
            }
            let xj = std.cols.column(j);
            let old = beta[j];
            let rho = xj.dot(&residual) / n + old;
            let new = soft(rho, lambda / (2.0 * sd));
            if new != old {
                residual -= (new - old) * xj;
                beta[j] = new;
            }
            max_update = max_update.max((new - old).abs());
        }
        gap = max_update;
        if max_update < LASSO_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "lasso did not converge in {LASSO_MAX_SWEEPS} sweeps (final gap {gap:.3e})"
        )));
    }
    let mut coefficients = DVector::zeros(p);
    for j in 0..p {
        if std.sds[j] > 0.0 {
            coefficients[j] = beta[j] / std.sds[j];
        }
    }
    let intercept = y_mean - coefficients.dot(&std.means);
    Ok(LinearModel {
        coefficients,
        intercept,
        penalty: lambda,
    })
}

/// Value of the lasso objective for a fitted model, on the original scale.
pub fn lasso_objective(
    features: &DMatrix<f64>,
    target: &DVector<f64>,
    model: &LinearModel,
    lambda: f64,
) -> f64 {
    let r = target - model.predict(features);
    r.norm_squared() / target.len() as f64
        + lambda * model.coefficients.iter().map(|c| c.abs()).sum::<f64>()
}

/// Smallest penalty that zeroes every coefficient of the stated objective.
pub fn lambda_max(features: &DMatrix<f64>, target: &DVector<f64>) -> f64 {
    let n = target.len() as f64;
    let y_mean = target.sum() / n;
    let yc = target.map(|v| v - y_mean);
    let mut lmax = 0.0_f64;
    for j in 0..features.ncols() {
        let mean = features.column(j).sum() / n;
        let dot = features
            .column(j)
            .iter()
            .zip(yc.iter())
            .map(|(&x, &r)| (x - mean) * r)
            .sum::<f64>();
        lmax = lmax.max(2.0 * dot.abs() / n);
    }
    lmax
}

/// Default penalty path: 20 log-spaced values from `lambda_max` down to
/// `lambda_max * 1e-4`, descending.
pub fn default_lambda_grid(features: &DMatrix<f64>, target: &DVector<f64>) -> Vec<f64> {
    let lmax = lambda_max(features, target);
    if lmax <= 0.0 {
        return vec![0.0];
    }
    let k = 20;
    (0..k)
        .map(|i| lmax * 1e-4_f64.powf(i as f64 / (k - 1) as f64))
        .collect()
}

/// Fold assignment for `n` rows into `k` folds, seeded and deterministic.
pub fn crossfit_folds(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut fold = vec![0usize; n];
    for (pos, &row) in idx.iter().enumerate() {
        fold[row] = pos % k;
    }
    fold
}

/// Selects the penalty minimizing average held-out squared error over
/// `n_splits` folds; ties break toward the larger penalty.
pub fn select_penalty_semi_crossfit(
    features: &DMatrix<f64>,
    target: &DVector<f64>,
    grid: &[f64],
    n_splits: usize,
    seed: u64,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty penalty grid".into()));
    }
    if target.len() < n_splits || n_splits < 2 {
        return Err(Error::InvalidInput(format!(
            "need n >= n_splits >= 2, got n={} splits={}",
            target.len(),
            n_splits
        )));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let folds = crossfit_folds(target.len(), n_splits, seed);
    let mut best = (f64::INFINITY, grid[0]);
    for &lambda in &grid {
        let mut total_err = 0.0;
        let mut total_count = 0usize;
        for f in 0..n_splits {
            let train: Vec<usize> = (0..target.len()).filter(|&i| folds[i] != f).collect();
            let test: Vec<usize> = (0..target.len()).filter(|&i| folds[i] == f).collect();
            if test.is_empty() || train.is_empty() {
                continue;
            }
            let model = fit_lasso(
                &features.select_rows(&train),
                &target.select_rows(&train),
                lambda,
            )?;
            let preds = model.predict(&features.select_rows(&test));
            for (pos, &i) in test.iter().enumerate() {
                total_err += (target[i] - preds[pos]).powi(2);
            }
            total_count += test.len();
        }
        let mse = total_err / total_count as f64;
        // Ascending grid: an equal score at a larger penalty replaces the
        // incumbent, which implements the tie rule.
        if mse <= best.0 {
            best = (mse, lambda);
        }
    }
    Ok(best.1)
}

/// L2-penalized logistic regression by damped Newton iterations.
///
/// Minimizes `-(1/n) loglik + lambda2 ||beta||^2` with an unpenalized
/// intercept. Predicted probabilities are clipped to `[1e-6, 1 - 1e-6]`.
pub fn fit_logistic(
    features: &DMatrix<f64>,
    target: &DVector<f64>,
    lambda2: f64,
) -> Result<LinearModel> {
    if features.nrows() != target.len() || target.is_empty() {
        return Err(Error::InvalidInput("feature/target size mismatch".into()));
    }
    if lambda2 < 0.0 {
        return Err(Error::InvalidInput("lambda2 must be >= 0".into()));
    }
    check_finite(features, target)?;
    if target.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidInput("logistic target must be in {0,1}".into()));
    }
    let n = target.len();
    let p = features.ncols();
    // Augmented parameter vector, intercept first.
    let mut theta = DVector::<f64>::zeros(p + 1);
    let xaug = {
        let mut m = DMatrix::zeros(n, p + 1);
        m.set_column(0, &DVector::from_element(n, 1.0));
        m.view_mut((0, 1), (n, p)).copy_from(features);
        m
    };
    let objective = |theta: &DVector<f64>| -> f64 {
        let eta = &xaug * theta;
        let mut nll = 0.0;
        for i in 0..n {
            let e = eta[i];
            nll += if e > 0.0 {
                e + (1.0 + (-e).exp()).ln()
            } else {
                (1.0 + e.exp()).ln()
            };
            nll -= target[i] * e;
        }
        nll / n as f64 + lambda2 * theta.rows(1, p).norm_squared()
    };
    let mut f_old = objective(&theta);
    for _ in 0..200 {
        let eta = &xaug * &theta;
        let probs = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let mut grad = xaug.transpose() * (&probs - target) / n as f64;
        let mut hess = DMatrix::zeros(p + 1, p + 1);
        for i in 0..n {
            let w = probs[i] * (1.0 - probs[i]);
            let xi = xaug.row(i);
            hess.syger(w / n as f64, &xi.transpose(), &xi.transpose(), 1.0);
        }
        hess.fill_upper_triangle_with_lower_triangle();
        for j in 1..=p {
            grad[j] += 2.0 * lambda2 * theta[j];
            hess[(j, j)] += 2.0 * lambda2;
        }
        // Tiny ridge so separation shows up as parameter blow-up rather than
        // a solver panic.
        for j in 0..=p {
            hess[(j, j)] += 1e-12;
        }
        let step = hess
            .lu()
            .solve(&grad)
            .ok_or_else(|| Error::Numeric("singular Hessian in logistic fit".into()))?;
        let mut t = 1.0;
        let mut candidate = &theta - t * &step;
        let mut f_new = objective(&candidate);
        let mut backtracks = 0;
        while f_new > f_old + 1e-12 && backtracks < 40 {
            t *= 0.5;
            candidate = &theta - t * &step;
            f_new = objective(&candidate);
            backtracks += 1;
        }
        theta = candidate;
        let done = (f_old - f_new).abs() < 1e-12 && step.norm() * t < 1e-10;
        f_old = f_new;
        if done {
            break;
        }
    }
    if lambda2 == 0.0 {
        // Unpenalized separation check: a strictly correct signed margin on
        // every row means the likelihood is unbounded along this direction.
        let eta = &xaug * &theta;
        let separated = theta.rows(1, p).norm() > 1.0
            && (0..n).all(|i| (2.0 * target[i] - 1.0) * eta[i] > 0.0);
        if separated || theta.rows(1, p).norm() > 1e6 {
            return Err(Error::Numeric(
                "perfect separation detected; refit with lambda2 > 0".into(),
            ));
        }
    }
    Ok(LinearModel {
        coefficients: theta.rows(1, p).into_owned(),
        intercept: theta[0],
        penalty: lambda2,
    })
}

/// Penalized logistic objective value, for oracle comparisons.
pub fn logistic_objective(
    features: &DMatrix<f64>,
    target: &DVector<f64>,
    model: &LinearModel,
    lambda2: f64,
) -> f64 {
    let eta = model.predict(features);
    let n = target.len();
    let mut nll = 0.0;
    for i in 0..n {
        let e = eta[i];
        nll += if e > 0.0 {
            e + (1.0 + (-e).exp()).ln()
        } else {
            (1.0 + e.exp()).ln()
        };
        nll -= target[i] * e;
    }
    nll / n as f64 + lambda2 * model.coefficients.norm_squared()
}

/// A fitted conditional-mean predictor used by the residualization step.
pub trait Predictor: Send + Sync {
    fn predict(&self, w: &DMatrix<f64>) -> DVector<f64>;
}

impl Predictor for LinearModel {
    fn predict(&self, w: &DMatrix<f64>) -> DVector<f64> {
        LinearModel::predict(self, w)
    }
}

/// Strategy interface for the residualizer: fit `E[target | W]` and report
/// the penalty level used, when one applies.
pub trait ResidualStrategy: Send + Sync {
    fn fit(
        &self,
        w: &DMatrix<f64>,
        target: &DVector<f64>,
        seed: u64,
    ) -> Result<(Arc<dyn Predictor>, Option<f64>)>;
}

/// The default strategy: lasso with the penalty chosen by semi-cross-fitting,
/// i.e. select the penalty by K-fold validation, then refit once on all data.
pub struct LassoResidualizer {
    /// Explicit penalty grid; when absent a 20-point log-spaced path from
    /// `lambda_max` down to `lambda_max * 1e-4` is derived per column.
    pub grid: Option<Vec<f64>>,
    pub n_splits: usize,
}

impl Default for LassoResidualizer {
    fn default() -> Self {
        LassoResidualizer {
            grid: None,
            n_splits: 3,
        }
    }
}

impl ResidualStrategy for LassoResidualizer {
    fn fit(
        &self,
        w: &DMatrix<f64>,
        target: &DVector<f64>,
        seed: u64,
    ) -> Result<(Arc<dyn Predictor>, Option<f64>)> {
        let grid = match &self.grid {
            Some(g) => g.clone(),
            None => default_lambda_grid(w, target),
        };
        let lambda = if grid.len() == 1 {
            grid[0]
        } else {
            select_penalty_semi_crossfit(w, target, &grid, self.n_splits, seed)?
        };
        let model = fit_lasso(w, target, lambda)?;
        Ok((Arc::new(model), Some(lambda)))
    }
}

/// One residualized column together with its fitted model.
pub struct ColumnFit {
    pub label: String,
    pub penalty: Option<f64>,
    pub predictor: Arc<dyn Predictor>,
}

/// The four residual blocks `V - E[V | W]` plus the fitted models.
pub struct ResidualizedData {
    pub d: DVector<f64>,
    pub z: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub z_labels: Vec<String>,
    pub x_labels: Vec<String>,
    pub fits: Vec<ColumnFit>,
}

impl ResidualizedData {
    pub fn n(&self) -> usize {
        self.d.len()
    }

    pub fn p_z(&self) -> usize {
        self.z.ncols()
    }

    pub fn p_x(&self) -> usize {
        self.x.ncols()
    }

    /// Restricts all blocks to the given rows (used by split-half tests,
    /// bootstrap and stratified re-estimation). Fitted models are not carried.
    pub fn select_rows(&self, rows: &[usize]) -> ResidualizedData {
        ResidualizedData {
            d: self.d.select_rows(rows),
            z: self.z.select_rows(rows),
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            z_labels: self.z_labels.clone(),
            x_labels: self.x_labels.clone(),
            fits: Vec::new(),
        }
    }

    /// Restricts to column subsets of the proxy blocks, keeping all rows.
    pub fn select_proxy_columns(&self, x_cols: &[usize], z_cols: &[usize]) -> ResidualizedData {
        ResidualizedData {
            d: self.d.clone(),
            z: self.z.select_columns(z_cols),
            x: self.x.select_columns(x_cols),
            y: self.y.clone(),
            z_labels: z_cols.iter().map(|&j| self.z_labels[j].clone()).collect(),
            x_labels: x_cols.iter().map(|&j| self.x_labels[j].clone()).collect(),
            fits: Vec::new(),
        }
    }
}

/// Settings for [`residualize`].
pub struct ResidualizeConfig {
    pub grid: Option<Vec<f64>>,
    pub n_splits: usize,
    pub seed: u64,
}

impl Default for ResidualizeConfig {
    fn default() -> Self {
        ResidualizeConfig {
            grid: None,
            n_splits: 3,
            seed: 0,
        }
    }
}

/// Residualizes W out of D, Z, X and Y with the default lasso strategy.
pub fn residualize(data: &DesignMatrices, cfg: &ResidualizeConfig) -> Result<ResidualizedData> {
    let strategy = LassoResidualizer {
        grid: cfg.grid.clone(),
        n_splits: cfg.n_splits,
    };
    residualize_with(data, &strategy, cfg.seed)
}

/// Residualizes with an arbitrary strategy. Columns fit in parallel; each fit
/// is pure and receives a seed derived from its column index.
pub fn residualize_with(
    data: &DesignMatrices,
    strategy: &dyn ResidualStrategy,
    seed: u64,
) -> Result<ResidualizedData> {
    let n = data.n();
    let mut columns: Vec<(String, DVector<f64>)> = Vec::new();
    columns.push(("D".to_string(), data.d.clone()));
    for j in 0..data.z.ncols() {
        columns.push((data.z_labels[j].clone(), data.z.column(j).into_owned()));
    }
    for j in 0..data.x.ncols() {
        columns.push((data.x_labels[j].clone(), data.x.column(j).into_owned()));
    }
    columns.push(("Y".to_string(), data.y.clone()));

    let results: Vec<Result<(DVector<f64>, ColumnFit)>> = columns
        .par_iter()
        .enumerate()
        .map(|(idx, (label, col))| {
            if data.w.ncols() == 0 {
                // No confounders: the residual is the centered original.
                let mean = col.sum() / n as f64;
                let model = LinearModel {
                    coefficients: DVector::zeros(0),
                    intercept: mean,
                    penalty: 0.0,
                };
                return Ok((
                    col.map(|v| v - mean),
                    ColumnFit {
                        label: label.clone(),
                        penalty: None,
                        predictor: Arc::new(model),
                    },
                ));
            }
            let (predictor, penalty) = strategy.fit(&data.w, col, derive_seed(seed, idx as u64))?;
            let residual = col - predictor.predict(&data.w);
            Ok((
                residual,
                ColumnFit {
                    label: label.clone(),
                    penalty,
                    predictor,
                },
            ))
        })
        .collect();

    let mut residuals = Vec::with_capacity(columns.len());
    let mut fits = Vec::with_capacity(columns.len());
    for r in results {
        let (res, fit) = r?;
        residuals.push(res);
        fits.push(fit);
    }

    let p_z = data.z.ncols();
    let p_x = data.x.ncols();
    let d = residuals[0].clone();
    let y = residuals[1 + p_z + p_x].clone();
    let z = if p_z == 0 {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(
            &residuals[1..1 + p_z]
                .iter()
                .map(|c| c.column(0))
                .collect::<Vec<_>>(),
        )
    };
    let x = if p_x == 0 {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(
            &residuals[1 + p_z..1 + p_z + p_x]
                .iter()
                .map(|c| c.column(0))
                .collect::<Vec<_>>(),
        )
    };
    Ok(ResidualizedData {
        d,
        z,
        x,
        y,
        z_labels: data.z_labels.clone(),
        x_labels: data.x_labels.clone(),
        fits,
    })
}
