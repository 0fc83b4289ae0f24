//! Shared numerical linear algebra and distribution utilities.
//!
//! Every pseudoinverse in the library goes through the same SVD zero-threshold
//! (`1e-10 * sigma_max`) so that rank-deficient moment matrices are handled
//! consistently across the estimator and the diagnostics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::{Error, Result};

/// Relative cutoff under which singular values are treated as zero.
pub const SVD_RTOL: f64 = 1e-10;

/// Thin singular value decomposition with values sorted descending.
#[derive(Debug, Clone)]
pub struct ThinSVD {
    /// Left singular vectors, one column per retained triple.
    pub u: DMatrix<f64>,
    /// Singular values, descending and non-negative.
    pub singular_values: DVector<f64>,
    /// Right singular vectors, one column per retained triple.
    pub v: DMatrix<f64>,
}

/// Computes the thin SVD of `a`.
pub fn thin_svd(a: &DMatrix<f64>) -> ThinSVD {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let s = svd.singular_values;
    // nalgebra sorts descending already; keep a defensive sort so callers can
    // rely on the invariant.
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap());
    let u = DMatrix::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let v_full = vt.transpose();
    let v = DMatrix::from_columns(&order.iter().map(|&i| v_full.column(i)).collect::<Vec<_>>());
    let singular_values = DVector::from_iterator(order.len(), order.iter().map(|&i| s[i]));
    ThinSVD {
        u,
        singular_values,
        v,
    }
}

/// Moore-Penrose pseudoinverse with the module-wide zero threshold.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = thin_svd(a);
    let smax = svd.singular_values.max();
    let tol = SVD_RTOL * smax;
    let k = svd.singular_values.len();
    let mut d = DMatrix::zeros(k, k);
    for i in 0..k {
        let s = svd.singular_values[i];
        if s > tol && s > 0.0 {
            d[(i, i)] = 1.0 / s;
        }
    }
    &svd.v * d * svd.u.transpose()
}

/// Minimum-norm least-squares solution `x = pinv(A) b`.
///
/// Among all least-squares solutions of `A x = b` this returns the one with
/// smallest Euclidean norm.
pub fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = thin_svd(a);
    let smax = svd.singular_values.max();
    let tol = SVD_RTOL * smax;
    let ub = svd.u.transpose() * b;
    let mut coef = DVector::zeros(svd.singular_values.len());
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        if s > tol && s > 0.0 {
            coef[i] = ub[i] / s;
        }
    }
    &svd.v * coef
}

/// Symmetric positive semi-definite square root of `a`.
pub fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_power(a, 0.5)
}

/// Pseudoinverse square root of a symmetric PSD matrix.
pub fn sym_inv_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_power(a, -0.5)
}

fn sym_power(a: &DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(a.clone());
    let emax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let tol = SVD_RTOL * emax;
    let k = eig.eigenvalues.len();
    let mut d = DMatrix::zeros(k, k);
    for i in 0..k {
        let e = eig.eigenvalues[i];
        if e > tol && e > 0.0 {
            d[(i, i)] = e.powf(p);
        }
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Soft-thresholded estimate of the orthogonal projector onto the range of a
/// whitened covariance estimate.
///
/// Given the SVD `sigma = U diag(l_i) V^T` computed from `n` samples, returns
/// `U diag(l_i / (l_i + n^{-0.2})) U^T`. The shrinkage exponent follows the
/// empirical recommendation; any exponent below 0.5 preserves consistency.
pub fn soft_threshold_projector(sigma: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    assert!(n >= 2, "soft_threshold_projector needs n >= 2");
    let svd = thin_svd(sigma);
    let reg = (n as f64).powf(-0.2);
    let k = svd.u.ncols();
    let mut d = DMatrix::zeros(k, k);
    for i in 0..k {
        let l = svd.singular_values[i];
        d[(i, i)] = l / (l + reg);
    }
    &svd.u * d * svd.u.transpose()
}

/// Low-rank approximation: reconstruct `a` from the singular triples whose
/// value exceeds `tau`.
pub fn low_rank_approx(a: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    assert!(tau >= 0.0, "low_rank_approx threshold must be non-negative");
    let svd = thin_svd(a);
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        if s > tau {
            out += s * svd.u.column(i) * svd.v.column(i).transpose();
        }
    }
    out
}

/// Entry-wise sparsification: keep `v_i` iff `|v_i| > c * se_i`.
pub fn sparse_threshold(v: &DVector<f64>, standard_errors: &DVector<f64>, c: f64) -> DVector<f64> {
    assert_eq!(v.len(), standard_errors.len(), "length mismatch");
    DVector::from_iterator(
        v.len(),
        v.iter()
            .zip(standard_errors.iter())
            .map(|(&vi, &se)| if vi.abs() > c * se { vi } else { 0.0 }),
    )
}

/// Empirical `(1 - alpha)` quantile of a weighted sum of independent
/// chi-square(1) variables, by seeded Monte Carlo.
pub fn weighted_chisq_quantile(weights: &[f64], alpha: f64, n_mc: usize, seed: u64) -> f64 {
    assert!(!weights.is_empty(), "weights must be non-empty");
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must be in (0,1)");
    if weights.iter().all(|&w| w == 0.0) {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let mut s = 0.0;
        for &w in weights {
            let z: f64 = rng.sample(StandardNormal);
            s += w * z * z;
        }
        sums.push(s);
    }
    empirical_quantile(&mut sums, 1.0 - alpha)
}

/// `(1 - alpha)` quantile of the named level from sorted samples.
pub(crate) fn empirical_quantile(samples: &mut [f64], level: f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    let idx = ((level * n as f64).ceil() as usize).clamp(1, n) - 1;
    samples[idx]
}

/// `(1 - alpha)` quantile of the chi-square distribution with `dof` degrees
/// of freedom.
pub fn chisq_quantile(dof: usize, alpha: f64) -> Result<f64> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} not in (0,1)")));
    }
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| Error::InvalidInput(format!("chi-square dof {dof}: {e}")))?;
    Ok(dist.inverse_cdf(1.0 - alpha))
}

/// Standard normal quantile at probability `p`.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// `(1 - alpha)` quantile of the noncentral chi-square distribution with one
/// degree of freedom and noncentrality `c`.
///
/// Uses the representation `(Z + sqrt(c))^2` with `Z ~ N(0,1)`, whose CDF is
/// `Phi(sqrt(x) - sqrt(c)) - Phi(-sqrt(x) - sqrt(c))`, inverted by bisection.
pub fn noncentral_chisq1_quantile(c: f64, alpha: f64) -> Result<f64> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} not in (0,1)")));
    }
    if c < 0.0 {
        return Err(Error::InvalidInput(format!("noncentrality {c} < 0")));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let sqrt_c = c.sqrt();
    let cdf = |x: f64| {
        let r = x.max(0.0).sqrt();
        normal.cdf(r - sqrt_c) - normal.cdf(-r - sqrt_c)
    };
    Ok(invert_monotone_cdf(cdf, 1.0 - alpha, (sqrt_c + 40.0).powi(2)))
}

/// `(1 - alpha)` quantile of the folded normal `|N(center, scale^2)|`.
pub fn folded_normal_quantile(center: f64, scale: f64, alpha: f64) -> Result<f64> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} not in (0,1)")));
    }
    if scale <= 0.0 {
        return Err(Error::InvalidInput(format!("scale {scale} must be > 0")));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let cdf = |x: f64| {
        if x <= 0.0 {
            0.0
        } else {
            normal.cdf((x - center) / scale) - normal.cdf((-x - center) / scale)
        }
    };
    Ok(invert_monotone_cdf(
        cdf,
        1.0 - alpha,
        center.abs() + 40.0 * scale,
    ))
}

fn invert_monotone_cdf(cdf: impl Fn(f64) -> f64, p: f64, mut hi: f64) -> f64 {
    let mut lo = 0.0_f64;
    while cdf(hi) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Sample covariance matrix `E_n[x x^T]` of the rows of `x` (uncentered).
pub fn gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    x.transpose() * x / n
}

/// Uncentered cross-moment `E_n[x y^T]` of paired rows.
pub fn cross_moment(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(x.nrows(), y.nrows(), "row count mismatch");
    let n = x.nrows() as f64;
    x.transpose() * y / n
}

/// Uncentered moment vector `E_n[x y]` for a vector target.
pub fn moment_vec(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    assert_eq!(x.nrows(), y.len(), "row count mismatch");
    let n = x.nrows() as f64;
    x.transpose() * y / n
}

/// Horizontally stacks a matrix and a column vector.
pub fn hstack_vec(m: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    assert_eq!(m.nrows(), v.len(), "row count mismatch");
    let mut out = DMatrix::zeros(m.nrows(), m.ncols() + 1);
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out.set_column(m.ncols(), v);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn seeded_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn min_norm_identity() {
        let a = DMatrix::<f64>::identity(3, 3);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = min_norm_solve(&a, &b);
        assert!((x - b).norm() < 1e-12);
    }

    #[test]
    fn min_norm_underdetermined_symmetric() {
        // A = [[1, 1]], b = (2): the solution line is x1 + x2 = 2; minimum
        // norm picks (1, 1).
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0]);
        let x = min_norm_solve(&a, &b);
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 1.0).abs() < 1e-12);
    }

    /// Independent oracle: rank-revealing QR. The row space of `A` is spanned
    /// by the columns of `Q_r` from a column-pivoted QR of `A^T`; the
    /// minimum-norm solution is `Q_r w` with `w` solving the reduced
    /// least-squares problem.
    fn qr_min_norm_oracle(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
        let at = a.transpose();
        let qr = at.clone().col_piv_qr();
        let q = qr.q();
        let r = qr.r();
        let mut rank = 0;
        let rmax = r.diagonal().iter().cloned().map(f64::abs).fold(0.0, f64::max);
        for i in 0..r.nrows().min(r.ncols()) {
            if r[(i, i)].abs() > 1e-12 * rmax {
                rank += 1;
            }
        }
        let qr_basis = q.columns(0, rank).into_owned();
        // Solve min ||A Q_r w - b|| via normal equations on the reduced space.
        let aq = a * &qr_basis;
        let gram = aq.transpose() * &aq;
        let rhs = aq.transpose() * b;
        let w = gram.lu().solve(&rhs).expect("reduced system solvable");
        qr_basis * w
    }

    #[test]
    fn min_norm_matches_qr_oracle_on_rank_deficient_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        // Random 4x6 rank-3 system.
        let left = seeded_matrix(&mut rng, 4, 3);
        let right = seeded_matrix(&mut rng, 3, 6);
        let a = &left * &right;
        let b = seeded_matrix(&mut rng, 4, 1).column(0).into_owned();
        let x = min_norm_solve(&a, &b);
        let x_oracle = qr_min_norm_oracle(&a, &b);
        assert!(
            ((&a * &x) - (&a * &x_oracle)).norm() < 1e-8,
            "residuals differ"
        );
        assert!((x.norm() - x_oracle.norm()).abs() < 1e-8, "norms differ");
        assert!((x - x_oracle).norm() < 1e-8);
    }

    #[test]
    fn min_norm_recovers_row_space_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = seeded_matrix(&mut rng, 5, 5);
        let x0 = seeded_matrix(&mut rng, 5, 1).column(0).into_owned();
        let b = &a * &x0;
        let x = min_norm_solve(&a, &b);
        // Full-rank square: the projection onto the row space is x0 itself.
        assert!((x - x0).norm() < 1e-8);
    }

    #[test]
    fn soft_projector_single_value_closed_form() {
        // One singular value 1.0 at n = 1e5 (so n^-0.2 = 0.1) gives weight
        // 1 / 1.1.
        let sigma = DMatrix::from_row_slice(1, 1, &[1.0]);
        let p = soft_threshold_projector(&sigma, 100_000);
        assert!((p[(0, 0)] - 1.0 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn soft_projector_zero_matrix() {
        let sigma = DMatrix::zeros(3, 2);
        let p = soft_threshold_projector(&sigma, 10);
        assert!(p.norm() < 1e-14);
    }

    #[test]
    fn soft_projector_matches_eigendecomposition_oracle() {
        // Rank-2 structure with values (5, 3, 1e-9) at n = 1e4.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = seeded_matrix(&mut rng, 3, 3).qr().q();
        let vals = [5.0, 3.0, 1e-9];
        let mut d = DMatrix::zeros(3, 3);
        for i in 0..3 {
            d[(i, i)] = vals[i];
        }
        let v = seeded_matrix(&mut rng, 4, 4).qr().q().columns(0, 3).into_owned();
        let sigma = &q * d * v.transpose();
        let p = soft_threshold_projector(&sigma, 10_000);

        // Oracle: eigen-decompose sigma * sigma^T to get the left singular
        // directions and apply the closed-form weights directly.
        let reg = (10_000.0_f64).powf(-0.2);
        let eig = nalgebra::SymmetricEigen::new(&sigma * sigma.transpose());
        let mut expected = DMatrix::zeros(3, 3);
        for i in 0..3 {
            let l = eig.eigenvalues[i].max(0.0).sqrt();
            let w = l / (l + reg);
            let u_i = eig.eigenvectors.column(i);
            expected += w * u_i * u_i.transpose();
        }
        // The eigen route squares the matrix, so its null-direction weight
        // carries a ~sqrt(eps * ||sigma||^2) noise floor; compare above it.
        assert!((p.clone() - expected).norm() < 1e-6);
        // Top-2 left singular directions are eigenvectors of P with the
        // closed-form weights.
        let svd = thin_svd(&sigma);
        for (i, s) in [5.0, 3.0].iter().enumerate() {
            let u_i = svd.u.column(i).into_owned();
            let w = s / (s + reg);
            assert!((&p * &u_i - w * &u_i).norm() < 1e-8);
        }
        // Frozen weights from the closed form.
        assert!((5.0 / (5.0 + reg) - 0.96928).abs() < 1e-4);
        assert!((3.0 / (3.0 + reg) - 0.94983).abs() < 1e-4);
        // Symmetry and spectral radius contract.
        assert!((p.clone() - p.transpose()).amax() < 1e-10);
        let sp = nalgebra::SymmetricEigen::new(p).eigenvalues.amax();
        assert!(sp < 1.0);
    }

    #[test]
    fn low_rank_approx_tau_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = seeded_matrix(&mut rng, 4, 3);
        let out = low_rank_approx(&a, 0.0);
        assert!((out - a).amax() < 1e-10);
    }

    #[test]
    fn low_rank_approx_tau_above_sigma_max_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = seeded_matrix(&mut rng, 4, 3);
        let smax = thin_svd(&a).singular_values[0];
        let out = low_rank_approx(&a, smax + 1.0);
        assert!(out.amax() == 0.0);
    }

    #[test]
    fn low_rank_approx_denoises_planted_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = seeded_matrix(&mut rng, 6, 1).normalize();
        let v = seeded_matrix(&mut rng, 5, 1).normalize();
        let noise = seeded_matrix(&mut rng, 6, 5) * 1e-6;
        let a = 5.0 * &u * v.transpose() + noise;
        let out = low_rank_approx(&a, 1e-3);
        let rank = thin_svd(&out)
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-9)
            .count();
        assert_eq!(rank, 1);
        let target = 5.0 * &u * v.transpose();
        assert!((out - &target).norm() / target.norm() < 1e-5);
    }

    #[test]
    fn sparse_threshold_examples() {
        let v = DVector::from_vec(vec![1.0, 0.01]);
        let se = DVector::from_vec(vec![0.1, 0.1]);
        let out = sparse_threshold(&v, &se, 2.0);
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], 0.0);
        // c = 0 keeps everything strictly nonzero.
        let out = sparse_threshold(&v, &se, 0.0);
        assert_eq!(out, v);
        let zero = DVector::zeros(2);
        assert_eq!(sparse_threshold(&zero, &se, 0.0), zero);
    }

    #[test]
    fn weighted_chisq_quantile_matches_analytic_chi1() {
        let q = weighted_chisq_quantile(&[1.0], 0.05, 200_000, 11);
        assert!((q - 3.841).abs() < 0.05, "got {q}");
    }

    #[test]
    fn weighted_chisq_quantile_matches_analytic_chi3() {
        let q = weighted_chisq_quantile(&[1.0, 1.0, 1.0], 0.05, 200_000, 12);
        assert!((q - 7.815).abs() < 0.08, "got {q}");
    }

    #[test]
    fn weighted_chisq_quantile_zero_weights() {
        assert_eq!(weighted_chisq_quantile(&[0.0, 0.0], 0.05, 100, 1), 0.0);
    }

    #[test]
    fn weighted_chisq_quantile_monotone_in_weights_and_level() {
        let lo = weighted_chisq_quantile(&[1.0, 0.5], 0.05, 50_000, 9);
        let hi = weighted_chisq_quantile(&[1.5, 0.5], 0.05, 50_000, 9);
        assert!(hi >= lo);
        let tighter = weighted_chisq_quantile(&[1.0, 0.5], 0.01, 50_000, 9);
        assert!(tighter >= lo);
    }

    #[test]
    fn noncentral_quantile_matches_reference_values() {
        // Frozen against scipy.stats.ncx2.ppf(0.95, 1, 10) = 23.10851.
        let q = noncentral_chisq1_quantile(10.0, 0.05).unwrap();
        assert!((q - 23.1085).abs() < 0.01, "got {q}");
        let q0 = noncentral_chisq1_quantile(0.0, 0.05).unwrap();
        assert!((q0 - 3.8415).abs() < 1e-3, "got {q0}");
    }

    #[test]
    fn folded_normal_quantile_standard_case() {
        let q = folded_normal_quantile(0.0, 1.0, 0.05).unwrap();
        assert!((q - 1.95996).abs() < 1e-4, "got {q}");
    }

    #[test]
    fn chisq_quantile_reference_values() {
        // chi2 0.95-quantiles from scipy: dof 14 -> 23.6848, dof 79 -> 100.7486.
        assert!((chisq_quantile(14, 0.05).unwrap() - 23.6848).abs() < 1e-3);
        assert!((chisq_quantile(79, 0.05).unwrap() - 100.7486).abs() < 1e-3);
    }
}
