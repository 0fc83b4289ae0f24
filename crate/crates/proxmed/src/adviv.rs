//! The l2-regularized adversarial IV solver.
//!
//! This single primitive backs the primal fit, the dual fit and every
//! auxiliary nuisance fit. For linear function classes the adversarial game
//! has the closed form of a regularized two-stage least squares: a
//! minimum-norm first stage projecting the treatments on the instruments,
//! followed by a ridge-regularized second stage with penalty level
//! `lambda = alpha / n`.

use nalgebra::{DMatrix, DVector};

use crate::numerics::{cross_moment, gram, min_norm_solve, moment_vec, pinv};
use crate::{Error, Result};

/// A fitted adversarial IV solution.
#[derive(Debug, Clone)]
pub struct AdvIVFit {
    /// Second-stage coefficients on the treatments.
    pub coefficients: DVector<f64>,
    /// First-stage map: `Q = first_stage^T z` reproduces the projected
    /// instruments deterministically.
    pub first_stage: DMatrix<f64>,
    /// Penalty hyperparameter `alpha`.
    pub alpha: f64,
    /// Effective penalty level `alpha / n`.
    pub lambda: f64,
}

impl AdvIVFit {
    /// Projected instruments `Q` for the given instrument rows.
    pub fn project(&self, instruments: &DMatrix<f64>) -> DMatrix<f64> {
        instruments * &self.first_stage
    }
}

/// Solves the linear IV moment `E[(y - theta^T x) z] = 0` by the regularized
/// adversarial method.
///
/// With `alpha = 0` and an invertible projected-treatment covariance this is
/// exact two-stage least squares; as `alpha` grows the solution shrinks to
/// zero. Covariances are pseudo-inverted, so rank-deficient instrument sets
/// are handled by minimum-norm projection.
pub fn adviv_fit(
    instruments: &DMatrix<f64>,
    treatments: &DMatrix<f64>,
    outcome: &DVector<f64>,
    alpha: f64,
) -> Result<AdvIVFit> {
    let n = outcome.len();
    if n < 2 {
        return Err(Error::InvalidInput("adviv_fit needs n >= 2".into()));
    }
    if instruments.nrows() != n || treatments.nrows() != n {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: z {}x{}, x {}x{}, y {}",
            instruments.nrows(),
            instruments.ncols(),
            treatments.nrows(),
            treatments.ncols(),
            n
        )));
    }
    if alpha < 0.0 {
        return Err(Error::InvalidInput("alpha must be >= 0".into()));
    }
    if instruments.iter().any(|v| !v.is_finite())
        || treatments.iter().any(|v| !v.is_finite())
        || outcome.iter().any(|v| !v.is_finite())
    {
        return Err(Error::InvalidInput("non-finite inputs".into()));
    }
    let lambda = alpha / n as f64;
    // First stage: minimum-norm linear prediction of the treatments from the
    // instruments, B = E_n[zz^T]^+ E_n[zx^T].
    let zz = gram(instruments);
    let zx = cross_moment(instruments, treatments);
    let first_stage = pinv(&zz) * zx;
    let q = instruments * &first_stage;
    // Second stage: theta = (E_n[qq^T] + lambda I)^+ E_n[q y].
    let mut qq = gram(&q);
    for i in 0..qq.nrows() {
        qq[(i, i)] += lambda;
    }
    let qy = moment_vec(&q, outcome);
    let coefficients = min_norm_solve(&qq, &qy);
    Ok(AdvIVFit {
        coefficients,
        first_stage,
        alpha,
        lambda,
    })
}

/// Theoretically driven default penalty `alpha = n^{0.3}`, i.e. an effective
/// level `lambda = n^{-0.7}` that decays faster than root-n.
pub fn default_penalty(n: usize) -> f64 {
    (n as f64).powf(0.3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::moment_vec;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn exogenous_case_collapses_to_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, 100, 1);
        let y = 2.0 * x.column(0).into_owned();
        let fit = adviv_fit(&x, &x, &y, 0.0).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn full_shrinkage_as_alpha_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = randn(&mut rng, 50, 2);
        let x = randn(&mut rng, 50, 2) + &z;
        let y = x.column(0).into_owned();
        let fit = adviv_fit(&z, &x, &y, 1e12).unwrap();
        assert!(fit.coefficients.amax() < 1e-6);
    }

    #[test]
    fn shrinkage_is_monotone_along_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = randn(&mut rng, 200, 2);
        let x = &z * DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 1.0]) + 0.1 * randn(&mut rng, 200, 2);
        let y = &x * DVector::from_vec(vec![1.0, -1.0]) + 0.1 * randn(&mut rng, 200, 1).column(0).into_owned();
        // As alpha decreases, the solution norm is non-decreasing.
        let mut last = 0.0_f64;
        for alpha in [1e4, 1e2, 1.0, 0.0] {
            let fit = adviv_fit(&z, &x, &y, alpha).unwrap();
            let norm = fit.coefficients.norm();
            assert!(norm + 1e-9 >= last, "norm shrank from {last} to {norm}");
            last = norm;
        }
    }

    /// Independent closed-form 2SLS oracle assembled from raw matrix products
    /// with plain LU solves (no shared pseudoinverse path).
    fn two_sls_oracle(z: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        let ztz = z.transpose() * z;
        let ztx = z.transpose() * x;
        let zty = z.transpose() * y;
        let b = ztz.clone().lu().solve(&ztx).expect("full-rank instruments");
        let xpx = b.transpose() * &ztx;
        let xpy = b.transpose() * &zty;
        xpx.lu().solve(&xpy).expect("full-rank projected treatments")
    }

    #[test]
    fn matches_two_sls_oracle_on_seeded_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 200;
        let z = randn(&mut rng, n, 4);
        let mix = randn(&mut rng, 4, 2);
        let x = &z * &mix + 0.5 * randn(&mut rng, n, 2);
        let y = &x * DVector::from_vec(vec![1.5, -0.5])
            + 0.3 * randn(&mut rng, n, 1).column(0).into_owned();
        let fit = adviv_fit(&z, &x, &y, 0.0).unwrap();
        let oracle = two_sls_oracle(&z, &x, &y);
        assert!((fit.coefficients - oracle).amax() < 1e-8);
    }

    #[test]
    fn first_stage_orthogonality_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = randn(&mut rng, 150, 3);
        let x = &z * randn(&mut rng, 3, 2) + randn(&mut rng, 150, 2);
        let y = randn(&mut rng, 150, 1).column(0).into_owned();
        let fit = adviv_fit(&z, &x, &y, 1.0).unwrap();
        let q = fit.project(&z);
        // E_n[q (x - q)^T] = 0, the identity E_n[q x^T] = E_n[q q^T].
        let gap = (cross_moment(&q, &x) - gram(&q)).amax();
        assert!(gap < 1e-8, "orthogonality gap {gap}");
    }

    #[test]
    fn moment_identity_at_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = randn(&mut rng, 120, 3);
        let x = &z * randn(&mut rng, 3, 3) + 0.2 * randn(&mut rng, 120, 3);
        let y = &x * DVector::from_vec(vec![0.5, -1.0, 0.25])
            + 0.1 * randn(&mut rng, 120, 1).column(0).into_owned();
        let alpha = 3.0;
        let fit = adviv_fit(&z, &x, &y, alpha).unwrap();
        let q = fit.project(&z);
        let resid = &y - &x * &fit.coefficients;
        // The ridge optimality condition: E_n[Q(Y - X theta)] = lambda theta.
        let moment = moment_vec(&q, &resid) - fit.lambda * &fit.coefficients;
        assert!(moment.amax() < 1e-8, "moment residual {}", moment.amax());
    }

    #[test]
    fn default_penalty_schedule() {
        assert!((default_penalty(1) - 1.0).abs() < 1e-12);
        assert!((default_penalty(100_000) - 10f64.powf(1.5)).abs() < 1e-9);
        // lambda(n) = alpha / n = n^{-0.7} decreases and lambda sqrt(n) -> 0.
        let mut last_lambda = f64::INFINITY;
        let mut last_scaled = f64::INFINITY;
        for n in [100usize, 10_000, 1_000_000] {
            let lambda = default_penalty(n) / n as f64;
            assert!(lambda < last_lambda);
            let scaled = lambda * (n as f64).sqrt();
            assert!(scaled < last_scaled);
            last_lambda = lambda;
            last_scaled = scaled;
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let z = DMatrix::zeros(3, 1);
        let x = DMatrix::zeros(4, 1);
        let y = DVector::zeros(3);
        assert!(adviv_fit(&z, &x, &y, 0.0).is_err());
        let x2 = DMatrix::from_column_slice(3, 1, &[1.0, f64::INFINITY, 0.0]);
        assert!(adviv_fit(&z, &x2, &y, 0.0).is_err());
        assert!(adviv_fit(&z, &DMatrix::zeros(3, 1), &y, -1.0).is_err());
    }
}
