//! Shared fixtures for unit tests: hand-built residual blocks and a planted
//! factor-model generator with controllable violations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::regress::ResidualizedData;

pub(crate) fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Orthonormalized k x p loadings scaled to a fixed strength, so planted
/// factor structures stay well conditioned across seeds.
pub(crate) fn ortho_loadings(rng: &mut ChaCha8Rng, k: usize, p: usize, scale: f64) -> DMatrix<f64> {
    let a = randn(rng, p, k);
    scale * a.qr().q().transpose()
}

pub(crate) fn residuals_from_parts(
    d: DVector<f64>,
    z: DMatrix<f64>,
    x: DMatrix<f64>,
    y: DVector<f64>,
) -> ResidualizedData {
    let z_labels = (0..z.ncols()).map(|j| format!("z{j}")).collect();
    let x_labels = (0..x.ncols()).map(|j| format!("x{j}")).collect();
    ResidualizedData {
        d,
        z,
        x,
        y,
        z_labels,
        x_labels,
        fits: Vec::new(),
    }
}

/// Factor-model residual data with optional planted violations.
///
/// `z_to_y` plants a direct Z1 -> Y edge (primal violation); `d_to_x` turns
/// X1 into a pure violator (its mediator loading is replaced by a direct
/// D edge); `sigma_m = 0` makes the mediator deterministic in D (weak
/// identification). The true direct effect of D on Y is 0.3.
#[allow(clippy::too_many_arguments)]
pub(crate) fn synth_residuals(
    seed: u64,
    n: usize,
    k: usize,
    p_z: usize,
    p_x: usize,
    a: f64,
    sigma_m: f64,
    z_to_y: f64,
    d_to_x: f64,
) -> ResidualizedData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = DVector::from_fn(n, |_, _| if rng.gen::<f64>() < 0.5 { 0.5 } else { -0.5 });
    let mut m = randn(&mut rng, n, k) * sigma_m;
    for i in 0..n {
        for j in 0..k {
            m[(i, j)] += a * d[i];
        }
    }
    let g_load = ortho_loadings(&mut rng, k, p_z, 1.5);
    let f_load = ortho_loadings(&mut rng, k, p_x, 1.5);
    let mut z = &m * &g_load + 0.6 * randn(&mut rng, n, p_z);
    let mut x = &m * &f_load + 0.6 * randn(&mut rng, n, p_x);
    if d_to_x != 0.0 {
        let noise = randn(&mut rng, n, 1);
        for i in 0..n {
            x[(i, 0)] = d_to_x * d[i] + 0.6 * noise[(i, 0)];
        }
    }
    // Proxy blocks standardized column-wise, matching what the encoding and
    // residualization pipeline actually feeds downstream.
    standardize_columns(&mut z);
    standardize_columns(&mut x);
    let b = DVector::from_fn(k, |j, _| 0.5 + 0.1 * j as f64);
    let mut y = &m * &b + 0.3 * &d + 0.5 * randn(&mut rng, n, 1).column(0).into_owned();
    for i in 0..n {
        y[i] += z_to_y * z[(i, 0)];
    }
    residuals_from_parts(d, z, x, y)
}

pub(crate) fn standardize_columns(m: &mut DMatrix<f64>) {
    let n = m.nrows() as f64;
    for j in 0..m.ncols() {
        let mean = m.column(j).sum() / n;
        let sd = (m.column(j).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 0.0 {
            for i in 0..m.nrows() {
                m[(i, j)] = (m[(i, j)] - mean) / sd;
            }
        }
    }
}
