//! Post-estimation robustness tooling: weak-instrument confidence regions,
//! influence diagnostics with exact leave-one-out deltas, bootstrap stages
//! and stratified re-estimation.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::adviv::default_penalty;
use crate::dataset::DesignMatrices;
use crate::estimator::{
    final_estimate, solve_dual, solve_primal, EffectEstimate, NuisanceEstimates, PipelineOptions,
};
use crate::numerics::chisq_quantile;
use crate::regress::{residualize, ResidualizeConfig, ResidualizedData};
use crate::{derive_seed, Error, Result};

/// Weak-instrument confidence region from grid inversion of the orthogonal
/// moment.
#[derive(Debug, Clone, Serialize)]
pub struct WeakCiResult {
    pub low: f64,
    pub high: f64,
    /// No grid point was accepted.
    pub empty: bool,
    /// The accepted set was a contiguous run of grid points.
    pub contiguous: bool,
    pub alpha: f64,
}

/// Grid-inversion confidence region: accept `theta` iff
/// `C(theta) <= q_{chi2(1)}(1 - alpha)` where `C` is the self-normalized
/// squared moment.
pub fn weak_ci(
    res: &ResidualizedData,
    h: &DVector<f64>,
    gamma: &DVector<f64>,
    alpha: f64,
    grid_low: f64,
    grid_high: f64,
    step: f64,
) -> Result<WeakCiResult> {
    if grid_low >= grid_high || step <= 0.0 {
        return Err(Error::InvalidInput("weak CI grid must satisfy low < high, step > 0".into()));
    }
    let n = res.n() as f64;
    let v = &res.d - &res.z * gamma;
    let ybar = &res.y - &res.x * h;
    let critical = chisq_quantile(1, alpha)?;
    let points = ((grid_high - grid_low) / step).floor() as usize + 1;
    let mut accepted: Vec<f64> = Vec::new();
    let mut runs = 0usize;
    let mut in_run = false;
    for k in 0..points {
        let theta = grid_low + k as f64 * step;
        let mut mean = 0.0;
        for i in 0..res.n() {
            mean += (ybar[i] - res.d[i] * theta) * v[i];
        }
        mean /= n;
        let mut var = 0.0;
        for i in 0..res.n() {
            var += ((ybar[i] - res.d[i] * theta) * v[i] - mean).powi(2);
        }
        var /= n;
        let c = if var > 0.0 {
            n * mean * mean / var
        } else if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        if c <= critical {
            accepted.push(theta);
            if !in_run {
                runs += 1;
                in_run = true;
            }
        } else {
            in_run = false;
        }
    }
    if accepted.is_empty() {
        return Ok(WeakCiResult {
            low: f64::NAN,
            high: f64::NAN,
            empty: true,
            contiguous: true,
            alpha,
        });
    }
    Ok(WeakCiResult {
        low: accepted[0],
        high: *accepted.last().unwrap(),
        empty: false,
        contiguous: runs == 1,
        alpha,
    })
}

/// Per-row influence diagnostics for the final-stage IV regression.
#[derive(Debug, Clone, Serialize)]
pub struct InfluenceRecord {
    pub row: usize,
    /// Asymptotic influence approximation of `theta - theta_{-i}`.
    pub score: f64,
    /// Exact leave-one-out delta with the nuisances held fixed.
    pub exact_loo: f64,
    /// Rank by descending score.
    pub rank: usize,
    /// First-stage leverage of the final IV regression.
    pub hat: f64,
    /// Studentized second-stage residual.
    pub studentized: f64,
    /// DFFITS analogue for the final stage.
    pub dffits: f64,
}

/// Influence scores for every row, sorted metadata included.
///
/// The final stage is a single-instrument IV regression of
/// `Ybar = Y~ - h^T X~` on `D~` with instrument `V = D~ - gamma^T Z~`;
/// leave-one-out deltas have a closed form with nuisances fixed, and the
/// classical regression diagnostics of that stage are reported alongside.
pub fn influence_scores(
    res: &ResidualizedData,
    nuisances: &NuisanceEstimates,
    estimate: &EffectEstimate,
) -> Result<Vec<InfluenceRecord>> {
    let n = res.n();
    let nf = n as f64;
    let v = &res.d - &res.z * &nuisances.gamma;
    let ybar = &res.y - &res.x * &nuisances.h;
    let s_vd = v.dot(&res.d);
    let s_vy = v.dot(&ybar);
    let s_vv = v.norm_squared();
    let denom = s_vd / nf;
    if denom.abs() < 1e-12 {
        return Err(Error::Numeric("degenerate final moment denominator".into()));
    }
    let theta = estimate.theta;
    // First-stage fitted values for leverage: project D on V.
    let pi_fs = if s_vv > 0.0 { s_vd / s_vv } else { 0.0 };
    let mut s_dhat2 = 0.0;
    for i in 0..n {
        s_dhat2 += (pi_fs * v[i]).powi(2);
    }
    let mut sse = 0.0;
    for i in 0..n {
        sse += (ybar[i] - res.d[i] * theta).powi(2);
    }
    let s2 = sse / (nf - 1.0).max(1.0);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let resid = ybar[i] - res.d[i] * theta;
        let score = resid * v[i] / denom / nf;
        let loo_den = s_vd - v[i] * res.d[i];
        let exact_loo = if loo_den.abs() > 1e-300 {
            theta - (s_vy - v[i] * ybar[i]) / loo_den
        } else {
            f64::NAN
        };
        let hat = if s_dhat2 > 0.0 {
            (pi_fs * v[i]).powi(2) / s_dhat2
        } else {
            0.0
        };
        let studentized = if s2 > 0.0 && hat < 1.0 {
            resid / (s2 * (1.0 - hat)).sqrt()
        } else {
            0.0
        };
        let dffits = if hat < 1.0 {
            studentized * (hat / (1.0 - hat)).sqrt()
        } else {
            f64::NAN
        };
        records.push(InfluenceRecord {
            row: i,
            score,
            exact_loo,
            rank: 0,
            hat,
            studentized,
            dffits,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[b].score.partial_cmp(&records[a].score).unwrap());
    for (rank, &i) in order.iter().enumerate() {
        records[i].rank = rank;
    }
    Ok(records)
}

/// Result of the minimal influence set search.
#[derive(Debug, Clone, Serialize)]
pub struct MinimalInfluenceSet {
    /// Rows whose removal moves the confidence interval to cover zero.
    pub rows: Vec<usize>,
    /// Re-estimate without those rows (nuisances held fixed); `None` when the
    /// original interval already contains zero.
    pub re_estimate: Option<EffectEstimate>,
    /// Whether the re-estimated interval indeed covers zero.
    pub confirmed: bool,
}

/// Minimal set of rows whose removal brings the confidence interval to cover
/// zero: accumulate same-sign scores in descending magnitude until their sum
/// exceeds the interval bound toward zero, then confirm by re-estimating; if
/// the interval still misses zero, extend greedily.
pub fn minimal_influence_set(
    records: &[InfluenceRecord],
    res: &ResidualizedData,
    nuisances: &NuisanceEstimates,
    estimate: &EffectEstimate,
) -> Result<MinimalInfluenceSet> {
    if estimate.ci_low <= 0.0 && estimate.ci_high >= 0.0 {
        return Ok(MinimalInfluenceSet {
            rows: Vec::new(),
            re_estimate: None,
            confirmed: true,
        });
    }
    let sign = estimate.theta.signum();
    let target = if sign > 0.0 {
        estimate.ci_low
    } else {
        -estimate.ci_high
    };
    // Candidates pushing the estimate toward zero when removed.
    let mut candidates: Vec<&InfluenceRecord> = records
        .iter()
        .filter(|r| sign * r.score >= 0.0)
        .collect();
    candidates.sort_by(|a, b| (sign * b.score).partial_cmp(&(sign * a.score)).unwrap());
    let mut rows = Vec::new();
    let mut acc = 0.0;
    let mut cursor = 0usize;
    for r in candidates.iter() {
        cursor += 1;
        rows.push(r.row);
        acc += sign * r.score;
        if acc > target {
            break;
        }
    }
    let mut attempt = re_estimate_without(res, nuisances, estimate.alpha_level, &rows)?;
    let mut confirmed = attempt.ci_low <= 0.0 && attempt.ci_high >= 0.0;
    // Greedy extension when the approximation under-shoots.
    while !confirmed && cursor < candidates.len() {
        let take = (rows.len() / 10).max(1);
        for _ in 0..take {
            if cursor >= candidates.len() {
                break;
            }
            rows.push(candidates[cursor].row);
            cursor += 1;
        }
        attempt = re_estimate_without(res, nuisances, estimate.alpha_level, &rows)?;
        confirmed = attempt.ci_low <= 0.0 && attempt.ci_high >= 0.0;
    }
    Ok(MinimalInfluenceSet {
        rows,
        re_estimate: Some(attempt),
        confirmed,
    })
}

fn re_estimate_without(
    res: &ResidualizedData,
    nuisances: &NuisanceEstimates,
    alpha_level: f64,
    drop_rows: &[usize],
) -> Result<EffectEstimate> {
    let dropped: std::collections::BTreeSet<usize> = drop_rows.iter().cloned().collect();
    let keep: Vec<usize> = (0..res.n()).filter(|i| !dropped.contains(i)).collect();
    let sub = res.select_rows(&keep);
    final_estimate(&sub, &nuisances.h, &nuisances.gamma, alpha_level)
}

/// Which statistical test compared a feature between the influence set and
/// its complement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureTest {
    Ks,
    ChiSquare,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeatureComparison {
    pub label: String,
    pub test: FeatureTest,
    pub p_value: f64,
    /// Mean(in set) - mean(out of set); the direction of over-representation.
    pub direction: f64,
    pub note: Option<String>,
}

/// Compares every encoded W/Z/X feature between the influence set and the
/// remaining rows: Kolmogorov-Smirnov for continuous columns, chi-square for
/// two-valued (encoded categorical) columns. Sorted by p-value.
pub fn compare_influence_features(
    data: &DesignMatrices,
    set: &[usize],
) -> Result<Vec<FeatureComparison>> {
    let n = data.n();
    let in_set: std::collections::BTreeSet<usize> = set.iter().cloned().collect();
    if in_set.is_empty() || in_set.len() >= n {
        return Err(Error::InvalidInput(
            "influence set must be a proper non-empty subset of rows".into(),
        ));
    }
    let mut comparisons = Vec::new();
    let blocks: [(&DMatrix<f64>, &Vec<String>); 3] = [
        (&data.w, &data.w_labels),
        (&data.z, &data.z_labels),
        (&data.x, &data.x_labels),
    ];
    for (mat, labels) in blocks {
        for (j, label) in labels.iter().enumerate() {
            let col = mat.column(j);
            let a: Vec<f64> = (0..n).filter(|i| in_set.contains(i)).map(|i| col[i]).collect();
            let b: Vec<f64> = (0..n).filter(|i| !in_set.contains(i)).map(|i| col[i]).collect();
            let mean_a = a.iter().sum::<f64>() / a.len() as f64;
            let mean_b = b.iter().sum::<f64>() / b.len() as f64;
            let mut distinct: Vec<f64> = col.iter().cloned().collect();
            distinct.sort_by(|p, q| p.partial_cmp(q).unwrap());
            distinct.dedup();
            let comparison = if distinct.len() < 2 {
                FeatureComparison {
                    label: label.clone(),
                    test: FeatureTest::Skipped,
                    p_value: 1.0,
                    direction: 0.0,
                    note: Some("constant feature".into()),
                }
            } else if distinct.len() == 2 {
                let p = chi_square_2x2(&a, &b, distinct[1]);
                FeatureComparison {
                    label: label.clone(),
                    test: FeatureTest::ChiSquare,
                    p_value: p,
                    direction: mean_a - mean_b,
                    note: None,
                }
            } else {
                let p = ks_two_sample(&a, &b);
                FeatureComparison {
                    label: label.clone(),
                    test: FeatureTest::Ks,
                    p_value: p,
                    direction: mean_a - mean_b,
                    note: None,
                }
            };
            comparisons.push(comparison);
        }
    }
    comparisons.sort_by(|a, b| a.p_value.partial_cmp(&b.p_value).unwrap());
    Ok(comparisons)
}

fn chi_square_2x2(a: &[f64], b: &[f64], hi_level: f64) -> f64 {
    let n_a = a.len() as f64;
    let n_b = b.len() as f64;
    let hits_a = a.iter().filter(|&&v| v == hi_level).count() as f64;
    let hits_b = b.iter().filter(|&&v| v == hi_level).count() as f64;
    let total = n_a + n_b;
    let hits = hits_a + hits_b;
    let misses = total - hits;
    if hits == 0.0 || misses == 0.0 {
        return 1.0;
    }
    let mut stat = 0.0;
    for (obs, row_total, col_total) in [
        (hits_a, n_a, hits),
        (n_a - hits_a, n_a, misses),
        (hits_b, n_b, hits),
        (n_b - hits_b, n_b, misses),
    ] {
        let expected = row_total * col_total / total;
        stat += (obs - expected).powi(2) / expected;
    }
    let dist = ChiSquared::new(1.0).unwrap();
    1.0 - dist.cdf(stat)
}

fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|p, q| p.partial_cmp(q).unwrap());
    sb.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let (na, nb) = (sa.len(), sb.len());
    let mut i = 0usize;
    let mut j = 0usize;
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let xa = sa[i];
        let xb = sb[j];
        let t = xa.min(xb);
        while i < na && sa[i] <= t {
            i += 1;
        }
        while j < nb && sb[j] <= t {
            j += 1;
        }
        let f_a = i as f64 / na as f64;
        let f_b = j as f64 / nb as f64;
        d = d.max((f_a - f_b).abs());
    }
    // Asymptotic Kolmogorov distribution with the small-sample correction.
    let ne = (na as f64 * nb as f64) / (na as f64 + nb as f64);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64 * lambda).powi(2)).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
    }
    p.clamp(0.0, 1.0)
}

/// Re-estimation depth for the bootstrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BootstrapStage {
    /// Re-run the full pipeline (residualization included).
    FullPipeline = 1,
    /// Reuse the precomputed residuals; refit nuisances and the final moment.
    ReuseResiduals = 2,
    /// Reuse residuals and nuisances; re-solve the final moment only.
    FinalOnly = 3,
}

/// Cached state handed to the bootstrap; later stages need deeper caches.
pub struct BootstrapInput<'a> {
    /// Encoded data, required for stage 1.
    pub data: Option<&'a DesignMatrices>,
    /// Residualized data, required for stages 2 and 3.
    pub residuals: Option<&'a ResidualizedData>,
    /// Fitted nuisances, required for stage 3.
    pub nuisances: Option<&'a NuisanceEstimates>,
}

/// `k` replicate estimates on subsamples drawn without replacement at the
/// given fraction. Deterministic given the seed; replicates run in parallel
/// with per-replicate derived seeds.
pub fn bootstrap(
    input: &BootstrapInput,
    opts: &PipelineOptions,
    stage: BootstrapStage,
    k: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = match stage {
        BootstrapStage::FullPipeline => {
            input
                .data
                .ok_or_else(|| Error::InvalidInput("stage 1 bootstrap needs encoded data".into()))?
                .n()
        }
        _ => {
            input
                .residuals
                .ok_or_else(|| Error::InvalidInput("stages 2-3 need cached residuals".into()))?
                .n()
        }
    };
    let m = (fraction * n as f64).floor() as usize;
    if m < 10 {
        return Err(Error::InvalidInput(format!(
            "subsample too small: fraction {fraction} of {n} rows gives {m} < 10"
        )));
    }
    if stage == BootstrapStage::FinalOnly && input.nuisances.is_none() {
        return Err(Error::InvalidInput("stage 3 bootstrap needs cached nuisances".into()));
    }
    let replicates: Vec<Result<f64>> = (0..k)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut rows = idx[..m].to_vec();
            rows.sort_unstable();
            match stage {
                BootstrapStage::FullPipeline => {
                    let sub = input.data.unwrap().select(&rows);
                    let res = residualize(
                        &sub,
                        &ResidualizeConfig {
                            grid: opts.lambda_grid.clone(),
                            n_splits: opts.n_splits,
                            seed: derive_seed(seed, 1_000_000 + r as u64),
                        },
                    )?;
                    stage2_theta(&res, opts)
                }
                BootstrapStage::ReuseResiduals => {
                    let res = input.residuals.unwrap().select_rows(&rows);
                    stage2_theta(&res, opts)
                }
                BootstrapStage::FinalOnly => {
                    let res = input.residuals.unwrap().select_rows(&rows);
                    let nuis = input.nuisances.unwrap();
                    Ok(final_estimate(&res, &nuis.h, &nuis.gamma, opts.alpha_level)?.theta)
                }
            }
        })
        .collect();
    replicates.into_iter().collect()
}

fn stage2_theta(res: &ResidualizedData, opts: &PipelineOptions) -> Result<f64> {
    let alpha = opts.alpha_scale * default_penalty(res.n());
    let (h, _) = solve_primal(res, alpha)?;
    let gamma = solve_dual(res, alpha)?;
    Ok(final_estimate(res, &h, &gamma, opts.alpha_level)?.theta)
}

/// Per-stratum re-estimate.
#[derive(Debug, Clone, Serialize)]
pub struct StratumEstimate {
    pub label: String,
    pub n: usize,
    pub estimate: Option<EffectEstimate>,
    pub note: Option<String>,
}

/// Stage-2 re-estimation within each stratum: residuals are reused, the
/// nuisances and final moment refit per stratum. Strata below the minimum
/// size are skipped with a note.
pub fn stratified_estimate(
    res: &ResidualizedData,
    strata: &[String],
    opts: &PipelineOptions,
    min_size: usize,
) -> Result<Vec<StratumEstimate>> {
    if strata.len() != res.n() {
        return Err(Error::InvalidInput(format!(
            "strata labels ({}) must match rows ({})",
            strata.len(),
            res.n()
        )));
    }
    let mut labels: Vec<String> = strata.to_vec();
    labels.sort();
    labels.dedup();
    let mut out = Vec::with_capacity(labels.len());
    for label in labels {
        let rows: Vec<usize> = (0..res.n()).filter(|&i| strata[i] == label).collect();
        if rows.len() < min_size {
            out.push(StratumEstimate {
                label,
                n: rows.len(),
                estimate: None,
                note: Some(format!("skipped: stratum smaller than {min_size}")),
            });
            continue;
        }
        let sub = res.select_rows(&rows);
        let alpha = opts.alpha_scale * default_penalty(sub.n());
        let (h, _) = solve_primal(&sub, alpha)?;
        let gamma = solve_dual(&sub, alpha)?;
        let estimate = final_estimate(&sub, &h, &gamma, opts.alpha_level)?;
        out.push(StratumEstimate {
            label,
            n: rows.len(),
            estimate: Some(estimate),
            note: None,
        });
    }
    Ok(out)
}
