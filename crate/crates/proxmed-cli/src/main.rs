//! Command-line front end: estimation, diagnostics, proxy selection,
//! bootstrap, influence analysis and semi-synthetic simulation.
//!
//! All randomness flows from the single master seed in the config (or the
//! PROXMED_SEED override); outputs are byte-identical across runs with the
//! same config and seed. Timing and progress go to stderr only.

mod config;
mod report;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use config::AnalysisConfig;
use proxmed::dataset::{encode, load_csv, split, write_csv, DesignMatrices};
use proxmed::diagnostics::DiagnosticsReport;
use proxmed::estimator::{estimate_from_residuals, EffectReport};
use proxmed::proxy_select::{choose_candidate, select_proxies, SelectConfig};
use proxmed::regress::{residualize, ResidualizeConfig, ResidualizedData};
use proxmed::robust::{
    bootstrap, compare_influence_features, influence_scores, minimal_influence_set,
    BootstrapInput, BootstrapStage,
};
use proxmed::semisynth::{
    baseline_ols, evaluate, fit_generator, sample, BaselineKind, GeneratorConfig, SynthParams,
};
use proxmed::derive_seed;
use rayon::prelude::*;
use report::{emit, fmt_float};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "proxmed",
    version,
    about = "Controlled direct effect estimation with hidden mediators and proxy variables"
)]
struct Cli {
    /// Analysis configuration (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: residualize, fit nuisances, estimate, run diagnostics.
    Estimate,
    /// Run only the validity test suite and report each statistic.
    Diagnose,
    /// Greedy proxy-subset selection with confirmation tests.
    SelectProxies,
    /// Replicate estimates on subsamples at the configured stage.
    Bootstrap,
    /// Influence scores, the minimal influence set and feature comparisons.
    Influence,
    /// Fit the semi-synthetic generator, sample replicates, report metrics.
    Simulate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("proxmed: could not configure {threads} threads: {e}");
        }
    }
    match run(&cli) {
        Ok(valid) => {
            if valid {
                ExitCode::SUCCESS
            } else {
                // Estimate produced but at least one validity test failed.
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("proxmed: error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    let config_path = cli
        .config
        .as_deref()
        .context("--config <file> is required")?;
    let cfg = AnalysisConfig::load(config_path)?;
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating output dir {}", cfg.output_dir.display()))?;
    let started = Instant::now();
    let result = match cli.command {
        Command::Estimate => cmd_estimate(&cfg),
        Command::Diagnose => cmd_diagnose(&cfg),
        Command::SelectProxies => cmd_select_proxies(&cfg),
        Command::Bootstrap => cmd_bootstrap(&cfg),
        Command::Influence => cmd_influence(&cfg),
        Command::Simulate => cmd_simulate(&cfg),
    };
    eprintln!("proxmed: finished in {:.2?}", started.elapsed());
    result
}

fn load_data(cfg: &AnalysisConfig) -> Result<DesignMatrices> {
    if !cfg.data.path.exists() {
        bail!("data file not found: {}", cfg.data.path.display());
    }
    let raw = load_csv(&cfg.data.path, &cfg.data.kinds)?;
    Ok(encode(&raw, &cfg.roles)?)
}

fn residualized(cfg: &AnalysisConfig, data: &DesignMatrices) -> Result<ResidualizedData> {
    let opts = cfg.pipeline_options();
    Ok(residualize(
        data,
        &ResidualizeConfig {
            grid: opts.lambda_grid.clone(),
            n_splits: opts.n_splits,
            seed: derive_seed(cfg.seed, 1),
        },
    )?)
}

fn write_output(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("proxmed: wrote {}", path.display());
    Ok(())
}

fn config_echo(cfg: &AnalysisConfig) -> Value {
    report::to_value(cfg)
}

fn test_to_json(t: &proxmed::diagnostics::TestResult) -> Value {
    json!({
        "name": t.name,
        "statistic": t.statistic,
        "critical_value": t.critical_value,
        "passed": t.passed,
        "direction": match t.direction {
            proxmed::diagnostics::PassDirection::Below => "statistic < critical",
            proxmed::diagnostics::PassDirection::Above => "statistic > critical",
        },
        "dof": t.dof,
        "params": t.params,
        "alpha_sig": t.alpha_sig,
    })
}

fn diagnostics_to_json(d: &DiagnosticsReport) -> Value {
    json!({
        "primal": test_to_json(&d.primal),
        "dual": test_to_json(&d.dual),
        "f_test": test_to_json(&d.f_test),
        "z_test": test_to_json(&d.z_test),
        "rank": {
            "singular_values": d.rank.singular_values,
            "threshold": d.rank.threshold,
            "significant_rank": d.rank.significant_rank,
            "diagonal_approx": d.rank.diagonal_approx,
        },
        "valid": d.valid,
    })
}

fn estimate_to_json(report: &EffectReport) -> Value {
    let weak = &report.weak_ci;
    json!({
        "estimate": {
            "theta": report.estimate.theta,
            "se": report.estimate.se,
            "ci_low": report.estimate.ci_low,
            "ci_high": report.estimate.ci_high,
            "alpha_level": report.estimate.alpha_level,
        },
        "weak_ci": {
            "low": if weak.empty { Value::Null } else { json!(weak.low) },
            "high": if weak.empty { Value::Null } else { json!(weak.high) },
            "empty": weak.empty,
            "contiguous": weak.contiguous,
            "alpha": weak.alpha,
        },
        "diagnostics": diagnostics_to_json(&report.diagnostics),
        "nuisances": {
            "h": report.nuisances.h.as_slice(),
            "gamma": report.nuisances.gamma.as_slice(),
            "theta_pre": report.nuisances.theta_pre,
            "alpha_primal": report.nuisances.alpha_primal,
            "alpha_dual": report.nuisances.alpha_dual,
        },
        "residual_penalties": report.residual_penalties.iter().map(|(label, p)| {
            json!({"column": label, "penalty": p})
        }).collect::<Vec<_>>(),
    })
}

fn cmd_estimate(cfg: &AnalysisConfig) -> Result<bool> {
    let data = load_data(cfg)?;
    let res = residualized(cfg, &data)?;
    let opts = cfg.pipeline_options();
    let report = estimate_from_residuals(&res, &opts)?;

    // Influence summary: top absolute scores and the minimal influence set.
    let records = influence_scores(&res, &report.nuisances, &report.estimate)?;
    let min_set = minimal_influence_set(&records, &res, &report.nuisances, &report.estimate)?;
    let mut top_abs: Vec<f64> = records.iter().map(|r| r.score.abs()).collect();
    top_abs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let influence_summary = json!({
        "max_abs_score": top_abs.first().cloned().unwrap_or(0.0),
        "top10_abs_scores": &top_abs[..top_abs.len().min(10)],
        "minimal_set_size": min_set.rows.len(),
        "minimal_set_confirmed": min_set.confirmed,
    });

    let mut body = estimate_to_json(&report);
    body["command"] = json!("estimate");
    body["config"] = config_echo(cfg);
    body["library_version"] = json!(env!("CARGO_PKG_VERSION"));
    body["influence_summary"] = influence_summary;
    body["n"] = json!(data.n());
    write_output(&cfg.output_dir.join("report.json"), &emit(&body))?;
    Ok(report.diagnostics.valid)
}

fn cmd_diagnose(cfg: &AnalysisConfig) -> Result<bool> {
    let data = load_data(cfg)?;
    let res = residualized(cfg, &data)?;
    let opts = cfg.pipeline_options();
    let report = estimate_from_residuals(&res, &opts)?;
    for t in [
        &report.diagnostics.primal,
        &report.diagnostics.dual,
        &report.diagnostics.f_test,
        &report.diagnostics.z_test,
    ] {
        let op = match t.direction {
            proxmed::diagnostics::PassDirection::Below => "<",
            proxmed::diagnostics::PassDirection::Above => ">",
        };
        println!(
            "{}: {} {} {} -> {}",
            t.name,
            fmt_float(t.statistic),
            op,
            fmt_float(t.critical_value),
            if t.passed { "pass" } else { "FAIL" }
        );
    }
    println!(
        "covariance_rank: {} significant (threshold {})",
        report.diagnostics.rank.significant_rank,
        fmt_float(report.diagnostics.rank.threshold)
    );
    let mut body = json!({
        "command": "diagnose",
        "config": config_echo(cfg),
        "library_version": env!("CARGO_PKG_VERSION"),
        "n": data.n(),
    });
    body["diagnostics"] = diagnostics_to_json(&report.diagnostics);
    write_output(&cfg.output_dir.join("report.json"), &emit(&body))?;
    Ok(report.diagnostics.valid)
}

fn cmd_select_proxies(cfg: &AnalysisConfig) -> Result<bool> {
    let data = load_data(cfg)?;
    let (select_data, estimate_data) = match cfg.proxy_selection.selection_fraction {
        Some(f) => {
            let (sel, est) = split(&data, f, derive_seed(cfg.seed, 40))?;
            (sel, Some(est))
        }
        None => {
            eprintln!(
                "proxmed: warning: proxy selection shares the estimation data; \
                 set proxy_selection.selection_fraction for a held-out split"
            );
            (data.clone(), None)
        }
    };
    let res = residualized(cfg, &select_data)?;
    let select_cfg = SelectConfig {
        k: cfg.proxy_selection.k,
        delta: cfg.proxy_selection.delta,
        iterations: cfg.proxy_selection.iterations,
        alpha_sig: cfg.tests.alpha_sig,
        c_sparse: cfg.proxy_selection.c_sparse,
        n_mc: cfg.tests.n_mc,
        seed: derive_seed(cfg.seed, 41),
        alpha_scale: cfg.estimator.alpha_scale,
    };
    let candidates = select_proxies(&res, &select_cfg)?;
    let chosen_json = if candidates.is_empty() {
        Value::Null
    } else {
        // The chosen candidate is the median estimate over candidates,
        // evaluated on the estimation split when one exists.
        let eval_res = match &estimate_data {
            Some(est) => residualized(cfg, est)?,
            None => res.select_rows(&(0..res.n()).collect::<Vec<_>>()),
        };
        let chosen = choose_candidate(
            &candidates,
            &eval_res,
            cfg.estimator.alpha_scale,
            cfg.estimator.alpha_level,
        )?;
        json!({
            "index": chosen.index,
            "x_labels": chosen.candidate.x_labels,
            "z_labels": chosen.candidate.z_labels,
            "estimate": {
                "theta": chosen.estimate.theta,
                "se": chosen.estimate.se,
                "ci_low": chosen.estimate.ci_low,
                "ci_high": chosen.estimate.ci_high,
            },
        })
    };
    let body = json!({
        "command": "select-proxies",
        "config": config_echo(cfg),
        "library_version": env!("CARGO_PKG_VERSION"),
        "n_candidates": candidates.len(),
        "candidates": candidates.iter().map(|c| json!({
            "x_indices": c.x_indices,
            "z_indices": c.z_indices,
            "x_labels": c.x_labels,
            "z_labels": c.z_labels,
            "approx_primal": c.approx_primal,
            "approx_dual": c.approx_dual,
            "primal_passed": c.primal_passed,
            "dual_passed": c.dual_passed,
        })).collect::<Vec<_>>(),
        "chosen": chosen_json,
    });
    write_output(&cfg.output_dir.join("candidates.json"), &emit(&body))?;
    Ok(true)
}

fn cmd_bootstrap(cfg: &AnalysisConfig) -> Result<bool> {
    let data = load_data(cfg)?;
    let res = residualized(cfg, &data)?;
    let opts = cfg.pipeline_options();
    let report = estimate_from_residuals(&res, &opts)?;
    let stage = match cfg.bootstrap.stage {
        1 => BootstrapStage::FullPipeline,
        2 => BootstrapStage::ReuseResiduals,
        _ => BootstrapStage::FinalOnly,
    };
    let input = BootstrapInput {
        data: Some(&data),
        residuals: Some(&res),
        nuisances: Some(&report.nuisances),
    };
    let thetas = bootstrap(
        &input,
        &opts,
        stage,
        cfg.bootstrap.k,
        cfg.bootstrap.fraction,
        derive_seed(cfg.seed, 50),
    )?;
    let mut csv = String::from("replicate,theta\n");
    for (i, t) in thetas.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", fmt_float(*t)));
    }
    write_output(&cfg.output_dir.join("replicates.csv"), &csv)?;
    let mean = thetas.iter().sum::<f64>() / thetas.len() as f64;
    let sd = (thetas.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / thetas.len() as f64).sqrt();
    eprintln!(
        "proxmed: bootstrap stage {} K={} fraction={}: mean {} sd {} (full-data theta {})",
        cfg.bootstrap.stage,
        cfg.bootstrap.k,
        cfg.bootstrap.fraction,
        fmt_float(mean),
        fmt_float(sd),
        fmt_float(report.estimate.theta)
    );
    Ok(true)
}

fn cmd_influence(cfg: &AnalysisConfig) -> Result<bool> {
    let data = load_data(cfg)?;
    let res = residualized(cfg, &data)?;
    let opts = cfg.pipeline_options();
    let report = estimate_from_residuals(&res, &opts)?;
    let records = influence_scores(&res, &report.nuisances, &report.estimate)?;

    let mut csv = String::from("row,score,exact_loo,rank,hat,studentized,dffits\n");
    for r in &records {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.row,
            fmt_float(r.score),
            fmt_float(r.exact_loo),
            r.rank,
            fmt_float(r.hat),
            fmt_float(r.studentized),
            fmt_float(r.dffits)
        ));
    }
    write_output(&cfg.output_dir.join("influence.csv"), &csv)?;

    let min_set = minimal_influence_set(&records, &res, &report.nuisances, &report.estimate)?;
    let comparisons = if min_set.rows.is_empty() {
        Vec::new()
    } else {
        compare_influence_features(&data, &min_set.rows)?
    };
    let body = json!({
        "command": "influence",
        "config": config_echo(cfg),
        "library_version": env!("CARGO_PKG_VERSION"),
        "estimate": {
            "theta": report.estimate.theta,
            "ci_low": report.estimate.ci_low,
            "ci_high": report.estimate.ci_high,
        },
        "minimal_set": {
            "size": min_set.rows.len(),
            "rows": min_set.rows,
            "confirmed": min_set.confirmed,
            "re_estimate": min_set.re_estimate.as_ref().map(|e| json!({
                "theta": e.theta,
                "ci_low": e.ci_low,
                "ci_high": e.ci_high,
            })),
        },
        "feature_comparisons": comparisons.iter().take(25).map(|c| json!({
            "label": c.label,
            "test": match c.test {
                proxmed::robust::FeatureTest::Ks => "ks",
                proxmed::robust::FeatureTest::ChiSquare => "chi_square",
                proxmed::robust::FeatureTest::Skipped => "skipped",
            },
            "p_value": c.p_value,
            "direction": c.direction,
            "note": c.note,
        })).collect::<Vec<_>>(),
    });
    write_output(&cfg.output_dir.join("influence_set.json"), &emit(&body))?;
    Ok(true)
}

fn cmd_simulate(cfg: &AnalysisConfig) -> Result<bool> {
    let data = load_data(cfg)?;
    let model = fit_generator(
        &data,
        &GeneratorConfig {
            alpha_sig: cfg.tests.alpha_sig,
            n_mc: cfg.tests.n_mc,
            seed: derive_seed(cfg.seed, 60),
            n_splits: cfg.estimator.n_splits,
            propensity_penalty: 1e-4,
        },
    )?;
    eprintln!(
        "proxmed: generator fitted with mediator dimension {}",
        model.mediator_dim()
    );
    let sim = &cfg.simulate;
    let opts = cfg.pipeline_options();
    let results: Vec<Result<_>> = (0..sim.replicates)
        .into_par_iter()
        .map(|r| {
            let params = SynthParams {
                a: sim.a,
                b: sim.b,
                g: sim.g,
                theta: sim.theta,
                sigma_y: sim.sigma_y,
                binarize: sim.binarize,
                n: sim.n,
                seed: derive_seed(cfg.seed, 61 + r as u64),
            };
            let (gen, hidden_m) = sample(&model, &params)?;
            let res = residualize(
                &gen,
                &ResidualizeConfig {
                    grid: opts.lambda_grid.clone(),
                    n_splits: opts.n_splits,
                    seed: derive_seed(cfg.seed, 1000 + r as u64),
                },
            )?;
            let rep_opts = proxmed::estimator::PipelineOptions {
                seed: derive_seed(cfg.seed, 2000 + r as u64),
                ..opts.clone()
            };
            let report = estimate_from_residuals(&res, &rep_opts)?;
            let (ols_m, _) = baseline_ols(&gen, Some(&hidden_m), BaselineKind::WithM)?;
            let (ols_z, _) = baseline_ols(&gen, None, BaselineKind::WithZ)?;
            Ok((report.estimate, report.diagnostics, ols_m, ols_z, gen))
        })
        .collect();
    let mut estimates = Vec::new();
    let mut diags = Vec::new();
    let mut ols_m = Vec::new();
    let mut ols_z = Vec::new();
    let mut first: Option<DesignMatrices> = None;
    for (i, r) in results.into_iter().enumerate() {
        let (est, diag, m, z, gen) = r?;
        estimates.push(est);
        diags.push(diag);
        ols_m.push(m);
        ols_z.push(z);
        if i == 0 {
            first = Some(gen);
        }
    }
    let metrics = evaluate(&estimates, &diags, sim.theta)?;
    if let Some(gen) = &first {
        write_csv(gen, &cfg.output_dir.join("dataset.csv"))?;
        eprintln!("proxmed: wrote {}", cfg.output_dir.join("dataset.csv").display());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let body = json!({
        "command": "simulate",
        "config": config_echo(cfg),
        "library_version": env!("CARGO_PKG_VERSION"),
        "generator": {
            "mediator_dim": model.mediator_dim(),
            "singular_values": model.singular_values,
            "rank_threshold": model.rank_threshold,
        },
        "metrics": report::to_value(&metrics),
        "baselines": {
            "ols_with_m_mean": mean(&ols_m),
            "ols_with_z_mean": mean(&ols_z),
        },
        "replicate_thetas": estimates.iter().map(|e| e.theta).collect::<Vec<_>>(),
    });
    write_output(&cfg.output_dir.join("metrics.json"), &emit(&body))?;
    Ok(true)
}
