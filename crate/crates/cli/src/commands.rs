//! The four experiment commands and their CSV outputs.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array1;
use rayon::prelude::*;

use mcmc_swindles::diagnostics::{tuning_curve, BoundKind};
use mcmc_swindles::experiment::{
    self, map_estimate, prediction_at_budget, prediction_chains, replication_seed, run_replication,
    ReplicationResult, SuiteSpec, TargetBundle,
};
use mcmc_swindles::integrator::LeapfrogConfig;
use mcmc_swindles::preconditioner::TransportMap;
use mcmc_swindles::samplers::{KernelConfig, KernelKind};
use mcmc_swindles::swindles::{EstimatorKind, FunctionOfState};

use crate::config::{ExperimentConfig, FunctionalName, PreconditionerKind, TargetSpec};

/// Stationarity gate threshold on split R-hat.
const RHAT_GATE: f64 = 1.01;

pub struct CommandOutcome {
    /// Set when any R-hat crossed the gate; the process exits with
    /// status 3 after writing all outputs.
    pub stationarity_warning: bool,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Fits the transport map and writes `map.json` and `elbo.csv`. For the
/// Gaussian benchmark target this is a VI sanity check (the sampling
/// commands use its configured surrogate instead of the fitted map).
pub fn cmd_fit(cfg: &ExperimentConfig, out: &Path, seed: u64) -> Result<CommandOutcome> {
    if cfg.preconditioner.kind == PreconditionerKind::None {
        bail!("preconditioner kind 'none' has no map to fit");
    }
    let tabular = cfg.tabular_dataset()?;
    let target = cfg.build_target(tabular.as_ref())?;
    let fit = mcmc_swindles::preconditioner::fit_affine_vi(target.as_ref(), &cfg.vi_config(seed))?;
    write_file(&out.join("map.json"), &fit.map.to_json())?;
    let mut elbo = String::from("step,elbo\n");
    for (i, v) in fit.elbo_trace.iter().enumerate() {
        writeln!(elbo, "{i},{}", fmt(*v)).expect("string write");
    }
    write_file(&out.join("elbo.csv"), &elbo)?;
    println!(
        "fitted {}-dimensional map in {} steps; final smoothed ELBO {:.4}",
        target.dim(),
        fit.elbo_trace.len(),
        fit.elbo_trace.iter().rev().take(100).sum::<f64>() / fit.elbo_trace.len().min(100) as f64
    );
    Ok(CommandOutcome {
        stationarity_warning: false,
    })
}

fn load_map_if_requested(
    cfg: &ExperimentConfig,
    out: &Path,
    map_path: Option<&Path>,
) -> Result<Option<TransportMap>> {
    if matches!(cfg.target, TargetSpec::Gaussian { .. })
        || cfg.preconditioner.kind == PreconditionerKind::None
    {
        return Ok(None);
    }
    let path = match map_path {
        Some(p) => p.to_path_buf(),
        None => out.join("map.json"),
    };
    if !path.exists() {
        bail!(
            "preconditioning requested but no fitted map at {} (run the fit command first or pass --map)",
            path.display()
        );
    }
    let text = std::fs::read_to_string(&path)?;
    Ok(Some(TransportMap::from_json(&text)?))
}

fn functional_for(name: FunctionalName, bundle: &TargetBundle) -> FunctionOfState {
    match name {
        FunctionalName::Mean => FunctionOfState::mean(),
        FunctionalName::Variance => {
            // center the squares on the surrogate's parameter-space mean
            let center = match (&bundle.map, &bundle.surrogate) {
                (Some(map), _) => map.shift().clone(),
                (None, Some(q)) => q.mean().to_owned(),
                (None, None) => Array1::zeros(bundle.dim()),
            };
            FunctionOfState::centered_square(center)
        }
    }
}

/// Runs the estimator suites and writes `ess_table.csv` and
/// `coupling_stats.csv`. Results are flagged (and the exit status set to
/// 3) when any split R-hat reaches the gate.
pub fn cmd_sample(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
    map_path: Option<&Path>,
    dump_traces: bool,
) -> Result<CommandOutcome> {
    let tabular = cfg.tabular_dataset()?;
    let target = cfg.build_target(tabular.as_ref())?;
    let map = load_map_if_requested(cfg, out, map_path)?;
    let (bundle, _) = cfg.build_bundle(target, seed, map)?;
    let kernel = cfg.kernel_config()?;
    let kinds = cfg.estimator_kinds();

    if cfg.functionals.contains(&FunctionalName::Variance)
        && kinds.contains(&EstimatorKind::Antithetic)
    {
        eprintln!(
            "note: the variance functional is nearly even about the posterior mean, so the \
             antithetic estimator offers little benefit on it"
        );
    }

    let mut ess_csv = String::from(
        "replication,functional,estimator,component,ess,ess_per_target_eval,\
         ess_per_weighted_eval,rho,vr_factor,target_evals,surrogate_evals,grads_used,flagged\n",
    );
    let mut coupling_csv = String::from(
        "replication,functional,acceptance_primary,acceptance_surrogate,decoupling_rate,rhat_max,flagged\n",
    );
    let mut any_flagged = false;
    // (functional, estimator, component) → per-replication ESS/eval values
    let mut aggregate: std::collections::BTreeMap<(String, String, usize), Vec<f64>> =
        Default::default();

    for functional in &cfg.functionals {
        let f = functional_for(*functional, &bundle);
        let spec = SuiteSpec {
            kernel: kernel.clone(),
            chain_groups: cfg.chains,
            estimators: kinds.clone(),
            eq_budget: cfg.eq_budget,
            diagonal_beta: cfg.diagonal_beta,
            surrogate_cost_weight: cfg.surrogate_cost_weight,
        };
        let reps: Vec<ReplicationResult> = (0..cfg.replications)
            .into_par_iter()
            .map(|r| run_replication(&bundle, f.clone(), &spec, replication_seed(seed, r)))
            .collect::<mcmc_swindles::Result<Vec<_>>>()?;
        for (r, rep) in reps.iter().enumerate() {
            let rhat_max = rep
                .rhat
                .iter()
                .cloned()
                .filter(|v| v.is_finite())
                .fold(f64::NAN, f64::max);
            let flagged = rhat_max.is_finite() && rhat_max >= RHAT_GATE;
            any_flagged |= flagged;
            for e in &rep.estimators {
                for c in 0..e.ess.len() {
                    writeln!(
                        ess_csv,
                        "{r},{},{},{c},{},{},{},{},{},{},{},{},{}",
                        functional.as_str(),
                        e.kind.as_str(),
                        fmt(e.ess[c]),
                        fmt(e.ess_per_target_eval[c]),
                        fmt(e.ess_per_weighted_eval[c]),
                        fmt(e.rho[c]),
                        fmt(e.vr_factor[c]),
                        e.target_evals,
                        e.surrogate_evals,
                        e.grads_used,
                        flagged as u8
                    )
                    .expect("string write");
                    aggregate
                        .entry((
                            functional.as_str().to_string(),
                            e.kind.as_str().to_string(),
                            c,
                        ))
                        .or_default()
                        .push(e.ess_per_target_eval[c]);
                }
            }
            writeln!(
                coupling_csv,
                "{r},{},{},{},{},{},{}",
                functional.as_str(),
                fmt(rep.acceptance_primary),
                rep.acceptance_surrogate.map_or("".into(), fmt),
                rep.decoupling_rate.map_or("".into(), fmt),
                fmt(rhat_max),
                flagged as u8
            )
            .expect("string write");
        }
    }
    if dump_traces {
        let spec = SuiteSpec {
            kernel: kernel.clone(),
            chain_groups: cfg.chains,
            estimators: kinds.clone(),
            eq_budget: cfg.eq_budget,
            diagonal_beta: cfg.diagonal_beta,
            surrogate_cost_weight: cfg.surrogate_cost_weight,
        };
        let traces = experiment::group_traces(&bundle, &spec, replication_seed(seed, 0), 0)?;
        write_file(&out.join("traces.csv"), &traces.to_csv())?;
        std::fs::write(out.join("traces.bin"), traces.to_binary_summary())
            .with_context(|| format!("cannot write {}", out.join("traces.bin").display()))?;
    }

    // across-replication means, one row per (functional, estimator,
    // component) with replication id "mean"
    for ((functional, estimator, component), values) in &aggregate {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        writeln!(
            ess_csv,
            "mean,{functional},{estimator},{component},,{},,,,,,,",
            fmt(mean)
        )
        .expect("string write");
    }
    write_file(&out.join("ess_table.csv"), &ess_csv)?;
    write_file(&out.join("coupling_stats.csv"), &coupling_csv)?;
    if any_flagged {
        eprintln!(
            "warning: at least one replication failed the R-hat < {RHAT_GATE} stationarity gate"
        );
    }
    println!(
        "wrote {} and {}",
        out.join("ess_table.csv").display(),
        out.join("coupling_stats.csv").display()
    );
    Ok(CommandOutcome {
        stationarity_warning: any_flagged,
    })
}

/// Sweeps leapfrog step counts at fixed trajectory length and writes
/// `sweep.csv` with the measured efficiencies and the tuning-curve
/// prediction.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
    map_path: Option<&Path>,
) -> Result<CommandOutcome> {
    let sweep = cfg
        .sweep
        .as_ref()
        .context("sweep command needs a 'sweep' section in the config")?;
    if !matches!(cfg.kernel, crate::config::KernelSpec::Hmc { .. }) {
        bail!("the sweep varies leapfrog steps and applies to the hmc kernel only");
    }
    let tabular = cfg.tabular_dataset()?;
    let target = cfg.build_target(tabular.as_ref())?;
    let map = load_map_if_requested(cfg, out, map_path)?;
    let (bundle, _) = cfg.build_bundle(target, seed, map)?;

    let rows: Vec<SweepRow> = sweep
        .leapfrog_steps
        .par_iter()
        .map(|&l| -> Result<SweepRow> {
            let eps = sweep.trajectory_length / l as f64;
            let kernel = KernelConfig::new(
                KernelKind::Hmc(LeapfrogConfig::new(eps, l)?),
                cfg.steps,
                cfg.burn_in,
            )?;
            let spec = SuiteSpec {
                kernel,
                chain_groups: cfg.chains,
                estimators: vec![EstimatorKind::Plain, EstimatorKind::Control],
                eq_budget: cfg.eq_budget,
                diagonal_beta: cfg.diagonal_beta,
                surrogate_cost_weight: cfg.surrogate_cost_weight,
            };
            let (mut acc, mut plain, mut control, mut rho) = (0.0, 0.0, 0.0, 0.0);
            for r in 0..cfg.replications {
                let rep = run_replication(
                    &bundle,
                    FunctionOfState::mean(),
                    &spec,
                    replication_seed(seed, r),
                )?;
                acc += rep.acceptance_primary;
                plain += median(&rep.estimators[0].ess_per_target_eval.to_vec());
                control += median(&rep.estimators[1].ess_per_target_eval.to_vec());
                rho += median(&rep.estimators[1].rho.to_vec());
            }
            let k = cfg.replications as f64;
            Ok(SweepRow {
                leapfrog_steps: l,
                step_size: eps,
                acceptance: acc / k,
                rho: rho / k,
                plain: plain / k,
                control: control / k,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let curve = if rows.len() >= 3 {
        let pilots: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (r.acceptance.clamp(1e-9, 1.0 - 1e-9), r.rho))
            .collect();
        match tuning_curve(&pilots, BoundKind::default()) {
            Ok(c) => Some(c),
            Err(e) => {
                eprintln!("note: tuning curve skipped ({e})");
                None
            }
        }
    } else {
        eprintln!("note: tuning curve skipped (needs at least 3 grid points)");
        None
    };

    let mut csv = String::from(
        "leapfrog_steps,step_size,acceptance,rho,plain_ess_per_eval,control_ess_per_eval,\
         predicted_efficiency,recommended_acceptance\n",
    );
    for (i, row) in rows.iter().enumerate() {
        let (predicted, recommended) = match &curve {
            Some(c) => (
                fmt(c.points[rank_of(&rows, i)].predicted),
                fmt(c.recommended_acceptance),
            ),
            None => ("".into(), "".into()),
        };
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            row.leapfrog_steps,
            fmt(row.step_size),
            fmt(row.acceptance),
            fmt(row.rho),
            fmt(row.plain),
            fmt(row.control),
            predicted,
            recommended
        )
        .expect("string write");
    }
    write_file(&out.join("sweep.csv"), &csv)?;
    if let Some(c) = &curve {
        println!(
            "recommended target acceptance: {:.3}",
            c.recommended_acceptance
        );
    }
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(CommandOutcome {
        stationarity_warning: false,
    })
}

struct SweepRow {
    leapfrog_steps: usize,
    step_size: f64,
    acceptance: f64,
    rho: f64,
    plain: f64,
    control: f64,
}

/// The tuning curve sorts its points by acceptance; map a sweep-row
/// index to that sorted rank.
fn rank_of(rows: &[SweepRow], i: usize) -> usize {
    let mine = rows[i].acceptance;
    rows.iter().filter(|r| r.acceptance < mine).count()
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Held-out prediction study: MAP baseline plus budget-vs-NLL rows per
/// estimator, written to `predict_nll.csv`.
pub fn cmd_predict(
    cfg: &ExperimentConfig,
    out: &Path,
    seed: u64,
    map_path: Option<&Path>,
) -> Result<CommandOutcome> {
    let predict = cfg
        .predict
        .as_ref()
        .context("predict command needs a 'predict' section in the config")?;
    let tabular = cfg
        .tabular_dataset()?
        .context("the prediction study needs a tabular (logistic) target with labels")?;
    if !matches!(cfg.target, TargetSpec::Logistic { .. }) {
        bail!("the prediction study supports the plain logistic target");
    }
    let (train, test) = mcmc_swindles::data_io::train_test_split(
        &tabular,
        predict.test_fraction,
        predict.split_seed,
    )?;
    let train_design = train.design_matrix();
    let test_design = test.design_matrix();
    let target: std::sync::Arc<dyn mcmc_swindles::targets::TargetDensity> = std::sync::Arc::new(
        mcmc_swindles::targets::LogisticRegression::new(train_design, train.labels.clone())?,
    );
    // the map must match the train-split posterior, so fit inline unless
    // one is passed explicitly
    let map = match map_path {
        Some(p) => Some(TransportMap::from_json(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    let (bundle, _) = cfg.build_bundle(target.clone(), seed, map)?;

    let dim = target.dim();
    let map_w = map_estimate(target.as_ref(), Array1::zeros(dim), 1e-6, 2000)?;
    let map_nll = experiment::map_nll(&map_w, &test_design, &test.labels);

    let kernel = cfg.kernel_config()?;
    let kinds = cfg.estimator_kinds();
    let spec = SuiteSpec {
        kernel,
        chain_groups: cfg.chains,
        estimators: kinds.clone(),
        eq_budget: cfg.eq_budget,
        diagonal_beta: cfg.diagonal_beta,
        surrogate_cost_weight: cfg.surrogate_cost_weight,
    };
    let all_chains: Vec<_> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| prediction_chains(&bundle, &test_design, &spec, replication_seed(seed, r)))
        .collect::<mcmc_swindles::Result<Vec<_>>>()?;

    let mut csv = String::from("budget,estimator,median_nll\n");
    writeln!(csv, "0,map,{}", fmt(map_nll)).expect("string write");
    for &budget in &predict.budgets {
        for kind in &kinds {
            let mut nlls = Vec::new();
            for chains in &all_chains {
                let rows = chains
                    .per_kind
                    .iter()
                    .find(|(k, _)| k == kind)
                    .map(|(_, rows)| rows)
                    .expect("every requested kind was produced");
                if let Some(p) = prediction_at_budget(rows, *kind, budget) {
                    nlls.push(experiment::test_nll(&p, &test.labels));
                }
            }
            if !nlls.is_empty() {
                writeln!(csv, "{budget},{},{}", kind.as_str(), fmt(median(&nlls)))
                    .expect("string write");
            }
        }
    }
    write_file(&out.join("predict_nll.csv"), &csv)?;
    println!(
        "MAP test NLL {map_nll:.5}; wrote {}",
        out.join("predict_nll.csv").display()
    );
    Ok(CommandOutcome {
        stationarity_warning: false,
    })
}
