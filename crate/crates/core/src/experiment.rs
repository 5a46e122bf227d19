//! Experiment orchestration: builds the problem described by a config, runs
//! every sweep point and trial, and writes CSV and JSON outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Experiment, LoadedConfig, RunConfig, SweepPoint};
use crate::engine::{run_trial, MetricSpec, TrialSpec};
use crate::error::{Error, Result};
use crate::ingest::{self, IngestSummary};
use crate::metrics::{self, DecayFit, LipschitzEstimate, RunRecord};
use crate::models::{analytic_posterior_gaussian1d, DataShard, ModelKind, ModelSpec, Prior};
use crate::rng::{self, purpose};
use crate::scheduler::{self, ConditionReport, HyperParams, ProblemConstants, StepScan};
use crate::topology::{spectral_constants, Graph};

pub const KL_AGGREGATION_NOTE: &str =
    "KL computed per agent across chains at each recorded cycle, then averaged over agents; unbiased sample variance";

/// Everything a trial needs besides hyper-parameters.
#[derive(Debug, Clone)]
pub struct Problem {
    pub graph: Graph,
    pub model: ModelSpec,
    pub shards: Vec<DataShard>,
    pub test: Option<DataShard>,
    pub kl_reference: Option<(f64, f64)>,
    pub data_summary: IngestSummary,
}

pub fn build_problem(cfg: &RunConfig) -> Result<Problem> {
    let graph = cfg.graph.build()?;
    let n = graph.n();
    let prior = Prior::Gaussian {
        mean: 0.0,
        std: cfg.prior_std,
    };
    let data_path = || {
        cfg.data
            .path
            .clone()
            .ok_or_else(|| Error::validation("data.path", "required for dataset experiments"))
    };
    let mut split_rng = rng::stream(cfg.master_seed, &[purpose::SPLIT]);
    match cfg.experiment {
        Experiment::GaussianToy => {
            let mut data_rng = rng::stream(cfg.master_seed, &[purpose::DATA]);
            let toy = ingest::draw_toy_data(
                cfg.toy.sigma_theta,
                cfg.toy.sigma_x,
                cfg.toy.n_data,
                &mut data_rng,
            );
            let shards = ingest::split_scalar(&toy.values, n)?;
            let posterior =
                analytic_posterior_gaussian1d(cfg.toy.sigma_theta, cfg.toy.sigma_x, &toy.values);
            Ok(Problem {
                model: ModelSpec::gaussian1d(cfg.toy.sigma_theta, cfg.toy.sigma_x, n),
                data_summary: IngestSummary {
                    rows_read: toy.values.len(),
                    shard_sizes: shards.iter().map(|s| s.len()).collect(),
                    features: 1,
                    notes: vec![format!(
                        "synthetic draw: theta = {}, posterior mean {}, posterior variance {}",
                        toy.theta, posterior.0, posterior.1
                    )],
                    ..Default::default()
                },
                graph,
                shards,
                test: None,
                kl_reference: Some(posterior),
            })
        }
        Experiment::GammaTelescope => {
            let mut ds = ingest::ingest_gamma_telescope(
                &data_path()?,
                n,
                cfg.data.test_fraction,
                &mut split_rng,
            )?;
            if cfg.data.standardize {
                ingest::standardize(&mut ds);
            }
            Ok(Problem {
                model: ModelSpec::logistic(11, n, prior),
                graph,
                shards: ds.shards,
                test: ds.test,
                kl_reference: None,
                data_summary: ds.summary,
            })
        }
        Experiment::Mhealth => {
            if cfg.data.train_subjects.len() != n {
                return Err(Error::validation(
                    "data.train_subjects",
                    format!("{} subjects for {n} agents", cfg.data.train_subjects.len()),
                ));
            }
            let mut ds = ingest::ingest_mhealth(
                &data_path()?,
                &cfg.data.train_subjects,
                cfg.data.test_subject,
                cfg.data.subsample,
                &mut split_rng,
            )?;
            if cfg.data.standardize {
                ingest::standardize(&mut ds);
            }
            Ok(Problem {
                model: ModelSpec::softmax(12, 24, n, prior),
                graph,
                shards: ds.shards,
                test: ds.test,
                kl_reference: None,
                data_summary: ds.summary,
            })
        }
        Experiment::Custom => {
            let kind = cfg
                .model
                .ok_or_else(|| Error::validation("model", "required for custom experiments"))?;
            let ds = ingest::read_dataset(&data_path()?, n)?;
            let model = match kind {
                ModelKind::Gaussian1d { sigma_x } => {
                    ModelSpec::gaussian1d(cfg.prior_std, sigma_x, n)
                }
                ModelKind::Logistic { features } => ModelSpec::logistic(features, n, prior),
                ModelKind::Softmax {
                    n_classes,
                    features,
                } => ModelSpec::softmax(n_classes, features, n, prior),
            };
            let expected = match kind {
                ModelKind::Gaussian1d { .. } => 1,
                ModelKind::Logistic { features } | ModelKind::Softmax { features, .. } => features,
            };
            if ds.summary.features != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    got: ds.summary.features,
                });
            }
            Ok(Problem {
                model,
                graph,
                shards: ds.shards,
                test: ds.test,
                kl_reference: None,
                data_summary: ds.summary,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzInfo {
    pub per_agent: LipschitzEstimate,
    pub global: LipschitzEstimate,
    pub note: String,
}

pub fn estimate_problem_lipschitz(cfg: &RunConfig, problem: &Problem) -> Result<LipschitzInfo> {
    let probes = cfg.conditions.lipschitz_probes;
    let radius = cfg.conditions.lipschitz_radius;
    let mut rng = rng::stream(cfg.master_seed, &[purpose::PROBE]);
    let per_agent =
        metrics::estimate_lipschitz(&problem.model, &problem.shards, probes, radius, &mut rng)?;
    let global = metrics::estimate_global_lipschitz(
        &problem.model,
        &problem.shards,
        probes,
        radius,
        &mut rng,
    )?;
    Ok(LipschitzInfo {
        note: format!(
            "empirical lower bound from {probes} random probe pairs in a ball of radius {radius} around the origin"
        ),
        per_agent,
        global,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointConditions {
    pub label: String,
    pub report: ConditionReport,
    pub scan: Vec<StepScan>,
    /// Largest scanned `a` satisfying both the step bound and `lambda_bar < 1`.
    pub largest_admissible_a: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionsOutput {
    pub lipschitz: LipschitzInfo,
    pub lambda_bar_l: f64,
    pub lambda_contraction: f64,
    pub p_m: f64,
    pub points: Vec<PointConditions>,
}

pub const SCAN_POINTS: usize = 81;

pub fn conditions_for(
    cfg: &RunConfig,
    problem: &Problem,
    lipschitz: &LipschitzInfo,
) -> ConditionsOutput {
    let sc = spectral_constants(&problem.graph, cfg.hyper.beta);
    let pc = ProblemConstants {
        n: problem.graph.n(),
        lipschitz: lipschitz.per_agent.max,
        lipschitz_global: lipschitz.global.max,
        rho_u: cfg.conditions.rho_u,
    };
    let grid = scheduler::log_grid(1e-8, 1.0, SCAN_POINTS);
    let points = cfg
        .sweep_points()
        .iter()
        .map(|p| {
            let hp = cfg.hyper_for(p);
            let mut report = scheduler::check_conditions(&hp, &sc, &pc);
            report.lipschitz_note = lipschitz.note.clone();
            let scan = scheduler::scan_step_scale(&hp, &sc, &pc, &grid);
            let largest_admissible_a = scan
                .iter()
                .filter(|s| s.step_bound && s.contraction)
                .map(|s| s.a)
                .fold(None, |acc: Option<f64>, a| {
                    Some(acc.map_or(a, |b| b.max(a)))
                });
            PointConditions {
                label: p.label(cfg.hyper.f),
                report,
                scan,
                largest_admissible_a,
            }
        })
        .collect();
    ConditionsOutput {
        lipschitz: lipschitz.clone(),
        lambda_bar_l: sc.lambda_bar_l,
        lambda_contraction: sc.lambda_contraction,
        p_m: sc.p_m,
        points,
    }
}

pub fn check_conditions_for_config(cfg: &RunConfig) -> Result<ConditionsOutput> {
    let problem = build_problem(cfg)?;
    let lipschitz = estimate_problem_lipschitz(cfg, &problem)?;
    Ok(conditions_for(cfg, &problem, &lipschitz))
}

pub fn format_conditions(out: &ConditionsOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "p_m = {:.6}  lambda_2(E[L]) = {:.6}  lambda = {:.6}",
        out.p_m, out.lambda_bar_l, out.lambda_contraction
    );
    let _ = writeln!(
        s,
        "L (per agent) = {:.6e}  L (summed) = {:.6e}  [{}]",
        out.lipschitz.per_agent.max, out.lipschitz.global.max, out.lipschitz.note
    );
    for p in &out.points {
        let r = &p.report;
        let _ = writeln!(s, "[{}] a = {:e}, T = {}", p.label, r.a, r.t);
        let _ = writeln!(
            s,
            "  cond 1: aT = {:.3e} < p_m/(nL) = {:.3e}: {}",
            r.step_bound.lhs,
            r.step_bound.rhs,
            yes_no(r.step_bound.satisfied)
        );
        match r.contraction.lambda_bar {
            Some(v) => {
                let _ = writeln!(
                    s,
                    "  cond 2: lambda_bar = {v:.6} (theta = {:.4}) < 1: {}",
                    r.contraction.theta.unwrap_or(f64::NAN),
                    yes_no(r.contraction.satisfied)
                );
            }
            None => {
                let _ = writeln!(s, "  cond 2: lambda_bar undefined (anLT/p_m >= 1): no");
            }
        }
        match &r.moment_bound {
            scheduler::MomentBound::Evaluated { bound, satisfied } => {
                let _ = writeln!(s, "  cond 3: a < {bound:.3e}: {}", yes_no(*satisfied));
            }
            scheduler::MomentBound::NotEvaluable { reason } => {
                let _ = writeln!(s, "  cond 3: not evaluable ({reason})");
            }
        }
        match p.largest_admissible_a {
            Some(a) => {
                let _ = writeln!(s, "  largest scanned a meeting cond 1 and 2: {a:.3e}");
            }
            None => {
                let _ = writeln!(s, "  no scanned a meets cond 1 and 2");
            }
        }
    }
    s
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFits {
    pub trial: usize,
    pub consensus: Option<DecayFit>,
    pub kl: Option<DecayFit>,
    pub notes: Vec<String>,
}

fn fit_or_note(
    series: &[(usize, f64)],
    burn_in: usize,
    what: &str,
    notes: &mut Vec<String>,
) -> Option<DecayFit> {
    if series.is_empty() {
        return None;
    }
    match metrics::fit_decay_rate(series, burn_in) {
        Ok(f) => Some(f),
        Err(e) => {
            notes.push(format!("{what}: {e}"));
            None
        }
    }
}

pub fn fit_record(record: &RunRecord, burn_in: usize) -> TrialFits {
    let mut notes = Vec::new();
    let consensus = fit_or_note(&record.consensus_series(), burn_in, "consensus", &mut notes);
    let kl = fit_or_note(&record.kl_series(), burn_in, "kl", &mut notes);
    TrialFits {
        trial: record.trial,
        consensus,
        kl,
        notes,
    }
}

/// First recorded cycle at which the agent-averaged accuracy reaches `threshold`.
pub fn cycles_to_accuracy(record: &RunRecord, threshold: f64) -> Option<usize> {
    record.series.iter().find_map(|m| {
        let acc = m.accuracy.as_ref()?;
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        (mean >= threshold).then_some(m.cycle)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    /// `final_kl` or `final_accuracy`.
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub trials_ok: usize,
    pub trials_diverged: usize,
}

#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub label: String,
    pub hyper: HyperParams,
    pub records: Vec<RunRecord>,
    pub fits: Vec<TrialFits>,
    pub diverged: Vec<String>,
    pub summary: SummaryRow,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub points: Vec<PointOutcome>,
    pub conditions: ConditionsOutput,
}

impl ExperimentOutcome {
    pub fn any_diverged(&self) -> bool {
        self.points.iter().any(|p| !p.diverged.is_empty())
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:<16} {:>14} {:>12} {:>6} {:>9}",
            "sweep point", "metric", "mean", "std", "ok", "diverged"
        );
        for p in &self.points {
            let r = &p.summary;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
            let _ = writeln!(
                s,
                "{:<20} {:<16} {:>14} {:>12} {:>6} {:>9}",
                r.label,
                r.metric,
                fmt(r.mean),
                fmt(r.std),
                r.trials_ok,
                r.trials_diverged
            );
        }
        s
    }
}

/// Mean and sample standard deviation (`None` std for fewer than two values).
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

fn summarize(label: &str, records: &[RunRecord], diverged: usize) -> SummaryRow {
    let kl: Vec<f64> = records
        .iter()
        .filter_map(|r| r.series.last().and_then(|m| m.kl))
        .collect();
    let (metric, values) = if !kl.is_empty() {
        ("final_kl", kl)
    } else {
        (
            "final_accuracy",
            records
                .iter()
                .filter_map(RunRecord::final_accuracy)
                .collect(),
        )
    };
    let (mean, std) = mean_std(&values);
    SummaryRow {
        label: label.to_string(),
        metric: metric.into(),
        mean,
        std,
        trials_ok: records.len(),
        trials_diverged: diverged,
    }
}

pub fn config_fingerprint(cfg: &RunConfig) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

#[derive(Debug, Serialize)]
struct PointMetadata<'a> {
    label: &'a str,
    config: &'a RunConfig,
    config_source: Option<&'a Path>,
    config_sha256: String,
    defaults_applied: &'a [String],
    sweep_point: &'a SweepPoint,
    hyper: &'a HyperParams,
    master_seed: u64,
    seed_scheme: &'static str,
    trials: usize,
    chains: usize,
    cycles: usize,
    cadence: usize,
    burn_in: usize,
    condition_report: &'a ConditionReport,
    lipschitz: &'a LipschitzInfo,
    fitted_rates: &'a [TrialFits],
    kl_aggregation: Option<&'static str>,
    data: &'a IngestSummary,
    diverged: &'a [String],
    summary: &'a SummaryRow,
}

/// Runs every sweep point. Trials run on a pool of `workers` threads (the
/// rayon default when `None`); results do not depend on the worker count.
/// Divergent trials are reported in the outcome and metadata, not as `Err`.
pub fn run_experiment(
    loaded: &LoadedConfig,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<ExperimentOutcome> {
    let cfg = &loaded.config;
    let problem = build_problem(cfg)?;
    let lipschitz = estimate_problem_lipschitz(cfg, &problem)?;
    let conditions = conditions_for(cfg, &problem, &lipschitz);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::validation("workers", e.to_string()))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let fingerprint = config_fingerprint(cfg)?;
    let burn_in = cfg.burn_in();

    let mut points = Vec::new();
    for (idx, point) in cfg.sweep_points().iter().enumerate() {
        let label = point.label(cfg.hyper.f);
        let hp = cfg.hyper_for(point);
        let spec = TrialSpec {
            graph: &problem.graph,
            model: &problem.model,
            shards: &problem.shards,
            hp,
            cycles: cfg.cycles,
            chains: cfg.chains,
            metrics: MetricSpec {
                cadence: cfg.cadence,
                kl_reference: problem.kl_reference,
                test_set: problem.test.clone(),
            },
        };
        log::info!(
            "running {label}: {} trials x {} chains x {} cycles",
            cfg.trials,
            cfg.chains,
            cfg.cycles
        );
        let results: Vec<Result<RunRecord>> = pool.install(|| {
            (0..cfg.trials)
                .into_par_iter()
                .map(|t| run_trial(&spec, cfg.master_seed, t))
                .collect()
        });
        let dir = out_dir.join(&label);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut records = Vec::new();
        let mut diverged = Vec::new();
        for r in results {
            match r {
                Ok(rec) => {
                    rec.write_csv_file(dir.join(format!("trial_{}.csv", rec.trial)))?;
                    records.push(rec);
                }
                Err(e @ Error::Diverged { .. }) => {
                    log::error!("{label}: {e}");
                    diverged.push(e.to_string());
                }
                Err(e) => return Err(e),
            }
        }
        let fits: Vec<TrialFits> = records.iter().map(|r| fit_record(r, burn_in)).collect();
        let summary = summarize(&label, &records, diverged.len());
        let meta = PointMetadata {
            label: &label,
            config: cfg,
            config_source: loaded.source.as_deref(),
            config_sha256: fingerprint.clone(),
            defaults_applied: &loaded.defaults_applied,
            sweep_point: point,
            hyper: &hp,
            master_seed: cfg.master_seed,
            seed_scheme: "chain seed = derive(master_seed, [trial, chain]); per-cycle agent seed = derive(chain seed, [cycle, agent])",
            trials: cfg.trials,
            chains: cfg.chains,
            cycles: cfg.cycles,
            cadence: cfg.cadence,
            burn_in,
            condition_report: &conditions.points[idx].report,
            lipschitz: &lipschitz,
            fitted_rates: &fits,
            kl_aggregation: problem.kl_reference.map(|_| KL_AGGREGATION_NOTE),
            data: &problem.data_summary,
            diverged: &diverged,
            summary: &summary,
        };
        let meta_path = dir.join("metadata.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;
        points.push(PointOutcome {
            label,
            hyper: hp,
            records,
            fits,
            diverged,
            summary,
        });
    }
    let rows: Vec<&SummaryRow> = points.iter().map(|p| &p.summary).collect();
    let summary_path = out_dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&rows)?)
        .map_err(|e| Error::io(&summary_path, e))?;
    Ok(ExperimentOutcome {
        out_dir: out_dir.to_path_buf(),
        points,
        conditions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileFits {
    pub file: PathBuf,
    pub burn_in: usize,
    pub consensus: Option<DecayFit>,
    pub kl: Option<DecayFit>,
    pub notes: Vec<String>,
}

fn trial_csvs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.extend(trial_csvs(&path)?);
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("trial_") && n.ends_with(".csv"))
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn burn_in_from_metadata(dir: &Path) -> Option<usize> {
    let text = std::fs::read_to_string(dir.join("metadata.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("burn_in")?.as_u64().map(|b| b as usize)
}

/// Refits decay rates for every `trial_*.csv` below `dir`. Burn-in comes from
/// the sibling `metadata.json`, or the first 10% of recorded cycles.
pub fn fit_rates(dir: &Path) -> Result<Vec<FileFits>> {
    let files = trial_csvs(dir)?;
    if files.is_empty() {
        return Err(Error::validation(
            "results-dir",
            format!("no trial_*.csv files under {}", dir.display()),
        ));
    }
    files
        .into_iter()
        .map(|file| {
            let series = metrics::read_csv_series(&file)?;
            let parent = file.parent().unwrap_or(dir);
            let last = series.cycle.last().copied().unwrap_or(0);
            let burn_in = burn_in_from_metadata(parent).unwrap_or(last / 10);
            let mut notes = Vec::new();
            let consensus: Vec<(usize, f64)> = series
                .cycle
                .iter()
                .copied()
                .zip(series.consensus_error_sq.iter().copied())
                .collect();
            let kl: Vec<(usize, f64)> = series
                .cycle
                .iter()
                .zip(&series.kl)
                .filter_map(|(&k, v)| v.map(|v| (k, v)))
                .collect();
            Ok(FileFits {
                consensus: fit_or_note(&consensus, burn_in, "consensus", &mut notes),
                kl: fit_or_note(&kl, burn_in, "kl", &mut notes),
                file,
                burn_in,
                notes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset_with;

    fn small_toy() -> LoadedConfig {
        preset_with(
            "gaussian_toy",
            "chains = 20\ncycles = 60\ntrials = 2\n[conditions]\nlipschitz_probes = 100\n",
        )
        .unwrap()
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[]), (None, None));
        assert_eq!(mean_std(&[2.0]), (Some(2.0), None));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, Some(2.0));
        assert!((s.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn toy_sweep_writes_one_set_per_t() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&small_toy(), dir.path(), Some(2)).unwrap();
        assert_eq!(out.points.len(), 3);
        for label in ["T1_f0.1", "T3_f0.1", "T5_f0.1"] {
            let sub = dir.path().join(label);
            assert!(sub.join("trial_0.csv").exists());
            assert!(sub.join("trial_1.csv").exists());
            let meta: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(sub.join("metadata.json")).unwrap())
                    .unwrap();
            assert!(meta.get("condition_report").is_some());
            assert!(meta["defaults_applied"].as_array().unwrap().len() > 5);
            let rows = std::fs::read_to_string(sub.join("trial_0.csv"))
                .unwrap()
                .lines()
                .count();
            assert_eq!(rows, 1 + 60);
        }
        assert!(!out.any_diverged());
        assert!(out.summary_table().contains("final_kl"));
    }

    #[test]
    fn output_is_independent_of_worker_count() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small_toy();
        run_experiment(&cfg, a.path(), Some(1)).unwrap();
        run_experiment(&cfg, b.path(), Some(4)).unwrap();
        for label in ["T1_f0.1", "T5_f0.1"] {
            let x = std::fs::read(a.path().join(label).join("trial_1.csv")).unwrap();
            let y = std::fs::read(b.path().join(label).join("trial_1.csv")).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn divergence_is_reported_not_raised() {
        let cfg = preset_with(
            "gaussian_toy",
            "chains = 4\ncycles = 400\n[hyper]\na = 50.0\n[conditions]\nlipschitz_probes = 100\n",
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&cfg, dir.path(), Some(1)).unwrap();
        assert!(out.any_diverged());
        assert_eq!(out.points[0].summary.trials_diverged, 1);
    }

    #[test]
    fn fit_rates_reads_written_results() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = preset_with(
            "gaussian_toy",
            "chains = 10\ncycles = 200\nsweep = []\n[conditions]\nlipschitz_probes = 100\n",
        )
        .unwrap();
        run_experiment(&cfg, dir.path(), Some(1)).unwrap();
        let fits = fit_rates(dir.path()).unwrap();
        assert_eq!(fits.len(), 1);
        assert_eq!(fits[0].burn_in, 20);
        assert!(fits[0].consensus.is_some());
        let empty = tempfile::tempdir().unwrap();
        assert!(fit_rates(empty.path()).is_err());
    }

    #[test]
    fn toy_conditions_report_cond3_not_evaluable() {
        let cfg = small_toy().config;
        let out = check_conditions_for_config(&cfg).unwrap();
        for p in &out.points {
            assert!(matches!(
                p.report.moment_bound,
                scheduler::MomentBound::NotEvaluable { .. }
            ));
            assert!(p.largest_admissible_a.is_some());
        }
        assert!(format_conditions(&out).contains("not evaluable"));
    }
}
