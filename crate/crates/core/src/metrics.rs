//! Reported quantities and their serialization.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::{EngineStats, SwarmState};
use crate::error::{Error, Result};
use crate::models::{DataShard, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub cycle: usize,
    /// Mean over chains of `sum_i ||w_i - w_bar||^2`.
    pub consensus_error_sq: f64,
    /// Cross-chain KL per agent, averaged over agents.
    pub kl: Option<f64>,
    /// Delta-method standard error of `kl` from the cross-chain moments.
    pub kl_se: Option<f64>,
    pub accuracy: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub trial: usize,
    pub master_seed: u64,
    pub chains: usize,
    pub n_agents: usize,
    pub series: Vec<CycleMetrics>,
    pub stats: EngineStats,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> Option<f64> {
        let acc = self.series.last()?.accuracy.as_ref()?;
        Some(acc.iter().sum::<f64>() / acc.len() as f64)
    }

    pub fn consensus_series(&self) -> Vec<(usize, f64)> {
        self.series
            .iter()
            .map(|m| (m.cycle, m.consensus_error_sq))
            .collect()
    }

    pub fn kl_series(&self) -> Vec<(usize, f64)> {
        self.series
            .iter()
            .filter_map(|m| m.kl.map(|kl| (m.cycle, kl)))
            .collect()
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec![
            "cycle".to_string(),
            "consensus_error_sq".into(),
            "kl".into(),
        ];
        h.extend((0..self.n_agents).map(|i| format!("acc_agent_{i}")));
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header())?;
        for m in &self.series {
            let mut row = vec![
                m.cycle.to_string(),
                m.consensus_error_sq.to_string(),
                m.kl.map(|v| v.to_string()).unwrap_or_default(),
            ];
            match &m.accuracy {
                Some(acc) => row.extend(acc.iter().map(|a| a.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), self.n_agents)),
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Columns read back from a per-trial CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSeries {
    pub cycle: Vec<usize>,
    pub consensus_error_sq: Vec<f64>,
    pub kl: Vec<Option<f64>>,
    pub accuracy: Vec<Vec<Option<f64>>>,
}

pub fn read_csv_series(path: impl AsRef<Path>) -> Result<CsvSeries> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut s = CsvSeries {
        cycle: vec![],
        consensus_error_sq: vec![],
        kl: vec![],
        accuracy: vec![],
    };
    let bad = |line: usize, message: String| Error::MalformedRow {
        path: path.display().to_string(),
        line,
        message,
    };
    for (idx, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = idx + 2;
        let opt = |field: &str| -> Result<Option<f64>> {
            if field.is_empty() {
                Ok(None)
            } else {
                field
                    .parse()
                    .map(Some)
                    .map_err(|_| bad(line, format!("bad number `{field}`")))
            }
        };
        s.cycle.push(
            rec.get(0)
                .unwrap_or("")
                .parse()
                .map_err(|_| bad(line, "bad cycle".into()))?,
        );
        s.consensus_error_sq.push(
            opt(rec.get(1).unwrap_or(""))?.ok_or_else(|| bad(line, "missing consensus".into()))?,
        );
        s.kl.push(opt(rec.get(2).unwrap_or(""))?);
        s.accuracy
            .push(rec.iter().skip(3).map(opt).collect::<Result<Vec<_>>>()?);
    }
    Ok(s)
}

/// `sum_i ||w_i - w_bar||^2` over agent parameter vectors.
pub fn consensus_error_sq_of(params: &[&[f64]]) -> f64 {
    let n = params.len() as f64;
    let d = params.first().map_or(0, |p| p.len());
    (0..d)
        .map(|c| {
            let mean = params.iter().map(|p| p[c]).sum::<f64>() / n;
            params.iter().map(|p| (p[c] - mean).powi(2)).sum::<f64>()
        })
        .sum()
}

pub fn consensus_error_sq(state: &SwarmState) -> f64 {
    consensus_error_sq_of(&state.params())
}

fn sample_moments(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// KL divergence of `N(mu_s, sigma_s^2)` (sample moments, unbiased variance)
/// from the analytic `N(mu_p, sigma_p^2)`.
pub fn kl_gaussian_vs_analytic(samples: &[f64], mu_p: f64, sigma_p_sq: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::DegenerateSamples(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let (mu_s, var_s) = sample_moments(samples);
    if !(var_s > 0.0) {
        return Err(Error::DegenerateSamples("zero sample variance".into()));
    }
    Ok(kl_from_moments(mu_s, var_s, mu_p, sigma_p_sq))
}

pub fn kl_from_moments(mu_s: f64, var_s: f64, mu_p: f64, var_p: f64) -> f64 {
    let kl = 0.5 * (var_p / var_s).ln() + (var_s + (mu_s - mu_p).powi(2)) / (2.0 * var_p) - 0.5;
    kl.max(0.0)
}

/// First-order standard error of the sample KL, treating `mu_s` and
/// `sigma_s^2` as independent with variances `sigma_s^2/N` and `2 sigma_s^4/(N-1)`.
pub fn kl_standard_error(samples: &[f64], mu_p: f64, sigma_p_sq: f64) -> f64 {
    if samples.len() < 2 {
        return f64::NAN;
    }
    let n = samples.len() as f64;
    let (mu_s, var_s) = sample_moments(samples);
    let d_mu = (mu_s - mu_p) / sigma_p_sq;
    let d_var = 0.5 / sigma_p_sq - 0.5 / var_s;
    (d_mu * d_mu * var_s / n + d_var * d_var * 2.0 * var_s * var_s / (n - 1.0)).sqrt()
}

/// Fraction of the test set each agent classifies correctly, predicting with
/// the posterior average over that agent's samples.
pub fn accuracy(
    model: &ModelSpec,
    samples_per_agent: &[Vec<Vec<f64>>],
    test_set: &DataShard,
) -> Result<Vec<f64>> {
    if test_set.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    samples_per_agent
        .iter()
        .map(|samples| {
            let pred = model.predict(samples, &test_set.inputs)?;
            let correct = pred
                .iter()
                .zip(&test_set.labels)
                .filter(|(p, y)| p == y)
                .count();
            Ok(correct as f64 / test_set.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub exponent: f64,
    pub amplitude: f64,
    pub r_squared: f64,
    pub points: usize,
}

pub const MIN_FIT_POINTS: usize = 20;

/// Least squares of `log v = log A - p log(k + 1)` over points with
/// `k >= burn_in`.
pub fn fit_decay_rate(series: &[(usize, f64)], burn_in: usize) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|(k, _)| *k >= burn_in)
        .map(|&(k, v)| {
            if v > 0.0 {
                Ok(((k as f64 + 1.0).ln(), v.ln()))
            } else {
                Err(Error::NonPositiveValues { k, value: v })
            }
        })
        .collect::<Result<_>>()?;
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_FIT_POINTS,
            got: pts.len(),
        });
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(DecayFit {
        exponent: -slope,
        amplitude: intercept.exp(),
        r_squared,
        points: pts.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// `max_i` of the per-agent estimates; a lower bound on the true constant.
    pub max: f64,
    pub per_agent: Vec<f64>,
    pub probes: usize,
    pub radius: f64,
}

/// Uniform draw from the `dim`-ball of radius `radius` centered at the origin.
fn ball_point<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    dir.into_iter().map(|x| x * r / norm).collect()
}

/// Largest observed `||g(w1) - g(w2)|| / ||w1 - w2||` over random probe pairs,
/// for each of `agents` gradient maps.
pub fn estimate_lipschitz_with<R, F>(
    agents: usize,
    dim: usize,
    probes: usize,
    radius: f64,
    rng: &mut R,
    mut grad: F,
) -> Result<LipschitzEstimate>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
{
    let mut per_agent = vec![0.0f64; agents];
    for _ in 0..probes {
        let w1 = ball_point(dim, radius, rng);
        let w2 = ball_point(dim, radius, rng);
        let dw = w1
            .iter()
            .zip(&w2)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if dw == 0.0 {
            continue;
        }
        for (agent, best) in per_agent.iter_mut().enumerate() {
            let g1 = grad(agent, &w1)?;
            let g2 = grad(agent, &w2)?;
            let dg = g1
                .iter()
                .zip(&g2)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            *best = best.max(dg / dw);
        }
    }
    Ok(LipschitzEstimate {
        max: per_agent.iter().copied().fold(0.0, f64::max),
        per_agent,
        probes,
        radius,
    })
}

pub fn estimate_lipschitz<R: Rng + ?Sized>(
    model: &ModelSpec,
    shards: &[DataShard],
    probes: usize,
    radius: f64,
    rng: &mut R,
) -> Result<LipschitzEstimate> {
    estimate_lipschitz_with(shards.len(), model.d_w, probes, radius, rng, |i, w| {
        Ok(model.energy_grad_full(&shards[i], w)?.grad)
    })
}

/// Same estimator applied to the summed gradient `sum_i grad E_i`.
pub fn estimate_global_lipschitz<R: Rng + ?Sized>(
    model: &ModelSpec,
    shards: &[DataShard],
    probes: usize,
    radius: f64,
    rng: &mut R,
) -> Result<LipschitzEstimate> {
    estimate_lipschitz_with(1, model.d_w, probes, radius, rng, |_, w| {
        model.centralized_grad(shards, w)
    })
}
