//! Executes gossip cycles: pairwise fusion followed by `T` local Langevin
//! computations on a minibatch drawn once per cycle.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, CycleMetrics, RunRecord};
use crate::models::{DataShard, GradientResult, ModelSpec};
use crate::rng::{self, purpose};
use crate::scheduler::{CycleSchedule, HyperParams, Scheduler};
use crate::topology::{activation_probabilities, Graph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub w: Vec<f64>,
    pub tau: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmState {
    pub agents: Vec<AgentState>,
    pub cycle_index: u64,
}

impl SwarmState {
    pub fn from_params(params: Vec<Vec<f64>>) -> Self {
        Self {
            agents: params
                .into_iter()
                .map(|w| AgentState { w, tau: 0 })
                .collect(),
            cycle_index: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.agents.len()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.agents.iter().map(|a| a.w.as_slice()).collect()
    }
}

/// Counts of work done, per agent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub grad_evals: Vec<u64>,
    pub noise_draws: Vec<u64>,
}

impl EngineStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_evals: vec![0; n],
            noise_draws: vec![0; n],
        }
    }

    pub fn total_grad_evals(&self) -> u64 {
        self.grad_evals.iter().sum()
    }
}

/// `w_i <- w_i - beta (w_i - w_j)` and symmetrically for `w_j`.
pub fn fusion_step(state: &mut SwarmState, pair: (usize, usize), beta: f64) {
    let (i, j) = pair;
    assert_ne!(i, j, "fusion needs two distinct agents");
    let (lo, hi) = (i.min(j), i.max(j));
    let (head, tail) = state.agents.split_at_mut(hi);
    let (a, b) = (&mut head[lo].w, &mut tail[0].w);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let d = *x - *y;
        *x -= beta * d;
        *y += beta * d;
    }
}

/// One Langevin computation:
/// `w - (n alpha / p_i) grad + sqrt(alpha n^2) noise`.
pub fn local_computation(
    w_prev: &[f64],
    grad: &GradientResult,
    alpha: f64,
    p_i: f64,
    n: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let n = n as f64;
    let drift = n * alpha / p_i;
    let diffusion = (alpha * n * n).sqrt();
    let out: Vec<f64> = w_prev
        .iter()
        .zip(&grad.grad)
        .zip(noise)
        .map(|((w, g), v)| w - drift * g + diffusion * v)
        .collect();
    match out.iter().position(|x| !x.is_finite()) {
        Some(coord) => Err(Error::NonFiniteState { agent: 0, coord }),
        None => Ok(out),
    }
}

/// Minibatch indices used by every local computation of one agent in one
/// cycle, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLog {
    pub cycle: u64,
    pub agent: usize,
    pub indices: Vec<Vec<usize>>,
}

/// Everything a cycle needs that stays fixed over a chain.
#[derive(Debug, Clone, Copy)]
pub struct CycleContext<'a> {
    pub model: &'a ModelSpec,
    pub shards: &'a [DataShard],
    pub hp: &'a HyperParams,
    pub activation_probs: &'a [f64],
}

pub fn run_cycle(
    state: &mut SwarmState,
    schedule: &CycleSchedule,
    ctx: &CycleContext<'_>,
    stats: &mut EngineStats,
    mut batch_log: Option<&mut Vec<BatchLog>>,
) -> Result<()> {
    let n = state.n();
    let (i, j) = schedule.pair;
    fusion_step(state, (i, j), ctx.hp.beta);
    for (slot, agent) in [i, j].into_iter().enumerate() {
        let seed = schedule.agent_seeds[slot];
        let mut batch_rng = rng::stream(seed, &[purpose::MINIBATCH]);
        let mut noise_rng = rng::stream(seed, &[purpose::NOISE]);
        let shard = &ctx.shards[agent];
        let indices = ctx.model.draw_minibatch(shard, ctx.hp.f, &mut batch_rng);
        let mut used = Vec::new();
        let mut w = std::mem::take(&mut state.agents[agent].w);
        for _ in 0..schedule.t {
            let grad = ctx.model.grad_with_reused_batch(shard, &w, &indices)?;
            let noise: Vec<f64> = (0..w.len())
                .map(|_| StandardNormal.sample(&mut noise_rng))
                .collect();
            stats.grad_evals[agent] += 1;
            stats.noise_draws[agent] += 1;
            w = local_computation(
                &w,
                &grad,
                schedule.alpha,
                ctx.activation_probs[agent],
                n,
                &noise,
            )
            .map_err(|e| match e {
                Error::NonFiniteState { coord, .. } => Error::NonFiniteState { agent, coord },
                other => other,
            })?;
            if batch_log.is_some() {
                used.push(grad.minibatch_indices);
            }
        }
        state.agents[agent].w = w;
        state.agents[agent].tau += 1;
        if let Some(log) = batch_log.as_deref_mut() {
            log.push(BatchLog {
                cycle: schedule.cycle,
                agent,
                indices: used,
            });
        }
    }
    state.cycle_index += 1;
    Ok(())
}

/// One independent replica of the full `n`-agent system.
#[derive(Debug, Clone)]
pub struct Chain {
    pub state: SwarmState,
    pub stats: EngineStats,
    scheduler: Scheduler,
}

impl Chain {
    pub fn new(model: &ModelSpec, n: usize, hp: HyperParams, chain_seed: u64) -> Self {
        let params = (0..n)
            .map(|agent| {
                model.init_params(&mut rng::stream(chain_seed, &[purpose::INIT, agent as u64]))
            })
            .collect();
        Self::with_state(SwarmState::from_params(params), hp, chain_seed)
    }

    pub fn with_state(state: SwarmState, hp: HyperParams, chain_seed: u64) -> Self {
        let n = state.n();
        Self {
            state,
            stats: EngineStats::new(n),
            scheduler: Scheduler::new(n, hp, chain_seed),
        }
    }

    pub fn step(
        &mut self,
        g: &Graph,
        ctx: &CycleContext<'_>,
        batch_log: Option<&mut Vec<BatchLog>>,
    ) -> Result<CycleSchedule> {
        let schedule = self.scheduler.next_cycle(g)?;
        run_cycle(&mut self.state, &schedule, ctx, &mut self.stats, batch_log)?;
        Ok(schedule)
    }
}

/// What to measure at each recorded cycle.
#[derive(Debug, Clone, Default)]
pub struct MetricSpec {
    /// Record every `cadence` cycles.
    pub cadence: usize,
    /// Analytic Gaussian posterior `(mu_p, sigma_p^2)` for the KL series.
    pub kl_reference: Option<(f64, f64)>,
    pub test_set: Option<DataShard>,
}

#[derive(Debug, Clone)]
pub struct TrialSpec<'a> {
    pub graph: &'a Graph,
    pub model: &'a ModelSpec,
    pub shards: &'a [DataShard],
    pub hp: HyperParams,
    pub cycles: usize,
    pub chains: usize,
    pub metrics: MetricSpec,
}

pub fn chain_seed(master_seed: u64, trial: usize, chain: usize) -> u64 {
    rng::derive(master_seed, &[trial as u64, chain as u64])
}

fn measure(
    chains: &[Chain],
    k: usize,
    model: &ModelSpec,
    spec: &MetricSpec,
) -> Result<CycleMetrics> {
    let n = chains[0].state.n();
    let consensus = chains
        .iter()
        .map(|c| metrics::consensus_error_sq(&c.state))
        .sum::<f64>()
        / chains.len() as f64;
    let (kl, kl_se) = match spec.kl_reference {
        Some((mu, var)) if chains.len() >= 2 => {
            let mut kl_sum = 0.0;
            let mut se_sum = 0.0;
            for agent in 0..n {
                let samples: Vec<f64> = chains.iter().map(|c| c.state.agents[agent].w[0]).collect();
                kl_sum += metrics::kl_gaussian_vs_analytic(&samples, mu, var)?;
                se_sum += metrics::kl_standard_error(&samples, mu, var);
            }
            (Some(kl_sum / n as f64), Some(se_sum / n as f64))
        }
        _ => (None, None),
    };
    let accuracy = match &spec.test_set {
        Some(test) => {
            let per_agent: Vec<Vec<Vec<f64>>> = (0..n)
                .map(|agent| {
                    chains
                        .iter()
                        .map(|c| c.state.agents[agent].w.clone())
                        .collect()
                })
                .collect();
            Some(metrics::accuracy(model, &per_agent, test)?)
        }
        None => None,
    };
    Ok(CycleMetrics {
        cycle: k,
        consensus_error_sq: consensus,
        kl,
        kl_se,
        accuracy,
    })
}

/// Runs every chain of one trial in lockstep and records metrics on the
/// configured cadence. Chains advance in parallel; all reductions run in
/// chain order, so the record does not depend on the thread count.
pub fn run_trial(spec: &TrialSpec<'_>, master_seed: u64, trial: usize) -> Result<RunRecord> {
    let n = spec.graph.n();
    if spec.shards.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: spec.shards.len(),
        });
    }
    let cadence = spec.metrics.cadence.max(1);
    let dist = activation_probabilities(spec.graph);
    let ctx = CycleContext {
        model: spec.model,
        shards: spec.shards,
        hp: &spec.hp,
        activation_probs: &dist.activation_probs,
    };
    let mut chains: Vec<Chain> = (0..spec.chains.max(1))
        .map(|c| Chain::new(spec.model, n, spec.hp, chain_seed(master_seed, trial, c)))
        .collect();
    let mut series = Vec::with_capacity(spec.cycles / cadence);
    for k in 1..=spec.cycles {
        let outcomes: Vec<Result<CycleSchedule>> = chains
            .par_iter_mut()
            .map(|c| c.step(spec.graph, &ctx, None))
            .collect();
        if let Some((chain, err)) = outcomes
            .into_iter()
            .enumerate()
            .find_map(|(idx, r)| r.err().map(|e| (idx, e)))
        {
            return Err(Error::Diverged {
                trial,
                chain,
                cycle: k,
                source: Box::new(err),
            });
        }
        if k % cadence == 0 {
            series.push(measure(&chains, k, spec.model, &spec.metrics)?);
        }
    }
    let mut stats = EngineStats::new(n);
    for c in &chains {
        for a in 0..n {
            stats.grad_evals[a] += c.stats.grad_evals[a];
            stats.noise_draws[a] += c.stats.noise_draws[a];
        }
    }
    Ok(RunRecord {
        trial,
        master_seed,
        chains: chains.len(),
        n_agents: n,
        series,
        stats,
    })
}
