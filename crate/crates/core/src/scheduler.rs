//! Gossip event generation: who wakes, whom they pick, how many local
//! computations the pair agrees on, and the shared step size.
//!
//! Poisson clocks are simulated through their jump chain. Each universal
//! tick wakes a uniformly chosen agent, so only the discrete sequence of
//! active pairs is drawn.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SimRng};
use crate::topology::{Graph, SpectralConstants};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TMode {
    Static {
        t: usize,
    },
    /// Each active agent proposes a count uniformly in `[t_min, t_max]`.
    Dynamic {
        t_min: usize,
        t_max: usize,
    },
}

impl TMode {
    /// Worst-case local computation count per cycle.
    pub fn resolved_max(&self) -> usize {
        match *self {
            TMode::Static { t } => t,
            TMode::Dynamic { t_max, .. } => t_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    #[default]
    Sequential,
    /// A pair stays engaged for `T` logical ticks; a waking agent avoids
    /// engaged neighbors.
    Overlapping,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub a: f64,
    pub delta_alpha: f64,
    pub beta: f64,
    pub t_mode: TMode,
    pub f: f64,
    #[serde(default)]
    pub overlap_mode: OverlapMode,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::validation(
                "hyper.a",
                format!("must be > 0, got {}", self.a),
            ));
        }
        if !(self.delta_alpha > 0.0 && self.delta_alpha.is_finite()) {
            return Err(Error::validation(
                "hyper.delta_alpha",
                format!("must be > 0, got {}", self.delta_alpha),
            ));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::validation(
                "hyper.beta",
                format!("must lie in (0, 1), got {}", self.beta),
            ));
        }
        if !(self.f > 0.0 && self.f <= 1.0) {
            return Err(Error::validation(
                "hyper.f",
                format!("must lie in (0, 1], got {}", self.f),
            ));
        }
        match self.t_mode {
            TMode::Static { t } if t == 0 => {
                Err(Error::validation("hyper.t_mode.t", "must be >= 1"))
            }
            TMode::Dynamic { t_min, t_max } if t_min == 0 || t_max < t_min => {
                Err(Error::validation(
                    "hyper.t_mode",
                    format!("need 1 <= t_min <= t_max, got [{t_min}, {t_max}]"),
                ))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClockState {
    pub tau: Vec<u64>,
    pub universal_k: u64,
}

impl ClockState {
    pub fn new(n: usize) -> Self {
        Self {
            tau: vec![0; n],
            universal_k: 0,
        }
    }
}

/// Everything the two active agents agree on at the start of a cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleSchedule {
    pub cycle: u64,
    /// Active agents in increasing index order.
    pub pair: (usize, usize),
    pub t: usize,
    pub alpha: f64,
    /// Sub-seeds for the two active agents' minibatch and noise streams,
    /// aligned with `pair`.
    pub agent_seeds: [u64; 2],
}

/// `a / (min(tau_i, tau_j) + 1)^delta_alpha`.
pub fn step_size(tau_i: u64, tau_j: u64, hp: &HyperParams) -> f64 {
    let m = tau_i.min(tau_j) as f64;
    hp.a / (m + 1.0).powf(hp.delta_alpha)
}

/// Static mode returns the configured count; dynamic mode takes the floored
/// average of the two proposals, never below 1.
pub fn negotiate_t(hp: &HyperParams, proposal_i: usize, proposal_j: usize) -> usize {
    match hp.t_mode {
        TMode::Static { t } => t,
        TMode::Dynamic { .. } => ((proposal_i + proposal_j) / 2).max(1),
    }
}

/// Picks a uniformly random non-engaged neighbor of `i`.
pub fn choose_partner<R: Rng + ?Sized>(
    g: &Graph,
    i: usize,
    engaged: &[bool],
    rng: &mut R,
) -> Result<usize> {
    let free: Vec<usize> = g
        .neighbors(i)
        .iter()
        .copied()
        .filter(|&j| !engaged[j])
        .collect();
    if free.is_empty() {
        return Err(Error::NoAvailablePair);
    }
    Ok(free[rng.random_range(0..free.len())])
}

/// Draws the active pair, returned in increasing index order.
///
/// Sequential mode ignores `engaged`. Overlapping mode wakes a uniformly
/// chosen free agent among those with at least one free neighbor and then
/// re-draws only the partner among free neighbors.
pub fn next_pair<R: Rng + ?Sized>(
    g: &Graph,
    rng: &mut R,
    engaged: &[bool],
    mode: OverlapMode,
) -> Result<(usize, usize)> {
    let (i, j) = match mode {
        OverlapMode::Sequential => {
            let i = rng.random_range(0..g.n());
            let nb = g.neighbors(i);
            (i, nb[rng.random_range(0..nb.len())])
        }
        OverlapMode::Overlapping => {
            let candidates: Vec<usize> = (0..g.n())
                .filter(|&i| !engaged[i] && g.neighbors(i).iter().any(|&j| !engaged[j]))
                .collect();
            if candidates.is_empty() {
                return Err(Error::NoAvailablePair);
            }
            let i = candidates[rng.random_range(0..candidates.len())];
            (i, choose_partner(g, i, engaged, rng)?)
        }
    };
    Ok((i.min(j), i.max(j)))
}

/// Per-chain event source. All draws come from streams derived from
/// `root_seed`, so a schedule is reproducible in isolation.
#[derive(Debug, Clone)]
pub struct Scheduler {
    hp: HyperParams,
    root_seed: u64,
    pair_rng: SimRng,
    proposal_rng: SimRng,
    clock: ClockState,
    now: u64,
    busy_until: Vec<u64>,
}

impl Scheduler {
    pub fn new(n: usize, hp: HyperParams, root_seed: u64) -> Self {
        Self {
            hp,
            root_seed,
            pair_rng: rng::stream(root_seed, &[rng::purpose::SCHEDULE]),
            proposal_rng: rng::stream(root_seed, &[rng::purpose::PROPOSAL]),
            clock: ClockState::new(n),
            now: 0,
            busy_until: vec![0; n],
        }
    }

    pub fn clock(&self) -> &ClockState {
        &self.clock
    }

    /// Seed root for agent `agent` in cycle `cycle` of this chain.
    pub fn agent_seed(root_seed: u64, cycle: u64, agent: usize) -> u64 {
        rng::derive(root_seed, &[cycle, agent as u64])
    }

    fn propose(&mut self) -> usize {
        match self.hp.t_mode {
            TMode::Static { t } => t,
            TMode::Dynamic { t_min, t_max } => self.proposal_rng.random_range(t_min..=t_max),
        }
    }

    pub fn next_cycle(&mut self, g: &Graph) -> Result<CycleSchedule> {
        let pair = match self.hp.overlap_mode {
            OverlapMode::Sequential => {
                next_pair(g, &mut self.pair_rng, &[], OverlapMode::Sequential)?
            }
            OverlapMode::Overlapping => loop {
                let engaged: Vec<bool> = self.busy_until.iter().map(|&b| b > self.now).collect();
                match next_pair(g, &mut self.pair_rng, &engaged, OverlapMode::Overlapping) {
                    Ok(p) => break p,
                    Err(Error::NoAvailablePair) => {
                        // Idle until the earliest engaged pair finishes.
                        self.now = self
                            .busy_until
                            .iter()
                            .copied()
                            .filter(|&b| b > self.now)
                            .min()
                            .ok_or(Error::NoAvailablePair)?;
                    }
                    Err(e) => return Err(e),
                }
            },
        };
        let (i, j) = pair;
        let (ti, tj) = (self.propose(), self.propose());
        let t = negotiate_t(&self.hp, ti, tj);
        let alpha = step_size(self.clock.tau[i], self.clock.tau[j], &self.hp);
        let cycle = self.clock.universal_k;
        let schedule = CycleSchedule {
            cycle,
            pair,
            t,
            alpha,
            agent_seeds: [
                Self::agent_seed(self.root_seed, cycle, i),
                Self::agent_seed(self.root_seed, cycle, j),
            ],
        };
        self.clock.tau[i] += 1;
        self.clock.tau[j] += 1;
        self.clock.universal_k += 1;
        if self.hp.overlap_mode == OverlapMode::Overlapping {
            self.busy_until[i] = self.now + t as u64;
            self.busy_until[j] = self.now + t as u64;
            self.now += 1;
        }
        Ok(schedule)
    }
}

/// One log-spaced grid, inclusive of both ends.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let (l, h) = (lo.log10(), hi.log10());
    (0..points)
        .map(|k| 10f64.powf(l + (h - l) * k as f64 / (points - 1) as f64))
        .collect()
}

pub const THETA_GRID_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepBound {
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionBound {
    pub lambda: f64,
    /// `None` when the step-size condition fails and the bound is undefined.
    pub lambda_bar: Option<f64>,
    pub theta: Option<f64>,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MomentBound {
    Evaluated { bound: f64, satisfied: bool },
    NotEvaluable { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub a: f64,
    pub t: usize,
    pub n: usize,
    pub p_m: f64,
    /// Per-agent gradient Lipschitz constant used in conditions 1 and 2.
    pub lipschitz: f64,
    /// Lipschitz constant of the summed gradient, used in condition 3.
    pub lipschitz_global: f64,
    pub lipschitz_note: String,
    pub step_bound: StepBound,
    pub contraction: ContractionBound,
    pub moment_bound: MomentBound,
}

impl ConditionReport {
    pub fn all_satisfied(&self) -> Option<bool> {
        match self.moment_bound {
            MomentBound::Evaluated { satisfied, .. } => {
                Some(self.step_bound.satisfied && self.contraction.satisfied && satisfied)
            }
            MomentBound::NotEvaluable { .. } => None,
        }
    }
}

/// Inputs for the condition checker that do not live in `HyperParams`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemConstants {
    pub n: usize,
    pub lipschitz: f64,
    pub lipschitz_global: f64,
    pub rho_u: Option<f64>,
}

/// `lambda (theta+1)^2 [1 + 5 a^2 n^2 L^2 T^2 / (theta p_m^2 (1 - a n L T / p_m)^2)]`
/// minimized over a log grid of `theta` in `[1e-2, 1e3]`.
pub fn lambda_bar(
    lambda: f64,
    a: f64,
    n: usize,
    lipschitz: f64,
    t: usize,
    p_m: f64,
) -> Option<(f64, f64)> {
    if a * t as f64 >= p_m / (n as f64 * lipschitz) {
        return None;
    }
    let r = a * n as f64 * lipschitz * t as f64 / p_m;
    let c = 5.0 * (a * n as f64 * lipschitz * t as f64).powi(2) / (p_m * p_m * (1.0 - r).powi(2));
    log_grid(1e-2, 1e3, THETA_GRID_POINTS)
        .into_iter()
        .map(|theta| (lambda * (theta + 1.0).powi(2) * (1.0 + c / theta), theta))
        .min_by(|x, y| x.0.total_cmp(&y.0))
}

pub fn check_conditions(
    hp: &HyperParams,
    sc: &SpectralConstants,
    pc: &ProblemConstants,
) -> ConditionReport {
    let t = hp.t_mode.resolved_max();
    let n = pc.n as f64;
    let lhs = hp.a * t as f64;
    let rhs = sc.p_m / (n * pc.lipschitz);
    let step_bound = StepBound {
        lhs,
        rhs,
        satisfied: lhs < rhs,
    };

    let lam = sc.lambda_contraction;
    let contraction = match lambda_bar(lam, hp.a, pc.n, pc.lipschitz, t, sc.p_m) {
        Some((value, theta)) => ContractionBound {
            lambda: lam,
            lambda_bar: Some(value),
            theta: Some(theta),
            satisfied: value < 1.0,
        },
        None => ContractionBound {
            lambda: lam,
            lambda_bar: None,
            theta: None,
            satisfied: false,
        },
    };

    let moment_bound = match pc.rho_u {
        _ if hp.delta_alpha <= 1.0 / 3.0 => MomentBound::NotEvaluable {
            reason: format!("bound requires delta_alpha > 1/3, got {}", hp.delta_alpha),
        },
        None => MomentBound::NotEvaluable {
            reason: "LSI constant rho_U not supplied".into(),
        },
        Some(rho) => {
            let d = hp.delta_alpha;
            let bound = (rho * (3.0 * d - 1.0)
                / (16.0 * t as f64 * pc.lipschitz_global.powi(4) * (6.0 * d - 1.0)))
                .cbrt();
            MomentBound::Evaluated {
                bound,
                satisfied: hp.a < bound,
            }
        }
    };

    ConditionReport {
        a: hp.a,
        t,
        n: pc.n,
        p_m: sc.p_m,
        lipschitz: pc.lipschitz,
        lipschitz_global: pc.lipschitz_global,
        lipschitz_note: String::new(),
        step_bound,
        contraction,
        moment_bound,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScan {
    pub a: f64,
    pub step_bound: bool,
    pub lambda_bar: Option<f64>,
    pub contraction: bool,
}

/// Re-runs the checker over a log grid of initial step scales.
pub fn scan_step_scale(
    hp: &HyperParams,
    sc: &SpectralConstants,
    pc: &ProblemConstants,
    grid: &[f64],
) -> Vec<StepScan> {
    grid.iter()
        .map(|&a| {
            let r = check_conditions(&HyperParams { a, ..*hp }, sc, pc);
            StepScan {
                a,
                step_bound: r.step_bound.satisfied,
                lambda_bar: r.contraction.lambda_bar,
                contraction: r.contraction.satisfied,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::spectral_constants;
    use approx::assert_abs_diff_eq;

    fn hp(a: f64, delta: f64, t_mode: TMode) -> HyperParams {
        HyperParams {
            a,
            delta_alpha: delta,
            beta: 0.5,
            t_mode,
            f: 0.1,
            overlap_mode: OverlapMode::Sequential,
        }
    }

    #[test]
    fn step_size_examples() {
        let h = hp(1e-4, 0.01, TMode::Static { t: 1 });
        assert_eq!(step_size(0, 0, &h), 1e-4);
        let h = hp(1e-4, 0.5, TMode::Static { t: 1 });
        assert_abs_diff_eq!(step_size(3, 7, &h), 5e-5, epsilon = 1e-20);
        assert_eq!(step_size(7, 3, &h), step_size(3, 7, &h));
    }

    #[test]
    fn negotiate_examples() {
        let dynamic = hp(
            1e-4,
            0.5,
            TMode::Dynamic {
                t_min: 1,
                t_max: 10,
            },
        );
        assert_eq!(negotiate_t(&dynamic, 3, 6), 4);
        assert_eq!(negotiate_t(&dynamic, 1, 1), 1);
        let fixed = hp(1e-4, 0.5, TMode::Static { t: 5 });
        assert_eq!(negotiate_t(&fixed, 1, 9), 5);
    }

    #[test]
    fn complete_two_always_pairs_zero_one() {
        let g = Graph::complete(2).unwrap();
        let mut r = rng::stream(0, &[]);
        for _ in 0..100 {
            assert_eq!(
                next_pair(&g, &mut r, &[false, false], OverlapMode::Sequential).unwrap(),
                (0, 1)
            );
            assert_eq!(
                next_pair(&g, &mut r, &[false, false], OverlapMode::Overlapping).unwrap(),
                (0, 1)
            );
        }
    }

    #[test]
    fn busy_neighbor_forces_other_partner() {
        let g = Graph::ring(5).unwrap();
        let engaged = [false, true, true, false, false];
        let mut r = rng::stream(1, &[]);
        for _ in 0..50 {
            assert_eq!(choose_partner(&g, 0, &engaged, &mut r).unwrap(), 4);
        }
        for _ in 0..200 {
            let (i, j) = next_pair(&g, &mut r, &engaged, OverlapMode::Overlapping).unwrap();
            assert!(!engaged[i] && !engaged[j] && g.is_edge(i, j));
        }
        let all_busy = [false, true, false, true, true];
        assert!(matches!(
            next_pair(&g, &mut r, &all_busy, OverlapMode::Overlapping),
            Err(Error::NoAvailablePair)
        ));
    }

    #[test]
    fn validation_rejects_out_of_range() {
        assert!(hp(1e-4, 0.5, TMode::Static { t: 1 }).validate().is_ok());
        assert!(hp(0.0, 0.5, TMode::Static { t: 1 }).validate().is_err());
        assert!(hp(1e-4, 0.5, TMode::Static { t: 0 }).validate().is_err());
        assert!(hp(1e-4, 0.5, TMode::Dynamic { t_min: 4, t_max: 2 })
            .validate()
            .is_err());
        let mut bad = hp(1e-4, 0.5, TMode::Static { t: 1 });
        bad.beta = 1.0;
        assert!(bad.validate().is_err());
        bad.beta = 0.5;
        bad.f = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scheduler_clock_bookkeeping() {
        let g = Graph::ring(5).unwrap();
        let mut s = Scheduler::new(
            5,
            hp(
                1e-4,
                0.5,
                TMode::Dynamic {
                    t_min: 1,
                    t_max: 10,
                },
            ),
            9,
        );
        for k in 0..500u64 {
            let before = s.clock().tau.clone();
            let c = s.next_cycle(&g).unwrap();
            assert_eq!(c.cycle, k);
            assert!(g.is_edge(c.pair.0, c.pair.1));
            assert!((1..=10).contains(&c.t));
            let (i, j) = c.pair;
            assert_eq!(c.alpha, step_size(before[i], before[j], &s.hp));
            assert_eq!(s.clock().tau[i], before[i] + 1);
            assert_eq!(s.clock().tau[j], before[j] + 1);
        }
        let clock = s.clock();
        assert_eq!(clock.universal_k, 500);
        assert_eq!(clock.tau.iter().sum::<u64>(), 1000);
    }

    #[test]
    fn overlapping_scheduler_never_reuses_engaged_agents() {
        let g = Graph::ring(6).unwrap();
        let mut h = hp(1e-4, 0.5, TMode::Static { t: 3 });
        h.overlap_mode = OverlapMode::Overlapping;
        let mut s = Scheduler::new(6, h, 4);
        let mut busy: Vec<u64> = vec![0; 6];
        for _ in 0..300 {
            let now = s.now;
            let c = s.next_cycle(&g).unwrap();
            let start = s.now - 1;
            assert!(start >= now);
            for a in [c.pair.0, c.pair.1] {
                assert!(busy[a] <= start);
                busy[a] = start + 3;
            }
        }
        assert_eq!(s.clock().tau.iter().sum::<u64>(), 600);
    }

    #[test]
    fn step_bound_boundary_is_strict() {
        let g = Graph::ring(5).unwrap();
        let sc = spectral_constants(&g, 0.5);
        let pc = ProblemConstants {
            n: 5,
            lipschitz: 0.6,
            lipschitz_global: 3.0,
            rho_u: None,
        };
        let a = sc.p_m / (5.0 * 0.6) / 2.0;
        let r = check_conditions(&hp(a, 0.01, TMode::Static { t: 2 }), &sc, &pc);
        assert_eq!(r.step_bound.lhs, r.step_bound.rhs);
        assert!(!r.step_bound.satisfied);
        assert!(r.contraction.lambda_bar.is_none());
        assert!(!r.contraction.satisfied);
    }

    #[test]
    fn small_step_satisfies_everything() {
        let g = Graph::ring(5).unwrap();
        let sc = spectral_constants(&g, 0.5);
        let pc = ProblemConstants {
            n: 5,
            lipschitz: 0.6,
            lipschitz_global: 3.0,
            rho_u: Some(1.0),
        };
        let r = check_conditions(&hp(1e-9, 0.5, TMode::Static { t: 5 }), &sc, &pc);
        assert_eq!(r.all_satisfied(), Some(true));
        let r = check_conditions(&hp(1e-9, 0.01, TMode::Static { t: 5 }), &sc, &pc);
        assert!(matches!(r.moment_bound, MomentBound::NotEvaluable { .. }));
        assert_eq!(r.all_satisfied(), None);
    }

    #[test]
    fn lambda_bar_is_grid_minimum() {
        let (lam, a, n, l, t, pm) = (0.86, 1e-3, 5, 0.6, 3, 0.4);
        let (best, theta) = lambda_bar(lam, a, n, l, t, pm).unwrap();
        let r = a * n as f64 * l * t as f64 / pm;
        let c = 5.0 * (a * n as f64 * l * t as f64).powi(2) / (pm * pm * (1.0 - r).powi(2));
        let brute = log_grid(1e-2, 1e3, 100)
            .into_iter()
            .map(|th| lam * (th + 1.0).powi(2) * (1.0 + c / th))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best, brute);
        assert!((1e-2..=1e3).contains(&theta));
        let grid = log_grid(1e-2, 1e3, 100);
        assert_abs_diff_eq!(grid[0], 1e-2, epsilon = 1e-15);
        assert_abs_diff_eq!(grid[99], 1e3, epsilon = 1e-9);
    }
}
