//! Regret, communication and switching accounting, plus gap-dependent
//! diagnostics computed from run ledgers and transcripts.

use serde::{Deserialize, Serialize};

use crate::error::{FedqError, Result};
use crate::mdp::{evaluate_policy, DeterministicPolicy, MdpSolution, TabularMdp, GAP_TOLERANCE};
use crate::runtime::{RoundTranscript, Variant};

/// Metrics sampled at one per-agent episode count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Episodes run by each agent (`T/H`).
    pub episodes_per_agent: u64,
    /// Episodes run by all agents together.
    pub episodes_total: u64,
    pub regret: f64,
    /// Index of the round in progress.
    pub rounds: u64,
    pub comm_scalars: u64,
    pub abort_scalars: u64,
    pub switching: u64,
    pub subopt_visits: u64,
    /// Global `(h, s, a)` visit counts at this point.
    pub visit_ledger: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub num_agents: usize,
    pub checkpoints: Vec<Checkpoint>,
    pub regret: f64,
    pub comm_scalars: u64,
    pub abort_scalars: u64,
    pub rounds: u64,
    pub switching_cost: u64,
    pub subopt_visits: u64,
    pub visit_ledger: Vec<u64>,
    /// Fraction of `(k, s, a, h)` with `Q^k_h(s, a) >= Q*_h(s, a)`.
    pub optimism_fraction: f64,
    pub episodes_per_agent: u64,
    pub episodes_total: u64,
    pub steps_total: u64,
}

impl RunMetrics {
    /// `(episodes per agent, cumulative regret)` pairs.
    pub fn regret_curve(&self) -> Vec<(u64, f64)> {
        self.checkpoints
            .iter()
            .map(|c| (c.episodes_per_agent, c.regret))
            .collect()
    }

    /// `(episodes per agent, rounds)` pairs.
    pub fn rounds_curve(&self) -> Vec<(u64, u64)> {
        self.checkpoints
            .iter()
            .map(|c| (c.episodes_per_agent, c.rounds))
            .collect()
    }

    /// Checkpoint at exactly `episodes_per_agent`, if one was recorded.
    pub fn checkpoint_at(&self, episodes_per_agent: u64) -> Option<&Checkpoint> {
        self.checkpoints
            .iter()
            .find(|c| c.episodes_per_agent == episodes_per_agent)
    }
}

/// Episode counts `1, ⌈1.25⌉, ...` up to and including `max`.
pub fn geometric_checkpoints(max: u64, ratio: f64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut cur = 1u64;
    while cur < max {
        out.push(cur);
        cur = ((cur as f64 * ratio).ceil() as u64).max(cur + 1);
    }
    if max >= 1 {
        out.push(max);
    }
    out
}

/// Exact per-initial-state regret and optimal-action lookup for one MDP.
///
/// Built from backward induction directly, so it also works for
/// single-action instances that [`crate::mdp::solve_optimal`] rejects.
#[derive(Debug, Clone)]
pub struct RegretOracle {
    pub q_star: Vec<f64>,
    pub v_star: Vec<f64>,
    optimal: Vec<bool>,
}

impl RegretOracle {
    pub fn new(mdp: &TabularMdp) -> Self {
        let values = mdp.optimal_values();
        let a_n = mdp.num_actions();
        let optimal = values
            .q_star
            .iter()
            .enumerate()
            .map(|(i, q)| values.v_star[i / a_n] - q <= GAP_TOLERANCE)
            .collect();
        RegretOracle {
            q_star: values.q_star,
            v_star: values.v_star,
            optimal,
        }
    }

    #[inline]
    pub fn is_optimal(&self, sa_index: usize) -> bool {
        self.optimal[sa_index]
    }

    /// `V*_1(s) - V^π_1(s)` for every initial state `s`.
    pub fn initial_gaps(&self, mdp: &TabularMdp, policy: &DeterministicPolicy) -> Vec<f64> {
        let v_pi = crate::mdp::evaluate_policy_unchecked(mdp, policy);
        (0..mdp.num_states())
            .map(|s| (self.v_star[s] - v_pi[s]).max(0.0))
            .collect()
    }
}

/// Incremental bookkeeping shared by the federated runtime and the baseline.
#[derive(Debug, Clone)]
pub(crate) struct MetricsRecorder {
    schedule: Vec<u64>,
    next_checkpoint: usize,
    pub(crate) metrics: RunMetrics,
    optimism_hits: u64,
    optimism_total: u64,
}

impl MetricsRecorder {
    pub(crate) fn new(num_agents: usize, num_triples: usize, schedule: Vec<u64>) -> Self {
        MetricsRecorder {
            schedule,
            next_checkpoint: 0,
            metrics: RunMetrics {
                num_agents,
                checkpoints: Vec::new(),
                regret: 0.0,
                comm_scalars: 0,
                abort_scalars: 0,
                rounds: 0,
                switching_cost: 0,
                subopt_visits: 0,
                visit_ledger: vec![0; num_triples],
                optimism_fraction: 0.0,
                episodes_per_agent: 0,
                episodes_total: 0,
                steps_total: 0,
            },
            optimism_hits: 0,
            optimism_total: 0,
        }
    }

    pub(crate) fn record_optimism(&mut self, q_est: &[f64], q_star: &[f64]) {
        self.optimism_total += q_est.len() as u64;
        self.optimism_hits += q_est
            .iter()
            .zip(q_star)
            .filter(|(q, qs)| *q >= *qs)
            .count() as u64;
    }

    pub(crate) fn record_step(&mut self, sa_index: usize, optimal: bool) {
        self.metrics.visit_ledger[sa_index] += 1;
        self.metrics.steps_total += 1;
        if !optimal {
            self.metrics.subopt_visits += 1;
        }
    }

    /// Closes one wave: every agent finished one episode.
    pub(crate) fn finish_wave(&mut self, wave_regret: f64, num_agents: u64) {
        let m = &mut self.metrics;
        m.regret += wave_regret;
        m.episodes_per_agent += 1;
        m.episodes_total += num_agents;
        if self.schedule.get(self.next_checkpoint) == Some(&m.episodes_per_agent) {
            self.next_checkpoint += 1;
            m.checkpoints.push(Checkpoint {
                episodes_per_agent: m.episodes_per_agent,
                episodes_total: m.episodes_total,
                regret: m.regret,
                rounds: m.rounds,
                comm_scalars: m.comm_scalars,
                abort_scalars: m.abort_scalars,
                switching: m.switching_cost,
                subopt_visits: m.subopt_visits,
                visit_ledger: m.visit_ledger.clone(),
            });
        }
    }

    pub(crate) fn finish(mut self) -> RunMetrics {
        self.metrics.optimism_fraction = if self.optimism_total == 0 {
            0.0
        } else {
            self.optimism_hits as f64 / self.optimism_total as f64
        };
        self.metrics
    }
}

/// Regret of one round: `Σ (V*_1(s_1) - V^π_1(s_1))` over its initial states.
pub fn round_regret(
    solution: &MdpSolution,
    mdp: &TabularMdp,
    policy: &DeterministicPolicy,
    initial_states: &[usize],
) -> Result<f64> {
    let v_pi = evaluate_policy(mdp, policy)?;
    Ok(initial_states
        .iter()
        .map(|s| (solution.v_star(0, *s) - v_pi[*s]).max(0.0))
        .sum())
}

/// Scalars exchanged in one round, split into the main payload and abort signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundScalars {
    pub downlink: u64,
    pub uplink: u64,
    /// One abort signal up plus its broadcast to every agent.
    pub abort: u64,
}

impl RoundScalars {
    pub fn payload(&self) -> u64 {
        self.downlink + self.uplink
    }
}

/// Downlink sends `π^k`, `N^k` at `π^k` and `V^k`; uplink sends `r`, `n`, `v`
/// (and `μ` for Bernstein) for every `(h, s)` from every agent.
pub fn count_round_scalars(
    num_agents: usize,
    horizon: usize,
    num_states: usize,
    variant: Variant,
) -> RoundScalars {
    let mhs = (num_agents * horizon * num_states) as u64;
    let up_per = match variant {
        Variant::Hoeffding => 3,
        Variant::Bernstein => 4,
    };
    RoundScalars {
        downlink: 3 * mhs,
        uplink: up_per * mhs,
        abort: 1 + num_agents as u64,
    }
}

/// 1 iff the two policies differ anywhere.
pub fn switching_increment(prev: &DeterministicPolicy, next: &DeterministicPolicy) -> u64 {
    u64::from(prev.actions() != next.actions())
}

/// Step visits that used an action outside the optimal set.
pub fn suboptimal_visit_count(transcripts: &[RoundTranscript], solution: &MdpSolution) -> u64 {
    transcripts
        .iter()
        .flat_map(|t| t.episodes.iter())
        .flat_map(|e| e.steps.iter().enumerate())
        .filter(|(h, st)| !solution.is_optimal(*h, st.state, st.action))
        .count() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationRow {
    pub state: usize,
    /// Zero-based step.
    pub step: usize,
    /// Episodes observed so far (`R`).
    pub episodes: u64,
    /// `|N(s, optimal actions) - R P*_{s,h}|`
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    /// Meaningful only when the instance is a G-MDP.
    pub is_gmdp: bool,
    pub rows: Vec<ConcentrationRow>,
    /// `(R, max_{s,h} deviation / R)` per checkpoint.
    pub normalized_max: Vec<(u64, f64)>,
}

/// Visits to optimal actions against `R P*` at every checkpoint of a run.
pub fn visit_concentration_report(metrics: &RunMetrics, solution: &MdpSolution) -> ConcentrationReport {
    let (s_n, a_n, h_n) = (solution.num_states, solution.num_actions, solution.horizon);
    let mut rows = Vec::new();
    let mut normalized_max = Vec::new();
    for cp in &metrics.checkpoints {
        let r = cp.episodes_total;
        let mut worst: f64 = 0.0;
        for h in 0..h_n {
            for s in 0..s_n {
                let visits: u64 = solution.optimal_actions[h * s_n + s]
                    .iter()
                    .map(|a| cp.visit_ledger[(h * s_n + s) * a_n + a])
                    .sum();
                let deviation = (visits as f64 - r as f64 * solution.visit_prob(h, s)).abs();
                worst = worst.max(deviation);
                rows.push(ConcentrationRow {
                    state: s,
                    step: h,
                    episodes: r,
                    deviation,
                });
            }
        }
        normalized_max.push((r, if r == 0 { 0.0 } else { worst / r as f64 }));
    }
    ConcentrationReport {
        is_gmdp: solution.is_gmdp,
        rows,
        normalized_max,
    }
}

/// Order-level bound values with every absolute constant set to 1.
/// These are reference magnitudes, not guarantees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalBounds {
    pub regret_bound: f64,
    pub round_bound: Option<f64>,
    pub switching_bound: Option<f64>,
}

/// `H^6 SA ι1/Δ + M sqrt(H^7) SA sqrt(ι1) + M H^5 SA` with `ι1 = ln(MSAT)`.
pub fn regret_bound(min_gap: f64, m: usize, s: usize, a: usize, h: usize, t: f64) -> f64 {
    let (m, s, a, h) = (m as f64, s as f64, a as f64, h as f64);
    let sa = s * a;
    let iota1 = (m * sa * t).ln();
    h.powi(6) * sa * iota1 / min_gap + m * h.powf(3.5) * sa * iota1.sqrt() + m * h.powi(5) * sa
}

/// Round-count bound for G-MDPs, failure probability `p`.
pub fn round_bound(solution: &MdpSolution, m: usize, s: usize, a: usize, h: usize, t: f64, p: f64) -> Result<f64> {
    if !solution.is_gmdp {
        return Err(FedqError::NotGmdp);
    }
    let (mf, sf, af, hf) = (m as f64, s as f64, a as f64, h as f64);
    let d2 = solution.min_gap * solution.min_gap;
    let iota0 = (mf * sf * af * t / p).ln();
    Ok(mf * hf.powi(3) * sf * af * (mf * hf * hf * iota0).ln()
        + hf.powi(3) * sf * af * (hf.powi(5) * sf * af / d2).ln()
        + hf.powi(3) * sf * (mf * hf.powi(9) * sf * af * iota0 / (d2 * solution.c_st)).ln()
        + hf * hf * (t / (hf * sf * af)).ln())
}

/// Single-agent global switching bound for G-MDPs.
pub fn switching_bound(solution: &MdpSolution, s: usize, a: usize, h: usize, t: f64, p: f64) -> Result<f64> {
    if !solution.is_gmdp {
        return Err(FedqError::NotGmdp);
    }
    let (sf, af, hf) = (s as f64, a as f64, h as f64);
    let d2 = solution.min_gap * solution.min_gap;
    let iota2 = (sf * af * t / p).ln();
    Ok(hf.powi(3) * sf * af * (hf.powi(5) * sf * af * iota2 / d2).ln()
        + hf.powi(3) * sf * (1.0 / solution.c_st).ln()
        + hf * hf * (t / (hf * sf * af)).ln())
}

pub fn theoretical_bounds(
    solution: &MdpSolution,
    m: usize,
    s: usize,
    a: usize,
    h: usize,
    t: f64,
    p: f64,
) -> TheoreticalBounds {
    TheoreticalBounds {
        regret_bound: regret_bound(solution.min_gap, m, s, a, h, t),
        round_bound: round_bound(solution, m, s, a, h, t, p).ok(),
        switching_bound: switching_bound(solution, s, a, h, t, p).ok(),
    }
}
