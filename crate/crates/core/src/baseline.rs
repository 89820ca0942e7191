//! Single-agent UCB-Hoeffding with per-step optimistic updates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedqError, Result};
use crate::mdp::{argmax_lowest, DeterministicPolicy, TabularMdp, TransitionSampler};
use crate::metrics::{geometric_checkpoints, switching_increment, MetricsRecorder, RegretOracle, RunMetrics};
use crate::rates::{eta, hoeffding_bonus, RateParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UcbState {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub q_est: Vec<f64>,
    pub v_est: Vec<f64>,
    pub visit_count: Vec<u64>,
    pub episode: u64,
}

impl UcbState {
    pub fn new(mdp: &TabularMdp) -> Self {
        let h = mdp.horizon() as f64;
        UcbState {
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            horizon: mdp.horizon(),
            q_est: vec![h; mdp.num_triples()],
            v_est: vec![h; mdp.horizon() * mdp.num_states()],
            visit_count: vec![0; mdp.num_triples()],
            episode: 0,
        }
    }

    pub fn greedy_policy(&self) -> DeterministicPolicy {
        DeterministicPolicy::greedy(&self.q_est, self.num_states, self.num_actions, self.horizon)
    }

    /// One optimistic update at `(h, s, a)`; returns the new greedy action at `(h, s)`.
    pub fn update(&mut self, h: usize, s: usize, a: usize, reward: f64, next: Option<usize>, rates: &RateParams) -> usize {
        let idx = (h * self.num_states + s) * self.num_actions + a;
        self.visit_count[idx] += 1;
        let t = self.visit_count[idx];
        let v_next = next.map_or(0.0, |s2| self.v_est[(h + 1) * self.num_states + s2]);
        let e = eta(t, self.horizon);
        self.q_est[idx] = (1.0 - e) * self.q_est[idx] + e * (reward + v_next + hoeffding_bonus(t, rates));
        let hs = h * self.num_states + s;
        let row = &self.q_est[hs * self.num_actions..(hs + 1) * self.num_actions];
        let best = argmax_lowest(row);
        self.v_est[hs] = row[best].min(self.horizon as f64);
        best
    }
}

/// Runs `num_episodes` episodes, recording checkpoints at the given episode counts.
pub fn run_ucb_hoeffding_with(
    mdp: &TabularMdp,
    num_episodes: u64,
    rates: &RateParams,
    seed: u64,
    checkpoints: Vec<u64>,
) -> Result<(RunMetrics, UcbState)> {
    if num_episodes == 0 {
        return Err(FedqError::config("episodes", "must be at least 1"));
    }
    if rates.horizon != mdp.horizon() {
        return Err(FedqError::InvalidParameter(format!(
            "rate horizon {} does not match MDP horizon {}",
            rates.horizon,
            mdp.horizon()
        )));
    }
    rates.validate()?;
    let h_n = mdp.horizon();
    let oracle = RegretOracle::new(mdp);
    let sampler = TransitionSampler::new(mdp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut rec = MetricsRecorder::new(1, mdp.num_triples(), checkpoints);
    let mut state = UcbState::new(mdp);
    let mut policy = state.greedy_policy();
    let mut gaps = oracle.initial_gaps(mdp, &policy);
    rec.record_optimism(&state.q_est, &oracle.q_star);

    for _ in 0..num_episodes {
        let episode_policy = policy.clone();
        let s1 = sampler.initial_state(&mut rng);
        let mut s = s1;
        for h in 0..h_n {
            let a = episode_policy.action(h, s);
            let idx = mdp.sa_index(h, s, a);
            let next = (h + 1 < h_n).then(|| sampler.next_state(&mut rng, idx));
            rec.record_step(idx, oracle.is_optimal(idx));
            let best = state.update(h, s, a, mdp.reward(h, s, a), next, rates);
            policy.set_action(h, s, best);
            if let Some(s2) = next {
                s = s2;
            }
        }
        state.episode += 1;
        rec.finish_wave(gaps[s1], 1);
        if switching_increment(&episode_policy, &policy) == 1 {
            rec.metrics.switching_cost += 1;
            gaps = oracle.initial_gaps(mdp, &policy);
        }
        rec.metrics.rounds = state.episode;
    }
    Ok((rec.finish(), state))
}

/// Runs with geometric checkpoints (×1.25, last one at `num_episodes`).
pub fn run_ucb_hoeffding(mdp: &TabularMdp, num_episodes: u64, rates: &RateParams, seed: u64) -> Result<RunMetrics> {
    let schedule = geometric_checkpoints(num_episodes, 1.25);
    run_ucb_hoeffding_with(mdp, num_episodes, rates, seed, schedule).map(|(m, _)| m)
}
