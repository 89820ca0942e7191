//! Federated Q-learning engine: server and agent state machines for the
//! Hoeffding and Bernstein variants with event-triggered round termination.
//!
//! Agents run episode waves in lockstep: in each wave every agent runs one
//! episode with the broadcast policy, and the round ends after the first wave
//! in which some agent's local visit count to some `(h, s, a)` reaches its
//! trigger threshold. Every agent therefore reports the same episode count.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedqError, Result};
use crate::mdp::{DeterministicPolicy, TabularMdp, TransitionSampler};
use crate::metrics::{
    count_round_scalars, geometric_checkpoints, switching_increment, MetricsRecorder,
    RegretOracle, RoundScalars, RunMetrics,
};
use crate::rates::{
    bernstein_beta, bernstein_per_visit_bonus, eta, eta_c_unchecked, hoeffding_bonus,
    hoeffding_round_bonus, BernsteinParams, RateParams,
};

/// Tolerance below which a negative running variance is treated as rounding noise.
const VARIANCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Hoeffding,
    Bernstein,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Hoeffding => "hoeffding",
            Variant::Bernstein => "bernstein",
        })
    }
}

impl FromStr for Variant {
    type Err = FedqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hoeffding" => Ok(Variant::Hoeffding),
            "bernstein" => Ok(Variant::Bernstein),
            other => Err(FedqError::config(
                "variant",
                format!("unknown variant `{other}` (expected hoeffding or bernstein)"),
            )),
        }
    }
}

/// Bonus constants shared by both variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BonusConfig {
    /// `c` in the Hoeffding bonus.
    pub bonus_scale: f64,
    /// `c'` in the Bernstein bonus.
    pub bernstein_scale: f64,
    /// `ι`
    pub log_factor: f64,
}

impl Default for BonusConfig {
    fn default() -> Self {
        BonusConfig {
            bonus_scale: 2.0,
            bernstein_scale: 2.0,
            log_factor: 1.0,
        }
    }
}

impl BonusConfig {
    pub fn rates(&self, horizon: usize) -> RateParams {
        RateParams {
            horizon,
            bonus_scale: self.bonus_scale,
            log_factor: self.log_factor,
        }
    }

    pub fn bernstein(&self, mdp: &TabularMdp, num_agents: usize) -> BernsteinParams {
        BernsteinParams {
            horizon: mdp.horizon(),
            bonus_scale: self.bernstein_scale,
            log_factor: self.log_factor,
            num_agents,
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedqConfig {
    pub num_agents: usize,
    /// `T0`: the run stops at the first round boundary with at least this
    /// many recorded steps.
    pub target_steps: u64,
    pub variant: Variant,
    pub bonus: BonusConfig,
    pub seed: u64,
    /// Per-agent episode counts at which metrics are sampled.
    pub checkpoints: Vec<u64>,
}

impl FedqConfig {
    /// Config for `episodes_per_agent` episodes per agent, with geometric
    /// checkpoints and default bonus constants.
    pub fn for_episodes(
        num_agents: usize,
        episodes_per_agent: u64,
        horizon: usize,
        variant: Variant,
        seed: u64,
    ) -> Self {
        FedqConfig {
            num_agents,
            target_steps: horizon as u64 * num_agents as u64 * episodes_per_agent,
            variant,
            bonus: BonusConfig::default(),
            seed,
            checkpoints: geometric_checkpoints(episodes_per_agent, 1.25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernsteinAccumulators {
    /// `W1`: running sum of squared next-step values.
    pub w1: Vec<f64>,
    /// `W2`: running sum of next-step values.
    pub w2: Vec<f64>,
    /// `W_k`: variance of all next-step values recorded before round `k`.
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    /// Index `k` of the next round to run (starts at 1).
    pub round: u64,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub num_agents: usize,
    pub variant: Variant,
    /// `Q_h^k(s, a)`
    pub q_est: Vec<f64>,
    /// `V_h^k(s)`; `V_{H+1}` is identically zero and not stored.
    pub v_est: Vec<f64>,
    pub policy: DeterministicPolicy,
    /// `N_h^k(s, a)`
    pub visit_total: Vec<u64>,
    pub bernstein: Option<BernsteinAccumulators>,
}

/// Per-agent visit cap for one round: `max{1, ⌊N / (M H (H+1))⌋}`.
#[inline]
pub fn trigger_threshold(visits: u64, num_agents: usize, horizon: usize) -> u64 {
    let denom = (num_agents * horizon * (horizon + 1)) as u64;
    (visits / denom).max(1)
}

impl ServerState {
    /// Initial state: `Q = V = H`, `N = 0`, action 0 everywhere.
    pub fn new(mdp: &TabularMdp, num_agents: usize, variant: Variant) -> Self {
        let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
        let n_sa = mdp.num_triples();
        ServerState {
            round: 1,
            num_states: s_n,
            num_actions: a_n,
            horizon: h_n,
            num_agents,
            variant,
            q_est: vec![h_n as f64; n_sa],
            v_est: vec![h_n as f64; h_n * s_n],
            policy: DeterministicPolicy::constant(s_n, h_n, 0),
            visit_total: vec![0; n_sa],
            bernstein: (variant == Variant::Bernstein).then(|| BernsteinAccumulators {
                w1: vec![0.0; n_sa],
                w2: vec![0.0; n_sa],
                variance: vec![0.0; n_sa],
            }),
        }
    }

    #[inline]
    fn sa(&self, h: usize, s: usize, a: usize) -> usize {
        (h * self.num_states + s) * self.num_actions + a
    }

    /// `i0 = 2 M H (H+1)`: Case-1/Case-2 switch point.
    pub fn case_switch(&self) -> u64 {
        2 * (self.num_agents * self.horizon * (self.horizon + 1)) as u64
    }

    pub fn total_visits(&self) -> u64 {
        self.visit_total.iter().sum()
    }

    /// `V_{h+1}^k(s)` with `V_{H+1} = 0`.
    #[inline]
    pub fn next_value(&self, h: usize, s: usize) -> f64 {
        if h + 1 < self.horizon {
            self.v_est[(h + 1) * self.num_states + s]
        } else {
            0.0
        }
    }

    /// Trigger threshold for every `(h, s)` at the broadcast action.
    pub fn trigger_thresholds(&self) -> Vec<u64> {
        (0..self.horizon * self.num_states)
            .map(|hs| {
                let (h, s) = (hs / self.num_states, hs % self.num_states);
                let n = self.visit_total[self.sa(h, s, self.policy.action(h, s))];
                trigger_threshold(n, self.num_agents, self.horizon)
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check_reports(&self, reports: &[AgentRoundReport]) -> Result<u64> {
        if reports.len() != self.num_agents {
            return Err(FedqError::InconsistentReports(format!(
                "expected {} reports, got {}",
                self.num_agents,
                reports.len()
            )));
        }
        let hs = self.horizon * self.num_states;
        let episodes = reports[0].episodes_run;
        for (m, r) in reports.iter().enumerate() {
            if r.episodes_run != episodes {
                return Err(FedqError::InconsistentReports(format!(
                    "agent {m} ran {} episodes, agent 0 ran {episodes}",
                    r.episodes_run
                )));
            }
            if r.visits.len() != hs || r.value_sums.len() != hs || r.rewards.len() != hs {
                return Err(FedqError::InconsistentReports(format!(
                    "agent {m} sent tables of the wrong size"
                )));
            }
            if self.variant == Variant::Bernstein
                && r.second_moment_means.as_ref().map(Vec::len) != Some(hs)
            {
                return Err(FedqError::InconsistentReports(format!(
                    "agent {m} is missing second-moment means"
                )));
            }
        }
        for i in 0..hs {
            let mut seen: Option<f64> = None;
            for (m, r) in reports.iter().enumerate() {
                if r.visits[i] == 0 {
                    continue;
                }
                match seen {
                    None => seen = Some(r.rewards[i]),
                    Some(x) if x != r.rewards[i] => {
                        return Err(FedqError::InconsistentReports(format!(
                            "agent {m} observed reward {} at (h={}, s={}), others saw {x}",
                            r.rewards[i],
                            i / self.num_states,
                            i % self.num_states
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(episodes)
    }

    /// Server update at the end of a round, dispatching on the variant.
    pub fn aggregate(&mut self, reports: &[AgentRoundReport], bonus: &BonusConfig, mdp: &TabularMdp) -> Result<()> {
        match self.variant {
            Variant::Hoeffding => self.apply_hoeffding(reports, &bonus.rates(self.horizon)),
            Variant::Bernstein => {
                let params = bonus.bernstein(mdp, self.num_agents);
                self.apply_bernstein(reports, &params)
            }
        }
    }

    fn apply_hoeffding(&mut self, reports: &[AgentRoundReport], rates: &RateParams) -> Result<()> {
        self.check_reports(reports)?;
        let i0 = self.case_switch();
        for h in 0..self.horizon {
            for s in 0..self.num_states {
                let hs = h * self.num_states + s;
                let n_round: u64 = reports.iter().map(|r| r.visits[hs]).sum();
                if n_round == 0 {
                    continue;
                }
                let idx = self.sa(h, s, self.policy.action(h, s));
                let n_prev = self.visit_total[idx];
                let n_new = n_prev + n_round;
                let reward = first_reward(reports, hs);
                let mut q = self.q_est[idx];
                if n_prev < i0 {
                    let mut t = n_prev;
                    for (m, r) in reports.iter().enumerate() {
                        match r.visits[hs] {
                            0 => continue,
                            1 => {}
                            n => return Err(case_one_violation(self.round, m, h, s, n)),
                        }
                        t += 1;
                        let e = eta(t, self.horizon);
                        q = (1.0 - e) * q + e * (reward + r.value_sums[hs] + hoeffding_bonus(t, rates));
                    }
                } else {
                    let v_mean = reports.iter().map(|r| r.value_sums[hs]).sum::<f64>() / n_round as f64;
                    let lr = 1.0 - eta_c_unchecked(n_prev + 1, n_new, self.horizon);
                    let beta = hoeffding_round_bonus(n_prev, n_new, rates)?;
                    q = (1.0 - lr) * q + lr * (reward + v_mean) + beta;
                }
                self.q_est[idx] = q;
                self.visit_total[idx] = n_new;
            }
        }
        self.refresh_values_and_policy();
        Ok(())
    }

    fn apply_bernstein(&mut self, reports: &[AgentRoundReport], params: &BernsteinParams) -> Result<()> {
        self.check_reports(reports)?;
        let i0 = self.case_switch();
        let round = self.round;
        for h in 0..self.horizon {
            for s in 0..self.num_states {
                let hs = h * self.num_states + s;
                let n_round: u64 = reports.iter().map(|r| r.visits[hs]).sum();
                if n_round == 0 {
                    continue;
                }
                let a = self.policy.action(h, s);
                let idx = self.sa(h, s, a);
                let n_prev = self.visit_total[idx];
                let n_new = n_prev + n_round;
                let reward = first_reward(reports, hs);
                let value_sum: f64 = reports.iter().map(|r| r.value_sums[hs]).sum();
                let square_sum: f64 = reports
                    .iter()
                    .map(|r| {
                        r.second_moment_means.as_ref().expect("checked above")[hs] * r.visits[hs] as f64
                    })
                    .sum();

                let acc = self.bernstein.as_mut().expect("Bernstein state carries accumulators");
                acc.w1[idx] += square_sum;
                acc.w2[idx] += value_sum;
                let mean = acc.w2[idx] / n_new as f64;
                let mut w_new = acc.w1[idx] / n_new as f64 - mean * mean;
                if w_new < 0.0 {
                    if w_new < -VARIANCE_TOLERANCE {
                        return Err(FedqError::NegativeVariance { h, s, a, value: w_new });
                    }
                    w_new = 0.0;
                }
                let w_old = acc.variance[idx];
                acc.variance[idx] = w_new;

                // β_t uses the variance after the round containing visit t.
                let beta_at = |t: u64| -> f64 {
                    if t == 0 {
                        0.0
                    } else if t > n_prev {
                        bernstein_beta(t, w_new, params)
                    } else {
                        bernstein_beta(t, w_old, params)
                    }
                };

                let mut q = self.q_est[idx];
                if n_prev < i0 {
                    let mut t = n_prev;
                    for (m, r) in reports.iter().enumerate() {
                        match r.visits[hs] {
                            0 => continue,
                            1 => {}
                            n => return Err(case_one_violation(round, m, h, s, n)),
                        }
                        t += 1;
                        let e = eta(t, self.horizon);
                        let b = bernstein_per_visit_bonus(t, beta_at(t), beta_at(t - 1), self.horizon);
                        q = (1.0 - e) * q + e * (reward + r.value_sums[hs] + b);
                    }
                } else {
                    let v_mean = value_sum / n_round as f64;
                    let decay = eta_c_unchecked(n_prev + 1, n_new, self.horizon);
                    let beta_tilde = beta_at(n_new) - decay * beta_at(n_prev);
                    q = decay * q + (1.0 - decay) * (reward + v_mean) + beta_tilde / 2.0;
                }
                self.q_est[idx] = q;
                self.visit_total[idx] = n_new;
            }
        }
        self.refresh_values_and_policy();
        Ok(())
    }

    fn refresh_values_and_policy(&mut self) {
        let cap = self.horizon as f64;
        let a_n = self.num_actions;
        for (hs, row) in self.q_est.chunks(a_n).enumerate() {
            let best = crate::mdp::argmax_lowest(row);
            self.v_est[hs] = row[best].min(cap);
            self.policy
                .set_action(hs / self.num_states, hs % self.num_states, best);
        }
        self.round += 1;
    }
}

fn first_reward(reports: &[AgentRoundReport], hs: usize) -> f64 {
    reports
        .iter()
        .find(|r| r.visits[hs] > 0)
        .map(|r| r.rewards[hs])
        .unwrap_or(0.0)
}

fn case_one_violation(round: u64, m: usize, h: usize, s: usize, n: u64) -> FedqError {
    FedqError::InvariantViolation {
        round,
        detail: format!("agent {m} visited (h={h}, s={s}) {n} times below the Case-1 switch point"),
    }
}

/// Hoeffding aggregation as a pure function of the pre-round state.
pub fn aggregate_hoeffding(
    server: &ServerState,
    reports: &[AgentRoundReport],
    rates: &RateParams,
) -> Result<ServerState> {
    if server.variant != Variant::Hoeffding {
        return Err(FedqError::InvalidParameter("server is not running the Hoeffding variant".into()));
    }
    let mut next = server.clone();
    next.apply_hoeffding(reports, rates)?;
    Ok(next)
}

/// Bernstein aggregation as a pure function of the pre-round state.
pub fn aggregate_bernstein(
    server: &ServerState,
    reports: &[AgentRoundReport],
    params: &BernsteinParams,
) -> Result<ServerState> {
    if server.variant != Variant::Bernstein {
        return Err(FedqError::InvalidParameter("server is not running the Bernstein variant".into()));
    }
    let mut next = server.clone();
    next.apply_bernstein(reports, params)?;
    Ok(next)
}

/// What one agent sends at the end of a round, indexed by `(h, s)` at the
/// broadcast action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentRoundReport {
    /// `n_h^{m,k}`
    pub visits: Vec<u64>,
    /// `v_{h+1}^{m,k}`: un-normalized sums of `V_{h+1}^k` at next states.
    pub value_sums: Vec<f64>,
    /// Observed rewards (0 where unvisited).
    pub rewards: Vec<f64>,
    /// `μ_h^{m,k}`, Bernstein only (0 where unvisited).
    pub second_moment_means: Option<Vec<f64>>,
    pub episodes_run: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TranscriptStep {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    /// `None` after the final step.
    pub next_state: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub agent: usize,
    /// One-based episode index within the round.
    pub episode: u64,
    pub steps: Vec<TranscriptStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortSignal {
    pub agent: usize,
    pub step: usize,
    pub state: usize,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTranscript {
    pub round: u64,
    /// Empty unless trajectories were requested.
    pub episodes: Vec<EpisodeRecord>,
    pub episodes_run: u64,
    /// Lowest-index agent that triggered in the final wave, with its first
    /// triggering triple.
    pub abort: AbortSignal,
    pub scalars: RoundScalars,
}

/// Writes transcripts as `k m j h s a r s'` lines (`-` for no next state).
pub fn write_transcript<W: Write>(out: &mut W, transcripts: &[RoundTranscript]) -> Result<()> {
    writeln!(out, "# k m j h s a r s_next")?;
    for t in transcripts {
        for e in &t.episodes {
            for (h, st) in e.steps.iter().enumerate() {
                let next = st.next_state.map_or_else(|| "-".to_string(), |s| s.to_string());
                writeln!(
                    out,
                    "{} {} {} {} {} {} {} {}",
                    t.round, e.agent, e.episode, h, st.state, st.action, st.reward, next
                )?;
            }
        }
    }
    Ok(())
}

/// One agent's random stream, derived from the master seed by stream index.
#[derive(Debug, Clone)]
pub struct AgentStream {
    rng: ChaCha8Rng,
}

impl AgentStream {
    pub fn new(seed: u64, agent: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(agent as u64 + 1);
        AgentStream { rng }
    }

    pub fn for_agents(seed: u64, num_agents: usize) -> Vec<Self> {
        (0..num_agents).map(|m| AgentStream::new(seed, m)).collect()
    }
}

/// One synchronized wave: each agent's initial state and the flat
/// `(h, s, a)` indices it visited, agent-major.
#[derive(Debug)]
pub struct Wave<'a> {
    pub initial_states: &'a [usize],
    pub steps: &'a [usize],
}

struct AgentLocal {
    visits: Vec<u64>,
    value_sums: Vec<f64>,
    square_sums: Vec<f64>,
    rewards: Vec<f64>,
}

/// Runs one round of lockstep exploration with the server's broadcast state.
pub fn run_round(
    server: &ServerState,
    mdp: &TabularMdp,
    sampler: &TransitionSampler,
    agents: &mut [AgentStream],
    record: bool,
    on_wave: &mut dyn FnMut(&Wave<'_>),
) -> (RoundTranscript, Vec<AgentRoundReport>) {
    let (s_n, h_n) = (server.num_states, server.horizon);
    let hs_n = h_n * s_n;
    let m_n = agents.len();
    let thresholds = server.trigger_thresholds();
    let mut locals: Vec<AgentLocal> = (0..m_n)
        .map(|_| AgentLocal {
            visits: vec![0; hs_n],
            value_sums: vec![0.0; hs_n],
            square_sums: vec![0.0; hs_n],
            rewards: vec![0.0; hs_n],
        })
        .collect();
    let mut episodes = Vec::new();
    let mut initial_states = vec![0usize; m_n];
    let mut wave_steps = Vec::with_capacity(m_n * h_n);
    let mut episodes_run = 0u64;
    let abort = loop {
        episodes_run += 1;
        wave_steps.clear();
        let mut abort: Option<AbortSignal> = None;
        for (m, (stream, local)) in agents.iter_mut().zip(locals.iter_mut()).enumerate() {
            let rng = &mut stream.rng;
            let mut s = sampler.initial_state(rng);
            initial_states[m] = s;
            let mut trace = record.then(|| Vec::with_capacity(h_n));
            for h in 0..h_n {
                let a = server.policy.action(h, s);
                let idx = mdp.sa_index(h, s, a);
                let hs = h * s_n + s;
                let reward = mdp.reward(h, s, a);
                let next = (h + 1 < h_n).then(|| sampler.next_state(rng, idx));
                let value = next.map_or(0.0, |s2| server.v_est[(h + 1) * s_n + s2]);
                local.visits[hs] += 1;
                local.value_sums[hs] += value;
                local.square_sums[hs] += value * value;
                local.rewards[hs] = reward;
                if abort.is_none() && local.visits[hs] >= thresholds[hs] {
                    abort = Some(AbortSignal {
                        agent: m,
                        step: h,
                        state: s,
                        action: a,
                    });
                }
                wave_steps.push(idx);
                if let Some(tr) = trace.as_mut() {
                    tr.push(TranscriptStep {
                        state: s,
                        action: a,
                        reward,
                        next_state: next,
                    });
                }
                if let Some(s2) = next {
                    s = s2;
                }
            }
            if let Some(steps) = trace {
                episodes.push(EpisodeRecord {
                    agent: m,
                    episode: episodes_run,
                    steps,
                });
            }
        }
        on_wave(&Wave {
            initial_states: &initial_states,
            steps: &wave_steps,
        });
        if let Some(a) = abort {
            break a;
        }
    };
    let bernstein = server.variant == Variant::Bernstein;
    let reports = locals
        .into_iter()
        .map(|l| {
            let second = bernstein.then(|| {
                l.square_sums
                    .iter()
                    .zip(&l.visits)
                    .map(|(sq, n)| if *n == 0 { 0.0 } else { sq / *n as f64 })
                    .collect()
            });
            AgentRoundReport {
                visits: l.visits,
                value_sums: l.value_sums,
                rewards: l.rewards,
                second_moment_means: second,
                episodes_run,
            }
        })
        .collect();
    let transcript = RoundTranscript {
        round: server.round,
        episodes,
        episodes_run,
        abort,
        scalars: count_round_scalars(m_n, h_n, s_n, server.variant),
    };
    (transcript, reports)
}

/// Hook into every completed round of [`run_fedq_observed`].
pub trait RoundObserver {
    /// Whether full trajectories should be recorded in transcripts.
    fn wants_trajectories(&self) -> bool {
        false
    }

    fn on_round(
        &mut self,
        before: &ServerState,
        transcript: &RoundTranscript,
        reports: &[AgentRoundReport],
        after: &ServerState,
    );
}

/// Collects every round for offline replay.
#[derive(Debug, Default)]
pub struct TranscriptRecorder {
    pub rounds: Vec<(ServerState, RoundTranscript)>,
}

impl RoundObserver for TranscriptRecorder {
    fn wants_trajectories(&self) -> bool {
        true
    }

    fn on_round(&mut self, before: &ServerState, transcript: &RoundTranscript, _: &[AgentRoundReport], _: &ServerState) {
        self.rounds.push((before.clone(), transcript.clone()));
    }
}

#[derive(Debug, Clone)]
pub struct FedqRun {
    pub metrics: RunMetrics,
    pub server: ServerState,
}

pub fn run_fedq(mdp: &TabularMdp, config: &FedqConfig) -> Result<FedqRun> {
    run_fedq_inner(mdp, config, None)
}

pub fn run_fedq_observed(
    mdp: &TabularMdp,
    config: &FedqConfig,
    observer: &mut dyn RoundObserver,
) -> Result<FedqRun> {
    run_fedq_inner(mdp, config, Some(observer))
}

fn violation(round: u64, detail: String) -> FedqError {
    FedqError::InvariantViolation { round, detail }
}

fn run_fedq_inner(
    mdp: &TabularMdp,
    config: &FedqConfig,
    mut observer: Option<&mut dyn RoundObserver>,
) -> Result<FedqRun> {
    let (s_n, a_n, h_n) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let m_n = config.num_agents;
    if m_n == 0 {
        return Err(FedqError::config("agents", "must be at least 1"));
    }
    if config.target_steps < h_n as u64 {
        return Err(FedqError::config("target_steps", "must be at least the horizon"));
    }
    config.bonus.rates(h_n).validate()?;
    if config.variant == Variant::Bernstein {
        config.bonus.bernstein(mdp, m_n).validate()?;
    }

    let t0 = config.target_steps;
    let hf = h_n as f64;
    let t1 = (1.0 + 1.0 / (hf * (hf + 1.0))) * t0 as f64 + (m_n * h_n * s_n * a_n) as f64;
    let q_cap = 2.0
        * hf
        * (1.0 + config.bonus.bonus_scale.max(config.bonus.bernstein_scale) * (hf.powi(3) * config.bonus.log_factor).sqrt());
    let record = observer.as_ref().is_some_and(|o| o.wants_trajectories());

    let oracle = RegretOracle::new(mdp);
    let sampler = TransitionSampler::new(mdp);
    let mut agents = AgentStream::for_agents(config.seed, m_n);
    let mut rec = MetricsRecorder::new(m_n, mdp.num_triples(), config.checkpoints.clone());
    let per_round = count_round_scalars(m_n, h_n, s_n, config.variant);
    let mut server = ServerState::new(mdp, m_n, config.variant);
    let mut prev_policy: Option<DeterministicPolicy> = None;

    while server.total_visits() < t0 {
        let k = server.round;
        // Lemma B.1 (b) and (f), checked at the start of every round.
        for h in 0..h_n {
            let per_step: u64 = server.visit_total[h * s_n * a_n..(h + 1) * s_n * a_n].iter().sum();
            if per_step * h_n as u64 > t0 {
                return Err(violation(k, format!("step {h} has {per_step} visits, above T0/H")));
            }
        }
        if k as f64 > t1 / hf {
            return Err(violation(k, format!("round count exceeds T1/H = {}", t1 / hf)));
        }

        if let Some(prev) = &prev_policy {
            rec.metrics.switching_cost += switching_increment(prev, &server.policy);
        }
        rec.metrics.rounds = k;
        rec.metrics.comm_scalars += per_round.payload();
        rec.metrics.abort_scalars += per_round.abort;
        rec.record_optimism(&server.q_est, &oracle.q_star);

        let gaps = oracle.initial_gaps(mdp, &server.policy);
        let (transcript, reports) = {
            let rec = &mut rec;
            let oracle = &oracle;
            run_round(&server, mdp, &sampler, &mut agents, record, &mut |wave: &Wave<'_>| {
                let regret: f64 = wave.initial_states.iter().map(|s| gaps[*s]).sum();
                for &idx in wave.steps {
                    rec.record_step(idx, oracle.is_optimal(idx));
                }
                rec.finish_wave(regret, m_n as u64);
            })
        };

        check_round_reports(&server, mdp, &reports, &transcript)?;
        let before = observer.as_ref().map(|_| server.clone());
        prev_policy = Some(server.policy.clone());
        server.aggregate(&reports, &config.bonus, mdp)?;

        if let Some(bad) = server.v_est.iter().find(|v| !(0.0..=hf).contains(*v)) {
            return Err(violation(k, format!("value estimate {bad} outside [0, H]")));
        }
        if let Some(bad) = server.q_est.iter().find(|q| !(0.0..=q_cap).contains(*q)) {
            return Err(violation(k, format!("Q estimate {bad} outside [0, {q_cap}]")));
        }
        if let (Some(obs), Some(before)) = (observer.as_mut(), before.as_ref()) {
            obs.on_round(before, &transcript, &reports, &server);
        }
    }

    // Lemma B.1 (d)
    let bound_d = (1.0 + 1.0 / (hf * (hf + 1.0))) * t0 as f64 / hf + (m_n * s_n * a_n) as f64;
    for h in 0..h_n {
        let per_step: u64 = server.visit_total[h * s_n * a_n..(h + 1) * s_n * a_n].iter().sum();
        if per_step as f64 > bound_d {
            return Err(violation(
                server.round,
                format!("step {h} ended with {per_step} visits, above {bound_d}"),
            ));
        }
    }

    Ok(FedqRun {
        metrics: rec.finish(),
        server,
    })
}

/// Lemma B.1 (c), lockstep agreement, trigger presence and reward cross-check.
fn check_round_reports(
    server: &ServerState,
    mdp: &TabularMdp,
    reports: &[AgentRoundReport],
    transcript: &RoundTranscript,
) -> Result<()> {
    let k = server.round;
    let (s_n, h_n, m_n) = (server.num_states, server.horizon, server.num_agents);
    let i0 = server.case_switch();
    let thresholds = server.trigger_thresholds();
    let mut triggered = false;
    for (m, r) in reports.iter().enumerate() {
        if r.episodes_run != transcript.episodes_run {
            return Err(violation(k, format!("agent {m} ran {} episodes, expected {}", r.episodes_run, transcript.episodes_run)));
        }
        for hs in 0..h_n * s_n {
            let (h, s) = (hs / s_n, hs % s_n);
            let a = server.policy.action(h, s);
            let n_before = server.visit_total[server.sa(h, s, a)];
            let n = r.visits[hs];
            if n > thresholds[hs] {
                return Err(violation(k, format!("agent {m} visited (h={h}, s={s}) {n} times, cap {}", thresholds[hs])));
            }
            if n_before < i0 && n > 1 {
                return Err(violation(k, format!("agent {m} visited (h={h}, s={s}) {n} times below i0")));
            }
            if n == thresholds[hs] {
                triggered = true;
            }
            let v = r.value_sums[hs];
            if !(0.0..=(h_n as u64 * n) as f64).contains(&v) {
                return Err(violation(k, format!("agent {m} value sum {v} at (h={h}, s={s}) outside [0, H n]")));
            }
            if n > 0 && r.rewards[hs] != mdp.reward(h, s, a) {
                return Err(FedqError::InconsistentReports(format!(
                    "agent {m} reported reward {} at (h={h}, s={s}, a={a}), the MDP has {}",
                    r.rewards[hs],
                    mdp.reward(h, s, a)
                )));
            }
        }
    }
    for hs in 0..h_n * s_n {
        let (h, s) = (hs / s_n, hs % s_n);
        let n_before = server.visit_total[server.sa(h, s, server.policy.action(h, s))];
        let n_round: u64 = reports.iter().map(|r| r.visits[hs]).sum();
        let limit = if n_before < i0 {
            m_n as u64
        } else {
            n_before / (h_n * (h_n + 1)) as u64
        };
        if n_round > limit {
            return Err(violation(k, format!("(h={h}, s={s}) gained {n_round} visits in one round, limit {limit}")));
        }
    }
    if !triggered {
        return Err(violation(k, "round ended without any triple meeting its trigger threshold".into()));
    }
    Ok(())
}
