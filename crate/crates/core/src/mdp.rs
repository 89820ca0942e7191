//! Tabular episodic MDPs and exact dynamic-programming solvers.
//!
//! Steps are indexed `0..H` internally; step `h` here corresponds to step
//! `h + 1` in the usual one-based notation. All tables are flat row-major
//! vectors: `(h, s)` tables have `H * S` entries, `(h, s, a)` tables have
//! `H * S * A` entries and transition rows are stored as `(h, s, a, s')`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedqError, Result};

/// Actions whose gap is at most this value are treated as optimal.
pub const GAP_TOLERANCE: f64 = 1e-9;

/// States with stationary probability at or below this value are off-support.
pub const SUPPORT_TOLERANCE: f64 = 1e-12;

const SIMPLEX_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    reward: Vec<f64>,
    transition: Vec<f64>,
    initial_dist: Vec<f64>,
}

/// On-disk layout of an MDP. Doubles are written in shortest round-trip
/// form, so a save/load cycle is bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct MdpFile {
    format: String,
    states: usize,
    actions: usize,
    horizon: usize,
    /// `reward[h][s][a]`
    reward: Vec<Vec<Vec<f64>>>,
    /// `transition[h][s][a][s']`
    transition: Vec<Vec<Vec<Vec<f64>>>>,
    initial_dist: Vec<f64>,
}

const MDP_FORMAT: &str = "fedq-mdp/1";

impl From<TabularMdp> for MdpFile {
    fn from(m: TabularMdp) -> Self {
        let (s_n, a_n, h_n) = (m.num_states, m.num_actions, m.horizon);
        let reward = (0..h_n)
            .map(|h| {
                (0..s_n)
                    .map(|s| (0..a_n).map(|a| m.reward(h, s, a)).collect())
                    .collect()
            })
            .collect();
        let transition = (0..h_n)
            .map(|h| {
                (0..s_n)
                    .map(|s| (0..a_n).map(|a| m.transition_row(h, s, a).to_vec()).collect())
                    .collect()
            })
            .collect();
        MdpFile {
            format: MDP_FORMAT.to_string(),
            states: s_n,
            actions: a_n,
            horizon: h_n,
            reward,
            transition,
            initial_dist: m.initial_dist,
        }
    }
}

impl TryFrom<MdpFile> for TabularMdp {
    type Error = FedqError;

    fn try_from(f: MdpFile) -> Result<Self> {
        if f.format != MDP_FORMAT {
            return Err(FedqError::InvalidMdp(format!(
                "unknown format tag `{}` (expected `{MDP_FORMAT}`)",
                f.format
            )));
        }
        let shape_err = |what: &str| FedqError::InvalidMdp(format!("{what} has the wrong shape"));
        if f.reward.len() != f.horizon
            || f.reward
                .iter()
                .any(|row| row.len() != f.states || row.iter().any(|r| r.len() != f.actions))
        {
            return Err(shape_err("reward"));
        }
        if f.transition.len() != f.horizon
            || f.transition.iter().any(|row| {
                row.len() != f.states
                    || row
                        .iter()
                        .any(|r| r.len() != f.actions || r.iter().any(|p| p.len() != f.states))
            })
        {
            return Err(shape_err("transition"));
        }
        let reward = f.reward.into_iter().flatten().flatten().collect();
        let transition = f.transition.into_iter().flatten().flatten().flatten().collect();
        TabularMdp::new(f.states, f.actions, f.horizon, reward, transition, f.initial_dist)
    }
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(FedqError::InvalidMdp(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(FedqError::InvalidMdp(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

impl TabularMdp {
    /// Builds an MDP from flat row-major tables, validating every invariant.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        reward: Vec<f64>,
        transition: Vec<f64>,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(FedqError::InvalidMdp(
                "states, actions and horizon must all be positive".into(),
            ));
        }
        let n_sa = horizon * num_states * num_actions;
        if reward.len() != n_sa {
            return Err(FedqError::InvalidMdp(format!(
                "reward table has {} entries, expected {n_sa}",
                reward.len()
            )));
        }
        if transition.len() != n_sa * num_states {
            return Err(FedqError::InvalidMdp(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                n_sa * num_states
            )));
        }
        if initial_dist.len() != num_states {
            return Err(FedqError::InvalidMdp("initial distribution has the wrong length".into()));
        }
        if let Some(r) = reward.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(FedqError::InvalidMdp(format!("reward {r} is outside [0, 1]")));
        }
        for (i, row) in transition.chunks(num_states).enumerate() {
            check_simplex(row, &format!("transition row {i}"))?;
        }
        check_simplex(&initial_dist, "initial distribution")?;
        Ok(TabularMdp {
            num_states,
            num_actions,
            horizon,
            reward,
            transition,
            initial_dist,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    #[inline]
    pub fn sa_index(&self, h: usize, s: usize, a: usize) -> usize {
        (h * self.num_states + s) * self.num_actions + a
    }

    #[inline]
    pub fn s_index(&self, h: usize, s: usize) -> usize {
        h * self.num_states + s
    }

    /// Number of `(h, s, a)` triples.
    pub fn num_triples(&self) -> usize {
        self.horizon * self.num_states * self.num_actions
    }

    #[inline]
    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.reward[self.sa_index(h, s, a)]
    }

    #[inline]
    pub fn transition_row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let start = self.sa_index(h, s, a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Random instance: i.i.d. uniform rewards, uniform-simplex transition
    /// rows and a uniform initial distribution. A pure function of its inputs.
    pub fn generate_random(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(FedqError::InvalidParameter(
                "states, actions and horizon must all be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_sa = horizon * num_states * num_actions;
        let reward: Vec<f64> = (0..n_sa).map(|_| rng.gen::<f64>()).collect();
        let mut transition = Vec::with_capacity(n_sa * num_states);
        for _ in 0..n_sa {
            transition.extend(sample_uniform_simplex(&mut rng, num_states));
        }
        let initial_dist = vec![1.0 / num_states as f64; num_states];
        TabularMdp::new(num_states, num_actions, horizon, reward, transition, initial_dist)
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

    /// `Q*` and `V*` by backward induction. Never fails; gap analysis lives
    /// in [`solve_optimal`].
    pub fn optimal_values(&self) -> OptimalValues {
        let (s_n, a_n, h_n) = (self.num_states, self.num_actions, self.horizon);
        let mut q = vec![0.0; self.num_triples()];
        let mut v = vec![0.0; h_n * s_n];
        let mut next = vec![0.0; s_n];
        for h in (0..h_n).rev() {
            for s in 0..s_n {
                let mut best = f64::NEG_INFINITY;
                for a in 0..a_n {
                    let ev: f64 = dot(self.transition_row(h, s, a), &next);
                    let qv = self.reward(h, s, a) + ev;
                    q[self.sa_index(h, s, a)] = qv;
                    best = best.max(qv);
                }
                v[self.s_index(h, s)] = best;
            }
            next.copy_from_slice(&v[h * s_n..(h + 1) * s_n]);
        }
        OptimalValues { q_star: q, v_star: v }
    }
}

#[inline]
fn dot(p: &[f64], v: &[f64]) -> f64 {
    p.iter().zip(v).map(|(p, v)| p * v).sum()
}

/// Symmetric Dirichlet(1) draw through normalized exponentials.
fn sample_uniform_simplex<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    if dim == 1 {
        return vec![1.0];
    }
    let mut e: Vec<f64> = (0..dim)
        .map(|_| -(1.0 - rng.gen::<f64>()).ln())
        .collect();
    let total: f64 = e.iter().sum();
    e.iter_mut().for_each(|x| *x /= total);
    e
}

/// Random instance; free-function form of [`TabularMdp::generate_random`].
pub fn generate_random_mdp(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    seed: u64,
) -> Result<TabularMdp> {
    TabularMdp::generate_random(num_states, num_actions, horizon, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    num_states: usize,
    horizon: usize,
    actions: Vec<usize>,
}

impl DeterministicPolicy {
    pub fn new(num_states: usize, horizon: usize, actions: Vec<usize>) -> Result<Self> {
        if actions.len() != num_states * horizon {
            return Err(FedqError::InvalidParameter(format!(
                "policy has {} entries, expected {}",
                actions.len(),
                num_states * horizon
            )));
        }
        Ok(DeterministicPolicy {
            num_states,
            horizon,
            actions,
        })
    }

    /// Policy that picks `action` everywhere.
    pub fn constant(num_states: usize, horizon: usize, action: usize) -> Self {
        DeterministicPolicy {
            num_states,
            horizon,
            actions: vec![action; num_states * horizon],
        }
    }

    /// Greedy policy of a `(h, s, a)` table, lowest index on ties.
    pub fn greedy(q: &[f64], num_states: usize, num_actions: usize, horizon: usize) -> Self {
        let actions = q
            .chunks(num_actions)
            .take(num_states * horizon)
            .map(argmax_lowest)
            .collect();
        DeterministicPolicy {
            num_states,
            horizon,
            actions,
        }
    }

    #[inline]
    pub fn action(&self, h: usize, s: usize) -> usize {
        self.actions[h * self.num_states + s]
    }

    pub fn set_action(&mut self, h: usize, s: usize, a: usize) {
        self.actions[h * self.num_states + s] = a;
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn check_against(&self, mdp: &TabularMdp) -> Result<()> {
        if self.num_states != mdp.num_states || self.horizon != mdp.horizon {
            return Err(FedqError::InvalidParameter(
                "policy dimensions do not match the MDP".into(),
            ));
        }
        if let Some(a) = self.actions.iter().find(|a| **a >= mdp.num_actions) {
            return Err(FedqError::InvalidParameter(format!("policy action {a} out of range")));
        }
        Ok(())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalValues {
    /// `Q*_h(s, a)`, indexed like [`TabularMdp::sa_index`].
    pub q_star: Vec<f64>,
    /// `V*_h(s)`, indexed like [`TabularMdp::s_index`].
    pub v_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSolution {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub v_star: Vec<f64>,
    pub q_star: Vec<f64>,
    pub gap: Vec<f64>,
    pub min_gap: f64,
    /// Optimal action sets per `(h, s)`, ascending.
    pub optimal_actions: Vec<Vec<usize>>,
    /// Stationary visiting probabilities under the canonical optimal policy.
    pub visit_prob_star: Vec<f64>,
    pub c_st: f64,
    pub is_gmdp: bool,
}

impl MdpSolution {
    pub fn v_star(&self, h: usize, s: usize) -> f64 {
        self.v_star[h * self.num_states + s]
    }

    pub fn q_star(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q_star[(h * self.num_states + s) * self.num_actions + a]
    }

    pub fn gap(&self, h: usize, s: usize, a: usize) -> f64 {
        self.gap[(h * self.num_states + s) * self.num_actions + a]
    }

    pub fn is_optimal(&self, h: usize, s: usize, a: usize) -> bool {
        self.gap(h, s, a) <= GAP_TOLERANCE
    }

    pub fn visit_prob(&self, h: usize, s: usize) -> f64 {
        self.visit_prob_star[h * self.num_states + s]
    }

    /// Lowest-index optimal action at every `(h, s)`.
    pub fn canonical_policy(&self) -> DeterministicPolicy {
        DeterministicPolicy {
            num_states: self.num_states,
            horizon: self.horizon,
            actions: self.optimal_actions.iter().map(|set| set[0]).collect(),
        }
    }
}

/// Gaps below [`GAP_TOLERANCE`] are snapped to exactly zero.
fn gap_table(mdp: &TabularMdp, values: &OptimalValues) -> Vec<f64> {
    let a_n = mdp.num_actions;
    values
        .q_star
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let g = values.v_star[i / a_n] - q;
            if g <= GAP_TOLERANCE {
                0.0
            } else {
                g
            }
        })
        .collect()
}

/// Full solution: values, gaps, optimal action sets and G-MDP analysis.
pub fn solve_optimal(mdp: &TabularMdp) -> Result<MdpSolution> {
    let values = mdp.optimal_values();
    let gap = gap_table(mdp, &values);
    let min_gap = gap
        .iter()
        .copied()
        .filter(|g| *g > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !min_gap.is_finite() {
        return Err(FedqError::DegenerateMdp);
    }
    let optimal_actions = gap
        .chunks(mdp.num_actions)
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, g)| **g == 0.0)
                .map(|(a, _)| a)
                .collect()
        })
        .collect();
    let mut sol = MdpSolution {
        num_states: mdp.num_states,
        num_actions: mdp.num_actions,
        horizon: mdp.horizon,
        v_star: values.v_star,
        q_star: values.q_star,
        gap,
        min_gap,
        optimal_actions,
        visit_prob_star: Vec::new(),
        c_st: 0.0,
        is_gmdp: false,
    };
    let g = classify_gmdp(mdp, &sol);
    sol.visit_prob_star = g.visit_prob_star;
    sol.c_st = g.c_st;
    sol.is_gmdp = g.is_gmdp;
    Ok(sol)
}

/// `V^π` by backward induction with `V_{H+1} = 0`.
pub fn evaluate_policy(mdp: &TabularMdp, policy: &DeterministicPolicy) -> Result<Vec<f64>> {
    policy.check_against(mdp)?;
    Ok(evaluate_policy_unchecked(mdp, policy))
}

pub(crate) fn evaluate_policy_unchecked(mdp: &TabularMdp, policy: &DeterministicPolicy) -> Vec<f64> {
    let s_n = mdp.num_states;
    let mut v = vec![0.0; mdp.horizon * s_n];
    let mut next = vec![0.0; s_n];
    for h in (0..mdp.horizon).rev() {
        for s in 0..s_n {
            let a = policy.action(h, s);
            v[h * s_n + s] = mdp.reward(h, s, a) + dot(mdp.transition_row(h, s, a), &next);
        }
        next.copy_from_slice(&v[h * s_n..(h + 1) * s_n]);
    }
    v
}

/// `P(s_h = s | π)` by forward recursion from the initial distribution.
pub fn stationary_visit_probs(mdp: &TabularMdp, policy: &DeterministicPolicy) -> Result<Vec<f64>> {
    policy.check_against(mdp)?;
    let s_n = mdp.num_states;
    let mut p = vec![0.0; mdp.horizon * s_n];
    p[..s_n].copy_from_slice(&mdp.initial_dist);
    for h in 0..mdp.horizon - 1 {
        let (cur, rest) = p.split_at_mut((h + 1) * s_n);
        let cur = &cur[h * s_n..];
        let nxt = &mut rest[..s_n];
        for s in 0..s_n {
            if cur[s] == 0.0 {
                continue;
            }
            let row = mdp.transition_row(h, s, policy.action(h, s));
            for (n, pr) in nxt.iter_mut().zip(row) {
                *n += cur[s] * pr;
            }
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmdpClassification {
    pub is_gmdp: bool,
    pub visit_prob_star: Vec<f64>,
    pub c_st: f64,
}

/// G-MDP check on the support of the canonical optimal policy.
///
/// When every supported `(s, h)` has a unique optimal action, all optimal
/// policies agree on the support and so share one visit distribution.
pub fn classify_gmdp(mdp: &TabularMdp, solution: &MdpSolution) -> GmdpClassification {
    let policy = solution.canonical_policy();
    let visit = stationary_visit_probs(mdp, &policy).expect("canonical policy matches the MDP");
    let is_gmdp = visit
        .iter()
        .zip(&solution.optimal_actions)
        .all(|(p, set)| *p <= SUPPORT_TOLERANCE || set.len() == 1);
    let c_st = visit
        .iter()
        .copied()
        .filter(|p| *p > SUPPORT_TOLERANCE)
        .fold(f64::INFINITY, f64::min);
    GmdpClassification {
        is_gmdp,
        visit_prob_star: visit,
        c_st: if c_st.is_finite() { c_st } else { 0.0 },
    }
}

/// Inverse-CDF sampler over the MDP's transition rows and initial law.
#[derive(Debug, Clone)]
pub struct TransitionSampler {
    num_states: usize,
    cdf: Vec<f64>,
    initial_cdf: Vec<f64>,
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect()
}

#[inline]
fn draw<R: Rng>(rng: &mut R, cdf: &[f64]) -> usize {
    let u: f64 = rng.gen();
    // Rounding can leave the last cumulative value slightly below 1.
    cdf.iter().position(|c| u < *c).unwrap_or(cdf.len() - 1)
}

impl TransitionSampler {
    pub fn new(mdp: &TabularMdp) -> Self {
        let cdf = mdp
            .transition
            .chunks(mdp.num_states)
            .flat_map(cumulative)
            .collect();
        TransitionSampler {
            num_states: mdp.num_states,
            cdf,
            initial_cdf: cumulative(&mdp.initial_dist),
        }
    }

    #[inline]
    pub fn initial_state<R: Rng>(&self, rng: &mut R) -> usize {
        draw(rng, &self.initial_cdf)
    }

    /// Next state for the flat `(h, s, a)` index.
    #[inline]
    pub fn next_state<R: Rng>(&self, rng: &mut R, sa_index: usize) -> usize {
        let start = sa_index * self.num_states;
        draw(rng, &self.cdf[start..start + self.num_states])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
}

/// One episode of `policy`; returns the visited `(s_h, a_h)` pairs.
pub fn rollout<R: Rng>(
    mdp: &TabularMdp,
    sampler: &TransitionSampler,
    policy: &DeterministicPolicy,
    rng: &mut R,
) -> Vec<Step> {
    let mut s = sampler.initial_state(rng);
    let mut out = Vec::with_capacity(mdp.horizon);
    for h in 0..mdp.horizon {
        let a = policy.action(h, s);
        out.push(Step { state: s, action: a });
        if h + 1 < mdp.horizon {
            s = sampler.next_state(rng, mdp.sa_index(h, s, a));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bandit(rewards: &[f64]) -> TabularMdp {
        let a = rewards.len();
        TabularMdp::new(1, a, 1, rewards.to_vec(), vec![1.0; a], vec![1.0]).unwrap()
    }

    /// Deterministic S-state chain where every action moves `s -> next(s)`.
    fn chain(s_n: usize, a_n: usize, h_n: usize, next: impl Fn(usize) -> usize, r: f64) -> TabularMdp {
        let mut transition = Vec::new();
        for _h in 0..h_n {
            for s in 0..s_n {
                for _a in 0..a_n {
                    let mut row = vec![0.0; s_n];
                    row[next(s)] = 1.0;
                    transition.extend(row);
                }
            }
        }
        let mut init = vec![0.0; s_n];
        init[0] = 1.0;
        TabularMdp::new(s_n, a_n, h_n, vec![r; h_n * s_n * a_n], transition, init).unwrap()
    }

    #[test]
    fn one_point_simplex() {
        let m = generate_random_mdp(1, 1, 1, 0).unwrap();
        assert_eq!(m.transition_row(0, 0, 0), &[1.0]);
        assert_eq!(m.initial_dist(), &[1.0]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_random_mdp(2, 2, 2, 7).unwrap();
        let b = generate_random_mdp(2, 2, 2, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_random_mdp(2, 2, 2, 8).unwrap());
    }

    #[test]
    fn generated_rows_are_on_simplex() {
        let m = generate_random_mdp(3, 2, 5, 42).unwrap();
        let mut rows = 0;
        for h in 0..5 {
            for s in 0..3 {
                for a in 0..2 {
                    let sum: f64 = m.transition_row(h, s, a).iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-12);
                    rows += 1;
                }
            }
        }
        assert_eq!(rows, 30);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(TabularMdp::new(1, 1, 1, vec![1.5], vec![1.0], vec![1.0]).is_err());
        assert!(TabularMdp::new(2, 1, 1, vec![0.5; 2], vec![0.5, 0.6, 1.0, 0.0], vec![0.5, 0.5]).is_err());
        assert!(TabularMdp::new(1, 1, 1, vec![0.5], vec![1.0], vec![0.9]).is_err());
        assert!(TabularMdp::new(0, 1, 1, vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn single_step_bandit() {
        let sol = solve_optimal(&bandit(&[0.9, 0.2])).unwrap();
        assert_eq!(sol.q_star, vec![0.9, 0.2]);
        assert_eq!(sol.v_star, vec![0.9]);
        assert_eq!(sol.gap[0], 0.0);
        assert!((sol.gap[1] - 0.7).abs() < 1e-15);
        assert!((sol.min_gap - 0.7).abs() < 1e-15);
        assert_eq!(sol.optimal_actions, vec![vec![0]]);
    }

    #[test]
    fn single_action_is_degenerate() {
        let m = generate_random_mdp(3, 1, 3, 1).unwrap();
        assert!(matches!(solve_optimal(&m), Err(FedqError::DegenerateMdp)));
    }

    #[test]
    fn single_action_policy_value_equals_optimum() {
        let m = generate_random_mdp(3, 1, 4, 9).unwrap();
        let v = evaluate_policy(&m, &DeterministicPolicy::constant(3, 4, 0)).unwrap();
        assert_eq!(v, m.optimal_values().v_star);
    }

    #[test]
    fn reward_sum_on_deterministic_chain() {
        let m = chain(2, 2, 3, |s| 1 - s, 0.5);
        let v = evaluate_policy(&m, &DeterministicPolicy::constant(2, 3, 1)).unwrap();
        assert_eq!(v[m.s_index(0, 0)], 1.5);
    }

    #[test]
    fn identity_dynamics_keep_uniform_visits() {
        let mut m = chain(2, 1, 4, |s| s, 0.1);
        m.initial_dist = vec![0.5, 0.5];
        let p = stationary_visit_probs(&m, &DeterministicPolicy::constant(2, 4, 0)).unwrap();
        assert!(p.iter().all(|x| *x == 0.5));
    }

    #[test]
    fn deterministic_cycle_visits() {
        let m = chain(2, 1, 3, |s| 1 - s, 0.1);
        let p = stationary_visit_probs(&m, &DeterministicPolicy::constant(2, 3, 0)).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn strict_argmax_is_gmdp() {
        let sol = solve_optimal(&bandit(&[0.3, 0.8, 0.1])).unwrap();
        assert!(sol.is_gmdp);
        assert_eq!(sol.c_st, 1.0);
    }

    #[test]
    fn tied_optimum_on_support_is_not_gmdp() {
        let sol = solve_optimal(&bandit(&[0.5, 0.5, 0.1])).unwrap();
        assert!(!sol.is_gmdp);
        assert_eq!(sol.optimal_actions[0], vec![0, 1]);
    }

    #[test]
    fn ties_off_support_are_allowed() {
        // Two states, deterministic cycle from state 0; at h=0 state 1 is
        // never visited and both of its actions tie.
        let s_n = 2;
        let a_n = 2;
        let h_n = 2;
        let mut reward = vec![0.0; h_n * s_n * a_n];
        let mut transition = Vec::new();
        for h in 0..h_n {
            for s in 0..s_n {
                for a in 0..a_n {
                    let mut row = vec![0.0; s_n];
                    row[1 - s] = 1.0;
                    transition.extend(row);
                    reward[(h * s_n + s) * a_n + a] = match (h, s, a) {
                        (0, 0, 0) => 0.9,
                        (0, 0, 1) => 0.1,
                        (0, 1, _) => 0.4,
                        (1, 1, 0) => 0.2,
                        (1, 1, 1) => 0.7,
                        (1, 0, _) => 0.3,
                        _ => unreachable!(),
                    };
                }
            }
        }
        let m = TabularMdp::new(s_n, a_n, h_n, reward, transition, vec![1.0, 0.0]).unwrap();
        let sol = solve_optimal(&m).unwrap();
        assert_eq!(sol.optimal_actions[m.s_index(0, 1)], vec![0, 1]);
        assert_eq!(sol.optimal_actions[m.s_index(1, 0)], vec![0, 1]);
        assert!(sol.is_gmdp);
        assert_eq!(sol.c_st, 1.0);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = generate_random_mdp(3, 2, 4, 123).unwrap();
        let back = TabularMdp::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        for (x, y) in m.transition.iter().zip(&back.transition) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn json_rejects_wrong_format_tag() {
        let text = generate_random_mdp(1, 2, 1, 0)
            .unwrap()
            .to_json()
            .unwrap()
            .replace("fedq-mdp/1", "other");
        assert!(TabularMdp::from_json(&text).is_err());
    }

    #[test]
    fn greedy_breaks_ties_low() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_lowest(&[2.0, 2.0]), 0);
    }
}
