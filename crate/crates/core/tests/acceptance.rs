//! Acceptance criteria A1-A10. Each test prints one `A<n> PASS|FAIL` line.
//!
//! Run with `cargo test -p fedq --test acceptance -- --nocapture --test-threads=1`
//! to see the lines in order.

use std::collections::HashMap;
use std::sync::OnceLock;
use std::time::Instant;

use fedq::baseline::run_ucb_hoeffding_with;
use fedq::experiment::{
    band_curve, derive_seed, fit_comm_slope, quantile, regret_log_plateau, run_experiment, run_groups,
    ExperimentConfig, ExperimentKind, MdpSpec,
};
use fedq::mdp::{generate_random_mdp, solve_optimal, DeterministicPolicy, MdpSolution, TabularMdp};
use fedq::metrics::{geometric_checkpoints, RunMetrics};
use fedq::rates::{
    bernstein_beta, bernstein_per_visit_bonus, eta, eta_weight, BernsteinParams, RateParams,
};
use fedq::runtime::{
    run_fedq, run_fedq_observed, AgentRoundReport, BonusConfig, FedqConfig, RoundObserver, RoundTranscript,
    ServerState, Variant,
};

fn report(id: &str, pass: bool, detail: String) {
    println!("{id} {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

// ---------------------------------------------------------------- A1

fn enumerate_policies(s_n: usize, a_n: usize, h_n: usize) -> Vec<Vec<usize>> {
    let len = s_n * h_n;
    let total = a_n.pow(len as u32);
    (0..total)
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let a = code % a_n;
                    code /= a_n;
                    a
                })
                .collect()
        })
        .collect()
}

/// Expected return from `s` at step `h` by summing over every trajectory.
fn trajectory_value(mdp: &TabularMdp, actions: &[usize], h: usize, s: usize) -> f64 {
    let s_n = mdp.num_states();
    let a = actions[h * s_n + s];
    let r = mdp.reward(h, s, a);
    if h + 1 == mdp.horizon() {
        return r;
    }
    let row = mdp.transition_row(h, s, a);
    r + (0..s_n)
        .filter(|s2| row[*s2] > 0.0)
        .map(|s2| row[s2] * trajectory_value(mdp, actions, h + 1, s2))
        .sum::<f64>()
}

#[test]
fn a1_solver_matches_brute_force() {
    let start = Instant::now();
    let mut worst_opt: f64 = 0.0;
    let mut worst_eval: f64 = 0.0;
    for i in 0..50u64 {
        let s_n = 1 + (i % 3) as usize;
        let a_n = 2 + (i / 3 % 2) as usize;
        let h_n = 1 + (i / 6 % 3) as usize;
        let mdp = generate_random_mdp(s_n, a_n, h_n, 1000 + i).unwrap();
        let sol = solve_optimal(&mdp).unwrap();
        let policies = enumerate_policies(s_n, a_n, h_n);
        for s in 0..s_n {
            let best = policies
                .iter()
                .map(|p| trajectory_value(&mdp, p, 0, s))
                .fold(f64::NEG_INFINITY, f64::max);
            worst_opt = worst_opt.max((sol.v_star(0, s) - best).abs());
        }
        for p in policies.iter().step_by(1 + policies.len() / 20) {
            let policy = DeterministicPolicy::new(s_n, h_n, p.clone()).unwrap();
            let v = fedq::evaluate_policy(&mdp, &policy).unwrap();
            for s in 0..s_n {
                worst_eval = worst_eval.max((v[s] - trajectory_value(&mdp, p, 0, s)).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_opt <= 1e-12 && worst_eval <= 1e-12 && secs < 10.0;
    report(
        "A1",
        pass,
        format!("max |V* - brute force| = {worst_opt:.2e}, max |V^pi - enumeration| = {worst_eval:.2e}, {secs:.2}s"),
    );
    assert!(pass);
}

// ------------------------------------------------------- shared A2 config

const A2_AGENTS: usize = 10;
const A2_EPISODES: u64 = 100_000;
const A2_REPS: u64 = 10;
const A2_MASTER: u64 = 2024;

struct A2Data {
    seed: u64,
    solution: MdpSolution,
    schedule: Vec<u64>,
    fedq: Vec<RunMetrics>,
    ucb: Vec<RunMetrics>,
    secs: f64,
}

/// First generator seed whose (H=2, S=2, A=2) MDP has Δ_min ≥ 0.05 and is a G-MDP.
fn a2_mdp() -> (u64, TabularMdp, MdpSolution) {
    (0u64..)
        .find_map(|seed| {
            let mdp = generate_random_mdp(2, 2, 2, seed).ok()?;
            let sol = solve_optimal(&mdp).ok()?;
            (sol.min_gap >= 0.05 && sol.is_gmdp).then_some((seed, mdp, sol))
        })
        .expect("some seed qualifies")
}

fn a2_data() -> &'static A2Data {
    static DATA: OnceLock<A2Data> = OnceLock::new();
    DATA.get_or_init(|| {
        use rayon::prelude::*;
        let start = Instant::now();
        let (seed, mdp, solution) = a2_mdp();
        let mut schedule = geometric_checkpoints(A2_EPISODES, 1.25);
        schedule.push(10_000);
        schedule.sort_unstable();
        schedule.dedup();
        let rates = RateParams::experiment_defaults(2);
        let fedq: Vec<RunMetrics> = (0..A2_REPS)
            .into_par_iter()
            .map(|r| {
                let mut cfg = FedqConfig::for_episodes(A2_AGENTS, A2_EPISODES, 2, Variant::Hoeffding, 0);
                cfg.seed = derive_seed(A2_MASTER, A2_AGENTS as u64, r);
                cfg.checkpoints = schedule.clone();
                run_fedq(&mdp, &cfg).unwrap().metrics
            })
            .collect();
        let ucb: Vec<RunMetrics> = (0..A2_REPS)
            .into_par_iter()
            .map(|r| {
                run_ucb_hoeffding_with(&mdp, A2_EPISODES, &rates, derive_seed(A2_MASTER, 1, r), schedule.clone())
                    .unwrap()
                    .0
            })
            .collect();
        A2Data {
            seed,
            solution,
            schedule,
            fedq,
            ucb,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn at(m: &RunMetrics, episodes: u64) -> &fedq::metrics::Checkpoint {
    m.checkpoint_at(episodes).expect("checkpoint scheduled")
}

#[test]
fn a2_log_regret_plateau() {
    let d = a2_data();
    let geometric = geometric_checkpoints(A2_EPISODES, 1.25);
    let curve: Vec<(u64, f64)> = band_curve(&d.fedq, |c| c.regret)
        .into_iter()
        .filter(|(e, _)| geometric.contains(e))
        .map(|(e, b)| (e, b.median))
        .collect();
    let drift = regret_log_plateau(&curve, 0.5).unwrap();
    let pass = drift < 0.2 && d.secs < 300.0;
    report(
        "A2",
        pass,
        format!(
            "mdp seed {} (min gap {:.4}), median drift over final half = {drift:.4} (limit 0.2), {:.1}s",
            d.seed, d.solution.min_gap, d.secs
        ),
    );
    assert!(pass);
}

#[test]
fn a3_speedup_pattern() {
    let d = a2_data();
    let fed = median(&d.fedq.iter().map(|m| at(m, A2_EPISODES).regret).collect::<Vec<_>>());
    let ucb = median(&d.ucb.iter().map(|m| at(m, A2_EPISODES).regret).collect::<Vec<_>>());
    let ratio = fed / ucb;
    let scaled = fed / (A2_AGENTS as f64).sqrt();
    let pass = (0.5..=2.0).contains(&ratio) && scaled < ucb;
    report(
        "A3",
        pass,
        format!("median regret FedQ {fed:.2}, UCB {ucb:.2}, ratio {ratio:.3}, FedQ/sqrt(M) {scaled:.2}"),
    );
    assert!(pass);
}

#[test]
fn a6_suboptimal_visits_sublinear() {
    let d = a2_data();
    let late = median(&d.fedq.iter().map(|m| at(m, A2_EPISODES).subopt_visits as f64).collect::<Vec<_>>());
    let early = median(&d.fedq.iter().map(|m| at(m, 10_000).subopt_visits as f64).collect::<Vec<_>>());
    let ratio = late / early;
    let pass = ratio < 5.0;
    report(
        "A6",
        pass,
        format!("median suboptimal visits {early} at 1e4, {late} at 1e5, ratio {ratio:.3} (limit 5)"),
    );
    assert!(pass);
}

#[test]
fn a10_switching_cost() {
    let d = a2_data();
    let bounded = d.fedq.iter().all(|m| {
        m.switching_cost < m.rounds
            && m.checkpoints.iter().all(|c| c.switching + 1 <= c.rounds.max(1))
    });
    let late = median(&d.fedq.iter().map(|m| at(m, A2_EPISODES).switching as f64).collect::<Vec<_>>());
    let early = median(&d.fedq.iter().map(|m| at(m, 10_000).switching as f64).collect::<Vec<_>>());
    let ratio = late / early;
    let pass = d.solution.is_gmdp && bounded && ratio < 5.0;
    report(
        "A10",
        pass,
        format!(
            "G-MDP {}, switching <= K-1 in every run {bounded}, median switching {early} at 1e4, {late} at 1e5, ratio {ratio:.3}",
            d.solution.is_gmdp
        ),
    );
    assert!(pass);
    assert!(d.schedule.contains(&10_000));
}

// ---------------------------------------------------------------- A4

fn comm_slopes(kind: ExperimentKind) -> (Vec<(usize, f64)>, f64) {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        kind,
        mdp: Some(MdpSpec {
            states: 2,
            actions: 2,
            horizon: 2,
            seed: 0,
        }),
        mdp_file: None,
        variant: Variant::Hoeffding,
        agents: 2,
        sweep: vec![2, 4, 8],
        episodes_per_agent: 1_000_000,
        replications: 10,
        master_seed: 7,
        bonus: BonusConfig::default(),
        burn_in: 50_000,
        output_dir: "unused".into(),
    };
    let groups = run_groups(&cfg).unwrap();
    let slopes = groups
        .iter()
        .map(|g| {
            let curve: Vec<(u64, f64)> = band_curve(&g.runs, |c| c.rounds as f64)
                .into_iter()
                .map(|(e, b)| (e, b.median))
                .collect();
            (g.value, fit_comm_slope(&curve, cfg.burn_in).unwrap().slope)
        })
        .collect();
    (slopes, start.elapsed().as_secs_f64())
}

#[test]
fn a4_comm_slope_invariance() {
    let mut all_pass = true;
    let mut lines = Vec::new();
    for (label, kind) in [
        ("M", ExperimentKind::CommVsM),
        ("S", ExperimentKind::CommVsS),
        ("A", ExperimentKind::CommVsA),
    ] {
        let (slopes, secs) = comm_slopes(kind);
        let vals: Vec<f64> = slopes.iter().map(|p| p.1).collect();
        let ratio = vals.iter().cloned().fold(f64::MIN, f64::max) / vals.iter().cloned().fold(f64::MAX, f64::min);
        let ok = ratio <= 2.0 && secs < 1800.0;
        all_pass &= ok;
        let shown: Vec<String> = slopes.iter().map(|(v, s)| format!("{label}={v}: {s:.3}")).collect();
        lines.push(format!("[{}] max/min {ratio:.3} {}, {secs:.1}s", shown.join(", "), if ok { "ok" } else { "over" }));
    }
    report("A4", all_pass, lines.join("; "));
    assert!(all_pass);
}

// ---------------------------------------------------------------- A5

/// Re-checks the per-round runtime relationships from outside the engine.
struct LemmaChecker {
    t0: u64,
    violations: Vec<String>,
    rounds: u64,
}

impl RoundObserver for LemmaChecker {
    fn on_round(
        &mut self,
        before: &ServerState,
        transcript: &RoundTranscript,
        reports: &[AgentRoundReport],
        after: &ServerState,
    ) {
        let (s_n, a_n, h_n, m_n) = (before.num_states, before.num_actions, before.horizon, before.num_agents);
        let k = before.round;
        self.rounds = k;
        let i0 = (2 * m_n * h_n * (h_n + 1)) as u64;
        let hf = h_n as f64;
        // (b)
        for h in 0..h_n {
            let sum: u64 = before.visit_total[h * s_n * a_n..(h + 1) * s_n * a_n].iter().sum();
            if sum as f64 > self.t0 as f64 / hf {
                self.violations.push(format!("(b) round {k} step {h}"));
            }
        }
        // (c)
        for (m, r) in reports.iter().enumerate() {
            for h in 0..h_n {
                for s in 0..s_n {
                    let a = before.policy.action(h, s);
                    let n_prev = before.visit_total[(h * s_n + s) * a_n + a];
                    let cap = (n_prev / (m_n * h_n * (h_n + 1)) as u64).max(1);
                    let n = r.visits[h * s_n + s];
                    if n > cap || (n_prev < i0 && n > 1) {
                        self.violations.push(format!("(c) round {k} agent {m} (h={h}, s={s})"));
                    }
                }
            }
            if r.episodes_run != transcript.episodes_run {
                self.violations.push(format!("sync round {k} agent {m}"));
            }
        }
        // (f)
        let t1 = (1.0 + 1.0 / (hf * (hf + 1.0))) * self.t0 as f64 + (m_n * h_n * s_n * a_n) as f64;
        if k as f64 > t1 / hf {
            self.violations.push(format!("(f) round {k}"));
        }
        // monotone counts, clamp, greedy policy
        if after.visit_total.iter().zip(&before.visit_total).any(|(x, y)| x < y) {
            self.violations.push(format!("N decreased in round {k}"));
        }
        for hs in 0..h_n * s_n {
            let row = &after.q_est[hs * a_n..(hs + 1) * a_n];
            let best = row.iter().cloned().fold(f64::MIN, f64::max);
            if after.v_est[hs] != best.min(hf) || row[after.policy.actions()[hs]] != best {
                self.violations.push(format!("V or policy mismatch round {k}"));
            }
        }
    }
}

#[test]
fn a5_runtime_invariants() {
    let mut checked = 0;
    let mut rounds = 0;
    let mut violations = Vec::new();
    for variant in [Variant::Hoeffding, Variant::Bernstein] {
        for i in 0..12u64 {
            let (s_n, a_n, h_n) = (1 + (i % 3) as usize, 2 + (i % 2) as usize, 1 + (i % 4) as usize);
            let m_n = 1 + (i % 5) as usize;
            let mdp = generate_random_mdp(s_n, a_n, h_n, 50 + i).unwrap();
            let cfg = FedqConfig::for_episodes(m_n, 3000, h_n, variant, 900 + i);
            let mut checker = LemmaChecker {
                t0: cfg.target_steps,
                violations: Vec::new(),
                rounds: 0,
            };
            match run_fedq_observed(&mdp, &cfg, &mut checker) {
                Ok(run) => {
                    // (d)
                    let hf = h_n as f64;
                    let bound = (1.0 + 1.0 / (hf * (hf + 1.0))) * cfg.target_steps as f64 / hf + (m_n * s_n * a_n) as f64;
                    for h in 0..h_n {
                        let sum: u64 = run.server.visit_total[h * s_n * a_n..(h + 1) * s_n * a_n].iter().sum();
                        if sum as f64 > bound {
                            violations.push(format!("(d) {variant} config {i} step {h}"));
                        }
                    }
                }
                Err(e) => violations.push(format!("{variant} config {i}: {e}")),
            }
            rounds += checker.rounds;
            checked += 1;
            violations.extend(checker.violations.into_iter().map(|v| format!("{variant} config {i}: {v}")));
        }
    }
    let pass = violations.is_empty();
    report(
        "A5",
        pass,
        format!("{checked} runs, {rounds} rounds checked, {} violations {:?}", violations.len(), violations.first()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- A7

struct Replay {
    rounds: Vec<(ServerState, RoundTranscript, ServerState)>,
}

impl RoundObserver for Replay {
    fn wants_trajectories(&self) -> bool {
        true
    }

    fn on_round(&mut self, before: &ServerState, t: &RoundTranscript, _: &[AgentRoundReport], after: &ServerState) {
        self.rounds.push((before.clone(), t.clone(), after.clone()));
    }
}

fn population_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

#[test]
fn a7_bernstein_accumulators() {
    let mut var_err: f64 = 0.0;
    let mut var_checks = 0u64;
    let mut clamp_fail = 0u64;
    let mut clamp_checks = 0u64;
    let mut recon_err: f64 = 0.0;
    let mut recon_checks = 0u64;
    for i in 0..20u64 {
        let (s_n, a_n, h_n, m_n) = (1 + (i % 3) as usize, 2 + (i % 2) as usize, 2 + (i % 2) as usize, 2 + (i % 2) as usize);
        let mdp = generate_random_mdp(s_n, a_n, h_n, 300 + i).unwrap();
        let cfg = FedqConfig::for_episodes(m_n, 1000, h_n, Variant::Bernstein, 40 + i);
        let params = BernsteinParams {
            horizon: h_n,
            bonus_scale: cfg.bonus.bernstein_scale,
            log_factor: cfg.bonus.log_factor,
            num_agents: m_n,
            num_states: s_n,
            num_actions: a_n,
        };
        let clamp = |t: u64| cfg.bonus.bernstein_scale * ((h_n as f64).powi(3) * cfg.bonus.log_factor / t as f64).sqrt();
        let i0 = (2 * m_n * h_n * (h_n + 1)) as u64;
        let mut replay = Replay { rounds: Vec::new() };
        run_fedq_observed(&mdp, &cfg, &mut replay).unwrap();

        let mut samples: HashMap<usize, Vec<f64>> = HashMap::new();
        // β per visit index, using the variance in force after the round holding that visit
        let mut betas: HashMap<usize, Vec<f64>> = HashMap::new();
        for (before, t, after) in &replay.rounds {
            let acc = before.bernstein.as_ref().unwrap();
            for (idx, vals) in &samples {
                if before.visit_total[*idx] >= i0 {
                    var_err = var_err.max((acc.variance[*idx] - population_variance(vals)).abs());
                    var_checks += 1;
                }
            }
            let mut round_visits: HashMap<usize, u64> = HashMap::new();
            for e in &t.episodes {
                for (h, st) in e.steps.iter().enumerate() {
                    let idx = mdp.sa_index(h, st.state, st.action);
                    let v = st.next_state.map_or(0.0, |s2| before.v_est[(h + 1) * s_n + s2]);
                    samples.entry(idx).or_default().push(v);
                    *round_visits.entry(idx).or_default() += 1;
                }
            }
            let after_acc = after.bernstein.as_ref().unwrap();
            for (idx, n) in round_visits {
                let w = after_acc.variance[idx];
                let seq = betas.entry(idx).or_default();
                for _ in 0..n {
                    let tt = seq.len() as u64 + 1;
                    let beta = bernstein_beta(tt, w, &params);
                    clamp_checks += 1;
                    if beta > clamp(tt) {
                        clamp_fail += 1;
                    }
                    seq.push(beta);
                }
            }
        }
        for seq in betas.values() {
            let upto = seq.len().min(200);
            let b: Vec<f64> = (1..=upto)
                .map(|t| {
                    let prev = if t == 1 { 0.0 } else { seq[t - 2] };
                    bernstein_per_visit_bonus(t as u64, seq[t - 1], prev, h_n)
                })
                .collect();
            for t in 1..=upto {
                let total: f64 = (1..=t).map(|j| eta_weight(j as u64, t as u64, h_n).unwrap() * b[j - 1]).sum();
                recon_err = recon_err.max((2.0 * total - seq[t - 1]).abs());
                recon_checks += 1;
            }
        }
    }
    let pass = var_err <= 1e-8 && clamp_fail == 0 && recon_err <= 1e-8 && var_checks > 0;
    report(
        "A7",
        pass,
        format!(
            "variance replay max err {var_err:.2e} over {var_checks} checks; clamp violations {clamp_fail}/{clamp_checks}; reconstruction max err {recon_err:.2e} over {recon_checks} checks"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- A8

#[test]
fn a8_rate_identities() {
    let mut sum_err: f64 = 0.0;
    for h in [1usize, 2, 5] {
        for t in 1..=10_000u64 {
            let total: f64 = (1..=t).map(|i| eta_weight(i, t, h).unwrap()).sum();
            sum_err = sum_err.max((total - 1.0).abs());
        }
        for t in [1u64, 7, 100, 1234] {
            let w = eta_weight(t / 2 + 1, t, h).unwrap();
            let mut direct = eta(t / 2 + 1, h);
            for j in t / 2 + 2..=t {
                direct *= 1.0 - eta(j, h);
            }
            sum_err = sum_err.max((w - direct).abs());
        }
    }
    let mut partial_lines = Vec::new();
    let mut partial_pass = true;
    for h in [1usize, 2, 5] {
        let target = 1.0 + 1.0 / h as f64;
        let mut worst: f64 = 0.0;
        let mut monotone = true;
        for t in [1u64, 2, 5, 10] {
            let n = t + 10_000 * h as u64;
            let mut w = eta(t, h);
            let mut sum = w;
            for i in t + 1..=n {
                w *= 1.0 - eta(i, h);
                monotone &= w >= 0.0;
                sum += w;
            }
            worst = worst.max((sum - target).abs());
        }
        let ok = worst <= 1e-6 && monotone;
        partial_pass &= ok;
        partial_lines.push(format!("H={h}: max |partial - (1+1/H)| = {worst:.2e}"));
    }
    let pass = sum_err <= 1e-10 && partial_pass;
    report(
        "A8",
        pass,
        format!("max |sum eta_i^t - 1| = {sum_err:.2e}; {}", partial_lines.join(", ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- A9

#[test]
fn a9_byte_identical_outputs() {
    let make = |dir: &std::path::Path, kind| ExperimentConfig {
        kind,
        mdp: Some(MdpSpec {
            states: 3,
            actions: 2,
            horizon: 3,
            seed: 5,
        }),
        mdp_file: None,
        variant: Variant::Bernstein,
        agents: 3,
        sweep: vec![2, 3],
        episodes_per_agent: 3000,
        replications: 4,
        master_seed: 99,
        bonus: BonusConfig::default(),
        burn_in: 100,
        output_dir: dir.to_path_buf(),
    };
    let mut compared = 0;
    let mut mismatched = Vec::new();
    for kind in [ExperimentKind::Speedup, ExperimentKind::CommVsM, ExperimentKind::SingleRun] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = run_experiment(&make(a.path(), kind)).unwrap();
        let sb = run_experiment(&make(b.path(), kind)).unwrap();
        assert_eq!(sa.files, sb.files);
        for f in sa.files.iter().filter(|f| f.ends_with(".csv")) {
            compared += 1;
            if std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).unwrap() {
                mismatched.push(f.clone());
            }
        }
    }
    let pass = mismatched.is_empty() && compared > 0;
    report("A9", pass, format!("{compared} CSV files compared, mismatches {mismatched:?}"));
    assert!(pass);
}
