//! Experiment sweeps, result persistence and curve statistics.
//!
//! Output files (all CSVs start with `#` lines holding the artifact version
//! and the full config as one-line JSON):
//!
//! - `run_<algorithm>_v<value>_r<rep>.csv`:
//!   `episode, episodes_total, regret, regret_over_log, rounds, scalars, abort_scalars, switching, subopt_visits`
//! - `summary_regret.csv` and `summary_rounds.csv`:
//!   `algorithm, value, episode, median, p10, p90`
//! - `slopes.csv` (communication sweeps): `value, slope, intercept, r_squared, points`
//! - `diagnostics.csv` (single runs on solvable MDPs): `s, h, deviation, r_k`
//! - `summary.json`

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::run_ucb_hoeffding_with;
use crate::error::{FedqError, Result};
use crate::mdp::{generate_random_mdp, solve_optimal, TabularMdp};
use crate::metrics::{
    geometric_checkpoints, theoretical_bounds, visit_concentration_report, RunMetrics, TheoreticalBounds,
};
use crate::runtime::{run_fedq, BonusConfig, FedqConfig, Variant};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RegretCurve,
    Speedup,
    CommVsM,
    CommVsS,
    CommVsA,
    SingleRun,
}

impl ExperimentKind {
    fn is_comm(self) -> bool {
        matches!(self, ExperimentKind::CommVsM | ExperimentKind::CommVsS | ExperimentKind::CommVsA)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mdp: Option<MdpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mdp_file: Option<PathBuf>,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// Number of agents outside `comm_vs_M` sweeps.
    #[serde(default = "default_agents")]
    pub agents: usize,
    /// Swept values of M, S or A for communication studies.
    #[serde(default = "default_sweep")]
    pub sweep: Vec<usize>,
    /// `T/H`
    #[serde(default = "default_episodes")]
    pub episodes_per_agent: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub bonus: BonusConfig,
    /// Slope fits ignore checkpoints below this many episodes per agent.
    #[serde(default)]
    pub burn_in: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_variant() -> Variant {
    Variant::Hoeffding
}
fn default_agents() -> usize {
    10
}
fn default_sweep() -> Vec<usize> {
    vec![2, 4, 6, 8]
}
fn default_episodes() -> u64 {
    100_000
}
fn default_replications() -> usize {
    10
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.mdp, &self.mdp_file) {
            (Some(_), Some(_)) => return Err(FedqError::config("mdp", "give either `mdp` or `mdp_file`, not both")),
            (None, None) => return Err(FedqError::config("mdp", "one of `mdp` or `mdp_file` is required")),
            _ => {}
        }
        if let Some(spec) = &self.mdp {
            if spec.states == 0 || spec.actions == 0 || spec.horizon == 0 {
                return Err(FedqError::config("mdp", "states, actions and horizon must be positive"));
            }
        }
        if matches!(self.kind, ExperimentKind::CommVsS | ExperimentKind::CommVsA) && self.mdp_file.is_some() {
            return Err(FedqError::config("mdp_file", "S and A sweeps need a generated `mdp` spec"));
        }
        if self.kind.is_comm() {
            if self.sweep.is_empty() {
                return Err(FedqError::config("sweep", "must be nonempty"));
            }
            if self.sweep.contains(&0) {
                return Err(FedqError::config("sweep", "values must be positive"));
            }
        }
        if self.agents == 0 {
            return Err(FedqError::config("agents", "must be at least 1"));
        }
        if self.episodes_per_agent == 0 {
            return Err(FedqError::config("episodes_per_agent", "must be at least 1"));
        }
        if self.replications == 0 {
            return Err(FedqError::config("replications", "must be at least 1"));
        }
        for (field, v) in [
            ("bonus.bonus_scale", self.bonus.bonus_scale),
            ("bonus.bernstein_scale", self.bonus.bernstein_scale),
            ("bonus.log_factor", self.bonus.log_factor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(FedqError::config(field, format!("must be finite and positive, got {v}")));
            }
        }
        Ok(())
    }

    fn base_mdp(&self) -> Result<TabularMdp> {
        match (&self.mdp, &self.mdp_file) {
            (Some(spec), _) => generate_random_mdp(spec.states, spec.actions, spec.horizon, spec.seed),
            (None, Some(path)) => TabularMdp::load(path),
            (None, None) => Err(FedqError::config("mdp", "one of `mdp` or `mdp_file` is required")),
        }
    }

    /// CSV header lines; the output directory is left out so reruns into
    /// different directories produce identical files.
    fn header(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        Ok(format!("# fedq {VERSION}\n# config: {value}\n"))
    }
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `rep` at sweep value `value`:
/// `f(f(f(master) ^ value) ^ rep)` with `f` the SplitMix64 finalizer.
pub fn derive_seed(master: u64, value: u64, rep: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ value) ^ rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least squares of rounds against `ln(episodes)` over points with
/// `episodes >= burn_in`.
pub fn fit_comm_slope(points: &[(u64, f64)], burn_in: u64) -> Result<SlopeFit> {
    let used: Vec<(f64, f64)> = points
        .iter()
        .filter(|(e, _)| *e >= burn_in && *e > 0)
        .map(|(e, r)| ((*e as f64).ln(), *r))
        .collect();
    let n = used.len();
    if n < 2 {
        return Err(FedqError::InsufficientPoints(n));
    }
    let nf = n as f64;
    let mx = used.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = used.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = used.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = used.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = used.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(FedqError::InsufficientPoints(1));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        let sse: f64 = used.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (1.0 - sse / syy).clamp(0.0, 1.0)
    };
    Ok(SlopeFit {
        slope,
        intercept,
        r_squared,
        points: n,
    })
}

/// Relative drift `max |y - y_end| / y_end` of `y = regret / ln(T/H + 1)`
/// over the final `tail_fraction` of checkpoints.
pub fn regret_log_plateau(curve: &[(u64, f64)], tail_fraction: f64) -> Result<f64> {
    if curve.len() < 10 {
        return Err(FedqError::InsufficientPoints(curve.len()));
    }
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(FedqError::InvalidParameter(format!("tail fraction {tail_fraction} outside (0, 1]")));
    }
    let ys: Vec<f64> = curve.iter().map(|(e, r)| r / (*e as f64 + 1.0).ln()).collect();
    let start = ((1.0 - tail_fraction) * ys.len() as f64).floor() as usize;
    let y_end = *ys.last().expect("nonempty");
    let spread = ys[start..].iter().map(|y| (y - y_end).abs()).fold(0.0, f64::max);
    Ok(if spread == 0.0 { 0.0 } else { spread / y_end.abs() })
}

/// Linear-interpolation quantile of unsorted data, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

impl Band {
    pub fn of(values: &[f64]) -> Self {
        Band {
            median: quantile(values, 0.5),
            p10: quantile(values, 0.1),
            p90: quantile(values, 0.9),
        }
    }
}

/// Per-checkpoint bands of `field` across replications that share a schedule.
pub fn band_curve(runs: &[RunMetrics], field: impl Fn(&crate::metrics::Checkpoint) -> f64) -> Vec<(u64, Band)> {
    let n = runs.iter().map(|r| r.checkpoints.len()).min().unwrap_or(0);
    (0..n)
        .map(|i| {
            let vals: Vec<f64> = runs.iter().map(|r| field(&r.checkpoints[i])).collect();
            (runs[0].checkpoints[i].episodes_per_agent, Band::of(&vals))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    FedqHoeffding,
    FedqBernstein,
    UcbHoeffding,
}

impl Algorithm {
    fn label(self) -> &'static str {
        match self {
            Algorithm::FedqHoeffding => "fedq-hoeffding",
            Algorithm::FedqBernstein => "fedq-bernstein",
            Algorithm::UcbHoeffding => "ucb-hoeffding",
        }
    }

    fn fedq(variant: Variant) -> Self {
        match variant {
            Variant::Hoeffding => Algorithm::FedqHoeffding,
            Variant::Bernstein => Algorithm::FedqBernstein,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpInfo {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub min_gap: Option<f64>,
    pub is_gmdp: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub algorithm: Algorithm,
    pub value: usize,
    pub agents: usize,
    pub mdp: MdpInfo,
    pub final_regret: Band,
    pub final_rounds: Band,
    pub final_switching: Band,
    pub final_subopt_visits: Band,
    pub plateau_drift: Option<f64>,
    pub slope: Option<SlopeFit>,
    pub bounds: Option<TheoreticalBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub version: String,
    pub config: ExperimentConfig,
    pub groups: Vec<GroupSummary>,
    pub files: Vec<String>,
}

/// One group of replications sharing an algorithm and sweep value.
#[derive(Debug, Clone)]
pub struct RunGroup {
    pub algorithm: Algorithm,
    pub value: usize,
    pub agents: usize,
    pub mdp: TabularMdp,
    pub runs: Vec<RunMetrics>,
}

struct Job {
    group: usize,
    rep: usize,
    seed: u64,
}

/// Runs every `(sweep value, replication)` in parallel; results are
/// assembled in a fixed order, so outputs do not depend on scheduling.
pub fn run_groups(config: &ExperimentConfig) -> Result<Vec<RunGroup>> {
    config.validate()?;
    let base = config.base_mdp()?;
    let fedq = Algorithm::fedq(config.variant);
    let mut groups: Vec<RunGroup> = Vec::new();
    let mut push = |algorithm, value: usize, agents, mdp: TabularMdp| {
        groups.push(RunGroup {
            algorithm,
            value,
            agents,
            mdp,
            runs: Vec::new(),
        })
    };
    match config.kind {
        ExperimentKind::RegretCurve | ExperimentKind::SingleRun => push(fedq, config.agents, config.agents, base),
        ExperimentKind::Speedup => {
            push(fedq, config.agents, config.agents, base.clone());
            push(Algorithm::UcbHoeffding, 1, 1, base);
        }
        ExperimentKind::CommVsM => {
            for &m in &config.sweep {
                push(fedq, m, m, base.clone());
            }
        }
        ExperimentKind::CommVsS | ExperimentKind::CommVsA => {
            let spec = config.mdp.expect("validated");
            for &v in &config.sweep {
                let (s, a) = if config.kind == ExperimentKind::CommVsS {
                    (v, spec.actions)
                } else {
                    (spec.states, v)
                };
                push(fedq, v, config.agents, generate_random_mdp(s, a, spec.horizon, spec.seed)?);
            }
        }
    }

    let jobs: Vec<Job> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, grp)| {
            (0..config.replications).map(move |rep| Job {
                group: g,
                rep,
                seed: derive_seed(config.master_seed, grp.value as u64, rep as u64),
            })
        })
        .collect();
    let schedule = geometric_checkpoints(config.episodes_per_agent, 1.25);
    let results: Vec<Result<RunMetrics>> = jobs
        .par_iter()
        .map(|job| {
            let grp = &groups[job.group];
            match grp.algorithm {
                Algorithm::UcbHoeffding => run_ucb_hoeffding_with(
                    &grp.mdp,
                    config.episodes_per_agent,
                    &config.bonus.rates(grp.mdp.horizon()),
                    job.seed,
                    schedule.clone(),
                )
                .map(|(m, _)| m),
                _ => {
                    let cfg = FedqConfig {
                        num_agents: grp.agents,
                        target_steps: (grp.mdp.horizon() * grp.agents) as u64 * config.episodes_per_agent,
                        variant: config.variant,
                        bonus: config.bonus,
                        seed: job.seed,
                        checkpoints: schedule.clone(),
                    };
                    run_fedq(&grp.mdp, &cfg).map(|r| r.metrics)
                }
            }
        })
        .collect();
    for (job, res) in jobs.iter().zip(results) {
        let metrics = res?;
        debug_assert_eq!(groups[job.group].runs.len(), job.rep);
        groups[job.group].runs.push(metrics);
    }
    Ok(groups)
}

#[derive(Serialize)]
struct RunRow {
    episode: u64,
    episodes_total: u64,
    regret: f64,
    regret_over_log: f64,
    rounds: u64,
    scalars: u64,
    abort_scalars: u64,
    switching: u64,
    subopt_visits: u64,
}

#[derive(Serialize)]
struct BandRow<'a> {
    algorithm: &'a str,
    value: usize,
    episode: u64,
    median: f64,
    p10: f64,
    p90: f64,
}

#[derive(Serialize)]
struct SlopeRow {
    value: usize,
    slope: f64,
    intercept: f64,
    r_squared: f64,
    points: usize,
}

#[derive(Serialize)]
struct DiagnosticRow {
    s: usize,
    h: usize,
    deviation: f64,
    r_k: u64,
}

fn write_csv<T: Serialize>(path: &Path, header: &str, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(header.as_bytes())?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one run's checkpoints; `header` is emitted verbatim first.
pub fn write_run_csv(path: &Path, header: &str, metrics: &RunMetrics) -> Result<()> {
    write_csv(
        path,
        header,
        metrics.checkpoints.iter().map(|c| RunRow {
            episode: c.episodes_per_agent,
            episodes_total: c.episodes_total,
            regret: c.regret,
            regret_over_log: c.regret / (c.episodes_per_agent as f64 + 1.0).ln(),
            rounds: c.rounds,
            scalars: c.comm_scalars,
            abort_scalars: c.abort_scalars,
            switching: c.switching,
            subopt_visits: c.subopt_visits,
        }),
    )
}

fn final_band(runs: &[RunMetrics], f: impl Fn(&RunMetrics) -> f64) -> Band {
    Band::of(&runs.iter().map(f).collect::<Vec<_>>())
}

/// Runs the experiment and writes every output file into `output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    let groups = run_groups(config)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)?;
    let header = config.header()?;
    let mut files = Vec::new();
    let mut regret_rows = Vec::new();
    let mut rounds_rows = Vec::new();
    let mut slope_rows = Vec::new();
    let mut summaries = Vec::new();

    for grp in &groups {
        let label = grp.algorithm.label();
        for (rep, m) in grp.runs.iter().enumerate() {
            let name = format!("run_{label}_v{}_r{rep}.csv", grp.value);
            write_run_csv(&dir.join(&name), &header, m)?;
            files.push(name);
        }
        let regret_curve = band_curve(&grp.runs, |c| c.regret);
        let rounds_curve = band_curve(&grp.runs, |c| c.rounds as f64);
        for (curve, out) in [(&regret_curve, &mut regret_rows), (&rounds_curve, &mut rounds_rows)] {
            out.extend(curve.iter().map(|(e, b)| BandRow {
                algorithm: label,
                value: grp.value,
                episode: *e,
                median: b.median,
                p10: b.p10,
                p90: b.p90,
            }));
        }
        let median_regret: Vec<(u64, f64)> = regret_curve.iter().map(|(e, b)| (*e, b.median)).collect();
        let median_rounds: Vec<(u64, f64)> = rounds_curve.iter().map(|(e, b)| (*e, b.median)).collect();
        let slope = if config.kind.is_comm() {
            let fit = fit_comm_slope(&median_rounds, config.burn_in)?;
            slope_rows.push(SlopeRow {
                value: grp.value,
                slope: fit.slope,
                intercept: fit.intercept,
                r_squared: fit.r_squared,
                points: fit.points,
            });
            Some(fit)
        } else {
            None
        };
        let solution = solve_optimal(&grp.mdp).ok();
        let t = (grp.mdp.horizon() * grp.agents) as f64 * config.episodes_per_agent as f64;
        let bounds = solution.as_ref().map(|s| {
            theoretical_bounds(s, grp.agents, grp.mdp.num_states(), grp.mdp.num_actions(), grp.mdp.horizon(), t, 0.01)
        });
        if config.kind == ExperimentKind::SingleRun {
            if let Some(sol) = &solution {
                let report = visit_concentration_report(&grp.runs[0], sol);
                let name = "diagnostics.csv".to_string();
                write_csv(
                    &dir.join(&name),
                    &header,
                    report.rows.iter().map(|r| DiagnosticRow {
                        s: r.state,
                        h: r.step,
                        deviation: r.deviation,
                        r_k: r.episodes,
                    }),
                )?;
                files.push(name);
            }
        }
        summaries.push(GroupSummary {
            algorithm: grp.algorithm,
            value: grp.value,
            agents: grp.agents,
            mdp: MdpInfo {
                states: grp.mdp.num_states(),
                actions: grp.mdp.num_actions(),
                horizon: grp.mdp.horizon(),
                min_gap: solution.as_ref().map(|s| s.min_gap),
                is_gmdp: solution.as_ref().map(|s| s.is_gmdp),
            },
            final_regret: final_band(&grp.runs, |m| m.regret),
            final_rounds: final_band(&grp.runs, |m| m.rounds as f64),
            final_switching: final_band(&grp.runs, |m| m.switching_cost as f64),
            final_subopt_visits: final_band(&grp.runs, |m| m.subopt_visits as f64),
            plateau_drift: regret_log_plateau(&median_regret, 0.5).ok(),
            slope,
            bounds,
        });
    }

    write_csv(&dir.join("summary_regret.csv"), &header, regret_rows)?;
    write_csv(&dir.join("summary_rounds.csv"), &header, rounds_rows)?;
    files.push("summary_regret.csv".into());
    files.push("summary_rounds.csv".into());
    if config.kind.is_comm() {
        write_csv(&dir.join("slopes.csv"), &header, slope_rows)?;
        files.push("slopes.csv".into());
    }
    files.push("summary.json".into());
    let summary = ExperimentSummary {
        version: VERSION.to_string(),
        config: config.clone(),
        groups: summaries,
        files,
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

/// Reads `(episode, rounds)` pairs from a CSV with those column names;
/// `#` lines are skipped.
pub fn read_rounds_csv(path: impl AsRef<Path>) -> Result<Vec<(u64, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        episode: u64,
        rounds: f64,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let row: Row = rec?.deserialize(Some(&headers))?;
        out.push((row.episode, row.rounds));
    }
    Ok(out)
}
