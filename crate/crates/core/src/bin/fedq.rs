use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use fedq::experiment::{
    fit_comm_slope, read_rounds_csv, run_experiment, write_run_csv, ExperimentConfig, ExperimentKind, MdpSpec,
    VERSION,
};
use fedq::mdp::{generate_random_mdp, solve_optimal, TabularMdp};
use fedq::metrics::geometric_checkpoints;
use fedq::runtime::{run_fedq_observed, write_transcript, BonusConfig, FedqConfig, TranscriptRecorder, Variant};
use fedq::{FedqError, Result};

#[derive(Parser)]
#[command(name = "fedq", version, about = "Federated tabular Q-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random tabular MDP and write it as JSON.
    GenMdp {
        #[arg(long)]
        states: usize,
        #[arg(long)]
        actions: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve an MDP file and print V*, gaps and G-MDP status as JSON.
    Solve {
        #[arg(long)]
        mdp: PathBuf,
    },
    /// Run FedQ once with an explicit seed.
    Run(RunArgs),
    /// Run an experiment from a config file and/or flags.
    Experiment(ExperimentArgs),
    /// Fit rounds against ln(episodes) from a CSV with `episode` and `rounds` columns.
    FitSlope {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        burn_in: u64,
    },
}

#[derive(Args)]
struct BonusArgs {
    /// Hoeffding bonus constant c.
    #[arg(long = "c")]
    c: Option<f64>,
    /// Bernstein bonus constant c'.
    #[arg(long = "c-prime")]
    c_prime: Option<f64>,
    /// Log factor ι.
    #[arg(long)]
    iota: Option<f64>,
}

impl BonusArgs {
    fn apply(&self, bonus: &mut BonusConfig) {
        if let Some(c) = self.c {
            bonus.bonus_scale = c;
        }
        if let Some(c) = self.c_prime {
            bonus.bernstein_scale = c;
        }
        if let Some(i) = self.iota {
            bonus.log_factor = i;
        }
    }
}

#[derive(Args)]
struct MdpArgs {
    #[arg(long, conflicts_with_all = ["states", "actions", "horizon", "mdp_seed"])]
    mdp_file: Option<PathBuf>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    mdp_seed: Option<u64>,
}

impl MdpArgs {
    fn any_spec(&self) -> bool {
        self.states.is_some() || self.actions.is_some() || self.horizon.is_some() || self.mdp_seed.is_some()
    }

    fn spec(&self, base: Option<MdpSpec>) -> Result<MdpSpec> {
        let need = |v: Option<usize>, b: Option<usize>, name: &str| {
            v.or(b).ok_or_else(|| FedqError::config(name, "required when no MDP file is given"))
        };
        Ok(MdpSpec {
            states: need(self.states, base.map(|b| b.states), "states")?,
            actions: need(self.actions, base.map(|b| b.actions), "actions")?,
            horizon: need(self.horizon, base.map(|b| b.horizon), "horizon")?,
            seed: self.mdp_seed.or(base.map(|b| b.seed)).unwrap_or(0),
        })
    }

    fn load(&self) -> Result<TabularMdp> {
        match &self.mdp_file {
            Some(p) => TabularMdp::load(p),
            None => {
                let s = self.spec(None)?;
                generate_random_mdp(s.states, s.actions, s.horizon, s.seed)
            }
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    mdp: MdpArgs,
    #[arg(long, default_value = "hoeffding")]
    variant: String,
    #[arg(long, default_value_t = 10)]
    agents: usize,
    /// Episodes per agent (T/H).
    #[arg(long, default_value_t = 1000)]
    episodes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    bonus: BonusArgs,
    /// Output directory for `run.csv`, `summary.json` and `state.json`.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Also write the full round transcript to this file.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<ExperimentKind>,
    #[command(flatten)]
    mdp: MdpArgs,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    agents: Option<usize>,
    /// Comma-separated sweep values for M, S or A.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<usize>>,
    /// Episodes per agent (T/H).
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[command(flatten)]
    bonus: BonusArgs,
    #[arg(long)]
    burn_in: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> std::result::Result<ExperimentKind, String> {
    serde_json::from_value(json!(s)).map_err(|_| {
        "expected one of regret_curve, speedup, comm_vs_m, comm_vs_s, comm_vs_a, single_run".to_string()
    })
}

impl ExperimentArgs {
    fn into_config(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str::<ExperimentConfig>(&text)?
            }
            None => {
                let kind = self
                    .kind
                    .ok_or_else(|| FedqError::config("kind", "required when no config file is given"))?;
                toml::from_str::<ExperimentConfig>(&format!("kind = {}", json!(kind)))?
            }
        };
        if let Some(k) = self.kind {
            cfg.kind = k;
        }
        if let Some(p) = &self.mdp.mdp_file {
            cfg.mdp_file = Some(p.clone());
            cfg.mdp = None;
        } else if self.mdp.any_spec() {
            cfg.mdp = Some(self.mdp.spec(cfg.mdp)?);
            cfg.mdp_file = None;
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.parse()?;
        }
        if let Some(v) = self.agents {
            cfg.agents = v;
        }
        if let Some(v) = self.sweep {
            cfg.sweep = v;
        }
        if let Some(v) = self.episodes {
            cfg.episodes_per_agent = v;
        }
        if let Some(v) = self.replications {
            cfg.replications = v;
        }
        if let Some(v) = self.master_seed {
            cfg.master_seed = v;
        }
        if let Some(v) = self.burn_in {
            cfg.burn_in = v;
        }
        if let Some(v) = self.out {
            cfg.output_dir = v;
        }
        self.bonus.apply(&mut cfg.bonus);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run_once(args: RunArgs) -> Result<()> {
    let mdp = args.mdp.load()?;
    let variant: Variant = args.variant.parse()?;
    let mut bonus = BonusConfig::default();
    args.bonus.apply(&mut bonus);
    if args.episodes == 0 {
        return Err(FedqError::config("episodes", "must be at least 1"));
    }
    let config = FedqConfig {
        num_agents: args.agents,
        target_steps: (mdp.horizon() * args.agents) as u64 * args.episodes,
        variant,
        bonus,
        seed: args.seed,
        checkpoints: geometric_checkpoints(args.episodes, 1.25),
    };
    let mut recorder = TranscriptRecorder::default();
    let run = if args.transcript.is_some() {
        run_fedq_observed(&mdp, &config, &mut recorder)?
    } else {
        fedq::run_fedq(&mdp, &config)?
    };
    std::fs::create_dir_all(&args.out)?;
    let header = format!("# fedq {VERSION}\n# config: {}\n", serde_json::to_string(&config)?);
    write_run_csv(&args.out.join("run.csv"), &header, &run.metrics)?;
    run.server.save(args.out.join("state.json"))?;
    if let Some(path) = &args.transcript {
        let transcripts: Vec<_> = recorder.rounds.into_iter().map(|(_, t)| t).collect();
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_transcript(&mut w, &transcripts)?;
        w.flush()?;
    }
    let m = &run.metrics;
    let summary = json!({
        "version": VERSION,
        "config": config,
        "regret": m.regret,
        "rounds": m.rounds,
        "comm_scalars": m.comm_scalars,
        "abort_scalars": m.abort_scalars,
        "switching_cost": m.switching_cost,
        "subopt_visits": m.subopt_visits,
        "optimism_fraction": m.optimism_fraction,
        "episodes_per_agent": m.episodes_per_agent,
        "steps_total": m.steps_total,
    });
    std::fs::write(args.out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    print_json(&summary)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenMdp {
            states,
            actions,
            horizon,
            seed,
            out,
        } => {
            let mdp = generate_random_mdp(states, actions, horizon, seed)?;
            match out {
                Some(p) => mdp.save(p),
                None => {
                    println!("{}", mdp.to_json()?);
                    Ok(())
                }
            }
        }
        Command::Solve { mdp } => {
            let mdp = TabularMdp::load(mdp)?;
            print_json(&solve_optimal(&mdp)?)
        }
        Command::Run(args) => run_once(args),
        Command::Experiment(args) => {
            let summary = run_experiment(&args.into_config()?)?;
            print_json(&summary)
        }
        Command::FitSlope { input, burn_in } => print_json(&fit_comm_slope(&read_rounds_csv(input)?, burn_in)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", json!({"error": "config", "message": msg.trim()}));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.category(), "message": e.to_string()}));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
