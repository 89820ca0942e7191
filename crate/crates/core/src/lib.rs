//! Federated tabular Q-learning with event-triggered communication rounds.
//!
//! A deterministic simulator for FedQ-Hoeffding and FedQ-Bernstein on
//! episodic tabular MDPs, a single-agent UCB-Hoeffding baseline, exact regret
//! and communication accounting, and an experiment harness.

pub mod baseline;
pub mod error;
pub mod experiment;
pub mod mdp;
pub mod metrics;
pub mod rates;
pub mod runtime;

pub use baseline::{run_ucb_hoeffding, UcbState};
pub use error::{FedqError, Result};
pub use experiment::{fit_comm_slope, regret_log_plateau, run_experiment, ExperimentConfig, ExperimentKind, SlopeFit};
pub use mdp::{
    evaluate_policy, generate_random_mdp, solve_optimal, DeterministicPolicy, MdpSolution, TabularMdp,
};
pub use metrics::RunMetrics;
pub use rates::{BernsteinParams, RateParams};
pub use runtime::{run_fedq, BonusConfig, FedqConfig, ServerState, Variant};
