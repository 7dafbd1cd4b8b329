//! Rayon-backed drop-ins for the serial executors in `tec-core`. Each agent
//! or client is computed by the same function as in the serial path, so
//! results are bit-identical.

use rayon::prelude::*;
use tec_core::consensus::{self, AgentState, CommGraph, ConsensusConfig, ConsensusResult, StepContext};
use tec_core::forecast::{self, ClientDataset, FedConfig, FederatedRun, LearnerConfig, ModelWeights, TrainJob};
use tec_core::analytic::OptimalDispatch;
use tec_core::model::Scenario;

/// Below this many agents a round is cheaper on one thread.
pub const PARALLEL_AGENT_THRESHOLD: usize = 64;

pub fn par_round(ctx: &StepContext<'_>, prev: &[AgentState], t: usize) -> Vec<AgentState> {
    (0..ctx.n_agents())
        .into_par_iter()
        .map(|i| ctx.update_agent(prev, i, t))
        .collect()
}

/// [`consensus::run`] with agents updated in parallel on large graphs.
pub fn run_consensus(
    scenario: &Scenario,
    graph: &CommGraph,
    config: &ConsensusConfig,
    warm_lambda: Option<f64>,
    oracle: Option<&OptimalDispatch>,
    record_agents: bool,
) -> tec_core::Result<ConsensusResult> {
    let parallel = graph.n_agents() >= PARALLEL_AGENT_THRESHOLD;
    consensus::run_with(scenario, graph, config, warm_lambda, oracle, record_agents, |ctx, prev, t| {
        if parallel {
            par_round(ctx, prev, t)
        } else {
            ctx.step(prev, t)
        }
    })
}

/// [`forecast::run_federated`] with the round's clients trained in parallel.
pub fn run_federated(
    clients: &[ClientDataset],
    fed: &FedConfig,
    cfg: &LearnerConfig,
    init: Option<&ModelWeights>,
) -> tec_core::Result<FederatedRun> {
    forecast::run_federated_with(clients, fed, cfg, init, |jobs: &[TrainJob<'_>]| {
        jobs.par_iter().map(|j| j.run(cfg)).collect()
    })
}
