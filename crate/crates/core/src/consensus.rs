//! Fully distributed consensus + innovations solver.
//!
//! Agents `0..n_vpps` are the VPPs (in scenario order) and agent `n_vpps` is
//! the community. Every round each agent reads its neighbors' prices from the
//! previous round only, then applies
//!
//! ```text
//! λᵢ ← λᵢ − β·Σ_{j∈Ωᵢ}(λᵢ − λⱼ) − α·innovationᵢ
//! Pᵢ ← clamp((λᵢ − c2)/(2c1), 0, p_max)          (VPP agents)
//! ```
//!
//! The innovation term depends on [`InnovationMode`]. In
//! [`InnovationMode::FixedPoint`] each agent carries an estimate `yᵢ` of the
//! network-average power imbalance, itself updated by consensus plus the
//! change in the agent's local imbalance; the innovation is `yᵢ`. The sum of
//! the estimates always equals the true imbalance `ΣP − |p_community|`, so the
//! centralized optimum with every `yᵢ = 0` is an exact fixed point of a round.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::analytic::{solve_centralized, OptimalDispatch};
use crate::error::{Error, Result};
use crate::math;
use crate::model::{CostCoefficients, FlowDirection, Scenario};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// Every VPP talks to the community only.
    Star,
    Ring,
    Complete,
    /// Undirected edges between agent indices (community = `n_vpps`).
    EdgeList(Vec<(usize, usize)>),
}

/// Undirected, connected communication graph without self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    n_vpps: usize,
    neighbors: Vec<Vec<usize>>,
}

impl CommGraph {
    pub fn from_edges(n_vpps: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n_vpps == 0 {
            return Err(Error::InvalidTopology("at least one VPP is required".into()));
        }
        let n = n_vpps + 1;
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidTopology(format!("edge ({a}, {b}) names an unknown agent")));
            }
            if a == b {
                return Err(Error::InvalidTopology(format!("self-loop on agent {a}")));
            }
            adj[a].insert(b);
            adj[b].insert(a);
        }
        let graph = Self {
            n_vpps,
            neighbors: adj.into_iter().map(|s| s.into_iter().collect()).collect(),
        };
        if !graph.is_connected() {
            return Err(Error::InvalidTopology("graph is not connected".into()));
        }
        Ok(graph)
    }

    pub fn n_vpps(&self) -> usize {
        self.n_vpps
    }

    pub fn n_agents(&self) -> usize {
        self.n_vpps + 1
    }

    pub fn community(&self) -> usize {
        self.n_vpps
    }

    /// Neighbors of agent `i`, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Each undirected edge once, as `(low, high)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    fn is_connected(&self) -> bool {
        let n = self.n_agents();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

pub fn build_graph(topology: &Topology, n_vpps: usize) -> Result<CommGraph> {
    let n = n_vpps + 1;
    let community = n_vpps;
    let edges: Vec<(usize, usize)> = match topology {
        Topology::Star => (0..n_vpps).map(|g| (g, community)).collect(),
        Topology::Ring => (0..n).map(|i| (i, (i + 1) % n)).filter(|(a, b)| a != b).collect(),
        Topology::Complete => (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect(),
        Topology::EdgeList(edges) => edges.clone(),
    };
    CommGraph::from_edges(n_vpps, &edges)
}

/// Gains `α_t = α0/(t+1)^decay_α`, `β_t = β0/(t+1)^decay_β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningSchedule {
    pub alpha0: f64,
    pub beta0: f64,
    #[serde(default)]
    pub decay_alpha: f64,
    #[serde(default)]
    pub decay_beta: f64,
}

impl TuningSchedule {
    pub fn constant(alpha0: f64, beta0: f64) -> Self {
        Self {
            alpha0,
            beta0,
            decay_alpha: 0.0,
            decay_beta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0.is_finite() && self.alpha0 > 0.0 && self.beta0.is_finite() && self.beta0 > 0.0) {
            return Err(Error::invalid("alpha0 and beta0 must be finite and > 0"));
        }
        if !(0.0..=1.0).contains(&self.decay_alpha) || !(0.0..=1.0).contains(&self.decay_beta) {
            return Err(Error::invalid("decay exponents must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub fn schedule_gains(schedule: &TuningSchedule, t: usize) -> (f64, f64) {
    let base = (t + 1) as f64;
    let gain = |g0: f64, decay: f64| {
        if decay == 0.0 {
            g0
        } else {
            g0 / math::powf(base, decay)
        }
    };
    (
        gain(schedule.alpha0, schedule.decay_alpha),
        gain(schedule.beta0, schedule.decay_beta),
    )
}

/// Which innovation term the price update uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnovationMode {
    /// Signs exactly as printed: VPPs `P` (import) / `−P` (export), community
    /// `p_community` in both directions.
    PaperLiteral,
    /// VPPs `P`, community `−|p_community|`, so the innovations sum to the
    /// power imbalance in either direction.
    SignCorrected,
    /// Sign-corrected imbalance, tracked by a second consensus so the
    /// optimum is stationary for every agent.
    #[default]
    FixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub lambda: f64,
    /// Dispatch (always 0 for the community agent).
    pub power: f64,
    /// Tracked imbalance estimate in `FixedPoint` mode; the agent's local
    /// imbalance contribution otherwise.
    pub imbalance: f64,
    pub is_community: bool,
}

/// Initial agent states. Prices start at `warm_lambda` when given, otherwise at
/// each VPP's `c2` (community: mean of the VPPs' `c2`); VPP power starts at 0.
pub fn init_state(scenario: &Scenario, warm_lambda: Option<f64>) -> Result<Vec<AgentState>> {
    let coeffs = scenario.active_coeffs()?;
    let mean_c2 = coeffs.iter().map(|(c, _)| c.c2).sum::<f64>() / coeffs.len() as f64;
    let mut states: Vec<AgentState> = coeffs
        .iter()
        .map(|(c, _)| AgentState {
            lambda: warm_lambda.unwrap_or(c.c2),
            power: 0.0,
            imbalance: 0.0,
            is_community: false,
        })
        .collect();
    states.push(AgentState {
        lambda: warm_lambda.unwrap_or(mean_c2),
        power: 0.0,
        imbalance: -scenario.demand(),
        is_community: true,
    });
    Ok(states)
}

/// Agent states at the centralized optimum: `λ*` everywhere, `P*` at the VPPs,
/// zero tracked imbalance.
pub fn optimum_state(dispatch: &OptimalDispatch) -> Vec<AgentState> {
    let mut states: Vec<AgentState> = dispatch
        .p_star
        .iter()
        .map(|&p| AgentState {
            lambda: dispatch.lambda_star,
            power: p,
            imbalance: 0.0,
            is_community: false,
        })
        .collect();
    states.push(AgentState {
        lambda: dispatch.lambda_star,
        power: 0.0,
        imbalance: 0.0,
        is_community: true,
    });
    states
}

/// Three-branch dispatch rule: interior response, `p_max` above, 0 below.
#[inline]
pub fn clamped_response(c: &CostCoefficients, p_max: f64, lambda: f64) -> f64 {
    let p = c.response(lambda);
    if p > p_max {
        p_max
    } else if p < 0.0 {
        0.0
    } else {
        p
    }
}

/// Everything a round needs besides the previous states.
#[derive(Debug, Clone)]
pub struct StepContext<'a> {
    pub graph: &'a CommGraph,
    pub schedule: TuningSchedule,
    pub mode: InnovationMode,
    direction: FlowDirection,
    p_community: f64,
    coeffs: Vec<(CostCoefficients, f64)>,
}

impl<'a> StepContext<'a> {
    pub fn new(
        scenario: &Scenario,
        graph: &'a CommGraph,
        schedule: TuningSchedule,
        mode: InnovationMode,
    ) -> Result<Self> {
        if graph.n_vpps() != scenario.n_vpps() {
            return Err(Error::InvalidTopology(format!(
                "graph has {} VPP agents, scenario has {}",
                graph.n_vpps(),
                scenario.n_vpps()
            )));
        }
        schedule.validate()?;
        Ok(Self {
            graph,
            schedule,
            mode,
            direction: scenario.direction(),
            p_community: scenario.p_community(),
            coeffs: scenario.active_coeffs()?,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.graph.n_agents()
    }

    /// New state of agent `i` after round `t`, reading only `prev`.
    pub fn update_agent(&self, prev: &[AgentState], i: usize, t: usize) -> AgentState {
        let (alpha, beta) = schedule_gains(&self.schedule, t);
        let me = prev[i];
        let neighbors = self.graph.neighbors(i);
        let consensus: f64 = neighbors.iter().map(|&j| me.lambda - prev[j].lambda).sum();
        let demand = self.p_community.abs();

        let innovation = match self.mode {
            InnovationMode::PaperLiteral => match (me.is_community, self.direction) {
                (true, _) => self.p_community,
                (false, FlowDirection::CommunityToGrid) => -me.power,
                (false, _) => me.power,
            },
            InnovationMode::SignCorrected => {
                if me.is_community {
                    -demand
                } else {
                    me.power
                }
            }
            InnovationMode::FixedPoint => me.imbalance,
        };
        let lambda = me.lambda - beta * consensus - alpha * innovation;

        let power = if me.is_community {
            0.0
        } else {
            let (c, p_max) = &self.coeffs[i];
            clamped_response(c, *p_max, lambda)
        };

        let imbalance = match self.mode {
            InnovationMode::FixedPoint => {
                let spread: f64 = neighbors.iter().map(|&j| me.imbalance - prev[j].imbalance).sum();
                me.imbalance - beta * spread + (power - me.power)
            }
            _ if me.is_community => -demand,
            _ => power,
        };

        AgentState {
            lambda,
            power,
            imbalance,
            is_community: me.is_community,
        }
    }

    /// One synchronous round; `prev` is never written.
    pub fn step(&self, prev: &[AgentState], t: usize) -> Vec<AgentState> {
        (0..prev.len()).map(|i| self.update_agent(prev, i, t)).collect()
    }
}

/// Synchronous round of every agent.
pub fn step(
    states: &[AgentState],
    scenario: &Scenario,
    graph: &CommGraph,
    schedule: &TuningSchedule,
    mode: InnovationMode,
    t: usize,
) -> Result<Vec<AgentState>> {
    let ctx = StepContext::new(scenario, graph, *schedule, mode)?;
    if states.len() != ctx.n_agents() {
        return Err(Error::invalid(format!(
            "{} states for {} agents",
            states.len(),
            ctx.n_agents()
        )));
    }
    Ok(ctx.step(states, t))
}

/// Largest `|λᵢ − λⱼ|` over graph edges (the stopping statistic).
pub fn max_neighbor_gap(states: &[AgentState], graph: &CommGraph) -> f64 {
    graph
        .edges()
        .map(|(i, j)| (states[i].lambda - states[j].lambda).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub schedule: TuningSchedule,
    #[serde(default)]
    pub mode: InnovationMode,
    /// Stopping threshold on the largest neighbor price gap.
    pub eps: f64,
    /// Maximum number of rounds.
    pub n_max: usize,
    /// A price beyond this multiple of the scenario's price scale counts as
    /// divergence.
    #[serde(default = "default_divergence_factor")]
    pub divergence_factor: f64,
}

fn default_divergence_factor() -> f64 {
    1e3
}

impl ConsensusConfig {
    pub fn new(schedule: TuningSchedule, eps: f64, n_max: usize) -> Self {
        Self {
            schedule,
            mode: InnovationMode::FixedPoint,
            eps,
            n_max,
            divergence_factor: default_divergence_factor(),
        }
    }

    pub fn with_mode(mut self, mode: InnovationMode) -> Self {
        self.mode = mode;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub max_neighbor_gap: f64,
    pub oracle_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    /// Final price per agent (community last).
    pub lambdas: Vec<f64>,
    /// Final dispatch per VPP.
    pub powers: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TracePoint>,
    /// Full per-round agent states, when requested.
    pub agent_trace: Option<Vec<Vec<AgentState>>>,
}

impl ConsensusResult {
    /// `max_i |λᵢ − λ*|`.
    pub fn price_gap(&self, lambda_star: f64) -> f64 {
        self.lambdas
            .iter()
            .map(|l| (l - lambda_star).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_lambda(&self) -> f64 {
        self.lambdas.iter().sum::<f64>() / self.lambdas.len() as f64
    }
}

/// Runs rounds until the largest neighbor price gap is at most `eps` or
/// `n_max` rounds have passed.
pub fn run(
    scenario: &Scenario,
    graph: &CommGraph,
    config: &ConsensusConfig,
    warm_lambda: Option<f64>,
    oracle: Option<&OptimalDispatch>,
) -> Result<ConsensusResult> {
    run_with(scenario, graph, config, warm_lambda, oracle, false, |ctx, prev, t| {
        ctx.step(prev, t)
    })
}

/// [`run`] with a caller-supplied round implementation (e.g. a parallel one)
/// and optional full state recording. `round` must compute every agent from
/// `prev` alone.
pub fn run_with<F>(
    scenario: &Scenario,
    graph: &CommGraph,
    config: &ConsensusConfig,
    warm_lambda: Option<f64>,
    oracle: Option<&OptimalDispatch>,
    record_agents: bool,
    mut round: F,
) -> Result<ConsensusResult>
where
    F: FnMut(&StepContext<'_>, &[AgentState], usize) -> Vec<AgentState>,
{
    if !(config.eps > 0.0) {
        return Err(Error::invalid("eps must be > 0"));
    }
    if config.n_max == 0 {
        return Err(Error::invalid("n_max must be >= 1"));
    }
    if scenario.direction() == FlowDirection::NoFlow {
        return Err(Error::NoFlow);
    }
    let ctx = StepContext::new(scenario, graph, config.schedule, config.mode)?;
    let mut states = init_state(scenario, warm_lambda)?;

    let price_scale = ctx
        .coeffs
        .iter()
        .map(|(c, p_max)| c.marginal(*p_max))
        .chain(states.iter().map(|s| s.lambda.abs()))
        .fold(1.0, f64::max);
    let ceiling = config.divergence_factor * price_scale;
    let lambda_star = oracle.map(|o| o.lambda_star);

    let mut trace = Vec::new();
    let mut agent_trace = record_agents.then(Vec::new);
    let mut converged = false;
    let mut iterations = 0;
    for t in 0..config.n_max {
        states = round(&ctx, &states, t);
        iterations = t + 1;
        let diverged = states.iter().any(|s| {
            !(s.lambda.is_finite() && s.power.is_finite() && s.imbalance.is_finite())
                || s.lambda.abs() > ceiling
        });
        if diverged {
            return Err(Error::Divergence { iteration: iterations });
        }
        let gap = max_neighbor_gap(&states, graph);
        let oracle_gap = lambda_star.map(|l| {
            states
                .iter()
                .map(|s| (s.lambda - l).abs())
                .fold(0.0, f64::max)
        });
        trace.push(TracePoint {
            iteration: iterations,
            max_neighbor_gap: gap,
            oracle_gap,
        });
        if let Some(rec) = agent_trace.as_mut() {
            rec.push(states.clone());
        }
        // Tracked imbalances can agree while prices drift together, so
        // FixedPoint also waits for the balance to close.
        let balanced = config.mode != InnovationMode::FixedPoint
            || states.iter().all(|s| s.imbalance.abs() <= config.eps);
        if gap <= config.eps && balanced {
            converged = true;
            break;
        }
    }

    Ok(ConsensusResult {
        lambdas: states.iter().map(|s| s.lambda).collect(),
        powers: states.iter().filter(|s| !s.is_community).map(|s| s.power).collect(),
        iterations,
        converged,
        trace,
        agent_trace,
    })
}

/// Outcome of a tuning sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOutcome {
    pub schedule: TuningSchedule,
    pub total_iterations: usize,
    /// Worst relative oracle gap over the tuning scenarios.
    pub worst_gap: f64,
}

/// Grid search over constant gains: keeps the pair for which every scenario
/// converges within `base.n_max` to `max_i|λᵢ − λ*| ≤ tol·max(1,|λ*|)`,
/// minimizing the total number of rounds. Scenarios without flow are skipped.
pub fn sweep_tuning(
    scenarios: &[Scenario],
    graph: &CommGraph,
    alphas: &[f64],
    betas: &[f64],
    base: &ConsensusConfig,
    tol: f64,
) -> Result<Option<SweepOutcome>> {
    let mut oracles = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        oracles.push(solve_centralized(s)?);
    }
    let mut best: Option<SweepOutcome> = None;
    for &alpha in alphas {
        'pair: for &beta in betas {
            let config = ConsensusConfig {
                schedule: TuningSchedule::constant(alpha, beta),
                ..*base
            };
            let mut total = 0;
            let mut worst: f64 = 0.0;
            for (s, o) in scenarios.iter().zip(&oracles) {
                let Some(o) = o else { continue };
                let r = match run(s, graph, &config, None, Some(o)) {
                    Ok(r) if r.converged => r,
                    _ => continue 'pair,
                };
                let rel = r.price_gap(o.lambda_star) / o.lambda_star.abs().max(1.0);
                if rel > tol {
                    continue 'pair;
                }
                worst = worst.max(rel);
                total += r.iterations;
                if best.is_some_and(|b| total >= b.total_iterations) {
                    continue 'pair;
                }
            }
            best = Some(SweepOutcome {
                schedule: config.schedule,
                total_iterations: total,
                worst_gap: worst,
            });
        }
    }
    Ok(best)
}
