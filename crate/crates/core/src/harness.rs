//! Day simulation: per interval, feed the true or forecast community net
//! demand to the distributed solver and score its prices against the
//! analytical optimum of the true demand.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analytic::solve_centralized;
use crate::consensus::{self, sweep_tuning, CommGraph, ConsensusConfig, ConsensusResult, SweepOutcome};
use crate::data::Month;
use crate::error::{Error, Result};
use crate::forecast::{forecast_next, ClientDataset, LearnerConfig, ModelWeights};
use crate::math::sqrt;
use crate::model::{direction_of, FlowDirection, Scenario, TimeSeries, VppSpec, INTERVALS_PER_DAY, STEP_MINUTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PredictionMethod {
    /// Real net demand.
    #[serde(rename = "RND")]
    Rnd,
    /// Federated-learning forecast.
    #[serde(rename = "FLF")]
    Flf,
    /// Local-model forecast.
    #[serde(rename = "LMF")]
    Lmf,
}

impl PredictionMethod {
    pub const ALL: [PredictionMethod; 3] = [PredictionMethod::Rnd, PredictionMethod::Flf, PredictionMethod::Lmf];

    pub fn as_str(self) -> &'static str {
        match self {
            PredictionMethod::Rnd => "RND",
            PredictionMethod::Flf => "FLF",
            PredictionMethod::Lmf => "LMF",
        }
    }
}

impl fmt::Display for PredictionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PredictionMethod::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?} (expected rnd, flf or lmf)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaeMode {
    /// Mean of absolute errors.
    #[default]
    Standard,
    /// Absolute value of the mean signed error.
    PaperLiteral,
}

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != yhat.len() {
        return Err(Error::invalid(format!(
            "metric needs equal nonzero lengths, got {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    Ok(())
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let sq: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sqrt(sq / y.len() as f64))
}

pub fn mae(y: &[f64], yhat: &[f64], mode: MaeMode) -> Result<f64> {
    check_pair(y, yhat)?;
    let n = y.len() as f64;
    Ok(match mode {
        MaeMode::Standard => y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
        MaeMode::PaperLiteral => y.iter().zip(yhat).map(|(a, b)| a - b).sum::<f64>().abs() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalResult {
    pub interval: usize,
    pub method: PredictionMethod,
    pub p_community_true: f64,
    pub p_community_used: f64,
    /// Converged price per agent, community last. Empty without flow.
    pub lambda_conv: Vec<f64>,
    /// Optimal price for the true demand; `None` when no power flows.
    pub lambda_star: Option<f64>,
    /// `max_i |λᵢ − λ*|`, zero without flow.
    pub price_gap: f64,
    /// Distributed dispatch per VPP, kW. Empty when the solver did not run.
    pub dispatch: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Cost of `dispatch` under the coefficients of the demand it served.
    pub objective: f64,
}

/// Sum over the day of the per-interval price gaps. Requires one row for
/// each of the 96 intervals.
pub fn total_price_difference(rows: &[IntervalResult]) -> Result<f64> {
    let mut seen = [false; INTERVALS_PER_DAY];
    for r in rows {
        if r.interval >= INTERVALS_PER_DAY || core::mem::replace(&mut seen[r.interval], true) {
            return Err(Error::invalid(format!("unexpected or repeated interval {}", r.interval)));
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::MissingInterval(missing));
    }
    let mut ordered: Vec<&IntervalResult> = rows.iter().collect();
    ordered.sort_by_key(|r| r.interval);
    Ok(ordered.iter().map(|r| r.price_gap).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayReport {
    pub method: PredictionMethod,
    pub rows: Vec<IntervalResult>,
    pub total_price_difference: f64,
    /// Community net-demand forecast error, kW.
    pub rmse: f64,
    pub mae: f64,
}

/// VPP cost data over the day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VppSchedule {
    Constant(Vec<VppSpec>),
    /// One VPP list per interval, same VPPs in the same order throughout.
    PerInterval(Vec<Vec<VppSpec>>),
}

impl VppSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            VppSchedule::Constant(v) => {
                if v.is_empty() {
                    return Err(Error::invalid("no VPPs"));
                }
                v.iter().try_for_each(VppSpec::validate)
            }
            VppSchedule::PerInterval(days) => {
                if days.len() != INTERVALS_PER_DAY {
                    return Err(Error::invalid(format!(
                        "coefficient schedule has {} intervals, expected {INTERVALS_PER_DAY}",
                        days.len()
                    )));
                }
                let ids: Vec<&str> = days[0].iter().map(|v| v.id.as_str()).collect();
                for set in days {
                    if set.is_empty() || set.iter().map(|v| v.id.as_str()).ne(ids.iter().copied()) {
                        return Err(Error::invalid("every interval must list the same VPPs in order"));
                    }
                    set.iter().try_for_each(VppSpec::validate)?;
                }
                Ok(())
            }
        }
    }

    pub fn at(&self, interval: usize) -> &[VppSpec] {
        match self {
            VppSchedule::Constant(v) => v,
            VppSchedule::PerInterval(days) => &days[interval],
        }
    }

    pub fn n_vpps(&self) -> usize {
        self.at(0).len()
    }
}

/// Everything a day simulation shares across methods.
#[derive(Debug, Clone, PartialEq)]
pub struct DayConfig {
    pub vpps: VppSchedule,
    pub graph: CommGraph,
    pub consensus: ConsensusConfig,
}

impl DayConfig {
    pub fn validate(&self) -> Result<()> {
        self.vpps.validate()?;
        if self.graph.n_vpps() != self.vpps.n_vpps() {
            return Err(Error::InvalidTopology(format!(
                "graph has {} VPPs, schedule has {}",
                self.graph.n_vpps(),
                self.vpps.n_vpps()
            )));
        }
        Ok(())
    }

    /// Limits a demand estimate to what the VPPs can serve in its direction;
    /// the true demand is never clipped.
    fn clip_to_capacity(&self, interval: usize, p: f64) -> f64 {
        let vpps = self.vpps.at(interval);
        let import: f64 = vpps.iter().map(|v| v.p_max_g2c).sum();
        let export: f64 = vpps.iter().map(|v| v.p_max_c2g).sum();
        p.clamp(-export, import)
    }
}

/// Simulates one day with the serial consensus solver.
pub fn run_day(method: PredictionMethod, truth: &[f64], used: &[f64], day: &DayConfig) -> Result<DayReport> {
    run_day_with(method, truth, used, day, |scenario, warm| {
        consensus::run(scenario, &day.graph, &day.consensus, warm, None)
    })
}

/// Simulates one day. `truth` and `used` hold the 96 true and method-supplied
/// community net demands; `solve` runs the distributed solver on a scenario
/// from a warm-start price.
///
/// Each interval starts from the previous interval's mean converged price.
/// Intervals where the true demand is zero score a gap of 0 and keep the
/// warm start. When only the estimate is zero the agents hold their
/// previous prices.
pub fn run_day_with<F>(
    method: PredictionMethod,
    truth: &[f64],
    used: &[f64],
    day: &DayConfig,
    mut solve: F,
) -> Result<DayReport>
where
    F: FnMut(&Scenario, Option<f64>) -> Result<ConsensusResult>,
{
    day.validate()?;
    for (name, s) in [("true", truth), ("used", used)] {
        if s.len() != INTERVALS_PER_DAY {
            return Err(Error::invalid(format!(
                "{name} net demand has {} intervals, expected {INTERVALS_PER_DAY}",
                s.len()
            )));
        }
    }
    let n_agents = day.graph.n_agents();
    let mut warm: Option<f64> = None;
    let mut rows = Vec::with_capacity(INTERVALS_PER_DAY);
    for tau in 0..INTERVALS_PER_DAY {
        let wrap = |e: Error| Error::Interval {
            interval: tau,
            source: Box::new(e),
        };
        let vpps = day.vpps.at(tau).to_vec();
        let truth_s = Scenario::new(vpps.clone(), truth[tau], tau).map_err(wrap)?;
        let oracle = solve_centralized(&truth_s).map_err(wrap)?;
        let p_used = day.clip_to_capacity(tau, used[tau]);
        let mut row = IntervalResult {
            interval: tau,
            method,
            p_community_true: truth[tau],
            p_community_used: p_used,
            lambda_conv: Vec::new(),
            lambda_star: oracle.as_ref().map(|o| o.lambda_star),
            price_gap: 0.0,
            dispatch: Vec::new(),
            iterations: 0,
            converged: true,
            objective: 0.0,
        };
        if let Some(o) = &oracle {
            if direction_of(p_used).map_err(wrap)? == FlowDirection::NoFlow {
                row.lambda_conv = vec![warm.unwrap_or(0.0); n_agents];
            } else {
                let used_s = Scenario::new(vpps, p_used, tau).map_err(wrap)?;
                let res = solve(&used_s, warm).map_err(wrap)?;
                let coeffs = used_s.active_coeffs().map_err(wrap)?;
                row.objective = coeffs.iter().zip(&res.powers).map(|((c, _), &p)| c.cost(p)).sum();
                row.dispatch = res.powers;
                row.iterations = res.iterations;
                row.converged = res.converged;
                row.lambda_conv = res.lambdas;
                warm = Some(row.lambda_conv.iter().sum::<f64>() / n_agents as f64);
            }
            row.price_gap = row
                .lambda_conv
                .iter()
                .map(|l| (l - o.lambda_star).abs())
                .fold(0.0, f64::max);
        }
        rows.push(row);
    }
    let used_clipped: Vec<f64> = rows.iter().map(|r| r.p_community_used).collect();
    Ok(DayReport {
        method,
        total_price_difference: total_price_difference(&rows)?,
        rmse: rmse(truth, &used_clipped)?,
        mae: mae(truth, &used_clipped, MaeMode::Standard)?,
        rows,
    })
}

/// Picks constant gains for a day from its true demand, sampling every
/// `stride`-th interval (the tuning is then shared by all methods).
pub fn tune_for_day(
    truth: &[f64],
    day: &DayConfig,
    alphas: &[f64],
    betas: &[f64],
    stride: usize,
    tol: f64,
) -> Result<Option<SweepOutcome>> {
    day.validate()?;
    let scenarios = truth
        .iter()
        .enumerate()
        .step_by(stride.max(1))
        .map(|(tau, &p)| Scenario::new(day.vpps.at(tau).to_vec(), p, tau))
        .collect::<Result<Vec<_>>>()?;
    sweep_tuning(&scenarios, &day.graph, alphas, betas, &day.consensus, tol)
}

/// One-step-ahead forecasts for `count` consecutive intervals starting at
/// `from_minute`, each from the true observations before it.
pub fn rolling_forecast(
    cfg: &LearnerConfig,
    weights: &ModelWeights,
    client: &ClientDataset,
    history: &TimeSeries,
    exogenous: Option<&TimeSeries>,
    from_minute: i64,
    count: usize,
) -> Result<Vec<f64>> {
    let start = history
        .index_of(from_minute)
        .ok_or_else(|| Error::SpanTooShort(format!("history does not contain minute {from_minute}")))?;
    if start < cfg.past_obs {
        return Err(Error::DataTooShort {
            needed: cfg.past_obs,
            got: start,
        });
    }
    if let Some(exo) = exogenous {
        if !exo.is_aligned_with(history) {
            return Err(Error::Misaligned);
        }
    }
    (0..count)
        .map(|k| {
            let end = start + k;
            let past = &history.values()[end - cfg.past_obs..end];
            let exo = exogenous.map(|e| &e.values()[end - cfg.past_obs..end]);
            Ok(forecast_next(cfg, weights, client, past, exo)?[0])
        })
        .collect()
}

/// Community net demand from per-building demand and generation forecasts;
/// negative predictions are floored at zero first.
pub fn compose_net(demand: &[Vec<f64>], generation: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = demand.first().map_or(0, Vec::len);
    if demand.len() != generation.len()
        || demand.iter().chain(generation).any(|s| s.len() != len)
    {
        return Err(Error::Misaligned);
    }
    Ok((0..len)
        .map(|t| {
            demand
                .iter()
                .zip(generation)
                .map(|(d, g)| d[t].max(0.0) - g[t].max(0.0))
                .sum()
        })
        .collect())
}

/// Minute at which the day containing `interval_minute` starts.
pub fn day_start(minute: i64) -> i64 {
    minute - minute.rem_euclid(INTERVALS_PER_DAY as i64 * STEP_MINUTES)
}

/// One cell of the comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub community: String,
    pub month: Month,
    pub method: PredictionMethod,
    pub total_price_difference: f64,
    pub rmse: f64,
    pub mae: f64,
    pub iterations: usize,
    pub unconverged_intervals: usize,
}

impl SummaryRow {
    pub fn from_report(community: impl Into<String>, month: Month, report: &DayReport) -> Self {
        Self {
            community: community.into(),
            month,
            method: report.method,
            total_price_difference: report.total_price_difference,
            rmse: report.rmse,
            mae: report.mae,
            iterations: report.rows.iter().map(|r| r.iterations).sum(),
            unconverged_intervals: report.rows.iter().filter(|r| !r.converged).count(),
        }
    }
}

/// Inputs of one (community, month) cell.
#[derive(Debug, Clone)]
pub struct CellInput<'a> {
    pub community: &'a str,
    pub month: Month,
    pub day: &'a DayConfig,
    pub truth: &'a [f64],
    /// Net demand used by each method; RND's entry is ignored.
    pub forecasts: &'a [(PredictionMethod, Vec<f64>)],
}

/// Runs every requested method of every cell and returns one summary row
/// per (cell, method), in input order, plus the reports.
pub fn compare_methods(cells: &[CellInput<'_>], methods: &[PredictionMethod]) -> Result<Vec<(SummaryRow, DayReport)>> {
    let mut out = Vec::with_capacity(cells.len() * methods.len());
    for cell in cells {
        for &m in methods {
            let used = match m {
                PredictionMethod::Rnd => cell.truth,
                _ => cell
                    .forecasts
                    .iter()
                    .find(|(fm, _)| *fm == m)
                    .map(|(_, f)| f.as_slice())
                    .ok_or_else(|| Error::invalid(format!("no {m} forecast for {} {}", cell.community, cell.month)))?,
            };
            let report = run_day(m, cell.truth, used, cell.day)?;
            out.push((SummaryRow::from_report(cell.community, cell.month, &report), report));
        }
    }
    Ok(out)
}
