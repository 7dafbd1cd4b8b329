//! The five commands: generate, train, solve, simulate, report.
//!
//! On-disk layout under the configured directories:
//!
//! ```text
//! data/<community>/buildings.csv
//! data/<community>/<building>/{demand,generation}.csv
//! data/<community>/weather.csv                       (optional)
//! models/<community>/<month>/flf/<target>.weights
//! models/<community>/<month>/lmf/<building>_<target>.weights
//! out/{report,summary}.csv, out/price_gaps_<community>_<month>.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use tec_core::analytic::solve_centralized;
use tec_core::data::calendar::MINUTES_PER_DAY;
use tec_core::data::{aggregate_community, gen_community, net_demand, split, Month, SplitSpec};
use tec_core::forecast::{train_local_only, ClientDataset, FedConfig, ModelWeights, TargetKind, TrainLogEntry};
use tec_core::harness::{
    compose_net, mae, rmse, rolling_forecast, run_day_with, total_price_difference, tune_for_day, DayConfig, DayReport,
    IntervalResult, MaeMode, PredictionMethod, SummaryRow,
};
use tec_core::model::{FlowDirection, Scenario, TimeSeries, INTERVALS_PER_DAY};
use tec_core::rng::derive_seed;

use crate::config::{CommunityConfig, Granularity, RunConfig, Tuning};
use crate::error::{CoreContext, Result, SimError};
use crate::io::{self, CellTuning, ReportRecord};
use crate::parallel;

const DATA_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const LMF_STREAM: u64 = 3;

/// Stable 64-bit key of a community name (FNV-1a), so seeds do not depend
/// on which communities a run selects.
fn name_key(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn target_code(t: TargetKind) -> u64 {
    match t {
        TargetKind::Demand => 0,
        TargetKind::Generation => 1,
        TargetKind::Net => 2,
    }
}

fn targets(g: Granularity) -> &'static [TargetKind] {
    match g {
        Granularity::PerBuilding => &[TargetKind::Demand, TargetKind::Generation],
        Granularity::DirectAggregate => &[TargetKind::Net],
    }
}

fn method_dir(method: PredictionMethod) -> &'static str {
    match method {
        PredictionMethod::Rnd => "rnd",
        PredictionMethod::Flf => "flf",
        PredictionMethod::Lmf => "lmf",
    }
}

pub fn model_dir(cfg: &RunConfig, community: &str, month: Month, method: PredictionMethod) -> PathBuf {
    cfg.paths
        .model_dir
        .join(community)
        .join(month.name())
        .join(method_dir(method))
}

fn global_model_path(cfg: &RunConfig, community: &str, month: Month, target: TargetKind) -> PathBuf {
    model_dir(cfg, community, month, PredictionMethod::Flf).join(format!("{target}.weights"))
}

fn local_model_path(cfg: &RunConfig, community: &str, month: Month, id: &str, target: TargetKind) -> PathBuf {
    model_dir(cfg, community, month, PredictionMethod::Lmf).join(format!("{id}_{target}.weights"))
}

/// Writes synthetic demand and generation for every building of every
/// configured community. Returns the files written.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let prov = cfg.provenance();
    let mut written = Vec::new();
    for c in &cfg.communities {
        let seed = derive_seed(cfg.seed, &[DATA_STREAM, name_key(&c.name)]);
        let buildings =
            gen_community(&c.name, c.buildings, seed, cfg.days).context(|| format!("generating community {}", c.name))?;
        let dir = cfg.paths.data_dir.join(&c.name);
        let index = dir.join("buildings.csv");
        io::write_building_index(&index, &buildings, Some(&prov))?;
        written.push(index);
        let files = buildings
            .par_iter()
            .map(|b| {
                let d = dir.join(&b.id).join("demand.csv");
                let g = dir.join(&b.id).join("generation.csv");
                io::write_series(&d, &b.demand, Some(&prov))?;
                io::write_series(&g, &b.generation, Some(&prov))?;
                Ok([d, g])
            })
            .collect::<Result<Vec<_>>>()?;
        written.extend(files.into_iter().flatten());
        info!("community {}: {} buildings, {} days", c.name, c.buildings, cfg.days);
    }
    Ok(written)
}

/// One community's series as read from disk.
#[derive(Debug, Clone)]
pub struct CommunityData {
    pub name: String,
    pub ids: Vec<String>,
    pub demand: Vec<TimeSeries>,
    pub generation: Vec<TimeSeries>,
    pub weather: Option<TimeSeries>,
}

pub fn load_community(cfg: &RunConfig, name: &str) -> Result<CommunityData> {
    let dir = cfg.paths.data_dir.join(name);
    let ids = io::load_building_ids(&dir.join("buildings.csv"))?;
    let series = ids
        .par_iter()
        .map(|id| {
            let d = io::load_series(&dir.join(id).join("demand.csv"))?;
            let g = io::load_series(&dir.join(id).join("generation.csv"))?;
            if !d.is_aligned_with(&g) {
                return Err(SimError::Core {
                    context: format!("building {id}"),
                    source: tec_core::Error::Misaligned,
                });
            }
            Ok((d, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let weather_path = dir.join("weather.csv");
    let weather = if weather_path.exists() {
        Some(io::load_series(&weather_path)?)
    } else {
        None
    };
    let (demand, generation): (Vec<_>, Vec<_>) = series.into_iter().unzip();
    if let Some(first) = demand.first() {
        if demand.iter().any(|s| !s.is_aligned_with(first)) {
            return Err(SimError::Core {
                context: format!("community {name}"),
                source: tec_core::Error::Misaligned,
            });
        }
    }
    Ok(CommunityData {
        name: name.to_string(),
        ids,
        demand,
        generation,
        weather,
    })
}

impl CommunityData {
    /// Building nets summed over the community.
    pub fn aggregate_net(&self) -> Result<TimeSeries> {
        let nets = self
            .demand
            .iter()
            .zip(&self.generation)
            .map(|(d, g)| net_demand(d, g))
            .collect::<tec_core::Result<Vec<_>>>()
            .context(|| format!("community {}", self.name))?;
        aggregate_community(&nets).context(|| format!("community {}", self.name))
    }

    /// `(client id, full series)` pairs for a target.
    fn series(&self, target: TargetKind) -> Result<Vec<(String, TimeSeries)>> {
        Ok(match target {
            TargetKind::Demand => self.ids.iter().cloned().zip(self.demand.iter().cloned()).collect(),
            TargetKind::Generation => self.ids.iter().cloned().zip(self.generation.iter().cloned()).collect(),
            TargetKind::Net => vec![("community".to_string(), self.aggregate_net()?)],
        })
    }

    /// Training clients for `target` under `spec`, with the full series each
    /// was cut from.
    fn clients(&self, target: TargetKind, spec: &SplitSpec, exogenous: bool) -> Result<Vec<(ClientDataset, TimeSeries)>> {
        let weather = match (exogenous, &self.weather) {
            (false, _) => None,
            (true, Some(w)) => Some(split(w, spec).context(|| format!("{} weather", self.name))?.0),
            (true, None) => {
                return Err(SimError::Config(format!(
                    "the learner uses an exogenous input but {}/weather.csv is missing",
                    self.name
                )))
            }
        };
        self.series(target)?
            .into_iter()
            .map(|(id, full)| {
                let what = || format!("community {}, building {id}, {target}", self.name);
                let (train, _) = split(&full, spec).context(what)?;
                let mut ds = ClientDataset::new(id.clone(), target, train);
                if let Some(w) = &weather {
                    ds = ds.with_exogenous(w.clone()).context(what)?;
                }
                Ok((ds, full))
            })
            .collect()
    }
}

/// Trains FLF (federated, one global model per target) or LMF (one local
/// model per building and target) for every community and test month.
pub fn cmd_train(cfg: &RunConfig, method: PredictionMethod) -> Result<Vec<PathBuf>> {
    if method == PredictionMethod::Rnd {
        return Err(SimError::Config("train needs --method flf or --method lmf".into()));
    }
    let prov = cfg.provenance();
    let mut written = Vec::new();
    for c in &cfg.communities {
        let data = load_community(cfg, &c.name)?;
        for &month in &cfg.experiment.months {
            let spec = SplitSpec {
                test_month: month,
                mode: c.split,
            };
            let dir = model_dir(cfg, &c.name, month, method);
            for &target in targets(cfg.experiment.granularity) {
                let clients = data.clients(target, &spec, cfg.learner.exogenous)?;
                let seed = derive_seed(
                    cfg.seed,
                    &[TRAIN_STREAM, name_key(&c.name), month.number() as u64, target_code(target)],
                );
                let what = || format!("community {}, {month}, {target}", c.name);
                let log = match method {
                    PredictionMethod::Flf => {
                        let init = transfer_init(cfg, c, month, target)?;
                        let datasets: Vec<ClientDataset> = clients.into_iter().map(|(d, _)| d).collect();
                        let fed = FedConfig::new(c.rounds, c.participants.min(datasets.len()), seed);
                        let run = parallel::run_federated(&datasets, &fed, &cfg.learner, init.as_ref()).context(what)?;
                        let path = global_model_path(cfg, &c.name, month, target);
                        io::write_weights(&path, &run.global, Some(&prov))?;
                        written.push(path);
                        run.log
                    }
                    _ => {
                        let trained = clients
                            .par_iter()
                            .enumerate()
                            .map(|(i, (ds, _))| {
                                let (w, loss) = train_local_only(ds, &cfg.learner, derive_seed(seed, &[LMF_STREAM, i as u64]))
                                    .context(|| format!("{}, building {}", what(), ds.building))?;
                                let path = local_model_path(cfg, &c.name, month, &ds.building, target);
                                io::write_weights(&path, &w, Some(&prov))?;
                                Ok((
                                    path,
                                    TrainLogEntry {
                                        round: 0,
                                        building: ds.building.clone(),
                                        target,
                                        val_loss: loss,
                                    },
                                ))
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let (paths, log): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
                        written.extend(paths);
                        log
                    }
                };
                let log_path = dir.join(format!("train_log_{target}.csv"));
                io::write_train_log(&log_path, &log, Some(&prov))?;
                written.push(log_path);
                info!("trained {method} for community {}, {month}, {target}", c.name);
            }
        }
    }
    Ok(written)
}

fn transfer_init(cfg: &RunConfig, c: &CommunityConfig, month: Month, target: TargetKind) -> Result<Option<ModelWeights>> {
    let Some(src) = &c.transfer_from else { return Ok(None) };
    let path = global_model_path(cfg, src, month, target);
    if !path.exists() {
        return Err(SimError::MissingModel {
            path,
            hint: format!("community {} transfers from {src}; train flf for {src} first", c.name),
        });
    }
    io::load_weights(&path).map(Some)
}

fn required_models(cfg: &RunConfig, c: &CommunityConfig, ids: &[String], month: Month, method: PredictionMethod) -> Vec<PathBuf> {
    let ts = targets(cfg.experiment.granularity);
    match method {
        PredictionMethod::Rnd => Vec::new(),
        PredictionMethod::Flf => ts.iter().map(|&t| global_model_path(cfg, &c.name, month, t)).collect(),
        PredictionMethod::Lmf => ts
            .iter()
            .flat_map(|&t| match t {
                TargetKind::Net => vec![local_model_path(cfg, &c.name, month, "community", t)],
                _ => ids.iter().map(|id| local_model_path(cfg, &c.name, month, id, t)).collect(),
            })
            .collect(),
    }
}

/// Community net demand forecast for the 96 intervals from `day_start`.
fn method_forecast(
    cfg: &RunConfig,
    c: &CommunityConfig,
    data: &CommunityData,
    month: Month,
    method: PredictionMethod,
    day_start: i64,
) -> Result<Vec<f64>> {
    let spec = SplitSpec {
        test_month: month,
        mode: c.split,
    };
    let mut per_target = Vec::new();
    for &target in targets(cfg.experiment.granularity) {
        let clients = data.clients(target, &spec, cfg.learner.exogenous)?;
        let global = match method {
            PredictionMethod::Flf => Some(io::load_weights(&global_model_path(cfg, &c.name, month, target))?),
            _ => None,
        };
        let forecasts = clients
            .par_iter()
            .map(|(ds, full)| {
                let local;
                let w = match &global {
                    Some(g) => g,
                    None => {
                        local = io::load_weights(&local_model_path(cfg, &c.name, month, &ds.building, target))?;
                        &local
                    }
                };
                let exo = ds.exogenous.as_ref().and(data.weather.as_ref());
                rolling_forecast(&cfg.learner, w, ds, full, exo, day_start, INTERVALS_PER_DAY)
                    .context(|| format!("{method} forecast, community {}, building {}, {target}", c.name, ds.building))
            })
            .collect::<Result<Vec<_>>>()?;
        per_target.push(forecasts);
    }
    match cfg.experiment.granularity {
        Granularity::PerBuilding => compose_net(&per_target[0], &per_target[1]).context(|| "composing net demand".into()),
        Granularity::DirectAggregate => Ok(per_target.remove(0).remove(0)),
    }
}

/// Gains for a day: fixed from the config, or swept on its true demand.
fn day_gains(cfg: &RunConfig, day: &DayConfig, truth: &[f64], what: &str) -> Result<CellTuning> {
    match &cfg.consensus.tuning {
        Tuning::Fixed { alpha0, beta0 } => Ok(CellTuning {
            alpha0: *alpha0,
            beta0: *beta0,
        }),
        Tuning::Sweep {
            alphas,
            betas,
            stride,
            tol,
        } => {
            let best = tune_for_day(truth, day, alphas, betas, *stride, *tol).context(|| format!("tuning {what}"))?;
            let best = best.ok_or_else(|| {
                SimError::Config(format!("{what}: no gain pair in the sweep grid reaches the tolerance"))
            })?;
            Ok(CellTuning {
                alpha0: best.schedule.alpha0,
                beta0: best.schedule.beta0,
            })
        }
    }
}

struct Cell {
    community: String,
    month: Month,
    day: DayConfig,
    tuning: CellTuning,
    truth: Vec<f64>,
    forecasts: BTreeMap<PredictionMethod, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub summary: Vec<(SummaryRow, CellTuning)>,
    pub records: Vec<ReportRecord>,
    pub files: Vec<PathBuf>,
}

/// Simulates the last day of every configured month for every community
/// and method, then writes `report.csv`, `summary.csv` and one price-gap
/// file per cell.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateOutput> {
    let methods = &cfg.experiment.methods;
    if methods.is_empty() {
        return Err(SimError::Config("no methods selected".into()));
    }
    let mut datasets = Vec::new();
    for c in &cfg.communities {
        let data = load_community(cfg, &c.name)?;
        for &month in &cfg.experiment.months {
            for &m in methods {
                if let Some(path) = required_models(cfg, c, &data.ids, month, m).into_iter().find(|p| !p.exists()) {
                    return Err(SimError::MissingModel {
                        path,
                        hint: format!("run `tec train --method {}` first", method_dir(m)),
                    });
                }
            }
        }
        datasets.push(data);
    }

    let mut cells = Vec::new();
    for (c, data) in cfg.communities.iter().zip(&datasets) {
        let net = data.aggregate_net()?;
        let schedule = c.schedule()?;
        let graph = c.graph(&cfg.paths.data_dir)?;
        for &month in &cfg.experiment.months {
            let what = format!("community {}, {month}", c.name);
            let day_start = month.end_minute() - MINUTES_PER_DAY;
            let truth = net
                .between(day_start, month.end_minute())
                .context(|| format!("{what}: test day"))?
                .into_values();
            let mut day = DayConfig {
                vpps: schedule.clone(),
                graph: graph.clone(),
                consensus: cfg.consensus.with_gains(1.0, 1.0),
            };
            let tuning = day_gains(cfg, &day, &truth, &what)?;
            day.consensus = cfg.consensus.with_gains(tuning.alpha0, tuning.beta0);
            let mut forecasts = BTreeMap::new();
            for &m in methods.iter().filter(|&&m| m != PredictionMethod::Rnd) {
                forecasts.insert(m, method_forecast(cfg, c, data, month, m, day_start)?);
            }
            info!("{what}: gains alpha0={} beta0={}", tuning.alpha0, tuning.beta0);
            cells.push(Cell {
                community: c.name.clone(),
                month,
                day,
                tuning,
                truth,
                forecasts,
            });
        }
    }

    let jobs: Vec<(&Cell, PredictionMethod)> = cells.iter().flat_map(|c| methods.iter().map(move |&m| (c, m))).collect();
    let reports = jobs
        .par_iter()
        .map(|&(cell, m)| {
            let used = cell.forecasts.get(&m).unwrap_or(&cell.truth);
            run_day_with(m, &cell.truth, used, &cell.day, |s, warm| {
                parallel::run_consensus(s, &cell.day.graph, &cell.day.consensus, warm, None, false)
            })
            .context(|| format!("community {}, {}, {m}", cell.community, cell.month))
        })
        .collect::<Vec<Result<DayReport>>>();

    let mut summary = Vec::new();
    let mut records = Vec::new();
    for ((cell, _), report) in jobs.iter().zip(reports) {
        let report = report?;
        summary.push((SummaryRow::from_report(&cell.community, cell.month, &report), cell.tuning));
        records.extend(report.rows.into_iter().map(|row| ReportRecord {
            community: cell.community.clone(),
            month: cell.month,
            row,
        }));
    }
    let files = write_outputs(cfg, &summary, &records)?;
    Ok(SimulateOutput { summary, records, files })
}

fn write_outputs(cfg: &RunConfig, summary: &[(SummaryRow, CellTuning)], records: &[ReportRecord]) -> Result<Vec<PathBuf>> {
    let prov = cfg.provenance();
    let out = &cfg.paths.out_dir;
    let report = out.join("report.csv");
    let summary_path = out.join("summary.csv");
    io::write_report(&report, records, Some(&prov))?;
    io::write_summary(&summary_path, summary, Some(&prov))?;
    let mut files = vec![report, summary_path];
    files.extend(write_price_gaps(out, records, &prov)?);
    Ok(files)
}

fn write_price_gaps(out: &Path, records: &[ReportRecord], prov: &io::Provenance) -> Result<Vec<PathBuf>> {
    let mut cells: Vec<((&str, Month), Vec<&IntervalResult>)> = Vec::new();
    for r in records {
        let key = (r.community.as_str(), r.month);
        match cells.iter_mut().find(|(k, _)| *k == key) {
            Some((_, rows)) => rows.push(&r.row),
            None => cells.push((key, vec![&r.row])),
        }
    }
    cells
        .into_iter()
        .map(|((c, m), rows)| {
            let path = out.join(format!("price_gaps_{c}_{}.csv", m.name()));
            io::write_price_gaps(&path, &rows, Some(prov))?;
            Ok(path)
        })
        .collect()
}

/// Rebuilds the summary grid and price-gap files from `report.csv` and
/// returns the grid as text.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let path = cfg.paths.out_dir.join("report.csv");
    let records = io::load_report(&path)?;
    let mut groups: Vec<((String, Month, PredictionMethod), Vec<IntervalResult>)> = Vec::new();
    for r in &records {
        let key = (r.community.clone(), r.month, r.row.method);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, rows)) => rows.push(r.row.clone()),
            None => groups.push((key, vec![r.row.clone()])),
        }
    }
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:<10} {:<10} {:<6} {:>24} {:>12} {:>12}",
        "community", "month", "method", "total_price_difference", "rmse_kw", "mae_kw"
    );
    for ((community, month, method), rows) in &groups {
        let what = || format!("{path:?}: community {community}, {month}, {method}");
        let total = total_price_difference(rows).context(what)?;
        let y: Vec<f64> = rows.iter().map(|r| r.p_community_true).collect();
        let yhat: Vec<f64> = rows.iter().map(|r| r.p_community_used).collect();
        let e_rmse = rmse(&y, &yhat).context(what)?;
        let e_mae = mae(&y, &yhat, MaeMode::Standard).context(what)?;
        let _ = writeln!(
            text,
            "{community:<10} {:<10} {:<6} {total:>24.6} {e_rmse:>12.4} {e_mae:>12.4}",
            month.name(),
            method.as_str()
        );
    }
    write_price_gaps(&cfg.paths.out_dir, &records, &cfg.provenance())?;
    Ok(text)
}

/// Solves one interval analytically and with the distributed solver and
/// returns a side-by-side listing. With `trace`, writes every round's agent
/// states there.
pub fn cmd_solve(cfg: &RunConfig, community: &str, demand: f64, trace: Option<&Path>) -> Result<String> {
    let c = cfg.community(community)?;
    let schedule = c.schedule()?;
    let vpps = schedule.at(0).to_vec();
    let ids: Vec<String> = vpps.iter().map(|v| v.id.clone()).collect();
    let scenario = Scenario::new(vpps, demand, 0).context(|| format!("community {community}, demand {demand} kW"))?;
    let mut text = String::new();
    if scenario.direction() == FlowDirection::NoFlow {
        let _ = writeln!(text, "NoFlow: community net demand is 0 kW, nothing to dispatch");
        return Ok(text);
    }
    let oracle = solve_centralized(&scenario)
        .context(|| "analytical solve".into())?
        .expect("flow direction checked above");
    let graph = c.graph(&cfg.paths.data_dir)?;
    let day = DayConfig {
        vpps: schedule,
        graph: graph.clone(),
        consensus: cfg.consensus.with_gains(1.0, 1.0),
    };
    let gains = match &cfg.consensus.tuning {
        Tuning::Fixed { alpha0, beta0 } => CellTuning {
            alpha0: *alpha0,
            beta0: *beta0,
        },
        Tuning::Sweep { alphas, betas, tol, .. } => {
            let best = tec_core::consensus::sweep_tuning(
                std::slice::from_ref(&scenario),
                &graph,
                alphas,
                betas,
                &day.consensus,
                *tol,
            )
            .context(|| "tuning".into())?
            .ok_or_else(|| SimError::Config("no gain pair in the sweep grid reaches the tolerance".into()))?;
            CellTuning {
                alpha0: best.schedule.alpha0,
                beta0: best.schedule.beta0,
            }
        }
    };
    let consensus_cfg = cfg.consensus.with_gains(gains.alpha0, gains.beta0);
    let res = parallel::run_consensus(&scenario, &graph, &consensus_cfg, None, Some(&oracle), trace.is_some())
        .context(|| format!("consensus, demand {demand} kW"))?;
    if let Some(path) = trace {
        io::write_trace(path, &res, &graph, &ids, Some(oracle.lambda_star), Some(&cfg.provenance()))?;
    }

    let _ = writeln!(text, "community {community}, p_community = {demand} kW ({:?})", scenario.direction());
    let _ = writeln!(
        text,
        "gains alpha0 = {}, beta0 = {}; {} rounds, converged = {}",
        gains.alpha0, gains.beta0, res.iterations, res.converged
    );
    let _ = writeln!(text, "{:<12} {:>14} {:>14} {:>14} {:>10}", "agent", "lambda", "lambda*", "P_kw", "P*_kw");
    for (i, id) in ids.iter().enumerate() {
        let bound = match oracle.active_set.bound_of(i) {
            tec_core::analytic::Bound::Free => "",
            tec_core::analytic::Bound::Upper => " (upper)",
            tec_core::analytic::Bound::Lower => " (lower)",
        };
        let _ = writeln!(
            text,
            "{id:<12} {:>14.6} {:>14.6} {:>14.6} {:>10.4}{bound}",
            res.lambdas[i], oracle.lambda_star, res.powers[i], oracle.p_star[i]
        );
    }
    let _ = writeln!(
        text,
        "{:<12} {:>14.6} {:>14.6}",
        "community",
        res.lambdas[graph.community()],
        oracle.lambda_star
    );
    let _ = writeln!(
        text,
        "lambda* = {}, objective = {:.6}, max price gap = {:.3e}",
        oracle.lambda_star,
        oracle.objective,
        res.price_gap(oracle.lambda_star)
    );
    Ok(text)
}
