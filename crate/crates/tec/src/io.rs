//! CSV and text formats: time series, model weights, edge lists, consensus
//! traces, day reports and training logs.
//!
//! Every writer can prefix a `# config_hash=… seed=…` comment line; readers
//! skip lines starting with `#`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate, NaiveDateTime};
use tec_core::consensus::{AgentState, CommGraph, ConsensusResult};
use tec_core::data::{BuildingData, Month};
use tec_core::forecast::{ModelWeights, TrainLogEntry};
use tec_core::harness::{IntervalResult, PredictionMethod, SummaryRow};
use tec_core::model::{TimeSeries, STEP_MINUTES};

use crate::error::{Result, SimError};

/// Minute 0 of the simulation calendar.
pub const BASE_YEAR: i32 = 2019;
const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Config hash and seed stamped on every output file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    fn line(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

fn base() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(BASE_YEAR, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid base date")
}

pub fn format_timestamp(minute: i64) -> String {
    (base() + Duration::minutes(minute)).format(TS_FORMAT).to_string()
}

pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|dt| (dt - base()).num_minutes())
}

fn create(path: &Path, prov: Option<&Provenance>) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| SimError::io(path, e))?;
    let mut w = BufWriter::new(file);
    if let Some(p) = prov {
        w.write_all(p.line().as_bytes()).map_err(|e| SimError::io(path, e))?;
    }
    Ok(w)
}

/// CSV writer over a freshly created file.
struct Table {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl Table {
    fn create(path: &Path, prov: Option<&Provenance>, header: &[&str]) -> Result<Self> {
        let inner = csv::Writer::from_writer(create(path, prov)?);
        let mut t = Self {
            path: path.to_path_buf(),
            inner,
        };
        t.row(header)?;
        Ok(t)
    }

    fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner.write_record(fields).map_err(|e| self.csv_err(e))
    }

    fn csv_err(&self, e: csv::Error) -> SimError {
        SimError::io(&self.path, std::io::Error::other(e))
    }

    fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| SimError::io(&self.path, e))
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| SimError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> SimError {
    SimError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn expect_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let headers = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?;
    if headers.iter().ne(expected.iter().copied()) {
        return Err(parse_err(
            path,
            1,
            format!("expected header {:?}, found {:?}", expected.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    Ok(())
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse()
        .map_err(|_| parse_err(path, line_of(rec), format!("bad {name} {raw:?}")))
}

/// Writes `timestamp,kw` rows; floats use the shortest exact representation.
pub fn write_series(path: &Path, series: &TimeSeries, prov: Option<&Provenance>) -> Result<()> {
    let mut t = Table::create(path, prov, &["timestamp", "kw"])?;
    for (minute, v) in series.points() {
        t.row([format_timestamp(minute), v.to_string()])?;
    }
    t.finish()
}

pub fn load_series(path: &Path) -> Result<TimeSeries> {
    let mut rdr = reader(path)?;
    expect_header(path, &mut rdr, &["timestamp", "kw"])?;
    let mut start = None;
    let mut prev: Option<i64> = None;
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = line_of(&rec);
        if rec.len() != 2 {
            return Err(parse_err(path, line, format!("expected 2 fields, found {}", rec.len())));
        }
        let minute = parse_timestamp(&rec[0]).ok_or_else(|| parse_err(path, line, format!("bad timestamp {:?}", &rec[0])))?;
        let v: f64 = field(path, &rec, 1, "kw")?;
        if !v.is_finite() {
            return Err(parse_err(path, line, "non-finite value"));
        }
        if let Some(p) = prev {
            if minute <= p {
                return Err(parse_err(path, line, "timestamps are not increasing"));
            }
            if minute - p != STEP_MINUTES {
                return Err(parse_err(path, line, format!("expected a {STEP_MINUTES}-minute step, found {}", minute - p)));
            }
        }
        start.get_or_insert(minute);
        prev = Some(minute);
        values.push(v);
    }
    let start = start.ok_or_else(|| parse_err(path, 1, "no data rows"))?;
    Ok(TimeSeries::new(start, values))
}

/// Text weights file: `arch_tag=`, `params=` lines, then one value per line.
pub fn write_weights(path: &Path, w: &ModelWeights, prov: Option<&Provenance>) -> Result<()> {
    let mut out = create(path, prov)?;
    let mut body = format!("arch_tag={}\nparams={}\n", w.arch_tag, w.params.len());
    for p in &w.params {
        body.push_str(&p.to_string());
        body.push('\n');
    }
    out.write_all(body.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| SimError::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let text = fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i as u64 + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut header = |key: &str| -> Result<(u64, String)> {
        match lines.next() {
            Some((n, l)) => l
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(|v| (n, v.to_string()))
                .ok_or_else(|| parse_err(path, n, format!("expected {key}=…"))),
            None => Err(parse_err(path, 0, format!("missing {key} header"))),
        }
    };
    let (_, tag) = header("arch_tag")?;
    let (n, count) = header("params")?;
    let count: usize = count.parse().map_err(|_| parse_err(path, n, "bad parameter count"))?;
    let params = lines
        .map(|(n, l)| l.parse::<f64>().map_err(|_| parse_err(path, n, format!("bad parameter {l:?}"))))
        .collect::<Result<Vec<f64>>>()?;
    if params.len() != count {
        return Err(parse_err(path, n, format!("header says {count} params, file has {}", params.len())));
    }
    ModelWeights::new(tag, params).map_err(|e| parse_err(path, n, e.to_string()))
}

/// Edge list with one `id,id` pair per line. Ids are VPP indices
/// `0..n_vpps`; the community manager is `community` (or `n_vpps`).
pub fn load_edge_list(path: &Path, n_vpps: usize) -> Result<Vec<(usize, usize)>> {
    let file = File::open(path).map_err(|e| SimError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .has_headers(false)
        .from_reader(file);
    let agent = |s: &str, line: u64| -> Result<usize> {
        if s.eq_ignore_ascii_case("community") {
            return Ok(n_vpps);
        }
        s.parse().map_err(|_| parse_err(path, line, format!("bad agent id {s:?}")))
    };
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = line_of(&rec);
        if rec.len() != 2 {
            return Err(parse_err(path, line, "expected `id,id`"));
        }
        edges.push((agent(&rec[0], line)?, agent(&rec[1], line)?));
    }
    Ok(edges)
}

fn agent_label(graph: &CommGraph, vpp_ids: &[String], i: usize) -> String {
    if i == graph.community() {
        "community".to_string()
    } else {
        vpp_ids[i].clone()
    }
}

/// Per-round agent states as `iteration,agent_id,lambda,power,neighbor_gap,oracle_gap`.
/// Requires a result recorded with agent states.
pub fn write_trace(
    path: &Path,
    result: &ConsensusResult,
    graph: &CommGraph,
    vpp_ids: &[String],
    lambda_star: Option<f64>,
    prov: Option<&Provenance>,
) -> Result<()> {
    let rounds: &[Vec<AgentState>] = result.agent_trace.as_deref().unwrap_or_default();
    let mut t = Table::create(
        path,
        prov,
        &["iteration", "agent_id", "lambda", "power", "neighbor_gap", "oracle_gap"],
    )?;
    for (k, states) in rounds.iter().enumerate() {
        for (i, s) in states.iter().enumerate() {
            let gap = graph
                .neighbors(i)
                .iter()
                .map(|&j| (s.lambda - states[j].lambda).abs())
                .fold(0.0, f64::max);
            t.row([
                (k + 1).to_string(),
                agent_label(graph, vpp_ids, i),
                s.lambda.to_string(),
                s.power.to_string(),
                gap.to_string(),
                lambda_star.map(|l| (s.lambda - l).abs().to_string()).unwrap_or_default(),
            ])?;
        }
    }
    t.finish()
}

/// One per-interval report line with the cell it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRecord {
    pub community: String,
    pub month: Month,
    pub row: IntervalResult,
}

const REPORT_HEADER: [&str; 13] = [
    "community",
    "month",
    "method",
    "interval",
    "p_true",
    "p_used",
    "lambda_star",
    "lambda_conv",
    "price_gap",
    "dispatch",
    "iterations",
    "converged",
    "objective",
];

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn split_list(path: &Path, line: u64, s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| x.parse().map_err(|_| parse_err(path, line, format!("bad list entry {x:?}"))))
        .collect()
}

pub fn write_report(path: &Path, records: &[ReportRecord], prov: Option<&Provenance>) -> Result<()> {
    let mut t = Table::create(path, prov, &REPORT_HEADER)?;
    for ReportRecord { community, month, row: r } in records {
        t.row([
            community.clone(),
            month.name().to_string(),
            r.method.to_string(),
            r.interval.to_string(),
            r.p_community_true.to_string(),
            r.p_community_used.to_string(),
            r.lambda_star.map(|l| l.to_string()).unwrap_or_default(),
            join(&r.lambda_conv),
            r.price_gap.to_string(),
            join(&r.dispatch),
            r.iterations.to_string(),
            r.converged.to_string(),
            r.objective.to_string(),
        ])?;
    }
    t.finish()
}

pub fn load_report(path: &Path) -> Result<Vec<ReportRecord>> {
    let mut rdr = reader(path)?;
    expect_header(path, &mut rdr, &REPORT_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = line_of(&rec);
        let month: Month = rec[1].parse().map_err(|_| parse_err(path, line, format!("bad month {:?}", &rec[1])))?;
        let method: PredictionMethod = rec[2].parse().map_err(|e: tec_core::Error| parse_err(path, line, e.to_string()))?;
        let lambda_star = if rec[6].is_empty() {
            None
        } else {
            Some(field(path, &rec, 6, "lambda_star")?)
        };
        out.push(ReportRecord {
            community: rec[0].to_string(),
            month,
            row: IntervalResult {
                interval: field(path, &rec, 3, "interval")?,
                method,
                p_community_true: field(path, &rec, 4, "p_true")?,
                p_community_used: field(path, &rec, 5, "p_used")?,
                lambda_star,
                lambda_conv: split_list(path, line, &rec[7])?,
                price_gap: field(path, &rec, 8, "price_gap")?,
                dispatch: split_list(path, line, &rec[9])?,
                iterations: field(path, &rec, 10, "iterations")?,
                converged: field(path, &rec, 11, "converged")?,
                objective: field(path, &rec, 12, "objective")?,
            },
        });
    }
    Ok(out)
}

/// Gains used for a summary cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTuning {
    pub alpha0: f64,
    pub beta0: f64,
}

pub fn write_summary(path: &Path, rows: &[(SummaryRow, CellTuning)], prov: Option<&Provenance>) -> Result<()> {
    let mut t = Table::create(
        path,
        prov,
        &[
            "community",
            "month",
            "method",
            "total_price_difference",
            "rmse",
            "mae",
            "iterations",
            "unconverged_intervals",
            "alpha0",
            "beta0",
        ],
    )?;
    for (r, g) in rows {
        t.row([
            r.community.clone(),
            r.month.name().to_string(),
            r.method.to_string(),
            r.total_price_difference.to_string(),
            r.rmse.to_string(),
            r.mae.to_string(),
            r.iterations.to_string(),
            r.unconverged_intervals.to_string(),
            g.alpha0.to_string(),
            g.beta0.to_string(),
        ])?;
    }
    t.finish()
}

/// Plot-ready `interval,method,price_gap` rows for one cell.
pub fn write_price_gaps(path: &Path, rows: &[&IntervalResult], prov: Option<&Provenance>) -> Result<()> {
    let mut t = Table::create(path, prov, &["interval", "method", "price_gap"])?;
    for r in rows {
        t.row([r.interval.to_string(), r.method.to_string(), r.price_gap.to_string()])?;
    }
    t.finish()
}

pub fn write_train_log(path: &Path, log: &[TrainLogEntry], prov: Option<&Provenance>) -> Result<()> {
    let mut t = Table::create(path, prov, &["round", "building", "target_kind", "val_loss"])?;
    for e in log {
        t.row([
            e.round.to_string(),
            e.building.clone(),
            e.target.to_string(),
            e.val_loss.to_string(),
        ])?;
    }
    t.finish()
}

/// `buildings.csv`: one row per generated building with its profile
/// parameters.
pub fn write_building_index(path: &Path, buildings: &[BuildingData], prov: Option<&Provenance>) -> Result<()> {
    let mut t = Table::create(
        path,
        prov,
        &[
            "id",
            "base_load",
            "daily_peak_amp",
            "peak_hour",
            "noise_sigma",
            "pv_capacity",
            "cloudiness",
            "seed",
        ],
    )?;
    for b in buildings {
        let p = &b.params;
        t.row([
            b.id.clone(),
            p.base_load.to_string(),
            p.daily_peak_amp.to_string(),
            p.peak_hour.to_string(),
            p.noise_sigma.to_string(),
            p.pv_capacity.to_string(),
            p.cloudiness.to_string(),
            p.seed.to_string(),
        ])?;
    }
    t.finish()
}

/// Building ids from the first column of a `buildings.csv` (other columns
/// are optional).
pub fn load_building_ids(path: &Path) -> Result<Vec<String>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?;
    if headers.get(0) != Some("id") {
        return Err(parse_err(path, 1, "first column must be `id`"));
    }
    let mut ids = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let id = rec.get(0).unwrap_or("").to_string();
        if id.is_empty() || id.contains(['/', '\\']) || ids.contains(&id) {
            return Err(parse_err(path, line_of(&rec), format!("invalid or repeated id {id:?}")));
        }
        ids.push(id);
    }
    Ok(ids)
}

/// Drops `#` comment lines, leaving the CSV body.
pub fn body_of(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .flat_map(|l| [l, "\n"])
        .collect()
}
