//! Domain types shared by the solvers, the forecaster and the harness.
//!
//! Sign convention: a positive community net demand means the community
//! imports from the VPPs (grid-to-community); a negative one means it exports
//! to them (community-to-grid), in which case the balance constraint uses the
//! magnitude `-p_community`. Power is in kW, prices in currency per kW of the
//! interval; both units are conventions of this crate.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of 15-minute intervals in a day.
pub const INTERVALS_PER_DAY: usize = 96;
/// Resolution of every [`TimeSeries`].
pub const STEP_MINUTES: i64 = 15;

/// Quadratic cost `c1·P² + c2·P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    pub c1: f64,
    pub c2: f64,
}

impl CostCoefficients {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        let c = Self { c1, c2 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1.is_finite() && self.c1 > 0.0) {
            return Err(Error::invalid(format!("c1 must be finite and > 0, got {}", self.c1)));
        }
        if !(self.c2.is_finite() && self.c2 >= 0.0) {
            return Err(Error::invalid(format!("c2 must be finite and >= 0, got {}", self.c2)));
        }
        Ok(())
    }

    #[inline]
    pub fn cost(&self, p: f64) -> f64 {
        self.c1 * p * p + self.c2 * p
    }

    /// Marginal cost `2·c1·P + c2`.
    #[inline]
    pub fn marginal(&self, p: f64) -> f64 {
        2.0 * self.c1 * p + self.c2
    }

    /// Unconstrained best response `(λ - c2) / (2·c1)`.
    #[inline]
    pub fn response(&self, lambda: f64) -> f64 {
        (lambda - self.c2) / (2.0 * self.c1)
    }
}

/// One virtual power plant with a cost curve and capacity per flow direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VppSpec {
    pub id: String,
    pub g2c: CostCoefficients,
    pub c2g: CostCoefficients,
    pub p_max_g2c: f64,
    pub p_max_c2g: f64,
}

impl VppSpec {
    pub fn validate(&self) -> Result<()> {
        self.g2c.validate()?;
        self.c2g.validate()?;
        for (name, p) in [("p_max_g2c", self.p_max_g2c), ("p_max_c2g", self.p_max_c2g)] {
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::invalid(format!("{}: {name} must be finite and >= 0", self.id)));
            }
        }
        Ok(())
    }

    /// Same cost curve and capacity in both directions.
    pub fn symmetric(id: impl Into<String>, c1: f64, c2: f64, p_max: f64) -> Self {
        let coeffs = CostCoefficients { c1, c2 };
        Self {
            id: id.into(),
            g2c: coeffs,
            c2g: coeffs,
            p_max_g2c: p_max,
            p_max_c2g: p_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlowDirection {
    GridToCommunity,
    CommunityToGrid,
    NoFlow,
}

pub fn direction_of(p_community: f64) -> Result<FlowDirection> {
    if !p_community.is_finite() {
        return Err(Error::invalid("community net demand must be finite"));
    }
    Ok(if p_community > 0.0 {
        FlowDirection::GridToCommunity
    } else if p_community < 0.0 {
        FlowDirection::CommunityToGrid
    } else {
        FlowDirection::NoFlow
    })
}

/// Selects the cost curve and capacity that apply in `dir`.
pub fn effective_coeffs(vpp: &VppSpec, dir: FlowDirection) -> Result<(CostCoefficients, f64)> {
    match dir {
        FlowDirection::GridToCommunity => Ok((vpp.g2c, vpp.p_max_g2c)),
        FlowDirection::CommunityToGrid => Ok((vpp.c2g, vpp.p_max_c2g)),
        FlowDirection::NoFlow => Err(Error::NoFlow),
    }
}

/// A single-interval aggregation instance. Construction validates every VPP
/// and checks that the VPPs can cover the community's net demand, so solvers
/// may assume a feasible instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScenario", into = "RawScenario")]
pub struct Scenario {
    vpps: Vec<VppSpec>,
    p_community: f64,
    interval: usize,
    direction: FlowDirection,
}

#[derive(Serialize, Deserialize)]
struct RawScenario {
    vpps: Vec<VppSpec>,
    p_community: f64,
    #[serde(default)]
    interval: usize,
}

impl TryFrom<RawScenario> for Scenario {
    type Error = Error;
    fn try_from(raw: RawScenario) -> Result<Self> {
        Scenario::new(raw.vpps, raw.p_community, raw.interval)
    }
}

impl From<Scenario> for RawScenario {
    fn from(s: Scenario) -> Self {
        RawScenario {
            vpps: s.vpps,
            p_community: s.p_community,
            interval: s.interval,
        }
    }
}

impl Scenario {
    pub fn new(vpps: Vec<VppSpec>, p_community: f64, interval: usize) -> Result<Self> {
        if vpps.is_empty() {
            return Err(Error::invalid("a scenario needs at least one VPP"));
        }
        if interval >= INTERVALS_PER_DAY {
            return Err(Error::invalid(format!("interval {interval} outside 0..96")));
        }
        let mut seen = BTreeSet::new();
        for v in &vpps {
            v.validate()?;
            if !seen.insert(v.id.as_str()) {
                return Err(Error::invalid(format!("duplicate VPP id {}", v.id)));
            }
        }
        let direction = direction_of(p_community)?;
        let capacity: f64 = match direction {
            FlowDirection::GridToCommunity => vpps.iter().map(|v| v.p_max_g2c).sum(),
            FlowDirection::CommunityToGrid => vpps.iter().map(|v| v.p_max_c2g).sum(),
            FlowDirection::NoFlow => 0.0,
        };
        if p_community.abs() > capacity && direction != FlowDirection::NoFlow {
            return Err(Error::Infeasible {
                demand: p_community.abs(),
                capacity,
            });
        }
        Ok(Self {
            vpps,
            p_community,
            interval,
            direction,
        })
    }

    pub fn vpps(&self) -> &[VppSpec] {
        &self.vpps
    }

    pub fn n_vpps(&self) -> usize {
        self.vpps.len()
    }

    pub fn p_community(&self) -> f64 {
        self.p_community
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn direction(&self) -> FlowDirection {
        self.direction
    }

    /// Right-hand side of the balance constraint: `|p_community|`.
    pub fn demand(&self) -> f64 {
        self.p_community.abs()
    }

    /// Cost curves and capacities for the active direction, in VPP order.
    pub fn active_coeffs(&self) -> Result<Vec<(CostCoefficients, f64)>> {
        self.vpps
            .iter()
            .map(|v| effective_coeffs(v, self.direction))
            .collect()
    }

    /// Total capacity in the active direction.
    pub fn capacity(&self) -> f64 {
        match self.direction {
            FlowDirection::GridToCommunity => self.vpps.iter().map(|v| v.p_max_g2c).sum(),
            FlowDirection::CommunityToGrid => self.vpps.iter().map(|v| v.p_max_c2g).sum(),
            FlowDirection::NoFlow => 0.0,
        }
    }

    /// Same VPPs, different demand.
    pub fn with_demand(&self, p_community: f64) -> Result<Self> {
        Scenario::new(self.vpps.clone(), p_community, self.interval)
    }
}

/// Uniformly spaced 15-minute series. Timestamps are minutes since the start
/// of the reference calendar year (see [`crate::data::calendar`]); the uniform
/// spacing makes them strictly increasing by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    start_minute: i64,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(start_minute: i64, values: Vec<f64>) -> Self {
        Self {
            start_minute,
            values,
        }
    }

    /// Builds a series from explicit `(minute, kW)` points, checking that the
    /// timestamps advance by exactly one 15-minute step.
    pub fn from_points(points: &[(i64, f64)]) -> Result<Self> {
        let Some(&(start, _)) = points.first() else {
            return Ok(Self::new(0, Vec::new()));
        };
        for (k, w) in points.windows(2).enumerate() {
            if w[1].0 <= w[0].0 {
                return Err(Error::invalid(format!("timestamps not increasing at point {}", k + 1)));
            }
            if w[1].0 - w[0].0 != STEP_MINUTES {
                return Err(Error::invalid(format!("non-uniform spacing at point {}", k + 1)));
            }
        }
        Ok(Self::new(start, points.iter().map(|p| p.1).collect()))
    }

    pub fn start_minute(&self) -> i64 {
        self.start_minute
    }

    /// Minute just past the last sample.
    pub fn end_minute(&self) -> i64 {
        self.start_minute + STEP_MINUTES * self.values.len() as i64
    }

    pub fn timestamp(&self, i: usize) -> i64 {
        self.start_minute + STEP_MINUTES * i as i64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .map(move |(i, &v)| (self.timestamp(i), v))
    }

    /// Index of the sample stamped `minute`, if inside the series and on-grid.
    pub fn index_of(&self, minute: i64) -> Option<usize> {
        let off = minute - self.start_minute;
        if off < 0 || off % STEP_MINUTES != 0 {
            return None;
        }
        let i = (off / STEP_MINUTES) as usize;
        (i < self.values.len()).then_some(i)
    }

    pub fn slice(&self, range: Range<usize>) -> TimeSeries {
        TimeSeries::new(self.timestamp(range.start), self.values[range].to_vec())
    }

    /// Sub-series covering `[from, to)` minutes; both must lie on the grid
    /// and inside the series.
    pub fn between(&self, from: i64, to: i64) -> Result<TimeSeries> {
        let a = self.offset_in(from)?;
        let b = self.offset_in(to)?;
        if b < a {
            return Err(Error::invalid("empty or reversed span"));
        }
        Ok(self.slice(a..b))
    }

    fn offset_in(&self, minute: i64) -> Result<usize> {
        let off = minute - self.start_minute;
        if off < 0 || off % STEP_MINUTES != 0 || off / STEP_MINUTES > self.values.len() as i64 {
            return Err(Error::SpanTooShort(format!(
                "minute {minute} outside [{}, {}]",
                self.start_minute,
                self.end_minute()
            )));
        }
        Ok((off / STEP_MINUTES) as usize)
    }

    pub fn is_aligned_with(&self, other: &TimeSeries) -> bool {
        self.start_minute == other.start_minute && self.values.len() == other.values.len()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> TimeSeries {
        TimeSeries::new(self.start_minute, self.values.iter().map(|&v| f(v)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vpp(c1_g2c: f64, c1_c2g: f64) -> VppSpec {
        VppSpec {
            id: "v".into(),
            g2c: CostCoefficients { c1: c1_g2c, c2: 0.5 },
            c2g: CostCoefficients { c1: c1_c2g, c2: 0.7 },
            p_max_g2c: 10.0,
            p_max_c2g: 20.0,
        }
    }

    #[test]
    fn direction_follows_sign() {
        assert_eq!(direction_of(5.0).unwrap(), FlowDirection::GridToCommunity);
        assert_eq!(direction_of(-3.2).unwrap(), FlowDirection::CommunityToGrid);
        assert_eq!(direction_of(0.0).unwrap(), FlowDirection::NoFlow);
        assert_eq!(direction_of(-0.0).unwrap(), FlowDirection::NoFlow);
        assert!(direction_of(f64::NAN).is_err());
        assert!(direction_of(f64::INFINITY).is_err());
    }

    #[test]
    fn effective_coeffs_selects_without_altering() {
        let v = vpp(1.0, 2.0);
        let (c, p) = effective_coeffs(&v, FlowDirection::GridToCommunity).unwrap();
        assert_eq!(c, v.g2c);
        assert_eq!(p, 10.0);
        let (c, p) = effective_coeffs(&v, FlowDirection::CommunityToGrid).unwrap();
        assert_eq!(c.c1, 2.0);
        assert_eq!(c, v.c2g);
        assert_eq!(p, 20.0);
        assert_eq!(effective_coeffs(&v, FlowDirection::NoFlow), Err(Error::NoFlow));
    }

    #[test]
    fn scenario_rejects_bad_instances() {
        assert!(Scenario::new(vec![], 1.0, 0).is_err());
        assert!(Scenario::new(vec![vpp(0.0, 1.0)], 1.0, 0).is_err());
        assert!(matches!(
            Scenario::new(vec![vpp(1.0, 1.0)], 10.5, 0),
            Err(Error::Infeasible { .. })
        ));
        // export capacity is the c2g one
        assert!(Scenario::new(vec![vpp(1.0, 1.0)], -15.0, 0).is_ok());
        assert!(Scenario::new(vec![vpp(1.0, 1.0)], -20.5, 0).is_err());
        assert!(Scenario::new(vec![vpp(1.0, 1.0)], 1.0, 96).is_err());
        let mut dup = vec![vpp(1.0, 1.0), vpp(1.0, 1.0)];
        assert!(Scenario::new(dup.clone(), 1.0, 0).is_err());
        dup[1].id = "w".into();
        assert!(Scenario::new(dup, 1.0, 0).is_ok());
    }

    #[test]
    fn no_flow_scenario_is_valid() {
        let s = Scenario::new(vec![vpp(1.0, 1.0)], 0.0, 3).unwrap();
        assert_eq!(s.direction(), FlowDirection::NoFlow);
        assert!(s.active_coeffs().is_err());
    }

    #[test]
    fn series_from_points_checks_spacing() {
        let ok = TimeSeries::from_points(&[(0, 1.0), (15, 2.0), (30, 3.0)]).unwrap();
        assert_eq!(ok.len(), 3);
        assert_eq!(ok.timestamp(2), 30);
        assert!(TimeSeries::from_points(&[(0, 1.0), (0, 2.0)]).is_err());
        assert!(TimeSeries::from_points(&[(15, 1.0), (0, 2.0)]).is_err());
        assert!(TimeSeries::from_points(&[(0, 1.0), (30, 2.0)]).is_err());
    }

    #[test]
    fn between_extracts_on_grid_spans() {
        let s = TimeSeries::new(60, (0..10).map(f64::from).collect());
        let sub = s.between(90, 120).unwrap();
        assert_eq!(sub.values(), &[2.0, 3.0]);
        assert_eq!(sub.start_minute(), 90);
        assert!(s.between(0, 90).is_err());
        assert!(s.between(60, 60 + 15 * 11).is_err());
        assert_eq!(s.index_of(75), Some(1));
        assert_eq!(s.index_of(76), None);
    }
}
