//! Centralized solution of the aggregation QP
//!
//! ```text
//! min Σ c1·P² + c2·P   s.t.  Σ P = |p_community|,  0 ≤ P ≤ p_max
//! ```
//!
//! The optimum is found from the KKT conditions: with the inequality
//! constraints dropped for the free VPPs, the price is
//!
//! ```text
//! λ* = [ D − Σ_upper p_max − Σ_lower 0 + Σ_free c2/(2c1) ] / Σ_free 1/(2c1)
//! ```
//!
//! and each free VPP dispatches `(λ* − c2)/(2c1)`. The free set is found by
//! clamping violators and releasing bound VPPs with negative multipliers until
//! nothing changes.
//!
//! [`projected_gradient_oracle`] solves the same problem by gradient ascent on
//! the Lagrangian dual and shares no code with the active-set path beyond the
//! scenario accessors.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CostCoefficients, FlowDirection, Scenario};

/// Largest fleet the exhaustive active-set fallback will enumerate.
pub const ENUMERATION_CAP: usize = 20;

/// Where a VPP sits relative to its capacity box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bound {
    Free,
    Upper,
    Lower,
}

/// VPPs pinned at a capacity bound, as indices into the scenario's VPP list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSet {
    pub at_upper: BTreeSet<usize>,
    pub at_lower: BTreeSet<usize>,
}

impl ActiveSet {
    pub fn from_bounds(bounds: &[Bound]) -> Self {
        let mut set = ActiveSet::default();
        for (g, b) in bounds.iter().enumerate() {
            match b {
                Bound::Upper => {
                    set.at_upper.insert(g);
                }
                Bound::Lower => {
                    set.at_lower.insert(g);
                }
                Bound::Free => {}
            }
        }
        set
    }

    pub fn bound_of(&self, g: usize) -> Bound {
        if self.at_upper.contains(&g) {
            Bound::Upper
        } else if self.at_lower.contains(&g) {
            Bound::Lower
        } else {
            Bound::Free
        }
    }

    pub fn is_empty(&self) -> bool {
        self.at_upper.is_empty() && self.at_lower.is_empty()
    }
}

/// Bound multipliers, one per VPP in scenario order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KktInfo {
    pub mu_upper: Vec<f64>,
    pub mu_lower: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalDispatch {
    pub direction: FlowDirection,
    pub lambda_star: f64,
    /// Dispatch per VPP, in scenario order.
    pub p_star: Vec<f64>,
    pub objective: f64,
    pub active_set: ActiveSet,
    pub kkt: KktInfo,
}

impl OptimalDispatch {
    /// Largest stationarity residual `|2c1·P + c2 − λ + μu − μl|` over all VPPs.
    pub fn stationarity_residual(&self, scenario: &Scenario) -> Result<f64> {
        let coeffs = scenario.active_coeffs()?;
        Ok(coeffs
            .iter()
            .enumerate()
            .map(|(g, (c, _))| {
                (c.marginal(self.p_star[g]) - self.lambda_star + self.kkt.mu_upper[g]
                    - self.kkt.mu_lower[g])
                    .abs()
            })
            .fold(0.0, f64::max))
    }

    /// Largest complementary-slackness violation `μu·(p_max − P) + μl·P`,
    /// plus any negative multiplier.
    pub fn complementarity_residual(&self, scenario: &Scenario) -> Result<f64> {
        let coeffs = scenario.active_coeffs()?;
        Ok(coeffs
            .iter()
            .enumerate()
            .map(|(g, &(_, p_max))| {
                let mu_u = self.kkt.mu_upper[g];
                let mu_l = self.kkt.mu_lower[g];
                let p = self.p_star[g];
                (mu_u * (p_max - p)).abs()
                    + (mu_l * p).abs()
                    + (-mu_u).max(0.0)
                    + (-mu_l).max(0.0)
            })
            .fold(0.0, f64::max))
    }

    /// `|Σ P − |p_community||`.
    pub fn balance_residual(&self, scenario: &Scenario) -> f64 {
        (self.p_star.iter().sum::<f64>() - scenario.demand()).abs()
    }
}

/// Price that balances the free VPPs against the residual demand, or `None`
/// when no VPP is free.
fn free_price(coeffs: &[(CostCoefficients, f64)], bounds: &[Bound], demand: f64) -> Option<f64> {
    let mut inv_sum = 0.0;
    let mut weighted_c2 = 0.0;
    let mut residual = demand;
    for ((c, p_max), b) in coeffs.iter().zip(bounds) {
        match b {
            Bound::Free => {
                inv_sum += 1.0 / (2.0 * c.c1);
                weighted_c2 += c.c2 / (2.0 * c.c1);
            }
            Bound::Upper => residual -= p_max,
            Bound::Lower => {}
        }
    }
    (inv_sum > 0.0).then(|| (residual + weighted_c2) / inv_sum)
}

/// Price used when every VPP is pinned: the highest marginal cost among the
/// VPPs at their upper bound (the limit of λ* from below), or the lowest
/// `c2` when none is at the upper bound.
fn pinned_price(coeffs: &[(CostCoefficients, f64)], bounds: &[Bound]) -> f64 {
    let upper = coeffs
        .iter()
        .zip(bounds)
        .filter(|(_, b)| **b == Bound::Upper)
        .map(|((c, p_max), _)| c.marginal(*p_max))
        .fold(f64::NEG_INFINITY, f64::max);
    if upper.is_finite() {
        upper
    } else {
        coeffs.iter().map(|(c, _)| c.c2).fold(f64::INFINITY, f64::min)
    }
}

fn tolerance(scale: f64) -> f64 {
    1e-12 * scale.abs().max(1.0)
}

/// Price and dispatch implied by one candidate assignment.
fn evaluate(
    coeffs: &[(CostCoefficients, f64)],
    bounds: &[Bound],
    demand: f64,
) -> (f64, Vec<f64>) {
    let lambda = free_price(coeffs, bounds, demand).unwrap_or_else(|| pinned_price(coeffs, bounds));
    let p = coeffs
        .iter()
        .zip(bounds)
        .map(|((c, p_max), b)| match b {
            Bound::Free => c.response(lambda),
            Bound::Upper => *p_max,
            Bound::Lower => 0.0,
        })
        .collect();
    (lambda, p)
}

fn is_kkt_consistent(coeffs: &[(CostCoefficients, f64)], bounds: &[Bound], demand: f64) -> bool {
    let (lambda, p) = evaluate(coeffs, bounds, demand);
    let tol = tolerance(lambda);
    let balance: f64 = p.iter().sum();
    if (balance - demand).abs() > 1e-9 * demand.max(1.0) {
        return false;
    }
    coeffs.iter().zip(bounds).zip(&p).all(|(((c, p_max), b), &pg)| match b {
        Bound::Free => pg >= -tol && pg <= p_max + tol,
        Bound::Upper => lambda - c.marginal(*p_max) >= -tol,
        Bound::Lower => c.c2 - lambda >= -tol,
    })
}

/// Tries all 3^N assignments; used only when the iteration cycles.
fn enumerate_active_set(coeffs: &[(CostCoefficients, f64)], demand: f64) -> Result<Vec<Bound>> {
    let n = coeffs.len();
    if n > ENUMERATION_CAP {
        return Err(Error::ActiveSetCycle {
            n,
            cap: ENUMERATION_CAP,
        });
    }
    let total = 3u64.pow(n as u32);
    let mut bounds = vec![Bound::Free; n];
    for code in 0..total {
        let mut k = code;
        for b in bounds.iter_mut() {
            *b = match k % 3 {
                0 => Bound::Free,
                1 => Bound::Upper,
                _ => Bound::Lower,
            };
            k /= 3;
        }
        if is_kkt_consistent(coeffs, &bounds, demand) {
            return Ok(bounds);
        }
    }
    Err(Error::ActiveSetCycle {
        n,
        cap: ENUMERATION_CAP,
    })
}

fn active_bounds(scenario: &Scenario) -> Result<Vec<Bound>> {
    let coeffs = scenario.active_coeffs()?;
    let demand = scenario.demand();
    let bounds = iterate_active_set(&coeffs, demand)?;
    Ok(settle(&coeffs, bounds, demand))
}

/// Reports free VPPs that land exactly on a bound as active (with a zero
/// multiplier); the price is unchanged by this.
fn settle(coeffs: &[(CostCoefficients, f64)], mut bounds: Vec<Bound>, demand: f64) -> Vec<Bound> {
    let (lambda, p) = evaluate(coeffs, &bounds, demand);
    let tol = tolerance(lambda);
    for (g, (c, p_max)) in coeffs.iter().enumerate() {
        if bounds[g] != Bound::Free {
            continue;
        }
        if (p[g] - p_max).abs() <= tol * (1.0 / (2.0 * c.c1)).max(1.0) {
            bounds[g] = Bound::Upper;
        } else if p[g].abs() <= tol * (1.0 / (2.0 * c.c1)).max(1.0) {
            bounds[g] = Bound::Lower;
        }
    }
    bounds
}

fn iterate_active_set(coeffs: &[(CostCoefficients, f64)], demand: f64) -> Result<Vec<Bound>> {
    let n = coeffs.len();
    let mut bounds = vec![Bound::Free; n];
    let mut visited: BTreeSet<Vec<Bound>> = BTreeSet::new();

    loop {
        if !visited.insert(bounds.clone()) {
            return enumerate_active_set(coeffs, demand);
        }

        let Some(lambda) = free_price(coeffs, &bounds, demand) else {
            // Everything pinned: either the pins balance exactly, or some of
            // them must be released.
            let pinned: f64 = coeffs
                .iter()
                .zip(&bounds)
                .filter(|(_, b)| **b == Bound::Upper)
                .map(|((_, p_max), _)| *p_max)
                .sum();
            let tol = 1e-12 * demand.max(1.0);
            if (pinned - demand).abs() <= tol {
                let lambda = pinned_price(coeffs, &bounds);
                let mut released = false;
                for ((c, _), b) in coeffs.iter().zip(bounds.iter_mut()) {
                    if *b == Bound::Lower && c.c2 < lambda - tolerance(lambda) {
                        *b = Bound::Free;
                        released = true;
                    }
                }
                if !released {
                    return Ok(bounds);
                }
            } else {
                let release = if pinned > demand { Bound::Upper } else { Bound::Lower };
                for b in bounds.iter_mut().filter(|b| **b == release) {
                    *b = Bound::Free;
                }
            }
            continue;
        };

        let tol = tolerance(lambda);
        let mut pinned_any = false;
        for ((c, p_max), b) in coeffs.iter().zip(bounds.iter_mut()) {
            if *b != Bound::Free {
                continue;
            }
            let p = c.response(lambda);
            if p > p_max + tol {
                *b = Bound::Upper;
                pinned_any = true;
            } else if p < -tol {
                *b = Bound::Lower;
                pinned_any = true;
            }
        }
        if pinned_any {
            continue;
        }

        let mut released_any = false;
        for ((c, p_max), b) in coeffs.iter().zip(bounds.iter_mut()) {
            let release = match b {
                Bound::Upper => lambda - c.marginal(*p_max) < -tol,
                Bound::Lower => c.c2 - lambda < -tol,
                Bound::Free => false,
            };
            if release {
                *b = Bound::Free;
                released_any = true;
            }
        }
        if !released_any {
            return Ok(bounds);
        }
    }
}

/// Active set of the optimum: a fixed point of "price the free VPPs, clamp
/// violators, release pins with negative multipliers".
pub fn refine_active_set(scenario: &Scenario) -> Result<ActiveSet> {
    Ok(ActiveSet::from_bounds(&active_bounds(scenario)?))
}

/// Exact optimum of the aggregation QP. Returns `Ok(None)` for a zero net
/// demand, where no power flows and the price is undefined.
pub fn solve_centralized(scenario: &Scenario) -> Result<Option<OptimalDispatch>> {
    if scenario.direction() == FlowDirection::NoFlow {
        return Ok(None);
    }
    let coeffs = scenario.active_coeffs()?;
    let bounds = active_bounds(scenario)?;
    let (lambda, mut p) = evaluate(&coeffs, &bounds, scenario.demand());

    let mut mu_upper = vec![0.0; p.len()];
    let mut mu_lower = vec![0.0; p.len()];
    for (g, ((c, p_max), b)) in coeffs.iter().zip(&bounds).enumerate() {
        match b {
            Bound::Free => p[g] = p[g].clamp(0.0, *p_max),
            Bound::Upper => mu_upper[g] = (lambda - c.marginal(*p_max)).max(0.0),
            Bound::Lower => mu_lower[g] = (c.c2 - lambda).max(0.0),
        }
    }
    let objective = coeffs.iter().zip(&p).map(|((c, _), &pg)| c.cost(pg)).sum();

    Ok(Some(OptimalDispatch {
        direction: scenario.direction(),
        lambda_star: lambda,
        p_star: p,
        objective,
        active_set: ActiveSet::from_bounds(&bounds),
        kkt: KktInfo { mu_upper, mu_lower },
    }))
}

/// Independent oracle: gradient ascent on the Lagrangian dual
/// `q(λ) = λ·D + Σ min_{0≤P≤p_max} (c1·P² + c2·P − λ·P)`, whose inner
/// minimizers are the box projections of the unconstrained responses.
/// `step` defaults to the inverse Lipschitz constant `1 / Σ 1/(2c1)`, which
/// makes the ascent monotone.
pub fn projected_gradient_oracle(
    scenario: &Scenario,
    max_iters: usize,
    step: Option<f64>,
) -> Result<OptimalDispatch> {
    let dir = scenario.direction();
    if dir == FlowDirection::NoFlow {
        return Err(Error::NoFlow);
    }
    let demand = scenario.demand();
    let coeffs = scenario.active_coeffs()?;
    let capacity: f64 = coeffs.iter().map(|(_, p)| p).sum();
    if demand > capacity {
        return Err(Error::Infeasible { demand, capacity });
    }
    let lipschitz: f64 = coeffs.iter().map(|(c, _)| 0.5 / c.c1).sum();
    let step = step.unwrap_or(1.0 / lipschitz);
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::invalid("oracle step must be positive"));
    }

    let project = |lambda: f64| -> Vec<f64> {
        coeffs
            .iter()
            .map(|(c, p_max)| ((lambda - c.c2) * 0.5 / c.c1).max(0.0).min(*p_max))
            .collect()
    };

    let tol = 1e-11 * demand.max(1.0);
    let mut lambda = coeffs.iter().map(|(c, _)| c.c2).fold(f64::INFINITY, f64::min);
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let p = project(lambda);
        residual = demand - p.iter().sum::<f64>();
        if residual.abs() <= tol {
            return Ok(oracle_dispatch(dir, &coeffs, lambda, p));
        }
        lambda += step * residual;
        if !lambda.is_finite() {
            break;
        }
    }
    Err(Error::OracleFailure {
        iterations: max_iters,
        residual,
    })
}

fn oracle_dispatch(
    direction: FlowDirection,
    coeffs: &[(CostCoefficients, f64)],
    lambda: f64,
    p: Vec<f64>,
) -> OptimalDispatch {
    let n = p.len();
    let mut bounds = vec![Bound::Free; n];
    let mut mu_upper = vec![0.0; n];
    let mut mu_lower = vec![0.0; n];
    for (g, (c, p_max)) in coeffs.iter().enumerate() {
        if p[g] >= *p_max {
            bounds[g] = Bound::Upper;
            mu_upper[g] = (lambda - c.marginal(*p_max)).max(0.0);
        } else if p[g] <= 0.0 {
            bounds[g] = Bound::Lower;
            mu_lower[g] = (c.c2 - lambda).max(0.0);
        }
    }
    let objective = coeffs.iter().zip(&p).map(|((c, _), &pg)| c.cost(pg)).sum();
    OptimalDispatch {
        direction,
        lambda_star: lambda,
        p_star: p,
        objective,
        active_set: ActiveSet::from_bounds(&bounds),
        kkt: KktInfo { mu_upper, mu_lower },
    }
}
