//! Coupled equilibrium between fleet operations and grid prices.
//!
//! The outer fixed point is `p = h(p)`: for prices `p` the operator's rewards are
//! solved to their own fixed point, the induced charging load is added to the base
//! load, and the per-step dispatch returns new nodal prices.

use nalgebra::{DMatrix, DVector};

use crate::anderson::{aa_solve, AaConfig, AaTrace};
use crate::dcopf::{solve_instances, OpfInstance, OpfSolution};
use crate::error::{Error, Result};
use crate::pumdp::{build_state_space, charging_load, StateSpace};
use crate::reward_design::{solve_reward_fixed_point, DemandModel, Response, RewardPair, RewardSolution};
use crate::scenario::Scenario;

#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    /// Equilibrium prices `T x |load buses|`.
    pub prices: DMatrix<f64>,
    pub baseline: DMatrix<f64>,
    pub baseline_opf: Vec<OpfSolution>,
    pub rewards: RewardPair,
    pub response: Response,
    /// Total load `T x |load buses|` at the equilibrium.
    pub load: DMatrix<f64>,
    pub opf: Vec<OpfSolution>,
    pub outer_trace: AaTrace,
    pub inner_traces: Vec<AaTrace>,
    /// Price-domain warnings raised along the way.
    pub diagnostics: Vec<String>,
}

impl EquilibriumResult {
    pub fn residual(&self) -> f64 {
        self.outer_trace.final_residual()
    }
    pub fn generation_cost(&self) -> f64 {
        self.opf.iter().map(|s| s.objective).sum()
    }
    pub fn baseline_cost(&self) -> f64 {
        self.baseline_opf.iter().map(|s| s.objective).sum()
    }
}

/// Dispatch of the base load alone. Returns per-step solutions and prices.
pub fn baseline_lmp(scenario: &Scenario) -> Result<(Vec<OpfSolution>, DMatrix<f64>)> {
    let template = OpfInstance::from_scenario(scenario);
    solve_instances(&template, &scenario.base_load_matrix()).map_err(|e| name_bus(scenario, e))
}

/// Upper end of the price box: ten times the most expensive marginal cost.
pub fn price_cap(scenario: &Scenario) -> f64 {
    let worst = scenario
        .power
        .generators
        .iter()
        .map(|g| 2.0 * g.c2 * g.gmax + g.c1)
        .fold(0.0, f64::max);
    10.0 * worst
}

/// Replaces an internal bus index in an infeasibility error by the bus id.
fn name_bus(scenario: &Scenario, e: Error) -> Error {
    match e {
        Error::OpfInfeasible { t, bus: Some(i), certificate } => Error::OpfInfeasible {
            t,
            bus: scenario.power.buses.get(i as usize).map(|b| b.id),
            certificate,
        },
        other => other,
    }
}

/// Checks that the grid can carry the whole fleet charging at any one charging bus.
pub fn check_fleet_capacity(scenario: &Scenario) -> Result<()> {
    let mut inst = OpfInstance::from_scenario(scenario);
    let base = scenario.base_load_matrix();
    let extra = scenario.params.fleet * scenario.charge_unit_load();
    let mut buses: Vec<usize> = (0..scenario.n_charging()).map(|c| scenario.charging_load_bus(c)).collect();
    buses.sort_unstable();
    buses.dedup();
    for t in 0..base.nrows() {
        for &j in &buses {
            let mut row: Vec<f64> = base.row(t).iter().copied().collect();
            row[j] += extra;
            inst.set_load_buses(&row)?;
            inst.check_capacity().map_err(|e| match e {
                Error::OpfInfeasible { bus, certificate, .. } => Error::OpfInfeasible {
                    t: Some(t),
                    bus: bus.or(Some(scenario.load_buses()[j] as u32)),
                    certificate: format!("with the full fleet charging at load bus {j}: {certificate}"),
                },
                other => other,
            })
            .map_err(|e| name_bus(scenario, e))?;
        }
    }
    Ok(())
}

pub fn solve_equilibrium(scenario: &Scenario, elo: &AaConfig, eqn: &AaConfig) -> Result<EquilibriumResult> {
    let space = build_state_space(scenario)?;
    solve_equilibrium_with(scenario, &space, None, elo, eqn)
}

/// Outer price iteration from `p0` (baseline prices when `None`).
pub fn solve_equilibrium_with(
    scenario: &Scenario,
    space: &StateSpace,
    p0: Option<&DMatrix<f64>>,
    elo: &AaConfig,
    eqn: &AaConfig,
) -> Result<EquilibriumResult> {
    check_fleet_capacity(scenario)?;
    let (baseline_opf, baseline) = baseline_lmp(scenario)?;
    let (t, nl) = baseline.shape();
    let start = match p0 {
        Some(p) if p.shape() == (t, nl) => p.clone(),
        Some(p) => {
            return Err(Error::IndexMismatch(format!(
                "initial prices are {:?}, expected ({t}, {nl})",
                p.shape()
            )))
        }
        None => baseline.clone(),
    };
    let template = OpfInstance::from_scenario(scenario);
    let base_load = scenario.base_load_matrix();
    let cap = price_cap(scenario);

    let mut warm: DMatrix<f64> = DemandModel::from_scenario(scenario).initial_window_rewards();
    let mut inner_traces = Vec::new();
    let mut diagnostics = Vec::new();
    let mut last: Option<(DVector<f64>, RewardSolution, DMatrix<f64>, Vec<OpfSolution>)> = None;
    let mut outer = 0usize;

    let h = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let p = DMatrix::from_column_slice(t, nl, x.as_slice());
        if let Some(v) = p.iter().find(|&&v| !(0.0..=cap).contains(&v)) {
            diagnostics.push(format!("outer iterate {outer}: price {v} outside [0, {cap}]"));
        }
        let inner = solve_reward_fixed_point(space, scenario, &p, Some(&warm), elo)
            .map_err(|e| e.in_stage(format!("reward fixed point at outer iterate {outer}")))?;
        warm = inner.rewards.mu_d_window.clone();
        inner_traces.push(inner.trace.clone());
        let load = &base_load + charging_load(scenario, &inner.response.x_c);
        let (sols, prices) = solve_instances(&template, &load)
            .map_err(|e| name_bus(scenario, e).in_stage(format!("dispatch at outer iterate {outer}")))?;
        outer += 1;
        last = Some((x.clone(), inner, load, sols));
        Ok(DVector::from_column_slice(prices.as_slice()))
    };
    let (x, outer_trace) = aa_solve(h, DVector::from_column_slice(start.as_slice()), eqn)
        .map_err(|e| e.in_stage("price fixed point"))?;

    let (xl, inner, load, opf) = last.expect("map evaluated at least once");
    debug_assert_eq!(xl, x);
    let prices = DMatrix::from_column_slice(t, nl, x.as_slice());
    Ok(EquilibriumResult {
        prices,
        baseline,
        baseline_opf,
        rewards: inner.rewards,
        response: inner.response,
        load,
        opf,
        outer_trace,
        inner_traces,
        diagnostics,
    })
}
