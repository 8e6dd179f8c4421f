//! Reward design for the logistics operator: delivery rewards equal the marginal
//! revenue of the induced demand, charging rewards pass electricity prices through.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::anderson::{aa_solve, AaConfig, AaTrace};
use crate::error::{Error, Result};
use crate::pumdp::{
    assemble_rewards, charging_flows, delivery_flows, perturbation_cost, propagate_flows, solve_values,
    teleport_flow, FlowVector, StateSpace,
};
use crate::scenario::Scenario;

/// Inverse demand `a - b exp(z / zeta_v)` per (window, delivery zone).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandModel {
    pub a: f64,
    pub b: f64,
    pub zeta: Vec<f64>,
    pub windows: usize,
    pub horizon: usize,
}

impl DemandModel {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        DemandModel {
            a: scenario.params.demand_a,
            b: scenario.params.demand_b,
            zeta: scenario.zeta().to_vec(),
            windows: scenario.params.windows,
            horizon: scenario.params.horizon,
        }
    }

    pub fn n_zones(&self) -> usize {
        self.zeta.len()
    }

    pub fn window_of(&self, t: usize) -> usize {
        t * self.windows / self.horizon
    }

    /// Number of steps in the most populated window.
    pub fn max_window_len(&self) -> usize {
        let mut counts = vec![0usize; self.windows];
        for t in 0..self.horizon {
            counts[self.window_of(t)] += 1;
        }
        counts.into_iter().max().unwrap_or(0)
    }

    fn map(&self, z: &DMatrix<f64>, f: impl Fn(f64, f64) -> f64) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |k, v| f(z[(k, v)], self.zeta[v]))
    }

    pub fn inverse_demand(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.map(z, |z, zeta| self.a - self.b * (z / zeta).exp())
    }

    /// Diagonal of the Jacobian of the inverse demand.
    pub fn jacobian_diag(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.map(z, |z, zeta| -(self.b / zeta) * (z / zeta).exp())
    }

    /// `d/dz [z D^-1(z)] = a - b exp(z/zeta) (1 + z/zeta)`.
    pub fn marginal_revenue(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.map(z, |z, zeta| {
            let r = z / zeta;
            self.a - self.b * r.exp() * (1.0 + r)
        })
    }

    /// Second derivative of revenue, `-(b/zeta) exp(z/zeta) (2 + z/zeta)`.
    pub fn revenue_hessian_diag(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.map(z, |z, zeta| {
            let r = z / zeta;
            -(self.b / zeta) * r.exp() * (2.0 + r)
        })
    }

    pub fn revenue_is_concave(&self, z: &DMatrix<f64>) -> bool {
        self.revenue_hessian_diag(z).iter().all(|&h| h <= 0.0)
    }

    pub fn revenue(&self, z: &DMatrix<f64>) -> f64 {
        z.component_mul(&self.inverse_demand(z)).sum()
    }

    /// `N x`: sums step-indexed delivery flows into windows.
    pub fn aggregate(&self, x_d: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.windows, x_d.ncols());
        for t in 0..x_d.nrows() {
            let k = self.window_of(t);
            for v in 0..x_d.ncols() {
                z[(k, v)] += x_d[(t, v)];
            }
        }
        z
    }

    /// `N^T m`: replicates window values over their steps.
    pub fn expand(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.horizon, m.ncols(), |t, v| m[(self.window_of(t), v)])
    }

    /// Marginal revenue at zero demand, the starting rewards.
    pub fn initial_window_rewards(&self) -> DMatrix<f64> {
        self.marginal_revenue(&DMatrix::zeros(self.windows, self.n_zones()))
    }
}

/// Delivery and charging rewards. Delivery rewards are stored per window and
/// expanded over steps; charging rewards are per truck-step of charging.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardPair {
    pub mu_d_window: DMatrix<f64>,
    pub mu_d: DMatrix<f64>,
    pub mu_c: DMatrix<f64>,
}

impl RewardPair {
    pub fn new(model: &DemandModel, mu_d_window: DMatrix<f64>, mu_c: DMatrix<f64>) -> Self {
        RewardPair {
            mu_d: model.expand(&mu_d_window),
            mu_d_window,
            mu_c,
        }
    }
}

/// `mu_C = -M^T p_C`: price at the serving bus times the per-step charging energy.
pub fn charging_rewards(scenario: &Scenario, p_c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t = scenario.params.horizon;
    if p_c.shape() != (t, scenario.n_load_buses()) {
        return Err(Error::IndexMismatch(format!(
            "price field is {:?}, expected ({t}, {})",
            p_c.shape(),
            scenario.n_load_buses()
        )));
    }
    let unit = scenario.charge_unit_load();
    Ok(DMatrix::from_fn(t, scenario.n_charging(), |t, c| {
        -p_c[(t, scenario.charging_load_bus(c))] * unit
    }))
}

/// Fleet response to a reward pair.
#[derive(Debug, Clone)]
pub struct Response {
    pub flow: FlowVector,
    pub value: f64,
    /// Delivery flows `T x |delivery zones|`.
    pub x_d: DMatrix<f64>,
    /// Charging truck-steps `T x |charging zones|`.
    pub x_c: DMatrix<f64>,
    /// Demand served per window, `N x_D`.
    pub demand: DMatrix<f64>,
}

pub fn fleet_response(space: &StateSpace, scenario: &Scenario, rewards: &RewardPair) -> Result<Response> {
    let model = DemandModel::from_scenario(scenario);
    let u = assemble_rewards(space, &rewards.mu_d, &rewards.mu_c, scenario.params.rho)?;
    let table = solve_values(space, &u)?;
    let flow = propagate_flows(space, &table, scenario.params.fleet);
    let x_d = delivery_flows(space, &flow);
    let x_c = charging_flows(space, &flow);
    Ok(Response {
        demand: model.aggregate(&x_d),
        value: table.initial_value(),
        flow,
        x_d,
        x_c,
    })
}

/// Right-hand side of the reward fixed point: marginal revenue at the demand the
/// rewards induce, and the price pass-through for charging.
pub fn elo_reward_map(space: &StateSpace, scenario: &Scenario, mu: &RewardPair, p_c: &DMatrix<f64>) -> Result<RewardPair> {
    let model = DemandModel::from_scenario(scenario);
    let resp = fleet_response(space, scenario, mu)?;
    let mu_c = charging_rewards(scenario, p_c)?;
    Ok(RewardPair::new(&model, model.marginal_revenue(&resp.demand), mu_c))
}

#[derive(Debug, Clone)]
pub struct RewardSolution {
    pub rewards: RewardPair,
    pub response: Response,
    pub trace: AaTrace,
}

/// Solves the delivery-reward fixed point for fixed electricity prices.
///
/// The iteration runs on window-level rewards. Its tolerance is tightened by the
/// square root of the longest window so that the residual also holds after
/// expansion to steps.
pub fn solve_reward_fixed_point(
    space: &StateSpace,
    scenario: &Scenario,
    p_c: &DMatrix<f64>,
    init: Option<&DMatrix<f64>>,
    cfg: &AaConfig,
) -> Result<RewardSolution> {
    let model = DemandModel::from_scenario(scenario);
    let mu_c = charging_rewards(scenario, p_c)?;
    let (k, nd) = (model.windows, model.n_zones());
    let start = match init {
        Some(m) if m.shape() == (k, nd) => m.clone(),
        Some(m) => {
            return Err(Error::IndexMismatch(format!(
                "initial delivery rewards are {:?}, expected ({k}, {nd})",
                m.shape()
            )))
        }
        None => model.initial_window_rewards(),
    };
    let cfg = AaConfig {
        tolerance: cfg.tolerance / (model.max_window_len().max(1) as f64).sqrt(),
        ..cfg.clone()
    };

    let mut last: Option<(DVector<f64>, Response)> = None;
    let map = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let mu_d = DMatrix::from_column_slice(k, nd, x.as_slice());
        let pair = RewardPair::new(&model, mu_d, mu_c.clone());
        let resp = fleet_response(space, scenario, &pair)?;
        let out = model.marginal_revenue(&resp.demand);
        last = Some((x.clone(), resp));
        Ok(DVector::from_column_slice(out.as_slice()))
    };
    let (x, trace) = aa_solve(map, DVector::from_column_slice(start.as_slice()), &cfg)?;
    let mu_d = DMatrix::from_column_slice(k, nd, x.as_slice());
    let rewards = RewardPair::new(&model, mu_d, mu_c);
    let response = match last {
        Some((xl, resp)) if xl == x => resp,
        _ => fleet_response(space, scenario, &rewards)?,
    };
    Ok(RewardSolution { rewards, response, trace })
}

/// Profit of the operator for a flow: revenue at market-clearing delivery prices,
/// minus energy cost, teleport penalties and the perturbation cost.
pub fn elo_profit(space: &StateSpace, scenario: &Scenario, flow: &FlowVector, p_c: &DMatrix<f64>) -> Result<f64> {
    let model = DemandModel::from_scenario(scenario);
    let z = model.aggregate(&delivery_flows(space, flow));
    let mu_c = charging_rewards(scenario, p_c)?;
    let x_c = charging_flows(space, flow);
    let energy_cost = -mu_c.component_mul(&x_c).sum();
    Ok(model.revenue(&z) - energy_cost - scenario.params.rho * teleport_flow(space, flow) - perturbation_cost(space, &flow.x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{line_scenario, LineOpts};
    use crate::pumdp::build_state_space;

    fn model() -> DemandModel {
        DemandModel { a: 10.0, b: 5.0, zeta: vec![1000.0, 2000.0], windows: 2, horizon: 5 }
    }

    #[test]
    fn inverse_demand_values() {
        let m = model();
        let z = DMatrix::from_row_slice(1, 2, &[0.0, 2000.0]);
        let p = m.inverse_demand(&z);
        assert_eq!(p[(0, 0)], 5.0);
        assert!((p[(0, 1)] - (10.0 - 5.0 * std::f64::consts::E)).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = model();
        let z = DMatrix::from_row_slice(1, 2, &[300.0, 1500.0]);
        let jac = m.jacobian_diag(&z);
        let h = 1e-3;
        for v in 0..2 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[(0, v)] += h;
            zm[(0, v)] -= h;
            let fd = (m.inverse_demand(&zp)[(0, v)] - m.inverse_demand(&zm)[(0, v)]) / (2.0 * h);
            assert!((fd - jac[(0, v)]).abs() < 1e-6);
        }
    }

    #[test]
    fn marginal_revenue_is_derivative_of_revenue() {
        let m = model();
        let z = DMatrix::from_row_slice(1, 2, &[100.0, 700.0]);
        let mr = m.marginal_revenue(&z);
        let h = 1e-3;
        for v in 0..2 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[(0, v)] += h;
            zm[(0, v)] -= h;
            let fd = (m.revenue(&zp) - m.revenue(&zm)) / (2.0 * h);
            assert!((fd - mr[(0, v)]).abs() < 1e-6);
        }
        assert!(m.revenue_is_concave(&z));
    }

    #[test]
    fn windows_aggregate_and_expand() {
        let m = model();
        let x = DMatrix::from_fn(5, 2, |t, v| (t + 10 * v) as f64);
        let z = m.aggregate(&x);
        // Steps 0..2 fall in window 0, steps 2..5 in window 1.
        assert_eq!(z[(0, 0)], 0.0 + 1.0 + 2.0);
        assert_eq!(z[(1, 1)], 13.0 + 14.0);
        let e = m.expand(&z);
        assert_eq!(e[(4, 1)], z[(1, 1)]);
        assert_eq!(m.max_window_len(), 3);
    }

    #[test]
    fn charging_rewards_follow_prices() {
        let s = line_scenario(LineOpts::default());
        let p = DMatrix::from_fn(5, 2, |t, j| 100.0 + t as f64 + 10.0 * j as f64);
        let mu = charging_rewards(&s, &p).unwrap();
        let unit = s.charge_unit_load();
        for t in 0..5 {
            for c in 0..s.n_charging() {
                assert_eq!(mu[(t, c)], -p[(t, s.charging_load_bus(c))] * unit);
            }
        }
        assert!(charging_rewards(&s, &DMatrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn fixed_point_residual_within_tolerance() {
        let s = line_scenario(LineOpts::default());
        let space = build_state_space(&s).unwrap();
        let p = DMatrix::from_element(5, 2, 114.0);
        let cfg = AaConfig::elo();
        let sol = solve_reward_fixed_point(&space, &s, &p, None, &cfg).unwrap();
        let again = elo_reward_map(&space, &s, &sol.rewards, &p).unwrap();
        assert!((&again.mu_d - &sol.rewards.mu_d).norm() <= cfg.tolerance);
        assert_eq!(again.mu_c, sol.rewards.mu_c);
    }
}
