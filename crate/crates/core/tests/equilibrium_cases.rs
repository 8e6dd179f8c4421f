//! Coupled price equilibrium on the bundled small scenario and the radial fixture.

mod common;

use std::time::Instant;

use nalgebra::DMatrix;

use common::bundled;
use elogrid::anderson::AaConfig;
use elogrid::dcopf::{solve_instances, solve_opf_horizon, OpfInstance};
use elogrid::equilibrium::{baseline_lmp, solve_equilibrium, solve_equilibrium_with, EquilibriumResult};
use elogrid::fixtures::{line_scenario, LineOpts};
use elogrid::pumdp::{build_state_space, charging_flows, charging_load};
use elogrid::reward_design::solve_reward_fixed_point;
use elogrid::scenario::Scenario;
use elogrid::Error;

fn solve(s: &Scenario) -> EquilibriumResult {
    solve_equilibrium(s, &AaConfig::elo(), &AaConfig::equilibrium()).unwrap()
}

#[test]
fn small_scenario_converges() {
    let s = bundled("small.json");
    assert_eq!((s.n_zones(), s.n_buses(), s.params.horizon), (4, 3, 8));
    let start = Instant::now();
    let r = solve(&s);
    let elapsed = start.elapsed().as_secs_f64();
    assert!(r.residual() <= 1e-4);
    assert!(r.outer_trace.iterations() <= 50);
    assert!(elapsed < 30.0);

    // Re-evaluate the price map at p* from scratch: fresh inner solve, fresh dispatch.
    let space = build_state_space(&s).unwrap();
    let inner = solve_reward_fixed_point(&space, &s, &r.prices, None, &AaConfig::elo()).unwrap();
    let load = s.base_load_matrix() + charging_load(&s, &inner.response.x_c);
    let (_, h) = solve_opf_horizon(&s, &load).unwrap();
    assert!((&r.prices - h).norm() <= 1e-4);

    assert!(r.generation_cost() >= r.baseline_cost());
}

#[test]
fn different_starting_prices_reach_the_same_equilibrium() {
    let s = bundled("small.json");
    let space = build_state_space(&s).unwrap();
    let (elo, eqn) = (AaConfig::elo(), AaConfig::equilibrium());
    let a = solve_equilibrium_with(&s, &space, None, &elo, &eqn).unwrap();
    let (_, base) = baseline_lmp(&s).unwrap();
    let p0 = DMatrix::from_fn(base.nrows(), base.ncols(), |t, j| base[(t, j)] * (1.03 + 0.01 * ((t + j) % 3) as f64));
    let b = solve_equilibrium_with(&s, &space, Some(&p0), &elo, &eqn).unwrap();
    assert!((&a.prices - &b.prices).norm() <= 1e-3);
}

#[test]
fn idle_fleet_reproduces_baseline_exactly() {
    let s = bundled("small.json").with_params(|p| p.fleet = 0.0).unwrap();
    let r = solve(&s);
    assert_eq!(r.prices, r.baseline);
    assert_eq!(r.opf, r.baseline_opf);
    assert_eq!(r.generation_cost(), r.baseline_cost());
}

#[test]
fn result_bundle_is_self_consistent() {
    let s = bundled("small.json");
    let r = solve(&s);
    let space = build_state_space(&s).unwrap();
    assert_eq!(charging_flows(&space, &r.response.flow), r.response.x_c);
    let load = s.base_load_matrix() + charging_load(&s, &r.response.x_c);
    assert_eq!(load, r.load);
    let (sols, prices) = solve_instances(&OpfInstance::from_scenario(&s), &load).unwrap();
    assert_eq!(sols, r.opf);
    let h = DMatrix::from_fn(prices.nrows(), prices.ncols(), |t, j| r.opf[t].lambda_l[j]);
    assert_eq!(prices, h);

    let cap = s.params.fleet * s.charge_unit_load();
    let extra = &r.load - s.base_load_matrix();
    assert!(extra.iter().all(|&l| (0.0..=cap).contains(&l)));
}

#[test]
fn charging_never_lowers_prices_on_radial_grid() {
    let s = line_scenario(LineOpts { horizon: 8, r_max: 3, n_max: 2, windows: 2, ..LineOpts::default() });
    let r = solve(&s);
    let extra = &r.load - s.base_load_matrix();
    let mut charged = 0;
    for t in 0..extra.nrows() {
        for j in 0..extra.ncols() {
            if extra[(t, j)] > 0.0 {
                charged += 1;
                assert!(r.prices[(t, j)] >= r.baseline[(t, j)] - 1e-6, "t {t} bus {j}");
            }
        }
    }
    assert!(charged > 0);
    assert!(r.generation_cost() >= r.baseline_cost());
}

#[test]
fn overloaded_grid_names_step_and_bus() {
    let s = bundled("small.json").with_params(|p| p.fleet = 1e7).unwrap();
    match solve_equilibrium(&s, &AaConfig::elo(), &AaConfig::equilibrium()) {
        Err(Error::OpfInfeasible { t, bus, .. }) => {
            assert!(t.is_some());
            let bus = bus.expect("bus named");
            assert!(s.power.buses.iter().any(|b| b.id == bus));
        }
        other => panic!("{:?}", other.map(|r| r.residual())),
    }
}
