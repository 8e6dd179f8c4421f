//! Small hand-built instances shared by unit, integration and acceptance tests.

use std::collections::BTreeMap;

use crate::scenario::{
    Branch, Bus, BusKind, Coupling, Generator, LogisticsNetwork, Params, PowerGrid, Scenario, ScenarioFile,
};

/// Options for [`line_scenario`].
#[derive(Debug, Clone)]
pub struct LineOpts {
    pub n_zones: usize,
    pub horizon: usize,
    pub windows: usize,
    pub r_max: u32,
    pub n_max: u32,
    pub phi_soc: u32,
    pub fleet: f64,
    pub rho: f64,
    /// Extra per-unit base load on every load bus.
    pub base_load: f64,
}

impl Default for LineOpts {
    fn default() -> Self {
        LineOpts {
            n_zones: 3,
            horizon: 5,
            windows: 1,
            r_max: 2,
            n_max: 1,
            phi_soc: 1,
            fleet: 1000.0,
            rho: 1e5,
            base_load: 1.0,
        }
    }
}

/// Zones `1 - 2 - ... - n` on a path, depot at zone 1. The depot and the last zone
/// have chargers; every zone but the depot takes deliveries. The grid is a single
/// generator bus feeding two load buses; the depot charges at bus 2 and the far
/// charger at bus 3.
pub fn line_scenario(opts: LineOpts) -> Scenario {
    let n = opts.n_zones.max(1) as u32;
    let zones: Vec<u32> = (1..=n).collect();
    let edges = (1..n).map(|z| [z, z + 1]).collect();
    let mut charging = vec![1];
    if n > 1 {
        charging.push(n);
    }
    let delivery: Vec<u32> = (2..=n).collect();
    let population: BTreeMap<u32, f64> = delivery
        .iter()
        .map(|&z| (z, 2_000.0 + 1_000.0 * z as f64))
        .collect();
    let mut zone_to_bus = BTreeMap::new();
    zone_to_bus.insert(1, 2);
    if n > 1 {
        zone_to_bus.insert(n, 3);
    }
    let file = ScenarioFile {
        logistics: LogisticsNetwork {
            zones,
            edges,
            depot: 1,
            charging_zones: charging,
            delivery_zones: delivery,
            population,
        },
        power: PowerGrid {
            buses: vec![
                Bus { id: 1, kind: BusKind::Gen },
                Bus { id: 2, kind: BusKind::Load },
                Bus { id: 3, kind: BusKind::Load },
            ],
            slack_bus: 1,
            branches: vec![
                Branch { from: 1, to: 2, b: 10.0, fmin: -500.0, fmax: 500.0 },
                Branch { from: 1, to: 3, b: 10.0, fmin: -500.0, fmax: 500.0 },
            ],
            generators: vec![
                Generator { bus: 1, c2: 0.002, c1: 114.4, gmin: 0.0, gmax: 400.0 },
                Generator { bus: 1, c2: 0.004, c1: 116.5, gmin: 0.0, gmax: 400.0 },
            ],
            base_load: vec![vec![opts.base_load; 2]; opts.horizon],
        },
        coupling: Coupling {
            zone_to_bus,
            phi_soc: opts.phi_soc,
            phi_kw: 150.0,
            energy_base_kw: 1000.0,
        },
        params: Params {
            fleet: opts.fleet,
            n_max: opts.n_max,
            r_max: opts.r_max,
            horizon: opts.horizon,
            windows: opts.windows,
            rho: opts.rho,
            ..Params::default()
        },
    };
    Scenario::new(file).expect("line fixture is valid")
}

/// The 3-zone benchmark instance: `T = 6`, `r_max = 3`, `n_max = 2`.
pub fn three_zone_benchmark() -> Scenario {
    line_scenario(LineOpts {
        n_zones: 3,
        horizon: 6,
        windows: 2,
        r_max: 3,
        n_max: 2,
        phi_soc: 1,
        ..LineOpts::default()
    })
}
