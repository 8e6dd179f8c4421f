//! Problem instances: logistics network, power grid, coupling and model parameters.
//!
//! A [`Scenario`] is built either from a JSON document ([`load_scenario`]) or by the
//! seeded generator ([`synth_scenario`]); both routes go through the same validator.
//! Once constructed it is immutable and carries index maps used by the solvers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use petgraph::graph::UnGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ZoneId = u32;
pub type BusId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticsNetwork {
    pub zones: Vec<ZoneId>,
    pub edges: Vec<[ZoneId; 2]>,
    pub depot: ZoneId,
    pub charging_zones: Vec<ZoneId>,
    pub delivery_zones: Vec<ZoneId>,
    pub population: BTreeMap<ZoneId, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Gen,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: BusId,
    pub to: BusId,
    pub b: f64,
    pub fmin: f64,
    pub fmax: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: BusId,
    pub c2: f64,
    pub c1: f64,
    pub gmin: f64,
    pub gmax: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerGrid {
    pub buses: Vec<Bus>,
    pub slack_bus: BusId,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
    /// `base_load[t][j]` is the per-unit load of the j-th load bus (in `buses` order) at step t.
    pub base_load: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub zone_to_bus: BTreeMap<ZoneId, BusId>,
    /// SOC units gained per step of charging.
    pub phi_soc: u32,
    /// Charger power per truck.
    pub phi_kw: f64,
    pub energy_base_kw: f64,
}

/// Model parameters. Missing keys fall back to the reference values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Params {
    #[serde(rename = "Q")]
    pub fleet: f64,
    pub n_max: u32,
    pub r_max: u32,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "K")]
    pub windows: usize,
    pub delta_h: f64,
    pub rho: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub demand_a: f64,
    pub demand_b: f64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            fleet: 1000.0,
            n_max: 10,
            r_max: 12,
            horizon: 32,
            windows: 4,
            delta_h: 0.25,
            rho: 1e5,
            eps1: 1e-6,
            eps2: 1e-4,
            demand_a: 10.0,
            demand_b: 5.0,
        }
    }
}

/// On-disk layout of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub logistics: LogisticsNetwork,
    pub power: PowerGrid,
    pub coupling: Coupling,
    pub params: Params,
}

/// Dense index maps derived during validation.
#[derive(Debug, Clone)]
struct Index {
    zone_pos: HashMap<ZoneId, usize>,
    adjacency: Vec<Vec<usize>>,
    depot: usize,
    charging_pos: Vec<Option<usize>>,
    delivery_pos: Vec<Option<usize>>,
    charging_zone_idx: Vec<usize>,
    delivery_zone_idx: Vec<usize>,
    zeta: Vec<f64>,
    bus_pos: HashMap<BusId, usize>,
    load_buses: Vec<usize>,
    gen_buses: Vec<usize>,
    slack: usize,
    /// Load-bus position for each charging zone position.
    charging_load_bus: Vec<usize>,
}

/// A validated, immutable problem instance.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub logistics: LogisticsNetwork,
    pub power: PowerGrid,
    pub coupling: Coupling,
    pub params: Params,
    index: Index,
}

impl PartialEq for Scenario {
    fn eq(&self, other: &Self) -> bool {
        self.logistics == other.logistics
            && self.power == other.power
            && self.coupling == other.coupling
            && self.params == other.params
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let text = std::fs::read_to_string(path.as_ref())?;
    Scenario::from_json(&text)
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, scenario.to_json())?;
    Ok(())
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ScenarioFile = serde_json::from_str(text).map_err(|e| {
            let field = json_error_field(&e.to_string());
            Error::schema(field, e.to_string())
        })?;
        Scenario::new(file)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_file()).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn to_file(&self) -> ScenarioFile {
        ScenarioFile {
            logistics: self.logistics.clone(),
            power: self.power.clone(),
            coupling: self.coupling.clone(),
            params: self.params.clone(),
        }
    }

    pub fn new(file: ScenarioFile) -> Result<Self> {
        let index = validate(&file)?;
        let ScenarioFile {
            logistics,
            power,
            coupling,
            params,
        } = file;
        Ok(Scenario {
            logistics,
            power,
            coupling,
            params,
            index,
        })
    }

    /// Returns a copy with modified parameters, re-validated.
    pub fn with_params(&self, f: impl FnOnce(&mut Params)) -> Result<Self> {
        let mut file = self.to_file();
        f(&mut file.params);
        if file.power.base_load.len() != file.params.horizon {
            resize_base_load(&mut file.power.base_load, file.params.horizon);
        }
        Scenario::new(file)
    }

    pub fn n_zones(&self) -> usize {
        self.logistics.zones.len()
    }
    pub fn zone_id(&self, idx: usize) -> ZoneId {
        self.logistics.zones[idx]
    }
    pub fn zone_index(&self, id: ZoneId) -> Option<usize> {
        self.index.zone_pos.get(&id).copied()
    }
    /// Neighbours of a zone (zone indices, ascending).
    pub fn neighbors(&self, zone: usize) -> &[usize] {
        &self.index.adjacency[zone]
    }
    pub fn depot(&self) -> usize {
        self.index.depot
    }
    /// Position of a zone in `charging_zones`, if it has a charger.
    pub fn charging_pos(&self, zone: usize) -> Option<usize> {
        self.index.charging_pos[zone]
    }
    /// Position of a zone in `delivery_zones`, if it receives deliveries.
    pub fn delivery_pos(&self, zone: usize) -> Option<usize> {
        self.index.delivery_pos[zone]
    }
    /// Zone index of each charging zone, in `charging_zones` order.
    pub fn charging_zone_indices(&self) -> &[usize] {
        &self.index.charging_zone_idx
    }
    pub fn delivery_zone_indices(&self) -> &[usize] {
        &self.index.delivery_zone_idx
    }
    pub fn n_charging(&self) -> usize {
        self.index.charging_zone_idx.len()
    }
    pub fn n_delivery(&self) -> usize {
        self.index.delivery_zone_idx.len()
    }
    /// Population of each delivery zone, in `delivery_zones` order.
    pub fn zeta(&self) -> &[f64] {
        &self.index.zeta
    }

    pub fn n_buses(&self) -> usize {
        self.power.buses.len()
    }
    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.index.bus_pos.get(&id).copied()
    }
    /// Bus indices of load buses, in `buses` order.
    pub fn load_buses(&self) -> &[usize] {
        &self.index.load_buses
    }
    pub fn gen_buses(&self) -> &[usize] {
        &self.index.gen_buses
    }
    pub fn n_load_buses(&self) -> usize {
        self.index.load_buses.len()
    }
    pub fn slack(&self) -> usize {
        self.index.slack
    }
    /// Load-bus position serving a charging zone position.
    pub fn charging_load_bus(&self, charging_pos: usize) -> usize {
        self.index.charging_load_bus[charging_pos]
    }

    /// Delivery window of a time step: `floor(t * K / T)`.
    pub fn window_of(&self, t: usize) -> usize {
        t * self.params.windows / self.params.horizon
    }

    /// Per-unit load drawn by one truck over one step of charging.
    pub fn charge_unit_load(&self) -> f64 {
        self.coupling.phi_kw * self.params.delta_h / self.coupling.energy_base_kw
    }

    /// Base load as a `T x |load buses|` matrix.
    pub fn base_load_matrix(&self) -> nalgebra::DMatrix<f64> {
        let t = self.params.horizon;
        let n = self.n_load_buses();
        nalgebra::DMatrix::from_fn(t, n, |i, j| self.power.base_load[i][j])
    }
}

fn resize_base_load(rows: &mut Vec<Vec<f64>>, horizon: usize) {
    if rows.is_empty() {
        return;
    }
    let old = rows.clone();
    *rows = (0..horizon)
        .map(|t| old[t * old.len() / horizon.max(1)].clone())
        .collect();
}

fn json_error_field(msg: &str) -> String {
    // serde_json reports "missing field `x`" / "unknown field `x`"; fall back to the document.
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".to_string())
}

fn finite_pos(field: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::schema(field, format!("must be finite and > 0, got {x}")))
    }
}

fn validate(file: &ScenarioFile) -> Result<Index> {
    let p = &file.params;
    if !(p.fleet.is_finite() && p.fleet >= 0.0) {
        return Err(Error::schema("params.Q", "must be finite and >= 0"));
    }
    for (name, v) in [
        ("params.n_max", p.n_max as usize),
        ("params.r_max", p.r_max as usize),
        ("params.T", p.horizon),
        ("params.K", p.windows),
    ] {
        if v == 0 {
            return Err(Error::schema(name, "must be a positive integer"));
        }
    }
    if p.windows > p.horizon {
        return Err(Error::schema("params.K", "must not exceed T"));
    }
    finite_pos("params.delta_h", p.delta_h)?;
    finite_pos("params.rho", p.rho)?;
    finite_pos("params.eps1", p.eps1)?;
    finite_pos("params.eps2", p.eps2)?;
    finite_pos("params.demand_b", p.demand_b)?;
    if !p.demand_a.is_finite() {
        return Err(Error::schema("params.demand_a", "must be finite"));
    }

    // Logistics network.
    let lg = &file.logistics;
    if lg.zones.is_empty() {
        return Err(Error::schema("logistics.zones", "must not be empty"));
    }
    let mut zone_pos = HashMap::new();
    for (i, &z) in lg.zones.iter().enumerate() {
        if zone_pos.insert(z, i).is_some() {
            return Err(Error::schema("logistics.zones", format!("duplicate zone {z}")));
        }
    }
    let nz = lg.zones.len();
    let zpos = |field: &str, z: ZoneId| -> Result<usize> {
        zone_pos
            .get(&z)
            .copied()
            .ok_or_else(|| Error::schema(field, format!("unknown zone {z}")))
    };
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nz];
    for &[a, b] in &lg.edges {
        let (ia, ib) = (zpos("logistics.edges", a)?, zpos("logistics.edges", b)?);
        if ia == ib {
            return Err(Error::schema("logistics.edges", format!("self-loop at zone {a}")));
        }
        adj[ia].insert(ib);
        adj[ib].insert(ia);
    }
    let adjacency: Vec<Vec<usize>> = adj.into_iter().map(|s| s.into_iter().collect()).collect();
    if !is_connected(nz, adjacency.iter().enumerate().flat_map(|(i, ns)| ns.iter().map(move |&j| (i, j)))) {
        return Err(Error::Validation("logistics network is not connected".into()));
    }
    let depot = zpos("logistics.depot", lg.depot)?;

    let mut charging_pos = vec![None; nz];
    let mut charging_zone_idx = Vec::new();
    for &z in &lg.charging_zones {
        let i = zpos("logistics.charging_zones", z)?;
        if charging_pos[i].is_some() {
            return Err(Error::schema("logistics.charging_zones", format!("duplicate zone {z}")));
        }
        charging_pos[i] = Some(charging_zone_idx.len());
        charging_zone_idx.push(i);
    }
    if charging_pos[depot].is_none() {
        return Err(Error::Validation(format!(
            "depot zone {} must offer charging",
            lg.depot
        )));
    }
    let mut delivery_pos = vec![None; nz];
    let mut delivery_zone_idx = Vec::new();
    let mut zeta = Vec::new();
    for &z in &lg.delivery_zones {
        let i = zpos("logistics.delivery_zones", z)?;
        if delivery_pos[i].is_some() {
            return Err(Error::schema("logistics.delivery_zones", format!("duplicate zone {z}")));
        }
        let pop = lg
            .population
            .get(&z)
            .copied()
            .ok_or_else(|| Error::schema("logistics.population", format!("missing population for delivery zone {z}")))?;
        finite_pos(&format!("logistics.population.{z}"), pop)?;
        delivery_pos[i] = Some(delivery_zone_idx.len());
        delivery_zone_idx.push(i);
        zeta.push(pop);
    }
    for (&z, &pop) in &lg.population {
        zpos("logistics.population", z)?;
        finite_pos(&format!("logistics.population.{z}"), pop)?;
    }

    // Power grid.
    let pg = &file.power;
    let mut bus_pos = HashMap::new();
    let mut load_buses = Vec::new();
    let mut gen_buses = Vec::new();
    for (i, b) in pg.buses.iter().enumerate() {
        if bus_pos.insert(b.id, i).is_some() {
            return Err(Error::schema("power.buses", format!("duplicate bus {}", b.id)));
        }
        match b.kind {
            BusKind::Gen => gen_buses.push(i),
            BusKind::Load => load_buses.push(i),
        }
    }
    if gen_buses.is_empty() || load_buses.is_empty() {
        return Err(Error::schema(
            "power.buses",
            "need at least one generator bus and one load bus",
        ));
    }
    let bpos = |field: &str, b: BusId| -> Result<usize> {
        bus_pos
            .get(&b)
            .copied()
            .ok_or_else(|| Error::schema(field, format!("unknown bus {b}")))
    };
    let slack = bpos("power.slack_bus", pg.slack_bus)?;
    if pg.buses[slack].kind != BusKind::Gen {
        return Err(Error::schema("power.slack_bus", "slack bus must be a generator bus"));
    }
    let mut bus_edges = Vec::new();
    for (e, br) in pg.branches.iter().enumerate() {
        let field = format!("power.branches[{e}]");
        let (f, t) = (bpos(&field, br.from)?, bpos(&field, br.to)?);
        if f == t {
            return Err(Error::schema(field, "branch endpoints must differ"));
        }
        finite_pos(&format!("{field}.b"), br.b)?;
        if !(br.fmin.is_finite() && br.fmax.is_finite() && br.fmin <= 0.0 && br.fmax >= 0.0) {
            return Err(Error::schema(field, "flow limits must be finite with fmin <= 0 <= fmax"));
        }
        bus_edges.push((f, t));
    }
    if !is_connected(pg.buses.len(), bus_edges.iter().copied()) {
        return Err(Error::Validation("power grid is not connected".into()));
    }
    for (k, g) in pg.generators.iter().enumerate() {
        let field = format!("power.generators[{k}]");
        let b = bpos(&field, g.bus)?;
        if pg.buses[b].kind != BusKind::Gen {
            return Err(Error::schema(field, format!("bus {} is not a generator bus", g.bus)));
        }
        finite_pos(&format!("{field}.c2"), g.c2)?;
        finite_pos(&format!("{field}.c1"), g.c1)?;
        if !(g.gmin.is_finite() && g.gmax.is_finite() && g.gmin <= g.gmax) {
            return Err(Error::schema(field, "generation bounds must be finite with gmin <= gmax"));
        }
    }
    if pg.generators.is_empty() {
        return Err(Error::schema("power.generators", "must not be empty"));
    }
    if pg.base_load.len() != p.horizon {
        return Err(Error::schema(
            "power.base_load",
            format!("expected {} rows (T), got {}", p.horizon, pg.base_load.len()),
        ));
    }
    for (t, row) in pg.base_load.iter().enumerate() {
        if row.len() != load_buses.len() {
            return Err(Error::schema(
                format!("power.base_load[{t}]"),
                format!("expected {} entries (load buses), got {}", load_buses.len(), row.len()),
            ));
        }
        if row.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::schema(format!("power.base_load[{t}]"), "loads must be finite and >= 0"));
        }
    }

    // Coupling.
    let cp = &file.coupling;
    if cp.phi_soc == 0 {
        return Err(Error::schema("coupling.phi_soc", "must be >= 1"));
    }
    if cp.phi_soc > p.r_max {
        return Err(Error::schema("coupling.phi_soc", "must not exceed r_max"));
    }
    finite_pos("coupling.phi_kw", cp.phi_kw)?;
    finite_pos("coupling.energy_base_kw", cp.energy_base_kw)?;
    let mut load_pos = vec![None; pg.buses.len()];
    for (j, &b) in load_buses.iter().enumerate() {
        load_pos[b] = Some(j);
    }
    for (&z, &b) in &cp.zone_to_bus {
        zpos("coupling.zone_to_bus", z)?;
        let bi = bpos("coupling.zone_to_bus", b)?;
        if load_pos[bi].is_none() {
            return Err(Error::schema("coupling.zone_to_bus", format!("bus {b} is not a load bus")));
        }
    }
    let mut charging_load_bus = Vec::with_capacity(charging_zone_idx.len());
    for &zi in &charging_zone_idx {
        let z = lg.zones[zi];
        let b = cp.zone_to_bus.get(&z).ok_or_else(|| {
            Error::schema("coupling.zone_to_bus", format!("charging zone {z} has no bus"))
        })?;
        charging_load_bus.push(load_pos[bus_pos[b]].expect("checked above"));
    }

    Ok(Index {
        zone_pos,
        adjacency,
        depot,
        charging_pos,
        delivery_pos,
        charging_zone_idx,
        delivery_zone_idx,
        zeta,
        bus_pos,
        load_buses,
        gen_buses,
        slack,
        charging_load_bus,
    })
}

fn is_connected(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> bool {
    let mut g: UnGraph<(), ()> = UnGraph::with_capacity(n, 0);
    for _ in 0..n {
        g.add_node(());
    }
    for (a, b) in edges {
        g.add_edge((a as u32).into(), (b as u32).into(), ());
    }
    petgraph::algo::connected_components(&g) <= 1
}

// ---------------------------------------------------------------------------
// Synthetic instances
// ---------------------------------------------------------------------------

/// Generator cost classes `(c2, c1)`: wood and diesel/fuel oil.
pub const WOOD_COST: (f64, f64) = (0.002, 114.4);
pub const DIESEL_COST: (f64, f64) = (0.004, 116.5);

/// Generates a connected, validated scenario deterministically from `seed`.
///
/// Zones and buses are scattered on the unit square and wired by a minimum spanning
/// tree plus nearest-neighbour links. Charging zones map to their nearest load bus.
/// Parameters are the reference defaults.
pub fn synth_scenario(seed: u64, n_zones: usize, n_buses: usize) -> Result<Scenario> {
    if n_zones < 1 {
        return Err(Error::schema("n_zones", "must be >= 1"));
    }
    if n_buses < 2 {
        return Err(Error::schema("n_buses", "must be >= 2 (one generator and one load bus)"));
    }
    if n_zones > 10_000 || n_buses > 10_000 {
        return Err(Error::schema("n_zones/n_buses", "must be <= 10000"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = Params::default();

    // Logistics network.
    let zone_xy: Vec<(f64, f64)> = (0..n_zones).map(|_| (rng.gen(), rng.gen())).collect();
    let zones: Vec<ZoneId> = (1..=n_zones as u32).collect();
    let depot = (0..n_zones)
        .min_by(|&a, &b| {
            dist(zone_xy[a], (0.5, 0.5))
                .partial_cmp(&dist(zone_xy[b], (0.5, 0.5)))
                .unwrap()
        })
        .unwrap();
    let zone_edges = spatial_edges(&zone_xy, 2);
    let edges = zone_edges
        .iter()
        .map(|&(a, b)| [zones[a], zones[b]])
        .collect();
    let mut others: Vec<usize> = (0..n_zones).filter(|&z| z != depot).collect();
    shuffle(&mut others, &mut rng);
    let n_extra_chargers = (n_zones as f64 / 4.0).round() as usize;
    let mut charging: Vec<usize> = std::iter::once(depot)
        .chain(others.iter().copied().take(n_extra_chargers.min(others.len())))
        .collect();
    charging[1..].sort_unstable();
    let delivery: Vec<usize> = (0..n_zones).filter(|&z| z != depot).collect();
    let population = delivery
        .iter()
        .map(|&z| (zones[z], (rng.gen_range(10_000.0..50_000.0f64)).round()))
        .collect();

    // Power grid.
    let bus_xy: Vec<(f64, f64)> = (0..n_buses).map(|_| (rng.gen(), rng.gen())).collect();
    let n_gen_bus = ((n_buses as f64 * 0.4).round() as usize).clamp(1, n_buses - 1);
    let buses: Vec<Bus> = (0..n_buses)
        .map(|i| Bus {
            id: i as BusId + 1,
            kind: if i < n_gen_bus { BusKind::Gen } else { BusKind::Load },
        })
        .collect();
    let n_load = n_buses - n_gen_bus;

    let n_gen = ((n_buses as f64 * 45.0 / 37.0).round() as usize).max(n_gen_bus);
    let mut generators = Vec::with_capacity(n_gen);
    let unit_mw = 150.0 * params.delta_h / 1000.0;
    let fleet_cap = params.fleet * unit_mw;
    let levels: Vec<f64> = (0..n_load).map(|_| rng.gen_range(20.0..80.0)).collect();
    let peak_total: f64 = levels.iter().sum::<f64>() * 1.1;
    let capacity_target = 1.6 * (peak_total + fleet_cap);
    for k in 0..n_gen {
        let (c2, c1) = if rng.gen_bool(0.4) { WOOD_COST } else { DIESEL_COST };
        generators.push(Generator {
            bus: (k % n_gen_bus) as BusId + 1,
            c2: c2 * (1.0 + rng.gen_range(-0.1..0.1)),
            c1: c1 * (1.0 + rng.gen_range(-0.01..0.01)),
            gmin: 0.0,
            gmax: 0.0,
        });
    }
    let weights: Vec<f64> = (0..n_gen).map(|_| rng.gen_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    for (g, w) in generators.iter_mut().zip(&weights) {
        g.gmax = (capacity_target * w / wsum * 10.0).round() / 10.0;
    }

    let bus_edges = spatial_edges(&bus_xy, 2);
    let limit = (capacity_target * 2.0).ceil();
    let branches = bus_edges
        .iter()
        .map(|&(a, b)| {
            let d = dist(bus_xy[a], bus_xy[b]);
            Branch {
                from: a as BusId + 1,
                to: b as BusId + 1,
                b: ((1.0 / (0.05 + 0.2 * d)) * 100.0).round() / 100.0,
                fmin: -limit,
                fmax: limit,
            }
        })
        .collect();

    let base_load = (0..params.horizon)
        .map(|t| {
            let shape = midday_profile(t, params.horizon, params.delta_h);
            levels.iter().map(|l| round6(l * shape)).collect()
        })
        .collect();

    let load_bus_idx: Vec<usize> = (n_gen_bus..n_buses).collect();
    let zone_to_bus = charging
        .iter()
        .map(|&z| {
            let nearest = *load_bus_idx
                .iter()
                .min_by(|&&a, &&b| {
                    dist(zone_xy[z], bus_xy[a])
                        .partial_cmp(&dist(zone_xy[z], bus_xy[b]))
                        .unwrap()
                })
                .unwrap();
            (zones[z], nearest as BusId + 1)
        })
        .collect();

    let file = ScenarioFile {
        logistics: LogisticsNetwork {
            zones: zones.clone(),
            edges,
            depot: zones[depot],
            charging_zones: charging.iter().map(|&z| zones[z]).collect(),
            delivery_zones: delivery.iter().map(|&z| zones[z]).collect(),
            population,
        },
        power: PowerGrid {
            buses,
            slack_bus: 1,
            branches,
            generators,
            base_load,
        },
        coupling: Coupling {
            zone_to_bus,
            phi_soc: 3,
            phi_kw: 150.0,
            energy_base_kw: 1000.0,
        },
        params,
    };
    Scenario::new(file)
}

/// Load multiplier with a mild peak around midday for a horizon starting at 08:00.
fn midday_profile(t: usize, horizon: usize, delta_h: f64) -> f64 {
    let span_h = horizon as f64 * delta_h;
    let hour = 8.0 + (t as f64 + 0.5) * delta_h * 8.0 / span_h.max(1e-9);
    1.0 + 0.08 * (-((hour - 12.0) / 1.5).powi(2)).exp()
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Minimum spanning tree (Prim) plus links to the `k` nearest neighbours.
fn spatial_edges(xy: &[(f64, f64)], k: usize) -> Vec<(usize, usize)> {
    let n = xy.len();
    let mut edges = BTreeSet::new();
    if n <= 1 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![(f64::INFINITY, 0usize); n];
    in_tree[0] = true;
    for j in 1..n {
        best[j] = (dist(xy[0], xy[j]), 0);
    }
    for _ in 1..n {
        let j = (0..n)
            .filter(|&j| !in_tree[j])
            .min_by(|&a, &b| best[a].0.partial_cmp(&best[b].0).unwrap())
            .unwrap();
        in_tree[j] = true;
        let p = best[j].1;
        edges.insert((p.min(j), p.max(j)));
        for m in 0..n {
            if !in_tree[m] {
                let d = dist(xy[j], xy[m]);
                if d < best[m].0 {
                    best[m] = (d, j);
                }
            }
        }
    }
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| dist(xy[i], xy[a]).partial_cmp(&dist(xy[i], xy[b])).unwrap());
        for &j in order.iter().take(k) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    edges.into_iter().collect()
}
