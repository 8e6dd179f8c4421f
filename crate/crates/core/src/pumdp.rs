//! Finite-horizon perturbed-utility MDP for a single e-truck.
//!
//! States are `(t, zone, soc, stops_left, charge_left)`; every transition is
//! deterministic. Under the entropy perturbation `F(pi) = pi . (ln pi - 1)` the
//! per-state problem has the closed form `V = logsumexp(Q) + 1`, `pi = softmax(Q)`,
//! which [`solve_values`] applies layer by layer from the horizon backwards.
//! [`propagate_flows`] then pushes the fleet forward through the optimal policy.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scenario::Scenario;

pub const DEFAULT_STATE_CAP: usize = 20_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TruckState {
    pub t: u16,
    /// Zone index (position in the scenario's zone list).
    pub zone: u16,
    pub soc: u8,
    pub stops_left: u8,
    /// Remaining steps of an ongoing charge.
    pub charge_left: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TruckAction {
    /// Stay put; continues an ongoing charge when `charge_left > 0`.
    Idle,
    Deliver,
    Charge { soc_gain: u8, steps: u8 },
    /// Move to an adjacent zone. Moving into the depot starts a new shift.
    Move { to: u16 },
    /// Penalised jump to the depot with a full battery.
    Teleport,
}

impl TruckAction {
    pub fn label(&self) -> String {
        match self {
            TruckAction::Idle => "idle".into(),
            TruckAction::Deliver => "deliver".into(),
            TruckAction::Charge { soc_gain, steps } => format!("charge:{soc_gain}:{steps}"),
            TruckAction::Move { to } => format!("move:{to}"),
            TruckAction::Teleport => "teleport".into(),
        }
    }
}

/// Which reward component a state-action draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardSlot {
    None,
    Delivery { t: u16, pos: u16 },
    /// One truck-step of charging at `(t, charging zone position)`.
    Charging { t: u16, pos: u16 },
    Teleport,
}

/// Static description of the MDP dynamics needed to enumerate states.
#[derive(Debug, Clone)]
struct Dynamics {
    horizon: usize,
    depot: usize,
    r_max: u8,
    n_max: u8,
    phi_soc: u8,
    adjacency: Vec<Vec<u16>>,
    charging_pos: Vec<Option<u16>>,
    delivery_pos: Vec<Option<u16>>,
}

impl Dynamics {
    fn from_scenario(s: &Scenario) -> Result<Self> {
        let p = &s.params;
        if p.r_max > u8::MAX as u32 || p.n_max > u8::MAX as u32 {
            return Err(Error::Contract("r_max and n_max must fit in 8 bits".into()));
        }
        if p.horizon >= u16::MAX as usize || s.n_zones() >= u16::MAX as usize {
            return Err(Error::Contract("horizon and zone count must fit in 16 bits".into()));
        }
        Ok(Dynamics {
            horizon: p.horizon,
            depot: s.depot(),
            r_max: p.r_max as u8,
            n_max: p.n_max as u8,
            phi_soc: s.coupling.phi_soc as u8,
            adjacency: (0..s.n_zones())
                .map(|z| s.neighbors(z).iter().map(|&v| v as u16).collect())
                .collect(),
            charging_pos: (0..s.n_zones()).map(|z| s.charging_pos(z).map(|p| p as u16)).collect(),
            delivery_pos: (0..s.n_zones()).map(|z| s.delivery_pos(z).map(|p| p as u16)).collect(),
        })
    }

    fn initial(&self) -> TruckState {
        TruckState {
            t: 0,
            zone: self.depot as u16,
            soc: self.r_max,
            stops_left: self.n_max,
            charge_left: 0,
        }
    }

    fn charges(&self, s: &TruckState, out: &mut Vec<TruckAction>) {
        let phi = self.phi_soc as u32;
        let mut steps = 1u32;
        while s.t as u32 + steps < self.horizon as u32 && s.soc as u32 + steps * phi <= self.r_max as u32 {
            out.push(TruckAction::Charge {
                soc_gain: (steps * phi) as u8,
                steps: steps as u8,
            });
            steps += 1;
        }
    }

    fn feasible(&self, s: &TruckState, out: &mut Vec<TruckAction>) {
        out.clear();
        let t = s.t as usize;
        if t >= self.horizon {
            return;
        }
        if s.charge_left > 0 {
            out.push(TruckAction::Idle);
            return;
        }
        let zone = s.zone as usize;
        if t + 1 == self.horizon {
            if zone == self.depot && s.soc == self.r_max {
                out.push(TruckAction::Idle);
            } else {
                out.push(TruckAction::Teleport);
            }
            return;
        }
        let can_charge = self.charging_pos[zone].is_some();
        out.push(TruckAction::Idle);
        if s.soc == 0 {
            if can_charge {
                self.charges(s, out);
            }
            return;
        }
        if s.stops_left > 0 && self.delivery_pos[zone].is_some() {
            out.push(TruckAction::Deliver);
        }
        if can_charge {
            self.charges(s, out);
        }
        for &to in &self.adjacency[zone] {
            out.push(TruckAction::Move { to });
        }
    }

    fn is_feasible(&self, s: &TruckState, a: &TruckAction) -> bool {
        let mut buf = Vec::new();
        self.feasible(s, &mut buf);
        buf.contains(a)
    }

    /// Successor of a feasible action (no feasibility check).
    fn step(&self, s: &TruckState, a: &TruckAction) -> TruckState {
        let t = s.t + 1;
        match *a {
            TruckAction::Idle => TruckState {
                t,
                charge_left: s.charge_left.saturating_sub(1),
                ..*s
            },
            TruckAction::Deliver => TruckState {
                t,
                soc: s.soc - 1,
                stops_left: s.stops_left - 1,
                ..*s
            },
            TruckAction::Charge { soc_gain, steps } => TruckState {
                t,
                soc: s.soc + soc_gain,
                charge_left: steps - 1,
                ..*s
            },
            TruckAction::Move { to } => TruckState {
                t,
                zone: to,
                soc: s.soc - 1,
                stops_left: if to as usize == self.depot { self.n_max } else { s.stops_left },
                charge_left: s.charge_left,
            },
            TruckAction::Teleport => TruckState {
                t,
                zone: self.depot as u16,
                soc: self.r_max,
                stops_left: self.n_max,
                charge_left: 0,
            },
        }
    }

    fn slot(&self, s: &TruckState, a: &TruckAction) -> RewardSlot {
        let zone = s.zone as usize;
        match a {
            TruckAction::Deliver => RewardSlot::Delivery {
                t: s.t,
                pos: self.delivery_pos[zone].expect("deliver only in delivery zones"),
            },
            TruckAction::Charge { .. } => RewardSlot::Charging {
                t: s.t,
                pos: self.charging_pos[zone].expect("charge only in charging zones"),
            },
            TruckAction::Idle if s.charge_left > 0 => RewardSlot::Charging {
                t: s.t,
                pos: self.charging_pos[zone].expect("in-charging only in charging zones"),
            },
            TruckAction::Teleport => RewardSlot::Teleport,
            _ => RewardSlot::None,
        }
    }

    fn tau_cap(&self) -> usize {
        (self.r_max / self.phi_soc).saturating_sub(1) as usize
    }

    fn key(&self, s: &TruckState) -> usize {
        let r = self.r_max as usize + 1;
        let n = self.n_max as usize + 1;
        let tau = self.tau_cap() + 1;
        ((s.zone as usize * r + s.soc as usize) * n + s.stops_left as usize) * tau + s.charge_left as usize
    }

    fn key_space(&self) -> usize {
        self.adjacency.len() * (self.r_max as usize + 1) * (self.n_max as usize + 1) * (self.tau_cap() + 1)
    }
}

/// Feasible actions in a state, in canonical order: idle, deliver, charges, moves, teleport.
pub fn feasible_actions(scenario: &Scenario, state: &TruckState) -> Result<Vec<TruckAction>> {
    let dyn_ = Dynamics::from_scenario(scenario)?;
    let mut out = Vec::new();
    dyn_.feasible(state, &mut out);
    Ok(out)
}

/// Deterministic successor of `state` under `action`.
pub fn transition(scenario: &Scenario, state: &TruckState, action: &TruckAction) -> Result<TruckState> {
    let dyn_ = Dynamics::from_scenario(scenario)?;
    if !dyn_.is_feasible(state, action) {
        return Err(Error::Contract(format!(
            "action {} is not feasible in state {state:?}",
            action.label()
        )));
    }
    Ok(dyn_.step(state, action))
}

/// Reachable states with their feasible actions, laid out in time layers.
#[derive(Debug, Clone)]
pub struct StateSpace {
    dynamics: Dynamics,
    n_delivery: usize,
    n_charging: usize,
    states: Vec<TruckState>,
    layer_start: Vec<usize>,
    action_start: Vec<usize>,
    actions: Vec<TruckAction>,
    next: Vec<u32>,
    owner: Vec<u32>,
    slots: Vec<RewardSlot>,
    lookup: Vec<u32>,
}

const NONE: u32 = u32::MAX;

/// Enumerates the states reachable from the initial state `(0, depot, r_max, n_max, 0)`.
pub fn build_state_space(scenario: &Scenario) -> Result<StateSpace> {
    build_state_space_capped(scenario, DEFAULT_STATE_CAP)
}

pub fn build_state_space_capped(scenario: &Scenario, cap: usize) -> Result<StateSpace> {
    let dyn_ = Dynamics::from_scenario(scenario)?;
    let horizon = dyn_.horizon;
    let key_space = dyn_.key_space();
    let mut lookup = vec![NONE; (horizon + 1) * key_space];

    let s0 = dyn_.initial();
    let mut states = vec![s0];
    lookup[dyn_.key(&s0)] = 0;
    let mut layer_start = vec![0usize, 1];
    let mut action_start = vec![0usize];
    let mut actions = Vec::new();
    let mut next = Vec::new();
    let mut slots = Vec::new();
    let mut owner = Vec::new();
    let mut buf = Vec::new();

    for t in 0..horizon {
        let (lo, hi) = (layer_start[t], layer_start[t + 1]);
        let table = &mut lookup[(t + 1) * key_space..(t + 2) * key_space];
        let mut new_states = Vec::new();
        for si in lo..hi {
            let s = states[si];
            dyn_.feasible(&s, &mut buf);
            for a in &buf {
                let ns = dyn_.step(&s, a);
                let k = dyn_.key(&ns);
                if table[k] == NONE {
                    table[k] = (hi + new_states.len()) as u32;
                    new_states.push(ns);
                    if hi + new_states.len() > cap {
                        return Err(Error::ResourceLimit {
                            cap,
                            reached: hi + new_states.len(),
                        });
                    }
                }
                actions.push(*a);
                next.push(table[k]);
                slots.push(dyn_.slot(&s, a));
                owner.push(si as u32);
            }
            action_start.push(actions.len());
        }
        states.extend(new_states);
        layer_start.push(states.len());
    }
    // Terminal layer has no actions.
    for _ in layer_start[horizon]..layer_start[horizon + 1] {
        action_start.push(actions.len());
    }

    Ok(StateSpace {
        dynamics: dyn_,
        n_delivery: scenario.n_delivery(),
        n_charging: scenario.n_charging(),
        states,
        layer_start,
        action_start,
        actions,
        next,
        owner,
        slots,
        lookup,
    })
}

impl StateSpace {
    pub fn horizon(&self) -> usize {
        self.dynamics.horizon
    }
    pub fn n_states(&self) -> usize {
        self.states.len()
    }
    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }
    pub fn initial(&self) -> usize {
        0
    }
    pub fn state(&self, i: usize) -> &TruckState {
        &self.states[i]
    }
    pub fn states(&self) -> &[TruckState] {
        &self.states
    }
    /// State indices of time layer `t` (`t = 0..=T`).
    pub fn layer(&self, t: usize) -> std::ops::Range<usize> {
        self.layer_start[t]..self.layer_start[t + 1]
    }
    /// Action indices belonging to state `s`.
    pub fn actions_of(&self, s: usize) -> std::ops::Range<usize> {
        self.action_start[s]..self.action_start[s + 1]
    }
    pub fn action(&self, a: usize) -> &TruckAction {
        &self.actions[a]
    }
    pub fn successor(&self, a: usize) -> usize {
        self.next[a] as usize
    }
    pub fn owner(&self, a: usize) -> usize {
        self.owner[a] as usize
    }
    pub fn slot(&self, a: usize) -> RewardSlot {
        self.slots[a]
    }
    pub fn slots(&self) -> &[RewardSlot] {
        &self.slots
    }
    pub fn n_delivery(&self) -> usize {
        self.n_delivery
    }
    pub fn n_charging(&self) -> usize {
        self.n_charging
    }

    pub fn find(&self, s: &TruckState) -> Option<usize> {
        let t = s.t as usize;
        if t > self.dynamics.horizon
            || s.zone as usize >= self.dynamics.adjacency.len()
            || s.soc > self.dynamics.r_max
            || s.stops_left > self.dynamics.n_max
            || s.charge_left as usize > self.dynamics.tau_cap()
        {
            return None;
        }
        let idx = self.lookup[t * self.dynamics.key_space() + self.dynamics.key(s)];
        (idx != NONE).then_some(idx as usize)
    }
}

/// Delivery rewards `T x |delivery zones|`, charging rewards per truck-step
/// `T x |charging zones|`, and the teleport penalty `rho` assembled into a
/// per-state-action reward vector.
pub fn assemble_rewards(space: &StateSpace, mu_d: &DMatrix<f64>, mu_c: &DMatrix<f64>, rho: f64) -> Result<Vec<f64>> {
    let t = space.horizon();
    if mu_d.shape() != (t, space.n_delivery) {
        return Err(Error::IndexMismatch(format!(
            "delivery rewards are {:?}, expected ({t}, {})",
            mu_d.shape(),
            space.n_delivery
        )));
    }
    if mu_c.shape() != (t, space.n_charging) {
        return Err(Error::IndexMismatch(format!(
            "charging rewards are {:?}, expected ({t}, {})",
            mu_c.shape(),
            space.n_charging
        )));
    }
    Ok(space
        .slots
        .iter()
        .map(|slot| match *slot {
            RewardSlot::None => 0.0,
            RewardSlot::Delivery { t, pos } => mu_d[(t as usize, pos as usize)],
            RewardSlot::Charging { t, pos } => mu_c[(t as usize, pos as usize)],
            RewardSlot::Teleport => -rho,
        })
        .collect())
}

/// Optimal values, action values and softmax policy.
#[derive(Debug, Clone)]
pub struct ValueTable {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub pi: Vec<f64>,
}

impl ValueTable {
    pub fn initial_value(&self) -> f64 {
        self.v[0]
    }
}

/// Max shift and shifted exponential sum, `logsumexp = m + ln(sum)`.
fn shifted_sum(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return (m, 1.0);
    }
    (m, xs.iter().map(|x| (x - m).exp()).sum())
}

#[cfg(test)]
fn logsumexp(xs: &[f64]) -> f64 {
    let (m, sum) = shifted_sum(xs);
    m + sum.ln()
}

/// Backward soft value iteration: `Q(s,a) = u(s,a) + V(s')`, `V(s) = logsumexp Q(s,.) + 1`.
pub fn solve_values(space: &StateSpace, rewards: &[f64]) -> Result<ValueTable> {
    if rewards.len() != space.n_actions() {
        return Err(Error::IndexMismatch(format!(
            "{} rewards for {} state-actions",
            rewards.len(),
            space.n_actions()
        )));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::Contract(format!("reward {i} is not finite")));
    }
    let n = space.n_states();
    let mut v = vec![0.0; n];
    let mut q = vec![0.0; space.n_actions()];
    let mut pi = vec![0.0; space.n_actions()];
    let mut shift = vec![(0.0, 1.0); n];

    for t in (0..space.horizon()).rev() {
        let layer = space.layer(t);
        let acts = space.action_start[layer.start]..space.action_start[layer.end];
        let (_, v_later) = v.split_at(layer.end);
        let later_base = layer.end;
        q[acts.clone()]
            .par_iter_mut()
            .zip(&space.next[acts.clone()])
            .zip(&rewards[acts.clone()])
            .for_each(|((qa, &nx), &u)| *qa = u + v_later[nx as usize - later_base]);

        let q_ref = &q;
        shift[layer.clone()]
            .par_iter_mut()
            .enumerate()
            .for_each(|(k, l)| {
                let s = layer.start + k;
                *l = shifted_sum(&q_ref[space.actions_of(s)]);
            });
        for s in layer.clone() {
            let (m, sum) = shift[s];
            v[s] = m + sum.ln() + 1.0;
        }
        // Normalizing by the shifted sum keeps rows summing to one even when all
        // action values are large in magnitude.
        let shift_ref = &shift;
        pi[acts.clone()]
            .par_iter_mut()
            .zip(&q[acts.clone()])
            .zip(&space.owner[acts.clone()])
            .for_each(|((p, &qa), &o)| {
                let (m, sum) = shift_ref[o as usize];
                *p = (qa - m).exp() / sum;
            });
    }
    Ok(ValueTable { v, q, pi })
}

/// Action flows and state occupancies of the fleet.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowVector {
    pub x: Vec<f64>,
    pub occupancy: Vec<f64>,
}

/// Forward pass: `occupancy(s0) = fleet`, `x(a|s) = occupancy(s) pi(a|s)`.
pub fn propagate_flows(space: &StateSpace, table: &ValueTable, fleet: f64) -> FlowVector {
    propagate_policy(space, &table.pi, fleet)
}

/// Forward pass for an arbitrary policy (one probability per state-action).
pub fn propagate_policy(space: &StateSpace, pi: &[f64], fleet: f64) -> FlowVector {
    let mut occupancy = vec![0.0; space.n_states()];
    let mut x = vec![0.0; space.n_actions()];
    occupancy[space.initial()] = fleet;
    for s in 0..space.n_states() {
        let occ = occupancy[s];
        for a in space.actions_of(s) {
            let f = occ * pi[a];
            x[a] = f;
            occupancy[space.next[a] as usize] += f;
        }
    }
    FlowVector { x, occupancy }
}

/// Delivery flows aggregated by `(t, delivery zone)`.
pub fn delivery_flows(space: &StateSpace, flow: &FlowVector) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(space.horizon(), space.n_delivery);
    for (slot, &x) in space.slots.iter().zip(&flow.x) {
        if let RewardSlot::Delivery { t, pos } = *slot {
            out[(t as usize, pos as usize)] += x;
        }
    }
    out
}

/// Charging truck-steps aggregated by `(t, charging zone)`: trucks starting or
/// continuing a charge during step t.
pub fn charging_flows(space: &StateSpace, flow: &FlowVector) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(space.horizon(), space.n_charging);
    for (slot, &x) in space.slots.iter().zip(&flow.x) {
        if let RewardSlot::Charging { t, pos } = *slot {
            out[(t as usize, pos as usize)] += x;
        }
    }
    out
}

pub fn teleport_flow(space: &StateSpace, flow: &FlowVector) -> f64 {
    space
        .slots
        .iter()
        .zip(&flow.x)
        .filter(|(s, _)| matches!(s, RewardSlot::Teleport))
        .map(|(_, x)| x)
        .sum()
}

/// Per-unit charging load on load buses, `T x |load buses|`.
pub fn charging_load(scenario: &Scenario, x_c: &DMatrix<f64>) -> DMatrix<f64> {
    let unit = scenario.charge_unit_load();
    let mut load = DMatrix::zeros(scenario.params.horizon, scenario.n_load_buses());
    for t in 0..x_c.nrows() {
        for c in 0..x_c.ncols() {
            load[(t, scenario.charging_load_bus(c))] += unit * x_c[(t, c)];
        }
    }
    load
}

/// Base load plus charging load.
pub fn total_load(scenario: &Scenario, x_c: &DMatrix<f64>) -> DMatrix<f64> {
    scenario.base_load_matrix() + charging_load(scenario, x_c)
}

/// Flow-based perturbation cost `H(x) = sum_s X_s F(x(.|s)/X_s)` with the entropy
/// perturbation, using `0 * F(0/0) = 0`.
pub fn perturbation_cost(space: &StateSpace, x: &[f64]) -> f64 {
    let mut h = 0.0;
    for s in 0..space.n_states() {
        let range = space.actions_of(s);
        let total: f64 = x[range.clone()].iter().sum();
        if total <= 0.0 {
            continue;
        }
        for &xa in &x[range] {
            if xa > 0.0 {
                h += xa * ((xa / total).ln() - 1.0);
            }
        }
    }
    h
}

/// `max_s |outflow(s) - inflow(s) - q(s)|` over non-terminal states.
pub fn conservation_residual(space: &StateSpace, x: &[f64], fleet: f64) -> f64 {
    let mut balance = vec![0.0; space.n_states()];
    balance[space.initial()] -= fleet;
    for s in 0..space.n_states() {
        for a in space.actions_of(s) {
            balance[s] += x[a];
            balance[space.successor(a)] -= x[a];
        }
    }
    let terminal = space.layer(space.horizon()).start;
    balance[..terminal].iter().fold(0.0, |m, b| m.max(b.abs()))
}
