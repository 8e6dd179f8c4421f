//! Helpers shared by the integration tests. The truck model here is written from the
//! transition rules directly and does not call into the library's enumeration.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use elogrid::dcopf::{OpfInstance, OpfSolution};
use elogrid::pumdp::{propagate_policy, StateSpace};
use elogrid::scenario::{load_scenario, Scenario};

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

pub fn bundled(name: &str) -> Scenario {
    load_scenario(data_path(name)).expect("bundled scenario loads")
}

/// `(t, zone, soc, stops_left, charge_left)`.
pub type OracleState = (usize, usize, usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OracleAction {
    Idle,
    Deliver,
    Charge(usize, usize),
    Move(usize),
    Teleport,
}

pub struct Oracle {
    horizon: usize,
    depot: usize,
    r_max: usize,
    n_max: usize,
    phi: usize,
    adj: Vec<Vec<usize>>,
    charging: Vec<Option<usize>>,
    delivery: Vec<Option<usize>>,
}

impl Oracle {
    pub fn new(s: &Scenario) -> Self {
        let n = s.n_zones();
        Oracle {
            horizon: s.params.horizon,
            depot: s.depot(),
            r_max: s.params.r_max as usize,
            n_max: s.params.n_max as usize,
            phi: s.coupling.phi_soc as usize,
            adj: (0..n).map(|z| s.neighbors(z).to_vec()).collect(),
            charging: (0..n).map(|z| s.charging_pos(z)).collect(),
            delivery: (0..n).map(|z| s.delivery_pos(z)).collect(),
        }
    }

    pub fn initial(&self) -> OracleState {
        (0, self.depot, self.r_max, self.n_max, 0)
    }

    pub fn feasible(&self, (t, v, r, n, tau): OracleState) -> Vec<OracleAction> {
        use OracleAction::*;
        if t >= self.horizon {
            return vec![];
        }
        if tau > 0 {
            return vec![Idle];
        }
        if t == self.horizon - 1 {
            return if v == self.depot && r == self.r_max { vec![Idle] } else { vec![Teleport] };
        }
        let mut out = vec![Idle];
        if r > 0 && n > 0 && self.delivery[v].is_some() {
            out.push(Deliver);
        }
        if self.charging[v].is_some() {
            let mut d = 1;
            while t + d < self.horizon && r + d * self.phi <= self.r_max {
                out.push(Charge(d * self.phi, d));
                d += 1;
            }
        }
        if r > 0 {
            out.extend(self.adj[v].iter().map(|&w| Move(w)));
        }
        out
    }

    pub fn step(&self, (t, v, r, n, tau): OracleState, a: OracleAction) -> OracleState {
        use OracleAction::*;
        match a {
            Idle => (t + 1, v, r, n, tau.saturating_sub(1)),
            Deliver => (t + 1, v, r - 1, n - 1, 0),
            Charge(gain, steps) => (t + 1, v, r + gain, n, steps - 1),
            Move(w) => (t + 1, w, r - 1, if w == self.depot { self.n_max } else { n }, 0),
            Teleport => (t + 1, self.depot, self.r_max, self.n_max, 0),
        }
    }

    /// Breadth-first enumeration, one set per time layer.
    pub fn reachable(&self) -> Vec<BTreeSet<OracleState>> {
        let mut layers = vec![BTreeSet::new(); self.horizon + 1];
        layers[0].insert(self.initial());
        for t in 0..self.horizon {
            let next: BTreeSet<OracleState> = layers[t]
                .iter()
                .flat_map(|&s| self.feasible(s).into_iter().map(move |a| (s, a)))
                .map(|(s, a)| self.step(s, a))
                .collect();
            layers[t + 1] = next;
        }
        layers
    }

    pub fn reward(&self, (t, v, _, _, tau): OracleState, a: OracleAction, mu_d: &DMatrix<f64>, mu_c: &DMatrix<f64>, rho: f64) -> f64 {
        match a {
            OracleAction::Deliver => mu_d[(t, self.delivery[v].unwrap())],
            OracleAction::Charge(..) => mu_c[(t, self.charging[v].unwrap())],
            OracleAction::Idle if tau > 0 => mu_c[(t, self.charging[v].unwrap())],
            OracleAction::Teleport => -rho,
            _ => 0.0,
        }
    }

    /// Optimal values by backward recursion, each state solved by [`simplex_max`].
    pub fn values(&self, mu_d: &DMatrix<f64>, mu_c: &DMatrix<f64>, rho: f64) -> HashMap<OracleState, f64> {
        let layers = self.reachable();
        let mut v = HashMap::new();
        for s in &layers[self.horizon] {
            v.insert(*s, 0.0);
        }
        for t in (0..self.horizon).rev() {
            for &s in &layers[t] {
                let q: Vec<f64> = self
                    .feasible(s)
                    .into_iter()
                    .map(|a| self.reward(s, a, mu_d, mu_c, rho) + v[&self.step(s, a)])
                    .collect();
                v.insert(s, simplex_max(&q).0);
            }
        }
        v
    }
}

/// Separable perturbation `sum_a f(pi_a)` with `f(p) = p (ln p - 1)`, given through
/// `f` and the inverse of its derivative.
fn pert(p: f64) -> f64 {
    if p > 0.0 {
        p * (p.ln() - 1.0)
    } else {
        0.0
    }
}

fn pert_grad_inv(y: f64) -> f64 {
    y.exp()
}

/// `max_{pi in simplex} pi.q - sum_a f(pi_a)`. Stationarity gives
/// `pi_a = (f')^-1(q_a - nu)` with the multiplier `nu` fixed by `sum pi = 1`; the
/// multiplier is found by bisection. Returns the optimal value and `pi`.
pub fn simplex_max(q: &[f64]) -> (f64, Vec<f64>) {
    let qmax = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mass = |nu: f64| q.iter().map(|&qa| pert_grad_inv(qa - nu)).sum::<f64>();
    let (mut lo, mut hi) = (qmax - 1.0, qmax + (q.len() as f64).ln() + 1.0);
    debug_assert!(mass(lo) >= 1.0 && mass(hi) <= 1.0);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let nu = 0.5 * (lo + hi);
    let pi: Vec<f64> = q.iter().map(|&qa| pert_grad_inv(qa - nu)).collect();
    let total: f64 = pi.iter().sum();
    let pi: Vec<f64> = pi.iter().map(|p| p / total).collect();
    let value = pi
        .iter()
        .zip(q)
        .map(|(&p, &qa)| if p > 0.0 { p * qa - pert(p) } else { 0.0 })
        .sum();
    (value, pi)
}

/// `u.x - H(x)` with `H(x) = sum_s sum_a x_a (ln(x_a / X_s) - 1)`.
pub fn flow_objective(space: &StateSpace, u: &[f64], x: &[f64]) -> f64 {
    let mut obj = 0.0;
    for s in 0..space.n_states() {
        let acts = space.actions_of(s);
        let total: f64 = x[acts.clone()].iter().sum();
        for a in acts {
            obj += u[a] * x[a];
            if x[a] > 0.0 {
                obj -= x[a] * ((x[a] / total).ln() - 1.0);
            }
        }
    }
    obj
}

/// Scaled projected gradient (affine scaling) on `{A x = q, x >= 0}`: the gradient is
/// projected onto the null space of `A` in the metric `diag(x)`, and steps stop short
/// of the boundary.
pub fn projected_gradient(space: &StateSpace, u: &[f64], q: f64) -> (Vec<f64>, usize) {
    let terminal = space.layer(space.horizon()).start;
    let (m, n) = (terminal, space.n_actions());
    let mut a_mat = DMatrix::zeros(m, n);
    for a in 0..n {
        a_mat[(space.owner(a), a)] += 1.0;
        let nx = space.successor(a);
        if nx < terminal {
            a_mat[(nx, a)] -= 1.0;
        }
    }
    let uniform: Vec<f64> = (0..n).map(|a| 1.0 / space.actions_of(space.owner(a)).len() as f64).collect();
    let mut x = propagate_policy(space, &uniform, q).x;
    let mut obj = flow_objective(space, u, &x);
    let mut iters = 0;
    for _ in 0..2000 {
        iters += 1;
        let totals: Vec<f64> = (0..space.n_states()).map(|s| x[space.actions_of(s)].iter().sum()).collect();
        let grad = DVector::from_fn(n, |a, _| {
            if x[a] > 0.0 {
                u[a] - (x[a] / totals[space.owner(a)]).ln()
            } else {
                0.0
            }
        });
        let d = DVector::from_column_slice(&x);
        let ad = DMatrix::from_fn(m, n, |i, j| a_mat[(i, j)] * d[j]);
        let lhs = &ad * a_mat.transpose();
        let rhs = &ad * &grad;
        let y = lhs.clone().cholesky().expect("A D A^T is positive definite").solve(&rhs);
        let dir = (&grad - a_mat.transpose() * y).component_mul(&d);
        let mut t_max = f64::INFINITY;
        for a in 0..n {
            if dir[a] < 0.0 && x[a] > 0.0 {
                t_max = t_max.min(-x[a] / dir[a]);
            }
        }
        let mut t = (0.9 * t_max).min(1.0);
        let slope = grad.dot(&dir);
        if slope <= 1e-18 {
            break;
        }
        loop {
            let trial: Vec<f64> = (0..n).map(|a| (x[a] + t * dir[a]).max(0.0)).collect();
            let val = flow_objective(space, u, &trial);
            if val >= obj + 1e-4 * t * slope || t < 1e-16 {
                let gain = val - obj;
                x = trial;
                obj = val;
                if gain.abs() < 1e-15 {
                    return (x, iters);
                }
                break;
            }
            t *= 0.5;
        }
    }
    (x, iters)
}

/// Lagrangian dual value at the returned multipliers. Generation is re-minimized
/// from the multipliers rather than taken from the primal solution.
pub fn dual_objective(inst: &OpfInstance, sol: &OpfSolution) -> f64 {
    let mut d = 0.0;
    for k in 0..inst.n_gen() {
        let slope = sol.lambda[inst.gen_bus[k]] - inst.c1[k] - sol.mu_plus[k] + sol.mu_minus[k];
        let g = slope / (2.0 * inst.c2[k]);
        d += inst.c2[k] * g * g + inst.c1[k] * g - sol.lambda[inst.gen_bus[k]] * g
            + sol.mu_plus[k] * (g - inst.gmax[k])
            + sol.mu_minus[k] * (inst.gmin[k] - g);
    }
    for i in 0..inst.n_bus {
        d += sol.lambda[i] * inst.load[i];
    }
    for e in 0..inst.n_branch() {
        d += -sol.eta_plus[e] * inst.fmax[e] + sol.eta_minus[e] * inst.fmin[e];
    }
    d
}

/// Random connected grid: a spanning tree plus extra branches, two to three units per
/// generator bus and loads scaled to a fraction of capacity.
pub fn random_instance(rng: &mut ChaCha8Rng, ample_lines: bool) -> OpfInstance {
    let n = rng.gen_range(2..=9);
    let mut inst = OpfInstance::new(n, 0);
    for i in 1..n {
        let j = rng.gen_range(0..i);
        add_line(&mut inst, rng, j, i, ample_lines);
    }
    for _ in 0..rng.gen_range(0..n) {
        let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if i != j {
            add_line(&mut inst, rng, i.min(j), i.max(j), ample_lines);
        }
    }
    let n_gen_bus = rng.gen_range(1..=n.div_ceil(2));
    let gen_buses: Vec<usize> = (0..n_gen_bus).collect();
    let mut cap = 0.0;
    for &bus in &gen_buses {
        for _ in 0..rng.gen_range(1..=3) {
            let (c2, c1) = if rng.gen_bool(0.5) { (0.002, 114.4) } else { (0.004, 116.5) };
            let c2 = c2 * rng.gen_range(0.5..2.0);
            let c1 = c1 * rng.gen_range(0.9..1.1);
            let gmax = rng.gen_range(2.0..20.0);
            let gmin = if rng.gen_bool(0.3) { rng.gen_range(0.0..0.2 * gmax) } else { 0.0 };
            inst.add_generator(bus, c2, c1, gmin, gmax);
            cap += gmax;
        }
    }
    let load_buses: Vec<usize> = (n_gen_bus..n).chain((n == n_gen_bus).then_some(0)).collect();
    inst.set_bus_kinds(gen_buses, load_buses.clone());
    let share = rng.gen_range(0.2..0.8) * cap / load_buses.len() as f64;
    let loads: Vec<f64> = load_buses.iter().map(|_| share * rng.gen_range(0.5..1.5)).collect();
    inst.set_load_buses(&loads).unwrap();
    inst
}

fn add_line(inst: &mut OpfInstance, rng: &mut ChaCha8Rng, i: usize, j: usize, ample: bool) {
    let b = rng.gen_range(5.0..40.0);
    let lim = if ample { 1e4 } else { rng.gen_range(3.0..30.0) };
    inst.add_branch(i, j, b, -lim, lim);
}

/// Affine contractions `x -> A x + b` in two and three dimensions with spectral radius
/// between 0.9 and 0.99 and non-orthogonal eigenvectors.
pub fn affine_benchmark() -> Vec<(DMatrix<f64>, DVector<f64>)> {
    let mut out = Vec::new();
    for &rho in &[0.9, 0.95, 0.99] {
        let s2 = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        let d2 = DMatrix::from_diagonal(&DVector::from_vec(vec![rho, -0.5 * rho]));
        let a2 = &s2 * d2 * s2.clone().try_inverse().unwrap();
        out.push((a2, DVector::from_vec(vec![1.0, -2.0])));

        let s3 = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.1, 1.0, 0.4, 0.0, -0.3, 1.0]);
        let d3 = DMatrix::from_diagonal(&DVector::from_vec(vec![rho, 0.6 * rho, -0.3 * rho]));
        let a3 = &s3 * d3 * s3.clone().try_inverse().unwrap();
        out.push((a3, DVector::from_vec(vec![0.5, 1.0, -1.5])));
    }
    out
}
