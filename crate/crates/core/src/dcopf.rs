//! DC optimal power flow per time step, solved by a dense primal-dual
//! interior-point method (Mehrotra predictor-corrector).
//!
//! Decision vector `x = [g; theta]` with one `g` per generator. Equality rows are the
//! nodal balances `Z theta - E g = -l` (one per bus, `E` sums generators into their
//! bus) plus `theta_slack = 0`. Their multipliers are the nodal prices, so an
//! interior unit at bus `i` satisfies `lambda_i = 2 c2 g + c1`.
//!
//! Inequalities, in order: `g <= gmax`, `gmin <= g`, `flow <= fmax`, `fmin <= flow`,
//! with multipliers `mu_plus`, `mu_minus`, `eta_plus`, `eta_minus`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{BusKind, Scenario};

pub const MAX_ITER: usize = 100;
const TOL_FEAS: f64 = 1e-11;
const TOL_DUAL: f64 = 1e-10;
const TOL_GAP: f64 = 1e-12;
// Accepted if the method stalls short of the tight targets.
const LOOSE_FEAS: f64 = 1e-9;
const LOOSE_DUAL: f64 = 1e-9;
const LOOSE_GAP: f64 = 1e-10;
/// Slack below which an inequality counts as binding.
pub const ACTIVE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfInstance {
    pub n_bus: usize,
    pub slack: usize,
    pub gen_bus: Vec<usize>,
    pub c2: Vec<f64>,
    pub c1: Vec<f64>,
    pub gmin: Vec<f64>,
    pub gmax: Vec<f64>,
    pub from: Vec<usize>,
    pub to: Vec<usize>,
    pub b: Vec<f64>,
    pub fmin: Vec<f64>,
    pub fmax: Vec<f64>,
    /// Load per bus.
    pub load: Vec<f64>,
    /// Buses whose prices form `lambda_l`, in order.
    pub load_buses: Vec<usize>,
    /// Buses whose prices form `lambda_g`, in order.
    pub gen_buses: Vec<usize>,
}

impl OpfInstance {
    /// Empty grid of `n_bus` buses. Every bus is reported as a load bus until
    /// [`OpfInstance::set_bus_kinds`] says otherwise.
    pub fn new(n_bus: usize, slack: usize) -> Self {
        OpfInstance {
            n_bus,
            slack,
            gen_bus: Vec::new(),
            c2: Vec::new(),
            c1: Vec::new(),
            gmin: Vec::new(),
            gmax: Vec::new(),
            from: Vec::new(),
            to: Vec::new(),
            b: Vec::new(),
            fmin: Vec::new(),
            fmax: Vec::new(),
            load: vec![0.0; n_bus],
            load_buses: (0..n_bus).collect(),
            gen_buses: Vec::new(),
        }
    }

    pub fn add_generator(&mut self, bus: usize, c2: f64, c1: f64, gmin: f64, gmax: f64) -> &mut Self {
        self.gen_bus.push(bus);
        self.c2.push(c2);
        self.c1.push(c1);
        self.gmin.push(gmin);
        self.gmax.push(gmax);
        self
    }

    /// Branch with flow `b (theta_from - theta_to)` bounded by `[fmin, fmax]`.
    pub fn add_branch(&mut self, from: usize, to: usize, b: f64, fmin: f64, fmax: f64) -> &mut Self {
        self.from.push(from);
        self.to.push(to);
        self.b.push(b);
        self.fmin.push(fmin);
        self.fmax.push(fmax);
        self
    }

    pub fn set_bus_kinds(&mut self, gen_buses: Vec<usize>, load_buses: Vec<usize>) -> &mut Self {
        self.gen_buses = gen_buses;
        self.load_buses = load_buses;
        self
    }

    /// Grid of a scenario with zero load.
    pub fn from_scenario(scenario: &Scenario) -> Self {
        let pg = &scenario.power;
        let mut inst = OpfInstance::new(scenario.n_buses(), scenario.slack());
        for g in &pg.generators {
            let bus = scenario.bus_index(g.bus).expect("validated generator bus");
            inst.add_generator(bus, g.c2, g.c1, g.gmin, g.gmax);
        }
        for br in &pg.branches {
            let f = scenario.bus_index(br.from).expect("validated branch");
            let t = scenario.bus_index(br.to).expect("validated branch");
            inst.add_branch(f, t, br.b, br.fmin, br.fmax);
        }
        let gens = pg
            .buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Gen)
            .map(|(i, _)| i)
            .collect();
        inst.set_bus_kinds(gens, scenario.load_buses().to_vec());
        inst
    }

    /// Sets the load at each load bus, in `load_buses` order.
    pub fn set_load_buses(&mut self, loads: &[f64]) -> Result<()> {
        if loads.len() != self.load_buses.len() {
            return Err(Error::IndexMismatch(format!(
                "{} loads for {} load buses",
                loads.len(),
                self.load_buses.len()
            )));
        }
        self.load.iter_mut().for_each(|l| *l = 0.0);
        for (&bus, &l) in self.load_buses.iter().zip(loads) {
            self.load[bus] += l;
        }
        Ok(())
    }

    pub fn n_gen(&self) -> usize {
        self.gen_bus.len()
    }
    pub fn n_branch(&self) -> usize {
        self.from.len()
    }

    /// Weighted Laplacian `Z = A B A^T`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n_bus, self.n_bus);
        for e in 0..self.n_branch() {
            let (i, j, b) = (self.from[e], self.to[e], self.b[e]);
            z[(i, i)] += b;
            z[(j, j)] += b;
            z[(i, j)] -= b;
            z[(j, i)] -= b;
        }
        z
    }

    pub fn flows(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n_branch())
            .map(|e| self.b[e] * (theta[self.from[e]] - theta[self.to[e]]))
            .collect()
    }

    pub fn cost(&self, g: &[f64]) -> f64 {
        g.iter()
            .enumerate()
            .map(|(k, &gk)| self.c2[k] * gk * gk + self.c1[k] * gk)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("OPF instance: {what}")));
        if self.n_bus == 0 || self.slack >= self.n_bus {
            return bad("slack bus out of range");
        }
        if self.n_gen() == 0 {
            return bad("no generators");
        }
        let n = self.n_gen();
        if [self.c2.len(), self.c1.len(), self.gmin.len(), self.gmax.len()].iter().any(|&l| l != n) {
            return bad("generator arrays differ in length");
        }
        let m = self.n_branch();
        if [self.to.len(), self.b.len(), self.fmin.len(), self.fmax.len()].iter().any(|&l| l != m) {
            return bad("branch arrays differ in length");
        }
        if self.load.len() != self.n_bus {
            return bad("load vector length");
        }
        for k in 0..n {
            if self.gen_bus[k] >= self.n_bus {
                return bad("generator bus out of range");
            }
            if !(self.c2[k] > 0.0 && self.c2[k].is_finite() && self.c1[k].is_finite()) {
                return bad("generator costs must be finite with c2 > 0");
            }
            if !(self.gmin[k].is_finite() && self.gmax[k].is_finite() && self.gmin[k] <= self.gmax[k]) {
                return bad("generator bounds");
            }
        }
        for e in 0..m {
            if self.from[e] >= self.n_bus || self.to[e] >= self.n_bus || self.from[e] == self.to[e] {
                return bad("branch endpoints");
            }
            if !(self.b[e] > 0.0 && self.b[e].is_finite()) {
                return bad("susceptance must be finite and > 0");
            }
            if !(self.fmin[e].is_finite() && self.fmax[e].is_finite() && self.fmin[e] <= self.fmax[e]) {
                return bad("line limits");
            }
        }
        if self.load.iter().any(|l| !l.is_finite()) {
            return bad("non-finite load");
        }
        Ok(())
    }

    /// Cheap necessary conditions for feasibility. Fails with a certificate naming
    /// the offending bus where one exists.
    pub fn check_capacity(&self) -> Result<()> {
        let total_load: f64 = self.load.iter().sum();
        let gmax: f64 = self.gmax.iter().sum();
        let gmin: f64 = self.gmin.iter().sum();
        let slack = 1e-9 * (1.0 + total_load.abs());
        if total_load > gmax + slack {
            return Err(Error::OpfInfeasible {
                t: None,
                bus: None,
                certificate: format!("total load {total_load} exceeds total capacity {gmax}"),
            });
        }
        if total_load < gmin - slack {
            return Err(Error::OpfInfeasible {
                t: None,
                bus: None,
                certificate: format!("total load {total_load} below total minimum generation {gmin}"),
            });
        }
        let mut local_max = vec![0.0; self.n_bus];
        let mut local_min = vec![0.0; self.n_bus];
        for k in 0..self.n_gen() {
            local_max[self.gen_bus[k]] += self.gmax[k];
            local_min[self.gen_bus[k]] += self.gmin[k];
        }
        let mut import = vec![0.0; self.n_bus];
        let mut export = vec![0.0; self.n_bus];
        for e in 0..self.n_branch() {
            // Positive flow leaves `from` and enters `to`.
            import[self.from[e]] += (-self.fmin[e]).max(0.0);
            export[self.from[e]] += self.fmax[e].max(0.0);
            import[self.to[e]] += self.fmax[e].max(0.0);
            export[self.to[e]] += (-self.fmin[e]).max(0.0);
        }
        for i in 0..self.n_bus {
            let tol = 1e-9 * (1.0 + self.load[i].abs());
            if self.load[i] - local_max[i] > import[i] + tol {
                return Err(Error::OpfInfeasible {
                    t: None,
                    bus: Some(i as u32),
                    certificate: format!(
                        "bus {i}: load {} minus local capacity {} exceeds import capacity {}",
                        self.load[i], local_max[i], import[i]
                    ),
                });
            }
            if local_min[i] - self.load[i] > export[i] + tol {
                return Err(Error::OpfInfeasible {
                    t: None,
                    bus: Some(i as u32),
                    certificate: format!(
                        "bus {i}: minimum generation {} minus load {} exceeds export capacity {}",
                        local_min[i], self.load[i], export[i]
                    ),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSolution {
    pub g: Vec<f64>,
    pub theta: Vec<f64>,
    /// Nodal balance multipliers, one per bus.
    pub lambda: Vec<f64>,
    pub lambda_g: Vec<f64>,
    pub lambda_l: Vec<f64>,
    pub lambda_0: f64,
    pub mu_plus: Vec<f64>,
    pub mu_minus: Vec<f64>,
    pub eta_plus: Vec<f64>,
    pub eta_minus: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Load-bus prices of a solved step.
pub fn lmp(solution: &OpfSolution) -> &[f64] {
    &solution.lambda_l
}

/// Dense convex QP `min 1/2 x'diag(h)x + c'x  s.t.  Ax = b, Gx <= h`.
struct Qp {
    hdiag: DVector<f64>,
    c: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
}

impl Qp {
    fn opf(inst: &OpfInstance) -> Self {
        let (ng, nb, nl) = (inst.n_gen(), inst.n_bus, inst.n_branch());
        let n = ng + nb;
        let mut hdiag = DVector::zeros(n);
        let mut c = DVector::zeros(n);
        for k in 0..ng {
            hdiag[k] = 2.0 * inst.c2[k];
            c[k] = inst.c1[k];
        }
        let a = equality_jacobian(inst);
        let mut b = DVector::zeros(nb + 1);
        for i in 0..nb {
            b[i] = -inst.load[i];
        }
        let m = 2 * ng + 2 * nl;
        let mut g = DMatrix::zeros(m, n);
        let mut h = DVector::zeros(m);
        for k in 0..ng {
            g[(k, k)] = 1.0;
            h[k] = inst.gmax[k];
            g[(ng + k, k)] = -1.0;
            h[ng + k] = -inst.gmin[k];
        }
        for e in 0..nl {
            let (i, j, be) = (ng + inst.from[e], ng + inst.to[e], inst.b[e]);
            let r = 2 * ng + e;
            g[(r, i)] = be;
            g[(r, j)] = -be;
            h[r] = inst.fmax[e];
            let r = 2 * ng + nl + e;
            g[(r, i)] = -be;
            g[(r, j)] = be;
            h[r] = -inst.fmin[e];
        }
        Qp { hdiag, c, a, b, g, h }
    }

    fn n(&self) -> usize {
        self.c.len()
    }

    fn kkt(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n();
        let meq = self.a.nrows();
        let mut k = DMatrix::zeros(n + meq, n + meq);
        let gw = DMatrix::from_fn(self.g.nrows(), n, |r, col| self.g[(r, col)] * w[r]);
        let mut top = self.g.transpose() * gw;
        for i in 0..n {
            top[(i, i)] += self.hdiag[i];
        }
        k.view_mut((0, 0), (n, n)).copy_from(&top);
        k.view_mut((n, 0), (meq, n)).copy_from(&self.a);
        k.view_mut((0, n), (n, meq)).copy_from(&self.a.transpose());
        k
    }
}

/// Balance rows `Z theta - E g` followed by the slack row, over `[g; theta]`.
fn equality_jacobian(inst: &OpfInstance) -> DMatrix<f64> {
    let (ng, nb) = (inst.n_gen(), inst.n_bus);
    let mut a = DMatrix::zeros(nb + 1, ng + nb);
    for k in 0..ng {
        a[(inst.gen_bus[k], k)] = -1.0;
    }
    a.view_mut((0, ng), (nb, nb)).copy_from(&inst.laplacian());
    a[(nb, ng + inst.slack)] = 1.0;
    a
}

struct Residuals {
    rd: DVector<f64>,
    rp: DVector<f64>,
    rs: DVector<f64>,
    mu: f64,
    max_comp: f64,
}

impl Residuals {
    fn norms(&self) -> (f64, f64, f64) {
        (self.rp.amax().max(self.rs.amax()), self.rd.amax(), self.max_comp)
    }
}

fn residuals(qp: &Qp, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>, s: &DVector<f64>) -> Residuals {
    let rd = qp.hdiag.component_mul(x) + &qp.c + qp.a.tr_mul(y) + qp.g.tr_mul(z);
    let rp = &qp.a * x - &qp.b;
    let rs = &qp.g * x + s - &qp.h;
    let m = s.len().max(1) as f64;
    let sz = s.component_mul(z);
    Residuals {
        rd,
        rp,
        rs,
        mu: sz.sum() / m,
        max_comp: sz.amax(),
    }
}

/// Solves the KKT system with one step of iterative refinement.
fn kkt_solve(k: &DMatrix<f64>, lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let mut sol = lu.solve(rhs)?;
    let r = rhs - k * &sol;
    if let Some(d) = lu.solve(&r) {
        sol += d;
    }
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

fn step_to_boundary(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha: f64 = 1.0;
    for (x, d) in v.iter().zip(dv.iter()) {
        if *d < 0.0 {
            alpha = alpha.min(-x / d);
        }
    }
    alpha
}

struct QpPoint {
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    iterations: usize,
}

/// Final primal, dual and complementarity residuals of a failed run.
struct QpFailure(f64, f64, f64);

fn ipm(qp: &Qp) -> std::result::Result<QpPoint, QpFailure> {
    let n = qp.n();
    let meq = qp.a.nrows();
    let m = qp.g.nrows();
    let fail = QpFailure(f64::INFINITY, f64::INFINITY, f64::INFINITY);

    // Starting point: least-squares fit of the inequalities under the equalities.
    let k0 = qp.kkt(&DVector::from_element(m, 1.0));
    let lu0 = k0.clone().lu();
    let mut rhs = DVector::zeros(n + meq);
    rhs.rows_mut(0, n).copy_from(&(-&qp.c + qp.g.tr_mul(&qp.h)));
    rhs.rows_mut(n, meq).copy_from(&qp.b);
    let Some(sol) = kkt_solve(&k0, &lu0, &rhs) else { return Err(fail) };
    let mut x = sol.rows(0, n).into_owned();
    let mut y = sol.rows(n, meq).into_owned();
    let mut s = &qp.h - &qp.g * &x;
    let mut z = DVector::from_element(m, 1.0);
    if m > 0 {
        let ds = (-1.5 * s.min()).max(0.0);
        s.add_scalar_mut(ds);
        let sz = s.dot(&z);
        let (hs, hz) = if sz > 0.0 { (0.5 * sz / z.sum(), 0.5 * sz / s.sum()) } else { (1.0, 0.0) };
        s.add_scalar_mut(hs);
        z.add_scalar_mut(hz);
    }

    let mut best: Option<(f64, QpPoint)> = None;
    let mut last = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for iter in 0..=MAX_ITER {
        let r = residuals(qp, &x, &y, &z, &s);
        let (pf, df, cp) = r.norms();
        last = (pf, df, cp);
        if pf <= TOL_FEAS && df <= TOL_DUAL && cp <= TOL_GAP {
            return Ok(QpPoint { x, y, z, iterations: iter });
        }
        if pf <= LOOSE_FEAS && df <= LOOSE_DUAL && cp <= LOOSE_GAP {
            let merit = pf.max(df).max(cp);
            if best.as_ref().is_none_or(|b| merit < b.0) {
                best = Some((merit, QpPoint { x: x.clone(), y: y.clone(), z: z.clone(), iterations: iter }));
            }
        }
        if iter == MAX_ITER || m == 0 && iter > 0 {
            break;
        }

        let w = z.component_div(&s);
        let k = qp.kkt(&w);
        let lu = k.clone().lu();
        let direction = |rsz: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            let tmp = (-rsz + z.component_mul(&r.rs)).component_div(&s);
            let mut rhs = DVector::zeros(n + meq);
            rhs.rows_mut(0, n).copy_from(&(-&r.rd - qp.g.tr_mul(&tmp)));
            rhs.rows_mut(n, meq).copy_from(&(-&r.rp));
            let sol = kkt_solve(&k, &lu, &rhs)?;
            let dx = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, meq).into_owned();
            let ds = -&r.rs - &qp.g * &dx;
            let dz = (-rsz - z.component_mul(&ds)).component_div(&s);
            Some((dx, dy, ds, dz))
        };

        let rsz = s.component_mul(&z);
        let Some((_, _, ds_a, dz_a)) = direction(&rsz) else { break };
        let alpha_a = step_to_boundary(&s, &ds_a).min(step_to_boundary(&z, &dz_a));
        let mu_aff = (&s + &ds_a * alpha_a).dot(&(&z + &dz_a * alpha_a)) / m.max(1) as f64;
        let sigma = if r.mu > 0.0 { (mu_aff / r.mu).powi(3).clamp(0.0, 1.0) } else { 0.0 };
        let rsz = rsz + ds_a.component_mul(&dz_a) - DVector::from_element(m, sigma * r.mu);
        let Some((dx, dy, ds, dz)) = direction(&rsz) else { break };
        let alpha = (0.995 * step_to_boundary(&s, &ds).min(step_to_boundary(&z, &dz))).min(1.0);
        x += &dx * alpha;
        y += &dy * alpha;
        s += &ds * alpha;
        z += &dz * alpha;
        if [&x, &y, &s, &z].iter().any(|v| v.iter().any(|e| !e.is_finite())) {
            break;
        }
    }
    match best {
        Some((_, p)) => Ok(p),
        None => Err(QpFailure(last.0, last.1, last.2)),
    }
}

pub fn solve_opf(inst: &OpfInstance) -> Result<OpfSolution> {
    inst.validate()?;
    inst.check_capacity()?;
    let qp = Qp::opf(inst);
    let p = match ipm(&qp) {
        Ok(p) => p,
        Err(QpFailure(pf, df, cp)) if pf > LOOSE_FEAS => {
            return Err(Error::OpfInfeasible {
                t: None,
                bus: None,
                certificate: format!("interior-point iterates stalled with primal residual {pf:e} (dual {df:e}, complementarity {cp:e})"),
            })
        }
        Err(QpFailure(pf, df, cp)) => {
            return Err(Error::OpfNumerical {
                t: None,
                detail: format!("no convergence: primal {pf:e}, dual {df:e}, complementarity {cp:e}"),
            })
        }
    };
    let sol = assemble(inst, &p.x, &p.y, &p.z, p.iterations);
    let report = kkt_diagnostics(inst, &sol);
    if report.licq {
        return Ok(sol);
    }
    // Multipliers are not unique. Take the smallest binding multipliers on the
    // optimal dual face, so prices fall back to the marginal unit's cost.
    match tie_break(inst, &qp, &sol, &report.binding) {
        Some(polished) if kkt_diagnostics(inst, &polished).max_residual() <= LOOSE_DUAL => Ok(polished),
        _ => Ok(sol),
    }
}

/// Minimum-norm binding multipliers consistent with stationarity at the primal point.
fn tie_break(inst: &OpfInstance, qp: &Qp, sol: &OpfSolution, binding: &[Binding]) -> Option<OpfSolution> {
    let (ng, nl) = (inst.n_gen(), inst.n_branch());
    let n = qp.n();
    let row = |tag: &Binding| match *tag {
        Binding::GenUpper(k) => k,
        Binding::GenLower(k) => ng + k,
        Binding::LineUpper(e) => 2 * ng + e,
        Binding::LineLower(e) => 2 * ng + nl + e,
    };
    let x = DVector::from_iterator(n, sol.g.iter().chain(&sol.theta).copied());
    let r0 = -(qp.hdiag.component_mul(&x) + &qp.c);
    let nb_rows = binding.len();
    let gb = DMatrix::from_fn(nb_rows, n, |r, col| qp.g[(row(&binding[r]), col)]);

    // Stationarity A'y + Gb'z = r0 is solvable in y iff its component orthogonal to
    // range(A') vanishes; project with an orthonormal basis of null(A).
    let eig = (qp.a.transpose() * &qp.a).symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let null: Vec<DVector<f64>> = (0..n)
        .filter(|&j| eig.eigenvalues[j] <= top * 1e-12)
        .map(|j| eig.eigenvectors.column(j).into_owned())
        .collect();
    let z0 = if null.is_empty() {
        DVector::zeros(nb_rows)
    } else {
        let nmat = DMatrix::from_columns(&null);
        let c = nmat.tr_mul(&gb.transpose());
        let d = nmat.tr_mul(&r0);
        // Keep independent rows only.
        let cs = c.clone().svd(true, false);
        let cu = cs.u?;
        let ctop = cs.singular_values.max();
        let keep: Vec<usize> = (0..cs.singular_values.len())
            .filter(|&j| cs.singular_values[j] > ctop.max(1.0) * 1e-10)
            .collect();
        let a = DMatrix::from_fn(keep.len(), nb_rows, |r, col| {
            let j = keep[r];
            cu.column(j).dot(&c.column(col)) / cs.singular_values[j]
        });
        let b = DVector::from_fn(keep.len(), |r, _| {
            let j = keep[r];
            cu.column(j).dot(&d) / cs.singular_values[j]
        });
        let sub = Qp {
            hdiag: DVector::from_element(nb_rows, 1.0),
            c: DVector::zeros(nb_rows),
            a,
            b,
            g: -DMatrix::identity(nb_rows, nb_rows),
            h: DVector::zeros(nb_rows),
        };
        ipm(&sub).ok()?.x
    };
    let mut z = DVector::zeros(qp.g.nrows());
    for (r, tag) in binding.iter().enumerate() {
        z[row(tag)] = z0[r].max(0.0);
    }
    let rhs = &r0 - qp.g.tr_mul(&z);
    let aat = &qp.a * qp.a.transpose();
    let y = aat.cholesky()?.solve(&(&qp.a * rhs));
    let mut out = assemble(inst, &x, &y, &z, sol.iterations);
    out.g = sol.g.clone();
    out.theta = sol.theta.clone();
    Some(out)
}

fn assemble(inst: &OpfInstance, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>, iterations: usize) -> OpfSolution {
    let (ng, nb, nl) = (inst.n_gen(), inst.n_bus, inst.n_branch());
    let g: Vec<f64> = x.rows(0, ng).iter().copied().collect();
    let mut theta: Vec<f64> = x.rows(ng, nb).iter().copied().collect();
    theta[inst.slack] = 0.0;
    let lambda: Vec<f64> = y.rows(0, nb).iter().copied().collect();
    OpfSolution {
        lambda_g: inst.gen_buses.iter().map(|&i| lambda[i]).collect(),
        lambda_l: inst.load_buses.iter().map(|&i| lambda[i]).collect(),
        lambda_0: y[nb],
        mu_plus: z.rows(0, ng).iter().copied().collect(),
        mu_minus: z.rows(ng, ng).iter().copied().collect(),
        eta_plus: z.rows(2 * ng, nl).iter().copied().collect(),
        eta_minus: z.rows(2 * ng + nl, nl).iter().copied().collect(),
        objective: inst.cost(&g),
        g,
        theta,
        lambda,
        iterations,
    }
}

/// Which inequality a binding entry refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Binding {
    GenUpper(usize),
    GenLower(usize),
    LineUpper(usize),
    LineLower(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_feasibility: f64,
    pub bound_violation: f64,
    /// Largest negative part among inequality multipliers.
    pub dual_feasibility: f64,
    pub complementarity: f64,
    pub duality_gap: f64,
    pub binding: Vec<Binding>,
    pub active_rows: usize,
    pub active_rank: usize,
    pub licq: bool,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity
            .max(self.primal_feasibility)
            .max(self.bound_violation)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }
}

/// Residuals of the optimality system at `sol` and a rank test on the Jacobian of
/// the equality and binding constraints.
pub fn kkt_diagnostics(inst: &OpfInstance, sol: &OpfSolution) -> KktReport {
    let (ng, nb, nl) = (inst.n_gen(), inst.n_bus, inst.n_branch());
    let z = inst.laplacian();
    let lam = DVector::from_column_slice(&sol.lambda);
    let theta = DVector::from_column_slice(&sol.theta);
    let flows = inst.flows(&sol.theta);

    let mut stat: f64 = 0.0;
    for k in 0..ng {
        let r = 2.0 * inst.c2[k] * sol.g[k] + inst.c1[k] - sol.lambda[inst.gen_bus[k]] + sol.mu_plus[k]
            - sol.mu_minus[k];
        stat = stat.max(r.abs());
    }
    let mut st_theta = &z * &lam;
    st_theta[inst.slack] += sol.lambda_0;
    for e in 0..nl {
        let v = inst.b[e] * (sol.eta_plus[e] - sol.eta_minus[e]);
        st_theta[inst.from[e]] += v;
        st_theta[inst.to[e]] -= v;
    }
    stat = stat.max(st_theta.amax());

    let mut balance = &z * &theta;
    for k in 0..ng {
        balance[inst.gen_bus[k]] -= sol.g[k];
    }
    for i in 0..nb {
        balance[i] += inst.load[i];
    }
    let primal = balance.amax().max(sol.theta[inst.slack].abs());

    let mut viol: f64 = 0.0;
    let mut comp: f64 = 0.0;
    let mut binding = Vec::new();
    let mut consider = |slack: f64, mult: f64, tag: Binding| {
        viol = viol.max(-slack);
        comp = comp.max((slack * mult).abs());
        if slack <= ACTIVE_TOL {
            binding.push(tag);
        }
    };
    for k in 0..ng {
        consider(inst.gmax[k] - sol.g[k], sol.mu_plus[k], Binding::GenUpper(k));
        consider(sol.g[k] - inst.gmin[k], sol.mu_minus[k], Binding::GenLower(k));
    }
    for e in 0..nl {
        consider(inst.fmax[e] - flows[e], sol.eta_plus[e], Binding::LineUpper(e));
        consider(flows[e] - inst.fmin[e], sol.eta_minus[e], Binding::LineLower(e));
    }
    let dual_neg = sol
        .mu_plus
        .iter()
        .chain(&sol.mu_minus)
        .chain(&sol.eta_plus)
        .chain(&sol.eta_minus)
        .fold(0.0f64, |acc, &v| acc.max(-v));

    // Dual objective of the QP: -g'C2 g - l'lambda - h'z in the sign convention above.
    let mut dual_obj = 0.0;
    for k in 0..ng {
        dual_obj -= inst.c2[k] * sol.g[k] * sol.g[k];
        dual_obj -= inst.gmax[k] * sol.mu_plus[k] - inst.gmin[k] * sol.mu_minus[k];
    }
    for i in 0..nb {
        dual_obj += inst.load[i] * sol.lambda[i];
    }
    for e in 0..nl {
        dual_obj -= inst.fmax[e] * sol.eta_plus[e] - inst.fmin[e] * sol.eta_minus[e];
    }
    let gap = (sol.objective - dual_obj).abs();

    // Active Jacobian: balance rows, slack row, then binding inequalities.
    let n = ng + nb;
    let rows = nb + 1 + binding.len();
    let mut jac = DMatrix::zeros(rows, n);
    for k in 0..ng {
        jac[(inst.gen_bus[k], k)] = -1.0;
    }
    jac.view_mut((0, ng), (nb, nb)).copy_from(&z);
    jac[(nb, ng + inst.slack)] = 1.0;
    for (r, tag) in binding.iter().enumerate() {
        let r = nb + 1 + r;
        match *tag {
            Binding::GenUpper(k) | Binding::GenLower(k) => jac[(r, k)] = 1.0,
            Binding::LineUpper(e) | Binding::LineLower(e) => {
                jac[(r, ng + inst.from[e])] = inst.b[e];
                jac[(r, ng + inst.to[e])] = -inst.b[e];
            }
        }
    }
    let rank = numerical_rank(&jac);
    KktReport {
        stationarity: stat,
        primal_feasibility: primal,
        bound_violation: viol.max(0.0),
        dual_feasibility: dual_neg,
        complementarity: comp,
        duality_gap: gap,
        active_rows: rows,
        active_rank: rank,
        licq: rank == rows,
        binding,
    }
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    let tol = top * 1e-9 * m.nrows().max(m.ncols()) as f64;
    sv.iter().filter(|&&v| v > tol).count()
}

/// Independent per-step solves for a `T x |load buses|` load matrix. Returns the
/// solutions and the `T x |load buses|` price matrix.
pub fn solve_opf_horizon(scenario: &Scenario, total_load: &DMatrix<f64>) -> Result<(Vec<OpfSolution>, DMatrix<f64>)> {
    let template = OpfInstance::from_scenario(scenario);
    solve_instances(&template, total_load)
}

/// Horizon solve over an explicit grid template.
pub fn solve_instances(template: &OpfInstance, total_load: &DMatrix<f64>) -> Result<(Vec<OpfSolution>, DMatrix<f64>)> {
    let nl = template.load_buses.len();
    if total_load.ncols() != nl {
        return Err(Error::IndexMismatch(format!(
            "load matrix has {} columns for {nl} load buses",
            total_load.ncols()
        )));
    }
    let sols: Vec<OpfSolution> = (0..total_load.nrows())
        .into_par_iter()
        .map(|t| {
            let mut inst = template.clone();
            let row: Vec<f64> = total_load.row(t).iter().copied().collect();
            inst.set_load_buses(&row)?;
            solve_opf(&inst).map_err(|e| at_step(e, t))
        })
        .collect::<Result<_>>()?;
    let prices = DMatrix::from_fn(sols.len(), nl, |t, j| sols[t].lambda_l[j]);
    Ok((sols, prices))
}

fn at_step(e: Error, t: usize) -> Error {
    match e {
        Error::OpfInfeasible { bus, certificate, .. } => Error::OpfInfeasible { t: Some(t), bus, certificate },
        Error::OpfNumerical { detail, .. } => Error::OpfNumerical { t: Some(t), detail },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_bus_pair(load: f64) -> OpfInstance {
        let mut inst = OpfInstance::new(2, 0);
        inst.add_generator(0, 0.002, 114.4, 0.0, 100.0)
            .add_branch(0, 1, 10.0, -100.0, 100.0)
            .set_bus_kinds(vec![0], vec![1]);
        inst.load[1] = load;
        inst
    }

    #[test]
    fn laplacian_annihilates_ones() {
        let mut inst = OpfInstance::new(3, 0);
        inst.add_branch(0, 1, 2.0, -1.0, 1.0).add_branch(1, 2, 3.0, -1.0, 1.0);
        let z = inst.laplacian();
        let ones = DVector::from_element(3, 1.0);
        assert_eq!((&z * ones).amax(), 0.0);
        assert_eq!(z, z.transpose());
    }

    #[test]
    fn single_generator_single_load() {
        let inst = one_bus_pair(1.0);
        let sol = solve_opf(&inst).unwrap();
        assert!((sol.g[0] - 1.0).abs() < 1e-9);
        for p in &sol.lambda {
            assert!((p - 114.404).abs() < 1e-8, "{p}");
        }
        assert_eq!(sol.theta[0], 0.0);
        let rep = kkt_diagnostics(&inst, &sol);
        assert!(rep.max_residual() <= 1e-8, "{rep:?}");
        assert!(rep.licq);
    }

    #[test]
    fn deterministic_repeat() {
        let inst = one_bus_pair(3.7);
        let a = solve_opf(&inst).unwrap();
        let b = solve_opf(&inst).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shortage_is_infeasible() {
        let inst = one_bus_pair(150.0);
        assert!(matches!(solve_opf(&inst), Err(Error::OpfInfeasible { .. })));
    }

    #[test]
    fn line_bottleneck_names_bus() {
        let mut inst = one_bus_pair(20.0);
        inst.fmax[0] = 5.0;
        match solve_opf(&inst) {
            Err(Error::OpfInfeasible { bus, .. }) => assert_eq!(bus, Some(1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_instance_rejected() {
        let mut inst = one_bus_pair(1.0);
        inst.c2[0] = 0.0;
        assert!(matches!(solve_opf(&inst), Err(Error::Validation(_))));
    }

    #[test]
    fn horizon_names_failing_step() {
        let inst = one_bus_pair(0.0);
        let loads = DMatrix::from_column_slice(3, 1, &[1.0, 500.0, 2.0]);
        match solve_instances(&inst, &loads) {
            Err(Error::OpfInfeasible { t, .. }) => assert_eq!(t, Some(1)),
            other => panic!("{other:?}"),
        }
    }
}
