//! CSV and JSON artifacts. Reals are written with 17 significant digits so every
//! value parses back to the same double.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::anderson::AaTrace;
use crate::dcopf::{kkt_diagnostics, Binding, OpfInstance, OpfSolution};
use crate::equilibrium::EquilibriumResult;
use crate::error::{Error, Result};
use crate::pumdp::{FlowVector, StateSpace, ValueTable};
use crate::reward_design::DemandModel;
use crate::scenario::{BusKind, Scenario};

pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// CSV writer with LF line endings.
pub struct CsvOut {
    inner: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    pub fn create(path: impl AsRef<Path>, header: &[&str]) -> Result<Self> {
        let file = File::create(path)?;
        let mut inner = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        inner.write_record(header).map_err(csv_err)?;
        Ok(CsvOut { inner })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.inner.write_record(fields).map_err(csv_err)
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_trace(path: impl AsRef<Path>, trace: &AaTrace) -> Result<()> {
    let mut w = CsvOut::create(path, &["iter", "residual", "accepted", "step", "memory"])?;
    for e in &trace.entries {
        w.row([
            e.iteration.to_string(),
            real(e.residual),
            (e.step.accelerated() as u8).to_string(),
            format!("{:?}", e.step).to_lowercase(),
            e.memory.to_string(),
        ])?;
    }
    w.finish()
}

/// Residual history without step details, for runs that stopped early.
pub fn write_residuals(path: impl AsRef<Path>, residuals: &[f64]) -> Result<()> {
    let mut w = CsvOut::create(path, &["iter", "residual"])?;
    for (i, r) in residuals.iter().enumerate() {
        w.row([i.to_string(), real(*r)])?;
    }
    w.finish()
}

/// Prices for every bus: `t, bus, price_baseline[, price_equilibrium]`.
pub fn write_lmp(path: impl AsRef<Path>, scenario: &Scenario, baseline: &[OpfSolution], equilibrium: Option<&[OpfSolution]>) -> Result<()> {
    let mut header = vec!["t", "bus", "price_baseline"];
    if equilibrium.is_some() {
        header.push("price_equilibrium");
    }
    let mut w = CsvOut::create(path, &header)?;
    for (t, base) in baseline.iter().enumerate() {
        for (i, bus) in scenario.power.buses.iter().enumerate() {
            let mut row = vec![t.to_string(), bus.id.to_string(), real(base.lambda[i])];
            if let Some(eq) = equilibrium {
                row.push(real(eq[t].lambda[i]));
            }
            w.row(row)?;
        }
    }
    w.finish()
}

pub fn write_charging(path: impl AsRef<Path>, scenario: &Scenario, x_c: &DMatrix<f64>) -> Result<()> {
    let mut w = CsvOut::create(path, &["t", "zone", "bus", "truck_steps", "load_pu"])?;
    let unit = scenario.charge_unit_load();
    let zones = scenario.charging_zone_indices();
    for t in 0..x_c.nrows() {
        for (c, &z) in zones.iter().enumerate() {
            let bus = scenario.power.buses[scenario.load_buses()[scenario.charging_load_bus(c)]].id;
            w.row([
                t.to_string(),
                scenario.zone_id(z).to_string(),
                bus.to_string(),
                real(x_c[(t, c)]),
                real(unit * x_c[(t, c)]),
            ])?;
        }
    }
    w.finish()
}

/// Served demand per window and zone with the market-clearing delivery price.
pub fn write_delivery(path: impl AsRef<Path>, scenario: &Scenario, demand: &DMatrix<f64>) -> Result<()> {
    let model = DemandModel::from_scenario(scenario);
    let price = model.inverse_demand(demand);
    let mut w = CsvOut::create(path, &["window", "zone", "demand", "price"])?;
    let zones = scenario.delivery_zone_indices();
    for k in 0..demand.nrows() {
        for (v, &z) in zones.iter().enumerate() {
            w.row([
                k.to_string(),
                scenario.zone_id(z).to_string(),
                real(demand[(k, v)]),
                real(price[(k, v)]),
            ])?;
        }
    }
    w.finish()
}

/// Per-bus dispatch of one step: load, generation, angle, price and binding limits.
pub fn write_opf_step(path: impl AsRef<Path>, scenario: &Scenario, inst: &OpfInstance, sol: &OpfSolution) -> Result<()> {
    let report = kkt_diagnostics(inst, sol);
    let mut w = CsvOut::create(path, &["bus", "kind", "load", "generation", "theta", "lmp", "binding"])?;
    for (i, bus) in scenario.power.buses.iter().enumerate() {
        let gen: f64 = (0..inst.n_gen()).filter(|&k| inst.gen_bus[k] == i).map(|k| sol.g[k]).sum();
        let binding: Vec<String> = report
            .binding
            .iter()
            .filter_map(|b| match *b {
                Binding::GenUpper(k) if inst.gen_bus[k] == i => Some(format!("gmax:{k}")),
                Binding::GenLower(k) if inst.gen_bus[k] == i => Some(format!("gmin:{k}")),
                Binding::LineUpper(e) if inst.from[e] == i => Some(format!("fmax:{e}")),
                Binding::LineLower(e) if inst.from[e] == i => Some(format!("fmin:{e}")),
                _ => None,
            })
            .collect();
        w.row([
            bus.id.to_string(),
            match bus.kind {
                BusKind::Gen => "gen".to_string(),
                BusKind::Load => "load".to_string(),
            },
            real(inst.load[i]),
            real(gen),
            real(sol.theta[i]),
            real(sol.lambda[i]),
            binding.join(";"),
        ])?;
    }
    w.finish()
}

/// State-action dump: values, action values, policy and flows.
pub fn write_mdp_dump(path: impl AsRef<Path>, scenario: &Scenario, space: &StateSpace, table: &ValueTable, flow: &FlowVector) -> Result<()> {
    let mut w = CsvOut::create(
        path,
        &["t", "zone", "soc", "stops_left", "charge_left", "action", "v", "q", "pi", "x"],
    )?;
    for s in 0..space.n_states() {
        let st = space.state(s);
        for a in space.actions_of(s) {
            w.row([
                st.t.to_string(),
                scenario.zone_id(st.zone as usize).to_string(),
                st.soc.to_string(),
                st.stops_left.to_string(),
                st.charge_left.to_string(),
                space.action(a).label(),
                real(table.v[s]),
                real(table.q[a]),
                real(table.pi[a]),
                real(flow.x[a]),
            ])?;
        }
    }
    w.finish()
}

/// Writes every equilibrium artifact into `dir`.
pub fn write_equilibrium(dir: impl AsRef<Path>, scenario: &Scenario, result: &EquilibriumResult) -> Result<()> {
    let dir = dir.as_ref();
    write_lmp(dir.join("lmp.csv"), scenario, &result.baseline_opf, Some(&result.opf))?;
    write_charging(dir.join("charging.csv"), scenario, &result.response.x_c)?;
    write_delivery(dir.join("delivery.csv"), scenario, &result.response.demand)?;
    write_trace(dir.join("trace_outer.csv"), &result.outer_trace)?;
    for (i, tr) in result.inner_traces.iter().enumerate() {
        write_trace(dir.join(format!("trace_inner_{i}.csv")), tr)?;
    }
    Ok(())
}

/// SHA-256 over the given JSON-serializable parts, hex encoded.
pub fn config_hash<T: Serialize>(parts: &T) -> String {
    let bytes = serde_json::to_vec(parts).expect("serializable config");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}
