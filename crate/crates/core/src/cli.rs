//! Command-line front end: `solve`, `baseline`, `opf`, `mdp` and `synth`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::anderson::AaConfig;
use crate::dcopf::{solve_opf, OpfInstance};
use crate::equilibrium::{baseline_lmp, solve_equilibrium_with};
use crate::output;
use crate::pumdp::{assemble_rewards, build_state_space, propagate_flows, solve_values};
use crate::scenario::{load_scenario, save_scenario, synth_scenario, Scenario};

/// Scenarios shipped with the crate, addressable by file name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("hawaii_like.json", include_str!("../data/hawaii_like.json")),
    ("small.json", include_str!("../data/small.json")),
];

#[derive(Debug, Parser)]
#[command(name = "elogrid", version, about = "Fleet/grid price equilibrium solver")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the coupled equilibrium and write all artifacts.
    Solve(SolveArgs),
    /// Prices without fleet charging.
    Baseline(ScenarioArgs),
    /// Dispatch and prices for one time step of the base load.
    Opf(OpfArgs),
    /// Solve the fleet MDP for given rewards.
    Mdp(MdpArgs),
    /// Write a synthetic scenario.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario JSON file, or the name of a bundled scenario.
    #[arg(long)]
    pub scenario: String,
    /// Output directory, created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the fleet size.
    #[arg(long)]
    pub fleet: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: ScenarioArgs,
    #[arg(long)]
    pub tol_inner: Option<f64>,
    #[arg(long)]
    pub tol_outer: Option<f64>,
    /// Perturb the starting prices by up to 1% with this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also dump the MDP at the equilibrium rewards.
    #[arg(long)]
    pub dump_mdp: bool,
    /// Stop after the baseline dispatch.
    #[arg(long)]
    pub baseline_only: bool,
}

#[derive(Debug, Args)]
pub struct OpfArgs {
    #[command(flatten)]
    pub common: ScenarioArgs,
    #[arg(long, default_value_t = 0)]
    pub t: usize,
}

#[derive(Debug, Args)]
pub struct MdpArgs {
    #[command(flatten)]
    pub common: ScenarioArgs,
    /// CSV with columns kind,t,zone,value (kind is delivery or charging).
    #[arg(long)]
    pub rewards: PathBuf,
    #[arg(long)]
    pub dump_mdp: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 36)]
    pub zones: usize,
    #[arg(long, default_value_t = 37)]
    pub buses: usize,
    /// Override the number of time steps.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: String,
    scenario: String,
    config_hash: String,
    converged: bool,
    status: String,
    outer_residual: Option<f64>,
    outer_iterations: Option<usize>,
    inner_iterations: Vec<usize>,
    residuals: Vec<f64>,
    wall_time_s: f64,
    seed: Option<u64>,
    aa_inner: Option<AaConfig>,
    aa_outer: Option<AaConfig>,
    warnings: Vec<String>,
}

impl Manifest {
    fn new(command: &str, scenario: &str, hash: String) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            scenario: scenario.into(),
            config_hash: hash,
            converged: false,
            status: String::new(),
            outer_residual: None,
            outer_iterations: None,
            inner_iterations: Vec::new(),
            residuals: Vec::new(),
            wall_time_s: 0.0,
            seed: None,
            aa_inner: None,
            aa_outer: None,
            warnings: Vec::new(),
        }
    }
}

/// Resolves a scenario path, falling back to bundled scenarios by file name.
pub fn resolve_scenario(name: &str) -> anyhow::Result<Scenario> {
    let path = Path::new(name);
    if path.exists() {
        return load_scenario(path).with_context(|| format!("loading scenario {name}"));
    }
    let file = path.file_name().and_then(|f| f.to_str()).unwrap_or(name);
    match BUNDLED.iter().find(|(n, _)| *n == file) {
        Some((_, text)) => Ok(Scenario::from_json(text)?),
        None => bail!("scenario {name} not found"),
    }
}

fn prepare(args: &ScenarioArgs) -> anyhow::Result<Scenario> {
    let mut scenario = resolve_scenario(&args.scenario)?;
    if let Some(q) = args.fleet {
        scenario = scenario.with_params(|p| p.fleet = q)?;
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    Ok(scenario)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    match cli.command {
        Command::Solve(a) => cmd_solve(&a),
        Command::Baseline(a) => cmd_baseline(&a),
        Command::Opf(a) => cmd_opf(&a),
        Command::Mdp(a) => cmd_mdp(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

pub fn cmd_solve(args: &SolveArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let scenario = prepare(&args.common)?;
    let out = &args.common.out;
    let mut elo = AaConfig { tolerance: scenario.params.eps1, ..AaConfig::elo() };
    let mut eqn = AaConfig { tolerance: scenario.params.eps2, ..AaConfig::equilibrium() };
    if let Some(t) = args.tol_inner {
        elo.tolerance = t;
    }
    if let Some(t) = args.tol_outer {
        eqn.tolerance = t;
    }
    elo.validate().context("--tol-inner")?;
    eqn.validate().context("--tol-outer")?;

    let hash = output::config_hash(&(scenario.to_file(), &elo, &eqn, args.seed, args.baseline_only));
    let mut manifest = Manifest::new("solve", &args.common.scenario, hash);
    manifest.seed = args.seed;
    manifest.aa_inner = Some(elo.clone());
    manifest.aa_outer = Some(eqn.clone());

    if args.baseline_only {
        let (sols, _) = baseline_lmp(&scenario)?;
        output::write_lmp(out.join("lmp.csv"), &scenario, &sols, None)?;
        manifest.converged = true;
        manifest.status = "baseline".into();
        manifest.wall_time_s = started.elapsed().as_secs_f64();
        output::write_json(out.join("manifest.json"), &manifest)?;
        return Ok(());
    }

    let space = build_state_space(&scenario)?;
    let p0 = match args.seed {
        Some(seed) => {
            let (_, base) = baseline_lmp(&scenario)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(base.map(|p| p * (1.0 + rng.gen_range(-0.01..0.01))))
        }
        None => None,
    };
    match solve_equilibrium_with(&scenario, &space, p0.as_ref(), &elo, &eqn) {
        Ok(result) => {
            output::write_equilibrium(out, &scenario, &result)?;
            if args.dump_mdp {
                let u = assemble_rewards(&space, &result.rewards.mu_d, &result.rewards.mu_c, scenario.params.rho)?;
                let table = solve_values(&space, &u)?;
                output::write_mdp_dump(out.join("mdp.csv"), &scenario, &space, &table, &result.response.flow)?;
            }
            let model = crate::reward_design::DemandModel::from_scenario(&scenario);
            if model.inverse_demand(&result.response.demand).iter().any(|&p| p < 0.0) {
                manifest.warnings.push("negative delivery price at equilibrium".into());
            }
            manifest.warnings.extend(result.diagnostics.iter().cloned());
            manifest.converged = true;
            manifest.status = "converged".into();
            manifest.outer_residual = Some(result.residual());
            manifest.outer_iterations = Some(result.outer_trace.iterations());
            manifest.inner_iterations = result.inner_traces.iter().map(|t| t.iterations()).collect();
            manifest.residuals = result.outer_trace.residuals();
            manifest.wall_time_s = started.elapsed().as_secs_f64();
            for w in &manifest.warnings {
                eprintln!("warning: {w}");
            }
            output::write_json(out.join("manifest.json"), &manifest)?;
            Ok(())
        }
        Err(e) => {
            manifest.status = format!("failed: {e}");
            if let Some(r) = e.residuals() {
                manifest.residuals = r.to_vec();
                output::write_residuals(out.join("trace_partial.csv"), r)?;
            }
            manifest.wall_time_s = started.elapsed().as_secs_f64();
            output::write_json(out.join("manifest.json"), &manifest)?;
            Err(e.into())
        }
    }
}

pub fn cmd_baseline(args: &ScenarioArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let scenario = prepare(args)?;
    let (sols, _) = baseline_lmp(&scenario)?;
    output::write_lmp(args.out.join("lmp.csv"), &scenario, &sols, None)?;
    let mut manifest = Manifest::new("baseline", &args.scenario, output::config_hash(&scenario.to_file()));
    manifest.converged = true;
    manifest.status = "solved".into();
    manifest.wall_time_s = started.elapsed().as_secs_f64();
    output::write_json(args.out.join("manifest.json"), &manifest)?;
    Ok(())
}

pub fn cmd_opf(args: &OpfArgs) -> anyhow::Result<()> {
    let scenario = prepare(&args.common)?;
    if args.t >= scenario.params.horizon {
        bail!("--t {} outside horizon of {} steps", args.t, scenario.params.horizon);
    }
    let mut inst = OpfInstance::from_scenario(&scenario);
    let row: Vec<f64> = scenario.base_load_matrix().row(args.t).iter().copied().collect();
    inst.set_load_buses(&row)?;
    let sol = solve_opf(&inst).map_err(|e| anyhow!("step {}: {e}", args.t))?;
    output::write_opf_step(args.common.out.join(format!("opf_t{}.csv", args.t)), &scenario, &inst, &sol)?;
    Ok(())
}

/// Reads `kind,t,zone,value` rows into delivery `T x |delivery|` and charging
/// `T x |charging|` reward matrices. Unlisted entries are zero.
pub fn read_rewards(path: &Path, scenario: &Scenario) -> anyhow::Result<(DMatrix<f64>, DMatrix<f64>)> {
    let t_max = scenario.params.horizon;
    let mut mu_d = DMatrix::zeros(t_max, scenario.n_delivery());
    let mut mu_c = DMatrix::zeros(t_max, scenario.n_charging());
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut seen = BTreeMap::new();
    for (line, rec) in rdr.deserialize::<(String, usize, u32, f64)>().enumerate() {
        let (kind, t, zone, value) = rec.with_context(|| format!("rewards row {}", line + 2))?;
        if t >= t_max {
            bail!("rewards row {}: t = {t} outside horizon", line + 2);
        }
        if !value.is_finite() {
            bail!("rewards row {}: non-finite value", line + 2);
        }
        let z = scenario
            .zone_index(zone)
            .ok_or_else(|| anyhow!("rewards row {}: unknown zone {zone}", line + 2))?;
        let slot = match kind.as_str() {
            "delivery" => scenario.delivery_pos(z).map(|p| &mut mu_d[(t, p)]),
            "charging" => scenario.charging_pos(z).map(|p| &mut mu_c[(t, p)]),
            other => bail!("rewards row {}: unknown kind {other}", line + 2),
        };
        let slot = slot.ok_or_else(|| anyhow!("rewards row {}: zone {zone} has no {kind} action", line + 2))?;
        if seen.insert((kind.clone(), t, zone), ()).is_some() {
            bail!("rewards row {}: duplicate entry", line + 2);
        }
        *slot = value;
    }
    Ok((mu_d, mu_c))
}

pub fn cmd_mdp(args: &MdpArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let scenario = prepare(&args.common)?;
    let (mu_d, mu_c) = read_rewards(&args.rewards, &scenario)?;
    let space = build_state_space(&scenario)?;
    let u = assemble_rewards(&space, &mu_d, &mu_c, scenario.params.rho)?;
    let table = solve_values(&space, &u)?;
    let flow = propagate_flows(&space, &table, scenario.params.fleet);
    let out = &args.common.out;
    let x_d = crate::pumdp::delivery_flows(&space, &flow);
    let x_c = crate::pumdp::charging_flows(&space, &flow);
    output::write_charging(out.join("charging.csv"), &scenario, &x_c)?;
    let model = crate::reward_design::DemandModel::from_scenario(&scenario);
    output::write_delivery(out.join("delivery.csv"), &scenario, &model.aggregate(&x_d))?;
    if args.dump_mdp {
        output::write_mdp_dump(out.join("mdp.csv"), &scenario, &space, &table, &flow)?;
    }
    #[derive(Serialize)]
    struct Summary {
        initial_value: f64,
        states: usize,
        actions: usize,
        teleport_flow: f64,
        wall_time_s: f64,
    }
    let summary = Summary {
        initial_value: table.initial_value(),
        states: space.n_states(),
        actions: space.n_actions(),
        teleport_flow: crate::pumdp::teleport_flow(&space, &flow),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    println!("V(s0) = {}", output::real(summary.initial_value));
    output::write_json(out.join("mdp_summary.json"), &summary)?;
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let mut scenario = synth_scenario(args.seed, args.zones, args.buses)?;
    if let Some(h) = args.horizon {
        scenario = scenario.with_params(|p| p.horizon = h)?;
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_scenario(&scenario, &args.out)?;
    Ok(())
}
