use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::Args as ClapArgs;
use heatnet::control::{optimize, ControlProblem, OptimizationResult};
use heatnet::scenario::PASCAL_PER_BAR;
use heatnet::Error;

use crate::common::{CellArgs, Model, NetworkArgs};
use crate::manifest::Manifest;
use crate::output::{ensure_dir, write_control, write_json, write_pressure_control, write_pressures, write_trajectory};

#[derive(Debug, ClapArgs)]
pub struct Args {
    #[command(flatten)]
    pub inputs: NetworkArgs,
    /// `fom` or the path of a ROM archive.
    #[arg(long, default_value = "fom")]
    pub model: String,
    #[command(flatten)]
    pub cells: CellArgs,
    /// Cap on SQP iterations.
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let mut manifest = Manifest::new("optimize");
    let inputs = args.inputs.load(&mut manifest)?;
    manifest.config("model", &args.model);
    manifest.config("discretization", &args.cells.describe());
    let t = Instant::now();
    let model = Model::load(&args.model, &inputs, &args.cells, &mut manifest)?;
    manifest.time("setup", t.elapsed().as_secs_f64());
    let dir = ensure_dir(&args.out)?;

    let t = Instant::now();
    let solved = match &model {
        Model::Full(m) => solve(m, &inputs.scenario, args.max_iterations, &mut manifest),
        Model::Reduced(m) => solve(m, &inputs.scenario, args.max_iterations, &mut manifest),
    };
    manifest.time("optimize", t.elapsed().as_secs_f64());
    let result = match solved {
        Ok(r) => r,
        Err(Error::Infeasible { max_violation, binding }) => {
            eprintln!("infeasible: max scaled violation {max_violation:.3e}");
            eprintln!("binding constraints:");
            for b in &binding {
                eprintln!("  {b}");
            }
            let path = dir.join("infeasibility.json");
            write_json(
                &path,
                &serde_json::json!({ "max_violation": max_violation, "binding": binding, "manifest": "manifest.json" }),
            )?;
            manifest.output(&path);
            manifest.write(&dir.join("manifest.json"))?;
            return Err(Error::Infeasible { max_violation, binding }.into());
        }
        Err(e) => return Err(e.into()),
    };

    let r = &result.report;
    if !r.converged {
        eprintln!("warning: iteration limit reached before convergence (KKT residual {:.3e})", r.kkt_residual);
    }
    eprintln!(
        "J = {:.6e} after {} SQP iterations; max violation {:.2e}",
        r.objective,
        r.iterations.len(),
        r.max_violation
    );

    let mut report = serde_json::to_value(&result.report)?;
    report["model"] = model.label().into();
    report["dim"] = model.dim().into();
    report["manifest"] = "manifest.json".into();
    let path = dir.join("report.json");
    write_json(&path, &report)?;
    manifest.output(&path);

    let traj = &result.trajectory;
    let path = dir.join("control.csv");
    write_control(&path, &traj.times, &traj.control)?;
    manifest.output(&path);
    let path = dir.join("pressure_control.csv");
    let u_p: Vec<f64> = result.pressure.iter().map(|p| p.u_p).collect();
    write_pressure_control(&path, &traj.times, &u_p)?;
    manifest.output(&path);
    let ids = model.consumer_ids();
    let path = dir.join("trajectory.csv");
    write_trajectory(&path, traj, ids)?;
    manifest.output(&path);
    let path = dir.join("pressure.csv");
    write_pressures(&path, traj, ids, inputs.scenario.p_min_bar * PASCAL_PER_BAR)?;
    manifest.output(&path);
    manifest.write(&dir.join("manifest.json"))
}

fn solve<M: heatnet::model::TransportModel<f64>>(
    model: &M,
    cfg: &heatnet::scenario::ScenarioConfig,
    max_iterations: Option<usize>,
    manifest: &mut Manifest,
) -> heatnet::Result<OptimizationResult<f64>> {
    let mut problem = ControlProblem::from_scenario(model, cfg)?;
    if let Some(n) = max_iterations {
        problem.options.max_iterations = n;
    }
    manifest.config("sqp", &problem.options);
    manifest.config("constraints", &problem.constraints);
    optimize(&problem, model)
}
