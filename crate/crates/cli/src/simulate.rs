use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::Args as ClapArgs;
use heatnet::integrator::SimulationOptions;
use heatnet::scenario::PASCAL_PER_BAR;

use crate::common::{build_fom, read_control, CellArgs, Model, NetworkArgs};
use crate::manifest::Manifest;
use crate::output::{ensure_dir, write_pressures, write_trajectory};

#[derive(Debug, ClapArgs)]
pub struct Args {
    #[command(flatten)]
    pub inputs: NetworkArgs,
    #[command(flatten)]
    pub cells: CellArgs,
    /// Supply control: constant °C, coefficient file (.json) or samples (.csv).
    /// Defaults to the scenario's initial control temperature.
    #[arg(long)]
    pub control: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let mut manifest = Manifest::new("simulate");
    let inputs = args.inputs.load(&mut manifest)?;
    manifest.config("discretization", &args.cells.describe());
    let spec = args.control.unwrap_or_else(|| inputs.scenario.initial_control_c.to_string());
    manifest.config("control", &spec);
    let u = read_control(&spec, &mut manifest)?;

    let t = Instant::now();
    let model = Model::Full(build_fom(&inputs, args.cells.discretization(&inputs.net)?)?);
    manifest.time("setup", t.elapsed().as_secs_f64());
    manifest.config("cells", &model.dim());

    let t = Instant::now();
    let traj = model.simulate(u.as_ref(), &inputs.scenario.grid()?, &SimulationOptions::default())?;
    manifest.time("simulate", t.elapsed().as_secs_f64());

    let dir = ensure_dir(&args.out)?;
    let ids = model.consumer_ids();
    let path = dir.join("trajectory.csv");
    write_trajectory(&path, &traj, ids)?;
    manifest.output(&path);
    let path = dir.join("pressure.csv");
    write_pressures(&path, &traj, ids, inputs.scenario.p_min_bar * PASCAL_PER_BAR)?;
    manifest.output(&path);
    manifest.write(&dir.join("manifest.json"))
}
