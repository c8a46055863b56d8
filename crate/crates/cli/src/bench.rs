use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::Args as ClapArgs;
use heatnet::integrator::SimulationOptions;
use serde::Serialize;

use crate::common::{read_control, CellArgs, Model, NetworkArgs};
use crate::manifest::Manifest;
use crate::output::{ensure_dir, write_rows};

#[derive(Debug, ClapArgs)]
pub struct Args {
    #[command(flatten)]
    pub inputs: NetworkArgs,
    /// Models to time: `fom` and/or ROM archive paths.
    #[arg(long, num_args = 1.., value_delimiter = ',', default_value = "fom")]
    pub models: Vec<String>,
    /// Discretization of `fom` entries.
    #[command(flatten)]
    pub cells: CellArgs,
    /// Supply control (see `simulate`); the scenario's initial control by default.
    #[arg(long)]
    pub control: Option<String>,
    /// Timed repetitions per model; the fastest is reported.
    #[arg(long, default_value_t = 3)]
    pub repeat: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Row {
    model: String,
    kind: &'static str,
    dim: usize,
    jacobian_nnz_max: usize,
    wall_s: f64,
    newton_iterations: usize,
}

pub fn run(args: Args) -> Result<()> {
    let mut manifest = Manifest::new("bench");
    let inputs = args.inputs.load(&mut manifest)?;
    manifest.config("models", &args.models);
    manifest.config("discretization", &args.cells.describe());
    let spec = args.control.unwrap_or_else(|| inputs.scenario.initial_control_c.to_string());
    manifest.config("control", &spec);
    manifest.config("repeat", &args.repeat);
    let u = read_control(&spec, &mut manifest)?;
    let grid = inputs.scenario.grid()?;

    let mut rows = Vec::new();
    for spec in &args.models {
        let model = Model::load(spec, &inputs, &args.cells, &mut manifest)?;
        let traced = model.simulate(
            u.as_ref(),
            &grid,
            &SimulationOptions {
                keep_states: true,
                ..Default::default()
            },
        )?;
        let nnz = model.max_jacobian_nnz(u.as_ref(), &traced)?;
        let mut best = f64::INFINITY;
        for _ in 0..args.repeat.max(1) {
            let t = Instant::now();
            model.simulate(u.as_ref(), &grid, &SimulationOptions::default())?;
            best = best.min(t.elapsed().as_secs_f64());
        }
        manifest.time(spec, best);
        eprintln!("{spec}: dim {} nnz {nnz} {best:.3} s", model.dim());
        rows.push(Row {
            model: spec.clone(),
            kind: model.label(),
            dim: model.dim(),
            jacobian_nnz_max: nnz,
            wall_s: best,
            newton_iterations: traced.iterations.iter().sum(),
        });
    }
    let dir = ensure_dir(&args.out)?;
    let path = dir.join("bench.csv");
    write_rows(&path, &rows)?;
    manifest.output(&path);
    manifest.write(&dir.join("manifest.json"))
}
