use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::Args as ClapArgs;
use heatnet::control::{ControlProblem, ControlSignal};
use heatnet::integrator::SimulationOptions;
use heatnet::model::TransportModel;
use heatnet::thermal::Discretization;
use heatnet::Trajectory;
use serde::Serialize;

use crate::common::{build_fom, consts, read_control_csv, CellArgs, Model, NetworkArgs};
use crate::manifest::Manifest;
use crate::output::{ensure_dir, write_json, write_rows};

#[derive(Debug, ClapArgs)]
pub struct Args {
    /// Control to validate (t_s, u_T_J_per_m3).
    #[arg(long)]
    pub control_csv: PathBuf,
    #[command(flatten)]
    pub inputs: NetworkArgs,
    /// Cells per pipe of the reference discretization.
    #[arg(long)]
    pub fine_cells: usize,
    /// Model the control was computed with: `fom` or a ROM archive.
    #[arg(long, default_value = "fom")]
    pub model: String,
    #[command(flatten)]
    pub cells: CellArgs,
    /// Control computed on the reference model, for the control distance.
    #[arg(long)]
    pub reference_control_csv: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// The three validation errors.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ErrorTable {
    /// ‖u - u_ref‖/‖u_ref‖ over the grid, in °C.
    pub control_l2_rel: Option<f64>,
    /// max (P - P̄)/P̄ on the reference model after the relaxation window.
    pub feed_in_overshoot_rel: Option<f64>,
    /// max over consumers of ‖T - T_ref‖/‖T_ref‖, in °C.
    pub output_error_rel: f64,
}

fn output_error(reference: &Trajectory, other: &Trajectory) -> f64 {
    let c = consts();
    let nh = reference.outputs.first().map_or(0, |y| y.len());
    (0..nh)
        .map(|h| {
            let (mut num, mut den) = (0.0, 0.0);
            for (a, b) in reference.outputs.iter().zip(&other.outputs) {
                let (ta, tb) = (c.celsius_from_energy(a[h]), c.celsius_from_energy(b[h]));
                num += (ta - tb) * (ta - tb);
                den += ta * ta;
            }
            (num / den).sqrt()
        })
        .fold(0.0, f64::max)
}

fn control_distance(u: &dyn ControlSignal<f64>, reference: &dyn ControlSignal<f64>, times: &[f64]) -> f64 {
    let c = consts();
    let (mut num, mut den) = (0.0, 0.0);
    for &t in times {
        let (a, b) = (c.celsius_from_energy(u.value(t)), c.celsius_from_energy(reference.value(t)));
        num += (a - b) * (a - b);
        den += b * b;
    }
    (num / den).sqrt()
}

pub fn run(args: Args) -> Result<()> {
    let mut manifest = Manifest::new("validate");
    let inputs = args.inputs.load(&mut manifest)?;
    manifest.input("control", &args.control_csv)?;
    let u = read_control_csv(&args.control_csv)?;
    manifest.config("fine_cells", &args.fine_cells);
    manifest.config("model", &args.model);
    manifest.config("discretization", &args.cells.describe());

    let t = Instant::now();
    let fine = build_fom(&inputs, Discretization::uniform(&inputs.net, args.fine_cells)?)?;
    let coarse = Model::load(&args.model, &inputs, &args.cells, &mut manifest)?;
    manifest.time("setup", t.elapsed().as_secs_f64());

    let grid = inputs.scenario.grid()?;
    let opts = SimulationOptions::default();
    let t = Instant::now();
    let reference = heatnet::integrator::simulate(&fine, &u, &grid, &opts)?;
    let coarse_traj = coarse.simulate(&u, &grid, &opts)?;
    manifest.time("simulate", t.elapsed().as_secs_f64());

    let cons = ControlProblem::from_scenario(&fine, &inputs.scenario)?.constraints;
    let feed_in_overshoot_rel = cons.feed_cap.is_finite().then(|| {
        (0..reference.len())
            .filter(|&k| reference.times[k] >= cons.relax_until)
            .map(|k| (reference.feed_in[k] - cons.feed_cap) / cons.feed_cap)
            .fold(f64::NEG_INFINITY, f64::max)
    });
    let control_l2_rel = match &args.reference_control_csv {
        Some(p) => {
            manifest.input("reference_control", p)?;
            let r = read_control_csv(p)?;
            Some(control_distance(&u, &r, &grid.times()))
        }
        None => None,
    };
    let table = ErrorTable {
        control_l2_rel,
        feed_in_overshoot_rel,
        output_error_rel: output_error(&reference, &coarse_traj),
    };
    eprintln!(
        "control_l2_rel {}, feed_in_overshoot_rel {}, output_error_rel {:.3e}",
        table.control_l2_rel.map_or("n/a".into(), |v| format!("{v:.3e}")),
        table.feed_in_overshoot_rel.map_or("n/a".into(), |v| format!("{v:.3e}")),
        table.output_error_rel
    );

    let dir = ensure_dir(&args.out)?;
    let path = dir.join("validation.csv");
    write_rows(&path, &[table])?;
    manifest.output(&path);
    let path = dir.join("validation.json");
    write_json(
        &path,
        &serde_json::json!({
            "errors": table,
            "fine_cells": fine.dim(),
            "model": coarse.label(),
            "model_dim": coarse.dim(),
            "manifest": "manifest.json",
        }),
    )?;
    manifest.output(&path);
    manifest.write(&dir.join("manifest.json"))
}
