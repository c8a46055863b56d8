use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use clap::Args as ClapArgs;
use heatnet::model::TransportModel;
use heatnet::reduction::{collect_candidates, greedy_reduce, training_controls, ReductionConfig};
use heatnet::scenario::ScenarioConfig;
use serde::Serialize;

use crate::common::{build_fom, CellArgs, Inputs};
use crate::manifest::Manifest;
use crate::output::{write_json, write_rows};

#[derive(Debug, ClapArgs)]
pub struct Args {
    /// Network description (JSON).
    #[arg(long)]
    pub network: PathBuf,
    /// Scenario files whose training runs supply candidate flows; the
    /// default scenario when none are given.
    #[arg(long = "training-scenarios", num_args = 1..)]
    pub training_scenarios: Vec<PathBuf>,
    #[command(flatten)]
    pub cells: CellArgs,
    /// Relative transfer function tolerance.
    #[arg(long, default_value_t = 1e-3)]
    pub delta: f64,
    /// Cap on greedy enrichments.
    #[arg(long, default_value_t = 40)]
    pub max_iterations: usize,
    /// Number of interpolation frequencies.
    #[arg(long, default_value_t = 8)]
    pub shifts: usize,
    /// Candidate sampling interval along the training runs, s.
    #[arg(long, default_value_t = 3600.0)]
    pub sample_every_s: f64,
    /// Archive to write (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct LogRow {
    iteration: usize,
    picked: usize,
    max_error: f64,
    dim: usize,
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "rom".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.{suffix}"))
}

pub fn run(args: Args) -> Result<()> {
    let mut manifest = Manifest::new("reduce");
    manifest.input("network", &args.network)?;
    let net = heatnet::network::load_network::<f64>(&args.network)?;
    let mut scenarios = Vec::new();
    for p in &args.training_scenarios {
        manifest.input("training_scenario", p)?;
        scenarios.push(ScenarioConfig::load(p)?);
    }
    if scenarios.is_empty() {
        scenarios.push(ScenarioConfig::default());
    }
    manifest.config("training_scenarios", &scenarios);
    manifest.config("discretization", &args.cells.describe());
    let disc = args.cells.discretization(&net)?;

    let t = Instant::now();
    let mut candidates = Vec::new();
    let mut foms = Vec::new();
    for cfg in scenarios {
        let inputs = Inputs { net: net.clone(), scenario: cfg };
        let fom = build_fom(&inputs, disc.clone())?;
        let grid = inputs.scenario.grid()?;
        let every = (args.sample_every_s / inputs.scenario.dt_s).round().max(1.0) as usize;
        candidates.extend(collect_candidates(&fom, &training_controls(&inputs.scenario), &grid, every)?);
        foms.push((fom, inputs.scenario));
    }
    manifest.time("training", t.elapsed().as_secs_f64());
    let (fom, cfg) = &foms[0];

    let mut rc = ReductionConfig::for_step(cfg.dt_s);
    rc.tolerance = args.delta;
    rc.max_iterations = args.max_iterations;
    let (lo, hi) = (rc.shifts[0], *rc.shifts.last().expect("shifts"));
    rc.shifts = heatnet::reduction::log_spaced(lo, hi, args.shifts.max(1));
    manifest.config("reduction", &rc);

    let t = Instant::now();
    let (rom, info) = greedy_reduce(fom, &candidates, &rc)?;
    manifest.time("greedy", t.elapsed().as_secs_f64());
    eprintln!(
        "reduced {} cells to r = {} in {} enrichments; max transfer error {:.3e} over {} candidates",
        fom.dim(),
        rom.dim(),
        info.selected.len(),
        info.final_errors.iter().copied().fold(0.0, f64::max),
        candidates.len()
    );

    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let log: Vec<LogRow> = info
        .history
        .iter()
        .map(|h| LogRow {
            iteration: h.iteration,
            picked: h.picked,
            max_error: h.max_error,
            dim: h.dim,
        })
        .collect();
    let log_path = sidecar(&args.out, "greedy.csv");
    write_rows(&log_path, &log)?;
    let manifest_path = sidecar(&args.out, "manifest.json");
    let mut archive = serde_json::to_value(rom.to_archive(fom, info))?;
    archive["manifest"] = manifest_path.file_name().map(|n| n.to_string_lossy().into_owned()).into();
    write_json(&args.out, &archive)?;
    manifest.output(&args.out);
    manifest.output(&log_path);
    manifest.write(&manifest_path)
}
