use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args as ClapArgs;
use heatnet::control::{ConstantControl, ControlSignal, FourierControl, SampledControl};
use heatnet::integrator::SimulationOptions;
use heatnet::model::{FullOrderModel, TransportModel};
use heatnet::network::load_network;
use heatnet::reduction::{ReducedOrderModel, RomArchive};
use heatnet::scenario::{PhysicalConstants, ScenarioConfig, TimeGrid};
use heatnet::thermal::Discretization;
use heatnet::{Error, Fom, Network, Rom, Trajectory};
use nalgebra::DVector;
use serde::Deserialize;

use crate::manifest::Manifest;

#[derive(Debug, Clone, ClapArgs)]
pub struct NetworkArgs {
    /// Network description (JSON).
    #[arg(long)]
    pub network: PathBuf,
    /// Scenario configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ClapArgs)]
pub struct CellArgs {
    /// Cells per pipe.
    #[arg(long, conflicts_with = "cells_per_m")]
    pub cells: Option<usize>,
    /// Cells per meter of pipe (at least one per pipe).
    #[arg(long = "cells-per-m")]
    pub cells_per_m: Option<f64>,
}

impl CellArgs {
    pub fn discretization(&self, net: &Network) -> heatnet::Result<Discretization<f64>> {
        match (self.cells, self.cells_per_m) {
            (_, Some(x)) => Discretization::cells_per_meter(net, x),
            (n, None) => Discretization::uniform(net, n.unwrap_or(1)),
        }
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "cells": self.cells, "cells_per_m": self.cells_per_m })
    }
}

pub fn consts() -> PhysicalConstants<f64> {
    PhysicalConstants::default()
}

pub struct Inputs {
    pub net: Network,
    pub scenario: ScenarioConfig,
}

impl NetworkArgs {
    pub fn load(&self, manifest: &mut Manifest) -> Result<Inputs> {
        manifest.input("network", &self.network)?;
        let net = load_network::<f64>(&self.network)?;
        let scenario = match &self.scenario {
            Some(p) => {
                manifest.input("scenario", p)?;
                ScenarioConfig::load(p)?
            }
            None => ScenarioConfig::default(),
        };
        manifest.config("scenario", &scenario);
        Ok(Inputs { net, scenario })
    }
}

pub fn build_fom(inputs: &Inputs, disc: Discretization<f64>) -> Result<Fom> {
    Ok(FullOrderModel::from_scenario(&inputs.net, disc, &inputs.scenario)?)
}

/// Either model, chosen at run time.
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Full(Fom),
    Reduced(Rom),
}

impl Model {
    /// `spec` is `fom` or the path of a ROM archive.
    pub fn load(spec: &str, inputs: &Inputs, cells: &CellArgs, manifest: &mut Manifest) -> Result<Self> {
        if spec == "fom" {
            let disc = cells.discretization(&inputs.net)?;
            return Ok(Model::Full(build_fom(inputs, disc)?));
        }
        let path = Path::new(spec);
        manifest.input("model", path)?;
        let archive: RomArchive = read_json(path)?;
        let disc = Discretization::from_counts(&inputs.net, archive.cells_per_pipe.clone())?;
        let fom = build_fom(inputs, disc)?;
        let rom = ReducedOrderModel::from_archive(&archive, &fom)?;
        Ok(Model::Reduced(rom))
    }

    pub fn label(&self) -> &'static str {
        match self {
            Model::Full(_) => "fom",
            Model::Reduced(..) => "rom",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Full(m) => m.dim(),
            Model::Reduced(m) => m.dim(),
        }
    }

    pub fn consumer_ids(&self) -> &[String] {
        match self {
            Model::Full(m) => m.coupling().consumer_ids(),
            Model::Reduced(m) => m.coupling().consumer_ids(),
        }
    }

    pub fn simulate(&self, u: &dyn ControlSignal<f64>, grid: &TimeGrid<f64>, opts: &SimulationOptions) -> Result<Trajectory> {
        Ok(match self {
            Model::Full(m) => heatnet::integrator::simulate(m, u, grid, opts)?,
            Model::Reduced(m) => heatnet::integrator::simulate(m, u, grid, opts)?,
        })
    }

    pub fn max_jacobian_nnz(&self, u: &dyn ControlSignal<f64>, traj: &Trajectory) -> Result<usize> {
        Ok(match self {
            Model::Full(m) => heatnet::integrator::max_jacobian_nnz(m, u, traj)?,
            Model::Reduced(m) => heatnet::integrator::max_jacobian_nnz(m, u, traj)?,
        })
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Parse {
            origin: path.display().to_string(),
            message: e.to_string(),
        })
        .map_err(Into::into)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CoefficientFile {
    Plain(Vec<f64>),
    Report { coefficients: Vec<f64> },
}

/// Reads sampled u_T from a control CSV (`t_s`, `u_T_J_per_m3`).
pub fn read_control_csv(path: &Path) -> Result<SampledControl<f64>> {
    let parse = |message: String| Error::Parse {
        origin: path.display().to_string(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => parse(format!("{other:?}")),
    })?;
    let headers = rdr.headers().map_err(|e| parse(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse(format!("missing column {name}")))
    };
    let (it, iu) = (col("t_s")?, col("u_T_J_per_m3")?);
    let (mut t, mut u) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse(e.to_string()))?;
        let num = |i: usize| rec[i].trim().parse::<f64>().map_err(|e| parse(format!("{e} in {:?}", &rec[i])));
        t.push(num(it)?);
        u.push(num(iu)?);
    }
    Ok(SampledControl::new(t, u)?)
}

/// `--control`: a temperature in °C, a coefficient file (.json) or samples (.csv).
pub fn read_control(spec: &str, manifest: &mut Manifest) -> Result<Box<dyn ControlSignal<f64>>> {
    if let Ok(celsius) = spec.parse::<f64>() {
        return Ok(Box::new(ConstantControl(consts().energy_from_celsius(celsius))));
    }
    let path = Path::new(spec);
    manifest.input("control", path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        return Ok(Box::new(read_control_csv(path)?));
    }
    let coefficients = match read_json::<CoefficientFile>(path).context("reading control coefficients")? {
        CoefficientFile::Plain(c) | CoefficientFile::Report { coefficients: c } => c,
    };
    Ok(Box::new(FourierControl::new(DVector::from_vec(coefficients))?))
}
