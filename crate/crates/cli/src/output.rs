use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use heatnet::hydraulics::posteriori_pressure_control;
use heatnet::Trajectory;
use serde::Serialize;

use crate::common::consts;

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.to_path_buf())
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// t_s, u_T_J_per_m3, P_W, sumG_W, sumQ_m3_per_s, y_<id>_J_per_m3...
pub fn write_trajectory(path: &Path, traj: &Trajectory, ids: &[String]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["t_s".to_string(), "u_T_J_per_m3".into(), "P_W".into(), "sumG_W".into(), "sumQ_m3_per_s".into()];
    header.extend(ids.iter().map(|id| format!("y_{id}_J_per_m3")));
    w.write_record(&header)?;
    let demand = traj.total_demand();
    for (k, g) in demand.iter().enumerate() {
        let mut row = vec![
            num(traj.times[k]),
            num(traj.control[k]),
            num(traj.feed_in[k]),
            num(*g),
            num(traj.source_flow[k]),
        ];
        row.extend(traj.outputs[k].iter().map(|&y| num(y)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Long format: t_s, consumer_id, dp_Pa, p_Pa, u_p_Pa with the source
/// pressure shifted so that the lowest consumer sits at `p_min`.
pub fn write_pressures(path: &Path, traj: &Trajectory, ids: &[String], p_min: f64) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t_s", "consumer_id", "dp_Pa", "p_Pa", "u_p_Pa"])?;
    for k in 0..traj.len() {
        let sol = posteriori_pressure_control(&traj.pressure_drops[k], p_min);
        for (h, id) in ids.iter().enumerate() {
            w.write_record([num(traj.times[k]), id.clone(), num(sol.dp[h]), num(sol.p[h]), num(sol.u_p)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// t_s, u_T_J_per_m3, u_T_C.
pub fn write_control(path: &Path, times: &[f64], values: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t_s", "u_T_J_per_m3", "u_T_C"])?;
    let c = consts();
    for (&t, &u) in times.iter().zip(values) {
        w.write_record([num(t), num(u), num(c.celsius_from_energy(u))])?;
    }
    w.flush()?;
    Ok(())
}

/// t_s, u_p_Pa.
pub fn write_pressure_control(path: &Path, times: &[f64], u_p: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t_s", "u_p_Pa"])?;
    for (&t, &p) in times.iter().zip(u_p) {
        w.write_record([num(t), num(p)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
