use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::Trajectory;
use crate::scalar::{to_f64, Scalar};
use crate::scenario::{DemandStats, PhysicalConstants, ScenarioConfig, PASCAL_PER_BAR};

/// Bounds of the control problem in physical units (J/m³, Pa, W, s).
/// Infinite bounds drop the corresponding rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub u_max: f64,
    pub e_min: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub spread_max: f64,
    pub feed_cap: f64,
    /// Cap used before `relax_until`.
    pub relaxed_cap: f64,
    pub relax_until: f64,
    pub e_return: f64,
    /// ρ·c_p; energy rows are measured in kelvin.
    pub heat_capacity: f64,
}

impl ConstraintSet {
    pub fn from_scenario(cfg: &ScenarioConfig, consts: &PhysicalConstants<f64>, stats: &DemandStats<f64>) -> Self {
        Self {
            u_max: consts.energy_from_celsius(cfg.t_net_max_c),
            e_min: consts.energy_from_celsius(cfg.t_min_cons_c),
            p_min: cfg.p_min_bar * PASCAL_PER_BAR,
            p_max: cfg.p_max_bar * PASCAL_PER_BAR,
            spread_max: cfg.dp_spread_bar * PASCAL_PER_BAR,
            feed_cap: stats.cap,
            relaxed_cap: stats.max,
            relax_until: (cfg.t0_h + cfg.feedin_relax_h) * 3600.0,
            e_return: consts.energy_from_celsius(cfg.t_return_c),
            heat_capacity: consts.heat_capacity(),
        }
    }

    /// No bounds at all.
    pub fn unconstrained(e_return: f64, heat_capacity: f64) -> Self {
        Self {
            u_max: f64::INFINITY,
            e_min: f64::NEG_INFINITY,
            p_min: f64::NEG_INFINITY,
            p_max: f64::INFINITY,
            spread_max: f64::INFINITY,
            feed_cap: f64::INFINITY,
            relaxed_cap: f64::INFINITY,
            relax_until: f64::NEG_INFINITY,
            e_return,
            heat_capacity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spread_max > self.p_max - self.p_min {
            return Err(Error::InvalidConfig(
                "pressure spread limit exceeds p_max - p_min".into(),
            ));
        }
        if self.e_min.is_finite() && self.e_min <= self.e_return {
            return Err(Error::InvalidConfig(
                "minimum consumer energy must exceed the return energy".into(),
            ));
        }
        if !(self.heat_capacity > 0.0) {
            return Err(Error::InvalidConfig("heat capacity must be positive".into()));
        }
        Ok(())
    }

    pub fn cap_at(&self, t: f64) -> f64 {
        if t < self.relax_until {
            self.relaxed_cap
        } else {
            self.feed_cap
        }
    }

    fn feed_scale(&self) -> f64 {
        if self.feed_cap.is_finite() {
            self.feed_cap.abs().max(1.0)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintKind {
    ControlMax,
    ConsumerMin { consumer: usize },
    Spread,
    FeedIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub kind: ConstraintKind,
    /// Grid index.
    pub step: usize,
    pub time: f64,
}

/// Scaled inequalities g ≤ 0: energies in K, spread in bar, feed-in
/// relative to the cap.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintValues {
    pub rows: Vec<ConstraintRow>,
    pub values: DVector<f64>,
    /// ∂g/∂κ, rows × parameters, when sensitivities were available.
    pub jacobian: Option<DMatrix<f64>>,
}

impl ConstraintValues {
    pub fn max_violation(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |a, &v| a.max(v))
    }

    pub fn l1_violation(&self) -> f64 {
        self.values.iter().map(|&v| v.max(0.0)).sum()
    }

    /// Labels of the rows violated by more than `tol`, worst first.
    pub fn binding(&self, consumer_ids: &[String], tol: f64, limit: usize) -> Vec<String> {
        let mut idx: Vec<usize> = (0..self.values.len()).filter(|&i| self.values[i] > tol).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]));
        idx.into_iter()
            .take(limit)
            .map(|i| {
                let r = &self.rows[i];
                let what = match r.kind {
                    ConstraintKind::ControlMax => "control max".to_string(),
                    ConstraintKind::ConsumerMin { consumer } => format!(
                        "energy floor at {}",
                        consumer_ids.get(consumer).map_or("?", |s| s.as_str())
                    ),
                    ConstraintKind::Spread => "pressure spread".into(),
                    ConstraintKind::FeedIn => "feed-in cap".into(),
                };
                format!("{what} at t = {} s (violation {:.3e})", r.time, self.values[i])
            })
            .collect()
    }
}

/// Stacks the inequalities at every grid point of the trajectory.
pub fn evaluate_constraints<T: Scalar>(traj: &Trajectory<T>, set: &ConstraintSet) -> ConstraintValues {
    let c = set.heat_capacity;
    let fs = set.feed_scale();
    let sens = traj.sensitivities.as_ref();
    let n_par = sens.and_then(|s| s.grid.first()).map_or(0, |g| g.du.len());
    let mut rows = Vec::new();
    let mut values = Vec::new();
    let mut grads: Vec<DVector<f64>> = Vec::new();
    let to64 = |v: &DVector<T>, scale: f64| v.map(|x| to_f64(x) * scale);
    for k in 0..traj.len() {
        let t = to_f64(traj.times[k]);
        let gs = sens.map(|s| &s.grid[k]);
        let mut push = |kind, value: f64, grad: Option<DVector<f64>>| {
            rows.push(ConstraintRow { kind, step: k, time: t });
            values.push(value);
            if let Some(g) = grad {
                grads.push(g);
            }
        };
        if set.u_max.is_finite() {
            push(
                ConstraintKind::ControlMax,
                (to_f64(traj.control[k]) - set.u_max) / c,
                gs.map(|g| to64(&g.du, 1.0 / c)),
            );
        }
        if set.e_min.is_finite() {
            for (h, &y) in traj.outputs[k].iter().enumerate() {
                push(
                    ConstraintKind::ConsumerMin { consumer: h },
                    (set.e_min - to_f64(y)) / c,
                    gs.map(|g| g.dy.row(h).transpose().map(|x| -to_f64(x) / c)),
                );
            }
        }
        if set.spread_max.is_finite() {
            push(
                ConstraintKind::Spread,
                (to_f64(traj.spread[k]) - set.spread_max) / PASCAL_PER_BAR,
                gs.map(|g| to64(&g.dspread, 1.0 / PASCAL_PER_BAR)),
            );
        }
        let cap = set.cap_at(t);
        if cap.is_finite() {
            push(
                ConstraintKind::FeedIn,
                (to_f64(traj.feed_in[k]) - cap) / fs,
                gs.map(|g| to64(&g.dfeed, 1.0 / fs)),
            );
        }
    }
    let jacobian = sens.map(|_| DMatrix::from_fn(grads.len(), n_par, |i, j| grads[i][j]));
    ConstraintValues {
        rows,
        values: DVector::from_vec(values),
        jacobian,
    }
}
