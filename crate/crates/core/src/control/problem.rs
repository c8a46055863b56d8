//! The optimal feed-in problem and its SQP solver.
//!
//! Variables are the Fourier coefficients divided by ρc_p (kelvin), so the
//! objective is J/(ρc_p)² and its Hessian is the same in both scalings.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::constraints::{evaluate_constraints, ConstraintKind, ConstraintSet, ConstraintValues};
use super::objective::{Objective, ObjectiveConfig};
use super::qp::{solve_qp, QpOutcome, QpSolution};
use super::FourierControl;
use crate::error::{Error, Result};
use crate::hydraulics::{posteriori_pressure_control, PressureSolution};
use crate::integrator::{simulate, NewtonConfig, SimulationOptions, Trajectory};
use crate::model::TransportModel;
use crate::scalar::{lit, to_f64, Scalar};
use crate::scenario::{aggregate_stats, PhysicalConstants, ScenarioConfig, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqpOptions {
    pub max_iterations: usize,
    pub kkt_tolerance: f64,
    /// Largest accepted scaled violation.
    pub feasibility_tolerance: f64,
    /// Step norm (K) below which a feasible iterate is accepted as optimal.
    pub step_tolerance: f64,
    /// Initial and largest trust region radius, K.
    pub initial_radius: f64,
    pub max_radius: f64,
    pub armijo: f64,
    pub max_phase1_iterations: usize,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            kkt_tolerance: 1e-6,
            feasibility_tolerance: 1e-6,
            step_tolerance: 1e-8,
            initial_radius: 20.0,
            max_radius: 200.0,
            armijo: 1e-4,
            max_phase1_iterations: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlProblem {
    pub grid: TimeGrid<f64>,
    pub objective: ObjectiveConfig,
    pub constraints: ConstraintSet,
    pub harmonics: usize,
    /// Starting coefficients, J/m³.
    pub initial: DVector<f64>,
    pub options: SqpOptions,
    pub newton: NewtonConfig,
}

impl ControlProblem {
    /// Problem of a scenario: bounds, feed-in cap from the model's demand,
    /// constant initial control.
    pub fn from_scenario<T: Scalar, M: TransportModel<T>>(model: &M, cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let consts = PhysicalConstants::<f64>::default();
        let grid = cfg.grid::<f64>()?;
        let demand = model.coupling().demand();
        let total: Vec<f64> = grid.times().iter().map(|&t| to_f64(demand.total(lit::<T>(t)))).collect();
        let stats = aggregate_stats(&total, &grid, cfg.feedin_factor);
        let constraints = ConstraintSet::from_scenario(cfg, &consts, &stats);
        constraints.validate()?;
        Ok(Self {
            grid,
            objective: ObjectiveConfig {
                eta1: cfg.eta1_s2,
                eta2: consts.energy_from_celsius(cfg.eta2_c),
            },
            constraints,
            harmonics: cfg.harmonics,
            initial: FourierControl::constant(consts.energy_from_celsius(cfg.initial_control_c), cfg.harmonics).coefficients,
            options: SqpOptions::default(),
            newton: NewtonConfig::default(),
        })
    }

    pub fn n_params(&self) -> usize {
        2 * self.harmonics + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// J at the start of the iteration.
    pub objective: f64,
    pub max_violation: f64,
    pub kkt_residual: f64,
    /// Step infinity norm, K.
    pub step: f64,
    pub alpha: f64,
    pub radius: f64,
    /// Cumulative DAE solves.
    pub simulations: usize,
}

/// Smallest slack of every constraint family (bound minus value, positive
/// when satisfied), physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintMargins {
    pub control_j_per_m3: f64,
    pub consumer_energy_j_per_m3: f64,
    pub spread_pa: f64,
    pub feed_in_w: f64,
    /// max (P - P̄)/P̄ outside the relaxed window; ≤ 0 when satisfied.
    pub feed_in_overshoot_rel: f64,
    pub pressure_min_pa: f64,
    pub pressure_max_pa: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub simulation_s: f64,
    pub qp_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    /// κ*, J/m³, ordered [c₀, c₁..c_K, s₁..s_K].
    pub coefficients: Vec<f64>,
    pub harmonics: usize,
    pub objective: f64,
    pub converged: bool,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub phase1_iterations: usize,
    pub iterations: Vec<IterationRecord>,
    /// Number of DAE solves.
    pub simulations: usize,
    pub margins: ConstraintMargins,
    pub timing: Timing,
}

pub struct OptimizationResult<T: Scalar> {
    pub report: OptimizationReport,
    pub control: FourierControl<T>,
    pub trajectory: Trajectory<T>,
    /// Source pressure shift and consumer pressures per grid point.
    pub pressure: Vec<PressureSolution<T>>,
}

struct Point<T: Scalar> {
    k: DVector<f64>,
    j: f64,
    grad: DVector<f64>,
    cons: ConstraintValues,
    traj: Trajectory<T>,
}

struct Evaluator<'a, T: Scalar, M> {
    model: &'a M,
    problem: &'a ControlProblem,
    objective: Objective,
    grid: TimeGrid<T>,
    scale: f64,
    simulations: usize,
    sim_time: f64,
}

impl<'a, T: Scalar, M: TransportModel<T>> Evaluator<'a, T, M> {
    fn new(model: &'a M, problem: &'a ControlProblem) -> Self {
        let scale = problem.constraints.heat_capacity;
        let cfg = ObjectiveConfig {
            eta1: problem.objective.eta1,
            eta2: problem.objective.eta2 / scale,
        };
        let g = &problem.grid;
        Self {
            model,
            problem,
            objective: Objective::new(cfg, problem.harmonics, &g.times()),
            grid: TimeGrid {
                t0: lit(g.t0),
                dt: lit(g.dt),
                n_steps: g.n_steps,
            },
            scale,
            simulations: 0,
            sim_time: 0.0,
        }
    }

    fn control(&self, k: &DVector<f64>) -> FourierControl<T> {
        FourierControl {
            coefficients: k.map(|v| lit(v * self.scale)),
            harmonics: self.problem.harmonics,
        }
    }

    fn eval(&mut self, k: &DVector<f64>, sensitivities: bool) -> Result<Point<T>> {
        let opts = SimulationOptions {
            newton: self.problem.newton,
            keep_states: false,
            sensitivities,
        };
        let start = Instant::now();
        self.simulations += 1;
        let traj = simulate(self.model, &self.control(k), &self.grid, &opts);
        self.sim_time += start.elapsed().as_secs_f64();
        let traj = traj?;
        let mut cons = evaluate_constraints(&traj, &self.problem.constraints);
        if let Some(j) = cons.jacobian.as_mut() {
            *j *= self.scale;
        }
        Ok(Point {
            k: k.clone(),
            j: self.objective.value(k),
            grad: self.objective.gradient(k),
            cons,
            traj,
        })
    }
}

/// QP rows g + G d ≤ -margin plus the box |d_i| ≤ radius.
fn linearized_rows(cons: &ConstraintValues, n: usize, radius: f64, margin: f64) -> (DMatrix<f64>, DVector<f64>) {
    let g = cons.jacobian.as_ref().expect("constraint sensitivities");
    let m = g.nrows();
    let mut c = DMatrix::zeros(m + 2 * n, n);
    let mut b = DVector::zeros(m + 2 * n);
    c.rows_mut(0, m).copy_from(g);
    for i in 0..m {
        b[i] = -cons.values[i] - margin;
    }
    for i in 0..n {
        c[(m + 2 * i, i)] = 1.0;
        c[(m + 2 * i + 1, i)] = -1.0;
        b[m + 2 * i] = radius;
        b[m + 2 * i + 1] = radius;
    }
    (c, b)
}

/// Elastic QP with one slack s ≥ 0 shared by all linearized rows; always
/// feasible. Returns the step and the multipliers of the rows.
fn elastic_step(
    h: &DMatrix<f64>,
    grad: &DVector<f64>,
    cons: &ConstraintValues,
    radius: f64,
    penalty: f64,
) -> Result<QpSolution> {
    let n = h.nrows();
    let (c0, b0) = linearized_rows(cons, n, radius, 0.0);
    let m = cons.values.len();
    let mut he = DMatrix::zeros(n + 1, n + 1);
    he.view_mut((0, 0), (n, n)).copy_from(h);
    he[(n, n)] = 1e-3 * h.diagonal().amax().max(1.0);
    let mut a = DVector::zeros(n + 1);
    a.rows_mut(0, n).copy_from(grad);
    a[n] = penalty;
    let mut c = DMatrix::zeros(c0.nrows() + 1, n + 1);
    c.view_mut((0, 0), (c0.nrows(), n)).copy_from(&c0);
    for i in 0..m {
        c[(i, n)] = -1.0;
    }
    c[(c0.nrows(), n)] = -1.0;
    let mut b = DVector::zeros(c0.nrows() + 1);
    b.rows_mut(0, c0.nrows()).copy_from(&b0);
    match solve_qp(&he, &a, &c, &b, 1e-12)? {
        QpOutcome::Optimal(mut s) => {
            s.x = s.x.rows(0, n).into_owned();
            s.multipliers = s.multipliers.rows(0, m).into_owned();
            Ok(s)
        }
        QpOutcome::Infeasible => Err(Error::Optimizer("elastic QP reported infeasibility".into())),
    }
}

fn merit(p_j: f64, cons: &ConstraintValues, rho: f64) -> f64 {
    p_j + rho * cons.l1_violation()
}

fn kkt_residual(grad: &DVector<f64>, cons: &ConstraintValues, lambda: &DVector<f64>) -> f64 {
    let g = cons.jacobian.as_ref().expect("constraint sensitivities");
    let scale = grad.amax().max(1.0);
    let stat = (grad + g.transpose() * lambda).amax();
    let comp = lambda
        .iter()
        .zip(cons.values.iter())
        .fold(0.0_f64, |a, (&l, &v)| a.max((l * v).abs()));
    stat.max(comp) / scale
}

fn infeasible(cons: &ConstraintValues, ids: &[String], tol: f64) -> Error {
    Error::Infeasible {
        max_violation: cons.max_violation(),
        binding: cons.binding(ids, tol, 5),
    }
}

fn check_bounds(set: &ConstraintSet) -> Result<()> {
    if set.e_min > set.u_max {
        return Err(Error::Infeasible {
            max_violation: (set.e_min - set.u_max) / set.heat_capacity,
            binding: vec!["consumer energy floor lies above the control maximum".into()],
        });
    }
    Ok(())
}

/// Phase 1: drives the scaled violation below the feasibility tolerance by
/// repeated projection onto the linearized feasible set, with a
/// Levenberg-Marquardt step on Σmax(g, 0)² when the projection is empty.
/// Returns the feasible coefficients (J/m³) and the number of iterations.
pub fn find_feasible<T: Scalar, M: TransportModel<T>>(
    problem: &ControlProblem,
    model: &M,
    start: &DVector<f64>,
) -> Result<(DVector<f64>, usize)> {
    let mut ev = Evaluator::new(model, problem);
    let k0 = start / ev.scale;
    let (p, it) = phase1(&mut ev, k0)?;
    Ok((p.k * ev.scale, it))
}

fn phase1<T: Scalar, M: TransportModel<T>>(ev: &mut Evaluator<'_, T, M>, k0: DVector<f64>) -> Result<(Point<T>, usize)> {
    check_bounds(&ev.problem.constraints)?;
    let opts = ev.problem.options;
    let tol = opts.feasibility_tolerance;
    let ids = ev.model.coupling().consumer_ids().to_vec();
    let mut p = ev.eval(&k0, true)?;
    if p.cons.max_violation() <= tol {
        return Ok((p, 0));
    }
    let n = k0.len();
    let mut radius = opts.initial_radius;
    for it in 1..=opts.max_phase1_iterations {
        let (c, b) = linearized_rows(&p.cons, n, radius, 10.0 * tol);
        let d = match solve_qp(&DMatrix::identity(n, n), &DVector::zeros(n), &c, &b, 1e-12)? {
            QpOutcome::Optimal(s) => s.x,
            QpOutcome::Infeasible => lm_step(&p.cons, radius),
        };
        let v0 = p.cons.l1_violation();
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..8 {
            let trial = &p.k + &d * alpha;
            if let Ok(q) = ev.eval(&trial, true) {
                if q.cons.l1_violation() < v0 {
                    accepted = Some(q);
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(q) => {
                if alpha == 1.0 && d.amax() >= 0.99 * radius {
                    radius = (2.0 * radius).min(opts.max_radius);
                }
                p = q;
                if p.cons.max_violation() <= tol {
                    return Ok((p, it));
                }
            }
            None => {
                radius = 0.25 * d.amax().min(radius);
                if radius < 1e-8 {
                    break;
                }
            }
        }
    }
    Err(infeasible(&p.cons, &ids, tol))
}

fn lm_step(cons: &ConstraintValues, radius: f64) -> DVector<f64> {
    let g = cons.jacobian.as_ref().expect("constraint sensitivities");
    let n = g.ncols();
    let mut jtj = DMatrix::zeros(n, n);
    let mut jtr = DVector::zeros(n);
    for i in 0..cons.values.len() {
        let v = cons.values[i];
        if v > 0.0 {
            let row = g.row(i).transpose();
            jtj.ger(1.0, &row, &row, 1.0);
            jtr.axpy(v, &row, 1.0);
        }
    }
    let mu = 1e-3 * jtj.diagonal().amax().max(1e-12);
    let m = jtj + DMatrix::identity(n, n) * mu;
    let d = -m.cholesky().map_or_else(|| jtr.clone(), |c| c.solve(&jtr));
    let norm = d.amax();
    if norm > radius {
        d * (radius / norm)
    } else {
        d
    }
}

/// Runs phase 1 and the SQP iteration from the problem's initial control,
/// then applies the posteriori pressure control.
pub fn optimize<T: Scalar, M: TransportModel<T>>(problem: &ControlProblem, model: &M) -> Result<OptimizationResult<T>> {
    let start = Instant::now();
    let opts = problem.options;
    let tol = opts.feasibility_tolerance;
    let mut ev = Evaluator::new(model, problem);
    let ids = model.coupling().consumer_ids().to_vec();
    let mut qp_time = 0.0;
    let k0 = &problem.initial / ev.scale;
    let (mut p, phase1_iterations) = phase1(&mut ev, k0)?;

    let n = problem.n_params();
    let h = ev.objective.hessian();
    let h = &h + DMatrix::identity(n, n) * (1e-12 * h.diagonal().amax());
    let mut rho = 1.0_f64;
    let mut radius = opts.initial_radius;
    let mut history = Vec::new();
    let mut converged = false;
    let mut kkt = f64::INFINITY;

    for iteration in 0..opts.max_iterations {
        let q0 = Instant::now();
        let (c, b) = linearized_rows(&p.cons, n, radius, 0.0);
        let m = p.cons.values.len();
        let sol = match solve_qp(&h, &p.grad, &c, &b, 1e-12)? {
            QpOutcome::Optimal(mut s) => {
                s.multipliers = s.multipliers.rows(0, m).into_owned();
                s
            }
            QpOutcome::Infeasible => elastic_step(&h, &p.grad, &p.cons, radius, 10.0 * rho.max(1.0))?,
        };
        qp_time += q0.elapsed().as_secs_f64();
        let d = sol.x;
        let lambda = sol.multipliers;
        kkt = kkt_residual(&p.grad, &p.cons, &lambda);
        let viol = p.cons.max_violation();
        let step = d.amax();
        let mut record = IterationRecord {
            iteration,
            objective: p.j * ev.scale * ev.scale,
            max_violation: viol,
            kkt_residual: kkt,
            step,
            alpha: 0.0,
            radius,
            simulations: ev.simulations,
        };
        if viol <= tol && (kkt <= opts.kkt_tolerance || step <= opts.step_tolerance) {
            converged = true;
            history.push(record);
            break;
        }
        rho = rho.max(1.5 * lambda.amax());
        let phi0 = merit(p.j, &p.cons, rho);
        let slope = p.grad.dot(&d) - rho * p.cons.l1_violation();
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..10 {
            let trial = &p.k + &d * alpha;
            if let Ok(q) = ev.eval(&trial, true) {
                if merit(q.j, &q.cons, rho) <= phi0 + opts.armijo * alpha * slope.min(0.0) {
                    accepted = Some(q);
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(q) => {
                if alpha == 1.0 && step >= 0.99 * radius {
                    radius = (2.0 * radius).min(opts.max_radius);
                }
                record.alpha = alpha;
                p = q;
            }
            None => {
                radius = 0.25 * step.min(radius);
            }
        }
        record.simulations = ev.simulations;
        history.push(record);
        if radius < 1e-10 {
            break;
        }
    }
    if p.cons.max_violation() > tol {
        return Err(infeasible(&p.cons, &ids, tol));
    }

    let set = &problem.constraints;
    let pressure: Vec<PressureSolution<T>> = p
        .traj
        .pressure_drops
        .iter()
        .map(|dp| posteriori_pressure_control(dp, lit(set.p_min)))
        .collect();
    let margins = margins(&p.traj, &p.cons, &pressure, set);
    let control = ev.control(&p.k);
    let report = OptimizationReport {
        coefficients: (&p.k * ev.scale).iter().copied().collect(),
        harmonics: problem.harmonics,
        objective: p.j * ev.scale * ev.scale,
        converged,
        kkt_residual: kkt,
        max_violation: p.cons.max_violation(),
        phase1_iterations,
        iterations: history,
        simulations: ev.simulations,
        margins,
        timing: Timing {
            simulation_s: ev.sim_time,
            qp_s: qp_time,
            total_s: start.elapsed().as_secs_f64(),
        },
    };
    Ok(OptimizationResult {
        report,
        control,
        trajectory: p.traj,
        pressure,
    })
}

fn margins<T: Scalar>(
    traj: &Trajectory<T>,
    cons: &ConstraintValues,
    pressure: &[PressureSolution<T>],
    set: &ConstraintSet,
) -> ConstraintMargins {
    let mut m = ConstraintMargins {
        control_j_per_m3: f64::INFINITY,
        consumer_energy_j_per_m3: f64::INFINITY,
        spread_pa: f64::INFINITY,
        feed_in_w: f64::INFINITY,
        feed_in_overshoot_rel: f64::NEG_INFINITY,
        pressure_min_pa: f64::INFINITY,
        pressure_max_pa: f64::INFINITY,
    };
    for row in &cons.rows {
        let k = row.step;
        match row.kind {
            ConstraintKind::ControlMax => {
                m.control_j_per_m3 = m.control_j_per_m3.min(set.u_max - to_f64(traj.control[k]));
            }
            ConstraintKind::ConsumerMin { consumer } => {
                m.consumer_energy_j_per_m3 = m
                    .consumer_energy_j_per_m3
                    .min(to_f64(traj.outputs[k][consumer]) - set.e_min);
            }
            ConstraintKind::Spread => {
                m.spread_pa = m.spread_pa.min(set.spread_max - to_f64(traj.spread[k]));
            }
            ConstraintKind::FeedIn => {
                let cap = set.cap_at(row.time);
                let feed = to_f64(traj.feed_in[k]);
                m.feed_in_w = m.feed_in_w.min(cap - feed);
                if row.time >= set.relax_until {
                    m.feed_in_overshoot_rel = m.feed_in_overshoot_rel.max((feed - cap) / cap);
                }
            }
        }
    }
    for ps in pressure {
        for &p in &ps.p {
            m.pressure_min_pa = m.pressure_min_pa.min(to_f64(p) - set.p_min);
            m.pressure_max_pa = m.pressure_max_pa.min(set.p_max - to_f64(p));
        }
    }
    m
}
