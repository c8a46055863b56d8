//! Implicit midpoint integration of the coupled transport/flow system with
//! Newton's method, and forward propagation of parameter sensitivities.

use nalgebra::{DMatrix, DVector};

use crate::control::ControlSignal;
use crate::coupling::CouplingState;
use crate::error::{Error, Result};
use crate::hydraulics::pressure_spread;
use crate::model::{LinearSolve, StepJacobian, TransportModel};
use crate::scalar::{effective_tolerance, lit, to_f64, Scalar};
use crate::scenario::TimeGrid;
use crate::sensitivity::{propagate_step, GridSensitivity, TrajectorySensitivities};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Bound on ‖F‖∞ / max(‖x‖∞, 1).
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 25,
            max_halvings: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimulationOptions {
    pub newton: NewtonConfig,
    /// Keep the state at every grid point.
    pub keep_states: bool,
    /// Propagate ∂x/∂κ for the parameters of the control.
    pub sensitivities: bool,
}

/// Quantities recorded at every grid point.
#[derive(Debug, Clone)]
pub struct Trajectory<T: Scalar> {
    pub times: Vec<T>,
    /// u_T(t), J/m³.
    pub control: Vec<T>,
    /// Consumer energy densities y = Cx, J/m³.
    pub outputs: Vec<DVector<T>>,
    /// Feed-in power (u_T - e_R)Σq, W.
    pub feed_in: Vec<T>,
    /// Σq, m³/s.
    pub source_flow: Vec<T>,
    pub consumer_flows: Vec<DVector<T>>,
    pub demand: Vec<DVector<T>>,
    /// Δp^h without the source pressure, Pa.
    pub pressure_drops: Vec<Vec<T>>,
    /// max_h Δp^h - min_h Δp^h, Pa.
    pub spread: Vec<T>,
    /// Pipe flows, m³/s.
    pub pipe_flows: Vec<DVector<T>>,
    pub states: Option<Vec<DVector<T>>>,
    /// Newton iterations per step.
    pub iterations: Vec<usize>,
    pub sensitivities: Option<TrajectorySensitivities<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Total demand ΣG at every grid point, W.
    pub fn total_demand(&self) -> Vec<T> {
        self.demand.iter().map(|g| g.sum()).collect()
    }
}

/// Result of one converged midpoint step.
pub struct StepOutcome<T: Scalar, J> {
    pub x: DVector<T>,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    /// Coupling state and Jacobian at the converged midpoint.
    pub midpoint: CouplingState<T>,
    pub jacobian: J,
}

fn scaled_residual<T: Scalar>(f: &DVector<T>, x: &DVector<T>) -> T {
    f.amax() / x.amax().max(T::one())
}

/// Solves x₁ - x₀ - dt·f((x₀+x₁)/2, u_mid) = 0.
pub fn midpoint_step<T: Scalar, M: TransportModel<T>>(
    model: &M,
    x0: &DVector<T>,
    t0: T,
    dt: T,
    u_mid: T,
    config: &NewtonConfig,
    step: usize,
) -> Result<StepOutcome<T, M::Jacobian>> {
    let half = lit::<T>(0.5);
    let t_mid = t0 + half * dt;
    let tol = effective_tolerance::<T>(config.tolerance);
    let eval = |x1: &DVector<T>| -> Result<(DVector<T>, CouplingState<T>, M::Jacobian)> {
        let xm = (x0 + x1) * half;
        let state = model.coupling().evaluate(&model.outputs(&xm), t_mid, true)?;
        let (f, jac) = model.evaluate(&state, &xm, u_mid, true);
        let res = x1 - x0 - f * dt;
        Ok((res, state, jac.expect("jacobian requested")))
    };
    let fail = |residuals: Vec<f64>| Error::NewtonDivergence {
        step,
        time_s: to_f64(t0),
        residuals,
    };

    let mut x1 = x0.clone();
    let (mut res, mut state, mut jac) = eval(&x1)?;
    let mut norm = scaled_residual(&res, &x1);
    let mut residuals = vec![to_f64(norm)];
    let mut iterations = 0;
    while !(norm <= tol) {
        if iterations == config.max_iterations || !norm.is_finite() {
            return Err(fail(residuals));
        }
        iterations += 1;
        let delta = jac.factor_step(half * dt)?.solve(&res);
        let mut lambda = T::one();
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let cand = &x1 - &delta * lambda;
            if let Ok((r, s, j)) = eval(&cand) {
                let n = scaled_residual(&r, &cand);
                if n < norm || n <= tol {
                    accepted = Some((cand, r, s, j, n));
                    break;
                }
            }
            lambda *= half;
        }
        let Some((cand, r, s, j, n)) = accepted else {
            return Err(fail(residuals));
        };
        x1 = cand;
        res = r;
        state = s;
        jac = j;
        norm = n;
        residuals.push(to_f64(norm));
    }
    Ok(StepOutcome {
        x: x1,
        iterations,
        residuals,
        midpoint: state,
        jacobian: jac,
    })
}

struct Recorder<T: Scalar> {
    traj: Trajectory<T>,
}

impl<T: Scalar> Recorder<T> {
    fn record<M: TransportModel<T>>(
        &mut self,
        model: &M,
        control: &dyn ControlSignal<T>,
        t: T,
        x: &DVector<T>,
        dx: Option<&DMatrix<T>>,
    ) -> Result<()> {
        let coupling = model.coupling();
        let y = model.outputs(x);
        let state = coupling.evaluate(&y, t, dx.is_some())?;
        let u = control.value(t);
        let q_src = state.source_flow();
        let e_r = coupling.e_return();
        let dp = coupling.hydraulics().pressure_drops(&state.flow);
        let (spread, hi, lo) = pressure_spread(&dp);

        if let (Some(dx), Some(sens)) = (dx, self.traj.sensitivities.as_mut()) {
            let du = control.gradient(t);
            let dy = model.outputs_matrix(dx);
            let mut dqc = dy.clone();
            for (h, mut row) in dqc.row_iter_mut().enumerate() {
                row *= state.dqc_dy[h];
            }
            let mut dfeed = &du * q_src;
            for row in dqc.row_iter() {
                dfeed += row.transpose() * (u - e_r);
            }
            let dspread = match &state.dq_dqc {
                Some(dq) if !dp.is_empty() => {
                    let jp = coupling.hydraulics().pressure_drop_jacobian(&state.flow, dq) * &dqc;
                    (jp.row(hi) - jp.row(lo)).transpose()
                }
                _ => DVector::zeros(du.len()),
            };
            sens.grid.push(GridSensitivity {
                du,
                dy,
                dfeed,
                dspread,
            });
        }

        let tr = &mut self.traj;
        tr.times.push(t);
        tr.control.push(u);
        tr.feed_in.push((u - e_r) * q_src);
        tr.source_flow.push(q_src);
        tr.consumer_flows.push(state.flow.q_consumers.clone());
        tr.pipe_flows.push(state.flow.q.clone());
        tr.demand.push(state.demand.clone());
        tr.outputs.push(y);
        tr.pressure_drops.push(dp);
        tr.spread.push(spread);
        if let Some(states) = tr.states.as_mut() {
            states.push(x.clone());
        }
        Ok(())
    }
}

/// Integrates over the grid starting from the network filled with the
/// control's initial level.
pub fn simulate<T: Scalar, M: TransportModel<T>>(
    model: &M,
    control: &dyn ControlSignal<T>,
    grid: &TimeGrid<T>,
    options: &SimulationOptions,
) -> Result<Trajectory<T>> {
    let x0 = model.uniform_state(control.initial_level());
    let dx0 = options.sensitivities.then(|| {
        let ones = model.uniform_state(T::one());
        &ones * control.initial_gradient().transpose()
    });
    simulate_from(model, control, grid, options, x0, dx0)
}

/// Integrates from an explicit initial state (and initial sensitivity).
pub fn simulate_from<T: Scalar, M: TransportModel<T>>(
    model: &M,
    control: &dyn ControlSignal<T>,
    grid: &TimeGrid<T>,
    options: &SimulationOptions,
    mut x: DVector<T>,
    mut dx: Option<DMatrix<T>>,
) -> Result<Trajectory<T>> {
    if !options.sensitivities {
        dx = None;
    }
    let n = grid.len();
    let mut rec = Recorder {
        traj: Trajectory {
            times: Vec::with_capacity(n),
            control: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
            feed_in: Vec::with_capacity(n),
            source_flow: Vec::with_capacity(n),
            consumer_flows: Vec::with_capacity(n),
            demand: Vec::with_capacity(n),
            pressure_drops: Vec::with_capacity(n),
            spread: Vec::with_capacity(n),
            pipe_flows: Vec::with_capacity(n),
            states: options.keep_states.then(|| Vec::with_capacity(n)),
            iterations: Vec::with_capacity(n),
            sensitivities: dx.as_ref().map(|_| TrajectorySensitivities {
                grid: Vec::with_capacity(n),
            }),
        },
    };
    rec.record(model, control, grid.time(0), &x, dx.as_ref())?;
    let dt = grid.dt;
    let half = lit::<T>(0.5);
    for k in 0..grid.n_steps {
        let t0 = grid.time(k);
        let t_mid = t0 + half * dt;
        let u_mid = control.value(t_mid);
        let out = midpoint_step(model, &x, t0, dt, u_mid, &options.newton, k)?;
        if let Some(d) = dx.as_mut() {
            let b = model.input_vector(&out.midpoint.gamma);
            *d = propagate_step(&out.jacobian, d, &b, &control.gradient(t_mid), dt)?;
        }
        x = out.x;
        rec.traj.iterations.push(out.iterations);
        rec.record(model, control, grid.time(k + 1), &x, dx.as_ref())?;
    }
    Ok(rec.traj)
}

/// Convenience: the final state of a simulation.
pub fn final_state<T: Scalar, M: TransportModel<T>>(
    model: &M,
    control: &dyn ControlSignal<T>,
    grid: &TimeGrid<T>,
    newton: &NewtonConfig,
) -> Result<DVector<T>> {
    let mut x = model.uniform_state(control.initial_level());
    let half = lit::<T>(0.5);
    for k in 0..grid.n_steps {
        let t0 = grid.time(k);
        x = midpoint_step(model, &x, t0, grid.dt, control.value(t0 + half * grid.dt), newton, k)?.x;
    }
    Ok(x)
}

/// Largest Jacobian nonzero count over the stored states of a trajectory.
pub fn max_jacobian_nnz<T: Scalar, M: TransportModel<T>>(
    model: &M,
    control: &dyn ControlSignal<T>,
    traj: &Trajectory<T>,
) -> Result<usize> {
    let states = traj
        .states
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("trajectory was recorded without states".into()))?;
    let mut nnz = 0;
    for (x, &t) in states.iter().zip(&traj.times) {
        let state = model.coupling().evaluate(&model.outputs(x), t, true)?;
        let (_, jac) = model.evaluate(&state, x, control.value(t), true);
        nnz = nnz.max(jac.expect("requested Jacobian").nnz());
    }
    Ok(nnz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ConstantControl, FourierControl};
    use crate::coupling::{Coupling, FlowMode};
    use crate::fixtures;
    use crate::hydraulics::Hydraulics;
    use crate::model::FullOrderModel;
    use crate::scenario::{ConsumerDemand, PhysicalConstants, ScenarioConfig};
    use crate::thermal::{boundary_energy_flux, AffineLibrary, Discretization};

    fn scenario_model(file: crate::network::NetworkFile, cells: usize) -> (FullOrderModel<f64>, ScenarioConfig) {
        let net = file.into_topology().unwrap();
        let cfg = ScenarioConfig::default();
        let disc = Discretization::uniform(&net, cells).unwrap();
        (FullOrderModel::from_scenario(&net, disc, &cfg).unwrap(), cfg)
    }

    #[test]
    fn constant_control_keeps_state_and_feed_in_equals_demand() {
        let (m, _) = scenario_model(fixtures::tree(), 3);
        let e0 = PhysicalConstants::<f64>::default().energy_from_celsius(90.0);
        let grid = TimeGrid::new(0.0, 6.0 * 3600.0, 300.0).unwrap();
        let tr = simulate(&m, &ConstantControl(e0), &grid, &SimulationOptions::default()).unwrap();
        for k in 0..tr.len() {
            assert!(tr.outputs[k].iter().all(|&y| (y - e0).abs() <= 1e-9 * e0));
            let g = tr.demand[k].sum();
            assert!((tr.feed_in[k] - g).abs() <= 1e-10 * g, "{} vs {g}", tr.feed_in[k]);
        }
    }

    #[test]
    fn newton_failure_reports_step_and_history() {
        let (m, _) = scenario_model(fixtures::tree(), 2);
        let grid = TimeGrid::new(0.0, 600.0, 300.0).unwrap();
        let mut k = nalgebra::DVector::zeros(3);
        k[0] = 1.5e9;
        k[2] = 5e7;
        let opts = SimulationOptions {
            newton: NewtonConfig {
                max_iterations: 0,
                ..Default::default()
            },
            ..Default::default()
        };
        let err = simulate(&m, &FourierControl::new(k).unwrap(), &grid, &opts).unwrap_err();
        match err {
            Error::NewtonDivergence { step, residuals, .. } => {
                assert_eq!(step, 0);
                assert_eq!(residuals.len(), 1);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn energy_balance_per_step() {
        let (m, _) = scenario_model(fixtures::diamond(), 4);
        let net = fixtures::diamond().into_topology::<f64>().unwrap();
        let mut k = nalgebra::DVector::zeros(5);
        k[0] = 1.5e9;
        k[1] = 3e7;
        k[4] = -2e7;
        let u = FourierControl::new(k).unwrap();
        let grid = TimeGrid::new(0.0, 4.0 * 3600.0, 300.0).unwrap();
        let opts = SimulationOptions {
            keep_states: true,
            ..Default::default()
        };
        let tr = simulate(&m, &u, &grid, &opts).unwrap();
        let states = tr.states.as_ref().unwrap();
        for s in 0..grid.n_steps {
            let (x0, x1) = (&states[s], &states[s + 1]);
            let xm = (x0 + x1) * 0.5;
            let tm = grid.time(s) + 150.0;
            let st = m.coupling().evaluate(&m.outputs(&xm), tm, false).unwrap();
            let flux = boundary_energy_flux(&net, m.discretization(), &st.flow.q, &st.flow.q_consumers, &xm, u.value(tm));
            let de = m.stored_energy(x1) - m.stored_energy(x0);
            let throughput = 300.0 * st.source_flow() * u.value(tm);
            assert!((de - 300.0 * flux).abs() <= 1e-8 * throughput, "step {s}");
        }
    }

    #[test]
    fn midpoint_is_second_order() {
        let net = fixtures::single_pipe(1000.0, 0.1).into_topology::<f64>().unwrap();
        let disc = Discretization::uniform(&net, 20).unwrap();
        let hyd = Hydraulics::new(&net, &Default::default(), 1000.0, 9.81).unwrap();
        let lib = AffineLibrary::complete(&net, &disc);
        let q = net.pipes()[0].area() * 0.5;
        let c = Coupling::new(
            &net,
            hyd,
            lib,
            ConsumerDemand::constant(&[0.0]),
            FlowMode::Prescribed(nalgebra::DVector::from_element(1, q)),
            1.3e9,
            4e6,
        )
        .unwrap();
        let m = FullOrderModel::new(&net, disc, c).unwrap();
        let mut k = nalgebra::DVector::zeros(5);
        k[0] = 1.5e9;
        k[3] = 5e7;
        k[2] = 2e7;
        let u = FourierControl::new(k).unwrap();
        let te = 4.0 * 3600.0;
        let run = |dt: f64| {
            let g = TimeGrid::new(0.0, te, dt).unwrap();
            final_state(&m, &u, &g, &NewtonConfig::default()).unwrap()
        };
        let reference = run(600.0 / 64.0);
        let errs: Vec<f64> = [600.0, 300.0, 150.0].iter().map(|&dt| (run(dt) - &reference).norm()).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 4.0).abs() < 0.8, "{ratio} from {errs:?}");
        }
    }
}
