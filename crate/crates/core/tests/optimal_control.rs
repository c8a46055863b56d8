use heatnet::control::{
    evaluate_constraints, find_feasible, optimize, ConstraintSet, ControlProblem, ControlSignal, FourierControl,
};
use heatnet::fixtures::{self, NetworkBuilder};
use heatnet::integrator::{simulate, SimulationOptions};
use heatnet::model::FullOrderModel;
use heatnet::network::NetworkFile;
use heatnet::scenario::{PhysicalConstants, ScenarioConfig};
use heatnet::thermal::Discretization;
use heatnet::Error;
use nalgebra::DVector;

fn model(file: NetworkFile, cells: usize, cfg: &ScenarioConfig) -> FullOrderModel<f64> {
    let net = file.into_topology().unwrap();
    let disc = Discretization::uniform(&net, cells).unwrap();
    FullOrderModel::from_scenario(&net, disc, cfg).unwrap()
}

fn residential_pipe(length_m: f64, diameter_m: f64) -> NetworkFile {
    NetworkBuilder::new("S")
        .node("H", 0.0)
        .pipe("p", "S", "H", length_m, diameter_m)
        .consumer("h", "H", "residential", fixtures::daily(200.0))
        .file()
}

fn two_days() -> ScenarioConfig {
    ScenarioConfig {
        te_h: 48.0,
        dt_s: 600.0,
        harmonics: 4,
        ..Default::default()
    }
}

#[test]
fn unconstrained_problem_converges_to_anchor_level() {
    let cfg = two_days();
    let m = model(fixtures::tree(), 2, &cfg);
    let mut p = ControlProblem::from_scenario(&m, &cfg).unwrap();
    let c = PhysicalConstants::<f64>::default();
    p.constraints = ConstraintSet::unconstrained(p.constraints.e_return, c.heat_capacity());
    p.initial[0] = c.energy_from_celsius(80.0);
    p.initial[1] = c.heat_capacity() * 3.0;
    let r = optimize(&p, &m).unwrap();
    assert!(r.report.converged);
    assert!(r.report.iterations.len() <= 2, "{:?}", r.report.iterations);
    assert_eq!(r.report.phase1_iterations, 0);
    let target = FourierControl::constant(p.objective.eta2, p.harmonics).coefficients;
    let err = (DVector::from_vec(r.report.coefficients.clone()) - target).amax();
    assert!(err <= 1e-6 * p.objective.eta2, "{err}");
    assert_eq!(r.report.simulations, 1 + r.report.iterations.iter().filter(|i| i.alpha > 0.0).count());
}

#[test]
fn contradictory_bounds_are_infeasible() {
    let cfg = two_days();
    let m = model(fixtures::single_pipe(500.0, 0.1), 4, &cfg);
    let mut p = ControlProblem::from_scenario(&m, &cfg).unwrap();
    p.constraints.e_min = p.constraints.u_max + 1e6;
    let e = find_feasible(&p, &m, &p.initial).unwrap_err();
    assert!(matches!(e, Error::Infeasible { .. }), "{e}");
}

#[test]
fn feasible_start_is_returned_unchanged() {
    let cfg = ScenarioConfig {
        feedin_factor: 1.0,
        ..two_days()
    };
    let m = model(fixtures::single_pipe(500.0, 0.1), 4, &cfg);
    let mut p = ControlProblem::from_scenario(&m, &cfg).unwrap();
    // The cap Ḡ is computed on the second day; leave room for interpolation.
    p.constraints.feed_cap *= 1.0 + 1e-9;
    let (k, it) = find_feasible(&p, &m, &p.initial).unwrap();
    assert_eq!(it, 0);
    assert_eq!(k, p.initial);
}

#[test]
fn phase_one_removes_feed_in_violation() {
    let cfg = two_days();
    let m = model(residential_pipe(2000.0, 0.1), 10, &cfg);
    let p = ControlProblem::from_scenario(&m, &cfg).unwrap();
    let grid = p.grid;
    let opts = SimulationOptions::default();
    let start = simulate(&m, &FourierControl::<f64>::new(p.initial.clone()).unwrap(), &grid, &opts).unwrap();
    let v0 = evaluate_constraints(&start, &p.constraints);
    assert!(v0.max_violation() > 1e-3);
    let (k, it) = find_feasible(&p, &m, &p.initial).unwrap();
    assert!(it > 0);
    let again = simulate(&m, &FourierControl::new(k).unwrap(), &grid, &opts).unwrap();
    let v = evaluate_constraints(&again, &p.constraints);
    assert!(v.max_violation() <= p.options.feasibility_tolerance, "{}", v.max_violation());
}

#[test]
fn constraint_gradients_match_finite_differences() {
    let cfg = two_days();
    let m = model(fixtures::diamond(), 5, &cfg);
    let p = ControlProblem::from_scenario(&m, &cfg).unwrap();
    let c = PhysicalConstants::<f64>::default().heat_capacity();
    let mut k = p.initial.clone();
    k[1] = 4.0 * c;
    k[p.harmonics + 1] = -3.0 * c;
    k[2] = 1.0 * c;
    let sim = |k: &DVector<f64>, sens: bool| {
        let opts = SimulationOptions {
            sensitivities: sens,
            ..Default::default()
        };
        let tr = simulate(&m, &FourierControl::new(k.clone()).unwrap(), &p.grid, &opts).unwrap();
        evaluate_constraints(&tr, &p.constraints)
    };
    let base = sim(&k, true);
    let jac = base.jacobian.clone().unwrap();
    for i in [0, 1, 2, p.harmonics + 1] {
        let h = 1e-2 * c;
        let mut kp = k.clone();
        kp[i] += h;
        let mut km = k.clone();
        km[i] -= h;
        let fd = (sim(&kp, false).values - sim(&km, false).values) / (2.0 * h);
        let col = jac.column(i);
        // Spread rows switch between consumer pairs; compare the smooth rows.
        let mut worst = 0.0_f64;
        for (r, row) in base.rows.iter().enumerate() {
            if !matches!(row.kind, heatnet::control::ConstraintKind::Spread) {
                worst = worst.max((fd[r] - col[r]).abs());
            }
        }
        assert!(worst <= 1e-4 * col.amax(), "parameter {i}: {worst} vs {}", col.amax());
    }
}

#[test]
fn optimal_control_preheats_before_peak_demand() {
    let cfg = ScenarioConfig {
        te_h: 72.0,
        dt_s: 600.0,
        harmonics: 6,
        ..Default::default()
    };
    let m = model(residential_pipe(2000.0, 0.1), 20, &cfg);
    let p = ControlProblem::from_scenario(&m, &cfg).unwrap();
    let r = optimize(&p, &m).unwrap();
    assert!(r.report.converged);
    assert!(r.report.max_violation <= p.options.feasibility_tolerance);
    let tr = &r.trajectory;
    let demand = tr.total_demand();
    let day2: Vec<usize> = (0..tr.len()).filter(|&k| tr.times[k] >= 86400.0 && tr.times[k] < 2.0 * 86400.0).collect();
    let argmax = |v: &dyn Fn(usize) -> f64| day2.iter().copied().max_by(|&a, &b| v(a).total_cmp(&v(b))).unwrap();
    let t_u = tr.times[argmax(&|k| r.control.value(tr.times[k]))];
    let t_g = tr.times[argmax(&|k| demand[k])];
    let vbar = tr.pipe_flows.iter().map(|q| q[0]).sum::<f64>() / tr.len() as f64 / (std::f64::consts::PI * 0.05 * 0.05);
    let delay = 2000.0 / vbar;
    assert!((t_g - t_u - delay).abs() <= 0.25 * delay, "{t_u} {t_g} {delay}");
}
