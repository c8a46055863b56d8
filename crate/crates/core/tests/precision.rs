use heatnet::control::FourierControl;
use heatnet::fixtures;
use heatnet::integrator::{simulate, SimulationOptions};
use heatnet::model::FullOrderModel;
use heatnet::scenario::{PhysicalConstants, ScenarioConfig};
use heatnet::thermal::Discretization;
use heatnet::scalar::{lit, to_f64};
use heatnet::Scalar;

fn run<T: Scalar>() -> Vec<f64> {
    let cfg = ScenarioConfig {
        te_h: 24.0,
        ..Default::default()
    };
    let net = fixtures::diamond().into_topology::<T>().unwrap();
    let m = FullOrderModel::from_scenario(&net, Discretization::uniform(&net, 6).unwrap(), &cfg).unwrap();
    let c = PhysicalConstants::<T>::default();
    let mut u = FourierControl::constant(c.energy_from_celsius(lit(90.0)), 1);
    u.coefficients[1] = c.heat_capacity() * lit(5.0);
    let tr = simulate(&m, &u, &cfg.grid::<T>().unwrap(), &SimulationOptions::default()).unwrap();
    tr.outputs.iter().flat_map(|y| y.iter().map(|v| to_f64(*v))).collect()
}

#[test]
fn single_precision_tracks_double_precision() {
    let a = run::<f64>();
    let b = run::<f32>();
    let worst = a.iter().zip(&b).map(|(x, y)| ((x - y) / x).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst}");
}
