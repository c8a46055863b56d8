//! Forward parameter sensitivities through the implicit midpoint step.
//!
//! Differentiating x₁ - x₀ - dt·f((x₀+x₁)/2, u) = 0 with respect to κ gives
//! (I - dt/2·J) ∂x₁ = (I + dt/2·J) ∂x₀ + dt·B ∂u, with J the total
//! derivative of f at the converged midpoint (flow feedback included).

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::model::{LinearSolve, StepJacobian};
use crate::scalar::{lit, Scalar};

/// Sensitivities of the recorded quantities at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSensitivity<T: Scalar> {
    /// ∂u/∂κ.
    pub du: DVector<T>,
    /// ∂y/∂κ, consumers × parameters.
    pub dy: DMatrix<T>,
    /// ∂P/∂κ.
    pub dfeed: DVector<T>,
    /// ∂spread/∂κ.
    pub dspread: DVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySensitivities<T: Scalar> {
    pub grid: Vec<GridSensitivity<T>>,
}

/// Advances ∂x/∂κ over one step. `b` is B(v) at the midpoint and `du_mid`
/// the parameter gradient of the control at the midpoint time.
pub fn propagate_step<T: Scalar, J: StepJacobian<T>>(
    jac: &J,
    dx0: &DMatrix<T>,
    b: &DVector<T>,
    du_mid: &DVector<T>,
    dt: T,
) -> Result<DMatrix<T>> {
    let h = lit::<T>(0.5) * dt;
    let mut rhs = dx0 + jac.mul_matrix(dx0) * h;
    rhs.ger(dt, b, du_mid, T::one());
    Ok(jac.factor_step(h)?.solve_matrix(&rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ConstantControl, ControlSignal, FourierControl};
    use crate::coupling::{Coupling, FlowMode};
    use crate::hydraulics::Hydraulics;
    use crate::integrator::{simulate, SimulationOptions};
    use crate::model::{FullOrderModel, TransportModel};
    use crate::network::parse_network;
    use crate::scenario::{ConsumerDemand, TimeGrid};
    use crate::thermal::{AffineLibrary, Discretization};

    fn one_cell(q: f64) -> FullOrderModel<f64> {
        let net = parse_network(
            r#"{
            "nodes": [{"id": "S", "z_m": 0}, {"id": "H", "z_m": 0}],
            "pipes": [{"id": "p", "from": "S", "to": "H", "length_m": 100, "diameter_m": 0.2, "roughness_m": 0}],
            "consumers": [{"id": "h", "node": "H", "class": "flat", "daily_energy_J": 1e9}],
            "source": {"node": "S"}
        }"#,
            "one",
        )
        .unwrap();
        let disc = Discretization::uniform(&net, 1).unwrap();
        let hyd = Hydraulics::new(&net, &Default::default(), 1000.0, 9.81).unwrap();
        let lib = AffineLibrary::complete(&net, &disc);
        let c = Coupling::new(
            &net,
            hyd,
            lib,
            ConsumerDemand::constant(&[0.0]),
            FlowMode::Prescribed(DVector::from_element(1, q)),
            1.3e9,
            4e6,
        )
        .unwrap();
        FullOrderModel::new(&net, disc, c).unwrap()
    }

    #[test]
    fn scalar_step_and_sensitivity_closed_form() {
        let q = 0.01;
        let m = one_cell(q);
        let vol = m.volumes()[0];
        let a = -q / vol;
        let dt = 300.0;
        let grid = TimeGrid::new(0.0, dt, dt).unwrap();
        // e(0) = κ and u = κ: state stays at κ, sensitivity stays 1
        let u = ConstantControl(1.4e9);
        let opts = SimulationOptions {
            sensitivities: true,
            keep_states: true,
            ..Default::default()
        };
        let tr = simulate(&m, &u, &grid, &opts).unwrap();
        assert!((tr.outputs[1][0] - 1.4e9).abs() < 1e-1);
        assert!((tr.sensitivities.unwrap().grid[1].dy[(0, 0)] - 1.0).abs() < 1e-12);

        // initial level c₀ and a single cosine harmonic
        let mut k = DVector::zeros(3);
        k[0] = 1.4e9;
        k[1] = 1e8;
        let f = FourierControl::new(k).unwrap();
        let tr = simulate(&m, &f, &grid, &opts).unwrap();
        let um = f.value(dt / 2.0);
        let den = 1.0 - a * dt / 2.0;
        let e1 = (1.4e9 * (1.0 + a * dt / 2.0) - a * dt * um) / den;
        assert!((tr.outputs[1][0] - e1).abs() <= 1e-9 * e1);
        let g = f.gradient(dt / 2.0);
        let sens = tr.sensitivities.unwrap();
        let d0 = ((1.0 + a * dt / 2.0) * 1.0 - a * dt * g[0]) / den;
        let d1 = (-a * dt * g[1]) / den;
        assert!((sens.grid[1].dy[(0, 0)] - d0).abs() < 1e-12);
        assert!((sens.grid[1].dy[(0, 1)] - d1).abs() < 1e-12);
        assert!(sens.grid[0].dy[(0, 1)] == 0.0);
    }

    #[test]
    fn parameters_acting_later_have_no_earlier_effect() {
        let m = one_cell(0.01);
        let grid = TimeGrid::new(0.0, 3000.0, 300.0).unwrap();
        let opts = SimulationOptions {
            sensitivities: true,
            ..Default::default()
        };
        // sine harmonics vanish at t = 0 and the initial state only sees c₀
        let f = FourierControl::constant(1.4e9, 2);
        let tr = simulate(&m, &f, &grid, &opts).unwrap();
        let s = tr.sensitivities.unwrap();
        assert_eq!(s.grid[0].dy.column(3).amax(), 0.0);
        assert!(s.grid[1].dy.column(3).amax() > 0.0);
        assert_eq!(m.dim(), 1);
    }

    #[test]
    fn coupled_sensitivities_match_finite_differences() {
        let net = crate::fixtures::diamond().into_topology::<f64>().unwrap();
        let disc = Discretization::uniform(&net, 3).unwrap();
        let cfg = crate::scenario::ScenarioConfig::default();
        let m = FullOrderModel::from_scenario(&net, disc, &cfg).unwrap();
        let grid = TimeGrid::new(0.0, 8.0 * 3600.0, 600.0).unwrap();
        let kappa = DVector::from_vec(vec![1.5e9, 2e7, -1e7, 1.5e7, 5e6]);
        let opts = SimulationOptions {
            sensitivities: true,
            ..Default::default()
        };
        let run = |k: &DVector<f64>, o: &SimulationOptions| {
            simulate(&m, &FourierControl::new(k.clone()).unwrap(), &grid, o).unwrap()
        };
        let base = run(&kappa, &opts);
        let sens = base.sensitivities.as_ref().unwrap();
        let plain = SimulationOptions::default();
        for j in 0..kappa.len() {
            let h = 1e-4 * 1e7;
            let mut kp = kappa.clone();
            kp[j] += h;
            let mut km = kappa.clone();
            km[j] -= h;
            let (tp, tm) = (run(&kp, &plain), run(&km, &plain));
            let (mut num, mut den) = (0.0, 0.0);
            let (mut pn, mut pd, mut sn, mut sd) = (0.0, 0.0, 0.0, 0.0);
            for k in 0..grid.len() {
                let fd = (&tp.outputs[k] - &tm.outputs[k]) / (2.0 * h);
                num += (fd.clone() - sens.grid[k].dy.column(j)).norm_squared();
                den += fd.norm_squared();
                let fp = (tp.feed_in[k] - tm.feed_in[k]) / (2.0 * h);
                pn += (fp - sens.grid[k].dfeed[j]).powi(2);
                pd += fp * fp;
                let fs = (tp.spread[k] - tm.spread[k]) / (2.0 * h);
                sn += (fs - sens.grid[k].dspread[j]).powi(2);
                sd += fs * fs;
            }
            assert!(num.sqrt() <= 1e-5 * den.sqrt(), "dy param {j}: {}", (num / den).sqrt());
            assert!(pn.sqrt() <= 1e-5 * pd.sqrt(), "dP param {j}: {}", (pn / pd).sqrt());
            assert!(sn.sqrt() <= 1e-5 * sd.sqrt().max(1e-9), "spread param {j}: {}", (sn / sd).sqrt());
        }
    }
}
