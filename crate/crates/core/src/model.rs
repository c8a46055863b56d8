//! Semi-discrete transport models: the full-order finite-volume model and the
//! interface shared with the reduced model.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::coupling::{Coupling, CouplingState, FlowMode};
use crate::hydraulics::{FrictionConfig, Hydraulics};
use crate::scenario::{ConsumerDemand, PhysicalConstants, ScenarioConfig};
use crate::error::Result;
use crate::network::NetworkTopology;
use crate::scalar::{lit, Scalar};
use crate::sparse::{Csc, SparseLu};
use crate::thermal::{AffineLibrary, Discretization, OutputMap};

/// Solver for the Newton matrix of one step.
pub trait LinearSolve<T: Scalar> {
    fn solve(&self, b: &DVector<T>) -> DVector<T>;
    fn solve_matrix(&self, b: &DMatrix<T>) -> DMatrix<T>;
}

/// Jacobian df/dx of the right-hand side at one state.
pub trait StepJacobian<T: Scalar> {
    type Factor: LinearSolve<T>;

    /// Structural nonzeros.
    fn nnz(&self) -> usize;
    fn mul_vec(&self, x: &DVector<T>) -> DVector<T>;
    fn mul_matrix(&self, x: &DMatrix<T>) -> DMatrix<T>;
    /// Factors I - h·J.
    fn factor_step(&self, h: T) -> Result<Self::Factor>;
    fn to_dense(&self) -> DMatrix<T>;
}

/// ẋ = f(x, u) with f(x, u) = A(v(y)) x + B(v(y)) u and y = C x.
pub trait TransportModel<T: Scalar>: Sync {
    type Jacobian: StepJacobian<T>;

    fn dim(&self) -> usize;
    fn coupling(&self) -> &Coupling<T>;
    fn outputs(&self, x: &DVector<T>) -> DVector<T>;
    fn outputs_matrix(&self, dx: &DMatrix<T>) -> DMatrix<T>;
    /// State of a network filled with energy density `e`.
    fn uniform_state(&self, e: T) -> DVector<T>;
    /// Total stored energy, J.
    fn stored_energy(&self, x: &DVector<T>) -> T;
    fn input_vector(&self, gamma: &[T]) -> DVector<T>;
    /// f(x, u) and, if `jacobian`, df/dx including the flow feedback.
    fn evaluate(
        &self,
        state: &CouplingState<T>,
        x: &DVector<T>,
        u: T,
        jacobian: bool,
    ) -> (DVector<T>, Option<Self::Jacobian>);

    fn rhs(&self, state: &CouplingState<T>, x: &DVector<T>, u: T) -> DVector<T> {
        self.evaluate(state, x, u, false).0
    }
}

pub struct SparseFactor<T: Scalar>(SparseLu<T>);

impl<T: Scalar> LinearSolve<T> for SparseFactor<T> {
    fn solve(&self, b: &DVector<T>) -> DVector<T> {
        self.0.solve(b)
    }

    fn solve_matrix(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.0.solve_matrix(b)
    }
}

#[derive(Debug, Clone)]
pub struct FomJacobian<T: Scalar> {
    mat: Csc<T>,
    diag: Arc<Vec<usize>>,
    order: Arc<Vec<usize>>,
}

impl<T: Scalar> FomJacobian<T> {
    pub fn matrix(&self) -> &Csc<T> {
        &self.mat
    }
}

impl<T: Scalar> StepJacobian<T> for FomJacobian<T> {
    type Factor = SparseFactor<T>;

    fn nnz(&self) -> usize {
        self.mat.nnz()
    }

    fn mul_vec(&self, x: &DVector<T>) -> DVector<T> {
        self.mat.mul_vec(x)
    }

    fn mul_matrix(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut out = DMatrix::zeros(self.mat.nrows(), x.ncols());
        for c in 0..self.mat.ncols() {
            for (r, v) in self.mat.column(c) {
                for k in 0..x.ncols() {
                    out[(r, k)] += v * x[(c, k)];
                }
            }
        }
        out
    }

    fn factor_step(&self, h: T) -> Result<SparseFactor<T>> {
        let mut m = self.mat.clone();
        for v in m.values_mut() {
            *v = -h * *v;
        }
        let vals = m.values_mut();
        for &s in self.diag.iter() {
            vals[s] += T::one();
        }
        Ok(SparseFactor(SparseLu::factor(&m, Some(&self.order), 0.01)?))
    }

    fn to_dense(&self) -> DMatrix<T> {
        self.mat.to_dense()
    }
}

#[derive(Debug, Clone)]
struct TermSlots {
    /// Slot in the Jacobian of every entry of A_i.
    entry_slot: Vec<usize>,
    /// Local row of every entry of A_i and of the input entry.
    entry_local: Vec<usize>,
    input_local: Option<usize>,
    n_local: usize,
    /// (local row, consumer, slot) of the flow feedback.
    feedback: Vec<(usize, usize, usize)>,
}

/// Full-order finite-volume model.
#[derive(Debug, Clone)]
pub struct FullOrderModel<T: Scalar> {
    coupling: Coupling<T>,
    disc: Discretization<T>,
    output: OutputMap,
    volumes: DVector<T>,
    pattern: Csc<T>,
    slots: Vec<TermSlots>,
    diag: Arc<Vec<usize>>,
    order: Arc<Vec<usize>>,
}

impl<T: Scalar> FullOrderModel<T> {
    pub fn new(net: &NetworkTopology<T>, disc: Discretization<T>, coupling: Coupling<T>) -> Result<Self> {
        let n = disc.n_cells();
        let output = OutputMap::new(net, &disc);
        let lib = coupling.library();
        let out_cells = output.cells();

        let mut entries: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        let mut locals = Vec::with_capacity(lib.len());
        for (i, term) in lib.terms().iter().enumerate() {
            let mut rows: Vec<usize> = term.entries.iter().map(|e| e.0).collect();
            rows.extend(term.input.map(|(r, _)| r));
            rows.sort_unstable();
            rows.dedup();
            let local = |r: usize| rows.binary_search(&r).expect("row of term");
            let entry_local: Vec<usize> = term.entries.iter().map(|e| local(e.0)).collect();
            let input_local = term.input.map(|(r, _)| local(r));
            let start = entries.len();
            entries.extend(term.entries.iter().map(|e| (e.0, e.1)));
            let fb_start = entries.len();
            let mut feedback = Vec::new();
            for &h in &coupling.term_consumers()[i] {
                for (l, &r) in rows.iter().enumerate() {
                    feedback.push((l, h, 0));
                    entries.push((r, out_cells[h]));
                }
            }
            locals.push((start, fb_start, entry_local, input_local, rows.len(), feedback));
        }
        let (pattern, slot_of) = Csc::pattern_from(n, n, entries.iter().copied());
        let diag = Arc::new(slot_of[..n].to_vec());
        let slots = locals
            .into_iter()
            .map(|(start, fb_start, entry_local, input_local, n_local, mut feedback)| {
                let entry_slot = slot_of[start..fb_start].to_vec();
                for (k, f) in feedback.iter_mut().enumerate() {
                    f.2 = slot_of[fb_start + k];
                }
                TermSlots {
                    entry_slot,
                    entry_local,
                    input_local,
                    n_local,
                    feedback,
                }
            })
            .collect();

        let order = Arc::new(cell_order(net, &disc, &pattern));
        Ok(Self {
            volumes: disc.volumes(),
            coupling,
            disc,
            output,
            pattern,
            slots,
            diag,
            order,
        })
    }

    /// Power-coupled model with the complete operator library, demand and
    /// return energy from the scenario.
    pub fn from_scenario(net: &NetworkTopology<T>, disc: Discretization<T>, cfg: &ScenarioConfig) -> Result<Self> {
        let coupling = scenario_coupling(net, &disc, cfg, FlowMode::PowerCoupled)?;
        Self::new(net, disc, coupling)
    }

    pub fn discretization(&self) -> &Discretization<T> {
        &self.disc
    }

    pub fn output_map(&self) -> &OutputMap {
        &self.output
    }

    pub fn volumes(&self) -> &DVector<T> {
        &self.volumes
    }

    /// Elimination order used for the step matrices.
    pub fn ordering(&self) -> &[usize] {
        &self.order
    }

    /// A(v) at the given weights.
    pub fn operator(&self, gamma: &[T]) -> Csc<T> {
        self.coupling.library().assemble(gamma)
    }
}

/// Coupling for a network under a scenario, using the complete library.
pub fn scenario_coupling<T: Scalar>(
    net: &NetworkTopology<T>,
    disc: &Discretization<T>,
    cfg: &ScenarioConfig,
    mode: FlowMode<T>,
) -> Result<Coupling<T>> {
    let constants = PhysicalConstants::<T>::default();
    let friction = FrictionConfig {
        reference_reynolds: cfg.reference_reynolds,
        ..Default::default()
    };
    let hyd = Hydraulics::new(net, &friction, constants.rho, constants.g)?;
    let demand = ConsumerDemand::from_consumers(
        net.consumers().iter().map(|c| (c.class_id.as_str(), c.daily_energy)),
        cfg.t_d_c,
    )?;
    Coupling::new(
        net,
        hyd,
        AffineLibrary::complete(net, disc),
        demand,
        mode,
        constants.energy_from_celsius(lit(cfg.t_return_c)),
        constants.heat_capacity() * lit(cfg.energy_floor_k),
    )
}

const DENSE_COLUMN: usize = 8;

/// Cells ordered outward from the source, with dense columns last.
fn cell_order<T: Scalar>(net: &NetworkTopology<T>, disc: &Discretization<T>, pattern: &Csc<T>) -> Vec<usize> {
    let n_nodes = net.nodes().len();
    let mut dist = vec![usize::MAX; n_nodes];
    let s = net.source().node;
    dist[s] = 0;
    let mut queue = VecDeque::from([s]);
    while let Some(a) = queue.pop_front() {
        for &p in net.incident(a) {
            let pipe = &net.pipes()[p];
            let b = if pipe.from == a { pipe.to } else { pipe.from };
            if dist[b] == usize::MAX {
                dist[b] = dist[a] + 1;
                queue.push_back(b);
            }
        }
    }
    let mut pipes: Vec<usize> = (0..net.pipes().len()).collect();
    pipes.sort_by_key(|&p| {
        let pipe = &net.pipes()[p];
        (dist[pipe.from].min(dist[pipe.to]), dist[pipe.from].max(dist[pipe.to]), p)
    });
    let mut order = Vec::with_capacity(disc.n_cells());
    for p in pipes {
        let pipe = &net.pipes()[p];
        if dist[pipe.from] <= dist[pipe.to] {
            order.extend(disc.pipe_cells(p));
        } else {
            order.extend(disc.pipe_cells(p).rev());
        }
    }
    let dense: Vec<bool> = (0..disc.n_cells())
        .map(|c| pattern.col_ptr()[c + 1] - pattern.col_ptr()[c] > DENSE_COLUMN)
        .collect();
    let (sparse, heavy): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&c| !dense[c]);
    sparse.into_iter().chain(heavy).collect()
}

impl<T: Scalar> TransportModel<T> for FullOrderModel<T> {
    type Jacobian = FomJacobian<T>;

    fn dim(&self) -> usize {
        self.disc.n_cells()
    }

    fn coupling(&self) -> &Coupling<T> {
        &self.coupling
    }

    fn outputs(&self, x: &DVector<T>) -> DVector<T> {
        self.output.apply(x)
    }

    fn outputs_matrix(&self, dx: &DMatrix<T>) -> DMatrix<T> {
        let cells = self.output.cells();
        DMatrix::from_fn(cells.len(), dx.ncols(), |h, k| dx[(cells[h], k)])
    }

    fn uniform_state(&self, e: T) -> DVector<T> {
        DVector::from_element(self.dim(), e)
    }

    fn stored_energy(&self, x: &DVector<T>) -> T {
        self.volumes.dot(x)
    }

    fn input_vector(&self, gamma: &[T]) -> DVector<T> {
        self.coupling.library().input_vector(gamma)
    }

    fn evaluate(
        &self,
        state: &CouplingState<T>,
        x: &DVector<T>,
        u: T,
        jacobian: bool,
    ) -> (DVector<T>, Option<FomJacobian<T>>) {
        let lib = self.coupling.library();
        let gamma = &state.gamma;
        let mut f = DVector::zeros(self.dim());
        let mut jac = jacobian.then(|| {
            let mut m = self.pattern.clone();
            m.values_mut().iter_mut().for_each(|v| *v = T::zero());
            m
        });
        let dg = state.dgamma_dy.as_ref();
        let mut w: Vec<T> = Vec::new();
        for (i, (term, slots)) in lib.terms().iter().zip(&self.slots).enumerate() {
            let g = gamma[i];
            let coupled = jacobian && dg.is_some() && !slots.feedback.is_empty();
            if g == T::zero() && !coupled {
                continue;
            }
            if coupled {
                w.clear();
                w.resize(slots.n_local, T::zero());
            }
            for (k, &(r, c, v)) in term.entries.iter().enumerate() {
                let ax = v * x[c];
                f[r] += g * ax;
                if coupled {
                    w[slots.entry_local[k]] += ax;
                }
            }
            if let Some((r, v)) = term.input {
                f[r] += g * v * u;
                if coupled {
                    w[slots.input_local.expect("input row")] += v * u;
                }
            }
            if let Some(m) = jac.as_mut() {
                let vals = m.values_mut();
                for (k, &(_, _, v)) in term.entries.iter().enumerate() {
                    vals[slots.entry_slot[k]] += g * v;
                }
                if coupled {
                    let dg = dg.expect("coupled");
                    for &(l, h, slot) in &slots.feedback {
                        vals[slot] += w[l] * dg[(i, h)];
                    }
                }
            }
        }
        let jac = jac.map(|mat| FomJacobian {
            mat,
            diag: self.diag.clone(),
            order: self.order.clone(),
        });
        (f, jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::parse_network;

    fn looped() -> NetworkTopology<f64> {
        parse_network(
            r#"{
            "nodes": [{"id": "S", "z_m": 0}, {"id": "a", "z_m": 0}, {"id": "b", "z_m": 0}, {"id": "H", "z_m": 0}, {"id": "T", "z_m": 0}],
            "pipes": [
                {"id": "sa", "from": "S", "to": "a", "length_m": 100, "diameter_m": 0.1, "roughness_m": 1e-5},
                {"id": "sb", "from": "S", "to": "b", "length_m": 200, "diameter_m": 0.1, "roughness_m": 1e-5},
                {"id": "ah", "from": "a", "to": "H", "length_m": 100, "diameter_m": 0.1, "roughness_m": 1e-5},
                {"id": "bh", "from": "b", "to": "H", "length_m": 150, "diameter_m": 0.1, "roughness_m": 1e-5},
                {"id": "ht", "from": "H", "to": "T", "length_m": 80, "diameter_m": 0.1, "roughness_m": 1e-5}
            ],
            "consumers": [{"id": "h", "node": "H", "class": "flat", "daily_energy_J": 1e10},
                          {"id": "t", "node": "T", "class": "flat", "daily_energy_J": 1e10},
                          {"id": "a", "node": "a", "class": "flat", "daily_energy_J": 1e10}],
            "source": {"node": "S"}
        }"#,
            "looped",
        )
        .unwrap()
    }

    fn model(mode: FlowMode<f64>) -> FullOrderModel<f64> {
        let net = looped();
        let disc = Discretization::uniform(&net, 3).unwrap();
        let hyd = Hydraulics::new(&net, &Default::default(), 1000.0, 9.81).unwrap();
        let lib = AffineLibrary::complete(&net, &disc);
        let demand = ConsumerDemand::constant(&[2e5, 1e5, 0.5e5]);
        let c = Coupling::new(&net, hyd, lib, demand, mode, 1.3e9, 4.16e6).unwrap();
        FullOrderModel::new(&net, disc, c).unwrap()
    }

    fn profile(n: usize) -> DVector<f64> {
        DVector::from_fn(n, |i, _| 1.45e9 + 1e7 * ((i as f64) * 0.7).sin())
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = model(FlowMode::PowerCoupled);
        let x = profile(m.dim());
        let u = 1.48e9;
        let eval = |x: &DVector<f64>| {
            let s = m.coupling().evaluate(&m.outputs(x), 0.0, false).unwrap();
            m.rhs(&s, x, u)
        };
        let s = m.coupling().evaluate(&m.outputs(&x), 0.0, true).unwrap();
        let (f, jac) = m.evaluate(&s, &x, u, true);
        assert!((&f - eval(&x)).amax() == 0.0);
        let j = jac.unwrap().to_dense();
        let scale = j.amax();
        for c in 0..m.dim() {
            let h = 1e3;
            let mut xp = x.clone();
            xp[c] += h;
            let mut xm = x.clone();
            xm[c] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let err = (fd - j.column(c)).amax();
            assert!(err <= 1e-6 * scale, "column {c}: {err}");
        }
    }

    #[test]
    fn frozen_flow_jacobian_is_the_operator() {
        let m = model(FlowMode::Prescribed(DVector::from_vec(vec![1e-3, 5e-4, 2e-4])));
        let x = profile(m.dim());
        let s = m.coupling().evaluate(&m.outputs(&x), 0.0, true).unwrap();
        let j = m.evaluate(&s, &x, 1.4e9, true).1.unwrap();
        let a = m.operator(&s.gamma);
        assert_eq!((j.to_dense() - a.to_dense()).amax(), 0.0);
    }

    #[test]
    fn flow_feedback_adds_nonzeros() {
        let m = model(FlowMode::PowerCoupled);
        let x = profile(m.dim());
        let s = m.coupling().evaluate(&m.outputs(&x), 0.0, true).unwrap();
        let j = m.evaluate(&s, &x, 1.4e9, true).1.unwrap();
        let a = m.operator(&s.gamma);
        let count = |d: DMatrix<f64>| d.iter().filter(|v| **v != 0.0).count();
        assert!(count(j.to_dense()) > count(a.to_dense()));
    }

    #[test]
    fn step_factor_solves() {
        let m = model(FlowMode::PowerCoupled);
        let x = profile(m.dim());
        let s = m.coupling().evaluate(&m.outputs(&x), 0.0, true).unwrap();
        let j = m.evaluate(&s, &x, 1.4e9, true).1.unwrap();
        let h = 150.0;
        let dense = DMatrix::identity(m.dim(), m.dim()) - j.to_dense() * h;
        let b = DVector::from_fn(m.dim(), |i, _| (i as f64).cos());
        let sol = j.factor_step(h).unwrap().solve(&b);
        assert!((dense * sol - b).amax() < 1e-10);
    }

    #[test]
    fn uniform_state_is_stationary() {
        let m = model(FlowMode::PowerCoupled);
        let x = m.uniform_state(1.45e9);
        let s = m.coupling().evaluate(&m.outputs(&x), 0.0, false).unwrap();
        assert!(m.rhs(&s, &x, 1.45e9).amax() < 1e-3);
    }
}
