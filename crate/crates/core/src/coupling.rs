//! Closure of the transport equation: consumer energies determine the
//! consumer flows through the heat demand, the loop equations fix the pipe
//! flows, and the pipe flows fix the operator weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hydraulics::{consumer_flows, FlowField, Hydraulics};
use crate::network::NetworkTopology;
use crate::scalar::{to_f64, Scalar};
use crate::scenario::ConsumerDemand;
use crate::thermal::{AffineLibrary, FlowVar};

/// How consumer flows are obtained.
#[derive(Debug, Clone)]
pub enum FlowMode<T: Scalar> {
    /// q_h = G_h(t) / (y_h - e_R).
    PowerCoupled,
    /// Fixed consumer flows, m³/s.
    Prescribed(DVector<T>),
}

/// Everything derived from the consumer energies at one instant.
#[derive(Debug, Clone)]
pub struct CouplingState<T: Scalar> {
    pub demand: DVector<T>,
    pub flow: FlowField<T>,
    pub gamma: Vec<T>,
    /// dγ/dy, terms × consumers. `None` when not requested or when the
    /// flows do not depend on y.
    pub dgamma_dy: Option<DMatrix<T>>,
    /// dq_cons/dy (diagonal).
    pub dqc_dy: DVector<T>,
    /// dq_pipes/dq_cons, when derivatives were requested.
    pub dq_dqc: Option<DMatrix<T>>,
}

impl<T: Scalar> CouplingState<T> {
    pub fn source_flow(&self) -> T {
        self.flow.source_flow()
    }
}

#[derive(Debug, Clone)]
pub struct Coupling<T: Scalar> {
    hydraulics: Hydraulics<T>,
    library: AffineLibrary<T>,
    demand: ConsumerDemand<T>,
    mode: FlowMode<T>,
    e_return: T,
    floor: T,
    consumer_ids: Vec<String>,
    term_consumers: Vec<Vec<usize>>,
    frozen: Option<CouplingState<T>>,
}

impl<T: Scalar> Coupling<T> {
    pub fn new(
        net: &NetworkTopology<T>,
        hydraulics: Hydraulics<T>,
        library: AffineLibrary<T>,
        demand: ConsumerDemand<T>,
        mode: FlowMode<T>,
        e_return: T,
        floor: T,
    ) -> Result<Self> {
        let nc = net.consumers().len();
        if demand.len() != nc {
            return Err(Error::InvalidConfig(format!(
                "demand has {} consumers, network has {nc}",
                demand.len()
            )));
        }
        let term_consumers = match mode {
            FlowMode::PowerCoupled => structural_dependencies(&hydraulics, &library),
            FlowMode::Prescribed(_) => vec![Vec::new(); library.len()],
        };
        let mut c = Self {
            hydraulics,
            library,
            demand,
            mode,
            e_return,
            floor,
            consumer_ids: net.consumers().iter().map(|c| c.id.clone()).collect(),
            term_consumers,
            frozen: None,
        };
        if let FlowMode::Prescribed(q) = &c.mode {
            if q.len() != nc {
                return Err(Error::InvalidConfig("one prescribed flow per consumer is required".into()));
            }
            let flow = c.hydraulics.solve_loop_flows(q.clone())?;
            let gamma = c.library.weights(&flow.q, flow.source_flow())?;
            c.frozen = Some(CouplingState {
                demand: DVector::zeros(nc),
                flow,
                gamma,
                dgamma_dy: None,
                dqc_dy: DVector::zeros(nc),
                dq_dqc: None,
            });
        }
        Ok(c)
    }

    pub fn hydraulics(&self) -> &Hydraulics<T> {
        &self.hydraulics
    }

    pub fn library(&self) -> &AffineLibrary<T> {
        &self.library
    }

    pub fn demand(&self) -> &ConsumerDemand<T> {
        &self.demand
    }

    pub fn mode(&self) -> &FlowMode<T> {
        &self.mode
    }

    pub fn e_return(&self) -> T {
        self.e_return
    }

    pub fn floor(&self) -> T {
        self.floor
    }

    pub fn n_consumers(&self) -> usize {
        self.consumer_ids.len()
    }

    pub fn consumer_ids(&self) -> &[String] {
        &self.consumer_ids
    }

    /// Consumers whose energy can influence each weight.
    pub fn term_consumers(&self) -> &[Vec<usize>] {
        &self.term_consumers
    }

    pub fn is_coupled(&self) -> bool {
        matches!(self.mode, FlowMode::PowerCoupled)
    }

    /// Same coupling with another operator library.
    pub fn with_library(&self, library: AffineLibrary<T>) -> Result<Self> {
        let mut c = Self {
            term_consumers: match self.mode {
                FlowMode::PowerCoupled => structural_dependencies(&self.hydraulics, &library),
                FlowMode::Prescribed(_) => vec![Vec::new(); library.len()],
            },
            library,
            frozen: None,
            ..self.clone()
        };
        if let Some(state) = &self.frozen {
            let gamma = c.library.weights(&state.flow.q, state.flow.source_flow())?;
            c.frozen = Some(CouplingState {
                gamma,
                ..state.clone()
            });
        }
        Ok(c)
    }

    /// Consumer flows for energies `y` at time `t`.
    pub fn consumer_flows(&self, y: &DVector<T>, t: T) -> Result<(DVector<T>, DVector<T>)> {
        let g = self.demand.at(t);
        let q = consumer_flows(g.as_slice(), y.as_slice(), self.e_return, self.floor).map_err(|e| match e {
            Error::EnergyFloor {
                consumer,
                difference,
                floor,
                ..
            } => Error::EnergyFloor {
                consumer: consumer
                    .parse::<usize>()
                    .ok()
                    .and_then(|h| self.consumer_ids.get(h).cloned())
                    .unwrap_or(consumer),
                difference,
                floor,
                time_s: Some(to_f64(t)),
            },
            other => other,
        })?;
        Ok((g, DVector::from_vec(q)))
    }

    /// Evaluates flows and weights; with `derivatives` also dγ/dy.
    pub fn evaluate(&self, y: &DVector<T>, t: T, derivatives: bool) -> Result<CouplingState<T>> {
        if let Some(state) = &self.frozen {
            return Ok(state.clone());
        }
        let (demand, qc) = self.consumer_flows(y, t)?;
        let dqc_dy = DVector::from_iterator(
            qc.len(),
            qc.iter().zip(y.iter()).map(|(&q, &e)| -q / (e - self.e_return)),
        );
        let flow = self.hydraulics.solve_loop_flows(qc)?;
        let q_src = flow.source_flow();
        let gamma = self.library.weights(&flow.q, q_src)?;
        let (dgamma_dy, dq_dqc) = if derivatives {
            let dq = self.hydraulics.flow_jacobian(&flow);
            let mut dg = self.library.weight_jacobian(&flow.q, q_src, &dq);
            for (h, mut col) in dg.column_iter_mut().enumerate() {
                col *= dqc_dy[h];
            }
            (Some(dg), Some(dq))
        } else {
            (None, None)
        };
        Ok(CouplingState {
            demand,
            flow,
            gamma,
            dgamma_dy,
            dqc_dy,
            dq_dqc,
        })
    }
}

/// For every term, the consumers whose flow can change its weight.
fn structural_dependencies<T: Scalar>(hyd: &Hydraulics<T>, lib: &AffineLibrary<T>) -> Vec<Vec<usize>> {
    let nc = hyd.n_consumers();
    let np = hyd.n_pipes();
    let loops = hyd.loops();

    // loops sharing a pipe respond to each other
    let mut comp: Vec<usize> = (0..loops.len()).collect();
    fn find(c: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while c[r] != r {
            r = c[r];
        }
        c[i] = r;
        r
    }
    let mut loop_of_pipe: Vec<Vec<usize>> = vec![Vec::new(); np];
    for (j, lp) in loops.iter().enumerate() {
        for e in &lp.edges {
            loop_of_pipe[e.pipe].push(j);
        }
    }
    for ls in &loop_of_pipe {
        for w in ls.windows(2) {
            let (a, b) = (find(&mut comp, w[0]), find(&mut comp, w[1]));
            comp[a] = b;
        }
    }
    let roots: Vec<usize> = (0..loops.len()).map(|j| find(&mut comp, j)).collect();

    let mut depends = vec![vec![false; nc]; np];
    for h in 0..nc {
        let mut touched = vec![false; loops.len()];
        for e in hyd.path_to_consumer(h) {
            depends[e.pipe][h] = true;
            for &j in &loop_of_pipe[e.pipe] {
                touched[roots[j]] = true;
            }
        }
        for (j, lp) in loops.iter().enumerate() {
            if touched[roots[j]] {
                for e in &lp.edges {
                    depends[e.pipe][h] = true;
                }
            }
        }
    }

    (0..lib.len())
        .map(|i| {
            let mut mask = vec![false; nc];
            for var in lib.weight_dependencies(i) {
                match var {
                    FlowVar::Pipe(p) => {
                        for h in 0..nc {
                            mask[h] |= depends[p][h];
                        }
                    }
                    FlowVar::Source => mask.iter_mut().for_each(|m| *m = true),
                }
            }
            (0..nc).filter(|&h| mask[h]).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::parse_network;
    use crate::thermal::Discretization;

    fn diamond() -> NetworkTopology<f64> {
        parse_network(
            r#"{
            "nodes": [{"id": "S", "z_m": 0}, {"id": "a", "z_m": 0}, {"id": "b", "z_m": 0}, {"id": "H", "z_m": 0}, {"id": "T", "z_m": 0}],
            "pipes": [
                {"id": "sa", "from": "S", "to": "a", "length_m": 100, "diameter_m": 0.1, "roughness_m": 1e-5},
                {"id": "sb", "from": "S", "to": "b", "length_m": 200, "diameter_m": 0.1, "roughness_m": 1e-5},
                {"id": "ah", "from": "a", "to": "H", "length_m": 100, "diameter_m": 0.1, "roughness_m": 1e-5},
                {"id": "bh", "from": "b", "to": "H", "length_m": 150, "diameter_m": 0.1, "roughness_m": 1e-5},
                {"id": "st", "from": "S", "to": "T", "length_m": 80, "diameter_m": 0.1, "roughness_m": 1e-5}
            ],
            "consumers": [{"id": "h", "node": "H", "class": "flat", "daily_energy_J": 1e10},
                          {"id": "t", "node": "T", "class": "flat", "daily_energy_J": 1e10}],
            "source": {"node": "S"}
        }"#,
            "diamond",
        )
        .unwrap()
    }

    fn coupling(net: &NetworkTopology<f64>) -> Coupling<f64> {
        let hyd = Hydraulics::new(net, &Default::default(), 1000.0, 9.81).unwrap();
        let disc = Discretization::uniform(net, 2).unwrap();
        let lib = AffineLibrary::complete(net, &disc);
        let demand = ConsumerDemand::constant(&[2e5, 1e5]);
        Coupling::new(net, hyd, lib, demand, FlowMode::PowerCoupled, 1.3e9, 4.16e6).unwrap()
    }

    #[test]
    fn flows_follow_demand() {
        let net = diamond();
        let c = coupling(&net);
        let y = DVector::from_vec(vec![1.5e9, 1.4e9]);
        let s = c.evaluate(&y, 0.0, false).unwrap();
        assert!((s.flow.q_consumers[0] - 2e5 / 2e8).abs() < 1e-15);
        assert!((s.flow.q_consumers[1] - 1e5 / 1e8).abs() < 1e-15);
        assert!((s.source_flow() - 2e-3).abs() < 1e-15);
    }

    #[test]
    fn floor_violation_names_consumer_and_time() {
        let net = diamond();
        let c = coupling(&net);
        let y = DVector::from_vec(vec![1.5e9, 1.301e9]);
        match c.evaluate(&y, 600.0, false).unwrap_err() {
            Error::EnergyFloor { consumer, time_s, .. } => {
                assert_eq!(consumer, "t");
                assert_eq!(time_s, Some(600.0));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn weight_derivative_matches_finite_differences() {
        let net = diamond();
        let c = coupling(&net);
        let y = DVector::from_vec(vec![1.45e9, 1.42e9]);
        let s = c.evaluate(&y, 0.0, true).unwrap();
        let dg = s.dgamma_dy.unwrap();
        for h in 0..2 {
            let eps = 1e3;
            let mut yp = y.clone();
            yp[h] += eps;
            let mut ym = y.clone();
            ym[h] -= eps;
            let gp = c.evaluate(&yp, 0.0, false).unwrap().gamma;
            let gm = c.evaluate(&ym, 0.0, false).unwrap().gamma;
            for i in 0..gp.len() {
                let fd = (gp[i] - gm[i]) / (2.0 * eps);
                let scale = dg.column(h).amax().max(1e-30);
                assert!((fd - dg[(i, h)]).abs() <= 1e-6 * scale, "term {i} consumer {h}");
            }
        }
    }

    #[test]
    fn structural_pattern_covers_numerical_pattern() {
        let net = diamond();
        let c = coupling(&net);
        let y = DVector::from_vec(vec![1.45e9, 1.42e9]);
        let dg = c.evaluate(&y, 0.0, true).unwrap().dgamma_dy.unwrap();
        for (i, deps) in c.term_consumers().iter().enumerate() {
            for h in 0..2 {
                if dg[(i, h)] != 0.0 {
                    assert!(deps.contains(&h), "term {i} consumer {h}");
                }
            }
        }
        // the branch to T does not react to consumer H
        let key = crate::thermal::TermKey::Pipe { pipe: 4, sign: 1 };
        let i = c.library().position(&key).unwrap();
        assert_eq!(c.term_consumers()[i], vec![1]);
    }

    #[test]
    fn prescribed_flows_are_frozen() {
        let net = diamond();
        let hyd = Hydraulics::new(&net, &Default::default(), 1000.0, 9.81).unwrap();
        let disc = Discretization::uniform(&net, 2).unwrap();
        let lib = AffineLibrary::complete(&net, &disc);
        let q = DVector::from_vec(vec![1e-3, 2e-3]);
        let c = Coupling::new(
            &net,
            hyd,
            lib,
            ConsumerDemand::constant(&[0.0, 0.0]),
            FlowMode::Prescribed(q),
            1.3e9,
            4.16e6,
        )
        .unwrap();
        let a = c.evaluate(&DVector::from_vec(vec![1.5e9, 1.4e9]), 0.0, true).unwrap();
        let b = c.evaluate(&DVector::from_vec(vec![1.0, 2.0]), 9.0, true).unwrap();
        assert_eq!(a.gamma, b.gamma);
        assert!(a.dgamma_dy.is_none());
        assert!((a.source_flow() - 3e-3).abs() < 1e-15);
    }
}
