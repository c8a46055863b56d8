//! Stationary hydraulics of the flow network.
//!
//! Volume flows are parameterized by the independent set q̃ = (consumer flows,
//! chord flows). The map from q̃ to pipe flows is built once from the spanning
//! tree: every consumer flow runs along its tree path from the source, and
//! every chord flow circulates around its fundamental loop. Volume balance at
//! the nodes therefore holds for any q̃ by construction, and only the loop
//! pressure balance has to be solved for the chord flows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Loop, NetworkTopology, OrientedEdge};
use crate::scalar::{effective_tolerance, lit, to_f64, Scalar};

/// Regularization of |v|v near v = 0, in m/s.
pub const VELOCITY_REGULARIZATION: f64 = 1e-9;

const LOOP_MAX_ITERATIONS: usize = 50;
const LOOP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrictionConfig {
    /// Reynolds number at which λ is evaluated and frozen.
    pub reference_reynolds: f64,
    /// Kinematic viscosity in m²/s; only reported alongside the Reynolds choice.
    pub kinematic_viscosity: f64,
}

impl Default for FrictionConfig {
    fn default() -> Self {
        Self {
            reference_reynolds: 1e5,
            kinematic_viscosity: 3.3e-7,
        }
    }
}

impl FrictionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reference_reynolds > 4000.0) || !self.reference_reynolds.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "reference Reynolds number {} is not in the turbulent regime (> 4000)",
                self.reference_reynolds
            )));
        }
        Ok(())
    }
}

/// Darcy friction factor from the Colebrook-White equation.
///
/// Newton iteration on x = 1/√λ for
/// x = -2 log10(k/(3.7 d) + 2.51 x / Re).
pub fn colebrook_lambda<T: Scalar>(roughness_rel: T, reynolds: T) -> Result<T> {
    if !(reynolds > lit(4000.0)) || !(roughness_rel >= T::zero()) {
        return Err(Error::InvalidConfig(format!(
            "Colebrook-White needs Re > 4000 and k/d >= 0, got Re = {}, k/d = {}",
            to_f64(reynolds),
            to_f64(roughness_rel)
        )));
    }
    let a = roughness_rel / lit(3.7);
    let b = lit::<T>(2.51) / reynolds;
    let two = lit::<T>(2.0);
    let ln10 = T::ln_10();
    let tol = effective_tolerance::<T>(1e-14);
    let mut x = lit::<T>(7.0);
    for _ in 0..100 {
        let inner = a + b * x;
        let g = x + two * inner.log10();
        let dg = T::one() + two * b / (inner * ln10);
        let step = g / dg;
        x -= step;
        if !(x > T::zero()) {
            x = lit(1.0);
        }
        if step.abs() <= tol * x {
            return Ok(T::one() / (x * x));
        }
    }
    Err(Error::FrictionNonConvergence { iterations: 100 })
}

/// Smooth surrogate √(v²+ε²)·v for |v|·v.
#[inline]
pub fn signed_square<T: Scalar>(v: T) -> T {
    let eps = lit::<T>(VELOCITY_REGULARIZATION);
    (v * v + eps * eps).sqrt() * v
}

/// Derivative of [`signed_square`].
#[inline]
pub fn signed_square_derivative<T: Scalar>(v: T) -> T {
    let eps = lit::<T>(VELOCITY_REGULARIZATION);
    let s = (v * v + eps * eps).sqrt();
    s + v * v / s
}

/// Pipe flows for one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T: Scalar> {
    /// Consumer volume flows in m³/s.
    pub q_consumers: DVector<T>,
    /// Chord flows in m³/s, one per fundamental loop.
    pub q_chords: DVector<T>,
    /// Pipe volume flows in m³/s along the reference orientation.
    pub q: DVector<T>,
    /// Pipe velocities in m/s.
    pub v: DVector<T>,
}

impl<T: Scalar> FlowField<T> {
    /// Volume flow injected at the source.
    pub fn source_flow(&self) -> T {
        self.q_consumers.sum()
    }

    /// The independent flows q̃ = (consumer flows, chord flows).
    pub fn independent(&self) -> DVector<T> {
        let mut out = DVector::zeros(self.q_consumers.len() + self.q_chords.len());
        out.rows_mut(0, self.q_consumers.len()).copy_from(&self.q_consumers);
        out.rows_mut(self.q_consumers.len(), self.q_chords.len())
            .copy_from(&self.q_chords);
        out
    }
}

/// Pressures relative to the source and after the source pressure shift.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureSolution<T: Scalar> {
    /// Pressure difference from source to each consumer, Pa.
    pub dp: Vec<T>,
    /// Absolute consumer pressures, Pa.
    pub p: Vec<T>,
    /// Source pressure control, Pa.
    pub u_p: T,
}

/// Precomputed hydraulic data of a network: frozen friction factors, the
/// null-space map and the source-to-consumer paths.
#[derive(Debug, Clone)]
pub struct Hydraulics<T: Scalar> {
    rho: T,
    lambda: Vec<T>,
    area: Vec<T>,
    friction: Vec<T>,
    n_consumers: usize,
    loops: Vec<Loop>,
    flow_map: DMatrix<T>,
    paths: Vec<Vec<OrientedEdge>>,
    hydrostatic: Vec<T>,
}

impl<T: Scalar> Hydraulics<T> {
    pub fn new(net: &NetworkTopology<T>, friction: &FrictionConfig, rho: T, g: T) -> Result<Self> {
        friction.validate()?;
        let re = lit::<T>(friction.reference_reynolds);
        let lambda = net
            .pipes()
            .iter()
            .map(|p| colebrook_lambda(p.roughness / p.diameter, re))
            .collect::<Result<Vec<_>>>()?;
        let mut hyd = Self::with_friction_factors(net, lambda, rho, g)?;
        hyd.rho = rho;
        Ok(hyd)
    }

    /// Uses the given friction factors instead of Colebrook-White.
    pub fn with_friction_factors(net: &NetworkTopology<T>, lambda: Vec<T>, rho: T, g: T) -> Result<Self> {
        if lambda.len() != net.pipes().len() || lambda.iter().any(|l| !(*l > T::zero())) {
            return Err(Error::InvalidConfig(
                "one positive friction factor per pipe is required".into(),
            ));
        }
        let area: Vec<T> = net.pipes().iter().map(|p| p.area()).collect();
        let friction = net
            .pipes()
            .iter()
            .zip(&lambda)
            .map(|(p, &l)| l * rho * p.length / (lit::<T>(2.0) * p.diameter))
            .collect();
        let n_consumers = net.consumers().len();
        let loops = net.fundamental_loops();
        let paths = (0..n_consumers)
            .map(|h| net.path_to_consumer(h))
            .collect::<Result<Vec<_>>>()?;

        let mut flow_map = DMatrix::zeros(net.pipes().len(), n_consumers + loops.len());
        for (h, path) in paths.iter().enumerate() {
            for e in path {
                flow_map[(e.pipe, h)] += lit::<T>(e.sign as f64);
            }
        }
        for (j, lp) in loops.iter().enumerate() {
            for e in &lp.edges {
                flow_map[(e.pipe, n_consumers + j)] += lit::<T>(e.sign as f64);
            }
        }

        let z_s = net.nodes()[net.source().node].z;
        let hydrostatic = net
            .consumers()
            .iter()
            .map(|c| rho * g * (z_s - net.nodes()[c.node].z))
            .collect();

        Ok(Self {
            rho,
            lambda,
            area,
            friction,
            n_consumers,
            loops,
            flow_map,
            paths,
            hydrostatic,
        })
    }

    pub fn friction_factors(&self) -> &[T] {
        &self.lambda
    }

    pub fn areas(&self) -> &[T] {
        &self.area
    }

    /// Coefficient k = λρl/(2d) multiplying |v|v in the pipe pressure loss.
    pub fn friction_coefficients(&self) -> &[T] {
        &self.friction
    }

    pub fn loops(&self) -> &[Loop] {
        &self.loops
    }

    pub fn n_consumers(&self) -> usize {
        self.n_consumers
    }

    pub fn n_pipes(&self) -> usize {
        self.area.len()
    }

    pub fn density(&self) -> T {
        self.rho
    }

    /// Map from q̃ to pipe volume flows, pipes × (consumers + chords).
    pub fn flow_map(&self) -> &DMatrix<T> {
        &self.flow_map
    }

    /// Null-space map N with v = N q̃.
    pub fn nullspace(&self) -> DMatrix<T> {
        let mut n = self.flow_map.clone();
        for (mut row, &a) in n.row_iter_mut().zip(&self.area) {
            row /= a;
        }
        n
    }

    /// Pipe flows for given independent flows.
    pub fn flows_from_independent(&self, q_consumers: DVector<T>, q_chords: DVector<T>) -> FlowField<T> {
        let nc = self.n_consumers;
        let mut q = self.flow_map.columns(0, nc) * &q_consumers;
        if !self.loops.is_empty() {
            q.gemv(T::one(), &self.flow_map.columns(nc, self.loops.len()), &q_chords, T::one());
        }
        let v = q.zip_map(&DVector::from_column_slice(&self.area), |q, a| q / a);
        FlowField {
            q_consumers,
            q_chords,
            q,
            v,
        }
    }

    /// Residual Σ sign·k·|v|v of every loop together with the largest single
    /// friction term, which serves as the scale.
    pub fn loop_residuals(&self, flow: &FlowField<T>) -> (DVector<T>, T) {
        let mut scale = T::zero();
        let r = DVector::from_iterator(
            self.loops.len(),
            self.loops.iter().map(|lp| {
                lp.edges.iter().fold(T::zero(), |acc, e| {
                    let term = self.friction[e.pipe] * signed_square(flow.v[e.pipe]);
                    scale = scale.max(term.abs());
                    acc + lit::<T>(e.sign as f64) * term
                })
            }),
        );
        (r, scale)
    }

    fn chord_jacobian(&self, flow: &FlowField<T>, cols: std::ops::Range<usize>) -> DMatrix<T> {
        let mut jac = DMatrix::zeros(self.loops.len(), cols.len());
        for (j, lp) in self.loops.iter().enumerate() {
            for e in &lp.edges {
                let w = lit::<T>(e.sign as f64) * self.friction[e.pipe]
                    * signed_square_derivative(flow.v[e.pipe])
                    / self.area[e.pipe];
                for (c, col) in cols.clone().enumerate() {
                    let n = self.flow_map[(e.pipe, col)];
                    if n != T::zero() {
                        jac[(j, c)] += w * n;
                    }
                }
            }
        }
        jac
    }

    /// Chord flows balancing the pressure loss around every loop, by Newton
    /// iteration from zero chord flow.
    pub fn solve_loop_flows(&self, q_consumers: DVector<T>) -> Result<FlowField<T>> {
        if q_consumers.len() != self.n_consumers {
            return Err(Error::InvalidConfig(format!(
                "expected {} consumer flows, got {}",
                self.n_consumers,
                q_consumers.len()
            )));
        }
        let n_loops = self.loops.len();
        let mut flow = self.flows_from_independent(q_consumers, DVector::zeros(n_loops));
        if n_loops == 0 {
            return Ok(flow);
        }
        let tol = effective_tolerance::<T>(LOOP_TOLERANCE);
        let nc = self.n_consumers;
        let (mut r, mut scale) = self.loop_residuals(&flow);
        let mut norm = r.amax();
        for _ in 0..LOOP_MAX_ITERATIONS {
            if norm <= tol * scale || norm == T::zero() {
                return Ok(flow);
            }
            let jac = self.chord_jacobian(&flow, nc..nc + n_loops);
            let step = jac
                .lu()
                .solve(&r)
                .ok_or_else(|| Error::Singular("loop flow Jacobian".into()))?;
            let mut alpha = T::one();
            loop {
                let chords = &flow.q_chords - &step * alpha;
                let trial = self.flows_from_independent(flow.q_consumers.clone(), chords);
                let (tr, ts) = self.loop_residuals(&trial);
                let tn = tr.amax();
                if tn < norm || alpha < lit(1e-6) {
                    flow = trial;
                    r = tr;
                    scale = ts;
                    norm = tn;
                    break;
                }
                alpha *= lit(0.5);
            }
        }
        if norm <= tol * scale {
            return Ok(flow);
        }
        Err(Error::LoopSolve {
            iterations: LOOP_MAX_ITERATIONS,
            residual: to_f64(norm / scale),
        })
    }

    /// Derivative of the pipe flows with respect to the consumer flows,
    /// pipes × consumers, including the chord response through the loop
    /// equations.
    pub fn flow_jacobian(&self, flow: &FlowField<T>) -> DMatrix<T> {
        let nc = self.n_consumers;
        let mut d = self.flow_map.columns(0, nc).into_owned();
        let nl = self.loops.len();
        if nl > 0 {
            let jc = self.chord_jacobian(flow, nc..nc + nl);
            let jq = self.chord_jacobian(flow, 0..nc);
            if let Some(dc) = jc.lu().solve(&(-jq)) {
                d.gemm(T::one(), &self.flow_map.columns(nc, nl), &dc, T::one());
            }
        }
        d
    }

    /// Δp along an arbitrary oriented path starting at the source, without
    /// the hydrostatic part.
    pub fn friction_drop_along(&self, path: &[OrientedEdge], flow: &FlowField<T>) -> T {
        path.iter().fold(T::zero(), |acc, e| {
            acc + lit::<T>(e.sign as f64) * self.friction[e.pipe] * signed_square(flow.v[e.pipe])
        })
    }

    /// Δp^h = ρg(z_s - z_h) - Σ_{K_h} sign·k·|v|v for every consumer.
    pub fn pressure_drops(&self, flow: &FlowField<T>) -> Vec<T> {
        self.paths
            .iter()
            .zip(&self.hydrostatic)
            .map(|(path, &hs)| hs - self.friction_drop_along(path, flow))
            .collect()
    }

    /// Derivative of Δp^h with respect to the consumer flows, given the pipe
    /// flow Jacobian from [`Self::flow_jacobian`].
    pub fn pressure_drop_jacobian(&self, flow: &FlowField<T>, dq: &DMatrix<T>) -> DMatrix<T> {
        let mut out = DMatrix::zeros(self.n_consumers, dq.ncols());
        for (h, path) in self.paths.iter().enumerate() {
            for e in path {
                let w = -lit::<T>(e.sign as f64) * self.friction[e.pipe]
                    * signed_square_derivative(flow.v[e.pipe])
                    / self.area[e.pipe];
                let mut row = out.row_mut(h);
                row += dq.row(e.pipe) * w;
            }
        }
        out
    }

    pub fn path_to_consumer(&self, h: usize) -> &[OrientedEdge] {
        &self.paths[h]
    }
}

/// q_i = G_i / (e_i - e_R); fails when an energy difference drops below
/// `floor`, reporting the consumer index.
pub fn consumer_flows<T: Scalar>(g: &[T], e_cons: &[T], e_r: T, floor: T) -> Result<Vec<T>> {
    g.iter()
        .zip(e_cons)
        .enumerate()
        .map(|(h, (&g, &e))| {
            let diff = e - e_r;
            if !(diff > floor) {
                return Err(Error::EnergyFloor {
                    consumer: h.to_string(),
                    difference: to_f64(diff),
                    floor: to_f64(floor),
                    time_s: None,
                });
            }
            Ok(g / diff)
        })
        .collect()
}

/// Shifts the source pressure so that the lowest consumer pressure equals
/// `p_min`.
pub fn posteriori_pressure_control<T: Scalar>(dp: &[T], p_min: T) -> PressureSolution<T> {
    let Some(lowest) = dp.iter().copied().reduce(T::min) else {
        return PressureSolution {
            dp: Vec::new(),
            p: Vec::new(),
            u_p: p_min,
        };
    };
    let u_p = p_min - lowest;
    PressureSolution {
        dp: dp.to_vec(),
        p: dp.iter().map(|&d| if d == lowest { p_min } else { u_p + d }).collect(),
        u_p,
    }
}

/// Spread max_h Δp^h - min_h Δp^h with the indices of the extremes.
pub fn pressure_spread<T: Scalar>(dp: &[T]) -> (T, usize, usize) {
    if dp.is_empty() {
        return (T::zero(), 0, 0);
    }
    let (mut hi, mut lo) = (0, 0);
    for (h, &d) in dp.iter().enumerate() {
        if d > dp[hi] {
            hi = h;
        }
        if d < dp[lo] {
            lo = h;
        }
    }
    (dp[hi] - dp[lo], hi, lo)
}

/// Hydraulic pumping power Δp_s·Σ G_i/(e_i - e_R) and its upper bound
/// Δp_s·ΣG / min(e_i - e_R).
pub fn pumping_power<T: Scalar>(dp_source: T, g: &[T], e_cons: &[T], e_r: T) -> (T, T) {
    let mut flow = T::zero();
    let mut total = T::zero();
    let mut min_diff: Option<T> = None;
    for (&g, &e) in g.iter().zip(e_cons) {
        let diff = e - e_r;
        flow += g / diff;
        total += g;
        min_diff = Some(min_diff.map_or(diff, |m| m.min(diff)));
    }
    let bound = min_diff.map_or(T::zero(), |m| dp_source * total / m);
    (dp_source * flow, bound)
}
