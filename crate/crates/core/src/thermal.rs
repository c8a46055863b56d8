//! Upwind finite-volume transport of energy density and its affine operator
//! library.
//!
//! Every pipe is split into equal cells, numbered from the pipe's `from` end.
//! The transport operator is written as A(v) = Σ γ_i(v) A_i, B(v) = Σ γ_i(v) B_i
//! with constant A_i, B_i and scalar weights γ_i of the pipe flows. Terms come
//! in three kinds:
//!
//! * `Pipe { pipe, sign }`: the intra-pipe upwind stencil for flow in direction
//!   `sign`, weight |q|/V_cell when the flow has that sign and zero otherwise.
//! * `Junction { node, inflow, outflow }`: transport of the outlet cell of
//!   `inflow` into the inlet cell of `outflow` through the mixing node, weight
//!   (|q_out|/V_out)·(|q_in|/S_in) where S_in is the total inflow at the node.
//! * `Source { outflow }`: the feed-in u_T entering a pipe that leaves the
//!   source node, weight (|q_out|/V_out)·(q_src/S_in).
//!
//! Weights of terms whose flow directions do not match the current flow are
//! zero, so flux reversals only switch terms on and off.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkTopology;
use crate::scalar::{lit, Scalar};
use crate::sparse::Csc;

/// Flows with magnitude below this are treated as stagnant, m³/s.
pub const STAGNANT_FLOW: f64 = 1e-12;

/// Cell layout of the finite-volume discretization.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization<T> {
    cells: Vec<usize>,
    offset: Vec<usize>,
    dx: Vec<T>,
    cell_volume: Vec<T>,
    n: usize,
}

impl<T: Scalar> Discretization<T> {
    /// Explicit cell count per pipe.
    pub fn from_counts(net: &NetworkTopology<T>, cells: Vec<usize>) -> Result<Self> {
        if cells.len() != net.pipes().len() || cells.contains(&0) {
            return Err(Error::InvalidConfig(
                "every pipe needs at least one cell".into(),
            ));
        }
        let mut offset = Vec::with_capacity(cells.len());
        let mut n = 0;
        for &c in &cells {
            offset.push(n);
            n += c;
        }
        let dx: Vec<T> = net
            .pipes()
            .iter()
            .zip(&cells)
            .map(|(p, &c)| p.length / lit(c as f64))
            .collect();
        let cell_volume = net
            .pipes()
            .iter()
            .zip(&dx)
            .map(|(p, &d)| p.area() * d)
            .collect();
        Ok(Self {
            cells,
            offset,
            dx,
            cell_volume,
            n,
        })
    }

    /// The same number of cells in every pipe.
    pub fn uniform(net: &NetworkTopology<T>, cells_per_pipe: usize) -> Result<Self> {
        Self::from_counts(net, vec![cells_per_pipe; net.pipes().len()])
    }

    /// Cells of roughly `target_dx` meters, at least one per pipe.
    pub fn by_cell_length(net: &NetworkTopology<T>, target_dx: f64) -> Result<Self> {
        if !(target_dx > 0.0) {
            return Err(Error::InvalidConfig("target cell length must be positive".into()));
        }
        let cells = net
            .pipes()
            .iter()
            .map(|p| ((crate::scalar::to_f64(p.length) / target_dx).round() as usize).max(1))
            .collect();
        Self::from_counts(net, cells)
    }

    pub fn cells_per_meter(net: &NetworkTopology<T>, per_meter: f64) -> Result<Self> {
        if !(per_meter > 0.0) {
            return Err(Error::InvalidConfig("cells per meter must be positive".into()));
        }
        Self::by_cell_length(net, 1.0 / per_meter)
    }

    /// Every pipe split into `factor` times as many cells.
    pub fn refined(&self, net: &NetworkTopology<T>, factor: usize) -> Result<Self> {
        Self::from_counts(net, self.cells.iter().map(|c| c * factor.max(1)).collect())
    }

    pub fn n_cells(&self) -> usize {
        self.n
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn cell_length(&self, pipe: usize) -> T {
        self.dx[pipe]
    }

    pub fn cell_volume(&self, pipe: usize) -> T {
        self.cell_volume[pipe]
    }

    pub fn cell_index(&self, pipe: usize, k: usize) -> usize {
        self.offset[pipe] + k
    }

    pub fn pipe_cells(&self, pipe: usize) -> std::ops::Range<usize> {
        self.offset[pipe]..self.offset[pipe] + self.cells[pipe]
    }

    /// First cell in flow direction `sign`.
    pub fn inlet_cell(&self, pipe: usize, sign: i8) -> usize {
        if sign >= 0 {
            self.offset[pipe]
        } else {
            self.offset[pipe] + self.cells[pipe] - 1
        }
    }

    /// Last cell in flow direction `sign`.
    pub fn outlet_cell(&self, pipe: usize, sign: i8) -> usize {
        self.inlet_cell(pipe, -sign)
    }

    /// Diagonal of the energy matrix Q: the fluid volume of every cell, m³.
    pub fn volumes(&self) -> DVector<T> {
        let mut v = DVector::zeros(self.n);
        for (p, &vol) in self.cell_volume.iter().enumerate() {
            for c in self.pipe_cells(p) {
                v[c] = vol;
            }
        }
        v
    }
}

/// Selector of the consumer output cells: the last cell of the pipe feeding
/// each consumer node. The feed pipe is the first pipe ending at the node, or
/// failing that, the first pipe leaving it (then its first cell is used).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputMap {
    cells: Vec<usize>,
}

impl OutputMap {
    pub fn new<T: Scalar>(net: &NetworkTopology<T>, disc: &Discretization<T>) -> Self {
        let cells = net
            .consumers()
            .iter()
            .map(|c| {
                let incident = net.incident(c.node);
                match incident.iter().find(|&&p| net.pipes()[p].to == c.node) {
                    Some(&p) => disc.outlet_cell(p, 1),
                    None => disc.inlet_cell(incident[0], 1),
                }
            })
            .collect();
        Self { cells }
    }

    /// Selected cell per consumer.
    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn apply<T: Scalar>(&self, e: &DVector<T>) -> DVector<T> {
        DVector::from_iterator(self.cells.len(), self.cells.iter().map(|&c| e[c]))
    }

    pub fn to_csc<T: Scalar>(&self, n: usize) -> Csc<T> {
        let t: Vec<_> = self
            .cells
            .iter()
            .enumerate()
            .map(|(h, &c)| (h, c, T::one()))
            .collect();
        Csc::from_triplets(self.cells.len(), n, &t)
    }

    pub fn to_dense<T: Scalar>(&self, n: usize) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.cells.len(), n);
        for (h, &c) in self.cells.iter().enumerate() {
            m[(h, c)] = T::one();
        }
        m
    }
}

/// Identity of an affine term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TermKey {
    Pipe { pipe: usize, sign: i8 },
    Junction { node: usize, inflow: usize, outflow: usize },
    Source { outflow: usize },
}

/// Per-pipe flow signs (-1, 0, 1).
pub type FluxPattern = Vec<i8>;

pub fn flux_pattern<T: Scalar>(q: &DVector<T>) -> FluxPattern {
    let tol = lit::<T>(STAGNANT_FLOW);
    q.iter()
        .map(|&x| {
            if x > tol {
                1
            } else if x < -tol {
                -1
            } else {
                0
            }
        })
        .collect()
}

/// One term of the library with its constant matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorTerm<T> {
    pub key: TermKey,
    /// Entries (row, col, value) of A_i.
    pub entries: Vec<(usize, usize, T)>,
    /// Nonzero entry (row, value) of B_i, if any.
    pub input: Option<(usize, T)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Weight<T> {
    Pipe { pipe: usize, sign: T, inv_vol: T },
    Junction { node: usize, inflow: usize, in_sign: T, outflow: usize, out_sign: T, inv_vol: T },
    Source { node: usize, outflow: usize, out_sign: T, inv_vol: T },
}

/// Flow variable a weight depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowVar {
    Pipe(usize),
    Source,
}

/// The affine decomposition A(v) = Σγ_i A_i, B(v) = Σγ_i B_i.
#[derive(Debug, Clone)]
pub struct AffineLibrary<T: Scalar> {
    n: usize,
    terms: Vec<OperatorTerm<T>>,
    weights: Vec<Weight<T>>,
    index: HashMap<TermKey, usize>,
    complete: bool,
    /// Incident pipes of every node with the sign of flow into the node.
    node_in: Vec<Vec<(usize, T)>>,
    source: usize,
    pipe_ids: Vec<String>,
    node_ids: Vec<String>,
}

fn into_sign<T: Scalar>(net: &NetworkTopology<T>, pipe: usize, node: usize) -> i8 {
    if net.pipes()[pipe].to == node {
        1
    } else {
        -1
    }
}

impl<T: Scalar> AffineLibrary<T> {
    /// Library covering every flux direction of every pipe.
    pub fn complete(net: &NetworkTopology<T>, disc: &Discretization<T>) -> Self {
        let mut keys = BTreeSet::new();
        for p in 0..net.pipes().len() {
            keys.insert(TermKey::Pipe { pipe: p, sign: 1 });
            keys.insert(TermKey::Pipe { pipe: p, sign: -1 });
        }
        for node in 0..net.nodes().len() {
            let inc = net.incident(node);
            for &a in inc {
                for &b in inc {
                    if a != b {
                        keys.insert(TermKey::Junction {
                            node,
                            inflow: b,
                            outflow: a,
                        });
                    }
                }
                if node == net.source().node {
                    keys.insert(TermKey::Source { outflow: a });
                }
            }
        }
        let mut lib = Self::from_keys(net, disc, keys);
        lib.complete = true;
        lib
    }

    /// Library with exactly the terms needed by the given flux patterns.
    pub fn from_patterns<'a>(
        net: &NetworkTopology<T>,
        disc: &Discretization<T>,
        patterns: impl IntoIterator<Item = &'a FluxPattern>,
    ) -> Self {
        let mut keys = BTreeSet::new();
        for pat in patterns {
            keys.extend(required_terms(net, pat));
        }
        Self::from_keys(net, disc, keys)
    }

    /// Library with the given terms, in the given order.
    pub fn from_keys(
        net: &NetworkTopology<T>,
        disc: &Discretization<T>,
        keys: impl IntoIterator<Item = TermKey>,
    ) -> Self {
        let mut terms = Vec::new();
        let mut weights = Vec::new();
        for key in keys {
            let (term, weight) = build_term(net, disc, key);
            terms.push(term);
            weights.push(weight);
        }
        let index = terms.iter().enumerate().map(|(i, t)| (t.key, i)).collect();
        let node_in = (0..net.nodes().len())
            .map(|node| {
                net.incident(node)
                    .iter()
                    .map(|&p| (p, lit::<T>(into_sign(net, p, node) as f64)))
                    .collect()
            })
            .collect();
        Self {
            n: disc.n_cells(),
            terms,
            weights,
            index,
            complete: false,
            node_in,
            source: net.source().node,
            pipe_ids: net.pipes().iter().map(|p| p.id.clone()).collect(),
            node_ids: net.nodes().iter().map(|n| n.id.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn n_cells(&self) -> usize {
        self.n
    }

    pub fn terms(&self) -> &[OperatorTerm<T>] {
        &self.terms
    }

    pub fn keys(&self) -> Vec<TermKey> {
        self.terms.iter().map(|t| t.key).collect()
    }

    pub fn position(&self, key: &TermKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Sub-library with only the listed terms, in that order.
    pub fn restricted(&self, keep: &[usize]) -> Self {
        let terms: Vec<_> = keep.iter().map(|&i| self.terms[i].clone()).collect();
        let weights = keep.iter().map(|&i| self.weights[i]).collect();
        let index = terms.iter().enumerate().map(|(i, t)| (t.key, i)).collect();
        Self {
            terms,
            weights,
            index,
            complete: false,
            ..self.clone()
        }
    }

    /// Total inflow S_in into every node, including the source feed.
    fn inflow_totals(&self, q: &DVector<T>, q_src: T) -> Vec<T> {
        self.node_in
            .iter()
            .enumerate()
            .map(|(node, inc)| {
                let mut s = inc
                    .iter()
                    .fold(T::zero(), |acc, &(p, sg)| acc + (sg * q[p]).max(T::zero()));
                if node == self.source {
                    s += q_src.max(T::zero());
                }
                s
            })
            .collect()
    }

    /// Verifies that every active flux direction has its terms.
    pub fn check_coverage(&self, q: &DVector<T>) -> Result<()> {
        if self.complete {
            return Ok(());
        }
        let tol = lit::<T>(STAGNANT_FLOW);
        for (p, &x) in q.iter().enumerate() {
            if x.abs() > tol {
                let sign = if x > T::zero() { 1 } else { -1 };
                if !self.index.contains_key(&TermKey::Pipe { pipe: p, sign }) {
                    return Err(Error::UntrainedDirection {
                        pipe: self.pipe_ids[p].clone(),
                        detail: format!("flow direction {sign:+}"),
                    });
                }
            }
        }
        for (node, inc) in self.node_in.iter().enumerate() {
            for &(a, sa) in inc {
                if -sa * q[a] <= tol {
                    continue;
                }
                if node == self.source && !self.index.contains_key(&TermKey::Source { outflow: a }) {
                    return Err(Error::UntrainedDirection {
                        pipe: self.pipe_ids[a].clone(),
                        detail: format!("feed-in at source node {}", self.node_ids[node]),
                    });
                }
                for &(b, sb) in inc {
                    if b != a && sb * q[b] > tol {
                        let key = TermKey::Junction {
                            node,
                            inflow: b,
                            outflow: a,
                        };
                        if !self.index.contains_key(&key) {
                            return Err(Error::UntrainedDirection {
                                pipe: self.pipe_ids[a].clone(),
                                detail: format!(
                                    "mixing from pipe {} at node {}",
                                    self.pipe_ids[b], self.node_ids[node]
                                ),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Weights γ_i for pipe flows `q` and source flow `q_src`.
    pub fn weights(&self, q: &DVector<T>, q_src: T) -> Result<Vec<T>> {
        self.check_coverage(q)?;
        let s_in = self.inflow_totals(q, q_src);
        let tol = lit::<T>(STAGNANT_FLOW);
        let zero = T::zero();
        Ok(self
            .weights
            .iter()
            .map(|w| match *w {
                Weight::Pipe { pipe, sign, inv_vol } => (sign * q[pipe]).max(zero) * inv_vol,
                Weight::Junction {
                    node,
                    inflow,
                    in_sign,
                    outflow,
                    out_sign,
                    inv_vol,
                } => {
                    let s = s_in[node];
                    if s < tol {
                        zero
                    } else {
                        (out_sign * q[outflow]).max(zero) * inv_vol * (in_sign * q[inflow]).max(zero) / s
                    }
                }
                Weight::Source {
                    node,
                    outflow,
                    out_sign,
                    inv_vol,
                } => {
                    let s = s_in[node];
                    if s < tol {
                        zero
                    } else {
                        (out_sign * q[outflow]).max(zero) * inv_vol * q_src.max(zero) / s
                    }
                }
            })
            .collect())
    }

    /// Flow variables each weight depends on.
    pub fn weight_dependencies(&self, term: usize) -> Vec<FlowVar> {
        match self.weights[term] {
            Weight::Pipe { pipe, .. } => vec![FlowVar::Pipe(pipe)],
            Weight::Junction { node, outflow, .. } | Weight::Source { node, outflow, .. } => {
                let mut deps = vec![FlowVar::Pipe(outflow)];
                deps.extend(self.node_in[node].iter().map(|&(p, _)| FlowVar::Pipe(p)));
                if node == self.source {
                    deps.push(FlowVar::Source);
                }
                deps
            }
        }
    }

    /// Partial derivatives of every weight with respect to the flow variables
    /// it depends on.
    pub fn weight_partials(&self, q: &DVector<T>, q_src: T) -> Vec<Vec<(FlowVar, T)>> {
        let s_in = self.inflow_totals(q, q_src);
        let tol = lit::<T>(STAGNANT_FLOW);
        let zero = T::zero();
        let step = |x: T| if x > zero { T::one() } else { zero };
        self.weights
            .iter()
            .map(|w| match *w {
                Weight::Pipe { pipe, sign, inv_vol } => {
                    vec![(FlowVar::Pipe(pipe), sign * step(sign * q[pipe]) * inv_vol)]
                }
                Weight::Junction {
                    node,
                    inflow,
                    in_sign,
                    outflow,
                    out_sign,
                    inv_vol,
                } => {
                    let s = s_in[node];
                    if s < tol {
                        return Vec::new();
                    }
                    let a = (out_sign * q[outflow]).max(zero) * inv_vol;
                    let b = (in_sign * q[inflow]).max(zero);
                    let mut out = vec![(
                        FlowVar::Pipe(outflow),
                        out_sign * step(out_sign * q[outflow]) * inv_vol * b / s,
                    )];
                    let ab_s2 = a * b / (s * s);
                    for &(p, sg) in &self.node_in[node] {
                        let mut d = -ab_s2 * sg * step(sg * q[p]);
                        if p == inflow {
                            d += a * in_sign * step(in_sign * q[p]) / s;
                        }
                        out.push((FlowVar::Pipe(p), d));
                    }
                    if node == self.source {
                        out.push((FlowVar::Source, -ab_s2 * step(q_src)));
                    }
                    out
                }
                Weight::Source {
                    node,
                    outflow,
                    out_sign,
                    inv_vol,
                } => {
                    let s = s_in[node];
                    if s < tol {
                        return Vec::new();
                    }
                    let a = (out_sign * q[outflow]).max(zero) * inv_vol;
                    let qs = q_src.max(zero);
                    let mut out = vec![(
                        FlowVar::Pipe(outflow),
                        out_sign * step(out_sign * q[outflow]) * inv_vol * qs / s,
                    )];
                    let aq_s2 = a * qs / (s * s);
                    for &(p, sg) in &self.node_in[node] {
                        out.push((FlowVar::Pipe(p), -aq_s2 * sg * step(sg * q[p])));
                    }
                    out.push((FlowVar::Source, step(q_src) * (a / s - aq_s2)));
                    out
                }
            })
            .collect()
    }

    /// dγ/dq_consumers given dq_pipes/dq_consumers (pipes × consumers);
    /// the source flow is the sum of the consumer flows.
    pub fn weight_jacobian(&self, q: &DVector<T>, q_src: T, dq: &DMatrix<T>) -> DMatrix<T> {
        let nc = dq.ncols();
        let mut out = DMatrix::zeros(self.terms.len(), nc);
        for (i, partials) in self.weight_partials(q, q_src).into_iter().enumerate() {
            for (var, d) in partials {
                if d == T::zero() {
                    continue;
                }
                match var {
                    FlowVar::Pipe(p) => {
                        for h in 0..nc {
                            out[(i, h)] += d * dq[(p, h)];
                        }
                    }
                    FlowVar::Source => {
                        for h in 0..nc {
                            out[(i, h)] += d;
                        }
                    }
                }
            }
        }
        out
    }

    /// ė = Σγ_i (A_i e + B_i u).
    pub fn apply(&self, gamma: &[T], e: &DVector<T>, u: T) -> DVector<T> {
        let mut out = DVector::zeros(self.n);
        for (term, &g) in self.terms.iter().zip(gamma) {
            if g == T::zero() {
                continue;
            }
            for &(r, c, v) in &term.entries {
                out[r] += g * v * e[c];
            }
            if let Some((r, v)) = term.input {
                out[r] += g * v * u;
            }
        }
        out
    }

    /// B(v) = Σγ_i B_i.
    pub fn input_vector(&self, gamma: &[T]) -> DVector<T> {
        let mut b = DVector::zeros(self.n);
        for (term, &g) in self.terms.iter().zip(gamma) {
            if let Some((r, v)) = term.input {
                b[r] += g * v;
            }
        }
        b
    }

    /// A(v) = Σγ_i A_i as a sparse matrix with explicit diagonal.
    pub fn assemble(&self, gamma: &[T]) -> Csc<T> {
        let mut t: Vec<(usize, usize, T)> = (0..self.n).map(|i| (i, i, T::zero())).collect();
        for (term, &g) in self.terms.iter().zip(gamma) {
            if g != T::zero() {
                t.extend(term.entries.iter().map(|&(r, c, v)| (r, c, g * v)));
            }
        }
        Csc::from_triplets(self.n, self.n, &t)
    }
}

/// Terms needed to represent transport under the flux pattern `pat`.
pub fn required_terms<T: Scalar>(net: &NetworkTopology<T>, pat: &FluxPattern) -> Vec<TermKey> {
    let mut keys = Vec::new();
    for (p, &s) in pat.iter().enumerate() {
        if s != 0 {
            keys.push(TermKey::Pipe { pipe: p, sign: s });
        }
    }
    for node in 0..net.nodes().len() {
        let inc = net.incident(node);
        let flows_in = |p: usize| pat[p] != 0 && pat[p] == into_sign(net, p, node);
        let flows_out = |p: usize| pat[p] != 0 && pat[p] == -into_sign(net, p, node);
        for &a in inc.iter().filter(|&&a| flows_out(a)) {
            for &b in inc.iter().filter(|&&b| flows_in(b)) {
                keys.push(TermKey::Junction {
                    node,
                    inflow: b,
                    outflow: a,
                });
            }
            if node == net.source().node {
                keys.push(TermKey::Source { outflow: a });
            }
        }
    }
    keys
}

fn build_term<T: Scalar>(
    net: &NetworkTopology<T>,
    disc: &Discretization<T>,
    key: TermKey,
) -> (OperatorTerm<T>, Weight<T>) {
    let one = T::one();
    match key {
        TermKey::Pipe { pipe, sign } => {
            let mut entries = Vec::new();
            let cells: Vec<usize> = if sign > 0 {
                disc.pipe_cells(pipe).collect()
            } else {
                disc.pipe_cells(pipe).rev().collect()
            };
            for (k, &c) in cells.iter().enumerate() {
                entries.push((c, c, -one));
                if k > 0 {
                    entries.push((c, cells[k - 1], one));
                }
            }
            (
                OperatorTerm {
                    key,
                    entries,
                    input: None,
                },
                Weight::Pipe {
                    pipe,
                    sign: lit(sign as f64),
                    inv_vol: one / disc.cell_volume(pipe),
                },
            )
        }
        TermKey::Junction { node, inflow, outflow } => {
            let in_sign = into_sign(net, inflow, node);
            let out_sign = -into_sign(net, outflow, node);
            let row = disc.inlet_cell(outflow, out_sign);
            let col = disc.outlet_cell(inflow, in_sign);
            (
                OperatorTerm {
                    key,
                    entries: vec![(row, col, one)],
                    input: None,
                },
                Weight::Junction {
                    node,
                    inflow,
                    in_sign: lit(in_sign as f64),
                    outflow,
                    out_sign: lit(out_sign as f64),
                    inv_vol: one / disc.cell_volume(outflow),
                },
            )
        }
        TermKey::Source { outflow } => {
            let node = net.source().node;
            let out_sign = -into_sign(net, outflow, node);
            let row = disc.inlet_cell(outflow, out_sign);
            (
                OperatorTerm {
                    key,
                    entries: Vec::new(),
                    input: Some((row, one)),
                },
                Weight::Source {
                    node,
                    outflow,
                    out_sign: lit(out_sign as f64),
                    inv_vol: one / disc.cell_volume(outflow),
                },
            )
        }
    }
}

/// Direct upwind assembly of A(v) and B(v) from the mixing rule.
pub fn assemble_upwind<T: Scalar>(
    net: &NetworkTopology<T>,
    disc: &Discretization<T>,
    q: &DVector<T>,
    q_src: T,
) -> Result<(Csc<T>, DVector<T>)> {
    let n = disc.n_cells();
    let tol = lit::<T>(STAGNANT_FLOW);
    let mut t: Vec<(usize, usize, T)> = Vec::new();
    let mut b = DVector::zeros(n);
    let mut s_in = vec![T::zero(); net.nodes().len()];
    for (p, pipe) in net.pipes().iter().enumerate() {
        if q[p] > T::zero() {
            s_in[pipe.to] += q[p];
        } else {
            s_in[pipe.from] -= q[p];
        }
    }
    s_in[net.source().node] += q_src;

    for (p, pipe) in net.pipes().iter().enumerate() {
        if q[p] == T::zero() {
            continue;
        }
        let sign: i8 = if q[p] > T::zero() { 1 } else { -1 };
        let rate = q[p].abs() / disc.cell_volume(p);
        let cells: Vec<usize> = if sign > 0 {
            disc.pipe_cells(p).collect()
        } else {
            disc.pipe_cells(p).rev().collect()
        };
        for (k, &c) in cells.iter().enumerate() {
            t.push((c, c, -rate));
            if k > 0 {
                t.push((c, cells[k - 1], rate));
            }
        }
        let node = pipe.upstream_node(sign);
        let total = s_in[node];
        if total < tol {
            if q[p].abs() > tol {
                return Err(Error::DegenerateMixing {
                    node: net.nodes()[node].id.clone(),
                    pipe: pipe.id.clone(),
                });
            }
            continue;
        }
        let inlet = cells[0];
        for &other in net.incident(node) {
            let op = &net.pipes()[other];
            let into = if op.to == node { q[other] } else { -q[other] };
            if other != p && into > T::zero() {
                let out_cell = disc.outlet_cell(other, if q[other] > T::zero() { 1 } else { -1 });
                t.push((inlet, out_cell, rate * into / total));
            }
        }
        if node == net.source().node && q_src > T::zero() {
            b[inlet] += rate * q_src / total;
        }
    }
    Ok((Csc::from_triplets(n, n, &t), b))
}

/// Rate of energy entering minus leaving the network: feed-in q_src·u at the
/// source, withdrawal at the mixed node energy by every consumer.
pub fn boundary_energy_flux<T: Scalar>(
    net: &NetworkTopology<T>,
    disc: &Discretization<T>,
    q: &DVector<T>,
    q_consumers: &DVector<T>,
    e: &DVector<T>,
    u: T,
) -> T {
    let q_src = q_consumers.sum();
    let n_nodes = net.nodes().len();
    let mut weighted = vec![T::zero(); n_nodes];
    let mut total = vec![T::zero(); n_nodes];
    for (p, pipe) in net.pipes().iter().enumerate() {
        if q[p] == T::zero() {
            continue;
        }
        let sign: i8 = if q[p] > T::zero() { 1 } else { -1 };
        let node = pipe.downstream_node(sign);
        weighted[node] += q[p].abs() * e[disc.outlet_cell(p, sign)];
        total[node] += q[p].abs();
    }
    let s = net.source().node;
    weighted[s] += q_src * u;
    total[s] += q_src;
    let mut flux = q_src * u;
    for (h, c) in net.consumers().iter().enumerate() {
        if q_consumers[h] != T::zero() && total[c.node] > T::zero() {
            flux -= q_consumers[h] * weighted[c.node] / total[c.node];
        }
    }
    flux
}
