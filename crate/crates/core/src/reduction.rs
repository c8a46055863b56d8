//! Stability preserving model reduction.
//!
//! The reduced model is a Galerkin projection e ≈ V e_r with test space
//! W = QV, where Q is the diagonal matrix of cell volumes and VᵀQV = I. Since
//! QA(v) + A(v)ᵀQ ≤ 0 for every conserving flow, the reduced operators
//! WᵀA_iV inherit Lyapunov stability for any combination of weights.
//!
//! The basis is built greedily: at the frozen flow whose transfer function
//! is currently worst approximated, the resolvents (iω_j I - A)⁻¹B are
//! appended to V.

use nalgebra::{Complex, DMatrix, DMatrixView, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::FourierControl;
use crate::coupling::{Coupling, CouplingState};
use crate::error::{Error, Result};
use crate::integrator::{simulate, SimulationOptions, Trajectory};
use crate::model::{FullOrderModel, LinearSolve, StepJacobian, TransportModel};
use crate::scalar::{lit, to_f64, Scalar};
use crate::sparse::SparseLu;
use crate::scenario::{PhysicalConstants, ScenarioConfig, TimeGrid};
use crate::thermal::TermKey;

/// Geometric sequence of `n` points from `lo` to `hi`.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionConfig {
    /// Relative transfer function error every candidate must reach.
    pub tolerance: f64,
    /// Interpolation frequencies ω_j, rad/s; each gives the shifts ±iω_j.
    pub shifts: Vec<f64>,
    /// Frequencies at which transfer errors are measured, rad/s.
    pub error_frequencies: Vec<f64>,
    /// Singular values of new basis directions below this are dropped.
    pub svd_threshold: f64,
    pub max_iterations: usize,
}

impl ReductionConfig {
    /// Shifts from one cycle per day up to the Nyquist frequency of `dt`.
    pub fn for_step(dt: f64) -> Self {
        let lo = 2.0 * std::f64::consts::PI / 86400.0;
        let hi = std::f64::consts::PI / dt;
        Self {
            tolerance: 1e-3,
            shifts: log_spaced(lo, hi, 8),
            error_frequencies: log_spaced(lo, hi, 40),
            svd_threshold: 1e-10,
            max_iterations: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig("reduction tolerance must be positive".into()));
        }
        if self.shifts.is_empty() || self.shifts.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidConfig("shifts must be positive frequencies".into()));
        }
        if self.error_frequencies.is_empty() || self.error_frequencies.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidConfig("error frequencies must be positive".into()));
        }
        if !(self.svd_threshold >= 0.0) {
            return Err(Error::InvalidConfig("SVD threshold must be nonnegative".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("at least one greedy iteration is required".into()));
        }
        Ok(())
    }
}

/// A frozen flow field used as linearization point.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<T: Scalar> {
    pub time: T,
    pub q: DVector<T>,
    pub q_src: T,
    /// Weights of the full-order library.
    pub gamma: Vec<T>,
}

/// Flow fields of a training trajectory, every `every`-th grid point.
pub fn candidates_from_trajectory<T: Scalar>(
    fom: &FullOrderModel<T>,
    traj: &Trajectory<T>,
    every: usize,
) -> Result<Vec<Candidate<T>>> {
    let lib = fom.coupling().library();
    (0..traj.len())
        .step_by(every.max(1))
        .map(|k| {
            Ok(Candidate {
                time: traj.times[k],
                q: traj.pipe_flows[k].clone(),
                q_src: traj.source_flow[k],
                gamma: lib.weights(&traj.pipe_flows[k], traj.source_flow[k])?,
            })
        })
        .collect()
}

/// Controls exciting the full model while sampling candidate flows: the
/// scenario's initial level and two daily oscillations of ±10 K around it.
pub fn training_controls<T: Scalar>(cfg: &ScenarioConfig) -> Vec<FourierControl<T>> {
    let c = PhysicalConstants::<f64>::default();
    let base = c.energy_from_celsius(cfg.initial_control_c);
    let k = cfg.harmonics.max(2);
    let mut out = vec![FourierControl::constant(lit(base), k)];
    let mut a = FourierControl::constant(lit(base), k);
    a.coefficients[1] = lit(10.0 * c.heat_capacity());
    out.push(a);
    let mut b = FourierControl::constant(lit(base), k);
    b.coefficients[k + 1] = lit(-8.0 * c.heat_capacity());
    b.coefficients[2] = lit(4.0 * c.heat_capacity());
    out.push(b);
    out
}

/// Simulates every control and samples the flows every `every` steps.
pub fn collect_candidates<T: Scalar>(
    fom: &FullOrderModel<T>,
    controls: &[FourierControl<T>],
    grid: &TimeGrid<T>,
    every: usize,
) -> Result<Vec<Candidate<T>>> {
    let per_control: Vec<Vec<Candidate<T>>> = controls
        .par_iter()
        .map(|u| {
            let traj = simulate(fom, u, grid, &SimulationOptions::default())?;
            candidates_from_trajectory(fom, &traj, every)
        })
        .collect::<Result<_>>()?;
    Ok(per_control.into_iter().flatten().collect())
}

fn cplx<T: Scalar>(re: T, im: T) -> Complex<T> {
    Complex::new(re, im)
}

/// Transfer function C(iωI - A)⁻¹B of the frozen full-order system, and the
/// resolvent itself.
fn fom_resolvent<T: Scalar>(fom: &FullOrderModel<T>, gamma: &[T], omega: f64) -> Result<DVector<Complex<T>>> {
    let a = fom.operator(gamma).map(|v| cplx(v, T::zero()));
    let m = a.shifted(cplx(T::zero(), lit(omega)), cplx(-T::one(), T::zero()));
    let lu = SparseLu::factor(&m, Some(fom.ordering()), 0.01).map_err(|_| {
        Error::Singular(format!("shifted operator at ω = {omega} rad/s"))
    })?;
    let b = fom.input_vector(gamma).map(|v| cplx(v, T::zero()));
    Ok(lu.solve(&b))
}

pub fn fom_transfer<T: Scalar>(
    fom: &FullOrderModel<T>,
    gamma: &[T],
    frequencies: &[f64],
) -> Result<Vec<DVector<Complex<T>>>> {
    let cells = fom.output_map().cells();
    frequencies
        .iter()
        .map(|&w| {
            let x = fom_resolvent(fom, gamma, w)?;
            Ok(DVector::from_iterator(cells.len(), cells.iter().map(|&c| x[c])))
        })
        .collect()
}

/// Real basis of span{(±iω_j I - A)⁻¹B}: real and imaginary parts.
pub fn local_basis<T: Scalar>(fom: &FullOrderModel<T>, gamma: &[T], shifts: &[f64]) -> Result<DMatrix<T>> {
    let n = fom.dim();
    let mut cols = Vec::with_capacity(2 * shifts.len());
    for &w in shifts {
        let x = fom_resolvent(fom, gamma, w)?;
        cols.push(x.map(|z| z.re));
        cols.push(x.map(|z| z.im));
    }
    Ok(DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]))
}

/// (Σ‖H_fom - H_rom‖²_F / Σ‖H_fom‖²_F)^½.
pub fn transfer_error<T: Scalar>(full: &[DVector<Complex<T>>], reduced: &[DVector<Complex<T>>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (f, r) in full.iter().zip(reduced) {
        for (a, b) in f.iter().zip(r.iter()) {
            num += to_f64((a - b).norm_sqr());
            den += to_f64(a.norm_sqr());
        }
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            1.0
        }
    } else {
        (num / den).sqrt()
    }
}

/// Q-orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct QBasis<T: Scalar> {
    v: DMatrix<T>,
    q: DVector<T>,
}

impl<T: Scalar> QBasis<T> {
    /// Basis holding only the normalized constant vector.
    pub fn constant(q: DVector<T>) -> Self {
        let norm = q.sum().sqrt();
        let v = DMatrix::from_element(q.len(), 1, T::one() / norm);
        Self { v, q }
    }

    /// Empty basis.
    pub fn empty(q: DVector<T>) -> Self {
        Self {
            v: DMatrix::zeros(q.len(), 0),
            q,
        }
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.v
    }

    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.v
    }

    fn q_inner(&self, a: &DMatrix<T>) -> DMatrix<T> {
        let mut qa = a.clone();
        for (i, mut row) in qa.row_iter_mut().enumerate() {
            row *= self.q[i];
        }
        self.v.transpose() * qa
    }

    /// Appends the directions of `block` not yet in the span; returns how
    /// many were added.
    pub fn extend(&mut self, block: &DMatrix<T>, threshold: f64) -> usize {
        let mut w = block.clone();
        for mut col in w.column_iter_mut() {
            let nrm = col.iter().zip(self.q.iter()).fold(T::zero(), |acc, (&x, &q)| acc + q * x * x).sqrt();
            if nrm > T::zero() {
                col /= nrm;
            }
        }
        if self.dim() > 0 {
            for _ in 0..2 {
                let c = self.q_inner(&w);
                w -= &self.v * c;
            }
        }
        let sqrt_q = self.q.map(|q| q.sqrt());
        let mut sw = w;
        for (i, mut row) in sw.row_iter_mut().enumerate() {
            row *= sqrt_q[i];
        }
        let svd = sw.svd(true, false);
        let u = svd.u.expect("left singular vectors");
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&k| svd.singular_values[k] > lit(threshold))
            .collect();
        if keep.is_empty() {
            return 0;
        }
        let mut new = DMatrix::zeros(self.q.len(), keep.len());
        for (j, &k) in keep.iter().enumerate() {
            for i in 0..self.q.len() {
                new[(i, j)] = u[(i, k)] / sqrt_q[i];
            }
        }
        // Small singular values amplify the leftover components along V.
        if self.dim() > 0 {
            for _ in 0..2 {
                let c = self.q_inner(&new);
                new -= &self.v * c;
            }
        }
        for (i, mut row) in new.row_iter_mut().enumerate() {
            row *= sqrt_q[i];
        }
        let mut new = new.qr().q();
        for (i, mut row) in new.row_iter_mut().enumerate() {
            row /= sqrt_q[i];
        }
        let old = self.v.ncols();
        self.v = self.v.clone().resize_horizontally(old + keep.len(), T::zero());
        self.v.columns_mut(old, keep.len()).copy_from(&new);
        keep.len()
    }

    /// max |VᵀQV - I|.
    pub fn orthogonality_defect(&self) -> T {
        let g = self.q_inner(&self.v.clone());
        (g - DMatrix::identity(self.dim(), self.dim())).amax()
    }
}

/// Factors Wᵀ A V through the rows or columns A touches, when there are few.
fn low_rank<T: Scalar>(
    entries: &[(usize, usize, T)],
    qv: &DMatrix<T>,
    v: &DMatrix<T>,
) -> Option<(DMatrix<T>, DMatrix<T>)> {
    let r = v.ncols();
    let unique = |f: fn(&(usize, usize, T)) -> usize| {
        let mut ids: Vec<usize> = entries.iter().map(f).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let (rows, cols) = (unique(|e| e.0), unique(|e| e.1));
    let slot = |ids: &[usize], i: usize| ids.binary_search(&i).unwrap();
    if rows.len() <= cols.len() && 8 * rows.len() <= r {
        let left = DMatrix::from_fn(r, rows.len(), |a, k| qv[(rows[k], a)]);
        let mut right = DMatrix::zeros(rows.len(), r);
        for &(row, col, x) in entries {
            let k = slot(&rows, row);
            for b in 0..r {
                right[(k, b)] += x * v[(col, b)];
            }
        }
        Some((left, right))
    } else if 8 * cols.len() <= r {
        let mut left = DMatrix::zeros(r, cols.len());
        for &(row, col, x) in entries {
            left.column_mut(slot(&cols, col)).axpy(x, &qv.row(row).transpose(), T::one());
        }
        let right = DMatrix::from_fn(cols.len(), r, |k, b| v[(cols[k], b)]);
        Some((left, right))
    } else {
        None
    }
}

/// Galerkin reduced model with reduced operator library.
#[derive(Debug, Clone)]
pub struct ReducedOrderModel<T: Scalar> {
    coupling: Coupling<T>,
    basis: DMatrix<T>,
    /// [Ã_1 … Ã_nF], r × r·n_F.
    ops: DMatrix<T>,
    /// Ã_i = L R for terms acting on few cells.
    factors: Vec<Option<(DMatrix<T>, DMatrix<T>)>>,
    /// [b̃_1 … b̃_nF], r × n_F.
    inputs: DMatrix<T>,
    /// CV, consumers × r.
    outputs: DMatrix<T>,
    /// VᵀQ1: coefficients of the constant field and stored-energy weights.
    constant: DVector<T>,
    /// Full-library index of every reduced term.
    full_terms: Vec<usize>,
}

impl<T: Scalar> ReducedOrderModel<T> {
    /// Projects the full-order model onto `basis` (Q-orthonormal), keeping
    /// the listed library terms (all when `None`).
    pub fn project(fom: &FullOrderModel<T>, basis: DMatrix<T>, keep: Option<&[usize]>) -> Result<Self> {
        let full = fom.coupling().library();
        let keep: Vec<usize> = keep.map_or_else(|| (0..full.len()).collect(), |k| k.to_vec());
        let coupling = fom.coupling().with_library(full.restricted(&keep))?;
        let n = fom.dim();
        let r = basis.ncols();
        let q = fom.volumes();
        let mut qv = basis.clone();
        for (i, mut row) in qv.row_iter_mut().enumerate() {
            row *= q[i];
        }
        let lib = coupling.library();
        let nf = lib.len();
        let mut ops = DMatrix::zeros(r, r * nf);
        let mut inputs = DMatrix::zeros(r, nf);
        let ops_chunks: Vec<DMatrix<T>> = lib
            .terms()
            .par_iter()
            .map(|term| {
                let mut a = DMatrix::zeros(r, r);
                for &(row, col, v) in &term.entries {
                    a.ger(v, &qv.row(row).transpose(), &basis.row(col).transpose(), T::one());
                }
                a
            })
            .collect();
        let factors = lib.terms().iter().map(|t| low_rank(&t.entries, &qv, &basis)).collect();
        for (i, (a, term)) in ops_chunks.into_iter().zip(lib.terms()).enumerate() {
            ops.columns_mut(i * r, r).copy_from(&a);
            if let Some((row, v)) = term.input {
                inputs.column_mut(i).axpy(v, &qv.row(row).transpose(), T::zero());
            }
        }
        let cells = fom.output_map().cells();
        let outputs = DMatrix::from_fn(cells.len(), r, |h, j| basis[(cells[h], j)]);
        let constant = qv.transpose() * DVector::from_element(n, T::one());
        Ok(Self {
            coupling,
            basis,
            ops,
            factors,
            inputs,
            outputs,
            constant,
            full_terms: keep,
        })
    }

    pub fn basis(&self) -> &DMatrix<T> {
        &self.basis
    }

    pub fn full_terms(&self) -> &[usize] {
        &self.full_terms
    }

    /// Lifts a reduced state to cell energies.
    pub fn lift(&self, x: &DVector<T>) -> DVector<T> {
        &self.basis * x
    }

    /// Reduced weights from full-library weights.
    pub fn restrict_weights(&self, gamma_full: &[T]) -> Vec<T> {
        self.full_terms.iter().map(|&i| gamma_full[i]).collect()
    }

    /// A_r = Σγ_i Ã_i.
    pub fn reduced_operator(&self, gamma: &[T]) -> DMatrix<T> {
        let r = self.basis.ncols();
        let g = DVector::from_column_slice(gamma);
        let a = DMatrixView::from_slice(self.ops.as_slice(), r * r, gamma.len()) * g;
        DMatrix::from_column_slice(r, r, a.as_slice())
    }

    /// Reduced transfer function at the frozen weights (reduced library).
    pub fn transfer(&self, gamma: &[T], frequencies: &[f64]) -> Result<Vec<DVector<Complex<T>>>> {
        let r = self.basis.ncols();
        let a = self.reduced_operator(gamma).map(|v| cplx(v, T::zero()));
        let b = self.input_vector(gamma).map(|v| cplx(v, T::zero()));
        let c = self.outputs.map(|v| cplx(v, T::zero()));
        frequencies
            .iter()
            .map(|&w| {
                let m = DMatrix::<Complex<T>>::identity(r, r) * cplx(T::zero(), lit(w)) - &a;
                let x = m
                    .lu()
                    .solve(&b)
                    .ok_or_else(|| Error::Singular(format!("reduced shifted operator at ω = {w} rad/s")))?;
                Ok(&c * x)
            })
            .collect()
    }

    /// Number of reduced terms.
    pub fn n_terms(&self) -> usize {
        self.full_terms.len()
    }

    pub fn to_archive(&self, fom: &FullOrderModel<T>, training: TrainingInfo) -> RomArchive {
        let lib = fom.coupling().library();
        RomArchive {
            format: ARCHIVE_FORMAT.into(),
            version: ARCHIVE_VERSION,
            n: self.basis.nrows(),
            r: self.basis.ncols(),
            cells_per_pipe: fom.discretization().cells().to_vec(),
            terms: self.full_terms.iter().map(|&i| lib.terms()[i].key).collect(),
            basis: self.basis.iter().map(|&v| to_f64(v)).collect(),
            training,
        }
    }

    /// Rebuilds a reduced model from an archive and the full-order model it
    /// was trained on.
    pub fn from_archive(archive: &RomArchive, fom: &FullOrderModel<T>) -> Result<Self> {
        if archive.format != ARCHIVE_FORMAT || archive.version != ARCHIVE_VERSION {
            return Err(Error::Parse {
                origin: "ROM archive".into(),
                message: format!(
                    "unsupported archive {} version {}",
                    archive.format, archive.version
                ),
            });
        }
        if archive.cells_per_pipe != fom.discretization().cells() || archive.n != fom.dim() {
            return Err(Error::InvalidConfig(
                "ROM archive was built for a different discretization".into(),
            ));
        }
        if archive.basis.len() != archive.n * archive.r {
            return Err(Error::Parse {
                origin: "ROM archive".into(),
                message: "basis size does not match n·r".into(),
            });
        }
        let lib = fom.coupling().library();
        let keep = archive
            .terms
            .iter()
            .map(|k| {
                lib.position(k).ok_or_else(|| Error::InvalidConfig(format!("ROM term {k:?} is not part of the network")))
            })
            .collect::<Result<Vec<_>>>()?;
        let basis = DMatrix::from_iterator(archive.n, archive.r, archive.basis.iter().map(|&v| lit::<T>(v)));
        Self::project(fom, basis, Some(&keep))
    }
}

pub const ARCHIVE_FORMAT: &str = "heatnet-rom";
pub const ARCHIVE_VERSION: u32 = 1;

/// Serialized reduced model. The reduced operators are recomputed from the
/// basis on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RomArchive {
    pub format: String,
    pub version: u32,
    pub n: usize,
    pub r: usize,
    pub cells_per_pipe: Vec<usize>,
    pub terms: Vec<TermKey>,
    /// Column-major n × r.
    pub basis: Vec<f64>,
    pub training: TrainingInfo,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub config: Option<ReductionConfig>,
    pub candidates: usize,
    /// Candidate index picked in every greedy iteration.
    pub selected: Vec<usize>,
    pub history: Vec<GreedyIteration>,
    pub final_errors: Vec<f64>,
}

pub struct DenseFactor<T: Scalar>(nalgebra::LU<T, nalgebra::Dyn, nalgebra::Dyn>);

impl<T: Scalar> LinearSolve<T> for DenseFactor<T> {
    fn solve(&self, b: &DVector<T>) -> DVector<T> {
        self.0.solve(b).expect("factor is invertible")
    }

    fn solve_matrix(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.0.solve(b).expect("factor is invertible")
    }
}

#[derive(Debug, Clone)]
pub struct DenseJacobian<T: Scalar>(pub DMatrix<T>);

impl<T: Scalar> StepJacobian<T> for DenseJacobian<T> {
    type Factor = DenseFactor<T>;

    fn nnz(&self) -> usize {
        self.0.iter().filter(|v| **v != T::zero()).count()
    }

    fn mul_vec(&self, x: &DVector<T>) -> DVector<T> {
        &self.0 * x
    }

    fn mul_matrix(&self, x: &DMatrix<T>) -> DMatrix<T> {
        &self.0 * x
    }

    fn factor_step(&self, h: T) -> Result<DenseFactor<T>> {
        let n = self.0.nrows();
        let m = DMatrix::identity(n, n) - &self.0 * h;
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular("reduced step matrix".into()));
        }
        Ok(DenseFactor(lu))
    }

    fn to_dense(&self) -> DMatrix<T> {
        self.0.clone()
    }
}

impl<T: Scalar> TransportModel<T> for ReducedOrderModel<T> {
    type Jacobian = DenseJacobian<T>;

    fn dim(&self) -> usize {
        self.basis.ncols()
    }

    fn coupling(&self) -> &Coupling<T> {
        &self.coupling
    }

    fn outputs(&self, x: &DVector<T>) -> DVector<T> {
        &self.outputs * x
    }

    fn outputs_matrix(&self, dx: &DMatrix<T>) -> DMatrix<T> {
        &self.outputs * dx
    }

    fn uniform_state(&self, e: T) -> DVector<T> {
        &self.constant * e
    }

    fn stored_energy(&self, x: &DVector<T>) -> T {
        self.constant.dot(x)
    }

    fn input_vector(&self, gamma: &[T]) -> DVector<T> {
        let mut b = DVector::zeros(self.dim());
        for (i, &g) in gamma.iter().enumerate() {
            if g != T::zero() {
                b.axpy(g, &self.inputs.column(i), T::one());
            }
        }
        b
    }

    fn evaluate(
        &self,
        state: &CouplingState<T>,
        x: &DVector<T>,
        u: T,
        jacobian: bool,
    ) -> (DVector<T>, Option<DenseJacobian<T>>) {
        let gamma = &state.gamma;
        let r = self.dim();
        let nf = gamma.len();
        let coupled: Vec<usize> = match (&state.dgamma_dy, jacobian) {
            (Some(dg), true) => (0..nf).filter(|&i| dg.row(i).iter().any(|v| *v != T::zero())).collect(),
            _ => Vec::new(),
        };
        // One sweep over the library: A_r and the columns Ã_i x + b̃_i u.
        let mut a = DMatrix::zeros(r, r);
        let mut y = DMatrix::zeros(r, coupled.len());
        let mut next = coupled.iter().copied().enumerate().peekable();
        for i in 0..nf {
            let hit = next.next_if(|&(_, c)| c == i);
            if gamma[i] == T::zero() && hit.is_none() {
                continue;
            }
            if let Some((left, right)) = &self.factors[i] {
                if gamma[i] != T::zero() {
                    a.gemm(gamma[i], left, right, T::one());
                }
                if let Some((k, _)) = hit {
                    let mut col = y.column_mut(k);
                    col.copy_from(&self.inputs.column(i));
                    col.gemv(T::one(), left, &(right * x), u);
                }
                continue;
            }
            let block = &self.ops.as_slice()[i * r * r..(i + 1) * r * r];
            if gamma[i] != T::zero() {
                for (dst, &src) in a.as_mut_slice().iter_mut().zip(block) {
                    *dst += gamma[i] * src;
                }
            }
            if let Some((k, _)) = hit {
                let mut col = y.column_mut(k);
                col.copy_from(&self.inputs.column(i));
                col.gemv(T::one(), &DMatrixView::from_slice(block, r, r), x, u);
            }
        }
        let f = &a * x + self.input_vector(gamma) * u;
        if !jacobian {
            return (f, None);
        }
        let mut j = a;
        if let Some(dg) = state.dgamma_dy.as_ref().filter(|_| !coupled.is_empty()) {
            let gy = DMatrix::from_fn(coupled.len(), dg.ncols(), |k, h| dg[(coupled[k], h)]);
            j.gemm(T::one(), &y, &(gy * &self.outputs), T::one());
        }
        (f, Some(DenseJacobian(j)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyIteration {
    pub iteration: usize,
    /// Candidate with the largest error before enrichment.
    pub picked: usize,
    pub max_error: f64,
    /// Reduced dimension before enrichment.
    pub dim: usize,
}

/// Greedy basis construction over the candidate flows.
pub fn greedy_reduce<T: Scalar>(
    fom: &FullOrderModel<T>,
    candidates: &[Candidate<T>],
    config: &ReductionConfig,
) -> Result<(ReducedOrderModel<T>, TrainingInfo)> {
    config.validate()?;
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("no candidate flows for the reduction".into()));
    }
    let n_terms = fom.coupling().library().len();
    let keep: Vec<usize> = (0..n_terms)
        .filter(|&i| candidates.iter().any(|c| c.gamma[i] != T::zero()))
        .collect();
    let full_h: Vec<Vec<DVector<Complex<T>>>> = candidates
        .par_iter()
        .map(|c| fom_transfer(fom, &c.gamma, &config.error_frequencies))
        .collect::<Result<_>>()?;

    let mut basis = QBasis::constant(fom.volumes().clone());
    let mut info = TrainingInfo {
        config: Some(config.clone()),
        candidates: candidates.len(),
        ..Default::default()
    };
    loop {
        let rom = ReducedOrderModel::project(fom, basis.matrix().clone(), Some(&keep))?;
        let errors: Vec<f64> = candidates
            .par_iter()
            .zip(&full_h)
            .map(|(c, h)| {
                let g = rom.restrict_weights(&c.gamma);
                Ok(transfer_error(h, &rom.transfer(&g, &config.error_frequencies)?))
            })
            .collect::<Result<_>>()?;
        let (picked, max_error) = errors
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, e)| if e > best.1 { (k, e) } else { best });
        let iteration = info.selected.len();
        info.history.push(GreedyIteration {
            iteration,
            picked,
            max_error,
            dim: basis.dim(),
        });
        info.final_errors = errors;
        if iteration > 0 && max_error < config.tolerance {
            return Ok((rom, info));
        }
        if iteration == config.max_iterations {
            return Err(Error::ReductionFailed {
                iterations: iteration,
                max_error,
                tolerance: config.tolerance,
            });
        }
        let block = local_basis(fom, &candidates[picked].gamma, &config.shifts)?;
        if basis.extend(&block, config.svd_threshold) == 0 {
            return Err(Error::ReductionFailed {
                iterations: iteration,
                max_error,
                tolerance: config.tolerance,
            });
        }
        info.selected.push(picked);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::FourierControl;
    use crate::fixtures;
    use crate::integrator::{simulate, SimulationOptions};
    use crate::scenario::{ScenarioConfig, TimeGrid};
    use crate::thermal::Discretization;

    fn fom(file: crate::network::NetworkFile, cells: usize) -> FullOrderModel<f64> {
        let net = file.into_topology().unwrap();
        let disc = Discretization::uniform(&net, cells).unwrap();
        FullOrderModel::from_scenario(&net, disc, &ScenarioConfig::default()).unwrap()
    }

    fn training(m: &FullOrderModel<f64>) -> Vec<Candidate<f64>> {
        let grid = TimeGrid::new(0.0, 24.0 * 3600.0, 300.0).unwrap();
        let mut k = DVector::zeros(5);
        k[0] = 1.5e9;
        k[1] = 4e7;
        k[4] = 2e7;
        let tr = simulate(m, &FourierControl::new(k).unwrap(), &grid, &SimulationOptions::default()).unwrap();
        candidates_from_trajectory(m, &tr, 12).unwrap()
    }

    #[test]
    fn log_spacing() {
        let w = log_spaced(1.0, 100.0, 3);
        assert!((w[1] - 10.0).abs() < 1e-12 && (w[2] - 100.0).abs() < 1e-12);
    }

    #[test]
    fn full_basis_reproduces_transfer_function() {
        let m = fom(fixtures::merge(), 2);
        let n = m.dim();
        let mut b = QBasis::constant(m.volumes().clone());
        b.extend(&DMatrix::identity(n, n), 1e-10);
        assert_eq!(b.dim(), n);
        assert!(b.orthogonality_defect() < 1e-12);
        let rom = ReducedOrderModel::project(&m, b.into_matrix(), None).unwrap();
        let c = &training(&m)[0];
        let w = log_spaced(1e-4, 1e-1, 5);
        let e = transfer_error(&fom_transfer(&m, &c.gamma, &w).unwrap(), &rom.transfer(&c.gamma, &w).unwrap());
        assert!(e < 1e-10, "{e}");
    }

    #[test]
    fn single_shift_interpolates() {
        let m = fom(fixtures::single_pipe(500.0, 0.1), 10);
        let c = &training(&m)[0];
        let w0 = 2e-3;
        let mut b = QBasis::empty(m.volumes().clone());
        b.extend(&local_basis(&m, &c.gamma, &[w0]).unwrap(), 1e-10);
        let rom = ReducedOrderModel::project(&m, b.into_matrix(), None).unwrap();
        let hf = fom_transfer(&m, &c.gamma, &[w0]).unwrap();
        let hr = rom.transfer(&c.gamma, &[w0]).unwrap();
        assert!((&hf[0] - &hr[0]).norm() <= 1e-10 * hf[0].norm());
        let mut b2 = QBasis::empty(m.volumes().clone());
        b2.extend(&local_basis(&m, &c.gamma, &[w0, 2e-2]).unwrap(), 1e-10);
        let rom2 = ReducedOrderModel::project(&m, b2.into_matrix(), None).unwrap();
        for w in [w0, 2e-2] {
            let hf = fom_transfer(&m, &c.gamma, &[w]).unwrap();
            let hr = rom2.transfer(&c.gamma, &[w]).unwrap();
            assert!((&hf[0] - &hr[0]).norm() <= 1e-7 * hf[0].norm(), "{w} {}", (&hf[0] - &hr[0]).norm() / hf[0].norm());
        }
    }

    #[test]
    fn zero_model_has_unit_error() {
        let m = fom(fixtures::single_pipe(500.0, 0.1), 4);
        let c = &training(&m)[0];
        let w = [1e-3];
        let h = fom_transfer(&m, &c.gamma, &w).unwrap();
        let zero = vec![DVector::zeros(h[0].len())];
        assert_eq!(transfer_error(&h, &zero), 1.0);
        assert_eq!(transfer_error(&h, &h), 0.0);
    }

    #[test]
    fn greedy_meets_tolerance_and_rejects_impossible_ones() {
        let m = fom(fixtures::diamond(), 4);
        let cands = training(&m);
        let cfg = ReductionConfig::for_step(300.0);
        let (rom, info) = greedy_reduce(&m, &cands, &cfg).unwrap();
        assert!(info.final_errors.iter().all(|&e| e < 1e-3));
        for (c, &e) in cands.iter().zip(&info.final_errors) {
            let g = rom.restrict_weights(&c.gamma);
            let again = transfer_error(
                &fom_transfer(&m, &c.gamma, &cfg.error_frequencies).unwrap(),
                &rom.transfer(&g, &cfg.error_frequencies).unwrap(),
            );
            assert!((again - e).abs() < 1e-12);
        }
        let generous = ReductionConfig {
            tolerance: 1.1,
            ..cfg.clone()
        };
        let (_, info) = greedy_reduce(&m, &cands[..1], &generous).unwrap();
        assert_eq!(info.selected.len(), 1);

        let fine = fom(fixtures::diamond(), 16);
        let strict = ReductionConfig {
            tolerance: 1e-14,
            max_iterations: 1,
            ..cfg
        };
        assert!(matches!(
            greedy_reduce(&fine, &training(&fine), &strict).unwrap_err(),
            Error::ReductionFailed { .. }
        ));
    }

    #[test]
    fn reduced_jacobian_matches_finite_differences() {
        let m = fom(fixtures::diamond(), 4);
        let cands = training(&m);
        let (rom, _) = greedy_reduce(&m, &cands, &ReductionConfig::for_step(300.0)).unwrap();
        let x = rom.uniform_state(1.45e9) + DVector::from_fn(rom.dim(), |i, _| 1e6 * (i as f64).sin());
        let u = 1.5e9;
        let eval = |x: &DVector<f64>| {
            let s = rom.coupling().evaluate(&rom.outputs(x), 3600.0, false).unwrap();
            rom.rhs(&s, x, u)
        };
        let s = rom.coupling().evaluate(&rom.outputs(&x), 3600.0, true).unwrap();
        let j = rom.evaluate(&s, &x, u, true).1.unwrap().0;
        for c in 0..rom.dim() {
            let h = 1e3;
            let mut xp = x.clone();
            xp[c] += h;
            let mut xm = x.clone();
            xm[c] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            assert!((fd - j.column(c)).amax() <= 1e-6 * j.amax(), "column {c}");
        }
    }

    #[test]
    fn reduced_operators_stay_stable_for_random_flows() {
        use rand::{Rng, SeedableRng};
        let m = fom(fixtures::two_loop(), 4);
        let cands = training(&m);
        let (rom, _) = greedy_reduce(&m, &cands, &ReductionConfig::for_step(300.0)).unwrap();
        let hyd = m.coupling().hydraulics();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        for _ in 0..100 {
            let qc = DVector::from_fn(hyd.n_consumers(), |_, _| rng.gen_range(1e-4..5e-3));
            let flow = hyd.solve_loop_flows(qc).unwrap();
            let Ok(g) = rom.coupling().library().weights(&flow.q, flow.source_flow()) else {
                continue;
            };
            let worst = rom
                .reduced_operator(&g)
                .complex_eigenvalues()
                .iter()
                .fold(f64::NEG_INFINITY, |a, z| a.max(z.re));
            assert!(worst <= 1e-10, "{worst}");
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn archive_round_trip() {
        let m = fom(fixtures::merge(), 3);
        let cands = training(&m);
        let (rom, info) = greedy_reduce(&m, &cands, &ReductionConfig::for_step(300.0)).unwrap();
        let archive = rom.to_archive(&m, info);
        let text = serde_json::to_string(&archive).unwrap();
        let back: RomArchive = serde_json::from_str(&text).unwrap();
        let rom2 = ReducedOrderModel::from_archive(&back, &m).unwrap();
        assert_eq!(rom2.dim(), rom.dim());
        let g = rom.restrict_weights(&cands[0].gamma);
        assert!((rom2.reduced_operator(&g) - rom.reduced_operator(&g)).amax() < 1e-15);
    }
}
