//! Compressed sparse column storage and a left-looking sparse LU.
//!
//! The factorization follows Gilbert and Peierls: each column is obtained by
//! a sparse triangular solve against the already computed part of L, with the
//! nonzero pattern found by depth-first search. Partial pivoting uses a
//! threshold that prefers the diagonal, so symmetric column orderings keep
//! their structure for the diagonally dominant Newton matrices of the
//! transport problem. Works for real and complex entries.

use nalgebra::{ComplexField, DMatrix, DVector};
use num_traits::Zero;

use crate::error::{Error, Result};

/// Sparse matrix in compressed column form with sorted row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Csc<N> {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<N>,
}

impl<N: ComplexField + Copy> Csc<N> {
    /// Builds a matrix from (row, col, value) triplets, summing duplicates.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, N)]) -> Self {
        let (mut csc, slots) = Self::pattern_from(nrows, ncols, triplets.iter().map(|t| (t.0, t.1)));
        for (slot, t) in slots.iter().zip(triplets) {
            csc.values[*slot] += t.2;
        }
        csc
    }

    /// Pattern for the given entries (values zero) and, for every entry, the
    /// index of its slot in [`Self::values`]. Duplicates share a slot.
    pub fn pattern_from(
        nrows: usize,
        ncols: usize,
        entries: impl Iterator<Item = (usize, usize)> + Clone,
    ) -> (Self, Vec<usize>) {
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); ncols];
        for (r, c) in entries.clone() {
            debug_assert!(r < nrows && c < ncols);
            cols[c].push(r);
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for col in &mut cols {
            col.sort_unstable();
            col.dedup();
            row_idx.extend_from_slice(col);
            col_ptr.push(row_idx.len());
        }
        let slots = entries
            .map(|(r, c)| {
                let range = &row_idx[col_ptr[c]..col_ptr[c + 1]];
                col_ptr[c] + range.binary_search(&r).expect("entry is in the pattern")
            })
            .collect();
        let values = vec![N::zero(); row_idx.len()];
        (
            Self {
                nrows,
                ncols,
                col_ptr,
                row_idx,
                values,
            },
            slots,
        )
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![N::one(); n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Number of stored entries whose value is not exactly zero.
    pub fn structural_nnz(&self) -> usize {
        self.values.iter().filter(|v| **v != N::zero()).count()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[N] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [N] {
        &mut self.values
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = (usize, N)> + '_ {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &DVector<N>) -> DVector<N> {
        let mut y = DVector::zeros(self.nrows);
        self.mul_vec_acc(x, N::one(), &mut y);
        y
    }

    /// y += alpha A x.
    pub fn mul_vec_acc(&self, x: &DVector<N>, alpha: N, y: &mut DVector<N>) {
        for c in 0..self.ncols {
            let xc = x[c] * alpha;
            if xc == N::zero() {
                continue;
            }
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[p]] += self.values[p] * xc;
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<N> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for c in 0..self.ncols {
            for (r, v) in self.column(c) {
                m[(r, c)] += v;
            }
        }
        m
    }

    /// Applies `f` to every stored value.
    pub fn map<M: ComplexField + Copy>(&self, f: impl Fn(N) -> M) -> Csc<M> {
        Csc {
            nrows: self.nrows,
            ncols: self.ncols,
            col_ptr: self.col_ptr.clone(),
            row_idx: self.row_idx.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// alpha·I + beta·A for square A, keeping A's pattern plus the diagonal.
    pub fn shifted(&self, alpha: N, beta: N) -> Self {
        assert_eq!(self.nrows, self.ncols);
        let mut triplets: Vec<(usize, usize, N)> = (0..self.nrows).map(|i| (i, i, alpha)).collect();
        for c in 0..self.ncols {
            for (r, v) in self.column(c) {
                triplets.push((r, c, beta * v));
            }
        }
        Self::from_triplets(self.nrows, self.ncols, &triplets)
    }
}

/// Symmetric ordering that keeps the natural order but moves columns with
/// more than `dense_threshold` entries to the end.
pub fn dense_last_order<N: ComplexField + Copy>(a: &Csc<N>, dense_threshold: usize) -> Vec<usize> {
    let (sparse, dense): (Vec<usize>, Vec<usize>) =
        (0..a.ncols()).partition(|&c| a.col_ptr[c + 1] - a.col_ptr[c] <= dense_threshold);
    sparse.into_iter().chain(dense).collect()
}

/// LU factors with L·U = P·A·Q.
#[derive(Debug, Clone)]
pub struct SparseLu<N> {
    n: usize,
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    l_val: Vec<N>,
    u_ptr: Vec<usize>,
    u_idx: Vec<usize>,
    u_val: Vec<N>,
    pinv: Vec<usize>,
    order: Vec<usize>,
}

const UNSET: usize = usize::MAX;

impl<N: ComplexField + Copy> SparseLu<N> {
    /// Factors a square matrix. Column `order[k]` of A becomes column k;
    /// the diagonal entry is taken as pivot whenever its magnitude is at
    /// least `threshold` times the largest candidate.
    pub fn factor(a: &Csc<N>, order: Option<&[usize]>, threshold: f64) -> Result<Self> {
        let n = a.nrows;
        if a.ncols != n {
            return Err(Error::Singular(format!("LU of a non-square {}x{} matrix", n, a.ncols)));
        }
        let order: Vec<usize> = order.map_or_else(|| (0..n).collect(), |o| o.to_vec());
        let tol = nalgebra::convert::<f64, N::RealField>(threshold);

        let cap = 4 * a.nnz() + n;
        let mut l_ptr = vec![0; n + 1];
        let mut l_idx = Vec::with_capacity(cap);
        let mut l_val: Vec<N> = Vec::with_capacity(cap);
        let mut u_ptr = vec![0; n + 1];
        let mut u_idx = Vec::with_capacity(cap);
        let mut u_val: Vec<N> = Vec::with_capacity(cap);
        let mut pinv = vec![UNSET; n];

        let mut x = vec![N::zero(); n];
        let mut reach = vec![0usize; n];
        let mut stack = vec![0usize; n];
        let mut pstack = vec![0usize; n];
        let mut marked = vec![false; n];

        for k in 0..n {
            l_ptr[k] = l_idx.len();
            u_ptr[k] = u_idx.len();
            let col = order[k];

            // nonzero pattern of L \ A(:, col), in topological order
            let mut top = n;
            for p in a.col_ptr[col]..a.col_ptr[col + 1] {
                let start = a.row_idx[p];
                if marked[start] {
                    continue;
                }
                let mut head = 0usize;
                stack[0] = start;
                while head != UNSET {
                    let j = stack[head];
                    let jcol = pinv[j];
                    if !marked[j] {
                        marked[j] = true;
                        pstack[head] = if jcol == UNSET { 0 } else { l_ptr[jcol] };
                    }
                    let end = if jcol == UNSET { 0 } else { l_ptr[jcol + 1] };
                    let mut done = true;
                    let mut q = pstack[head];
                    while q < end {
                        let i = l_idx[q];
                        q += 1;
                        if marked[i] {
                            continue;
                        }
                        pstack[head] = q;
                        head += 1;
                        stack[head] = i;
                        done = false;
                        break;
                    }
                    if done {
                        top -= 1;
                        reach[top] = j;
                        head = head.wrapping_sub(1);
                    }
                }
            }
            for &j in &reach[top..n] {
                marked[j] = false;
            }

            // numeric sparse triangular solve
            for p in a.col_ptr[col]..a.col_ptr[col + 1] {
                x[a.row_idx[p]] = a.values[p];
            }
            for &j in &reach[top..n] {
                let jcol = pinv[j];
                if jcol == UNSET {
                    continue;
                }
                let xj = x[j];
                for q in l_ptr[jcol] + 1..l_ptr[jcol + 1] {
                    x[l_idx[q]] -= l_val[q] * xj;
                }
            }

            // pivot selection
            let mut ipiv = UNSET;
            let mut best = N::RealField::zero();
            for &i in &reach[top..n] {
                if pinv[i] == UNSET {
                    let t = x[i].modulus();
                    if t > best {
                        best = t;
                        ipiv = i;
                    }
                } else {
                    u_idx.push(pinv[i]);
                    u_val.push(x[i]);
                }
            }
            if ipiv == UNSET || !(best > N::RealField::zero()) {
                for &i in &reach[top..n] {
                    x[i] = N::zero();
                }
                return Err(Error::Singular(format!("sparse LU: zero pivot in column {col}")));
            }
            if pinv[col] == UNSET && x[col].modulus() >= best * tol.clone() {
                ipiv = col;
            }
            let pivot = x[ipiv];
            u_idx.push(k);
            u_val.push(pivot);
            pinv[ipiv] = k;
            l_idx.push(ipiv);
            l_val.push(N::one());
            for &i in &reach[top..n] {
                if pinv[i] == UNSET {
                    l_idx.push(i);
                    l_val.push(x[i] / pivot);
                }
                x[i] = N::zero();
            }
        }
        l_ptr[n] = l_idx.len();
        u_ptr[n] = u_idx.len();
        for i in &mut l_idx {
            *i = pinv[*i];
        }
        Ok(Self {
            n,
            l_ptr,
            l_idx,
            l_val,
            u_ptr,
            u_idx,
            u_val,
            pinv,
            order,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of L and U together.
    pub fn nnz(&self) -> usize {
        self.l_idx.len() + self.u_idx.len()
    }

    /// Solves A x = b in place, using `work` as scratch of length n.
    pub fn solve_in_place(&self, b: &mut [N], work: &mut [N]) {
        let n = self.n;
        for k in 0..n {
            work[self.pinv[k]] = b[k];
        }
        for j in 0..n {
            let xj = work[j];
            if xj == N::zero() {
                continue;
            }
            for p in self.l_ptr[j] + 1..self.l_ptr[j + 1] {
                work[self.l_idx[p]] -= self.l_val[p] * xj;
            }
        }
        for j in (0..n).rev() {
            let last = self.u_ptr[j + 1] - 1;
            work[j] /= self.u_val[last];
            let xj = work[j];
            if xj == N::zero() {
                continue;
            }
            for p in self.u_ptr[j]..last {
                work[self.u_idx[p]] -= self.u_val[p] * xj;
            }
        }
        for k in 0..n {
            b[self.order[k]] = work[k];
        }
    }

    pub fn solve(&self, b: &DVector<N>) -> DVector<N> {
        let mut x = b.clone();
        let mut work = vec![N::zero(); self.n];
        self.solve_in_place(x.as_mut_slice(), &mut work);
        x
    }

    pub fn solve_matrix(&self, b: &DMatrix<N>) -> DMatrix<N> {
        let mut x = b.clone();
        let mut work = vec![N::zero(); self.n];
        for mut col in x.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice(), &mut work);
        }
        x
    }
}
