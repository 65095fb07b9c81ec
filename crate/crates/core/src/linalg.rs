//! Dense and envelope-structured linear algebra helpers.
//!
//! Everything here works on `nalgebra` dynamic matrices. Numerical rank uses
//! the usual threshold `max(m, n) * eps * sigma_max`.

use nalgebra::{DMatrix, DVector};

use crate::error::{MdmError, Result};

/// Singular value threshold below which a direction counts as null.
pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// Moore-Penrose pseudoinverse via SVD, returned with the numerical rank.
pub fn pinv_with_rank(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return (DMatrix::zeros(n, m), 0);
    }
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.max();
    let tol = rank_tolerance(m, n, sigma_max);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(n, m);
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol && s > 0.0 {
            rank += 1;
            let vi = v_t.row(i).transpose();
            let ui = u.column(i);
            out += (vi * ui.transpose()) / s;
        }
    }
    (out, rank)
}

pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    pinv_with_rank(a).0
}

/// Numerical rank by singular values.
pub fn rank(a: &DMatrix<f64>) -> usize {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return 0;
    }
    let sv = a.singular_values();
    let tol = rank_tolerance(m, n, sv.max());
    sv.iter().filter(|&&s| s > tol && s > 0.0).count()
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

pub fn is_symmetric(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let n = a.nrows();
    (0..n).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= rel_tol * scale))
}

/// Pseudoinverse of a symmetric matrix through its eigendecomposition.
pub fn sym_pinv(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = a.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0);
    }
    let eig = a.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.amax();
    let tol = rank_tolerance(n, n, lmax);
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() > tol && l != 0.0 {
            rank += 1;
            let v = eig.eigenvectors.column(i);
            out += (v * v.transpose()) / l;
        }
    }
    (out, rank)
}

/// Inverse of a symmetric matrix: Cholesky when positive definite, otherwise
/// the eigen pseudoinverse. The flag reports whether the fallback was taken.
pub fn sym_inverse_or_pinv(a: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(ch) = a.clone().cholesky() {
        let inv = ch.inverse();
        if inv.iter().all(|x| x.is_finite()) {
            return (inv, false);
        }
    }
    (sym_pinv(a).0, true)
}

/// Returns `T` with `T^T T` equal to the inverse of the symmetric PSD `a`
/// (Cholesky), or to its pseudoinverse when `a` is singular; null directions
/// are dropped, so `T` may have fewer rows than `a`.
pub fn sym_whitener(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if let Some(ch) = a.clone().cholesky() {
        if let Some(t) = ch.l().solve_lower_triangular(&DMatrix::identity(n, n)) {
            if t.iter().all(|x| x.is_finite()) {
                return t;
            }
        }
    }
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = a.clone().symmetric_eigen();
    let tol = rank_tolerance(n, n, eig.eigenvalues.amax());
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > tol).collect();
    DMatrix::from_fn(keep.len(), n, |r, c| {
        let i = keep[r];
        eig.eigenvectors[(c, i)] / eig.eigenvalues[i].sqrt()
    })
}

/// Returns `S` with `S * S^T = a` for a symmetric positive semi-definite `a`.
pub fn psd_factor(a: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    if !is_symmetric(a, 1e-12) {
        return Err(MdmError::NotSymmetric(what));
    }
    if a.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = a.clone().symmetric_eigen();
    let tol = rank_tolerance(a.nrows(), a.nrows(), eig.eigenvalues.amax().max(1.0));
    let min = eig.eigenvalues.min();
    if min < -tol {
        return Err(MdmError::NotPsd {
            what,
            min_eigenvalue: min,
        });
    }
    let mut v = eig.eigenvectors.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    Ok(v)
}

/// Projects a symmetric matrix onto the PSD cone by clipping eigenvalues at zero.
pub fn project_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return a.clone();
    }
    let eig = a.clone().symmetric_eigen();
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > 0.0 {
            let v = eig.eigenvectors.column(i);
            out += (v * v.transpose()) * l;
        }
    }
    symmetrize(&mut out);
    out
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Solves a small symmetric positive definite system, failing if it is singular.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|ch| ch.solve(b))
}

/// Symmetric matrix stored by its lower envelope (row profile).
///
/// Row `i` stores columns `first[i]..=i`. Cholesky fill-in stays inside the
/// envelope, so the factor reuses the same layout.
#[derive(Debug, Clone)]
pub struct EnvelopeMatrix {
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl EnvelopeMatrix {
    pub fn new(first: Vec<usize>) -> Self {
        let rows = first
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                assert!(f <= i, "envelope start beyond diagonal");
                vec![0.0; i - f + 1]
            })
            .collect();
        Self { first, rows }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn first_col(&self, i: usize) -> usize {
        self.first[i]
    }

    /// Lower-triangle entry; zero outside the envelope.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if j < self.first[i] {
            0.0
        } else {
            self.rows[i][j - self.first[i]]
        }
    }

    /// Mutable lower-triangle entry (`j <= i`, inside the envelope).
    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(j <= i && j >= self.first[i]);
        let f = self.first[i];
        &mut self.rows[i][j - f]
    }

    pub fn diag(&self, i: usize) -> f64 {
        *self.rows[i].last().expect("row contains diagonal")
    }

    pub fn add_to_diag(&mut self, v: f64) {
        for row in &mut self.rows {
            *row.last_mut().expect("row contains diagonal") += v;
        }
    }

    pub fn mean_diag(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        (0..self.dim()).map(|i| self.diag(i)).sum::<f64>() / self.dim() as f64
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    /// Envelope Cholesky factorization `A = L L^T`; `None` if not positive definite.
    pub fn cholesky(&self) -> Option<EnvelopeCholesky> {
        let n = self.dim();
        let mut l: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let fi = self.first[i];
            let mut row = self.rows[i].clone();
            for j in fi..i {
                let fj = self.first[j];
                let start = fi.max(fj);
                let lj = &l[j];
                let mut s = row[j - fi];
                for t in start..j {
                    s -= row[t - fi] * lj[t - fj];
                }
                row[j - fi] = s / lj[j - fj];
            }
            let mut d = row[i - fi];
            for t in fi..i {
                d -= row[t - fi] * row[t - fi];
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            row[i - fi] = d.sqrt();
            l.push(row);
        }
        Some(EnvelopeCholesky {
            first: self.first.clone(),
            rows: l,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl EnvelopeCholesky {
    pub fn solve_vec(&self, b: &mut [f64]) {
        let n = self.rows.len();
        assert_eq!(b.len(), n);
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.rows[i];
            let mut s = b[i];
            for t in fi..i {
                s -= row[t - fi] * b[t];
            }
            b[i] = s / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.rows[i];
            let x = b[i] / row[i - fi];
            b[i] = x;
            for t in fi..i {
                b[t] -= row[t - fi] * x;
            }
        }
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            self.solve_vec(col.as_mut_slice());
        }
        out
    }

    pub fn solve_vector(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        self.solve_vec(out.as_mut_slice());
        out
    }
}
