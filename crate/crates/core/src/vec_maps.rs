//! Column-major vectorization, Kronecker powers, and the sparse 0/1 maps
//! between unique covariance entries and full vectorized covariances.

use nalgebra::{DMatrix, DVector};

use crate::error::{MdmError, Result};

/// Column-major stacking.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(MdmError::Dimension(format!(
            "cannot reshape {} entries into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_column_slice(rows, cols, v.as_slice()))
}

/// `m ⊗ m ⊗ ... ⊗ m` with `n` factors.
pub fn kron_power(m: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    assert!(n >= 1, "Kronecker power needs at least one factor");
    let mut out = m.clone();
    for _ in 1..n {
        out = out.kronecker(m);
    }
    out
}

/// Which noise covariance a unique entry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseBlock {
    State,
    Measurement,
}

/// Ordering of the unique covariance entries: the column-major lower
/// triangle of `Q` followed by that of `R`. For `n_w = 1, n_v = 2` this is
/// `[Q, R(1,1), R(1,2), R(2,2)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CovLayout {
    nw: usize,
    nv: usize,
}

fn tri(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position of `(row, col)`, `row >= col`, in the column-major lower triangle.
fn tri_position(n: usize, row: usize, col: usize) -> usize {
    // Columns before `col` hold n + (n-1) + ... + (n-col+1) entries.
    col * n - col * col.saturating_sub(1) / 2 + (row - col)
}

fn tri_entry(n: usize, mut pos: usize) -> (usize, usize) {
    for col in 0..n {
        let len = n - col;
        if pos < len {
            return (col + pos, col);
        }
        pos -= len;
    }
    panic!("triangle position out of range");
}

impl CovLayout {
    pub fn new(nw: usize, nv: usize) -> Self {
        Self { nw, nv }
    }

    pub fn nw(&self) -> usize {
        self.nw
    }

    pub fn nv(&self) -> usize {
        self.nv
    }

    pub fn len(&self) -> usize {
        tri(self.nw) + tri(self.nv)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position of the (symmetric) entry `(row, col)` of the given block.
    pub fn position(&self, block: NoiseBlock, row: usize, col: usize) -> usize {
        let (row, col) = if row >= col { (row, col) } else { (col, row) };
        match block {
            NoiseBlock::State => tri_position(self.nw, row, col),
            NoiseBlock::Measurement => tri(self.nw) + tri_position(self.nv, row, col),
        }
    }

    /// Block and lower-triangle `(row, col)` of a position.
    pub fn entry(&self, pos: usize) -> (NoiseBlock, usize, usize) {
        if pos < tri(self.nw) {
            let (r, c) = tri_entry(self.nw, pos);
            (NoiseBlock::State, r, c)
        } else {
            let (r, c) = tri_entry(self.nv, pos - tri(self.nw));
            (NoiseBlock::Measurement, r, c)
        }
    }

    /// Human-readable name, e.g. `Q`, `R(1,2)`; indices are 1-based with the
    /// smaller index first.
    pub fn label(&self, pos: usize) -> String {
        let (block, r, c) = self.entry(pos);
        let (name, n) = match block {
            NoiseBlock::State => ("Q", self.nw),
            NoiseBlock::Measurement => ("R", self.nv),
        };
        if n == 1 {
            name.to_string()
        } else {
            format!("{name}({},{})", c + 1, r + 1)
        }
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.len()).map(|p| self.label(p)).collect()
    }

    /// Inverse of [`CovLayout::label`].
    pub fn parse_label(&self, label: &str) -> Option<usize> {
        let (block, n, rest) = match label.split_at(1) {
            ("Q", rest) => (NoiseBlock::State, self.nw, rest),
            ("R", rest) => (NoiseBlock::Measurement, self.nv, rest),
            _ => return None,
        };
        if rest.is_empty() {
            return (n == 1).then(|| self.position(block, 0, 0));
        }
        let inner = rest.strip_prefix('(')?.strip_suffix(')')?;
        let (a, b) = inner.split_once(',')?;
        let (a, b): (usize, usize) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
        if a == 0 || b == 0 || a > n || b > n || n == 1 {
            return None;
        }
        Some(self.position(block, a - 1, b - 1))
    }

    /// Unique entries of symmetric `(q, r)`.
    pub fn pack(&self, q: &DMatrix<f64>, r: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(self.len(), |p, _| match self.entry(p) {
            (NoiseBlock::State, i, j) => q[(i, j)],
            (NoiseBlock::Measurement, i, j) => r[(i, j)],
        })
    }

    /// Symmetric `(q, r)` mirrored from the unique entries.
    pub fn unpack(&self, values: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        assert_eq!(values.len(), self.len());
        let mut q = DMatrix::zeros(self.nw, self.nw);
        let mut r = DMatrix::zeros(self.nv, self.nv);
        for (p, &v) in values.iter().enumerate() {
            let (block, i, j) = self.entry(p);
            let m = match block {
                NoiseBlock::State => &mut q,
                NoiseBlock::Measurement => &mut r,
            };
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        (q, r)
    }

    /// Unique-entry index of each diagonal element, in layout order.
    pub fn diagonal_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&p| {
                let (_, r, c) = self.entry(p);
                r == c
            })
            .collect()
    }
}

/// Unique `Q`/`R` entries together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct UniqueCovVector {
    pub layout: CovLayout,
    pub values: DVector<f64>,
}

impl UniqueCovVector {
    pub fn from_matrices(q: &DMatrix<f64>, r: &DMatrix<f64>) -> Self {
        let layout = CovLayout::new(q.nrows(), r.nrows());
        Self {
            values: layout.pack(q, r),
            layout,
        }
    }

    pub fn to_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        self.layout.unpack(&self.values)
    }
}

/// Sparse map from unique `Q`/`R` entries to the vectorized covariance of the
/// stacked noise `[w_{k-N}..w_{k+L-2}; v_{k-N}..v_{k+L-1}]`, i.e.
/// `vec(blkdiag(I_{P-1} ⊗ Q, I_P ⊗ R))`.
#[derive(Debug, Clone)]
pub struct ReplicationMatrix {
    layout: CovLayout,
    span: usize,
    noise_dim: usize,
    /// Unique-entry index for each row (vec position); `None` for zero rows.
    rows: Vec<Option<usize>>,
    /// Nonzero `(row, col)` positions of the covariance per unique entry.
    support: Vec<Vec<(usize, usize)>>,
}

impl ReplicationMatrix {
    pub fn new(nw: usize, nv: usize, span: usize) -> Self {
        assert!(span >= 1, "span must be at least 1");
        let layout = CovLayout::new(nw, nv);
        let n_wstack = (span - 1) * nw;
        let noise_dim = n_wstack + span * nv;
        let locate = |i: usize| -> (NoiseBlock, usize, usize) {
            if i < n_wstack {
                (NoiseBlock::State, i / nw, i % nw)
            } else {
                let j = i - n_wstack;
                (NoiseBlock::Measurement, j / nv, j % nv)
            }
        };
        let mut rows = vec![None; noise_dim * noise_dim];
        let mut support = vec![Vec::new(); layout.len()];
        for c in 0..noise_dim {
            for r in 0..noise_dim {
                let (br, sr, ir) = locate(r);
                let (bc, sc, ic) = locate(c);
                if br == bc && sr == sc {
                    let p = layout.position(br, ir, ic);
                    rows[r + c * noise_dim] = Some(p);
                    support[p].push((r, c));
                }
            }
        }
        Self {
            layout,
            span,
            noise_dim,
            rows,
            support,
        }
    }

    pub fn layout(&self) -> CovLayout {
        self.layout
    }

    pub fn span(&self) -> usize {
        self.span
    }

    /// Length of the stacked noise vector.
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.layout.len()
    }

    pub fn row_param(&self, row: usize) -> Option<usize> {
        self.rows[row]
    }

    /// Covariance positions `(r, c)` filled by unique entry `param`.
    pub fn support(&self, param: usize) -> &[(usize, usize)] {
        &self.support[param]
    }

    pub fn apply(&self, unique: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|p| p.map_or(0.0, |p| unique[p])),
        )
    }

    /// Full stacked-noise covariance `blkdiag(I ⊗ Q, I ⊗ R)`.
    pub fn covariance(&self, unique: &DVector<f64>) -> DMatrix<f64> {
        let v = self.apply(unique);
        DMatrix::from_column_slice(self.noise_dim, self.noise_dim, v.as_slice())
    }

    /// Right-multiplies a dense matrix whose columns index vec positions.
    pub fn right_apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.ncols(), self.nrows());
        let mut out = DMatrix::zeros(m.nrows(), self.ncols());
        for (row, p) in self.rows.iter().enumerate() {
            if let Some(p) = *p {
                let mut col = out.column_mut(p);
                col += m.column(row);
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), self.ncols());
        for (row, p) in self.rows.iter().enumerate() {
            if let Some(p) = *p {
                out[(row, p)] = 1.0;
            }
        }
        out
    }
}

/// Selection of the lower-triangle entries of a vectorized symmetric
/// `m x m` matrix, column-major (`row >= col`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnificationMatrix {
    dim: usize,
    selected: Vec<usize>,
}

impl UnificationMatrix {
    pub fn new(dim: usize) -> Self {
        let mut selected = Vec::with_capacity(tri(dim));
        for c in 0..dim {
            for r in c..dim {
                selected.push(r + c * dim);
            }
        }
        Self { dim, selected }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Selected vec positions (0-based).
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Lower-triangle `(row, col)` pairs in selection order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.selected.iter().map(move |&s| (s % self.dim, s / self.dim))
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.dim * self.dim);
        DVector::from_iterator(self.selected.len(), self.selected.iter().map(|&s| v[s]))
    }

    /// Symmetric matrix rebuilt from its selected entries.
    pub fn reconstruct(&self, unique: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for ((r, c), &v) in self.pairs().zip(unique.iter()) {
            out[(r, c)] = v;
            out[(c, r)] = v;
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.selected.len(), self.dim * self.dim);
        for (i, &s) in self.selected.iter().enumerate() {
            out[(i, s)] = 1.0;
        }
        out
    }
}
