//! Stacked operators over a window of consecutive time steps.
//!
//! For a window of `depth` measurements starting at `k` the augmented
//! measurement is
//!
//! ```text
//! Z_k = O_k x_k + Gamma_k Gcal_k U_k + Gamma_k Ecal_k W_k + Dcal_k V_k
//! ```
//!
//! and the residual of the measurement difference method removes the state by
//! predicting `Z_k` from the window `steps` samples earlier. Blocks that vanish
//! for `depth == 1` or `steps == 0` are represented by zero-width matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{MdmError, Result};
use crate::linalg;
use crate::model::LtvModel;

/// Window shape: `depth` stacked measurements (at least 1) predicted from the
/// window `steps` samples earlier (`steps >= 0`). The residual at `k` spans
/// `span = depth + steps` measurements `z_{k-steps}..z_{k+depth-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowSpec {
    pub depth: usize,
    pub steps: usize,
}

impl WindowSpec {
    pub fn new(depth: usize, steps: usize) -> Result<Self> {
        if depth == 0 {
            return Err(MdmError::Config("window depth must be at least 1".into()));
        }
        Ok(Self { depth, steps })
    }

    pub fn span(&self) -> usize {
        self.depth + self.steps
    }

    /// Residual time indices `steps..=tau-depth+1` admissible for horizon `tau`.
    pub fn residual_range(&self, tau: usize) -> std::ops::RangeInclusive<usize> {
        if tau + 1 < self.depth + self.steps {
            #[allow(clippy::reversed_empty_ranges)]
            return 1..=0;
        }
        self.steps..=tau + 1 - self.depth
    }
}

fn check_window(model: &LtvModel, start: isize, len: usize) -> Result<()> {
    let end = start + len as isize - 1;
    if start < 0 || end > model.horizon() as isize {
        return Err(MdmError::HorizonOverrun {
            start,
            end,
            horizon: model.horizon(),
        });
    }
    Ok(())
}

/// Prefix-sum offsets of per-step sizes inside a stacked vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackIndex {
    offsets: Vec<usize>,
}

impl StackIndex {
    pub fn from_sizes(sizes: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for s in sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        Self { offsets }
    }

    /// Measurement offsets of `z_start..z_{start+len-1}`.
    pub fn measurements(model: &LtvModel, start: usize, len: usize) -> Self {
        Self::from_sizes((start..start + len).map(|k| model.nz(k)))
    }

    /// Control offsets of `u_start..u_{start+len-1}`.
    pub fn controls(model: &LtvModel, start: usize, len: usize) -> Self {
        Self::from_sizes((start..start + len).map(|k| model.nu(k)))
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn blocks(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

/// `F_{k+j-1} ... F_{k+1} F_k`, the identity for `j == 0`.
pub fn transition_product(model: &LtvModel, k: usize, j: usize) -> Result<DMatrix<f64>> {
    let nx = model.nx();
    if j > 0 && k + j > model.horizon() {
        return Err(MdmError::HorizonOverrun {
            start: k as isize,
            end: (k + j) as isize,
            horizon: model.horizon(),
        });
    }
    let mut out = DMatrix::identity(nx, nx);
    for i in k..k + j {
        out = model.f(i) * out;
    }
    Ok(out)
}

/// Observability stack over `z_k..z_{k+depth-1}`; block `i` is `H_{k+i} F^i_k`.
pub fn observability_stack(model: &LtvModel, k: usize, depth: usize) -> Result<DMatrix<f64>> {
    check_window(model, k as isize, depth)?;
    let idx = StackIndex::measurements(model, k, depth);
    let nx = model.nx();
    let mut out = DMatrix::zeros(idx.total(), nx);
    let mut trans = DMatrix::identity(nx, nx);
    for i in 0..depth {
        let r = idx.range(i);
        out.view_mut((r.start, 0), (r.len(), nx))
            .copy_from(&(model.h(k + i) * &trans));
        if i + 1 < depth {
            trans = model.f(k + i) * trans;
        }
    }
    Ok(out)
}

/// Strictly block-lower-triangular response of the stacked measurements to
/// the per-step state inputs, `n_z x (depth-1) n_x`.
pub fn input_response(model: &LtvModel, k: usize, depth: usize) -> Result<DMatrix<f64>> {
    check_window(model, k as isize, depth)?;
    let idx = StackIndex::measurements(model, k, depth);
    let nx = model.nx();
    let mut out = DMatrix::zeros(idx.total(), (depth - 1) * nx);
    for j in 0..depth.saturating_sub(1) {
        // Input injected at step k+j first reaches z_{k+j+1}.
        let mut trans = DMatrix::identity(nx, nx);
        for i in j + 1..depth {
            let r = idx.range(i);
            out.view_mut((r.start, j * nx), (r.len(), nx))
                .copy_from(&(model.h(k + i) * &trans));
            if i + 1 < depth {
                trans = model.f(k + i) * trans;
            }
        }
    }
    Ok(out)
}

/// `blkdiag(G_k, ..., G_{k+depth-2})`.
pub fn control_stack(model: &LtvModel, k: usize, depth: usize) -> Result<DMatrix<f64>> {
    check_window(model, k as isize, depth)?;
    let blocks: Vec<_> = (k..k + depth - 1).map(|i| model.g(i)).collect();
    Ok(linalg::block_diag(&blocks).resize(
        (depth - 1) * model.nx(),
        blocks.iter().map(|b| b.ncols()).sum(),
        0.0,
    ))
}

/// `blkdiag(E_k, ..., E_{k+depth-2})`.
pub fn state_noise_stack(model: &LtvModel, k: usize, depth: usize) -> Result<DMatrix<f64>> {
    check_window(model, k as isize, depth)?;
    let blocks: Vec<_> = (k..k + depth - 1).map(|i| model.e(i)).collect();
    Ok(linalg::block_diag(&blocks).resize(
        (depth - 1) * model.nx(),
        (depth - 1) * model.nw(),
        0.0,
    ))
}

/// `blkdiag(D_k, ..., D_{k+depth-1})`, with `depth * n_v` columns.
pub fn measurement_noise_stack(model: &LtvModel, k: usize, depth: usize) -> Result<DMatrix<f64>> {
    check_window(model, k as isize, depth)?;
    let blocks: Vec<_> = (k..k + depth).map(|i| model.d(i)).collect();
    Ok(linalg::block_diag(&blocks))
}

/// `[F^{steps-1}_{k-steps+1}, ..., F^1_{k-1}, I]`, `n_x x steps n_x`.
pub fn transition_sequence(model: &LtvModel, k: usize, steps: usize) -> Result<DMatrix<f64>> {
    let nx = model.nx();
    let mut out = DMatrix::zeros(nx, steps * nx);
    for i in 0..steps {
        let start = k + 1 + i - steps;
        let f = transition_product(model, start, steps - 1 - i)?;
        out.view_mut((0, i * nx), (nx, nx)).copy_from(&f);
    }
    Ok(out)
}

/// Predictor of `Z_k` from `Z_{k-steps}`: `O_k F^{steps}_{k-steps} pinv(O_{k-steps})`.
pub fn predictor_gain(model: &LtvModel, k: usize, window: WindowSpec) -> Result<DMatrix<f64>> {
    let WindowSpec { depth, steps } = window;
    if k < steps {
        return Err(MdmError::HorizonOverrun {
            start: k as isize - steps as isize,
            end: (k + depth) as isize - 1,
            horizon: model.horizon(),
        });
    }
    let o_now = observability_stack(model, k, depth)?;
    let o_past = observability_stack(model, k - steps, depth)?;
    let (o_pinv, rank) = linalg::pinv_with_rank(&o_past);
    if rank < model.nx() {
        return Err(MdmError::RankDeficient {
            what: "observability stack",
            k: k - steps,
            rank,
            expected: model.nx(),
        });
    }
    let trans = transition_product(model, k - steps, steps)?;
    Ok(o_now * trans * o_pinv)
}

/// Residual gains `(A_w, A_v)`: the residual equals
/// `A_v Z_{k-steps}^{span} - A_w Gcal U` and `A_w Ecal W + A_v Dcal V`.
pub fn noise_gains(
    model: &LtvModel,
    k: usize,
    window: WindowSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let WindowSpec { depth, steps } = window;
    let nx = model.nx();
    let gamma_now = input_response(model, k, depth)?;
    let rows = gamma_now.nrows();

    if steps == 0 {
        let o = observability_stack(model, k, depth)?;
        let (o_pinv, rank) = linalg::pinv_with_rank(&o);
        if rank < nx {
            return Err(MdmError::RankDeficient {
                what: "observability stack",
                k,
                rank,
                expected: nx,
            });
        }
        let a_v = DMatrix::identity(rows, rows) - &o * o_pinv;
        let a_w = &a_v * gamma_now;
        return Ok((a_w, a_v));
    }

    check_window(model, k as isize - steps as isize, window.span())?;
    let pred = predictor_gain(model, k, window)?;
    let o_now = observability_stack(model, k, depth)?;
    let phi = transition_sequence(model, k, steps)?;
    let gamma_past = input_response(model, k - steps, depth)?;

    let span = window.span();
    let mut a_w = DMatrix::zeros(rows, (span - 1) * nx);
    a_w.view_mut((0, 0), (rows, steps * nx))
        .copy_from(&(o_now * phi));
    a_w.view_mut((0, steps * nx), (rows, (depth - 1) * nx))
        .copy_from(&gamma_now);
    let pg = &pred * gamma_past;
    let mut left = a_w.view_mut((0, 0), (rows, (depth - 1) * nx));
    left -= &pg;

    let idx_past = StackIndex::measurements(model, k - steps, span);
    let lead = idx_past.offsets()[steps];
    let mut a_v = DMatrix::zeros(rows, idx_past.total());
    a_v.view_mut((0, lead), (rows, rows))
        .copy_from(&DMatrix::identity(rows, rows));
    let mut head = a_v.view_mut((0, 0), (rows, pred.ncols()));
    head -= &pred;
    Ok((a_w, a_v))
}

/// All operators needed for the residual at time `k`.
#[derive(Debug, Clone)]
pub struct StackKernels {
    pub k: usize,
    pub window: WindowSpec,
    pub a_w: DMatrix<f64>,
    pub a_v: DMatrix<f64>,
    /// `[A_w, A_v]`
    pub a: DMatrix<f64>,
    /// `blkdiag(Gcal, I)`: maps `[-U; Z]` into the stacked input space.
    pub b: DMatrix<f64>,
    /// `blkdiag(Ecal, Dcal)`: maps `[W; V]` into the stacked input space.
    pub c: DMatrix<f64>,
    /// `A C`: residual as a linear function of the stacked noise.
    pub noise_map: DMatrix<f64>,
    /// `A_w Gcal`: residual response to the stacked controls.
    pub control_map: DMatrix<f64>,
}

impl StackKernels {
    /// Residual dimension `n_{z_k^L}`.
    pub fn residual_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Length of the stacked noise `[W; V]`.
    pub fn noise_dim(&self) -> usize {
        self.c.ncols()
    }

    /// First time index of the data the residual uses.
    pub fn data_start(&self) -> usize {
        self.k - self.window.steps
    }
}

pub fn build_kernels(model: &LtvModel, k: usize, window: WindowSpec) -> Result<StackKernels> {
    let span = window.span();
    if k < window.steps {
        return Err(MdmError::HorizonOverrun {
            start: k as isize - window.steps as isize,
            end: (k + window.depth) as isize - 1,
            horizon: model.horizon(),
        });
    }
    let start = k - window.steps;
    check_window(model, start as isize, span)?;
    let (a_w, a_v) = noise_gains(model, k, window)?;
    let rows = a_w.nrows();
    let mut a = DMatrix::zeros(rows, a_w.ncols() + a_v.ncols());
    a.view_mut((0, 0), a_w.shape()).copy_from(&a_w);
    a.view_mut((0, a_w.ncols()), a_v.shape()).copy_from(&a_v);

    let g_stack = control_stack(model, start, span)?;
    let e_stack = state_noise_stack(model, start, span)?;
    let d_stack = measurement_noise_stack(model, start, span)?;
    let nz_total = d_stack.nrows();
    let eye = DMatrix::identity(nz_total, nz_total);
    let b = linalg::block_diag(&[&g_stack, &eye]);
    let c = linalg::block_diag(&[&e_stack, &d_stack]);
    let noise_map = &a * &c;
    let control_map = &a_w * &g_stack;
    Ok(StackKernels {
        k,
        window,
        a_w,
        a_v,
        a,
        b,
        c,
        noise_map,
        control_map,
    })
}

/// Stacks `vectors[start..start+len]` into one column vector.
pub fn stack_vectors(vectors: &[DVector<f64>], start: usize, len: usize) -> DVector<f64> {
    let total = vectors[start..start + len].iter().map(|v| v.len()).sum();
    let mut out = DVector::zeros(total);
    let mut off = 0;
    for v in &vectors[start..start + len] {
        out.rows_mut(off, v.len()).copy_from(v);
        off += v.len();
    }
    out
}
