//! Second-order statistics of the quadratic noise process
//! `eta_k = E_k ⊗ E_k - vec(cov(E_k))` for Gaussian noise, where `E_k` is the
//! stacked noise `[W; V]` of the residual at `k`.
//!
//! Stacked noises of nearby residuals share samples, so `eta_k` is correlated
//! with `eta_{k+j}` for lags `j < span` and uncorrelated beyond.

use nalgebra::DMatrix;

use crate::error::{MdmError, Result};
use crate::linalg;

/// Joint covariance of the stacked noises `E_k` and `E_{k+lag}`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointNoiseCov {
    /// `cov(E_k) = blkdiag(I ⊗ Q, I ⊗ R)`, identical for every `k`.
    pub own: DMatrix<f64>,
    /// `E[E_k E_{k+lag}^T]`.
    pub cross: DMatrix<f64>,
}

impl JointNoiseCov {
    pub fn noise_dim(&self) -> usize {
        self.own.nrows()
    }

    /// Covariance of `[E_k; E_{k+lag}]`.
    pub fn joint(&self) -> DMatrix<f64> {
        let m = self.noise_dim();
        let mut out = DMatrix::zeros(2 * m, 2 * m);
        out.view_mut((0, 0), (m, m)).copy_from(&self.own);
        out.view_mut((m, m), (m, m)).copy_from(&self.own);
        out.view_mut((0, m), (m, m)).copy_from(&self.cross);
        out.view_mut((m, 0), (m, m)).copy_from(&self.cross.transpose());
        out
    }
}

pub fn joint_noise_cov(q: &DMatrix<f64>, r: &DMatrix<f64>, span: usize, lag: usize) -> JointNoiseCov {
    assert!(span >= 1);
    let (nw, nv) = (q.nrows(), r.nrows());
    let n_wstack = (span - 1) * nw;
    let m = n_wstack + span * nv;
    let qs: Vec<_> = vec![q; span - 1];
    let rs: Vec<_> = vec![r; span];
    let own = linalg::block_diag(&[qs, rs].concat());

    // Sample a of E_k is sample a - lag of E_{k+lag}.
    let mut cross = DMatrix::zeros(m, m);
    for a in lag..span.saturating_sub(1) {
        let b = a - lag;
        cross
            .view_mut((a * nw, b * nw), (nw, nw))
            .copy_from(q);
    }
    for a in lag..span {
        let b = a - lag;
        cross
            .view_mut((n_wstack + a * nv, n_wstack + b * nv), (nv, nv))
            .copy_from(r);
    }
    JointNoiseCov { own, cross }
}

/// `E[(x ⊗ x)(y ⊗ y)^T]` for jointly Gaussian zero-mean `x` (first `nx`
/// entries of `joint`) and `y` (the remaining `ny`), by Isserlis' theorem.
///
/// Rows index `x_a x_b` at `a + b * nx`, columns `y_c y_d` at `c + d * ny`,
/// matching column-major `vec`.
pub fn gaussian_quartic(joint: &DMatrix<f64>, nx: usize, ny: usize) -> Result<DMatrix<f64>> {
    if joint.shape() != (nx + ny, nx + ny) {
        return Err(MdmError::Dimension(format!(
            "joint covariance is {}x{}, expected {}",
            joint.nrows(),
            joint.ncols(),
            nx + ny
        )));
    }
    let sxx = joint.view((0, 0), (nx, nx));
    let syy = joint.view((nx, nx), (ny, ny));
    let sxy = joint.view((0, nx), (nx, ny));
    let mut out = DMatrix::zeros(nx * nx, ny * ny);
    for d in 0..ny {
        for c in 0..ny {
            let col = c + d * ny;
            for b in 0..nx {
                for a in 0..nx {
                    out[(a + b * nx, col)] = sxx[(a, b)] * syy[(c, d)]
                        + sxy[(a, c)] * sxy[(b, d)]
                        + sxy[(a, d)] * sxy[(b, c)];
                }
            }
        }
    }
    Ok(out)
}

/// `E[eta_k eta_{k+lag}^T]` in matrix form (`m^2 x m^2`, `m` the stacked
/// noise length). The lag-zero value is the covariance of `eta_k`; lags of
/// `span` or more give the zero matrix.
pub fn eta_cov(q: &DMatrix<f64>, r: &DMatrix<f64>, span: usize, lag: usize) -> DMatrix<f64> {
    let jc = joint_noise_cov(q, r, span, lag);
    let m = jc.noise_dim();
    if lag >= span {
        return DMatrix::zeros(m * m, m * m);
    }
    let fourth = gaussian_quartic(&jc.joint(), m, m).expect("joint covariance is square");
    let own = DMatrix::from_column_slice(m * m, 1, jc.own.as_slice());
    fourth - &own * own.transpose()
}
