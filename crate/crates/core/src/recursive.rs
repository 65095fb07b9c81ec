//! Recursive least squares over the regression blocks, processed in `k`
//! order. With the identity weighting this is the recursive unweighted
//! estimator; with `L_k L_k^T` as the block weighting it is the recursive
//! semi-weighted estimator.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{MdmError, Result};
use crate::estimators::{EstimateReport, Method, RegressionDesign, RegressionSystem};
use crate::linalg;
use crate::vec_maps::{CovLayout, UniqueCovVector};

/// Block weighting used in the gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlsWeighting {
    /// Identity.
    Unweighted,
    /// `L_k L_k^T`.
    SemiWeighted,
}

impl RlsWeighting {
    pub fn method(&self) -> Method {
        match self {
            RlsWeighting::Unweighted => Method::UwRe,
            RlsWeighting::SemiWeighted => Method::SwRe,
        }
    }

    pub fn for_method(method: Method) -> Option<Self> {
        match method {
            Method::UwRe => Some(RlsWeighting::Unweighted),
            Method::SwRe => Some(RlsWeighting::SemiWeighted),
            _ => None,
        }
    }
}

/// How the estimate covariance is propagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RlsForm {
    /// Potter square-root update on whitened scalar rows. Keeps `S` with
    /// `Sigma = S S^T`, which halves the dynamic range and stays accurate
    /// with very large initial covariances.
    #[default]
    SquareRoot,
    /// Block gain `K = Sigma A^T (A Sigma A^T + W)^{-1}` and
    /// `Sigma <- (I - K A) Sigma`, symmetrized.
    Gain,
}

#[derive(Debug, Clone)]
enum Covariance {
    Factor(DMatrix<f64>),
    Full(DMatrix<f64>),
}

#[derive(Debug, Clone)]
pub struct RlsState {
    estimate: DVector<f64>,
    cov: Covariance,
    weighting: RlsWeighting,
    steps: usize,
}

/// Default starting point: `0.5` on variance entries, `0` elsewhere.
pub fn default_initial_estimate(layout: CovLayout) -> DVector<f64> {
    let mut v = DVector::zeros(layout.len());
    for p in layout.diagonal_positions() {
        v[p] = 0.5;
    }
    v
}

/// Default initial covariance `10 I`.
pub fn default_initial_sigma(layout: CovLayout) -> DMatrix<f64> {
    DMatrix::identity(layout.len(), layout.len()) * 10.0
}

/// Starts a recursion; `sigma` must be symmetric positive semi-definite.
pub fn rls_init(
    estimate: DVector<f64>,
    sigma: DMatrix<f64>,
    weighting: RlsWeighting,
) -> Result<RlsState> {
    let p = estimate.len();
    if sigma.shape() != (p, p) {
        return Err(MdmError::Dimension(format!(
            "initial covariance is {}x{}, estimate has {p} entries",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let factor = linalg::psd_factor(&sigma, "initial RLS covariance")?;
    Ok(RlsState {
        estimate,
        cov: Covariance::Factor(factor),
        weighting,
        steps: 0,
    })
}

impl RlsState {
    pub fn with_form(mut self, form: RlsForm) -> Self {
        self.cov = match (form, self.cov) {
            (RlsForm::Gain, Covariance::Factor(s)) => Covariance::Full(&s * s.transpose()),
            (RlsForm::SquareRoot, Covariance::Full(sigma)) => {
                let psd = linalg::project_psd(&sigma);
                Covariance::Factor(
                    linalg::psd_factor(&psd, "RLS covariance").expect("projected matrix is PSD"),
                )
            }
            (_, cov) => cov,
        };
        self
    }

    pub fn estimate(&self) -> &DVector<f64> {
        &self.estimate
    }

    pub fn sigma(&self) -> DMatrix<f64> {
        match &self.cov {
            Covariance::Factor(s) => s * s.transpose(),
            Covariance::Full(sigma) => sigma.clone(),
        }
    }

    pub fn weighting(&self) -> RlsWeighting {
        self.weighting
    }

    /// Number of blocks absorbed.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Absorbs one block `y = A theta + noise`. `shaping` is only used by the
    /// semi-weighted variant.
    pub fn step(&mut self, y: &DVector<f64>, design: &DMatrix<f64>, shaping: &DMatrix<f64>) -> Result<()> {
        let p = self.estimate.len();
        if design.ncols() != p || design.nrows() != y.len() {
            return Err(MdmError::Dimension(format!(
                "RLS block is {}x{} with {} observations, expected {p} columns",
                design.nrows(),
                design.ncols(),
                y.len()
            )));
        }
        if self.weighting == RlsWeighting::SemiWeighted && shaping.nrows() != y.len() {
            return Err(MdmError::Dimension(format!(
                "shaping block has {} rows, expected {}",
                shaping.nrows(),
                y.len()
            )));
        }
        match &mut self.cov {
            Covariance::Factor(s) => {
                match self.weighting {
                    RlsWeighting::Unweighted => potter_rows(&mut self.estimate, s, y, design),
                    RlsWeighting::SemiWeighted => {
                        let t = linalg::sym_whitener(&(shaping * shaping.transpose()));
                        potter_rows(&mut self.estimate, s, &(&t * y), &(&t * design));
                    }
                }
            }
            Covariance::Full(sigma) => {
                let w = match self.weighting {
                    RlsWeighting::Unweighted => DMatrix::identity(y.len(), y.len()),
                    RlsWeighting::SemiWeighted => shaping * shaping.transpose(),
                };
                gain_update(&mut self.estimate, sigma, y, design, &w);
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Absorbs a block whose noise was already whitened to unit covariance,
    /// e.g. `T_k y_k` and `T_k A_k` from [`crate::estimators::SemiWeights`].
    pub fn step_whitened(&mut self, y: &DVector<f64>, design: &DMatrix<f64>) -> Result<()> {
        let p = self.estimate.len();
        if design.ncols() != p || design.nrows() != y.len() {
            return Err(MdmError::Dimension(format!(
                "RLS block is {}x{} with {} observations, expected {p} columns",
                design.nrows(),
                design.ncols(),
                y.len()
            )));
        }
        match &mut self.cov {
            Covariance::Factor(s) => potter_rows(&mut self.estimate, s, y, design),
            Covariance::Full(sigma) => {
                let w = DMatrix::identity(y.len(), y.len());
                gain_update(&mut self.estimate, sigma, y, design, &w);
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Absorbs block `i` of `design` with observation `y`, using the cached
    /// semi-weighting when applicable.
    pub fn step_block(&mut self, design: &RegressionDesign, i: usize, y: &DVector<f64>) -> Result<()> {
        let block = &design.blocks()[i];
        match self.weighting {
            RlsWeighting::Unweighted => self.step_whitened(y, &block.design),
            RlsWeighting::SemiWeighted => {
                let semi = design.semi_weights();
                self.step_whitened(&(&semi.whitener[i] * y), &semi.whitened_design[i])
            }
        }
    }
}

/// Block update with noise covariance `w`; the innovation covariance is
/// inverted by Cholesky, or pseudo-inverted when singular.
fn gain_update(
    estimate: &mut DVector<f64>,
    sigma: &mut DMatrix<f64>,
    y: &DVector<f64>,
    design: &DMatrix<f64>,
    w: &DMatrix<f64>,
) {
    let p = estimate.len();
    let sat = &*sigma * design.transpose();
    let mut innov_cov = design * &sat + w;
    linalg::symmetrize(&mut innov_cov);
    let (inv, _) = linalg::sym_inverse_or_pinv(&innov_cov);
    let gain = &sat * inv;
    *estimate += &gain * (y - design * &*estimate);
    *sigma = (DMatrix::identity(p, p) - &gain * design) * &*sigma;
    linalg::symmetrize(sigma);
}

/// Absorbs rows `y_i = a_i^T theta + v_i` with unit-variance `v_i` one at a
/// time, updating the covariance factor `s`.
fn potter_rows(estimate: &mut DVector<f64>, s: &mut DMatrix<f64>, y: &DVector<f64>, design: &DMatrix<f64>) {
    let p = estimate.len();
    let mut phi = vec![0.0; p];
    let mut sphi = vec![0.0; p];
    let theta = estimate.as_mut_slice();
    let s = s.as_mut_slice();
    for i in 0..y.len() {
        // Column-major: column j of S is s[j*p..(j+1)*p].
        let mut norm = 1.0;
        for (j, phi_j) in phi.iter_mut().enumerate() {
            let col = &s[j * p..(j + 1) * p];
            *phi_j = (0..p).map(|r| col[r] * design[(i, r)]).sum();
            norm += *phi_j * *phi_j;
        }
        let alpha = 1.0 / norm;
        sphi.fill(0.0);
        for (j, &phi_j) in phi.iter().enumerate() {
            for (acc, &v) in sphi.iter_mut().zip(&s[j * p..(j + 1) * p]) {
                *acc += v * phi_j;
            }
        }
        let predicted: f64 = (0..p).map(|r| design[(i, r)] * theta[r]).sum();
        let step = alpha * (y[i] - predicted);
        for (t, &v) in theta.iter_mut().zip(&sphi) {
            *t += step * v;
        }
        let c = alpha / (1.0 + alpha.sqrt());
        for (j, &phi_j) in phi.iter().enumerate() {
            for (v, &sp) in s[j * p..(j + 1) * p].iter_mut().zip(&sphi) {
                *v -= c * sp * phi_j;
            }
        }
    }
}

/// Estimate after each block, in processing order.
#[derive(Debug, Clone)]
pub struct RlsRun {
    pub report: EstimateReport,
    pub trace: Vec<(usize, DVector<f64>)>,
}

/// Runs RLS over all blocks of `sys`, recording the trajectory of estimates
/// when `keep_trace` is set.
pub fn rls_run(sys: &RegressionSystem, mut state: RlsState, keep_trace: bool) -> Result<RlsRun> {
    let t0 = Instant::now();
    let layout = sys.layout();
    if state.estimate.len() != layout.len() {
        return Err(MdmError::Dimension(format!(
            "RLS state has {} entries, regression has {}",
            state.estimate.len(),
            layout.len()
        )));
    }
    let mut trace = Vec::new();
    let design = sys.design();
    for (i, y) in sys.observations().iter().enumerate() {
        state.step_block(design, i, y)?;
        if keep_trace {
            trace.push((design.blocks()[i].k, state.estimate.clone()));
        }
    }
    let report = finish(&state, layout, t0);
    Ok(RlsRun { report, trace })
}

/// Report for the current state of a run.
pub fn finish(state: &RlsState, layout: CovLayout, started: Instant) -> EstimateReport {
    let estimate = UniqueCovVector {
        layout,
        values: state.estimate.clone(),
    };
    let (q, r) = estimate.to_matrices();
    EstimateReport {
        method: state.weighting.method(),
        estimate,
        q,
        r,
        est_cov: state.sigma(),
        elapsed: started.elapsed(),
    }
}
