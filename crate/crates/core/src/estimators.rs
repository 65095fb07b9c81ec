//! Regression of residual second moments on the unique noise covariance
//! entries, and the unweighted, semi-weighted, and weighted batch estimators.
//!
//! For each admissible `k` the residual `r_k = M_k e_k` (with `M_k` the noise
//! map and `e_k` the stacked noise) gives one block
//!
//! ```text
//! y_k = Xi (r_k ⊗ r_k) = Xi (M_k ⊗ M_k) Psi theta + Xi (M_k ⊗ M_k) eta_k
//!       \____________/   \____________________/     \______________/
//!        observation            design                  shaping
//! ```
//!
//! where `theta` holds the unique entries of `Q` and `R`.

use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use crate::error::{MdmError, Result};
use crate::linalg::{self, EnvelopeCholesky, EnvelopeMatrix};
use crate::model::{LtvModel, Trajectory};
use crate::moments;
use crate::stack_ops::{self, StackIndex, StackKernels, WindowSpec};
use crate::vec_maps::{CovLayout, ReplicationMatrix, UnificationMatrix, UniqueCovVector};

/// Identification technique.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    UwNr,
    SwNr,
    WeNr,
    UwRe,
    SwRe,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::UwNr,
        Method::SwNr,
        Method::WeNr,
        Method::UwRe,
        Method::SwRe,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::UwNr => "uw-nr",
            Method::SwNr => "sw-nr",
            Method::WeNr => "we-nr",
            Method::UwRe => "uw-re",
            Method::SwRe => "sw-re",
        }
    }

    pub fn is_recursive(&self) -> bool {
        matches!(self, Method::UwRe | Method::SwRe)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Method {
    type Err = MdmError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.label() == norm)
            .ok_or_else(|| MdmError::Config(format!("unknown method '{s}'")))
    }
}

/// Computes `r_k` from measurements and controls:
/// `A_v [z_{k-N}; ..; z_{k+L-1}] - A_w Gcal [u_{k-N}; ..; u_{k+L-2}]`.
pub fn residual(kernels: &StackKernels, traj: &Trajectory) -> Result<DVector<f64>> {
    let start = kernels.data_start();
    let span = kernels.window.span();
    if traj.measurements.len() < start + span || traj.controls.len() < start + span - 1 {
        return Err(MdmError::InsufficientData(format!(
            "residual at k={} needs z_{}..z_{} and u_{}..u_{}",
            kernels.k,
            start,
            start + span - 1,
            start,
            (start + span).saturating_sub(2)
        )));
    }
    let z = stack_ops::stack_vectors(&traj.measurements, start, span);
    let u = stack_ops::stack_vectors(&traj.controls, start, span - 1);
    if z.len() != kernels.a_v.ncols() || u.len() != kernels.control_map.ncols() {
        return Err(MdmError::Dimension(format!(
            "data at k={} does not match the model dimensions",
            kernels.k
        )));
    }
    Ok(&kernels.a_v * z - &kernels.control_map * u)
}

/// Residual evaluated from the recorded noises, `A C [W; V]`.
pub fn residual_from_noise(kernels: &StackKernels, traj: &Trajectory) -> Result<DVector<f64>> {
    let start = kernels.data_start();
    let span = kernels.window.span();
    if traj.state_noise.len() < start + span - 1 || traj.measurement_noise.len() < start + span {
        return Err(MdmError::InsufficientData(format!(
            "recorded noises do not cover k={}",
            kernels.k
        )));
    }
    let w = stack_ops::stack_vectors(&traj.state_noise, start, span - 1);
    let v = stack_ops::stack_vectors(&traj.measurement_noise, start, span);
    let mut e = DVector::zeros(w.len() + v.len());
    e.rows_mut(0, w.len()).copy_from(&w);
    e.rows_mut(w.len(), v.len()).copy_from(&v);
    Ok(&kernels.noise_map * e)
}

/// Lower-triangle products `r_a r_b`, `a >= b`, in column-major order.
pub fn observation_from_residual(residual: &DVector<f64>) -> DVector<f64> {
    let n = residual.len();
    let mut out = DVector::zeros(n * (n + 1) / 2);
    let mut i = 0;
    for b in 0..n {
        for a in b..n {
            out[i] = residual[a] * residual[b];
            i += 1;
        }
    }
    out
}

/// `Xi (M ⊗ M)`: rows are pairs `a >= b`, columns vec positions `r + c m`.
pub fn shaping_block(noise_map: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = noise_map.shape();
    let xi = UnificationMatrix::new(n);
    let mut out = DMatrix::zeros(n * (n + 1) / 2, m * m);
    for (row, (a, b)) in xi.pairs().enumerate() {
        for c in 0..m {
            let mbc = noise_map[(b, c)];
            if mbc == 0.0 {
                continue;
            }
            for r in 0..m {
                out[(row, r + c * m)] = noise_map[(a, r)] * mbc;
            }
        }
    }
    out
}

/// `Xi (M ⊗ M) Psi`, summed over the support of each unique entry.
pub fn design_block(noise_map: &DMatrix<f64>, psi: &ReplicationMatrix) -> DMatrix<f64> {
    let n = noise_map.nrows();
    let xi = UnificationMatrix::new(n);
    let mut out = DMatrix::zeros(n * (n + 1) / 2, psi.ncols());
    for (row, (a, b)) in xi.pairs().enumerate() {
        for p in 0..psi.ncols() {
            out[(row, p)] = psi
                .support(p)
                .iter()
                .map(|&(r, c)| noise_map[(a, r)] * noise_map[(b, c)])
                .sum();
        }
    }
    out
}

/// Data-independent part of one regression block.
#[derive(Debug, Clone)]
pub struct DesignBlock {
    pub k: usize,
    pub design: DMatrix<f64>,
    pub shaping: DMatrix<f64>,
}

impl DesignBlock {
    pub fn rows(&self) -> usize {
        self.design.nrows()
    }
}

/// Model-dependent part of the regression: kernels, design, and shaping
/// blocks for every admissible `k`. Shared across Monte-Carlo runs of the
/// same model.
#[derive(Debug, Clone)]
pub struct RegressionDesign {
    window: WindowSpec,
    layout: CovLayout,
    psi: ReplicationMatrix,
    kernels: Vec<StackKernels>,
    blocks: Vec<DesignBlock>,
    rows: StackIndex,
    semi: OnceLock<SemiWeights>,
}

/// Model-only quantities of the semi-weighting, per block.
#[derive(Debug, Clone)]
pub struct SemiWeights {
    /// `(L_k L_k^T)^{-1}`, or the pseudoinverse when singular.
    pub inverse: Vec<DMatrix<f64>>,
    /// `T_k` with `T_k^T T_k` equal to `inverse`.
    pub whitener: Vec<DMatrix<f64>>,
    /// `T_k A_k`.
    pub whitened_design: Vec<DMatrix<f64>>,
}

impl RegressionDesign {
    pub fn build(model: &LtvModel, window: WindowSpec) -> Result<Self> {
        let tau = model.horizon();
        let range = window.residual_range(tau);
        if range.is_empty() {
            return Err(MdmError::InsufficientData(format!(
                "horizon {tau} too short for depth {} and {} prediction steps",
                window.depth, window.steps
            )));
        }
        let psi = ReplicationMatrix::new(model.nw(), model.nv(), window.span());
        let mut kernels = Vec::with_capacity(range.clone().count());
        let mut blocks = Vec::with_capacity(kernels.capacity());
        for k in range {
            let ker = stack_ops::build_kernels(model, k, window)?;
            let shaping = shaping_block(&ker.noise_map);
            let design = psi.right_apply(&shaping);
            blocks.push(DesignBlock { k, design, shaping });
            kernels.push(ker);
        }
        Ok(Self::assemble(window, psi, kernels, blocks))
    }

    /// Design from explicit blocks, without kernels. Used to pose synthetic
    /// regression problems.
    pub fn from_blocks(window: WindowSpec, layout: CovLayout, blocks: Vec<DesignBlock>) -> Self {
        let psi = ReplicationMatrix::new(layout.nw(), layout.nv(), window.span());
        Self::assemble(window, psi, Vec::new(), blocks)
    }

    fn assemble(
        window: WindowSpec,
        psi: ReplicationMatrix,
        kernels: Vec<StackKernels>,
        blocks: Vec<DesignBlock>,
    ) -> Self {
        let rows = StackIndex::from_sizes(blocks.iter().map(|b| b.rows()));
        Self {
            window,
            layout: psi.layout(),
            psi,
            kernels,
            blocks,
            rows,
            semi: OnceLock::new(),
        }
    }

    /// Semi-weighting blocks, computed on first use and shared afterwards.
    pub fn semi_weights(&self) -> &SemiWeights {
        self.semi.get_or_init(|| {
            let mut inverse = Vec::with_capacity(self.blocks.len());
            let mut whitener = Vec::with_capacity(self.blocks.len());
            let mut whitened_design = Vec::with_capacity(self.blocks.len());
            for b in &self.blocks {
                let s = &b.shaping * b.shaping.transpose();
                let t = linalg::sym_whitener(&s);
                inverse.push(linalg::sym_inverse_or_pinv(&s).0);
                whitened_design.push(&t * &b.design);
                whitener.push(t);
            }
            SemiWeights {
                inverse,
                whitener,
                whitened_design,
            }
        })
    }

    pub fn window(&self) -> WindowSpec {
        self.window
    }

    pub fn layout(&self) -> CovLayout {
        self.layout
    }

    pub fn replication(&self) -> &ReplicationMatrix {
        &self.psi
    }

    pub fn kernels(&self) -> &[StackKernels] {
        &self.kernels
    }

    pub fn blocks(&self) -> &[DesignBlock] {
        &self.blocks
    }

    /// Row offsets of the blocks in the stacked system.
    pub fn row_index(&self) -> &StackIndex {
        &self.rows
    }

    pub fn total_rows(&self) -> usize {
        self.rows.total()
    }

    /// Observation of block `i` computed from data.
    pub fn observation(&self, i: usize, traj: &Trajectory) -> Result<DVector<f64>> {
        let ker = self.kernels.get(i).ok_or_else(|| {
            MdmError::InsufficientData("design was built without kernels".into())
        })?;
        Ok(observation_from_residual(&residual(ker, traj)?))
    }

    pub fn observations(&self, traj: &Trajectory) -> Result<Vec<DVector<f64>>> {
        (0..self.blocks.len())
            .map(|i| self.observation(i, traj))
            .collect()
    }

    /// Observations equal to their expectation under `theta`.
    pub fn expected_observations(&self, theta: &DVector<f64>) -> Vec<DVector<f64>> {
        self.blocks.iter().map(|b| &b.design * theta).collect()
    }

    /// The stacked design matrix.
    pub fn stacked_design(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.total_rows(), self.layout.len());
        for (i, b) in self.blocks.iter().enumerate() {
            out.view_mut((self.rows.range(i).start, 0), b.design.shape())
                .copy_from(&b.design);
        }
        out
    }
}

/// Stacked regression for one data set.
#[derive(Debug, Clone)]
pub struct RegressionSystem {
    design: Arc<RegressionDesign>,
    observations: Vec<DVector<f64>>,
}

/// Builds kernels and all regression blocks for `k = N..=tau-L+1`.
pub fn build_regression(
    model: &LtvModel,
    traj: &Trajectory,
    window: WindowSpec,
) -> Result<RegressionSystem> {
    let design = Arc::new(RegressionDesign::build(model, window)?);
    RegressionSystem::from_data(design, traj)
}

impl RegressionSystem {
    pub fn from_data(design: Arc<RegressionDesign>, traj: &Trajectory) -> Result<Self> {
        let observations = design.observations(traj)?;
        Ok(Self {
            design,
            observations,
        })
    }

    pub fn new(design: Arc<RegressionDesign>, observations: Vec<DVector<f64>>) -> Result<Self> {
        if observations.len() != design.blocks.len()
            || observations
                .iter()
                .zip(&design.blocks)
                .any(|(y, b)| y.len() != b.rows())
        {
            return Err(MdmError::Dimension(
                "observation blocks do not match the design".into(),
            ));
        }
        Ok(Self {
            design,
            observations,
        })
    }

    pub fn design(&self) -> &RegressionDesign {
        &self.design
    }

    pub fn shared_design(&self) -> Arc<RegressionDesign> {
        Arc::clone(&self.design)
    }

    pub fn observations(&self) -> &[DVector<f64>] {
        &self.observations
    }

    pub fn layout(&self) -> CovLayout {
        self.design.layout
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&DesignBlock, &DVector<f64>)> {
        self.design.blocks.iter().zip(&self.observations)
    }

    pub fn stacked_observations(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.design.total_rows());
        for (i, y) in self.observations.iter().enumerate() {
            out.rows_mut(self.design.rows.range(i).start, y.len())
                .copy_from(y);
        }
        out
    }

    pub fn stacked_design(&self) -> DMatrix<f64> {
        self.design.stacked_design()
    }
}

/// Result of one identification.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub method: Method,
    pub estimate: UniqueCovVector,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Covariance of the estimate as reported by the method itself.
    pub est_cov: DMatrix<f64>,
    pub elapsed: Duration,
}

impl EstimateReport {
    fn new(method: Method, layout: CovLayout, values: DVector<f64>, est_cov: DMatrix<f64>) -> Self {
        let estimate = UniqueCovVector { layout, values };
        let (q, r) = estimate.to_matrices();
        Self {
            method,
            estimate,
            q,
            r,
            est_cov,
            elapsed: Duration::ZERO,
        }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.estimate.values
    }

    pub fn est_cov_diag(&self) -> DVector<f64> {
        self.est_cov.diagonal()
    }

    /// Copy with `Q` and `R` clipped to the PSD cone.
    pub fn projected_psd(&self) -> Self {
        let q = linalg::project_psd(&self.q);
        let r = linalg::project_psd(&self.r);
        let mut out = self.clone();
        out.estimate = UniqueCovVector::from_matrices(&q, &r);
        out.q = q;
        out.r = r;
        out
    }
}

/// Solves `info x = rhs` for the normal equations of a least-squares problem
/// and returns `(x, info^{-1})`.
fn solve_normal_equations(
    what: &'static str,
    mut info: DMatrix<f64>,
    rhs: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    linalg::symmetrize(&mut info);
    let p = info.nrows();
    let eig = info.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.amax();
    let tol = linalg::rank_tolerance(p, p, lmax) * p as f64;
    let rank = eig.eigenvalues.iter().filter(|&&l| l > tol).count();
    if rank < p || lmax == 0.0 {
        return Err(MdmError::NotIdentifiable {
            what,
            rank,
            expected: p,
        });
    }
    let ch = info.cholesky().ok_or(MdmError::NotIdentifiable {
        what,
        rank,
        expected: p,
    })?;
    Ok((ch.solve(rhs), ch.inverse()))
}

/// Unweighted least squares; the reported covariance is `(A^T A)^{-1}`.
pub fn estimate_unweighted(sys: &RegressionSystem) -> Result<EstimateReport> {
    let t0 = Instant::now();
    let a = sys.stacked_design();
    let y = sys.stacked_observations();
    let info = a.tr_mul(&a);
    let rhs = a.tr_mul(&y);
    let (theta, cov) = solve_normal_equations("unweighted regression", info, &rhs)?;
    let mut rep = EstimateReport::new(Method::UwNr, sys.layout(), theta, cov);
    rep.elapsed = t0.elapsed();
    Ok(rep)
}

/// Diagonal blocks `L_k L_k^T` of the semi-weighting matrix.
pub fn build_s2(sys: &RegressionSystem) -> Vec<DMatrix<f64>> {
    sys.design
        .blocks
        .iter()
        .map(|b| b.shaping.clone() * b.shaping.transpose())
        .collect()
}

fn block_weighted(
    method: Method,
    sys: &RegressionSystem,
    inv_weights: &[DMatrix<f64>],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = sys.layout().len();
    let mut info = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for ((block, y), w) in sys.blocks().zip(inv_weights) {
        let aw = block.design.tr_mul(w);
        info += &aw * &block.design;
        rhs += &aw * y;
    }
    solve_normal_equations(method.label(), info, &rhs)
}

/// Semi-weighted least squares with the block-diagonal weight `L L^T`.
pub fn estimate_semiweighted(sys: &RegressionSystem) -> Result<EstimateReport> {
    let t0 = Instant::now();
    let inv = &sys.design.semi_weights().inverse;
    let (theta, cov) = block_weighted(Method::SwNr, sys, inv)?;
    let mut rep = EstimateReport::new(Method::SwNr, sys.layout(), theta, cov);
    rep.elapsed = t0.elapsed();
    Ok(rep)
}

/// Stacked covariance of the regression error `L eta` evaluated at `(q, r)`:
/// block `(i, j)` is `L_i E[eta_i eta_j^T] L_j^T`, nonzero for `|i - j| < span`.
/// Only the lower envelope is stored.
pub fn build_p2(sys: &RegressionSystem, q: &DMatrix<f64>, r: &DMatrix<f64>) -> EnvelopeMatrix {
    let design = &sys.design;
    let span = design.window.span();
    let lag_cov: Vec<DMatrix<f64>> = (0..span).map(|d| moments::eta_cov(q, r, span, d)).collect();
    let rows = &design.rows;
    let blocks = &design.blocks;

    let mut first = Vec::with_capacity(rows.total());
    for i in 0..blocks.len() {
        let lo = rows.range(i.saturating_sub(span - 1)).start;
        first.extend(std::iter::repeat(lo).take(blocks[i].rows()));
    }
    let mut env = EnvelopeMatrix::new(first);

    for i in 0..blocks.len() {
        let ri = rows.range(i);
        let li = &blocks[i].shaping;
        for d in 0..span.min(i + 1) {
            let j = i - d;
            let rj = rows.range(j);
            // E[eta_i eta_j^T] = E[eta_j eta_{j+d}^T]^T
            let block = li * lag_cov[d].transpose() * blocks[j].shaping.transpose();
            for a in 0..ri.len() {
                let gi = ri.start + a;
                for b in 0..rj.len() {
                    let gj = rj.start + b;
                    if gj > gi {
                        break;
                    }
                    let v = if d == 0 {
                        0.5 * (block[(a, b)] + block[(b, a)])
                    } else {
                        block[(a, b)]
                    };
                    *env.entry_mut(gi, gj) = v;
                }
            }
        }
    }
    env
}

/// Envelope form of the block-diagonal semi-weighting matrix.
pub fn s2_envelope(sys: &RegressionSystem) -> EnvelopeMatrix {
    let rows = &sys.design.rows;
    let s2 = build_s2(sys);
    let mut first = Vec::with_capacity(rows.total());
    for (i, s) in s2.iter().enumerate() {
        first.extend(std::iter::repeat(rows.range(i).start).take(s.nrows()));
    }
    let mut env = EnvelopeMatrix::new(first);
    for (i, s) in s2.iter().enumerate() {
        let off = rows.range(i).start;
        for a in 0..s.nrows() {
            for b in 0..=a {
                *env.entry_mut(off + a, off + b) = s[(a, b)];
            }
        }
    }
    env
}

/// Relative jitter steps tried when the weighting matrix is not numerically
/// positive definite: `1e-10, 1e-9, ..., 1e0` times the mean diagonal.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1.0;

/// Cholesky factor of the weighting matrix, adding diagonal jitter when needed.
pub fn factor_weighting(p2: &EnvelopeMatrix) -> Result<(EnvelopeCholesky, f64)> {
    if let Some(ch) = p2.cholesky() {
        return Ok((ch, 0.0));
    }
    let scale = p2.mean_diag();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(MdmError::SingularWeighting(format!(
            "mean diagonal is {scale}"
        )));
    }
    let mut delta = JITTER_START;
    while delta <= JITTER_MAX {
        let mut m = p2.clone();
        m.add_to_diag(delta * scale);
        if let Some(ch) = m.cholesky() {
            return Ok((ch, delta));
        }
        delta *= 10.0;
    }
    Err(MdmError::SingularWeighting(format!(
        "not positive definite after jitter {JITTER_MAX:e}"
    )))
}

/// Generalized least squares with the given weighting (covariance) matrix.
pub fn estimate_weighted_with(
    sys: &RegressionSystem,
    weighting: &EnvelopeMatrix,
) -> Result<EstimateReport> {
    let t0 = Instant::now();
    if weighting.dim() != sys.design.total_rows() {
        return Err(MdmError::Dimension(format!(
            "weighting matrix has {} rows, regression has {}",
            weighting.dim(),
            sys.design.total_rows()
        )));
    }
    let (ch, _) = factor_weighting(weighting)?;
    let a = sys.stacked_design();
    let y = sys.stacked_observations();
    let pa = ch.solve(&a);
    let py = ch.solve_vector(&y);
    let info = a.tr_mul(&pa);
    let rhs = a.tr_mul(&py);
    let (theta, cov) = solve_normal_equations("weighted regression", info, &rhs)?;
    let mut rep = EstimateReport::new(Method::WeNr, sys.layout(), theta, cov);
    rep.elapsed = t0.elapsed();
    Ok(rep)
}

/// Weighted estimate with the weighting evaluated at a previous estimate.
pub fn estimate_weighted(sys: &RegressionSystem, seed: &EstimateReport) -> Result<EstimateReport> {
    let t0 = Instant::now();
    let p2 = build_p2(sys, &seed.q, &seed.r);
    let mut rep = estimate_weighted_with(sys, &p2)?;
    rep.elapsed = t0.elapsed();
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate, InitialState, NoiseSpec, StepMatrices};
    use crate::vec_maps;
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn const_model(tau: usize) -> LtvModel {
        LtvModel::from_rule(tau, 1, 1, 1, |_| StepMatrices {
            f: scalar(0.8),
            g: scalar(1.0),
            e: scalar(1.0),
            h: scalar(1.0),
            d: scalar(1.0),
        })
        .unwrap()
    }

    fn varying_model(tau: usize) -> LtvModel {
        LtvModel::from_rule(tau, 1, 1, 1, |k| StepMatrices {
            f: scalar(0.8),
            g: scalar(1.0),
            e: scalar(1.0),
            h: scalar(1.0 + 0.5 * (k as f64).sin()),
            d: scalar(1.0),
        })
        .unwrap()
    }

    fn simulate_on(m: LtvModel, q: f64, r: f64, seed: u64) -> (LtvModel, Trajectory) {
        let tau = m.horizon();
        let noise = NoiseSpec::new(scalar(q), scalar(r)).unwrap();
        let x0 = InitialState {
            mean: DVector::from_element(1, 1.0),
            cov: scalar(1.0),
        };
        let controls: Vec<_> = (0..tau)
            .map(|k| DVector::from_element(1, (k as f64 / tau as f64).sin()))
            .collect();
        let t = simulate(&m, &noise, &x0, &controls, seed).unwrap();
        (m, t)
    }

    fn simulate_const(tau: usize, q: f64, r: f64, seed: u64) -> (LtvModel, Trajectory) {
        simulate_on(const_model(tau), q, r, seed)
    }

    fn synthetic(blocks: Vec<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)>) -> RegressionSystem {
        let layout = CovLayout::new(1, 1);
        let w = WindowSpec::new(1, 1).unwrap();
        let (db, ys): (Vec<_>, Vec<_>) = blocks
            .into_iter()
            .enumerate()
            .map(|(k, (design, shaping, y))| (DesignBlock { k, design, shaping }, y))
            .unzip();
        let design = Arc::new(RegressionDesign::from_blocks(w, layout, db));
        RegressionSystem::new(design, ys).unwrap()
    }

    #[test]
    fn method_labels_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.label().parse::<Method>().unwrap(), m);
        }
        assert_eq!("SW_NR".parse::<Method>().unwrap(), Method::SwNr);
        assert!("xx".parse::<Method>().is_err());
    }

    #[test]
    fn residual_scalar_hand_expansion() {
        let (m, t) = simulate_const(50, 2.0, 1.0, 5);
        let w = WindowSpec::new(1, 1).unwrap();
        for k in 1..=50 {
            let ker = stack_ops::build_kernels(&m, k, w).unwrap();
            let r = residual(&ker, &t).unwrap();
            let expect = t.measurements[k][0] - 0.8 * t.measurements[k - 1][0] - t.controls[k - 1][0];
            assert_relative_eq!(r[0], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn residual_vanishes_without_noise() {
        let (m, t) = simulate_const(40, 0.0, 0.0, 1);
        for w in [WindowSpec::new(1, 1).unwrap(), WindowSpec::new(2, 0).unwrap(), WindowSpec::new(2, 2).unwrap()] {
            for k in w.residual_range(40) {
                let ker = stack_ops::build_kernels(&m, k, w).unwrap();
                assert!(residual(&ker, &t).unwrap().amax() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_requires_data() {
        let (m, t) = simulate_const(10, 1.0, 1.0, 1);
        let ker = stack_ops::build_kernels(&m, 10, WindowSpec::new(1, 1).unwrap()).unwrap();
        let mut short = t.clone();
        short.measurements.truncate(5);
        assert!(matches!(residual(&ker, &short), Err(MdmError::InsufficientData(_))));
    }

    #[test]
    fn design_and_shaping_match_dense_kronecker() {
        let m = LtvModel::from_rule(10, 1, 1, 2, |k| StepMatrices {
            f: scalar(1.0 + 0.1 * k as f64),
            g: scalar(1.0),
            e: scalar(-1.0),
            h: if k < 5 { scalar(1.0) } else { DMatrix::from_column_slice(2, 1, &[1.0, 1.0]) },
            d: if k < 5 { DMatrix::from_row_slice(1, 2, &[0.0, 1.0]) } else { DMatrix::identity(2, 2) },
        })
        .unwrap();
        let w = WindowSpec::new(2, 1).unwrap();
        let psi = ReplicationMatrix::new(1, 2, 3);
        for k in w.residual_range(10) {
            let ker = stack_ops::build_kernels(&m, k, w).unwrap();
            let n = ker.residual_dim();
            let xi = UnificationMatrix::new(n).to_dense();
            let dense_shaping = &xi * vec_maps::kron_power(&ker.a, 2) * vec_maps::kron_power(&ker.c, 2);
            let sh = shaping_block(&ker.noise_map);
            assert_relative_eq!(sh, dense_shaping, epsilon = 1e-12);
            let dense_design = &dense_shaping * psi.to_dense();
            assert_relative_eq!(design_block(&ker.noise_map, &psi), dense_design, epsilon = 1e-12);
            assert_relative_eq!(psi.right_apply(&sh), dense_design, epsilon = 1e-12);
        }
    }

    #[test]
    fn scalar_design_rows() {
        let m = const_model(20);
        let design = RegressionDesign::build(&m, WindowSpec::new(1, 1).unwrap()).unwrap();
        for b in design.blocks() {
            assert_eq!(b.rows(), 1);
            assert_relative_eq!(b.design[(0, 0)], 1.0, epsilon = 1e-14);
            assert_relative_eq!(b.design[(0, 1)], 0.64 + 1.0, epsilon = 1e-14);
        }
        assert_eq!(design.total_rows(), 20);
    }

    #[test]
    fn constant_scalar_model_is_not_identifiable() {
        let m = const_model(30);
        let design = Arc::new(RegressionDesign::build(&m, WindowSpec::new(1, 1).unwrap()).unwrap());
        let y = design.expected_observations(&DVector::from_vec(vec![2.0, 1.0]));
        let sys = RegressionSystem::new(design, y).unwrap();
        assert!(matches!(estimate_unweighted(&sys), Err(MdmError::NotIdentifiable { rank: 1, .. })));
    }

    #[test]
    fn unweighted_toy_is_mean() {
        let sys = synthetic(vec![
            (DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), scalar(1.0).resize(1, 9, 0.0), DVector::from_element(1, 2.0)),
            (DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), scalar(1.0).resize(1, 9, 0.0), DVector::from_element(1, 4.0)),
            (DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), scalar(1.0).resize(1, 9, 0.0), DVector::from_element(1, 1.0)),
        ]);
        let rep = estimate_unweighted(&sys).unwrap();
        assert_relative_eq!(rep.values()[0], 3.0, epsilon = 1e-14);
        assert_relative_eq!(rep.values()[1], 1.0, epsilon = 1e-14);
        assert_relative_eq!(rep.est_cov[(0, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn unidentifiable_design_is_rejected() {
        let sys = synthetic(vec![
            (DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), scalar(1.0).resize(1, 9, 0.0), DVector::from_element(1, 2.0)),
            (DMatrix::from_row_slice(1, 2, &[2.0, 0.0]), scalar(1.0).resize(1, 9, 0.0), DVector::from_element(1, 4.0)),
        ]);
        assert!(matches!(estimate_unweighted(&sys), Err(MdmError::NotIdentifiable { rank: 1, .. })));
        assert!(matches!(estimate_semiweighted(&sys), Err(MdmError::NotIdentifiable { .. })));
    }

    #[test]
    fn orthonormal_shaping_makes_semiweighted_unweighted() {
        let e = |i: usize| {
            let mut s = DMatrix::zeros(1, 9);
            s[(0, i)] = 1.0;
            s
        };
        let sys = synthetic(vec![
            (DMatrix::from_row_slice(1, 2, &[1.0, 0.5]), e(0), DVector::from_element(1, 2.5)),
            (DMatrix::from_row_slice(1, 2, &[0.2, 1.0]), e(4), DVector::from_element(1, 1.1)),
            (DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), e(8), DVector::from_element(1, 2.9)),
        ]);
        let uw = estimate_unweighted(&sys).unwrap();
        let sw = estimate_semiweighted(&sys).unwrap();
        assert_relative_eq!(uw.values(), sw.values(), epsilon = 1e-13);
    }

    #[test]
    fn exact_moments_recovered() {
        let m = varying_model(60);
        let design = Arc::new(RegressionDesign::build(&m, WindowSpec::new(1, 1).unwrap()).unwrap());
        let truth = DVector::from_vec(vec![2.0, 1.0]);
        let sys = RegressionSystem::new(design.clone(), design.expected_observations(&truth)).unwrap();
        let uw = estimate_unweighted(&sys).unwrap();
        let sw = estimate_semiweighted(&sys).unwrap();
        let we = estimate_weighted(&sys, &uw).unwrap();
        for rep in [uw, sw, we] {
            assert!((rep.values() - &truth).amax() < 1e-10, "{}", rep.method);
        }
    }

    #[test]
    fn weighted_with_s2_equals_semiweighted() {
        let (m, t) = simulate_on(varying_model(200), 2.0, 1.0, 9);
        let sys = build_regression(&m, &t, WindowSpec::new(1, 1).unwrap()).unwrap();
        let sw = estimate_semiweighted(&sys).unwrap();
        let we = estimate_weighted_with(&sys, &s2_envelope(&sys)).unwrap();
        assert_relative_eq!(sw.values(), we.values(), epsilon = 1e-10, max_relative = 1e-10);
    }

    #[test]
    fn p2_is_banded_and_zero_for_zero_seed() {
        let m = LtvModel::from_rule(30, 1, 1, 1, |_| StepMatrices {
            f: scalar(0.8),
            g: scalar(1.0),
            e: scalar(1.0),
            h: scalar(1.0),
            d: scalar(1.0),
        })
        .unwrap();
        let w = WindowSpec::new(2, 1).unwrap();
        let design = Arc::new(RegressionDesign::build(&m, w).unwrap());
        let sys = RegressionSystem::new(design.clone(), design.expected_observations(&DVector::from_vec(vec![2.0, 1.0]))).unwrap();
        let p2 = build_p2(&sys, &scalar(2.0), &scalar(1.0));
        let dense = p2.to_dense();
        let rows = design.row_index();
        for i in 0..design.blocks().len() {
            for j in 0..design.blocks().len() {
                let blk = dense.view((rows.range(i).start, rows.range(j).start), (rows.range(i).len(), rows.range(j).len()));
                if i.abs_diff(j) >= w.span() {
                    assert!(blk.iter().all(|&x| x == 0.0));
                }
            }
        }
        let zero = build_p2(&sys, &scalar(0.0), &scalar(0.0));
        assert!(zero.to_dense().iter().all(|&x| x == 0.0));
        assert!(matches!(factor_weighting(&zero), Err(MdmError::SingularWeighting(_))));
    }

    #[test]
    fn p2_matches_dense_construction() {
        let m = LtvModel::from_rule(12, 1, 1, 2, |k| StepMatrices {
            f: scalar(0.9),
            g: scalar(1.0),
            e: scalar(-1.0),
            h: if k % 3 == 0 { DMatrix::from_column_slice(2, 1, &[1.0, 1.0]) } else { scalar(1.0) },
            d: if k % 3 == 0 { DMatrix::identity(2, 2) } else { DMatrix::from_row_slice(1, 2, &[1.0, 0.0]) },
        })
        .unwrap();
        let w = WindowSpec::new(2, 1).unwrap();
        let design = Arc::new(RegressionDesign::build(&m, w).unwrap());
        let theta = DVector::from_vec(vec![3.0, 2.0, -1.0, 1.0]);
        let sys = RegressionSystem::new(design.clone(), design.expected_observations(&theta)).unwrap();
        let q = scalar(3.0);
        let r = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 1.0]);
        let p2 = build_p2(&sys, &q, &r).to_dense();

        // Dense oracle: L (block Toeplitz of eta covariances) L^T.
        let blocks = design.blocks();
        let m2 = blocks[0].shaping.ncols();
        let nb = blocks.len();
        let mut inner = DMatrix::zeros(nb * m2, nb * m2);
        for i in 0..nb {
            for j in 0..nb {
                let c = if j >= i {
                    moments::eta_cov(&q, &r, 3, j - i)
                } else {
                    moments::eta_cov(&q, &r, 3, i - j).transpose()
                };
                inner.view_mut((i * m2, j * m2), (m2, m2)).copy_from(&c);
            }
        }
        let shapes: Vec<_> = blocks.iter().map(|b| &b.shaping).collect();
        let l = linalg::block_diag(&shapes);
        let dense = &l * inner * l.transpose();
        assert_relative_eq!(p2, dense, epsilon = 1e-9, max_relative = 1e-12);
    }

    fn random_trajectory(seed: u64, tau: usize, noisy: bool) -> (LtvModel, Trajectory) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |r: usize, c: usize, s: f64| {
            DMatrix::from_fn(r, c, |_, _| s * rng.random_range(-1.0..1.0))
        };
        let steps: Vec<StepMatrices> = (0..=tau)
            .map(|k| StepMatrices {
                f: mat(2, 2, 0.6),
                g: mat(2, 1, 1.0),
                e: mat(2, 2, 1.0),
                h: mat(1 + k % 2, 2, 1.0),
                d: mat(1 + k % 2, 2, 1.0),
            })
            .collect();
        let m = LtvModel::from_rule(tau, 2, 2, 2, |k| steps[k].clone()).unwrap();
        let scale = if noisy { 1.0 } else { 0.0 };
        let (a, b) = (mat(2, 2, scale), mat(2, 2, scale));
        let noise = NoiseSpec::new(&a * a.transpose(), &b * b.transpose()).unwrap();
        let controls: Vec<_> = (0..tau).map(|_| mat(1, 1, 1.0).column(0).into_owned()).collect();
        let x0 = InitialState {
            mean: DVector::from_element(2, 1.0),
            cov: DMatrix::identity(2, 2) * scale,
        };
        let t = simulate(&m, &noise, &x0, &controls, seed).unwrap();
        (m, t)
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(24))]
        #[test]
        fn residual_identity_on_random_models(seed in proptest::prelude::any::<u64>(), wi in 0usize..3) {
            let tau = 14;
            let window = [(2, 0), (2, 1), (3, 2)][wi];
            let window = WindowSpec::new(window.0, window.1).unwrap();
            let (m, t) = random_trajectory(seed, tau, true);
            let layout = CovLayout::new(2, 2);
            for k in window.residual_range(tau) {
                let ker = stack_ops::build_kernels(&m, k, window).unwrap();
                let from_data = residual(&ker, &t).unwrap();
                let from_noise = residual_from_noise(&ker, &t).unwrap();
                let scale = from_noise.amax().max(1.0);
                proptest::prop_assert!((&from_data - &from_noise).amax() < 1e-8 * scale);
                let rows = from_data.len() * (from_data.len() + 1) / 2;
                let psi = vec_maps::ReplicationMatrix::new(2, 2, window.span());
                let design = design_block(&ker.noise_map, &psi);
                proptest::prop_assert_eq!(design.nrows(), rows);
                proptest::prop_assert_eq!(design.ncols(), layout.len());
                proptest::prop_assert_eq!(shaping_block(&ker.noise_map).nrows(), rows);
                proptest::prop_assert_eq!(observation_from_residual(&from_data).len(), rows);
            }
        }

        #[test]
        fn noise_free_residuals_vanish(seed in proptest::prelude::any::<u64>(), wi in 0usize..3) {
            let tau = 14;
            let window = [(2, 0), (2, 1), (3, 2)][wi];
            let window = WindowSpec::new(window.0, window.1).unwrap();
            let (m, t) = random_trajectory(seed, tau, false);
            for k in window.residual_range(tau) {
                let ker = stack_ops::build_kernels(&m, k, window).unwrap();
                let r = residual(&ker, &t).unwrap();
                let scale = t.measurements.iter().map(|z| z.amax()).fold(1.0, f64::max);
                proptest::prop_assert!(r.amax() < 1e-9 * scale);
            }
        }
    }
}
