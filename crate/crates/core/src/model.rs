//! Linear time-varying state-space models with per-step measurement and
//! control dimensions.
//!
//! ```text
//! x[k+1] = F[k] x[k] + G[k] u[k] + E[k] w[k]     k = 0..tau-1
//! z[k]   = H[k] x[k] + D[k] v[k]                 k = 0..=tau
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{MdmError, Result};
use crate::linalg;
use crate::stack_ops;

/// System matrices for a single time step, as produced by a model rule.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMatrices {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

/// Time-indexed system matrices over the horizon `0..=tau`.
///
/// `F`, `G`, `E` and the control sizes are stored for `k < tau`; `H`, `D` and
/// the measurement sizes for `k <= tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvModel {
    nx: usize,
    nw: usize,
    nv: usize,
    nz: Vec<usize>,
    nu: Vec<usize>,
    f: Vec<DMatrix<f64>>,
    g: Vec<DMatrix<f64>>,
    e: Vec<DMatrix<f64>>,
    h: Vec<DMatrix<f64>>,
    d: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    /// Matrix shape differs from the declared `(rows, cols)`.
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    NonFinite,
    /// Sequence length differs from what the horizon requires.
    Length { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub k: Option<usize>,
    pub matrix: &'static str,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn at(&self, k: usize) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(move |v| v.k == Some(k))
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            match v.k {
                Some(k) => write!(f, "{} at k={}: ", v.matrix, k)?,
                None => write!(f, "{}: ", v.matrix)?,
            }
            match &v.kind {
                ViolationKind::Shape { expected, found } => write!(
                    f,
                    "expected {}x{}, found {}x{}",
                    expected.0, expected.1, found.0, found.1
                )?,
                ViolationKind::NonFinite => write!(f, "non-finite entry")?,
                ViolationKind::Length { expected, found } => {
                    write!(f, "expected {expected} entries, found {found}")?
                }
            }
        }
        Ok(())
    }
}

impl LtvModel {
    /// Builds a model from explicit per-step arrays and rejects it if
    /// [`LtvModel::validate`] reports any violation.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        nx: usize,
        nw: usize,
        nv: usize,
        nz: Vec<usize>,
        nu: Vec<usize>,
        f: Vec<DMatrix<f64>>,
        g: Vec<DMatrix<f64>>,
        e: Vec<DMatrix<f64>>,
        h: Vec<DMatrix<f64>>,
        d: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let model = Self::new_unchecked(nx, nw, nv, nz, nu, f, g, e, h, d);
        let report = model.validate();
        if report.is_valid() {
            Ok(model)
        } else {
            Err(MdmError::InvalidModel(report.to_string()))
        }
    }

    /// Same as [`LtvModel::new`] without validation.
    #[allow(clippy::too_many_arguments)]
    pub fn new_unchecked(
        nx: usize,
        nw: usize,
        nv: usize,
        nz: Vec<usize>,
        nu: Vec<usize>,
        f: Vec<DMatrix<f64>>,
        g: Vec<DMatrix<f64>>,
        e: Vec<DMatrix<f64>>,
        h: Vec<DMatrix<f64>>,
        d: Vec<DMatrix<f64>>,
    ) -> Self {
        Self {
            nx,
            nw,
            nv,
            nz,
            nu,
            f,
            g,
            e,
            h,
            d,
        }
    }

    /// Evaluates `rule(k)` for `k = 0..=tau`. Dimensions `n_z[k]` and `n_u[k]`
    /// are taken from the rows of `H[k]` and the columns of `G[k]`.
    pub fn from_rule<R>(tau: usize, nx: usize, nw: usize, nv: usize, rule: R) -> Result<Self>
    where
        R: Fn(usize) -> StepMatrices,
    {
        let mut f = Vec::with_capacity(tau);
        let mut g = Vec::with_capacity(tau);
        let mut e = Vec::with_capacity(tau);
        let mut h = Vec::with_capacity(tau + 1);
        let mut d = Vec::with_capacity(tau + 1);
        for k in 0..=tau {
            let step = rule(k);
            h.push(step.h);
            d.push(step.d);
            if k < tau {
                f.push(step.f);
                g.push(step.g);
                e.push(step.e);
            }
        }
        let nz = h.iter().map(|m| m.nrows()).collect();
        let nu = g.iter().map(|m| m.ncols()).collect();
        Self::new(nx, nw, nv, nz, nu, f, g, e, h, d)
    }

    pub fn horizon(&self) -> usize {
        self.nz.len().saturating_sub(1)
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn nw(&self) -> usize {
        self.nw
    }
    pub fn nv(&self) -> usize {
        self.nv
    }
    pub fn nz(&self, k: usize) -> usize {
        self.nz[k]
    }
    pub fn nu(&self, k: usize) -> usize {
        self.nu[k]
    }
    pub fn f(&self, k: usize) -> &DMatrix<f64> {
        &self.f[k]
    }
    pub fn g(&self, k: usize) -> &DMatrix<f64> {
        &self.g[k]
    }
    pub fn e(&self, k: usize) -> &DMatrix<f64> {
        &self.e[k]
    }
    pub fn h(&self, k: usize) -> &DMatrix<f64> {
        &self.h[k]
    }
    pub fn d(&self, k: usize) -> &DMatrix<f64> {
        &self.d[k]
    }

    /// Checks sequence lengths, per-step shapes, and finiteness.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let tau = self.horizon();
        let mut length = |name, expected, found| {
            if expected != found {
                violations.push(Violation {
                    k: None,
                    matrix: name,
                    kind: ViolationKind::Length { expected, found },
                });
            }
        };
        length("n_u", tau, self.nu.len());
        length("F", tau, self.f.len());
        length("G", tau, self.g.len());
        length("E", tau, self.e.len());
        length("H", tau + 1, self.h.len());
        length("D", tau + 1, self.d.len());

        let mut check = |name: &'static str, k: usize, m: &DMatrix<f64>, rows, cols| {
            if m.shape() != (rows, cols) {
                violations.push(Violation {
                    k: Some(k),
                    matrix: name,
                    kind: ViolationKind::Shape {
                        expected: (rows, cols),
                        found: m.shape(),
                    },
                });
            }
            if m.iter().any(|x| !x.is_finite()) {
                violations.push(Violation {
                    k: Some(k),
                    matrix: name,
                    kind: ViolationKind::NonFinite,
                });
            }
        };
        let nx = self.nx;
        for (k, m) in self.f.iter().enumerate() {
            check("F", k, m, nx, nx);
        }
        for (k, m) in self.g.iter().enumerate() {
            check("G", k, m, nx, self.nu.get(k).copied().unwrap_or(m.ncols()));
        }
        for (k, m) in self.e.iter().enumerate() {
            check("E", k, m, nx, self.nw);
        }
        for (k, m) in self.h.iter().enumerate() {
            check("H", k, m, self.nz.get(k).copied().unwrap_or(m.nrows()), nx);
        }
        for (k, m) in self.d.iter().enumerate() {
            check("D", k, m, self.nz.get(k).copied().unwrap_or(m.nrows()), self.nv);
        }
        ValidationReport { violations }
    }

    /// `[H_k; H_{k+1} F_k; ...; H_{k+depth-1} F_{k+depth-2}...F_k]`.
    pub fn observability_stack(&self, k: usize, depth: usize) -> Result<DMatrix<f64>> {
        stack_ops::observability_stack(self, k, depth)
    }

    /// For every `k` with a complete window of `depth` steps, whether the
    /// observability stack has full column rank `n_x`.
    pub fn check_observability(&self, depth: usize) -> Vec<bool> {
        if depth == 0 || depth > self.horizon() + 1 {
            return Vec::new();
        }
        (0..=self.horizon() + 1 - depth)
            .map(|k| {
                self.observability_stack(k, depth)
                    .map(|o| linalg::rank(&o) == self.nx)
                    .unwrap_or(false)
            })
            .collect()
    }

    /// Checks that a control sequence matches the per-step control sizes.
    pub fn check_controls(&self, controls: &[DVector<f64>]) -> Result<()> {
        if controls.len() != self.horizon() {
            return Err(MdmError::Dimension(format!(
                "expected {} control vectors, got {}",
                self.horizon(),
                controls.len()
            )));
        }
        for (k, u) in controls.iter().enumerate() {
            if u.len() != self.nu[k] {
                return Err(MdmError::Dimension(format!(
                    "control u_{k} has length {}, expected {}",
                    u.len(),
                    self.nu[k]
                )));
            }
        }
        Ok(())
    }
}

/// State and measurement noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl NoiseSpec {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if !linalg::is_symmetric(&q, 1e-12) {
            return Err(MdmError::NotSymmetric("Q"));
        }
        if !linalg::is_symmetric(&r, 1e-12) {
            return Err(MdmError::NotSymmetric("R"));
        }
        Ok(Self { q, r })
    }

    pub fn nw(&self) -> usize {
        self.q.nrows()
    }

    pub fn nv(&self) -> usize {
        self.r.nrows()
    }
}

/// Gaussian initial state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// One realization of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x_0..=x_tau`
    pub states: Vec<DVector<f64>>,
    /// `z_0..=z_tau`
    pub measurements: Vec<DVector<f64>>,
    /// `u_0..u_{tau-1}`
    pub controls: Vec<DVector<f64>>,
    /// `w_0..w_{tau-1}`
    pub state_noise: Vec<DVector<f64>>,
    /// `v_0..=v_tau`
    pub measurement_noise: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.measurements.len().saturating_sub(1)
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Simulates the model with a generator seeded from `seed`.
pub fn simulate(
    model: &LtvModel,
    noise: &NoiseSpec,
    x0: &InitialState,
    controls: &[DVector<f64>],
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_with_rng(model, noise, x0, controls, &mut rng)
}

/// Simulates the model drawing from `rng`: `x_0`, then for each step `v_k`
/// followed by `w_k`.
pub fn simulate_with_rng<R: Rng + ?Sized>(
    model: &LtvModel,
    noise: &NoiseSpec,
    x0: &InitialState,
    controls: &[DVector<f64>],
    rng: &mut R,
) -> Result<Trajectory> {
    let report = model.validate();
    if !report.is_valid() {
        return Err(MdmError::InvalidModel(report.to_string()));
    }
    if noise.nw() != model.nw() || noise.nv() != model.nv() {
        return Err(MdmError::Dimension(format!(
            "noise spec is {}/{} but model expects n_w={}, n_v={}",
            noise.nw(),
            noise.nv(),
            model.nw(),
            model.nv()
        )));
    }
    if x0.mean.len() != model.nx() || x0.cov.shape() != (model.nx(), model.nx()) {
        return Err(MdmError::Dimension("initial state dimension".into()));
    }
    model.check_controls(controls)?;

    let sq = linalg::psd_factor(&noise.q, "Q")?;
    let sr = linalg::psd_factor(&noise.r, "R")?;
    let sx = linalg::psd_factor(&x0.cov, "initial state covariance")?;

    let tau = model.horizon();
    let mut states = Vec::with_capacity(tau + 1);
    let mut measurements = Vec::with_capacity(tau + 1);
    let mut state_noise = Vec::with_capacity(tau);
    let mut measurement_noise = Vec::with_capacity(tau + 1);

    let mut x = &x0.mean + &sx * standard_normal(rng, model.nx());
    for k in 0..=tau {
        let v = &sr * standard_normal(rng, model.nv());
        measurements.push(model.h(k) * &x + model.d(k) * &v);
        measurement_noise.push(v);
        if k < tau {
            let w = &sq * standard_normal(rng, model.nw());
            let next = model.f(k) * &x + model.g(k) * &controls[k] + model.e(k) * &w;
            state_noise.push(w);
            states.push(std::mem::replace(&mut x, next));
        }
    }
    states.push(x);

    Ok(Trajectory {
        states,
        measurements,
        controls: controls.to_vec(),
        state_noise,
        measurement_noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_model(tau: usize, f: f64, g: f64, h: f64) -> LtvModel {
        LtvModel::from_rule(tau, 1, 1, 1, |_| StepMatrices {
            f: scalar(f),
            g: scalar(g),
            e: scalar(1.0),
            h: scalar(h),
            d: scalar(1.0),
        })
        .unwrap()
    }

    fn zero_controls(tau: usize) -> Vec<DVector<f64>> {
        vec![DVector::zeros(1); tau]
    }

    fn point_x0(x: f64) -> InitialState {
        InitialState {
            mean: DVector::from_element(1, x),
            cov: DMatrix::zeros(1, 1),
        }
    }

    #[test]
    fn scalar_model_is_valid() {
        let m = scalar_model(10, 0.8, 1.0, 1.0);
        assert!(m.validate().is_valid());
        assert_eq!(m.horizon(), 10);
    }

    #[test]
    fn shape_violation_is_reported_with_time_index() {
        let m = scalar_model(10, 0.8, 1.0, 1.0);
        let mut nz = vec![1; 11];
        nz[5] = 2;
        let bad = LtvModel::new_unchecked(
            1,
            1,
            1,
            nz,
            m.nu.clone(),
            m.f.clone(),
            m.g.clone(),
            m.e.clone(),
            m.h.clone(),
            m.d.clone(),
        );
        let report = bad.validate();
        let at5: Vec<_> = report.at(5).collect();
        assert!(at5.iter().any(|v| v.matrix == "H"
            && v.kind
                == ViolationKind::Shape {
                    expected: (2, 1),
                    found: (1, 1)
                }));
        assert_eq!(report.violations.iter().filter(|v| v.k != Some(5)).count(), 0);
    }

    #[test]
    fn non_finite_entry_is_reported() {
        let m = scalar_model(10, 0.8, 1.0, 1.0);
        let mut g = m.g.clone();
        g[3][(0, 0)] = f64::NAN;
        let bad = LtvModel::new_unchecked(
            1,
            1,
            1,
            m.nz.clone(),
            m.nu.clone(),
            m.f.clone(),
            g,
            m.e.clone(),
            m.h.clone(),
            m.d.clone(),
        );
        let report = bad.validate();
        assert_eq!(
            report.violations,
            vec![Violation {
                k: Some(3),
                matrix: "G",
                kind: ViolationKind::NonFinite
            }]
        );
        assert!(matches!(
            LtvModel::new(
                1,
                1,
                1,
                bad.nz.clone(),
                bad.nu.clone(),
                bad.f.clone(),
                bad.g.clone(),
                bad.e.clone(),
                bad.h.clone(),
                bad.d.clone()
            ),
            Err(MdmError::InvalidModel(_))
        ));
    }

    #[test]
    fn observability_examples() {
        let m = scalar_model(10, 0.8, 1.0, 1.0);
        let o = m.observability_stack(0, 2).unwrap();
        assert_relative_eq!(o, DMatrix::from_column_slice(2, 1, &[1.0, 0.8]));
        assert_eq!(m.observability_stack(3, 1).unwrap(), scalar(1.0));
        assert!(m.check_observability(1).iter().all(|&b| b));

        let m2 = LtvModel::from_rule(4, 2, 2, 1, |_| StepMatrices {
            f: DMatrix::identity(2, 2),
            g: DMatrix::zeros(2, 0),
            e: DMatrix::identity(2, 2),
            h: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            d: scalar(1.0),
        })
        .unwrap();
        let o = m2.observability_stack(0, 2).unwrap();
        assert_eq!(o, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]));
        assert_eq!(linalg::rank(&o), 1);
        assert!(m2.check_observability(2).iter().all(|&b| !b));
    }

    #[test]
    fn observability_overrun() {
        let m = scalar_model(3, 0.8, 1.0, 1.0);
        assert!(matches!(
            m.observability_stack(2, 3),
            Err(MdmError::HorizonOverrun { .. })
        ));
    }

    #[test]
    fn zero_noise_fixed_point() {
        let tau = 20;
        let m = scalar_model(tau, 1.0, 1.0, 1.0);
        let noise = NoiseSpec::new(scalar(0.0), scalar(0.0)).unwrap();
        let t = simulate(&m, &noise, &point_x0(1.0), &zero_controls(tau), 7).unwrap();
        for k in 0..=tau {
            assert_eq!(t.states[k][0], 1.0);
            assert_eq!(t.measurements[k][0], 1.0);
        }
    }

    #[test]
    fn zero_noise_geometric_decay() {
        let tau = 15;
        let m = scalar_model(tau, 0.5, 1.0, 1.0);
        let noise = NoiseSpec::new(scalar(0.0), scalar(0.0)).unwrap();
        let t = simulate(&m, &noise, &point_x0(1.0), &zero_controls(tau), 7).unwrap();
        for k in 0..=tau {
            assert_relative_eq!(t.measurements[k][0], 0.5f64.powi(k as i32), epsilon = 1e-15);
        }
    }

    #[test]
    fn state_noise_sample_mean_is_zero() {
        let tau = 20_000;
        let m = scalar_model(tau, 0.8, 0.0, 1.0);
        let noise = NoiseSpec::new(scalar(2.0), scalar(1.0)).unwrap();
        let t = simulate(&m, &noise, &point_x0(0.0), &zero_controls(tau), 3).unwrap();
        let mean = t.state_noise.iter().map(|w| w[0]).sum::<f64>() / tau as f64;
        assert!(mean.abs() < 3.0 * 2f64.sqrt() / (tau as f64).sqrt());
    }

    #[test]
    fn simulation_rejects_indefinite_noise() {
        let m = scalar_model(5, 0.8, 1.0, 1.0);
        let noise = NoiseSpec::new(scalar(-1.0), scalar(1.0)).unwrap();
        let r = simulate(&m, &noise, &point_x0(0.0), &zero_controls(5), 0);
        assert!(matches!(r, Err(MdmError::NotPsd { what: "Q", .. })));
    }

    #[test]
    fn asymmetric_noise_rejected() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            NoiseSpec::new(q, scalar(1.0)),
            Err(MdmError::NotSymmetric("Q"))
        ));
    }

    #[test]
    fn zero_width_control_is_allowed() {
        let tau = 5;
        let m = LtvModel::from_rule(tau, 1, 1, 1, |_| StepMatrices {
            f: scalar(0.5),
            g: DMatrix::zeros(1, 0),
            e: scalar(1.0),
            h: scalar(1.0),
            d: scalar(1.0),
        })
        .unwrap();
        assert_eq!(m.nu(2), 0);
        let noise = NoiseSpec::new(scalar(1.0), scalar(1.0)).unwrap();
        let controls = vec![DVector::zeros(0); tau];
        let t = simulate(&m, &noise, &point_x0(0.0), &controls, 1).unwrap();
        assert_eq!(t.measurements.len(), tau + 1);
    }

    fn random_model(seed: u64, tau: usize) -> (LtvModel, NoiseSpec, Vec<DVector<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
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
        let model = LtvModel::from_rule(tau, 2, 2, 2, |k| steps[k].clone()).unwrap();
        let a = mat(2, 2, 1.0);
        let b = mat(2, 2, 1.0);
        let noise = NoiseSpec::new(&a * a.transpose(), &b * b.transpose()).unwrap();
        let controls = (0..tau).map(|_| mat(1, 1, 1.0).column(0).into_owned()).collect();
        (model, noise, controls)
    }

    #[test]
    fn state_noise_sample_covariance_matches_q() {
        let tau = 100_000;
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let m = LtvModel::from_rule(tau, 2, 2, 1, |_| StepMatrices {
            f: DMatrix::identity(2, 2) * 0.5,
            g: DMatrix::zeros(2, 0),
            e: DMatrix::identity(2, 2),
            h: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            d: scalar(1.0),
        })
        .unwrap();
        let noise = NoiseSpec::new(q.clone(), scalar(1.0)).unwrap();
        let x0 = InitialState {
            mean: DVector::zeros(2),
            cov: DMatrix::identity(2, 2),
        };
        let t = simulate(&m, &noise, &x0, &vec![DVector::zeros(0); tau], 11).unwrap();
        let mut s = DMatrix::zeros(2, 2);
        for w in &t.state_noise {
            s += w * w.transpose();
        }
        s /= tau as f64;
        let limit = 5.0 * q.norm() / (tau as f64).sqrt();
        assert!((s - q).amax() < limit);
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(32))]
        #[test]
        fn recorded_noises_satisfy_dynamics(seed in proptest::prelude::any::<u64>()) {
            let tau = 12;
            let (m, noise, controls) = random_model(seed, tau);
            let x0 = InitialState { mean: DVector::from_element(2, 1.0), cov: DMatrix::identity(2, 2) };
            let t = simulate(&m, &noise, &x0, &controls, seed).unwrap();
            for k in 0..=tau {
                let z = &t.measurements[k] - m.h(k) * &t.states[k] - m.d(k) * &t.measurement_noise[k];
                proptest::prop_assert!(z.amax() < 1e-12);
            }
            for k in 0..tau {
                let x = &t.states[k + 1] - m.f(k) * &t.states[k] - m.g(k) * &t.controls[k]
                    - m.e(k) * &t.state_noise[k];
                proptest::prop_assert!(x.amax() < 1e-12);
            }
            let again = simulate(&m, &noise, &x0, &controls, seed).unwrap();
            proptest::prop_assert_eq!(t, again);
        }
    }
}
