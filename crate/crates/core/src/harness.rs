//! Monte-Carlo experiment driver: builtin models, configuration, the
//! simulation and estimation loop, summary statistics, and CSV output.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MdmError, Result};
use crate::estimators::{self, EstimateReport, Method, RegressionDesign, RegressionSystem};
use crate::model::{self, InitialState, LtvModel, NoiseSpec, StepMatrices};
use crate::recursive::{self, RlsWeighting};
use crate::stack_ops::WindowSpec;
use crate::vec_maps::{CovLayout, UniqueCovVector};

/// Everything needed to simulate and identify one model.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: LtvModel,
    pub noise: NoiseSpec,
    pub x0: InitialState,
    pub controls: Vec<DVector<f64>>,
    pub window: WindowSpec,
}

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn sine_controls(tau: usize) -> Vec<DVector<f64>> {
    (0..tau)
        .map(|k| DVector::from_element(1, (k as f64 / tau as f64).sin()))
        .collect()
}

fn unit_initial_state() -> InitialState {
    InitialState {
        mean: DVector::from_element(1, 1.0),
        cov: scalar(1.0),
    }
}

/// Scalar model with fast-varying measurement gain, `Q = 2`, `R = 1`,
/// `L = N = 1`.
pub fn builtin_model_1(tau: usize) -> Result<Setup> {
    if tau < 2 {
        return Err(MdmError::Config("builtin-1 needs tau >= 2".into()));
    }
    let t = tau as f64;
    let model = LtvModel::from_rule(tau, 1, 1, 1, |k| {
        let k = k as f64;
        StepMatrices {
            f: scalar(0.8 - 0.1 * (7.0 * PI * k / t).sin()),
            g: scalar(1.0),
            e: scalar(1.0),
            h: scalar(1.0 + 0.99 * (100.0 * PI * k / t).sin()),
            d: scalar(1.0),
        }
    })?;
    Ok(Setup {
        model,
        noise: NoiseSpec::new(scalar(2.0), scalar(1.0))?,
        x0: unit_initial_state(),
        controls: sine_controls(tau),
        window: WindowSpec::new(1, 1)?,
    })
}

/// Sensor regime of the second builtin model at step `k`: 1 while
/// `k < tau/3`, 2 while `k < 2 tau/3`, 3 afterwards.
pub fn builtin_2_regime(k: usize, tau: usize) -> u8 {
    if 3 * k < tau {
        1
    } else if 3 * k < 2 * tau {
        2
    } else {
        3
    }
}

/// Scalar state observed by a changing set of two correlated sensors,
/// `Q = 3`, `R = [[2, -1], [-1, 1]]`, `L = 2`, `N = 1`.
pub fn builtin_model_2(tau: usize) -> Result<Setup> {
    if tau < 3 {
        return Err(MdmError::Config("builtin-2 needs tau >= 3".into()));
    }
    let t = tau as f64;
    let model = LtvModel::from_rule(tau, 1, 1, 2, |k| {
        let (h, d) = match builtin_2_regime(k, tau) {
            1 => (scalar(1.0), DMatrix::from_row_slice(1, 2, &[1.0, 0.0])),
            2 => (scalar(1.0), DMatrix::from_row_slice(1, 2, &[0.0, 1.0])),
            _ => (DMatrix::from_element(2, 1, 1.0), DMatrix::identity(2, 2)),
        };
        StepMatrices {
            f: scalar(1.0 + 0.1 * (20.0 * PI * k as f64 / t).sin()),
            g: scalar(1.0),
            e: scalar(-1.0),
            h,
            d,
        }
    })?;
    Ok(Setup {
        model,
        noise: NoiseSpec::new(
            scalar(3.0),
            DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 1.0]),
        )?,
        x0: unit_initial_state(),
        controls: sine_controls(tau),
        window: WindowSpec::new(2, 1)?,
    })
}

/// Explicit model description read from JSON. Matrices are row-major nested
/// arrays; `f`, `g`, `e`, and `controls` have `tau` entries, `h` and `d` have
/// `tau + 1`. A step without measurements or controls uses `[]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub nx: usize,
    pub nw: usize,
    pub nv: usize,
    pub f: Vec<Vec<Vec<f64>>>,
    pub g: Vec<Vec<Vec<f64>>>,
    pub e: Vec<Vec<Vec<f64>>>,
    pub h: Vec<Vec<Vec<f64>>>,
    pub d: Vec<Vec<Vec<f64>>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub x0_mean: Vec<f64>,
    pub x0_cov: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub window: WindowSpec,
}

fn matrix_from_rows(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
        return Err(MdmError::Config(format!(
            "{what}: row {bad} has {} entries, expected {cols}",
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| MdmError::Config(format!("{}: {e}", path.display())))
    }

    pub fn into_setup(self) -> Result<Setup> {
        let tau = self.f.len();
        if self.h.len() != tau + 1 || self.d.len() != tau + 1 {
            return Err(MdmError::Config(format!(
                "h and d need {} entries for {tau} transitions",
                tau + 1
            )));
        }
        if self.controls.len() != tau || self.g.len() != tau || self.e.len() != tau {
            return Err(MdmError::Config(format!("g, e, and controls need {tau} entries")));
        }
        let nu: Vec<usize> = self.controls.iter().map(Vec::len).collect();
        let nz: Vec<usize> = self.h.iter().map(Vec::len).collect();
        let each = |ms: &[Vec<Vec<f64>>], cols: &dyn Fn(usize) -> usize, name: &str| {
            ms.iter()
                .enumerate()
                .map(|(k, m)| matrix_from_rows(m, cols(k), &format!("{name}[{k}]")))
                .collect::<Result<Vec<_>>>()
        };
        let (nx, nw, nv) = (self.nx, self.nw, self.nv);
        let f = each(&self.f, &|_| nx, "f")?;
        let g = each(&self.g, &|k| nu[k], "g")?;
        let e = each(&self.e, &|_| nw, "e")?;
        let h = each(&self.h, &|_| nx, "h")?;
        let d = each(&self.d, &|_| nv, "d")?;
        let model = LtvModel::new(nx, nw, nv, nz, nu, f, g, e, h, d)?;
        let noise = NoiseSpec::new(
            matrix_from_rows(&self.q, nw, "q")?,
            matrix_from_rows(&self.r, nv, "r")?,
        )?;
        let x0 = InitialState {
            mean: DVector::from_vec(self.x0_mean),
            cov: matrix_from_rows(&self.x0_cov, nx, "x0_cov")?,
        };
        let controls = self.controls.into_iter().map(DVector::from_vec).collect();
        let window = WindowSpec::new(self.window.depth, self.window.steps)?;
        Ok(Setup {
            model,
            noise,
            x0,
            controls,
            window,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSource {
    #[serde(rename = "builtin-1")]
    Builtin1,
    #[serde(rename = "builtin-2")]
    Builtin2,
    #[serde(rename = "file")]
    File,
}

/// Starting point of the recursive methods. Missing fields use `0.5` on the
/// variance entries and `sigma0_scale * I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecursiveInit {
    #[serde(default)]
    pub estimate: Option<Vec<f64>>,
    #[serde(default)]
    pub sigma0: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_sigma0_scale")]
    pub sigma0_scale: f64,
}

fn default_sigma0_scale() -> f64 {
    10.0
}

impl Default for RecursiveInit {
    fn default() -> Self {
        Self {
            estimate: None,
            sigma0: None,
            sigma0_scale: default_sigma0_scale(),
        }
    }
}

impl RecursiveInit {
    fn resolve(&self, layout: CovLayout) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = layout.len();
        let est = match &self.estimate {
            Some(v) if v.len() != p => {
                return Err(MdmError::Config(format!(
                    "recursive.estimate has {} entries, expected {p}",
                    v.len()
                )))
            }
            Some(v) => DVector::from_vec(v.clone()),
            None => recursive::default_initial_estimate(layout),
        };
        let sigma = match &self.sigma0 {
            Some(rows) => matrix_from_rows(rows, p, "recursive.sigma0")?,
            None => DMatrix::identity(p, p) * self.sigma0_scale,
        };
        Ok((est, sigma))
    }
}

/// Experiment description, read from TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    /// JSON model description, required for `model = "file"`.
    #[serde(default)]
    pub model_file: Option<PathBuf>,
    /// Horizon of builtin models; file models carry their own.
    #[serde(default = "default_tau")]
    pub tau: usize,
    #[serde(default = "default_mc")]
    pub mc: usize,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the model's default window.
    #[serde(default)]
    pub window: Option<WindowSpec>,
    pub methods: Vec<Method>,
    /// Batch method whose estimate evaluates the weighting of `we-nr`.
    #[serde(default = "default_we_seed")]
    pub we_seed: Method,
    #[serde(default)]
    pub recursive: RecursiveInit,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub project_psd: bool,
    /// Record per-step estimates of the recursive methods.
    #[serde(default = "default_true")]
    pub trace: bool,
}

fn default_tau() -> usize {
    1000
}
fn default_mc() -> usize {
    200
}
fn default_we_seed() -> Method {
    Method::UwNr
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn new(model: ModelSource, methods: Vec<Method>) -> Self {
        Self {
            model,
            model_file: None,
            tau: default_tau(),
            mc: default_mc(),
            seed: 0,
            window: None,
            methods,
            we_seed: default_we_seed(),
            recursive: RecursiveInit::default(),
            out: default_out(),
            project_psd: false,
            trace: true,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MdmError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        if let (Some(file), Some(dir)) = (&cfg.model_file, path.parent()) {
            if file.is_relative() {
                cfg.model_file = Some(dir.join(file));
            }
        }
        Ok(cfg)
    }

    pub fn setup(&self) -> Result<Setup> {
        let mut setup = match self.model {
            ModelSource::Builtin1 => builtin_model_1(self.tau)?,
            ModelSource::Builtin2 => builtin_model_2(self.tau)?,
            ModelSource::File => {
                let path = self.model_file.as_ref().ok_or_else(|| {
                    MdmError::Config("model = \"file\" requires model_file".into())
                })?;
                ModelFile::load(path)?.into_setup()?
            }
        };
        if let Some(w) = self.window {
            setup.window = WindowSpec::new(w.depth, w.steps)?;
        }
        let tau = setup.model.horizon();
        if tau < setup.window.span() {
            return Err(MdmError::Config(format!(
                "tau = {tau} is shorter than the window span {}",
                setup.window.span()
            )));
        }
        Ok(setup)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(MdmError::Config("no methods requested".into()));
        }
        if self.mc == 0 {
            return Err(MdmError::Config("mc must be at least 1".into()));
        }
        if !matches!(self.we_seed, Method::UwNr | Method::SwNr) {
            return Err(MdmError::Config(format!(
                "we_seed must be uw-nr or sw-nr, got {}",
                self.we_seed
            )));
        }
        if let Some(w) = self.window {
            WindowSpec::new(w.depth, w.steps)?;
        }
        Ok(())
    }
}

/// Per-run output of all requested methods.
#[derive(Debug, Clone)]
struct RunOutcome {
    reports: Vec<EstimateReport>,
    times: Vec<Duration>,
    traces: Vec<Vec<DVector<f64>>>,
}

fn wrap(run: usize) -> impl Fn(MdmError) -> MdmError {
    move |e| match e {
        e @ MdmError::Run { .. } => e,
        e => MdmError::Run {
            run,
            module: e.module(),
            source: Box::new(e),
        },
    }
}

/// Generator of MC run `run`: one ChaCha stream per run under the master
/// seed, so results do not depend on scheduling.
pub fn run_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    rng
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    setup: &'a Setup,
    design: Arc<RegressionDesign>,
    rls_init: (DVector<f64>, DMatrix<f64>),
}

impl Runner<'_> {
    fn run(&self, run: usize) -> Result<RunOutcome> {
        self.run_inner(run).map_err(wrap(run))
    }

    fn run_inner(&self, run: usize) -> Result<RunOutcome> {
        let s = self.setup;
        let mut rng = run_rng(self.cfg.seed, run);
        let traj = model::simulate_with_rng(&s.model, &s.noise, &s.x0, &s.controls, &mut rng)?;

        let needs_batch = self.cfg.methods.iter().any(|m| !m.is_recursive());
        let (sys, build_time) = if needs_batch {
            let t0 = Instant::now();
            let sys = RegressionSystem::from_data(Arc::clone(&self.design), &traj)?;
            (Some(sys), t0.elapsed())
        } else {
            (None, Duration::ZERO)
        };

        let mut done: BTreeMap<Method, (EstimateReport, Duration)> = BTreeMap::new();
        let mut out = RunOutcome {
            reports: Vec::with_capacity(self.cfg.methods.len()),
            times: Vec::with_capacity(self.cfg.methods.len()),
            traces: Vec::with_capacity(self.cfg.methods.len()),
        };

        for &method in &self.cfg.methods {
            let (report, time, trace) = match method {
                Method::UwNr | Method::SwNr | Method::WeNr => {
                    let sys = sys.as_ref().expect("batch system built");
                    let (rep, t) = self.batch(method, sys, &mut done)?;
                    (rep, t + build_time, Vec::new())
                }
                Method::UwRe | Method::SwRe => self.recursive(method, &traj)?,
            };
            let report = if self.cfg.project_psd {
                report.projected_psd()
            } else {
                report
            };
            out.reports.push(report);
            out.times.push(time);
            out.traces.push(trace);
        }
        Ok(out)
    }

    fn batch(
        &self,
        method: Method,
        sys: &RegressionSystem,
        done: &mut BTreeMap<Method, (EstimateReport, Duration)>,
    ) -> Result<(EstimateReport, Duration)> {
        if let Some(hit) = done.get(&method) {
            return Ok(hit.clone());
        }
        let t0 = Instant::now();
        let result = match method {
            Method::UwNr => estimators::estimate_unweighted(sys)?,
            Method::SwNr => estimators::estimate_semiweighted(sys)?,
            Method::WeNr => {
                let (seed, seed_time) = self.batch(self.cfg.we_seed, sys, done)?;
                let t1 = Instant::now();
                let rep = estimators::estimate_weighted(sys, &seed)?;
                let t = seed_time + t1.elapsed();
                done.insert(method, (rep.clone(), t));
                return Ok((rep, t));
            }
            _ => unreachable!("recursive method in batch path"),
        };
        let t = t0.elapsed();
        done.insert(method, (result.clone(), t));
        Ok((result, t))
    }

    fn recursive(
        &self,
        method: Method,
        traj: &model::Trajectory,
    ) -> Result<(EstimateReport, Duration, Vec<DVector<f64>>)> {
        let weighting = RlsWeighting::for_method(method).expect("recursive method");
        let t0 = Instant::now();
        let (est, sigma) = self.rls_init.clone();
        let mut state = recursive::rls_init(est, sigma, weighting)?;
        let blocks = self.design.blocks();
        let mut trace = Vec::with_capacity(if self.cfg.trace { blocks.len() } else { 0 });
        for i in 0..blocks.len() {
            let y = self.design.observation(i, traj)?;
            state.step_block(&self.design, i, &y)?;
            if self.cfg.trace {
                trace.push(state.estimate().clone());
            }
        }
        let report = recursive::finish(&state, self.design.layout(), t0);
        let t = t0.elapsed();
        Ok((report, t, trace))
    }
}

/// Sample mean of a set of estimates.
pub fn sample_mean(samples: &[DVector<f64>]) -> Result<DVector<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| MdmError::InsufficientData("no samples".into()))?;
    let mut acc = DVector::zeros(first.len());
    for s in samples {
        acc += s;
    }
    Ok(acc / samples.len() as f64)
}

/// Unbiased sample covariance diagonal; needs at least two samples.
pub fn sample_cov_diag(samples: &[DVector<f64>]) -> Result<DVector<f64>> {
    if samples.len() < 2 {
        return Err(MdmError::InsufficientData(format!(
            "sample covariance needs at least 2 runs, got {}",
            samples.len()
        )));
    }
    let mean = sample_mean(samples)?;
    let mut acc = DVector::zeros(mean.len());
    for s in samples {
        let d = s - &mean;
        acc += d.component_mul(&d);
    }
    Ok(acc / (samples.len() - 1) as f64)
}

/// Mean and sample covariance diagonal (absent for a single run).
pub fn summarize(samples: &[DVector<f64>]) -> Result<(DVector<f64>, Option<DVector<f64>>)> {
    let mean = sample_mean(samples)?;
    let cov = if samples.len() >= 2 {
        Some(sample_cov_diag(samples)?)
    } else {
        None
    };
    Ok((mean, cov))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: Method,
    pub parameter: String,
    pub truth: f64,
    pub s_mean: f64,
    pub s_cov: Option<f64>,
    /// Mean of the reported covariance diagonal, batch methods only.
    pub est_cov: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub method: Method,
    /// Median wall-clock time per run.
    pub median_seconds: f64,
    /// Relative to Uw-Nr when it was run.
    pub time_rel: Option<f64>,
}

/// Mean and standard deviation of a recursive estimate at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub k: usize,
    pub method: Method,
    pub parameter: String,
    pub mean: f64,
    pub std: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub timing: Vec<TimingRow>,
    pub trace: Vec<TracePoint>,
    /// Per-run estimates, `[method][run]`.
    pub estimates: Vec<(Method, Vec<DVector<f64>>)>,
    pub layout: CovLayout,
}

impl ResultTable {
    pub fn row(&self, method: Method, parameter: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.parameter == parameter)
    }

    pub fn timing(&self, method: Method) -> Option<&TimingRow> {
        self.timing.iter().find(|t| t.method == method)
    }

    pub fn samples(&self, method: Method) -> Option<&[DVector<f64>]> {
        self.estimates
            .iter()
            .find(|(m, _)| *m == method)
            .map(|(_, v)| v.as_slice())
    }
}

impl std::fmt::Display for ResultTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        writeln!(
            f,
            "{:<7} {:<8} {:>8} {:>9} {:>9} {:>9}",
            "method", "param", "true", "s_mean", "s_cov", "est_cov"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<7} {:<8} {:>8.3} {:>9.4} {:>9} {:>9}",
                r.method.label(),
                r.parameter,
                r.truth,
                r.s_mean,
                opt(r.s_cov),
                opt(r.est_cov)
            )?;
        }
        writeln!(f, "{:<7} {:>12} {:>9}", "method", "median_s", "time_rel")?;
        for t in &self.timing {
            writeln!(
                f,
                "{:<7} {:>12.6} {:>9}",
                t.method.label(),
                t.median_seconds,
                t.time_rel.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
            )?;
        }
        Ok(())
    }
}

/// Running mean and second central moment per step, for the traces.
#[derive(Debug, Clone)]
struct Welford {
    n: usize,
    mean: Vec<DVector<f64>>,
    m2: Vec<DVector<f64>>,
}

impl Welford {
    fn new(steps: usize, p: usize) -> Self {
        Self {
            n: 0,
            mean: vec![DVector::zeros(p); steps],
            m2: vec![DVector::zeros(p); steps],
        }
    }

    fn push(&mut self, trace: &[DVector<f64>]) {
        self.n += 1;
        let n = self.n as f64;
        for ((x, mean), m2) in trace.iter().zip(&mut self.mean).zip(&mut self.m2) {
            let delta = x - &*mean;
            *mean += &delta / n;
            let delta2 = x - &*mean;
            *m2 += delta.component_mul(&delta2);
        }
    }
}

/// Number of runs processed in parallel before folding into the
/// accumulators; bounds memory at large MC counts.
const CHUNK: usize = 64;

/// Simulates and identifies `cfg.mc` runs and aggregates the results.
/// Nothing is written to disk; see [`write_outputs`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let setup = cfg.setup()?;
    let design = Arc::new(RegressionDesign::build(&setup.model, setup.window)?);
    let layout = design.layout();
    let rls_init = cfg.recursive.resolve(layout)?;
    let runner = Runner {
        cfg,
        setup: &setup,
        design: Arc::clone(&design),
        rls_init,
    };

    let nm = cfg.methods.len();
    let steps = design.blocks().len();
    let mut estimates: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(cfg.mc); nm];
    let mut est_cov: Vec<DVector<f64>> = vec![DVector::zeros(layout.len()); nm];
    let mut times: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.mc); nm];
    let mut traces: Vec<Option<Welford>> = cfg
        .methods
        .iter()
        .map(|m| (m.is_recursive() && cfg.trace).then(|| Welford::new(steps, layout.len())))
        .collect();

    let mut start = 0;
    while start < cfg.mc {
        let end = (start + CHUNK).min(cfg.mc);
        let chunk: Vec<RunOutcome> = (start..end)
            .into_par_iter()
            .map(|run| runner.run(run))
            .collect::<Result<_>>()?;
        for outcome in chunk {
            for i in 0..nm {
                let rep = &outcome.reports[i];
                estimates[i].push(rep.values().clone());
                est_cov[i] += rep.est_cov_diag();
                times[i].push(outcome.times[i].as_secs_f64());
                if let Some(w) = traces[i].as_mut() {
                    w.push(&outcome.traces[i]);
                }
            }
        }
        start = end;
    }

    let truth = UniqueCovVector::from_matrices(&setup.noise.q, &setup.noise.r).values;
    let labels = layout.labels();
    let mut rows = Vec::with_capacity(nm * layout.len());
    for (i, &method) in cfg.methods.iter().enumerate() {
        let (mean, cov) = summarize(&estimates[i])?;
        for (p, label) in labels.iter().enumerate() {
            rows.push(ResultRow {
                method,
                parameter: label.clone(),
                truth: truth[p],
                s_mean: mean[p],
                s_cov: cov.as_ref().map(|c| c[p]),
                est_cov: (!method.is_recursive()).then(|| est_cov[i][p] / cfg.mc as f64),
            });
        }
    }

    let medians: Vec<f64> = times.into_iter().map(median).collect();
    let reference = cfg
        .methods
        .iter()
        .position(|&m| m == Method::UwNr)
        .map(|i| medians[i]);
    let timing = cfg
        .methods
        .iter()
        .zip(&medians)
        .map(|(&method, &t)| TimingRow {
            method,
            median_seconds: t,
            time_rel: reference.map(|r| t / r),
        })
        .collect();

    let mut trace = Vec::new();
    for (i, &method) in cfg.methods.iter().enumerate() {
        let Some(w) = &traces[i] else { continue };
        for (s, block) in design.blocks().iter().enumerate() {
            for (p, label) in labels.iter().enumerate() {
                trace.push(TracePoint {
                    k: block.k,
                    method,
                    parameter: label.clone(),
                    mean: w.mean[s][p],
                    std: (w.n >= 2).then(|| (w.m2[s][p] / (w.n - 1) as f64).sqrt()),
                });
            }
        }
    }

    Ok(ResultTable {
        rows,
        timing,
        trace,
        estimates: cfg.methods.iter().copied().zip(estimates).collect(),
        layout,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Writes `results.csv` (deterministic for a given configuration),
/// `estimates.csv`, `trace.csv`, `timing.csv`, and `manifest.json` into
/// `cfg.out`.
pub fn write_outputs(cfg: &ExperimentConfig, table: &ResultTable) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(&cfg.out)?;
    let path = |name: &str| cfg.out.join(name);

    let results = path("results.csv");
    let mut w = csv::Writer::from_path(&results)?;
    w.write_record(["method", "parameter", "true", "s_mean", "s_cov", "est_cov"])?;
    for r in &table.rows {
        w.write_record([
            r.method.label().to_string(),
            r.parameter.clone(),
            format!("{:e}", r.truth),
            format!("{:e}", r.s_mean),
            fmt_opt(r.s_cov),
            fmt_opt(r.est_cov),
        ])?;
    }
    w.flush()?;

    let estimates = path("estimates.csv");
    let mut w = csv::Writer::from_path(&estimates)?;
    let labels = table.layout.labels();
    let mut header = vec!["run".to_string(), "method".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (method, samples) in &table.estimates {
        for (run, s) in samples.iter().enumerate() {
            let mut rec = vec![run.to_string(), method.label().to_string()];
            rec.extend(s.iter().map(|x| format!("{x:e}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    let trace = path("trace.csv");
    let mut w = csv::Writer::from_path(&trace)?;
    w.write_record(["k", "method", "parameter", "mean", "std"])?;
    for t in &table.trace {
        w.write_record([
            t.k.to_string(),
            t.method.label().to_string(),
            t.parameter.clone(),
            format!("{:e}", t.mean),
            fmt_opt(t.std),
        ])?;
    }
    w.flush()?;

    let timing = path("timing.csv");
    let mut w = csv::Writer::from_path(&timing)?;
    w.write_record(["method", "median_seconds", "time_rel"])?;
    for t in &table.timing {
        w.write_record([
            t.method.label().to_string(),
            format!("{:e}", t.median_seconds),
            fmt_opt(t.time_rel),
        ])?;
    }
    w.flush()?;

    let manifest = path("manifest.json");
    let doc = serde_json::json!({
        "crate_version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "rng": "ChaCha8, seeded from `seed`, stream = MC run index",
        "files": ["results.csv", "estimates.csv", "trace.csv", "timing.csv"],
    });
    fs::write(
        &manifest,
        serde_json::to_string_pretty(&doc).map_err(|e| MdmError::Config(e.to_string()))?,
    )?;

    Ok(vec![results, estimates, trace, timing, manifest])
}
