//! Monte Carlo data-generating processes and size/power studies.
//!
//! Factors follow three AR(1)-GARCH(1,1) recursions, errors come from one of
//! four elliptical or independent-component laws with AR(1) scatter, and the
//! alpha vector is sparse with a fixed energy. Every replication draws from
//! its own ChaCha stream seeded by mixing the master seed with the
//! replication index, so results do not depend on scheduling.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, StandardNormal, StudentT};
use rayon::prelude::*;

use crate::alpha::{run_methods, ss_q_statistic, Method, TestConfig, TestResult};
use crate::error::{Error, Result};
use crate::regression::Panel;

/// `(intercept, AR coefficient)` of the factor means.
const FACTOR_MEAN: [(f64, f64); 3] = [(0.53, 0.06), (0.19, 0.19), (0.19, 0.05)];
/// `(constant, GARCH, ARCH)` of the factor variances.
const FACTOR_VAR: [(f64, f64, f64); 3] =
    [(0.89, 0.85, 0.11), (0.62, 0.74, 0.19), (0.80, 0.76, 0.15)];

pub const DEFAULT_BURN_IN: usize = 50;
/// Studies abort when more than this fraction of replications fail.
pub const MAX_FAILURE_RATE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ErrorModel {
    /// Multivariate normal.
    Normal,
    /// Multivariate t with 3 degrees of freedom, scaled to unit variance.
    MultT3,
    /// Normal scale mixture `kappa N(0, S) + (1 - kappa) N(0, 9 S)`.
    Mixture,
    /// `S^{1/2}` times i.i.d. t(3) coordinates.
    IndependentT3,
}

impl ErrorModel {
    pub const ALL: [ErrorModel; 4] = [
        ErrorModel::Normal,
        ErrorModel::MultT3,
        ErrorModel::Mixture,
        ErrorModel::IndependentT3,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ErrorModel::Normal => "I",
            ErrorModel::MultT3 => "II",
            ErrorModel::Mixture => "III",
            ErrorModel::IndependentT3 => "IV",
        }
    }
}

impl fmt::Display for ErrorModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ErrorModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let model = match key.as_str() {
            "i" | "1" | "normal" => ErrorModel::Normal,
            "ii" | "2" | "t3" | "mult-t3" => ErrorModel::MultT3,
            "iii" | "3" | "mixture" => ErrorModel::Mixture,
            "iv" | "4" | "independent-t3" | "ic" => ErrorModel::IndependentT3,
            _ => return Err(Error::InvalidArgument(format!("unknown scenario {s:?}"))),
        };
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub error_model: ErrorModel,
    pub t: usize,
    pub n: usize,
    /// Number of nonzero alphas.
    pub s: usize,
    /// Signal energy `|alpha|^2`.
    pub delta: f64,
    pub gamma: f64,
    pub reps: usize,
    pub master_seed: u64,
    /// Weight of the unit-scale component in the normal mixture.
    pub kappa: f64,
    /// Loadings are drawn i.i.d. uniform on this interval each replication.
    pub beta_range: (f64, f64),
    pub burn_in: usize,
    /// AR(1) coefficient of the error scatter.
    pub rho: f64,
}

impl ScenarioSpec {
    pub fn new(error_model: ErrorModel, t: usize, n: usize) -> Self {
        ScenarioSpec {
            error_model,
            t,
            n,
            s: 0,
            delta: 0.0,
            gamma: 0.05,
            reps: 1000,
            master_seed: 20240601,
            kappa: 0.8,
            beta_range: (0.5, 1.5),
            burn_in: DEFAULT_BURN_IN,
            rho: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n == 0 || self.t == 0 {
            return bad(format!(
                "T and N must be positive (T = {}, N = {})",
                self.t, self.n
            ));
        }
        if self.s > self.n {
            return bad(format!("sparsity s = {} exceeds N = {}", self.s, self.n));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be finite and >= 0, got {}", self.delta));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if self.reps == 0 {
            return bad("reps must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa must lie in [0, 1], got {}", self.kappa));
        }
        let (lo, hi) = self.beta_range;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return bad(format!("invalid beta range ({lo}, {hi})"));
        }
        if !(self.rho.abs() < 1.0) {
            return bad(format!("|rho| must be < 1, got {}", self.rho));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer applied to `master + (k + 1) * golden`.
pub fn child_seed(master: u64, k: u64) -> u64 {
    let mut z = master.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn replication_rng(master: u64, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(master, k))
}

/// Factor paths and their conditional variances, both `T x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPath {
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

/// Runs the recursions from `f = 0`, `h = 1` at period `-burn_in` with
/// innovations supplied by `zeta(k)` for factor `k`, and keeps the last `t`
/// periods.
pub fn factor_path(t: usize, burn_in: usize, mut zeta: impl FnMut(usize) -> f64) -> FactorPath {
    let mut f = DMatrix::zeros(t, 3);
    let mut h = DMatrix::zeros(t, 3);
    let mut f_prev = [0.0; 3];
    let mut h_prev = [1.0; 3];
    let mut z_prev: [f64; 3] = std::array::from_fn(&mut zeta);
    for step in 0..burn_in + t {
        for k in 0..3 {
            let (c, a) = FACTOR_MEAN[k];
            let (w, g, arch) = FACTOR_VAR[k];
            let hk = w + g * h_prev[k] + arch * z_prev[k] * z_prev[k];
            let z = zeta(k);
            let fk = c + a * f_prev[k] + hk.sqrt() * z;
            f_prev[k] = fk;
            h_prev[k] = hk;
            z_prev[k] = z;
            if step >= burn_in {
                f[(step - burn_in, k)] = fk;
                h[(step - burn_in, k)] = hk;
            }
        }
    }
    FactorPath { f, h }
}

/// `T x 3` market, size and value factors.
pub fn generate_factors<R: Rng + ?Sized>(t: usize, burn_in: usize, rng: &mut R) -> DMatrix<f64> {
    factor_path(t, burn_in, |_| rng.sample(StandardNormal)).f
}

/// `rho^{|i-j|}`.
pub fn ar1_scatter(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Symmetric positive definite square root.
pub fn symmetric_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !sigma.is_square() {
        return Err(Error::InvalidArgument(
            "scatter matrix must be square".into(),
        ));
    }
    let eig = SymmetricEigen::new(sigma.clone());
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scatter matrix is not positive definite (smallest eigenvalue {min:.3e})"
        )));
    }
    let root = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&root) * v.transpose())
}

/// Draws `t` error rows with scatter `root * root'`.
pub fn generate_errors<R: Rng + ?Sized>(
    model: ErrorModel,
    kappa: f64,
    root: &DMatrix<f64>,
    t: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = root.nrows();
    let mut z = DMatrix::<f64>::zeros(t, n);
    match model {
        ErrorModel::Normal => fill_normal(&mut z, rng),
        ErrorModel::MultT3 => {
            let chi = ChiSquared::new(3.0).expect("valid dof");
            for s in 0..t {
                // sqrt(chi2_3 / 3) for the t_3 draw, times sqrt(3) to reach unit variance.
                let w = rng.sample::<f64, _>(chi).sqrt();
                for j in 0..n {
                    z[(s, j)] = rng.sample::<f64, _>(StandardNormal) / w;
                }
            }
        }
        ErrorModel::Mixture => {
            if !(0.0..=1.0).contains(&kappa) {
                return Err(Error::InvalidArgument(format!(
                    "kappa must lie in [0, 1], got {kappa}"
                )));
            }
            let norm = (kappa + 9.0 * (1.0 - kappa)).sqrt();
            for s in 0..t {
                let scale = if rng.random::<f64>() < kappa {
                    1.0
                } else {
                    3.0
                } / norm;
                for j in 0..n {
                    z[(s, j)] = scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        ErrorModel::IndependentT3 => {
            let t3 = StudentT::new(3.0).expect("valid dof");
            for v in z.iter_mut() {
                *v = rng.sample(t3);
            }
        }
    }
    // Rows are z_t' root' = (root z_t)'.
    Ok(z * root.transpose())
}

fn fill_normal<R: Rng + ?Sized>(z: &mut DMatrix<f64>, rng: &mut R) {
    // Row-major draw order keeps streams comparable across models.
    let (t, n) = z.shape();
    for s in 0..t {
        for j in 0..n {
            z[(s, j)] = rng.sample(StandardNormal);
        }
    }
}

/// First `s` entries `sqrt(delta / s)`, the rest zero.
pub fn build_alpha(n: usize, s: usize, delta: f64) -> Result<DVector<f64>> {
    if s > n {
        return Err(Error::InvalidArgument(format!(
            "sparsity s = {s} exceeds N = {n}"
        )));
    }
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must be >= 0, got {delta}"
        )));
    }
    let mut alpha = DVector::zeros(n);
    if s > 0 {
        let a = (delta / s as f64).sqrt();
        alpha.rows_mut(0, s).fill(a);
    }
    Ok(alpha)
}

/// A scenario with its scatter root precomputed.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub spec: ScenarioSpec,
    root: DMatrix<f64>,
    alpha: DVector<f64>,
}

/// One simulated replication with the planted parameters.
#[derive(Debug, Clone)]
pub struct Draw {
    pub panel: Panel,
    pub alpha: DVector<f64>,
    /// `N x 3` loadings.
    pub beta: DMatrix<f64>,
}

impl Simulator {
    pub fn new(spec: ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let root = symmetric_sqrt(&ar1_scatter(spec.n, spec.rho))?;
        let alpha = build_alpha(spec.n, spec.s, spec.delta)?;
        Ok(Simulator { spec, root, alpha })
    }

    /// Replaces the planted alpha vector.
    pub fn with_alpha(mut self, alpha: DVector<f64>) -> Result<Self> {
        if alpha.len() != self.spec.n {
            return Err(Error::InvalidArgument(format!(
                "alpha has {} entries, expected {}",
                alpha.len(),
                self.spec.n
            )));
        }
        self.alpha = alpha;
        Ok(self)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Draw> {
        let spec = &self.spec;
        let (t, n) = (spec.t, spec.n);
        let f = generate_factors(t, spec.burn_in, rng);
        let (lo, hi) = spec.beta_range;
        let beta = DMatrix::from_fn(n, 3, |_, _| lo + (hi - lo) * rng.random::<f64>());
        let eps = generate_errors(spec.error_model, spec.kappa, &self.root, t, rng)?;
        let mut y = &f * beta.transpose() + eps;
        for mut row in y.row_iter_mut() {
            row += self.alpha.transpose();
        }
        Ok(Draw {
            panel: Panel::new(y, f)?,
            alpha: self.alpha.clone(),
            beta,
        })
    }

    pub fn panel<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Panel> {
        Ok(self.draw(rng)?.panel)
    }

    pub fn replication(&self, k: u64) -> Result<Panel> {
        self.panel(&mut replication_rng(self.spec.master_seed, k))
    }
}

pub fn simulate_panel<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<Panel> {
    Simulator::new(spec.clone())?.panel(rng)
}

/// Per-replication test results, in replication order. A replication fails
/// as a whole when any requested method fails on it.
pub fn run_replications(
    sim: &Simulator,
    methods: &[Method],
    cfg: &TestConfig,
) -> Vec<Result<Vec<TestResult>>> {
    (0..sim.spec.reps as u64)
        .into_par_iter()
        .map(|k| {
            let panel = sim.replication(k)?;
            run_methods(&panel, methods, cfg)?
                .into_iter()
                .map(|(_, r)| r)
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionRow {
    pub method: Method,
    pub scenario: ErrorModel,
    pub t: usize,
    pub n: usize,
    pub s: usize,
    pub delta: f64,
    pub gamma: f64,
    /// Successful replications.
    pub reps: usize,
    pub reject_rate: f64,
    pub mc_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RejectionTable {
    pub rows: Vec<RejectionRow>,
    /// Failed replications per study, summed over merged tables.
    pub failures: usize,
}

impl RejectionTable {
    /// Sorts rows by method, scenario, T, N, s and delta.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (a.method, a.scenario, a.t, a.n, a.s)
                .cmp(&(b.method, b.scenario, b.t, b.n, b.s))
                .then(a.delta.total_cmp(&b.delta))
                .then(a.gamma.total_cmp(&b.gamma))
        });
    }

    pub fn extend(&mut self, other: RejectionTable) {
        self.rows.extend(other.rows);
        self.failures += other.failures;
        self.sort();
    }

    pub fn get(&self, method: Method) -> Option<&RejectionRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn rate(&self, method: Method) -> Option<f64> {
        self.get(method).map(|r| r.reject_rate)
    }
}

/// Aggregates replication outcomes at level `gamma`.
pub fn tabulate(
    spec: &ScenarioSpec,
    methods: &[Method],
    outcomes: &[Result<Vec<TestResult>>],
    gamma: f64,
) -> Result<RejectionTable> {
    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    let reps = outcomes.len();
    if failures as f64 > MAX_FAILURE_RATE * reps as f64 {
        return Err(Error::StudyAborted { failures, reps });
    }
    let ok: Vec<&Vec<TestResult>> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let used = ok.len();
    let mut table = RejectionTable {
        rows: Vec::with_capacity(methods.len()),
        failures,
    };
    for (idx, &method) in methods.iter().enumerate() {
        let rejections = ok.iter().filter(|r| r[idx].rejects(gamma)).count();
        let rate = if used == 0 {
            0.0
        } else {
            rejections as f64 / used as f64
        };
        table.rows.push(RejectionRow {
            method,
            scenario: spec.error_model,
            t: spec.t,
            n: spec.n,
            s: spec.s,
            delta: spec.delta,
            gamma,
            reps: used,
            reject_rate: rate,
            mc_stderr: (rate * (1.0 - rate) / used.max(1) as f64).sqrt(),
        });
    }
    table.sort();
    Ok(table)
}

pub fn run_study(
    spec: &ScenarioSpec,
    methods: &[Method],
    cfg: &TestConfig,
) -> Result<RejectionTable> {
    let sim = Simulator::new(spec.clone())?;
    let outcomes = run_replications(&sim, methods, cfg);
    tabulate(spec, methods, &outcomes, spec.gamma)
}

/// Monte Carlo null mean of the SS statistic's `Q`, for use as `delta_Q`.
///
/// Draws `reps` null panels of the given scenario from `seed`, which should
/// differ from the seed of the study being calibrated.
pub fn calibrate_delta_q(
    spec: &ScenarioSpec,
    reps: usize,
    seed: u64,
    cfg: &TestConfig,
) -> Result<f64> {
    let mut null = spec.clone();
    null.s = 0;
    null.delta = 0.0;
    null.reps = reps;
    null.master_seed = seed;
    let sim = Simulator::new(null)?;
    let qs: Vec<Result<f64>> = (0..reps as u64)
        .into_par_iter()
        .map(|k| ss_q_statistic(&sim.replication(k)?, cfg))
        .collect();
    let good: Vec<f64> = qs.iter().filter_map(|q| q.as_ref().ok().copied()).collect();
    let failures = reps - good.len();
    if failures as f64 > MAX_FAILURE_RATE * reps as f64 {
        return Err(Error::StudyAborted { failures, reps });
    }
    Ok(good.iter().sum::<f64>() / good.len() as f64)
}
