//! Alpha tests: GRS, PY, MAX, COM and the spatial-sign family SS, SM, CC.
//!
//! Every test is a pure function of a [`Panel`]. [`run_methods`] evaluates a
//! set of tests on one panel while sharing the OLS fit and the robust scale
//! estimates between them.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::dist::{cauchy_sf, f_sf, gumbel_g_sf, std_normal_sf};
use crate::error::{Error, Result};
use crate::regression::{
    fit_ols, gram_inverse, studentized_t_from_fit, FactorFit, LeaveOutFitter, Panel, TStatVector,
};
use crate::spatial::{
    median_scale_fixpoint, scale_only_fixpoint, signs_and_radii, zeta_hat, FixpointOptions,
    ScaleEstimate,
};

/// Smallest p-value passed on to the Cauchy combination.
pub const P_VALUE_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Grs,
    Py,
    Max,
    Com,
    Ss,
    Sm,
    Cc,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Grs,
        Method::Py,
        Method::Max,
        Method::Com,
        Method::Ss,
        Method::Sm,
        Method::Cc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Grs => "GRS",
            Method::Py => "PY",
            Method::Max => "MAX",
            Method::Com => "COM",
            Method::Ss => "SS",
            Method::Sm => "SM",
            Method::Cc => "CC",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    pub method: Method,
    /// `None` for COM, which only combines p-values.
    pub statistic: Option<f64>,
    pub p_value: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

impl TestResult {
    fn new(method: Method, statistic: Option<f64>, p_value: f64) -> Self {
        TestResult {
            method,
            statistic,
            p_value: p_value.clamp(0.0, 1.0),
            diagnostics: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }

    pub fn rejects(&self, gamma: f64) -> bool {
        self.p_value <= gamma
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrR2Estimate {
    pub value: f64,
    pub pairs_used: usize,
}

/// Centering of `Q` in the SS statistic.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DeltaQ {
    #[default]
    Zero,
    /// A fixed value, typically the Monte Carlo null mean of `Q` from a
    /// calibration run.
    Fixed(f64),
}

impl DeltaQ {
    pub fn value(&self) -> f64 {
        match *self {
            DeltaQ::Zero => 0.0,
            DeltaQ::Fixed(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestConfig {
    pub fixpoint: FixpointOptions,
    /// Threshold constant `c` in `|rho_ij| >= c sqrt(log N / T)`.
    pub py_threshold: f64,
    pub delta_q: DeltaQ,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            fixpoint: FixpointOptions::default(),
            py_threshold: 1.0,
            delta_q: DeltaQ::Zero,
        }
    }
}

/// `Q = N / (h'h) * sum_{t1 != t2} h_t1 h_t2 U_t1' U_t2`, evaluated as
/// `N / (h'h) * (|sum_t h_t U_t|^2 - sum_t h_t^2 |U_t|^2)`.
pub fn q_statistic(signs: &DMatrix<f64>, h: &DVector<f64>) -> f64 {
    let (t, n) = signs.shape();
    let omega = h.dot(h);
    let mut total = vec![0.0; n];
    let mut diag = 0.0;
    for s in 0..t {
        let hs = h[s];
        let row = signs.row(s);
        for (acc, u) in total.iter_mut().zip(row.iter()) {
            *acc += hs * u;
        }
        diag += hs * hs * row.norm_squared();
    }
    let cross = total.iter().map(|v| v * v).sum::<f64>() - diag;
    n as f64 / omega * cross
}

/// End (exclusive) of the first half once periods `a < b` are dropped: one
/// past the `m1`-th retained period.
fn half_boundary(a: usize, b: usize, m1: usize) -> usize {
    // The m1-th retained period (1-based) is m1 - 1 plus the number of
    // dropped periods at or before it.
    let mut idx = m1 - 1;
    if a <= idx {
        idx += 1;
    }
    if b <= idx {
        idx += 1;
    }
    idx + 1
}

fn scaled_sign(resid: &mut [f64], inv_sqrt_d: &[f64]) {
    let mut norm = 0.0;
    for (v, s) in resid.iter_mut().zip(inv_sqrt_d) {
        *v *= s;
        norm += *v * *v;
    }
    let norm = norm.sqrt();
    if norm > 0.0 {
        for v in resid.iter_mut() {
            *v /= norm;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Leave-two-out estimate of `tr(R^2)`.
///
/// For each pair `t1 != t2` the remaining periods are split in time order
/// into a first half (the larger one when odd) and a second half. Slopes
/// fitted on the first half give the residual at `t1`, slopes fitted on the
/// second half give the residual at `t2`. The ordered pairs `(t1, t2)` and
/// `(t2, t1)` share both half fits, so each unordered pair is fitted once.
pub fn tr_r2_hat(panel: &Panel, fit: &FactorFit, d: &DVector<f64>) -> Result<TrR2Estimate> {
    let t = panel.t();
    let n = panel.n();
    let p = panel.p();
    if d.len() != n || d.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument(
            "scale vector must have one positive entry per asset".into(),
        ));
    }
    if t < 2 * p + 4 {
        return Err(Error::InsufficientDof(format!(
            "tr(R^2) needs T >= 2p + 4 (T = {t}, p = {p})"
        )));
    }
    let h = &fit.h;
    let omega = fit.omega_t;
    let inv_sqrt_d: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let fitter = LeaveOutFitter::new(panel);
    let m1 = (t - 2).div_ceil(2);

    let mut u1_a = vec![0.0; n];
    let mut u2_b = vec![0.0; n];
    let mut u1_b = vec![0.0; n];
    let mut u2_a = vec![0.0; n];
    let mut sum = 0.0;
    let mut pairs_used = 0;
    for a in 0..t {
        for b in (a + 1)..t {
            let w = h[a] * h[a] * h[b] * h[b];
            if w == 0.0 {
                continue;
            }
            let mid = half_boundary(a, b, m1);
            let first = fitter
                .fit(0..mid, &[a, b])
                .map_err(|_| Error::HalfSampleRankDeficient { t1: a, t2: b })?;
            let second = fitter
                .fit(mid..t, &[a, b])
                .map_err(|_| Error::HalfSampleRankDeficient { t1: a, t2: b })?;
            // (t1, t2) = (a, b)
            first.residual_into(panel, a, &mut u1_a);
            second.residual_into(panel, b, &mut u2_b);
            // (t1, t2) = (b, a)
            first.residual_into(panel, b, &mut u1_b);
            second.residual_into(panel, a, &mut u2_a);
            for v in [&mut u1_a, &mut u2_b, &mut u1_b, &mut u2_a] {
                scaled_sign(v, &inv_sqrt_d);
            }
            let ab = dot(&u1_a, &u2_b);
            let ba = dot(&u1_b, &u2_a);
            sum += w * (ab * ab + ba * ba);
            pairs_used += 2;
        }
    }
    let nf = n as f64;
    let value = nf * nf / (omega * (omega - 1.0)) * sum;
    if !(value > 0.0) || !value.is_finite() {
        return Err(Error::NonPositiveTrace { value });
    }
    Ok(TrR2Estimate { value, pairs_used })
}

fn require_two_assets(n: usize, what: &str) -> Result<()> {
    if n < 2 {
        return Err(Error::InsufficientDof(format!(
            "{what} needs at least two assets (N = {n})"
        )));
    }
    Ok(())
}

/// `-2 ln N + ln ln N`, the extreme-value centering shared by SM and MAX.
fn gumbel_shift(n: usize) -> f64 {
    let ln_n = (n as f64).ln();
    -2.0 * ln_n + ln_n.ln()
}

/// `kappa = sum_t (h_t + H_tt)^2` with `H` the hat matrix of the factors.
///
/// Linearizing the spatial median of `Z = P_X eps` gives
/// `sum_t U(Z_t) ~ zeta_1 sum_t (h_t + H_tt) D^{-1/2} eps_t`: the sign map
/// cancels each period's own projection term, leaving the weight `h_t + H_tt`.
/// `kappa` is `T` when the factors are orthogonal to the intercept and have
/// negligible leverage.
pub fn effective_size(factors: &DMatrix<f64>, h: &DVector<f64>) -> Result<f64> {
    let gram_inv = gram_inverse(&(factors.transpose() * factors))?;
    let leverage = (factors * &gram_inv).component_mul(factors).column_sum();
    Ok(h.iter()
        .zip(leverage.iter())
        .map(|(a, b)| (a + b).powi(2))
        .sum())
}

/// Shared intermediate results for one panel.
struct Workspace<'a> {
    panel: &'a Panel,
    cfg: TestConfig,
    fit: FactorFit,
    tstats: Option<Result<TStatVector>>,
}

impl<'a> Workspace<'a> {
    fn new(panel: &'a Panel, cfg: TestConfig) -> Result<Self> {
        Ok(Workspace {
            panel,
            cfg,
            fit: fit_ols(panel)?,
            tstats: None,
        })
    }

    fn tstats(&mut self) -> Result<&TStatVector> {
        if self.tstats.is_none() {
            self.tstats = Some(studentized_t_from_fit(&self.fit, self.panel.p()));
        }
        match self.tstats.as_ref().unwrap() {
            Ok(ts) => Ok(ts),
            Err(e) => Err(e.clone()),
        }
    }

    /// `Q` with the signs of `Z` under the scale estimated from the
    /// intercept-adjusted residuals.
    fn ss_q(&self) -> Result<(f64, ScaleEstimate)> {
        let eps = self.fit.model_residuals();
        let scale = scale_only_fixpoint(&eps, self.cfg.fixpoint)?;
        let zero = DVector::zeros(self.panel.n());
        let (signs, _) = signs_and_radii(&self.fit.residuals, &zero, &scale.d);
        Ok((q_statistic(&signs, &self.fit.h), scale))
    }

    fn ss(&self) -> Result<TestResult> {
        let (q, scale) = self.ss_q()?;
        let tr = tr_r2_hat(self.panel, &self.fit, &scale.d)?;
        let delta = self.cfg.delta_q.value();
        let stat = (q - delta) / (2.0 * tr.value).sqrt();
        Ok(TestResult::new(Method::Ss, Some(stat), std_normal_sf(stat))
            .with("Q", q)
            .with("delta_Q", delta)
            .with("trR2_hat", tr.value)
            .with("pairs_used", tr.pairs_used as f64)
            .with("omega_T", self.fit.omega_t)
            .with("scale_iterations", scale.iterations as f64))
    }

    fn sm(&self) -> Result<TestResult> {
        let n = self.panel.n();
        require_two_assets(n, "SM")?;
        let est = median_scale_fixpoint(&self.fit.residuals, self.cfg.fixpoint)?;
        let radii: Vec<f64> = est.radii.iter().copied().collect();
        let zeta = zeta_hat(&radii)?;
        let max_std = est
            .theta
            .iter()
            .zip(est.d.iter())
            .map(|(th, d)| th * th / d)
            .fold(0.0, f64::max);
        // The fixed point leaves mean r^2 = N, which shrinks D by about v / T;
        // rescaling by T / v makes D estimate diag(Cov(eps)). The spatial
        // median's null variance scales with the effective size kappa, so
        // T^2 / kappa replaces T.
        let t = self.panel.t() as f64;
        let v = t - self.panel.p() as f64 - 1.0;
        if v < 1.0 {
            return Err(Error::InsufficientDof(format!(
                "SM needs T - p - 1 >= 1, got {v}"
            )));
        }
        let kappa = effective_size(self.panel.factors(), &self.fit.h)?;
        let max_std = max_std * v / kappa;
        let stat = t * max_std * zeta.zeta + gumbel_shift(n);
        Ok(TestResult::new(Method::Sm, Some(stat), gumbel_g_sf(stat))
            .with("zeta_hat", zeta.zeta)
            .with("max_theta_sq_over_d", max_std)
            .with("kappa", kappa)
            .with("iterations", est.iterations as f64)
            .with("residual_location", est.residual_location)
            .with("residual_scale", est.residual_scale))
    }

    fn max(&mut self) -> Result<TestResult> {
        let n = self.panel.n();
        require_two_assets(n, "MAX")?;
        let ts = self.tstats()?;
        let stat = ts.t_sq.max();
        Ok(TestResult::new(
            Method::Max,
            Some(stat),
            gumbel_g_sf(stat + gumbel_shift(n)),
        ))
    }

    fn py(&mut self) -> Result<TestResult> {
        let n = self.panel.n();
        let t = self.panel.t();
        let c = self.cfg.py_threshold;
        let ts = self.tstats()?;
        let v = ts.dof as f64;
        if v <= 4.0 {
            return Err(Error::InsufficientDof(format!(
                "PY needs v = T - p - 1 > 4, got {v}"
            )));
        }
        let sum_t2 = ts.t_sq.sum();
        let rho2 = thresholded_rho_sq(&self.fit.model_residuals(), c, t);
        let stat = py_statistic(sum_t2, n, v, rho2);
        Ok(TestResult::new(Method::Py, Some(stat), std_normal_sf(stat))
            .with("rho_tilde_sq", rho2)
            .with("v", v))
    }

    fn grs(&self) -> Result<TestResult> {
        grs_from_fit(&self.fit, self.panel.p())
    }
}

/// Average squared residual correlation over pairs whose correlation clears
/// the threshold `c sqrt(log N / T)`.
fn thresholded_rho_sq(eps: &DMatrix<f64>, c: f64, t: usize) -> f64 {
    let n = eps.ncols();
    if n < 2 {
        return 0.0;
    }
    let cutoff = c * ((n as f64).ln() / t as f64).sqrt();
    let norms: Vec<f64> = eps.column_iter().map(|col| col.norm()).collect();
    let gram = eps.transpose() * eps;
    let mut sum = 0.0;
    for j in 1..n {
        for i in 0..j {
            let denom = norms[i] * norms[j];
            if denom == 0.0 {
                continue;
            }
            let r = gram[(i, j)] / denom;
            if r.abs() >= cutoff {
                sum += r * r;
            }
        }
    }
    let nf = n as f64;
    2.0 / (nf * (nf - 1.0)) * sum
}

/// `N^{-1/2} sum_i (t_i^2 - v/(v-2)) / (v/(v-2) sqrt(2 (v-1)/(v-4) (1 + (N-1) rho^2)))`.
fn py_statistic(sum_t2: f64, n: usize, v: f64, rho2: f64) -> f64 {
    let nf = n as f64;
    let mean = v / (v - 2.0);
    let centered = (sum_t2 - nf * mean) / nf.sqrt();
    let scale = mean * (2.0 * (v - 1.0) / (v - 4.0) * (1.0 + (nf - 1.0) * rho2)).sqrt();
    centered / scale
}

fn grs_from_fit(fit: &FactorFit, p: usize) -> Result<TestResult> {
    let t = fit.t();
    let n = fit.n();
    if n + p >= t {
        return Err(Error::GrsDimension { n, t, p });
    }
    let eps = fit.model_residuals();
    let l = eps.transpose() * &eps / t as f64;
    let chol = l.cholesky().ok_or(Error::RankDeficient {
        condition: f64::INFINITY,
        bound: crate::regression::GRAM_CONDITION_BOUND,
        direction: Vec::new(),
    })?;
    let quad = fit.alpha_hat.dot(&chol.solve(&fit.alpha_hat));
    let d2 = (t - n - p) as f64;
    let stat = d2 / n as f64 * (fit.omega_t / t as f64) * quad;
    let p_value = f_sf(stat, n as f64, d2)?;
    Ok(TestResult::new(Method::Grs, Some(stat), p_value).with("omega_T", fit.omega_t))
}

pub fn test_ss(panel: &Panel, cfg: &TestConfig) -> Result<TestResult> {
    Workspace::new(panel, *cfg)?.ss()
}

/// The SS numerator `Q` alone, without the trace estimate.
pub fn ss_q_statistic(panel: &Panel, cfg: &TestConfig) -> Result<f64> {
    Ok(Workspace::new(panel, *cfg)?.ss_q()?.0)
}

pub fn test_sm(panel: &Panel, cfg: &TestConfig) -> Result<TestResult> {
    Workspace::new(panel, *cfg)?.sm()
}

pub fn test_max(panel: &Panel) -> Result<TestResult> {
    Workspace::new(panel, TestConfig::default())?.max()
}

pub fn test_py(panel: &Panel, cfg: &TestConfig) -> Result<TestResult> {
    Workspace::new(panel, *cfg)?.py()
}

pub fn grs_test(panel: &Panel) -> Result<TestResult> {
    grs_from_fit(&fit_ols(panel)?, panel.p())
}

/// Truncated Cauchy combination of the SS and SM p-values.
pub fn test_cc(p_ss: f64, p_sm: f64) -> Result<TestResult> {
    let mut stat = 0.0;
    for p in [p_ss, p_sm] {
        if p == 0.0 {
            return Err(Error::PValueUnderflow);
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "p-value {p} outside (0, 1]"
            )));
        }
        if p < 0.5 {
            stat += 0.5 * ((0.5 - p) * PI).tan();
        }
    }
    Ok(TestResult::new(Method::Cc, Some(stat), cauchy_sf(stat))
        .with("p_SS", p_ss)
        .with("p_SM", p_sm))
}

/// Bonferroni combination of MAX and PY: `min(1, 2 min(p_max, p_py))`.
pub fn test_com(p_max: f64, p_py: f64) -> Result<TestResult> {
    for p in [p_max, p_py] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "p-value {p} outside [0, 1]"
            )));
        }
    }
    Ok(
        TestResult::new(Method::Com, None, (2.0 * p_max.min(p_py)).min(1.0))
            .with("p_MAX", p_max)
            .with("p_PY", p_py),
    )
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_VALUE_FLOOR, 1.0)
}

/// Runs `methods` on one panel. Each entry fails independently; CC fails when
/// SS or SM does, and COM when MAX or PY does.
pub fn run_methods(
    panel: &Panel,
    methods: &[Method],
    cfg: &TestConfig,
) -> Result<Vec<(Method, Result<TestResult>)>> {
    let mut ws = Workspace::new(panel, *cfg)?;
    let wants = |m: Method| methods.contains(&m);
    let ss = (wants(Method::Ss) || wants(Method::Cc)).then(|| ws.ss());
    let sm = (wants(Method::Sm) || wants(Method::Cc)).then(|| ws.sm());
    let max = (wants(Method::Max) || wants(Method::Com)).then(|| ws.max());
    let py = (wants(Method::Py) || wants(Method::Com)).then(|| ws.py());

    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let r = match m {
            Method::Grs => ws.grs(),
            Method::Py => cloned(py.as_ref()),
            Method::Max => cloned(max.as_ref()),
            Method::Ss => cloned(ss.as_ref()),
            Method::Sm => cloned(sm.as_ref()),
            Method::Cc => match (cloned(ss.as_ref()), cloned(sm.as_ref())) {
                (Ok(a), Ok(b)) => test_cc(clamp_p(a.p_value), clamp_p(b.p_value)),
                (Err(e), _) | (_, Err(e)) => Err(e),
            },
            Method::Com => match (cloned(max.as_ref()), cloned(py.as_ref())) {
                (Ok(a), Ok(b)) => test_com(a.p_value, b.p_value),
                (Err(e), _) | (_, Err(e)) => Err(e),
            },
        };
        out.push((m, r));
    }
    Ok(out)
}

fn cloned(r: Option<&Result<TestResult>>) -> Result<TestResult> {
    match r.expect("component computed") {
        Ok(v) => Ok(v.clone()),
        Err(e) => Err(e.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regression::leave_out_ols;
    use crate::regression::test_support::{random_factors, random_matrix};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn panel(t: usize, n: usize, p: usize, seed: u64) -> Panel {
        let x = random_factors(t, p, seed);
        let e = random_matrix(t, n, seed.wrapping_add(1));
        let beta = random_matrix(n, p, seed.wrapping_add(2)).map(|v| 1.0 + 0.3 * v);
        Panel::new(&x * beta.transpose() + e, x).unwrap()
    }

    fn double_loop_q(u: &DMatrix<f64>, h: &DVector<f64>) -> f64 {
        let t = u.nrows();
        let mut s = 0.0;
        for t1 in 0..t {
            for t2 in 0..t {
                if t1 != t2 {
                    s += h[t1] * h[t2] * u.row(t1).dot(&u.row(t2));
                }
            }
        }
        u.ncols() as f64 / h.dot(h) * s
    }

    #[test]
    fn q_orthogonal_and_identical_signs() {
        let h = DVector::from_vec(vec![1.0, 1.0]);
        let orth = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(q_statistic(&orth, &h), 0.0, epsilon = 1e-15);
        let same = DMatrix::from_row_slice(2, 3, &[0.6, 0.8, 0.0, 0.6, 0.8, 0.0]);
        assert_abs_diff_eq!(q_statistic(&same, &h), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn q_matches_double_loop() {
        let raw = random_matrix(6, 4, 5);
        let zero = DVector::zeros(4);
        let (u, _) = signs_and_radii(&raw, &zero, &DVector::from_element(4, 1.0));
        let h = random_matrix(6, 1, 6).column(0).into_owned();
        assert_abs_diff_eq!(q_statistic(&u, &h), double_loop_q(&u, &h), epsilon = 1e-10);
    }

    /// Literal ordered-pair transcription of the leave-two-out estimator.
    fn tr_r2_transcription(panel: &Panel, h: &DVector<f64>, d: &DVector<f64>) -> f64 {
        let t = panel.t();
        let n = panel.n();
        let omega = h.dot(h);
        let y = panel.returns();
        let x = panel.factors();
        let sign_at = |beta: &DMatrix<f64>, s: usize| -> DVector<f64> {
            let mut e = DVector::zeros(n);
            for j in 0..n {
                let fitted: f64 = (0..panel.p()).map(|k| beta[(j, k)] * x[(s, k)]).sum();
                e[j] = (y[(s, j)] - fitted) / d[j].sqrt();
            }
            let norm = e.norm();
            e / norm
        };
        let mut total = 0.0;
        for t1 in 0..t {
            for t2 in 0..t {
                if t1 == t2 {
                    continue;
                }
                let kept: Vec<usize> = (0..t).filter(|&s| s != t1 && s != t2).collect();
                let first_len = (kept.len() + 1) / 2;
                let (h1, h2) = kept.split_at(first_len);
                let b1 = leave_out_ols(panel, h1).unwrap();
                let b2 = leave_out_ols(panel, h2).unwrap();
                let c = sign_at(&b1, t1).dot(&sign_at(&b2, t2));
                total += h[t1].powi(2) * h[t2].powi(2) * c * c;
            }
        }
        (n * n) as f64 / (omega * (omega - 1.0)) * total
    }

    #[test]
    fn tr_r2_matches_transcription() {
        let p = panel(12, 3, 1, 77);
        let fit = fit_ols(&p).unwrap();
        let d = DVector::from_vec(vec![0.7, 1.3, 2.1]);
        let est = tr_r2_hat(&p, &fit, &d).unwrap();
        let oracle = tr_r2_transcription(&p, &fit.h, &d);
        assert_abs_diff_eq!(est.value, oracle, epsilon = 1e-9);
        assert_eq!(est.pairs_used, 12 * 11);
    }

    #[test]
    fn tr_r2_matches_transcription_odd_t_two_factors() {
        let p = panel(13, 4, 2, 78);
        let fit = fit_ols(&p).unwrap();
        let d = DVector::from_element(4, 1.0);
        let est = tr_r2_hat(&p, &fit, &d).unwrap();
        assert_abs_diff_eq!(
            est.value,
            tr_r2_transcription(&p, &fit.h, &d),
            epsilon = 1e-9
        );
    }

    #[test]
    fn tr_r2_orthogonal_signs_hit_the_floor() {
        // Period s loads only asset s, so the residual at a dropped period is
        // supported on itself plus the assets of its own half: the two halves
        // never overlap and every cross product vanishes.
        let t = 12;
        let y = DMatrix::from_fn(t, t, |s, j| if s == j { 1.0 + s as f64 } else { 0.0 });
        let p = Panel::new(y, random_factors(t, 1, 3)).unwrap();
        let fit = fit_ols(&p).unwrap();
        let err = tr_r2_hat(&p, &fit, &DVector::from_element(t, 1.0)).unwrap_err();
        assert!(matches!(err, Error::NonPositiveTrace { value } if value == 0.0));
    }

    #[test]
    fn tr_r2_identity_correlation() {
        let (t, n) = (100, 50);
        let x = random_factors(t, 1, 9);
        let p = Panel::new(random_matrix(t, n, 10), x).unwrap();
        let fit = fit_ols(&p).unwrap();
        let est = tr_r2_hat(&p, &fit, &DVector::from_element(n, 1.0)).unwrap();
        let ratio = est.value / n as f64;
        assert!((0.8..=1.2).contains(&ratio), "tr/N = {ratio}");
    }

    #[test]
    fn tr_r2_needs_enough_periods() {
        let p = panel(7, 3, 2, 1);
        let fit = fit_ols(&p).unwrap();
        let err = tr_r2_hat(&p, &fit, &DVector::from_element(3, 1.0)).unwrap_err();
        assert!(matches!(err, Error::InsufficientDof(_)));
    }

    #[test]
    fn half_boundary_splits_retained_rows() {
        for t in 6..15 {
            let m1 = (t - 2usize).div_ceil(2);
            for a in 0..t {
                for b in (a + 1)..t {
                    let mid = half_boundary(a, b, m1);
                    let first = (0..mid).filter(|&s| s != a && s != b).count();
                    let second = (mid..t).filter(|&s| s != a && s != b).count();
                    assert_eq!((first, second), (m1, t - 2 - m1));
                }
            }
        }
    }

    #[test]
    fn cc_examples() {
        let r = test_cc(0.5, 0.5).unwrap();
        assert_eq!(r.statistic, Some(0.0));
        assert_abs_diff_eq!(r.p_value, 0.5, epsilon = 1e-15);

        let r = test_cc(0.01, 0.01).unwrap();
        assert_abs_diff_eq!(r.statistic.unwrap(), (0.49 * PI).tan(), epsilon = 1e-10);
        assert_abs_diff_eq!(r.statistic.unwrap(), 31.8205, epsilon = 1e-4);
        assert_abs_diff_eq!(r.p_value, 0.0100, epsilon = 1e-4);

        let r = test_cc(0.9, 0.9).unwrap();
        assert_eq!(r.statistic, Some(0.0));
        assert_abs_diff_eq!(r.p_value, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn cc_rejects_zero_p_value() {
        let err = test_cc(0.0, 0.3).unwrap_err();
        assert_eq!(err.to_string(), "p-value underflow; clamp upstream");
        assert!(test_cc(0.3, 1.5).is_err());
        assert!(test_cc(P_VALUE_FLOOR, P_VALUE_FLOOR).unwrap().p_value > 0.0);
    }

    #[test]
    fn com_examples() {
        assert_eq!(test_com(0.5, 0.5).unwrap().p_value, 1.0);
        assert_abs_diff_eq!(test_com(0.01, 0.30).unwrap().p_value, 0.02, epsilon = 1e-15);
        assert!(test_com(0.01, 0.30).unwrap().statistic.is_none());
        for gamma in [0.01, 0.05] {
            for i in 0..=100 {
                for j in 0..=100 {
                    let (a, b) = (i as f64 / 1000.0, j as f64 / 1000.0);
                    let p = test_com(a, b).unwrap().p_value;
                    assert_eq!(p <= gamma, a.min(b) <= gamma / 2.0, "({a}, {b}) at {gamma}");
                }
            }
        }
        assert!(test_com(-0.1, 0.2).is_err());
    }

    #[test]
    fn py_centered_case_is_zero() {
        let v = 55.0;
        let n = 30;
        let stat = py_statistic(n as f64 * v / (v - 2.0), n, v, 0.0);
        assert_abs_diff_eq!(stat, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(std_normal_sf(stat), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn py_increases_with_each_t_squared() {
        let base = py_statistic(40.0, 30, 55.0, 0.02);
        assert!(py_statistic(40.5, 30, 55.0, 0.02) > base);
        // Larger correlation shrinks a positive statistic.
        assert!(py_statistic(40.0, 30, 55.0, 0.2) < base);
    }

    #[test]
    fn py_needs_five_dof() {
        let p = panel(6, 3, 1, 4);
        let err = test_py(&p, &TestConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientDof(_)));
        assert!(err.to_string().contains("insufficient degrees of freedom"));
    }

    #[test]
    fn thresholding_drops_small_correlations() {
        // Two identical assets and one orthogonal to both.
        let t = 40;
        let a = random_matrix(t, 1, 8);
        let mut eps = DMatrix::zeros(t, 3);
        eps.set_column(0, &a.column(0));
        eps.set_column(1, &a.column(0));
        let mut b = random_matrix(t, 1, 9).column(0).into_owned();
        let proj = b.dot(&a.column(0)) / a.column(0).norm_squared();
        b -= a.column(0) * proj;
        eps.set_column(2, &b);
        // Only the perfectly correlated pair survives: 2 / (3 * 2) * 1.
        assert_abs_diff_eq!(thresholded_rho_sq(&eps, 2.0, t), 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(thresholded_rho_sq(&eps, 1e9, t), 0.0);
    }

    #[test]
    fn max_is_idempotent_under_duplication() {
        let p = panel(40, 6, 2, 12);
        let r = test_max(&p).unwrap();
        let ts = crate::regression::studentized_t(&p).unwrap();
        let best = ts.t_sq.imax();
        let (y, x) = p.clone().into_parts();
        let mut y2 = DMatrix::zeros(40, 7);
        y2.columns_mut(0, 6).copy_from(&y);
        y2.set_column(6, &y.column(best));
        let dup = Panel::new(y2, x).unwrap();
        assert_abs_diff_eq!(
            test_max(&dup).unwrap().statistic.unwrap(),
            r.statistic.unwrap(),
            epsilon = 1e-12
        );
        assert!(r.statistic.unwrap() >= 0.0);
    }

    fn zero_alpha_panel(t: usize, n: usize, seed: u64) -> Panel {
        let x = random_factors(t, 2, seed);
        let fit_x = crate::regression::annihilator_weights(&x).unwrap();
        let h = fit_x.h;
        let mut y = random_matrix(t, n, seed + 1);
        for mut col in y.column_iter_mut() {
            let c = col.dot(&h) / h.dot(&h);
            col -= &h * c;
        }
        Panel::new(y, x).unwrap()
    }

    #[test]
    fn grs_zero_alpha() {
        let p = zero_alpha_panel(40, 5, 31);
        let r = grs_test(&p).unwrap();
        assert_abs_diff_eq!(r.statistic.unwrap(), 0.0, epsilon = 1e-20);
        assert_abs_diff_eq!(r.p_value, 1.0, epsilon = 1e-12);
    }

    /// Two-sided Student-t tail by Simpson integration of the density.
    fn t_two_sided(t: f64, v: f64) -> f64 {
        let log_c = libm::lgamma((v + 1.0) / 2.0) - libm::lgamma(v / 2.0) - 0.5 * (v * PI).ln();
        let dens = |x: f64| (log_c - (v + 1.0) / 2.0 * (1.0 + x * x / v).ln()).exp();
        let m = 20_000;
        let hstep = t.abs() / m as f64;
        let mut s = dens(0.0) + dens(t.abs());
        for k in 1..m {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * dens(k as f64 * hstep);
        }
        1.0 - 2.0 * s * hstep / 3.0
    }

    #[test]
    fn grs_single_asset_is_squared_t() {
        let (t, p) = (30, 2);
        let x = random_factors(t, p, 41);
        let y = random_matrix(t, 1, 42).map(|v| v + 0.5);
        let panel = Panel::new(y, x).unwrap();
        let r = grs_test(&panel).unwrap();
        let ts = crate::regression::studentized_t(&panel).unwrap();
        assert_abs_diff_eq!(r.statistic.unwrap(), ts.t_sq[0], epsilon = 1e-10);
        let v = (t - p - 1) as f64;
        let oracle = t_two_sided(ts.t_sq[0].sqrt(), v);
        assert_abs_diff_eq!(r.p_value, oracle, epsilon = 1e-9);
    }

    #[test]
    fn grs_dimension_and_scale() {
        let p = panel(10, 7, 3, 2);
        let err = grs_test(&p).unwrap_err();
        assert_eq!(
            err.to_string(),
            "GRS requires N < T - p (N = 7, T = 10, p = 3)"
        );

        let p = panel(50, 6, 3, 5);
        let a = grs_test(&p).unwrap();
        let b = grs_test(&p.rescale_assets(&[3.5; 6]).unwrap()).unwrap();
        assert_abs_diff_eq!(a.statistic.unwrap(), b.statistic.unwrap(), epsilon = 1e-9);
        assert_abs_diff_eq!(a.p_value, b.p_value, epsilon = 1e-12);
    }

    #[test]
    fn effective_size_matches_explicit_hat_matrix() {
        let x = random_factors(15, 3, 90);
        let fit = fit_ols(&Panel::new(random_matrix(15, 2, 91), x.clone()).unwrap()).unwrap();
        let hat = &x * (x.transpose() * &x).try_inverse().unwrap() * x.transpose();
        let oracle: f64 = (0..15).map(|s| (fit.h[s] + hat[(s, s)]).powi(2)).sum();
        assert_abs_diff_eq!(effective_size(&x, &fit.h).unwrap(), oracle, epsilon = 1e-10);
    }

    #[test]
    fn effective_size_with_centred_factors() {
        // Factors orthogonal to the intercept leave h = 1, so
        // kappa = T + 2p + sum_t H_tt^2.
        let t = 8;
        let x = DMatrix::from_fn(t, 1, |s, _| if s % 2 == 0 { 1.0 } else { -1.0 });
        let h = DVector::from_element(t, 1.0);
        let lev = 1.0 / t as f64;
        let expect = t as f64 + 2.0 + t as f64 * lev * lev;
        assert_abs_diff_eq!(effective_size(&x, &h).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn spatial_tests_are_scale_invariant() {
        let p = panel(40, 12, 3, 61);
        let scale: Vec<f64> = (0..12).map(|j| 0.2 + 0.7 * j as f64).collect();
        let q = p.rescale_assets(&scale).unwrap();
        let cfg = TestConfig::default();
        let methods = [Method::Ss, Method::Sm, Method::Cc, Method::Max, Method::Py];
        let a = run_methods(&p, &methods, &cfg).unwrap();
        let b = run_methods(&q, &methods, &cfg).unwrap();
        for ((m, ra), (_, rb)) in a.iter().zip(&b) {
            let (ra, rb) = (ra.as_ref().unwrap(), rb.as_ref().unwrap());
            assert_abs_diff_eq!(ra.p_value, rb.p_value, epsilon = 1e-6);
            if *m == Method::Sm || *m == Method::Ss {
                assert_abs_diff_eq!(ra.statistic.unwrap(), rb.statistic.unwrap(), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn every_test_is_permutation_invariant() {
        let p = panel(40, 12, 3, 62);
        let order: Vec<usize> = (0..12).rev().collect();
        let q = p.permute_assets(&order).unwrap();
        let cfg = TestConfig::default();
        let a = run_methods(&p, &Method::ALL, &cfg).unwrap();
        let b = run_methods(&q, &Method::ALL, &cfg).unwrap();
        for ((m, ra), (_, rb)) in a.iter().zip(&b) {
            let (ra, rb) = (ra.as_ref().unwrap(), rb.as_ref().unwrap());
            assert_abs_diff_eq!(ra.p_value, rb.p_value, epsilon = 1e-9);
            assert!((0.0..=1.0).contains(&ra.p_value), "{m}");
        }
    }

    #[test]
    fn combined_runner_matches_single_tests() {
        let p = panel(36, 10, 3, 63);
        let cfg = TestConfig::default();
        let all = run_methods(&p, &Method::ALL, &cfg).unwrap();
        let get = |m: Method| {
            all.iter()
                .find(|(k, _)| *k == m)
                .unwrap()
                .1
                .clone()
                .unwrap()
        };
        assert_eq!(get(Method::Ss), test_ss(&p, &cfg).unwrap());
        assert_eq!(get(Method::Sm), test_sm(&p, &cfg).unwrap());
        assert_eq!(get(Method::Max), test_max(&p).unwrap());
        assert_eq!(get(Method::Py), test_py(&p, &cfg).unwrap());
        assert_eq!(get(Method::Grs), grs_test(&p).unwrap());
        let cc = test_cc(get(Method::Ss).p_value, get(Method::Sm).p_value).unwrap();
        assert_eq!(get(Method::Cc), cc);
        let com = test_com(get(Method::Max).p_value, get(Method::Py).p_value).unwrap();
        assert_eq!(get(Method::Com), com);
        for (_, r) in &all {
            for v in r.as_ref().unwrap().diagnostics.values() {
                assert!(v.is_finite());
            }
        }
    }

    #[test]
    fn delta_q_shifts_the_ss_statistic() {
        let p = panel(30, 8, 2, 64);
        let base = test_ss(&p, &TestConfig::default()).unwrap();
        let cfg = TestConfig {
            delta_q: DeltaQ::Fixed(2.0),
            ..TestConfig::default()
        };
        let shifted = test_ss(&p, &cfg).unwrap();
        let tr = base.diagnostics["trR2_hat"];
        let expect = base.statistic.unwrap() - 2.0 / (2.0 * tr).sqrt();
        assert_abs_diff_eq!(shifted.statistic.unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn failures_stay_local_to_their_method() {
        // N = 1: SM, MAX and CC, COM need two assets; GRS and SS still run.
        let p = panel(30, 1, 2, 65);
        let out = run_methods(&p, &Method::ALL, &TestConfig::default()).unwrap();
        for (m, r) in out {
            match m {
                Method::Grs | Method::Ss | Method::Py => assert!(r.is_ok(), "{m}: {r:?}"),
                _ => assert!(r.is_err(), "{m}"),
            }
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(m.name().to_lowercase().parse::<Method>().unwrap(), m);
        }
        assert!("XYZ".parse::<Method>().is_err());
    }

    proptest! {
        #[test]
        fn cc_is_monotone(a in 0.001f64..0.5, b in 0.001f64..0.5, da in 0.0f64..0.1) {
            let lo = test_cc(a, b).unwrap().p_value;
            let hi = test_cc((a + da).min(0.5), b).unwrap().p_value;
            prop_assert!(hi >= lo - 1e-15);
            let hi = test_cc(a, (b + da).min(0.5)).unwrap().p_value;
            prop_assert!(hi >= lo - 1e-15);
        }

        #[test]
        fn p_values_in_unit_interval(seed in any::<u64>()) {
            let p = panel(30, 8, 3, seed);
            for (m, r) in run_methods(&p, &Method::ALL, &TestConfig::default()).unwrap() {
                let r = r.unwrap();
                prop_assert!((0.0..=1.0).contains(&r.p_value), "{}", m);
                if let Some(s) = r.statistic {
                    prop_assert!(s.is_finite());
                }
            }
        }

        #[test]
        fn q_identity_matches_double_loop(seed in any::<u64>(), t in 3usize..12, n in 1usize..6) {
            let raw = random_matrix(t, n, seed);
            let (u, _) = signs_and_radii(&raw, &DVector::zeros(n), &DVector::from_element(n, 1.0));
            let h = random_matrix(t, 1, seed ^ 0x55).column(0).into_owned();
            let q = q_statistic(&u, &h);
            prop_assert!((q - double_loop_q(&u, &h)).abs() <= 1e-10 * (1.0 + q.abs()));
        }
    }
}
