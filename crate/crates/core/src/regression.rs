//! Least squares on the factor matrix.
//!
//! The slopes are the no-intercept regression of each asset on the factors,
//! `beta_i = (X'X)^{-1} X' Y_i`, and the intercept is recovered through the
//! annihilator weights `h = (I - X(X'X)^{-1}X') 1_T` as `alpha_i = Y_i'h / omega_T`
//! with `omega_T = h'h`. The residual matrix `Z = Y - X beta'` therefore still
//! carries the intercept: its rows average to `omega_T / T * alpha`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Condition number above which a factor Gram matrix is treated as singular.
pub const GRAM_CONDITION_BOUND: f64 = 1e12;

/// Lower bound on `omega_T / T` below which the intercept is not identifiable.
pub const OMEGA_FLOOR: f64 = 1e-8;

/// A `T x N` panel of excess returns with its `T x p` factor realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    returns: DMatrix<f64>,
    factors: DMatrix<f64>,
}

impl Panel {
    pub fn new(returns: DMatrix<f64>, factors: DMatrix<f64>) -> Result<Self> {
        let (t, n) = returns.shape();
        let p = factors.ncols();
        if factors.nrows() != t {
            return Err(Error::InvalidPanel(format!(
                "returns have {t} periods but factors have {}",
                factors.nrows()
            )));
        }
        if n == 0 || p == 0 {
            return Err(Error::InvalidPanel(format!(
                "need at least one asset and one factor (N = {n}, p = {p})"
            )));
        }
        if t < p + 2 {
            return Err(Error::InvalidPanel(format!(
                "need T >= p + 2 periods (T = {t}, p = {p})"
            )));
        }
        if let Some(pos) = returns.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidPanel(format!(
                "non-finite return at period {}, asset {}",
                pos % t,
                pos / t
            )));
        }
        if let Some(pos) = factors.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidPanel(format!(
                "non-finite factor at period {}, factor {}",
                pos % t,
                pos / t
            )));
        }
        Ok(Panel { returns, factors })
    }

    /// Number of periods `T`.
    pub fn t(&self) -> usize {
        self.returns.nrows()
    }

    /// Number of assets `N`.
    pub fn n(&self) -> usize {
        self.returns.ncols()
    }

    /// Number of factors `p`.
    pub fn p(&self) -> usize {
        self.factors.ncols()
    }

    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    pub fn factors(&self) -> &DMatrix<f64> {
        &self.factors
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.returns, self.factors)
    }

    /// Consecutive periods `range` as a new panel.
    pub fn window(&self, range: Range<usize>) -> Result<Panel> {
        if range.end > self.t() || range.start >= range.end {
            return Err(Error::InvalidArgument(format!(
                "window {range:?} outside 0..{}",
                self.t()
            )));
        }
        let len = range.end - range.start;
        Panel::new(
            self.returns.rows(range.start, len).into_owned(),
            self.factors.rows(range.start, len).into_owned(),
        )
    }

    /// Returns with every asset column multiplied by the matching entry of `scale`.
    pub fn rescale_assets(&self, scale: &[f64]) -> Result<Panel> {
        if scale.len() != self.n() {
            return Err(Error::InvalidArgument(format!(
                "{} scale factors for {} assets",
                scale.len(),
                self.n()
            )));
        }
        let mut returns = self.returns.clone();
        for (mut col, &s) in returns.column_iter_mut().zip(scale) {
            col *= s;
        }
        Panel::new(returns, self.factors.clone())
    }

    /// Asset columns reordered so that new column `j` is old column `order[j]`.
    pub fn permute_assets(&self, order: &[usize]) -> Result<Panel> {
        if order.len() != self.n() || order.iter().any(|&j| j >= self.n()) {
            return Err(Error::InvalidArgument("invalid asset permutation".into()));
        }
        let returns = self.returns.select_columns(order);
        Panel::new(returns, self.factors.clone())
    }
}

/// `h = M_X 1_T` together with `omega_T = h'h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Annihilator {
    pub h: DVector<f64>,
    pub omega_t: f64,
}

/// OLS output shared by all tests.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorFit {
    /// `N x p` slopes; row `i` is `beta_i'`.
    pub beta: DMatrix<f64>,
    pub alpha_hat: DVector<f64>,
    /// `T x N` residuals `Z = Y - X beta'`; row `t` is `Z_t'`.
    pub residuals: DMatrix<f64>,
    pub h: DVector<f64>,
    pub omega_t: f64,
}

impl FactorFit {
    /// Fits the slopes and intercepts on raw matrices. Only requires the
    /// normal equations to be solvable; [`fit_ols`] is the checked entry point.
    pub fn from_matrices(returns: &DMatrix<f64>, factors: &DMatrix<f64>) -> Result<Self> {
        let gram_inv = gram_inverse(&(factors.transpose() * factors))?;
        let Annihilator { h, omega_t } = annihilator_from_inverse(factors, &gram_inv)?;
        let beta = (returns.transpose() * factors) * &gram_inv;
        let residuals = returns - factors * beta.transpose();
        let alpha_hat = returns.transpose() * &h / omega_t;
        Ok(FactorFit {
            beta,
            alpha_hat,
            residuals,
            h,
            omega_t,
        })
    }

    pub fn t(&self) -> usize {
        self.residuals.nrows()
    }

    pub fn n(&self) -> usize {
        self.residuals.ncols()
    }

    /// Intercept-adjusted residuals `eps_i = P_X (Y_i - alpha_i 1_T) = Z_i - alpha_i h`.
    pub fn model_residuals(&self) -> DMatrix<f64> {
        &self.residuals - &self.h * self.alpha_hat.transpose()
    }
}

/// Squared t-statistics of the intercepts with `dof = T - p - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TStatVector {
    pub t_sq: DVector<f64>,
    pub dof: usize,
}

/// Inverse of a small symmetric positive definite Gram matrix, refusing
/// anything whose condition number exceeds [`GRAM_CONDITION_BOUND`].
pub(crate) fn gram_inverse(gram: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_condition(gram)?;
    gram.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::RankDeficient {
            condition: f64::INFINITY,
            bound: GRAM_CONDITION_BOUND,
            direction: Vec::new(),
        })
}

fn check_condition(gram: &DMatrix<f64>) -> Result<()> {
    let eig = SymmetricEigen::new(gram.clone());
    let (mut lo, mut hi) = (0, 0);
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev < eig.eigenvalues[lo] {
            lo = k;
        }
        if ev > eig.eigenvalues[hi] {
            hi = k;
        }
    }
    let min = eig.eigenvalues[lo];
    let max = eig.eigenvalues[hi];
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= GRAM_CONDITION_BOUND) {
        return Err(Error::RankDeficient {
            condition,
            bound: GRAM_CONDITION_BOUND,
            direction: eig.eigenvectors.column(lo).iter().copied().collect(),
        });
    }
    Ok(())
}

fn annihilator_from_inverse(
    factors: &DMatrix<f64>,
    gram_inv: &DMatrix<f64>,
) -> Result<Annihilator> {
    let t = factors.nrows();
    let ones = DVector::from_element(t, 1.0);
    let coef = gram_inv * (factors.transpose() * &ones);
    let h = ones - factors * coef;
    let omega_t = h.dot(&h);
    if !(omega_t / t as f64 > OMEGA_FLOOR) {
        return Err(Error::InterceptNotIdentifiable { omega_t });
    }
    Ok(Annihilator { h, omega_t })
}

/// `h = (I - X(X'X)^{-1}X') 1_T` and `omega_T = h'h`.
pub fn annihilator_weights(factors: &DMatrix<f64>) -> Result<Annihilator> {
    let gram_inv = gram_inverse(&(factors.transpose() * factors))?;
    annihilator_from_inverse(factors, &gram_inv)
}

pub fn fit_ols(panel: &Panel) -> Result<FactorFit> {
    FactorFit::from_matrices(panel.returns(), panel.factors())
}

/// OLS slopes (`N x p`) using only the rows listed in `keep`.
pub fn leave_out_ols(panel: &Panel, keep: &[usize]) -> Result<DMatrix<f64>> {
    let p = panel.p();
    if let Some(&bad) = keep.iter().find(|&&r| r >= panel.t()) {
        return Err(Error::InvalidArgument(format!(
            "row {bad} outside panel of {} periods",
            panel.t()
        )));
    }
    if keep.len() < p + 1 {
        return Err(Error::RestrictedRankDeficient { kept: keep.len() });
    }
    let y = panel.returns().select_rows(keep);
    let x = panel.factors().select_rows(keep);
    let gram_inv = gram_inverse(&(x.transpose() * &x))
        .map_err(|_| Error::RestrictedRankDeficient { kept: keep.len() })?;
    Ok((y.transpose() * &x) * gram_inv)
}

pub fn studentized_t(panel: &Panel) -> Result<TStatVector> {
    let fit = fit_ols(panel)?;
    studentized_t_from_fit(&fit, panel.p())
}

pub(crate) fn studentized_t_from_fit(fit: &FactorFit, p: usize) -> Result<TStatVector> {
    let t = fit.t();
    if t < p + 2 {
        return Err(Error::InsufficientDof(format!(
            "t-statistics need T - p - 1 >= 1 (T = {t}, p = {p})"
        )));
    }
    let dof = t - p - 1;
    let mut t_sq = DVector::zeros(fit.n());
    for (i, z) in fit.residuals.column_iter().enumerate() {
        let a = fit.alpha_hat[i];
        let rss: f64 = z
            .iter()
            .zip(fit.h.iter())
            .map(|(zt, ht)| {
                let e = zt - a * ht;
                e * e
            })
            .sum();
        let scale: f64 = z.iter().map(|v| v * v).sum::<f64>() + a * a * fit.omega_t;
        if !(rss > 1e-24 * scale) || rss == 0.0 {
            return Err(Error::DegenerateAsset { asset: i });
        }
        t_sq[i] = a * a * fit.omega_t * dof as f64 / rss;
    }
    Ok(TStatVector { t_sq, dof })
}

/// Slopes on row subsets built from prefix sums of `Y_s f_s'` and `f_s f_s'`.
///
/// A subset is a contiguous range of periods minus a few excluded periods,
/// which is the shape of every half-sample in the leave-two-out trace
/// estimator. Each fit costs `O(N p)` after an `O(T N p)` setup, and agrees
/// with [`leave_out_ols`] on the same rows up to rounding.
pub(crate) struct LeaveOutFitter<'a> {
    returns: &'a DMatrix<f64>,
    factors: &'a DMatrix<f64>,
    /// `cross[k]` is a `(T + 1) x N` matrix of prefix sums of `Y_s f_{s,k}`.
    cross: Vec<DMatrix<f64>>,
    /// `(T + 1)` prefix sums of `f_s f_s'`.
    gram: Vec<DMatrix<f64>>,
}

/// A fitted half-sample: residuals for any period are `Y_t - B f_t`.
pub(crate) struct SubsetFit {
    /// `N x p` slopes.
    pub beta: DMatrix<f64>,
}

impl<'a> LeaveOutFitter<'a> {
    pub fn new(panel: &'a Panel) -> Self {
        let (t, n) = panel.returns().shape();
        let p = panel.p();
        let returns = panel.returns();
        let factors = panel.factors();
        let mut cross = vec![DMatrix::zeros(t + 1, n); p];
        for (k, c) in cross.iter_mut().enumerate() {
            for j in 0..n {
                let mut acc = 0.0;
                for s in 0..t {
                    acc += returns[(s, j)] * factors[(s, k)];
                    c[(s + 1, j)] = acc;
                }
            }
        }
        let mut gram = Vec::with_capacity(t + 1);
        let mut acc = DMatrix::zeros(p, p);
        gram.push(acc.clone());
        for s in 0..t {
            let f = factors.row(s);
            acc += f.transpose() * f;
            gram.push(acc.clone());
        }
        LeaveOutFitter {
            returns,
            factors,
            cross,
            gram,
        }
    }

    /// Fits on the periods of `range` other than those in `exclude`.
    pub fn fit(&self, range: Range<usize>, exclude: &[usize]) -> Result<SubsetFit> {
        let n = self.returns.ncols();
        let p = self.factors.ncols();
        let excluded: Vec<usize> = exclude
            .iter()
            .copied()
            .filter(|s| range.contains(s))
            .collect();
        let kept = range.len() - excluded.len();
        if kept < p + 1 {
            return Err(Error::RestrictedRankDeficient { kept });
        }
        let mut g = &self.gram[range.end] - &self.gram[range.start];
        for &s in &excluded {
            let f = self.factors.row(s);
            g -= f.transpose() * f;
        }
        let g_inv = gram_inverse(&g).map_err(|_| Error::RestrictedRankDeficient { kept })?;
        let mut cross = DMatrix::zeros(n, p);
        for k in 0..p {
            let c = &self.cross[k];
            for j in 0..n {
                let mut v = c[(range.end, j)] - c[(range.start, j)];
                for &s in &excluded {
                    v -= self.returns[(s, j)] * self.factors[(s, k)];
                }
                cross[(j, k)] = v;
            }
        }
        Ok(SubsetFit {
            beta: cross * g_inv,
        })
    }
}

impl SubsetFit {
    /// `Y_t - B f_t` written into `out` (length `N`).
    pub fn residual_into(&self, panel: &Panel, t: usize, out: &mut [f64]) {
        let y = panel.returns();
        let f = panel.factors();
        for (j, o) in out.iter_mut().enumerate() {
            let mut v = y[(t, j)];
            for k in 0..f.ncols() {
                v -= self.beta[(j, k)] * f[(t, k)];
            }
            *o = v;
        }
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn explicit_annihilator(x: &DMatrix<f64>) -> DMatrix<f64> {
        // Pseudo-inverse route, independent of the Cholesky path.
        let t = x.nrows();
        let pinv = x.clone().pseudo_inverse(1e-14).unwrap();
        DMatrix::identity(t, t) - x * pinv
    }

    #[test]
    fn annihilator_on_orthogonal_factor_is_identity() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let a = annihilator_weights(&x).unwrap();
        assert_abs_diff_eq!(a.h[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.h[1], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.omega_t, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn intercept_factor_is_rejected() {
        let x = DMatrix::from_element(7, 1, 1.0);
        let err = annihilator_weights(&x).unwrap_err();
        assert!(matches!(err, Error::InterceptNotIdentifiable { .. }));
        assert!(err.to_string().contains("factors span the intercept"));
    }

    #[test]
    fn collinear_factors_are_rank_deficient() {
        let mut x = random_factors(10, 2, 1);
        let c0 = x.column(0).into_owned();
        x.set_column(1, &(c0 * 2.0));
        match annihilator_weights(&x).unwrap_err() {
            Error::RankDeficient { direction, .. } => {
                // near-null combination is proportional to (2, -1)
                assert_eq!(direction.len(), 2);
                assert_abs_diff_eq!((direction[0] / direction[1]).abs(), 2.0, epsilon = 1e-6);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn annihilator_matches_dense_projection() {
        let x = random_factors(6, 2, 7);
        let a = annihilator_weights(&x).unwrap();
        let h = explicit_annihilator(&x) * DVector::from_element(6, 1.0);
        for t in 0..6 {
            assert_abs_diff_eq!(a.h[t], h[t], epsilon = 1e-10);
        }
        assert_abs_diff_eq!(a.omega_t, h.dot(&h), epsilon = 1e-10);
    }

    #[test]
    fn exact_fit_has_zero_residuals() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let y = DMatrix::from_row_slice(2, 1, &[2.0, 4.0]);
        let fit = FactorFit::from_matrices(&y, &x).unwrap();
        assert_abs_diff_eq!(fit.beta[(0, 0)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(fit.residuals.norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_returns_fit_to_zero() {
        let x = random_factors(9, 2, 3);
        let mut y = random_matrix(9, 3, 4);
        y.column_mut(1).fill(0.0);
        let fit = fit_ols(&Panel::new(y, x).unwrap()).unwrap();
        assert_eq!(fit.beta.row(1).norm(), 0.0);
        assert_eq!(fit.alpha_hat[1], 0.0);
        assert_eq!(fit.residuals.column(1).norm(), 0.0);
    }

    #[test]
    fn planted_betas_are_recovered_without_noise() {
        let x = random_factors(8, 3, 11);
        let beta = random_matrix(5, 3, 12);
        let y = &x * beta.transpose();
        let fit = fit_ols(&Panel::new(y.clone(), x.clone()).unwrap()).unwrap();
        assert_abs_diff_eq!((&fit.beta - &beta).amax(), 0.0, epsilon = 1e-10);

        // With an intercept the slopes absorb part of it and Z_t = alpha * h_t,
        // h_t = 1 - x_t'(X'X)^{-1}X'1.
        let alpha = DVector::from_vec(vec![0.5, -1.0, 0.0, 2.0, 0.25]);
        let y_alpha = y + DVector::from_element(8, 1.0) * alpha.transpose();
        let fit = fit_ols(&Panel::new(y_alpha, x.clone()).unwrap()).unwrap();
        let pinv = x.clone().pseudo_inverse(1e-14).unwrap();
        let ones = DVector::from_element(8, 1.0);
        let coef = &pinv * &ones;
        for t in 0..8 {
            let h_t = 1.0 - x.row(t).dot(&coef.transpose());
            for i in 0..5 {
                assert_abs_diff_eq!(fit.residuals[(t, i)], alpha[i] * h_t, epsilon = 1e-10);
            }
        }
        for i in 0..5 {
            assert_abs_diff_eq!(fit.alpha_hat[i], alpha[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn leave_out_all_rows_equals_full_fit() {
        let panel = Panel::new(random_matrix(11, 4, 20), random_factors(11, 2, 21)).unwrap();
        let all: Vec<usize> = (0..11).collect();
        let fit = fit_ols(&panel).unwrap();
        assert_eq!(leave_out_ols(&panel, &all).unwrap(), fit.beta);
    }

    #[test]
    fn leave_out_matches_subpanel_pseudo_inverse() {
        let panel = Panel::new(random_matrix(5, 3, 30), random_factors(5, 1, 31)).unwrap();
        let keep = [1, 2, 3];
        let beta = leave_out_ols(&panel, &keep).unwrap();
        let x = panel.factors().select_rows(&keep);
        let y = panel.returns().select_rows(&keep);
        let oracle = (x.pseudo_inverse(1e-14).unwrap() * y).transpose();
        assert_abs_diff_eq!((beta - oracle).amax(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn leave_out_rejects_too_few_rows() {
        let panel = Panel::new(random_matrix(8, 2, 40), random_factors(8, 3, 41)).unwrap();
        let err = leave_out_ols(&panel, &[0, 1, 2]).unwrap_err();
        assert!(matches!(err, Error::RestrictedRankDeficient { kept: 3 }));
        assert!(err.to_string().contains('3'));
    }

    #[test]
    fn prefix_fitter_matches_direct_refits_for_every_pair() {
        let panel = Panel::new(random_matrix(10, 4, 50), random_factors(10, 2, 51)).unwrap();
        let fitter = LeaveOutFitter::new(&panel);
        let t = panel.t();
        for t1 in 0..t {
            for t2 in (t1 + 1)..t {
                let kept: Vec<usize> = (0..t).filter(|&s| s != t1 && s != t2).collect();
                let n1 = kept.len().div_ceil(2);
                let (first, second) = kept.split_at(n1);
                let split = second[0];
                let fast1 = fitter.fit(0..split, &[t1, t2]).unwrap();
                let fast2 = fitter.fit(split..t, &[t1, t2]).unwrap();
                let direct1 = leave_out_ols(&panel, first).unwrap();
                let direct2 = leave_out_ols(&panel, second).unwrap();
                assert_abs_diff_eq!((fast1.beta - direct1).amax(), 0.0, epsilon = 1e-9);
                assert_abs_diff_eq!((fast2.beta - direct2).amax(), 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn zero_alpha_has_zero_t() {
        let x = random_factors(12, 2, 60);
        let beta = random_matrix(3, 2, 61);
        let mut y = &x * beta.transpose() + random_matrix(12, 3, 62) * 0.3;
        // Remove the intercept component from asset 0 so that alpha_hat_0 = 0.
        let a = annihilator_weights(&x).unwrap();
        let a0 = y.column(0).dot(&a.h) / a.omega_t;
        let fix = DVector::from_element(12, a0);
        // Subtracting a0 * 1 shifts alpha_hat by exactly a0.
        let c = y.column(0) - fix;
        y.set_column(0, &c);
        let ts = studentized_t(&Panel::new(y, x).unwrap()).unwrap();
        assert_abs_diff_eq!(ts.t_sq[0], 0.0, epsilon = 1e-20);
        assert_eq!(ts.dof, 9);
    }

    #[test]
    fn t_statistics_are_scale_invariant() {
        let panel = Panel::new(random_matrix(15, 4, 70), random_factors(15, 3, 71)).unwrap();
        let base = studentized_t(&panel).unwrap();
        let scaled =
            studentized_t(&panel.rescale_assets(&[3.0, 0.01, 1.0, 250.0]).unwrap()).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(
                base.t_sq[i],
                scaled.t_sq[i],
                epsilon = 1e-10 * (1.0 + base.t_sq[i])
            );
        }
    }

    #[test]
    fn t_statistics_match_scalar_regression() {
        let t = 12;
        let x = random_factors(t, 1, 80);
        let y = random_matrix(t, 3, 81).map(|v| v + 0.3);
        let ts = studentized_t(&Panel::new(y.clone(), x.clone()).unwrap()).unwrap();
        let f: Vec<f64> = x.column(0).iter().copied().collect();
        let fbar = f.iter().sum::<f64>() / t as f64;
        let sxx: f64 = f.iter().map(|v| (v - fbar).powi(2)).sum();
        for i in 0..3 {
            let yi: Vec<f64> = y.column(i).iter().copied().collect();
            let ybar = yi.iter().sum::<f64>() / t as f64;
            let sxy: f64 = f
                .iter()
                .zip(&yi)
                .map(|(a, b)| (a - fbar) * (b - ybar))
                .sum();
            let slope = sxy / sxx;
            let intercept = ybar - slope * fbar;
            let rss: f64 = f
                .iter()
                .zip(&yi)
                .map(|(a, b)| (b - intercept - slope * a).powi(2))
                .sum();
            let s2 = rss / (t - 2) as f64;
            let se2 = s2 * (1.0 / t as f64 + fbar * fbar / sxx);
            let oracle = intercept * intercept / se2;
            assert_abs_diff_eq!(ts.t_sq[i], oracle, epsilon = 1e-9 * (1.0 + oracle));
        }
    }

    #[test]
    fn degenerate_asset_is_reported() {
        let x = random_factors(10, 2, 90);
        let mut y = random_matrix(10, 3, 91);
        let exact = &x.column(0) * 2.0 + DVector::from_element(10, 0.7);
        y.set_column(2, &exact);
        let err = studentized_t(&Panel::new(y, x).unwrap()).unwrap_err();
        assert!(matches!(err, Error::DegenerateAsset { asset: 2 }));
    }

    #[test]
    fn panel_validation() {
        let x = random_factors(4, 3, 1);
        assert!(Panel::new(random_matrix(4, 2, 2), x).is_err());
        let mut y = random_matrix(6, 2, 3);
        y[(2, 1)] = f64::NAN;
        assert!(Panel::new(y, random_factors(6, 1, 4)).is_err());
        assert!(Panel::new(random_matrix(6, 2, 3), random_factors(5, 1, 4)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn projection_is_symmetric_idempotent(seed in any::<u64>(), t in 6usize..30, p in 1usize..4) {
            let x = random_factors(t, p, seed);
            let gram_inv = gram_inverse(&(x.transpose() * &x)).unwrap();
            let proj = DMatrix::identity(t, t) - &x * gram_inv * x.transpose();
            prop_assert!((&proj * &proj - &proj).norm() <= 1e-9);
            prop_assert!((&proj - proj.transpose()).norm() <= 1e-9);
        }

        #[test]
        fn h_is_orthogonal_to_factors(seed in any::<u64>(), t in 6usize..40, p in 1usize..4) {
            let x = random_factors(t, p, seed);
            let a = annihilator_weights(&x).unwrap();
            let cross = x.transpose() * &a.h;
            prop_assert!(cross.amax() <= 1e-9 * x.norm());
            prop_assert!(a.omega_t > 0.0);
            prop_assert!((a.omega_t - a.h.dot(&a.h)).abs() <= 1e-12 * a.omega_t);
        }

        #[test]
        fn adding_factor_exposure_shifts_only_beta(
            seed in any::<u64>(), k in 0usize..3, c in -3.0f64..3.0
        ) {
            let t = 20;
            let x = random_factors(t, 3, seed);
            let y = random_matrix(t, 4, seed.wrapping_add(1));
            let shifted = &y + x.column(k) * DVector::from_element(4, c).transpose();
            let base = fit_ols(&Panel::new(y, x.clone()).unwrap()).unwrap();
            let moved = fit_ols(&Panel::new(shifted.clone(), x.clone()).unwrap()).unwrap();
            for i in 0..4 {
                for kk in 0..3 {
                    let expect = base.beta[(i, kk)] + if kk == k { c } else { 0.0 };
                    prop_assert!((moved.beta[(i, kk)] - expect).abs() <= 1e-9);
                }
            }
            prop_assert!((&moved.alpha_hat - &base.alpha_hat).amax() <= 1e-9);
            prop_assert!((&moved.residuals - &base.residuals).amax() <= 1e-9);
            let t0 = studentized_t_from_fit(&base, 3).unwrap();
            let t1 = studentized_t_from_fit(&moved, 3).unwrap();
            for i in 0..4 {
                prop_assert!((t0.t_sq[i] - t1.t_sq[i]).abs() <= 1e-9 * (1.0 + t0.t_sq[i]));
            }
        }
    }
}
