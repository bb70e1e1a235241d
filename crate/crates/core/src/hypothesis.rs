//! Wald tests for a piecewise structure in the conditional mean (one degree
//! of freedom) and in the conditional variance (two degrees of freedom).

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::cls::{cls_fit, condition_number3, information_matrices, MeanFit, RegimeDesign, MAX_CONDITION};
use crate::error::{Error, Result};
use crate::model::{CountSeries, RegimeOrder};

pub const CHI2_1_CRIT_05: f64 = 3.841458820694124;
pub const CHI2_2_CRIT_05: f64 = 5.991464547107979;

/// Transitions each regime needs before the variance regression is attempted.
pub const MIN_VARIANCE_TRANSITIONS: usize = 3;

/// Upper tail `P(chi2_df > x)`.
pub fn chi_square_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(df as f64 / 2.0, x / 2.0).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub reject_at_05: bool,
    pub critical_value: f64,
}

impl TestResult {
    fn new(statistic: f64, df: usize) -> Self {
        let critical_value = if df == 1 { CHI2_1_CRIT_05 } else { CHI2_2_CRIT_05 };
        TestResult {
            statistic,
            df,
            p_value: chi_square_sf(statistic, df),
            reject_at_05: statistic > critical_value,
            critical_value,
        }
    }
}

/// Conditional-variance regression `V_t ~ sigma_k^2 X_{t-1} + b_k` in each regime.
///
/// Parameter order is `(sigma1_sq, sigma2_sq, b1, b2)`; `covariance` is the
/// asymptotic covariance of `sqrt(m) (estimate - truth)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceFit {
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub b1: f64,
    pub b2: f64,
    pub covariance: [[f64; 4]; 4],
    pub std_errors: [f64; 4],
    pub n_transitions: usize,
}

impl VarianceFit {
    pub fn params(&self) -> [f64; 4] {
        [self.sigma1_sq, self.sigma2_sq, self.b1, self.b2]
    }
}

/// Regime sums for the variance regression.
#[derive(Default, Clone, Copy)]
struct Block {
    n: f64,
    x: f64,
    xx: f64,
    v: f64,
    vx: f64,
}

impl Block {
    /// `(slope, intercept)` of `V` on `X_{t-1}`.
    fn solve(&self, regime: u8) -> Result<(f64, f64)> {
        let det = self.n * self.xx - self.x * self.x;
        if !(det > 1e-12 * self.n * self.xx) {
            return Err(Error::SingularDesign(format!("regime {regime} has constant X_{{t-1}}")));
        }
        let slope = (self.n * self.vx - self.x * self.v) / det;
        let intercept = (self.xx * self.v - self.x * self.vx) / det;
        Ok((slope, intercept))
    }
}

/// `(V_tilde, W_tilde)` with the indicator of regime 2 in the `(4, 4)` slot.
pub(crate) fn variance_information(
    d: &RegimeDesign,
    v: &[f64],
    params: [f64; 4],
) -> (Matrix4<f64>, Matrix4<f64>) {
    let m = d.len() as f64;
    let mut vt = Matrix4::zeros();
    let mut wt = Matrix4::zeros();
    for t in 0..d.len() {
        let x = d.prev[t];
        let g = if d.first[t] { [x, 0.0, 1.0, 0.0] } else { [0.0, x, 0.0, 1.0] };
        let fitted = if d.first[t] { params[0] * x + params[2] } else { params[1] * x + params[3] };
        let d2 = (v[t] - fitted).powi(2);
        for i in 0..4 {
            for j in 0..4 {
                vt[(i, j)] += g[i] * g[j];
                wt[(i, j)] += d2 * g[i] * g[j];
            }
        }
    }
    (vt / m, wt / m)
}

fn check_mean_fit(d: &RegimeDesign, mean_fit: &MeanFit) -> Result<()> {
    if mean_fit.n_transitions != d.len() || mean_fit.n_binomial != d.n1 {
        return Err(Error::Input("mean fit was computed on different data or threshold".into()));
    }
    Ok(())
}

/// Closed-form variance-parameter CLS from the squared residuals of `mean_fit`.
pub fn variance_cls_fit(series: &CountSeries, r: u64, order: RegimeOrder, mean_fit: &MeanFit) -> Result<VarianceFit> {
    let d = RegimeDesign::new(series, r, order);
    check_mean_fit(&d, mean_fit)?;
    variance_fit_design(&d, mean_fit)
}

pub(crate) fn variance_fit_design(d: &RegimeDesign, mean_fit: &MeanFit) -> Result<VarianceFit> {
    d.require(MIN_VARIANCE_TRANSITIONS)?;
    let theta = mean_fit.theta();
    let v: Vec<f64> = (0..d.len()).map(|t| d.residual(t, theta).powi(2)).collect();
    let (mut b1, mut b2) = (Block::default(), Block::default());
    for t in 0..d.len() {
        let x = d.prev[t];
        let blk = if d.first[t] { &mut b1 } else { &mut b2 };
        blk.n += 1.0;
        blk.x += x;
        blk.xx += x * x;
        blk.v += v[t];
        blk.vx += v[t] * x;
    }
    let (s1, i1) = b1.solve(1)?;
    let (s2, i2) = b2.solve(2)?;
    let params = [s1, s2, i1, i2];

    let (vt, wt) = variance_information(d, &v, params);
    let condition = {
        let sv = vt.singular_values();
        sv.max() / sv.min()
    };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularInformation { condition });
    }
    let vi = vt.try_inverse().ok_or(Error::SingularInformation { condition })?;
    let sigma = vi * wt * vi;
    let sigma = (sigma + sigma.transpose()) * 0.5;
    let m = d.len() as f64;
    let mut covariance = [[0.0; 4]; 4];
    for (i, row) in covariance.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = sigma[(i, j)];
        }
    }
    let std_errors = [0, 1, 2, 3].map(|k| (sigma[(k, k)].max(0.0) / m).sqrt());
    Ok(VarianceFit { sigma1_sq: s1, sigma2_sq: s2, b1: i1, b2: i2, covariance, std_errors, n_transitions: d.len() })
}

/// `m (a_i - a_j)^2 / (S_ii + S_jj - S_ij - S_ji)`.
fn contrast(m: f64, diff: f64, var: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::SingularInformation { condition: f64::INFINITY });
    }
    Ok(m * diff * diff / var)
}

/// Mean-parameter Wald statistic from a CLS fit and its design.
pub(crate) fn wald_mean_from(d: &RegimeDesign, fit: &MeanFit) -> Result<TestResult> {
    let (v, w) = information_matrices(d, fit.theta());
    let condition = condition_number3(&v);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularInformation { condition });
    }
    let vi = v.try_inverse().ok_or(Error::SingularInformation { condition })?;
    let l = vi * w * vi;
    let var = l[(0, 0)] + l[(1, 1)] - l[(0, 1)] - l[(1, 0)];
    Ok(TestResult::new(contrast(d.len() as f64, fit.phi1 - fit.phi2, var)?, 1))
}

/// Variances and covariance of the two contrasts `sigma1^2 - sigma2^2` and
/// `b1 - b2` under `Sigma`.
fn contrast_covariance(s: &[[f64; 4]; 4]) -> (f64, f64, f64) {
    let a = s[0][0] + s[1][1] - s[0][1] - s[1][0];
    let d = s[2][2] + s[3][3] - s[2][3] - s[3][2];
    let o = s[0][2] - s[0][3] - s[1][2] + s[1][3];
    (a, d, o)
}

/// Joint quadratic form `m c' (C Sigma C')^-1 c` in the two contrasts.
///
/// Within a regime the slope and intercept estimates are strongly
/// correlated, so the contrasts are too; only the joint form is chi-square
/// with two degrees of freedom under the null.
pub(crate) fn wald_variance_from(fit: &VarianceFit) -> Result<TestResult> {
    let (a, d, o) = contrast_covariance(&fit.covariance);
    let det = a * d - o * o;
    if !(a > 0.0 && det > 1e-12 * a * d) {
        return Err(Error::SingularInformation { condition: f64::INFINITY });
    }
    let m = fit.n_transitions as f64;
    let (x, y) = (fit.sigma1_sq - fit.sigma2_sq, fit.b1 - fit.b2);
    Ok(TestResult::new(m * (d * x * x - 2.0 * o * x * y + a * y * y) / det, 2))
}

/// Sum of the two separately standardized contrasts, ignoring their
/// covariance. Over-rejects under the null; kept for comparison.
pub fn wald_variance_displayed(fit: &VarianceFit) -> Result<TestResult> {
    let (a, d, _) = contrast_covariance(&fit.covariance);
    let m = fit.n_transitions as f64;
    let first = contrast(m, fit.sigma1_sq - fit.sigma2_sq, a)?;
    let second = contrast(m, fit.b1 - fit.b2, d)?;
    Ok(TestResult::new(first + second, 2))
}

/// Tests `phi1 = phi2` using the CLS sandwich covariance.
pub fn wald_mean_test(series: &CountSeries, r: u64, order: RegimeOrder) -> Result<TestResult> {
    let d = RegimeDesign::new(series, r, order);
    let fit = cls_fit(series, r, order)?;
    wald_mean_from(&d, &fit)
}

/// Tests `sigma1^2 = sigma2^2` and `b1 = b2` jointly.
pub fn wald_variance_test(series: &CountSeries, r: u64, order: RegimeOrder) -> Result<TestResult> {
    let d = RegimeDesign::new(series, r, order);
    let fit = cls_fit(series, r, order)?;
    wald_variance_from(&variance_fit_design(&d, &fit)?)
}

/// Both statistics from one CLS fit.
pub fn wald_tests(series: &CountSeries, r: u64, order: RegimeOrder) -> Result<(TestResult, TestResult)> {
    let d = RegimeDesign::new(series, r, order);
    let fit = cls_fit(series, r, order)?;
    let mean = wald_mean_from(&d, &fit)?;
    let var = wald_variance_from(&variance_fit_design(&d, &fit)?)?;
    Ok((mean, var))
}

/// Two-regime block of a 4x4 matrix in `(slope_k, intercept_k)` order.
#[cfg(test)]
fn block(m: &Matrix4<f64>, k: usize) -> nalgebra::Matrix2<f64> {
    nalgebra::Matrix2::new(m[(k, k)], m[(k, k + 2)], m[(k + 2, k)], m[(k + 2, k + 2)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Vector2};
    use crate::model::{simulate, ModelSpec, RngStream};
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn sample(spec: &ModelSpec, seed: u64, n: usize) -> CountSeries {
        simulate(spec, n, spec.default_x0(), 500, &mut RngStream::new(seed)).unwrap()
    }

    fn a1() -> ModelSpec {
        ModelSpec::new(0.4, 0.2, 3.0, 4, RegimeOrder::BinomialBelow).unwrap()
    }

    #[test]
    fn critical_values_match_quantiles() {
        assert!((ChiSquared::new(1.0).unwrap().inverse_cdf(0.95) - CHI2_1_CRIT_05).abs() < 1e-8);
        assert!((ChiSquared::new(2.0).unwrap().inverse_cdf(0.95) - CHI2_2_CRIT_05).abs() < 1e-8);
        assert!((chi_square_sf(CHI2_1_CRIT_05, 1) - 0.05).abs() < 1e-12);
        assert!((chi_square_sf(CHI2_2_CRIT_05, 2) - 0.05).abs() < 1e-12);
        // df = 2 tail is exp(-x/2)
        for x in [0.1, 1.0, 7.5, 30.0] {
            assert!((chi_square_sf(x, 2) - (-x / 2.0f64).exp()).abs() < 1e-14);
        }
        assert_eq!(chi_square_sf(0.0, 1), 1.0);
    }

    proptest! {
        #[test]
        fn p_value_decreases_in_statistic(a in 0.0f64..50.0, b in 0.0f64..50.0, df in 1usize..3) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(chi_square_sf(lo, df) >= chi_square_sf(hi, df));
        }
    }

    /// One n = 5000 path leaves SE(b1_hat) near 0.18, so the tolerance is
    /// applied to the average over independent paths.
    #[test]
    fn consistency_of_variance_parameters() {
        let spec = a1();
        let reps = 20;
        let mut avg = [0.0; 4];
        for seed in 0..reps {
            let s = sample(&spec, 1000 + seed, 5000);
            let mean = cls_fit(&s, 4, spec.order).unwrap();
            let fit = variance_cls_fit(&s, 4, spec.order, &mean).unwrap();
            for (a, p) in avg.iter_mut().zip(fit.params()) {
                *a += p / reps as f64;
            }
        }
        // regime 1: phi1 (1 - phi1) = 0.24, lambda = 3
        assert!((avg[0] - 0.24).abs() < 0.1, "sigma1^2 {}", avg[0]);
        assert!((avg[2] - 3.0).abs() < 0.1, "b1 {}", avg[2]);
        // regime 2: phi2 (1 + phi2) = 0.24, lambda (1 + lambda) = 12
        assert!((avg[1] - 0.24).abs() < 0.3, "sigma2^2 {}", avg[1]);
        assert!((avg[3] - 12.0).abs() < 1.0, "b2 {}", avg[3]);
    }

    #[test]
    fn variance_information_structure() {
        let spec = a1();
        let s = sample(&spec, 2, 400);
        let d = RegimeDesign::new(&s, 4, spec.order);
        let mean = cls_fit(&s, 4, spec.order).unwrap();
        let fit = variance_fit_design(&d, &mean).unwrap();
        let v: Vec<f64> = (0..d.len()).map(|t| d.residual(t, mean.theta()).powi(2)).collect();
        let (vt, wt) = variance_information(&d, &v, fit.params());
        assert_eq!(vt[(0, 1)], 0.0);
        assert_eq!(vt[(1, 0)], 0.0);
        assert!((vt[(3, 3)] - d.n2 as f64 / d.len() as f64).abs() < 1e-15);
        assert!((vt[(2, 2)] - d.n1 as f64 / d.len() as f64).abs() < 1e-15);
        // block-diagonal: each regime's sandwich is its own 2x2 regression sandwich
        for k in 0..2 {
            let bv = block(&vt, k).try_inverse().unwrap();
            let bs = bv * block(&wt, k) * bv;
            let c = fit.covariance;
            let got = Matrix2::new(c[k][k], c[k][k + 2], c[k + 2][k], c[k + 2][k + 2]);
            assert!((bs - got).amax() < 1e-9 * bs.amax());
        }
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(fit.covariance[i][j], fit.covariance[j][i]);
            }
        }
        // the regression normal equations hold per regime
        let (mut g1, mut g2) = (Vector2::zeros(), Vector2::zeros());
        for t in 0..d.len() {
            let x = d.prev[t];
            if d.first[t] {
                g1 += Vector2::new(x, 1.0) * (v[t] - fit.sigma1_sq * x - fit.b1);
            } else {
                g2 += Vector2::new(x, 1.0) * (v[t] - fit.sigma2_sq * x - fit.b2);
            }
        }
        assert!(g1.amax() < 1e-6 && g2.amax() < 1e-6);
    }

    #[test]
    fn singular_regime_is_rejected() {
        let s = CountSeries::new(vec![0, 9, 0, 7, 0, 8, 0, 6, 0, 9, 0, 5]);
        let mean = MeanFit {
            phi1: 0.3,
            phi2: 0.3,
            lambda: 2.0,
            covariance: None,
            std_errors: None,
            n_binomial: 6,
            n_negbin: 5,
            n_transitions: 11,
            method: crate::cls::EstimationMethod::Cls,
            valid: true,
            loglik: None,
        };
        let err = variance_cls_fit(&s, 4, RegimeOrder::BinomialBelow, &mean).unwrap_err();
        assert!(matches!(err, Error::SingularDesign(_)));
    }

    #[test]
    fn statistics_are_nonnegative_and_consistent() {
        for seed in 0..10 {
            let spec = ModelSpec::new(0.4, 0.2, 6.0, 6, RegimeOrder::BinomialBelow).unwrap();
            let s = sample(&spec, seed, 500);
            let (mean, var) = wald_tests(&s, 6, spec.order).unwrap();
            assert!(mean.statistic >= 0.0 && var.statistic >= 0.0);
            assert_eq!(mean, wald_mean_test(&s, 6, spec.order).unwrap());
            assert_eq!(var, wald_variance_test(&s, 6, spec.order).unwrap());
            assert_eq!((mean.df, var.df), (1, 2));
            assert_eq!(mean.reject_at_05, mean.statistic > CHI2_1_CRIT_05);
            assert!((0.0..=1.0).contains(&var.p_value));
        }
    }

    #[test]
    fn statistics_ignore_order_within_regimes() {
        let spec = a1();
        let s = sample(&spec, 3, 300);
        let mut pairs: Vec<(u64, u64)> = s.transitions().collect();
        let base = {
            let d = RegimeDesign::from_pairs(pairs.iter().copied(), 4, spec.order);
            let fit = crate::cls::cls_fit_design(&d).unwrap();
            (wald_mean_from(&d, &fit).unwrap(), wald_variance_from(&variance_fit_design(&d, &fit).unwrap()).unwrap())
        };
        pairs.sort_by_key(|&(a, b)| (a > 4, std::cmp::Reverse(b)));
        let d = RegimeDesign::from_pairs(pairs.into_iter(), 4, spec.order);
        let fit = crate::cls::cls_fit_design(&d).unwrap();
        let mean = wald_mean_from(&d, &fit).unwrap();
        let var = wald_variance_from(&variance_fit_design(&d, &fit).unwrap()).unwrap();
        assert!((mean.statistic - base.0.statistic).abs() < 1e-8 * (1.0 + base.0.statistic));
        assert!((var.statistic - base.1.statistic).abs() < 1e-8 * (1.0 + base.1.statistic));
    }

    #[test]
    fn joint_variance_statistic_matches_matrix_route() {
        let spec = ModelSpec::new(0.4, 0.4, 6.0, 6, RegimeOrder::BinomialBelow).unwrap();
        for seed in 0..10u64 {
            let s = simulate(&spec, 600, spec.default_x0(), 500, &mut RngStream::new(900 + seed)).unwrap();
            let fit = cls_fit(&s, 6, spec.order).unwrap();
            let vf = variance_cls_fit(&s, 6, spec.order, &fit).unwrap();
            let sigma = Matrix4::from_fn(|i, j| vf.covariance[i][j]);
            let c = nalgebra::Matrix2x4::new(1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0);
            let diff = c * nalgebra::Vector4::from(vf.params());
            let inner = (c * sigma * c.transpose()).try_inverse().unwrap();
            let oracle = vf.n_transitions as f64 * (diff.transpose() * inner * diff)[(0, 0)];
            let got = wald_variance_test(&s, 6, spec.order).unwrap().statistic;
            assert!((got - oracle).abs() < 1e-9 * (1.0 + oracle), "{got} vs {oracle}");
        }
    }

    #[test]
    fn displayed_form_equals_joint_without_contrast_covariance() {
        let mut cov = [[0.0; 4]; 4];
        for (k, v) in [2.0, 3.0, 5.0, 7.0].into_iter().enumerate() {
            cov[k][k] = v;
        }
        let vf = VarianceFit {
            sigma1_sq: 0.5,
            sigma2_sq: 0.2,
            b1: 3.0,
            b2: 2.5,
            covariance: cov,
            std_errors: [0.0; 4],
            n_transitions: 100,
        };
        let joint = wald_variance_from(&vf).unwrap().statistic;
        let shown = wald_variance_displayed(&vf).unwrap().statistic;
        // 100 * (0.09 / 5 + 0.25 / 12)
        let expected = 100.0 * (0.09 / 5.0 + 0.25 / 12.0);
        assert!((joint - expected).abs() < 1e-12 && (shown - expected).abs() < 1e-12);
    }

    #[test]
    fn joint_variance_test_holds_size_under_one_regime_null() {
        let spec = ModelSpec::new(0.4, 0.4, 5.0, u64::MAX, RegimeOrder::BinomialBelow).unwrap();
        let reps = 400;
        let mut rejections = 0;
        for seed in 0..reps {
            let s = simulate(&spec, 1000, spec.default_x0(), 500, &mut RngStream::new(31_000 + seed)).unwrap();
            if wald_variance_test(&s, 6, RegimeOrder::BinomialBelow).unwrap().reject_at_05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / reps as f64;
        // binomial sd at 0.05 over 400 draws is about 0.011
        assert!((0.015..=0.09).contains(&rate), "size {rate}");
    }
}

