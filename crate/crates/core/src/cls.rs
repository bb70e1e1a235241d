//! Closed-form conditional least squares for `(phi1, phi2, lambda)` at a
//! known threshold, with the `V^-1 W V^-1` sandwich covariance.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{in_binomial_regime, CountSeries, RegimeOrder};

/// Condition number above which an information matrix is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimationMethod {
    Cls,
    Cml,
}

/// Estimated conditional-mean parameters.
///
/// `covariance` is the asymptotic covariance of `sqrt(m) (theta_hat - theta)`
/// where `m` is the number of transitions; standard errors divide it by `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFit {
    pub phi1: f64,
    pub phi2: f64,
    pub lambda: f64,
    pub covariance: Option<[[f64; 3]; 3]>,
    pub std_errors: Option<[f64; 3]>,
    /// Transitions with the binomial/Poisson indicator `I_1` active.
    pub n_binomial: usize,
    /// Transitions with the negative-binomial/geometric indicator `I_2` active.
    pub n_negbin: usize,
    pub n_transitions: usize,
    pub method: EstimationMethod,
    /// Whether the estimate lies in `(0,1)^2 x (0, inf)`. Estimates are never clamped.
    pub valid: bool,
    pub loglik: Option<f64>,
}

impl MeanFit {
    pub fn theta(&self) -> [f64; 3] {
        [self.phi1, self.phi2, self.lambda]
    }

    pub(crate) fn set_covariance(&mut self, cov: &Matrix3<f64>) {
        let m = self.n_transitions as f64;
        let mut arr = [[0.0; 3]; 3];
        for (i, row) in arr.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = cov[(i, j)];
            }
        }
        self.covariance = Some(arr);
        self.std_errors = Some([0, 1, 2].map(|k| (cov[(k, k)].max(0.0) / m).sqrt()));
    }
}

pub(crate) fn theta_is_valid(theta: [f64; 3]) -> bool {
    theta[0] > 0.0 && theta[0] < 1.0 && theta[1] > 0.0 && theta[1] < 1.0 && theta[2] > 0.0
}

/// Transitions split by regime indicator, with the sums the closed forms need.
#[derive(Debug, Clone)]
pub(crate) struct RegimeDesign {
    pub prev: Vec<f64>,
    pub cur: Vec<f64>,
    pub first: Vec<bool>,
    pub n1: usize,
    pub n2: usize,
    pub s1x: f64,
    pub s1xx: f64,
    pub s2x: f64,
    pub s2xx: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

impl RegimeDesign {
    pub fn new(series: &CountSeries, r: u64, order: RegimeOrder) -> Self {
        Self::from_pairs(series.transitions(), r, order)
    }

    pub fn from_pairs(pairs: impl Iterator<Item = (u64, u64)>, r: u64, order: RegimeOrder) -> Self {
        let m = pairs.size_hint().0;
        let mut d = RegimeDesign {
            prev: Vec::with_capacity(m),
            cur: Vec::with_capacity(m),
            first: Vec::with_capacity(m),
            n1: 0,
            n2: 0,
            s1x: 0.0,
            s1xx: 0.0,
            s2x: 0.0,
            s2xx: 0.0,
            m1: 0.0,
            m2: 0.0,
            m3: 0.0,
        };
        for (xp, xc) in pairs {
            let first = in_binomial_regime(xp, r, order);
            let (p, c) = (xp as f64, xc as f64);
            d.prev.push(p);
            d.cur.push(c);
            d.first.push(first);
            d.m3 += c;
            if first {
                d.n1 += 1;
                d.s1x += p;
                d.s1xx += p * p;
                d.m1 += c * p;
            } else {
                d.n2 += 1;
                d.s2x += p;
                d.s2xx += p * p;
                d.m2 += c * p;
            }
        }
        d
    }

    pub fn len(&self) -> usize {
        self.prev.len()
    }

    pub fn require(&self, need: usize) -> Result<()> {
        if self.n1 < need {
            return Err(Error::InsufficientRegimeData { regime: 1, got: self.n1, need });
        }
        if self.n2 < need {
            return Err(Error::InsufficientRegimeData { regime: 2, got: self.n2, need });
        }
        Ok(())
    }

    /// Residual `U_t(theta) = X_t - phi_k X_{t-1} - lambda`.
    #[inline]
    pub fn residual(&self, t: usize, theta: [f64; 3]) -> f64 {
        let phi = if self.first[t] { theta[0] } else { theta[1] };
        self.cur[t] - phi * self.prev[t] - theta[2]
    }
}

/// Sum of squared one-step residuals `Q(theta)`.
pub fn cls_objective(series: &CountSeries, r: u64, order: RegimeOrder, theta: [f64; 3]) -> f64 {
    let d = RegimeDesign::new(series, r, order);
    (0..d.len()).map(|t| d.residual(t, theta).powi(2)).sum()
}

/// Closed-form CLS estimate, uses consecutive pairs of `series` as transitions.
pub fn cls_fit(series: &CountSeries, r: u64, order: RegimeOrder) -> Result<MeanFit> {
    cls_fit_design(&RegimeDesign::new(series, r, order))
}

pub(crate) fn cls_fit_design(d: &RegimeDesign) -> Result<MeanFit> {
    d.require(2)?;
    let n = d.len() as f64;
    let det = n * d.s1xx * d.s2xx - d.s1xx * d.s2x * d.s2x - d.s1x * d.s1x * d.s2xx;
    let scale = n * d.s1xx * d.s2xx;
    if !(det.abs() > 1e-12 * scale) || scale == 0.0 {
        return Err(Error::SingularDesign(
            "conditional-mean normal equations are singular (a regime has constant X_{t-1})".into(),
        ));
    }
    let phi1 = ((n * d.s2xx - d.s2x * d.s2x) * d.m1 + d.s1x * (d.s2x * d.m2 - d.s2xx * d.m3)) / det;
    let phi2 = ((n * d.s1xx - d.s1x * d.s1x) * d.m2 + d.s2x * (d.s1x * d.m1 - d.s1xx * d.m3)) / det;
    let lambda = (d.s1xx * (d.s2xx * d.m3 - d.s2x * d.m2) - d.s1x * d.s2xx * d.m1) / det;

    let mut fit = MeanFit {
        phi1,
        phi2,
        lambda,
        covariance: None,
        std_errors: None,
        n_binomial: d.n1,
        n_negbin: d.n2,
        n_transitions: d.len(),
        method: EstimationMethod::Cls,
        valid: theta_is_valid([phi1, phi2, lambda]),
        loglik: None,
    };
    match sandwich(d, fit.theta()) {
        Ok(cov) => fit.set_covariance(&cov),
        Err(e) => log::warn!("CLS covariance unavailable: {e}"),
    }
    Ok(fit)
}

/// The averaged outer-product matrices `(V_hat, W_hat)`.
pub(crate) fn information_matrices(d: &RegimeDesign, theta: [f64; 3]) -> (Matrix3<f64>, Matrix3<f64>) {
    let n = d.len() as f64;
    let mut v = Matrix3::zeros();
    let mut w = Matrix3::zeros();
    for t in 0..d.len() {
        let x = d.prev[t];
        let grad = if d.first[t] { [x, 0.0, 1.0] } else { [0.0, x, 1.0] };
        let u2 = d.residual(t, theta).powi(2);
        for i in 0..3 {
            for j in 0..3 {
                let g = grad[i] * grad[j];
                v[(i, j)] += g;
                w[(i, j)] += u2 * g;
            }
        }
    }
    (v / n, w / n)
}

pub(crate) fn condition_number3(m: &Matrix3<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn sandwich(d: &RegimeDesign, theta: [f64; 3]) -> Result<Matrix3<f64>> {
    let (v, w) = information_matrices(d, theta);
    let condition = condition_number3(&v);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularInformation { condition });
    }
    let vi = v.try_inverse().ok_or(Error::SingularInformation { condition })?;
    let cov = vi * w * vi;
    Ok((cov + cov.transpose()) * 0.5)
}

/// `V_hat^-1 W_hat V_hat^-1` evaluated at `fit` on the same data and threshold.
pub fn cls_covariance(series: &CountSeries, r: u64, order: RegimeOrder, fit: &MeanFit) -> Result<Matrix3<f64>> {
    let d = RegimeDesign::new(series, r, order);
    sandwich(&d, fit.theta())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate, ModelSpec, RngStream};

    fn a1() -> ModelSpec {
        ModelSpec::new(0.4, 0.2, 3.0, 4, RegimeOrder::BinomialBelow).unwrap()
    }

    fn sample(seed: u64, n: usize) -> CountSeries {
        let spec = a1();
        simulate(&spec, n, spec.default_x0(), 500, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn one_regime_series_is_rejected() {
        let s = CountSeries::new(vec![7; 50]);
        let err = cls_fit(&s, 4, RegimeOrder::BinomialBelow).unwrap_err();
        assert!(matches!(err, Error::InsufficientRegimeData { regime: 1, .. }));
    }

    #[test]
    fn constant_regime_is_singular() {
        // every lower-regime transition leaves state 0
        let s = CountSeries::new(vec![0, 9, 0, 7, 0, 8, 0, 6, 0, 9]);
        let err = cls_fit(&s, 4, RegimeOrder::BinomialBelow).unwrap_err();
        assert!(matches!(err, Error::SingularDesign(_)));
    }

    #[test]
    fn first_order_conditions_vanish() {
        let s = sample(5, 400);
        let fit = cls_fit(&s, 4, RegimeOrder::BinomialBelow).unwrap();
        let d = RegimeDesign::new(&s, 4, RegimeOrder::BinomialBelow);
        let mut grad = [0.0; 3];
        for t in 0..d.len() {
            let u = d.residual(t, fit.theta());
            let x = d.prev[t];
            if d.first[t] {
                grad[0] += u * x;
            } else {
                grad[1] += u * x;
            }
            grad[2] += u;
        }
        for g in grad {
            assert!(g.abs() < 1e-8 * d.len() as f64, "gradient {g}");
        }
        assert_eq!(fit.n_binomial + fit.n_negbin, 399);
    }

    #[test]
    fn information_structure() {
        let s = sample(6, 300);
        let fit = cls_fit(&s, 4, RegimeOrder::BinomialBelow).unwrap();
        let d = RegimeDesign::new(&s, 4, RegimeOrder::BinomialBelow);
        let (v, _) = information_matrices(&d, fit.theta());
        assert_eq!(v[(2, 2)], 1.0);
        assert_eq!(v[(0, 1)], 0.0);
        assert_eq!(v[(1, 0)], 0.0);
        let cov = cls_covariance(&s, 4, RegimeOrder::BinomialBelow, &fit).unwrap();
        assert_eq!(cov, cov.transpose());
        assert!((0..3).all(|k| cov[(k, k)] >= 0.0));
        let se = fit.std_errors.unwrap();
        assert!((se[0] - (cov[(0, 0)] / 299.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn within_regime_permutation_invariance() {
        let s = sample(8, 200);
        let order = RegimeOrder::BinomialBelow;
        let fit = cls_fit(&s, 4, order).unwrap();
        let mut pairs: Vec<(u64, u64)> = s.transitions().collect();
        let lower: Vec<usize> = (0..pairs.len()).filter(|&t| pairs[t].0 <= 4).collect();
        let reversed: Vec<(u64, u64)> = lower.iter().rev().map(|&t| pairs[t]).collect();
        for (k, &t) in lower.iter().enumerate() {
            pairs[t] = reversed[k];
        }
        let refit = cls_fit_design(&RegimeDesign::from_pairs(pairs.into_iter(), 4, order)).unwrap();
        for (a, b) in fit.theta().iter().zip(refit.theta()) {
            assert!((a - b).abs() < 1e-12);
        }
        let (c1, c2) = (fit.covariance.unwrap(), refit.covariance.unwrap());
        for i in 0..3 {
            for j in 0..3 {
                assert!((c1[i][j] - c2[i][j]).abs() < 1e-9);
            }
        }
    }

    /// Newton's method on finite differences of `Q` alone. `Q` is quadratic,
    /// so one step from any point lands on the minimizer up to rounding.
    fn newton_minimizer(s: &CountSeries, r: u64, order: RegimeOrder) -> [f64; 3] {
        let q = |t: [f64; 3]| cls_objective(s, r, order, t);
        let x0 = [0.5, 0.5, 1.0];
        let h = 0.5;
        let at = |di: usize, si: f64, dj: usize, sj: f64| {
            let mut t = x0;
            t[di] += si * h;
            t[dj] += sj * h;
            q(t)
        };
        let mut g = nalgebra::Vector3::zeros();
        let mut hess = Matrix3::zeros();
        for i in 0..3 {
            let mut tp = x0;
            let mut tm = x0;
            tp[i] += h;
            tm[i] -= h;
            g[i] = (q(tp) - q(tm)) / (2.0 * h);
            for j in 0..3 {
                hess[(i, j)] = (at(i, 1.0, j, 1.0) - at(i, 1.0, j, -1.0) - at(i, -1.0, j, 1.0)
                    + at(i, -1.0, j, -1.0))
                    / (4.0 * h * h);
            }
        }
        let step = hess.try_inverse().unwrap() * g;
        [x0[0] - step[0], x0[1] - step[1], x0[2] - step[2]]
    }

    #[test]
    fn closed_form_matches_numerical_minimizer() {
        for seed in 0..20 {
            let s = sample(100 + seed, 200);
            let fit = cls_fit(&s, 4, RegimeOrder::BinomialBelow).unwrap();
            let oracle = newton_minimizer(&s, 4, RegimeOrder::BinomialBelow);
            for k in 0..3 {
                assert!((fit.theta()[k] - oracle[k]).abs() < 1e-6, "seed {seed} coord {k}");
            }
        }
    }
}
