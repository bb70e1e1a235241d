use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{in_binomial_regime, truncated_kernel, ModelSpec, RegimeKind};
use crate::error::{Error, Result};

/// Tolerance used for stationary computations inside [`theoretical_moments`].
pub const STATIONARY_TOL: f64 = 1e-12;

/// Number of autocorrelation lags reported by [`theoretical_moments`].
pub const ACF_LAGS: usize = 20;

const MAX_POWER_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Mean and variance of `X_t` given `X_{t-1} = x_prev`.
pub fn conditional_moments(spec: &ModelSpec, x_prev: u64) -> ConditionalMoments {
    let x = x_prev as f64;
    let l = spec.lambda;
    match spec.regime_of(x_prev) {
        RegimeKind::BinomialPoisson => ConditionalMoments {
            mean: spec.phi1 * x + l,
            variance: spec.phi1 * (1.0 - spec.phi1) * x + l,
        },
        RegimeKind::NegBinomialGeometric => ConditionalMoments {
            mean: spec.phi2 * x + l,
            variance: spec.phi2 * (1.0 + spec.phi2) * x + l * (1.0 + l),
        },
    }
}

/// Stationary pmf on `{0, ..., max_state}` by power iteration on the
/// truncated, renormalized kernel.
///
/// Fails with [`Error::Truncation`] when some kept row loses more than `tol`
/// of its mass to the truncation.
pub fn stationary_distribution(spec: &ModelSpec, max_state: usize, tol: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    let kernel = truncated_kernel(spec, max_state);
    kernel.check(tol)?;
    let size = max_state + 1;
    let mut pi = DVector::from_element(size, 1.0 / size as f64);
    for _ in 0..MAX_POWER_ITERATIONS {
        let mut next = kernel.matrix.tr_mul(&pi);
        let total: f64 = next.iter().sum();
        next /= total;
        let change: f64 = (&next - &pi).iter().map(|d| d.abs()).sum();
        pi = next;
        if change < tol {
            return Ok(pi.iter().copied().collect());
        }
    }
    Err(Error::Convergence {
        evaluations: MAX_POWER_ITERATIONS,
        best_value: f64::NAN,
        best_point: [spec.phi1, spec.phi2, spec.lambda],
    })
}

/// Stationary moments of the process.
///
/// `q` is the stationary probability of the binomial/Poisson indicator
/// `I_1`; `mu_s`, `sigma_s_sq` are the mean and variance of `X_t`
/// conditional on regime `s`. `variance` uses the full law of total
/// variance; `variance_displayed_formula` evaluates the closed form that
/// keeps only `q(1-q)phi_s^2 mu_s^2` between-regime terms and is reported
/// next to it so the gap can be inspected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalMoments {
    pub mean: f64,
    pub variance: f64,
    pub variance_displayed_formula: f64,
    pub q: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    /// `acf[h - 1] = Corr(X_t, X_{t+h})` for `h = 1..=ACF_LAGS`.
    pub acf: Vec<f64>,
    /// Stationary mean and variance summed directly from the pmf.
    pub direct_mean: f64,
    pub direct_variance: f64,
    pub max_state: usize,
}

pub fn theoretical_moments(spec: &ModelSpec, max_state: usize) -> Result<TheoreticalMoments> {
    let pi = stationary_distribution(spec, max_state, STATIONARY_TOL)?;
    let kernel = truncated_kernel(spec, max_state);
    let in1: Vec<bool> =
        (0..=max_state).map(|i| in_binomial_regime(i as u64, spec.r, spec.order)).collect();

    let (mut q, mut s1, mut s1sq, mut s2, mut s2sq) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut direct_mean, mut direct_m2) = (0.0, 0.0);
    for (i, &p) in pi.iter().enumerate() {
        let x = i as f64;
        direct_mean += p * x;
        direct_m2 += p * x * x;
        if in1[i] {
            q += p;
            s1 += p * x;
            s1sq += p * x * x;
        } else {
            s2 += p * x;
            s2sq += p * x * x;
        }
    }
    let direct_variance = direct_m2 - direct_mean * direct_mean;
    let conditional = |mass: f64, s: f64, ssq: f64| {
        if mass > 0.0 {
            let mu = s / mass;
            (mu, ssq / mass - mu * mu)
        } else {
            (0.0, 0.0)
        }
    };
    let (mu1, sigma1_sq) = conditional(q, s1, s1sq);
    let (mu2, sigma2_sq) = conditional(1.0 - q, s2, s2sq);

    let (p1, p2, l) = (spec.phi1, spec.phi2, spec.lambda);
    let qc = 1.0 - q;
    let mean = q * p1 * mu1 + qc * p2 * mu2 + l;

    let within = q * (p1 * p1 * sigma1_sq + p1 * (1.0 - p1) * mu1)
        + qc * (p2 * p2 * sigma2_sq + p2 * (1.0 + p2) * mu2)
        + q * l
        + qc * l * (1.0 + l);
    let variance = within + q * qc * (p1 * mu1 - p2 * mu2).powi(2);
    let variance_displayed_formula = within + q * qc * p1 * p1 * mu1 * mu1 + q * qc * p2 * p2 * mu2 * mu2
        - 2.0 * q * qc * (p1 * mu1 + l) * (p2 * mu2 + l);

    // gamma_k^(s) = E[X_t X_{t+k} | X_{t+k} in regime s] - mu_s E(X_t).
    // w_k = (pi .* x) P^k carries E[X_t 1{X_{t+k} = j}].
    let mut w = DVector::from_iterator(pi.len(), pi.iter().enumerate().map(|(i, p)| p * i as f64));
    let mut acf = Vec::with_capacity(ACF_LAGS);
    for _h in 1..=ACF_LAGS {
        let (mut e1, mut e2) = (0.0, 0.0);
        for (j, &wj) in w.iter().enumerate() {
            if in1[j] {
                e1 += wj * j as f64;
            } else {
                e2 += wj * j as f64;
            }
        }
        let gamma1 = if q > 0.0 { e1 / q - mu1 * mean } else { 0.0 };
        let gamma2 = if qc > 0.0 { e2 / qc - mu2 * mean } else { 0.0 };
        let cov = p1 * q * gamma1 + p2 * qc * gamma2;
        acf.push(cov / variance);
        w = kernel.matrix.tr_mul(&w);
    }

    Ok(TheoreticalMoments {
        mean,
        variance,
        variance_displayed_formula,
        q,
        mu1,
        mu2,
        sigma1_sq,
        sigma2_sq,
        acf,
        direct_mean,
        direct_variance,
        max_state,
    })
}
