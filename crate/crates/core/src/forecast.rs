//! Diagnostics (Pearson residuals, RMS, information criteria) and h-step
//! forecast distributions from powers of the truncated transition matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cls::{MeanFit, RegimeDesign};
use crate::cml::conditional_log_likelihood;
use crate::error::{Error, Result};
use crate::model::{conditional_moments, truncated_kernel, CountSeries, ModelSpec, RegimeOrder, TruncatedKernel};

/// Largest per-row mass a forecasting kernel may lose to truncation.
pub const MAX_ROW_DEFICIT: f64 = 1e-6;

/// Truncation mass above which a forecast carries a warning flag.
pub const TRUNCATION_WARNING: f64 = 1e-8;

/// Number of free parameters of the model for information criteria.
pub const N_PARAMS: usize = 3;

/// Row-normalized kernel on `{0, ..., max_state}`.
pub fn transition_matrix(spec: &ModelSpec, max_state: usize) -> Result<TruncatedKernel> {
    spec.validate()?;
    let k = truncated_kernel(spec, max_state);
    k.check(MAX_ROW_DEFICIT)?;
    Ok(k)
}

/// `P^h` by repeated squaring.
pub fn matrix_power(p: &DMatrix<f64>, h: usize) -> DMatrix<f64> {
    let mut result = DMatrix::identity(p.nrows(), p.ncols());
    let mut base = p.clone();
    let mut e = h;
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        e >>= 1;
        if e > 0 {
            base = &base * &base;
        }
    }
    result
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastPMF {
    pub horizon: usize,
    pub origin: u64,
    pub max_state: usize,
    /// `probabilities[j] = P(X_{t+h} = j | X_t = origin)`, renormalized.
    pub probabilities: Vec<f64>,
    /// Probability that the untruncated chain leaves `{0, ..., max_state}`
    /// within `horizon` steps from `origin`.
    pub truncation_mass: f64,
    pub truncation_warning: bool,
}

/// Mass the untruncated chain keeps inside the state space after `h` steps.
fn retained_mass(k: &TruncatedKernel, origin: usize, h: usize) -> f64 {
    // raw rows are the normalized rows scaled back by (1 - deficit)
    let keep = DVector::from_iterator(k.deficits.len(), k.deficits.iter().map(|d| 1.0 - d));
    if keep.iter().all(|&v| v == 1.0) {
        return 1.0;
    }
    let mut v = DVector::zeros(k.max_state + 1);
    v[origin] = 1.0;
    for _ in 0..h {
        v = k.matrix.tr_mul(&v.component_mul(&keep));
    }
    v.sum()
}

pub fn h_step_distribution(spec: &ModelSpec, x_now: u64, h: usize, max_state: usize) -> Result<ForecastPMF> {
    if h == 0 {
        return Err(Error::Domain("forecast horizon must be at least 1".into()));
    }
    if x_now as usize > max_state {
        return Err(Error::Domain(format!("origin {x_now} exceeds max_state {max_state}")));
    }
    let k = transition_matrix(spec, max_state)?;
    let ph = matrix_power(&k.matrix, h);
    Ok(pmf_from_power(&k, &ph, x_now, h))
}

fn pmf_from_power(k: &TruncatedKernel, ph: &DMatrix<f64>, x_now: u64, h: usize) -> ForecastPMF {
    let row = ph.row(x_now as usize);
    let total: f64 = row.iter().sum();
    let probabilities: Vec<f64> = row.iter().map(|p| (p / total).max(0.0)).collect();
    let truncation_mass = (1.0 - retained_mass(k, x_now as usize, h)).clamp(0.0, 1.0);
    let truncation_warning = truncation_mass >= TRUNCATION_WARNING;
    if truncation_warning {
        log::warn!("forecast h = {h} from {x_now} loses {truncation_mass:.2e} to truncation");
    }
    ForecastPMF {
        horizon: h,
        origin: x_now,
        max_state: k.max_state,
        probabilities,
        truncation_mass,
        truncation_warning,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointForecasts {
    pub mean: f64,
    /// Most probable value, smallest on ties.
    pub mode: u64,
    /// Smallest value whose CDF reaches 0.5.
    pub median: u64,
}

pub fn point_forecasts(pmf: &ForecastPMF) -> PointForecasts {
    let p = &pmf.probabilities;
    let mean = p.iter().enumerate().map(|(j, q)| j as f64 * q).sum();
    let mut mode = 0;
    for (j, &q) in p.iter().enumerate() {
        if q > p[mode] {
            mode = j;
        }
    }
    let mut cdf = 0.0;
    let mut median = p.len().saturating_sub(1);
    for (j, &q) in p.iter().enumerate() {
        cdf += q;
        if cdf >= 0.5 - 1e-12 {
            median = j;
            break;
        }
    }
    PointForecasts { mean, mode: mode as u64, median: median as u64 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    /// `(x_t - E_hat[x_t | x_{t-1}]) / sqrt(Var_hat[x_t | x_{t-1}])`, one per transition.
    pub residuals: Vec<f64>,
    pub mean: f64,
    /// Sample variance with divisor `len - 1`.
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitScores {
    pub loglik: f64,
    /// Root mean squared one-step mean residual, divisor = number of transitions.
    pub rms: f64,
    pub aic: f64,
    pub bic: f64,
    pub n_transitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub pearson: ResidualSummary,
    pub scores: FitScores,
}

fn spec_of(fit: &MeanFit, r: u64, order: RegimeOrder) -> Result<ModelSpec> {
    ModelSpec::new(fit.phi1, fit.phi2, fit.lambda, r, order)
}

fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

pub fn pearson_residuals(series: &CountSeries, fit: &MeanFit, r: u64, order: RegimeOrder) -> Result<ResidualSummary> {
    let spec = spec_of(fit, r, order)?;
    if series.n_transitions() == 0 {
        return Err(Error::Input("residuals need at least two observations".into()));
    }
    let mut residuals = Vec::with_capacity(series.n_transitions());
    for (xp, xc) in series.transitions() {
        let m = conditional_moments(&spec, xp);
        if !(m.variance > 0.0) {
            return Err(Error::Domain(format!("fitted conditional variance {} at state {xp}", m.variance)));
        }
        residuals.push((xc as f64 - m.mean) / m.variance.sqrt());
    }
    let (mean, variance) = mean_and_variance(&residuals);
    Ok(ResidualSummary { residuals, mean, variance })
}

/// `(AIC, BIC)` for `k` parameters and `m` transitions.
pub fn information_criteria(loglik: f64, k: usize, m: usize) -> (f64, f64) {
    (-2.0 * loglik + 2.0 * k as f64, -2.0 * loglik + k as f64 * (m as f64).ln())
}

pub fn fit_scores(series: &CountSeries, fit: &MeanFit, r: u64, order: RegimeOrder) -> Result<FitScores> {
    let ll = conditional_log_likelihood(series, fit.phi1, fit.phi2, fit.lambda, r, order)?.loglik;
    let d = RegimeDesign::new(series, r, order);
    let m = d.len();
    if m == 0 {
        return Err(Error::Input("scores need at least two observations".into()));
    }
    let ss: f64 = (0..m).map(|t| d.residual(t, fit.theta()).powi(2)).sum();
    let (aic, bic) = information_criteria(ll, N_PARAMS, m);
    Ok(FitScores { loglik: ll, rms: (ss / m as f64).sqrt(), aic, bic, n_transitions: m })
}

pub fn diagnostics(series: &CountSeries, fit: &MeanFit, r: u64, order: RegimeOrder) -> Result<DiagnosticsReport> {
    Ok(DiagnosticsReport {
        pearson: pearson_residuals(series, fit, r, order)?,
        scores: fit_scores(series, fit, r, order)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastErrors {
    /// Mean of `forecast - actual`.
    pub bias: f64,
    /// Mean absolute deviation over the forecasts.
    pub made: f64,
}

pub fn forecast_error_metrics(actuals: &[u64], forecasts: &[f64]) -> Result<ForecastErrors> {
    if actuals.len() != forecasts.len() {
        return Err(Error::Input(format!(
            "{} actuals but {} forecasts",
            actuals.len(),
            forecasts.len()
        )));
    }
    if actuals.is_empty() {
        return Err(Error::Input("no forecasts to evaluate".into()));
    }
    let n = actuals.len() as f64;
    let (mut bias, mut made) = (0.0, 0.0);
    for (&a, &f) in actuals.iter().zip(forecasts) {
        bias += f - a as f64;
        made += (f - a as f64).abs();
    }
    Ok(ForecastErrors { bias: bias / n, made: made / n })
}

/// Accuracy of the three point forecasts at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonEvaluation {
    pub horizon: usize,
    pub n_forecasts: usize,
    pub mean: ForecastErrors,
    pub mode: ForecastErrors,
    pub median: ForecastErrors,
}

/// Rolling-origin evaluation over the last `holdout` observations.
///
/// Origins run from the last point before the holdout to `n - 1 - h`; each
/// forecast conditions on the observed value at its origin, so horizon `h`
/// yields `holdout - h + 1` forecasts. Requires `h <= holdout < n`.
pub fn rolling_evaluation(
    series: &CountSeries,
    spec: &ModelSpec,
    horizons: &[usize],
    holdout: usize,
    max_state: usize,
) -> Result<Vec<HorizonEvaluation>> {
    let x = series.values();
    let n = x.len();
    if holdout == 0 || holdout >= n {
        return Err(Error::Input(format!("holdout {holdout} must lie in 1..{n}")));
    }
    let k = transition_matrix(spec, max_state)?;
    let first_origin = n - holdout - 1;
    let mut out = Vec::with_capacity(horizons.len());
    for &h in horizons {
        if h == 0 || h > holdout {
            return Err(Error::Input(format!("horizon {h} must lie in 1..={holdout}")));
        }
        let ph = matrix_power(&k.matrix, h);
        let mut actual = Vec::new();
        let mut by_kind = [Vec::new(), Vec::new(), Vec::new()];
        for o in first_origin..=(n - 1 - h) {
            if x[o] as usize > max_state {
                return Err(Error::Domain(format!("origin value {} exceeds max_state {max_state}", x[o])));
            }
            let pf = point_forecasts(&pmf_from_power(&k, &ph, x[o], h));
            actual.push(x[o + h]);
            by_kind[0].push(pf.mean);
            by_kind[1].push(pf.mode as f64);
            by_kind[2].push(pf.median as f64);
        }
        out.push(HorizonEvaluation {
            horizon: h,
            n_forecasts: actual.len(),
            mean: forecast_error_metrics(&actual, &by_kind[0])?,
            mode: forecast_error_metrics(&actual, &by_kind[1])?,
            median: forecast_error_metrics(&actual, &by_kind[2])?,
        });
    }
    Ok(out)
}

/// Sample autocorrelations at lags `1..=lags`.
pub fn sample_acf(xs: &[f64], lags: usize) -> Vec<f64> {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let c0: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (1..=lags)
        .map(|k| {
            if k >= n || c0 == 0.0 {
                return 0.0;
            }
            (0..n - k).map(|t| (xs[t] - mean) * (xs[t + k] - mean)).sum::<f64>() / c0
        })
        .collect()
}

/// Sample partial autocorrelations at lags `1..=lags` (Durbin-Levinson).
pub fn sample_pacf(xs: &[f64], lags: usize) -> Vec<f64> {
    let rho = sample_acf(xs, lags);
    let mut pacf = Vec::with_capacity(lags);
    let mut phi: Vec<f64> = Vec::new();
    let mut v = 1.0;
    for k in 0..lags {
        let num = rho[k] - phi.iter().enumerate().map(|(j, p)| p * rho[k - 1 - j]).sum::<f64>();
        let a = if v > 0.0 { num / v } else { 0.0 };
        let prev = phi.clone();
        phi = prev.iter().enumerate().map(|(j, p)| p - a * prev[k - 1 - j]).collect();
        phi.push(a);
        v *= 1.0 - a * a;
        pacf.push(a);
    }
    pacf
}

/// `(theoretical normal quantile, ordered sample value)` at plotting
/// positions `(i - 0.5) / n`.
pub fn normal_qq(xs: &[f64]) -> Vec<(f64, f64)> {
    let normal = Normal::standard();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (normal.inverse_cdf((i as f64 + 0.5) / n), v))
        .collect()
}
