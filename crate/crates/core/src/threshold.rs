//! Threshold estimation: likelihood grid, conditional-variance least
//! squares, and the doubly nested subsample search over `(r, lambda)`.
//!
//! Every search visits candidates in increasing `r` and breaks ties toward
//! the smallest `r`.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cls::{cls_fit, cls_fit_design, MeanFit, RegimeDesign};
use crate::cml::cml_fit;
use crate::error::{Error, Result};
use crate::model::{CountSeries, RegimeOrder};
use crate::optim::{minimize, to_constrained, to_unconstrained, Options};

/// Fewest transitions a regime must keep for a candidate to be scored.
pub const MIN_REGIME_TRANSITIONS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    CmlGrid,
    VarianceCls,
    DNess,
}

/// Per-`lambda` winners of the nested search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnessPath {
    /// `(lambda_j, r_hat(lambda_j), J_n(r_hat(lambda_j), lambda_j))`.
    pub steps: Vec<(f64, u64, f64)>,
    pub lambda_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearchResult {
    pub method: ThresholdMethod,
    pub r_hat: u64,
    /// `(r, score)` for every scored candidate, increasing in `r`. Scores are
    /// the maximized log-likelihood, the minimized variance criterion, or
    /// `J_n(r, lambda_hat)`.
    pub per_candidate: Vec<(u64, f64)>,
    pub skipped: Vec<u64>,
    pub fit_at_r_hat: MeanFit,
    pub dness: Option<DnessPath>,
}

/// Type-1 empirical quantiles of the series at `lo_q` and `hi_q`.
pub fn candidate_range(series: &CountSeries, lo_q: f64, hi_q: f64) -> Result<(u64, u64)> {
    if !(0.0..=1.0).contains(&lo_q) || !(0.0..=1.0).contains(&hi_q) || lo_q >= hi_q {
        return Err(Error::Domain(format!("quantile levels must satisfy 0 <= lo < hi <= 1, got {lo_q}, {hi_q}")));
    }
    if series.len() < 10 {
        return Err(Error::Input(format!("candidate range needs at least 10 observations, got {}", series.len())));
    }
    let mut v = series.values().to_vec();
    v.sort_unstable();
    let n = v.len();
    let pick = |q: f64| {
        let idx = ((q * n as f64 - 1e-9).ceil() as i64 - 1).clamp(0, n as i64 - 1);
        v[idx as usize]
    };
    Ok((pick(lo_q), pick(hi_q)))
}

fn check_range(range: (u64, u64)) -> Result<()> {
    if range.0 > range.1 {
        return Err(Error::NoCandidates { lo: range.0, hi: range.1 });
    }
    Ok(())
}

fn scorable(series: &CountSeries, r: u64, order: RegimeOrder) -> Option<RegimeDesign> {
    let d = RegimeDesign::new(series, r, order);
    d.require(MIN_REGIME_TRANSITIONS).ok().map(|_| d)
}

/// Index of the best score; earlier entries win ties.
fn arg_best(scores: &[(u64, f64)], maximize: bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &(_, s)) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        let wins = match best {
            None => true,
            Some(b) => {
                if maximize {
                    s > scores[b].1
                } else {
                    s < scores[b].1
                }
            }
        };
        if wins {
            best = Some(k);
        }
    }
    best
}

fn fallback_start(d: &RegimeDesign) -> [f64; 3] {
    let mean = d.m3 / d.len() as f64;
    [0.5, 0.5, (0.5 * mean).max(0.1)]
}

fn split(outcomes: Vec<(u64, Option<(f64, Option<MeanFit>)>)>) -> (Vec<(u64, f64)>, Vec<u64>, Vec<Option<MeanFit>>) {
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    let mut fits = Vec::new();
    for (r, o) in outcomes {
        match o {
            Some((s, f)) => {
                scores.push((r, s));
                fits.push(f);
            }
            None => skipped.push(r),
        }
    }
    (scores, skipped, fits)
}

/// `r_hat = argmax_r` of the maximized conditional log-likelihood.
pub fn search_r_cml(series: &CountSeries, order: RegimeOrder, range: (u64, u64)) -> Result<ThresholdSearchResult> {
    check_range(range)?;
    let outcomes: Vec<(u64, Option<(f64, Option<MeanFit>)>)> = (range.0..=range.1)
        .into_par_iter()
        .map(|r| {
            let Some(d) = scorable(series, r, order) else { return (r, None) };
            let start = cls_fit_design(&d).unwrap_or_else(|_| fallback_fit(&d));
            match cml_fit(series, r, order, Some(&start)) {
                Ok(fit) => (r, Some((fit.loglik.unwrap_or(f64::NEG_INFINITY), Some(fit)))),
                Err(e) => {
                    log::warn!("candidate r = {r} skipped: {e}");
                    (r, None)
                }
            }
        })
        .collect();
    let (per_candidate, skipped, fits) = split(outcomes);
    let k = arg_best(&per_candidate, true).ok_or(Error::NoCandidates { lo: range.0, hi: range.1 })?;
    Ok(ThresholdSearchResult {
        method: ThresholdMethod::CmlGrid,
        r_hat: per_candidate[k].0,
        fit_at_r_hat: fits[k].clone().expect("scored candidates carry a fit"),
        per_candidate,
        skipped,
        dness: None,
    })
}

/// Starting point for candidates whose CLS normal equations are singular.
fn fallback_fit(d: &RegimeDesign) -> MeanFit {
    let [phi1, phi2, lambda] = fallback_start(d);
    MeanFit {
        phi1,
        phi2,
        lambda,
        covariance: None,
        std_errors: None,
        n_binomial: d.n1,
        n_negbin: d.n2,
        n_transitions: d.len(),
        method: crate::cls::EstimationMethod::Cls,
        valid: true,
        loglik: None,
    }
}

/// Variance criterion `Q~_n(theta, r)`: squared deviations of the squared
/// mean residual from the regime-specific conditional variance.
pub fn variance_criterion(series: &CountSeries, r: u64, order: RegimeOrder, theta: [f64; 3]) -> f64 {
    variance_criterion_design(&RegimeDesign::new(series, r, order), theta)
}

fn variance_criterion_design(d: &RegimeDesign, theta: [f64; 3]) -> f64 {
    let [p1, p2, l] = theta;
    (0..d.len())
        .map(|t| {
            let v = d.residual(t, theta).powi(2);
            let x = d.prev[t];
            let g = if d.first[t] { p1 * (1.0 - p1) * x + l } else { p2 * (1.0 + p2) * x + l * (1.0 + l) };
            (v - g).powi(2)
        })
        .sum()
}

/// Minimized `Q~_n` at one threshold, started from the CLS estimate.
fn minimize_variance_criterion(d: &RegimeDesign) -> (f64, [f64; 3]) {
    let start = cls_fit_design(d).map(|f| f.theta()).unwrap_or_else(|_| fallback_start(d));
    let start = [start[0].clamp(0.02, 0.98), start[1].clamp(0.02, 0.98), if start[2] > 0.05 { start[2] } else { 1.0 }];
    let m = d.len() as f64;
    let res = minimize(
        |u: &Vector3<f64>| variance_criterion_design(d, to_constrained(u)) / m,
        to_unconstrained(start),
        Options::default(),
    );
    if !res.converged {
        log::warn!("variance criterion minimization stopped after {} evaluations", res.evals);
    }
    (res.value * m, to_constrained(&res.x))
}

/// Two-step estimator: `r_hat = argmin_r min_theta Q~_n(theta, r)`, then CLS at `r_hat`.
pub fn search_r_cls_var(series: &CountSeries, order: RegimeOrder, range: (u64, u64)) -> Result<ThresholdSearchResult> {
    check_range(range)?;
    let outcomes: Vec<(u64, Option<(f64, Option<MeanFit>)>)> = (range.0..=range.1)
        .into_par_iter()
        .map(|r| match scorable(series, r, order) {
            Some(d) => (r, Some((minimize_variance_criterion(&d).0, None))),
            None => (r, None),
        })
        .collect();
    let (per_candidate, skipped, _) = split(outcomes);
    let k = arg_best(&per_candidate, false).ok_or(Error::NoCandidates { lo: range.0, hi: range.1 })?;
    let r_hat = per_candidate[k].0;
    Ok(ThresholdSearchResult {
        method: ThresholdMethod::VarianceCls,
        r_hat,
        fit_at_r_hat: cls_fit(series, r_hat, order)?,
        per_candidate,
        skipped,
        dness: None,
    })
}

/// Sums needed for a least-squares slope at fixed intercept `lambda`.
#[derive(Debug, Clone, Copy, Default)]
struct SlopeSums {
    n: usize,
    x: f64,
    xx: f64,
    xy: f64,
    y: f64,
    yy: f64,
}

impl SlopeSums {
    fn add(&mut self, x: f64, y: f64) {
        self.n += 1;
        self.x += x;
        self.xx += x * x;
        self.xy += x * y;
        self.y += y;
        self.yy += y * y;
    }

    /// `min_b sum (y - b x - lambda)^2`, `None` when every `x` is zero.
    fn sse(&self, lambda: f64) -> Option<f64> {
        if self.xx <= 0.0 {
            return None;
        }
        let b = (self.xy - lambda * self.x) / self.xx;
        let n = self.n as f64;
        let sse = self.yy - 2.0 * b * self.xy - 2.0 * lambda * self.y + b * b * self.xx + 2.0 * b * lambda * self.x
            + n * lambda * lambda;
        Some(sse.max(0.0))
    }
}

/// `(S_n(r, lambda), one-regime sum of squares)` with the split `X_{t-1} <= r`.
/// `None` when a side has fewer than [`MIN_REGIME_TRANSITIONS`] transitions
/// or no nonzero `X_{t-1}`.
pub fn dness_sums(series: &CountSeries, r: u64, lambda: f64) -> Option<(f64, f64)> {
    let (mut low, mut high, mut all) = (SlopeSums::default(), SlopeSums::default(), SlopeSums::default());
    for (xp, xc) in series.transitions() {
        let (x, y) = (xp as f64, xc as f64);
        all.add(x, y);
        if xp <= r {
            low.add(x, y)
        } else {
            high.add(x, y)
        }
    }
    if low.n < MIN_REGIME_TRANSITIONS || high.n < MIN_REGIME_TRANSITIONS {
        return None;
    }
    Some((low.sse(lambda)? + high.sse(lambda)?, all.sse(lambda)?))
}

/// Nested search over `lambda_j = lambda_lo + j (lambda_hi - lambda_lo) / steps`,
/// `j = 0..=steps`, maximizing `J_n(r, lambda)`; the final fit is CLS at `r_hat`.
pub fn dness_search(
    series: &CountSeries,
    order: RegimeOrder,
    lambda_lo: f64,
    lambda_hi: f64,
    steps: usize,
    range: (u64, u64),
) -> Result<ThresholdSearchResult> {
    check_range(range)?;
    if !(lambda_lo < lambda_hi) || steps == 0 {
        return Err(Error::Domain(format!(
            "lambda grid needs lambda_lo < lambda_hi and at least one step, got ({lambda_lo}, {lambda_hi}, {steps})"
        )));
    }
    let mut path = Vec::with_capacity(steps + 1);
    let mut tables = Vec::with_capacity(steps + 1);
    let mut skipped = Vec::new();
    for j in 0..=steps {
        let lambda = lambda_lo + j as f64 * (lambda_hi - lambda_lo) / steps as f64;
        let mut scores = Vec::new();
        for r in range.0..=range.1 {
            match dness_sums(series, r, lambda) {
                Some((s, sse0)) => scores.push((r, sse0 - s)),
                None if j == 0 => skipped.push(r),
                None => {}
            }
        }
        if let Some(k) = arg_best(&scores, true) {
            path.push((lambda, scores[k].0, scores[k].1));
            tables.push(scores);
        }
    }
    let by_lambda: Vec<(u64, f64)> = path.iter().map(|p| (p.1, p.2)).collect();
    let best = arg_best(&by_lambda, true).ok_or(Error::NoCandidates { lo: range.0, hi: range.1 })?;
    let (lambda_hat, r_hat, _) = path[best];
    let per_candidate = tables.swap_remove(best);
    Ok(ThresholdSearchResult {
        method: ThresholdMethod::DNess,
        r_hat,
        fit_at_r_hat: cls_fit(series, r_hat, order)?,
        per_candidate,
        skipped,
        dness: Some(DnessPath { steps: path, lambda_hat }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cml::conditional_log_likelihood;
    use crate::model::{simulate, ModelSpec, RngStream};

    fn sample(spec: &ModelSpec, seed: u64, n: usize) -> CountSeries {
        simulate(spec, n, spec.default_x0(), 500, &mut RngStream::new(seed)).unwrap()
    }

    fn a1() -> ModelSpec {
        ModelSpec::new(0.4, 0.2, 3.0, 4, RegimeOrder::BinomialBelow).unwrap()
    }

    #[test]
    fn type1_quantiles() {
        let s = CountSeries::new((0..100).collect());
        assert_eq!(candidate_range(&s, 0.1, 0.9).unwrap(), (9, 89));
        let c = CountSeries::new(vec![6; 40]);
        assert_eq!(candidate_range(&c, 0.1, 0.9).unwrap(), (6, 6));
        // oracle: smallest value whose empirical CDF reaches q
        let s = sample(&a1(), 1, 137);
        let mut v = s.values().to_vec();
        v.sort_unstable();
        for q in [0.0, 0.05, 0.1, 0.25, 0.5, 0.9] {
            let oracle = *v.iter().find(|&&x| v.iter().filter(|&&y| y <= x).count() as f64 >= q * 137.0).unwrap();
            assert_eq!(candidate_range(&s, q, 1.0).unwrap().0, oracle, "q = {q}");
        }
        assert!(candidate_range(&CountSeries::new(vec![1; 9]), 0.1, 0.9).is_err());
        assert!(candidate_range(&s, 0.9, 0.1).is_err());
    }

    #[test]
    fn cml_grid_bookkeeping_and_dominance() {
        let spec = a1();
        let s = sample(&spec, 2, 300);
        let order = spec.order;
        let range = candidate_range(&s, 0.1, 0.9).unwrap();
        let res = search_r_cml(&s, order, range).unwrap();
        assert_eq!(res.per_candidate.len() + res.skipped.len(), (range.1 - range.0 + 1) as usize);
        assert!(res.r_hat >= range.0 && res.r_hat <= range.1);
        let best = res.per_candidate.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(res.per_candidate.iter().find(|c| c.0 == res.r_hat).unwrap().1, best);
        for &(r, ll) in &res.per_candidate {
            if let Ok(cls) = cls_fit(&s, r, order) {
                if cls.valid {
                    let at = conditional_log_likelihood(&s, cls.phi1, cls.phi2, cls.lambda, r, order).unwrap();
                    assert!(ll >= at.loglik - 1e-9, "r = {r}");
                }
            }
        }
        let again = search_r_cml(&s, order, range).unwrap();
        assert_eq!(res, again);
    }

    #[test]
    fn variance_search_stays_in_range() {
        let spec = a1();
        let s = sample(&spec, 3, 400);
        // true threshold at the lower boundary of the range
        let res = search_r_cls_var(&s, spec.order, (4, 9)).unwrap();
        assert!((4..=9).contains(&res.r_hat));
        let best = res.per_candidate.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
        assert_eq!(res.per_candidate.iter().find(|c| c.0 == res.r_hat).unwrap().1, best);
        assert_eq!(res.fit_at_r_hat, cls_fit(&s, res.r_hat, spec.order).unwrap());
        assert_eq!(res, search_r_cls_var(&s, spec.order, (4, 9)).unwrap());
        for &(r, q) in &res.per_candidate {
            let cls = cls_fit(&s, r, spec.order).unwrap();
            if cls.valid {
                assert!(q <= variance_criterion(&s, r, spec.order, cls.theta()) + 1e-6);
            }
        }
    }

    /// Golden-section minimization of a one-dimensional convex function.
    fn golden(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) < f(d) {
                b = d
            } else {
                a = c
            }
        }
        f(0.5 * (a + b))
    }

    #[test]
    fn split_sums_of_squares_refine_the_pooled_fit() {
        // two regimes with very different slopes
        let spec = ModelSpec::new(0.9, 0.1, 2.0, 6, RegimeOrder::BinomialBelow).unwrap();
        let s = sample(&spec, 4, 300);
        let pairs: Vec<(f64, f64, u64)> = s.transitions().map(|(a, b)| (a as f64, b as f64, a)).collect();
        for lambda in [1.0, 2.0, 3.5] {
            let pooled = golden(|b| pairs.iter().map(|p| (p.1 - b * p.0 - lambda).powi(2)).sum(), -5.0, 5.0);
            for r in 3..=9 {
                let (sn, sse0) = dness_sums(&s, r, lambda).unwrap();
                let side = |low: bool| {
                    golden(
                        |b| pairs.iter().filter(|p| (p.2 <= r) == low).map(|p| (p.1 - b * p.0 - lambda).powi(2)).sum(),
                        -5.0,
                        5.0,
                    )
                };
                let direct = side(true) + side(false);
                assert!((sse0 - pooled).abs() < 1e-6 * pooled, "pooled");
                assert!((sn - direct).abs() < 1e-6 * direct, "split r={r}");
                assert!(sn <= sse0 + 1e-9);
            }
        }
    }

    #[test]
    fn dness_selects_best_lambda_and_r() {
        let spec = ModelSpec::new(0.8, 0.1, 3.0, 6, RegimeOrder::BinomialBelow).unwrap();
        let s = sample(&spec, 5, 800);
        let range = candidate_range(&s, 0.1, 0.9).unwrap();
        let res = dness_search(&s, spec.order, 2.0, 6.0, 4, range).unwrap();
        let path = res.dness.as_ref().unwrap();
        assert_eq!(path.steps.len(), 5);
        let top = path.steps.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
        let first = path.steps.iter().find(|p| p.2 == top).unwrap();
        assert_eq!((first.0, first.1), (path.lambda_hat, res.r_hat));
        let best = res.per_candidate.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(res.per_candidate.iter().find(|c| c.0 == res.r_hat).unwrap().1, best);
        assert!(dness_search(&s, spec.order, 6.0, 2.0, 4, range).is_err());
        assert!(dness_search(&s, spec.order, 2.0, 6.0, 0, range).is_err());
    }

    #[test]
    fn empty_ranges_are_rejected() {
        let s = sample(&a1(), 6, 100);
        assert!(matches!(search_r_cml(&s, RegimeOrder::BinomialBelow, (5, 4)), Err(Error::NoCandidates { .. })));
        // every candidate leaves the upper regime empty
        let err = search_r_cls_var(&s, RegimeOrder::BinomialBelow, (1000, 1001)).unwrap_err();
        assert!(matches!(err, Error::NoCandidates { .. }));
    }
}

