//! Conditional maximum likelihood on the exact transition probabilities.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::cls::{cls_fit, theta_is_valid, EstimationMethod, MeanFit};
use crate::error::{Error, Result};
use crate::model::{in_binomial_regime, CountSeries, LogParams, RegimeOrder};
use crate::optim::{self, fd_step, jacobian_diag, minimize, to_constrained, to_unconstrained, Options};

/// Log-probability substituted for an impossible transition inside the optimizer.
pub const ZERO_PROBABILITY_PENALTY: f64 = -1e10;

/// Distance from the box boundary that triggers jittered restarts.
const BOUNDARY_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodEval {
    pub loglik: f64,
    /// `ell_t = ln P(X_t | X_{t-1})`, one entry per transition.
    pub per_observation: Vec<f64>,
    /// Numerical gradient with respect to `(phi1, phi2, lambda)`.
    pub gradient: Option<[f64; 3]>,
    /// Set when some transition has probability zero (`loglik = -inf`).
    pub has_zero_probability: bool,
}

/// Distinct transitions with multiplicities. Likelihood work scales with the
/// number of distinct pairs, not the series length.
#[derive(Debug, Clone)]
pub(crate) struct PairTable {
    pairs: Vec<(u64, u64, bool)>,
    counts: Vec<f64>,
    /// Index into `pairs` for each transition, in time order.
    index: Vec<usize>,
}

impl PairTable {
    pub fn new(series: &CountSeries, r: u64, order: RegimeOrder) -> Self {
        let mut map: BTreeMap<(u64, u64), usize> = BTreeMap::new();
        for pair in series.transitions() {
            *map.entry(pair).or_insert(0) += 1;
        }
        let mut pairs = Vec::with_capacity(map.len());
        let mut counts = Vec::with_capacity(map.len());
        let mut slot = BTreeMap::new();
        for (k, (&(i, j), &c)) in map.iter().enumerate() {
            pairs.push((i, j, in_binomial_regime(i, r, order)));
            counts.push(c as f64);
            slot.insert((i, j), k);
        }
        let index = series.transitions().map(|p| slot[&p]).collect();
        PairTable { pairs, counts, index }
    }

    pub fn n_transitions(&self) -> usize {
        self.index.len()
    }

    fn ln_probs(&self, theta: [f64; 3]) -> Vec<f64> {
        let lp = LogParams::new(theta[0], theta[1], theta[2]);
        self.pairs.iter().map(|&(i, j, b)| lp.ln_transition(b, i, j)).collect()
    }

    /// Log-likelihood with impossible transitions replaced by the penalty.
    fn penalized(&self, theta: [f64; 3]) -> f64 {
        if !theta_is_valid(theta) {
            return f64::NEG_INFINITY;
        }
        self.ln_probs(theta)
            .iter()
            .zip(&self.counts)
            .map(|(&l, &c)| c * if l == f64::NEG_INFINITY { ZERO_PROBABILITY_PENALTY } else { l })
            .sum()
    }

    fn penalized_u(&self, u: &Vector3<f64>) -> f64 {
        self.penalized(to_constrained(u))
    }
}

/// `sum_t ln P(x_t | x_{t-1})` at the given parameters.
pub fn conditional_log_likelihood(
    series: &CountSeries,
    phi1: f64,
    phi2: f64,
    lambda: f64,
    r: u64,
    order: RegimeOrder,
) -> Result<LikelihoodEval> {
    let theta = [phi1, phi2, lambda];
    if !theta_is_valid(theta) {
        return Err(Error::Domain(format!(
            "likelihood needs phi1, phi2 in (0,1) and lambda > 0, got ({phi1}, {phi2}, {lambda})"
        )));
    }
    let table = PairTable::new(series, r, order);
    let lp = table.ln_probs(theta);
    let per_observation: Vec<f64> = table.index.iter().map(|&k| lp[k]).collect();
    let has_zero_probability = per_observation.iter().any(|&l| l == f64::NEG_INFINITY);
    let loglik = per_observation.iter().sum();

    let gradient = (!has_zero_probability).then(|| {
        let mut g = [0.0; 3];
        for (k, gk) in g.iter_mut().enumerate() {
            let h = fd_step(theta[k]).min(0.5 * theta[k]).min(if k < 2 { 0.5 * (1.0 - theta[k]) } else { f64::MAX });
            let mut tp = theta;
            let mut tm = theta;
            tp[k] += h;
            tm[k] -= h;
            *gk = (table.penalized(tp) - table.penalized(tm)) / (2.0 * h);
        }
        g
    });

    Ok(LikelihoodEval { loglik, per_observation, gradient, has_zero_probability })
}

fn clamp_into_box(theta: [f64; 3]) -> [f64; 3] {
    let unit = |v: f64| if v.is_finite() { v.clamp(0.02, 0.98) } else { 0.5 };
    let lambda = if theta[2].is_finite() && theta[2] > 0.05 { theta[2] } else { 1.0 };
    [unit(theta[0]), unit(theta[1]), lambda]
}

fn near_boundary(theta: [f64; 3]) -> bool {
    theta[0] < BOUNDARY_MARGIN
        || theta[0] > 1.0 - BOUNDARY_MARGIN
        || theta[1] < BOUNDARY_MARGIN
        || theta[1] > 1.0 - BOUNDARY_MARGIN
        || theta[2] < BOUNDARY_MARGIN
}

const JITTERS: [[f64; 3]; 4] = [[0.7, -0.7, 0.3], [-0.7, 0.7, -0.3], [0.7, 0.7, -0.3], [-0.7, -0.7, 0.3]];

/// Maximizes the likelihood at `u0`; on a boundary optimum, also from four
/// jittered starts, keeping the best converged run.
pub(crate) fn maximize_from(table: &PairTable, start: [f64; 3]) -> Result<(optim::Minimum, [f64; 3])> {
    let u0 = to_unconstrained(clamp_into_box(start));
    let run = |u: Vector3<f64>| minimize(|v| -table.penalized_u(v), u, Options::default());
    let mut best = run(u0);
    if near_boundary(to_constrained(&best.x)) {
        for jitter in JITTERS {
            let attempt = run(u0 + Vector3::from(jitter));
            let better = attempt.value < best.value;
            if (attempt.converged && (!best.converged || better)) || (!best.converged && better) {
                best = attempt;
            }
        }
    }
    let theta = to_constrained(&best.x);
    log::debug!("likelihood maximized after {} evaluations, |grad| = {:.2e}", best.evals, best.grad_norm);
    if !best.converged {
        return Err(Error::Convergence { evaluations: best.evals, best_value: -best.value, best_point: theta });
    }
    Ok((best, theta))
}

/// CML estimate at a known threshold, started from `init` or the CLS fit.
pub fn cml_fit(series: &CountSeries, r: u64, order: RegimeOrder, init: Option<&MeanFit>) -> Result<MeanFit> {
    let start = match init {
        Some(f) => f.theta(),
        None => cls_fit(series, r, order)?.theta(),
    };
    let table = PairTable::new(series, r, order);
    if table.n_transitions() == 0 {
        return Err(Error::Input("series needs at least two observations".into()));
    }
    let (best, theta) = maximize_from(&table, start)?;
    let (n1, n2) = table
        .index
        .iter()
        .fold((0, 0), |(a, b), &k| if table.pairs[k].2 { (a + 1, b) } else { (a, b + 1) });
    let mut fit = MeanFit {
        phi1: theta[0],
        phi2: theta[1],
        lambda: theta[2],
        covariance: None,
        std_errors: None,
        n_binomial: n1,
        n_negbin: n2,
        n_transitions: table.n_transitions(),
        method: EstimationMethod::Cml,
        valid: theta_is_valid(theta),
        loglik: Some(-best.value),
    };
    match covariance_from_table(&table, theta) {
        Ok(c) => fit.set_covariance(&c.sandwich),
        Err(e) => log::warn!("CML covariance unavailable: {e}"),
    }
    Ok(fit)
}

/// Asymptotic covariance of `sqrt(m) (theta_hat - theta)` in two forms.
#[derive(Debug, Clone, PartialEq)]
pub struct CmlCovariance {
    /// `J^-1 I J^-1`.
    pub sandwich: Matrix3<f64>,
    /// `(-J)^-1`, the inverse observed information per transition.
    pub observed: Matrix3<f64>,
    /// Whether the averaged Hessian was negative definite. When it was not,
    /// both forms use a pseudo-inverse.
    pub hessian_negative_definite: bool,
}

impl CmlCovariance {
    /// Standard errors from either form for a fit with `m` transitions.
    pub fn std_errors(&self, m: usize, observed: bool) -> [f64; 3] {
        let c = if observed { &self.observed } else { &self.sandwich };
        [0, 1, 2].map(|k| (c[(k, k)].max(0.0) / m as f64).sqrt())
    }
}

pub fn cml_covariance(series: &CountSeries, r: u64, order: RegimeOrder, fit: &MeanFit) -> Result<CmlCovariance> {
    let table = PairTable::new(series, r, order);
    if table.n_transitions() == 0 {
        return Err(Error::Input("series needs at least two observations".into()));
    }
    covariance_from_table(&table, fit.theta())
}

fn symmetrize(m: Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

fn covariance_from_table(table: &PairTable, theta: [f64; 3]) -> Result<CmlCovariance> {
    if !theta_is_valid(theta) {
        return Err(Error::Domain("covariance needs an interior estimate".into()));
    }
    let m = table.n_transitions() as f64;
    let u = to_unconstrained(theta);
    let h: [f64; 3] = [0, 1, 2].map(|k| fd_step(u[k]));
    let shifted = |k: usize, s: f64| {
        let mut v = u;
        v[k] += s * h[k];
        v
    };

    // per-pair scores on the transformed scale
    let mut scores = vec![[0.0; 3]; table.pairs.len()];
    for k in 0..3 {
        let lp = table.ln_probs(to_constrained(&shifted(k, 1.0)));
        let lm = table.ln_probs(to_constrained(&shifted(k, -1.0)));
        for (p, s) in scores.iter_mut().enumerate() {
            s[k] = (lp[p] - lm[p]) / (2.0 * h[k]);
        }
    }
    let mut info = Matrix3::zeros();
    for (s, &c) in scores.iter().zip(&table.counts) {
        let v = Vector3::from(*s);
        info += v * v.transpose() * c;
    }
    info /= m;

    let f = |v: &Vector3<f64>| table.penalized_u(v);
    let f0 = f(&u);
    let mut hess = Matrix3::zeros();
    for i in 0..3 {
        hess[(i, i)] = (f(&shifted(i, 1.0)) - 2.0 * f0 + f(&shifted(i, -1.0))) / (h[i] * h[i]);
        for j in 0..i {
            let at = |si: f64, sj: f64| {
                let mut v = u;
                v[i] += si * h[i];
                v[j] += sj * h[j];
                f(&v)
            };
            let val = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = val;
            hess[(j, i)] = val;
        }
    }
    let j_avg = hess / m;
    if !j_avg.iter().all(|v| v.is_finite()) || !info.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularInformation { condition: f64::INFINITY });
    }

    let eig = SymmetricEigen::new(j_avg);
    let negative_definite = eig.eigenvalues.iter().all(|&e| e < 0.0);
    let j_inv = if negative_definite {
        j_avg.try_inverse().ok_or(Error::SingularInformation { condition: f64::INFINITY })?
    } else {
        log::debug!("log-likelihood Hessian is not negative definite at {theta:?}; using a pseudo-inverse");
        j_avg.pseudo_inverse(1e-12).map_err(|e| Error::SingularDesign(e.to_string()))?
    };

    let d = jacobian_diag(theta);
    let sandwich = symmetrize(d * (j_inv * info * j_inv) * d);
    let observed = symmetrize(d * (-j_inv) * d);
    Ok(CmlCovariance { sandwich, observed, hessian_negative_definite: negative_definite })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate, transition_probability, ModelSpec, RngStream};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn a1() -> ModelSpec {
        ModelSpec::new(0.4, 0.2, 3.0, 4, RegimeOrder::BinomialBelow).unwrap()
    }

    fn sample(seed: u64, n: usize) -> CountSeries {
        let spec = a1();
        simulate(&spec, n, spec.default_x0(), 500, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn two_point_geometric_case() {
        let s = CountSeries::new(vec![0, 0]);
        for phi in [0.1, 0.5, 0.9] {
            let e = conditional_log_likelihood(&s, 0.3, phi, 3.0, 4, RegimeOrder::NegBinomialBelow).unwrap();
            assert!((e.loglik - -(4f64.ln())).abs() < 1e-12);
            assert!((e.loglik - -1.3862944).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_out_of_domain() {
        let s = sample(1, 20);
        for (a, b, l) in [(0.0, 0.2, 1.0), (0.4, 1.0, 1.0), (0.4, 0.2, 0.0), (0.4, 0.2, -1.0)] {
            let err = conditional_log_likelihood(&s, a, b, l, 4, RegimeOrder::BinomialBelow).unwrap_err();
            assert!(matches!(err, Error::Domain(_)));
        }
    }

    #[test]
    fn per_observation_matches_transition_probability() {
        let s = sample(2, 200);
        let spec = ModelSpec::new(0.35, 0.25, 2.5, 4, RegimeOrder::BinomialBelow).unwrap();
        let e = conditional_log_likelihood(&s, 0.35, 0.25, 2.5, 4, RegimeOrder::BinomialBelow).unwrap();
        assert_eq!(e.per_observation.len(), 199);
        for (t, (i, j)) in s.transitions().enumerate() {
            assert!((e.per_observation[t].exp() - transition_probability(&spec, i, j)).abs() < 1e-12);
            assert!(e.per_observation[t] <= 0.0);
        }
        let total: f64 = e.per_observation.iter().sum();
        assert!((total - e.loglik).abs() < 1e-9);
    }

    fn choose(n: u64, k: u64) -> f64 {
        (0..k).fold(1.0, |c, i| c * (n - i) as f64 / (i + 1) as f64)
    }

    fn fact(n: u64) -> f64 {
        (1..=n).fold(1.0, |c, i| c * i as f64)
    }

    fn direct_p(theta: [f64; 3], r: u64, i: u64, j: u64) -> f64 {
        let (a, b, l) = (theta[0], theta[1], theta[2]);
        if i <= r {
            (0..=i.min(j))
                .map(|m| {
                    choose(i, m) * a.powi(m as i32) * (1.0 - a).powi((i - m) as i32) * (-l).exp() * l.powi((j - m) as i32)
                        / fact(j - m)
                })
                .sum()
        } else {
            (0..=j)
                .map(|m| {
                    choose(i + m - 1, m) * b.powi(m as i32) / (1.0 + b).powi((i + m) as i32) * l.powi((j - m) as i32)
                        / (1.0 + l).powi((j - m + 1) as i32)
                })
                .sum()
        }
    }

    #[test]
    fn matches_direct_arithmetic() {
        let s = sample(3, 100);
        let theta = [0.4, 0.2, 3.0];
        let direct: f64 = s.transitions().map(|(i, j)| direct_p(theta, 4, i, j).ln()).sum();
        let e = conditional_log_likelihood(&s, 0.4, 0.2, 3.0, 4, RegimeOrder::BinomialBelow).unwrap();
        assert!((e.loglik - direct).abs() < 1e-9, "{} vs {direct}", e.loglik);
    }

    #[test]
    fn known_initial_prepends_one_transition() {
        let s = sample(4, 80);
        let ext = s.with_known_initial(5);
        let a = conditional_log_likelihood(&s, 0.4, 0.2, 3.0, 4, RegimeOrder::BinomialBelow).unwrap();
        let b = conditional_log_likelihood(&ext, 0.4, 0.2, 3.0, 4, RegimeOrder::BinomialBelow).unwrap();
        let first = crate::model::ln_transition_probability(&a1(), 5, s.values()[0]);
        assert!((b.loglik - a.loglik - first).abs() < 1e-9);
    }

    #[test]
    fn random_restart_dominance() {
        let s = sample(5, 150);
        let order = RegimeOrder::BinomialBelow;
        let fit = cml_fit(&s, 4, order, None).unwrap();
        let best = fit.loglik.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let a = rng.random_range(0.001..0.999);
            let b = rng.random_range(0.001..0.999);
            let l = rng.random_range(0.01..20.0);
            let e = conditional_log_likelihood(&s, a, b, l, 4, order).unwrap();
            assert!(e.loglik <= best + 1e-9, "({a},{b},{l}) gives {} > {best}", e.loglik);
        }
    }

    #[test]
    fn cml_dominates_cls_and_is_stationary() {
        for seed in 10..15 {
            let s = sample(seed, 400);
            let order = RegimeOrder::BinomialBelow;
            let cls = cls_fit(&s, 4, order).unwrap();
            let fit = cml_fit(&s, 4, order, Some(&cls)).unwrap();
            assert_eq!(fit.method, EstimationMethod::Cml);
            if cls.valid {
                let at_cls = conditional_log_likelihood(&s, cls.phi1, cls.phi2, cls.lambda, 4, order).unwrap();
                assert!(fit.loglik.unwrap() >= at_cls.loglik - 1e-9);
            }
            let table = PairTable::new(&s, 4, order);
            let u = to_unconstrained(fit.theta());
            for k in 0..3 {
                let h = fd_step(u[k]);
                let mut up = u;
                let mut um = u;
                up[k] += h;
                um[k] -= h;
                let g = (table.penalized_u(&up) - table.penalized_u(&um)) / (2.0 * h);
                assert!(g.abs() < 1e-5, "seed {seed} coord {k} gradient {g}");
            }
            let e = conditional_log_likelihood(&s, fit.phi1, fit.phi2, fit.lambda, 4, order).unwrap();
            assert!((e.loglik - fit.loglik.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn covariance_forms() {
        let s = sample(20, 600);
        let order = RegimeOrder::BinomialBelow;
        let fit = cml_fit(&s, 4, order, None).unwrap();
        let c = cml_covariance(&s, 4, order, &fit).unwrap();
        assert!(c.hessian_negative_definite);
        for m in [c.sandwich, c.observed] {
            assert!((m - m.transpose()).amax() < 1e-10);
            assert!((0..3).all(|k| m[(k, k)] > 0.0));
        }
        let se = fit.std_errors.unwrap();
        assert!((se[0] - (c.sandwich[(0, 0)] / 599.0).sqrt()).abs() < 1e-12);
        // correctly specified model: the two forms agree roughly
        for k in 0..3 {
            let ratio = c.sandwich[(k, k)] / c.observed[(k, k)];
            assert!((0.5..2.0).contains(&ratio), "coord {k} ratio {ratio}");
        }
    }
}
