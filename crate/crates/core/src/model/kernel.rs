use std::sync::OnceLock;

use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

use super::{in_binomial_regime, ModelSpec};
use crate::error::{Error, Result};

const LN_FACT_TABLE: usize = 4096;

fn ln_fact_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| (0..LN_FACT_TABLE).map(|k| ln_gamma(k as f64 + 1.0)).collect())
}

/// `ln(k!)` via the log-gamma function (tabulated for small `k`).
#[inline]
pub fn ln_factorial(k: u64) -> f64 {
    if (k as usize) < LN_FACT_TABLE {
        ln_fact_table()[k as usize]
    } else {
        ln_gamma(k as f64 + 1.0)
    }
}

/// Streaming log-sum-exp accumulator.
struct LogSum {
    max: f64,
    sum: f64,
}

impl LogSum {
    fn new() -> Self {
        LogSum { max: f64::NEG_INFINITY, sum: 0.0 }
    }

    #[inline]
    fn add(&mut self, t: f64) {
        if t <= self.max {
            self.sum += (t - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - t).exp() + 1.0;
            self.max = t;
        }
    }

    fn value(&self) -> f64 {
        if self.sum == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

/// Logarithms of the parameters, precomputed once per parameter point.
#[derive(Debug, Clone, Copy)]
pub struct LogParams {
    pub lambda: f64,
    ln_phi1: f64,
    ln_1m_phi1: f64,
    ln_phi2: f64,
    ln_1p_phi2: f64,
    ln_lambda: f64,
    ln_1p_lambda: f64,
}

impl LogParams {
    pub fn new(phi1: f64, phi2: f64, lambda: f64) -> Self {
        LogParams {
            lambda,
            ln_phi1: phi1.ln(),
            ln_1m_phi1: (-phi1).ln_1p(),
            ln_phi2: phi2.ln(),
            ln_1p_phi2: phi2.ln_1p(),
            ln_lambda: lambda.ln(),
            ln_1p_lambda: lambda.ln_1p(),
        }
    }

    pub fn from_spec(spec: &ModelSpec) -> Self {
        LogParams::new(spec.phi1, spec.phi2, spec.lambda)
    }

    /// `ln p1(i, j)`: binomial thinning of `i` convolved with Poisson(lambda).
    pub fn ln_p1(&self, i: u64, j: u64) -> f64 {
        let ln_fact_i = ln_factorial(i);
        let mut acc = LogSum::new();
        for m in 0..=i.min(j) {
            let t = ln_fact_i - ln_factorial(m) - ln_factorial(i - m)
                + m as f64 * self.ln_phi1
                + (i - m) as f64 * self.ln_1m_phi1
                - self.lambda
                + (j - m) as f64 * self.ln_lambda
                - ln_factorial(j - m);
            acc.add(t);
        }
        acc.value()
    }

    /// `ln p2(i, j)`: negative-binomial thinning of `i` convolved with a
    /// geometric innovation of mean lambda. At `i = 0` this is the geometric pmf.
    pub fn ln_p2(&self, i: u64, j: u64) -> f64 {
        if i == 0 {
            return j as f64 * self.ln_lambda - (j + 1) as f64 * self.ln_1p_lambda;
        }
        let ln_fact_im1 = ln_factorial(i - 1);
        let mut acc = LogSum::new();
        for m in 0..=j {
            let t = ln_factorial(i + m - 1) - ln_fact_im1 - ln_factorial(m)
                + m as f64 * self.ln_phi2
                - (i + m) as f64 * self.ln_1p_phi2
                + (j - m) as f64 * self.ln_lambda
                - (j - m + 1) as f64 * self.ln_1p_lambda;
            acc.add(t);
        }
        acc.value()
    }

    /// Log transition probability with the regime chosen by `(r, order)`.
    #[inline]
    pub fn ln_transition(&self, binomial_regime: bool, i: u64, j: u64) -> f64 {
        if binomial_regime {
            self.ln_p1(i, j)
        } else {
            self.ln_p2(i, j)
        }
    }
}

/// `ln P(X_t = j | X_{t-1} = i)`.
pub fn ln_transition_probability(spec: &ModelSpec, i: u64, j: u64) -> f64 {
    LogParams::from_spec(spec).ln_transition(in_binomial_regime(i, spec.r, spec.order), i, j)
}

/// `P(X_t = j | X_{t-1} = i)`, clamped to `[0, 1]`.
pub fn transition_probability(spec: &ModelSpec, i: u64, j: u64) -> f64 {
    ln_transition_probability(spec, i, j).exp().clamp(0.0, 1.0)
}

/// Transition matrix on `{0, ..., max_state}` with each row renormalized.
#[derive(Debug, Clone)]
pub struct TruncatedKernel {
    pub max_state: usize,
    /// Row-stochastic matrix, `matrix[(i, j)] = P(j | i)` after renormalization.
    pub matrix: DMatrix<f64>,
    /// Probability mass beyond `max_state` for each row before renormalization.
    pub deficits: Vec<f64>,
}

impl TruncatedKernel {
    pub fn max_deficit(&self) -> f64 {
        self.deficits.iter().copied().fold(0.0, f64::max)
    }

    /// First row whose deficit exceeds `tol`, if any.
    pub fn check(&self, tol: f64) -> Result<()> {
        match self.deficits.iter().position(|&d| d > tol) {
            Some(row) => Err(Error::Truncation {
                max_state: self.max_state,
                row,
                deficit: self.deficits[row],
            }),
            None => Ok(()),
        }
    }
}

/// Builds the truncated, renormalized kernel without any adequacy check.
pub fn truncated_kernel(spec: &ModelSpec, max_state: usize) -> TruncatedKernel {
    let lp = LogParams::from_spec(spec);
    let size = max_state + 1;
    let mut matrix = DMatrix::<f64>::zeros(size, size);
    let mut deficits = Vec::with_capacity(size);
    for i in 0..size {
        let binom = in_binomial_regime(i as u64, spec.r, spec.order);
        let mut mass = 0.0;
        for j in 0..size {
            let p = lp.ln_transition(binom, i as u64, j as u64).exp();
            matrix[(i, j)] = p;
            mass += p;
        }
        deficits.push((1.0 - mass).max(0.0));
        if mass > 0.0 {
            for j in 0..size {
                matrix[(i, j)] /= mass;
            }
        }
    }
    TruncatedKernel { max_state, matrix, deficits }
}

const MAX_SEARCH_STATE: u64 = 100_000;

/// Smallest column `c` with `sum_{j <= c} P(j | i) >= 1 - tol`.
fn row_support(spec: &ModelSpec, lp: &LogParams, i: u64, tol: f64) -> Result<u64> {
    let binom = in_binomial_regime(i, spec.r, spec.order);
    let mut mass = 0.0;
    for j in 0..=MAX_SEARCH_STATE {
        mass += lp.ln_transition(binom, i, j).exp();
        if mass >= 1.0 - tol {
            return Ok(j);
        }
    }
    Err(Error::Truncation { max_state: MAX_SEARCH_STATE as usize, row: i as usize, deficit: 1.0 - mass })
}

/// Smallest truncation point `M` at which every row `0..=M` loses at most
/// `tol`, as required by [`TruncatedKernel::check`]. `at_least = Some(k)`
/// additionally forces `M >= k`, so that observed states up to `k` are kept.
pub fn adequate_max_state(spec: &ModelSpec, tol: f64, at_least: Option<u64>) -> Result<usize> {
    let lp = LogParams::from_spec(spec);
    let mut m = at_least.unwrap_or(0);
    let mut i = 0u64;
    while i <= m {
        m = m.max(row_support(spec, &lp, i, tol)?);
        i += 1;
    }
    Ok(m as usize)
}
