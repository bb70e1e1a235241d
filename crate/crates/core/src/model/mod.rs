//! The BiNB-MTTINAR(1) process: parameterization, random generation,
//! exact transition kernel and theoretical moments.
//!
//! Below (or above, depending on the regime order) the threshold `r` the
//! process evolves as binomial thinning plus a Poisson innovation; on the
//! other side it evolves as negative-binomial thinning plus a geometric
//! innovation. Both geometric laws live on `{0, 1, 2, ...}` with
//! `P(W = k) = p^k / (1 + p)^(k + 1)`, mean `p`.

mod kernel;
mod moments;
mod sampling;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kernel::{
    adequate_max_state, ln_factorial, ln_transition_probability, transition_probability,
    truncated_kernel, LogParams, TruncatedKernel,
};
pub use moments::{
    conditional_moments, stationary_distribution, theoretical_moments, ConditionalMoments,
    TheoreticalMoments, ACF_LAGS, STATIONARY_TOL,
};
pub use sampling::{draw_binomial_thin, draw_innovation, draw_nb_thin, one_step, simulate, RngStream};

/// Which operator/innovation pair sits below the threshold.
///
/// Flag `R = 0` puts binomial thinning with Poisson innovations on
/// `x_prev <= r`; `R = 1` swaps the branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum RegimeOrder {
    BinomialBelow,
    NegBinomialBelow,
}

impl RegimeOrder {
    pub fn flag(self) -> u8 {
        match self {
            RegimeOrder::BinomialBelow => 0,
            RegimeOrder::NegBinomialBelow => 1,
        }
    }

    pub fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            0 => Ok(RegimeOrder::BinomialBelow),
            1 => Ok(RegimeOrder::NegBinomialBelow),
            other => Err(Error::Domain(format!("regime order flag must be 0 or 1, got {other}"))),
        }
    }
}

impl From<RegimeOrder> for u8 {
    fn from(o: RegimeOrder) -> u8 {
        o.flag()
    }
}

impl TryFrom<u8> for RegimeOrder {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        RegimeOrder::from_flag(v)
    }
}

/// Operator/innovation pair governing one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegimeKind {
    BinomialPoisson,
    NegBinomialGeometric,
}

/// True when the first indicator `I_1` (binomial thinning, Poisson
/// innovation) is active for a step leaving `x_prev`. Ties `x_prev == r`
/// count as "below".
#[inline]
pub fn in_binomial_regime(x_prev: u64, r: u64, order: RegimeOrder) -> bool {
    let below = x_prev <= r;
    match order {
        RegimeOrder::BinomialBelow => below,
        RegimeOrder::NegBinomialBelow => !below,
    }
}

/// Full parameterization of the process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub phi1: f64,
    pub phi2: f64,
    pub lambda: f64,
    pub r: u64,
    pub order: RegimeOrder,
}

pub(crate) fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must lie in (0, 1), got {v}")))
    }
}

impl ModelSpec {
    pub fn new(phi1: f64, phi2: f64, lambda: f64, r: u64, order: RegimeOrder) -> Result<Self> {
        let spec = ModelSpec { phi1, phi2, lambda, r, order };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_unit_interval("phi1", self.phi1)?;
        check_unit_interval("phi2", self.phi2)?;
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Domain(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn regime_of(&self, x_prev: u64) -> RegimeKind {
        if in_binomial_regime(x_prev, self.r, self.order) {
            RegimeKind::BinomialPoisson
        } else {
            RegimeKind::NegBinomialGeometric
        }
    }

    /// Thinning parameter of the regime active after `x_prev`.
    pub fn phi_for(&self, kind: RegimeKind) -> f64 {
        match kind {
            RegimeKind::BinomialPoisson => self.phi1,
            RegimeKind::NegBinomialGeometric => self.phi2,
        }
    }

    /// Default starting value `round(lambda / (1 - max(phi1, phi2)))`.
    pub fn default_x0(&self) -> u64 {
        (self.lambda / (1.0 - self.phi1.max(self.phi2))).round() as u64
    }

    /// Truncation used when no data is available:
    /// `ceil(8 * max(lambda, 1) / (1 - max(phi1, phi2)))`.
    pub fn default_max_state(&self) -> usize {
        (8.0 * self.lambda.max(1.0) / (1.0 - self.phi1.max(self.phi2))).ceil() as usize
    }
}

/// Default number of discarded warm-up steps in [`simulate`].
pub const DEFAULT_BURN_IN: usize = 500;

/// Ordered nonnegative integer observations.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CountSeries(Vec<u64>);

impl CountSeries {
    pub fn new(values: Vec<u64>) -> Self {
        CountSeries(values)
    }

    pub fn values(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> Option<u64> {
        self.0.iter().copied().max()
    }

    /// Consecutive pairs `(x_{t-1}, x_t)`, `n - 1` of them.
    pub fn transitions(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn n_transitions(&self) -> usize {
        self.0.len().saturating_sub(1)
    }

    /// Prepends a known starting value so that every observation becomes
    /// the target of a transition (the `t = 1..n` convention).
    pub fn with_known_initial(&self, x0: u64) -> CountSeries {
        let mut v = Vec::with_capacity(self.0.len() + 1);
        v.push(x0);
        v.extend_from_slice(&self.0);
        CountSeries(v)
    }

    pub fn into_inner(self) -> Vec<u64> {
        self.0
    }
}

impl From<Vec<u64>> for CountSeries {
    fn from(v: Vec<u64>) -> Self {
        CountSeries(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a1() -> ModelSpec {
        ModelSpec::new(0.4, 0.2, 3.0, 4, RegimeOrder::BinomialBelow).unwrap()
    }

    #[test]
    fn regime_assignment() {
        let spec = a1();
        assert_eq!(spec.regime_of(4), RegimeKind::BinomialPoisson);
        assert_eq!(spec.regime_of(5), RegimeKind::NegBinomialGeometric);
        let swapped = ModelSpec { order: RegimeOrder::NegBinomialBelow, ..spec };
        assert_eq!(swapped.regime_of(4), RegimeKind::NegBinomialGeometric);
        assert_eq!(swapped.regime_of(5), RegimeKind::BinomialPoisson);
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(0.0, 0.2, 3.0, 4, RegimeOrder::BinomialBelow).is_err());
        assert!(ModelSpec::new(0.4, 1.0, 3.0, 4, RegimeOrder::BinomialBelow).is_err());
        assert!(ModelSpec::new(0.4, 0.2, 0.0, 4, RegimeOrder::BinomialBelow).is_err());
        assert!(RegimeOrder::from_flag(2).is_err());
        assert_eq!(a1().default_x0(), 5);
        assert_eq!(a1().default_max_state(), 40);
    }

    #[test]
    fn series_transitions() {
        let s = CountSeries::new(vec![5, 3, 7]);
        assert_eq!(s.transitions().collect::<Vec<_>>(), vec![(5, 3), (3, 7)]);
        let k = s.with_known_initial(1);
        assert_eq!(k.n_transitions(), 3);
    }

    #[test]
    fn order_serde_is_a_flag() {
        let spec = a1();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"order\":0"));
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
