use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Geometric, Poisson};

use super::{check_unit_interval, CountSeries, ModelSpec, RegimeKind};
use crate::error::Result;

/// Seeded random stream. Same seed and same call sequence give the same
/// draws on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Geometric variate on `{0, 1, ...}` with mean `mean`.
fn draw_geometric(mean: f64, rng: &mut RngStream) -> u64 {
    // failures before the first success with p = 1 / (1 + mean)
    Geometric::new(1.0 / (1.0 + mean))
        .expect("positive mean gives a valid success probability")
        .sample(rng.inner())
}

/// Binomial thinning `phi o x`: number of survivors among `x` Bernoulli(phi) trials.
pub fn draw_binomial_thin(x: u64, phi: f64, rng: &mut RngStream) -> Result<u64> {
    check_unit_interval("phi", phi)?;
    if x == 0 {
        return Ok(0);
    }
    let d = Binomial::new(x, phi).expect("validated binomial parameters");
    Ok(d.sample(rng.inner()))
}

/// Negative-binomial thinning `phi * x`: sum of `x` geometric counts with mean `phi`.
pub fn draw_nb_thin(x: u64, phi: f64, rng: &mut RngStream) -> Result<u64> {
    check_unit_interval("phi", phi)?;
    Ok((0..x).map(|_| draw_geometric(phi, rng)).sum())
}

/// Innovation for one step: Poisson(lambda) in the binomial regime,
/// geometric with mean lambda otherwise.
pub fn draw_innovation(kind: RegimeKind, lambda: f64, rng: &mut RngStream) -> u64 {
    match kind {
        RegimeKind::BinomialPoisson => {
            let p = Poisson::new(lambda).expect("lambda > 0");
            let v: f64 = p.sample(rng.inner());
            v as u64
        }
        RegimeKind::NegBinomialGeometric => draw_geometric(lambda, rng),
    }
}

fn step(spec: &ModelSpec, x_prev: u64, rng: &mut RngStream) -> u64 {
    let kind = spec.regime_of(x_prev);
    let thinned = match kind {
        RegimeKind::BinomialPoisson => draw_binomial_thin(x_prev, spec.phi1, rng),
        RegimeKind::NegBinomialGeometric => draw_nb_thin(x_prev, spec.phi2, rng),
    }
    .expect("spec parameters are validated");
    thinned + draw_innovation(kind, spec.lambda, rng)
}

/// Runs `burn_in + n` steps of the recursion from `x0` and keeps the last `n`.
pub fn simulate(
    spec: &ModelSpec,
    n: usize,
    x0: u64,
    burn_in: usize,
    rng: &mut RngStream,
) -> Result<CountSeries> {
    spec.validate()?;
    let mut x = x0;
    for _ in 0..burn_in {
        x = step(spec, x, rng);
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        x = step(spec, x, rng);
        out.push(x);
    }
    Ok(CountSeries::new(out))
}

/// One transition from a fixed state, used by Monte-Carlo kernel checks.
pub fn one_step(spec: &ModelSpec, x_prev: u64, rng: &mut RngStream) -> u64 {
    step(spec, x_prev, rng)
}
