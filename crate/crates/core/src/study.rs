//! Monte-Carlo harness: simulate from a grid of models and sample sizes,
//! run estimators, threshold searches and Wald tests on every replication,
//! and aggregate bias / MSE / CP(r) / rejection rates.
//!
//! Replication `k` of cell `(model i, size j)` draws from its own stream
//! seeded by [`replication_seed`]`(master, i, j, k)`, so every cell can be
//! regenerated in isolation and results do not depend on scheduling.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cls::cls_fit;
use crate::cml::cml_fit;
use crate::error::{Error, Result};
use crate::hypothesis::{variance_cls_fit, wald_mean_test, wald_variance_displayed, wald_variance_test};
use crate::model::{simulate, CountSeries, ModelSpec, RegimeOrder, RngStream, DEFAULT_BURN_IN};
use crate::threshold::{candidate_range, dness_search, search_r_cls_var, search_r_cml};

/// Cells with a larger share of failed replications are flagged.
pub const FAILURE_FLAG_RATE: f64 = 0.01;

/// Below this many replications the output carries a warning.
pub const LOW_REPLICATIONS: usize = 30;

/// Replication count of the full-precision reference study.
pub const FULL_SCALE_REPLICATIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Cls,
    Cml,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSearch {
    Cml,
    ClsVar,
    DNess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaldTest {
    WaldE,
    WaldVar,
    /// Two-term variance statistic that ignores the contrast covariance.
    WaldVarDisplayed,
}

/// One data-generating process of a study.
///
/// One-regime INAR(1) processes are encoded with `r = u64::MAX`: binomial
/// thinning everywhere for order 0, negative-binomial thinning everywhere
/// for order 1. For these `null_model` is set, only tests run, and the test
/// threshold is the midpoint of the candidate range of each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyModel {
    pub name: String,
    pub spec: ModelSpec,
    #[serde(default)]
    pub null_model: bool,
}

fn threshold_model(name: &str, phi1: f64, phi2: f64, lambda: f64, r: u64, flag: u8) -> StudyModel {
    let order = RegimeOrder::from_flag(flag).expect("preset flags are 0 or 1");
    StudyModel {
        name: name.into(),
        spec: ModelSpec::new(phi1, phi2, lambda, r, order).expect("preset parameters are valid"),
        null_model: false,
    }
}

fn inar_poisson(name: &str, alpha: f64, lambda: f64) -> StudyModel {
    StudyModel {
        name: name.into(),
        spec: ModelSpec::new(alpha, alpha, lambda, u64::MAX, RegimeOrder::BinomialBelow).expect("valid"),
        null_model: true,
    }
}

fn inar_geometric(name: &str, alpha: f64, lambda: f64) -> StudyModel {
    StudyModel {
        name: name.into(),
        spec: ModelSpec::new(alpha, alpha, lambda, u64::MAX, RegimeOrder::NegBinomialBelow).expect("valid"),
        null_model: true,
    }
}

impl StudyModel {
    /// Every named design model.
    pub fn presets() -> Vec<StudyModel> {
        vec![
            threshold_model("A1", 0.4, 0.2, 3.0, 4, 0),
            threshold_model("A2", 0.4, 0.4, 3.0, 4, 0),
            threshold_model("A3", 0.3, 0.6, 5.0, 7, 0),
            threshold_model("A4", 0.6, 0.6, 5.0, 12, 0),
            threshold_model("B1", 0.4, 0.2, 3.0, 4, 1),
            threshold_model("B2", 0.4, 0.4, 3.0, 4, 1),
            threshold_model("B3", 0.3, 0.6, 5.0, 7, 1),
            threshold_model("B4", 0.6, 0.6, 5.0, 12, 1),
            inar_poisson("I-P1", 0.2, 6.0),
            inar_poisson("I-P2", 0.4, 5.0),
            inar_poisson("I-P3", 0.5, 5.0),
            inar_geometric("I-G1", 0.4, 5.0),
            inar_geometric("I-G2", 0.5, 4.0),
            inar_geometric("I-G3", 0.6, 5.0),
            threshold_model("B-M1", 0.4, 0.2, 6.0, 6, 0),
            threshold_model("B-M2", 0.4, 0.4, 6.0, 6, 0),
            threshold_model("B-M3", 0.3, 0.6, 5.0, 7, 0),
            threshold_model("B-M4", 0.4, 0.2, 6.0, 6, 1),
            threshold_model("B-M5", 0.4, 0.4, 6.0, 6, 1),
            threshold_model("B-M6", 0.3, 0.6, 5.0, 7, 1),
        ]
    }

    pub fn preset(name: &str) -> Option<StudyModel> {
        Self::presets().into_iter().find(|m| m.name.eq_ignore_ascii_case(name))
    }
}

fn default_quantiles() -> (f64, f64) {
    (0.1, 0.9)
}

fn default_dness_grid() -> (f64, f64, usize) {
    (2.0, 6.0, 4)
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub models: Vec<StudyModel>,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    /// Estimators run at the known threshold.
    #[serde(default)]
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub threshold_methods: Vec<ThresholdSearch>,
    #[serde(default)]
    pub tests: Vec<WaldTest>,
    pub seed: u64,
    #[serde(default = "default_quantiles")]
    pub quantiles: (f64, f64),
    /// `(lambda_lo, lambda_hi, L)` for the nested search.
    #[serde(default = "default_dness_grid")]
    pub dness_grid: (f64, f64, usize),
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Input("replication count must be at least 1".into()));
        }
        if self.models.is_empty() || self.sample_sizes.is_empty() {
            return Err(Error::Input("study needs at least one model and one sample size".into()));
        }
        if let Some(&n) = self.sample_sizes.iter().find(|&&n| n < 10) {
            return Err(Error::Input(format!("sample size {n} is below the minimum of 10")));
        }
        for m in &self.models {
            m.spec.validate()?;
        }
        if self.estimators.is_empty() && self.threshold_methods.is_empty() && self.tests.is_empty() {
            return Err(Error::Input("study requests no estimators, threshold methods or tests".into()));
        }
        Ok(())
    }

    /// Named designs mirroring the simulation tables, at `replications` each.
    ///
    /// `known-r`: A1-B4 with CLS and CML at n = 200, 500, 800.
    /// `unknown-r`: A1-B4 with the three threshold searches at n = 200, 500, 800, 1500.
    /// `size`: I-P1..3, I-G1..3, B-M2, B-M5 with both tests at n = 200, 500, 800, 1000.
    /// `power`: B-M1..6 with both tests at n = 200, 500, 1000, 2000.
    pub fn design(name: &str, replications: usize, seed: u64) -> Result<StudyConfig> {
        let pick = |names: &[&str]| names.iter().map(|n| StudyModel::preset(n).expect("known preset")).collect();
        let ab = ["A1", "A2", "A3", "A4", "B1", "B2", "B3", "B4"];
        let base = StudyConfig {
            models: vec![],
            sample_sizes: vec![],
            replications,
            estimators: vec![],
            threshold_methods: vec![],
            tests: vec![],
            seed,
            quantiles: default_quantiles(),
            dness_grid: default_dness_grid(),
            burn_in: DEFAULT_BURN_IN,
        };
        let cfg = match name {
            "known-r" => StudyConfig {
                models: pick(&ab),
                sample_sizes: vec![200, 500, 800],
                estimators: vec![Estimator::Cls, Estimator::Cml],
                ..base
            },
            "unknown-r" => StudyConfig {
                models: pick(&ab),
                sample_sizes: vec![200, 500, 800, 1500],
                threshold_methods: vec![ThresholdSearch::DNess, ThresholdSearch::ClsVar, ThresholdSearch::Cml],
                ..base
            },
            "size" => StudyConfig {
                models: pick(&["I-P1", "I-P2", "I-P3", "I-G1", "I-G2", "I-G3", "B-M2", "B-M5"]),
                sample_sizes: vec![200, 500, 800, 1000],
                tests: vec![WaldTest::WaldE, WaldTest::WaldVar],
                ..base
            },
            "power" => StudyConfig {
                models: pick(&["B-M1", "B-M2", "B-M3", "B-M4", "B-M5", "B-M6"]),
                sample_sizes: vec![200, 500, 1000, 2000],
                tests: vec![WaldTest::WaldE, WaldTest::WaldVar],
                ..base
            },
            other => {
                return Err(Error::Input(format!(
                    "unknown design {other:?}; expected known-r, unknown-r, size or power"
                )))
            }
        };
        Ok(cfg)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `rep` in cell `(model, size)` under `master`.
pub fn replication_seed(master: u64, model: usize, size: usize, rep: usize) -> u64 {
    let mut h = splitmix64(master);
    for part in [model as u64, size as u64, rep as u64] {
        h = splitmix64(h ^ part);
    }
    h
}

/// Outcome of one method on one replication.
#[derive(Debug, Clone)]
struct MethodOutcome {
    method: &'static str,
    values: std::result::Result<Vec<(&'static str, f64)>, String>,
    seconds: f64,
}

fn timed<F>(method: &'static str, f: F) -> MethodOutcome
where
    F: FnOnce() -> Result<Vec<(&'static str, f64)>>,
{
    let start = Instant::now();
    let values = f().map_err(|e| e.to_string());
    MethodOutcome { method, values, seconds: start.elapsed().as_secs_f64() }
}

fn theta_values(t: [f64; 3]) -> Vec<(&'static str, f64)> {
    vec![("phi1", t[0]), ("phi2", t[1]), ("lambda", t[2])]
}

fn test_threshold(model: &StudyModel, series: &CountSeries, q: (f64, f64)) -> Result<u64> {
    if model.null_model {
        let (lo, hi) = candidate_range(series, q.0, q.1)?;
        Ok(lo + (hi - lo) / 2)
    } else {
        Ok(model.spec.r)
    }
}

fn replicate(config: &StudyConfig, model: &StudyModel, n: usize, seed: u64) -> Vec<MethodOutcome> {
    let spec = &model.spec;
    let series = match simulate(spec, n, spec.default_x0(), config.burn_in, &mut RngStream::new(seed)) {
        Ok(s) => s,
        Err(e) => {
            return vec![MethodOutcome { method: "simulate", values: Err(e.to_string()), seconds: 0.0 }];
        }
    };
    let (r, order) = (spec.r, spec.order);
    let mut out = Vec::new();
    if !model.null_model {
        for est in &config.estimators {
            out.push(match est {
                Estimator::Cls => timed("cls", || Ok(theta_values(cls_fit(&series, r, order)?.theta()))),
                Estimator::Cml => timed("cml", || Ok(theta_values(cml_fit(&series, r, order, None)?.theta()))),
            });
        }
        for method in &config.threshold_methods {
            let q = config.quantiles;
            let run = |name, f: &dyn Fn((u64, u64)) -> Result<crate::threshold::ThresholdSearchResult>| {
                timed(name, || {
                    let res = f(candidate_range(&series, q.0, q.1)?)?;
                    let mut v = vec![("r", res.r_hat as f64)];
                    v.extend(theta_values(res.fit_at_r_hat.theta()));
                    Ok(v)
                })
            };
            out.push(match method {
                ThresholdSearch::Cml => run("r_cml", &|range| search_r_cml(&series, order, range)),
                ThresholdSearch::ClsVar => run("r_clsvar", &|range| search_r_cls_var(&series, order, range)),
                ThresholdSearch::DNess => {
                    let (lo, hi, steps) = config.dness_grid;
                    run("r_dness", &|range| dness_search(&series, order, lo, hi, steps, range))
                }
            });
        }
    }
    for test in &config.tests {
        let q = config.quantiles;
        out.push(match test {
            WaldTest::WaldE => timed("wald_e", || {
                let t = wald_mean_test(&series, test_threshold(model, &series, q)?, order)?;
                Ok(vec![("reject", t.reject_at_05 as u8 as f64)])
            }),
            WaldTest::WaldVar => timed("wald_var", || {
                let t = wald_variance_test(&series, test_threshold(model, &series, q)?, order)?;
                Ok(vec![("reject", t.reject_at_05 as u8 as f64)])
            }),
            WaldTest::WaldVarDisplayed => timed("wald_var_displayed", || {
                let r = test_threshold(model, &series, q)?;
                let fit = cls_fit(&series, r, order)?;
                let t = wald_variance_displayed(&variance_cls_fit(&series, r, order, &fit)?)?;
                Ok(vec![("reject", t.reject_at_05 as u8 as f64)])
            }),
        });
    }
    out
}

/// One aggregated table cell. Empty fields do not apply to the row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub n: usize,
    pub method: String,
    pub parameter: String,
    pub replications: usize,
    pub failures: usize,
    /// More than [`FAILURE_FLAG_RATE`] of replications failed.
    pub flagged: bool,
    pub truth: Option<f64>,
    pub mean: Option<f64>,
    pub bias: Option<f64>,
    pub mse: Option<f64>,
    pub cp_r: Option<f64>,
    pub rejection_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub model: String,
    pub n: usize,
    pub method: String,
    pub mean_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub model: String,
    pub model_index: usize,
    pub n: usize,
    pub n_index: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub seed_derivation: String,
    pub config: StudyConfig,
    pub cells: Vec<CellManifest>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOutput {
    pub rows: Vec<ResultRow>,
    pub timings: Vec<TimingRow>,
    pub manifest: Manifest,
}

fn truth_of(spec: &ModelSpec, parameter: &str) -> Option<f64> {
    match parameter {
        "phi1" => Some(spec.phi1),
        "phi2" => Some(spec.phi2),
        "lambda" => Some(spec.lambda),
        "r" => Some(spec.r as f64),
        _ => None,
    }
}

fn aggregate(model: &StudyModel, n: usize, reps: &[Vec<MethodOutcome>]) -> (Vec<ResultRow>, Vec<TimingRow>) {
    let total = reps.len();
    let mut methods: Vec<&'static str> = Vec::new();
    for rep in reps {
        for o in rep {
            if !methods.contains(&o.method) {
                methods.push(o.method);
            }
        }
    }
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for method in methods {
        let outcomes: Vec<&MethodOutcome> = reps.iter().filter_map(|r| r.iter().find(|o| o.method == method)).collect();
        let ok: Vec<&Vec<(&'static str, f64)>> = outcomes.iter().filter_map(|o| o.values.as_ref().ok()).collect();
        let failures = total - ok.len();
        for o in outcomes.iter().filter(|o| o.values.is_err()) {
            log::debug!("{} n={n} {method}: {}", model.name, o.values.as_ref().unwrap_err());
        }
        let flagged = failures as f64 > FAILURE_FLAG_RATE * total as f64;
        let params: Vec<&'static str> = ok.first().map(|v| v.iter().map(|p| p.0).collect()).unwrap_or_default();
        let secs: f64 = outcomes.iter().map(|o| o.seconds).sum();
        timings.push(TimingRow {
            model: model.name.clone(),
            n,
            method: method.into(),
            mean_seconds: if outcomes.is_empty() { 0.0 } else { secs / outcomes.len() as f64 },
            total_seconds: secs,
        });
        let row = |parameter: &str| ResultRow {
            model: model.name.clone(),
            n,
            method: method.into(),
            parameter: parameter.into(),
            replications: total,
            failures,
            flagged,
            truth: None,
            mean: None,
            bias: None,
            mse: None,
            cp_r: None,
            rejection_rate: None,
        };
        if params.is_empty() {
            rows.push(row(""));
            continue;
        }
        for (k, p) in params.iter().enumerate() {
            let vals: Vec<f64> = ok.iter().map(|v| v[k].1).collect();
            let m = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / m;
            let mut out = row(p);
            if *p == "reject" {
                out.rejection_rate = Some(mean);
            } else {
                out.mean = Some(mean);
                if let Some(t) = truth_of(&model.spec, p) {
                    out.truth = Some(t);
                    out.bias = Some(vals.iter().map(|v| v - t).sum::<f64>() / m);
                    out.mse = Some(vals.iter().map(|v| (v - t).powi(2)).sum::<f64>() / m);
                    if *p == "r" {
                        out.cp_r = Some(vals.iter().filter(|&&v| v == t).count() as f64 / m);
                    }
                }
            }
            rows.push(out);
        }
    }
    (rows, timings)
}

fn run_cells(config: &StudyConfig, cells: &[(usize, usize)]) -> (Vec<ResultRow>, Vec<TimingRow>, Vec<CellManifest>) {
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut manifests = Vec::new();
    for &(i, j) in cells {
        let model = &config.models[i];
        let n = config.sample_sizes[j];
        let seeds: Vec<u64> = (0..config.replications).map(|k| replication_seed(config.seed, i, j, k)).collect();
        let reps: Vec<Vec<MethodOutcome>> = seeds.par_iter().map(|&s| replicate(config, model, n, s)).collect();
        let (r, t) = aggregate(model, n, &reps);
        rows.extend(r);
        timings.extend(t);
        manifests.push(CellManifest { model: model.name.clone(), model_index: i, n, n_index: j, seeds });
    }
    (rows, timings, manifests)
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Input(format!("cannot start {w} workers: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Runs every `(model, n)` cell of the study.
pub fn run_study(config: &StudyConfig, workers: Option<usize>) -> Result<StudyOutput> {
    config.validate()?;
    let mut warnings = Vec::new();
    if config.replications < LOW_REPLICATIONS {
        let w = format!("only {} replications per cell; bias/MSE/rates are noisy", config.replications);
        log::warn!("{w}");
        warnings.push(w);
    }
    for m in config.models.iter().filter(|m| m.null_model) {
        if !config.estimators.is_empty() || !config.threshold_methods.is_empty() {
            warnings.push(format!("{}: one-regime model, only tests are run", m.name));
        }
    }
    let cells: Vec<(usize, usize)> =
        (0..config.models.len()).flat_map(|i| (0..config.sample_sizes.len()).map(move |j| (i, j))).collect();
    let (rows, timings, manifests) = with_workers(workers, || run_cells(config, &cells))?;
    for row in rows.iter().filter(|r| r.flagged) {
        warnings.push(format!(
            "{} n={} {}: {} of {} replications failed",
            row.model, row.n, row.method, row.failures, row.replications
        ));
    }
    warnings.dedup();
    Ok(StudyOutput {
        rows,
        timings,
        manifest: Manifest {
            master_seed: config.seed,
            seed_derivation: "splitmix64 chain over (master, model index, size index, replication index)".into(),
            config: config.clone(),
            cells: manifests,
            warnings,
        },
    })
}

/// Recomputes one cell from the seeds alone.
pub fn run_cell(config: &StudyConfig, model_index: usize, n_index: usize) -> Result<Vec<ResultRow>> {
    config.validate()?;
    if model_index >= config.models.len() || n_index >= config.sample_sizes.len() {
        return Err(Error::Input(format!("no cell ({model_index}, {n_index}) in this study")));
    }
    Ok(run_cells(config, &[(model_index, n_index)]).0)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.csv`, `timings.csv` and `manifest.json` into `dir`.
/// Only `timings.csv` depends on wall-clock time.
pub fn write_outputs(out: &StudyOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("results.csv"), &out.rows)?;
    write_csv(&dir.join("timings.csv"), &out.timings)?;
    let json = serde_json::to_string_pretty(&out.manifest).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

/// Reads rows back from a `results.csv`.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Io(e.to_string()))).collect()
}
