use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mttinar::cls::{cls_fit, MeanFit};
use mttinar::cml::{cml_covariance, cml_fit};
use mttinar::forecast::{
    diagnostics, h_step_distribution, normal_qq, point_forecasts, rolling_evaluation, sample_acf, sample_pacf,
    HorizonEvaluation, PointForecasts,
};
use mttinar::hypothesis::{variance_cls_fit, wald_mean_test, wald_variance_displayed, wald_variance_test, TestResult};
use mttinar::io::load_series;
use mttinar::model::{adequate_max_state, simulate, CountSeries, ModelSpec, RegimeOrder, RngStream, DEFAULT_BURN_IN};
use mttinar::study::{run_study, write_outputs, StudyConfig, StudyModel, FULL_SCALE_REPLICATIONS};
use mttinar::threshold::{candidate_range, dness_search, search_r_cls_var, search_r_cml, ThresholdSearchResult};
use mttinar::{Error, Result};

/// Per-row truncation tolerance for forecasting.
const FORECAST_ROW_TOL: f64 = 1e-10;

const ACF_LAGS: usize = 20;

#[derive(Parser)]
#[command(name = "mttinar", version, about = "Threshold INAR(1) with mixed binomial and negative-binomial thinning")]
struct Cli {
    /// Master seed for simulation and studies.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads for parallel work (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Directory for output files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a series from a model.
    Simulate(SimulateArgs),
    /// Fit a model to a series.
    Fit(FitArgs),
    /// Wald tests for regime structure.
    Test(TestArgs),
    /// Multi-step forecast distributions.
    Forecast(ForecastArgs),
    /// Monte-Carlo study.
    Study(StudyArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Named preset such as A1 or B-M2; explicit parameters override it.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    phi1: Option<f64>,
    #[arg(long)]
    phi2: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    r: Option<u64>,
    /// Regime-order flag: 0 puts binomial/Poisson below the threshold.
    #[arg(long = "R", value_name = "0|1")]
    order: Option<u8>,
}

impl ModelArgs {
    fn spec(&self) -> Result<ModelSpec> {
        let base = match &self.model {
            Some(name) => Some(
                StudyModel::preset(name)
                    .ok_or_else(|| Error::Input(format!("unknown model preset {name:?}")))?
                    .spec,
            ),
            None => None,
        };
        let need = |v: Option<f64>, b: Option<f64>, name: &str| {
            v.or(b).ok_or_else(|| Error::Input(format!("--{name} is required without --model")))
        };
        let phi1 = need(self.phi1, base.map(|s| s.phi1), "phi1")?;
        let phi2 = need(self.phi2, base.map(|s| s.phi2), "phi2")?;
        let lambda = need(self.lambda, base.map(|s| s.lambda), "lambda")?;
        let r = self.r.or(base.map(|s| s.r)).ok_or_else(|| Error::Input("--r is required without --model".into()))?;
        let order = match (self.order, base) {
            (Some(f), _) => RegimeOrder::from_flag(f)?,
            (None, Some(s)) => s.order,
            (None, None) => RegimeOrder::BinomialBelow,
        };
        ModelSpec::new(phi1, phi2, lambda, r, order)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    x0: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_BURN_IN)]
    burn_in: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Cls,
    Cml,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SearchArg {
    Cml,
    Clsvar,
    Dness,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ThresholdArg {
    Fixed(u64),
    Search,
}

impl FromStr for ThresholdArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("search") {
            Ok(ThresholdArg::Search)
        } else {
            s.parse().map(ThresholdArg::Fixed).map_err(|_| format!("expected an integer or \"search\", got {s:?}"))
        }
    }
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("cannot parse {p:?}")))
        .collect()
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    match parse_list::<f64>(s)?.as_slice() {
        &[a, b] => Ok((a, b)),
        _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
    }
}

fn parse_grid(s: &str) -> std::result::Result<(f64, f64, usize), String> {
    match parse_list::<f64>(s)?.as_slice() {
        &[a, b, l] if l >= 1.0 && l.fract() == 0.0 => Ok((a, b, l as usize)),
        _ => Err(format!("expected lambda_lo,lambda_hi,L with integer L >= 1, got {s:?}")),
    }
}

#[derive(Args, Clone)]
struct SeriesArgs {
    /// Count series file: one value per line, or comma/tab-delimited.
    series: PathBuf,
    /// Column name or zero-based index.
    #[arg(long)]
    column: Option<String>,
}

#[derive(Args, Clone)]
struct ThresholdArgs {
    /// Threshold value, or "search".
    #[arg(long, default_value = "search")]
    r: ThresholdArg,
    #[arg(long = "R", value_name = "0|1", default_value_t = 0)]
    order: u8,
    #[arg(long, value_enum, default_value_t = SearchArg::Cml)]
    search: SearchArg,
    /// Candidate range as sample quantiles.
    #[arg(long, value_parser = parse_pair, default_value = "0.1,0.9")]
    quantiles: (f64, f64),
    /// Nested-search lambda grid lo,hi,L.
    #[arg(long, value_parser = parse_grid, default_value = "2,6,4")]
    dness_grid: (f64, f64, usize),
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: SeriesArgs,
    #[command(flatten)]
    threshold: ThresholdArgs,
    #[arg(long, value_enum, default_value_t = MethodArg::Cml)]
    method: MethodArg,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    input: SeriesArgs,
    #[command(flatten)]
    threshold: ThresholdArgs,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    input: SeriesArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Fit report (JSON) supplying the parameters.
    #[arg(long)]
    fit_report: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    horizons: Vec<usize>,
    /// Held-out future values; enables rolling bias/MADE evaluation.
    #[arg(long)]
    actuals: Option<PathBuf>,
    #[arg(long)]
    max_state: Option<usize>,
    /// Include the full pmf for each horizon.
    #[arg(long)]
    pmf: bool,
}

#[derive(Args)]
struct StudyArgs {
    /// Study configuration (JSON).
    #[arg(long, conflicts_with = "design")]
    config: Option<PathBuf>,
    /// Named design: known-r, unknown-r, size or power.
    #[arg(long)]
    design: Option<String>,
    #[arg(long, default_value_t = 500)]
    replications: usize,
    /// Use the full replication count of the original study.
    #[arg(long)]
    full_scale: bool,
    /// Restrict a design to these models.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Restrict a design to these sample sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Estimates {
    phi1: f64,
    phi2: f64,
    lambda: f64,
}

#[derive(Serialize, Deserialize)]
struct FitReport {
    n_observations: usize,
    n_transitions: usize,
    r: u64,
    #[serde(rename = "R")]
    order: u8,
    method: String,
    estimates: Estimates,
    std_errors: Option<[f64; 3]>,
    std_error_kind: String,
    sandwich_std_errors: Option<[f64; 3]>,
    /// False when the log-likelihood Hessian was not negative definite and
    /// standard errors come from a pseudo-inverse.
    hessian_negative_definite: Option<bool>,
    n_binomial: usize,
    n_negbin: usize,
    /// Whether the estimate lies inside the parameter space. Likelihood
    /// scores and residuals are null when it does not.
    valid: bool,
    loglik: Option<f64>,
    aic: Option<f64>,
    bic: Option<f64>,
    rms: Option<f64>,
    pearson_mean: Option<f64>,
    pearson_variance: Option<f64>,
    threshold_search: Option<SearchReport>,
}

#[derive(Serialize, Deserialize)]
struct SearchReport {
    method: String,
    candidate_range: (u64, u64),
    per_candidate: Vec<(u64, f64)>,
    skipped: Vec<u64>,
    dness_lambda_hat: Option<f64>,
}

fn resolve_threshold(series: &CountSeries, t: &ThresholdArgs) -> Result<(u64, RegimeOrder, Option<(SearchReport, ThresholdSearchResult)>)> {
    let order = RegimeOrder::from_flag(t.order)?;
    match t.r {
        ThresholdArg::Fixed(r) => Ok((r, order, None)),
        ThresholdArg::Search => {
            let range = candidate_range(series, t.quantiles.0, t.quantiles.1)?;
            let res = match t.search {
                SearchArg::Cml => search_r_cml(series, order, range)?,
                SearchArg::Clsvar => search_r_cls_var(series, order, range)?,
                SearchArg::Dness => {
                    let (lo, hi, l) = t.dness_grid;
                    dness_search(series, order, lo, hi, l, range)?
                }
            };
            let report = SearchReport {
                method: serde_json::to_value(t.search).map(|v| v.as_str().unwrap_or("").to_string()).unwrap_or_default(),
                candidate_range: range,
                per_candidate: res.per_candidate.clone(),
                skipped: res.skipped.clone(),
                dness_lambda_hat: res.dness.as_ref().map(|d| d.lambda_hat),
            };
            Ok((res.r_hat, order, Some((report, res))))
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize") + "\n"
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> Result<String> {
    let spec = a.model.spec()?;
    let x0 = a.x0.unwrap_or_else(|| spec.default_x0());
    let series = simulate(&spec, a.n, x0, a.burn_in, &mut RngStream::new(cli.seed))?;
    let mut out = String::from("count\n");
    for v in series.values() {
        writeln!(out, "{v}").unwrap();
    }
    if let Some(dir) = &cli.out_dir {
        write_file(dir, "series.csv", &out)?;
    }
    Ok(out)
}

fn cmd_fit(cli: &Cli, a: &FitArgs) -> Result<String> {
    let series = load_series(&a.input.series, a.input.column.as_deref())?;
    let (r, order, search) = resolve_threshold(&series, &a.threshold)?;
    let fit: MeanFit = match (a.method, &search) {
        (MethodArg::Cml, Some((_, res))) if a.threshold.search == SearchArg::Cml => res.fit_at_r_hat.clone(),
        (MethodArg::Cml, _) => cml_fit(&series, r, order, None)?,
        (MethodArg::Cls, _) => cls_fit(&series, r, order)?,
    };
    let (std_errors, kind, sandwich, nd) = match a.method {
        MethodArg::Cml => {
            let cov = cml_covariance(&series, r, order, &fit)?;
            if !cov.hessian_negative_definite {
                log::warn!("log-likelihood Hessian is not negative definite at the estimate; standard errors use a pseudo-inverse");
            }
            let m = fit.n_transitions;
            let nd = Some(cov.hessian_negative_definite);
            (Some(cov.std_errors(m, true)), "observed_information", Some(cov.std_errors(m, false)), nd)
        }
        MethodArg::Cls => (fit.std_errors, "sandwich", fit.std_errors, None),
    };
    let diag = if fit.valid {
        Some(diagnostics(&series, &fit, r, order)?)
    } else {
        log::warn!("estimate {:?} lies outside the parameter space; scores and residuals are omitted", fit.theta());
        None
    };
    let report = FitReport {
        n_observations: series.len(),
        n_transitions: fit.n_transitions,
        r,
        order: order.flag(),
        method: if a.method == MethodArg::Cml { "cml" } else { "cls" }.into(),
        estimates: Estimates { phi1: fit.phi1, phi2: fit.phi2, lambda: fit.lambda },
        std_errors,
        std_error_kind: kind.into(),
        sandwich_std_errors: sandwich,
        hessian_negative_definite: nd,
        n_binomial: fit.n_binomial,
        n_negbin: fit.n_negbin,
        valid: fit.valid,
        loglik: diag.as_ref().map(|d| d.scores.loglik),
        aic: diag.as_ref().map(|d| d.scores.aic),
        bic: diag.as_ref().map(|d| d.scores.bic),
        rms: diag.as_ref().map(|d| d.scores.rms),
        pearson_mean: diag.as_ref().map(|d| d.pearson.mean),
        pearson_variance: diag.as_ref().map(|d| d.pearson.variance),
        threshold_search: search.map(|s| s.0),
    };
    let text = to_json(&report);
    if let Some(dir) = &cli.out_dir {
        write_file(dir, "fit.json", &text)?;
        let Some(diag) = diag else { return Ok(text) };
        let res = &diag.pearson.residuals;
        let mut csv = String::from("t,pearson_residual\n");
        for (t, e) in res.iter().enumerate() {
            writeln!(csv, "{},{e}", t + 1).unwrap();
        }
        write_file(dir, "residuals.csv", &csv)?;
        let lags = ACF_LAGS.min(res.len().saturating_sub(1));
        let (acf, pacf) = (sample_acf(res, lags), sample_pacf(res, lags));
        let mut csv = String::from("lag,acf,pacf\n");
        for k in 0..acf.len().min(pacf.len()) {
            writeln!(csv, "{},{},{}", k + 1, acf[k], pacf[k]).unwrap();
        }
        write_file(dir, "residual_acf.csv", &csv)?;
        let mut csv = String::from("theoretical,sample\n");
        for (q, s) in normal_qq(res) {
            writeln!(csv, "{q},{s}").unwrap();
        }
        write_file(dir, "residual_qq.csv", &csv)?;
    }
    Ok(text)
}

#[derive(Serialize)]
struct TestReport {
    r: u64,
    #[serde(rename = "R")]
    order: u8,
    wald_e: TestResult,
    wald_var: Option<TestResult>,
    /// Two-term form that ignores the covariance of the two contrasts.
    wald_var_displayed: Option<TestResult>,
    wald_var_error: Option<String>,
    structure_detected: bool,
    decision: String,
    threshold_search: Option<SearchReport>,
}

fn cmd_test(cli: &Cli, a: &TestArgs) -> Result<String> {
    let series = load_series(&a.input.series, a.input.column.as_deref())?;
    let (r, order, search) = resolve_threshold(&series, &a.threshold)?;
    let wald_e = wald_mean_test(&series, r, order)?;
    // the variance test is needed only when the mean test accepts
    let var = wald_variance_test(&series, r, order);
    let (wald_var, wald_var_error) = match var {
        Ok(t) => (Some(t), None),
        Err(e) if wald_e.reject_at_05 => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let wald_var_displayed = if wald_var.is_some() {
        let fit = cls_fit(&series, r, order)?;
        Some(wald_variance_displayed(&variance_cls_fit(&series, r, order, &fit)?)?)
    } else {
        None
    };
    let (detected, decision) = if wald_e.reject_at_05 {
        (true, "reject equal conditional means: threshold structure present")
    } else if wald_var.is_some_and(|t| t.reject_at_05) {
        (true, "equal conditional means accepted, equal conditional variances rejected: threshold structure present")
    } else {
        (false, "no evidence of threshold structure at the 5% level")
    };
    let report = TestReport {
        r,
        order: order.flag(),
        wald_e,
        wald_var,
        wald_var_displayed,
        wald_var_error,
        structure_detected: detected,
        decision: decision.into(),
        threshold_search: search.map(|s| s.0),
    };
    let text = to_json(&report);
    if let Some(dir) = &cli.out_dir {
        write_file(dir, "test.json", &text)?;
    }
    Ok(text)
}

#[derive(Serialize)]
struct HorizonReport {
    horizon: usize,
    origin: u64,
    point: PointForecasts,
    truncation_mass: f64,
    truncation_warning: bool,
    pmf: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct ForecastReport {
    spec: ModelSpec,
    max_state: usize,
    forecasts: Vec<HorizonReport>,
    evaluation: Option<Vec<HorizonEvaluation>>,
}

fn forecast_spec(a: &ForecastArgs) -> Result<ModelSpec> {
    match &a.fit_report {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            let rep: FitReport =
                serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
            let e = rep.estimates;
            ModelSpec::new(e.phi1, e.phi2, e.lambda, rep.r, RegimeOrder::from_flag(rep.order)?)
        }
        None => a.model.spec(),
    }
}

fn cmd_forecast(cli: &Cli, a: &ForecastArgs) -> Result<String> {
    let spec = forecast_spec(a)?;
    let series = load_series(&a.input.series, a.input.column.as_deref())?;
    let actuals = match &a.actuals {
        Some(p) => Some(load_series(p, None)?),
        None => None,
    };
    let highest = series.max().max(actuals.as_ref().and_then(|s| s.max())).unwrap_or(0);
    let max_state = match a.max_state {
        Some(m) => m,
        None => adequate_max_state(&spec, FORECAST_ROW_TOL, Some(highest))?,
    };
    let origin = *series.values().last().ok_or_else(|| Error::Input("empty series".into()))?;
    let mut forecasts = Vec::with_capacity(a.horizons.len());
    for &h in &a.horizons {
        let pmf = h_step_distribution(&spec, origin, h, max_state)?;
        forecasts.push(HorizonReport {
            horizon: h,
            origin,
            point: point_forecasts(&pmf),
            truncation_mass: pmf.truncation_mass,
            truncation_warning: pmf.truncation_warning,
            pmf: a.pmf.then_some(pmf.probabilities),
        });
    }
    let evaluation = match actuals {
        Some(future) => {
            let holdout = future.len();
            let joined = CountSeries::new(series.values().iter().chain(future.values()).copied().collect());
            Some(rolling_evaluation(&joined, &spec, &a.horizons, holdout, max_state)?)
        }
        None => None,
    };
    let text = to_json(&ForecastReport { spec, max_state, forecasts, evaluation });
    if let Some(dir) = &cli.out_dir {
        write_file(dir, "forecast.json", &text)?;
    }
    Ok(text)
}

fn study_config(cli: &Cli, a: &StudyArgs) -> Result<StudyConfig> {
    let reps = if a.full_scale { FULL_SCALE_REPLICATIONS } else { a.replications };
    let mut cfg = match (&a.config, &a.design) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => StudyConfig::design(name, reps, cli.seed)?,
        (None, None) => return Err(Error::Input("study needs --config or --design".into())),
    };
    if a.config.is_none() || a.full_scale {
        cfg.replications = reps;
    }
    if let Some(names) = &a.models {
        let unknown: Vec<&String> =
            names.iter().filter(|n| !cfg.models.iter().any(|m| m.name.eq_ignore_ascii_case(n))).collect();
        if !unknown.is_empty() {
            return Err(Error::Input(format!("models {unknown:?} are not part of this study")));
        }
        cfg.models.retain(|m| names.iter().any(|n| m.name.eq_ignore_ascii_case(n)));
    }
    if let Some(sizes) = &a.sizes {
        cfg.sample_sizes = sizes.clone();
    }
    Ok(cfg)
}

fn cmd_study(cli: &Cli, a: &StudyArgs) -> Result<String> {
    let cfg = study_config(cli, a)?;
    let out = run_study(&cfg, cli.workers)?;
    let dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("study-output"));
    write_outputs(&out, &dir)?;
    let mut text = format!("wrote {} result rows to {}\n", out.rows.len(), dir.display());
    for w in &out.manifest.warnings {
        writeln!(text, "warning: {w}").unwrap();
    }
    Ok(text)
}

fn run(cli: &Cli) -> Result<String> {
    if let (Some(w), false) = (cli.workers, matches!(cli.command, Command::Study(_))) {
        rayon_threads(w)?;
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Fit(a) => cmd_fit(cli, a),
        Command::Test(a) => cmd_test(cli, a),
        Command::Forecast(a) => cmd_forecast(cli, a),
        Command::Study(a) => cmd_study(cli, a),
    }
}

fn rayon_threads(w: usize) -> Result<()> {
    if w == 0 {
        return Err(Error::Input("--workers must be at least 1".into()));
    }
    std::env::set_var("RAYON_NUM_THREADS", w.to_string());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{record}");
            log::debug!("{e:?}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
