use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use excess_cusum::calibration::{calibrate_threshold, MonitoringSetup};
use excess_cusum::chart::{run_chart, MonitoringConfig, UpdateScheme};
use excess_cusum::excess_model::{CategoricalVariable, CovariateSchema, ExcessHazardModel};
use excess_cusum::experiments::{
    run_estimation_error_study, run_signal_table, CovariateMode, EstimationStudySpec, SignalTableSpec,
};
use excess_cusum::fit::{fit_excess_model, FitSpec};
use excess_cusum::records::{read_patients_csv, write_patients_csv, PatientRecord};
use excess_cusum::simulate::{
    simulate_cohort, AgeSpec, ArrivalProcess, CensoringSpec, CohortSpec, CovariateSource, ParametricCovariates,
    ShiftScenario,
};
use excess_cusum::{presets, seeding, Alternative, Error, LifeTable, Result};
use serde::{Deserialize, Serialize};

use crate::config::{merge, required, ConfigFile};
use crate::manifest::RunManifest;
use crate::{CalibrateArgs, FitArgs, RunArgs, SimulateArgs, StudyArgs};

/// `[covariate_source]` block of a config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateSourceConfig {
    /// One proportion vector per schema variable, in schema order.
    Parametric {
        proportions: Vec<Vec<f64>>,
        age: AgeSpec,
    },
    Bootstrap {
        patients: PathBuf,
    },
}

pub fn out_dir(dir: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = required(dir, "out_dir")?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn load_model(path: &Option<PathBuf>, manifest: &mut RunManifest) -> Result<ExcessHazardModel> {
    match path {
        Some(p) => {
            manifest.input(p)?;
            ExcessHazardModel::load(p)
        }
        None => Ok(presets::model()),
    }
}

pub fn load_table(path: &Option<PathBuf>, manifest: &mut RunManifest) -> Result<LifeTable> {
    match path {
        Some(p) => {
            manifest.input(p)?;
            LifeTable::load_csv(File::open(p)?)
        }
        None => Ok(presets::life_table()),
    }
}

pub fn load_patients(path: &Path, schema: &CovariateSchema, manifest: &mut RunManifest) -> Result<Vec<PatientRecord>> {
    manifest.input(path)?;
    read_patients_csv(File::open(path)?, schema)
}

fn covariate_source(
    schema: &CovariateSchema,
    bootstrap: &Option<PathBuf>,
    block: &Option<CovariateSourceConfig>,
    manifest: &mut RunManifest,
) -> Result<CovariateSource> {
    let block = match bootstrap {
        Some(p) => Some(CovariateSourceConfig::Bootstrap { patients: p.clone() }),
        None => block.clone(),
    };
    match block {
        Some(CovariateSourceConfig::Bootstrap { patients }) => {
            CovariateSource::bootstrap(&load_patients(&patients, schema, manifest)?)
        }
        Some(CovariateSourceConfig::Parametric { proportions, age }) => {
            Ok(CovariateSource::Parametric(ParametricCovariates::new(schema.clone(), proportions, age)?))
        }
        None if *schema == presets::schema() => Ok(presets::covariate_source()),
        None => Err(Error::Config(
            "the model's covariates differ from the built-in set; give --bootstrap or a [covariate_source] block"
                .into(),
        )),
    }
}

pub fn parse_alternative(text: &str) -> Result<Alternative> {
    text.parse()
}

pub fn parse_scheme(text: &Option<String>) -> Result<UpdateScheme> {
    text.as_deref().map_or(Ok(UpdateScheme::Continuous), str::parse)
}

pub fn parse_bands(text: &Option<String>) -> Result<Vec<f64>> {
    match text {
        None => Ok(presets::CUT_POINTS.to_vec()),
        Some(s) => s
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("band edge `{v}` is not a number"))))
            .collect(),
    }
}

#[derive(Deserialize)]
struct SchemaFile {
    covariates: Vec<SchemaEntry>,
}

#[derive(Deserialize)]
struct SchemaEntry {
    name: String,
    levels: Vec<String>,
    reference: String,
}

fn load_schema(path: &Option<PathBuf>, manifest: &mut RunManifest) -> Result<CovariateSchema> {
    let Some(path) = path else {
        return Ok(presets::schema());
    };
    manifest.input(path)?;
    let file: SchemaFile = toml::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::Config(format!("schema {}: {e}", path.display())))?;
    let vars = file
        .covariates
        .iter()
        .map(|e| {
            let levels: Vec<&str> = e.levels.iter().map(String::as_str).collect();
            CategoricalVariable::new(&e.name, &levels, &e.reference)
        })
        .collect::<Result<Vec<_>>>()?;
    CovariateSchema::new(vars)
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct Estimate {
    name: String,
    estimate: f64,
    standard_error: f64,
}

#[derive(Serialize)]
struct FitReport {
    converged: bool,
    iterations: usize,
    log_likelihood: f64,
    gradient_norm: f64,
    records: usize,
    events: usize,
    clamped_bands: Vec<usize>,
    coefficients: Vec<Estimate>,
    log_levels: Vec<Estimate>,
}

pub fn fit(args: &FitArgs, file: Option<&ConfigFile>) -> Result<()> {
    let (args, settings) = merge(args, file, "fit")?;
    let mut manifest = RunManifest::new("fit", file.map(|f| f.path.as_path()), None, settings);
    let dir = out_dir(&args.out_dir)?;
    let table = load_table(&args.life_table, &mut manifest)?;
    let schema = load_schema(&args.schema, &mut manifest)?;
    let records = load_patients(&required(&args.patients, "patients")?, &schema, &mut manifest)?;
    let defaults = FitSpec::default();
    let spec = FitSpec {
        cut_points: parse_bands(&args.bands)?,
        tolerance: args.tolerance.unwrap_or(defaults.tolerance),
        max_iterations: args.max_iterations.unwrap_or(defaults.max_iterations),
    };
    let result = fit_excess_model(&records, &table, &schema, &spec)?;
    let model_path = dir.join("model.toml");
    result.model.save(&model_path)?;
    let names = schema.coefficient_names();
    let se = &result.standard_errors;
    let cuts = &spec.cut_points;
    let levels = match result.model.baseline() {
        excess_cusum::Baseline::Piecewise(p) => p.log_levels().to_vec(),
        _ => unreachable!("the fitter returns piecewise baselines"),
    };
    let report = FitReport {
        converged: result.converged,
        iterations: result.iterations,
        log_likelihood: result.log_likelihood,
        gradient_norm: result.gradient_norm,
        records: records.len(),
        events: records.iter().filter(|r| r.is_event()).count(),
        clamped_bands: result.clamped_bands.clone(),
        coefficients: names
            .iter()
            .zip(result.model.coefficients())
            .zip(se)
            .map(|((n, b), s)| Estimate { name: n.clone(), estimate: *b, standard_error: *s })
            .collect(),
        log_levels: levels
            .iter()
            .enumerate()
            .map(|(k, c)| Estimate {
                name: format!("[{}, {})", cuts[k], cuts[k + 1]),
                estimate: *c,
                standard_error: se[names.len() + k],
            })
            .collect(),
    };
    let report_path = dir.join("fit_report.toml");
    write_toml(&report_path, &report)?;
    manifest.output(&model_path)?;
    manifest.output(&report_path)?;
    manifest.write(&dir)?;
    if !result.converged && !args.allow_unconverged {
        return Err(Error::Numeric(format!(
            "fit did not converge after {} iterations (gradient norm {:e}); rerun with --allow-unconverged to accept it",
            result.iterations, result.gradient_norm
        )));
    }
    println!("fitted {} records: {}", records.len(), result.model);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub threshold: f64,
    pub alpha: f64,
    pub replications: usize,
    pub seed: u64,
    pub standard_error: f64,
    pub alternative: String,
    pub scheme: String,
    pub lambda_a: f64,
    pub t_m: f64,
    pub censor_rate: f64,
    /// In-control signal probability re-estimated on fresh replications.
    pub check_proportion: Option<f64>,
}

pub fn calibrate(args: &CalibrateArgs, file: Option<&ConfigFile>) -> Result<()> {
    let (args, settings) = merge(args, file, "calibrate")?;
    let seed = args.seed.unwrap_or(1);
    let mut manifest = RunManifest::new("calibrate", file.map(|f| f.path.as_path()), Some(seed), settings);
    let dir = out_dir(&args.out_dir)?;
    let model = load_model(&args.model, &mut manifest)?;
    let table = load_table(&args.life_table, &mut manifest)?;
    let source = covariate_source(model.schema(), &args.bootstrap, &args.covariate_source, &mut manifest)?;
    let alternative = parse_alternative(&required(&args.alternative, "alternative")?)?;
    let scheme = parse_scheme(&args.scheme)?;
    let alpha = required(&args.alpha, "alpha")?;
    let n = args.n.unwrap_or(1000);
    let cohort = CohortSpec {
        arrivals: ArrivalProcess::new(required(&args.lambda_a, "lambda_a")?)?,
        censoring: CensoringSpec::new(args.censor_rate.unwrap_or(presets::CENSOR_RATE))?,
        horizon: required(&args.t_m, "t_m")?,
        calendar_origin: args.origin.unwrap_or(presets::CALENDAR_ORIGIN),
    };
    let setup = MonitoringSetup {
        cohort,
        source: &source,
        truth: &model,
        chart_model: &model,
        table: &table,
        alternative,
        scheme,
        follow_up_cap: args.t_d,
    };
    let result = calibrate_threshold(&setup, alpha, n, seed)?;
    let report = CalibrationReport {
        threshold: result.threshold,
        alpha,
        replications: n,
        seed,
        standard_error: result.standard_error,
        alternative: format!("{}:{}", alternative.kind(), alternative.parameter()),
        scheme: scheme.to_string(),
        lambda_a: cohort.arrivals.rate,
        t_m: cohort.horizon,
        censor_rate: cohort.censoring.rate,
        check_proportion: None,
    };
    let path = dir.join("calibration.toml");
    write_toml(&path, &report)?;
    manifest.output(&path)?;
    if args.histogram {
        let path = dir.join("statistics.csv");
        let mut text = String::from("replication,max_psi\n");
        for (j, w) in result.statistics.iter().enumerate() {
            text.push_str(&format!("{j},{w}\n"));
        }
        std::fs::write(&path, text)?;
        manifest.output(&path)?;
    }
    manifest.write(&dir)?;
    println!("c = {} (alpha {alpha}, N {n}, MC s.e. {})", result.threshold, result.standard_error);
    Ok(())
}

/// Threshold from `--threshold` or a calibration report.
pub fn threshold(value: Option<f64>, calibration: &Option<PathBuf>, manifest: &mut RunManifest) -> Result<Option<f64>> {
    if let Some(c) = value {
        return Ok(Some(c));
    }
    match calibration {
        Some(p) => {
            manifest.input(p)?;
            let report: CalibrationReport = toml::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| Error::Config(format!("calibration {}: {e}", p.display())))?;
            Ok(Some(report.threshold))
        }
        None => Ok(None),
    }
}

#[derive(Debug, Serialize)]
pub struct ChartReport {
    pub alternative: String,
    pub threshold: f64,
    pub signalled: bool,
    pub signal_time: Option<f64>,
    pub max_statistic: f64,
    pub breakpoints: usize,
    pub file: String,
}

pub fn chart_file_name(alt: &Alternative) -> String {
    format!("chart_{}_{}.csv", alt.kind(), alt.parameter())
}

/// Runs one chart, writes its CSV into `dir` and returns the report entry.
pub fn run_one_chart(
    records: &[PatientRecord],
    model: &ExcessHazardModel,
    table: &LifeTable,
    alt: &Alternative,
    config: &MonitoringConfig,
    path: &Path,
) -> Result<ChartReport> {
    let chart = run_chart(records, model, table, alt, config)?;
    chart.write_csv(BufWriter::new(File::create(path)?))?;
    Ok(ChartReport {
        alternative: format!("{}:{}", alt.kind(), alt.parameter()),
        threshold: config.threshold,
        signalled: chart.signal_time.is_some(),
        signal_time: chart.signal_time,
        max_statistic: chart.max_statistic(),
        breakpoints: chart.breakpoints.len(),
        file: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
    })
}

#[derive(Serialize)]
struct RunReport {
    horizon: f64,
    scheme: String,
    t_d: Option<f64>,
    charts: Vec<ChartReport>,
}

pub fn run(args: &RunArgs, file: Option<&ConfigFile>) -> Result<()> {
    let (args, settings) = merge(args, file, "run")?;
    let mut manifest = RunManifest::new("run", file.map(|f| f.path.as_path()), None, settings);
    let dir = out_dir(&args.out_dir)?;
    let alternatives =
        required(&args.alternative, "alternative")?.iter().map(|a| parse_alternative(a)).collect::<Result<Vec<_>>>()?;
    let scheme = parse_scheme(&args.scheme)?;
    let c = threshold(args.threshold, &args.calibration, &mut manifest)?
        .ok_or_else(|| Error::Config("`run` needs --threshold or --calibration".into()))?;
    let model = load_model(&args.model, &mut manifest)?;
    let table = load_table(&args.life_table, &mut manifest)?;
    let records = load_patients(&required(&args.patients, "patients")?, model.schema(), &mut manifest)?;
    let horizon = match args.window {
        Some(w) => w,
        None => records.iter().map(|r| r.arrival + r.follow_up).fold(0.0, f64::max).max(f64::MIN_POSITIVE),
    };
    let config = MonitoringConfig::new(horizon, c, scheme).with_follow_up_cap(args.t_d);
    let mut charts = Vec::new();
    for alt in &alternatives {
        let path = dir.join(chart_file_name(alt));
        let report = run_one_chart(&records, &model, &table, alt, &config, &path)?;
        manifest.output(&path)?;
        println!(
            "{}: {}",
            alt,
            match report.signal_time {
                Some(t) => format!("signal at t = {t}"),
                None => "no signal".into(),
            }
        );
        charts.push(report);
    }
    let report_path = dir.join("report.toml");
    write_toml(&report_path, &RunReport { horizon, scheme: scheme.to_string(), t_d: args.t_d, charts })?;
    manifest.output(&report_path)?;
    manifest.write(&dir)?;
    Ok(())
}

pub fn simulate(args: &SimulateArgs, file: Option<&ConfigFile>) -> Result<()> {
    let (args, settings) = merge(args, file, "simulate")?;
    let seed = args.seed.unwrap_or(1);
    let mut manifest = RunManifest::new("simulate", file.map(|f| f.path.as_path()), Some(seed), settings);
    let dir = out_dir(&args.out_dir)?;
    let model = load_model(&args.model, &mut manifest)?;
    let table = load_table(&args.life_table, &mut manifest)?;
    let source = covariate_source(model.schema(), &args.bootstrap, &args.covariate_source, &mut manifest)?;
    let alternative = match &args.alternative {
        Some(a) => parse_alternative(a)?,
        None => Alternative::Proportional { rho: 1.0 },
    };
    let scenario = ShiftScenario::parse(args.scenario.as_deref().unwrap_or("in_control"), alternative)?;
    if scenario != ShiftScenario::InControl && args.alternative.is_none() {
        return Err(Error::Config("a shifted scenario needs --alternative".into()));
    }
    let cohort = CohortSpec {
        arrivals: ArrivalProcess::new(required(&args.lambda_a, "lambda_a")?)?,
        censoring: CensoringSpec::new(args.censor_rate.unwrap_or(presets::CENSOR_RATE))?,
        horizon: required(&args.t_m, "t_m")?,
        calendar_origin: args.origin.unwrap_or(presets::CALENDAR_ORIGIN),
    };
    let mut rng = seeding::stream(seed, 0);
    let records = simulate_cohort(&cohort, &source, &model, &table, &scenario, &mut rng)?;
    let path = dir.join("patients.csv");
    write_patients_csv(BufWriter::new(File::create(&path)?), model.schema(), &records)?;
    manifest.output(&path)?;
    manifest.write(&dir)?;
    println!("simulated {} patients ({})", records.len(), scenario.label());
    Ok(())
}

#[derive(Serialize)]
struct EstimationSummary {
    name: String,
    covariates: String,
    outer_replications: usize,
    calibration_replications: usize,
    evaluation_replications: usize,
    failed: usize,
    mean: f64,
    median: f64,
    mean_se: f64,
}

pub fn study(args: &StudyArgs, file: Option<&ConfigFile>) -> Result<()> {
    let (args, settings) = merge(args, file, "study")?;
    let name = required(&args.name, "name")?;
    let scale = args.scale.unwrap_or(1.0);
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::Config(format!("scale must be positive, got {scale}")));
    }
    let mut manifest = RunManifest::new("study", file.map(|f| f.path.as_path()), args.seed, settings);
    let dir = out_dir(&args.out_dir)?;
    let table = load_table(&args.life_table, &mut manifest)?;
    if let Some(mut spec) = SignalTableSpec::named(&name) {
        spec = spec.scaled(scale);
        if let Some(seed) = args.seed {
            spec.seed = seed;
        }
        let result = run_signal_table(&spec, &table)?;
        let path = dir.join(format!("{name}.csv"));
        result.write_csv(BufWriter::new(File::create(&path)?))?;
        manifest.output(&path)?;
        println!("{name}: {} cells written to {}", result.cells.len(), path.display());
    } else if let Some(mut spec) = EstimationStudySpec::named(&name) {
        spec = spec.scaled(scale);
        if let Some(seed) = args.seed {
            spec.seed = seed;
        }
        let mode = match args.covariates.as_deref().unwrap_or("true") {
            "true" => CovariateMode::True,
            "bootstrap" => CovariateMode::Bootstrap,
            other => return Err(Error::Config(format!("covariates must be `true` or `bootstrap`, got `{other}`"))),
        };
        spec = spec.with_covariates(mode);
        let result = run_estimation_error_study(&spec, &table)?;
        let path = dir.join(format!("{name}_replications.csv"));
        result.write_csv(BufWriter::new(File::create(&path)?))?;
        manifest.output(&path)?;
        let summary_path = dir.join(format!("{name}_summary.toml"));
        write_toml(
            &summary_path,
            &EstimationSummary {
                name: name.clone(),
                covariates: args.covariates.clone().unwrap_or_else(|| "true".into()),
                outer_replications: spec.outer_replications,
                calibration_replications: spec.calibration_replications,
                evaluation_replications: spec.evaluation_replications,
                failed: result.failed,
                mean: result.mean,
                median: result.median,
                mean_se: result.mean_se,
            },
        )?;
        manifest.output(&summary_path)?;
        println!("{name}: mean achieved {} median {} ({} failed fits)", result.mean, result.median, result.failed);
    } else {
        return Err(Error::Config(format!("unknown study `{name}` (table2, table3, table4, acc-table, fig3, fig5)")));
    }
    manifest.write(&dir)?;
    Ok(())
}
