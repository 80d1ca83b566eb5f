//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export returns a JSON string; the page parses it and draws it on a
//! canvas. The plain `*_json` functions carry the logic and are testable
//! natively.

use std::sync::OnceLock;

use excess_cusum::calibration::{calibrate_threshold, MonitoringSetup};
use excess_cusum::simulate::simulate_cohort;
use excess_cusum::{
    presets, run_chart, seeding, Alternative, ArrivalProcess, CensoringSpec, CohortSpec, CovariateSource, Demographics,
    ExcessHazardModel, LifeTable, MonitoringConfig, Result, Sex, ShiftScenario, UpdateScheme,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Most points sent to the page per curve.
const MAX_POINTS: usize = 1500;

struct Presets {
    model: ExcessHazardModel,
    table: LifeTable,
    source: CovariateSource,
}

fn presets() -> &'static Presets {
    static CELL: OnceLock<Presets> = OnceLock::new();
    CELL.get_or_init(|| Presets {
        model: presets::model(),
        table: presets::life_table(),
        source: presets::covariate_source(),
    })
}

fn cohort(lambda: f64, t_m: f64) -> Result<CohortSpec> {
    Ok(CohortSpec {
        arrivals: ArrivalProcess::new(lambda)?,
        censoring: CensoringSpec::new(presets::CENSOR_RATE)?,
        horizon: t_m,
        calendar_origin: presets::CALENDAR_ORIGIN,
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}"))
}

#[derive(Serialize)]
struct ChartDemo {
    patients: usize,
    events: usize,
    times: Vec<f64>,
    psi: Vec<f64>,
    signal_time: Option<f64>,
    max_statistic: f64,
}

/// Simulates one cohort and runs the chart on it.
#[allow(clippy::too_many_arguments)]
pub fn chart_json(
    lambda: f64,
    t_m: f64,
    alternative: &str,
    scenario: &str,
    threshold: f64,
    scheme: &str,
    seed: u64,
) -> Result<String> {
    let p = presets();
    let alt: Alternative = alternative.parse()?;
    let scenario = ShiftScenario::parse(scenario, alt)?;
    let scheme: UpdateScheme = scheme.parse()?;
    let mut rng = seeding::stream(seed, 0);
    let records = simulate_cohort(&cohort(lambda, t_m)?, &p.source, &p.model, &p.table, &scenario, &mut rng)?;
    let path = run_chart(&records, &p.model, &p.table, &alt, &MonitoringConfig::new(t_m, threshold, scheme))?;
    let step = path.breakpoints.len().div_ceil(MAX_POINTS).max(1);
    let mut times = Vec::new();
    let mut psi = Vec::new();
    let mut prev_min = 0.0f64;
    for (i, b) in path.breakpoints.iter().enumerate() {
        // Keep left limits of jumps so that lumps draw as vertical steps.
        if i % step == 0 || b.event || i + 1 == path.breakpoints.len() {
            if b.r_left != b.r {
                times.push(b.time);
                psi.push(b.r_left - prev_min.min(b.r_left));
            }
            times.push(b.time);
            psi.push(b.r - b.running_min);
        }
        prev_min = b.running_min;
    }
    Ok(to_json(&ChartDemo {
        patients: records.len(),
        events: records.iter().filter(|r| r.is_event()).count(),
        times,
        psi,
        signal_time: path.signal_time,
        max_statistic: path.max_statistic(),
    }))
}

#[derive(Serialize)]
struct HazardCurves {
    t: Vec<f64>,
    in_control: Vec<f64>,
    out_of_control: Vec<f64>,
    population: Vec<f64>,
}

/// Excess hazards before and after the shift, and the population hazard, for
/// one patient profile. Unnamed covariates sit at their reference level.
pub fn hazards_json(
    alternative: &str,
    age: f64,
    female: bool,
    stage: &str,
    t_max: f64,
    points: usize,
) -> Result<String> {
    let p = presets();
    let alt: Alternative = alternative.parse()?;
    let sex = if female { Sex::Female } else { Sex::Male };
    let labels: Vec<String> = p
        .model
        .schema()
        .variables
        .iter()
        .map(|v| match v.name.as_str() {
            "sex" => if female { "F" } else { "M" }.to_string(),
            "stage" => stage.to_string(),
            _ => v.reference.clone(),
        })
        .collect();
    let x = p.model.schema().encode_labels(&labels)?;
    let ind = p.model.individual(&x)?;
    let z = Demographics::new(sex, age, presets::CALENDAR_ORIGIN)?;
    let t_max = t_max.min(p.model.support_end());
    let n = points.clamp(2, MAX_POINTS);
    let mut out = HazardCurves { t: vec![], in_control: vec![], out_of_control: vec![], population: vec![] };
    for i in 0..n {
        let t = t_max * i as f64 / (n - 1) as f64;
        out.t.push(t);
        out.in_control.push(ind.hazard(t)?);
        out.out_of_control.push(if alt.required_support(t) <= p.model.support_end() {
            alt.out_of_control_hazard(&ind, t)?
        } else {
            f64::NAN
        });
        out.population.push(p.table.population_hazard(&z, t)?);
    }
    Ok(to_json(&out))
}

#[derive(Serialize)]
struct CalibrationDemo {
    threshold: f64,
    standard_error: f64,
    statistics: Vec<f64>,
}

/// Small Monte Carlo calibration of the threshold.
pub fn calibrate_json(lambda: f64, t_m: f64, alternative: &str, alpha: f64, n: usize, seed: u64) -> Result<String> {
    let p = presets();
    let setup = MonitoringSetup {
        cohort: cohort(lambda, t_m)?,
        source: &p.source,
        truth: &p.model,
        chart_model: &p.model,
        table: &p.table,
        alternative: alternative.parse()?,
        scheme: UpdateScheme::Continuous,
        follow_up_cap: None,
    };
    let result = calibrate_threshold(&setup, alpha, n, seed)?;
    Ok(to_json(&CalibrationDemo {
        threshold: result.threshold,
        standard_error: result.standard_error,
        statistics: result.statistics,
    }))
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn simulate_chart(
    lambda: f64,
    t_m: f64,
    alternative: &str,
    scenario: &str,
    threshold: f64,
    scheme: &str,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(chart_json(lambda, t_m, alternative, scenario, threshold, scheme, seed.into()))
}

#[wasm_bindgen]
pub fn hazard_curves(
    alternative: &str,
    age: f64,
    female: bool,
    stage: &str,
    t_max: f64,
    points: usize,
) -> std::result::Result<String, JsError> {
    js(hazards_json(alternative, age, female, stage, t_max, points))
}

#[wasm_bindgen]
pub fn calibrate(
    lambda: f64,
    t_m: f64,
    alternative: &str,
    alpha: f64,
    n: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    js(calibrate_json(lambda, t_m, alternative, alpha, n, seed.into()))
}
