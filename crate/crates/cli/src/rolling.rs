//! Rolling mode: fit on one calendar window, monitor the next, slide forward.

use std::path::PathBuf;

use excess_cusum::calibration::{calibrate_threshold, MonitoringSetup};
use excess_cusum::chart::MonitoringConfig;
use excess_cusum::fit::{fit_excess_model, FitSpec};
use excess_cusum::simulate::{estimate_censoring_rate, ArrivalProcess, CensoringSpec, CohortSpec, CovariateSource};
use excess_cusum::{presets, seeding, Error, PatientRecord, Result};
use serde::Serialize;

use crate::commands::{
    chart_file_name, load_patients, load_table, out_dir, parse_alternative, parse_bands, parse_scheme, run_one_chart,
    threshold, ChartReport,
};
use crate::config::{merge, required, ConfigFile};
use crate::manifest::RunManifest;
use crate::RunArgs;

/// Records entering in `[start, end)`, re-timed from `start` and censored at `end`.
pub fn window_records(records: &[PatientRecord], start: f64, end: f64) -> Vec<PatientRecord> {
    records
        .iter()
        .filter(|r| (start..end).contains(&r.demographics.entry_calendar_time))
        .map(|r| {
            let entry = r.demographics.entry_calendar_time;
            let mut w = r.capped_at(Some(end - entry));
            w.arrival = entry - start;
            w
        })
        .collect()
}

#[derive(Serialize)]
struct PeriodReport {
    baseline_start: f64,
    monitoring_start: f64,
    monitoring_end: f64,
    baseline_records: usize,
    monitoring_records: usize,
    fit_converged: bool,
    threshold: f64,
    threshold_se: Option<f64>,
    charts: Vec<ChartReport>,
}

#[derive(Serialize)]
struct RollingReport {
    from: f64,
    to: f64,
    window: f64,
    scheme: String,
    periods: Vec<PeriodReport>,
}

pub fn run_rolling(args: &RunArgs, file: Option<&ConfigFile>) -> Result<()> {
    let (args, settings) = merge(args, file, "run")?;
    let seed = args.seed.unwrap_or(1);
    let mut manifest = RunManifest::new("run", file.map(|f| f.path.as_path()), Some(seed), settings);
    let dir = out_dir(&args.out_dir)?;
    let from = required(&args.from, "from")?;
    let to = required(&args.to, "to")?;
    let window = required(&args.window, "window")?;
    if !(window > 0.0 && to > from) {
        return Err(Error::Config(format!("rolling range [{from}, {to}) with window {window} is empty")));
    }
    let alternatives =
        required(&args.alternative, "alternative")?.iter().map(|a| parse_alternative(a)).collect::<Result<Vec<_>>>()?;
    let scheme = parse_scheme(&args.scheme)?;
    let fixed = threshold(args.threshold, &args.calibration, &mut manifest)?;
    if fixed.is_none() && args.alpha.is_none() {
        return Err(Error::Config("rolling mode needs --threshold, --calibration or --alpha".into()));
    }
    let table = load_table(&args.life_table, &mut manifest)?;
    let schema = presets::schema();
    let patients: PathBuf = required(&args.patients, "patients")?;
    let records = load_patients(&patients, &schema, &mut manifest)?;
    let spec = FitSpec { cut_points: parse_bands(&args.bands)?, ..FitSpec::default() };
    let last_cut = *spec.cut_points.last().unwrap_or(&0.0);

    let mut periods = Vec::new();
    let mut start = from;
    let mut index = 0u64;
    while start + 2.0 * window <= to + 1e-9 {
        let mid = start + window;
        let end = mid + window;
        let baseline: Vec<_> =
            window_records(&records, start, mid).into_iter().map(|r| r.capped_at(Some(last_cut))).collect();
        let monitoring = window_records(&records, mid, end);
        let fit = fit_excess_model(&baseline, &table, &schema, &spec)?;
        if !fit.converged {
            log::warn!("fit on [{start}, {mid}) did not converge");
        }
        let (c, se) = match fixed {
            Some(c) => (c, None),
            None => {
                let source = CovariateSource::bootstrap(&baseline)?;
                let censor = estimate_censoring_rate(&baseline, window);
                let cohort = CohortSpec {
                    arrivals: ArrivalProcess::new(baseline.len() as f64 / window)?,
                    censoring: CensoringSpec::new(censor)?,
                    horizon: window,
                    calendar_origin: mid,
                };
                let mut pair_c = f64::NEG_INFINITY;
                let mut pair_se = 0.0;
                // One threshold per period: the largest over the requested alternatives.
                for alt in &alternatives {
                    let setup = MonitoringSetup {
                        cohort,
                        source: &source,
                        truth: &fit.model,
                        chart_model: &fit.model,
                        table: &table,
                        alternative: *alt,
                        scheme,
                        follow_up_cap: args.t_d,
                    };
                    let alpha = required(&args.alpha, "alpha")?;
                    let cal =
                        calibrate_threshold(&setup, alpha, args.n.unwrap_or(1000), seeding::child_seed(seed, index))?;
                    if cal.threshold > pair_c {
                        pair_c = cal.threshold;
                        pair_se = cal.standard_error;
                    }
                }
                (pair_c, Some(pair_se))
            }
        };
        let config = MonitoringConfig::new(window, c, scheme).with_follow_up_cap(args.t_d);
        let mut charts = Vec::new();
        for alt in &alternatives {
            let path = dir.join(format!("period_{mid}_{}", chart_file_name(alt)));
            let report = run_one_chart(&monitoring, &fit.model, &table, alt, &config, &path)?;
            manifest.output(&path)?;
            charts.push(report);
        }
        println!(
            "[{mid}, {end}): {} patients, c = {c}, {} of {} charts signalled",
            monitoring.len(),
            charts.iter().filter(|r| r.signalled).count(),
            charts.len()
        );
        periods.push(PeriodReport {
            baseline_start: start,
            monitoring_start: mid,
            monitoring_end: end,
            baseline_records: baseline.len(),
            monitoring_records: monitoring.len(),
            fit_converged: fit.converged,
            threshold: c,
            threshold_se: se,
            charts,
        });
        start = mid;
        index += 1;
    }
    if periods.is_empty() {
        return Err(Error::Config(format!(
            "range [{from}, {to}) holds no baseline/monitoring pair of {window}-year windows"
        )));
    }
    let report = RollingReport { from, to, window, scheme: scheme.to_string(), periods };
    let path = dir.join("report.toml");
    let text = toml::to_string(&report).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text)?;
    manifest.output(&path)?;
    manifest.write(&dir)?;
    Ok(())
}
