use approx::assert_relative_eq;
use excess_cusum::calibration::{exceedance, upper_quantile};
use excess_cusum::chart::{chart_maximum, chart_signal_time, ChartBuffer};
use excess_cusum::records::{read_patients_csv, write_patients_csv};
use excess_cusum::simulate::simulate_cohort;
use excess_cusum::*;

fn cohort(lambda: f64, t_m: f64) -> CohortSpec {
    CohortSpec {
        arrivals: ArrivalProcess::new(lambda).unwrap(),
        censoring: CensoringSpec::new(presets::CENSOR_RATE).unwrap(),
        horizon: t_m,
        calendar_origin: presets::CALENDAR_ORIGIN,
    }
}

fn simulated(seed: u64, scenario: &ShiftScenario) -> Vec<PatientRecord> {
    let mut rng = seeding::stream(seed, 0);
    simulate_cohort(
        &cohort(200.0, 5.0),
        &presets::covariate_source(),
        &presets::model(),
        &presets::life_table(),
        scenario,
        &mut rng,
    )
    .unwrap()
}

#[test]
fn patient_csv_round_trips() {
    let records = simulated(1, &ShiftScenario::InControl);
    let schema = presets::schema();
    let mut buf = Vec::new();
    write_patients_csv(&mut buf, &schema, &records).unwrap();
    let back = read_patients_csv(buf.as_slice(), &schema).unwrap();
    assert_eq!(back.len(), records.len());
    for (a, b) in records.iter().zip(&back) {
        assert_eq!(a.status, b.status);
        assert_eq!(a.covariates, b.covariates);
        assert_eq!(a.demographics.sex, b.demographics.sex);
        assert_relative_eq!(a.arrival, b.arrival, max_relative = 1e-12);
        assert_relative_eq!(a.follow_up, b.follow_up, max_relative = 1e-12);
    }
}

/// One censored patient with a constant excess hazard; the population hazard
/// cancels from the ratio. Under `rho < 1` the statistic rises linearly as
/// `(1 - rho) lambda t`, so the signal time is `c / ((1 - rho) lambda)`.
#[test]
fn censored_patient_under_constant_hazard() {
    let lambda = 0.2f64;
    let model = ExcessHazardModel::new(
        Baseline::Piecewise(PiecewiseBaseline::new(vec![0.0, 20.0], vec![lambda.ln()]).unwrap()),
        CovariateSchema::new(vec![]).unwrap(),
        vec![],
    )
    .unwrap();
    let table = LifeTable::constant(0.01, 0..=120, 1950..=2060).unwrap();
    let record = PatientRecord {
        arrival: 0.0,
        demographics: Demographics::new(Sex::Female, 60.0, 2010.0).unwrap(),
        covariates: CovariateVector::zeros(0),
        follow_up: 15.0,
        status: EventStatus::Censored,
    };
    let rho = 0.5;
    let c = 0.5;
    let alt = Alternative::proportional(rho).unwrap();
    let cfg = MonitoringConfig::new(10.0, c, UpdateScheme::Continuous);
    let path = run_chart(std::slice::from_ref(&record), &model, &table, &alt, &cfg).unwrap();
    let tau = path.signal_time.expect("the chart crosses c");
    assert_relative_eq!(tau, c / ((1.0 - rho) * lambda), max_relative = 1e-12);
    let (r, psi) = path.evaluate(2.0).unwrap();
    assert_relative_eq!(r, (1.0 - rho) * lambda * 2.0, max_relative = 1e-12);
    assert_relative_eq!(psi, r, max_relative = 1e-12);

    // Under rho > 1 the statistic falls and Psi stays at zero.
    let up = Alternative::proportional(2.0).unwrap();
    let path = run_chart(std::slice::from_ref(&record), &model, &table, &up, &cfg).unwrap();
    assert!(path.signal_time.is_none());
    assert_eq!(path.max_statistic(), 0.0);
}

#[test]
fn fast_chart_paths_agree_with_the_full_path() {
    let model = presets::model();
    let table = presets::life_table();
    let alt = Alternative::proportional(1.5).unwrap();
    let records = simulated(4, &ShiftScenario::AllFrom { eta: 1.0, alternative: alt });
    let mut buffer = ChartBuffer::default();
    for scheme in UpdateScheme::ALL {
        let infinite = MonitoringConfig::new(5.0, f64::INFINITY, scheme);
        let path = run_chart(&records, &model, &table, &alt, &infinite).unwrap();
        let max = chart_maximum(&records, &model, &table, &alt, &infinite, &mut buffer).unwrap();
        assert_eq!(max, path.max_statistic(), "{scheme}");
        assert!(path.psi_values().iter().all(|p| *p >= 0.0));

        let cfg = MonitoringConfig::new(5.0, 0.5 * max, scheme);
        let full = run_chart(&records, &model, &table, &alt, &cfg).unwrap();
        let fast = chart_signal_time(&records, &model, &table, &alt, &cfg, &mut buffer).unwrap();
        assert_eq!(full.signal_time, fast, "{scheme}");
    }
}

#[test]
fn calibration_is_seeded_and_consistent_with_its_statistics() {
    let model = presets::model();
    let table = presets::life_table();
    let source = presets::covariate_source();
    let setup = calibration::MonitoringSetup {
        cohort: cohort(60.0, 3.0),
        source: &source,
        truth: &model,
        chart_model: &model,
        table: &table,
        alternative: Alternative::proportional(0.8).unwrap(),
        scheme: UpdateScheme::Continuous,
        follow_up_cap: None,
    };
    let a = calibrate_threshold(&setup, 0.1, 200, 21).unwrap();
    let b = calibrate_threshold(&setup, 0.1, 200, 21).unwrap();
    assert_eq!(a, b);
    let other = calibrate_threshold(&setup, 0.1, 200, 22).unwrap();
    assert_ne!(a.statistics, other.statistics);
    assert_eq!(a.threshold, upper_quantile(&a.statistics, 0.1).unwrap());
    // The 20th largest of 200 maxima: at most 19 lie strictly above it.
    assert!(exceedance(&a.statistics, a.threshold) <= 19.0 / 200.0);
}

#[test]
fn fitted_model_drives_the_chart() {
    let model = presets::model();
    let table = presets::life_table();
    let mut rng = seeding::stream(8, 0);
    let mut spec = cohort(600.0, 10.0);
    spec.calendar_origin = 2000.0;
    let records =
        simulate_cohort(&spec, &presets::covariate_source(), &model, &table, &ShiftScenario::InControl, &mut rng)
            .unwrap();
    let fit = fit_excess_model(&records, &table, &presets::schema(), &FitSpec::default()).unwrap();
    assert!(fit.converged);
    assert!(fit.history.windows(2).all(|w| w[1] >= w[0]));
    let alt = Alternative::proportional(1.2).unwrap();
    let path = run_chart(
        &records,
        &fit.model,
        &table,
        &alt,
        &MonitoringConfig::new(10.0, f64::INFINITY, UpdateScheme::Continuous),
    )
    .unwrap();
    assert!(path.max_statistic().is_finite());
}
