//! Simulation studies: signal-ratio tables over a grid of alternatives, shift
//! scenarios and false-signal levels, and the effect of estimating the
//! in-control model on the achieved false-signal probability.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::alternatives::Alternative;
use crate::calibration::{
    binomial_se, exceedance, max_statistics, quantile_standard_error, upper_quantile, MonitoringSetup,
};
use crate::chart::UpdateScheme;
use crate::error::{Error, Result};
use crate::excess_model::ExcessHazardModel;
use crate::fit::{fit_excess_model, FitSpec};
use crate::lifetable::LifeTable;
use crate::presets;
use crate::seeding;
use crate::simulate::{
    estimate_censoring_rate, simulate_cohort, ArrivalProcess, CensoringSpec, CohortSpec, CovariateSource, ShiftScenario,
};

/// A shift scenario without its alternative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScenarioTemplate {
    AllFrom { eta: f64 },
    NewArrivalsFrom { eta_star: f64 },
}

impl ScenarioTemplate {
    pub fn with(&self, alternative: Alternative) -> ShiftScenario {
        match *self {
            ScenarioTemplate::AllFrom { eta } => ShiftScenario::AllFrom { eta, alternative },
            ScenarioTemplate::NewArrivalsFrom { eta_star } => ShiftScenario::NewArrivalsFrom { eta_star, alternative },
        }
    }
}

fn scaled(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTableSpec {
    pub name: String,
    pub alternatives: Vec<Alternative>,
    pub alphas: Vec<f64>,
    pub scenarios: Vec<ScenarioTemplate>,
    pub arrival_rate: f64,
    pub horizon: f64,
    pub censor_rate: f64,
    pub calibration_replications: usize,
    pub evaluation_replications: usize,
    /// Extend the last baseline band so accelerated charts with `k > 1` stay evaluable.
    pub extend_support: bool,
    pub scheme: UpdateScheme,
    pub seed: u64,
}

impl SignalTableSpec {
    fn base(
        name: &str,
        alternatives: Vec<Alternative>,
        arrival_rate: f64,
        horizon: f64,
        eta: f64,
        reps: usize,
    ) -> Self {
        SignalTableSpec {
            name: name.into(),
            alternatives,
            alphas: vec![0.01, 0.05],
            scenarios: vec![
                ScenarioTemplate::AllFrom { eta: 0.0 },
                ScenarioTemplate::AllFrom { eta },
                ScenarioTemplate::NewArrivalsFrom { eta_star: eta },
            ],
            arrival_rate,
            horizon,
            censor_rate: presets::CENSOR_RATE,
            calibration_replications: reps,
            evaluation_replications: reps,
            extend_support: false,
            scheme: UpdateScheme::Continuous,
            seed: 2024,
        }
    }

    fn params(make: fn(f64) -> Result<Alternative>, values: &[f64]) -> Vec<Alternative> {
        values.iter().map(|&v| make(v).expect("preset parameter is valid")).collect()
    }

    /// Proportional alternatives at 250 arrivals per year over ten years.
    pub fn table2() -> Self {
        Self::base("table2", Self::params(Alternative::proportional, &[0.8, 0.9, 1.1, 1.2]), 250.0, 10.0, 5.0, 10_000)
    }

    /// Small proportional shifts at 3700 arrivals per year over five years.
    pub fn table3() -> Self {
        Self::base("table3", Self::params(Alternative::proportional, &[0.9, 0.95, 1.05, 1.1]), 3700.0, 5.0, 2.5, 1000)
    }

    /// Additive alternatives at 3700 arrivals per year.
    pub fn table4() -> Self {
        Self::base("table4", Self::params(Alternative::additive, &[-0.002, 0.002, 0.005]), 3700.0, 10.0, 5.0, 1000)
    }

    /// Accelerated-time alternatives at 3700 arrivals per year.
    pub fn acc_table() -> Self {
        let mut spec = Self::base(
            "acc-table",
            Self::params(Alternative::accelerated_time, &[0.9, 0.95, 1.05, 1.1]),
            3700.0,
            10.0,
            5.0,
            1000,
        );
        spec.extend_support = true;
        spec
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "table2" => Some(Self::table2()),
            "table3" => Some(Self::table3()),
            "table4" => Some(Self::table4()),
            "acc-table" => Some(Self::acc_table()),
            _ => None,
        }
    }

    /// Replication counts multiplied by `scale` (at least one each).
    pub fn scaled(mut self, scale: f64) -> Self {
        self.calibration_replications = scaled(self.calibration_replications, scale);
        self.evaluation_replications = scaled(self.evaluation_replications, scale);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.alternatives.is_empty() || self.alphas.is_empty() || self.scenarios.is_empty() {
            return Err(Error::Config(format!("study `{}` has an empty grid", self.name)));
        }
        for a in &self.alphas {
            if !(*a > 0.0 && *a < 1.0) {
                return Err(Error::Config(format!("alpha {a} is not in (0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalCell {
    pub alternative: Alternative,
    pub alpha: f64,
    pub threshold: f64,
    pub threshold_se: f64,
    pub scenario: String,
    pub signals: usize,
    pub replications: usize,
    pub ratio: f64,
    pub ratio_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTable {
    pub name: String,
    pub cells: Vec<SignalCell>,
}

impl SignalTable {
    pub fn cell(&self, alternative: &Alternative, alpha: f64, scenario: &str) -> Option<&SignalCell> {
        self.cells.iter().find(|c| c.alternative == *alternative && c.alpha == alpha && c.scenario == scenario)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "alternative,parameter,alpha,threshold,threshold_se,scenario,signals,replications,ratio,ratio_se"
        )?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                c.alternative.kind(),
                c.alternative.parameter(),
                c.alpha,
                c.threshold,
                c.threshold_se,
                c.scenario,
                c.signals,
                c.replications,
                c.ratio,
                c.ratio_se
            )?;
        }
        Ok(())
    }
}

/// For each alternative: calibrate every `alpha` from one set of in-control
/// replications, then estimate signal ratios under each scenario. Within a
/// row all scenarios and thresholds share random numbers.
pub fn run_signal_table(spec: &SignalTableSpec, table: &LifeTable) -> Result<SignalTable> {
    spec.validate()?;
    let source = presets::covariate_source();
    let cohort = CohortSpec {
        arrivals: ArrivalProcess::new(spec.arrival_rate)?,
        censoring: CensoringSpec::new(spec.censor_rate)?,
        horizon: spec.horizon,
        calendar_origin: presets::CALENDAR_ORIGIN,
    };
    let mut cells = Vec::new();
    for alt in &spec.alternatives {
        let base = presets::model();
        let model = if spec.extend_support {
            base.with_extended_support(alt.required_support(base.support_end()))?
        } else {
            base
        };
        let setup = MonitoringSetup {
            cohort,
            source: &source,
            truth: &model,
            chart_model: &model,
            table,
            alternative: *alt,
            scheme: spec.scheme,
            follow_up_cap: None,
        };
        let label = format!("{}/{alt}", spec.name);
        log::info!("{label}: calibrating with {} replications", spec.calibration_replications);
        let w0 = max_statistics(
            &setup,
            &ShiftScenario::InControl,
            spec.calibration_replications,
            seeding::labelled(spec.seed, &format!("calibrate/{label}")),
        )?;
        let thresholds = spec
            .alphas
            .iter()
            .map(|&a| Ok((a, upper_quantile(&w0, a)?, quantile_standard_error(&w0, a)?)))
            .collect::<Result<Vec<_>>>()?;
        let eval_seed = seeding::labelled(spec.seed, &format!("evaluate/{label}"));
        for template in &spec.scenarios {
            let scenario = template.with(*alt);
            log::info!("{label}: {} with {} replications", scenario.label(), spec.evaluation_replications);
            let w1 = max_statistics(&setup, &scenario, spec.evaluation_replications, eval_seed)?;
            for &(alpha, c, c_se) in &thresholds {
                let ratio = exceedance(&w1, c);
                cells.push(SignalCell {
                    alternative: *alt,
                    alpha,
                    threshold: c,
                    threshold_se: c_se,
                    scenario: scenario.label(),
                    signals: w1.iter().filter(|&&w| w > c).count(),
                    replications: w1.len(),
                    ratio,
                    ratio_se: binomial_se(ratio, w1.len()),
                });
            }
        }
    }
    Ok(SignalTable { name: spec.name.clone(), cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthKind {
    Piecewise,
    Weibull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateMode {
    /// Calibration draws covariates from the true distribution.
    True,
    /// Calibration resamples the baseline patients and estimates censoring from them.
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Piecewise model fitted to the baseline data.
    Fitted,
    /// The true model itself; no estimation error.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationStudySpec {
    pub name: String,
    pub truth: TruthKind,
    pub covariates: CovariateMode,
    pub estimator: Estimator,
    pub arrival_rate: f64,
    pub censor_rate: f64,
    /// Years of baseline data, ending at the monitoring start.
    pub baseline_years: f64,
    pub horizon: f64,
    pub alpha: f64,
    pub alternative: Alternative,
    pub cut_points: Vec<f64>,
    pub outer_replications: usize,
    pub calibration_replications: usize,
    pub evaluation_replications: usize,
    pub seed: u64,
}

impl EstimationStudySpec {
    fn base(name: &str, truth: TruthKind) -> Self {
        EstimationStudySpec {
            name: name.into(),
            truth,
            covariates: CovariateMode::True,
            estimator: Estimator::Fitted,
            arrival_rate: 3750.0,
            censor_rate: presets::CENSOR_RATE,
            baseline_years: 10.0,
            horizon: 5.0,
            alpha: 0.05,
            alternative: Alternative::Proportional { rho: 0.9 },
            cut_points: presets::CUT_POINTS.to_vec(),
            outer_replications: 200,
            calibration_replications: 500,
            evaluation_replications: 500,
            seed: 2024,
        }
    }

    /// Piecewise truth, piecewise estimator.
    pub fn fig3() -> Self {
        Self::base("fig3", TruthKind::Piecewise)
    }

    /// Weibull truth, piecewise estimator.
    pub fn fig5() -> Self {
        Self::base("fig5", TruthKind::Weibull)
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "fig3" => Some(Self::fig3()),
            "fig5" => Some(Self::fig5()),
            _ => None,
        }
    }

    pub fn with_covariates(mut self, mode: CovariateMode) -> Self {
        self.covariates = mode;
        self
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.outer_replications = scaled(self.outer_replications, scale);
        self.calibration_replications = scaled(self.calibration_replications, scale);
        self.evaluation_replications = scaled(self.evaluation_replications, scale);
        self
    }

    fn truth_model(&self) -> ExcessHazardModel {
        match self.truth {
            TruthKind::Piecewise => presets::model(),
            TruthKind::Weibull => presets::weibull_model(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationReplication {
    pub index: usize,
    pub converged: bool,
    pub threshold: f64,
    /// Achieved in-control signal probability under the truth.
    pub achieved: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationStudyResult {
    pub name: String,
    pub replications: Vec<EstimationReplication>,
    /// Outer replications whose fit did not converge, excluded from the summary.
    pub failed: usize,
    pub mean: f64,
    pub median: f64,
    pub mean_se: f64,
}

impl EstimationStudyResult {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "replication,converged,threshold,achieved")?;
        for r in &self.replications {
            writeln!(out, "{},{},{},{}", r.index, r.converged, r.threshold, r.achieved)?;
        }
        Ok(())
    }
}

fn one_estimation_replication(
    spec: &EstimationStudySpec,
    truth: &ExcessHazardModel,
    table: &LifeTable,
    true_source: &CovariateSource,
    j: usize,
) -> Result<EstimationReplication> {
    let mut rng = seeding::stream(spec.seed, j as u64);
    let start = presets::CALENDAR_ORIGIN - spec.baseline_years;
    let baseline_cohort = CohortSpec {
        arrivals: ArrivalProcess::new(spec.arrival_rate)?,
        censoring: CensoringSpec::new(spec.censor_rate)?,
        horizon: spec.baseline_years,
        calendar_origin: start,
    };
    let (fitted, converged, source, censor_rate) = match spec.estimator {
        Estimator::Truth => (truth.clone(), true, true_source.clone(), spec.censor_rate),
        Estimator::Fitted => {
            let baseline =
                simulate_cohort(&baseline_cohort, true_source, truth, table, &ShiftScenario::InControl, &mut rng)?;
            let fit = fit_excess_model(
                &baseline,
                table,
                truth.schema(),
                &FitSpec { cut_points: spec.cut_points.clone(), ..FitSpec::default() },
            )?;
            let (source, censor_rate) = match spec.covariates {
                CovariateMode::True => (true_source.clone(), spec.censor_rate),
                CovariateMode::Bootstrap => {
                    (CovariateSource::bootstrap(&baseline)?, estimate_censoring_rate(&baseline, spec.baseline_years))
                }
            };
            (fit.model, fit.converged, source, censor_rate)
        }
    };
    if !converged {
        return Ok(EstimationReplication { index: j, converged, threshold: f64::NAN, achieved: f64::NAN });
    }
    let monitoring = CohortSpec {
        arrivals: ArrivalProcess::new(spec.arrival_rate)?,
        censoring: CensoringSpec::new(censor_rate)?,
        horizon: spec.horizon,
        calendar_origin: presets::CALENDAR_ORIGIN,
    };
    let calibration = MonitoringSetup {
        cohort: monitoring,
        source: &source,
        truth: &fitted,
        chart_model: &fitted,
        table,
        alternative: spec.alternative,
        scheme: UpdateScheme::Continuous,
        follow_up_cap: None,
    };
    let w = max_statistics(
        &calibration,
        &ShiftScenario::InControl,
        spec.calibration_replications,
        seeding::child_seed(seeding::labelled(spec.seed, "calibrate"), j as u64),
    )?;
    let threshold = upper_quantile(&w, spec.alpha)?;
    let evaluation = MonitoringSetup {
        cohort: CohortSpec { censoring: CensoringSpec::new(spec.censor_rate)?, ..monitoring },
        source: true_source,
        truth,
        ..calibration
    };
    let w = max_statistics(
        &evaluation,
        &ShiftScenario::InControl,
        spec.evaluation_replications,
        seeding::child_seed(seeding::labelled(spec.seed, "evaluate"), j as u64),
    )?;
    Ok(EstimationReplication { index: j, converged, threshold, achieved: exceedance(&w, threshold) })
}

/// Outer loop: simulate baseline data from the truth, fit, calibrate under the
/// fitted model, and measure the in-control signal probability against the truth.
pub fn run_estimation_error_study(spec: &EstimationStudySpec, table: &LifeTable) -> Result<EstimationStudyResult> {
    if !(spec.alpha > 0.0 && spec.alpha < 1.0) {
        return Err(Error::Config(format!("alpha {} is not in (0, 1)", spec.alpha)));
    }
    let truth = spec.truth_model();
    let true_source = presets::covariate_source();
    let replications = (0..spec.outer_replications)
        .map(|j| {
            log::info!("{}: outer replication {}/{}", spec.name, j + 1, spec.outer_replications);
            one_estimation_replication(spec, &truth, table, &true_source, j)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut achieved: Vec<f64> = replications.iter().filter(|r| r.converged).map(|r| r.achieved).collect();
    let failed = replications.len() - achieved.len();
    achieved.sort_unstable_by(f64::total_cmp);
    let n = achieved.len();
    let mean = if n > 0 { achieved.iter().sum::<f64>() / n as f64 } else { f64::NAN };
    let median = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => achieved[n / 2],
        _ => 0.5 * (achieved[n / 2 - 1] + achieved[n / 2]),
    };
    let mean_se = if n > 1 {
        (achieved.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok(EstimationStudyResult { name: spec.name.clone(), replications, failed, mean, median, mean_se })
}
