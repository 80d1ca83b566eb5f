//! Monte Carlo threshold calibration and signal-probability estimation.
//!
//! Replication `j` of any Monte Carlo loop draws from stream `j` of the master
//! seed and results are collected in index order, so output is identical for
//! any number of worker threads.

use serde::{Deserialize, Serialize};

use crate::alternatives::Alternative;
use crate::chart::{chart_maximum, chart_signal_time, ChartBuffer, MonitoringConfig, UpdateScheme};
use crate::error::{Error, Result};
use crate::excess_model::ExcessHazardModel;
use crate::lifetable::LifeTable;
use crate::seeding;
use crate::simulate::{simulate_cohort, CohortSpec, CovariateSource, ShiftScenario};

/// How monitoring data are generated and how the chart is computed on them.
///
/// `truth` generates the data; `chart_model` is the in-control model inside
/// the chart. They differ when the in-control model is estimated.
#[derive(Debug, Clone, Copy)]
pub struct MonitoringSetup<'a> {
    pub cohort: CohortSpec,
    pub source: &'a CovariateSource,
    pub truth: &'a ExcessHazardModel,
    pub chart_model: &'a ExcessHazardModel,
    pub table: &'a LifeTable,
    pub alternative: Alternative,
    pub scheme: UpdateScheme,
    pub follow_up_cap: Option<f64>,
}

impl MonitoringSetup<'_> {
    fn config(&self, threshold: f64) -> MonitoringConfig {
        MonitoringConfig::new(self.cohort.horizon, threshold, self.scheme).with_follow_up_cap(self.follow_up_cap)
    }
}

#[cfg(feature = "parallel")]
fn replicate<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &mut ChartBuffer) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    (0..n as u64).into_par_iter().map_init(ChartBuffer::default, |buf, j| f(j, buf)).collect()
}

#[cfg(not(feature = "parallel"))]
fn replicate<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(u64, &mut ChartBuffer) -> Result<T>,
{
    let mut buf = ChartBuffer::default();
    (0..n as u64).map(|j| f(j, &mut buf)).collect()
}

/// `W_j = sup Psi_j` over `[0, t_m]` for `n` replications under `scenario`.
pub fn max_statistics(setup: &MonitoringSetup<'_>, scenario: &ShiftScenario, n: usize, seed: u64) -> Result<Vec<f64>> {
    let config = setup.config(f64::INFINITY);
    config.validate()?;
    replicate(n, |j, buf| {
        let mut rng = seeding::stream(seed, j);
        let data = simulate_cohort(&setup.cohort, setup.source, setup.truth, setup.table, scenario, &mut rng)?;
        chart_maximum(&data, setup.chart_model, setup.table, &setup.alternative, &config, buf)
    })
}

/// The `ceil(alpha n)`-th largest value.
pub fn upper_quantile(values: &[f64], alpha: f64) -> Result<f64> {
    let sorted = sorted_descending(values);
    let k = upper_rank(values.len(), alpha)?;
    Ok(sorted[k - 1])
}

fn sorted_descending(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    sorted
}

fn upper_rank(n: usize, alpha: f64) -> Result<usize> {
    if n == 0 {
        return Err(Error::Config("no replications to take a quantile of".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    // Guard against alpha * n landing a hair above an integer.
    let k = (alpha * n as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(k.min(n))
}

/// Monte Carlo standard error of the upper `alpha` quantile from the order
/// statistics one binomial standard deviation either side of its rank.
pub fn quantile_standard_error(values: &[f64], alpha: f64) -> Result<f64> {
    let n = values.len();
    upper_rank(n, alpha)?;
    let sorted = sorted_descending(values);
    let centre = alpha * n as f64;
    let spread = (n as f64 * alpha * (1.0 - alpha)).sqrt();
    let hi = ((centre - spread).floor().max(1.0) as usize).min(n);
    let lo = ((centre + spread).ceil().max(1.0) as usize).min(n);
    Ok(0.5 * (sorted[hi - 1] - sorted[lo - 1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub alpha: f64,
    pub replications: usize,
    pub seed: u64,
    pub standard_error: f64,
    /// In-control maxima `W_1..W_N` in replication order.
    pub statistics: Vec<f64>,
}

impl CalibrationResult {
    /// Threshold for another `alpha` from the same replications.
    pub fn threshold_for(&self, alpha: f64) -> Result<f64> {
        upper_quantile(&self.statistics, alpha)
    }
}

/// Threshold `c` whose in-control probability of a signal by `t_m` is `alpha`.
pub fn calibrate_threshold(setup: &MonitoringSetup<'_>, alpha: f64, n: usize, seed: u64) -> Result<CalibrationResult> {
    upper_rank(n.max(1), alpha)?;
    if (n as f64) * alpha < 1.0 {
        log::warn!("alpha * N = {} < 1: the threshold is the sample maximum", n as f64 * alpha);
    }
    let statistics = max_statistics(setup, &ShiftScenario::InControl, n, seed)?;
    Ok(CalibrationResult {
        threshold: upper_quantile(&statistics, alpha)?,
        alpha,
        replications: n,
        seed,
        standard_error: quantile_standard_error(&statistics, alpha)?,
        statistics,
    })
}

/// Fraction of maxima strictly above `threshold`.
pub fn exceedance(statistics: &[f64], threshold: f64) -> f64 {
    if statistics.is_empty() {
        return 0.0;
    }
    statistics.iter().filter(|&&w| w > threshold).count() as f64 / statistics.len() as f64
}

/// Binomial standard error of a proportion.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalSummary {
    pub replications: usize,
    pub signals: usize,
    pub proportion: f64,
    pub standard_error: f64,
    /// Mean signal time among runs that signalled.
    pub mean_signal_time: Option<f64>,
}

/// Probability that the chart with threshold `c` signals by `t_m` under `scenario`.
pub fn achieved_signal_probability(
    setup: &MonitoringSetup<'_>,
    threshold: f64,
    scenario: &ShiftScenario,
    m: usize,
    seed: u64,
) -> Result<SignalSummary> {
    if threshold == f64::INFINITY {
        return Ok(SignalSummary {
            replications: m,
            signals: 0,
            proportion: 0.0,
            standard_error: 0.0,
            mean_signal_time: None,
        });
    }
    let config = setup.config(threshold);
    config.validate()?;
    let times = replicate(m, |j, buf| {
        let mut rng = seeding::stream(seed, j);
        let data = simulate_cohort(&setup.cohort, setup.source, setup.truth, setup.table, scenario, &mut rng)?;
        chart_signal_time(&data, setup.chart_model, setup.table, &setup.alternative, &config, buf)
    })?;
    let hit: Vec<f64> = times.into_iter().flatten().collect();
    let proportion = if m == 0 { 0.0 } else { hit.len() as f64 / m as f64 };
    Ok(SignalSummary {
        replications: m,
        signals: hit.len(),
        proportion,
        standard_error: binomial_se(proportion, m),
        mean_signal_time: (!hit.is_empty()).then(|| hit.iter().sum::<f64>() / hit.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::simulate::{ArrivalProcess, CensoringSpec};

    #[test]
    fn quantile_convention() {
        let w: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(upper_quantile(&w, 0.05).unwrap(), 96.0);
        assert_eq!(upper_quantile(&w, 0.01).unwrap(), 100.0);
        assert_eq!(upper_quantile(&w, 0.001).unwrap(), 100.0);
        assert_eq!(exceedance(&w, 96.0), 0.04);
        let w: Vec<f64> = (1..=2000).map(f64::from).collect();
        assert_eq!(upper_quantile(&w, 0.05).unwrap(), 1901.0);
        assert!(upper_quantile(&[], 0.05).is_err());
        assert!(upper_quantile(&w, 1.5).is_err());
    }

    #[test]
    fn identity_alternative_gives_zero_threshold() {
        let model = presets::model();
        let table = presets::life_table();
        let source = presets::covariate_source();
        let setup = MonitoringSetup {
            cohort: CohortSpec {
                arrivals: ArrivalProcess::new(30.0).unwrap(),
                censoring: CensoringSpec::new(presets::CENSOR_RATE).unwrap(),
                horizon: 3.0,
                calendar_origin: presets::CALENDAR_ORIGIN,
            },
            source: &source,
            truth: &model,
            chart_model: &model,
            table: &table,
            alternative: Alternative::proportional(1.0).unwrap(),
            scheme: UpdateScheme::Continuous,
            follow_up_cap: None,
        };
        let r = calibrate_threshold(&setup, 0.05, 20, 1).unwrap();
        assert_eq!(r.threshold, 0.0);
        assert!(r.statistics.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn infinite_threshold_never_signals() {
        let model = presets::model();
        let table = presets::life_table();
        let source = presets::covariate_source();
        let setup = MonitoringSetup {
            cohort: CohortSpec {
                arrivals: ArrivalProcess::new(10.0).unwrap(),
                censoring: CensoringSpec::new(0.0).unwrap(),
                horizon: 1.0,
                calendar_origin: 2010.0,
            },
            source: &source,
            truth: &model,
            chart_model: &model,
            table: &table,
            alternative: Alternative::proportional(2.0).unwrap(),
            scheme: UpdateScheme::Continuous,
            follow_up_cap: None,
        };
        let alt = setup.alternative;
        let s = achieved_signal_probability(
            &setup,
            f64::INFINITY,
            &ShiftScenario::AllFrom { eta: 0.0, alternative: alt },
            10,
            3,
        )
        .unwrap();
        assert_eq!(s.proportion, 0.0);
    }
}
