//! Synthetic monitoring data: Poisson arrivals, covariates, event times from
//! the population and excess hazards, censoring and shift scenarios.
//!
//! Each patient consumes random numbers in a fixed order (covariates, excess
//! event draw, population event draw, censoring draw) whatever the scenario,
//! so two scenarios run from the same seed share every draw.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Exp1, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::alternatives::Alternative;
use crate::error::{Error, Result};
use crate::excess_model::{
    Baseline, CovariateSchema, CovariateVector, ExcessHazardModel, IndividualExcess, PiecewiseBaseline, WeibullBaseline,
};
use crate::lifetable::{Demographics, LifeTable, Sex};
use crate::records::{EventStatus, PatientRecord};

/// Homogeneous Poisson arrivals, `rate` patients per year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalProcess {
    pub rate: f64,
}

impl ArrivalProcess {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::Config(format!("arrival rate must be finite and >= 0, got {rate}")));
        }
        Ok(ArrivalProcess { rate })
    }
}

/// Sorted arrival times in `[0, t_m]`.
pub fn sample_arrivals<R: Rng + ?Sized>(process: &ArrivalProcess, t_m: f64, rng: &mut R) -> Vec<f64> {
    let mean = process.rate * t_m;
    if !(mean > 0.0) {
        return Vec::new();
    }
    let n = Poisson::new(mean).expect("positive finite mean").sample(rng) as usize;
    let mut times: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * t_m).collect();
    times.sort_unstable_by(f64::total_cmp);
    times
}

/// Exponential interim censoring, `rate` per year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CensoringSpec {
    pub rate: f64,
}

impl CensoringSpec {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::Config(format!("censoring rate must be finite and >= 0, got {rate}")));
        }
        Ok(CensoringSpec { rate })
    }

    /// Always consumes one draw, even when the rate is zero.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let e: f64 = rng.sample(Exp1);
        if self.rate > 0.0 {
            e / self.rate
        } else {
            f64::INFINITY
        }
    }
}

/// Interim censoring rate estimated from data observed until `window_end`
/// (calendar years since the data's own origin): censorings that happen
/// before the administrative cut-off, per person-year.
pub fn estimate_censoring_rate(records: &[PatientRecord], window_end: f64) -> f64 {
    let mut interim = 0usize;
    let mut exposure = 0.0;
    for r in records {
        exposure += r.follow_up;
        if !r.is_event() && r.arrival + r.follow_up < window_end - 1e-9 {
            interim += 1;
        }
    }
    if exposure > 0.0 {
        interim as f64 / exposure
    } else {
        0.0
    }
}

/// Normal age distribution truncated to `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeSpec {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

impl AgeSpec {
    fn sample<R: Rng + ?Sized>(&self, normal: &Normal<f64>, rng: &mut R) -> f64 {
        loop {
            let a = normal.sample(rng);
            if (self.min..=self.max).contains(&a) {
                return a;
            }
        }
    }
}

/// Independent categorical covariates plus a truncated-normal entry age.
///
/// A schema variable called `sex` also determines the demographic sex; its
/// levels must be `M` and `F`.
#[derive(Debug, Clone)]
pub struct ParametricCovariates {
    schema: CovariateSchema,
    proportions: Vec<Vec<f64>>,
    samplers: Vec<WeightedIndex<f64>>,
    age: AgeSpec,
    normal: Normal<f64>,
    sex_variable: Option<(usize, Vec<Sex>)>,
    female_share: f64,
}

impl ParametricCovariates {
    pub fn new(schema: CovariateSchema, proportions: Vec<Vec<f64>>, age: AgeSpec) -> Result<Self> {
        if proportions.len() != schema.variables.len() {
            return Err(Error::Config(format!(
                "{} proportion vectors for {} covariates",
                proportions.len(),
                schema.variables.len()
            )));
        }
        let mut samplers = Vec::with_capacity(proportions.len());
        for (v, p) in schema.variables.iter().zip(&proportions) {
            if p.len() != v.levels.len() {
                return Err(Error::Config(format!(
                    "covariate `{}` has {} levels but {} proportions",
                    v.name,
                    v.levels.len(),
                    p.len()
                )));
            }
            samplers
                .push(WeightedIndex::new(p).map_err(|e| Error::Config(format!("proportions for `{}`: {e}", v.name)))?);
        }
        if !(age.sd > 0.0 && age.min < age.max && age.min >= 0.0) {
            return Err(Error::Config(format!("invalid age distribution {age:?}")));
        }
        let normal = Normal::new(age.mean, age.sd).map_err(|e| Error::Config(e.to_string()))?;
        let sex_variable = match schema.variables.iter().position(|v| v.name == "sex") {
            Some(i) => {
                let sexes = schema.variables[i]
                    .levels
                    .iter()
                    .map(|l| l.parse::<Sex>())
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::Config(format!("covariate `sex`: {e}")))?;
                Some((i, sexes))
            }
            None => None,
        };
        Ok(ParametricCovariates { schema, proportions, samplers, age, normal, sex_variable, female_share: 0.5 })
    }

    /// Share of women when sex is not itself a covariate (default one half).
    pub fn with_female_share(mut self, share: f64) -> Self {
        self.female_share = share;
        self
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn proportions(&self) -> &[Vec<f64>] {
        &self.proportions
    }

    pub fn age(&self) -> AgeSpec {
        self.age
    }
}

/// Patients' `(sex, entry age, covariates)` to resample with replacement.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapPool {
    entries: Vec<(Sex, f64, CovariateVector)>,
}

impl BootstrapPool {
    pub fn from_records(records: &[PatientRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Config("bootstrap pool is empty".into()));
        }
        Ok(BootstrapPool {
            entries: records
                .iter()
                .map(|r| (r.demographics.sex, r.demographics.age_at_entry, r.covariates.clone()))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub enum CovariateSource {
    Parametric(ParametricCovariates),
    Bootstrap(BootstrapPool),
}

impl CovariateSource {
    pub fn bootstrap(records: &[PatientRecord]) -> Result<Self> {
        BootstrapPool::from_records(records).map(CovariateSource::Bootstrap)
    }

    /// Largest possible entry age.
    pub fn max_age(&self) -> f64 {
        match self {
            CovariateSource::Parametric(p) => p.age.max,
            CovariateSource::Bootstrap(b) => b.entries.iter().map(|e| e.1).fold(0.0, f64::max),
        }
    }
}

/// Draws demographics and covariates for a patient entering at `entry_calendar_time`.
pub fn sample_covariates<R: Rng + ?Sized>(
    source: &CovariateSource,
    entry_calendar_time: f64,
    rng: &mut R,
) -> Result<(Demographics, CovariateVector)> {
    match source {
        CovariateSource::Parametric(p) => {
            let mut levels = [0usize; 16];
            let levels = if p.samplers.len() <= levels.len() {
                &mut levels[..p.samplers.len()]
            } else {
                return Err(Error::Config("at most 16 categorical covariates are supported".into()));
            };
            for (slot, sampler) in levels.iter_mut().zip(&p.samplers) {
                *slot = sampler.sample(rng);
            }
            let sex = match &p.sex_variable {
                Some((i, sexes)) => sexes[levels[*i]],
                None if rng.random::<f64>() < p.female_share => Sex::Female,
                None => Sex::Male,
            };
            let age = p.age.sample(&p.normal, rng);
            let x = p.schema.encode_indices(levels)?;
            Ok((Demographics::new(sex, age, entry_calendar_time)?, x))
        }
        CovariateSource::Bootstrap(pool) => {
            if pool.entries.is_empty() {
                return Err(Error::Config("bootstrap pool is empty".into()));
            }
            let (sex, age, x) = &pool.entries[rng.random_range(0..pool.entries.len())];
            Ok((Demographics::new(*sex, *age, entry_calendar_time)?, x.clone()))
        }
    }
}

/// A cumulative hazard that can be inverted: `inf{t : H(t) >= target}`, or
/// `None` when the target is not reached within the hazard's support.
pub trait CumulativeHazard {
    fn inverse_cumulative(&self, target: f64) -> Option<f64>;
}

impl CumulativeHazard for PiecewiseBaseline {
    fn inverse_cumulative(&self, target: f64) -> Option<f64> {
        PiecewiseBaseline::inverse_cumulative(self, target)
    }
}

impl CumulativeHazard for WeibullBaseline {
    fn inverse_cumulative(&self, target: f64) -> Option<f64> {
        WeibullBaseline::inverse_cumulative(self, target)
    }
}

impl CumulativeHazard for Baseline {
    fn inverse_cumulative(&self, target: f64) -> Option<f64> {
        Baseline::inverse_cumulative(self, target)
    }
}

impl CumulativeHazard for IndividualExcess<'_> {
    fn inverse_cumulative(&self, target: f64) -> Option<f64> {
        IndividualExcess::inverse_cumulative(self, target)
    }
}

/// Population hazard along one individual's Lexis line, searched up to `limit`.
#[derive(Debug, Clone, Copy)]
pub struct PopulationTrajectory<'a> {
    pub table: &'a LifeTable,
    pub demographics: &'a Demographics,
    pub limit: f64,
}

impl CumulativeHazard for PopulationTrajectory<'_> {
    fn inverse_cumulative(&self, target: f64) -> Option<f64> {
        self.table.inverse_cumulative(self.demographics, target, self.limit)
    }
}

/// Excess hazard that follows the in-control model until follow-up time
/// `switch` and the alternative afterwards, with a continuous cumulative
/// hazard: `H(u) = H0(u)` for `u <= s`, `H0(s) + H1(u) - H1(s)` beyond.
#[derive(Debug, Clone, Copy)]
pub struct SplicedExcess<'a> {
    pub individual: IndividualExcess<'a>,
    pub alternative: Alternative,
    /// Follow-up time of the switch; `f64::INFINITY` never switches.
    pub switch: f64,
}

impl SplicedExcess<'_> {
    pub fn cumulative(&self, u: f64) -> Result<f64> {
        let ind = &self.individual;
        if u <= self.switch {
            return ind.cumulative(u);
        }
        let s = self.switch;
        Ok(ind.cumulative(s)? + self.alternative.out_of_control_cumulative(ind, u)?
            - self.alternative.out_of_control_cumulative(ind, s)?)
    }
}

impl CumulativeHazard for SplicedExcess<'_> {
    fn inverse_cumulative(&self, target: f64) -> Option<f64> {
        let ind = &self.individual;
        let end = ind.support_end();
        if self.switch >= end {
            return ind.inverse_cumulative(target);
        }
        let s = self.switch;
        let h0s = ind.cumulative(s).ok()?;
        if target <= h0s {
            return ind.inverse_cumulative(target);
        }
        let h1s = self.alternative.out_of_control_cumulative(ind, s).ok()?;
        self.alternative.inverse_out_of_control_cumulative(ind, target - h0s + h1s).map(|u| u.max(s))
    }
}

/// Inverse-transform draw; `+inf` when the hazard never accumulates the draw.
pub fn sample_event_time<H: CumulativeHazard + ?Sized, R: Rng + ?Sized>(hazard: &H, rng: &mut R) -> f64 {
    let e: f64 = rng.sample(Exp1);
    hazard.inverse_cumulative(e).unwrap_or(f64::INFINITY)
}

/// Which patients experience the out-of-control excess hazard, and from when.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftScenario {
    InControl,
    /// Every patient switches at calendar time `eta` (years since start).
    AllFrom {
        eta: f64,
        alternative: Alternative,
    },
    /// Only patients arriving after `eta_star` follow the alternative.
    NewArrivalsFrom {
        eta_star: f64,
        alternative: Alternative,
    },
}

impl ShiftScenario {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ShiftScenario::InControl => Ok(()),
            ShiftScenario::AllFrom { eta: t, alternative }
            | ShiftScenario::NewArrivalsFrom { eta_star: t, alternative } => {
                if !(t >= 0.0) {
                    return Err(Error::Config(format!("shift time must be >= 0, got {t}")));
                }
                alternative.validated().map(|_| ())
            }
        }
    }

    /// Follow-up time at which a patient arriving at `arrival` switches.
    pub fn switch_time(&self, arrival: f64) -> f64 {
        match *self {
            ShiftScenario::InControl => f64::INFINITY,
            ShiftScenario::AllFrom { eta, .. } => (eta - arrival).max(0.0),
            ShiftScenario::NewArrivalsFrom { eta_star, .. } if arrival > eta_star => 0.0,
            ShiftScenario::NewArrivalsFrom { .. } => f64::INFINITY,
        }
    }

    pub fn alternative(&self) -> Alternative {
        match *self {
            ShiftScenario::InControl => Alternative::Proportional { rho: 1.0 },
            ShiftScenario::AllFrom { alternative, .. } | ShiftScenario::NewArrivalsFrom { alternative, .. } => {
                alternative
            }
        }
    }

    /// Parses `in_control`, `all_from:<eta>` or `new_from:<eta_star>`.
    pub fn parse(text: &str, alternative: Alternative) -> Result<Self> {
        let bad = || Error::Config(format!("scenario `{text}` is not in_control, all_from:<eta> or new_from:<eta>"));
        let scenario = match text.trim().split_once(':') {
            None if text.trim() == "in_control" => ShiftScenario::InControl,
            Some(("all_from", v)) => ShiftScenario::AllFrom { eta: v.parse().map_err(|_| bad())?, alternative },
            Some(("new_from", v)) => {
                ShiftScenario::NewArrivalsFrom { eta_star: v.parse().map_err(|_| bad())?, alternative }
            }
            _ => return Err(bad()),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn label(&self) -> String {
        match self {
            ShiftScenario::InControl => "in_control".into(),
            ShiftScenario::AllFrom { eta, .. } => format!("all_from:{eta}"),
            ShiftScenario::NewArrivalsFrom { eta_star, .. } => format!("new_from:{eta_star}"),
        }
    }
}

/// Arrival, censoring and horizon settings for one simulated data set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub arrivals: ArrivalProcess,
    pub censoring: CensoringSpec,
    /// Monitoring horizon `t_m`: administrative censoring at `t_m - B`.
    pub horizon: f64,
    /// Calendar year at time zero.
    pub calendar_origin: f64,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        ArrivalProcess::new(self.arrivals.rate)?;
        CensoringSpec::new(self.censoring.rate)?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !self.calendar_origin.is_finite() {
            return Err(Error::Config("calendar origin must be finite".into()));
        }
        Ok(())
    }
}

/// Fails early when the life table cannot serve every patient in the cohort.
fn check_table_coverage(
    table: &LifeTable,
    spec: &CohortSpec,
    source: &CovariateSource,
    max_follow_up: f64,
) -> Result<()> {
    let first = spec.calendar_origin.floor() as i64;
    let last = (spec.calendar_origin + spec.horizon).floor() as i64;
    let years = table.year_span();
    if first < *years.start() || last > *years.end() {
        return Err(Error::Config(format!(
            "life table years {}..={} do not cover the simulated calendar period {first}..={last}",
            years.start(),
            years.end()
        )));
    }
    let oldest = (source.max_age() + spec.horizon.min(max_follow_up)).floor() as i64;
    if oldest > *table.age_span().end() {
        return Err(Error::Config(format!(
            "life table ages end at {} but simulated patients can reach age {oldest}",
            table.age_span().end()
        )));
    }
    Ok(())
}

/// Simulates one monitoring data set under `scenario`.
///
/// `model` is the truth generating excess deaths. Patients are censored at
/// the horizon and at an independent exponential interim time; the recorded
/// status does not reveal the cause of death.
pub fn simulate_cohort<R: Rng + ?Sized>(
    spec: &CohortSpec,
    source: &CovariateSource,
    model: &ExcessHazardModel,
    table: &LifeTable,
    scenario: &ShiftScenario,
    rng: &mut R,
) -> Result<Vec<PatientRecord>> {
    spec.validate()?;
    scenario.validate()?;
    // Follow-up never runs past the end of the excess hazard's support.
    let support = model.support_end();
    check_table_coverage(table, spec, source, support)?;
    let arrivals = sample_arrivals(&spec.arrivals, spec.horizon, rng);
    let alternative = scenario.alternative();
    let mut records = Vec::with_capacity(arrivals.len());
    let mut truncated = 0usize;
    for b in arrivals {
        let (z, x) = sample_covariates(source, spec.calendar_origin + b, rng)?;
        let admin = spec.horizon - b;
        let search = admin.min(support);
        let excess = SplicedExcess { individual: model.individual(&x)?, alternative, switch: scenario.switch_time(b) };
        let t_e = sample_event_time(&excess, rng);
        let t_p = sample_event_time(&PopulationTrajectory { table, demographics: &z, limit: search }, rng);
        let c = spec.censoring.sample(rng).min(admin);
        let t_event = t_e.min(t_p);
        let (mut follow_up, mut status) =
            if t_event <= c { (t_event, EventStatus::Event) } else { (c, EventStatus::Censored) };
        if follow_up > support {
            truncated += 1;
            follow_up = support;
            status = EventStatus::Censored;
        }
        records.push(PatientRecord { arrival: b, demographics: z, covariates: x, follow_up, status });
    }
    if truncated > 0 {
        log::warn!("{truncated} patients censored where the excess hazard's support ends ({support} years)");
    }
    Ok(records)
}
