//! Reference set-up for the simulation studies: a colorectal-cancer style
//! covariate schema with coefficients and proportions, the six-band baseline,
//! a Weibull alternative truth, and a synthetic national life table.

use crate::error::Result;
use crate::excess_model::{
    Baseline, CategoricalVariable, CovariateSchema, ExcessHazardModel, PiecewiseBaseline, WeibullBaseline,
};
use crate::lifetable::{LifeTable, Sex};
use crate::simulate::{AgeSpec, CovariateSource, ParametricCovariates};

/// Default band edges: yearly for five years, then one band to ten years.
pub const CUT_POINTS: [f64; 7] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0];
/// Log baseline levels per band.
pub const LOG_LEVELS: [f64; 6] = [-1.4, -1.6, -1.8, -2.0, -2.1, -3.0];
pub const WEIBULL_SHAPE: f64 = 0.65;
pub const WEIBULL_SCALE: f64 = 0.25;
/// Interim censoring rate per year.
pub const CENSOR_RATE: f64 = 0.000275;
/// Calendar year at monitoring start.
pub const CALENDAR_ORIGIN: f64 = 2010.0;

struct Variable {
    name: &'static str,
    levels: &'static [&'static str],
    /// One coefficient per non-reference level.
    beta: &'static [f64],
    proportions: &'static [f64],
}

const VARIABLES: [Variable; 5] = [
    Variable { name: "sex", levels: &["M", "F"], beta: &[0.005], proportions: &[0.5, 0.5] },
    Variable {
        name: "icd",
        levels: &["0", "1", "2", "3"],
        beta: &[0.5, 0.2, 0.3],
        proportions: &[0.27, 0.44, 0.28, 0.01],
    },
    Variable { name: "morphology", levels: &["adenocarcinoma", "mucinous"], beta: &[-0.05], proportions: &[0.9, 0.1] },
    Variable {
        name: "stage",
        levels: &["distant", "localised", "regional", "unknown"],
        beta: &[-3.0, -1.75, -1.0],
        proportions: &[0.2, 0.2, 0.55, 0.05],
    },
    Variable { name: "surgery", levels: &["0", "1", "2"], beta: &[1.5, 2.5], proportions: &[0.8275, 0.1715, 0.001] },
];

pub fn schema() -> CovariateSchema {
    let vars = VARIABLES
        .iter()
        .map(|v| CategoricalVariable::new(v.name, v.levels, v.levels[0]))
        .collect::<Result<Vec<_>>>()
        .expect("preset schema is valid");
    CovariateSchema::new(vars).expect("preset schema is valid")
}

pub fn coefficients() -> Vec<f64> {
    VARIABLES.iter().flat_map(|v| v.beta.iter().copied()).collect()
}

pub fn piecewise_baseline() -> PiecewiseBaseline {
    PiecewiseBaseline::new(CUT_POINTS.to_vec(), LOG_LEVELS.to_vec()).expect("preset baseline is valid")
}

/// In-control model with the six-band baseline.
pub fn model() -> ExcessHazardModel {
    ExcessHazardModel::new(Baseline::Piecewise(piecewise_baseline()), schema(), coefficients())
        .expect("preset model is valid")
}

/// Same covariate effects with a Weibull baseline.
pub fn weibull_model() -> ExcessHazardModel {
    let w = WeibullBaseline::new(WEIBULL_SHAPE, WEIBULL_SCALE).expect("preset Weibull is valid");
    ExcessHazardModel::new(Baseline::Weibull(w), schema(), coefficients()).expect("preset model is valid")
}

pub fn covariate_source() -> CovariateSource {
    CovariateSource::Parametric(
        ParametricCovariates::new(
            schema(),
            VARIABLES.iter().map(|v| v.proportions.to_vec()).collect(),
            AgeSpec { mean: 75.0, sd: 10.0, min: 50.0, max: 105.0 },
        )
        .expect("preset proportions are valid"),
    )
}

/// Ages of the mortality anchors below.
const ANCHOR_AGES: [f64; 13] = [50.0, 55.0, 60.0, 65.0, 70.0, 75.0, 80.0, 85.0, 90.0, 95.0, 100.0, 105.0, 110.0];
/// Approximate central death rates around 2015 for a high-income Nordic population.
const MALE_RATES: [f64; 13] =
    [0.0030, 0.0048, 0.0073, 0.0115, 0.018, 0.030, 0.053, 0.098, 0.18, 0.31, 0.48, 0.65, 0.80];
const FEMALE_RATES: [f64; 13] =
    [0.0022, 0.0033, 0.0050, 0.0075, 0.0118, 0.0195, 0.036, 0.070, 0.14, 0.26, 0.42, 0.60, 0.75];

fn anchored_rate(anchors: &[f64; 13], age: f64) -> f64 {
    let i = ANCHOR_AGES.partition_point(|&a| a <= age).clamp(1, ANCHOR_AGES.len() - 1);
    let (a0, a1) = (ANCHOR_AGES[i - 1], ANCHOR_AGES[i]);
    let (l0, l1) = (anchors[i - 1].ln(), anchors[i].ln());
    let age = age.min(*ANCHOR_AGES.last().unwrap());
    (l0 + (l1 - l0) * (age - a0) / (a1 - a0)).exp()
}

/// Synthetic population mortality: log-linear interpolation between anchor
/// rates at ages 50 to 110, extrapolated below 50 and flat above 110, with a
/// steady 2% yearly improvement around 2015.
///
/// Ages 0..=130, years 1950..=2060, rates floored at 1e-4 and capped at 1.
pub fn life_table() -> LifeTable {
    LifeTable::from_fn(0..=130, 1950..=2060, |sex, age, year| {
        let anchors = match sex {
            Sex::Male => &MALE_RATES,
            Sex::Female => &FEMALE_RATES,
        };
        let period = (-0.02 * (year as f64 - 2015.0)).exp();
        (anchored_rate(anchors, age as f64 + 0.5) * period).clamp(1e-4, 1.0)
    })
    .expect("preset life table is valid")
}
