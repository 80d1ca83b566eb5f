//! Proportional excess hazard models `h0(t) * exp(beta . x)`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dummy-coded covariate values, in schema order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariateVector(pub Vec<f64>);

impl CovariateVector {
    pub fn zeros(len: usize) -> Self {
        CovariateVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A categorical covariate coded against its reference level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalVariable {
    pub name: String,
    pub levels: Vec<String>,
    pub reference: String,
}

impl CategoricalVariable {
    pub fn new(name: &str, levels: &[&str], reference: &str) -> Result<Self> {
        let var = CategoricalVariable {
            name: name.to_string(),
            levels: levels.iter().map(|s| s.to_string()).collect(),
            reference: reference.to_string(),
        };
        var.validate()?;
        Ok(var)
    }

    fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::Validation(format!("covariate `{}` needs at least two levels", self.name)));
        }
        if !self.levels.contains(&self.reference) {
            return Err(Error::Validation(format!(
                "reference level `{}` is not a level of `{}`",
                self.reference, self.name
            )));
        }
        for (i, level) in self.levels.iter().enumerate() {
            if self.levels[..i].contains(level) {
                return Err(Error::Validation(format!("covariate `{}` lists level `{level}` twice", self.name)));
            }
        }
        Ok(())
    }

    /// Non-reference levels, in coefficient order.
    pub fn contrasts(&self) -> impl Iterator<Item = &str> {
        self.levels.iter().filter(move |l| **l != self.reference).map(String::as_str)
    }

    pub fn dimension(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label.trim())
    }
}

/// Names and coding of the covariates entering the excess hazard.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub variables: Vec<CategoricalVariable>,
}

impl CovariateSchema {
    pub fn new(variables: Vec<CategoricalVariable>) -> Result<Self> {
        for v in &variables {
            v.validate()?;
        }
        Ok(CovariateSchema { variables })
    }

    pub fn dimension(&self) -> usize {
        self.variables.iter().map(CategoricalVariable::dimension).sum()
    }

    /// Column labels `variable=level` for each coefficient.
    pub fn coefficient_names(&self) -> Vec<String> {
        self.variables.iter().flat_map(|v| v.contrasts().map(move |l| format!("{}={}", v.name, l))).collect()
    }

    /// Codes one level index per variable.
    pub fn encode_indices(&self, levels: &[usize]) -> Result<CovariateVector> {
        if levels.len() != self.variables.len() {
            return Err(Error::Validation(format!(
                "expected {} covariate levels, got {}",
                self.variables.len(),
                levels.len()
            )));
        }
        let mut out = Vec::with_capacity(self.dimension());
        for (var, &idx) in self.variables.iter().zip(levels) {
            let label = var
                .levels
                .get(idx)
                .ok_or_else(|| Error::Validation(format!("level index {idx} out of range for `{}`", var.name)))?;
            out.extend(var.contrasts().map(|l| if l == label { 1.0 } else { 0.0 }));
        }
        Ok(CovariateVector(out))
    }

    /// Codes one level label per variable.
    pub fn encode_labels<S: AsRef<str>>(&self, labels: &[S]) -> Result<CovariateVector> {
        if labels.len() != self.variables.len() {
            return Err(Error::Validation(format!(
                "expected {} covariate labels, got {}",
                self.variables.len(),
                labels.len()
            )));
        }
        let indices = self
            .variables
            .iter()
            .zip(labels)
            .map(|(var, label)| {
                var.level_index(label.as_ref())
                    .ok_or_else(|| Error::Validation(format!("`{}` is not a level of `{}`", label.as_ref(), var.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        self.encode_indices(&indices)
    }

    /// Recovers level labels from a coded vector.
    pub fn decode(&self, x: &CovariateVector) -> Result<Vec<String>> {
        if x.len() != self.dimension() {
            return Err(Error::Validation("covariate vector length mismatch".into()));
        }
        let mut offset = 0;
        let mut labels = Vec::with_capacity(self.variables.len());
        for var in &self.variables {
            let block = &x.0[offset..offset + var.dimension()];
            let label = match block.iter().position(|&v| v == 1.0) {
                Some(i) => var.contrasts().nth(i).unwrap().to_string(),
                None => var.reference.clone(),
            };
            labels.push(label);
            offset += var.dimension();
        }
        Ok(labels)
    }
}

/// Baseline hazard `exp(chi_k)` on band `[t_{k-1}, t_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseBaseline {
    cut_points: Vec<f64>,
    log_levels: Vec<f64>,
    levels: Vec<f64>,
    // Cumulative hazard at each cut point.
    cumulative_at_cut: Vec<f64>,
}

impl PiecewiseBaseline {
    pub fn new(cut_points: Vec<f64>, log_levels: Vec<f64>) -> Result<Self> {
        if log_levels.is_empty() || cut_points.len() != log_levels.len() + 1 {
            return Err(Error::Validation(format!(
                "{} cut points need {} log levels, got {}",
                cut_points.len(),
                cut_points.len().saturating_sub(1),
                log_levels.len()
            )));
        }
        if cut_points[0] != 0.0 {
            return Err(Error::Validation("first cut point must be 0".into()));
        }
        if cut_points.windows(2).any(|w| !(w[1] > w[0])) || !cut_points.iter().all(|c| c.is_finite()) {
            return Err(Error::Validation("cut points must be finite and strictly increasing".into()));
        }
        if log_levels.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::Validation("log levels must not be NaN or +inf".into()));
        }
        let levels: Vec<f64> = log_levels.iter().map(|l| l.exp()).collect();
        let mut cumulative_at_cut = Vec::with_capacity(cut_points.len());
        cumulative_at_cut.push(0.0);
        for (k, level) in levels.iter().enumerate() {
            let prev = cumulative_at_cut[k];
            cumulative_at_cut.push(prev + level * (cut_points[k + 1] - cut_points[k]));
        }
        Ok(PiecewiseBaseline { cut_points, log_levels, levels, cumulative_at_cut })
    }

    /// Same levels, with the last band stretched to end at `t_max` (if later).
    ///
    /// This is the only way to evaluate a piecewise model past its last cut.
    pub fn extended_to(&self, t_max: f64) -> Result<Self> {
        let mut cuts = self.cut_points.clone();
        let last = cuts.last_mut().unwrap();
        if t_max > *last {
            *last = t_max;
        }
        PiecewiseBaseline::new(cuts, self.log_levels.clone())
    }

    pub fn cut_points(&self) -> &[f64] {
        &self.cut_points
    }

    pub fn log_levels(&self) -> &[f64] {
        &self.log_levels
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn band_count(&self) -> usize {
        self.levels.len()
    }

    pub fn support_end(&self) -> f64 {
        *self.cut_points.last().unwrap()
    }

    /// Band containing `t`; a time on a cut point belongs to the later band.
    pub fn band_index(&self, t: f64) -> usize {
        let k = self.cut_points.partition_point(|&c| c <= t);
        k.saturating_sub(1).min(self.levels.len() - 1)
    }

    fn check_support(&self, t: f64) -> Result<()> {
        if !(t >= 0.0) || t > self.support_end() {
            return Err(Error::Range(format!("time {t} is outside the baseline support [0, {}]", self.support_end())));
        }
        Ok(())
    }

    pub fn hazard(&self, t: f64) -> Result<f64> {
        self.check_support(t)?;
        Ok(self.levels[self.band_index(t)])
    }

    pub fn cumulative(&self, t: f64) -> Result<f64> {
        self.check_support(t)?;
        let k = self.band_index(t);
        Ok(self.cumulative_at_cut[k] + self.levels[k] * (t - self.cut_points[k]))
    }

    pub fn inverse_cumulative(&self, target: f64) -> Option<f64> {
        if target <= 0.0 {
            return Some(0.0);
        }
        let k = self.cumulative_at_cut.partition_point(|&c| c < target);
        if k == 0 || k >= self.cumulative_at_cut.len() {
            return None;
        }
        // cumulative_at_cut[k-1] < target <= cumulative_at_cut[k], so band k-1
        // has positive level.
        let band = k - 1;
        Some(self.cut_points[band] + (target - self.cumulative_at_cut[band]) / self.levels[band])
    }

    /// Cumulative of `max(0, scale * h0 + shift)` on `[0, t]`.
    pub fn shifted_cumulative(&self, scale: f64, shift: f64, t: f64) -> Result<f64> {
        self.check_support(t)?;
        let mut total = 0.0;
        for (k, level) in self.levels.iter().enumerate() {
            let start = self.cut_points[k];
            if start >= t {
                break;
            }
            let end = self.cut_points[k + 1].min(t);
            total += (scale * level + shift).max(0.0) * (end - start);
        }
        Ok(total)
    }

    /// Inverse of [`Self::shifted_cumulative`]; `None` beyond the support.
    pub fn shifted_inverse(&self, scale: f64, shift: f64, target: f64) -> Option<f64> {
        if target <= 0.0 {
            return Some(0.0);
        }
        let mut acc = 0.0;
        for (k, level) in self.levels.iter().enumerate() {
            let rate = (scale * level + shift).max(0.0);
            let width = self.cut_points[k + 1] - self.cut_points[k];
            if rate > 0.0 && acc + rate * width >= target {
                return Some(self.cut_points[k] + (target - acc) / rate);
            }
            acc += rate * width;
        }
        None
    }
}

/// Weibull baseline `h0(t) = a * b * t^(a - 1)`, `H0(t) = b * t^a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullBaseline {
    pub shape: f64,
    pub scale: f64,
}

impl WeibullBaseline {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite() && scale > 0.0 && scale.is_finite()) {
            return Err(Error::Validation(format!(
                "Weibull shape and scale must be positive, got a = {shape}, b = {scale}"
            )));
        }
        Ok(WeibullBaseline { shape, scale })
    }

    pub fn hazard(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Range(format!("negative time {t}")));
        }
        if t == 0.0 {
            return match self.shape {
                a if a < 1.0 => Err(Error::Range("Weibull hazard with shape < 1 is infinite at t = 0".into())),
                1.0 => Ok(self.scale),
                _ => Ok(0.0),
            };
        }
        Ok(self.shape * self.scale * t.powf(self.shape - 1.0))
    }

    pub fn cumulative(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Range(format!("negative time {t}")));
        }
        Ok(self.scale * t.powf(self.shape))
    }

    pub fn inverse_cumulative(&self, target: f64) -> Option<f64> {
        if target <= 0.0 {
            return Some(0.0);
        }
        Some((target / self.scale).powf(1.0 / self.shape))
    }

    /// Follow-up time at which `scale_factor * h0(t) = level`.
    pub(crate) fn time_at_hazard(&self, scale_factor: f64, level: f64) -> f64 {
        let a = self.shape;
        (level / (scale_factor * a * self.scale)).powf(1.0 / (a - 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    Piecewise(PiecewiseBaseline),
    Weibull(WeibullBaseline),
}

impl Baseline {
    pub fn hazard(&self, t: f64) -> Result<f64> {
        match self {
            Baseline::Piecewise(p) => p.hazard(t),
            Baseline::Weibull(w) => w.hazard(t),
        }
    }

    pub fn cumulative(&self, t: f64) -> Result<f64> {
        match self {
            Baseline::Piecewise(p) => p.cumulative(t),
            Baseline::Weibull(w) => w.cumulative(t),
        }
    }

    pub fn inverse_cumulative(&self, target: f64) -> Option<f64> {
        match self {
            Baseline::Piecewise(p) => p.inverse_cumulative(target),
            Baseline::Weibull(w) => w.inverse_cumulative(target),
        }
    }

    pub fn support_end(&self) -> f64 {
        match self {
            Baseline::Piecewise(p) => p.support_end(),
            Baseline::Weibull(_) => f64::INFINITY,
        }
    }
}

/// In-control excess hazard `h0(t) * exp(beta . x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcessHazardModel {
    baseline: Baseline,
    schema: CovariateSchema,
    coefficients: Vec<f64>,
}

impl ExcessHazardModel {
    pub fn new(baseline: Baseline, schema: CovariateSchema, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != schema.dimension() {
            return Err(Error::Validation(format!(
                "schema has {} coefficients but {} were given",
                schema.dimension(),
                coefficients.len()
            )));
        }
        if coefficients.iter().any(|b| !b.is_finite()) {
            return Err(Error::Validation("coefficients must be finite".into()));
        }
        Ok(ExcessHazardModel { baseline, schema, coefficients })
    }

    pub fn baseline(&self) -> &Baseline {
        &self.baseline
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn support_end(&self) -> f64 {
        self.baseline.support_end()
    }

    /// The same model with a piecewise baseline's last band stretched to `t_max`.
    pub fn with_extended_support(&self, t_max: f64) -> Result<Self> {
        let baseline = match &self.baseline {
            Baseline::Piecewise(p) => Baseline::Piecewise(p.extended_to(t_max)?),
            w @ Baseline::Weibull(_) => w.clone(),
        };
        Ok(ExcessHazardModel { baseline, ..self.clone() })
    }

    pub fn linear_predictor(&self, x: &CovariateVector) -> Result<f64> {
        if x.len() != self.coefficients.len() {
            return Err(Error::Validation(format!(
                "covariate vector has length {}, model expects {}",
                x.len(),
                self.coefficients.len()
            )));
        }
        Ok(x.0.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum())
    }

    pub fn individual(&self, x: &CovariateVector) -> Result<IndividualExcess<'_>> {
        Ok(IndividualExcess { baseline: &self.baseline, scale: self.linear_predictor(x)?.exp() })
    }

    pub fn excess_hazard(&self, x: &CovariateVector, t: f64) -> Result<f64> {
        self.individual(x)?.hazard(t)
    }

    pub fn cumulative_excess_hazard(&self, x: &CovariateVector, t: f64) -> Result<f64> {
        self.individual(x)?.cumulative(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_toml()?.as_bytes())?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut offset = 0;
        let covariates = self
            .schema
            .variables
            .iter()
            .map(|v| {
                let coefs = self.coefficients[offset..offset + v.dimension()].to_vec();
                offset += v.dimension();
                CovariateEntry {
                    name: v.name.clone(),
                    levels: v.levels.clone(),
                    reference: v.reference.clone(),
                    coefficients: coefs,
                }
            })
            .collect();
        let file = ModelFile {
            baseline: match &self.baseline {
                Baseline::Piecewise(p) => {
                    BaselineEntry::Piecewise { cut_points: p.cut_points.clone(), log_levels: p.log_levels.clone() }
                }
                Baseline::Weibull(w) => BaselineEntry::Weibull { shape: w.shape, scale: w.scale },
            },
            covariates,
        };
        toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ModelFile = toml::from_str(text).map_err(|e| Error::Config(format!("model file: {e}")))?;
        let baseline = match file.baseline {
            BaselineEntry::Piecewise { cut_points, log_levels } => {
                Baseline::Piecewise(PiecewiseBaseline::new(cut_points, log_levels)?)
            }
            BaselineEntry::Weibull { shape, scale } => Baseline::Weibull(WeibullBaseline::new(shape, scale)?),
        };
        let mut variables = Vec::new();
        let mut coefficients = Vec::new();
        for entry in file.covariates {
            let var = CategoricalVariable { name: entry.name, levels: entry.levels, reference: entry.reference };
            var.validate()?;
            if entry.coefficients.len() != var.dimension() {
                return Err(Error::Validation(format!(
                    "covariate `{}` has {} non-reference levels but {} coefficients",
                    var.name,
                    var.dimension(),
                    entry.coefficients.len()
                )));
            }
            coefficients.extend(entry.coefficients);
            variables.push(var);
        }
        ExcessHazardModel::new(baseline, CovariateSchema::new(variables)?, coefficients)
    }
}

impl fmt::Display for ExcessHazardModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.baseline {
            Baseline::Piecewise(p) => write!(f, "piecewise baseline, cuts {:?}, chi {:?}", p.cut_points, p.log_levels)?,
            Baseline::Weibull(w) => write!(f, "Weibull baseline, a = {}, b = {}", w.shape, w.scale)?,
        }
        for (name, b) in self.schema.coefficient_names().iter().zip(&self.coefficients) {
            write!(f, "; {name}: {b}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    baseline: BaselineEntry,
    #[serde(default)]
    covariates: Vec<CovariateEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum BaselineEntry {
    Piecewise { cut_points: Vec<f64>, log_levels: Vec<f64> },
    Weibull { shape: f64, scale: f64 },
}

#[derive(Debug, Serialize, Deserialize)]
struct CovariateEntry {
    name: String,
    levels: Vec<String>,
    reference: String,
    coefficients: Vec<f64>,
}

/// One individual's in-control excess hazard, with `exp(beta . x)` folded in.
#[derive(Debug, Clone, Copy)]
pub struct IndividualExcess<'a> {
    pub baseline: &'a Baseline,
    pub scale: f64,
}

impl IndividualExcess<'_> {
    pub fn hazard(&self, t: f64) -> Result<f64> {
        Ok(self.scale * self.baseline.hazard(t)?)
    }

    pub fn cumulative(&self, t: f64) -> Result<f64> {
        Ok(self.scale * self.baseline.cumulative(t)?)
    }

    pub fn inverse_cumulative(&self, target: f64) -> Option<f64> {
        self.baseline.inverse_cumulative(target / self.scale)
    }

    pub fn support_end(&self) -> f64 {
        self.baseline.support_end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn paper_baseline() -> PiecewiseBaseline {
        PiecewiseBaseline::new(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0], vec![-1.4, -1.6, -1.8, -2.0, -2.1, -3.0])
            .unwrap()
    }

    fn no_covariates(baseline: Baseline) -> ExcessHazardModel {
        ExcessHazardModel::new(baseline, CovariateSchema::default(), vec![]).unwrap()
    }

    fn quadrature(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        // Composite midpoint rule.
        let h = (b - a) / n as f64;
        (0..n).map(|i| f(a + (i as f64 + 0.5) * h)).sum::<f64>() * h
    }

    #[test]
    fn piecewise_reference_values() {
        let m = no_covariates(Baseline::Piecewise(paper_baseline()));
        let x = CovariateVector::default();
        assert_abs_diff_eq!(m.excess_hazard(&x, 0.5).unwrap(), (-1.4f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.excess_hazard(&x, 0.5).unwrap(), 0.24660, epsilon = 1e-5);
        let h2 = m.cumulative_excess_hazard(&x, 2.0).unwrap();
        assert_abs_diff_eq!(h2, 0.44850, epsilon = 1e-5);
        let quad = quadrature(|t| m.excess_hazard(&x, t).unwrap(), 0.0, 2.0, 2_000_000);
        assert_abs_diff_eq!(h2, quad, epsilon = 1e-10);
        assert_eq!(m.cumulative_excess_hazard(&x, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn weibull_reference_values() {
        let m = no_covariates(Baseline::Weibull(WeibullBaseline::new(0.65, 0.25).unwrap()));
        let x = CovariateVector::default();
        assert_abs_diff_eq!(m.excess_hazard(&x, 1.0).unwrap(), 0.1625, epsilon = 1e-15);
        let h1 = m.cumulative_excess_hazard(&x, 1.0).unwrap();
        assert_abs_diff_eq!(h1, 0.25, epsilon = 1e-15);
        // The integrand is singular at 0; integrate from 1e-12 after
        // substituting t = u^(1/a) to keep quadrature accurate.
        let a = 0.65;
        let quad = quadrature(
            |u| {
                let t = u.powf(1.0 / a);
                m.excess_hazard(&x, t).unwrap() * t.powf(1.0 - a) / a
            },
            0.0,
            1.0,
            200_000,
        );
        assert_abs_diff_eq!(h1, quad, epsilon = 1e-10);
        assert!(m.excess_hazard(&x, 0.0).is_err());
    }

    #[test]
    fn proportionality_doubles_hazard() {
        let schema = CovariateSchema::new(vec![CategoricalVariable::new("group", &["a", "b"], "a").unwrap()]).unwrap();
        let m = ExcessHazardModel::new(Baseline::Piecewise(paper_baseline()), schema.clone(), vec![2f64.ln()]).unwrap();
        let reference = schema.encode_labels(&["a"]).unwrap();
        let treated = schema.encode_labels(&["b"]).unwrap();
        for t in [0.0, 0.3, 1.0, 4.99, 7.5, 10.0] {
            let r = m.excess_hazard(&reference, t).unwrap();
            assert_abs_diff_eq!(m.excess_hazard(&treated, t).unwrap(), 2.0 * r, epsilon = 1e-15);
        }
    }

    #[test]
    fn piecewise_refuses_extrapolation() {
        let p = paper_baseline();
        assert!(matches!(p.hazard(10.5), Err(Error::Range(_))));
        assert!(p.cumulative(10.0).is_ok());
        let ext = p.extended_to(21.0).unwrap();
        assert_eq!(ext.hazard(20.0).unwrap(), (-3.0f64).exp());
        assert_eq!(ext.band_count(), p.band_count());
    }

    #[test]
    fn band_membership_is_right_continuous() {
        let p = paper_baseline();
        assert_eq!(p.band_index(0.999_999), 0);
        assert_eq!(p.band_index(1.0), 1);
        assert_eq!(p.band_index(10.0), 5);
        assert_eq!(p.hazard(1.0).unwrap(), (-1.6f64).exp());
    }

    #[test]
    fn inverse_cumulative_round_trips() {
        let p = paper_baseline();
        for t in [0.0, 0.2, 1.0, 2.5, 4.999, 5.0, 9.0, 10.0] {
            let h = p.cumulative(t).unwrap();
            assert_abs_diff_eq!(p.inverse_cumulative(h).unwrap(), t, epsilon = 1e-12);
        }
        assert_eq!(p.inverse_cumulative(p.cumulative(10.0).unwrap() + 1e-9), None);
    }

    #[test]
    fn shifted_cumulative_truncates_bandwise() {
        let p = paper_baseline();
        // Every band level is below 1, so a shift of -1 truncates everything.
        assert_eq!(p.shifted_cumulative(1.0, -1.0, 7.0).unwrap(), 0.0);
        let h = p.shifted_cumulative(1.0, 0.005, 2.0).unwrap();
        assert_abs_diff_eq!(h, p.cumulative(2.0).unwrap() + 0.01, epsilon = 1e-15);
        // Truncation only in the later bands.
        let shift = -0.1;
        let h = p.shifted_cumulative(1.0, shift, 10.0).unwrap();
        let expected: f64 =
            p.levels().iter().zip(p.cut_points().windows(2)).map(|(l, w)| (l + shift).max(0.0) * (w[1] - w[0])).sum();
        assert_abs_diff_eq!(h, expected, epsilon = 1e-15);
        let back = p.shifted_inverse(1.0, shift, h * 0.7).unwrap();
        assert_abs_diff_eq!(p.shifted_cumulative(1.0, shift, back).unwrap(), h * 0.7, epsilon = 1e-12);
    }

    #[test]
    fn schema_encoding() {
        let schema = CovariateSchema::new(vec![
            CategoricalVariable::new("sex", &["M", "F"], "M").unwrap(),
            CategoricalVariable::new("stage", &["distant", "local", "regional"], "distant").unwrap(),
        ])
        .unwrap();
        assert_eq!(schema.dimension(), 3);
        assert_eq!(schema.coefficient_names(), vec!["sex=F", "stage=local", "stage=regional"]);
        let x = schema.encode_labels(&["F", "regional"]).unwrap();
        assert_eq!(x.0, vec![1.0, 0.0, 1.0]);
        assert_eq!(schema.decode(&x).unwrap(), vec!["F", "regional"]);
        assert!(schema.encode_labels(&["F", "nowhere"]).is_err());
        assert!(CategoricalVariable::new("v", &["a", "b"], "c").is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let schema = CovariateSchema::new(vec![
            CategoricalVariable::new("sex", &["M", "F"], "M").unwrap(),
            CategoricalVariable::new("icd", &["0", "1", "2"], "0").unwrap(),
        ])
        .unwrap();
        let m =
            ExcessHazardModel::new(Baseline::Piecewise(paper_baseline()), schema, vec![0.1 + 0.2, -1.0 / 3.0, 1e-17])
                .unwrap();
        let text = m.to_toml().unwrap();
        let back = ExcessHazardModel::from_toml(&text).unwrap();
        assert_eq!(back, m);

        let w = no_covariates(Baseline::Weibull(WeibullBaseline::new(0.65, 0.25).unwrap()));
        assert_eq!(ExcessHazardModel::from_toml(&w.to_toml().unwrap()).unwrap(), w);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn model_strategy() -> impl Strategy<Value = (ExcessHazardModel, f64)> {
            (
                prop::collection::vec(0.1f64..3.0, 1..6),
                prop::collection::vec(-4.0f64..0.5, 6),
                -2.0f64..2.0,
                any::<bool>(),
                0.3f64..2.5,
                0.05f64..1.0,
            )
                .prop_map(|(widths, levels, beta, weibull, a, b)| {
                    let mut cuts = vec![0.0];
                    for w in &widths {
                        cuts.push(cuts.last().unwrap() + w);
                    }
                    let baseline = if weibull {
                        Baseline::Weibull(WeibullBaseline::new(a, b).unwrap())
                    } else {
                        Baseline::Piecewise(PiecewiseBaseline::new(cuts, levels[..widths.len()].to_vec()).unwrap())
                    };
                    let schema =
                        CovariateSchema::new(vec![CategoricalVariable::new("g", &["0", "1"], "0").unwrap()]).unwrap();
                    let end = baseline.support_end().min(12.0);
                    (ExcessHazardModel::new(baseline, schema, vec![beta]).unwrap(), end)
                })
        }

        proptest! {
            #[test]
            fn cumulative_derivative_and_proportionality((m, end) in model_strategy(), u in 0.01f64..0.99) {
                let reference = CovariateVector(vec![0.0]);
                let x = CovariateVector(vec![1.0]);
                let t = u * end;
                let scale = m.linear_predictor(&x).unwrap().exp();
                let hx = m.cumulative_excess_hazard(&x, t).unwrap();
                let h0 = m.cumulative_excess_hazard(&reference, t).unwrap();
                prop_assert!((hx - scale * h0).abs() <= 1e-12 * hx.abs().max(1.0));
                prop_assert!(hx >= 0.0);

                let near_cut = match m.baseline() {
                    Baseline::Piecewise(p) => p.cut_points().iter().any(|c| (c - t).abs() < 1e-4),
                    Baseline::Weibull(_) => false,
                };
                if !near_cut {
                    let eps = 1e-7;
                    let fd = (m.cumulative_excess_hazard(&x, t + eps).unwrap() - hx) / eps;
                    let h = m.excess_hazard(&x, t).unwrap();
                    prop_assert!((fd - h).abs() <= 1e-6 * h.max(1.0), "fd {} vs h {}", fd, h);
                }
            }
        }
    }
}
