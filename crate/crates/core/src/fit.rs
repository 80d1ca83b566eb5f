//! Maximum likelihood for the proportional excess hazard model with a
//! piecewise-constant baseline, given known population mortality.
//!
//! The individual log-likelihood is
//! `sum_i d_i log(h_P(T_i) + h_E(T_i)) - H_P(T_i) - H_E(T_i)` with
//! `h_E(t) = exp(chi_k(t) + beta . x)`. It is maximised by damped Newton
//! steps with the analytic gradient and Hessian.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excess_model::{Baseline, CovariateSchema, ExcessHazardModel, PiecewiseBaseline};
use crate::lifetable::LifeTable;
use crate::presets;
use crate::records::PatientRecord;

/// Lower bound on log baseline levels; bands without events are driven here.
pub const LOG_LEVEL_FLOOR: f64 = -20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub cut_points: Vec<f64>,
    /// Convergence when the gradient sup-norm is at most this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FitSpec {
    fn default() -> Self {
        FitSpec { cut_points: presets::CUT_POINTS.to_vec(), tolerance: 1e-6, max_iterations: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: ExcessHazardModel,
    /// Log-likelihood including the population terms.
    pub log_likelihood: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// From the observed information, coefficients first and then log levels.
    pub standard_errors: Vec<f64>,
    /// Bands whose log level sits at [`LOG_LEVEL_FLOOR`].
    pub clamped_bands: Vec<usize>,
    /// Log-likelihood after each accepted step, starting from the initial
    /// point; increments are summed per record.
    pub history: Vec<f64>,
}

impl FitResult {
    pub fn coefficient_standard_errors(&self) -> &[f64] {
        &self.standard_errors[..self.model.coefficients().len()]
    }

    pub fn log_level_standard_errors(&self) -> &[f64] {
        &self.standard_errors[self.model.coefficients().len()..]
    }
}

/// Log-likelihood of `model` on `records`, including the population terms.
///
/// Returns `-inf` when an observed event has zero total hazard.
pub fn log_likelihood(records: &[PatientRecord], model: &ExcessHazardModel, table: &LifeTable) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        let f = r.follow_up;
        let ind = model.individual(&r.covariates)?;
        if r.is_event() {
            let h = table.population_hazard(&r.demographics, f)? + ind.hazard(f)?;
            if !(h > 0.0) {
                return Ok(f64::NEG_INFINITY);
            }
            total += h.ln();
        }
        total -= table.cumulative_population_hazard(&r.demographics, f)? + ind.cumulative(f)?;
    }
    Ok(total)
}

/// Analytic gradient of [`log_likelihood`] with respect to the coefficients
/// and then the log baseline levels of a piecewise `model`.
pub fn log_likelihood_gradient(
    records: &[PatientRecord],
    model: &ExcessHazardModel,
    table: &LifeTable,
) -> Result<Vec<f64>> {
    let Baseline::Piecewise(p) = model.baseline() else {
        return Err(Error::Config("the gradient is defined for piecewise baselines only".into()));
    };
    let prep = prepare(records, table, model.schema(), p.cut_points())?;
    let theta = DVector::from_iterator(prep.dim(), model.coefficients().iter().chain(p.log_levels()).copied());
    Ok(prep.evaluate(&theta).gradient.iter().copied().collect())
}

/// Per-record quantities that do not depend on the parameters.
struct Prepared {
    dim_beta: usize,
    bands: usize,
    x: Vec<Vec<f64>>,
    exposure: Vec<Vec<f64>>,
    /// `(band, population hazard)` at an observed event.
    event: Vec<Option<(usize, f64)>>,
    population_cumulative: f64,
}

fn band_of(cuts: &[f64], t: f64) -> usize {
    (cuts.partition_point(|&c| c <= t).max(1) - 1).min(cuts.len() - 2)
}

fn prepare(records: &[PatientRecord], table: &LifeTable, schema: &CovariateSchema, cuts: &[f64]) -> Result<Prepared> {
    let dim_beta = schema.dimension();
    let bands = cuts.len() - 1;
    let end = cuts[bands];
    let mut prep = Prepared {
        dim_beta,
        bands,
        x: Vec::with_capacity(records.len()),
        exposure: Vec::with_capacity(records.len()),
        event: Vec::with_capacity(records.len()),
        population_cumulative: 0.0,
    };
    let mut band_time = vec![0.0; bands];
    for (i, r) in records.iter().enumerate() {
        r.validate()?;
        if r.covariates.len() != dim_beta {
            return Err(Error::Validation(format!(
                "record {} has {} covariate columns, schema has {dim_beta}",
                i + 1,
                r.covariates.len()
            )));
        }
        let f = r.follow_up;
        if f > end {
            return Err(Error::Config(format!(
                "record {} has follow-up {f} beyond the last cut point {end}; extend the bands",
                i + 1
            )));
        }
        let e: Vec<f64> = cuts.windows(2).map(|w| (f.min(w[1]) - w[0]).max(0.0)).collect();
        for (acc, v) in band_time.iter_mut().zip(&e) {
            *acc += v;
        }
        prep.event.push(if r.is_event() {
            Some((band_of(cuts, f), table.population_hazard(&r.demographics, f)?))
        } else {
            None
        });
        prep.population_cumulative += table.cumulative_population_hazard(&r.demographics, f)?;
        prep.x.push(r.covariates.0.clone());
        prep.exposure.push(e);
    }
    let empty: Vec<String> = band_time
        .iter()
        .enumerate()
        .filter(|(_, &t)| t <= 0.0)
        .map(|(k, _)| format!("[{}, {})", cuts[k], cuts[k + 1]))
        .collect();
    if !empty.is_empty() {
        return Err(Error::Config(format!("no person-time in band(s) {}", empty.join(", "))));
    }
    if prep.event.iter().all(Option::is_none) {
        return Err(Error::Config("baseline data contain no events".into()));
    }
    Ok(prep)
}

struct Evaluation {
    value: f64,
    gradient: DVector<f64>,
    hessian: DMatrix<f64>,
}

impl Prepared {
    fn dim(&self) -> usize {
        self.dim_beta + self.bands
    }

    fn value(&self, theta: &DVector<f64>) -> f64 {
        let (beta, chi) = (theta.rows(0, self.dim_beta), theta.rows(self.dim_beta, self.bands));
        let mut total = -self.population_cumulative;
        for i in 0..self.x.len() {
            let eta: f64 = self.x[i].iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            if let Some((k, hp)) = self.event[i] {
                let h = hp + (chi[k] + eta).exp();
                if !(h > 0.0) {
                    return f64::NEG_INFINITY;
                }
                total += h.ln();
            }
            let s = eta.exp();
            total -= s * self.exposure[i].iter().zip(chi.iter()).map(|(e, c)| e * c.exp()).sum::<f64>();
        }
        total
    }

    /// `value(new) - value(old)`, summed per record so that changes far below
    /// the rounding error of the total are still resolved.
    fn change(&self, old: &DVector<f64>, new: &DVector<f64>) -> f64 {
        let p = self.dim_beta;
        let mut total = 0.0;
        for i in 0..self.x.len() {
            let x = &self.x[i];
            let eta_old: f64 = x.iter().zip(old.rows(0, p).iter()).map(|(a, b)| a * b).sum();
            let eta_new: f64 = x.iter().zip(new.rows(0, p).iter()).map(|(a, b)| a * b).sum();
            let d_eta = eta_new - eta_old;
            let mut d = 0.0;
            for k in 0..self.bands {
                let e = self.exposure[i][k];
                if e > 0.0 {
                    let c_old = old[p + k];
                    d -= e * (c_old + eta_old).exp() * (new[p + k] - c_old + d_eta).exp_m1();
                }
            }
            if let Some((k, hp)) = self.event[i] {
                let c_old = old[p + k];
                let he_old = (c_old + eta_old).exp();
                let dh = he_old * (new[p + k] - c_old + d_eta).exp_m1();
                d += (dh / (hp + he_old)).ln_1p();
            }
            total += d;
        }
        total
    }

    fn evaluate(&self, theta: &DVector<f64>) -> Evaluation {
        let p = self.dim_beta;
        let d = self.dim();
        let chi: Vec<f64> = theta.rows(p, self.bands).iter().map(|c| c.exp()).collect();
        let mut value = -self.population_cumulative;
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        let mut m = vec![0.0; self.bands];
        for i in 0..self.x.len() {
            let x = &self.x[i];
            let eta: f64 = x.iter().zip(theta.rows(0, p).iter()).map(|(a, b)| a * b).sum();
            let s = eta.exp();
            // Exposure part: -sum_k m_k with m_k = exp(chi_k + eta) e_k.
            let mut mu = 0.0;
            for k in 0..self.bands {
                m[k] = s * chi[k] * self.exposure[i][k];
                mu += m[k];
            }
            value -= mu;
            for a in 0..p {
                if x[a] == 0.0 {
                    continue;
                }
                g[a] -= mu * x[a];
                for b in 0..p {
                    h[(a, b)] -= mu * x[a] * x[b];
                }
                for k in 0..self.bands {
                    h[(a, p + k)] -= m[k] * x[a];
                    h[(p + k, a)] -= m[k] * x[a];
                }
            }
            for k in 0..self.bands {
                g[p + k] -= m[k];
                h[(p + k, p + k)] -= m[k];
            }
            // Event part: log(h_P + h_E) with derivative w v, w = h_E / (h_P + h_E).
            if let Some((k, hp)) = self.event[i] {
                let he = chi[k] * s;
                value += (hp + he).ln();
                let w = he / (hp + he);
                let c = w * (1.0 - w);
                for a in 0..p {
                    if x[a] == 0.0 {
                        continue;
                    }
                    g[a] += w * x[a];
                    for b in 0..p {
                        h[(a, b)] += c * x[a] * x[b];
                    }
                    h[(a, p + k)] += c * x[a];
                    h[(p + k, a)] += c * x[a];
                }
                g[p + k] += w;
                h[(p + k, p + k)] += c;
            }
        }
        Evaluation { value, gradient: g, hessian: h }
    }
}

/// Gradient with the components pushing clamped log levels further down removed.
fn projected_gradient(prep: &Prepared, theta: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
    let mut g = g.clone();
    for k in 0..prep.bands {
        let j = prep.dim_beta + k;
        if theta[j] <= LOG_LEVEL_FLOOR && g[j] < 0.0 {
            g[j] = 0.0;
        }
    }
    g
}

/// Fits `(beta, chi)` to `records`, coded with `schema`.
pub fn fit_excess_model(
    records: &[PatientRecord],
    table: &LifeTable,
    schema: &CovariateSchema,
    spec: &FitSpec,
) -> Result<FitResult> {
    // Validates the cut points.
    PiecewiseBaseline::new(spec.cut_points.clone(), vec![0.0; spec.cut_points.len().saturating_sub(1)])?;
    if !(spec.tolerance > 0.0) || spec.max_iterations == 0 {
        return Err(Error::Config("fit tolerance must be positive and max_iterations at least 1".into()));
    }
    let prep = prepare(records, table, schema, &spec.cut_points)?;
    let p = prep.dim_beta;
    let d = prep.dim();

    let events = prep.event.iter().filter(|e| e.is_some()).count() as f64;
    let person_time: f64 = prep.exposure.iter().flatten().sum();
    let mut band_events = vec![0usize; prep.bands];
    for (k, _) in prep.event.iter().flatten() {
        band_events[*k] += 1;
    }
    let mut theta = DVector::zeros(d);
    for k in 0..prep.bands {
        // Without events in a band its likelihood increases without bound as
        // the level goes to zero, so start those at the floor.
        theta[p + k] =
            if band_events[k] == 0 { LOG_LEVEL_FLOOR } else { (events / person_time).ln().max(LOG_LEVEL_FLOOR) };
    }

    let mut eval = prep.evaluate(&theta);
    let mut history = vec![eval.value];
    let mut lambda = 0.0f64;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < spec.max_iterations {
        let g = projected_gradient(&prep, &theta, &eval.gradient);
        if g.amax() <= spec.tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        // Coordinates held at the floor stay out of the step.
        let free: Vec<usize> =
            (0..d).filter(|&j| !(j >= p && theta[j] <= LOG_LEVEL_FLOOR && eval.gradient[j] <= 0.0)).collect();
        let info = DMatrix::from_fn(free.len(), free.len(), |a, b| -eval.hessian[(free[a], free[b])]);
        let g_free = DVector::from_iterator(free.len(), free.iter().map(|&j| g[j]));
        let scale: Vec<f64> = (0..free.len()).map(|j| info[(j, j)].abs().max(1e-12)).collect();
        let mut accepted = false;
        for _ in 0..60 {
            let mut a = info.clone();
            for j in 0..free.len() {
                a[(j, j)] += lambda * scale[j];
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&g_free),
                None => {
                    lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
                    continue;
                }
            };
            let mut candidate = theta.clone();
            for (a, &j) in free.iter().enumerate() {
                candidate[j] += step[a];
            }
            for k in 0..prep.bands {
                candidate[p + k] = candidate[p + k].max(LOG_LEVEL_FLOOR);
            }
            let value = prep.value(&candidate);
            let change = prep.change(&theta, &candidate);
            if value.is_finite() && change >= 0.0 {
                theta = candidate;
                eval = prep.evaluate(&theta);
                history.push(history[history.len() - 1] + change);
                lambda = if lambda <= 1e-6 { 0.0 } else { lambda / 10.0 };
                accepted = true;
                break;
            }
            lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
        }
        if !accepted {
            break;
        }
    }
    let g = projected_gradient(&prep, &theta, &eval.gradient);
    let gradient_norm = g.amax();
    converged |= gradient_norm <= spec.tolerance;
    if !converged {
        log::warn!("fit stopped after {iterations} iterations with gradient norm {gradient_norm:e}");
    }

    let clamped_bands: Vec<usize> = (0..prep.bands).filter(|&k| theta[p + k] <= LOG_LEVEL_FLOOR).collect();
    let standard_errors = standard_errors(&eval.hessian, &clamped_bands, p);
    let baseline =
        PiecewiseBaseline::new(spec.cut_points.clone(), theta.rows(p, prep.bands).iter().copied().collect())?;
    let model = ExcessHazardModel::new(
        Baseline::Piecewise(baseline),
        schema.clone(),
        theta.rows(0, p).iter().copied().collect(),
    )?;
    Ok(FitResult {
        model,
        log_likelihood: eval.value,
        gradient_norm,
        converged,
        iterations,
        standard_errors,
        clamped_bands,
        history,
    })
}

/// Square roots of the diagonal of the inverse observed information, with
/// clamped bands left out of the inversion and reported as infinite.
fn standard_errors(hessian: &DMatrix<f64>, clamped: &[usize], p: usize) -> Vec<f64> {
    let d = hessian.nrows();
    let free: Vec<usize> = (0..d).filter(|j| *j < p || !clamped.contains(&(j - p))).collect();
    let info = DMatrix::from_fn(free.len(), free.len(), |a, b| -hessian[(free[a], free[b])]);
    let mut se = vec![f64::INFINITY; d];
    if let Some(inv) = info.try_inverse() {
        for (a, &j) in free.iter().enumerate() {
            let v = inv[(a, a)];
            se[j] = if v > 0.0 { v.sqrt() } else { f64::NAN };
        }
    }
    se
}
