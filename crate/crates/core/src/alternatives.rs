//! Out-of-control excess hazards and their log-likelihood-ratio contributions.
//!
//! Each alternative transforms the in-control excess hazard `h_E0`:
//!
//! * proportional: `rho * h_E0(t)`
//! * additive: `max(0, h_E0(t) + gamma)`
//! * accelerated time: cumulative `H_E0(k t)`, hazard `k h_E0(k t)`
//!
//! For piecewise-constant baselines every quantity here has a closed form, and
//! the drift of the likelihood ratio is constant between a small set of
//! breakpoints, which is what makes exact chart paths possible.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excess_model::{Baseline, CovariateVector, ExcessHazardModel, IndividualExcess};
use crate::lifetable::{Demographics, LifeTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Alternative {
    Proportional { rho: f64 },
    Additive { gamma: f64 },
    AcceleratedTime { k: f64 },
}

impl Alternative {
    pub fn proportional(rho: f64) -> Result<Self> {
        Alternative::Proportional { rho }.validated()
    }

    pub fn additive(gamma: f64) -> Result<Self> {
        Alternative::Additive { gamma }.validated()
    }

    pub fn accelerated_time(k: f64) -> Result<Self> {
        Alternative::AcceleratedTime { k }.validated()
    }

    /// Builds an alternative from a kind name (`proportional`, `additive`,
    /// `accelerated`) and its parameter.
    pub fn from_kind(kind: &str, parameter: f64) -> Result<Self> {
        match kind.trim().to_ascii_lowercase().as_str() {
            "proportional" | "rho" => Self::proportional(parameter),
            "additive" | "gamma" => Self::additive(parameter),
            "accelerated" | "accelerated_time" | "acc" | "k" => Self::accelerated_time(parameter),
            other => Err(Error::Config(format!(
                "unknown alternative `{other}` (expected proportional, additive or accelerated)"
            ))),
        }
    }

    pub fn validated(self) -> Result<Self> {
        let ok = match self {
            Alternative::Proportional { rho } => rho > 0.0 && rho.is_finite(),
            Alternative::Additive { gamma } => gamma.is_finite(),
            Alternative::AcceleratedTime { k } => k > 0.0 && k.is_finite(),
        };
        if ok {
            Ok(self)
        } else {
            Err(Error::Config(format!("invalid alternative parameter: {self}")))
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Alternative::Proportional { .. } => "proportional",
            Alternative::Additive { .. } => "additive",
            Alternative::AcceleratedTime { .. } => "accelerated",
        }
    }

    pub fn parameter(&self) -> f64 {
        match *self {
            Alternative::Proportional { rho } => rho,
            Alternative::Additive { gamma } => gamma,
            Alternative::AcceleratedTime { k } => k,
        }
    }

    /// The same kind of alternative with a different parameter.
    pub fn with_parameter(&self, parameter: f64) -> Result<Self> {
        Self::from_kind(self.kind(), parameter)
    }

    /// `rho = 1`, `gamma = 0` or `k = 1`: the out-of-control model equals the in-control one.
    pub fn is_degenerate(&self) -> bool {
        match *self {
            Alternative::Proportional { rho } => rho == 1.0,
            Alternative::Additive { gamma } => gamma == 0.0,
            Alternative::AcceleratedTime { k } => k == 1.0,
        }
    }

    /// Baseline support needed to evaluate the alternative up to follow-up `a_max`.
    pub fn required_support(&self, a_max: f64) -> f64 {
        match *self {
            Alternative::AcceleratedTime { k } if k > 1.0 => a_max * k,
            _ => a_max,
        }
    }

    pub fn out_of_control_hazard(&self, ind: &IndividualExcess<'_>, t: f64) -> Result<f64> {
        match *self {
            Alternative::Proportional { rho } => Ok(rho * ind.hazard(t)?),
            Alternative::Additive { gamma } => Ok((ind.hazard(t)? + gamma).max(0.0)),
            Alternative::AcceleratedTime { k } => Ok(k * ind.hazard(k * t)?),
        }
    }

    pub fn out_of_control_cumulative(&self, ind: &IndividualExcess<'_>, t: f64) -> Result<f64> {
        match *self {
            Alternative::Proportional { rho } => Ok(rho * ind.cumulative(t)?),
            Alternative::AcceleratedTime { k } => ind.cumulative(k * t),
            Alternative::Additive { gamma } => additive_cumulative(ind, gamma, t),
        }
    }

    /// Smallest `t` with `H_E1(t) >= target`, or `None` past the support.
    pub fn inverse_out_of_control_cumulative(&self, ind: &IndividualExcess<'_>, target: f64) -> Option<f64> {
        if target <= 0.0 {
            return Some(0.0);
        }
        match *self {
            Alternative::Proportional { rho } => ind.inverse_cumulative(target / rho),
            Alternative::AcceleratedTime { k } => ind.inverse_cumulative(target).map(|u| u / k),
            Alternative::Additive { gamma } => match ind.baseline {
                Baseline::Piecewise(p) => p.shifted_inverse(ind.scale, gamma, target),
                Baseline::Weibull(_) => invert_monotone(|t| additive_cumulative(ind, gamma, t).ok(), target),
            },
        }
    }

    /// `log((h_P + h_E1(t)) / (h_P + h_E0(t)))` at an observed event time.
    pub fn llr_event_term(&self, ind: &IndividualExcess<'_>, population_hazard: f64, t: f64) -> Result<f64> {
        if self.is_degenerate() {
            return Ok(0.0);
        }
        let h0 = population_hazard + ind.hazard(t)?;
        let h1 = population_hazard + self.out_of_control_hazard(ind, t)?;
        if !(h0 > 0.0) {
            return Err(Error::ModelInconsistency(format!(
                "in-control total hazard is zero at an observed event (t = {t})"
            )));
        }
        if !(h1 > 0.0) {
            return Err(Error::ModelInconsistency(format!(
                "out-of-control total hazard is zero at an observed event (t = {t}); \
                 the log-likelihood ratio would be -infinity"
            )));
        }
        Ok((h1 / h0).ln())
    }

    /// `-(H_E1(a) - H_E0(a))` for one individual at time at risk `a`.
    pub fn llr_drift_term(&self, ind: &IndividualExcess<'_>, a: f64) -> Result<f64> {
        if self.is_degenerate() || a == 0.0 {
            // Still validate the support so that degenerate charts fail the
            // same way as the rest.
            ind.cumulative(self.required_support(a))?;
            return Ok(0.0);
        }
        match *self {
            Alternative::Proportional { rho } => Ok(-(rho - 1.0) * ind.cumulative(a)?),
            Alternative::AcceleratedTime { k } => Ok(-(ind.cumulative(k * a)? - ind.cumulative(a)?)),
            Alternative::Additive { gamma } if gamma >= 0.0 => {
                ind.cumulative(a)?;
                Ok(-gamma * a)
            }
            Alternative::Additive { gamma } => match ind.baseline {
                Baseline::Piecewise(p) => {
                    ind.cumulative(a)?;
                    // Band-wise difference avoids cancelling two cumulatives.
                    let mut diff = 0.0;
                    for (k, level) in p.levels().iter().enumerate() {
                        let start = p.cut_points()[k];
                        if start >= a {
                            break;
                        }
                        let end = p.cut_points()[k + 1].min(a);
                        let h = ind.scale * level;
                        diff += ((h + gamma).max(0.0) - h) * (end - start);
                    }
                    Ok(-diff)
                }
                Baseline::Weibull(_) => Ok(-(additive_cumulative(ind, gamma, a)? - ind.cumulative(a)?)),
            },
        }
    }

    /// Visits the constant-slope pieces of `a -> llr_drift_term(a)` on `[from, to]`.
    ///
    /// `visit(start, slope)` is called for each piece in increasing order; a
    /// piece ends where the next begins, the last one at `to`. Only piecewise
    /// baselines have constant slopes, so other baselines are rejected.
    pub fn drift_pieces(
        &self,
        ind: &IndividualExcess<'_>,
        from: f64,
        to: f64,
        mut visit: impl FnMut(f64, f64),
    ) -> Result<()> {
        let p = match ind.baseline {
            Baseline::Piecewise(p) => p,
            Baseline::Weibull(_) => {
                return Err(Error::Config("exact chart paths need a piecewise-constant baseline".into()))
            }
        };
        if !(to > from) {
            return Ok(());
        }
        let needed = self.required_support(to);
        if needed > p.support_end() {
            return Err(Error::Range(format!(
                "follow-up {to} needs baseline support up to {needed}, model ends at {}",
                p.support_end()
            )));
        }
        if self.is_degenerate() {
            visit(from, 0.0);
            return Ok(());
        }
        let cuts = p.cut_points();
        let scaled_cuts: &dyn Fn(usize) -> f64 = match *self {
            Alternative::AcceleratedTime { k } => &move |i: usize| cuts[i] / k,
            _ => &|i: usize| cuts[i],
        };
        // Merge the cut points with their images under the time scaling.
        let (mut i, mut j) = (0, 0);
        let mut start = from;
        loop {
            while i < cuts.len() && cuts[i] <= start {
                i += 1;
            }
            while j < cuts.len() && scaled_cuts(j) <= start {
                j += 1;
            }
            let next_i = cuts.get(i).copied().unwrap_or(f64::INFINITY);
            let next_j = if j < cuts.len() { scaled_cuts(j) } else { f64::INFINITY };
            let end = next_i.min(next_j).min(to);
            let mid = 0.5 * (start + end);
            let slope = -(self.out_of_control_hazard(ind, mid)? - ind.hazard(mid)?);
            visit(start, slope);
            if end >= to {
                return Ok(());
            }
            start = end;
        }
    }
}

impl fmt::Display for Alternative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alternative::Proportional { rho } => write!(f, "proportional(rho = {rho})"),
            Alternative::Additive { gamma } => write!(f, "additive(gamma = {gamma})"),
            Alternative::AcceleratedTime { k } => write!(f, "accelerated(k = {k})"),
        }
    }
}

/// Parses `kind:value` or `kind=value`, e.g. `proportional:0.9`.
impl FromStr for Alternative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once([':', '='])
            .ok_or_else(|| Error::Config(format!("alternative `{s}` should look like kind:value")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("alternative parameter `{value}` is not a number")))?;
        Alternative::from_kind(kind, value)
    }
}

/// Cumulative of `max(0, h_E0 + gamma)` on `[0, t]`.
fn additive_cumulative(ind: &IndividualExcess<'_>, gamma: f64, t: f64) -> Result<f64> {
    match ind.baseline {
        Baseline::Piecewise(p) => p.shifted_cumulative(ind.scale, gamma, t),
        Baseline::Weibull(w) => {
            let h0 = |u: f64| ind.cumulative(u);
            if gamma >= 0.0 {
                return Ok(h0(t)? + gamma * t);
            }
            if w.shape == 1.0 {
                return Ok((ind.scale * w.scale + gamma).max(0.0) * t);
            }
            // The hazard is monotone, so it crosses -gamma exactly once.
            let crossing = w.time_at_hazard(ind.scale, -gamma);
            if w.shape < 1.0 {
                // Decreasing hazard: positive part before the crossing.
                let u = t.min(crossing);
                Ok(h0(u)? + gamma * u)
            } else if t <= crossing {
                Ok(0.0)
            } else {
                Ok(h0(t)? - h0(crossing)? + gamma * (t - crossing))
            }
        }
    }
}

/// Inverts a nondecreasing function by bracketing and bisection.
fn invert_monotone(f: impl Fn(f64) -> Option<f64>, target: f64) -> Option<f64> {
    let mut hi = 1.0;
    loop {
        let v = f(hi)?;
        if v >= target {
            break;
        }
        hi *= 2.0;
        if hi > 1e8 {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Event contribution for one individual, looking hazards up in the model and table.
pub fn llr_event_term(
    alt: &Alternative,
    model: &ExcessHazardModel,
    table: &LifeTable,
    z: &Demographics,
    x: &CovariateVector,
    t_event: f64,
) -> Result<f64> {
    let ind = model.individual(x)?;
    alt.llr_event_term(&ind, table.population_hazard(z, t_event)?, t_event)
}

/// Drift contribution for one individual at time at risk `a`.
pub fn llr_drift_term(alt: &Alternative, model: &ExcessHazardModel, x: &CovariateVector, a: f64) -> Result<f64> {
    alt.llr_drift_term(&model.individual(x)?, a)
}
