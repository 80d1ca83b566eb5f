//! Exact evaluation of the CUSUM chart `Psi(t) = R(t) - min_{s <= t} R(s)`.
//!
//! `R(t)` sums, over patients included by time `t`, an event term at each
//! observed event and a drift term `-(H_E1(A_i(t)) - H_E0(A_i(t)))` in the
//! patient's time at risk. With a piecewise-constant baseline each patient's
//! drift is piecewise linear in chart time, so `R` is piecewise linear between
//! a finite set of breakpoints and jumps only at events or lump updates. The
//! engine sorts all per-patient contributions and sweeps them once; threshold
//! crossings inside a linear piece are found by interpolation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alternatives::Alternative;
use crate::error::{Error, Result};
use crate::excess_model::{Baseline, ExcessHazardModel};
use crate::lifetable::LifeTable;
use crate::records::PatientRecord;

/// When a patient's information reaches the chart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateScheme {
    /// Status known continuously from arrival.
    Continuous,
    /// A patient contributes only once the event or censoring is observed.
    AtEvent,
    /// Patients are included at the first period boundary after arrival.
    PeriodicArrival { period: f64 },
    /// Completed patients are included at the first period boundary after completion.
    PeriodicAtEvent { period: f64 },
}

impl UpdateScheme {
    pub const ALL: [UpdateScheme; 4] = [
        UpdateScheme::Continuous,
        UpdateScheme::AtEvent,
        UpdateScheme::PeriodicArrival { period: 1.0 },
        UpdateScheme::PeriodicAtEvent { period: 1.0 },
    ];
}

impl fmt::Display for UpdateScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateScheme::Continuous => f.write_str("continuous"),
            UpdateScheme::AtEvent => f.write_str("at_event"),
            UpdateScheme::PeriodicArrival { period } if *period == 1.0 => f.write_str("periodic_arrival"),
            UpdateScheme::PeriodicAtEvent { period } if *period == 1.0 => f.write_str("periodic_at_event"),
            UpdateScheme::PeriodicArrival { period } => write!(f, "periodic_arrival:{period}"),
            UpdateScheme::PeriodicAtEvent { period } => write!(f, "periodic_at_event:{period}"),
        }
    }
}

impl FromStr for UpdateScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, period) = match s.split_once(':') {
            Some((n, p)) => (
                n,
                p.parse::<f64>()
                    .ok()
                    .filter(|p| *p > 0.0)
                    .ok_or_else(|| Error::Config(format!("bad update period in `{s}`")))?,
            ),
            None => (s, 1.0),
        };
        match name.trim().replace('-', "_").as_str() {
            "continuous" => Ok(UpdateScheme::Continuous),
            "at_event" => Ok(UpdateScheme::AtEvent),
            "periodic_arrival" => Ok(UpdateScheme::PeriodicArrival { period }),
            "periodic_at_event" => Ok(UpdateScheme::PeriodicAtEvent { period }),
            other => Err(Error::Config(format!(
                "unknown update scheme `{other}` (continuous, at_event, periodic_arrival, periodic_at_event)"
            ))),
        }
    }
}

fn ceil_to(x: f64, period: f64) -> f64 {
    (x / period).ceil() * period
}

/// Horizon, threshold and update rules for one chart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitoringConfig {
    /// Monitoring horizon `t_m` in years since start.
    pub horizon: f64,
    /// Signal threshold `c`; `f64::INFINITY` never signals.
    pub threshold: f64,
    pub scheme: UpdateScheme,
    /// Optional follow-up cap `t_D`.
    pub follow_up_cap: Option<f64>,
}

impl MonitoringConfig {
    pub fn new(horizon: f64, threshold: f64, scheme: UpdateScheme) -> Self {
        MonitoringConfig { horizon, threshold, scheme, follow_up_cap: None }
    }

    pub fn with_follow_up_cap(mut self, cap: Option<f64>) -> Self {
        self.follow_up_cap = cap;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive and finite, got {}", self.horizon)));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Config(format!("threshold must be non-negative, got {}", self.threshold)));
        }
        if let Some(cap) = self.follow_up_cap {
            if !(cap > 0.0) {
                return Err(Error::Config(format!("follow-up cap must be positive, got {cap}")));
            }
        }
        Ok(())
    }
}

/// Time at risk `A_i(t)` and event indicator `delta_i(t)` under a scheme.
pub fn at_risk_time(scheme: UpdateScheme, record: &PatientRecord, t: f64) -> (f64, bool) {
    let b = record.arrival;
    let f = record.follow_up;
    let event = record.is_event();
    match scheme {
        UpdateScheme::Continuous => {
            if t < b {
                return (0.0, false);
            }
            let a = f.min(t - b);
            (a, event && t - b >= f)
        }
        UpdateScheme::AtEvent => {
            if b + f <= t {
                (f, event)
            } else {
                (0.0, false)
            }
        }
        UpdateScheme::PeriodicArrival { period } => {
            if ceil_to(b, period) <= t {
                (f.min(t - b), event && t - b >= f)
            } else {
                (0.0, false)
            }
        }
        UpdateScheme::PeriodicAtEvent { period } => {
            if ceil_to(b + f, period) <= t {
                (f, event)
            } else {
                (0.0, false)
            }
        }
    }
}

/// One breakpoint of a chart path: `R` just before and after any jump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakpoint {
    pub time: f64,
    pub r_left: f64,
    pub r: f64,
    /// Running minimum of `R` including this breakpoint.
    pub running_min: f64,
    /// Slope of `R` until the next breakpoint.
    pub slope: f64,
    pub event: bool,
}

/// The chart trajectory on `[0, min(t_m, tau)]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChartPath {
    pub breakpoints: Vec<Breakpoint>,
    pub signal_time: Option<f64>,
    pub threshold: f64,
    pub horizon: f64,
}

impl ChartPath {
    pub fn times(&self) -> Vec<f64> {
        self.breakpoints.iter().map(|b| b.time).collect()
    }

    pub fn r_values(&self) -> Vec<f64> {
        self.breakpoints.iter().map(|b| b.r).collect()
    }

    pub fn psi_values(&self) -> Vec<f64> {
        self.breakpoints.iter().map(|b| b.r - b.running_min).collect()
    }

    pub fn end_time(&self) -> f64 {
        self.breakpoints.last().map_or(0.0, |b| b.time)
    }

    /// `(R(t), Psi(t))` at any `t` in the path's range.
    pub fn evaluate(&self, t: f64) -> Option<(f64, f64)> {
        if self.breakpoints.is_empty() || t < 0.0 || t > self.end_time() {
            return None;
        }
        let i = self.breakpoints.partition_point(|b| b.time <= t).max(1) - 1;
        let bp = &self.breakpoints[i];
        let r = bp.r + bp.slope * (t - bp.time);
        let m = bp.running_min.min(r);
        Some((r, r - m))
    }

    /// Supremum of `Psi` over the path.
    pub fn max_statistic(&self) -> f64 {
        let mut best = 0.0f64;
        let mut prev_min = 0.0f64;
        for bp in &self.breakpoints {
            best = best.max(bp.r_left - prev_min.min(bp.r_left));
            best = best.max(bp.r - bp.running_min);
            prev_min = bp.running_min;
        }
        best
    }

    /// Writes `time,R,Psi,event_flag` rows, one per breakpoint.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "time,R,Psi,event_flag")?;
        for bp in &self.breakpoints {
            writeln!(out, "{},{},{},{}", bp.time, bp.r, bp.r - bp.running_min, u8::from(bp.event))?;
        }
        Ok(())
    }
}

/// Per-patient contribution: a slope change, a jump, or both, at one chart time.
#[derive(Debug, Clone, Copy)]
struct Contribution {
    time: f64,
    slope: f64,
    jump: f64,
    event: bool,
}

/// Checks that every needed hazard is evaluable before any computation.
fn validate_support(
    records: &[PatientRecord],
    model: &ExcessHazardModel,
    alt: &Alternative,
    config: &MonitoringConfig,
) -> Result<()> {
    config.validate()?;
    alt.validated()?;
    if let Baseline::Weibull(_) = model.baseline() {
        return Err(Error::Config("charts are computed exactly only for piecewise-constant baselines".into()));
    }
    let support = model.support_end();
    let mut needed = 0.0f64;
    for r in records {
        r.validate()?;
        let f = config.follow_up_cap.map_or(r.follow_up, |cap| r.follow_up.min(cap));
        let a = match config.scheme {
            UpdateScheme::Continuous if r.arrival <= config.horizon => f.min(config.horizon - r.arrival),
            UpdateScheme::PeriodicArrival { period } if ceil_to(r.arrival, period) <= config.horizon => {
                f.min(config.horizon - r.arrival)
            }
            UpdateScheme::AtEvent if r.arrival + f <= config.horizon => f,
            UpdateScheme::PeriodicAtEvent { period } if ceil_to(r.arrival + f, period) <= config.horizon => f,
            _ => 0.0,
        };
        needed = needed.max(alt.required_support(a));
    }
    if needed > support {
        let hint = match alt {
            Alternative::AcceleratedTime { k } if *k > 1.0 => {
                " (accelerated-time charts with k > 1 need the last band extended to k times the follow-up)"
            }
            _ => "",
        };
        return Err(Error::Config(format!(
            "chart needs the excess hazard up to {needed} years but the model ends at {support}{hint}"
        )));
    }
    Ok(())
}

fn contributions(
    records: &[PatientRecord],
    model: &ExcessHazardModel,
    table: &LifeTable,
    alt: &Alternative,
    config: &MonitoringConfig,
    out: &mut Vec<Contribution>,
) -> Result<()> {
    let horizon = config.horizon;
    out.clear();
    for record in records {
        let record = record.capped_at(config.follow_up_cap);
        let b = record.arrival;
        let f = record.follow_up;
        if b > horizon {
            continue;
        }
        let ind = model.individual(&record.covariates)?;
        let event_term = || -> Result<f64> {
            let hp = table.population_hazard(&record.demographics, f)?;
            alt.llr_event_term(&ind, hp, f)
        };
        let drift = |from: f64, to: f64, out: &mut Vec<Contribution>| -> Result<()> {
            let mut prev = 0.0;
            alt.drift_pieces(&ind, from, to, |start, slope| {
                if slope != prev {
                    out.push(Contribution { time: b + start, slope: slope - prev, jump: 0.0, event: false });
                    prev = slope;
                }
            })?;
            if prev != 0.0 {
                out.push(Contribution { time: b + to, slope: -prev, jump: 0.0, event: false });
            }
            Ok(())
        };
        let lump = |time: f64, out: &mut Vec<Contribution>| -> Result<()> {
            let mut jump = alt.llr_drift_term(&ind, f)?;
            if record.is_event() {
                jump += event_term()?;
            }
            if jump != 0.0 || record.is_event() {
                out.push(Contribution { time, slope: 0.0, jump, event: record.is_event() });
            }
            Ok(())
        };
        match config.scheme {
            UpdateScheme::Continuous => {
                drift(0.0, f.min(horizon - b), out)?;
                if record.is_event() && b + f <= horizon {
                    out.push(Contribution { time: b + f, slope: 0.0, jump: event_term()?, event: true });
                }
            }
            UpdateScheme::PeriodicArrival { period } => {
                let included = ceil_to(b, period);
                if included > horizon {
                    continue;
                }
                let waited = included - b;
                let a0 = f.min(waited);
                let event_before = record.is_event() && f <= waited;
                let mut jump = alt.llr_drift_term(&ind, a0)?;
                if event_before {
                    jump += event_term()?;
                }
                if jump != 0.0 || event_before {
                    out.push(Contribution { time: included, slope: 0.0, jump, event: event_before });
                }
                if f > waited {
                    drift(a0, f.min(horizon - b), out)?;
                    if record.is_event() && b + f <= horizon {
                        out.push(Contribution { time: b + f, slope: 0.0, jump: event_term()?, event: true });
                    }
                }
            }
            UpdateScheme::AtEvent => {
                if b + f <= horizon {
                    lump(b + f, out)?;
                }
            }
            UpdateScheme::PeriodicAtEvent { period } => {
                let included = ceil_to(b + f, period);
                if included <= horizon {
                    lump(included, out)?;
                }
            }
        }
    }
    // Total order on all fields: the sweep, and therefore every floating-point
    // sum, is independent of the input record order.
    out.sort_unstable_by(|x, y| {
        x.time
            .total_cmp(&y.time)
            .then(x.slope.total_cmp(&y.slope))
            .then(x.jump.total_cmp(&y.jump))
            .then(x.event.cmp(&y.event))
    });
    Ok(())
}

/// Receives breakpoints from the sweep.
trait PathSink {
    fn breakpoint(&mut self, bp: Breakpoint);
}

impl PathSink for Vec<Breakpoint> {
    fn breakpoint(&mut self, bp: Breakpoint) {
        self.push(bp);
    }
}

/// Keeps only the supremum of `Psi`.
struct MaxSink {
    best: f64,
    prev_min: f64,
}

impl PathSink for MaxSink {
    fn breakpoint(&mut self, bp: Breakpoint) {
        self.best = self.best.max(bp.r_left - self.prev_min.min(bp.r_left));
        self.best = self.best.max(bp.r - bp.running_min);
        self.prev_min = bp.running_min;
    }
}

/// Sweeps sorted contributions; returns the signal time if `Psi` exceeds `threshold`.
fn sweep(items: &[Contribution], threshold: f64, horizon: f64, sink: &mut impl PathSink) -> Option<f64> {
    let mut t = 0.0f64;
    let mut r = 0.0f64;
    let mut m = 0.0f64;
    let mut slope = 0.0f64;
    if items.first().is_none_or(|c| c.time > 0.0) {
        sink.breakpoint(Breakpoint { time: 0.0, r_left: 0.0, r: 0.0, running_min: 0.0, slope: 0.0, event: false });
    }
    let mut idx = 0;
    loop {
        let next = items.get(idx).map_or(f64::INFINITY, |c| c.time);
        let seg_end = next.min(horizon);
        if seg_end > t {
            let r_end = r + slope * (seg_end - t);
            if slope > 0.0 && r_end - m > threshold {
                // Psi rises linearly from r - m; it reaches the threshold inside this piece.
                let tau = (t + (threshold - (r - m)) / slope).clamp(t, seg_end);
                let r_tau = m + threshold;
                if tau > t {
                    sink.breakpoint(Breakpoint {
                        time: tau,
                        r_left: r_tau,
                        r: r_tau,
                        running_min: m,
                        slope,
                        event: false,
                    });
                }
                return Some(tau);
            }
            r = r_end;
            m = m.min(r);
            t = seg_end;
        }
        if next > horizon {
            break;
        }
        let r_left = r;
        let mut event = false;
        while let Some(c) = items.get(idx).filter(|c| c.time == next) {
            r += c.jump;
            slope += c.slope;
            event |= c.event;
            idx += 1;
        }
        m = m.min(r);
        sink.breakpoint(Breakpoint { time: t, r_left, r, running_min: m, slope, event });
        if r - m > threshold {
            return Some(t);
        }
        if idx >= items.len() && t >= horizon {
            return None;
        }
    }
    sink.breakpoint(Breakpoint { time: t, r_left: r, r, running_min: m, slope, event: false });
    None
}

/// Computes the exact chart path on `[0, min(t_m, tau)]`.
pub fn run_chart(
    records: &[PatientRecord],
    model: &ExcessHazardModel,
    table: &LifeTable,
    alt: &Alternative,
    config: &MonitoringConfig,
) -> Result<ChartPath> {
    validate_support(records, model, alt, config)?;
    let mut items = Vec::with_capacity(records.len() * 8);
    contributions(records, model, table, alt, config, &mut items)?;
    let mut breakpoints = Vec::with_capacity(items.len() + 2);
    let signal_time = sweep(&items, config.threshold, config.horizon, &mut breakpoints);
    Ok(ChartPath { breakpoints, signal_time, threshold: config.threshold, horizon: config.horizon })
}

/// Supremum of `Psi` over `[0, t_m]` without materialising the path.
///
/// Same contributions and sweep as [`run_chart`] with an infinite threshold;
/// `buffer` is reused across calls.
pub fn chart_maximum(
    records: &[PatientRecord],
    model: &ExcessHazardModel,
    table: &LifeTable,
    alt: &Alternative,
    config: &MonitoringConfig,
    buffer: &mut ChartBuffer,
) -> Result<f64> {
    let cfg = MonitoringConfig { threshold: f64::INFINITY, ..*config };
    validate_support(records, model, alt, &cfg)?;
    contributions(records, model, table, alt, &cfg, &mut buffer.0)?;
    let mut sink = MaxSink { best: 0.0, prev_min: 0.0 };
    sweep(&buffer.0, f64::INFINITY, cfg.horizon, &mut sink);
    Ok(sink.best)
}

/// Signal time `tau` of the chart, if it crosses `config.threshold` by the horizon.
pub fn chart_signal_time(
    records: &[PatientRecord],
    model: &ExcessHazardModel,
    table: &LifeTable,
    alt: &Alternative,
    config: &MonitoringConfig,
    buffer: &mut ChartBuffer,
) -> Result<Option<f64>> {
    validate_support(records, model, alt, config)?;
    contributions(records, model, table, alt, config, &mut buffer.0)?;
    Ok(sweep(&buffer.0, config.threshold, config.horizon, &mut Discard))
}

struct Discard;

impl PathSink for Discard {
    fn breakpoint(&mut self, _: Breakpoint) {}
}

/// Reusable scratch space for [`chart_maximum`].
#[derive(Debug, Default)]
pub struct ChartBuffer(Vec<Contribution>);

/// Supremum of `Psi` of a computed path.
pub fn max_statistic(path: &ChartPath) -> f64 {
    path.max_statistic()
}
