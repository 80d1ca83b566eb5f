//! Population mortality tables and hazard evaluation along the Lexis diagonal.
//!
//! A table holds one rate per (sex, integer age, integer calendar year) cell.
//! Following an individual forward in time moves attained age and calendar
//! time forward together, so the population hazard seen by that individual is
//! piecewise constant with a break at every integer age or year crossing.

use std::fmt;
use std::io::{Read, Write};
use std::ops::{ControlFlow, RangeInclusive};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    fn index(self) -> usize {
        match self {
            Sex::Male => 0,
            Sex::Female => 1,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
        }
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "M" | "m" | "male" => Ok(Sex::Male),
            "F" | "f" | "female" => Ok(Sex::Female),
            other => Err(Error::Validation(format!("unknown sex code {other:?} (expected M or F)"))),
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// The variables that select an individual's population hazard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub sex: Sex,
    /// Age in years at entry into the monitoring system.
    pub age_at_entry: f64,
    /// Calendar time of entry in decimal years, e.g. `2010.5`.
    pub entry_calendar_time: f64,
}

impl Demographics {
    pub fn new(sex: Sex, age_at_entry: f64, entry_calendar_time: f64) -> Result<Self> {
        if !(age_at_entry >= 0.0 && age_at_entry.is_finite()) {
            return Err(Error::Validation(format!("age at entry must be finite and non-negative, got {age_at_entry}")));
        }
        if !entry_calendar_time.is_finite() {
            return Err(Error::Validation("entry calendar time must be finite".into()));
        }
        Ok(Demographics { sex, age_at_entry, entry_calendar_time })
    }
}

/// Rectangular table of population hazard rates per year.
#[derive(Debug, Clone, PartialEq)]
pub struct LifeTable {
    age_min: i64,
    age_max: i64,
    year_min: i64,
    year_max: i64,
    // One dense block per sex; `None` when the sex is absent from the source.
    rates: [Option<Vec<f64>>; 2],
}

#[derive(Debug, Deserialize)]
struct RawRow {
    sex: String,
    age: String,
    year: String,
    rate: String,
}

impl LifeTable {
    /// Builds a table covering both sexes over the given spans from a rate function.
    pub fn from_fn(
        ages: RangeInclusive<i64>,
        years: RangeInclusive<i64>,
        mut rate: impl FnMut(Sex, i64, i64) -> f64,
    ) -> Result<Self> {
        let (age_min, age_max) = (*ages.start(), *ages.end());
        let (year_min, year_max) = (*years.start(), *years.end());
        if age_min > age_max || year_min > year_max {
            return Err(Error::Validation("empty life table span".into()));
        }
        let mut blocks = [Vec::new(), Vec::new()];
        for sex in [Sex::Male, Sex::Female] {
            let block = &mut blocks[sex.index()];
            for age in age_min..=age_max {
                for year in year_min..=year_max {
                    let r = rate(sex, age, year);
                    check_rate(r, sex, age, year)?;
                    block.push(r);
                }
            }
        }
        let [m, f] = blocks;
        Ok(LifeTable { age_min, age_max, year_min, year_max, rates: [Some(m), Some(f)] })
    }

    /// A table with the same rate in every cell of the given spans.
    pub fn constant(rate: f64, ages: RangeInclusive<i64>, years: RangeInclusive<i64>) -> Result<Self> {
        Self::from_fn(ages, years, |_, _, _| rate)
    }

    /// Reads a `sex,age,year,rate` CSV table and validates it.
    pub fn load_csv<R: Read>(source: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let headers = reader.headers().map_err(|e| Error::parse(1, e.to_string()))?.clone();
        for required in ["sex", "age", "year", "rate"] {
            if !headers.iter().any(|h| h == required) {
                return Err(Error::parse(1, format!("missing column `{required}`")));
            }
        }

        let mut cells: Vec<(Sex, i64, i64, f64, u64)> = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::parse(line, e.to_string())
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let row: RawRow = record.deserialize(Some(&headers)).map_err(|e| Error::parse(line, e.to_string()))?;
            let sex: Sex = row.sex.parse().map_err(|e: Error| Error::parse(line, e.to_string()))?;
            let age: i64 =
                row.age.parse().map_err(|_| Error::parse(line, format!("age {:?} is not an integer", row.age)))?;
            let year: i64 =
                row.year.parse().map_err(|_| Error::parse(line, format!("year {:?} is not an integer", row.year)))?;
            let rate: f64 =
                row.rate.parse().map_err(|_| Error::parse(line, format!("rate {:?} is not a number", row.rate)))?;
            check_rate(rate, sex, age, year).map_err(|e| Error::Validation(format!("line {line}: {e}")))?;
            cells.push((sex, age, year, rate, line));
        }
        if cells.is_empty() {
            return Err(Error::Validation("life table has no rows".into()));
        }

        let age_min = cells.iter().map(|c| c.1).min().unwrap();
        let age_max = cells.iter().map(|c| c.1).max().unwrap();
        let year_min = cells.iter().map(|c| c.2).min().unwrap();
        let year_max = cells.iter().map(|c| c.2).max().unwrap();
        let n_years = (year_max - year_min + 1) as usize;
        let block_len = (age_max - age_min + 1) as usize * n_years;

        let mut rates: [Option<Vec<f64>>; 2] = [None, None];
        let mut seen: [Vec<bool>; 2] = [Vec::new(), Vec::new()];
        for &(sex, age, year, rate, line) in &cells {
            let s = sex.index();
            let block = rates[s].get_or_insert_with(|| vec![0.0; block_len]);
            if seen[s].is_empty() {
                seen[s] = vec![false; block_len];
            }
            let idx = (age - age_min) as usize * n_years + (year - year_min) as usize;
            if seen[s][idx] {
                return Err(Error::Validation(format!("line {line}: duplicate cell ({sex}, age {age}, year {year})")));
            }
            seen[s][idx] = true;
            block[idx] = rate;
        }
        for sex in [Sex::Male, Sex::Female] {
            let s = sex.index();
            if let Some(pos) = seen[s].iter().position(|present| !present) {
                let age = age_min + (pos / n_years) as i64;
                let year = year_min + (pos % n_years) as i64;
                return Err(Error::Validation(format!("coverage hole: no rate for ({sex}, age {age}, year {year})")));
            }
        }
        Ok(LifeTable { age_min, age_max, year_min, year_max, rates })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "sex,age,year,rate")?;
        for sex in [Sex::Male, Sex::Female] {
            if self.rates[sex.index()].is_none() {
                continue;
            }
            for age in self.age_min..=self.age_max {
                for year in self.year_min..=self.year_max {
                    let rate = self.rate(sex, age, year)?;
                    writeln!(out, "{sex},{age},{year},{rate}")?;
                }
            }
        }
        Ok(())
    }

    pub fn age_span(&self) -> RangeInclusive<i64> {
        self.age_min..=self.age_max
    }

    pub fn year_span(&self) -> RangeInclusive<i64> {
        self.year_min..=self.year_max
    }

    pub fn cell_count(&self) -> usize {
        self.rates.iter().flatten().map(Vec::len).sum()
    }

    /// Rate of a single cell.
    pub fn rate(&self, sex: Sex, age: i64, year: i64) -> Result<f64> {
        let block = self.rates[sex.index()]
            .as_ref()
            .ok_or_else(|| Error::Range(format!("life table has no rates for sex {sex}")))?;
        if age < self.age_min || age > self.age_max || year < self.year_min || year > self.year_max {
            return Err(Error::Range(format!(
                "life table has no cell ({sex}, age {age}, year {year}); spans are ages {}..={} and years {}..={}",
                self.age_min, self.age_max, self.year_min, self.year_max
            )));
        }
        let n_years = (self.year_max - self.year_min + 1) as usize;
        Ok(block[(age - self.age_min) as usize * n_years + (year - self.year_min) as usize])
    }

    /// Population hazard `t` years after entry.
    pub fn population_hazard(&self, z: &Demographics, t: f64) -> Result<f64> {
        let age = (z.age_at_entry + t).floor() as i64;
        let year = (z.entry_calendar_time + t).floor() as i64;
        self.rate(z.sex, age, year)
    }

    /// Integral of the population hazard over `[0, t]` of follow-up.
    pub fn cumulative_population_hazard(&self, z: &Demographics, t: f64) -> Result<f64> {
        let mut total = 0.0;
        let _ = self.walk(z, t, |start, end, rate| {
            total += rate * (end - start);
            ControlFlow::<()>::Continue(())
        })?;
        Ok(total)
    }

    /// Smallest follow-up time at which the cumulative population hazard
    /// reaches `target`, searching no further than `limit`.
    ///
    /// Returns `None` when the target is not reached before `limit` or before
    /// the trajectory leaves the table.
    pub fn inverse_cumulative(&self, z: &Demographics, target: f64, limit: f64) -> Option<f64> {
        if target <= 0.0 {
            return Some(0.0);
        }
        let mut acc = 0.0;
        let found = self.walk(z, limit, |start, end, rate| {
            let mass = rate * (end - start);
            if rate > 0.0 && acc + mass >= target {
                return ControlFlow::Break(start + (target - acc) / rate);
            }
            acc += mass;
            ControlFlow::Continue(())
        });
        match found {
            Ok(ControlFlow::Break(t)) => Some(t),
            Ok(ControlFlow::Continue(())) => None,
            Err(e) => {
                log::debug!("population event time beyond life table support: {e}");
                None
            }
        }
    }

    /// Visits the constant-rate segments of the trajectory on `[0, limit]`.
    fn walk<B>(
        &self,
        z: &Demographics,
        limit: f64,
        mut visit: impl FnMut(f64, f64, f64) -> ControlFlow<B>,
    ) -> Result<ControlFlow<B>> {
        if !(limit > 0.0) {
            return Ok(ControlFlow::Continue(()));
        }
        let a0 = z.age_at_entry;
        let y0 = z.entry_calendar_time;
        let mut age = a0.floor() as i64;
        let mut year = y0.floor() as i64;
        let mut start = 0.0;
        loop {
            // Boundary times measured from entry, computed from the integer
            // cell index so that rounding cannot accumulate along the walk.
            let next_age = (age + 1) as f64 - a0;
            let next_year = (year + 1) as f64 - y0;
            let next = next_age.min(next_year);
            let rate = self.rate(z.sex, age, year)?;
            let end = next.min(limit);
            if let ControlFlow::Break(b) = visit(start, end, rate) {
                return Ok(ControlFlow::Break(b));
            }
            if end >= limit {
                return Ok(ControlFlow::Continue(()));
            }
            start = next;
            if next_age <= next {
                age += 1;
            }
            if next_year <= next {
                year += 1;
            }
        }
    }
}

fn check_rate(rate: f64, sex: Sex, age: i64, year: i64) -> Result<()> {
    if !rate.is_finite() || rate < 0.0 {
        return Err(Error::Validation(format!(
            "rate for ({sex}, age {age}, year {year}) must be finite and non-negative, got {rate}"
        )));
    }
    Ok(())
}
