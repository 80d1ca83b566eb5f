//! Patient records and the patient CSV format.
//!
//! Header: `arrival,sex,age_at_entry,entry_year,<covariates>,follow_up,status`.
//! Covariate columns carry level labels, one column per schema variable. A
//! schema variable named `sex` is read from the `sex` column instead of a
//! column of its own.

use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excess_model::{CovariateSchema, CovariateVector};
use crate::lifetable::{Demographics, Sex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventStatus {
    Event,
    Censored,
}

impl FromStr for EventStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "event" | "1" => Ok(EventStatus::Event),
            "censored" | "0" => Ok(EventStatus::Censored),
            other => Err(Error::Validation(format!("status {other:?} is neither `event` nor `censored`"))),
        }
    }
}

impl EventStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            EventStatus::Event => "event",
            EventStatus::Censored => "censored",
        }
    }
}

/// One patient as seen by the monitoring system. The cause of an event is
/// never recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    /// Years since monitoring start.
    pub arrival: f64,
    pub demographics: Demographics,
    pub covariates: CovariateVector,
    /// Observed `min(T, C)` in years.
    pub follow_up: f64,
    pub status: EventStatus,
}

impl PatientRecord {
    pub fn is_event(&self) -> bool {
        self.status == EventStatus::Event
    }

    /// Truncates follow-up at `cap`: events after the cap become censored at it.
    pub fn capped_at(&self, cap: Option<f64>) -> PatientRecord {
        match cap {
            Some(cap) if self.follow_up > cap => {
                PatientRecord { follow_up: cap, status: EventStatus::Censored, ..self.clone() }
            }
            _ => self.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.arrival >= 0.0 && self.arrival.is_finite()) {
            return Err(Error::Validation(format!("arrival {} must be finite and >= 0", self.arrival)));
        }
        if !(self.follow_up >= 0.0 && self.follow_up.is_finite()) {
            return Err(Error::Validation(format!("follow-up {} must be finite and >= 0", self.follow_up)));
        }
        Ok(())
    }
}

fn sex_variable(schema: &CovariateSchema) -> Option<usize> {
    schema.variables.iter().position(|v| v.name == "sex")
}

/// Reads patient records, coding covariates with `schema`.
pub fn read_patients_csv<R: Read>(source: R, schema: &CovariateSchema) -> Result<Vec<PatientRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers().map_err(|e| Error::parse(1, e.to_string()))?.clone();
    let column = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::parse(1, format!("missing column `{name}`")))
    };
    let arrival_col = column("arrival")?;
    let sex_col = column("sex")?;
    let age_col = column("age_at_entry")?;
    let entry_col = column("entry_year")?;
    let follow_col = column("follow_up")?;
    let status_col = column("status")?;
    let sex_var = sex_variable(schema);
    let covariate_cols: Vec<Option<usize>> = schema
        .variables
        .iter()
        .enumerate()
        .map(|(i, v)| if Some(i) == sex_var { Ok(None) } else { column(&v.name).map(Some) })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut labels: Vec<String> = Vec::with_capacity(schema.variables.len());
    for row in reader.records() {
        let row = row.map_err(|e| Error::parse(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |col: usize| row.get(col).unwrap_or("");
        let number = |col: usize, what: &str| -> Result<f64> {
            field(col)
                .parse::<f64>()
                .map_err(|_| Error::parse(line, format!("{what} {:?} is not a number", field(col))))
        };
        let sex: Sex = field(sex_col).parse().map_err(|e: Error| Error::parse(line, e.to_string()))?;
        labels.clear();
        for (i, col) in covariate_cols.iter().enumerate() {
            match col {
                Some(c) => labels.push(field(*c).to_string()),
                None => labels.push(if Some(i) == sex_var { sex.code().to_string() } else { String::new() }),
            }
        }
        let covariates = schema.encode_labels(&labels).map_err(|e| Error::parse(line, e.to_string()))?;
        let demographics = Demographics::new(sex, number(age_col, "age_at_entry")?, number(entry_col, "entry_year")?)
            .map_err(|e| Error::parse(line, e.to_string()))?;
        let record = PatientRecord {
            arrival: number(arrival_col, "arrival")?,
            demographics,
            covariates,
            follow_up: number(follow_col, "follow_up")?,
            status: field(status_col).parse().map_err(|e: Error| Error::parse(line, e.to_string()))?,
        };
        record.validate().map_err(|e| Error::parse(line, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_patients_csv<W: Write>(mut out: W, schema: &CovariateSchema, records: &[PatientRecord]) -> Result<()> {
    let sex_var = sex_variable(schema);
    let mut header = vec!["arrival", "sex", "age_at_entry", "entry_year"];
    for (i, v) in schema.variables.iter().enumerate() {
        if Some(i) != sex_var {
            header.push(&v.name);
        }
    }
    header.extend(["follow_up", "status"]);
    writeln!(out, "{}", header.join(","))?;
    for r in records {
        let labels = schema.decode(&r.covariates)?;
        write!(
            out,
            "{},{},{},{}",
            r.arrival, r.demographics.sex, r.demographics.age_at_entry, r.demographics.entry_calendar_time
        )?;
        for (i, label) in labels.iter().enumerate() {
            if Some(i) != sex_var {
                write!(out, ",{label}")?;
            }
        }
        writeln!(out, ",{},{}", r.follow_up, r.status.as_str())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::excess_model::CategoricalVariable;

    fn schema() -> CovariateSchema {
        CovariateSchema::new(vec![
            CategoricalVariable::new("sex", &["M", "F"], "M").unwrap(),
            CategoricalVariable::new("stage", &["distant", "local"], "distant").unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn reads_and_writes() {
        let csv = "arrival,sex,age_at_entry,entry_year,stage,follow_up,status\n\
                   0.5,F,70.2,2010.5,local,2.25,event\n\
                   1.0,M,55,2011,distant,9,censored\n";
        let records = read_patients_csv(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].covariates.0, vec![1.0, 1.0]);
        assert_eq!(records[1].status, EventStatus::Censored);
        let mut out = Vec::new();
        write_patients_csv(&mut out, &schema(), &records).unwrap();
        assert_eq!(read_patients_csv(out.as_slice(), &schema()).unwrap(), records);
    }

    #[test]
    fn missing_status_column_is_named() {
        let csv = "arrival,sex,age_at_entry,entry_year,stage,follow_up\n0.5,F,70,2010.5,local,2.25\n";
        let err = read_patients_csv(csv.as_bytes(), &schema()).unwrap_err();
        assert!(err.to_string().contains("`status`"), "{err}");
    }

    #[test]
    fn bad_level_reports_line() {
        let csv = "arrival,sex,age_at_entry,entry_year,stage,follow_up,status\n\
                   0.5,F,70.2,2010.5,local,2.25,event\n\
                   0.7,F,70.2,2010.7,nowhere,2.25,event\n";
        match read_patients_csv(csv.as_bytes(), &schema()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn cap_censors_late_events() {
        let r = PatientRecord {
            arrival: 0.0,
            demographics: Demographics::new(Sex::Male, 60.0, 2010.0).unwrap(),
            covariates: CovariateVector::default(),
            follow_up: 7.0,
            status: EventStatus::Event,
        };
        let c = r.capped_at(Some(5.0));
        assert_eq!((c.follow_up, c.status), (5.0, EventStatus::Censored));
        assert_eq!(r.capped_at(Some(8.0)), r);
    }
}
