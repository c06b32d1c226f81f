//! Hourly CSV ingestion: `timestamp,inflow_m3s[,outflow_m3s][,volume_m3]`.

use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use jumpres_core::calibration::HourlySeries;
use jumpres_core::dynamics::VOLUME_SCALE;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    ParseError { line: u64, message: String },
    #[error("line {line}: negative discharge {value} in `{column}`")]
    NegativeDischarge { line: u64, column: String, value: f64 },
    #[error("line {line}: timestamp does not increase")]
    NonMonotoneTime { line: u64 },
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// Empty fields are missing observations (NaN).
fn parse_value(s: &str, line: u64, column: &str) -> Result<f64, SeriesError> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse()
        .map_err(|_| SeriesError::ParseError { line, message: format!("`{column}`: cannot parse {s:?} as a number") })
}

pub fn load_series(path: &Path) -> Result<HourlySeries, SeriesError> {
    let file = std::fs::File::open(path)
        .map_err(|e| SeriesError::Io { path: path.display().to_string(), message: e.to_string() })?;
    read_series(file)
}

/// Parses the CSV; volume is converted to scaled units (m³ / 3600).
pub fn read_series<R: std::io::Read>(input: R) -> Result<HourlySeries, SeriesError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = reader.headers().map_err(|e| SeriesError::ParseError { line: 1, message: e.to_string() })?.clone();
    let find = |name: &str| header.iter().position(|h| h == name);
    let missing = |name: &str| SeriesError::ParseError { line: 1, message: format!("missing column `{name}`") };
    let t_col = find("timestamp").ok_or_else(|| missing("timestamp"))?;
    let in_col = find("inflow_m3s").ok_or_else(|| missing("inflow_m3s"))?;
    let out_col = find("outflow_m3s");
    let vol_col = find("volume_m3");

    let mut timestamps = Vec::new();
    let mut inflow = Vec::new();
    let mut outflow = out_col.map(|_| Vec::new());
    let mut volume = vol_col.map(|_| Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| SeriesError::ParseError {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |c: usize| record.get(c).unwrap_or("");
        let t = parse_timestamp(field(t_col)).ok_or_else(|| SeriesError::ParseError {
            line,
            message: format!("cannot parse timestamp {:?}", field(t_col)),
        })?;
        if timestamps.last().is_some_and(|&prev| t <= prev) {
            return Err(SeriesError::NonMonotoneTime { line });
        }
        let discharge = |c: usize, name: &str| {
            let v = parse_value(field(c), line, name)?;
            if v < 0.0 {
                return Err(SeriesError::NegativeDischarge { line, column: name.into(), value: v });
            }
            Ok(v)
        };
        inflow.push(discharge(in_col, "inflow_m3s")?);
        if let (Some(c), Some(out)) = (out_col, outflow.as_mut()) {
            out.push(discharge(c, "outflow_m3s")?);
        }
        if let (Some(c), Some(vol)) = (vol_col, volume.as_mut()) {
            vol.push(parse_value(field(c), line, "volume_m3")? / VOLUME_SCALE);
        }
        timestamps.push(t);
    }
    HourlySeries::new(timestamps, inflow, outflow, volume)
        .map_err(|e| SeriesError::ParseError { line: 0, message: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamp_forms() {
        let a = parse_timestamp("2020-01-01T05:00:00").unwrap();
        assert_eq!(parse_timestamp("2020-01-01 05:00").unwrap(), a);
        assert_eq!(parse_timestamp("2020-01-01T05:00:00Z").unwrap(), a);
        assert_eq!(parse_timestamp("2020-01-01T14:00:00+09:00").unwrap(), a);
        assert!(parse_timestamp("yesterday").is_none());
    }
}
