//! Location-aware air-quality series: CSV loading, gap handling and
//! environment partitioning.
//!
//! Files use the header
//! `station_id,city,latitude,longitude,timestamp_utc,pm25,pm10,no2,co,o3,so2`
//! with RFC 3339 timestamps and empty fields for missing values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::thread;

use chrono::{DateTime, SecondsFormat, Utc};
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnum::Tensor;
use crate::semgen::Role;
use crate::training::EnvSeries;

pub const HEADER: [&str; 11] =
    ["station_id", "city", "latitude", "longitude", "timestamp_utc", "pm25", "pm10", "no2", "co", "o3", "so2"];
pub const ATTRIBUTES: [&str; 6] = ["pm25", "pm10", "no2", "co", "o3", "so2"];
/// Longest run of missing hours that is forward-filled; longer gaps split.
pub const MAX_FILL_HOURS: usize = 6;

const HOUR_SECS: i64 = 3600;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("schema mismatch: expected header {expected:?}, found {found:?}")]
    Schema { expected: String, found: String },
    #[error("line {line}: {msg}")]
    Row { line: u64, msg: String },
    #[error("station {station}: attribute {attribute} has no values")]
    Attribute { station: String, attribute: &'static str },
    #[error("station {station}: {msg}")]
    Irregular { station: String, msg: String },
}

/// One station's hourly measurements. `values[a][t]` is attribute `a` at
/// `timestamps[t]`; `None` marks a missing field.
#[derive(Clone, Debug, PartialEq)]
pub struct LocationSeries {
    pub station_id: String,
    pub city: String,
    pub latitude: f64,
    pub longitude: f64,
    pub timestamps: Vec<DateTime<Utc>>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl LocationSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(|row| row.iter().all(Option::is_some))
    }

    /// The `d x T` value matrix, or `None` while any value is missing.
    pub fn to_tensor(&self) -> Option<Tensor> {
        let data: Option<Vec<f64>> = self.values.iter().flatten().copied().collect();
        Some(Tensor::matrix(self.values.len(), self.len(), data?))
    }

    fn empty_like(&self) -> Self {
        Self { timestamps: Vec::new(), values: vec![Vec::new(); self.values.len()], ..self.clone() }
    }
}

fn row_err(line: u64, msg: impl Into<String>) -> IngestError {
    IngestError::Row { line, msg: msg.into() }
}

fn parse_f64(field: &str, name: &str, line: u64) -> Result<f64, IngestError> {
    field.trim().parse::<f64>().map_err(|_| row_err(line, format!("{name}: cannot parse {field:?} as a number")))
}

/// Reads every station from a CSV stream. Rows may come in any order; each
/// series is sorted by time. Duplicate timestamps within a station and
/// conflicting station metadata are row errors.
pub fn read_csv(reader: impl Read) -> Result<Vec<LocationSeries>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let found = rdr.headers().map_err(|e| row_err(1, e.to_string()))?.clone();
    if found.iter().ne(HEADER.iter().copied()) {
        return Err(IngestError::Schema { expected: HEADER.join(","), found: found.iter().collect::<Vec<_>>().join(",") });
    }

    let mut stations: BTreeMap<String, (LocationSeries, Vec<(DateTime<Utc>, u64, [Option<f64>; 6])>)> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            row_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let station_id = record[0].to_string();
        if station_id.is_empty() {
            return Err(row_err(line, "empty station_id"));
        }
        let latitude = parse_f64(&record[2], "latitude", line)?;
        let longitude = parse_f64(&record[3], "longitude", line)?;
        if !(-90.0..=90.0).contains(&latitude) {
            return Err(row_err(line, format!("latitude {latitude} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&longitude) {
            return Err(row_err(line, format!("longitude {longitude} outside [-180, 180]")));
        }
        let ts = DateTime::parse_from_rfc3339(record[4].trim())
            .map_err(|e| row_err(line, format!("timestamp_utc {:?}: {e}", &record[4])))?
            .with_timezone(&Utc);
        let mut vals = [None; 6];
        for (a, v) in vals.iter_mut().enumerate() {
            let field = &record[5 + a];
            if !field.trim().is_empty() {
                let x = parse_f64(field, ATTRIBUTES[a], line)?;
                if !x.is_finite() {
                    return Err(row_err(line, format!("{}: non-finite value", ATTRIBUTES[a])));
                }
                *v = Some(x);
            }
        }
        let city = record[1].to_string();
        let entry = stations.entry(station_id.clone()).or_insert_with(|| {
            let meta = LocationSeries {
                station_id,
                city: city.clone(),
                latitude,
                longitude,
                timestamps: Vec::new(),
                values: vec![Vec::new(); ATTRIBUTES.len()],
            };
            (meta, Vec::new())
        });
        let meta = &entry.0;
        if meta.city != city || meta.latitude != latitude || meta.longitude != longitude {
            return Err(row_err(line, format!("station {} metadata differs from its first row", meta.station_id)));
        }
        entry.1.push((ts, line, vals));
    }

    let mut out = Vec::with_capacity(stations.len());
    for (_, (mut series, mut rows)) in stations {
        rows.sort_by_key(|r| r.0);
        if let Some(pair) = rows.windows(2).find(|p| p[0].0 == p[1].0) {
            return Err(row_err(pair[1].1, format!("duplicate timestamp {} for station {}", pair[1].0, series.station_id)));
        }
        for (ts, _, vals) in rows {
            series.timestamps.push(ts);
            for (row, v) in series.values.iter_mut().zip(vals) {
                row.push(v);
            }
        }
        out.push(series);
    }
    Ok(out)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<LocationSeries>, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
    read_csv(file).map_err(|e| match e {
        IngestError::Row { line, msg } => IngestError::Row { line, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })
}

/// Loads several files, one thread per file. Series keep file order.
pub fn load_many(paths: &[PathBuf]) -> Result<Vec<LocationSeries>, IngestError> {
    let results: Vec<Result<Vec<LocationSeries>, IngestError>> = thread::scope(|s| {
        let handles: Vec<_> = paths.iter().map(|p| s.spawn(move || load_csv(p))).collect();
        handles.into_iter().map(|h| h.join().expect("csv loader panicked")).collect()
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Writes series in the loader's schema; missing values become empty fields.
pub fn write_csv(series: &[LocationSeries], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for s in series {
        for (t, ts) in s.timestamps.iter().enumerate() {
            let mut rec = vec![
                s.station_id.clone(),
                s.city.clone(),
                s.latitude.to_string(),
                s.longitude.to_string(),
                ts.to_rfc3339_opts(SecondsFormat::Secs, true),
            ];
            rec.extend(s.values.iter().map(|row| row[t].map_or_else(String::new, |v| v.to_string())));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Cleans one station onto a gap-free hourly grid.
///
/// Absent hours count as missing values. Per attribute, a run of at most
/// [`MAX_FILL_HOURS`] missing hours that follows an observation is filled
/// with that observation. Hours still missing anything split the series;
/// pieces shorter than `min_len` are dropped with a warning.
pub fn fill_missing(series: &LocationSeries, min_len: usize) -> Result<Vec<LocationSeries>, IngestError> {
    let station = || series.station_id.clone();
    for (a, row) in series.values.iter().enumerate() {
        if row.iter().all(Option::is_none) {
            return Err(IngestError::Attribute { station: station(), attribute: ATTRIBUTES[a] });
        }
    }
    let Some(&start) = series.timestamps.first() else { return Ok(Vec::new()) };

    let mut slots = Vec::with_capacity(series.len());
    for (i, ts) in series.timestamps.iter().enumerate() {
        let secs = (*ts - start).num_seconds();
        if secs % HOUR_SECS != 0 || (*ts - start).subsec_nanos() != 0 {
            return Err(IngestError::Irregular { station: station(), msg: format!("timestamp {ts} is not on the hourly grid") });
        }
        if i > 0 && *ts <= series.timestamps[i - 1] {
            return Err(IngestError::Irregular { station: station(), msg: format!("timestamps not increasing at {ts}") });
        }
        slots.push((secs / HOUR_SECS) as usize);
    }
    let hours = slots.last().map_or(0, |&h| h + 1);
    let mut grid: Vec<Vec<Option<f64>>> = vec![vec![None; hours]; series.values.len()];
    for (row, src) in grid.iter_mut().zip(&series.values) {
        for (&h, v) in slots.iter().zip(src) {
            row[h] = *v;
        }
    }

    for row in &mut grid {
        let mut t = 0;
        while t < hours {
            if row[t].is_some() {
                t += 1;
                continue;
            }
            let end = (t..hours).find(|&j| row[j].is_some()).unwrap_or(hours);
            if t > 0 && end - t <= MAX_FILL_HOURS {
                let prev = row[t - 1];
                row[t..end].iter_mut().for_each(|v| *v = prev);
            }
            t = end;
        }
    }

    let complete = |h: usize| grid.iter().all(|row| row[h].is_some());
    let mut pieces = Vec::new();
    let mut h = 0;
    while h < hours {
        if !complete(h) {
            h += 1;
            continue;
        }
        let end = (h..hours).find(|&j| !complete(j)).unwrap_or(hours);
        if end - h < min_len {
            warn!("station {}: dropping {}-hour segment shorter than {min_len}", series.station_id, end - h);
        } else {
            let mut piece = series.empty_like();
            piece.timestamps = (h..end).map(|j| start + chrono::Duration::hours(j as i64)).collect();
            for (dst, row) in piece.values.iter_mut().zip(&grid) {
                *dst = row[h..end].to_vec();
            }
            pieces.push(piece);
        }
        h = end;
    }
    if pieces.is_empty() {
        warn!("station {}: no segment of at least {min_len} hours; series dropped", series.station_id);
    }
    Ok(pieces)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    ByStation,
    ByCity,
}

/// Groups series into environments keyed by station id or city label.
pub fn partition_environments(series: Vec<LocationSeries>, grouping: Grouping) -> BTreeMap<String, Vec<LocationSeries>> {
    let mut envs: BTreeMap<String, Vec<LocationSeries>> = BTreeMap::new();
    for s in series {
        let key = match grouping {
            Grouping::ByStation => s.station_id.clone(),
            Grouping::ByCity => s.city.clone(),
        };
        envs.entry(key).or_default().push(s);
    }
    envs
}

/// Training input for one environment; every series must be complete.
pub fn to_env_series(env_id: &str, role: Role, series: &[LocationSeries]) -> Option<EnvSeries> {
    let segments = series.iter().map(LocationSeries::to_tensor).collect::<Option<Vec<_>>>()?;
    Some(EnvSeries { env_id: env_id.to_string(), role, segments })
}
