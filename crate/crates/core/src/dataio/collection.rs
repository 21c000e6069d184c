use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `N` aligned series of `T` steps with `d_x` channels each.
///
/// Values are stored series-major (`[N][T][d_x]`). Masked entries hold `NaN`
/// and must never be read as data.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesCollection {
    values: Vec<f64>,
    mask: Option<Vec<bool>>,
    /// `[T, d_u]`, shared by every series.
    pub exogenous: Option<Tensor>,
    pub timestamps: Vec<i64>,
    /// Seconds per step.
    pub frequency: i64,
    pub names: Vec<String>,
    n_series: usize,
    steps: usize,
    channels: usize,
}

impl SeriesCollection {
    pub fn new(
        n_series: usize,
        steps: usize,
        channels: usize,
        values: Vec<f64>,
        timestamps: Vec<i64>,
        frequency: i64,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument("d_x must be >= 1".into()));
        }
        if values.len() != n_series * steps * channels || timestamps.len() != steps {
            return Err(Error::InvalidArgument(format!(
                "{n_series} series x {steps} steps x {channels} channels needs {} values and {steps} timestamps, got {} and {}",
                n_series * steps * channels,
                values.len(),
                timestamps.len()
            )));
        }
        let mask = values
            .iter()
            .any(|v| !v.is_finite())
            .then(|| values.iter().map(|v| v.is_finite()).collect());
        let values = values
            .into_iter()
            .map(|v| if v.is_finite() { v } else { f64::NAN })
            .collect();
        Ok(Self {
            values,
            mask,
            exogenous: None,
            timestamps,
            frequency,
            names: (0..n_series).map(|i| format!("series_{i}")).collect(),
            n_series,
            steps,
            channels,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_series {
            return Err(Error::InvalidArgument(format!(
                "{} names for {} series",
                names.len(),
                self.n_series
            )));
        }
        self.names = names;
        Ok(self)
    }

    pub fn n_series(&self) -> usize {
        self.n_series
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn exogenous_channels(&self) -> usize {
        self.exogenous.as_ref().map_or(0, |e| e.shape()[1])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn has_mask(&self) -> bool {
        self.mask.is_some()
    }

    #[inline]
    pub fn index(&self, series: usize, t: usize, channel: usize) -> usize {
        (series * self.steps + t) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, series: usize, t: usize, channel: usize) -> f64 {
        self.values[self.index(series, t, channel)]
    }

    #[inline]
    pub fn observed(&self, series: usize, t: usize, channel: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[self.index(series, t, channel)])
    }

    /// Values of one series and channel, masked entries as `NaN`.
    pub fn series(&self, series: usize, channel: usize) -> Vec<f64> {
        (0..self.steps).map(|t| self.get(series, t, channel)).collect()
    }

    /// Writes the one-column-per-series layout (`d_x` must be 1).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::InvalidArgument(
                "CSV export needs exactly one channel per series".into(),
            ));
        }
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "date")?;
        for n in &self.names {
            write!(w, ",{n}")?;
        }
        writeln!(w)?;
        for t in 0..self.steps {
            let ts = DateTime::from_timestamp(self.timestamps[t], 0)
                .ok_or_else(|| Error::InvalidArgument(format!("timestamp {}", self.timestamps[t])))?;
            write!(w, "{}", ts.format("%Y-%m-%d %H:%M:%S"))?;
            for i in 0..self.n_series {
                if self.observed(i, t, 0) {
                    // `{:?}` prints the shortest representation that round-trips
                    write!(w, ",{:?}", self.get(i, t, 0))?;
                } else {
                    write!(w, ",")?;
                }
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads the standard long-range-forecasting CSV layout: a header row, a
/// timestamp in the first column, one univariate series per remaining column.
/// Empty cells and `nan` are treated as missing.
pub fn load_csv(path: &Path) -> Result<SeriesCollection> {
    let csv_err = |row: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    if headers.len() < 2 {
        return Err(csv_err(1, "need a timestamp column and at least one series".into()));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let n = names.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut timestamps = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let record = record.map_err(|e| csv_err(row, e.to_string()))?;
        if record.len() != n + 1 {
            return Err(csv_err(
                row,
                format!("expected {} fields, found {}", n + 1, record.len()),
            ));
        }
        let ts = parse_timestamp(&record[0])
            .ok_or_else(|| csv_err(row, format!("unparseable timestamp `{}`", &record[0])))?;
        if let Some(prev) = timestamps.last() {
            if ts <= *prev {
                return Err(csv_err(row, format!("timestamp `{}` is not increasing", &record[0])));
            }
        }
        timestamps.push(ts);
        for (c, field) in record.iter().skip(1).enumerate() {
            let field = field.trim();
            let v = if field.is_empty() || field.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                field
                    .parse::<f64>()
                    .map_err(|_| csv_err(row, format!("unparseable value `{field}`")))?
            };
            columns[c].push(v);
        }
    }
    let steps = timestamps.len();
    if steps == 0 {
        return Err(csv_err(2, "no data rows".into()));
    }
    let frequency = infer_frequency(&timestamps);
    let values = columns.into_iter().flatten().collect();
    SeriesCollection::new(n, steps, 1, values, timestamps, frequency)?.with_names(names)
}

/// Most common step between consecutive timestamps (0 for a single row).
pub fn infer_frequency(timestamps: &[i64]) -> i64 {
    let mut counts: HashMap<i64, usize> = HashMap::new();
    for w in timestamps.windows(2) {
        *counts.entry(w[1] - w[0]).or_default() += 1;
    }
    counts.into_iter().max_by_key(|(d, c)| (*c, -d)).map_or(0, |(d, _)| d)
}

pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M:%S",
        "%Y/%m/%d %H:%M",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d.and_hms_opt(0, 0, 0)?.and_utc().timestamp());
    }
    s.parse::<i64>().ok()
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn toy_file_loads() {
        let f = write_tmp(
            "date,OT\n2020-01-01 00:00:00,1\n2020-01-01 01:00:00,2\n2020-01-01 02:00:00,3\n2020-01-01 03:00:00,4\n2020-01-01 04:00:00,5\n",
        );
        let c = load_csv(f.path()).unwrap();
        assert_eq!((c.n_series(), c.steps(), c.channels()), (1, 5, 1));
        assert_eq!(c.frequency, 3600);
        assert_eq!(c.series(0, 0), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(c.names, vec!["OT"]);
    }

    #[test]
    fn ragged_row_rejected_with_row_number() {
        let f = write_tmp("date,a,b\n2020-01-01,1,2\n2020-01-02,3\n");
        let err = load_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
    }

    #[test]
    fn bad_timestamp_rejected() {
        let f = write_tmp("date,a\n2020-01-01,1\nyesterday,3\n");
        let err = load_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("yesterday"), "{err}");
    }

    #[test]
    fn non_monotone_time_rejected() {
        let f = write_tmp("date,a\n2020-01-02,1\n2020-01-01,3\n");
        let err = load_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("not increasing"), "{err}");
    }

    #[test]
    fn missing_cells_become_masked() {
        let f = write_tmp("date,a\n2020-01-01,1\n2020-01-02,\n2020-01-03,nan\n");
        let c = load_csv(f.path()).unwrap();
        assert!(c.has_mask());
        assert!(c.observed(0, 0, 0));
        assert!(!c.observed(0, 1, 0) && !c.observed(0, 2, 0));
        assert!(c.get(0, 1, 0).is_nan());
    }

    #[test]
    fn export_round_trips() {
        let values = vec![0.1, 1.0 / 3.0, -2.5e-7, 4.0, f64::NAN, 6.25];
        let ts = vec![1_577_836_800, 1_577_840_400, 1_577_844_000];
        let c = SeriesCollection::new(2, 3, 1, values, ts, 3600).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        c.write_csv(f.path()).unwrap();
        let back = load_csv(f.path()).unwrap();
        assert_eq!(back.timestamps, c.timestamps);
        for i in 0..2 {
            for t in 0..3 {
                assert_eq!(back.observed(i, t, 0), c.observed(i, t, 0));
                if c.observed(i, t, 0) {
                    assert_eq!(back.get(i, t, 0), c.get(i, t, 0));
                }
            }
        }
    }
}
