//! CSV loading, chronological splits, train-set standardization and sliding windows.

use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use log::warn;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to per-channel standard deviations.
pub const SCALER_EPS: f64 = 1e-8;

/// A timestamped table of `C` real-valued channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateSeries {
    pub timestamps: Vec<String>,
    /// Rows are time steps, columns are channels.
    pub values: Array2<f64>,
    pub channel_names: Vec<String>,
}

impl MultivariateSeries {
    pub fn new(
        timestamps: Vec<String>,
        values: Array2<f64>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Data("series has no rows".into()));
        }
        if values.ncols() != channel_names.len() {
            return Err(Error::Shape(format!(
                "{} value columns but {} channel names",
                values.ncols(),
                channel_names.len()
            )));
        }
        if !timestamps.is_empty() && timestamps.len() != values.nrows() {
            return Err(Error::Shape(format!(
                "{} timestamps for {} rows",
                timestamps.len(),
                values.nrows()
            )));
        }
        Ok(Self {
            timestamps,
            values,
            channel_names,
        })
    }

    /// Series without timestamps; channels are named `ch0..`.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        let names = (0..values.ncols()).map(|c| format!("ch{c}")).collect();
        Self::new(Vec::new(), values, names)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// Rows `[start, end)` as a new series.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let timestamps = if self.timestamps.is_empty() {
            Vec::new()
        } else {
            self.timestamps[start..end].to_vec()
        };
        Self {
            timestamps,
            values: self.values.slice(s![start..end, ..]).to_owned(),
            channel_names: self.channel_names.clone(),
        }
    }
}

/// Noiseless `sin(2πt/24) + sin(2πt/96)` with hourly timestamps from 2020-01-01.
pub fn two_sinusoids(len: usize) -> MultivariateSeries {
    use std::f64::consts::TAU;
    let start = NaiveDate::from_ymd_opt(2020, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let values = Array2::from_shape_fn((len, 1), |(t, _)| {
        let t = t as f64;
        (TAU * t / 24.0).sin() + (TAU * t / 96.0).sin()
    });
    let timestamps = (0..len)
        .map(|t| (start + chrono::Duration::hours(t as i64)).format("%Y-%m-%d %H:%M:%S").to_string())
        .collect();
    MultivariateSeries {
        timestamps,
        values,
        channel_names: vec!["y".into()],
    }
}

/// Write `series` in the layout read by [`read_csv`].
pub fn write_csv<W: std::io::Write>(series: &MultivariateSeries, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Data(e.to_string());
    let mut header = vec!["date".to_string()];
    header.extend(series.channel_names.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for (i, row) in series.values.outer_iter().enumerate() {
        let mut rec = vec![series.timestamps.get(i).cloned().unwrap_or_else(|| i.to_string())];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y/%m/%d %H:%M",
    ];
    for f in FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
            return Some(t);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// Load an ETT-style CSV: a header row, a date column first, numeric channels after it.
///
/// Row numbers in error messages are 1-based data rows (the header is row 0).
pub fn load_csv(path: impl AsRef<Path>) -> Result<MultivariateSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parse CSV content from any reader. See [`load_csv`].
pub fn read_csv<R: std::io::Read>(reader: R) -> Result<MultivariateSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(Error::Data("empty file".into()));
    }
    if headers.len() < 2 {
        return Err(Error::Data(
            "header must contain a date column and at least one channel".into(),
        ));
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let c = channel_names.len();

    let mut timestamps = Vec::new();
    let mut flat = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        if rec.len() != c + 1 {
            return Err(Error::Data(format!(
                "row {row}: expected {} fields, found {}",
                c + 1,
                rec.len()
            )));
        }
        timestamps.push(rec[0].trim().to_string());
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "row {row}, column {} ({}): non-numeric value {cell:?}",
                    j + 2,
                    channel_names[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "row {row}, column {} ({}): non-finite value",
                    j + 2,
                    channel_names[j]
                )));
            }
            flat.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data("empty file: no data rows".into()));
    }

    let parsed: Vec<Option<NaiveDateTime>> = timestamps.iter().map(|t| parse_timestamp(t)).collect();
    if parsed.iter().all(Option::is_some) {
        for (i, w) in parsed.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Data(format!(
                    "row {}: timestamp {} is not after {}",
                    i + 2,
                    timestamps[i + 1],
                    timestamps[i]
                )));
            }
        }
    }

    let rows = timestamps.len();
    let values = Array2::from_shape_vec((rows, c), flat)
        .map_err(|e| Error::Shape(e.to_string()))?;
    MultivariateSeries::new(timestamps, values, channel_names)
}

/// Chronological train/validation/test step counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
}

impl SplitSpec {
    pub fn new(train_len: usize, val_len: usize, test_len: usize) -> Self {
        Self {
            train_len,
            val_len,
            test_len,
        }
    }

    pub fn total(&self) -> usize {
        self.train_len + self.val_len + self.test_len
    }
}

/// The three contiguous slices produced by [`split`].
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: MultivariateSeries,
    pub val: MultivariateSeries,
    pub test: MultivariateSeries,
}

/// Contiguous chronological slices: train, then validation, then test.
pub fn split(series: &MultivariateSeries, spec: SplitSpec) -> Result<Splits> {
    if spec.total() > series.len() {
        return Err(Error::Data(format!(
            "split ({}, {}, {}) needs {} rows but the series has {}",
            spec.train_len,
            spec.val_len,
            spec.test_len,
            spec.total(),
            series.len()
        )));
    }
    if spec.train_len == 0 {
        return Err(Error::Data("train split is empty".into()));
    }
    let a = spec.train_len;
    let b = a + spec.val_len;
    let c = b + spec.test_len;
    Ok(Splits {
        train: series.slice_rows(0, a),
        val: series.slice_rows(a, b),
        test: series.slice_rows(b, c),
    })
}

/// Which split a set of windows is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" | "validation" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

/// Rows of `series` whose windows belong to `kind`.
///
/// With `border_overlap`, validation and test segments start `lookback` rows
/// early so their first window may borrow context from the preceding split.
/// Returns `(first_row, end_row)` into the full series.
pub fn split_segment(
    spec: SplitSpec,
    kind: SplitKind,
    lookback: usize,
    border_overlap: bool,
) -> (usize, usize) {
    let a = spec.train_len;
    let b = a + spec.val_len;
    let c = b + spec.test_len;
    let (start, end) = match kind {
        SplitKind::Train => return (0, a),
        SplitKind::Val => (a, b),
        SplitKind::Test => (b, c),
    };
    if border_overlap {
        (start.saturating_sub(lookback), end)
    } else {
        (start, end)
    }
}

/// Per-channel mean and standard deviation fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fit a z-score scaler (population standard deviation) on `train`.
pub fn fit_scaler(train: &MultivariateSeries) -> Result<Scaler> {
    fit_scaler_values(train.values.view(), &train.channel_names)
}

fn fit_scaler_values(values: ArrayView2<f64>, names: &[String]) -> Result<Scaler> {
    if values.nrows() == 0 {
        return Err(Error::Data("cannot fit scaler on an empty split".into()));
    }
    let n = values.nrows() as f64;
    let mut mean = Vec::with_capacity(values.ncols());
    let mut std = Vec::with_capacity(values.ncols());
    for (j, col) in values.axis_iter(Axis(1)).enumerate() {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let mut sd = var.sqrt();
        if sd < SCALER_EPS {
            warn!(
                "channel {} is constant on the training split; std clamped to {SCALER_EPS}",
                names.get(j).map(String::as_str).unwrap_or("?")
            );
            sd = SCALER_EPS;
        }
        mean.push(m);
        std.push(sd);
    }
    Ok(Scaler { mean, std })
}

impl Scaler {
    fn check(&self, c: usize) -> Result<()> {
        if self.mean.len() != c {
            return Err(Error::Shape(format!(
                "scaler has {} channels, series has {c}",
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn transform_values(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(values.ncols())?;
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        Ok((values - &mean) / &std)
    }

    pub fn inverse_values(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(values.ncols())?;
        let mean = Array1::from(self.mean.clone());
        let std = Array1::from(self.std.clone());
        Ok(values * &std + &mean)
    }

    pub fn inverse_transform(&self, series: &MultivariateSeries) -> Result<MultivariateSeries> {
        Ok(MultivariateSeries {
            values: self.inverse_values(&series.values)?,
            ..series.clone()
        })
    }
}

/// Standardize `series` with a previously fitted scaler.
pub fn apply_scaler(series: &MultivariateSeries, scaler: &Scaler) -> Result<MultivariateSeries> {
    Ok(MultivariateSeries {
        values: scaler.transform_values(&series.values)?,
        ..series.clone()
    })
}

/// A lookback window and the horizon that immediately follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    /// `L x C`
    pub lookback: Array2<f64>,
    /// `T x C`
    pub target: Array2<f64>,
}

/// Start rows of every window of a series of `len` rows.
pub fn window_starts(len: usize, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("window stride must be >= 1".into()));
    }
    if lookback == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("lookback and horizon must be >= 1".into()));
    }
    if len < lookback + horizon {
        return Err(Error::Data(format!(
            "series of {len} rows is shorter than lookback + horizon = {}",
            lookback + horizon
        )));
    }
    let count = (len - lookback - horizon) / stride + 1;
    Ok((0..count).map(|i| i * stride).collect())
}

/// Sliding lookback/target pairs; window `i` starts at row `i * stride`.
pub fn make_windows(
    series: &MultivariateSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowPair>> {
    let starts = window_starts(series.len(), lookback, horizon, stride)?;
    Ok(starts
        .into_iter()
        .map(|s0| WindowPair {
            lookback: series.values.slice(s![s0..s0 + lookback, ..]).to_owned(),
            target: series
                .values
                .slice(s![s0 + lookback..s0 + lookback + horizon, ..])
                .to_owned(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn series(values: Array2<f64>) -> MultivariateSeries {
        MultivariateSeries::from_values(values).unwrap()
    }

    #[test]
    fn parses_small_csv() {
        let text = "date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,4\n2020-01-01 02:00:00,5,6\n";
        let s = read_csv(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.channels(), 2);
        assert_eq!(s.channel_names, vec!["a", "b"]);
        assert_eq!(s.values, array![[1., 2.], [3., 4.], [5., 6.]]);
    }

    #[test]
    fn non_numeric_cell_names_the_row() {
        let mut text = String::from("date,a\n");
        for i in 0..6 {
            let v = if i == 4 { "oops".to_string() } else { i.to_string() };
            text.push_str(&format!("2020-01-0{} 00:00:00,{v}\n", i + 1));
        }
        let err = read_csv(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("row 5"), "{err}");
        assert!(err.contains("column 2"), "{err}");
    }

    #[test]
    fn ragged_and_empty_inputs_fail() {
        assert!(read_csv("date,a,b\nx,1\n".as_bytes()).is_err());
        assert!(read_csv("".as_bytes()).is_err());
        assert!(read_csv("date,a\n".as_bytes()).is_err());
    }

    #[test]
    fn decreasing_timestamps_rejected() {
        let text = "date,a\n2020-01-02,1\n2020-01-01,2\n";
        assert!(read_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn split_slices_in_order() {
        let s = series(Array2::from_shape_fn((10, 1), |(i, _)| i as f64));
        let sp = split(&s, SplitSpec::new(6, 2, 2)).unwrap();
        assert_eq!(sp.train.values.column(0).to_vec(), vec![0., 1., 2., 3., 4., 5.]);
        assert_eq!(sp.val.values.column(0).to_vec(), vec![6., 7.]);
        assert_eq!(sp.test.values.column(0).to_vec(), vec![8., 9.]);
        assert!(split(&s, SplitSpec::new(9, 2, 2)).is_err());
    }

    #[test]
    fn scaler_standardizes_training_split() {
        let s = series(array![[1.0], [2.0], [3.0]]);
        let sc = fit_scaler(&s).unwrap();
        assert_eq!(sc.mean, vec![2.0]);
        let z = apply_scaler(&s, &sc).unwrap();
        let col = z.values.column(0);
        assert!((col[0] + col[2]).abs() < 1e-12);
        assert!(col[1].abs() < 1e-12);
        let var = col.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_channel_is_clamped() {
        let s = series(array![[5.0], [5.0], [5.0]]);
        let sc = fit_scaler(&s).unwrap();
        assert_eq!(sc.std, vec![SCALER_EPS]);
        let z = apply_scaler(&s, &sc).unwrap();
        assert!(z.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scaler_channels_permute() {
        let s = series(array![[1.0, 10.0], [2.0, 30.0], [4.0, 20.0]]);
        let swapped = series(array![[10.0, 1.0], [30.0, 2.0], [20.0, 4.0]]);
        let a = fit_scaler(&s).unwrap();
        let b = fit_scaler(&swapped).unwrap();
        assert_eq!(a.mean, vec![b.mean[1], b.mean[0]]);
        assert_eq!(a.std, vec![b.std[1], b.std[0]]);
    }

    #[test]
    fn window_counts() {
        let s = series(Array2::from_shape_fn((10, 2), |(i, j)| (i * 2 + j) as f64));
        assert_eq!(make_windows(&s, 4, 2, 1).unwrap().len(), 5);
        let w = make_windows(&s, 4, 2, 4).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].lookback[[0, 0]], 0.0);
        assert_eq!(w[1].lookback[[0, 0]], 8.0);
        assert_eq!(w[1].target.shape(), &[2, 2]);
        let short = series(Array2::zeros((5, 1)));
        assert!(make_windows(&short, 4, 2, 1).is_err());
    }

    #[test]
    fn segments_borrow_lookback_context() {
        let spec = SplitSpec::new(100, 20, 30);
        assert_eq!(split_segment(spec, SplitKind::Train, 8, true), (0, 100));
        assert_eq!(split_segment(spec, SplitKind::Val, 8, true), (92, 120));
        assert_eq!(split_segment(spec, SplitKind::Test, 8, false), (120, 150));
    }
}
