//! CSV ingestion, chronological splits, train-only standardization and
//! sliding-window examples.

use std::io::Read;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// A multivariate series: `values` is `[T × C]`, one row per timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesTable {
    pub timestamps: Vec<String>,
    pub values: Tensor,
    pub channel_names: Vec<String>,
}

impl TimeSeriesTable {
    pub fn new(
        timestamps: Vec<String>,
        values: Tensor,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let s = values.shape();
        if s.len() != 2 || s[0] != timestamps.len() || s[1] != channel_names.len() {
            return Err(Error::Data(format!(
                "values {s:?} do not match {} timestamps x {} channels",
                timestamps.len(),
                channel_names.len()
            )));
        }
        Ok(TimeSeriesTable {
            timestamps,
            values,
            channel_names,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Writes the table back out in the same layout [`load_csv`] reads.
    pub fn write_csv(&self, path: &Path, date_column: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec![date_column.to_string()];
        header.extend(self.channel_names.iter().cloned());
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (ts, row) in self.timestamps.iter().zip(self.values.rows()) {
            let mut rec = vec![ts.clone()];
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Loads a header-first CSV with one date column; every other column is a channel.
pub fn load_csv(path: &Path, date_column: &str) -> Result<TimeSeriesTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, date_column).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_csv(reader: impl Read, date_column: &str) -> Result<TimeSeriesTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    for (i, name) in header.iter().enumerate() {
        if header[..i].contains(name) {
            return Err(Error::Data(format!("duplicate column name `{name}`")));
        }
    }
    let date_idx = header
        .iter()
        .position(|h| h == date_column)
        .ok_or_else(|| Error::Data(format!("no date column `{date_column}` in header")))?;
    let channel_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != date_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if channel_names.is_empty() {
        return Err(Error::Data("no value columns".into()));
    }

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        // Line 1 is the header.
        let line = r + 2;
        let record = record.map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        for (col, field) in record.iter().enumerate() {
            let field = field.trim();
            if col == date_idx {
                timestamps.push(field.to_string());
                continue;
            }
            let name = &header[col];
            if field.is_empty() {
                return Err(Error::Data(format!(
                    "missing value at line {line}, column `{name}`"
                )));
            }
            let v: f64 = field.parse().map_err(|_| {
                Error::Data(format!(
                    "non-numeric value `{field}` at line {line}, column `{name}`"
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite value `{field}` at line {line}, column `{name}`"
                )));
            }
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    check_timestamp_order(&timestamps)?;
    let values = Tensor::new(&[timestamps.len(), channel_names.len()], values)?;
    TimeSeriesTable::new(timestamps, values, channel_names)
}

/// ISO-8601-looking stamps (`YYYY-MM-DD...`) sort lexicographically, so they
/// must be strictly increasing. Anything else is treated as an opaque label.
fn check_timestamp_order(stamps: &[String]) -> Result<()> {
    let iso = |s: &str| {
        let b = s.as_bytes();
        b.len() >= 10
            && b[..4].iter().all(u8::is_ascii_digit)
            && b[4] == b'-'
            && b[5..7].iter().all(u8::is_ascii_digit)
            && b[7] == b'-'
            && b[8..10].iter().all(u8::is_ascii_digit)
    };
    if !stamps.iter().all(|s| iso(s)) {
        return Ok(());
    }
    match stamps.windows(2).position(|w| w[0] >= w[1]) {
        Some(i) => Err(Error::Data(format!(
            "timestamps not strictly increasing at line {}: `{}` after `{}`",
            i + 3,
            stamps[i + 1],
            stamps[i]
        ))),
        None => Ok(()),
    }
}

/// How rows are divided into train / validation / test.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitPreset {
    /// 12/4/4 months of hourly data: 8640/2880/2880 rows.
    EttHourly,
    /// The same months at 15-minute cadence: 34560/11520/11520 rows.
    EttQuarter,
    /// Fractions of the table, 0.7/0.1/0.2.
    Generic,
    Fractions {
        train: f64,
        val: f64,
        test: f64,
    },
}

impl SplitPreset {
    pub fn name(&self) -> String {
        match self {
            SplitPreset::EttHourly => "ett-hourly".into(),
            SplitPreset::EttQuarter => "ett-quarter".into(),
            SplitPreset::Generic => "generic".into(),
            SplitPreset::Fractions { train, val, test } => format!("{train},{val},{test}"),
        }
    }
}

impl std::str::FromStr for SplitPreset {
    type Err = Error;

    /// `ett-hourly`, `ett-quarter`, `generic`, or three comma-separated fractions.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ett-hourly" => Ok(SplitPreset::EttHourly),
            "ett-quarter" => Ok(SplitPreset::EttQuarter),
            "generic" => Ok(SplitPreset::Generic),
            other => {
                let parts: Vec<f64> = other
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("unknown split preset `{other}`")))?;
                match parts[..] {
                    [train, val, test] => Ok(SplitPreset::Fractions { train, val, test }),
                    _ => Err(Error::Config(format!(
                        "split fractions need three values, got `{other}`"
                    ))),
                }
            }
        }
    }
}

/// Contiguous, ordered, non-overlapping row ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn chronological_split(rows: usize, preset: &SplitPreset) -> Result<SplitRanges> {
    let counts = |train: usize, val: usize, test: usize| -> Result<SplitRanges> {
        if train + val + test > rows {
            return Err(Error::Config(format!(
                "split {train}/{val}/{test} needs {} rows, table has {rows}",
                train + val + test
            )));
        }
        Ok(SplitRanges {
            train: 0..train,
            val: train..train + val,
            test: train + val..train + val + test,
        })
    };
    let (train, val, test) = match *preset {
        SplitPreset::EttHourly => return counts(8640, 2880, 2880),
        SplitPreset::EttQuarter => return counts(4 * 8640, 4 * 2880, 4 * 2880),
        SplitPreset::Generic => (0.7, 0.1, 0.2),
        SplitPreset::Fractions { train, val, test } => (train, val, test),
    };
    let all_positive = [train, val, test].iter().all(|f| f.is_finite() && *f > 0.0);
    if !all_positive || train + val + test > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "split fractions ({train}, {val}, {test}) must be positive and sum to at most 1"
        )));
    }
    // The small offset keeps products like 0.7 * 100 = 70.00000000000001
    // or 0.29 * 100 = 28.999999999999996 on the intended integer.
    let take = |f: f64| (f * rows as f64 + 1e-9).floor() as usize;
    counts(take(train), take(val), take(test))
}

/// Per-channel standardization statistics fitted on training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    const STD_FLOOR: f64 = 1e-8;

    /// Two-pass population mean and standard deviation over `rows` of a `[T × C]` table.
    pub fn fit(values: &Tensor, rows: Range<usize>) -> Result<Self> {
        if rows.is_empty() || rows.end > values.shape()[0] {
            return Err(Error::Contract(format!(
                "cannot fit a scaler on rows {rows:?} of a {}-row table",
                values.shape()[0]
            )));
        }
        let c = values.shape()[1];
        let n = rows.len() as f64;
        let data = values.data();
        let mut mean = vec![0.0; c];
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(&data[r * c..(r + 1) * c]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(&data[r * c..(r + 1) * c]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| (s / n).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(Scaler { mean, std })
    }

    /// Standardizes a `[T × C]` table.
    pub fn transform(&self, values: &Tensor) -> Tensor {
        let c = self.mean.len();
        Tensor::from_fn(values.shape(), |i| {
            (values.data()[i] - self.mean[i % c]) / self.std[i % c]
        })
    }

    /// Maps a standardized `[.., C, P]` block back to raw units.
    pub fn inverse_channel_major(&self, y: &Tensor) -> Tensor {
        let s = y.shape();
        let (c, p) = (s[s.len() - 2], s[s.len() - 1]);
        assert_eq!(c, self.mean.len(), "channel count");
        Tensor::from_fn(s, |i| {
            let ch = (i / p) % c;
            y.data()[i] * self.std[ch] + self.mean[ch]
        })
    }
}

/// Fits a [`Scaler`] on `train` rows and applies it to the whole table.
pub fn standardize(
    table: &TimeSeriesTable,
    train: Range<usize>,
) -> Result<(TimeSeriesTable, Scaler)> {
    let scaler = Scaler::fit(&table.values, train)?;
    let scaled = TimeSeriesTable {
        timestamps: table.timestamps.clone(),
        values: scaler.transform(&table.values),
        channel_names: table.channel_names.clone(),
    };
    Ok((scaled, scaler))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            lookback: 336,
            horizon: 96,
            stride: 1,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "lookback, horizon and stride must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((rows − L − P) / stride) + 1`, or 0 when the rows cannot hold one window.
    pub fn count(&self, rows: usize) -> usize {
        match rows.checked_sub(self.lookback + self.horizon) {
            Some(room) => room / self.stride + 1,
            None => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Sliding-window examples over one split.
///
/// Windows are materialized on demand from a shared channel-major copy of
/// the standardized series.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    pub split: Split,
    pub spec: WindowSpec,
    pub scaler: Scaler,
    /// `[C × T]`, channel-major.
    series: Arc<Vec<f64>>,
    rows: usize,
    channels: usize,
    starts: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// First row of each window's lookback.
    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    /// Row ranges `(input, target)` of window `i`.
    pub fn window_rows(&self, i: usize) -> (Range<usize>, Range<usize>) {
        let s = self.starts[i];
        let mid = s + self.spec.lookback;
        (s..mid, mid..mid + self.spec.horizon)
    }

    fn fill(&self, rows: Range<usize>, out: &mut Vec<f64>) {
        for c in 0..self.channels {
            let base = c * self.rows;
            out.extend_from_slice(&self.series[base + rows.start..base + rows.end]);
        }
    }

    /// Stacks windows into `inputs [b × C × L]` and `targets [b × C × P]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let (c, l, p) = (self.channels, self.spec.lookback, self.spec.horizon);
        let mut inputs = Vec::with_capacity(indices.len() * c * l);
        let mut targets = Vec::with_capacity(indices.len() * c * p);
        for &i in indices {
            let (x, y) = self.window_rows(i);
            self.fill(x, &mut inputs);
            self.fill(y, &mut targets);
        }
        Ok(Batch {
            inputs: Tensor::new(&[indices.len(), c, l], inputs)?,
            targets: Tensor::new(&[indices.len(), c, p], targets)?,
            indices: indices.to_vec(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    /// Non-fatal problems, e.g. an empty validation split.
    pub warnings: Vec<String>,
}

/// Slices a standardized table into windows per split.
///
/// Training windows lie entirely inside the training rows. Validation and
/// test windows may take lookback context from the rows before their split,
/// but every target row lies inside the split.
pub fn make_windows(
    table: &TimeSeriesTable,
    ranges: &SplitRanges,
    spec: WindowSpec,
    scaler: &Scaler,
) -> Result<Datasets> {
    spec.validate()?;
    let (rows, channels) = (table.rows(), table.channels());
    let mut series = Vec::with_capacity(rows * channels);
    for c in 0..channels {
        series.extend((0..rows).map(|r| table.values.data()[r * channels + c]));
    }
    let series = Arc::new(series);

    let make = |split: Split, range: &Range<usize>, reach_back: bool| {
        let first = if reach_back {
            range.start.saturating_sub(spec.lookback)
        } else {
            range.start
        };
        let n = spec.count(range.end - first);
        WindowedDataset {
            split,
            spec,
            scaler: scaler.clone(),
            series: Arc::clone(&series),
            rows,
            channels,
            starts: (0..n).map(|i| first + i * spec.stride).collect(),
        }
    };
    let train = make(Split::Train, &ranges.train, false);
    if train.is_empty() {
        return Err(Error::Config(format!(
            "training split of {} rows holds no window of lookback {} + horizon {}",
            ranges.train.len(),
            spec.lookback,
            spec.horizon
        )));
    }
    let val = make(Split::Val, &ranges.val, true);
    let test = make(Split::Test, &ranges.test, true);
    let warnings = [&val, &test]
        .iter()
        .filter(|d| d.is_empty())
        .map(|d| format!("{} split holds no windows", d.split.name()))
        .collect();
    Ok(Datasets {
        train,
        val,
        test,
        warnings,
    })
}

/// Index batches for one epoch: every window exactly once, the last batch
/// possibly short. Shuffling is a seeded permutation.
pub fn batch_indices(len: usize, batch_size: usize, shuffle: bool, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Materialized batches for one epoch; see [`batch_indices`].
pub fn batches<'a>(
    dataset: &'a WindowedDataset,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> impl Iterator<Item = Result<Batch>> + 'a {
    batch_indices(dataset.len(), batch_size, shuffle, seed)
        .into_iter()
        .map(move |idx| dataset.batch(&idx))
}

/// Deterministic two-channel sum-of-sinusoids series with mild noise, used
/// for smoke tests and the bundled example dataset.
pub fn synthetic_series(rows: usize, seed: u64) -> TimeSeriesTable {
    use rand_distr::{Distribution, Normal};
    let mut rng = Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let tau = std::f64::consts::TAU;
    let mut values = Vec::with_capacity(rows * 2);
    for t in 0..rows {
        let t = t as f64;
        let a = (tau * t / 24.0).sin() + 0.5 * (tau * t / 60.0).sin() + noise.sample(&mut rng);
        let b = 0.8 * (tau * t / 36.0 + 1.0).cos()
            + 0.3 * (tau * t / 12.0).sin()
            + 0.002 * t
            + noise.sample(&mut rng);
        values.extend([a, b]);
    }
    let timestamps = (0..rows).map(|t| format!("t{t:05}")).collect();
    TimeSeriesTable::new(
        timestamps,
        Tensor::new(&[rows, 2], values).expect("shape"),
        vec!["wave_a".into(), "wave_b".into()],
    )
    .expect("consistent table")
}
