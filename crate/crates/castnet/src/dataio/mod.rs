//! Data ingestion and preparation: synthetic SVAR generation with known
//! ground truth, CSV load/save, chronological splitting, sliding windows,
//! per-node normalization, and calendar time features.

mod synthetic;

pub use synthetic::{generate_svar, SyntheticGroundTruth, SyntheticSpec};

use chrono::{Datelike, NaiveDateTime, Timelike};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv parse error at {path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("non-uniform timestamps (expected step {expected_mins} min) at rows: {rows:?}")]
    NonUniformTimestamps { expected_mins: i64, rows: Vec<usize> },
    #[error("series of length {len} too short for M={m}, H={h}")]
    SeriesTooShort { len: usize, m: usize, h: usize },
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios(Vec<f64>),
    #[error("split of length {len} cannot hold one window of M+H={need}")]
    SplitTooSmall { len: usize, need: usize },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Number of one-hot calendar features: 12 slots/hour + 24 hours + 7 weekdays.
pub const TIME_FEATURES: usize = 43;

/// A multivariate series on a uniform time grid (5-minute steps by default).
#[derive(Debug, Clone)]
pub struct SeriesTable {
    pub timestamps: Vec<NaiveDateTime>,
    /// `values[[t, i]]` is node `i` at time step `t`.
    pub values: Array2<f64>,
    pub node_ids: Vec<String>,
    /// True where the value was observed (false = filled or absent).
    pub present: Array2<bool>,
}

impl SeriesTable {
    pub fn n_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.values.ncols()
    }

    /// Contiguous row slice `[start, end)` as a new table.
    pub fn slice_rows(&self, start: usize, end: usize) -> SeriesTable {
        SeriesTable {
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values.slice(ndarray::s![start..end, ..]).to_owned(),
            node_ids: self.node_ids.clone(),
            present: self.present.slice(ndarray::s![start..end, ..]).to_owned(),
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("timestamp");
        for id in &self.node_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (t, ts) in self.timestamps.iter().enumerate() {
            out.push_str(&ts.format("%Y-%m-%d %H:%M:%S").to_string());
            for i in 0..self.n_nodes() {
                out.push(',');
                if self.present[[t, i]] {
                    out.push_str(&format!("{}", self.values[[t, i]]));
                }
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| DataError::Io { path: path.display().to_string(), source: e })
    }
}

/// One forecasting sample: `M` input steps and `H` target steps for all nodes.
#[derive(Debug, Clone)]
pub struct TrafficWindow {
    /// Inputs, nodes x M.
    pub x: Array2<f64>,
    /// Targets, nodes x H.
    pub y: Array2<f64>,
    /// Timestamps of the M input steps.
    pub input_times: Vec<NaiveDateTime>,
    /// Timestamps of the H target steps.
    pub target_times: Vec<NaiveDateTime>,
    /// Index of the first input step in the originating split.
    pub origin: usize,
}

/// Calendar one-hots for a run of timestamps: per row, a 5-minute slot within
/// the hour (12), the hour of day (24), and the day of week (7, Monday = 0).
pub fn time_features(timestamps: &[NaiveDateTime]) -> Array2<f64> {
    let mut f = Array2::zeros((timestamps.len(), TIME_FEATURES));
    for (r, ts) in timestamps.iter().enumerate() {
        let slot = (ts.minute() / 5) as usize;
        let hour = ts.hour() as usize;
        let dow = ts.weekday().num_days_from_monday() as usize;
        f[[r, slot]] = 1.0;
        f[[r, 12 + hour]] = 1.0;
        f[[r, 36 + dow]] = 1.0;
    }
    f
}

/// Chronological train/validation/test split, no leakage: windows are built
/// per split, so no (input, target) pair ever crosses a boundary.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: SeriesTable,
    pub val: SeriesTable,
    pub test: SeriesTable,
}

pub fn split(series: &SeriesTable, ratios: [f64; 3], m: usize, h: usize) -> Result<Splits> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(ratios.to_vec()));
    }
    let t = series.n_steps();
    let n_train = (t as f64 * ratios[0]).floor() as usize;
    let n_val = (t as f64 * ratios[1]).floor() as usize;
    let splits = Splits {
        train: series.slice_rows(0, n_train),
        val: series.slice_rows(n_train, n_train + n_val),
        test: series.slice_rows(n_train + n_val, t),
    };
    for part in [&splits.train, &splits.val, &splits.test] {
        if part.n_steps() < m + h {
            return Err(DataError::SplitTooSmall { len: part.n_steps(), need: m + h });
        }
    }
    Ok(splits)
}

/// Stride-1 sliding windows over one split. Windows whose input or target
/// range touches an unobserved (non-forward-fillable) value are dropped.
pub fn windows(series: &SeriesTable, m: usize, h: usize) -> Result<Vec<TrafficWindow>> {
    if m == 0 || h == 0 {
        return Err(DataError::Contract("M and H must be >= 1".into()));
    }
    let t = series.n_steps();
    if t < m + h {
        return Err(DataError::SeriesTooShort { len: t, m, h });
    }
    let n = series.n_nodes();
    let count = t - m - h + 1;
    let mut out = Vec::with_capacity(count);
    'outer: for start in 0..count {
        for step in start..start + m + h {
            for i in 0..n {
                if !series.present[[step, i]] {
                    continue 'outer;
                }
            }
        }
        let x = series
            .values
            .slice(ndarray::s![start..start + m, ..])
            .t()
            .to_owned();
        let y = series
            .values
            .slice(ndarray::s![start + m..start + m + h, ..])
            .t()
            .to_owned();
        out.push(TrafficWindow {
            x,
            y,
            input_times: series.timestamps[start..start + m].to_vec(),
            target_times: series.timestamps[start + m..start + m + h].to_vec(),
            origin: start,
        });
    }
    Ok(out)
}

/// Per-node z-score statistics fitted on the training split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &SeriesTable) -> Normalizer {
        let n = train.n_nodes();
        let t = train.n_steps() as f64;
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for i in 0..n {
            let col = train.values.column(i);
            let mu = col.sum() / t;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / t;
            mean[i] = mu;
            std[i] = var.sqrt().max(1e-12);
        }
        Normalizer { mean, std }
    }

    /// Normalize a nodes x steps array in place.
    pub fn normalize(&self, x: &mut Array2<f64>) {
        for (i, mut row) in x.outer_iter_mut().enumerate() {
            row.mapv_inplace(|v| (v - self.mean[i]) / self.std[i]);
        }
    }

    pub fn denormalize(&self, x: &mut Array2<f64>) {
        for (i, mut row) in x.outer_iter_mut().enumerate() {
            row.mapv_inplace(|v| v * self.std[i] + self.mean[i]);
        }
    }
}

/// Parse an adjacency edge list (`src dst weight`, 0-indexed, `#` comments).
pub fn load_adjacency(path: &Path, n_nodes: usize) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    let mut a = Array2::zeros((n_nodes, n_nodes));
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>, what: &str| -> Result<f64> {
            tok.ok_or_else(|| DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail: format!("missing {what}"),
            })?
            .parse::<f64>()
            .map_err(|e| DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail: format!("{what}: {e}"),
            })
        };
        let src = parse(it.next(), "src")? as usize;
        let dst = parse(it.next(), "dst")? as usize;
        let w = parse(it.next(), "weight")?;
        if src >= n_nodes || dst >= n_nodes {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail: format!("node index out of range 0..{n_nodes}"),
            });
        }
        a[[src, dst]] = w;
    }
    Ok(a)
}

pub fn save_adjacency(a: &ArrayView2<f64>, path: &Path) -> Result<()> {
    let mut out = String::from("# src dst weight\n");
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if a[[i, j]] != 0.0 {
                out.push_str(&format!("{} {} {}\n", i, j, a[[i, j]]));
            }
        }
    }
    std::fs::write(path, out).map_err(|e| DataError::Io { path: path.display().to_string(), source: e })
}

/// Load a series CSV with header `timestamp,<node>,...`. Timestamps must sit
/// on a uniform grid; missing cells are forward-filled up to 3 steps and
/// flagged in the `present` mask beyond that.
pub fn load_csv(path: &Path) -> Result<SeriesTable> {
    const MAX_FFILL: usize = 3;
    let text = std::fs::read_to_string(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DataError::Parse {
        path: path.display().to_string(),
        line: 1,
        detail: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"timestamp") || cols.len() < 2 {
        return Err(DataError::Parse {
            path: path.display().to_string(),
            line: 1,
            detail: "header must be `timestamp,<node>,...`".into(),
        });
    }
    let node_ids: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    let n = node_ids.len();

    let mut timestamps = Vec::new();
    let mut raw: Vec<Option<f64>> = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 1 {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail: format!("expected {} fields, got {}", n + 1, fields.len()),
            });
        }
        let ts = NaiveDateTime::parse_from_str(fields[0], "%Y-%m-%d %H:%M:%S").map_err(|e| {
            DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                detail: format!("timestamp: {e}"),
            }
        })?;
        timestamps.push(ts);
        for f in &fields[1..] {
            if f.is_empty() {
                raw.push(None);
            } else {
                let v = f.parse::<f64>().map_err(|e| DataError::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    detail: format!("value: {e}"),
                })?;
                raw.push(if v.is_nan() { None } else { Some(v) });
            }
        }
    }
    if timestamps.len() < 2 {
        return Err(DataError::Parse {
            path: path.display().to_string(),
            line: 1,
            detail: "need at least two rows".into(),
        });
    }

    let step = timestamps[1] - timestamps[0];
    let mut bad_rows = Vec::new();
    for (r, pair) in timestamps.windows(2).enumerate() {
        if pair[1] - pair[0] != step {
            bad_rows.push(r + 3); // 1-based file line of the offending row
        }
    }
    if !bad_rows.is_empty() {
        return Err(DataError::NonUniformTimestamps {
            expected_mins: step.num_minutes(),
            rows: bad_rows,
        });
    }

    let t = timestamps.len();
    let mut values = Array2::zeros((t, n));
    let mut present = Array2::from_elem((t, n), true);
    for i in 0..n {
        let mut gap = 0usize;
        let mut last: Option<f64> = None;
        for r in 0..t {
            match raw[r * n + i] {
                Some(v) => {
                    values[[r, i]] = v;
                    last = Some(v);
                    gap = 0;
                }
                None => {
                    gap += 1;
                    match last {
                        Some(v) if gap <= MAX_FFILL => values[[r, i]] = v,
                        _ => {
                            values[[r, i]] = last.unwrap_or(0.0);
                            present[[r, i]] = false;
                        }
                    }
                }
            }
        }
    }
    Ok(SeriesTable { timestamps, values, node_ids, present })
}
