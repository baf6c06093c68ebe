//! Ingestion, chronological splitting, normalization and windowing of
//! multivariate series, plus a synthetic generator with planted groups.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A multivariate series stored variable-major: `values` is `N × L`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    pub values: Array2<f64>,
    pub timestamps: Vec<i64>,
    pub variable_names: Vec<String>,
    pub norm_stats: Option<NormStats>,
    /// Ground-truth group of each variable, when known (synthetic data).
    pub group_labels: Option<Vec<usize>>,
}

impl TimeSeriesDataset {
    pub fn new(values: Array2<f64>, variable_names: Vec<String>) -> Result<Self> {
        let timestamps = (0..values.ncols() as i64).collect();
        Self::with_timestamps(values, timestamps, variable_names)
    }

    pub fn with_timestamps(values: Array2<f64>, timestamps: Vec<i64>, variable_names: Vec<String>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Format("dataset has no variables".into()));
        }
        if variable_names.len() != values.nrows() {
            return Err(Error::Format(format!(
                "{} variable names for {} variables",
                variable_names.len(),
                values.nrows()
            )));
        }
        if timestamps.len() != values.ncols() {
            return Err(Error::Format(format!("{} timestamps for {} steps", timestamps.len(), values.ncols())));
        }
        if let Some(row) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::TimestampOrder { row: row + 1 });
        }
        for ((var, step), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::MissingValue { row: step, column: variable_names[var].clone() });
            }
        }
        Ok(Self { values, timestamps, variable_names, norm_stats: None, group_labels: None })
    }

    pub fn n_vars(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    /// SHA-256 over shape and raw values, hex encoded.
    pub fn content_hash(&self) -> String {
        hash_matrix(&self.values)
    }
}

pub(crate) fn hash_matrix(m: &Array2<f64>) -> String {
    let mut hasher = Sha256::new();
    hasher.update((m.nrows() as u64).to_le_bytes());
    hasher.update((m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// How to interpret the columns of a delimited file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Column holding integer timestamps. When `None`, a column named
    /// `timestamp` is used if present, else steps are numbered from 0.
    pub timestamp_column: Option<String>,
    /// Variable columns in output order. When `None`, every other column.
    pub variables: Option<Vec<String>>,
}

/// Parses a header-row CSV with one row per time step. Row numbers in errors
/// count data rows from 0.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<TimeSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> =
        rdr.headers().map_err(|e| Error::Format(e.to_string()))?.iter().map(str::to_owned).collect();
    let ts_name = schema
        .timestamp_column
        .clone()
        .or_else(|| headers.iter().find(|h| h.eq_ignore_ascii_case("timestamp")).cloned());
    let ts_col = match &ts_name {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Format(format!("timestamp column {name:?} not found")))?,
        ),
        None => None,
    };
    let var_cols: Vec<(usize, String)> = match &schema.variables {
        Some(vars) => vars
            .iter()
            .map(|v| {
                headers
                    .iter()
                    .position(|h| h == v)
                    .map(|i| (i, v.clone()))
                    .ok_or_else(|| Error::Format(format!("variable column {v:?} not found")))
            })
            .collect::<Result<_>>()?,
        None => headers.iter().enumerate().filter(|(i, _)| Some(*i) != ts_col).map(|(i, h)| (i, h.clone())).collect(),
    };
    if var_cols.is_empty() {
        return Err(Error::Format("no variable columns".into()));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); var_cols.len()];
    let mut timestamps = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        if let Some(c) = ts_col {
            let raw = record.get(c).unwrap_or("");
            let ts: i64 = raw
                .parse()
                .map_err(|_| Error::Format(format!("row {row}: timestamp {raw:?} is not an integer")))?;
            if let Some(&prev) = timestamps.last() {
                if ts <= prev {
                    return Err(Error::TimestampOrder { row });
                }
            }
            timestamps.push(ts);
        } else {
            timestamps.push(row as i64);
        }
        for (k, (c, name)) in var_cols.iter().enumerate() {
            let cell = record.get(*c).unwrap_or("");
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => columns[k].push(v),
                _ => return Err(Error::MissingValue { row, column: name.clone() }),
            }
        }
    }
    let len = timestamps.len();
    let n = columns.len();
    let values = Array2::from_shape_vec((n, len), columns.into_iter().flatten().collect())
        .map_err(|e| Error::Format(e.to_string()))?;
    TimeSeriesDataset::with_timestamps(values, timestamps, var_cols.into_iter().map(|(_, n)| n).collect())
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<TimeSeriesDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn write_csv(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    let mut out = String::from("timestamp");
    for name in &ds.variable_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (t, ts) in ds.timestamps.iter().enumerate() {
        out.push_str(&ts.to_string());
        for v in ds.values.column(t) {
            out.push(',');
            out.push_str(&format!("{v:?}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// JSON sidecar describing a raw little-endian tensor file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub n_vars: usize,
    pub length: usize,
    /// `"f64"` or `"f32"`.
    pub dtype: String,
    pub variable_names: Vec<String>,
}

/// Reads `path` (variable-major `n_vars × length` little-endian floats) and
/// its sidecar at `path` with extension `json`.
pub fn load_binary(path: &Path) -> Result<TimeSeriesDataset> {
    let meta_path = path.with_extension("json");
    let meta_raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: TensorMeta = serde_json::from_str(&meta_raw)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let count = meta.n_vars * meta.length;
    let data: Vec<f64> = match meta.dtype.as_str() {
        "f64" if bytes.len() == count * 8 => {
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        }
        "f32" if bytes.len() == count * 4 => {
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        }
        "f64" | "f32" => {
            return Err(Error::Format(format!(
                "{} bytes does not hold {count} {} values",
                bytes.len(),
                meta.dtype
            )))
        }
        other => return Err(Error::Format(format!("unsupported dtype {other:?}"))),
    };
    let values = Array2::from_shape_vec((meta.n_vars, meta.length), data).map_err(|e| Error::Format(e.to_string()))?;
    TimeSeriesDataset::new(values, meta.variable_names)
}

pub fn write_binary(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(ds.values.len() * 8);
    for v in ds.values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = TensorMeta {
        n_vars: ds.n_vars(),
        length: ds.len(),
        dtype: "f64".into(),
        variable_names: ds.variable_names.clone(),
    };
    let meta_path = path.with_extension("json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))
}

/// Loads a `.bin` tensor container or, for any other extension, a CSV file.
pub fn load_dataset(path: &Path, schema: &CsvSchema) -> Result<TimeSeriesDataset> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => load_binary(path),
        _ => load_csv(path, schema),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Contiguous train/validation/test ranges: floor for train and validation,
/// the remainder to test.
pub fn chronological_split(len: usize, ratios: [f64; 3]) -> Result<SplitRanges> {
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {total}, not 1")));
    }
    // the epsilon keeps e.g. 0.7 * 100 from flooring to 69
    let n_train = ((len as f64) * ratios[0] + 1e-9).floor() as usize;
    let n_val = ((len as f64) * ratios[1] + 1e-9).floor() as usize;
    let n_val = n_val.min(len - n_train);
    Ok(SplitRanges { train: 0..n_train, val: n_train..n_train + n_val, test: n_train + n_val..len })
}

/// Per-variable mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(ds: &TimeSeriesDataset, train: Range<usize>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("training range is empty".into()));
        }
        let block = ds.values.slice(s![.., train]);
        let n = block.ncols() as f64;
        let mut mean = Vec::with_capacity(block.nrows());
        let mut std = Vec::with_capacity(block.nrows());
        for (i, row) in block.rows().into_iter().enumerate() {
            let m = row.sum() / n;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd <= 1e-12 * m.abs().max(1.0) {
                return Err(Error::ZeroVariance { name: ds.variable_names[i].clone() });
            }
            mean.push(m);
            std.push(sd);
        }
        Ok(Self { mean, std })
    }

    /// Row `i` of `x` is variable `i`.
    pub fn normalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let (m, sd) = (self.mean[i], self.std[i]);
            row.mapv_inplace(|v| (v - m) / sd);
        }
        out
    }

    pub fn denormalize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let (m, sd) = (self.mean[i], self.std[i]);
            row.mapv_inplace(|v| v * sd + m);
        }
        out
    }
}

/// Returns a normalized copy of `ds` with statistics fitted on `train` only.
pub fn zscore_normalize(ds: &TimeSeriesDataset, train: Range<usize>) -> Result<TimeSeriesDataset> {
    let stats = NormStats::fit(ds, train)?;
    let mut out = ds.clone();
    out.values = stats.normalize(&ds.values);
    out.norm_stats = Some(stats);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `N × T`
    pub input: Array2<f64>,
    /// `N × τ`
    pub target: Array2<f64>,
    pub origin: usize,
}

/// All stride-1 windows fully contained in `range`. With `strict` a range
/// shorter than `input_len + horizon` is an error; otherwise it yields nothing.
pub fn make_windows(
    values: &Array2<f64>,
    input_len: usize,
    horizon: usize,
    range: Range<usize>,
    strict: bool,
) -> Result<Vec<WindowSample>> {
    let width = input_len + horizon;
    if range.len() < width || range.end > values.ncols() {
        if strict || range.end > values.ncols() {
            return Err(Error::RangeTooShort { len: range.len(), input_len, horizon });
        }
        log::warn!("range {range:?} shorter than window width {width}; no windows produced");
        return Ok(Vec::new());
    }
    Ok((range.start..=range.end - width)
        .map(|origin| WindowSample {
            input: values.slice(s![.., origin..origin + input_len]).to_owned(),
            target: values.slice(s![.., origin + input_len..origin + width]).to_owned(),
            origin,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_groups: usize,
    pub vars_per_group: usize,
    pub length: usize,
    pub seed: u64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_groups: 3, vars_per_group: 4, length: 512, seed: 7, noise: 0.1 }
    }
}

/// Variables of one group share a latent mix of a slow (period `L/4`) and a
/// fast (period `L/32`) sinusoid with group-specific amplitudes and phases;
/// each variable scales the latent by its own positive factor and adds noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TimeSeriesDataset> {
    if spec.n_groups == 0 || spec.vars_per_group == 0 || spec.length == 0 {
        return Err(Error::Config("synthetic counts must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let len = spec.length;
    let slow = len as f64 / 4.0;
    let fast = (len as f64 / 32.0).max(2.0);
    let n = spec.n_groups * spec.vars_per_group;
    let mut values = Array2::zeros((n, len));
    let mut names = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for g in 0..spec.n_groups {
        // Each group gets its own slow/fast mix so groups stay apart under warping.
        let mix = (g as f64 + rng.random_range(0.2..0.8)) / spec.n_groups as f64 * FRAC_PI_2;
        let (slow_amp, fast_amp) = (mix.cos(), mix.sin());
        let slow_phase = rng.random_range(0.0..2.0 * PI);
        let fast_phase = rng.random_range(0.0..2.0 * PI);
        let latent: Vec<f64> = (0..len)
            .map(|t| {
                let t = t as f64;
                slow_amp * (2.0 * PI * t / slow + slow_phase).sin() + fast_amp * (2.0 * PI * t / fast + fast_phase).sin()
            })
            .collect();
        for v in 0..spec.vars_per_group {
            let i = g * spec.vars_per_group + v;
            let scale = rng.random_range(0.5..1.5);
            for t in 0..len {
                let eps: f64 = StandardNormal.sample(&mut rng);
                values[[i, t]] = scale * latent[t] + spec.noise * eps;
            }
            names.push(format!("g{g}_v{v}"));
            labels.push(g);
        }
    }
    let mut ds = TimeSeriesDataset::new(values, names)?;
    ds.group_labels = Some(labels);
    Ok(ds)
}
