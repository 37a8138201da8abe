//! CSV ingestion, chronological splitting, normalization and sliding windows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LABEL_COLUMN: &str = "label";
pub const DEFAULT_SPLIT: f64 = 0.6;

/// Per-channel statistics fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Population mean and standard deviation per channel. Constant channels
    /// get a standard deviation of 1 and a logged warning.
    pub fn fit(ds: &SeriesDataset) -> Self {
        let (len, n) = (ds.len(), ds.n_channels());
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for c in 0..n {
            let m = (0..len).map(|t| ds.value(t, c)).sum::<f64>() / len as f64;
            let var = (0..len).map(|t| (ds.value(t, c) - m).powi(2)).sum::<f64>() / len as f64;
            let mut s = var.sqrt();
            if !(s > 1e-12) {
                log::warn!(
                    "channel `{}` is constant on the training split; clamping its std to 1",
                    ds.channel_names[c]
                );
                s = 1.0;
            }
            mean[c] = m;
            std[c] = s;
        }
        Normalization { mean, std }
    }

    pub fn is_clamped(&self, channel: usize) -> bool {
        self.std[channel] == 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub channel_names: Vec<String>,
    /// Time-major, `len × n_channels`.
    values: Vec<f64>,
    labels: Vec<u8>,
    /// Time index of the first row in the source series.
    pub start_index: usize,
    pub normalization: Option<Normalization>,
}

impl SeriesDataset {
    pub fn new(channel_names: Vec<String>, values: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let n = channel_names.len();
        if n < 2 {
            return Err(Error::Config(format!(
                "a multivariate series needs at least 2 channels, got {n}"
            )));
        }
        if values.len() != labels.len() * n {
            return Err(Error::Contract(format!(
                "{} values do not form {} rows of {n} channels",
                values.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Contract(format!("label {bad} is not binary")));
        }
        Ok(SeriesDataset {
            channel_names,
            values,
            labels,
            start_index: 0,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.n_channels() + c]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.n_channels();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn has_anomalies(&self) -> bool {
        self.labels.contains(&1)
    }

    /// Rows `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> SeriesDataset {
        let n = self.n_channels();
        SeriesDataset {
            channel_names: self.channel_names.clone(),
            values: self.values[start * n..end * n].to_vec(),
            labels: self.labels[start..end].to_vec(),
            start_index: self.start_index + start,
            normalization: self.normalization.clone(),
        }
    }

    /// Chronological split: the first `round(len·fraction)` rows train.
    pub fn split(&self, fraction: f64) -> Result<(SeriesDataset, SeriesDataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::Config(format!(
                "split fraction must lie in (0, 1), got {fraction}"
            )));
        }
        let cut = (self.len() as f64 * fraction).round() as usize;
        if cut == 0 || cut >= self.len() {
            return Err(Error::Config(format!(
                "split {fraction} of {} rows leaves an empty side",
                self.len()
            )));
        }
        Ok((self.slice(0, cut), self.slice(cut, self.len())))
    }

    /// Applies `norm` to every value and records it.
    pub fn normalized(&self, norm: &Normalization) -> Result<SeriesDataset> {
        let n = self.n_channels();
        if norm.mean.len() != n {
            return Err(Error::Contract(format!(
                "normalization has {} channels, dataset has {n}",
                norm.mean.len()
            )));
        }
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - norm.mean[i % n]) / norm.std[i % n])
            .collect();
        Ok(SeriesDataset {
            values,
            normalization: Some(norm.clone()),
            ..self.clone()
        })
    }
}

/// Reads a CSV with a header row. `label_column = None` treats every column
/// as a channel and labels all rows 0.
pub fn read_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let label_idx = match label_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!(
                "{}: label column `{name}` not found (pass --unlabeled for unlabeled data)",
                path.display()
            ))
        })?),
        None => None,
    };
    let channel_idx: Vec<usize> = (0..headers.len()).filter(|&i| Some(i) != label_idx).collect();
    let names = channel_idx.iter().map(|&i| headers[i].clone()).collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        // row numbers are 1-based data rows (the header is row 0)
        let row = r + 1;
        for &c in &channel_idx {
            let cell = rec.get(c).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[c].clone(),
                detail: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[c].clone(),
                    detail: format!("`{cell}` is not finite"),
                });
            }
            values.push(v);
        }
        let label = match label_idx {
            Some(li) => {
                let cell = rec.get(li).unwrap_or("").trim();
                match cell.parse::<f64>() {
                    Ok(0.0) => 0,
                    Ok(1.0) => 1,
                    _ => {
                        return Err(Error::Parse {
                            row,
                            column: headers[li].clone(),
                            detail: format!("label `{cell}` is not 0 or 1"),
                        })
                    }
                }
            }
            None => 0,
        };
        labels.push(label);
    }
    SeriesDataset::new(names, values, labels)
}

/// Writes channels followed by a `label` column. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv(ds: &SeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut header = ds.channel_names.clone();
    header.push(DEFAULT_LABEL_COLUMN.to_string());
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for t in 0..ds.len() {
        let mut rec: Vec<String> = ds.row(t).iter().map(|v| format!("{v}")).collect();
        rec.push(ds.labels[t].to_string());
        w.write_record(&rec).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads, splits chronologically and normalizes both halves with statistics
/// fitted on the training half only.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: Option<&str>,
    split_fraction: f64,
) -> Result<(SeriesDataset, SeriesDataset)> {
    let raw = read_csv(path, label_column)?;
    let (train, test) = raw.split(split_fraction)?;
    let norm = Normalization::fit(&train);
    Ok((train.normalized(&norm)?, test.normalized(&norm)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Absolute time index of the first covered row.
    pub start: usize,
    pub label: u8,
    /// `T × N`, time-major.
    pub data: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub windows: Vec<Window>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn starts(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.start).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.windows.iter().map(|w| w.label).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartialBatch {
    Keep,
    Drop,
}

/// Relative start offsets: `⌊(L − T)/S⌋ + 1` windows.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be positive".into()));
    }
    if window > len {
        return Err(Error::Config(format!(
            "window length {window} exceeds series length {len}"
        )));
    }
    Ok((0..=(len - window) / stride).map(|k| k * stride).collect())
}

pub fn extract_window(ds: &SeriesDataset, rel_start: usize, window: usize) -> Window {
    let n = ds.n_channels();
    let data = ds.values[rel_start * n..(rel_start + window) * n].to_vec();
    let label = ds.labels[rel_start..rel_start + window].contains(&1) as u8;
    Window {
        start: ds.start_index + rel_start,
        label,
        data: Tensor::new(vec![window, n], data).expect("window slice has the declared shape"),
    }
}

/// Every sliding window of the dataset in chronological order.
pub fn extract_windows(ds: &SeriesDataset, window: usize, stride: usize) -> Result<Vec<Window>> {
    Ok(window_starts(ds.len(), window, stride)?
        .into_iter()
        .map(|s| extract_window(ds, s, window))
        .collect())
}

/// Consecutive batches of `batch` windows. The final short batch is kept for
/// scoring and dropped for training.
pub fn make_windows(
    ds: &SeriesDataset,
    window: usize,
    stride: usize,
    batch: usize,
    partial: PartialBatch,
) -> Result<Vec<WindowBatch>> {
    if batch < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch}")));
    }
    let windows = extract_windows(ds, window, stride)?;
    let mut out = Vec::with_capacity(windows.len().div_ceil(batch));
    for chunk in windows.chunks(batch) {
        if chunk.len() < batch && partial == PartialBatch::Drop {
            continue;
        }
        out.push(WindowBatch {
            windows: chunk.to_vec(),
        });
    }
    Ok(out)
}
