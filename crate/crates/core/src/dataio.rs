//! Datasets and on-disk formats.
//!
//! The synthetic generator is the default data source; IDX files (the MNIST
//! container format) can be read when available locally. Genotypes and
//! checkpoints are JSON, configs are TOML, metrics are CSV.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffgraph::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Synthetic,
    MnistIdx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub input_dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub class_separation: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            input_dim: 16,
            classes: 8,
            n_train: 2048,
            n_test: 1024,
            seed: 0,
            class_separation: 4.0,
        }
    }
}

/// Features (`n x D`, within `[0, 1]`) and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), idx),
            y: idx.iter().map(|i| self.y[*i]).collect(),
            classes: self.classes,
        }
    }

    /// Consecutive batches of `batch` rows in the given order; the last may
    /// be short.
    pub fn batches(&self, order: &[usize], batch: usize) -> Vec<Dataset> {
        order.chunks(batch.max(1)).map(|c| self.subset(c)).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.classes];
        for y in &self.y {
            out[*y] += 1;
        }
        out
    }
}

/// Deterministic permutation of `0..n` for `(seed, epoch)`.
pub fn shuffled(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, tags::SHUFFLE, epoch));
    idx
}

/// Two disjoint halves covering the dataset, chosen by a seeded shuffle.
pub fn split_halves(data: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let mut idx = shuffled(data.len(), seed, u64::MAX);
    let tail = idx.split_off(data.len() / 2);
    (data.subset(&idx), data.subset(&tail))
}

fn blobs(means: &Array2<f64>, n: usize, rng: &mut impl Rng) -> (Tensor, Vec<usize>) {
    let (m, d) = means.dim();
    let mut y: Vec<usize> = (0..n).map(|i| i % m).collect();
    y.shuffle(rng);
    let x = Array2::from_shape_fn((n, d), |(i, j)| means[[y[i], j]] + rng.sample::<f64, _>(StandardNormal));
    (x, y)
}

/// Gaussian blobs with unit-norm mean directions scaled by
/// `class_separation` and unit noise. Labels cycle through the classes, so
/// counts differ by at most one. Train and test share one global affine map
/// onto `[0, 1]`.
pub fn gen_synthetic(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 {
        return Err(Error::domain("synthetic data needs at least two classes"));
    }
    if spec.input_dim == 0 {
        return Err(Error::domain("input_dim must be positive"));
    }
    let mut rng = stream_rng(spec.seed, tags::DATA, 0);
    let mut means = Array2::from_shape_fn((spec.classes, spec.input_dim), |_| rng.sample::<f64, _>(StandardNormal));
    for mut row in means.rows_mut() {
        let n = row.dot(&row).sqrt();
        row *= spec.class_separation / n;
    }
    let (mut xtr, ytr) = blobs(&means, spec.n_train, &mut stream_rng(spec.seed, tags::DATA, 1));
    let (mut xte, yte) = blobs(&means, spec.n_test, &mut stream_rng(spec.seed, tags::DATA, 2));
    let lo = xtr.iter().chain(xte.iter()).copied().fold(f64::INFINITY, f64::min);
    let hi = xtr.iter().chain(xte.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    xtr.mapv_inplace(|v| (v - lo) / span);
    xte.mapv_inplace(|v| (v - lo) / span);
    Ok((
        Dataset {
            x: xtr,
            y: ytr,
            classes: spec.classes,
        },
        Dataset {
            x: xte,
            y: yte,
            classes: spec.classes,
        },
    ))
}

/// Loads the train and test sets described by `spec`.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    match &spec.source {
        DataSource::Synthetic => gen_synthetic(spec),
        DataSource::MnistIdx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let load = |img: &str, lab: &str, n: usize| -> Result<Dataset> {
                let x = read_idx(img)?.to_tensor()?;
                let y = read_idx(lab)?.to_labels()?;
                if x.nrows() != y.len() {
                    return Err(Error::shape("load_dataset", format!("{} images, {} labels", x.nrows(), y.len())));
                }
                let classes = y.iter().max().map_or(0, |m| m + 1).max(spec.classes);
                let d = Dataset { x, y, classes };
                let keep: Vec<usize> = (0..d.len().min(if n == 0 { d.len() } else { n })).collect();
                Ok(d.subset(&keep))
            };
            Ok((
                load(train_images, train_labels, spec.n_train)?,
                load(test_images, test_labels, spec.n_test)?,
            ))
        }
    }
}

/// An IDX array: `dims` in row-major order over unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_UBYTE: u8 = 0x08;

/// Parses a big-endian IDX buffer. Only the unsigned-byte element type is
/// supported.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let fmt = |offset: usize, detail: String| Error::Format { offset, detail };
    if bytes.len() < 4 {
        return Err(fmt(bytes.len(), "truncated magic number".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fmt(0, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(fmt(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(fmt(3, "zero-dimensional array".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for k in 0..rank {
        let at = 4 + 4 * k;
        let Some(b) = bytes.get(at..at + 4) else {
            return Err(fmt(bytes.len(), format!("truncated dimension {k}")));
        };
        dims.push(u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize);
    }
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let end = start + len;
    if bytes.len() < end {
        return Err(fmt(bytes.len(), format!("payload truncated: need {len} bytes from offset {start}")));
    }
    if bytes.len() > end {
        return Err(fmt(end, "trailing bytes after payload".into()));
    }
    Ok(IdxArray {
        dims,
        data: bytes[start..end].to_vec(),
    })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        u32::from_be_bytes([0, 0, IDX_UBYTE, self.dims.len() as u8])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.magic().to_be_bytes().to_vec();
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    /// First dimension as rows, the rest flattened; bytes scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let rows = self.dims[0];
        let cols: usize = self.dims[1..].iter().product();
        Array2::from_shape_vec((rows, cols.max(1)), self.data.iter().map(|b| *b as f64 / 255.0).collect())
            .map_err(|e| Error::shape("IdxArray::to_tensor", e.to_string()))
    }

    pub fn to_labels(&self) -> Result<Vec<usize>> {
        if self.dims.len() != 1 {
            return Err(Error::shape("IdxArray::to_labels", format!("rank {}", self.dims.len())));
        }
        Ok(self.data.iter().map(|b| *b as usize).collect())
    }
}

pub fn write_idx(path: impl AsRef<Path>, arr: &IdxArray) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, arr.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes a value as pretty JSON with exact float round trips.
pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads JSON, first reporting any of `required` top-level keys that are
/// missing.
pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>, required: &[&str]) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    check_keys(&value, required)?;
    Ok(serde_json::from_value(value)?)
}

fn check_keys(value: &serde_json::Value, required: &[&str]) -> Result<()> {
    let missing: Vec<String> = required
        .iter()
        .filter(|k| value.get(**k).is_none())
        .map(|k| k.to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Schema { missing })
    }
}

/// A JSON document carrying a format version.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Versioned<T> {
    version: u32,
    #[serde(flatten)]
    body: T,
}

/// Saves `body` with a version field alongside its own keys.
pub fn save_versioned<T: Serialize>(path: impl AsRef<Path>, version: u32, body: &T) -> Result<()> {
    save_json(path, &Versioned { version, body })
}

/// Loads a document written by [`save_versioned`], rejecting other versions
/// and listing missing keys.
pub fn load_versioned<T: DeserializeOwned>(path: impl AsRef<Path>, version: u32, required: &[&str]) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Schema {
            missing: vec!["version".into()],
        })?;
    if found != version as u64 {
        return Err(Error::Version {
            found: found as u32,
            expected: version,
        });
    }
    check_keys(&value, required)?;
    Ok(serde_json::from_value(value)?)
}

fn collect_keys(prefix: &str, v: &toml::Value, out: &mut BTreeSet<String>) {
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.insert(key.clone());
            collect_keys(&key, child, out);
        }
    }
}

/// Parses TOML into `T`, whose fields all have defaults. Keys that `T` does
/// not know are returned (and logged) as warnings instead of failing.
pub fn parse_toml_config<T>(text: &str) -> Result<(T, Vec<String>)>
where
    T: Serialize + DeserializeOwned + Default,
{
    let given: toml::Value = toml::from_str(text)?;
    let known_value = toml::Value::try_from(T::default())?;
    let mut known = BTreeSet::new();
    collect_keys("", &known_value, &mut known);
    let mut seen = BTreeSet::new();
    collect_keys("", &given, &mut seen);
    let warnings: Vec<String> = seen
        .iter()
        .filter(|k| !known.contains(*k) && !known.iter().any(|p| k.starts_with(&format!("{p}.")) && is_open_table(&known_value, p)))
        .map(|k| format!("unknown config key `{k}` ignored"))
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    let value: T = given.try_into()?;
    Ok((value, warnings))
}

// Tagged enums serialize only their active variant, so keys of other
// variants under such a table are not flagged.
fn is_open_table(root: &toml::Value, path: &str) -> bool {
    let mut v = root;
    for part in path.split('.') {
        match v.get(part) {
            Some(next) => v = next,
            None => return false,
        }
    }
    v.get("kind").is_some()
}

pub fn load_toml_config<T>(path: impl AsRef<Path>) -> Result<(T, Vec<String>)>
where
    T: Serialize + DeserializeOwned + Default,
{
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_toml_config(&text)
}

pub fn save_toml<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = toml::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
