//! Datasets: CSV ingestion, train-statistics standardization and a synthetic
//! GP sample generator.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::{self, HyperParams, KernelSpec};
use crate::seeding::stream_rng;

/// Inputs and targets plus the affine map back to the original units.
///
/// `raw = standardized · std + mean`, column-wise for inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    pub standardized: bool,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::input(format!(
                "{} input rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        let d = x.ncols();
        Ok(Self {
            x,
            y,
            feature_means: vec![0.0; d],
            feature_stds: vec![1.0; d],
            target_mean: 0.0,
            target_std: 1.0,
            standardized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let x = self.x.select_rows(indices);
        let y = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.y[i]));
        (x, y)
    }

    /// Inputs in original units.
    pub fn raw_x(&self) -> DMatrix<f64> {
        let mut x = self.x.clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.apply(|v| *v = *v * self.feature_stds[j] + self.feature_means[j]);
        }
        x
    }

    /// Targets in original units.
    pub fn raw_y(&self) -> DVector<f64> {
        self.y.map(|v| v * self.target_std + self.target_mean)
    }

    /// First `n_train` rows and the rest.
    pub fn split(&self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train > self.len() {
            return Err(Error::input(format!(
                "cannot take {n_train} training rows from {}",
                self.len()
            )));
        }
        let take = |rows: Vec<usize>| {
            let (x, y) = self.subset(&rows);
            Dataset { x, y, ..self.clone() }
        };
        Ok((
            take((0..n_train).collect()),
            take((n_train..self.len()).collect()),
        ))
    }
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

const CONSTANT_STD: f64 = 1e-12;

/// Standardizes both sets with statistics computed on `train` only.
///
/// Constant columns (std below 1e-12) are centered but not scaled. Scaling
/// composes with any transform already recorded on the inputs.
pub fn standardize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset)> {
    if train.is_empty() {
        return Err(Error::input("cannot standardize with an empty training set"));
    }
    if train.dim() != test.dim() {
        return Err(Error::input(format!(
            "train has {} features, test has {}",
            train.dim(),
            test.dim()
        )));
    }
    let d = train.dim();
    let col_stats: Vec<(f64, f64)> = (0..d)
        .map(|j| {
            let (m, s) = mean_std(train.x.column(j).iter().copied());
            (m, if s < CONSTANT_STD { 1.0 } else { s })
        })
        .collect();
    let (ym, ys) = mean_std(train.y.iter().copied());
    let ys = if ys < CONSTANT_STD { 1.0 } else { ys };

    let apply = |ds: &Dataset| {
        let mut x = ds.x.clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            let (m, s) = col_stats[j];
            col.apply(|v| *v = (*v - m) / s);
        }
        Dataset {
            x,
            y: ds.y.map(|v| (v - ym) / ys),
            feature_means: (0..d)
                .map(|j| ds.feature_means[j] + ds.feature_stds[j] * col_stats[j].0)
                .collect(),
            feature_stds: (0..d).map(|j| ds.feature_stds[j] * col_stats[j].1).collect(),
            target_mean: ds.target_mean + ds.target_std * ym,
            target_std: ds.target_std * ys,
            standardized: true,
        }
    };
    Ok((apply(train), apply(test)))
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

/// Reads a comma-separated numeric file whose last column is the target.
///
/// A first line that does not parse as numbers is treated as a header.
/// Files ending in `.gz` are decompressed transparently.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(open_maybe_gz(path)?);

    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut width: Option<usize> = None;
    let mut values: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> = rec.iter().map(str::parse::<f64>).collect();
        if i == 0 && parsed.iter().any(|p| p.is_err()) {
            width = Some(rec.len());
            continue;
        }
        match width {
            Some(w) if w != rec.len() => {
                return Err(parse_err(line, format!("expected {w} fields, found {}", rec.len())))
            }
            _ => width = Some(rec.len()),
        }
        for (col, p) in parsed.into_iter().enumerate() {
            let v = p.map_err(|_| {
                parse_err(line, format!("column {}: `{}` is not a number", col + 1, &rec[col]))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let w = width.unwrap_or(0);
    if rows == 0 {
        return Err(parse_err(0, "no data rows".into()));
    }
    if w < 2 {
        return Err(parse_err(1, "need at least one feature column and a target column".into()));
    }
    let all = DMatrix::from_row_slice(rows, w, &values);
    let x = all.columns(0, w - 1).into_owned();
    let y = all.column(w - 1).into_owned();
    Dataset::new(x, y)
}

/// Writes inputs and targets in original units, gzip-compressed for `.gz` paths.
pub fn write_csv(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out: Box<dyn Write> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzEncoder::new(BufWriter::new(file), flate2::Compression::default()))
    } else {
        Box::new(BufWriter::new(file))
    };
    let (x, y) = (ds.raw_x(), ds.raw_y());
    let header: Vec<String> = (0..ds.dim())
        .map(|j| format!("x{}", j + 1))
        .chain(std::iter::once("y".to_string()))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io_err)?;
    for i in 0..ds.len() {
        let row: Vec<String> = x
            .row(i)
            .iter()
            .chain(std::iter::once(&y[i]))
            .map(|v| format!("{v:?}"))
            .collect();
        writeln!(out, "{}", row.join(",")).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// A synthetic draw together with the noise-free latent function values.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub data: Dataset,
    pub latent: DVector<f64>,
}

/// Samples `n` points with inputs uniform on `[-3, 3]^d` and targets from the
/// GP prior plus Gaussian noise. With `heteroscedastic`, the noise standard
/// deviation is multiplied by `1 + |x₁|`.
pub fn synthetic_gp_sample(
    n: usize,
    d: usize,
    spec: &KernelSpec,
    params: &HyperParams,
    heteroscedastic: bool,
    seed: u64,
) -> Result<SyntheticSample> {
    if n == 0 {
        return Err(Error::input("synthetic dataset needs at least one point"));
    }
    if spec.input_dim() != d {
        return Err(Error::input(format!(
            "kernel is over {} inputs, requested d = {d}",
            spec.input_dim()
        )));
    }
    params.validate(spec)?;
    let mut rng = stream_rng(seed, 10);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-3.0..3.0));
    let mut k = kernel::self_cov(spec, params, &x);
    let base_jitter = 1e-8 * params.total_signal_variance();
    let mut jitter = base_jitter;
    let chol = loop {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = kj.cholesky() {
            break c;
        }
        jitter *= 10.0;
        if jitter > 1e4 * base_jitter {
            return Err(Error::numerical("prior covariance not factorizable for synthetic draw"));
        }
    };
    k = chol.unpack();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let latent = k * z;
    let noise_sd = params.noise_variance().sqrt();
    let y = DVector::from_fn(n, |i, _| {
        let scale = if heteroscedastic { 1.0 + x[(i, 0)].abs() } else { 1.0 };
        latent[i] + noise_sd * scale * rng.sample::<f64, _>(StandardNormal)
    });
    Ok(SyntheticSample {
        data: Dataset::new(x, y)?,
        latent,
    })
}

pub fn synthetic_gp_data(
    n: usize,
    d: usize,
    spec: &KernelSpec,
    params: &HyperParams,
    heteroscedastic: bool,
    seed: u64,
) -> Result<Dataset> {
    synthetic_gp_sample(n, d, spec, params, heteroscedastic, seed).map(|s| s.data)
}
