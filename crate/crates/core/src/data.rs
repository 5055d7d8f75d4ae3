//! Datasets: IDX image files, binarization, synthetic generation and splits.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::LinearGaussianModel;
use crate::ndgrad::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    IdxFile,
    SyntheticGaussian,
    SyntheticBernoulli,
}

/// `n` items of dimension `d`, stored row-major.
///
/// Image and Bernoulli data lie in `[0, 1]`; synthetic Gaussian data is
/// real-valued.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    values: Vec<f64>,
    dim: usize,
    provenance: Provenance,
    /// Image extents `(rows, cols)` for IDX data.
    image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(values: Vec<f64>, dim: usize, provenance: Provenance) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("dataset dimension must be positive".into()));
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::Argument(format!(
                "{} values do not form items of dimension {dim}",
                values.len()
            )));
        }
        if provenance != Provenance::SyntheticGaussian && values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("dataset values must lie in [0, 1]".into()));
        }
        Ok(Self {
            values,
            dim,
            provenance,
            image_shape: None,
        })
    }

    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Self {
        if rows * cols == self.dim {
            self.image_shape = Some((rows, cols));
        }
        self
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Items at `indices` as a `[len, d]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        Tensor::matrix(indices.len(), self.dim, data).expect("shape")
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.values.clone()).expect("shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let batch = self.batch(indices);
        Dataset {
            values: batch.into_data(),
            dim: self.dim,
            provenance: self.provenance,
            image_shape: self.image_shape,
        }
    }

    /// The first `cap` items.
    pub fn truncate(mut self, cap: usize) -> Dataset {
        self.values.truncate(cap.min(self.len()) * self.dim);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    let file = BufReader::new(File::open(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut bytes)?;
    } else {
        { file }.read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

/// Parse an unsigned-byte rank-3 IDX image file held in memory.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(IdxHeader, Dataset)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    let magic = BigEndian::read_u32(&bytes[..4]);
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "magic 0x{magic:08x} is not an unsigned-byte image file (expected 0x{IDX_IMAGE_MAGIC:08x})"
        )));
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            actual: bytes.len(),
        });
    }
    let dims: Vec<u32> = (0..3).map(|k| BigEndian::read_u32(&bytes[4 + 4 * k..8 + 4 * k])).collect();
    let (n, rows, cols) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        return Err(Error::Format(format!(
            "{} trailing bytes after {n} images of {rows}x{cols}",
            bytes.len() - expected
        )));
    }
    if rows * cols == 0 {
        return Err(Error::Format(format!("degenerate image extents {rows}x{cols}")));
    }
    let values = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let ds = Dataset::new(values, rows * cols, Provenance::IdxFile)?.with_image_shape(rows, cols);
    Ok((IdxHeader { magic, dims }, ds))
}

/// Load an IDX image file; names ending in `.gz` are decompressed first.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Dataset> {
    Ok(parse_idx_images(&read_all(path.as_ref())?)?.1)
}

/// Serialize image data in IDX format. Values are mapped back to bytes with
/// `round(v·255)`, which inverts the loader exactly.
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != ds.dim() {
        return Err(Error::Argument(format!(
            "{rows}x{cols} images do not match dimension {}",
            ds.dim()
        )));
    }
    let mut out = vec![0u8; 16];
    BigEndian::write_u32(&mut out[0..4], IDX_IMAGE_MAGIC);
    BigEndian::write_u32(&mut out[4..8], ds.len() as u32);
    BigEndian::write_u32(&mut out[8..12], rows as u32);
    BigEndian::write_u32(&mut out[12..16], cols as u32);
    out.extend(ds.values().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn write_idx(ds: &Dataset, rows: usize, cols: usize, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_idx(ds, rows, cols)?;
    File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Deterministic threshold binarization: `v > threshold → 1`, else `0`.
pub fn binarize(ds: &Dataset, threshold: f64) -> Result<Dataset> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Argument(format!(
            "binarization threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let values = ds.values.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect();
    Ok(Dataset { values, ..ds.clone() })
}

/// `n` draws of `x = A·z + τ·ε`.
pub fn gen_linear_gaussian(n: usize, model: &LinearGaussianModel, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Argument("synthetic dataset size must be at least 1".into()));
    }
    let (d, z) = (model.data_dim(), model.latent_dim());
    let a = model.weight.data();
    let tau = model.obs_noise_var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * d);
    for _ in 0..n {
        let latent: Vec<f64> = (0..z).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            let mean: f64 = (0..z).map(|k| a[i * z + k] * latent[k]).sum();
            let eps: f64 = rng.sample(StandardNormal);
            values.push(mean + tau * eps);
        }
    }
    Dataset::new(values, d, Provenance::SyntheticGaussian)
}

/// Seeded shuffle then partition into `(train, validation)`; the validation
/// part has `round(n·val_fraction)` items.
pub fn split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(ds.len(), val_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::Argument(format!(
            "validation fraction {val_fraction} of {n} items leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = order.split_off(n - n_val);
    Ok((order, val))
}

/// Write items as CSV with a `x0,…,x{d−1}` header; numbers use the shortest
/// round-tripping representation.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record((0..ds.dim()).map(|j| format!("x{j}"))).map_err(csv_error)?;
    for i in 0..ds.len() {
        w.write_record(ds.item(i).iter().map(|v| v.to_string())).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a CSV written by [`write_csv`].
pub fn read_csv(path: impl AsRef<Path>, provenance: Provenance) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let dim = r.headers().map_err(csv_error)?.len();
    let mut values = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(csv_error)?;
        if record.len() != dim {
            return Err(Error::Format(format!("CSV row {} has {} fields, expected {dim}", line + 1, record.len())));
        }
        for field in &record {
            values.push(field.trim().parse::<f64>().map_err(|e| {
                Error::Format(format!("CSV row {}: `{field}`: {e}", line + 1))
            })?);
        }
    }
    Dataset::new(values, dim, provenance)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("CSV: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend([0, 255, 51, 204, 255, 0, 0, 102]);
        b
    }

    #[test]
    fn parses_two_image_fixture() {
        let (header, ds) = parse_idx_images(&fixture()).unwrap();
        assert_eq!(header, IdxHeader { magic: 0x803, dims: vec![2, 2, 2] });
        assert_eq!((ds.len(), ds.dim()), (2, 4));
        assert_eq!(ds.item(0), &[0.0, 1.0, 0.2, 0.8]);
        assert_eq!(ds.item(1), &[1.0, 0.0, 0.0, 0.4]);
        assert_eq!(encode_idx(&ds, 2, 2).unwrap(), fixture());
    }

    #[test]
    fn empty_image_count_is_fine() {
        let b = vec![0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 28, 0, 0, 0, 28];
        let (_, ds) = parse_idx_images(&b).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.dim(), 784);
    }

    #[test]
    fn rejects_label_magic_and_truncation() {
        let mut b = fixture();
        b[3] = 1;
        let err = parse_idx_images(&b).unwrap_err();
        assert!(err.to_string().contains("0x00000801"), "{err}");
        let mut b = fixture();
        b.pop();
        match parse_idx_images(&b).unwrap_err() {
            Error::Truncated { expected: 24, actual: 23 } => {}
            other => panic!("unexpected {other}"),
        }
        assert!(parse_idx_images(&[0, 0]).is_err());
    }

    #[test]
    fn gzip_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.idx.gz");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&fixture()).unwrap();
        std::fs::write(&path, enc.finish().unwrap()).unwrap();
        let ds = load_idx_images(&path).unwrap();
        assert_eq!(ds.len(), 2);
        let raw = dir.path().join("f.idx");
        write_idx(&ds, 2, 2, &raw).unwrap();
        assert_eq!(std::fs::read(&raw).unwrap(), fixture());
    }

    #[test]
    fn binarize_cases() {
        let ds = Dataset::new(vec![0.0, 0.4, 0.6, 1.0], 4, Provenance::IdxFile).unwrap();
        let b = binarize(&ds, 0.5).unwrap();
        assert_eq!(b.values(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(binarize(&b, 0.5).unwrap(), b);
        assert!(binarize(&ds, 1.0).is_err());
    }

    #[test]
    fn linear_gaussian_moments() {
        let zero = LinearGaussianModel::new(Tensor::zeros(&[3, 2]), 1.0).unwrap();
        let ds = gen_linear_gaussian(10_000, &zero, 1).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..ds.len()).map(|i| ds.item(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 0.05 && (var - 1.0).abs() < 0.05, "{mean} {var}");
        }
        let unit = LinearGaussianModel::new(Tensor::matrix(1, 1, vec![1.0]).unwrap(), 1.0).unwrap();
        let ds = gen_linear_gaussian(10_000, &unit, 2).unwrap();
        let var = ds.values().iter().map(|v| v * v).sum::<f64>() / 10_000.0;
        assert!((var - 2.0).abs() < 0.1, "{var}");
        assert_eq!(gen_linear_gaussian(5, &unit, 3).unwrap(), gen_linear_gaussian(5, &unit, 3).unwrap());
        assert!(gen_linear_gaussian(0, &unit, 3).is_err());
    }

    #[test]
    fn split_cases() {
        let ds = Dataset::new((0..10).map(f64::from).collect(), 1, Provenance::SyntheticGaussian).unwrap();
        let (train, val) = split(&ds, 0.2, 5).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        let mut all: Vec<f64> = train.values().iter().chain(val.values()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, ds.values());
        assert_eq!(split(&ds, 0.2, 5).unwrap(), (train, val));
        assert!(split(&ds, 0.01, 5).is_err());
        assert!(split(&ds, 0.0, 5).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = Dataset::new(vec![0.1, -2.5e-7, 1.0 / 3.0, 4.0], 2, Provenance::SyntheticGaussian).unwrap();
        write_csv(&ds, &path).unwrap();
        assert_eq!(read_csv(&path, Provenance::SyntheticGaussian).unwrap(), ds);
    }

    #[test]
    fn rejects_out_of_range_image_values() {
        assert!(Dataset::new(vec![1.5], 1, Provenance::IdxFile).is_err());
        assert!(Dataset::new(vec![1.5], 1, Provenance::SyntheticGaussian).is_ok());
    }

    proptest! {
        #[test]
        fn idx_round_trip(n in 0usize..4, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bytes = vec![0u8; 16];
            BigEndian::write_u32(&mut bytes[0..4], IDX_IMAGE_MAGIC);
            BigEndian::write_u32(&mut bytes[4..8], n as u32);
            BigEndian::write_u32(&mut bytes[8..12], rows as u32);
            BigEndian::write_u32(&mut bytes[12..16], cols as u32);
            bytes.extend((0..n * rows * cols).map(|_| rng.random::<u8>()));
            let (_, ds) = parse_idx_images(&bytes).unwrap();
            prop_assert_eq!(encode_idx(&ds, rows, cols).unwrap(), bytes);
        }

        #[test]
        fn binarized_values_are_bits(values in proptest::collection::vec(0.0f64..=1.0, 1..40), t in 0.01f64..0.99) {
            let ds = Dataset::new(values, 1, Provenance::IdxFile).unwrap();
            let b = binarize(&ds, t).unwrap();
            prop_assert!(b.values().iter().all(|v| *v == 0.0 || *v == 1.0));
            prop_assert_eq!(b.len(), ds.len());
        }

        #[test]
        fn splits_are_disjoint_and_exhaustive(n in 2usize..200, frac in 0.05f64..0.95, seed in any::<u64>()) {
            if let Ok((train, val)) = split_indices(n, frac, seed) {
                let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert!(!train.is_empty() && !val.is_empty());
            }
        }
    }
}
