//! Dataset loading, preprocessing, and cross-validation folds.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    /// One-hot rows for classification, raw targets for regression.
    pub t: Matrix,
    pub task: Task,
    pub feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: Matrix, t: Matrix, task: Task) -> Result<Self> {
        if x.rows() != t.rows() {
            return Err(Error::Shape(format!(
                "{} input rows but {} target rows",
                x.rows(),
                t.rows()
            )));
        }
        if task == Task::Classification {
            for i in 0..t.rows() {
                let row = t.row(i);
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != row.len() {
                    return Err(Error::Data(format!("target row {i} is not one-hot")));
                }
            }
        }
        Ok(Dataset {
            x,
            t,
            task,
            feature_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn n_outputs(&self) -> usize {
        self.t.cols()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            t: self.t.select_rows(indices),
            task: self.task,
            feature_names: self.feature_names.clone(),
        }
    }

    /// Seeded shuffle split; returns (train, test) with `round(n·test_fraction)` test rows.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction {test_fraction} not in [0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test);
        let (mut train, mut test) = (train.to_vec(), test.to_vec());
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.select(&train), self.select(&test)))
    }

    pub fn first(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut t = Matrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        t.set(i, l, 1.0);
    }
    t
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(BufReader::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let mut buf = Vec::new();
    reader.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl IdxReader<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.fail("unexpected end of file in header"))?;
        let v = u32::from_be_bytes([b[0], b[1], b[2], b[3]]);
        self.pos += 4;
        Ok(v)
    }

    fn payload(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.pos + len;
        if end > self.bytes.len() {
            return Err(self.fail(format!(
                "truncated payload: need {len} bytes, {} available",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

/// Raw IDX image file: (count, rows, cols, pixels).
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = open_maybe_gz(path)?;
    let mut r = IdxReader { path, bytes: &bytes, pos: 0 };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        r.pos = 0;
        return Err(r.fail(format!("bad image magic {magic:#010x}")));
    }
    let n = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    let pixels = r.payload(n * rows * cols)?.to_vec();
    Ok((n, rows, cols, pixels))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = open_maybe_gz(path)?;
    let mut r = IdxReader { path, bytes: &bytes, pos: 0 };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        r.pos = 0;
        return Err(r.fail(format!("bad label magic {magic:#010x}")));
    }
    let n = r.u32_be()? as usize;
    Ok(r.payload(n)?.to_vec())
}

/// MNIST-style IDX pair (optionally gzip-compressed). Pixels scaled to
/// [0, 1], labels one-hot over 10 classes.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= MNIST_CLASSES) {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 8 + i as u64,
            reason: format!("label {l} out of range"),
        });
    }
    let x = Matrix::new(n, rows * cols, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    Dataset::new(x, one_hot(&labels, MNIST_CLASSES), Task::Classification)
}

const SRC_SIDE: usize = 28;
const PAD: usize = 2;
const POOL: usize = 4;
const DST_SIDE: usize = 8;

/// 28×28 → zero-pad to 32×32 → 4×4 max-pool → 64 features.
pub fn downscale_8x8(images: &Dataset) -> Result<Dataset> {
    if images.n_features() != SRC_SIDE * SRC_SIDE {
        return Err(Error::Shape(format!(
            "expected {} features (28x28), got {}",
            SRC_SIDE * SRC_SIDE,
            images.n_features()
        )));
    }
    let n = images.len();
    let mut out = Vec::with_capacity(n * DST_SIDE * DST_SIDE);
    for s in 0..n {
        let img = images.x.row(s);
        for by in 0..DST_SIDE {
            for bx in 0..DST_SIDE {
                // Padding contributes zeros, the pixel minimum.
                let mut m: f64 = 0.0;
                let mut saw_padding = false;
                let mut first = true;
                for dy in 0..POOL {
                    for dx in 0..POOL {
                        let py = (by * POOL + dy) as isize - PAD as isize;
                        let px = (bx * POOL + dx) as isize - PAD as isize;
                        if (0..SRC_SIDE as isize).contains(&py) && (0..SRC_SIDE as isize).contains(&px) {
                            let v = img[py as usize * SRC_SIDE + px as usize];
                            m = if first { v } else { m.max(v) };
                            first = false;
                        } else {
                            saw_padding = true;
                        }
                    }
                }
                if saw_padding {
                    m = m.max(0.0);
                }
                out.push(m);
            }
        }
    }
    Ok(Dataset {
        x: Matrix::new(n, DST_SIDE * DST_SIDE, out)?,
        t: images.t.clone(),
        task: images.task,
        feature_names: None,
    })
}

/// Per-column affine standardization (mean 0, variance 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let (n, k) = x.shape();
        let nf = n.max(1) as f64;
        let mut mean = vec![0.0; k];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![0.0; k];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / nf).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardizer fitted on {} columns, got {}",
                self.mean.len(),
                x.cols()
            )));
        }
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            (x.get(i, j) - self.mean[j]) / self.std[j]
        }))
    }
}

/// Numeric CSV with a header row (optionally gzip-compressed). Target
/// columns become `t`, every other column becomes a feature. With
/// `standardize`, features are standardized with this file's own statistics;
/// use [`Standardizer`] to carry them to a test file.
pub fn load_csv(path: &Path, target_columns: &[&str], standardize: bool) -> Result<Dataset> {
    let bytes = open_maybe_gz(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes.as_slice());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::CsvFormat {
            path: path.to_path_buf(),
            row: 1,
            reason: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if target_columns.is_empty() {
        return Err(Error::Config("at least one target column is required".into()));
    }
    let mut target_idx = Vec::with_capacity(target_columns.len());
    for name in target_columns {
        let idx = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("target column {name:?} not in {}", path.display())))?;
        target_idx.push(idx);
    }
    let feature_idx: Vec<usize> = (0..header.len()).filter(|i| !target_idx.contains(i)).collect();

    let mut xs = Vec::new();
    let mut ts = Vec::new();
    let mut n = 0;
    for (r, record) in reader.records().enumerate() {
        // Row numbers are 1-based and count the header.
        let row = r + 2;
        let record = record.map_err(|e| Error::CsvFormat {
            path: path.to_path_buf(),
            row,
            reason: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::CsvFormat {
                path: path.to_path_buf(),
                row,
                reason: format!("{} fields, header has {}", record.len(), header.len()),
            });
        }
        let parse = |i: usize| -> Result<f64> {
            let cell = record[i].trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::CsvFormat {
                    path: path.to_path_buf(),
                    row,
                    reason: format!("column {:?}: {cell:?} is not a finite number", header[i]),
                })
        };
        for &i in &feature_idx {
            xs.push(parse(i)?);
        }
        for &i in &target_idx {
            ts.push(parse(i)?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    let mut x = Matrix::new(n, feature_idx.len(), xs)?;
    if standardize {
        x = Standardizer::fit(&x).apply(&x)?;
    }
    let t = Matrix::new(n, target_idx.len(), ts)?;
    let mut ds = Dataset::new(x, t, Task::Regression)?;
    ds.feature_names = Some(feature_idx.iter().map(|&i| header[i].clone()).collect());
    Ok(ds)
}

/// Assignment of samples to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub c: usize,
    pub seed: u64,
    /// Fold id of every sample.
    pub assignments: Vec<usize>,
}

/// Seeded shuffle, then round-robin assignment: fold sizes differ by at most one.
pub fn make_folds(n_samples: usize, c: usize, seed: u64) -> Result<FoldPlan> {
    if c < 2 {
        return Err(Error::Config(format!(
            "{c} folds requested; at least 2 are needed so that no network is trained on the whole equivalence-check set"
        )));
    }
    if n_samples < c {
        return Err(Error::Config(format!("{n_samples} samples cannot fill {c} folds")));
    }
    let mut perm: Vec<usize> = (0..n_samples).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; n_samples];
    for (k, &s) in perm.iter().enumerate() {
        assignments[s] = k % c;
    }
    Ok(FoldPlan { c, seed, assignments })
}

impl FoldPlan {
    /// Validation samples of fold `i`, ascending.
    pub fn fold(&self, i: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(s, &f)| (f == i).then_some(s))
            .collect()
    }

    /// Training samples for fold `i` (everything outside fold `i`), ascending.
    pub fn train(&self, i: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(s, &f)| (f != i).then_some(s))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.c];
        for &f in &self.assignments {
            s[f] += 1;
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(&28u32.to_be_bytes());
        b.extend_from_slice(&28u32.to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..3 * 784).map(|i| (i * 7 % 256) as u8).collect();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        std::fs::write(&ip, idx_images(3, &pixels)).unwrap();
        std::fs::write(&lp, idx_labels(&[4, 0, 9])).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.x.shape(), (3, 784));
        for (v, p) in ds.x.as_slice().iter().zip(&pixels) {
            assert_eq!(*v, *p as f64 / 255.0);
        }
        assert_eq!(ds.t.row(0)[4], 1.0);
        assert_eq!(ds.t.row(2)[9], 1.0);

        // gzip variant decodes identically
        let gz = dir.path().join("img.gz");
        let mut enc = flate2::write::GzEncoder::new(File::create(&gz).unwrap(), flate2::Compression::fast());
        enc.write_all(&idx_images(3, &pixels)).unwrap();
        enc.finish().unwrap();
        assert_eq!(load_idx(&gz, &lp).unwrap(), ds);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty");
        std::fs::write(&empty, b"").unwrap();
        let lp = dir.path().join("lbl");
        std::fs::write(&lp, idx_labels(&[1])).unwrap();
        assert!(matches!(load_idx(&empty, &lp), Err(Error::Format { offset: 0, .. })));

        let bad = dir.path().join("bad");
        std::fs::write(&bad, idx_labels(&[1])).unwrap();
        assert!(matches!(load_idx(&bad, &lp), Err(Error::Format { offset: 0, .. })));

        let trunc = dir.path().join("trunc");
        std::fs::write(&trunc, idx_images(1, &[0u8; 100])).unwrap();
        assert!(matches!(load_idx(&trunc, &lp), Err(Error::Format { offset: 16, .. })));
    }

    fn single_image(f: impl Fn(usize, usize) -> f64) -> Dataset {
        let x = Matrix::from_fn(1, 784, |_, k| f(k / 28, k % 28));
        Dataset::new(x, one_hot(&[0], 10), Task::Classification).unwrap()
    }

    #[test]
    fn downscale_zero_image() {
        let d = downscale_8x8(&single_image(|_, _| 0.0)).unwrap();
        assert_eq!(d.x.shape(), (1, 64));
        assert!(d.x.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downscale_single_pixel() {
        let d = downscale_8x8(&single_image(|r, c| if r == 0 && c == 0 { 1.0 } else { 0.0 })).unwrap();
        let ones: Vec<usize> = (0..64).filter(|&k| d.x.get(0, k) == 1.0).collect();
        // Pixel (0,0) sits at padded (2,2), inside pooled cell (0,0).
        assert_eq!(ones, vec![0]);
    }

    #[test]
    fn downscale_constant_image() {
        let d = downscale_8x8(&single_image(|_, _| 1.0)).unwrap();
        // Every 4x4 window over the 32x32 padded grid contains a real pixel.
        assert!(d.x.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn downscale_wrong_width() {
        let ds = Dataset::new(Matrix::zeros(1, 64), one_hot(&[0], 10), Task::Classification).unwrap();
        assert!(matches!(downscale_8x8(&ds), Err(Error::Shape(_))));
    }

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn csv_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "a,b,y\n1,2,3\n4,5,6\n7,8.5,-9\n");
        let ds = load_csv(&p, &["y"], false).unwrap();
        assert_eq!(ds.x.as_slice(), &[1.0, 2.0, 4.0, 5.0, 7.0, 8.5]);
        assert_eq!(ds.t.as_slice(), &[3.0, 6.0, -9.0]);
        assert_eq!(ds.feature_names.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "a,b,y\n1,2,3\n");
        assert!(matches!(load_csv(&p, &["z"], false), Err(Error::Config(_))));
        let ragged = write(dir.path(), "r.csv", "a,b,y\n1,2,3\n4,5\n");
        assert!(matches!(load_csv(&ragged, &["y"], false), Err(Error::CsvFormat { row: 3, .. })));
        let text = write(dir.path(), "t.csv", "a,b,y\n1,2,3\n4,x,6\n");
        assert!(matches!(load_csv(&text, &["y"], false), Err(Error::CsvFormat { row: 3, .. })));
    }

    #[test]
    fn csv_standardize() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "a,b,y\n1,10,0\n2,30,0\n3,20,0\n10,-5,1\n");
        let ds = load_csv(&p, &["y"], true).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..4).map(|i| ds.x.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fold_sizes() {
        let mut s = make_folds(10, 2, 0).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![5, 5]);
        let mut s = make_folds(10, 3, 0).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![3, 3, 4]);
        assert_eq!(make_folds(10, 3, 7).unwrap(), make_folds(10, 3, 7).unwrap());
        assert!(matches!(make_folds(10, 1, 0), Err(Error::Config(_))));
        assert!(matches!(make_folds(2, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_partitions_rows() {
        let x = Matrix::from_fn(10, 1, |i, _| i as f64);
        let ds = Dataset::new(x.clone(), x, Task::Regression).unwrap();
        let (tr, te) = ds.split(0.3, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        let mut all: Vec<f64> = tr.x.as_slice().iter().chain(te.x.as_slice()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..10).map(|i| i as f64).collect::<Vec<_>>());
    }
}
