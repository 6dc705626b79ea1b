//! Datasets: synthetic generators, IDX files, and order-preserving subsets.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Features, labels and class count. Sample order is meaningful.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Blobs,
    Spirals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Ignored for spirals, which are always 2-D.
    pub input_dim: usize,
    pub spread: f64,
    pub seed: u64,
}

/// Draws a synthetic dataset ordered class-major, then by draw order.
///
/// Blobs: class centres are uniform on the sphere of radius 4, samples add
/// isotropic Gaussian noise of standard deviation `spread`. Spirals: `C`
/// interleaved arms in the plane with angular noise `spread`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.samples_per_class == 0 || spec.num_classes == 0 {
        return Err(Error::param("synthetic data needs at least one class and one sample per class"));
    }
    if !(spec.spread >= 0.0) {
        return Err(Error::param(format!("spread must be nonnegative, got {}", spec.spread)));
    }
    let root = Rng::new(spec.seed);
    let (c, per) = (spec.num_classes, spec.samples_per_class);
    let (dim, data) = match spec.kind {
        SyntheticKind::Blobs => {
            let d = spec.input_dim;
            if d == 0 {
                return Err(Error::param("blobs need input_dim >= 1"));
            }
            let centres = blob_centres(c, d, &root);
            let mut noise = root.fork("samples");
            let mut data = Vec::with_capacity(c * per * d);
            for centre in &centres {
                for _ in 0..per {
                    data.extend(centre.iter().map(|&m| m + spec.spread * noise.normal()));
                }
            }
            (d, data)
        }
        SyntheticKind::Spirals => {
            let mut noise = root.fork("samples");
            let mut data = Vec::with_capacity(c * per * 2);
            for k in 0..c {
                for j in 0..per {
                    let t = (j as f64 + 0.5) / per as f64;
                    let theta = 2.0 * std::f64::consts::PI * (k as f64 / c as f64 + 0.75 * t) + spec.spread * noise.normal();
                    let r = 0.2 + 3.8 * t;
                    data.push(r * theta.cos());
                    data.push(r * theta.sin());
                }
            }
            (2, data)
        }
    };
    let labels = (0..c).flat_map(|k| std::iter::repeat_n(k, per)).collect();
    let name = match spec.kind {
        SyntheticKind::Blobs => "blobs",
        SyntheticKind::Spirals => "spirals",
    };
    Dataset::new(Tensor::matrix(c * per, dim, data), labels, c, name)
}

fn blob_centres(c: usize, d: usize, root: &Rng) -> Vec<Vec<f64>> {
    let mut rng = root.fork("centres");
    (0..c)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| 4.0 * x / n).collect()
        })
        .collect()
}

/// Train/test blob split sharing the same class centres: each class's first
/// `train_per_class` draws go to train, the next `test_per_class` to test.
pub fn blobs_split(
    num_classes: usize,
    input_dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let all = gen_synthetic(&SyntheticSpec {
        kind: SyntheticKind::Blobs,
        num_classes,
        samples_per_class: train_per_class + test_per_class,
        input_dim,
        spread,
        seed,
    })?;
    split_per_class(&all, train_per_class)
}

/// Splits each class's samples: the first `train_per_class` go to train.
pub fn split_per_class(all: &Dataset, train_per_class: usize) -> Result<(Dataset, Dataset)> {
    let mut seen = vec![0usize; all.num_classes];
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, &l) in all.labels.iter().enumerate() {
        if seen[l] < train_per_class {
            train.push(i);
        } else {
            test.push(i);
        }
        seen[l] += 1;
    }
    let (mut a, mut b) = (all.subset(&train), all.subset(&test));
    a.name = format!("{}-train", all.name);
    b.name = format!("{}-test", all.name);
    Ok((a, b))
}

/// Z-scores every feature column using the statistics of `train`.
pub fn standardize(train: &mut Dataset, others: &mut [&mut Dataset]) {
    let (n, d) = (train.features.rows(), train.features.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(train.features.row(r)) {
            *m += v / n as f64;
        }
    }
    let mut sd = vec![0.0; d];
    for r in 0..n {
        for ((s, v), m) in sd.iter_mut().zip(train.features.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    let apply = |ds: &mut Dataset| {
        for r in 0..ds.features.rows() {
            for ((v, m), s) in ds.features.row_mut(r).iter_mut().zip(&mean).zip(&sd) {
                *v = (*v - m) / s;
            }
        }
    };
    apply(train);
    for ds in others {
        apply(ds);
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(path))
}

fn truncated(path: &Path) -> Error {
    Error::io(path, io::Error::new(io::ErrorKind::UnexpectedEof, "truncated IDX file"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image file and its label file; pixels are scaled to `[0, 1]`.
/// The class count is one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    let magic = read_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}",
            images_path.display()
        )));
    }
    let magic = read_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}",
            labels_path.display()
        )));
    }
    let n = read_u32(&img, 4, images_path)? as usize;
    let rows = read_u32(&img, 8, images_path)? as usize;
    let cols = read_u32(&img, 12, images_path)? as usize;
    let n_labels = read_u32(&lab, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::Consistency(format!("{n} images but {n_labels} labels")));
    }
    let d = rows * cols;
    let pixels = img.get(16..16 + n * d).ok_or_else(|| truncated(images_path))?;
    let labels: Vec<usize> = lab
        .get(8..8 + n)
        .ok_or_else(|| truncated(labels_path))?
        .iter()
        .map(|&b| b as usize)
        .collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = Tensor::matrix(n, d, pixels.iter().map(|&p| p as f64 / 255.0).collect());
    Dataset::new(features, labels, num_classes, "idx")
}

/// Writes `images` (values in `[0, 1]`, rounded to bytes) and labels as IDX files.
pub fn write_idx(images_path: &Path, labels_path: &Path, features: &Tensor, rows: usize, cols: usize, labels: &[usize]) -> Result<()> {
    let n = labels.len();
    if features.rows() != n || features.cols() != rows * cols {
        return Err(Error::Consistency(format!(
            "features {:?} do not match {n} images of {rows}x{cols}",
            features.shape()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::Label(format!("label {bad} does not fit in a byte")));
    }
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(features.data().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(labels.iter().map(|&l| l as u8));
    let write = |path: &Path, bytes: &[u8]| -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(bytes).map_err(|e| Error::io(path, e))
    };
    write(images_path, &img)?;
    write(labels_path, &lab)
}

/// Keeps only the first `cap` samples of each listed class; everything else
/// is untouched and relative order is preserved.
pub fn make_imbalanced(d: &Dataset, classes: &BTreeSet<usize>, cap: usize) -> Result<Dataset> {
    if let Some(bad) = classes.iter().find(|&&c| c >= d.num_classes) {
        return Err(Error::param(format!("class {bad} out of range for {} classes", d.num_classes)));
    }
    let mut seen = vec![0usize; d.num_classes];
    let keep: Vec<usize> = (0..d.len())
        .filter(|&i| {
            let l = d.labels[i];
            seen[l] += 1;
            !classes.contains(&l) || seen[l] <= cap
        })
        .collect();
    Ok(d.subset(&keep))
}

/// First `⌊p·n⌋` samples in stored order.
pub fn take_fraction(d: &Dataset, p: f64) -> Result<Dataset> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::param(format!("fraction must lie in (0, 1], got {p}")));
    }
    let k = (p * d.len() as f64).floor() as usize;
    Ok(d.subset(&(0..k).collect::<Vec<_>>()))
}

/// One minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Minibatches covering the dataset once; the last may be smaller.
pub fn batch_iter(d: &Dataset, batch_size: usize, rng: &mut Rng, shuffle: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::param("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order
        .chunks(batch_size)
        .map(|idx| Batch {
            features: d.features.select_rows(idx),
            labels: idx.iter().map(|&i| d.labels[i]).collect(),
            indices: idx.to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(spread: f64, per: usize) -> SyntheticSpec {
        SyntheticSpec {
            kind: SyntheticKind::Blobs,
            num_classes: 3,
            samples_per_class: per,
            input_dim: 4,
            spread,
            seed: 11,
        }
    }

    fn toy(labels: Vec<usize>, classes: usize) -> Dataset {
        let n = labels.len();
        Dataset::new(Tensor::matrix(n, 1, (0..n).map(|i| i as f64).collect()), labels, classes, "toy").unwrap()
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = gen_synthetic(&spec(0.5, 10)).unwrap();
        let b = gen_synthetic(&spec(0.5, 10)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![10, 10, 10]);
        assert_eq!(&a.labels[..11], &[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1]);
        let s = gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::Spirals,
            ..spec(0.1, 20)
        })
        .unwrap();
        assert_eq!(s.input_dim(), 2);
        assert_eq!(s.class_counts(), vec![20, 20, 20]);
    }

    #[test]
    fn zero_spread_collapses_to_centres() {
        let d = gen_synthetic(&spec(0.0, 5)).unwrap();
        for k in 0..3 {
            let first = d.features.row(k * 5).to_vec();
            let n: f64 = first.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 4.0).abs() < 1e-12);
            for j in 1..5 {
                assert_eq!(d.features.row(k * 5 + j), first.as_slice());
            }
        }
    }

    #[test]
    fn blob_variance_matches_spread() {
        let s = 0.7;
        let d = gen_synthetic(&spec(s, 2000)).unwrap();
        for k in 0..3 {
            for c in 0..4 {
                let col: Vec<f64> = (0..2000).map(|j| d.features.get(k * 2000 + j, c)).collect();
                let mean = col.iter().sum::<f64>() / 2000.0;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2000.0;
                assert!((var / (s * s) - 1.0).abs() <= 0.1, "{var}");
            }
        }
    }

    #[test]
    fn split_shares_centres_and_standardizes() {
        let (mut train, mut test) = blobs_split(3, 4, 6, 2, 0.3, 5).unwrap();
        assert_eq!(train.len(), 18);
        assert_eq!(test.len(), 6);
        assert_eq!(test.class_counts(), vec![2, 2, 2]);
        standardize(&mut train, &mut [&mut test]);
        for c in 0..4 {
            let col: Vec<f64> = (0..18).map(|r| train.features.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 18.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn imbalance_keeps_first_in_sequence() {
        let labels: Vec<usize> = (0..30).map(|i| [0, 1, 2][i % 3]).collect();
        let d = toy(labels, 3);
        let set: BTreeSet<usize> = [1].into_iter().collect();
        let out = make_imbalanced(&d, &set, 4).unwrap();
        let kept_1: Vec<f64> = (0..out.len()).filter(|&i| out.labels[i] == 1).map(|i| out.features.get(i, 0)).collect();
        assert_eq!(kept_1, vec![1.0, 4.0, 7.0, 10.0]);
        assert_eq!(out.class_counts(), vec![10, 4, 10]);
        let order: Vec<f64> = out.features.data().to_vec();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(make_imbalanced(&d, &set, 100).unwrap(), d);
        let bad: BTreeSet<usize> = [3].into_iter().collect();
        assert!(make_imbalanced(&d, &bad, 1).is_err());
    }

    #[test]
    fn fraction_takes_prefix() {
        let d = toy(vec![0; 400], 1);
        let q = take_fraction(&d, 0.25).unwrap();
        assert_eq!(q.len(), 100);
        assert_eq!(q.features.data(), &d.features.data()[..100]);
        assert_eq!(take_fraction(&d, 1.0).unwrap(), d);
        assert!(take_fraction(&d, 0.0).is_err());
        assert!(take_fraction(&d, 1.5).is_err());
    }

    #[test]
    fn batches_cover_dataset() {
        let d = toy(vec![0; 10], 1);
        let mut rng = Rng::new(1);
        let one = batch_iter(&d, 10, &mut rng, false).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].features, d.features);
        let b = batch_iter(&d, 4, &mut rng, false).unwrap();
        assert_eq!(b.iter().map(|x| x.labels.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b[0].indices, vec![0, 1, 2, 3]);
        let s1 = batch_iter(&d, 3, &mut Rng::new(5), true).unwrap();
        let s2 = batch_iter(&d, 3, &mut Rng::new(5), true).unwrap();
        assert_eq!(s1, s2);
        let mut all: Vec<usize> = s1.iter().flat_map(|x| x.indices.clone()).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batch_iter(&d, 0, &mut rng, false).is_err());
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let feats = Tensor::matrix(2, 4, vec![0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        write_idx(&ip, &lp, &feats, 2, 2, &[3, 1]).unwrap();
        let raw = fs::read(&ip).unwrap();
        assert_eq!(&raw[..4], &[0, 0, 8, 3]);
        assert_eq!(&raw[16..20], &[0, 255, 0, 255]);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.features, feats);
        assert_eq!(d.labels, vec![3, 1]);
        assert_eq!(d.num_classes, 4);

        let mut bad = raw.clone();
        bad[3] = 0x04;
        fs::write(&ip, &bad).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Format(m)) => assert!(m.contains("0x00000804"), "{m}"),
            other => panic!("{other:?}"),
        }
        fs::write(&ip, &raw[..18]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Io { .. })));
        let mut short = raw.clone();
        short[7] = 3;
        fs::write(&ip, &short).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));
        assert!(matches!(load_idx(&dir.path().join("missing"), &lp), Err(Error::Io { .. })));
    }
}
