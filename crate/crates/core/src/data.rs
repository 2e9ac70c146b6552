//! Datasets: seeded synthetic Gaussian blobs, CSV tables with a label
//! column, and IDX image/label pairs.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::error::CoreError;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("csv error in {path}: {message}")]
    Csv { path: String, message: String },

    #[error("{path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Features plus integer class labels. Features are `[N, F]` for tabular data
/// and `[N, C, H, W]` for images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        if self.labels.is_empty() {
            0
        } else {
            self.features.len() / self.labels.len()
        }
    }

    /// Feature dimensions of one sample (shape without the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Copies the selected samples into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>), CoreError> {
        let stride = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        let src = self.features.data();
        for &i in indices {
            if i >= self.len() {
                return Err(CoreError::ShapeMismatch(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// Deterministic shuffled split into (train, validation).
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), CoreError> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(CoreError::InvalidConfig(format!(
                "val_fraction {val_fraction} outside [0, 1)"
            )));
        }
        let mut indices: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        let (val_idx, train_idx) = indices.split_at(n_val);
        let (train_x, train_y) = self.gather(train_idx)?;
        let (val_x, val_y) = self.gather(val_idx)?;
        Ok((
            Dataset { features: train_x, labels: train_y, num_classes: self.num_classes },
            Dataset { features: val_x, labels: val_y, num_classes: self.num_classes },
        ))
    }
}

/// Seeded 10-class-style blob generator: class centers drawn uniformly, then
/// per-sample Gaussian noise, min-max normalized to [0, 1] per feature.
pub fn gaussian_blobs(
    samples: usize,
    features: usize,
    classes: usize,
    noise_std: f64,
    seed: u64,
) -> Dataset {
    assert!(classes >= 2 && features >= 1 && samples >= classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center_dist = Uniform::new(-1.0, 1.0).expect("valid range");
    let noise = Normal::new(0.0, noise_std).expect("valid std");

    let centers: Vec<f64> =
        (0..classes * features).map(|_| center_dist.sample(&mut rng)).collect();

    let mut data = Vec::with_capacity(samples * features);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % classes;
        labels.push(class);
        for f in 0..features {
            data.push(centers[class * features + f] + noise.sample(&mut rng));
        }
    }

    // Min-max normalize each feature to [0, 1].
    for f in 0..features {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..samples {
            let v = data[i * features + f];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        for i in 0..samples {
            let v = &mut data[i * features + f];
            *v = (*v - lo) / span;
        }
    }

    Dataset {
        features: Tensor::new(vec![samples, features], data).expect("shape matches"),
        labels,
        num_classes: classes,
    }
}

/// Loads a CSV with a header row; the column named `label` holds integer
/// classes, every other column is a feature.
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let display = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| DataError::Csv { path: display.clone(), message: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv { path: display.clone(), message: e.to_string() })?
        .clone();
    let label_col = headers.iter().position(|h| h == "label").ok_or_else(|| DataError::Format {
        path: display.clone(),
        message: "missing required column `label`".into(),
    })?;

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (row_idx, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| DataError::Csv { path: display.clone(), message: e.to_string() })?;
        let mut row = Vec::with_capacity(record.len().saturating_sub(1));
        for (col, field) in record.iter().enumerate() {
            if col == label_col {
                let label: usize = field.trim().parse().map_err(|_| DataError::Format {
                    path: display.clone(),
                    message: format!("row {row_idx}: label `{field}` is not a non-negative integer"),
                })?;
                labels.push(label);
            } else {
                let value: f64 = field.trim().parse().map_err(|_| DataError::Format {
                    path: display.clone(),
                    message: format!("row {row_idx}: feature `{field}` is not a number"),
                })?;
                row.push(value);
            }
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(DataError::Format {
                    path: display,
                    message: format!("row {row_idx}: expected {w} features, got {}", row.len()),
                })
            }
            Some(_) => {}
        }
        data.extend(row);
    }
    if labels.is_empty() {
        return Err(DataError::Format { path: display, message: "no data rows".into() });
    }
    let width = width.unwrap_or(0);
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Ok(Dataset {
        features: Tensor::new(vec![labels.len(), width], data).map_err(DataError::Core)?,
        labels,
        num_classes,
    })
}

/// Writes a dataset as CSV with columns `f0..f{F-1},label`.
pub fn save_csv(path: &Path, data: &Dataset) -> Result<(), DataError> {
    let display = path.display().to_string();
    let shape = data.features.shape();
    assert_eq!(shape.len(), 2, "csv export supports [N, F] features");
    let width = shape[1];
    let mut out = String::new();
    for f in 0..width {
        out.push_str(&format!("f{f},"));
    }
    out.push_str("label\n");
    let src = data.features.data();
    for (i, &label) in data.labels.iter().enumerate() {
        for f in 0..width {
            out.push_str(&format!("{},", src[i * width + f]));
        }
        out.push_str(&format!("{label}\n"));
    }
    std::fs::write(path, out).map_err(|source| DataError::Io { path: display, source })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(reader: &mut impl Read, path: &str) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    reader
        .read_exact(&mut buf)
        .map_err(|source| DataError::Io { path: path.to_string(), source })?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image/label pair (16-byte and 8-byte headers, big-endian
/// dimensions). Pixels are normalized to [0, 1]; features come out as
/// `[N, 1, rows, cols]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img_display = images_path.display().to_string();
    let lbl_display = labels_path.display().to_string();

    let mut img = BufReader::new(
        File::open(images_path)
            .map_err(|source| DataError::Io { path: img_display.clone(), source })?,
    );
    let magic = read_be_u32(&mut img, &img_display)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format {
            path: img_display,
            message: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(&mut img, &img_display)? as usize;
    let rows = read_be_u32(&mut img, &img_display)? as usize;
    let cols = read_be_u32(&mut img, &img_display)? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    img.read_exact(&mut pixels)
        .map_err(|source| DataError::Io { path: img_display.clone(), source })?;

    let mut lbl = BufReader::new(
        File::open(labels_path)
            .map_err(|source| DataError::Io { path: lbl_display.clone(), source })?,
    );
    let magic = read_be_u32(&mut lbl, &lbl_display)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Format {
            path: lbl_display,
            message: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = read_be_u32(&mut lbl, &lbl_display)? as usize;
    if n_labels != n {
        return Err(DataError::Format {
            path: lbl_display,
            message: format!("{n_labels} labels for {n} images"),
        });
    }
    let mut raw_labels = vec![0u8; n_labels];
    lbl.read_exact(&mut raw_labels)
        .map_err(|source| DataError::Io { path: lbl_display.clone(), source })?;

    let data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Ok(Dataset {
        features: Tensor::new(vec![n, 1, rows, cols], data).map_err(DataError::Core)?,
        labels,
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn blobs_are_normalized_and_seed_stable() {
        let a = gaussian_blobs(200, 8, 4, 0.3, 42);
        let b = gaussian_blobs(200, 8, 4, 0.3, 42);
        assert_eq!(a, b);
        assert!(a.features.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.num_classes, 4);
        let c = gaussian_blobs(200, 8, 4, 0.3, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn split_partitions_deterministically() {
        let d = gaussian_blobs(100, 4, 2, 0.2, 1);
        let (train, val) = d.split(0.2, 7).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(val.len(), 20);
        let (train2, val2) = d.split(0.2, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let d = gaussian_blobs(10, 3, 2, 0.2, 1);
        assert!(d.gather(&[0, 10]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let d = gaussian_blobs(50, 5, 3, 0.25, 9);
        save_csv(&path, &d).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.num_classes, d.num_classes);
        assert_eq!(back.features.shape(), d.features.shape());
        for (a, b) in back.features.data().iter().zip(d.features.data()) {
            assert_eq!(a, b); // shortest-round-trip float formatting
        }
    }

    #[test]
    fn csv_requires_label_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(load_csv(&path), Err(DataError::Format { .. })));
    }

    #[test]
    fn idx_pair_parses() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images-idx3-ubyte");
        let lbl_path = dir.path().join("labels-idx1-ubyte");

        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes()); // 2 images
        img.extend_from_slice(&2u32.to_be_bytes()); // 2x3
        img.extend_from_slice(&3u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 255, 204, 153, 102, 51, 0]);
        File::create(&img_path).unwrap().write_all(&img).unwrap();

        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[7, 1]);
        File::create(&lbl_path).unwrap().write_all(&lbl).unwrap();

        let d = load_idx(&img_path, &lbl_path).unwrap();
        assert_eq!(d.features.shape(), &[2, 1, 2, 3]);
        assert_eq!(d.labels, vec![7, 1]);
        assert_eq!(d.num_classes, 8);
        assert_eq!(d.features.data()[1], 0.2);
        assert_eq!(d.features.data()[5], 1.0);

        // Wrong magic is rejected.
        let mut bad = img.clone();
        bad[3] = 0x01;
        File::create(&img_path).unwrap().write_all(&bad).unwrap();
        assert!(matches!(load_idx(&img_path, &lbl_path), Err(DataError::Format { .. })));
    }
}
