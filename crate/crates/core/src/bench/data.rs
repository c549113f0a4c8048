//! Datasets and the IDX file format.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images in `[0, 1]` with `N×C×H×W` layout and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T = f32> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize, split: &str) -> Result<Self> {
        if images.ndim() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                what: "dataset labels".into(),
                expected: images.shape().first().copied().unwrap_or(0),
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index { what: "dataset label", index: bad, len: classes });
        }
        if images.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self { images, labels, classes, split: split.to_string() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, e.g. `[1, 28, 28]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split.clone(),
        }
    }

    /// The first `n` samples (all if fewer).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
            split: self.split.clone(),
        }
    }
}

fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(Error::Truncated { path: path.to_path_buf(), expected: need, found: bytes.len() });
    }
    let found = BigEndian::read_u32(&bytes[..4]);
    if found != magic {
        return Err(Error::BadMagic { path: path.to_path_buf(), found, expected: magic });
    }
    Ok((0..dims).map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..]) as usize).collect())
}

/// Parses an IDX image file (`u8` pixels) into `N×1×H×W`, scaled by 1/255.
pub fn parse_idx_images<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let d = header(bytes, path, IMAGES_MAGIC, 3)?;
    let (n, h, w) = (d[0], d[1], d[2]);
    let expected = 16 + n * h * w;
    if bytes.len() < expected {
        return Err(Error::Truncated { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::CountMismatch {
            what: format!("{} pixel bytes", path.display()),
            expected: n * h * w,
            found: bytes.len() - 16,
        });
    }
    let scale = T::of(1.0 / 255.0);
    let data = bytes[16..].iter().map(|&b| T::of(b as f64) * scale).collect();
    Tensor::new(&[n, 1, h, w], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let d = header(bytes, path, LABELS_MAGIC, 1)?;
    let n = d[0];
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated { path: path.to_path_buf(), expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::CountMismatch {
            what: format!("{} labels", path.display()),
            expected: n,
            found: bytes.len() - 8,
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Encodes `N×1×H×W` images in `[0, 1]` as IDX bytes (pixels rounded to
/// the nearest of 256 levels).
pub fn encode_idx_images<T: Scalar>(images: &Tensor<T>) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("IDX images", s, &[0, 1, 0, 0]));
    }
    let mut out = vec![0u8; 16];
    BigEndian::write_u32(&mut out[0..], IMAGES_MAGIC);
    BigEndian::write_u32(&mut out[4..], s[0] as u32);
    BigEndian::write_u32(&mut out[8..], s[2] as u32);
    BigEndian::write_u32(&mut out[12..], s[3] as u32);
    out.extend(images.data().iter().map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = vec![0u8; 8];
    BigEndian::write_u32(&mut out[0..], LABELS_MAGIC);
    BigEndian::write_u32(&mut out[4..], labels.len() as u32);
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}

/// Split name → (image file, label file) for the standard MNIST layout.
/// Image and label file paths of a split.
pub fn mnist_files(dir: &Path, split: &str) -> Result<(PathBuf, PathBuf)> {
    let prefix = match split {
        "train" => "train",
        "test" => "t10k",
        other => return Err(Error::invalid(format!("unknown split `{other}` (train|test)"))),
    };
    Ok((
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    ))
}

/// Loads one MNIST split (`train` or `test`) from a directory of IDX files.
pub fn load_mnist<T: Scalar>(dir: &Path, split: &str) -> Result<Dataset<T>> {
    let (img_path, lbl_path) = mnist_files(dir, split)?;
    let images = parse_idx_images(&fs::read(&img_path)?, &img_path)?;
    let labels = parse_idx_labels(&fs::read(&lbl_path)?, &lbl_path)?;
    if labels.len() != images.shape()[0] {
        return Err(Error::CountMismatch {
            what: format!("labels in {} for {}", lbl_path.display(), img_path.display()),
            expected: images.shape()[0],
            found: labels.len(),
        });
    }
    Dataset::new(images, labels, 10, split)
}

/// Writes a dataset as an MNIST-style IDX pair.
pub fn write_mnist<T: Scalar>(dir: &Path, data: &Dataset<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (img_path, lbl_path) = mnist_files(dir, &data.split)?;
    fs::write(img_path, encode_idx_images(&data.images)?)?;
    fs::write(lbl_path, encode_idx_labels(&data.labels)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        b.extend([0u8, 255, 128, 1, 2, 3, 10, 20, 30, 40, 50, 60]);
        b
    }

    #[test]
    fn image_scaling_and_shape() {
        let t: Tensor<f64> = parse_idx_images(&fixture(), Path::new("x")).unwrap();
        assert_eq!(t.shape(), &[2, 1, 2, 3]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], 1.0);
    }

    #[test]
    fn label_file() {
        let mut b = vec![0, 0, 8, 1, 0, 0, 0, 10];
        b.extend(0u8..10);
        let l = parse_idx_labels(&b, Path::new("l")).unwrap();
        assert_eq!(l, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn distinct_errors() {
        let p = Path::new("f");
        let mut bad = fixture();
        bad[3] = 1;
        assert!(matches!(parse_idx_images::<f32>(&bad, p), Err(Error::BadMagic { found: 0x801, .. })));
        let short = &fixture()[..20];
        assert!(matches!(parse_idx_images::<f32>(short, p), Err(Error::Truncated { .. })));
        let mut long = fixture();
        long.push(0);
        assert!(matches!(parse_idx_images::<f32>(&long, p), Err(Error::CountMismatch { .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 3, 1], p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn fixture_round_trip() {
        let p = Path::new("f");
        let bytes = fixture();
        let images: Tensor<f32> = parse_idx_images(&bytes, p).unwrap();
        assert_eq!(encode_idx_images(&images).unwrap(), bytes);
        let labels = vec![3, 7];
        let lb = encode_idx_labels(&labels).unwrap();
        assert_eq!(parse_idx_labels(&lb, p).unwrap(), labels);

        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(images, labels, 10, "test").unwrap();
        write_mnist(dir.path(), &ds).unwrap();
        let back: Dataset<f32> = load_mnist(dir.path(), "test").unwrap();
        assert_eq!(back, ds);
    }
}
