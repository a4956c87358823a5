//! IDX (MNIST / Fashion-MNIST) and CIFAR-10 binary loaders.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::one_hot;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 3073;

/// Inputs in `[-1, 1]` plus labels and one-hot targets.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle<S: Scalar> {
    pub inputs: Tensor<S>,
    pub labels: Vec<usize>,
    pub targets: Tensor<S>,
    pub classes: usize,
    pub source: String,
}

impl<S: Scalar> DatasetHandle<S> {
    pub fn new(inputs: Tensor<S>, labels: Vec<usize>, classes: usize, source: impl Into<String>) -> Result<Self> {
        if inputs.rank() < 2 || inputs.rows() != labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("{} labels for inputs of shape {:?}", labels.len(), inputs.shape()),
            ));
        }
        let targets = one_hot(&labels, classes)?;
        Ok(Self {
            inputs,
            labels,
            targets,
            classes,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            targets: self.targets.select_rows(indices)?,
            classes: self.classes,
            source: self.source.clone(),
        })
    }

    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

/// `p ↦ 2·(p/255) − 1`.
pub fn byte_to_unit(p: u8) -> f64 {
    2.0 * (f64::from(p) / 255.0) - 1.0
}

/// Inverse of [`byte_to_unit`], rounding to the nearest byte.
pub fn unit_to_byte(v: f64) -> u8 {
    ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Reads a file, transparently inflating gzip (`1f 8b` magic).
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        what: path.display().to_string(),
        offset,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| parse_err(path, offset, "truncated header"))
}

/// Image file: `[N, 1, rows, cols]` bytes.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| parse_err(path, 4, "dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated: expected {need} pixel bytes, found {}", body.len()),
        ));
    }
    if body.len() > need {
        return Err(parse_err(path, 16 + need, "trailing bytes"));
    }
    Ok((vec![n, 1, rows, cols], body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated: expected {n} labels, found {}", body.len()),
        ));
    }
    if body.len() > n {
        return Err(parse_err(path, 8 + n, "trailing bytes"));
    }
    Ok(body.to_vec())
}

/// Loads an IDX image/label pair (optionally gzipped) as a 10-class dataset.
pub fn load_idx<S: Scalar>(images_path: &Path, labels_path: &Path) -> Result<DatasetHandle<S>> {
    let (shape, pixels) = parse_idx_images(&read_maybe_gz(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?, labels_path)?;
    if labels.len() != shape[0] {
        return Err(Error::invalid(
            "load_idx",
            format!("{} images but {} labels", shape[0], labels.len()),
        ));
    }
    let labels = check_labels(&labels, 10, labels_path, 8)?;
    let inputs = Tensor::new(shape, pixels.iter().map(|&p| S::of(byte_to_unit(p))).collect())?;
    DatasetHandle::new(inputs, labels, 10, format!("idx:{}", images_path.display()))
}

fn check_labels(raw: &[u8], classes: usize, path: &Path, base: usize) -> Result<Vec<usize>> {
    raw.iter()
        .enumerate()
        .map(|(i, &l)| {
            if usize::from(l) < classes {
                Ok(usize::from(l))
            } else {
                Err(parse_err(path, base + i, format!("label {l} out of range")))
            }
        })
        .collect()
}

/// Parses CIFAR-10 binary batches: records of one label byte followed by
/// 1024 red, 1024 green and 1024 blue bytes.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(parse_err(
            path,
            bytes.len() - bytes.len() % CIFAR_RECORD_BYTES,
            format!("size {} is not a multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
        ));
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES);
    let mut pixels = Vec::with_capacity(bytes.len());
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] >= 10 {
            return Err(parse_err(
                path,
                r * CIFAR_RECORD_BYTES,
                format!("label {} out of range", rec[0]),
            ));
        }
        labels.push(usize::from(rec[0]));
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

pub fn load_cifar10<S: Scalar, P: AsRef<Path>>(batch_paths: &[P]) -> Result<DatasetHandle<S>> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for p in batch_paths {
        let p = p.as_ref();
        let (l, px) = parse_cifar10(&read_maybe_gz(p)?, p)?;
        labels.extend(l);
        pixels.extend(px);
    }
    let n = labels.len();
    let inputs = Tensor::new(
        vec![n, 3, 32, 32],
        pixels.iter().map(|&p| S::of(byte_to_unit(p))).collect(),
    )?;
    let source = batch_paths
        .iter()
        .map(|p| p.as_ref().display().to_string())
        .collect::<Vec<_>>()
        .join(",");
    DatasetHandle::new(inputs, labels, 10, format!("cifar10:{source}"))
}

/// Class-stratified subset of `n` samples.
///
/// Each class receives `n / classes` samples (the remainder goes to the
/// lowest class indices); classes with too few samples give up their share to
/// the others. Selected samples keep their original relative order.
pub fn subset<S: Scalar>(data: &DatasetHandle<S>, n: usize, seed: u64) -> Result<DatasetHandle<S>> {
    if n == 0 {
        return Err(Error::invalid("subset", "n must be positive"));
    }
    if n > data.len() {
        return Err(Error::invalid(
            "subset",
            format!("requested {n} samples from a dataset of {}", data.len()),
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    // Water-filling: repeatedly split what is left evenly over classes that
    // still have unused samples.
    let mut quota = vec![0usize; data.classes];
    let mut left = n;
    while left > 0 {
        let open: Vec<usize> = (0..data.classes).filter(|&c| quota[c] < by_class[c].len()).collect();
        let share = left / open.len();
        let mut extra = left % open.len();
        for &c in &open {
            let want = share + usize::from(extra > 0);
            extra = extra.saturating_sub(1);
            let take = want.min(by_class[c].len() - quota[c]);
            quota[c] += take;
            left -= take;
        }
    }

    let mut chosen: Vec<usize> = by_class
        .iter()
        .zip(&quota)
        .flat_map(|(members, &q)| members[..q].iter().copied())
        .collect();
    chosen.sort_unstable();
    let mut out = data.select(&chosen)?;
    out.source = format!("{}[subset n={n} seed={seed}]", data.source);
    Ok(out)
}
