//! IDX image/label files and deterministic minibatching.
//!
//! IDX layout: a big-endian `u32` magic (`0x00000803` for rank-3 image files,
//! `0x00000801` for rank-1 label files), one big-endian `u32` per dimension,
//! then the unsigned-byte payload in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `[count, H, W, 1]` scaled to `[0, 1]` with one label each.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    images: Tensor<f32>,
    labels: Vec<usize>,
}

impl DatasetSplit {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        let dims = images.dims();
        if dims.len() != 4 || dims[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: dims.first().copied().unwrap_or(0),
                labels: labels.len(),
            });
        }
        Ok(DatasetSplit { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(height, width, channels)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let d = self.images.dims();
        (d[1], d[2], d[3])
    }

    /// One past the largest label.
    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// The first `count` examples (all of them if `count` is larger).
    pub fn head(&self, count: usize) -> Self {
        if count >= self.len() {
            return self.clone();
        }
        let indices: Vec<usize> = (0..count).collect();
        self.gather(&indices)
    }

    /// Examples at `indices`, in that order, as one batch.
    pub fn gather(&self, indices: &[usize]) -> Self {
        let (h, w, c) = self.image_dims();
        let stride = h * w * c;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
        }
        let images = Tensor::new([indices.len(), h, w, c], data).expect("non-empty gather");
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        DatasetSplit { images, labels }
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx {
            path: path.to_string(),
            offset,
            detail: "truncated header".into(),
        })
}

/// Parses an IDX header with `rank` dimensions; returns extents and the
/// payload offset.
fn parse_header(bytes: &[u8], magic: u32, rank: usize, path: &str) -> Result<(Vec<usize>, usize)> {
    let found = read_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::Idx {
            path: path.to_string(),
            offset: 0,
            detail: format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        });
    }
    let dims = (0..rank)
        .map(|i| read_u32(bytes, 4 + 4 * i, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let offset = 4 + 4 * rank;
    let expected: usize = dims.iter().product();
    let available = bytes.len() - offset;
    if available < expected {
        return Err(Error::Idx {
            path: path.to_string(),
            offset: bytes.len(),
            detail: format!("truncated payload: {available} of {expected} bytes"),
        });
    }
    if available > expected {
        return Err(Error::Idx {
            path: path.to_string(),
            offset: offset + expected,
            detail: format!("{} trailing bytes", available - expected),
        });
    }
    Ok((dims, offset))
}

/// Decodes an image file into `[count, rows, cols, 1]` scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<Tensor<f32>> {
    let (dims, offset) = parse_header(bytes, IMAGES_MAGIC, 3, path)?;
    if dims.contains(&0) {
        return Err(Error::Idx {
            path: path.to_string(),
            offset: 4,
            detail: format!("empty image file {dims:?}"),
        });
    }
    let data = bytes[offset..].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new([dims[0], dims[1], dims[2], 1], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<usize>> {
    let (_, offset) = parse_header(bytes, LABELS_MAGIC, 1, path)?;
    Ok(bytes[offset..].iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx_pair(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&read(ip)?, &ip.display().to_string())?;
    let labels = parse_idx_labels(&read(lp)?, &lp.display().to_string())?;
    if images.dims()[0] != labels.len() {
        return Err(Error::CountMismatch {
            images: images.dims()[0],
            labels: labels.len(),
        });
    }
    DatasetSplit::new(images, labels)
}

/// Encodes images (values in `[0, 1]`, `[count, H, W, 1]`) as an IDX file.
pub fn encode_idx_images(images: &Tensor<f32>) -> Vec<u8> {
    let d = images.dims();
    let mut out = Vec::with_capacity(16 + images.numel());
    out.extend(IMAGES_MAGIC.to_be_bytes());
    for &extent in &d[..3] {
        out.extend((extent as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn new(batch_size: usize, seed: u64, drop_last: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch plan", "batch_size must be at least 1"));
        }
        Ok(BatchPlan {
            batch_size,
            seed,
            drop_last,
        })
    }

    /// Example order for `epoch`: a Fisher-Yates shuffle seeded from the plan
    /// seed mixed with the epoch index.
    pub fn epoch_order(&self, count: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..count).collect();
        Rng::new(Rng::derive_seed(self.seed, epoch as u64)).shuffle(&mut order);
        order
    }

    /// Index groups for one epoch, after `drop_last` truncation.
    pub fn epoch_batches(&self, count: usize, epoch: usize) -> Vec<Vec<usize>> {
        self.epoch_order(count, epoch)
            .chunks(self.batch_size)
            .filter(|c| !self.drop_last || c.len() == self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

/// Shuffled minibatches of `split` for `epoch`.
pub fn batches<'a>(
    split: &'a DatasetSplit,
    plan: &BatchPlan,
    epoch: usize,
) -> impl Iterator<Item = DatasetSplit> + 'a {
    plan.epoch_batches(split.len(), epoch)
        .into_iter()
        .map(move |indices| split.gather(&indices))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        images.extend([0, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 6]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        (images, labels)
    }

    #[test]
    fn hand_built_fixture_round_trips_pixels() {
        let (images, labels) = fixture();
        let t = parse_idx_images(&images, "fixture").unwrap();
        assert_eq!(t.dims(), &[2, 2, 3, 1]);
        let expected: Vec<f32> = [0u8, 255, 51, 102, 153, 204, 1, 2, 3, 4, 5, 6]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        assert_eq!(t.data(), expected.as_slice());
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[2], 0.2);
        assert_eq!(parse_idx_labels(&labels, "fixture").unwrap(), vec![7, 3]);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let (mut images, _) = fixture();
        images[3] = 1;
        let err = parse_idx_images(&images, "x").unwrap_err();
        assert!(matches!(err, Error::Idx { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_files_rejected() {
        let (images, labels) = fixture();
        let err = parse_idx_images(&images[..images.len() - 1], "x").unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
        let err = parse_idx_labels(&labels[..6], "y").unwrap_err();
        assert!(matches!(err, Error::Idx { offset: 4, .. }), "{err}");
    }

    #[test]
    fn count_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (images, _) = fixture();
        let labels = encode_idx_labels(&[1, 2, 3]);
        std::fs::write(dir.path().join("i"), images).unwrap();
        std::fs::write(dir.path().join("l"), labels).unwrap();
        let err = load_idx_pair(dir.path().join("i"), dir.path().join("l")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2 images") && msg.contains("3 labels"), "{msg}");
    }

    #[test]
    fn encode_parse_round_trip() {
        let (images, labels) = fixture();
        let t = parse_idx_images(&images, "f").unwrap();
        assert_eq!(encode_idx_images(&t), images);
        assert_eq!(encode_idx_labels(&parse_idx_labels(&labels, "f").unwrap()), labels);
    }

    #[test]
    fn drop_last_arithmetic() {
        let plan = BatchPlan::new(3, 11, true).unwrap();
        let batches = plan.epoch_batches(10, 0);
        assert_eq!(batches.len(), 3);
        assert!(batches.iter().all(|b| b.len() == 3));
        let plan = BatchPlan::new(3, 11, false).unwrap();
        assert_eq!(plan.epoch_batches(10, 0).iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
    }

    #[test]
    fn full_batch_contains_everything_once() {
        let plan = BatchPlan::new(10, 5, false).unwrap();
        let batches = plan.epoch_batches(10, 2);
        assert_eq!(batches.len(), 1);
        let mut b = batches[0].clone();
        b.sort_unstable();
        assert_eq!(b, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn order_is_seeded_and_varies_by_epoch() {
        let plan = BatchPlan::new(4, 99, false).unwrap();
        assert_eq!(plan.epoch_order(100, 0), plan.epoch_order(100, 0));
        assert_ne!(plan.epoch_order(100, 0), plan.epoch_order(100, 1));
        let other = BatchPlan { seed: 100, ..plan };
        assert_ne!(plan.epoch_order(100, 0), other.epoch_order(100, 0));
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(BatchPlan::new(0, 1, false).is_err());
    }
}
