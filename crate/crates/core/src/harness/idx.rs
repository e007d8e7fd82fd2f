//! IDX file ingestion and emission (the MNIST container format).
//!
//! Images: big-endian magic `0x00000803`, then count/rows/cols as u32, then
//! one unsigned byte per pixel, scaled to `[0, 1]` on load. Labels: magic
//! `0x00000801`, then count, then one unsigned byte per label.

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flsim::Dataset;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(reader: &mut impl Read, field: &str) -> Result<u32> {
    reader
        .read_u32::<BigEndian>()
        .map_err(|_| Error::Format(format!("truncated file while reading {field}")))
}

/// Loads an image/label pair. Samples come back as flat `[rows * cols]`
/// tensors with values in `[0, 1]`; the class count is the largest label
/// plus one.
pub fn load_idx_dataset(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let mut images = BufReader::new(File::open(image_path)?);
    let magic = read_u32(&mut images, "image magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
        )));
    }
    let count = read_u32(&mut images, "image count")? as usize;
    let rows = read_u32(&mut images, "image rows")? as usize;
    let cols = read_u32(&mut images, "image cols")? as usize;
    let mut pixels = Vec::new();
    images.read_to_end(&mut pixels)?;
    if pixels.len() != count * rows * cols {
        return Err(Error::Format(format!(
            "image data holds {} bytes, expected {} for {count} images of {rows}x{cols}",
            pixels.len(),
            count * rows * cols
        )));
    }

    let mut labels_file = BufReader::new(File::open(label_path)?);
    let magic = read_u32(&mut labels_file, "label magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!(
            "label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
        )));
    }
    let label_count = read_u32(&mut labels_file, "label count")? as usize;
    let mut label_bytes = Vec::new();
    labels_file.read_to_end(&mut label_bytes)?;
    if label_bytes.len() != label_count {
        return Err(Error::Format(format!(
            "label data holds {} bytes, expected {label_count}",
            label_bytes.len()
        )));
    }
    if label_count != count {
        return Err(Error::Format(format!(
            "image count {count} does not match label count {label_count}"
        )));
    }
    if count == 0 {
        return Err(Error::Format("image count is zero".into()));
    }

    let dim = rows * cols;
    let samples = pixels
        .chunks_exact(dim)
        .map(|chunk| {
            Tensor::new(
                vec![dim],
                chunk.iter().map(|&b| f64::from(b) / 255.0).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(samples, labels, class_count)
}

/// Writes a dataset as an IDX image/label pair. Values are min-max scaled to
/// the byte range, so the emitted dataset is a normalized rendition of the
/// input. Sample shapes must be `[d]`, `[h, w]` or `[1, h, w]`.
pub fn save_idx_dataset(dataset: &Dataset, image_path: &Path, label_path: &Path) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Format("refusing to write an empty dataset".into()));
    }
    if dataset.class_count > 256 {
        return Err(Error::Format(format!(
            "{} classes cannot be stored as label bytes",
            dataset.class_count
        )));
    }
    let shape = dataset.samples[0].shape().to_vec();
    let (rows, cols) = match shape.as_slice() {
        [d] => (1usize, *d),
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => {
            return Err(Error::Format(format!(
                "sample shape {other:?} does not fit a single-channel IDX image"
            )))
        }
    };
    if dataset.samples.iter().any(|s| s.shape() != shape) {
        return Err(Error::Format("samples have mixed shapes".into()));
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for sample in &dataset.samples {
        for &v in sample.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut images = BufWriter::new(File::create(image_path)?);
    images.write_u32::<BigEndian>(IMAGE_MAGIC)?;
    images.write_u32::<BigEndian>(dataset.len() as u32)?;
    images.write_u32::<BigEndian>(rows as u32)?;
    images.write_u32::<BigEndian>(cols as u32)?;
    for sample in &dataset.samples {
        for &v in sample.data() {
            let byte = ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
            images.write_u8(byte)?;
        }
    }
    images.flush()?;

    let mut labels = BufWriter::new(File::create(label_path)?);
    labels.write_u32::<BigEndian>(LABEL_MAGIC)?;
    labels.write_u32::<BigEndian>(dataset.len() as u32)?;
    for &label in &dataset.labels {
        labels.write_u8(label as u8)?;
    }
    labels.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(bytes).unwrap();
        path
    }

    fn image_bytes(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        out.extend_from_slice(&count.to_be_bytes());
        out.extend_from_slice(&rows.to_be_bytes());
        out.extend_from_slice(&cols.to_be_bytes());
        out.extend_from_slice(pixels);
        out
    }

    fn label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn loads_hand_built_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let images = write_file(
            dir.path(),
            "img",
            &image_bytes(1, 2, 2, &[0, 255, 128, 64]),
        );
        let labels = write_file(dir.path(), "lbl", &label_bytes(&[3]));
        let data = load_idx_dataset(&images, &labels).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.labels, vec![3]);
        assert_eq!(data.class_count, 4);
        let expected = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (got, want) in data.samples[0].data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn count_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let images = write_file(dir.path(), "img", &image_bytes(1, 1, 2, &[1, 2]));
        let labels = write_file(dir.path(), "lbl", &label_bytes(&[0, 1]));
        let err = load_idx_dataset(&images, &labels);
        assert!(matches!(err, Err(Error::Format(_))));
    }

    #[test]
    fn empty_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let images = write_file(dir.path(), "img", &[]);
        let labels = write_file(dir.path(), "lbl", &label_bytes(&[0]));
        let err = load_idx_dataset(&images, &labels);
        assert!(matches!(err, Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = image_bytes(1, 1, 1, &[9]);
        bytes[3] = 0x04;
        let images = write_file(dir.path(), "img", &bytes);
        let labels = write_file(dir.path(), "lbl", &label_bytes(&[0]));
        let err = load_idx_dataset(&images, &labels);
        assert!(matches!(err, Err(Error::Format(_))));
    }

    #[test]
    fn truncated_pixels_are_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let images = write_file(dir.path(), "img", &image_bytes(2, 2, 2, &[1, 2, 3]));
        let labels = write_file(dir.path(), "lbl", &label_bytes(&[0, 1]));
        let err = load_idx_dataset(&images, &labels);
        assert!(matches!(err, Err(Error::Format(_))));
    }

    #[test]
    fn save_and_load_round_trip_preserves_labels_and_ordering() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![
            Tensor::vector(vec![0.0, 0.5, 1.0, 0.25]),
            Tensor::vector(vec![1.0, 0.75, 0.0, 0.5]),
        ];
        let data = Dataset::new(samples, vec![1, 0], 2).unwrap();
        let images = dir.path().join("images.idx");
        let labels = dir.path().join("labels.idx");
        save_idx_dataset(&data, &images, &labels).unwrap();
        let loaded = load_idx_dataset(&images, &labels).unwrap();
        assert_eq!(loaded.labels, data.labels);
        assert_eq!(loaded.len(), 2);
        // min-max scaling maps the extremes onto 0 and 1 exactly
        assert_eq!(loaded.samples[0].data()[0], 0.0);
        assert_eq!(loaded.samples[0].data()[2], 1.0);
    }
}
