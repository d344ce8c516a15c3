//! IDX file ingestion (the MNIST container format): big-endian magic and
//! dimensions, unsigned-byte payload scaled to [0,1].

use std::path::Path;

use super::DatasetRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated (needed {} bytes at offset {}, file has {})",
                self.path,
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parse an IDX image/label file pair into records (no ground-truth masks).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<DatasetRecord>> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();

    let mut ir = Reader { bytes: &image_bytes, pos: 0, path: &ipath };
    let magic = ir.u32_be()?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{ipath}: bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = ir.u32_be()? as usize;
    let rows = ir.u32_be()? as usize;
    let cols = ir.u32_be()? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("{ipath}: zero image dimensions")));
    }

    let mut lr = Reader { bytes: &label_bytes, pos: 0, path: &lpath };
    let magic = lr.u32_be()?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{lpath}: bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let n_labels = lr.u32_be()? as usize;
    if n_labels != n {
        return Err(Error::Data(format!(
            "image/label count mismatch: {n} images vs {n_labels} labels"
        )));
    }

    let mut records = Vec::with_capacity(n);
    let labels = lr.take(n)?;
    for (id, &label) in labels.iter().enumerate() {
        let pixels = ir.take(rows * cols)?;
        let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
        records.push(DatasetRecord {
            id,
            image: Tensor::new(&[rows, cols, 1], data)?,
            label: label as usize,
            gt_mask: None,
        });
    }
    if !ir.done() {
        return Err(Error::Format(format!("{ipath}: trailing bytes after payload")));
    }
    if !lr.done() {
        return Err(Error::Format(format!("{lpath}: trailing bytes after payload")));
    }
    Ok(records)
}

/// Write records to an IDX image/label file pair. Pixels are quantized with
/// `round(v * 255)`; labels must fit a byte.
pub fn save_idx(records: &[DatasetRecord], images_path: &Path, labels_path: &Path) -> Result<()> {
    let first = records.first().ok_or_else(|| Error::Data("no records to save".into()))?;
    let (rows, cols) = (first.height(), first.width());
    if first.image.shape()[2] != 1 {
        return Err(Error::Data("IDX export supports single-channel images".into()));
    }

    let mut images = Vec::with_capacity(16 + records.len() * rows * cols);
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(records.len() as u32).to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());

    let mut labels = Vec::with_capacity(8 + records.len());
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(records.len() as u32).to_be_bytes());

    for r in records {
        if r.height() != rows || r.width() != cols {
            return Err(Error::Data("inconsistent image sizes in IDX export".into()));
        }
        if r.label > u8::MAX as usize {
            return Err(Error::Data(format!("label {} does not fit a byte", r.label)));
        }
        for &v in r.image.data() {
            images.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        labels.push(r.label as u8);
    }
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, labels)?;
    Ok(())
}
