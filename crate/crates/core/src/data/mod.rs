//! Datasets: synthetic shape generation with ground-truth masks, IDX-format
//! ingestion, and tuple sampling.

mod idx;
mod sampling;
mod synthetic;

pub use idx::{load_idx, save_idx};
pub use sampling::{sample_tuples, PairSample, QuadrupletSample, TripletSample, TupleSet};
pub use synthetic::{generate_synthetic, ShapeKind, SHAPE_KINDS};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One dataset example: an image, its class label, and (for synthetic data)
/// the ground-truth foreground mask.
#[derive(Clone)]
pub struct DatasetRecord {
    pub id: usize,
    /// `[h,w,c]`, values in [0,1].
    pub image: Tensor,
    pub label: usize,
    /// Row-major `h*w` foreground flags; absent for ingested data.
    pub gt_mask: Option<Vec<bool>>,
}

impl DatasetRecord {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Index records by label, validating contiguous labels and the arity
/// requirements of sampling.
pub(crate) fn class_index(records: &[DatasetRecord]) -> Result<Vec<Vec<usize>>> {
    if records.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let n_classes = records.iter().map(|r| r.label).max().unwrap() + 1;
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, r) in records.iter().enumerate() {
        by_class[r.label].push(i);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {empty} has no records")));
    }
    Ok(by_class)
}
