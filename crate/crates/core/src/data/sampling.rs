//! Uniform tuple sampling under label constraints.

use super::{class_index, DatasetRecord};
use crate::attention::Arch;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Index pair with its class relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSample {
    pub a: usize,
    pub b: usize,
    pub same_class: bool,
}

/// `label(a) == label(p) != label(n)`, `a != p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletSample {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Two negatives of mutually distinct classes, both different from the
/// anchor's class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadrupletSample {
    pub anchor: usize,
    pub positive: usize,
    pub negative1: usize,
    pub negative2: usize,
}

/// A sampled batch for one architecture.
pub enum TupleSet {
    Pairs(Vec<PairSample>),
    Triplets(Vec<TripletSample>),
    Quadruplets(Vec<QuadrupletSample>),
}

impl TupleSet {
    pub fn len(&self) -> usize {
        match self {
            TupleSet::Pairs(v) => v.len(),
            TupleSet::Triplets(v) => v.len(),
            TupleSet::Quadruplets(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn pick(rng: &mut SplitMix64, candidates: &[usize]) -> usize {
    candidates[rng.below(candidates.len())]
}

/// Sample `batch_tuples` uniform tuples satisfying the label constraints of
/// `arch`. Pairs choose same/different class with a fair coin.
pub fn sample_tuples(
    records: &[DatasetRecord],
    arch: Arch,
    batch_tuples: usize,
    rng: &mut SplitMix64,
) -> Result<TupleSet> {
    if batch_tuples == 0 {
        return Err(Error::Data("batch_tuples must be >= 1".into()));
    }
    let by_class = class_index(records)?;
    let n_classes = by_class.len();
    if n_classes < 2 {
        return Err(Error::Data("sampling needs at least 2 classes".into()));
    }
    if let Some(small) = by_class.iter().position(|c| c.len() < 2) {
        return Err(Error::Data(format!(
            "class {small} has fewer than 2 records"
        )));
    }
    if arch == Arch::Quadruplet && n_classes < 3 {
        return Err(Error::Data(
            "quadruplet sampling needs at least 3 classes".into(),
        ));
    }

    let same_class_partner = |rng: &mut SplitMix64, a: usize| {
        let peers: Vec<usize> = by_class[records[a].label]
            .iter()
            .copied()
            .filter(|&i| i != a)
            .collect();
        pick(rng, &peers)
    };
    let other_class_record = |rng: &mut SplitMix64, excluded: &[usize]| {
        let candidates: Vec<usize> = (0..records.len())
            .filter(|&i| !excluded.contains(&records[i].label))
            .collect();
        pick(rng, &candidates)
    };

    match arch {
        Arch::Siamese => {
            let pairs = (0..batch_tuples)
                .map(|_| {
                    let same_class = rng.flip();
                    let a = rng.below(records.len());
                    let b = if same_class {
                        same_class_partner(rng, a)
                    } else {
                        other_class_record(rng, &[records[a].label])
                    };
                    PairSample { a, b, same_class }
                })
                .collect();
            Ok(TupleSet::Pairs(pairs))
        }
        Arch::Triplet => {
            let triplets = (0..batch_tuples)
                .map(|_| {
                    let anchor = rng.below(records.len());
                    let positive = same_class_partner(rng, anchor);
                    let negative = other_class_record(rng, &[records[anchor].label]);
                    TripletSample { anchor, positive, negative }
                })
                .collect();
            Ok(TupleSet::Triplets(triplets))
        }
        Arch::Quadruplet => {
            let quads = (0..batch_tuples)
                .map(|_| {
                    let anchor = rng.below(records.len());
                    let positive = same_class_partner(rng, anchor);
                    let negative1 = other_class_record(rng, &[records[anchor].label]);
                    let negative2 = other_class_record(
                        rng,
                        &[records[anchor].label, records[negative1].label],
                    );
                    QuadrupletSample { anchor, positive, negative1, negative2 }
                })
                .collect();
            Ok(TupleSet::Quadruplets(quads))
        }
    }
}
