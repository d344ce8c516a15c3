//! Synthetic grayscale shape dataset with exact foreground masks.
//!
//! Classes are shape types rendered at randomized position, scale, and
//! intensity over a noise background. The renderer keeps every mask's
//! foreground fraction inside [0.02, 0.5] by resampling out-of-bound draws.

use super::DatasetRecord;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Class order is fixed: `n_classes = k` selects the first `k` kinds.
pub const SHAPE_KINDS: [ShapeKind; 8] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Cross,
    ShapeKind::Star,
    ShapeKind::Ring,
    ShapeKind::Bar,
    ShapeKind::Diamond,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Star,
    Ring,
    Bar,
    Diamond,
}

impl ShapeKind {
    fn contains(&self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.82 * r && dy.abs() <= 0.82 * r,
            ShapeKind::Triangle => {
                // Upward triangle: apex at dy = -r, base at dy = r.
                dy >= -r && dy <= r && dx.abs() <= 0.95 * r * (dy + r) / (2.0 * r)
            }
            ShapeKind::Cross => {
                (dx.abs() <= 0.32 * r && dy.abs() <= r)
                    || (dy.abs() <= 0.32 * r && dx.abs() <= r)
            }
            ShapeKind::Star => {
                let d = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                let lobe = 0.5 * ((5.0 * theta).cos() + 1.0);
                d <= r * (0.40 + 0.60 * lobe)
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            ShapeKind::Bar => dx.abs() <= r && dy.abs() <= 0.38 * r,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

const MIN_FG_FRAC: f64 = 0.02;
const MAX_FG_FRAC: f64 = 0.5;

struct Rendered {
    pixels: Vec<f64>,
    mask: Vec<bool>,
}

fn render(kind: ShapeKind, hw: usize, rng: &mut SplitMix64) -> Rendered {
    // Resample until the foreground fraction lands in bounds; the radius
    // range makes out-of-bound draws rare.
    for _ in 0..64 {
        let r = rng.uniform(0.16, 0.30) * hw as f64;
        let cx = rng.uniform(r + 1.0, hw as f64 - r - 1.0);
        let cy = rng.uniform(r + 1.0, hw as f64 - r - 1.0);
        let intensity = rng.uniform(0.65, 1.0);

        let mut pixels = Vec::with_capacity(hw * hw);
        let mut mask = Vec::with_capacity(hw * hw);
        let mut fg = 0usize;
        for y in 0..hw {
            for x in 0..hw {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if kind.contains(dx, dy, r) {
                    fg += 1;
                    mask.push(true);
                    pixels.push((intensity + rng.uniform(-0.05, 0.05)).clamp(0.0, 1.0));
                } else {
                    mask.push(false);
                    pixels.push(rng.uniform(0.0, 0.25));
                }
            }
        }
        let frac = fg as f64 / (hw * hw) as f64;
        if (MIN_FG_FRAC..=MAX_FG_FRAC).contains(&frac) {
            return Rendered { pixels, mask };
        }
    }
    unreachable!("renderer could not satisfy the foreground bound");
}

/// Generate `n_classes * per_class` labeled records, `per_class` for each of
/// the first `n_classes` shape kinds. Deterministic in `seed`.
pub fn generate_synthetic(
    n_classes: usize,
    per_class: usize,
    hw: usize,
    seed: u64,
) -> Result<Vec<DatasetRecord>> {
    if !(2..=SHAPE_KINDS.len()).contains(&n_classes) {
        return Err(Error::Data(format!(
            "n_classes must be in [2, {}], got {n_classes}",
            SHAPE_KINDS.len()
        )));
    }
    if per_class == 0 {
        return Err(Error::Data("per_class must be >= 1".into()));
    }
    if hw < 8 {
        return Err(Error::Data(format!("image size {hw} too small")));
    }
    let mut rng = SplitMix64::new(seed);
    let mut records = Vec::with_capacity(n_classes * per_class);
    for label in 0..n_classes {
        for _ in 0..per_class {
            let rendered = render(SHAPE_KINDS[label], hw, &mut rng);
            records.push(DatasetRecord {
                id: records.len(),
                image: Tensor::new(&[hw, hw, 1], rendered.pixels)?,
                label,
                gt_mask: Some(rendered.mask),
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_identical_dataset() {
        let a = generate_synthetic(3, 4, 16, 123).unwrap();
        let b = generate_synthetic(3, 4, 16, 123).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.image.data(), rb.image.data());
            assert_eq!(ra.gt_mask, rb.gt_mask);
            assert_eq!(ra.label, rb.label);
        }
    }

    #[test]
    fn counts_and_labels() {
        let records = generate_synthetic(5, 100, 16, 7).unwrap();
        assert_eq!(records.len(), 500);
        for label in 0..5 {
            assert_eq!(records.iter().filter(|r| r.label == label).count(), 100);
        }
        // Unique, dense ids.
        for (i, r) in records.iter().enumerate() {
            assert_eq!(r.id, i);
        }
    }

    #[test]
    fn foreground_fraction_in_bounds() {
        let records = generate_synthetic(8, 10, 24, 99).unwrap();
        for r in &records {
            let mask = r.gt_mask.as_ref().unwrap();
            let frac = mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64;
            assert!(
                (MIN_FG_FRAC..=MAX_FG_FRAC).contains(&frac),
                "class {} fraction {frac}",
                r.label
            );
        }
    }

    #[test]
    fn rejects_unsupported_class_count() {
        assert!(generate_synthetic(1, 10, 16, 0).is_err());
        assert!(generate_synthetic(9, 10, 16, 0).is_err());
    }

    #[test]
    fn pixels_in_unit_range() {
        let records = generate_synthetic(4, 5, 16, 41).unwrap();
        for r in &records {
            assert!(r.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
