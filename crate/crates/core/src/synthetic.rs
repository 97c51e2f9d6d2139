//! Small generated segmentation problem: bright disks and mid-grey diagonal
//! stripes on a dark background.

use rand::{Rng as _, SeedableRng};

use crate::dataset::{Sample, SegDataset};
use crate::error::Result;
use crate::palette::{one_hot, ClassPalette};
use crate::tensor::{Scalar, Tensor};
use crate::Rng;

pub const ROWS: usize = 32;
pub const COLS: usize = 48;

const BACKGROUND: usize = 0;
const DISK: usize = 1;
const STRIPE: usize = 2;

/// Background blue, disks red, stripes green.
pub fn palette() -> ClassPalette {
    ClassPalette::from_pairs(&[
        ("background", [0, 0, 255]),
        ("disk", [255, 0, 0]),
        ("stripe", [0, 255, 0]),
    ])
    .expect("distinct colours")
}

/// One `ROWS x COLS` grey image with its class map.
pub fn generate(seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = Rng::seed_from_u64(seed);
    let period = rng.gen_range(11..15) as isize;
    let offset = rng.gen_range(0..period);
    let slope: isize = if rng.gen() { 1 } else { -1 };
    let mut classes = vec![BACKGROUND; ROWS * COLS];
    for r in 0..ROWS {
        for c in 0..COLS {
            let t = (r as isize + slope * c as isize + offset).rem_euclid(period);
            if t < 3 {
                classes[r * COLS + c] = STRIPE;
            }
        }
    }
    for _ in 0..3 {
        let radius = rng.gen_range(4.0..6.5f64);
        let (cr, cc) = (rng.gen_range(6.0..(ROWS - 6) as f64), rng.gen_range(6.0..(COLS - 6) as f64));
        for r in 0..ROWS {
            for c in 0..COLS {
                if (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) <= radius * radius {
                    classes[r * COLS + c] = DISK;
                }
            }
        }
    }
    let level = [0.15, 0.85, 0.5];
    let image = Tensor::from_fn(&[ROWS, COLS, 1], |i| {
        let noise: f64 = rng.gen_range(-0.05..0.05);
        // Quantise to 8 bits so PNG round trips are exact.
        ((level[classes[i]] + noise) * 255.0).round() as Scalar / 255.0
    });
    (image, classes)
}

/// Two generated image/mask pairs, ids `synthetic_0` and `synthetic_1`.
pub fn disks_and_stripes(seed: u64) -> Result<SegDataset> {
    let items = (0..2u64)
        .map(|i| {
            let (image, classes) = generate(crate::derive_seed(seed, &[i]));
            Ok(Sample {
                image,
                mask: one_hot(&classes, ROWS, COLS, 3)?,
                id: format!("synthetic_{i}"),
            })
        })
        .collect::<Result<_>>()?;
    SegDataset::new(items, palette())
}
