//! Mapping between RGB label colours and one-hot class tensors.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteEntry {
    pub name: String,
    pub color: [u8; 3],
}

/// Ordered class colours; class `k` is entry `k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<PaletteEntry>", into = "Vec<PaletteEntry>")]
pub struct ClassPalette {
    entries: Vec<PaletteEntry>,
}

impl TryFrom<Vec<PaletteEntry>> for ClassPalette {
    type Error = Error;

    fn try_from(entries: Vec<PaletteEntry>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<ClassPalette> for Vec<PaletteEntry> {
    fn from(p: ClassPalette) -> Self {
        p.entries
    }
}

impl ClassPalette {
    pub fn new(entries: Vec<PaletteEntry>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::Config("palette needs at least two classes".into()));
        }
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[..i] {
                if a.color == b.color {
                    return Err(Error::Config(format!(
                        "palette classes `{}` and `{}` share colour {:?}",
                        b.name, a.name, a.color
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    /// Convenience constructor from `(name, colour)` pairs.
    pub fn from_pairs(pairs: &[(&str, [u8; 3])]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(name, color)| PaletteEntry {
                    name: name.to_string(),
                    color,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Closest class by squared RGB distance; ties go to the lower index.
    pub fn nearest(&self, px: [u8; 3]) -> (usize, u32) {
        let mut best = (0, u32::MAX);
        for (i, e) in self.entries.iter().enumerate() {
            let d = (0..3)
                .map(|c| (px[c] as i32 - e.color[c] as i32).pow(2) as u32)
                .sum::<u32>();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

/// How strictly colours must match.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    /// Reject any pixel that is not exactly a palette colour.
    pub exact: bool,
    /// Pixels farther than this (Euclidean RGB) from every class are counted
    /// as far.
    pub far_distance: f64,
    /// Fraction of far pixels above which a warning is reported.
    pub warn_fraction: f64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            exact: false,
            far_distance: 30.0,
            warn_fraction: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DecodeReport {
    pub pixels: usize,
    pub inexact: usize,
    pub far: usize,
}

impl DecodeReport {
    pub fn far_fraction(&self) -> f64 {
        self.far as f64 / self.pixels.max(1) as f64
    }

    pub fn should_warn(&self, opts: &DecodeOptions) -> bool {
        self.far_fraction() > opts.warn_fraction
    }
}

/// Decodes an RGB mask into a `[H,W,K]` one-hot tensor.
pub fn decode_mask(rgb: &RgbImage, palette: &ClassPalette, opts: &DecodeOptions) -> Result<(Tensor, DecodeReport)> {
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let k = palette.len();
    let far_sq = opts.far_distance * opts.far_distance;
    let mut out = Tensor::zeros(&[h, w, k]);
    let mut report = DecodeReport {
        pixels: w * h,
        ..Default::default()
    };
    for (x, y, Rgb(px)) in rgb.enumerate_pixels() {
        let (class, d) = palette.nearest(*px);
        if d > 0 {
            if opts.exact {
                return Err(Error::Dataset(format!(
                    "pixel ({x}, {y}) has colour {px:?}, which is not in the palette"
                )));
            }
            report.inexact += 1;
            if d as f64 > far_sq {
                report.far += 1;
            }
        }
        out.set(&[y as usize, x as usize, class], 1.0);
    }
    Ok((out, report))
}

fn labels_to_rgb(t: &Tensor, palette: &ClassPalette) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[2] != palette.len() {
        return Err(Error::invalid(
            "encode_mask",
            format!("expects [H,W,{}], got {s:?}", palette.len()),
        ));
    }
    let (h, w, k) = (s[0], s[1], s[2]);
    let data = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = (y as usize * w + x as usize) * k;
        Rgb(palette.entries[argmax(&data[i..i + k])].color)
    }))
}

/// Encodes a one-hot `[H,W,K]` mask as palette colours.
pub fn encode_mask(one_hot: &Tensor, palette: &ClassPalette) -> Result<RgbImage> {
    if one_hot.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("encode_mask", "mask is not one-hot"));
    }
    labels_to_rgb(one_hot, palette)
}

/// Colours each pixel of a `[H,W,K]` probability map by its argmax class.
pub fn encode_prediction(probs: &Tensor, palette: &ClassPalette) -> Result<RgbImage> {
    labels_to_rgb(probs, palette)
}

/// Argmax class map of a `[H,W,K]` tensor, row-major.
pub fn class_indices(t: &Tensor) -> Vec<usize> {
    t.data().chunks(t.channels()).map(argmax).collect()
}

/// One-hot `[H,W,K]` tensor from a row-major class map.
pub fn one_hot(classes: &[usize], rows: usize, cols: usize, k: usize) -> Result<Tensor> {
    if classes.len() != rows * cols || classes.iter().any(|&c| c >= k) {
        return Err(Error::invalid("one_hot", "class map does not fit the requested shape"));
    }
    Ok(Tensor::from_fn(&[rows, cols, k], |i| (classes[i / k] == i % k) as u8 as Scalar))
}
