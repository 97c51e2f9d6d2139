//! Random affine augmentation applied identically to an image and its mask.
//!
//! The transform acts in centred `(row, col)` coordinates: the optional flips
//! come first, then shear, rotation and scale, then the shift. Output pixels
//! are filled by inverse mapping with reflect padding (`-1 -> 1`, no edge
//! repeat). Images are sampled bilinearly; masks by nearest neighbour and
//! snapped back to one-hot.

use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::tensor::{Scalar, Tensor};
use crate::{derive_seed, Rng};

/// Sampling ranges. Each `[lo, hi]` pair is sampled uniformly; `lo == hi`
/// pins the value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentRanges {
    pub rotation_deg: [f64; 2],
    pub shear_deg: [f64; 2],
    /// Shift as a fraction of the image extent, per axis.
    pub shift_frac: [f64; 2],
    pub scale: [f64; 2],
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            rotation_deg: [-30.0, 30.0],
            shear_deg: [-15.0, 15.0],
            shift_frac: [-0.1, 0.1],
            scale: [0.8, 1.25],
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
        }
    }
}

impl AugmentRanges {
    /// Ranges that always produce the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_deg: [0.0; 2],
            shear_deg: [0.0; 2],
            shift_frac: [0.0; 2],
            scale: [1.0; 2],
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("rotation_deg", self.rotation_deg),
            ("shear_deg", self.shear_deg),
            ("shift_frac", self.shift_frac),
            ("scale", self.scale),
        ];
        for (name, [lo, hi]) in pairs {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::Config(format!(
                    "augment.{name}: need finite lo <= hi, got [{lo}, {hi}]"
                )));
            }
        }
        if self.scale[0] <= 0.0 {
            return Err(Error::Config("augment.scale must be positive".into()));
        }
        if self.shear_deg[0] <= -90.0 || self.shear_deg[1] >= 90.0 {
            return Err(Error::Config("augment.shear_deg must lie inside (-90, 90)".into()));
        }
        for (name, p) in [("flip_h_prob", self.flip_h_prob), ("flip_v_prob", self.flip_v_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must lie in [0,1], got {p}")));
            }
        }
        Ok(())
    }
}

/// One concrete transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    /// `(rows, cols)` shift as a fraction of height and width.
    pub shift_frac: (f64, f64),
    pub scale: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            shear_deg: 0.0,
            shift_frac: (0.0, 0.0),
            scale: 1.0,
            flip_h: false,
            flip_v: false,
        }
    }

    /// Forward 2x2 map on centred `(row, col)` coordinates.
    ///
    /// Positive rotation sends `(r, c)` to `(c, -r)`, so `+90` equals a
    /// transpose followed by a horizontal flip. Shear slides columns in
    /// proportion to the row.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let t = self.shear_deg.to_radians().tan();
        // R * Sh with Sh = [[1, 0], [t, 1]].
        let r = [[c, s], [-s, c]];
        let sh = [[1.0, 0.0], [t, 1.0]];
        let mut m = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = self.scale * (r[i][0] * sh[0][j] + r[i][1] * sh[1][j]);
            }
        }
        m
    }
}

fn uniform(rng: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Draws one transform. Fails if a range is reversed or non-finite.
pub fn sample_params(ranges: &AugmentRanges, rng: &mut Rng) -> Result<AugmentParams> {
    ranges.validate()?;
    Ok(AugmentParams {
        rotation_deg: uniform(rng, ranges.rotation_deg),
        shear_deg: uniform(rng, ranges.shear_deg),
        shift_frac: (uniform(rng, ranges.shift_frac), uniform(rng, ranges.shift_frac)),
        scale: uniform(rng, ranges.scale),
        flip_h: rng.gen::<f64>() < ranges.flip_h_prob,
        flip_v: rng.gen::<f64>() < ranges.flip_v_prob,
    })
}

/// Reflect an integer index into `0..n` without repeating the edge.
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// Source coordinates for every output pixel, row-major.
fn source_grid(rows: usize, cols: usize, p: &AugmentParams) -> Result<Vec<(f64, f64)>> {
    let m = p.matrix();
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(Error::invalid("apply_affine", format!("singular transform {p:?}")));
    }
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (cr, cc) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let (tr, tc) = (p.shift_frac.0 * rows as f64, p.shift_frac.1 * cols as f64);
    let identity = inv == [[1.0, 0.0], [0.0, 1.0]] && tr == 0.0 && tc == 0.0;
    let mut grid = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (mut sr, mut sc) = if identity {
                (r as f64, c as f64)
            } else {
                let (y, x) = (r as f64 - cr - tr, c as f64 - cc - tc);
                (inv[0][0] * y + inv[0][1] * x + cr, inv[1][0] * y + inv[1][1] * x + cc)
            };
            // Coordinates so far live in the flipped image.
            if p.flip_v {
                sr = rows as f64 - 1.0 - sr;
            }
            if p.flip_h {
                sc = cols as f64 - 1.0 - sc;
            }
            grid.push((sr, sc));
        }
    }
    Ok(grid)
}

fn check_hwc(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::invalid(op, format!("expects [H,W,C], got {:?}", t.shape()))),
    }
}

fn sample(t: &Tensor, grid: &[(f64, f64)], interp: Interpolation, out: &mut [Scalar]) {
    let (h, w, ch) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    let px = |r: i64, c: i64| {
        let i = (reflect_index(r, h) * w + reflect_index(c, w)) * ch;
        &src[i..i + ch]
    };
    for (&(sr, sc), o) in grid.iter().zip(out.chunks_mut(ch)) {
        match interp {
            Interpolation::Nearest => o.copy_from_slice(px(sr.round() as i64, sc.round() as i64)),
            Interpolation::Bilinear => {
                let (r0, c0) = (sr.floor(), sc.floor());
                let (fr, fc) = ((sr - r0) as Scalar, (sc - c0) as Scalar);
                let (r0, c0) = (r0 as i64, c0 as i64);
                if fr == 0.0 && fc == 0.0 {
                    o.copy_from_slice(px(r0, c0));
                    continue;
                }
                let (a, b, c, d) = (px(r0, c0), px(r0, c0 + 1), px(r0 + 1, c0), px(r0 + 1, c0 + 1));
                for k in 0..ch {
                    let top = a[k] * (1.0 - fc) + b[k] * fc;
                    let bottom = c[k] * (1.0 - fc) + d[k] * fc;
                    o[k] = top * (1.0 - fr) + bottom * fr;
                }
            }
        }
    }
}

/// Applies `params` to an `[H,W,C]` image and its `[H,W,K]` one-hot mask.
pub fn apply_affine(image: &Tensor, mask: &Tensor, params: &AugmentParams) -> Result<(Tensor, Tensor)> {
    apply_affine_with(image, mask, params, Interpolation::Bilinear)
}

/// [`apply_affine`] with a choice of image interpolation.
pub fn apply_affine_with(
    image: &Tensor,
    mask: &Tensor,
    params: &AugmentParams,
    interp: Interpolation,
) -> Result<(Tensor, Tensor)> {
    let (h, w, _) = check_hwc("apply_affine", image)?;
    let (mh, mw, k) = check_hwc("apply_affine", mask)?;
    if (h, w) != (mh, mw) {
        return Err(Error::shape("apply_affine", &[h, w, k], mask.shape()));
    }
    let grid = source_grid(h, w, params)?;
    let mut img = Tensor::zeros(image.shape());
    sample(image, &grid, interp, img.data_mut());
    let mut m = Tensor::zeros(mask.shape());
    sample(mask, &grid, Interpolation::Nearest, m.data_mut());
    for px in m.data_mut().chunks_mut(k) {
        let c = argmax(px);
        px.iter_mut().enumerate().for_each(|(i, v)| *v = (i == c) as u8 as Scalar);
    }
    Ok((img, m))
}

/// One augmented training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub image: Tensor,
    pub mask: Tensor,
    /// Index of the source pair in the dataset.
    pub source: usize,
    pub params: AugmentParams,
}

/// Seed for item `item` of step `step` in epoch `epoch`.
pub fn item_seed(seed: u64, epoch: u64, step: u64, item: u64) -> u64 {
    derive_seed(seed, &[epoch, step, item])
}

/// Deterministic stream of augmented batches for one epoch.
///
/// Every step yields one augmented copy of each `(image, mask)` pair, with
/// transforms drawn from a generator seeded by `(seed, epoch, step, item)`,
/// so results do not depend on thread count or iteration order.
pub struct EpochStream<'a> {
    pairs: &'a [(Tensor, Tensor)],
    ranges: AugmentRanges,
    seed: u64,
    epoch: u64,
    steps: usize,
    next: usize,
    parallel: bool,
}

pub fn epoch_stream<'a>(
    pairs: &'a [(Tensor, Tensor)],
    steps: usize,
    ranges: &AugmentRanges,
    seed: u64,
    epoch: u64,
) -> Result<EpochStream<'a>> {
    ranges.validate()?;
    Ok(EpochStream {
        pairs,
        ranges: ranges.clone(),
        seed,
        epoch,
        steps,
        next: 0,
        parallel: true,
    })
}

impl EpochStream<'_> {
    /// Disables rayon for this stream. Output is identical either way.
    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }

    fn make(&self, step: usize, item: usize) -> Result<AugmentedPair> {
        let mut rng = Rng::seed_from_u64(item_seed(self.seed, self.epoch, step as u64, item as u64));
        let params = sample_params(&self.ranges, &mut rng)?;
        let (image, mask) = &self.pairs[item];
        let (image, mask) = apply_affine(image, mask, &params)?;
        Ok(AugmentedPair {
            image,
            mask,
            source: item,
            params,
        })
    }
}

impl Iterator for EpochStream<'_> {
    type Item = Result<Vec<AugmentedPair>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.steps {
            return None;
        }
        let step = self.next;
        self.next += 1;
        let n = self.pairs.len();
        Some(if self.parallel {
            (0..n).into_par_iter().map(|i| self.make(step, i)).collect()
        } else {
            (0..n).map(|i| self.make(step, i)).collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[h, w, c], |i| (i % 97) as Scalar / 97.0)
    }

    fn labels(h: usize, w: usize, k: usize) -> Tensor {
        Tensor::from_fn(&[h, w, k], |i| ((i / k) % k == i % k) as u8 as Scalar)
    }

    #[test]
    fn reflect_without_edge_repeat() {
        let got: Vec<_> = (-3..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn identity_is_exact() {
        let (img, mask) = (ramp(7, 9, 2), labels(7, 9, 3));
        let (a, b) = apply_affine(&img, &mask, &AugmentParams::identity()).unwrap();
        assert_eq!((a, b), (img, mask));
    }

    #[test]
    fn quarter_turn_is_transpose_then_flip() {
        let n = 5;
        let img = ramp(n, n, 1);
        let p = AugmentParams {
            rotation_deg: 90.0,
            ..AugmentParams::identity()
        };
        let (out, _) = apply_affine_with(&img, &labels(n, n, 2), &p, Interpolation::Nearest).unwrap();
        for r in 0..n {
            for c in 0..n {
                assert_eq!(out.get(&[r, c, 0]), img.get(&[n - 1 - c, r, 0]));
            }
        }
    }

    #[test]
    fn flips() {
        let img = ramp(3, 4, 1);
        let p = AugmentParams {
            flip_h: true,
            ..AugmentParams::identity()
        };
        let (out, _) = apply_affine(&img, &labels(3, 4, 2), &p).unwrap();
        assert_eq!(out.get(&[1, 0, 0]), img.get(&[1, 3, 0]));
        let p = AugmentParams {
            flip_v: true,
            ..AugmentParams::identity()
        };
        let (out, _) = apply_affine(&img, &labels(3, 4, 2), &p).unwrap();
        assert_eq!(out.get(&[0, 2, 0]), img.get(&[2, 2, 0]));
    }

    #[test]
    fn mask_stays_one_hot() {
        let p = AugmentParams {
            rotation_deg: 17.0,
            shear_deg: 8.0,
            shift_frac: (0.05, -0.07),
            scale: 1.13,
            flip_h: true,
            flip_v: false,
        };
        let (_, m) = apply_affine(&ramp(11, 13, 1), &labels(11, 13, 3), &p).unwrap();
        for px in m.data().chunks(3) {
            assert_eq!(px.iter().sum::<Scalar>(), 1.0);
        }
    }

    #[test]
    fn degenerate_ranges() {
        let mut r = AugmentRanges::identity();
        r.rotation_deg = [12.5, 12.5];
        let p = sample_params(&r, &mut Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.rotation_deg, 12.5);
        r.scale = [1.2, 1.1];
        assert!(sample_params(&r, &mut Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn stream_is_deterministic_across_modes() {
        let pairs = vec![(ramp(6, 8, 1), labels(6, 8, 2)), (ramp(5, 5, 1), labels(5, 5, 2))];
        let r = AugmentRanges::default();
        let a: Vec<_> = epoch_stream(&pairs, 3, &r, 4, 2).unwrap().collect::<Result<_>>().unwrap();
        let b: Vec<_> = epoch_stream(&pairs, 3, &r, 4, 2)
            .unwrap()
            .sequential()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let c: Vec<_> = epoch_stream(&pairs, 3, &r, 4, 3).unwrap().collect::<Result<_>>().unwrap();
        assert_ne!(a, c);
    }
}
