//! Contour-aware pixel weights.
//!
//! Each pixel gets a class-balance weight `N / (K' * count(class))`, where
//! `K'` is the number of classes present, so the map averages to one. On top
//! of that, pixels lying between two separate regions of the same class get
//! `w0 * exp(-(d1 + d2)^2 / (2 sigma^2))`, with `d1`, `d2` the distances to
//! the nearest and second-nearest 8-connected region of that class. The
//! border term is the maximum over classes.

use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::tensor::{Scalar, Tensor};

/// Border amplitude and width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContourParams {
    pub w0: f64,
    pub sigma: f64,
}

impl Default for ContourParams {
    fn default() -> Self {
        Self { w0: 10.0, sigma: 5.0 }
    }
}

/// Squared distance transform of a 1-D sampled function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let cross = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..f.len() {
        let mut s = cross(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = cross(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of a row-major `rows x cols` mask. With no `true` pixel every
/// value exceeds `(rows + cols)^2`.
pub fn squared_edt(mask: &[bool], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(mask.len(), rows * cols);
    let n = rows.max(cols);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    // Larger than any in-image squared distance, small enough to stay exact.
    let far = ((rows + cols) * (rows + cols)) as f64;
    let mut d: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { far }).collect();
    for c in 0..cols {
        for r in 0..rows {
            f[r] = d[r * cols + c];
        }
        edt_1d(&f[..rows], &mut out[..rows], &mut v, &mut z);
        for r in 0..rows {
            d[r * cols + c] = out[r];
        }
    }
    for r in 0..rows {
        let row = &mut d[r * cols..(r + 1) * cols];
        f[..cols].copy_from_slice(row);
        edt_1d(&f[..cols], &mut out[..cols], &mut v, &mut z);
        row.copy_from_slice(&out[..cols]);
    }
    d
}

/// 8-connected component labels for the pixels where `mask` is set.
/// Returns per-pixel labels (`usize::MAX` for background) and the count.
pub fn label_components(mask: &[bool], rows: usize, cols: usize) -> (Vec<usize>, usize) {
    let mut labels = vec![usize::MAX; rows * cols];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..rows * cols {
        if !mask[start] || labels[start] != usize::MAX {
            continue;
        }
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / cols) as isize, (i % cols) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                        continue;
                    }
                    let j = nr as usize * cols + nc as usize;
                    if mask[j] && labels[j] == usize::MAX {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
        next += 1;
    }
    (labels, next)
}

/// Weight map `[H,W]` for a one-hot (or probability) mask `[H,W,K]`.
/// With `border` unset only the class-balance term is returned.
pub fn contour_weight_map(mask: &Tensor, border: Option<ContourParams>) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 3 {
        return Err(Error::invalid("contour_weight_map", format!("expects [H,W,K], got {s:?}")));
    }
    let (rows, cols, k) = (s[0], s[1], s[2]);
    let n = rows * cols;
    let labels: Vec<usize> = mask.data().chunks(k).map(argmax).collect();
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let mut w: Vec<f64> = labels
        .iter()
        .map(|&l| n as f64 / (present * counts[l] as f64))
        .collect();

    if let Some(p) = border {
        if !(p.sigma > 0.0) || !(p.w0 >= 0.0) {
            return Err(Error::invalid("contour_weight_map", "need sigma > 0 and w0 >= 0"));
        }
        let mut extra = vec![0.0f64; n];
        for class in 0..k {
            let in_class: Vec<bool> = labels.iter().map(|&l| l == class).collect();
            let (comp, count) = label_components(&in_class, rows, cols);
            if count < 2 {
                continue;
            }
            let (mut d1, mut d2) = (vec![f64::INFINITY; n], vec![f64::INFINITY; n]);
            for id in 0..count {
                let region: Vec<bool> = comp.iter().map(|&c| c == id).collect();
                for (i, dsq) in squared_edt(&region, rows, cols).into_iter().enumerate() {
                    let d = dsq.sqrt();
                    if d < d1[i] {
                        d2[i] = d1[i];
                        d1[i] = d;
                    } else if d < d2[i] {
                        d2[i] = d;
                    }
                }
            }
            for i in 0..n {
                if !in_class[i] {
                    let t = (d1[i] + d2[i]) / p.sigma;
                    extra[i] = extra[i].max(p.w0 * (-0.5 * t * t).exp());
                }
            }
        }
        w.iter_mut().zip(&extra).for_each(|(a, b)| *a += b);
    }
    Tensor::new(&[rows, cols], w.into_iter().map(|v| v as Scalar).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_edt(mask: &[bool], rows: usize, cols: usize) -> Vec<f64> {
        (0..rows * cols)
            .map(|i| {
                let (r, c) = ((i / cols) as f64, (i % cols) as f64);
                (0..rows * cols)
                    .filter(|&j| mask[j])
                    .map(|j| {
                        let (a, b) = ((j / cols) as f64, (j % cols) as f64);
                        (r - a).powi(2) + (c - b).powi(2)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn edt_matches_brute_force() {
        let (rows, cols) = (9, 13);
        for seed in 0..20u64 {
            let mask: Vec<bool> = (0..rows * cols)
                .map(|i| (i as u64 * 2654435761 + seed * 97) % 11 == 0)
                .collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            assert_eq!(squared_edt(&mask, rows, cols), brute_edt(&mask, rows, cols), "seed {seed}");
        }
    }

    #[test]
    fn components_are_eight_connected() {
        #[rustfmt::skip]
        let m = [
            true, false, false,
            false, true, false,
            false, false, false,
            true, true, false,
        ];
        let (labels, n) = label_components(&m, 4, 3);
        assert_eq!(n, 2);
        assert_eq!(labels[0], labels[4]);
        assert_ne!(labels[0], labels[9]);
    }

    fn one_hot(labels: &[usize], rows: usize, cols: usize, k: usize) -> Tensor {
        Tensor::from_fn(&[rows, cols, k], |i| (labels[i / k] == i % k) as u8 as Scalar)
    }

    #[test]
    fn class_balance_averages_to_one() {
        let labels: Vec<usize> = (0..24).map(|i| usize::from(i % 5 == 0)).collect();
        let w = contour_weight_map(&one_hot(&labels, 4, 6, 3), None).unwrap();
        let mean = w.data().iter().sum::<Scalar>() / 24.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(w.data()[0] > w.data()[1]);
    }

    #[test]
    fn gap_between_regions_is_boosted() {
        // Two squares of class 1 separated by a one-pixel gap at column 4.
        let (rows, cols) = (5, 9);
        let labels: Vec<usize> = (0..rows * cols)
            .map(|i| {
                let (r, c) = (i / cols, i % cols);
                usize::from((1..4).contains(&r) && c != 4 && (1..8).contains(&c))
            })
            .collect();
        let mask = one_hot(&labels, rows, cols, 2);
        let plain = contour_weight_map(&mask, None).unwrap();
        let p = ContourParams::default();
        let w = contour_weight_map(&mask, Some(p)).unwrap();
        let gap = 2 * cols + 4;
        // d1 = d2 = 1 in the gap.
        let expected = plain.data()[gap] + p.w0 * (-4.0f64 / (2.0 * 25.0)).exp();
        assert!((w.data()[gap] - expected).abs() < 1e-12);
        // Pixels inside the regions are untouched.
        assert_eq!(w.data()[2 * cols + 2], plain.data()[2 * cols + 2]);
        // Far corners get less than the gap.
        assert!(w.data()[0] - plain.data()[0] < w.data()[gap] - plain.data()[gap]);
    }

    #[test]
    fn single_region_has_no_border_term() {
        let labels: Vec<usize> = (0..16).map(|i| usize::from(i < 8)).collect();
        let mask = one_hot(&labels, 4, 4, 2);
        let a = contour_weight_map(&mask, None).unwrap();
        let b = contour_weight_map(&mask, Some(ContourParams::default())).unwrap();
        assert_eq!(a, b);
    }
}
