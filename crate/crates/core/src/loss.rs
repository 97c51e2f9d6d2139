//! Dice and Tanimoto overlap scores and the Tanimoto-with-complement loss.
//!
//! Tensors are laid out `[B, pixels..., K]`: the first axis is the batch, the
//! last holds classes, everything between is flattened into pixels. Each
//! score is computed per (batch item, class) and then averaged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Smoothing added to numerator and denominator.
    pub smooth_s: f64,
    /// Optional positive weight per class.
    pub class_weights: Option<Vec<f64>>,
    /// Multiply pixel sums by a contour-aware weight map.
    pub contour_weighting: bool,
    /// Width, in pixels, of the border term.
    pub contour_sigma: f64,
    /// Amplitude of the border term.
    pub contour_w0: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smooth_s: 1.0,
            class_weights: None,
            contour_weighting: false,
            contour_sigma: 5.0,
            contour_w0: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.smooth_s >= 0.0) {
            return Err(Error::Config(format!("loss.smooth_s must be >= 0, got {}", self.smooth_s)));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != num_classes {
                return Err(Error::Config(format!(
                    "loss.class_weights has {} entries, expected {num_classes}",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Config("loss.class_weights must be positive".into()));
            }
        }
        if !(self.contour_sigma > 0.0) {
            return Err(Error::Config("loss.contour_sigma must be > 0".into()));
        }
        if !(self.contour_w0 >= 0.0) {
            return Err(Error::Config("loss.contour_w0 must be >= 0".into()));
        }
        Ok(())
    }
}

/// `[B, P, K]` view of a `[B, ..., K]` shape.
fn bpk(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid("overlap", format!("need [B,...,K], got {shape:?}")));
    }
    let b = shape[0];
    let k = *shape.last().unwrap();
    Ok((b, shape.iter().product::<usize>() / (b * k), k))
}

fn validate_pair(op: &'static str, yhat: &Tensor, y: &Tensor) -> Result<()> {
    if yhat.shape() != y.shape() {
        return Err(Error::shape(op, y.shape(), yhat.shape()));
    }
    if yhat.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid(op, "predicted probabilities must lie in [0,1]"));
    }
    if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(op, "labels must be 0 or 1"));
    }
    Ok(())
}

/// Weighted per-(item, class) sums `(Σŷy, Σŷ, Σy, Σŷ², Σy²)`.
struct Sums {
    items: Vec<[Scalar; 5]>,
}

fn overlap_sums(yhat: &[Scalar], y: &[Scalar], w: Option<&[Scalar]>, shape: &[usize]) -> Result<Sums> {
    let (b, p, k) = bpk(shape)?;
    let mut items = vec![[0.0; 5]; b * k];
    for bi in 0..b {
        for pi in 0..p {
            for ki in 0..k {
                let i = (bi * p + pi) * k + ki;
                let wt = w.map_or(1.0, |w| w[i]);
                let (a, t) = (yhat[i], y[i]);
                let s = &mut items[bi * k + ki];
                s[0] += wt * a * t;
                s[1] += wt * a;
                s[2] += wt * t;
                s[3] += wt * a * a;
                s[4] += wt * t * t;
            }
        }
    }
    Ok(Sums { items })
}

/// Ratio with the empty-set convention `0/0 = 1`.
fn ratio(num: Scalar, den: Scalar) -> Scalar {
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

fn mean(v: impl Iterator<Item = Scalar>) -> Scalar {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as Scalar
}

fn complement(t: &Tensor) -> Tensor {
    Tensor::from_fn(t.shape(), |i| 1.0 - t.data()[i])
}

/// Soft Dice: `(2Σŷy + s) / (Σŷ + Σy + s)`, averaged over items and classes.
pub fn dice_coefficient(yhat: &Tensor, y: &Tensor, s: Scalar) -> Result<Scalar> {
    validate_pair("dice_coefficient", yhat, y)?;
    let sums = overlap_sums(yhat.data(), y.data(), None, y.shape())?;
    Ok(mean(sums.items.iter().map(|t| ratio(2.0 * t[0] + s, t[1] + t[2] + s))))
}

/// Per-(item, class) Tanimoto `(Σŷy + s) / (Σ(ŷ² + y²) - Σŷy + s)`.
fn tanimoto_per_class(yhat: &Tensor, y: &Tensor, w: Option<&Tensor>, s: Scalar) -> Result<Vec<Scalar>> {
    let sums = overlap_sums(yhat.data(), y.data(), w.map(Tensor::data), y.shape())?;
    Ok(sums
        .items
        .iter()
        .map(|t| ratio(t[0] + s, t[3] + t[4] - t[0] + s))
        .collect())
}

pub fn tanimoto(yhat: &Tensor, y: &Tensor, s: Scalar) -> Result<Scalar> {
    validate_pair("tanimoto", yhat, y)?;
    Ok(mean(tanimoto_per_class(yhat, y, None, s)?.into_iter()))
}

/// Mean of the Tanimoto score on `(ŷ, y)` and on `(1-ŷ, 1-y)`.
pub fn tanimoto_with_complement(yhat: &Tensor, y: &Tensor, s: Scalar) -> Result<Scalar> {
    weighted_tanimoto_with_complement(yhat, y, None, s)
}

/// [`tanimoto_with_complement`] with every pixel sum weighted by `weights`
/// (same shape as `y`).
pub fn weighted_tanimoto_with_complement(
    yhat: &Tensor,
    y: &Tensor,
    weights: Option<&Tensor>,
    s: Scalar,
) -> Result<Scalar> {
    validate_pair("tanimoto_with_complement", yhat, y)?;
    if let Some(w) = weights {
        if w.shape() != y.shape() {
            return Err(Error::shape("tanimoto_with_complement", y.shape(), w.shape()));
        }
    }
    let direct = tanimoto_per_class(yhat, y, weights, s)?;
    let comp = tanimoto_per_class(&complement(yhat), &complement(y), weights, s)?;
    Ok(mean(direct.iter().zip(&comp).map(|(a, b)| 0.5 * (a + b))))
}

/// Expands an optional per-pixel map (`[B,...]` or `[B,...,1]`) and optional
/// class weights into a full `[B,...,K]` weight tensor.
pub fn combined_weights(
    shape: &[usize],
    weight_map: Option<&Tensor>,
    class_weights: Option<&[f64]>,
) -> Result<Option<Tensor>> {
    if weight_map.is_none() && class_weights.is_none() {
        return Ok(None);
    }
    let (b, p, k) = bpk(shape)?;
    if let Some(m) = weight_map {
        if m.len() != b * p {
            return Err(Error::invalid(
                "tanimoto_loss",
                format!("weight map {:?} does not cover {shape:?}", m.shape()),
            ));
        }
        if m.data().iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("tanimoto_loss", "weight map must be positive"));
        }
    }
    if let Some(cw) = class_weights {
        if cw.len() != k {
            return Err(Error::invalid(
                "tanimoto_loss",
                format!("{} class weights for {k} classes", cw.len()),
            ));
        }
    }
    Ok(Some(Tensor::from_fn(shape, |i| {
        let px = m_at(weight_map, i / k);
        let cw = class_weights.map_or(1.0, |c| c[i % k] as Scalar);
        px * cw
    })))
}

fn m_at(m: Option<&Tensor>, i: usize) -> Scalar {
    m.map_or(1.0, |m| m.data()[i])
}

/// Per-(item, class) Tanimoto on the tape, `[B, K]`.
fn tanimoto_terms(tape: &mut Tape, yhat: Var, y: &Tensor, w: Option<&Tensor>, s: Scalar) -> Result<Var> {
    let (b, p, k) = bpk(y.shape())?;
    let flat = [b, p, k];
    let yhat = tape.reshape(yhat, &flat)?;
    let y = y.clone().reshape(&flat)?;
    let w = w.map(|w| w.clone().reshape(&flat)).transpose()?;

    let weighted = |t: &Tensor| match &w {
        Some(w) => Tensor::from_fn(&flat, |i| t.data()[i] * w.data()[i]),
        None => t.clone(),
    };
    // Σ w y² is a constant; fold it into a [B,K] tensor directly.
    let wy = weighted(&y);
    let wyy = Tensor::from_fn(&flat, |i| wy.data()[i] * y.data()[i]);
    let wy = tape.constant(wy)?;
    let wyy = tape.constant(wyy)?;
    let syy = tape.sum_axis(wyy, 1)?;

    let inter = tape.mul(yhat, wy)?;
    let inter = tape.sum_axis(inter, 1)?;
    let sq = tape.mul(yhat, yhat)?;
    let sq = match &w {
        Some(w) => {
            let wv = tape.constant(w.clone())?;
            tape.mul(sq, wv)?
        }
        None => sq,
    };
    let spp = tape.sum_axis(sq, 1)?;

    let num = tape.affine(inter, 1.0, s)?;
    let den = tape.add(spp, syy)?;
    let den = tape.sub(den, inter)?;
    let den = tape.affine(den, 1.0, s)?;
    // 0/0 only happens with s = 0 on a class absent from both ŷ and y.
    // Score it 1 like the scalar version; every input gradient there is 0.
    let empty: Vec<Scalar> = tape.value(den).data().iter().map(|&d| (d == 0.0) as u8 as Scalar).collect();
    if empty.iter().any(|&e| e > 0.0) {
        let e = tape.constant(Tensor::new(&[b, k], empty)?)?;
        let num = tape.add(num, e)?;
        let den = tape.add(den, e)?;
        return tape.div(num, den);
    }
    tape.div(num, den)
}

/// `1 - T̃_w(ŷ, y)` on the tape.
///
/// `weight_map` holds one positive weight per pixel (`[B,H,W]` or
/// `[B,H,W,1]`); it is multiplied with `cfg.class_weights` when both are set.
pub fn tanimoto_loss(
    tape: &mut Tape,
    yhat: Var,
    y: &Tensor,
    cfg: &LossConfig,
    weight_map: Option<&Tensor>,
) -> Result<Var> {
    if tape.shape(yhat) != y.shape() {
        return Err(Error::shape("tanimoto_loss", y.shape(), tape.shape(yhat)));
    }
    validate_pair("tanimoto_loss", tape.value(yhat), y)?;
    let w = combined_weights(y.shape(), weight_map, cfg.class_weights.as_deref())?;
    let s = cfg.smooth_s as Scalar;
    let direct = tanimoto_terms(tape, yhat, y, w.as_ref(), s)?;
    let yhat_c = tape.affine(yhat, -1.0, 1.0)?;
    let comp = tanimoto_terms(tape, yhat_c, &complement(y), w.as_ref(), s)?;
    let both = tape.add(direct, comp)?;
    let t = tape.mean(both)?;
    // mean(T + Tc) = 2 T̃, so L = 1 - mean/2.
    tape.affine(t, -0.5, 1.0)
}
