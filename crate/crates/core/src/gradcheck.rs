//! Central finite-difference gradient checking.
//!
//! The numeric side only ever re-runs the forward closure on perturbed
//! inputs; it shares no code with the tape's backward rules.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Default perturbation for 64-bit checks.
pub const STEP: Scalar = 1e-6;

/// Gradients smaller than this are compared absolutely rather than relatively.
///
/// Central differences at `STEP` carry roughly `1e-10` of roundoff on an
/// O(1) loss, so relative errors on gradients below this floor measure noise.
pub const REL_ERR_FLOOR: Scalar = 1e-5;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: Scalar, numeric: Scalar) -> Scalar {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: Scalar,
    /// (input index, flat element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: Scalar,
    pub numeric_at_worst: Scalar,
    pub checked: usize,
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` receives one trainable [`Var`] per entry of `inputs` and must return a
/// scalar. It is called once for the analytic pass and twice per checked
/// element. `select` picks which flat elements of each input to check; pass
/// `None` to check all of them.
pub fn check<F>(
    inputs: &[Tensor],
    step: Scalar,
    select: Option<&dyn Fn(usize, usize) -> bool>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor]| -> Result<Scalar> {
        let mut tape = Tape::new();
        let vars = perturbed
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(Error::Tape("gradcheck closure must return a scalar".into()));
        }
        Ok(v.data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            if let Some(sel) = select {
                if !sel(i, j) {
                    continue;
                }
            }
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x0 - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Input side length and block counts of the end-to-end check.
pub const NETWORK_CHECK_SIZE: usize = 8;

/// End-to-end check of a small network (one CONV RES block, one LSTM RES
/// block, two filters per branch) on a `1 x size x size x 1` input with a
/// random one-hot target. Every parameter is checked; dropout is off.
pub fn check_network(seed: u64, size: usize) -> Result<GradCheckReport> {
    use rand::{Rng as _, SeedableRng};

    use crate::layers::{BoundParams, NetworkConfig, Phase, ResCrNet};
    use crate::loss::{tanimoto_loss, LossConfig};

    let cfg = NetworkConfig {
        n_conv_blocks: 1,
        n_lstm_blocks: 1,
        filters_per_branch: 2,
        ..Default::default()
    };
    let model = ResCrNet::seeded(&cfg, seed)?;
    let mut rng = crate::Rng::seed_from_u64(crate::derive_seed(seed, &[1]));
    let k = cfg.num_classes;
    let x = Tensor::from_fn(&[1, size, size, 1], |_| rng.gen_range(0.0..1.0));
    let labels: Vec<usize> = (0..size * size).map(|_| rng.gen_range(0..k)).collect();
    let y = Tensor::from_fn(&[1, size, size, k], |i| (labels[i / k] == i % k) as u8 as Scalar);
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let loss_cfg = LossConfig::default();
    check(&inputs, STEP, None, |tape, vars| {
        let params = BoundParams::from_vars(names.iter().cloned(), vars);
        let xv = tape.constant(x.clone())?;
        let yhat = model.forward(tape, &params, xv, &mut Phase::Infer)?;
        tanimoto_loss(tape, yhat, &y, &loss_cfg, None)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_tiny_values() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A correct rule first, then a forward that disagrees with its own graph.
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let ok = check(&[x.clone()], STEP, None, |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(ok.max_rel_error < 1e-7, "{ok:?}");
        assert_eq!(ok.checked, 3);

        let bad = check(&[x], STEP, None, |tape, v| {
            if tape.requires_grad(v[0]) {
                let sq = tape.mul(v[0], v[0])?;
                tape.sum(sq)
            } else {
                let sq = tape.mul(v[0], v[0])?;
                let s = tape.affine(sq, 2.0, 0.0)?;
                tape.sum(s)
            }
        })
        .unwrap();
        assert!(bad.max_rel_error > 0.4);
    }
}
