//! Shared fixtures for the integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng as _, SeedableRng};
use rescrnet::gradcheck::{check, GradCheckReport, STEP};
use rescrnet::layers::{conv_lstm_step, ConvLstmCell, ConvLstmState};
use rescrnet::{derive_seed, Result, Rng, Scalar, Tape, Tensor, Var};

/// How random inputs are drawn.
#[derive(Clone, Copy, Debug)]
pub enum Domain {
    /// Uniform in [-2, 2].
    Signed,
    /// |x| in [0.1, 2], random sign; keeps kinks out of the stencil.
    AwayFromZero,
    /// Uniform in [0.5, 2].
    Positive,
}

impl Domain {
    fn sample(self, rng: &mut Rng) -> Scalar {
        match self {
            Domain::Signed => rng.gen_range(-2.0..2.0),
            Domain::AwayFromZero => {
                let m: Scalar = rng.gen_range(0.1..2.0);
                if rng.gen() { m } else { -m }
            }
            Domain::Positive => rng.gen_range(0.5..2.0),
        }
    }
}

pub type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub f: OpFn,
}

fn case(name: &'static str, inputs: &[(&[usize], Domain)], f: OpFn) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(),
        f,
    }
}

/// Reduces any output to a scalar with fixed, uneven weights so every output
/// element contributes a distinct amount.
pub fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = Tensor::from_fn(&shape, |i| (1.3 * i as Scalar + 0.7).sin());
    let w = tape.constant(w)?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

const DROPOUT_SEED: u64 = 99;

use Domain::*;

/// Every differentiable tape op, each reduced to a scalar via [`project`].
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", &[(&[2, 3, 4], Signed), (&[2, 3, 4], Signed)], |t, v| {
            let o = t.add(v[0], v[1])?;
            project(t, o)
        }),
        case("sub", &[(&[2, 3, 4], Signed), (&[2, 3, 4], Signed)], |t, v| {
            let o = t.sub(v[0], v[1])?;
            project(t, o)
        }),
        case("mul", &[(&[2, 3, 4], Signed), (&[2, 3, 4], Signed)], |t, v| {
            let o = t.mul(v[0], v[1])?;
            project(t, o)
        }),
        case("div", &[(&[2, 3, 4], Signed), (&[2, 3, 4], Positive)], |t, v| {
            let o = t.div(v[0], v[1])?;
            project(t, o)
        }),
        case("affine", &[(&[3, 5], Signed)], |t, v| {
            let o = t.affine(v[0], -1.7, 0.3)?;
            project(t, o)
        }),
        case("leaky_relu", &[(&[2, 3, 4], AwayFromZero)], |t, v| {
            let o = t.leaky_relu(v[0], 0.3)?;
            project(t, o)
        }),
        case("sigmoid", &[(&[2, 3, 4], Signed)], |t, v| {
            let o = t.sigmoid(v[0])?;
            project(t, o)
        }),
        case("tanh", &[(&[2, 3, 4], Signed)], |t, v| {
            let o = t.tanh(v[0])?;
            project(t, o)
        }),
        case("softmax_channels", &[(&[2, 3, 3, 4], Signed)], |t, v| {
            let o = t.softmax_channels(v[0])?;
            project(t, o)
        }),
        case(
            "conv2d",
            &[(&[1, 5, 6, 2], Signed), (&[3, 3, 2, 3], Signed), (&[3], Signed)],
            |t, v| {
                let o = t.conv2d(v[0], v[1], Some(v[2]), 2)?;
                project(t, o)
            },
        ),
        case("conv2d_1x3", &[(&[2, 4, 5, 2], Signed), (&[1, 3, 2, 2], Signed)], |t, v| {
            let o = t.conv2d(v[0], v[1], None, 1)?;
            project(t, o)
        }),
        case("depthwise_conv2d", &[(&[1, 5, 5, 3], Signed), (&[3, 3, 3], Signed)], |t, v| {
            let o = t.depthwise_conv2d(v[0], v[1], 2)?;
            project(t, o)
        }),
        case(
            "pointwise_conv",
            &[(&[2, 3, 3, 3], Signed), (&[3, 2], Signed), (&[2], Signed)],
            |t, v| {
                let o = t.pointwise_conv(v[0], v[1], Some(v[2]))?;
                project(t, o)
            },
        ),
        case(
            "separable_atrous_conv",
            &[
                (&[1, 5, 5, 2], Signed),
                (&[3, 3, 2], Signed),
                (&[2, 3], Signed),
                (&[3], Signed),
            ],
            |t, v| {
                let o = t.separable_atrous_conv(v[0], v[1], v[2], Some(v[3]), 2)?;
                project(t, o)
            },
        ),
        case("concat_channels", &[(&[1, 2, 3, 2], Signed), (&[1, 2, 3, 3], Signed)], |t, v| {
            let o = t.concat_channels(&[v[0], v[1], v[0]])?;
            project(t, o)
        }),
        case("slice_channels", &[(&[1, 2, 3, 5], Signed)], |t, v| {
            let o = t.slice_channels(v[0], 1, 3)?;
            project(t, o)
        }),
        case("select", &[(&[2, 3, 4, 2], Signed)], |t, v| {
            let o = t.select(v[0], 1, 2)?;
            project(t, o)
        }),
        case("stack", &[(&[2, 3], Signed), (&[2, 3], Signed), (&[2, 3], Signed)], |t, v| {
            let o = t.stack(&[v[0], v[1], v[2]], 1)?;
            project(t, o)
        }),
        case("transpose_axes", &[(&[2, 3, 4, 1, 2], Signed)], |t, v| {
            let o = t.transpose_axes(v[0], &[0, 2, 1, 4, 3])?;
            project(t, o)
        }),
        case("swap_axes", &[(&[2, 3, 4, 2], Signed)], |t, v| {
            let o = t.swap_axes(v[0], 1, 2)?;
            project(t, o)
        }),
        case("reshape", &[(&[2, 3, 4], Signed)], |t, v| {
            let o = t.reshape(v[0], &[6, 4])?;
            project(t, o)
        }),
        case("expand_last_dim", &[(&[2, 3, 4], Signed)], |t, v| {
            let o = t.expand_last_dim(v[0])?;
            project(t, o)
        }),
        case("sum_axis", &[(&[2, 3, 4], Signed)], |t, v| {
            let o = t.sum_axis(v[0], 1)?;
            project(t, o)
        }),
        case("sum_last_dim", &[(&[2, 3, 4, 2], Signed)], |t, v| {
            let o = t.sum_last_dim(v[0])?;
            project(t, o)
        }),
        case("sum", &[(&[2, 3, 4], Signed)], |t, v| {
            let o = t.sum(v[0])?;
            project(t, o)
        }),
        case("mean", &[(&[2, 3, 4], Signed)], |t, v| {
            let o = t.mean(v[0])?;
            project(t, o)
        }),
        case("spatial_dropout", &[(&[2, 3, 3, 4], Signed)], |t, v| {
            // Same seed on every call, so the perturbed passes see the same mask.
            let mut rng = Rng::seed_from_u64(DROPOUT_SEED);
            let o = t.spatial_dropout(v[0], 0.5, Some(&mut rng))?;
            project(t, o)
        }),
        case(
            "conv_lstm_step",
            &[
                (&[1, 4, 3, 1], Signed),
                (&[1, 4, 3, 1], Signed),
                (&[1, 4, 3, 1], Signed),
                (&[3, 3, 2, 4], Signed),
                (&[4], Signed),
            ],
            |t, v| {
                let cell = ConvLstmCell { kernel: v[3], bias: v[4] };
                let state = ConvLstmState { hidden: v[1], cell: v[2] };
                let (h, next) = conv_lstm_step(t, &cell, v[0], state)?;
                // Two steps so gradients also flow through the carried state.
                let (h2, next2) = conv_lstm_step(t, &cell, v[0], next)?;
                let a = project(t, h)?;
                let b = project(t, h2)?;
                let c = project(t, next2.cell)?;
                let ab = t.add(a, b)?;
                t.add(ab, c)
            },
        ),
    ]
}

/// Random inputs for `case` under `seed`.
pub fn sample_inputs(case: &OpCase, seed: u64, case_index: u64) -> Vec<Tensor> {
    let mut rng = Rng::seed_from_u64(derive_seed(seed, &[case_index]));
    case.inputs
        .iter()
        .map(|(shape, d)| Tensor::from_fn(shape, |_| d.sample(&mut rng)))
        .collect()
}

pub fn check_case(case: &OpCase, seed: u64, case_index: u64) -> Result<GradCheckReport> {
    let inputs = sample_inputs(case, seed, case_index);
    check(&inputs, STEP, None, case.f)
}

/// Absolute error at the worst element of a report.
pub fn abs_error(r: &GradCheckReport) -> Scalar {
    (r.analytic_at_worst - r.numeric_at_worst).abs()
}

/// Seeds per op in the gradient suite.
pub const GRAD_SEEDS: u64 = 20;

/// Maximum relative error allowed by the gradient suite.
pub const GRAD_TOL: Scalar = 1e-4;

/// All binary masks on `n` pixels.
pub fn binary_masks(n: usize) -> Vec<Vec<Scalar>> {
    (0..1usize << n)
        .map(|bits| (0..n).map(|i| ((bits >> i) & 1) as Scalar).collect())
        .collect()
}

/// `TP / (TP + FP + FN)` by set arithmetic on pixel indices; 1 when both
/// sets are empty.
pub fn jaccard_sets(pred: &[Scalar], truth: &[Scalar]) -> Scalar {
    use std::collections::BTreeSet;
    let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == 1.0).collect();
    let t: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] == 1.0).collect();
    let union = p.union(&t).count();
    if union == 0 {
        1.0
    } else {
        p.intersection(&t).count() as Scalar / union as Scalar
    }
}

/// Tiny run used by the CLI and determinism tests: synthetic data, small
/// network, two epochs of two steps.
pub const TINY_RUN: &str = r#"
seed = 3
epochs = 2
steps_per_epoch = 2
output_dir = "run"

[data]
synthetic_seed = 5

[network]
n_conv_blocks = 1
n_lstm_blocks = 1
filters_per_branch = 2
"#;

use rescrnet::layers::{NetworkConfig, Phase, ResCrNet};

/// Max abs difference between input and output of every residual block
/// with its residual parameters zeroed, followed by the end-to-end
/// difference between the zeroed network and stem -> head -> softmax.
pub fn residual_identity_diffs(cfg: &NetworkConfig, shape: &[usize], seed: u64) -> Result<(Vec<(String, Scalar)>, Scalar)> {
    let mut model = ResCrNet::seeded(cfg, seed)?;
    for name in model.residual_param_names() {
        model.params_mut().get_mut(&name).expect("named by the model").data_mut().fill(0.0);
    }
    let mut rng = Rng::seed_from_u64(derive_seed(seed, &[7]));
    let input = Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0));

    let mut tape = Tape::new();
    let p = model.params().bind_frozen(&mut tape)?;
    let x = tape.constant(input.clone())?;
    let mut diffs = Vec::new();
    let stem = model.stem().forward(&mut tape, &p, x)?;
    let mut h = stem;
    for (i, block) in model.conv_blocks().iter().enumerate() {
        let out = block.forward(&mut tape, &p, h, &mut Phase::Infer)?;
        diffs.push((format!("conv{i}"), tape.value(out).max_abs_diff(tape.value(h))));
        h = out;
    }
    let head = tape.pointwise_conv(h, p.get("head.weight")?, Some(p.get("head.bias")?))?;
    let head = tape.leaky_relu(head, cfg.leaky_alpha as Scalar)?;
    let mut h = head;
    for (i, block) in model.lstm_blocks().iter().enumerate() {
        let out = block.forward(&mut tape, &p, h)?;
        diffs.push((format!("lstm{i}"), tape.value(out).max_abs_diff(tape.value(h))));
        h = out;
    }

    // Reference without any residual block at all.
    let reference = {
        let x = tape.constant(input.clone())?;
        let s = model.stem().forward(&mut tape, &p, x)?;
        let hd = tape.pointwise_conv(s, p.get("head.weight")?, Some(p.get("head.bias")?))?;
        let hd = tape.leaky_relu(hd, cfg.leaky_alpha as Scalar)?;
        tape.softmax_channels(hd)?
    };
    let full = model.predict_batch(&input)?;
    Ok((diffs, full.max_abs_diff(tape.value(reference))))
}

/// Shapes recorded inside one LSTM RES block for an input of `shape`.
pub fn lstm_trace(shape: &[usize], seed: u64) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let cfg = NetworkConfig {
        n_conv_blocks: 1,
        n_lstm_blocks: 1,
        num_classes: shape[3],
        ..NetworkConfig::default()
    };
    let model = ResCrNet::seeded(&cfg, seed)?;
    let block = &model.lstm_blocks()[0];
    let mut tape = Tape::new();
    let p = model.params().bind_frozen(&mut tape)?;
    let mut rng = Rng::seed_from_u64(seed);
    let x = tape.constant(Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0)))?;
    tape.enable_trace();
    let y = block.forward(&mut tape, &p, x)?;
    let shapes = tape.traced_shapes().iter().map(|(_, s)| s.clone()).collect();
    Ok((shapes, tape.shape(y).to_vec()))
}

/// Expected row pass, transpose, column pass sequence for a `[b,h,w,c]` input.
pub fn expected_lstm_trace(b: usize, h: usize, w: usize, c: usize) -> Vec<Vec<usize>> {
    vec![
        vec![b, h, w, c, 1],
        vec![b, h, w, c, 2],
        vec![b, w, h, c, 1],
        vec![b, w, h, c, 2],
        vec![b, h, w, c, 2],
        vec![b, h, w, c],
    ]
}

/// Output shape and worst per-pixel |Σ p - 1| for one forward pass.
pub fn forward_sums(model: &ResCrNet, h: usize, w: usize, seed: u64) -> Result<(Vec<usize>, Scalar)> {
    let c = model.config().input_channels;
    let mut rng = Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[1, h, w, c], |_| rng.gen_range(0.0..1.0));
    let y = model.predict_batch(&x)?;
    let k = model.config().num_classes;
    let worst = y
        .data()
        .chunks(k)
        .map(|px| (px.iter().sum::<Scalar>() - 1.0).abs())
        .fold(0.0, Scalar::max);
    Ok((y.shape().to_vec(), worst))
}

use rescrnet::augment::{apply_affine_with, AugmentParams, Interpolation};
use rescrnet::palette::class_indices;

/// Pixels where the augmented mask disagrees with the mask value at the
/// source position read off a transformed coordinate image. Zero means the
/// image and mask received the same geometry.
pub fn coordinate_grid_mismatches(mask: &Tensor, params: &AugmentParams) -> Result<usize> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let coords = Tensor::from_fn(&[h, w, 2], |i| {
        let p = i / 2;
        if i % 2 == 0 { (p / w) as Scalar } else { (p % w) as Scalar }
    });
    let (moved, new_mask) = apply_affine_with(&coords, mask, params, Interpolation::Nearest)?;
    let before = class_indices(mask);
    let after = class_indices(&new_mask);
    let mut bad = 0;
    for p in 0..h * w {
        let (r, c) = (moved.data()[2 * p], moved.data()[2 * p + 1]);
        assert!(r.fract() == 0.0 && c.fract() == 0.0, "nearest sampling returns grid points");
        if after[p] != before[r as usize * w + c as usize] {
            bad += 1;
        }
    }
    Ok(bad)
}

/// True when every pixel holds exactly one 1 and zeros elsewhere.
pub fn strictly_one_hot(mask: &Tensor) -> bool {
    let k = mask.channels();
    mask.data().chunks(k).all(|px| {
        px.iter().all(|&v| v == 0.0 || v == 1.0) && px.iter().filter(|&&v| v == 1.0).count() == 1
    })
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Runs the `rescrnet` binary with `args`.
pub fn run_bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rescrnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Writes `text` as `run.toml` inside `dir` and returns its path.
pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).expect("config written");
    p
}

/// All files under `dir`, relative, sorted.
pub fn list_files(dir: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).expect("readable").flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
