//! Training loop, evaluation and prediction.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;

use crate::augment::{epoch_stream, AugmentRanges};
use crate::checkpoint::save_checkpoint;
use crate::contour::{contour_weight_map, ContourParams};
use crate::dataset::SegDataset;
use crate::error::{Error, Result};
use crate::layers::{Phase, ResCrNet};
use crate::loss::{combined_weights, dice_coefficient, tanimoto_loss, weighted_tanimoto_with_complement, LossConfig};
use crate::metrics::{ClassMetrics, ConfusionCounts, MetricReport};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::palette::{encode_prediction, ClassPalette};
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::{derive_seed, Rng};

/// Stream tag separating dropout seeds from augmentation seeds.
const DROPOUT_STREAM: u64 = 0xd20_9041;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// `None` trains on the raw pairs.
    pub augment: Option<AugmentRanges>,
    pub optimizer: OptimizerConfig,
    /// Where `log.csv`, `best.ckpt` and `last.ckpt` go; `None` keeps
    /// everything in memory.
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            steps_per_epoch: 15,
            seed: 0,
            loss: LossConfig::default(),
            augment: Some(AugmentRanges::default()),
            optimizer: OptimizerConfig::default(),
            output_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_tanimoto: f64,
    pub val_loss: f64,
    pub val_tanimoto: f64,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub records: Vec<EpochRecord>,
    /// Epoch of the best validation score; `None` means the initial weights.
    pub best_epoch: Option<usize>,
    pub best_model: ResCrNet,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
    pub seed: u64,
    pub optimizer: OptimizerState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mean_loss: f64,
    /// Mean per-image `T̃` (weighted as in the loss).
    pub tanimoto: f64,
    pub soft_dice: f64,
    pub report: MetricReport,
}

fn check_classes(model: &ResCrNet, ds: &SegDataset) -> Result<()> {
    let (k, c) = (model.config().num_classes, model.config().input_channels);
    if ds.num_classes() != k {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model predicts {k}",
            ds.num_classes()
        )));
    }
    if let Some(s) = ds.items.iter().find(|s| s.image.shape()[2] != c) {
        return Err(Error::Dataset(format!(
            "`{}` has {} channels, model expects {c}",
            s.id,
            s.image.shape()[2]
        )));
    }
    Ok(())
}

/// Per-pixel weights for one `[H,W,K]` mask, or `None` when the loss is
/// unweighted.
fn pixel_weights(mask: &Tensor, loss: &LossConfig) -> Result<Option<Tensor>> {
    if !loss.contour_weighting {
        return Ok(None);
    }
    let p = ContourParams {
        w0: loss.contour_w0,
        sigma: loss.contour_sigma,
    };
    contour_weight_map(mask, Some(p)).map(Some)
}

/// Stacks pairs into `[B,H,W,C]` / `[B,H,W,K]`, plus `[B,H,W]` weights.
fn batch(pairs: &[(&Tensor, &Tensor)], loss: &LossConfig) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let images: Vec<Tensor> = pairs.iter().map(|(i, _)| (*i).clone()).collect();
    let masks: Vec<Tensor> = pairs.iter().map(|(_, m)| (*m).clone()).collect();
    let weights = masks
        .iter()
        .map(|m| pixel_weights(m, loss))
        .collect::<Result<Option<Vec<_>>>>()?;
    Ok((
        Tensor::stack(&images)?,
        Tensor::stack(&masks)?,
        weights.map(|w| Tensor::stack(&w)).transpose()?,
    ))
}

/// Groups indices by image shape, in order of first appearance.
fn shape_groups(shapes: &[&[usize]]) -> Vec<Vec<usize>> {
    let mut groups: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for (i, s) in shapes.iter().enumerate() {
        match groups.iter_mut().find(|(k, _)| k == s) {
            Some((_, v)) => v.push(i),
            None => groups.push((s.to_vec(), vec![i])),
        }
    }
    groups.into_iter().map(|(_, v)| v).collect()
}

/// One optimizer step on a full batch; returns the loss.
fn train_step(
    model: &mut ResCrNet,
    opt: &mut OptimizerState,
    pairs: &[(&Tensor, &Tensor)],
    ids: &[&str],
    loss_cfg: &LossConfig,
    rng: &mut Rng,
    (epoch, step): (usize, usize),
) -> Result<f64> {
    let non_finite = |e: Error| match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss {
            epoch,
            step,
            items: ids.iter().map(|s| s.to_string()).collect(),
        },
        other => other,
    };
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape)?;
    let shapes: Vec<&[usize]> = pairs.iter().map(|(i, _)| i.shape()).collect();
    let total = pairs.len() as Scalar;
    let mut loss = None;
    let mut phase = Phase::Train(rng);
    for group in shape_groups(&shapes) {
        let members: Vec<_> = group.iter().map(|&i| pairs[i]).collect();
        let (x, y, w) = batch(&members, loss_cfg)?;
        let x = tape.constant(x)?;
        let yhat = model.forward(&mut tape, &bound, x, &mut phase).map_err(non_finite)?;
        let l = tanimoto_loss(&mut tape, yhat, &y, loss_cfg, w.as_ref()).map_err(non_finite)?;
        let l = tape.affine(l, group.len() as Scalar / total, 0.0)?;
        loss = Some(match loss {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let loss = loss.ok_or_else(|| Error::Dataset("empty training batch".into()))?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(non_finite(Error::NonFinite { op: "loss" }));
    }
    tape.backward(loss)?;
    let grads = model.params().gradients(&tape, &bound);
    opt.step(model.params_mut(), &grads)?;
    Ok(value)
}

/// Runs the model over every item without dropout and scores it.
pub fn evaluate(model: &ResCrNet, ds: &SegDataset, loss: &LossConfig) -> Result<Evaluation> {
    check_classes(model, ds)?;
    if ds.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let mut counts = ConfusionCounts::new(ds.num_classes());
    let (mut t_sum, mut d_sum) = (0.0, 0.0);
    let s = loss.smooth_s as Scalar;
    for item in &ds.items {
        let probs = model.predict_batch(&Tensor::stack(std::slice::from_ref(&item.image))?)?;
        let y = Tensor::stack(std::slice::from_ref(&item.mask))?;
        let px = pixel_weights(&item.mask, loss)?;
        let w = combined_weights(y.shape(), px.as_ref(), loss.class_weights.as_deref())?;
        t_sum += weighted_tanimoto_with_complement(&probs, &y, w.as_ref(), s)? as f64;
        d_sum += dice_coefficient(&probs, &y, s)? as f64;
        counts.accumulate(&probs, &y)?;
    }
    let n = ds.len() as f64;
    Ok(Evaluation {
        mean_loss: 1.0 - t_sum / n,
        tanimoto: t_sum / n,
        soft_dice: d_sum / n,
        report: counts.report(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[H,W,K]` softmax probabilities.
    pub probs: Tensor,
    pub rgb: image::RgbImage,
}

/// Segments one `[H,W,C]` image.
pub fn predict(model: &ResCrNet, image: &Tensor, palette: &ClassPalette) -> Result<Prediction> {
    let c = model.config().input_channels;
    if image.rank() != 3 || image.shape()[2] != c {
        return Err(Error::invalid(
            "predict",
            format!("expects [H,W,{c}] image, got {:?}", image.shape()),
        ));
    }
    let probs = model.predict_batch(&Tensor::stack(std::slice::from_ref(image))?)?;
    let s = probs.shape();
    let probs = probs.clone().reshape(&[s[1], s[2], s[3]])?;
    let rgb = encode_prediction(&probs, palette)?;
    Ok(Prediction { probs, rgb })
}

/// CSV header for a run over classes named `names`.
pub fn csv_header(names: &[String]) -> String {
    let mut h = String::from("epoch,train_loss,train_tanimoto,val_loss,val_tanimoto");
    for n in names {
        for m in ClassMetrics::NAMES {
            let _ = write!(h, ",{n}_{m}");
        }
    }
    h
}

pub fn csv_row(r: &EpochRecord) -> String {
    let mut row = format!(
        "{},{:.10},{:.10},{:.10},{:.10}",
        r.epoch, r.train_loss, r.train_tanimoto, r.val_loss, r.val_tanimoto
    );
    for m in &r.metrics.per_class {
        for v in m.values() {
            let _ = write!(row, ",{v:.10}");
        }
    }
    row
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// [`train_with_progress`] without a progress callback.
pub fn train(model: &mut ResCrNet, train_set: &SegDataset, val_set: Option<&SegDataset>, cfg: &TrainConfig) -> Result<TrainRun> {
    train_with_progress(model, train_set, val_set, cfg, |_| {})
}

/// Trains `model` in place, leaving it at the final weights.
///
/// Every epoch runs `steps_per_epoch` optimizer steps, each on one augmented
/// copy of the whole training set, then scores the un-augmented validation
/// set (the training set when `val_set` is `None`). The best epoch is the
/// one with the highest validation `T̃`.
pub fn train_with_progress(
    model: &mut ResCrNet,
    train_set: &SegDataset,
    val_set: Option<&SegDataset>,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    check_classes(model, train_set)?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let val_set = val_set.unwrap_or(train_set);
    check_classes(model, val_set)?;
    cfg.loss.validate(train_set.num_classes())?;
    if cfg.steps_per_epoch == 0 {
        return Err(Error::Config("steps_per_epoch must be at least 1".into()));
    }
    let palette = &train_set.palette;
    let paths = match &cfg.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some((dir.join("log.csv"), dir.join("best.ckpt"), dir.join("last.ckpt")))
        }
        None => None,
    };
    let mut log = csv_header(&palette.names());
    log.push('\n');
    if let Some((csv, best, last)) = &paths {
        write_file(csv, &log)?;
        save_checkpoint(best, model, Some(palette))?;
        save_checkpoint(last, model, Some(palette))?;
    }

    let mut opt = OptimizerState::new(cfg.optimizer.clone(), model.params())?;
    let raw = train_set.pairs();
    let ids: Vec<&str> = train_set.items.iter().map(|s| s.id.as_str()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut best_model = model.clone();

    for epoch in 1..=cfg.epochs {
        let batches: Vec<Vec<(Tensor, Tensor)>> = match &cfg.augment {
            Some(ranges) => epoch_stream(&raw, cfg.steps_per_epoch, ranges, cfg.seed, epoch as u64)?
                .map(|b| b.map(|v| v.into_iter().map(|p| (p.image, p.mask)).collect()))
                .collect::<Result<_>>()?,
            None => vec![raw.clone(); cfg.steps_per_epoch],
        };
        let mut loss_sum = 0.0;
        for (step, b) in batches.iter().enumerate() {
            let pairs: Vec<(&Tensor, &Tensor)> = b.iter().map(|(i, m)| (i, m)).collect();
            let mut rng = Rng::seed_from_u64(derive_seed(cfg.seed, &[DROPOUT_STREAM, epoch as u64, step as u64]));
            loss_sum += train_step(model, &mut opt, &pairs, &ids, &cfg.loss, &mut rng, (epoch, step))?;
        }
        let train_loss = loss_sum / cfg.steps_per_epoch as f64;
        let val = evaluate(model, val_set, &cfg.loss)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            train_tanimoto: 1.0 - train_loss,
            val_loss: val.mean_loss,
            val_tanimoto: val.tanimoto,
            metrics: val.report,
        };
        let improved = best.map_or(true, |(_, t)| record.val_tanimoto > t);
        if improved {
            best = Some((epoch, record.val_tanimoto));
            best_model = model.clone();
        }
        log.push_str(&csv_row(&record));
        log.push('\n');
        if let Some((csv, best_path, last)) = &paths {
            write_file(csv, &log)?;
            if improved {
                save_checkpoint(best_path, model, Some(palette))?;
            }
            save_checkpoint(last, model, Some(palette))?;
        }
        progress(&record);
        records.push(record);
    }

    Ok(TrainRun {
        records,
        best_epoch: best.map(|(e, _)| e),
        best_model,
        best_checkpoint: paths.as_ref().map(|p| p.1.clone()),
        last_checkpoint: paths.as_ref().map(|p| p.2.clone()),
        seed: cfg.seed,
        optimizer: opt,
    })
}
