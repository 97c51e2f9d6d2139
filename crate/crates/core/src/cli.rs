//! Command-line front end.
//!
//! Flags given on the command line override the matching config keys.
//! Progress goes to stderr, tables to stdout and everything else to files
//! under the output directory. Failures print one line,
//! `error: kind=<kind> msg=<message>`, and exit nonzero.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::augment::{apply_affine, item_seed, sample_params};
use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_dataset, load_image, save_image, save_rgb, SegDataset};
use crate::error::{Error, Result};
use crate::gradcheck::{check_network, NETWORK_CHECK_SIZE};
use crate::layers::ResCrNet;
use crate::loss::LossConfig;
use crate::palette::encode_mask;
use crate::trainer::{evaluate, predict, train_with_progress};
use crate::{synthetic, Rng};

#[derive(Debug, Parser)]
#[command(name = "rescrnet", version, about = "Residual segmentation network: train, evaluate, predict")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a run config; writes log.csv, best.ckpt, last.ckpt and
    /// sample predictions.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "output-dir", alias = "output_dir")]
        output_dir: Option<PathBuf>,
    },
    /// Print per-class Dice, Jaccard, precision, recall and F1.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// Supplies palette, decode options and loss settings when given.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a colour mask PNG for every PNG in a directory.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long = "output-dir", alias = "output_dir")]
        output_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write augmented image/mask pairs drawn from the training data.
    AugmentPreview {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "output-dir", alias = "output_dir")]
        output_dir: Option<PathBuf>,
    },
    /// Finite-difference check of a small network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = NETWORK_CHECK_SIZE)]
        size: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_training_data(cfg: &RunConfig) -> Result<(SegDataset, Option<SegDataset>)> {
    let d = &cfg.data;
    if let Some(seed) = d.synthetic_seed {
        let ds = synthetic::disks_and_stripes(seed)?;
        if ds.num_classes() != cfg.network.num_classes {
            return Err(Error::Config(format!(
                "synthetic data has {} classes, network.num_classes = {}",
                ds.num_classes(),
                cfg.network.num_classes
            )));
        }
        return Ok((ds, None));
    }
    let palette = cfg.palette.as_ref().expect("validated");
    let (ti, tm) = (d.train_images.as_ref().expect("validated"), d.train_masks.as_ref().expect("validated"));
    let train = load_dataset(ti, tm, palette, &d.decode)?;
    let val = match (&d.val_images, &d.val_masks) {
        (Some(i), Some(m)) => Some(load_dataset(i, m, palette, &d.decode)?),
        _ => None,
    };
    for ds in std::iter::once(&train).chain(val.as_ref()) {
        for (id, r) in &ds.warnings {
            eprintln!(
                "warning: mask `{id}` has {:.2}% pixels far from every palette colour",
                100.0 * r.far_fraction()
            );
        }
    }
    Ok((train, val))
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn run_train(config: &Path, seed: Option<u64>, epochs: Option<usize>, output_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(o) = output_dir {
        cfg.output_dir = o;
    }
    let (train, val) = load_training_data(&cfg)?;
    let mut model = ResCrNet::seeded(&cfg.network, cfg.seed)?;
    eprintln!(
        "training {} parameters on {} pairs for {} epochs",
        model.parameter_count(),
        train.len(),
        cfg.epochs
    );
    let run = train_with_progress(&mut model, &train, val.as_ref(), &cfg.train_config(), |r| {
        eprintln!(
            "epoch {:>4} train_loss {:.5} train_tanimoto {:.5} val_tanimoto {:.5}",
            r.epoch, r.train_loss, r.train_tanimoto, r.val_tanimoto
        );
    })?;
    let pred_dir = cfg.output_dir.join("predictions");
    create_dir(&pred_dir)?;
    for item in &val.as_ref().unwrap_or(&train).items {
        let p = predict(&run.best_model, &item.image, &train.palette)?;
        save_rgb(&pred_dir.join(format!("{}.png", item.id)), &p.rgb)?;
    }
    eprintln!("best epoch: {:?}; outputs in {}", run.best_epoch, cfg.output_dir.display());
    Ok(())
}

fn optional_config(path: Option<&PathBuf>) -> Result<Option<RunConfig>> {
    path.map(|p| RunConfig::load(p)).transpose()
}

fn run_evaluate(checkpoint: &Path, images: &Path, masks: &Path, config: Option<&PathBuf>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = optional_config(config)?;
    let palette = cfg
        .as_ref()
        .and_then(|c| c.palette.clone())
        .or(ck.palette)
        .ok_or_else(|| Error::Config("no palette in checkpoint; pass --config".into()))?;
    let decode = cfg.as_ref().map(|c| c.data.decode).unwrap_or_default();
    let loss = cfg.as_ref().map(|c| c.loss.clone()).unwrap_or_else(LossConfig::default);
    let ds = load_dataset(images, masks, &palette, &decode)?;
    let ev = evaluate(&ck.model, &ds, &loss)?;
    print!("{}", ev.report.table(&palette.names()));
    println!(
        "mean_loss {:.6}  tanimoto {:.6}  soft_dice {:.6}",
        ev.mean_loss, ev.tanimoto, ev.soft_dice
    );
    Ok(())
}

fn run_predict(checkpoint: &Path, images: &Path, output_dir: &Path, config: Option<&PathBuf>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let palette = optional_config(config)?
        .and_then(|c| c.palette)
        .or(ck.palette)
        .ok_or_else(|| Error::Config("no palette in checkpoint; pass --config".into()))?;
    let files = png_files(images)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG images in {}", images.display())));
    }
    create_dir(output_dir)?;
    for f in files {
        let p = predict(&ck.model, &load_image(&f)?, &palette)?;
        let out = output_dir.join(f.file_name().expect("file"));
        save_rgb(&out, &p.rgb)?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

fn run_augment_preview(config: &Path, count: usize, seed: Option<u64>, output_dir: Option<PathBuf>) -> Result<()> {
    use rand::SeedableRng;

    let cfg = RunConfig::load(config)?;
    let (train, _) = load_training_data(&cfg)?;
    let seed = seed.unwrap_or(cfg.seed);
    let dir = output_dir.unwrap_or_else(|| cfg.output_dir.join("augment_preview"));
    create_dir(&dir)?;
    for i in 0..count {
        let item = &train.items[i % train.len()];
        let mut rng = Rng::seed_from_u64(item_seed(seed, 0, i as u64, 0));
        let params = sample_params(&cfg.augment, &mut rng)?;
        let (image, mask) = apply_affine(&item.image, &item.mask, &params)?;
        save_image(&dir.join(format!("{i:04}_{}_image.png", item.id)), &image)?;
        save_rgb(&dir.join(format!("{i:04}_{}_mask.png", item.id)), &encode_mask(&mask, &train.palette)?)?;
    }
    eprintln!("wrote {count} pairs to {}", dir.display());
    Ok(())
}

fn run_gradcheck(seed: u64, seeds: u64, size: usize, tolerance: f64) -> Result<()> {
    let mut worst = 0.0f64;
    for s in seed..seed + seeds.max(1) {
        let r = check_network(s, size)?;
        eprintln!("seed {s}: {} parameters, max rel err {:.3e}", r.checked, r.max_rel_error);
        worst = worst.max(r.max_rel_error as f64);
    }
    println!("max_rel_error {worst:.6e}");
    if worst < tolerance {
        Ok(())
    } else {
        Err(Error::Tape(format!(
            "gradient check failed: max relative error {worst:.3e} >= {tolerance:.1e}"
        )))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            epochs,
            output_dir,
        } => run_train(&config, seed, epochs, output_dir),
        Command::Evaluate {
            checkpoint,
            images,
            masks,
            config,
        } => run_evaluate(&checkpoint, &images, &masks, config.as_ref()),
        Command::Predict {
            checkpoint,
            images,
            output_dir,
            config,
        } => run_predict(&checkpoint, &images, &output_dir, config.as_ref()),
        Command::AugmentPreview {
            config,
            count,
            seed,
            output_dir,
        } => run_augment_preview(&config, count, seed, output_dir),
        Command::Gradcheck {
            seed,
            seeds,
            size,
            tolerance,
        } => run_gradcheck(seed, seeds, size, tolerance),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={}", one_line(first));
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e.to_string()));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_subcommands() {
        let cli = Cli::try_parse_from(["rescrnet", "train", "--config", "run.toml", "--seed", "7"]).unwrap();
        assert!(matches!(cli.command, Command::Train { seed: Some(7), .. }));
        let cli = Cli::try_parse_from(["rescrnet", "augment-preview", "--config", "c", "--count", "3"]).unwrap();
        assert!(matches!(cli.command, Command::AugmentPreview { count: 3, .. }));
        assert!(Cli::try_parse_from(["rescrnet", "train", "--bogus"]).is_err());
    }

    #[test]
    fn usage_errors_exit_nonzero() {
        assert_eq!(main_with_args(["rescrnet", "frobnicate"]), 2);
        assert_eq!(main_with_args(["rescrnet", "train", "--config", "/nonexistent/run.toml"]), 1);
    }
}
