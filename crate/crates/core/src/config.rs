//! Run configuration file (TOML).
//!
//! ```toml
//! seed = 7
//! epochs = 300
//! steps_per_epoch = 15
//! output_dir = "runs/synthetic"
//!
//! [data]
//! train_images = "data/synthetic/images"
//! train_masks = "data/synthetic/masks"
//!
//! [[palette]]
//! name = "background"
//! color = [0, 0, 255]
//! # ...one entry per class, in class order
//!
//! [network]
//! n_conv_blocks = 2
//!
//! [loss]
//! [augment]
//! [optimizer]
//! ```
//!
//! Relative paths are resolved against the directory holding the file.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentRanges;
use crate::error::{Error, Result};
use crate::layers::NetworkConfig;
use crate::loss::LossConfig;
use crate::optim::OptimizerConfig;
use crate::palette::{ClassPalette, DecodeOptions};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: Option<PathBuf>,
    pub train_masks: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
    pub val_masks: Option<PathBuf>,
    /// Use the generated disks-and-stripes pair instead of files.
    pub synthetic_seed: Option<u64>,
    pub decode: DecodeOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub output_dir: PathBuf,
    pub augment_enabled: bool,
    pub data: DataConfig,
    pub palette: Option<ClassPalette>,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub augment: AugmentRanges,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 90,
            steps_per_epoch: 15,
            output_dir: PathBuf::from("out"),
            augment_enabled: true,
            data: DataConfig::default(),
            palette: None,
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentRanges::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses and validates `text`; relative paths are joined to `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().replace('\n', " | ")))?;
        rebase(base_dir, &mut cfg.output_dir);
        let d = &mut cfg.data;
        for p in [&mut d.train_images, &mut d.train_masks, &mut d.val_images, &mut d.val_masks]
            .into_iter()
            .flatten()
        {
            rebase(base_dir, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let k = self.network.num_classes;
        self.loss.validate(k)?;
        self.augment.validate()?;
        self.optimizer.validate()?;
        if self.steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be at least 1".into()));
        }
        if let Some(p) = &self.palette {
            if p.len() != k {
                return Err(Error::Config(format!(
                    "palette has {} entries but network.num_classes = {k}",
                    p.len()
                )));
            }
        }
        let d = &self.data;
        if d.synthetic_seed.is_none() {
            if d.train_images.is_none() || d.train_masks.is_none() {
                return Err(Error::Config(
                    "data.train_images and data.train_masks are required unless data.synthetic_seed is set".into(),
                ));
            }
            if self.palette.is_none() {
                return Err(Error::Config("palette is required for file datasets".into()));
            }
        }
        if d.val_images.is_some() != d.val_masks.is_some() {
            return Err(Error::Config("data.val_images and data.val_masks must be given together".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            seed: self.seed,
            loss: self.loss.clone(),
            augment: self.augment_enabled.then(|| self.augment.clone()),
            optimizer: self.optimizer.clone(),
            output_dir: Some(self.output_dir.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 7
epochs = 3
output_dir = "out"

[data]
train_images = "imgs"
train_masks = "masks"

[[palette]]
name = "a"
color = [255, 0, 0]

[[palette]]
name = "b"
color = [0, 255, 0]

[network]
num_classes = 2
n_conv_blocks = 1
"#;

    #[test]
    fn parses_and_rebases() {
        let cfg = RunConfig::from_toml_str(SAMPLE, Path::new("/base")).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.output_dir, Path::new("/base/out"));
        assert_eq!(cfg.data.train_images.as_deref(), Some(Path::new("/base/imgs")));
        assert_eq!(cfg.palette.unwrap().len(), 2);
        assert_eq!(cfg.steps_per_epoch, 15);
    }

    #[test]
    fn errors_name_the_problem() {
        let err = RunConfig::from_toml_str(&SAMPLE.replace("epochs = 3", "epochs = 3\nepoch = 4"), Path::new("."))
            .unwrap_err()
            .to_string();
        assert!(err.contains("epoch") && err.contains("line"), "{err}");
        let err = RunConfig::from_toml_str(&SAMPLE.replace("num_classes = 2", "num_classes = 3"), Path::new("."))
            .unwrap_err()
            .to_string();
        assert!(err.contains("palette"), "{err}");
        let err = RunConfig::from_toml_str(&SAMPLE.replace("seed = 7", "seed = \"x\""), Path::new("."))
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
