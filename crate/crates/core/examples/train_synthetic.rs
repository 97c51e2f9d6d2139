//! Trains a small network on the generated disks-and-stripes pair and
//! prints the loss curve.
//!
//! cargo run --release --example train_synthetic -- [epochs]

use std::time::Instant;

use rescrnet::layers::{NetworkConfig, ResCrNet};
use rescrnet::synthetic;
use rescrnet::trainer::{train_with_progress, TrainConfig};

fn main() -> rescrnet::Result<()> {
    let epochs = std::env::args().nth(1).map_or(300, |a| a.parse().expect("epochs"));
    let data = synthetic::disks_and_stripes(0)?;
    let net = NetworkConfig {
        n_conv_blocks: 2,
        n_lstm_blocks: 1,
        filters_per_branch: 4,
        ..Default::default()
    };
    let mut model = ResCrNet::seeded(&net, 7)?;
    let cfg = TrainConfig {
        epochs,
        seed: 7,
        ..Default::default()
    };
    let start = Instant::now();
    let run = train_with_progress(&mut model, &data, None, &cfg, |r| {
        if r.epoch % 10 == 0 || r.epoch == 1 {
            println!(
                "epoch {:>3}  train T~ {:.4}  val T~ {:.4}  macro dice {:.4}  ({:.1?})",
                r.epoch,
                r.train_tanimoto,
                r.val_tanimoto,
                r.metrics.macro_avg.dice,
                start.elapsed()
            );
        }
    })?;
    println!("best epoch {:?}", run.best_epoch);
    Ok(())
}
