//! Builds the default network, runs it on several input sizes and prints
//! the shapes seen inside one LSTM RES block.
//!
//! cargo run --release --example network_shapes

use rand::{Rng as _, SeedableRng};
use rescrnet::layers::{NetworkConfig, ResCrNet};
use rescrnet::{Rng, Tape, Tensor};

fn main() -> rescrnet::Result<()> {
    let cfg = NetworkConfig::default();
    let model = ResCrNet::seeded(&cfg, 0)?;
    println!(
        "{} CONV RES blocks, {} LSTM RES blocks, {} classes, {} parameters",
        cfg.n_conv_blocks,
        cfg.n_lstm_blocks,
        cfg.num_classes,
        model.parameter_count()
    );
    let mut rng = Rng::seed_from_u64(1);
    for (h, w) in [(31, 47), (64, 80)] {
        let x = Tensor::from_fn(&[1, h, w, cfg.input_channels], |_| rng.gen_range(0.0..1.0));
        let y = model.predict_batch(&x)?;
        let worst = y.data().chunks(cfg.num_classes).map(|p| (p.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        println!("{h}x{w} -> {:?}, worst |sum p - 1| = {worst:.1e}", y.shape());
    }

    let small = NetworkConfig { n_conv_blocks: 1, ..cfg };
    let model = ResCrNet::seeded(&small, 0)?;
    let mut tape = Tape::new();
    let p = model.params().bind_frozen(&mut tape)?;
    let x = tape.constant(Tensor::from_fn(&[4, 26, 40, 3], |_| rng.gen_range(0.0..1.0)))?;
    tape.enable_trace();
    let y = model.lstm_blocks()[0].forward(&mut tape, &p, x)?;
    println!("LSTM RES block on [4, 26, 40, 3]:");
    for (label, shape) in tape.traced_shapes() {
        println!("  {label:<20} {shape:?}");
    }
    println!("  {:<20} {:?}", "output", tape.shape(y));
    Ok(())
}
