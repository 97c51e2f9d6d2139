//! Receptive field of dilated 3x3 convolutions: a single bright pixel
//! spreads to taps `d` pixels apart, and the output keeps the input size.
//!
//! cargo run --example atrous_conv

use rescrnet::{Tape, Tensor};

fn show(t: &Tensor) {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    for r in 0..h {
        let row: String = (0..w).map(|c| if t.get(&[0, r, c, 0]) != 0.0 { '#' } else { '.' }).collect();
        println!("  {row}");
    }
}

fn main() -> rescrnet::Result<()> {
    let n = 11;
    let impulse = Tensor::from_fn(&[1, n, n, 1], |i| if i == (n / 2) * n + n / 2 { 1.0 } else { 0.0 });
    for d in [1, 2, 4] {
        let mut tape = Tape::new();
        let x = tape.constant(impulse.clone())?;
        let k = tape.constant(Tensor::ones(&[3, 3, 1]))?;
        let y = tape.depthwise_conv2d(x, k, d)?;
        println!("dilation {d}: output {:?}", tape.shape(y));
        show(tape.value(y));
    }

    // Separable: depthwise per channel, then a 1x1 mix to 4 channels.
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[1, 6, 9, 2], |i| (i as f64 * 0.37).sin()))?;
    let dw = tape.param(Tensor::from_fn(&[3, 3, 2], |i| 0.1 * i as f64))?;
    let pw = tape.param(Tensor::from_fn(&[2, 4], |i| 0.5 - 0.2 * i as f64))?;
    let y = tape.separable_atrous_conv(x, dw, pw, None, 3)?;
    println!("separable atrous (d=3): {:?} -> {:?}", [1, 6, 9, 2], tape.shape(y));
    Ok(())
}
