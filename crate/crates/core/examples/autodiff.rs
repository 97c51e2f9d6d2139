//! Reverse-mode gradients on a small expression, checked against the
//! hand-derived derivative.
//!
//! cargo run --example autodiff

use rescrnet::{Tape, Tensor};

fn main() -> rescrnet::Result<()> {
    // f(x) = sum(tanh(x) * x + 3x), so df/dx = tanh(x) + x (1 - tanh^2 x) + 3.
    let xs = vec![-1.5, -0.2, 0.0, 0.7, 2.0];
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(&[xs.len()], xs.clone())?)?;
    let t = tape.tanh(x)?;
    let tx = tape.mul(t, x)?;
    let three_x = tape.affine(x, 3.0, 0.0)?;
    let s = tape.add(tx, three_x)?;
    let f = tape.sum(s)?;
    tape.backward(f)?;
    let g = tape.grad(x).expect("x is a parameter");
    println!("f = {:.6}", tape.value(f).data()[0]);
    println!("{:>6} {:>12} {:>12}", "x", "tape", "by hand");
    for (i, &v) in xs.iter().enumerate() {
        let th = v.tanh();
        println!("{v:>6.2} {:>12.8} {:>12.8}", g.data()[i], th + v * (1.0 - th * th) + 3.0);
    }
    Ok(())
}
