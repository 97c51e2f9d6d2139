//! Tanimoto scores, the training loss and the per-class metric table on a
//! tiny hand-written prediction.
//!
//! cargo run --example loss_metrics

use rescrnet::loss::{dice_coefficient, tanimoto, tanimoto_loss, tanimoto_with_complement, LossConfig};
use rescrnet::metrics::ConfusionCounts;
use rescrnet::palette::one_hot;
use rescrnet::{Tape, Tensor};

fn main() -> rescrnet::Result<()> {
    // 2x3 image, 3 classes.
    let truth = one_hot(&[0, 1, 1, 2, 2, 0], 2, 3, 3)?;
    #[rustfmt::skip]
    let probs = Tensor::new(&[2, 3, 3], vec![
        0.8, 0.1, 0.1,   0.2, 0.7, 0.1,   0.5, 0.4, 0.1,
        0.1, 0.2, 0.7,   0.1, 0.1, 0.8,   0.6, 0.3, 0.1,
    ])?;
    let (yhat, y) = (probs.reshape(&[1, 2, 3, 3])?, truth.reshape(&[1, 2, 3, 3])?);
    println!("tanimoto             {:.4}", tanimoto(&yhat, &y, 1e-5)?);
    println!("tanimoto+complement  {:.4}", tanimoto_with_complement(&yhat, &y, 1e-5)?);
    println!("soft dice            {:.4}", dice_coefficient(&yhat, &y, 1e-5)?);

    let mut tape = Tape::new();
    let v = tape.param(yhat.clone())?;
    let l = tanimoto_loss(&mut tape, v, &y, &LossConfig::default(), None)?;
    tape.backward(l)?;
    println!("loss                 {:.4}", tape.value(l).data()[0]);
    println!("d loss / d yhat[0]   {:?}", &tape.grad(v).expect("param").data()[..3]);

    let mut cc = ConfusionCounts::new(3);
    cc.accumulate(&yhat, &y)?;
    let names = ["background", "disk", "stripe"].map(String::from);
    print!("\n{}", cc.report().table(&names));
    Ok(())
}
