//! Writes a few augmented copies of a generated image/mask pair as PNGs,
//! side by side with the original.
//!
//! cargo run --example augment_preview -- [out_dir] [count]

use std::path::PathBuf;

use rand::SeedableRng;
use rescrnet::augment::{apply_affine, sample_params, AugmentRanges};
use rescrnet::dataset::save_image;
use rescrnet::palette::encode_mask;
use rescrnet::{synthetic, Rng};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "augment_preview".into()));
    let count: usize = args.next().map_or(Ok(6), |a| a.parse())?;
    std::fs::create_dir_all(&out)?;
    let data = synthetic::disks_and_stripes(0)?;
    let item = &data.items[0];
    save_image(&out.join("original_image.png"), &item.image)?;
    encode_mask(&item.mask, &data.palette)?.save(out.join("original_mask.png"))?;
    let mut rng = Rng::seed_from_u64(42);
    for i in 0..count {
        let p = sample_params(&AugmentRanges::default(), &mut rng)?;
        let (img, mask) = apply_affine(&item.image, &item.mask, &p)?;
        save_image(&out.join(format!("{i:02}_image.png")), &img)?;
        encode_mask(&mask, &data.palette)?.save(out.join(format!("{i:02}_mask.png")))?;
        println!(
            "{i:02}: rot {:+6.1} shear {:+5.1} scale {:.3} shift ({:+.3}, {:+.3}) flips {}/{}",
            p.rotation_deg, p.shear_deg, p.scale, p.shift_frac.0, p.shift_frac.1, p.flip_h, p.flip_v
        );
    }
    println!("wrote {} pairs to {}", count + 1, out.display());
    Ok(())
}
