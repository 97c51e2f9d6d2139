//! Writes the generated disks-and-stripes pairs as PNG files, in the layout
//! `load_dataset` reads (images/ and masks/ with matching stems).
//!
//! cargo run --example synthetic_dataset -- <out_dir> [seed]

use std::path::PathBuf;

use rescrnet::dataset::{save_image, save_rgb};
use rescrnet::palette::encode_mask;
use rescrnet::synthetic;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let ds = synthetic::disks_and_stripes(seed)?;
    for dir in ["images", "masks"] {
        std::fs::create_dir_all(out.join(dir))?;
    }
    for item in &ds.items {
        let name = format!("{}.png", item.id);
        save_image(&out.join("images").join(&name), &item.image)?;
        save_rgb(&out.join("masks").join(&name), &encode_mask(&item.mask, &ds.palette)?)?;
        println!("{name}: {:?} image, {:?} mask", item.image.shape(), item.mask.shape());
    }
    Ok(())
}
