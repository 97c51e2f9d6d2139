//! Colour masks to one-hot tensors and back, including the nearest-colour
//! fallback for slightly off pixels.
//!
//! cargo run --example mask_codec

use image::{Rgb, RgbImage};
use rescrnet::palette::{class_indices, decode_mask, encode_mask, ClassPalette, DecodeOptions};

fn main() -> rescrnet::Result<()> {
    let palette = ClassPalette::from_pairs(&[("background", [0, 0, 0]), ("cell", [255, 0, 0]), ("edge", [0, 255, 0])])?;
    let mut img = RgbImage::new(4, 2);
    let colours = [[0, 0, 0], [255, 0, 0], [250, 8, 3], [0, 255, 0], [0, 0, 0], [30, 200, 40], [255, 0, 0], [0, 0, 0]];
    for (i, c) in colours.iter().enumerate() {
        img.put_pixel(i as u32 % 4, i as u32 / 4, Rgb(*c));
    }
    let (mask, report) = decode_mask(&img, &palette, &DecodeOptions::default())?;
    println!("one-hot shape {:?}", mask.shape());
    println!("classes       {:?}", class_indices(&mask));
    println!("report        {report:?}");
    let back = encode_mask(&mask, &palette)?;
    for (i, px) in back.pixels().enumerate() {
        println!("  pixel {i}: {:?} -> {:?}", colours[i], px.0);
    }
    let strict = DecodeOptions { exact: true, ..DecodeOptions::default() };
    match decode_mask(&img, &palette, &strict) {
        Ok(_) => println!("exact decode accepted"),
        Err(e) => println!("exact decode rejects off-palette pixels: {e}"),
    }
    Ok(())
}
