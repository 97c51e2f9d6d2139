//! PNG input and output and paired image/mask datasets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, RgbImage};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::palette::{decode_mask, ClassPalette, DecodeOptions, DecodeReport};
use crate::tensor::{Scalar, Tensor};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a PNG as `[H,W,1]` (grey) or `[H,W,3]` (colour) in `[0,1]`.
///
/// 8-bit samples are divided by 255 and 16-bit samples by 65535. Alpha is
/// dropped and palette images arrive already expanded to RGB.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<Scalar>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| v as Scalar / 255.0).collect()),
        DynamicImage::ImageLumaA8(_) => (1, img.to_luma8().into_raw().into_iter().map(|v| v as Scalar / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| v as Scalar / 65535.0).collect()),
        DynamicImage::ImageLumaA16(_) => (
            1,
            img.to_luma16().into_raw().into_iter().map(|v| v as Scalar / 65535.0).collect(),
        ),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| v as Scalar / 255.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(|v| v as Scalar / 65535.0).collect()),
        DynamicImage::ImageRgba16(_) => (
            3,
            img.to_rgb16().into_raw().into_iter().map(|v| v as Scalar / 65535.0).collect(),
        ),
        _ => (3, img.to_rgb8().into_raw().into_iter().map(|v| v as Scalar / 255.0).collect()),
    };
    Tensor::new(&[h, w, channels], data)
}

/// Reads a PNG as 8-bit RGB, e.g. for mask decoding.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(open(path)?.to_rgb8())
}

fn to_u8(v: Scalar) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `[H,W,1]` or `[H,W,3]` tensor with values in `[0,1]` as an
/// 8-bit PNG.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape();
    if s.len() != 3 || !(s[2] == 1 || s[2] == 3) {
        return Err(Error::invalid("save_image", format!("expects [H,W,1|3], got {s:?}")));
    }
    let (h, w) = (s[0] as u32, s[1] as u32);
    let bytes: Vec<u8> = t.data().iter().map(|&v| to_u8(v)).collect();
    let img = if s[2] == 1 {
        DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("sized above"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("sized above"))
    };
    save_dynamic(path, &img)
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    save_dynamic(path, &DynamicImage::ImageRgb8(img.clone()))
}

fn save_dynamic(path: &Path, img: &DynamicImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H,W,C]` in `[0,1]`.
    pub image: Tensor,
    /// One-hot `[H,W,K]`.
    pub mask: Tensor,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegDataset {
    pub items: Vec<Sample>,
    pub palette: ClassPalette,
    /// Masks whose colours were far from the palette, with their reports.
    pub warnings: Vec<(String, DecodeReport)>,
}

impl SegDataset {
    pub fn new(items: Vec<Sample>, palette: ClassPalette) -> Result<Self> {
        let k = palette.len();
        for s in &items {
            let (is, ms) = (s.image.shape(), s.mask.shape());
            if is.len() != 3 || ms.len() != 3 || is[..2] != ms[..2] || ms[2] != k {
                return Err(Error::Dataset(format!(
                    "`{}`: image {is:?} and mask {ms:?} do not pair for {k} classes",
                    s.id
                )));
            }
        }
        Ok(Self {
            items,
            palette,
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }

    pub fn pairs(&self) -> Vec<(Tensor, Tensor)> {
        self.items.iter().map(|s| (s.image.clone(), s.mask.clone())).collect()
    }
}

/// PNG files in `dir`, keyed by stem.
fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.insert(stem, path);
        }
    }
    Ok(out)
}

/// Loads every `images_dir/<stem>.png` with its `masks_dir/<stem>.png`,
/// ordered by stem.
pub fn load_dataset(
    images_dir: &Path,
    masks_dir: &Path,
    palette: &ClassPalette,
    opts: &DecodeOptions,
) -> Result<SegDataset> {
    let images = png_stems(images_dir)?;
    if images.is_empty() {
        return Err(Error::Dataset(format!("no PNG images in {}", images_dir.display())));
    }
    let masks = png_stems(masks_dir)?;
    let mut jobs = Vec::with_capacity(images.len());
    for (stem, img) in &images {
        let mask = masks.get(stem).ok_or_else(|| {
            Error::Dataset(format!("image `{stem}` has no mask in {}", masks_dir.display()))
        })?;
        jobs.push((stem.clone(), img.clone(), mask.clone()));
    }
    let loaded: Vec<(Sample, DecodeReport)> = jobs
        .into_par_iter()
        .map(|(id, img_path, mask_path)| {
            let image = load_image(&img_path)?;
            let rgb = load_rgb(&mask_path)?;
            let (mask, report) = decode_mask(&rgb, palette, opts)?;
            if image.shape()[..2] != mask.shape()[..2] {
                return Err(Error::Dataset(format!(
                    "`{id}`: image is {:?} but mask is {:?}",
                    &image.shape()[..2],
                    &mask.shape()[..2]
                )));
            }
            Ok((Sample { image, mask, id }, report))
        })
        .collect::<Result<_>>()?;
    let channels = loaded[0].0.image.shape()[2];
    if let Some((s, _)) = loaded.iter().find(|(s, _)| s.image.shape()[2] != channels) {
        return Err(Error::Dataset(format!(
            "`{}` has {} channels, others have {channels}",
            s.id,
            s.image.shape()[2]
        )));
    }
    let warnings = loaded
        .iter()
        .filter(|(_, r)| r.should_warn(opts))
        .map(|(s, r)| (s.id.clone(), *r))
        .collect();
    let mut ds = SegDataset::new(loaded.into_iter().map(|(s, _)| s).collect(), palette.clone())?;
    ds.warnings = warnings;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::palette::{encode_mask, one_hot};

    fn palette() -> ClassPalette {
        ClassPalette::from_pairs(&[("a", [255, 0, 0]), ("b", [0, 255, 0])]).unwrap()
    }

    #[test]
    fn grey_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let t = Tensor::from_fn(&[3, 5, 1], |i| (i * 17 % 256) as Scalar / 255.0);
        save_image(&p, &t).unwrap();
        assert_eq!(load_image(&p).unwrap(), t);
    }

    #[test]
    fn sixteen_bit_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g16.png");
        let buf = ImageBuffer::<Luma<u16>, _>::from_raw(2, 1, vec![0u16, 65535]).unwrap();
        buf.save(&p).unwrap();
        assert_eq!(load_image(&p).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn loads_sorted_pairs_and_reports_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, masks) = (dir.path().join("i"), dir.path().join("m"));
        std::fs::create_dir_all(&imgs).unwrap();
        std::fs::create_dir_all(&masks).unwrap();
        assert!(matches!(
            load_dataset(&imgs, &masks, &palette(), &DecodeOptions::default()),
            Err(Error::Dataset(_))
        ));
        for stem in ["b", "a"] {
            save_image(&imgs.join(format!("{stem}.png")), &Tensor::zeros(&[2, 3, 1])).unwrap();
            let m = one_hot(&[0, 1, 1, 0, 0, 1], 2, 3, 2).unwrap();
            save_rgb(&masks.join(format!("{stem}.png")), &encode_mask(&m, &palette()).unwrap()).unwrap();
        }
        let ds = load_dataset(&imgs, &masks, &palette(), &DecodeOptions::default()).unwrap();
        let ids: Vec<_> = ds.items.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(ds.items[0].mask.shape(), &[2, 3, 2]);

        save_image(&imgs.join("c.png"), &Tensor::zeros(&[2, 3, 1])).unwrap();
        assert!(load_dataset(&imgs, &masks, &palette(), &DecodeOptions::default()).is_err());
        let m = one_hot(&[0; 4], 2, 2, 2).unwrap();
        save_rgb(&masks.join("c.png"), &encode_mask(&m, &palette()).unwrap()).unwrap();
        assert!(load_dataset(&imgs, &masks, &palette(), &DecodeOptions::default()).is_err());
    }
}
