//! Binary PPM images and their conversion to network input.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ImageEncoder, RgbImage};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel normalisation applied after scaling pixels to `[0, 1]`.
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

/// Reads a P6 image with maxval 255.
pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let file = File::open(path)?;
    let decoder = PnmDecoder::new(BufReader::new(file)).map_err(|e| image_err(path, e))?;
    let header = decoder.header();
    if header.subtype() != PnmSubtype::Pixmap(SampleEncoding::Binary) || header.maximal_sample() != 255 {
        return Err(Error::Data(format!(
            "{}: only binary P6 with maxval 255 is accepted",
            path.display()
        )));
    }
    let img = DynamicImage::from_decoder(decoder).map_err(|e| image_err(path, e))?;
    Ok(img.into_rgb8())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| image_err(path, e))?;
    Ok(())
}

/// Bilinear resize with half-pixel centres and edge clamping, returning
/// planar `3×h×w` values in `[0, 1]`.
pub fn resize_bilinear(img: &RgbImage, width: usize, height: usize) -> Vec<f32> {
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let px = |x: usize, y: usize, c: usize| raw[(y * sw + x) * 3 + c] as f32 / 255.0;
    let axis = |i: usize, dst: usize, src: usize| {
        let s = ((i as f32 + 0.5) * src as f32 / dst as f32 - 0.5).clamp(0.0, (src - 1) as f32);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(src - 1), s - lo as f32)
    };
    let cols: Vec<_> = (0..width).map(|x| axis(x, width, sw)).collect();
    let mut out = vec![0.0f32; 3 * width * height];
    for y in 0..height {
        let (y0, y1, fy) = axis(y, height, sh);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for c in 0..3 {
                let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
                let bot = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
                out[(c * height + y) * width + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Resized, normalised `1×3×h×w` tensor.
pub fn image_to_tensor(img: &RgbImage, width: usize, height: usize) -> Tensor<f32> {
    let mut data = resize_bilinear(img, width, height);
    let plane = width * height;
    for (c, chunk) in data.chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
        }
    }
    Tensor::new([1, 3, height, width], data).expect("sized above")
}

/// Loads and stacks `paths` into an `N×3×h×w` batch.
pub fn load_batch(paths: &[impl AsRef<Path> + Sync], width: usize, height: usize) -> Result<Tensor<f32>> {
    if paths.is_empty() {
        return Err(Error::Data("no images to load".into()));
    }
    let items: Vec<Tensor<f32>> = paths
        .par_iter()
        .map(|p| read_ppm(p.as_ref()).map(|img| image_to_tensor(&img, width, height)))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<f32>> = items.iter().collect();
    Tensor::stack(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 80, 7]));
        write_ppm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(read_ppm(&path).unwrap(), img);
    }

    #[test]
    fn ascii_ppm_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        std::fs::write(&path, "P3\n1 1\n255\n1 2 3\n").unwrap();
        assert!(matches!(read_ppm(&path), Err(Error::Data(_))));
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = RgbImage::from_fn(4, 2, |x, y| image::Rgb([x as u8, y as u8, 9]));
        let v = resize_bilinear(&img, 4, 2);
        assert_eq!(v[3], 3.0 / 255.0);
        assert_eq!(v[8 + 4 + 1], 1.0 / 255.0);
        assert_eq!(v[16], 9.0 / 255.0);
    }

    #[test]
    fn upsample_interpolates_between_pixels() {
        let img = RgbImage::from_fn(2, 1, |x, _| image::Rgb([x as u8 * 100, 0, 0]));
        let v = resize_bilinear(&img, 4, 1);
        let got: Vec<f32> = v[..4].iter().map(|x| x * 255.0).collect();
        let want = [0.0, 25.0, 75.0, 100.0];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-4, "{got:?}");
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = RgbImage::from_pixel(7, 5, image::Rgb([128, 128, 128]));
        let t = image_to_tensor(&img, 3, 2);
        assert_eq!(t.shape(), [1, 3, 2, 3]);
        let want = (128.0 / 255.0 - CHANNEL_MEAN[1]) / CHANNEL_STD[1];
        assert!(t.data()[6..12].iter().all(|&v| (v - want).abs() < 1e-6));
    }
}
