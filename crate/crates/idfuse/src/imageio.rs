//! PNG input/output and the fixed box-filter latent pyramid.
//!
//! Images live in memory as `[pixels x 3]` tensors with channel values in
//! `[0, 1]`, row-major over a square raster. Latents are the same layout at
//! quarter resolution with values affinely mapped to `[-1, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use thiserror::Error;

use crate::raster::BoolRaster;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("png error on {path}: {message}")]
    Png { path: String, message: String },
    #[error("image is {w}x{h}, expected a square raster")]
    NotSquare { w: usize, h: usize },
    #[error("unsupported png layout: {0}")]
    Unsupported(String),
    #[error("image tensor has {rows} rows, expected {expected} for side {side}")]
    BadPixelCount {
        rows: usize,
        side: usize,
        expected: usize,
    },
}

pub type Result<T> = std::result::Result<T, ImageError>;

fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> ImageError {
    ImageError::Png {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Square RGB image, values in `[0, 1]`, stored `[side*side x 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub side: usize,
    pub pixels: Tensor,
}

impl Image {
    pub fn new(side: usize, pixels: Tensor) -> Result<Self> {
        if pixels.rows() != side * side || pixels.cols() != 3 {
            return Err(ImageError::BadPixelCount {
                rows: pixels.rows(),
                side,
                expected: side * side,
            });
        }
        Ok(Self { side, pixels })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels.at(y * self.side + x, c)
    }
}

pub fn write_rgb_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.side as u32, img.side as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    let bytes: Vec<u8> = img
        .pixels
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))
}

pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if w != h {
        return Err(ImageError::NotSquare { w, h });
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::Unsupported(format!(
            "bit depth {:?}",
            info.bit_depth
        )));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(ImageError::Unsupported(format!("color type {other:?}"))),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf[..w * h * stride].chunks(stride) {
        for &b in &px[..3] {
            data.push(b as f64 / 255.0);
        }
    }
    Image::new(w, Tensor::new(w * h, 3, data).expect("length by construction"))
}

/// Write a boolean raster as a 1-bit grayscale PNG.
pub fn write_mask_png(path: &Path, mask: &BoolRaster) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let (w, h) = (mask.width(), mask.height());
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    let row_bytes = w.div_ceil(8);
    let mut bytes = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                bytes[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))
}

/// Write an arbitrary rectangular value grid as an 8-bit grayscale PNG.
/// Values are clamped to [0, 1]; non-finite values render as black.
pub fn write_gray_png(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), height * width, "grid shape mismatch");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))
}

/// Read a grayscale PNG as a boolean raster (any nonzero sample is true).
pub fn read_mask_png(path: &Path) -> Result<BoolRaster> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    if info.color_type != png::ColorType::Grayscale {
        return Err(ImageError::Unsupported(format!(
            "mask color type {:?}",
            info.color_type
        )));
    }
    let mut data = Vec::with_capacity(w * h);
    match info.bit_depth {
        png::BitDepth::One => {
            let row_bytes = w.div_ceil(8);
            for y in 0..h {
                for x in 0..w {
                    data.push(buf[y * row_bytes + x / 8] & (0x80 >> (x % 8)) != 0);
                }
            }
        }
        png::BitDepth::Eight => {
            data.extend(buf[..w * h].iter().map(|&b| b != 0));
        }
        other => return Err(ImageError::Unsupported(format!("mask bit depth {other:?}"))),
    }
    BoolRaster::new(h, w, data).map_err(|e| ImageError::Unsupported(e.to_string()))
}

/// Box-filter downsample by an integer factor.
pub fn box_downsample(img: &Image, factor: usize) -> Result<Image> {
    assert!(factor > 0 && img.side % factor == 0, "factor must divide side");
    let out_side = img.side / factor;
    let mut pixels = Tensor::zeros(out_side * out_side, 3);
    let norm = 1.0 / (factor * factor) as f64;
    for y in 0..out_side {
        for x in 0..out_side {
            for c in 0..3 {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += img.at(y * factor + dy, x * factor + dx, c);
                    }
                }
                pixels.set(y * out_side + x, c, acc * norm);
            }
        }
    }
    Image::new(out_side, pixels)
}

/// Nearest-neighbour upsample by an integer factor.
pub fn nearest_upsample(img: &Image, factor: usize) -> Result<Image> {
    let out_side = img.side * factor;
    let mut pixels = Tensor::zeros(out_side * out_side, 3);
    for y in 0..out_side {
        for x in 0..out_side {
            for c in 0..3 {
                pixels.set(y * out_side + x, c, img.at(y / factor, x / factor, c));
            }
        }
    }
    Image::new(out_side, pixels)
}

/// Image side over latent side; the pyramid is a single 4x box filter.
pub const LATENT_FACTOR: usize = 4;

/// Encode a `[0, 1]` image to a `[-1, 1]` latent at quarter resolution.
pub fn encode_latent(img: &Image) -> Result<Tensor> {
    let small = box_downsample(img, LATENT_FACTOR)?;
    Ok(small.pixels.map(|v| 2.0 * v - 1.0))
}

/// Decode a latent back to an image; inverse of [`encode_latent`] up to the
/// information lost in the downsample, clamped to `[0, 1]`.
pub fn decode_latent(latent: &Tensor, latent_side: usize) -> Result<Image> {
    let small = Image::new(latent_side, latent.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)))?;
    nearest_upsample(&small, LATENT_FACTOR)
}

/// Push an image through encode + decode; generated and rendered images are
/// both passed through this before any metric compares them.
pub fn pyramid_roundtrip(img: &Image) -> Result<Image> {
    let latent = encode_latent(img)?;
    decode_latent(&latent, img.side / LATENT_FACTOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::derive_rng;
    use rand::Rng as _;

    fn random_image(side: usize, seed: u64) -> Image {
        let mut rng = derive_rng(seed, "img", 0);
        let data = (0..side * side * 3).map(|_| rng.gen::<f64>()).collect();
        Image::new(side, Tensor::new(side * side, 3, data).unwrap()).unwrap()
    }

    #[test]
    fn rgb_png_roundtrips_at_8bit_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = random_image(16, 1);
        write_rgb_png(&path, &img).unwrap();
        let back = read_rgb_png(&path).unwrap();
        assert_eq!(back.side, 16);
        // quantization to u8 bounds the roundtrip error by half a step
        assert!(img.pixels.max_abs_diff(&back.pixels) <= 0.5 / 255.0 + 1e-12);
        // a second roundtrip is exact
        let path2 = dir.path().join("img2.png");
        write_rgb_png(&path2, &back).unwrap();
        assert_eq!(read_rgb_png(&path2).unwrap(), back);
    }

    #[test]
    fn mask_png_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mut rng = derive_rng(2, "mask", 0);
        let mask = BoolRaster::new(64, 64, (0..64 * 64).map(|_| rng.gen_bool(0.4)).collect())
            .unwrap();
        write_mask_png(&path, &mask).unwrap();
        assert_eq!(read_mask_png(&path).unwrap(), mask);
    }

    #[test]
    fn box_downsample_averages_blocks() {
        let mut pixels = Tensor::zeros(16, 3);
        // top-left 2x2 block: known values in channel 0
        for (i, &(y, x, v)) in [(0, 0, 0.0), (0, 1, 1.0), (1, 0, 0.5), (1, 1, 0.5)]
            .iter()
            .enumerate()
        {
            let _ = i;
            pixels.set(y * 4 + x, 0, v);
        }
        let img = Image::new(4, pixels).unwrap();
        let small = box_downsample(&img, 2).unwrap();
        assert!((small.at(0, 0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_image_survives_pyramid_exactly() {
        let img = Image::new(64, Tensor::filled(64 * 64, 3, 0.25)).unwrap();
        let back = pyramid_roundtrip(&img).unwrap();
        assert!(img.pixels.max_abs_diff(&back.pixels) < 1e-12);
    }

    #[test]
    fn decode_is_right_inverse_of_encode_on_block_constant_images() {
        // block-constant at the latent scale means the pyramid loses nothing
        let small = random_image(16, 3);
        let big = nearest_upsample(&small, LATENT_FACTOR).unwrap();
        let back = pyramid_roundtrip(&big).unwrap();
        assert!(big.pixels.max_abs_diff(&back.pixels) < 1e-12);
    }

    #[test]
    fn latent_range_is_signed() {
        let img = Image::new(8, Tensor::filled(64, 3, 0.0)).unwrap();
        let latent = encode_latent(&img).unwrap();
        assert!(latent.data().iter().all(|&v| (v + 1.0).abs() < 1e-15));
        let img = Image::new(8, Tensor::filled(64, 3, 1.0)).unwrap();
        let latent = encode_latent(&img).unwrap();
        assert!(latent.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }
}
