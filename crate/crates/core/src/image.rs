//! Grayscale image container and file formats.
//!
//! Two formats are always available:
//!
//! - binary PGM (`P5`) with maxval up to 255, read and written as 8-bit data;
//! - PFMG, a raw little-endian `f64` raster: the 4 bytes `PFMG`, 4 zero bytes,
//!   `u32` width, `u32` height, then `width * height` doubles in row-major order.
//!
//! PNG support is behind the `png` feature.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grid of real-valued intensities (nominal range `[0, 255]`, not clamped).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

pub const PFMG_MAGIC: &[u8; 4] = b"PFMG";
const PFMG_HEADER_LEN: usize = 16;

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("image must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(Error::invalid(format!("pixel {i} is not finite")));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    /// Builds an image from `f(row, col)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.pixels[row * self.width..(row + 1) * self.width]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Errors unless both images have the same size.
    pub fn check_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Clamps to `[0, 255]` and rounds half away from zero.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| quantize(p)).collect()
    }

    /// The image after an 8-bit save/load round trip.
    pub fn quantized(&self) -> Image {
        self.map(|p| quantize(p) as f64)
    }
}

#[inline]
pub fn quantize(p: f64) -> u8 {
    p.clamp(0.0, 255.0).round() as u8
}

/// Encodes an image as binary PGM (`P5`, maxval 255).
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_u8());
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| Error::format("pgm magic", "empty file"))?;
    if magic != b"P5" {
        return Err(Error::format(
            "pgm magic",
            format!("expected P5, found {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let width = header_number(bytes, &mut pos, "pgm width")?;
    let height = header_number(bytes, &mut pos, "pgm height")?;
    let maxval = header_number(bytes, &mut pos, "pgm maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format("pgm size", format!("{width}x{height} is empty")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            "pgm maxval",
            format!("only 8-bit data (maxval 1..=255) is supported, found {maxval}"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| Error::format("pgm size", "width * height overflows"))?;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < expected {
        return Err(Error::format(
            "pgm raster",
            format!("expected {expected} bytes, found {}", raster.len()),
        ));
    }
    let pixels = raster[..expected].iter().map(|&b| b as f64).collect();
    Image::new(width, height, pixels)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let tok = next_token(bytes, pos).ok_or_else(|| Error::format(field, "missing"))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(field, format!("not a number: {:?}", String::from_utf8_lossy(tok))))
}

pub fn encode_pfmg(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(PFMG_HEADER_LEN + 8 * image.pixels.len());
    out.extend_from_slice(PFMG_MAGIC);
    out.extend_from_slice(&[0u8; 4]);
    out.extend_from_slice(&(image.width as u32).to_le_bytes());
    out.extend_from_slice(&(image.height as u32).to_le_bytes());
    for p in &image.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_pfmg(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < PFMG_HEADER_LEN {
        return Err(Error::format(
            "pfmg header",
            format!("expected {PFMG_HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != PFMG_MAGIC {
        return Err(Error::format("pfmg magic", "expected PFMG"));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::format("pfmg size", "width * height overflows"))?;
    let body = &bytes[PFMG_HEADER_LEN..];
    if body.len() != expected {
        return Err(Error::format(
            "pfmg raster",
            format!("expected {expected} bytes, found {}", body.len()),
        ));
    }
    let pixels = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::new(width, height, pixels)
}

/// Reads a PGM, PFMG or (with the `png` feature) PNG file, chosen by content.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.starts_with(PFMG_MAGIC) {
        decode_pfmg(&bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else {
        Err(Error::format(
            "image magic",
            format!("{} is not a PGM (P5) or PFMG file", path.as_ref().display()),
        ))
    }
}

/// Writes an 8-bit PGM, or PFMG when the extension is `.pfmg`, or PNG for `.png`.
pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let bytes = match ext.as_deref() {
        Some("pfmg") => encode_pfmg(image),
        Some("png") => encode_png(image)?,
        _ => encode_pgm(image),
    };
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = ::image::load_from_memory_with_format(bytes, ::image::ImageFormat::Png)
        .map_err(|e| Error::format("png", e.to_string()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Image::new(w as usize, h as usize, img.into_raw().into_iter().map(f64::from).collect())
}

#[cfg(not(feature = "png"))]
fn decode_png(_: &[u8]) -> Result<Image> {
    Err(Error::format("png", "PNG support requires the `png` feature"))
}

#[cfg(feature = "png")]
fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let buf = ::image::GrayImage::from_raw(image.width as u32, image.height as u32, image.to_u8())
        .ok_or_else(|| Error::Internal("png buffer size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ::image::ImageFormat::Png)
        .map_err(|e| Error::format("png", e.to_string()))?;
    Ok(out.into_inner())
}

#[cfg(not(feature = "png"))]
fn encode_png(_: &Image) -> Result<Vec<u8>> {
    Err(Error::format("png", "PNG support requires the `png` feature"))
}
