use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// An image flattened to a set of pixel colors in row-major order, with
/// values mapped to [-1, 1]. Spatial structure is deliberately discarded:
/// only the color distribution survives, which is exactly what Gram-based
/// style matching consumes.
#[derive(Debug, Clone)]
pub struct PixelSet {
    colors: Matrix,
    width: usize,
    height: usize,
}

impl PixelSet {
    /// Builds a pixel set from 8-bit RGB data (row-major, 3 bytes per pixel).
    pub fn from_rgb8(width: usize, height: usize, data: &[u8]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Empty { context: "pixel set" });
        }
        if data.len() != width * height * 3 {
            return Err(Error::ImageDecode(format!(
                "expected {} RGB bytes for {width}x{height}, got {}",
                width * height * 3,
                data.len()
            )));
        }
        let colors = Matrix::from_raw(
            width * height,
            3,
            data.iter().map(|&b| 2.0 * b as f64 / 255.0 - 1.0).collect(),
        );
        Ok(PixelSet {
            colors,
            width,
            height,
        })
    }

    /// (H * W) x 3 matrix of colors in [-1, 1].
    pub fn colors(&self) -> &Matrix {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.rows() == 0
    }

    pub fn source_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Loads an image as a pixel set. Binary PPM (P6) is parsed directly; PNG
/// is decoded through the image crate. Non-RGB inputs are an error.
pub fn image_to_pixel_set(path: impl AsRef<Path>) -> Result<PixelSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes)
    } else {
        Err(Error::ImageDecode(format!(
            "{}: unrecognized image format (binary PPM or PNG expected)",
            path.display()
        )))
    }
}

/// Binary PPM (P6): "P6", whitespace-separated width, height, maxval
/// (comments with '#' allowed), a single whitespace byte, then raw RGB.
fn decode_ppm(bytes: &[u8]) -> Result<PixelSet> {
    let mut pos = 2; // past "P6"
    let mut fields = [0usize; 3];
    for field in &mut fields {
        *field = read_ppm_number(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::ImageDecode(format!(
            "PPM maxval {maxval} unsupported (must be 1..=255)"
        )));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::ImageDecode(
            "PPM header not terminated by whitespace".into(),
        ));
    }
    pos += 1;
    let need = width * height * 3;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::ImageDecode(format!("PPM pixel data truncated: need {need} bytes")))?;
    if maxval == 255 {
        PixelSet::from_rgb8(width, height, data)
    } else {
        let rescaled: Vec<u8> = data
            .iter()
            .map(|&b| ((b as f64 / maxval as f64) * 255.0).round() as u8)
            .collect();
        PixelSet::from_rgb8(width, height, &rescaled)
    }
}

fn read_ppm_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // Skip whitespace and '#' comments.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::ImageDecode("PPM header: expected a number".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::ImageDecode("PPM header: invalid number".into()))
}

fn decode_png(bytes: &[u8]) -> Result<PixelSet> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::ImageDecode(e.to_string()))?;
    let rgb = img.to_rgb8();
    PixelSet::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
}
