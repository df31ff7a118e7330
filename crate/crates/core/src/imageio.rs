//! Binary PPM (P6) / PGM (P5) codecs, the mask palette and simple raster drawing.

use std::fs;
use std::path::Path;

use trunkshare_tensor::Tensor;

use crate::det::BBox;
use crate::error::{CoreError, Result};
use crate::seg::{SegMask, IGNORE_LABEL};

/// Mask colors by class id; any id past the table (and the ignore label) renders white.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn palette_color(label: u8) -> [u8; 3] {
    if label == IGNORE_LABEL {
        return [255, 255, 255];
    }
    PALETTE.get(label as usize).copied().unwrap_or([255, 255, 255])
}

/// 8-bit RGB raster, row-major interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: fill.repeat(width * height),
        }
    }

    /// Quantizes a `[3, H, W]` tensor in `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(CoreError::Contract(format!("expected a [3, H, W] image, got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        let plane = h * w;
        let d = t.data();
        let mut data = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                data.push(quantize(d[c * plane + p]));
            }
        }
        Ok(Self { width: w, height: h, data })
    }

    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[p * 3 + c] as f64 / 255.0
        })
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.data[i..i + 3].copy_from_slice(&rgb);
        }
    }

    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, rgb: [u8; 3]) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.set(x, y, rgb);
            }
        }
    }

    /// One-pixel outline of a normalized box.
    pub fn draw_box(&mut self, b: &BBox, rgb: [u8; 3]) {
        let (w, h) = (self.width as f64, self.height as f64);
        let x0 = (b.xmin * w).floor().clamp(0.0, w - 1.0) as usize;
        let y0 = (b.ymin * h).floor().clamp(0.0, h - 1.0) as usize;
        let x1 = ((b.xmax * w).ceil() - 1.0).clamp(0.0, w - 1.0) as usize;
        let y1 = ((b.ymax * h).ceil() - 1.0).clamp(0.0, h - 1.0) as usize;
        for x in x0..=x1 {
            self.set(x, y0, rgb);
            self.set(x, y1, rgb);
        }
        for y in y0..=y1 {
            self.set(x0, y, rgb);
            self.set(x1, y, rgb);
        }
    }

    /// Blends palette colors of a same-sized mask over the image; background stays untouched.
    pub fn overlay_mask(&mut self, mask: &SegMask, alpha: f64) {
        for y in 0..self.height.min(mask.height()) {
            for x in 0..self.width.min(mask.width()) {
                let label = mask.get(y, x);
                if label == 0 {
                    continue;
                }
                let pal = palette_color(label);
                let cur = self.get(x, y);
                let mixed = [0, 1, 2].map(|c| (cur[c] as f64 * (1.0 - alpha) + pal[c] as f64 * alpha).round() as u8);
                self.set(x, y, mixed);
            }
        }
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn scaled(&self, factor: usize) -> Self {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut out = Self::new(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(x / factor, y / factor));
            }
        }
        out
    }

    /// Places `other` to the right of `self` (heights must match).
    pub fn hconcat(&self, other: &RgbImage) -> Result<Self> {
        if self.height != other.height {
            return Err(CoreError::Contract("hconcat of images with different heights".into()));
        }
        let width = self.width + other.width;
        let mut data = Vec::with_capacity(width * self.height * 3);
        for y in 0..self.height {
            data.extend_from_slice(&self.data[y * self.width * 3..(y + 1) * self.width * 3]);
            data.extend_from_slice(&other.data[y * other.width * 3..(y + 1) * other.width * 3]);
        }
        Ok(Self {
            width,
            height: self.height,
            data,
        })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8], path: &str) -> Result<Self> {
        let (magic, width, height, body) = parse_header(bytes, path)?;
        if magic != "P6" {
            return Err(CoreError::format(path, format!("expected P6, found {magic}")));
        }
        if body.len() != width * height * 3 {
            return Err(CoreError::format(path, "pixel data length does not match header"));
        }
        Ok(Self {
            width,
            height,
            data: body.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_ppm(&fs::read(path)?, &path.display().to_string())
    }
}

/// Nearest 8-bit level of a `[0, 1]` value (clamped).
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn mask_to_pgm(mask: &SegMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.labels());
    out
}

pub fn mask_from_pgm(bytes: &[u8], path: &str) -> Result<SegMask> {
    let (magic, width, height, body) = parse_header(bytes, path)?;
    if magic != "P5" {
        return Err(CoreError::format(path, format!("expected P5, found {magic}")));
    }
    if body.len() != width * height {
        return Err(CoreError::format(path, "pixel data length does not match header"));
    }
    SegMask::new(height, width, body.to_vec())
}

/// Palette rendering of a mask.
pub fn mask_to_rgb(mask: &SegMask) -> RgbImage {
    let mut img = RgbImage::new(mask.width(), mask.height(), [0, 0, 0]);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            img.set(x, y, palette_color(mask.get(y, x)));
        }
    }
    img
}

/// Parses `magic width height maxval` and returns the body after the single
/// whitespace byte that ends the header. `#` comments are skipped.
fn parse_header<'a>(bytes: &'a [u8], path: &str) -> Result<(String, usize, usize, &'a [u8])> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CoreError::format(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if pos >= bytes.len() {
        return Err(CoreError::format(path, "missing pixel data"));
    }
    pos += 1;
    let num = |i: usize| {
        tokens[i]
            .parse::<usize>()
            .map_err(|_| CoreError::format(path, format!("bad header field {:?}", tokens[i])))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if width == 0 || height == 0 || maxval != 255 {
        return Err(CoreError::format(path, "unsupported dimensions or maxval"));
    }
    Ok((tokens[0].clone(), width, height, &bytes[pos..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_exact_for_quantized_tensors() {
        let t = Tensor::from_fn(&[3, 2, 3], |i| (i * 13 % 256) as f64 / 255.0);
        let img = RgbImage::from_tensor(&t).unwrap();
        let back = RgbImage::from_ppm(&img.to_ppm(), "mem").unwrap();
        assert_eq!(back.to_tensor(), t);
    }

    #[test]
    fn pgm_header_and_roundtrip() {
        let m = SegMask::new(2, 2, vec![0, 1, 2, 255]).unwrap();
        let bytes = mask_to_pgm(&m);
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(mask_from_pgm(&bytes, "mem").unwrap(), m);
        assert!(mask_from_pgm(b"P6\n2 2\n255\n0000", "mem").is_err());
    }

    #[test]
    fn header_comments_skipped() {
        let img = RgbImage::from_ppm(b"P6\n# hi\n1 1\n255\n\x01\x02\x03", "mem").unwrap();
        assert_eq!(img.get(0, 0), [1, 2, 3]);
    }
}
