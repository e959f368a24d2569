//! Linear RGB images and their file formats.
//!
//! Linear data travels as portable float maps (PFM, little-endian, rows
//! stored bottom to top). 8-bit PNG is used for previews, encoded with the
//! sRGB transfer curve.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::Rgb;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed PFM: {0}")]
    Pfm(String),
    #[error("image codec error: {0}")]
    Codec(String),
    #[error("unsupported image extension {0:?}")]
    Extension(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearImage {
    width: usize,
    height: usize,
    data: Vec<Rgb>,
}

impl LinearImage {
    /// Black image.
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![Rgb::zeros(); width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, data: Vec<Rgb>) -> Self {
        assert_eq!(data.len(), width * height, "pixel count does not match dimensions");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: Rgb) {
        self.data[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(Rgb) -> Rgb) -> LinearImage {
        LinearImage { width: self.width, height: self.height, data: self.data.iter().map(|p| f(*p)).collect() }
    }

    /// Channels clamped into the displayable `[0, 1]` range.
    pub fn clamp_unit(&self) -> LinearImage {
        self.map(|p| p.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn is_valid_radiance(&self) -> bool {
        self.data.iter().all(|p| p.iter().all(|v| v.is_finite() && *v >= 0.0))
    }

    pub fn flip_horizontal(&self) -> LinearImage {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> LinearImage {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, self.height - 1 - y, self.get(x, y));
            }
        }
        out
    }

    pub fn write_pfm<W: Write>(&self, mut w: W) -> Result<(), ImageError> {
        write!(w, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        let mut buf = Vec::with_capacity(self.data.len() * 12);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for v in self.get(x, y).iter() {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_pfm<R: Read>(r: R) -> Result<LinearImage, ImageError> {
        let mut r = BufReader::new(r);
        let mut tokens = Vec::new();
        // header: "PF", width, height, scale, each whitespace separated
        while tokens.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(ImageError::Pfm("truncated header".into()));
            }
            tokens.extend(line.split_whitespace().map(str::to_owned));
        }
        if tokens[0] != "PF" {
            return Err(ImageError::Pfm(format!("expected color PF, found {:?}", tokens[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| ImageError::Pfm(format!("bad dimension {s:?}")));
        let (width, height) = (parse(&tokens[1])?, parse(&tokens[2])?);
        let scale: f64 = tokens[3].parse().map_err(|_| ImageError::Pfm(format!("bad scale {:?}", tokens[3])))?;
        let little = scale < 0.0;
        let mut body = vec![0u8; width * height * 12];
        r.read_exact(&mut body).map_err(|_| ImageError::Pfm("truncated pixel data".into()))?;
        let mut img = LinearImage::new(width, height);
        for (i, px) in body.chunks_exact(12).enumerate() {
            let f = |j: usize| {
                let b: [u8; 4] = px[j..j + 4].try_into().unwrap();
                (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
            };
            let (x, y) = (i % width, height - 1 - i / width);
            img.set(x, y, Rgb::new(f(0), f(4), f(8)));
        }
        Ok(img)
    }

    /// 8-bit sRGB-encoded pixels, row-major.
    pub fn to_srgb8(&self) -> Vec<u8> {
        self.data.iter().flat_map(|p| p.iter().map(|v| encode_srgb(*v)).collect::<Vec<_>>()).collect()
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_srgb8())
            .ok_or_else(|| ImageError::Codec("buffer size mismatch".into()))?;
        buf.save(path).map_err(|e| ImageError::Codec(e.to_string()))
    }

    /// Reads an 8-bit image; `srgb` selects inverse gamma instead of a plain `/255`.
    pub fn read_png(path: &Path, srgb: bool) -> Result<LinearImage, ImageError> {
        let img = image::open(path).map_err(|e| ImageError::Codec(e.to_string()))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img
            .pixels()
            .map(|p| {
                let c = |v: u8| if srgb { decode_srgb(v as f64 / 255.0) } else { v as f64 / 255.0 };
                Rgb::new(c(p[0]), c(p[1]), c(p[2]))
            })
            .collect();
        Ok(LinearImage::from_pixels(w, h, data))
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        match extension(path).as_str() {
            "pfm" => self.write_pfm(std::io::BufWriter::new(std::fs::File::create(path)?)),
            "png" => self.write_png(path),
            other => Err(ImageError::Extension(other.to_owned())),
        }
    }

    pub fn load(path: &Path, srgb_input: bool) -> Result<LinearImage, ImageError> {
        match extension(path).as_str() {
            "pfm" => Self::read_pfm(std::fs::File::open(path)?),
            "png" => Self::read_png(path, srgb_input),
            other => Err(ImageError::Extension(other.to_owned())),
        }
    }
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

pub fn encode_srgb(linear: f64) -> u8 {
    let v = linear.clamp(0.0, 1.0);
    let s = if v <= 0.003_130_8 { 12.92 * v } else { 1.055 * v.powf(1.0 / 2.4) - 0.055 };
    (s * 255.0).round() as u8
}

pub fn decode_srgb(encoded: f64) -> f64 {
    if encoded <= 0.040_45 {
        encoded / 12.92
    } else {
        ((encoded + 0.055) / 1.055).powf(2.4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_keeps_orientation() {
        let mut img = LinearImage::new(3, 2);
        img.set(0, 0, Rgb::new(1.0, 0.5, 0.25));
        img.set(2, 1, Rgb::new(4.0, 0.0, 0.125));
        let mut buf = Vec::new();
        img.write_pfm(&mut buf).unwrap();
        assert!(buf.starts_with(b"PF\n3 2\n-1.0\n"));
        // bottom row first: pixel (0, 1) then (1, 1) then (2, 1)
        let body = &buf[12..];
        assert_eq!(f32::from_le_bytes(body[24..28].try_into().unwrap()), 4.0);
        assert_eq!(LinearImage::read_pfm(buf.as_slice()).unwrap(), img);
    }

    #[test]
    fn srgb_curve_inverts() {
        for i in 0..=255u8 {
            let lin = decode_srgb(i as f64 / 255.0);
            assert_eq!(encode_srgb(lin), i);
        }
    }

    #[test]
    fn flips_are_involutions() {
        let img = LinearImage::from_pixels(3, 2, (0..6).map(|i| Rgb::repeat(i as f64)).collect());
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
        assert_eq!(img.flip_horizontal().get(0, 0), Rgb::repeat(2.0));
    }
}
