//! Grayscale images: PGM (P5) read/write, PNG read, bilinear sampling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::tensor::Tensor;

/// Row-major grayscale image with intensities nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel coordinates; zero outside.
    ///
    /// Pixel centers sit on integer coordinates, and the four-neighbour
    /// stencil treats missing neighbours as zero.
    pub fn sample_bilinear(&self, p: Point2) -> f32 {
        let fx = p.x.floor();
        let fy = p.y.floor();
        let (tx, ty) = ((p.x - fx) as f32, (p.y - fy) as f32);
        let (x0, y0) = (fx as i64, fy as i64);
        let at = |x: i64, y: i64| -> f32 {
            if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
                0.0
            } else {
                self.data[y as usize * self.width + x as usize]
            }
        };
        let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
        let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Mirror about the vertical axis: `x -> (W - 1) - x`.
    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        for (dst, src) in out
            .data
            .chunks_mut(self.width)
            .zip(self.data.chunks(self.width))
        {
            dst.copy_from_slice(src);
            dst.reverse();
        }
        out
    }

    /// Separable Gaussian blur with zero-flux (clamped) borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let kernel: Vec<f32> = {
            let raw: Vec<f64> = (-radius..=radius)
                .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
                .collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| (v / s) as f32).collect()
        };
        let (w, h) = (self.width as i64, self.height as i64);
        let mut tmp = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xx = (x + k as i64 - radius).clamp(0, w - 1);
                    acc += kv * self.data[(y * w + xx) as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let mut out = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yy = (y + k as i64 - radius).clamp(0, h - 1);
                    acc += kv * tmp[(yy * w + x) as usize];
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        Self {
            width: self.width,
            height: self.height,
            data: out,
        }
    }

    /// Rounds every pixel onto the 8-bit grid so a PGM round trip is exact.
    pub fn quantized(&self) -> Self {
        self.map(|v| to_u8(v) as f32 / 255.0)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn std_dev(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        (self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// `1 x 1 x H x W` tensor view for network input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.data.clone()).expect("image shape")
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm_to<W: Write>(mut out: W, image: &GrayImage) -> Result<()> {
    write!(out, "P5\n{} {}\n255\n", image.width, image.height)?;
    let bytes: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    write_pgm_to(BufWriter::new(File::create(path)?), image)
}

/// Reads an 8-bit binary PGM (P5).
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_pgm(&bytes).map_err(|m| Error::format(path, m))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0usize;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(format!("expected binary PGM (P5), found {magic:?}"));
    }
    let num = |s: String| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(format!("only 8-bit PGM is supported, maxval {maxval}"));
    }
    // exactly one whitespace byte separates header and raster
    let start = pos + 1;
    let need = width * height;
    if bytes.len() < start + need {
        return Err(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(start)
        ));
    }
    let data = bytes[start..start + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Ok(GrayImage {
        width,
        height,
        data,
    })
}

/// Reads an 8-bit PNG, converting color to luma.
pub fn read_png(path: &Path) -> Result<GrayImage> {
    let fail = |m: String| Error::format(path, m);
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| fail(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| fail("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| fail(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let channels = info.color_type.samples();
    let data = px
        .chunks(channels)
        .map(|c| match channels {
            1 | 2 => c[0] as f32 / 255.0,
            _ => (0.299 * c[0] as f32 + 0.587 * c[1] as f32 + 0.114 * c[2] as f32) / 255.0,
        })
        .collect();
    GrayImage::from_vec(w, h, data)
}

/// Dispatches on extension: `.pgm` or `.png`.
pub fn read_image(path: &Path) -> Result<GrayImage> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => read_png(path),
        _ => read_pgm(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_exact_after_quantization() {
        let img = GrayImage::from_vec(3, 2, vec![0.0, 0.1, 0.5, 0.73, 1.0, 0.999]).unwrap().quantized();
        let mut buf = Vec::new();
        write_pgm_to(&mut buf, &img).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(parse_pgm(&buf).unwrap(), img);
    }

    #[test]
    fn pgm_header_comments_and_errors() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = parse_pgm(&bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0]);
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(parse_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn bilinear_hits_pixels_and_interpolates() {
        let img = GrayImage::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(img.sample_bilinear(Point2::new(1.0, 1.0)), 3.0);
        assert_eq!(img.sample_bilinear(Point2::new(0.5, 0.5)), 1.5);
        assert_eq!(img.sample_bilinear(Point2::new(-5.0, 0.0)), 0.0);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = GrayImage::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f = img.flipped_horizontally();
        assert_eq!(f.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(f.flipped_horizontally(), img);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = GrayImage::filled(9, 7, 0.4);
        let b = img.gaussian_blur(1.3);
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
    }
}
