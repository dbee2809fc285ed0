//! Fixed-size RGB images and their PNG encoding.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use cife_tensor::Tensor;

use crate::error::{io_err, CifeError, Result};

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
const PLANE: usize = IMAGE_SIZE * IMAGE_SIZE;

/// A 32×32 RGB image stored channel-major with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGB {
    data: Vec<f32>,
}

impl ImageRGB {
    pub fn filled(rgb: [f32; 3]) -> Self {
        let mut data = vec![0.0; IMAGE_CHANNELS * PLANE];
        for (c, v) in rgb.iter().enumerate() {
            data[c * PLANE..(c + 1) * PLANE].fill(v.clamp(0.0, 1.0));
        }
        ImageRGB { data }
    }

    /// Builds from a `[3, 32, 32]` tensor, clamping values into `[0, 1]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        if t.shape() != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(CifeError::Tensor(cife_tensor::TensorError::Shape {
                op: "image",
                detail: format!("expected [3, 32, 32], got {:?}", t.shape()),
            }));
        }
        Ok(ImageRGB {
            data: t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new([IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], self.data.clone())
            .expect("image buffer has fixed length")
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = y * IMAGE_SIZE + x;
        [self.data[i], self.data[PLANE + i], self.data[2 * PLANE + i]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = y * IMAGE_SIZE + x;
        for (c, v) in rgb.iter().enumerate() {
            self.data[c * PLANE + i] = v.clamp(0.0, 1.0);
        }
    }

    /// Rounds every value to the nearest 8-bit level so PNG round-trips are exact.
    pub fn quantized(&self) -> Self {
        ImageRGB {
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IMAGE_CHANNELS * PLANE);
        for i in 0..PLANE {
            for c in 0..IMAGE_CHANNELS {
                out.push(to_u8(self.data[c * PLANE + i]));
            }
        }
        out
    }

    pub fn from_rgb8(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != IMAGE_CHANNELS * PLANE {
            return Err(CifeError::Dataset(format!("expected {} RGB bytes, got {}", 3 * PLANE, bytes.len())));
        }
        let mut data = vec![0.0; IMAGE_CHANNELS * PLANE];
        for i in 0..PLANE {
            for c in 0..IMAGE_CHANNELS {
                data[c * PLANE + i] = bytes[i * 3 + c] as f32 / 255.0;
            }
        }
        Ok(ImageRGB { data })
    }

    /// Mean over pixels of the Euclidean distance between RGB vectors.
    pub fn mean_pixel_distance(&self, other: &ImageRGB) -> f64 {
        let mut total = 0.0;
        for i in 0..PLANE {
            let d2: f64 = (0..IMAGE_CHANNELS)
                .map(|c| {
                    let d = (self.data[c * PLANE + i] - other.data[c * PLANE + i]) as f64;
                    d * d
                })
                .sum();
            total += d2.sqrt();
        }
        total / PLANE as f64
    }

    pub fn mse(&self, other: &ImageRGB) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Peak signal-to-noise ratio in dB for unit-range images.
    pub fn psnr(&self, other: &ImageRGB) -> f64 {
        let mse = self.mse(other);
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }

    pub fn encode_png(&self) -> Vec<u8> {
        encode_png_rgb(IMAGE_SIZE as u32, IMAGE_SIZE as u32, &self.to_rgb8())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let (w, h, rgb) = decode_png_rgb(bytes)?;
        if (w, h) != (IMAGE_SIZE as u32, IMAGE_SIZE as u32) {
            return Err(CifeError::Dataset(format!("expected a 32x32 image, got {w}x{h}")));
        }
        Self::from_rgb8(&rgb)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode_png())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::decode_png(&bytes).map_err(|e| CifeError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes 8-bit RGB with fixed compression settings so output bytes are stable.
pub fn encode_png_rgb(width: u32, height: u32, rgb: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::NoFilter);
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(rgb).expect("in-memory png body");
    }
    out
}

fn decode_png_rgb(bytes: &[u8]) -> Result<(u32, u32, Vec<u8>)> {
    let bad = |e: png::DecodingError| CifeError::Dataset(format!("png: {e}"));
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(bad)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| CifeError::Dataset("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    buf.truncate(info.buffer_size());
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(CifeError::Dataset("png: unexpanded palette".into())),
    };
    Ok((info.width, info.height, rgb))
}

/// Lays images out in a grid with a one-pixel gap.
pub fn contact_sheet(images: &[ImageRGB], columns: usize) -> Vec<u8> {
    let columns = columns.max(1);
    let rows = images.len().div_ceil(columns).max(1);
    let cell = IMAGE_SIZE + 1;
    let (w, h) = (columns * cell + 1, rows * cell + 1);
    let mut rgb = vec![255u8; w * h * 3];
    for (k, img) in images.iter().enumerate() {
        let (oy, ox) = (1 + (k / columns) * cell, 1 + (k % columns) * cell);
        let px = img.to_rgb8();
        for y in 0..IMAGE_SIZE {
            let dst = ((oy + y) * w + ox) * 3;
            rgb[dst..dst + IMAGE_SIZE * 3].copy_from_slice(&px[y * IMAGE_SIZE * 3..(y + 1) * IMAGE_SIZE * 3]);
        }
    }
    encode_png_rgb(w as u32, h as u32, &rgb)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h.rem_euclid(360.0), s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_after_quantization() {
        let mut img = ImageRGB::filled([0.2, 0.5, 0.9]);
        img.set_pixel(3, 7, [1.0, 0.0, 0.33]);
        let q = img.quantized();
        let back = ImageRGB::decode_png(&q.encode_png()).unwrap();
        assert_eq!(back, q);
        assert_eq!(q.encode_png(), back.encode_png());
    }

    #[test]
    fn hsv_round_trip() {
        for k in 0..8 {
            let h = k as f32 * 45.0;
            let rgb = hsv_to_rgb(h, 0.85, 0.9);
            let (h2, s2, v2) = rgb_to_hsv(rgb);
            let dh = (h2 - h).abs().min(360.0 - (h2 - h).abs());
            assert!(dh < 1e-3 && (s2 - 0.85).abs() < 1e-5 && (v2 - 0.9).abs() < 1e-6);
        }
    }
}
