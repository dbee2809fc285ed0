//! Closed-form pixel statistics that recover sprite identity attributes.

use crate::dataset::{BodyShape, HUE_BINS};
use crate::image::{rgb_to_hsv, ImageRGB, IMAGE_SIZE};

/// Classification of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeResult {
    /// `None` when too few strongly coloured pixels are present.
    pub hue_bin: Option<u8>,
    pub shape: Option<BodyShape>,
    pub foreground_pixels: usize,
}

/// Foreground-mask hue histogram plus a bounding-box fill-ratio shape guess.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityProbe {
    pub min_saturation: f32,
    pub min_value: f32,
    pub min_pixels: usize,
}

impl Default for IdentityProbe {
    fn default() -> Self {
        IdentityProbe {
            min_saturation: 0.35,
            min_value: 0.4,
            min_pixels: 6,
        }
    }
}

pub fn hue_bin(hue_degrees: f32) -> u8 {
    let width = 360.0 / HUE_BINS as f32;
    ((hue_degrees / width).round() as usize % HUE_BINS) as u8
}

impl IdentityProbe {
    pub fn classify(&self, image: &ImageRGB) -> ProbeResult {
        let mut hist = [0usize; HUE_BINS];
        let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
        let mut count = 0;
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let (h, s, v) = rgb_to_hsv(image.pixel(y, x));
                if s > self.min_saturation && v > self.min_value {
                    hist[hue_bin(h) as usize] += 1;
                    count += 1;
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
            }
        }
        if count < self.min_pixels {
            return ProbeResult {
                hue_bin: None,
                shape: None,
                foreground_pixels: count,
            };
        }
        let best = (0..HUE_BINS).max_by_key(|&b| (hist[b], HUE_BINS - b)).unwrap_or(0);
        let best_count = hist[best];
        let area = (x1 - x0 + 1) * (y1 - y0 + 1);
        let fill = best_count as f32 / area as f32;
        let shape = if fill >= 0.85 {
            BodyShape::Square
        } else if fill >= 0.62 {
            BodyShape::Circle
        } else {
            BodyShape::Triangle
        };
        ProbeResult {
            hue_bin: Some(best as u8),
            shape: Some(shape),
            foreground_pixels: count,
        }
    }
}
