use crate::error::{invalid, Result};

/// RGB image, row-major with interleaved channels, values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(invalid(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamped(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// 8-bit quantization used by the PNG encoder.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        m.map(|v| v / n)
    }

    fn check_same_size(&self, other: &Self) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(invalid(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn mse(&self, other: &Self) -> Result<f64> {
        self.check_same_size(other)?;
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_size(other)?;
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }

    /// Peak signal-to-noise ratio in dB for unit peak.
    pub fn psnr(&self, other: &Self) -> Result<f64> {
        Ok(psnr_from_mse(self.mse(other)?))
    }

    /// Frames placed side by side.
    pub fn hstack(frames: &[Image]) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(invalid("no frames to stack"));
        };
        for f in frames {
            first.check_same_size(f)?;
        }
        let (w, h) = (first.width, first.height);
        let mut out = Image::filled(w * frames.len(), h, [0.0; 3]);
        for (k, f) in frames.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    out.set_pixel(k * w + x, y, f.pixel(x, y));
                }
            }
        }
        Ok(out)
    }
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    -10.0 * mse.max(1e-20).log10()
}
