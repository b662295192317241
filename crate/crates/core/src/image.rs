//! Floating-point RGB and optical-density images plus 8-bit PNG I/O.

use std::path::Path;

use crate::error::{CasaError, Result};

/// Intensity floor applied before taking the logarithm.
pub const EPS_PX: f64 = 1e-6;
/// Ceiling for optical density values.
pub const OD_MAX: f64 = 16.0;

/// RGB image with interleaved channels normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
    i0: f64,
}

impl RgbImage {
    /// Builds an image from interleaved `[r, g, b, r, g, b, ...]` data.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_background(width, height, data, 1.0)
    }

    pub fn with_background(width: usize, height: usize, data: Vec<f64>, i0: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(CasaError::InvalidImage(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(CasaError::DimensionMismatch {
                expected: width * height * 3,
                actual: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CasaError::InvalidImage(format!("channel value {bad} outside [0, 1]")));
        }
        if !(i0.is_finite() && i0 > 0.0) {
            return Err(CasaError::InvalidImage(format!("background intensity {i0} must be positive")));
        }
        Ok(Self { width, height, data, i0 })
    }

    /// Uniform image filled with one color.
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data)
    }

    /// Caller guarantees every value already lies in `[0, 1]`.
    pub(crate) fn from_clamped(width: usize, height: usize, data: Vec<f64>, i0: f64) -> Self {
        debug_assert_eq!(data.len(), width * height * 3);
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { width, height, data, i0 }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn i0(&self) -> f64 {
        self.i0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, j: usize) -> [f64; 3] {
        [self.data[3 * j], self.data[3 * j + 1], self.data[3 * j + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Reads an 8-bit PNG, mapping each byte `v` to `v / 255`.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = ::image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self::new(w as usize, h as usize, data)
    }

    /// Quantizes to 8 bits with `round(v * 255)` and writes a PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_rgb8();
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save_with_format(path.as_ref(), ::image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Per-pixel optical densities, interleaved like [`RgbImage`].
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl OdImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(CasaError::InvalidImage(format!("empty image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(CasaError::DimensionMismatch {
                expected: width * height * 3,
                actual: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=OD_MAX).contains(*v)) {
            return Err(CasaError::InvalidImage(format!("optical density {bad} outside [0, {OD_MAX}]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, j: usize) -> [f64; 3] {
        [self.data[3 * j], self.data[3 * j + 1], self.data[3 * j + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }
}

/// `OD = -ln(max(I, EPS_PX) / i0)`, clamped to `[0, OD_MAX]`.
pub fn rgb_to_od(image: &RgbImage) -> OdImage {
    let i0 = image.i0;
    let data = image
        .data
        .iter()
        .map(|&v| (-(v.max(EPS_PX) / i0).ln()).clamp(0.0, OD_MAX))
        .collect();
    OdImage { width: image.width, height: image.height, data }
}

/// `I = i0 * exp(-OD)`, clamped to `[0, 1]`.
pub fn od_to_rgb(od: &OdImage, i0: f64) -> RgbImage {
    let data = od.data.iter().map(|&d| (i0 * (-d).exp()).clamp(0.0, 1.0)).collect();
    RgbImage::from_clamped(od.width, od.height, data, i0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel_has_zero_density() {
        let img = RgbImage::filled(1, 1, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(rgb_to_od(&img).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn inverse_exponential_maps_to_unit_density() {
        let v = (-1.0f64).exp();
        let img = RgbImage::filled(1, 1, [v, v, v]).unwrap();
        for d in rgb_to_od(&img).data() {
            assert!((d - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn black_pixel_hits_intensity_floor() {
        let img = RgbImage::filled(1, 1, [0.0, 0.0, 0.0]).unwrap();
        let expected = (1e6f64).ln().min(OD_MAX);
        for d in rgb_to_od(&img).data() {
            assert!((d - expected).abs() < 1e-12);
            assert!((d - 13.815_510_557_964_274).abs() < 1e-9);
        }
    }

    #[test]
    fn od_to_rgb_examples() {
        let od = OdImage::new(2, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let rgb = od_to_rgb(&od, 1.0);
        assert_eq!(rgb.pixel(0), [1.0, 1.0, 1.0]);
        let e = (-1.0f64).exp();
        assert_eq!(rgb.pixel(1), [e, e, e]);
    }

    #[test]
    fn rejects_out_of_range_channels() {
        assert!(RgbImage::new(1, 1, vec![0.2, 1.2, 0.3]).is_err());
        assert!(RgbImage::new(0, 1, vec![]).is_err());
        assert!(RgbImage::new(2, 1, vec![0.1; 3]).is_err());
        assert!(OdImage::new(1, 1, vec![-0.1, 0.0, 0.0]).is_err());
    }

    #[test]
    fn png_quantization_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let img = RgbImage::new(2, 1, vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6]).unwrap();
        img.save_png(&path).unwrap();
        let back = RgbImage::load_png(&path).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
        assert_eq!(back.to_rgb8(), vec![0, 128, 255, 51, 102, 153]);
    }
}
