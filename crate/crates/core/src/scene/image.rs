//! Float image buffers and PNG I/O.
//!
//! Pixels are stored row-major and channel-interleaved. Values loaded from PNG
//! land in `[0, 1]`; intermediate fields such as residuals or gradient images
//! reuse the same container and may hold any finite value.

use std::path::Path;

use super::SceneError;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, SceneError> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(SceneError::InvalidParameter(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(SceneError::InvalidParameter(format!(
                "buffer of {} values does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SceneError::InvalidParameter(
                "non-finite pixel value".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y, channel)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        let i = self.index(x, y, c);
        self.data[i] = value;
    }

    /// Copies one channel out as a row-major plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn set_plane(&mut self, c: usize, plane: &[f64]) {
        debug_assert_eq!(plane.len(), self.width * self.height);
        for (i, v) in plane.iter().enumerate() {
            self.data[i * self.channels + c] = *v;
        }
    }

    /// Keeps the first `n` channels (e.g. RGBA -> RGB).
    pub fn take_channels(&self, n: usize) -> ImageBuffer {
        assert!(n <= self.channels);
        ImageBuffer::from_fn(self.width, self.height, n, |x, y, c| self.get(x, y, c))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Elementwise combination of two images with the same shape.
    pub fn zip_map(&self, other: &ImageBuffer, f: impl Fn(f64, f64) -> f64) -> ImageBuffer {
        assert!(self.same_shape(other), "image shape mismatch");
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ImageBuffer) -> f64 {
        assert!(self.same_shape(other), "image shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<ImageBuffer, SceneError> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| SceneError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let channels = if img.color().has_alpha() {
            4
        } else if img.color().has_color() {
            3
        } else {
            1
        };
        let (width, height) = (img.width() as usize, img.height() as usize);
        let data: Vec<f64> = match channels {
            4 => img.to_rgba8().into_raw(),
            3 => img.to_rgb8().into_raw(),
            _ => img.to_luma8().into_raw(),
        }
        .into_iter()
        .map(|v| f64::from(v) / 255.0)
        .collect();
        ImageBuffer::from_vec(width, height, channels, data)
    }

    /// Writes an 8-bit PNG, clamping to `[0, 1]`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), SceneError> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            n => {
                return Err(SceneError::InvalidParameter(format!(
                    "cannot encode {n}-channel PNG"
                )))
            }
        };
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color).map_err(
            |e| SceneError::Image {
                path: path.display().to_string(),
                message: e.to_string(),
            },
        )
    }
}

/// An RGB image with a binary foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage {
    image: ImageBuffer,
    mask: ImageBuffer,
}

impl MaskedImage {
    /// Pairs an image with a mask, binarizing the mask at 0.5.
    pub fn new(image: ImageBuffer, mask: ImageBuffer) -> Result<Self, SceneError> {
        if image.channels() != 3 {
            return Err(SceneError::InvalidParameter(
                "masked image must have 3 channels".into(),
            ));
        }
        if mask.channels() != 1 || mask.width() != image.width() || mask.height() != image.height()
        {
            return Err(SceneError::InvalidParameter(
                "mask must be single-channel with the image's dimensions".into(),
            ));
        }
        let mask = mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        Ok(Self { image, mask })
    }

    /// Splits an RGBA image into colour and an alpha-derived mask.
    pub fn from_rgba(rgba: &ImageBuffer) -> Result<Self, SceneError> {
        if rgba.channels() != 4 {
            return Err(SceneError::InvalidParameter(
                "expected a 4-channel image".into(),
            ));
        }
        let image = rgba.take_channels(3);
        let mask =
            ImageBuffer::from_fn(rgba.width(), rgba.height(), 1, |x, y, _| rgba.get(x, y, 3));
        Self::new(image, mask)
    }

    pub fn image(&self) -> &ImageBuffer {
        &self.image
    }

    pub fn mask(&self) -> &ImageBuffer {
        &self.mask
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn masked_pixels(&self) -> usize {
        self.mask.data().iter().filter(|v| **v > 0.5).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(ImageBuffer::from_vec(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(ImageBuffer::from_vec(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageBuffer::from_vec(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn planes_round_trip() {
        let img = ImageBuffer::from_fn(3, 2, 3, |x, y, c| (x + 10 * y + 100 * c) as f64);
        let mut copy = ImageBuffer::new(3, 2, 3);
        for c in 0..3 {
            copy.set_plane(c, &img.plane(c));
        }
        assert_eq!(copy, img);
    }

    #[test]
    fn mask_is_binarized() {
        let image = ImageBuffer::new(2, 1, 3);
        let mask = ImageBuffer::from_vec(2, 1, 1, vec![0.49, 0.51]).unwrap();
        let m = MaskedImage::new(image, mask).unwrap();
        assert_eq!(m.mask().data(), &[0.0, 1.0]);
        assert_eq!(m.masked_pixels(), 1);
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = ImageBuffer::from_fn(4, 3, 4, |x, y, c| ((x + y + c) % 5) as f64 / 4.0);
        img.save_png(&path).unwrap();
        let back = ImageBuffer::load_png(&path).unwrap();
        assert_eq!(back.channels(), 4);
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }
}
