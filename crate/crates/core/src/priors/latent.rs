use serde::{Deserialize, Serialize};

use super::PriorError;
use crate::scene::ImageBuffer;

/// A latent tensor `z`. Stored channel-last like [`ImageBuffer`]; serialized
/// channel-first (`[C, H, W]`) on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(ImageBuffer);

impl Latent {
    pub fn new(image: ImageBuffer) -> Self {
        Self(image)
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self(ImageBuffer::new(width, height, channels))
    }

    /// Builds a latent from channel-first data.
    pub fn from_chw(shape: [usize; 3], chw: &[f64]) -> Result<Self, PriorError> {
        let [c, h, w] = shape;
        if chw.len() != c * h * w {
            return Err(PriorError::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                chw.len()
            )));
        }
        let mut hwc = vec![0.0; chw.len()];
        for ch in 0..c {
            for i in 0..h * w {
                hwc[i * c + ch] = chw[ch * h * w + i];
            }
        }
        ImageBuffer::from_vec(w, h, c, hwc)
            .map(Self)
            .map_err(|e| PriorError::ShapeMismatch(e.to_string()))
    }

    pub fn to_chw(&self) -> Vec<f64> {
        let (c, hw) = (self.channels(), self.width() * self.height());
        let mut out = vec![0.0; c * hw];
        for (i, v) in self.0.data().iter().enumerate() {
            out[(i % c) * hw + i / c] = *v;
        }
        out
    }

    /// `[C, H, W]`.
    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.height(), self.width()]
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn channels(&self) -> usize {
        self.0.channels()
    }

    pub fn image(&self) -> &ImageBuffer {
        &self.0
    }

    pub fn into_image(self) -> ImageBuffer {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn check_shape(&self, other: &Latent) -> Result<(), PriorError> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(PriorError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Latent {
        Latent(self.0.map(f))
    }

    pub fn zip_map(&self, other: &Latent, f: impl Fn(f64, f64) -> f64) -> Latent {
        Latent(self.0.zip_map(&other.0, f))
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        self.0.max_abs_diff(&other.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// `ε_uncond + scale·(ε_cond − ε_uncond)`.
pub fn cfg_combine(uncond: &Latent, cond: &Latent, scale: f64) -> Result<Latent, PriorError> {
    uncond.check_shape(cond)?;
    Ok(uncond.zip_map(cond, |u, c| u + scale * (c - u)))
}

/// The encoder ℰ from rendered RGB to latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    #[default]
    Identity,
    /// Averages 2×2 pixel blocks; a trailing odd row or column is dropped.
    AreaDownsample2x,
}

impl Encoder {
    pub fn latent_size(&self, width: usize, height: usize) -> (usize, usize) {
        match self {
            Encoder::Identity => (width, height),
            Encoder::AreaDownsample2x => (width / 2, height / 2),
        }
    }

    pub fn encode(&self, img: &ImageBuffer) -> Latent {
        match self {
            Encoder::Identity => Latent(img.clone()),
            Encoder::AreaDownsample2x => {
                let (w, h) = self.latent_size(img.width(), img.height());
                Latent(ImageBuffer::from_fn(w, h, img.channels(), |x, y, c| {
                    0.25 * (img.get(2 * x, 2 * y, c)
                        + img.get(2 * x + 1, 2 * y, c)
                        + img.get(2 * x, 2 * y + 1, c)
                        + img.get(2 * x + 1, 2 * y + 1, c))
                }))
            }
        }
    }

    /// Transposed Jacobian: maps a latent-space gradient to pixel space.
    pub fn adjoint(&self, grad: &Latent, width: usize, height: usize) -> ImageBuffer {
        match self {
            Encoder::Identity => grad.0.clone(),
            Encoder::AreaDownsample2x => {
                ImageBuffer::from_fn(width, height, grad.channels(), |x, y, c| {
                    let (lx, ly) = (x / 2, y / 2);
                    if lx < grad.width() && ly < grad.height() {
                        0.25 * grad.0.get(lx, ly, c)
                    } else {
                        0.0
                    }
                })
            }
        }
    }
}
