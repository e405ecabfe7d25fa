use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use super::DistillError;
use crate::frequency::{dft2, idft2, FrequencyMask, Spectrum};
use crate::priors::Latent;

/// How a band-limited noise residual is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `iDFT(M ⊙ (DFT ε − DFT ε_pred))`.
    #[default]
    Filtered,
    /// `iDFT((M|DFT ε| − M|DFT ε_pred|)·e^{i·arg DFT ε_pred})`.
    Amplitude,
}

/// The noise residual `ε − ε_pred` restricted to the band selected by `mask`.
pub fn sds_residual(
    eps: &Latent,
    eps_pred: &Latent,
    mask: &FrequencyMask,
    mode: ResidualMode,
) -> Result<Latent, DistillError> {
    eps.check_shape(eps_pred)?;
    if mask.width() != eps.width() || mask.height() != eps.height() {
        return Err(DistillError::ShapeMismatch(format!(
            "mask {}x{} vs latent {}x{}",
            mask.width(),
            mask.height(),
            eps.width(),
            eps.height()
        )));
    }
    match mode {
        ResidualMode::Filtered => {
            let diff = eps.zip_map(eps_pred, |a, b| a - b);
            if mask.is_all_pass() {
                return Ok(diff);
            }
            let spec = dft2(diff.image()).masked(mask)?;
            Ok(Latent::new(idft2(&spec)?))
        }
        ResidualMode::Amplitude => {
            let fe = dft2(eps.image());
            let fp = dft2(eps_pred.image());
            let plane = fe.width() * fe.height();
            let mut out = Spectrum::zeros(fe.width(), fe.height(), fe.channels());
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let m = mask.weights()[i % plane];
                let a = m * fe.data()[i].norm() - m * fp.data()[i].norm();
                *v = Complex::from_polar(a, fp.data()[i].arg());
            }
            Ok(Latent::new(idft2(&out)?))
        }
    }
}
