use super::DistillError;
use crate::render::{rasterize_with_gradients, CloudGradients, RenderOptions, RenderOutput};
use crate::scene::{Camera, GaussianCloud, ImageBuffer, MaskedImage};

/// Masked squared error summed over channels and averaged over masked
/// pixels, with its gradient with respect to `render`.
pub fn reference_loss(
    render: &ImageBuffer,
    reference: &MaskedImage,
) -> Result<(f64, ImageBuffer), DistillError> {
    let img = reference.image();
    if render.width() != img.width() || render.height() != img.height() || render.channels() != 3 {
        return Err(DistillError::ShapeMismatch(format!(
            "render {}x{}x{} vs reference {}x{}x3",
            render.width(),
            render.height(),
            render.channels(),
            img.width(),
            img.height()
        )));
    }
    let n = reference.masked_pixels();
    if n == 0 {
        return Err(DistillError::EmptyMask);
    }
    let mask = reference.mask();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = ImageBuffer::new(render.width(), render.height(), 3);
    for y in 0..render.height() {
        for x in 0..render.width() {
            if mask.get(x, y, 0) == 0.0 {
                continue;
            }
            for c in 0..3 {
                let d = render.get(x, y, c) - img.get(x, y, c);
                loss += d * d;
                grad.set(x, y, c, 2.0 * d * inv_n);
            }
        }
    }
    Ok((loss * inv_n, grad))
}

/// Renders at `cam`, evaluates [`reference_loss`] and backpropagates it.
pub fn reference_loss_grad(
    cloud: &GaussianCloud,
    reference: &MaskedImage,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<(f64, CloudGradients, RenderOutput), DistillError> {
    let render = crate::render::rasterize(cloud, cam, opts);
    let (loss, grad) = reference_loss(&render.color, reference)?;
    let (out, grads) = rasterize_with_gradients(cloud, cam, opts, &grad)?;
    Ok((loss, grads, out))
}
