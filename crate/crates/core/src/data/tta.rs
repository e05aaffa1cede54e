//! Flip test-time augmentation.

use crate::error::Result;
use crate::network::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::augment::{hflip_planes, vflip_planes};

/// Reverses the last (`horizontal`) or second-to-last axis of a rank-4 tensor.
pub fn flip<T: Scalar>(x: &Tensor<T>, horizontal: bool) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4("flip")?;
    let data = if horizontal {
        hflip_planes(x.data(), b * c, h, w)
    } else {
        vflip_planes(x.data(), b * c, h, w)
    };
    Tensor::from_vec(x.shape(), data)
}

/// Mean of the de-flipped eval-mode logits over the identity, horizontal,
/// vertical and combined flips, summed in that order.
pub fn tta_flip_infer<T: Scalar>(model: &mut Model<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let plain = model.predict(image)?;
    let h = flip(&model.predict(&flip(image, true)?)?, true)?;
    let v = flip(&model.predict(&flip(image, false)?)?, false)?;
    let hv_in = flip(&flip(image, true)?, false)?;
    let hv = flip(&flip(&model.predict(&hv_in)?, false)?, true)?;
    let quarter = T::from_f64_lossy(0.25);
    let sum = plain.zip_map(&h, |a, b| a + b)?;
    let sum = sum.zip_map(&v, |a, b| a + b)?;
    let sum = sum.zip_map(&hv, |a, b| a + b)?;
    Ok(sum.map(|s| s * quarter))
}
