use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::scenes::BinaryMask;

/// Blends two noise predictions per pixel: `ctrl * M + plain * (1 - M)`.
///
/// Both predictions are `[N, C, H, W]` with `H x W` matching the mask.
pub fn noise_mask_combine<F: Scalar>(
    eps_ctrl: &Tensor<F>,
    eps_plain: &Tensor<F>,
    mask: &BinaryMask,
) -> Result<Tensor<F>> {
    eps_ctrl.ensure_same_shape(eps_plain, "noise blend")?;
    let s = eps_ctrl.shape();
    if s.len() != 4 || s[2] != mask.height || s[3] != mask.width {
        return Err(Error::shape(format!(
            "{}x{} mask for predictions {s:?}",
            mask.width, mask.height
        )));
    }
    let hw = mask.bits.len();
    let data = eps_ctrl
        .data()
        .iter()
        .zip(eps_plain.data())
        .enumerate()
        .map(|(i, (&c, &p))| if mask.bits[i % hw] { c } else { p })
        .collect();
    Tensor::new(s.to_vec(), data)
}

/// Same blend with a real-valued mask, which must contain only 0 and 1.
pub fn noise_mask_combine_values<F: Scalar>(
    eps_ctrl: &Tensor<F>,
    eps_plain: &Tensor<F>,
    mask: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (h, w) = mask.dims2()?;
    let mut bits = Vec::with_capacity(h * w);
    for &v in mask.data() {
        if v == F::one() {
            bits.push(true);
        } else if v == F::zero() {
            bits.push(false);
        } else {
            return Err(Error::param(format!("mask value {v} is not binary")));
        }
    }
    noise_mask_combine(eps_ctrl, eps_plain, &BinaryMask::from_bits(w, h, bits)?)
}
