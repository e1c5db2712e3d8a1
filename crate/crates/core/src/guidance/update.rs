use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sampler::LatentState;
use crate::scalar::Scalar;

/// One gradient step on the latent: `z - alpha * grad`, timestep unchanged.
pub fn update_latent<F: Scalar>(
    state: &LatentState<F>,
    grad: &Tensor<F>,
    alpha: F,
) -> Result<LatentState<F>> {
    state.z.ensure_same_shape(grad, "latent update")?;
    if !(alpha >= F::zero()) || !alpha.is_finite() {
        return Err(Error::param(format!(
            "step size {alpha} must be finite and non-negative"
        )));
    }
    let mut z = state.z.clone();
    if alpha != F::zero() {
        z.axpy(-alpha, grad)?;
    }
    if !z.is_finite() {
        return Err(Error::Guidance {
            step: state.t,
            reason: "latent became non-finite after the update".into(),
        });
    }
    Ok(LatentState { z, t: state.t })
}
