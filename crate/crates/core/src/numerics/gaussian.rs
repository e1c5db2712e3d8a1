use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Normalized, separable-by-construction 2-D Gaussian stencil.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel<F> {
    size: usize,
    sigma: F,
    weights: Vec<F>,
}

impl<F: Scalar> GaussianKernel<F> {
    pub fn new(size: usize, sigma: F) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::param(format!(
                "kernel size must be odd and positive, got {size}"
            )));
        }
        if !(sigma > F::zero()) || !sigma.is_finite() {
            return Err(Error::param(format!(
                "kernel sigma must be positive, got {sigma}"
            )));
        }
        let half = (size / 2) as isize;
        let two_sigma_sq = F::lit(2.0) * sigma * sigma;
        let mut weights = Vec::with_capacity(size * size);
        for dy in -half..=half {
            for dx in -half..=half {
                let r2 = F::from_isize(dx * dx + dy * dy).unwrap();
                weights.push((-r2 / two_sigma_sq).exp());
            }
        }
        let total: F = weights.iter().copied().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self {
            size,
            sigma,
            weights,
        })
    }

    /// Size-1 kernel: smoothing becomes the identity.
    pub fn identity() -> Self {
        Self {
            size: 1,
            sigma: F::one(),
            weights: vec![F::one()],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sigma(&self) -> F {
        self.sigma
    }

    /// Row-major `size x size` weights.
    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    pub(crate) fn check_fits(&self, h: usize, w: usize) -> Result<()> {
        if h < self.size || w < self.size {
            return Err(Error::param(format!(
                "kernel of size {} larger than {h}x{w} map",
                self.size
            )));
        }
        Ok(())
    }

    /// Zero-padded correlation over a raw `h x w` buffer.
    pub(crate) fn apply(&self, src: &[F], h: usize, w: usize, dst: &mut [F]) {
        let half = (self.size / 2) as isize;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = F::zero();
                for ky in -half..=half {
                    let sy = y + ky;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in -half..=half {
                        let sx = x + kx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let wk =
                            self.weights[((ky + half) as usize) * self.size + (kx + half) as usize];
                        acc += wk * src[sy as usize * w + sx as usize];
                    }
                }
                dst[y as usize * w + x as usize] = acc;
            }
        }
    }

    /// Adjoint of [`Self::apply`]: scatters each output gradient back over its stencil.
    pub(crate) fn apply_adjoint(&self, grad_out: &[F], h: usize, w: usize, grad_in: &mut [F]) {
        let half = (self.size / 2) as isize;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let g = grad_out[y as usize * w + x as usize];
                if g == F::zero() {
                    continue;
                }
                for ky in -half..=half {
                    let sy = y + ky;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in -half..=half {
                        let sx = x + kx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let wk =
                            self.weights[((ky + half) as usize) * self.size + (kx + half) as usize];
                        grad_in[sy as usize * w + sx as usize] += wk * g;
                    }
                }
            }
        }
    }
}

/// Smooths a rank-2 map with zero padding at the borders.
pub fn gaussian_smooth<F: Scalar>(
    map: &Tensor<F>,
    kernel: &GaussianKernel<F>,
) -> Result<Tensor<F>> {
    let (h, w) = map.dims2()?;
    kernel.check_fits(h, w)?;
    let mut out = vec![F::zero(); h * w];
    kernel.apply(map.data(), h, w, &mut out);
    Ok(Tensor::from_parts(vec![h, w], out))
}
