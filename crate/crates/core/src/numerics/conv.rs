//! im2col convolution kernels shared by the tape's forward and backward passes.

use crate::scalar::Scalar;

use super::tensor::gemm;

/// Geometry of a square-kernel 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_area(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col<F: Scalar>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let area = oh * ow;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Scalar>(g: &ConvGeom, cols: &[F], dx: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let area = oh * ow;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass for one sample: `out = W * im2col(x) + b`.
pub fn conv_forward<F: Scalar>(g: &ConvGeom, x: &[F], w: &[F], b: Option<&[F]>, out: &mut [F]) {
    let area = g.out_area();
    let mut cols = vec![F::zero(); g.patch() * area];
    im2col(g, x, &mut cols);
    match b {
        Some(b) => {
            for (co, chunk) in out.chunks_mut(area).enumerate() {
                chunk.fill(b[co]);
            }
            gemm(
                false,
                false,
                g.c_out,
                area,
                g.patch(),
                F::one(),
                w,
                &cols,
                F::one(),
                out,
            );
        }
        None => gemm(
            false,
            false,
            g.c_out,
            area,
            g.patch(),
            F::one(),
            w,
            &cols,
            F::zero(),
            out,
        ),
    }
}

/// Accumulates the weight (and bias) gradient contributed by one sample.
pub fn conv_backward_weights<F: Scalar>(
    g: &ConvGeom,
    x: &[F],
    dout: &[F],
    dw: &mut [F],
    db: Option<&mut [F]>,
) {
    let area = g.out_area();
    let mut cols = vec![F::zero(); g.patch() * area];
    im2col(g, x, &mut cols);
    gemm(
        false,
        true,
        g.c_out,
        g.patch(),
        area,
        F::one(),
        dout,
        &cols,
        F::one(),
        dw,
    );
    if let Some(db) = db {
        for (co, chunk) in dout.chunks(area).enumerate() {
            db[co] += chunk.iter().copied().sum::<F>();
        }
    }
}

/// Accumulates the input gradient for one sample.
pub fn conv_backward_input<F: Scalar>(g: &ConvGeom, w: &[F], dout: &[F], dx: &mut [F]) {
    let area = g.out_area();
    let mut cols = vec![F::zero(); g.patch() * area];
    gemm(
        true,
        false,
        g.patch(),
        area,
        g.c_out,
        F::one(),
        w,
        dout,
        F::zero(),
        &mut cols,
    );
    col2im(g, &cols, dx);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += w[((co * g.c_in + ci) * g.k + ky) * g.k + kx]
                                    * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_loop() {
        for &(stride, k, pad) in &[(1, 3, 1), (2, 3, 1), (1, 1, 0)] {
            let g = ConvGeom {
                c_in: 3,
                c_out: 4,
                h: 6,
                w: 5,
                k,
                stride,
                pad,
            };
            let x: Vec<f64> = (0..3 * 30).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..4 * 3 * k * k)
                .map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3)
                .collect();
            let b = [0.5, -0.25, 0.0, 1.0];
            let mut out = vec![0.0; 4 * g.out_h() * g.out_w()];
            conv_forward(&g, &x, &w, Some(&b), &mut out);
            let want = naive(&g, &x, &w, &b);
            for (a, e) in out.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_gradient_is_adjoint_of_forward() {
        let g = ConvGeom {
            c_in: 2,
            c_out: 3,
            h: 5,
            w: 5,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..54).map(|i| (i as f64 * 0.11).cos()).collect();
        let dout: Vec<f64> = (0..3 * g.out_h() * g.out_w())
            .map(|i| (i as f64 * 0.23).sin())
            .collect();
        let mut y = vec![0.0; dout.len()];
        conv_forward(&g, &x, &w, None, &mut y);
        let mut dx = vec![0.0; x.len()];
        conv_backward_input(&g, &w, &dout, &mut dx);
        let lhs: f64 = y.iter().zip(&dout).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
