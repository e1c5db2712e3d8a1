//! Gradients of scalar objectives with respect to the latent.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::{Tape, Var};
use super::Tensor;

/// A scalar objective expressed on a tape: its value, and the cotangent
/// `d objective / d node` to start backpropagation from `node`.
///
/// For an ordinary scalar loss node, `seed` is `[1]`. Objectives whose last
/// step is piecewise (max, argmax selection) are linearized by the caller at
/// an intermediate node instead.
pub struct Objective<F> {
    pub node: Var,
    pub value: F,
    pub seed: Tensor<F>,
}

impl<F: Scalar> Objective<F> {
    pub fn scalar(tape: &Tape<F>, node: Var) -> Result<Self> {
        let v = tape.value(node);
        if v.len() != 1 {
            return Err(Error::shape("objective node is not scalar"));
        }
        Ok(Self {
            node,
            value: v.data()[0],
            seed: Tensor::ones(v.shape().to_vec()),
        })
    }
}

/// Reverse-mode gradient of an objective with respect to `z`.
///
/// `build` receives a fresh tape and the leaf holding `z`, runs the forward
/// computation, and returns the objective.
pub fn grad_wrt_latent<F, B>(z: &Tensor<F>, build: B) -> Result<(F, Tensor<F>)>
where
    F: Scalar,
    B: FnOnce(&mut Tape<F>, Var) -> Result<Objective<F>>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(z.clone(), true);
    let obj = build(&mut tape, leaf)?;
    if !obj.value.is_finite() {
        return Err(Error::Evaluation(format!("objective is {}", obj.value)));
    }
    let mut grads = tape.backward_with_seed(obj.node, obj.seed)?;
    let g = grads
        .take(leaf)
        .unwrap_or_else(|| Tensor::zeros(z.shape().to_vec()));
    g.ensure_finite("latent gradient")?;
    Ok((obj.value, g))
}

/// Central finite differences, `O(dim)` evaluations of `f`.
pub fn central_difference<F, L>(z: &Tensor<F>, h: F, mut f: L) -> Result<Tensor<F>>
where
    F: Scalar,
    L: FnMut(&Tensor<F>) -> Result<F>,
{
    let mut probe = z.clone();
    let mut out = Vec::with_capacity(z.len());
    let two_h = h + h;
    for i in 0..z.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!(
                "objective non-finite near coordinate {i}"
            )));
        }
        out.push((up - down) / two_h);
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, floor)`.
pub fn relative_error<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, floor: F) -> F {
    let scale = b.data().iter().fold(floor, |m, v| m.max(v.abs()));
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(F::zero(), |m, (x, y)| m.max((*x - *y).abs()));
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_squared_norm_has_gradient_z() {
        let z = Tensor::<f64>::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.5, -0.25]).unwrap();
        let (value, g) = grad_wrt_latent(&z, |tape, leaf| {
            let zero = Tensor::zeros(vec![2, 3]);
            // mean((z-0)^2) * n / 2 = 0.5 * |z|^2
            let mse = tape.mse(leaf, zero)?;
            let node = tape.scale(mse, 3.0);
            Objective::scalar(tape, node)
        })
        .unwrap();
        assert!((value - 0.5 * z.norm().powi(2)).abs() < 1e-12);
        for (a, b) in g.data().iter().zip(z.data()) {
            let (a, b): (&f64, &f64) = (a, b);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_form_has_gradient_a() {
        let a = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let z = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (_, g) = grad_wrt_latent(&z, |tape, leaf| {
            let prod = tape.mul_const(leaf, a.clone())?;
            Ok(Objective {
                node: prod,
                value: tape.value(prod).sum(),
                seed: Tensor::ones(vec![4]),
            })
        })
        .unwrap();
        assert_eq!(g, a);
    }

    #[test]
    fn finite_difference_matches_quadratic() {
        let z = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = central_difference(&z, 1e-4, |p: &Tensor<f64>| Ok(0.5 * p.norm().powi(2))).unwrap();
        assert!(relative_error(&g, &z, 1e-12) < 1e-8);
    }

    #[test]
    fn non_finite_objective_is_an_evaluation_error() {
        let z = Tensor::new(vec![1], vec![1.0]).unwrap();
        let err = grad_wrt_latent(&z, |_, leaf| {
            Ok(Objective {
                node: leaf,
                value: f64::NAN,
                seed: Tensor::ones(vec![1]),
            })
        });
        assert!(matches!(err, Err(Error::Evaluation(_))));
    }
}
