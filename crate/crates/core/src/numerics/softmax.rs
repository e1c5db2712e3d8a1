use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Numerically stabilized softmax of a single row, in place.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let Some(max) = row.iter().copied().reduce(F::max) else {
        return;
    };
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows<F: Scalar>(m: &Tensor<F>) -> Result<Tensor<F>> {
    let (_, cols) = m.dims2()?;
    m.ensure_finite("softmax input")?;
    let mut out = m.clone();
    if cols == 0 {
        return Err(Error::shape("softmax over zero columns"));
    }
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_logits_are_uniform() {
        let m = Tensor::<f64>::new(vec![1, 3], vec![4.2, 4.2, 4.2]).unwrap();
        let s = softmax_rows(&m).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_column_is_all_ones() {
        let m = Tensor::new(vec![3, 1], vec![-7.0, 0.0, 12.0]).unwrap();
        assert_eq!(softmax_rows(&m).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn log_two_gap_gives_one_third_two_thirds() {
        let m = Tensor::new(vec![1, 2], vec![0.0, 2f64.ln()]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_matrix() {
        let v = Tensor::<f64>::zeros(vec![4]);
        assert!(matches!(softmax_rows(&v), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in proptest::collection::vec(-50.0f64..50.0, 54)) {
            let data: Vec<f64> = (0..rows * cols).map(|i| seed[i % seed.len()] + i as f64 * 0.01).collect();
            let m = Tensor::new(vec![rows, cols], data).unwrap();
            let s = softmax_rows(&m).unwrap();
            for r in s.data().chunks(cols) {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn monotone_in_each_logit(row in proptest::collection::vec(-50.0f64..50.0, 2..8), bump in 0.0f64..5.0, idx in 0usize..8) {
            let n = row.len();
            let i = idx % n;
            let base = softmax_rows(&Tensor::new(vec![1, n], row.clone()).unwrap()).unwrap();
            let mut raised = row;
            raised[i] += bump;
            let up = softmax_rows(&Tensor::new(vec![1, n], raised).unwrap()).unwrap();
            prop_assert!(up.data()[i] >= base.data()[i] - 1e-15);
        }
    }
}
