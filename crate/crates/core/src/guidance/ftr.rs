use crate::error::{Error, Result};
use crate::model::AttentionStack;
use crate::scalar::Scalar;

/// Suppression factor of every token at one patch.
///
/// Among `candidates` (every token when `None`), the first token with the
/// highest score keeps factor 1 and the others get `gamma`. Tokens outside
/// the candidate set are left alone.
pub fn ftr_factors<F: Scalar>(scores: &[F], candidates: Option<&[usize]>, gamma: F) -> Vec<F> {
    let mut factors = vec![F::one(); scores.len()];
    let all: Vec<usize>;
    let cand = match candidates {
        Some(c) => c,
        None => {
            all = (0..scores.len()).collect();
            &all
        }
    };
    let mut best: Option<usize> = None;
    for &i in cand {
        if i >= scores.len() {
            continue;
        }
        match best {
            Some(b) if scores[i] < scores[b] || (scores[i] == scores[b] && b < i) => {}
            _ => best = Some(i),
        }
    }
    for &i in cand {
        if i < scores.len() && Some(i) != best {
            factors[i] = gamma;
        }
    }
    factors
}

/// Scales every non-maximal token score at each patch by `gamma`.
/// No renormalization follows.
pub fn focused_token_response<F: Scalar>(
    attn: &AttentionStack<F>,
    gamma: F,
    candidates: Option<&[usize]>,
) -> Result<AttentionStack<F>> {
    if !(gamma >= F::zero() && gamma <= F::one()) {
        return Err(Error::param(format!("gamma {gamma} outside [0, 1]")));
    }
    let mut out = attn.clone();
    for p in 0..attn.patches() {
        let f = ftr_factors(&attn.patch_scores(p), candidates, gamma);
        for (i, k) in f.into_iter().enumerate() {
            let v = &mut out.map_mut(i).data_mut()[p];
            *v *= k;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;

    fn stack(cols: &[Vec<f64>]) -> AttentionStack<f64> {
        let patches = cols[0].len();
        AttentionStack::new(
            0,
            (0..cols.len()).collect(),
            cols.iter()
                .map(|c| Tensor::new(vec![1, patches], c.clone()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn hand_evaluated_patch() {
        let out = focused_token_response(&stack(&[vec![0.7], vec![0.5]]), 0.1, None).unwrap();
        assert_eq!(out.patch_scores(0), vec![0.7, 0.5 * 0.1]);
    }

    #[test]
    fn ties_keep_only_the_lowest_index() {
        assert_eq!(
            ftr_factors(&[0.4, 0.4, 0.2], None, 0.5),
            vec![1.0, 0.5, 0.5]
        );
        assert_eq!(
            ftr_factors(&[0.9, 0.3, 0.1], Some(&[1, 2]), 0.5),
            vec![1.0, 1.0, 0.5]
        );
    }

    #[test]
    fn identity_cases() {
        let s = stack(&[vec![0.3, 0.6], vec![0.7, 0.4]]);
        assert_eq!(focused_token_response(&s, 1.0, None).unwrap(), s);
        let single = stack(&[vec![1.0, 1.0, 1.0]]);
        assert_eq!(focused_token_response(&single, 0.0, None).unwrap(), single);
        assert!(focused_token_response(&s, 1.5, None).is_err());
    }

    proptest! {
        #[test]
        fn max_preserved_and_twice_equals_gamma_squared(
            cols in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..5),
            gamma in 0.0f64..1.0,
        ) {
            let s = stack(&cols);
            let once = focused_token_response(&s, gamma, None).unwrap();
            let twice = focused_token_response(&once, gamma, None).unwrap();
            let sq = focused_token_response(&s, gamma * gamma, None).unwrap();
            for p in 0..s.patches() {
                let before = s.patch_scores(p);
                let after = once.patch_scores(p);
                let arg = |v: &[f64]| {
                    let m = v.iter().cloned().fold(f64::MIN, f64::max);
                    (v.iter().position(|&x| x == m).unwrap(), m)
                };
                let (ib, mb) = arg(&before);
                prop_assert_eq!(after[ib], mb);
                if gamma > 0.0 {
                    prop_assert_eq!(arg(&after), (ib, mb));
                }
                for (a, b) in twice.patch_scores(p).iter().zip(sq.patch_scores(p)) {
                    prop_assert!((a - b).abs() <= 1e-15);
                }
            }
        }
    }
}
