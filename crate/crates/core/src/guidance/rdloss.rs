use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionStack;
use crate::numerics::{gaussian_smooth, GaussianKernel, Tensor};
use crate::scalar::Scalar;
use crate::scenes::BinaryMask;

/// Loss of one object token together with the cells that attain its two maxima.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLoss<F> {
    pub token: usize,
    pub loss: F,
    pub inside_max: F,
    pub outside_max: F,
    pub inside_cell: usize,
    pub outside_cell: usize,
    /// Smallest gap between a maximum and the runner-up of the same masked map.
    pub cell_margin: F,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdLoss<F> {
    pub per_token: Vec<TokenLoss<F>>,
    pub l: F,
    /// Index into `per_token` of the first token attaining `l`.
    pub achieving: usize,
    /// Gap between `l` and the next largest token loss (infinite for one token).
    pub token_margin: F,
}

impl<F: Scalar> RdLoss<F> {
    pub fn achieving_token(&self) -> usize {
        self.per_token[self.achieving].token
    }

    /// Smallest of the gaps that make `l` locally smooth.
    pub fn margin(&self) -> F {
        self.token_margin
            .min(self.per_token[self.achieving].cell_margin)
    }
}

/// First maximum in scan order, and the gap to the best other entry.
fn max_with_margin<F: Scalar>(values: impl Iterator<Item = F>) -> (usize, F, F) {
    let (mut idx, mut best, mut second) = (0, F::neg_infinity(), F::neg_infinity());
    for (i, v) in values.enumerate() {
        if v > best {
            second = best;
            best = v;
            idx = i;
        } else if v > second {
            second = v;
        }
    }
    (idx, best, best - second)
}

fn check_mask<F: Scalar>(attn: &AttentionStack<F>, mask: &BinaryMask) -> Result<()> {
    if mask.width != attn.width || mask.height != attn.height {
        return Err(Error::shape(format!(
            "{}x{} mask for {}x{} attention",
            mask.width, mask.height, attn.width, attn.height
        )));
    }
    if mask.is_empty() || mask.is_full() {
        return Err(Error::Guidance {
            step: attn.t,
            reason: "control mask covers none or all of the attention grid".into(),
        });
    }
    Ok(())
}

/// Signed gap between the in-region and out-of-region peaks of each smoothed map.
///
/// The sign is negative for the control token (its peak should sit inside the
/// region) and positive for every other token. `l` is the largest entry.
pub fn rdloss<F: Scalar>(
    attn: &AttentionStack<F>,
    mask: &BinaryMask,
    control: usize,
    candidates: &[usize],
    kernel: &GaussianKernel<F>,
) -> Result<RdLoss<F>> {
    check_mask(attn, mask)?;
    if !candidates.contains(&control) {
        return Err(Error::Config(format!(
            "control token {control} is not an object token"
        )));
    }
    let m: Vec<F> = mask.to_values();
    let mut per_token = Vec::with_capacity(candidates.len());
    for &token in candidates {
        if token >= attn.len() {
            return Err(Error::Config(format!(
                "object token {token} outside attention stack of {}",
                attn.len()
            )));
        }
        let smooth = gaussian_smooth(attn.map(token), kernel)?;
        let s = smooth.data();
        let (inside_cell, inside_max, gi) = max_with_margin(s.iter().zip(&m).map(|(&v, &w)| v * w));
        let (outside_cell, outside_max, go) =
            max_with_margin(s.iter().zip(&m).map(|(&v, &w)| v * (F::one() - w)));
        let sign = if token == control {
            -F::one()
        } else {
            F::one()
        };
        per_token.push(TokenLoss {
            token,
            loss: sign * (inside_max - outside_max),
            inside_max,
            outside_max,
            inside_cell,
            outside_cell,
            cell_margin: gi.min(go),
        });
    }
    let (achieving, l, token_margin) = max_with_margin(per_token.iter().map(|p| p.loss));
    Ok(RdLoss {
        per_token,
        l,
        achieving,
        token_margin,
    })
}

/// Gradient of `l` with respect to every map of the stack, using the
/// subgradient at the recorded maxima.
pub fn rdloss_gradient<F: Scalar>(
    attn: &AttentionStack<F>,
    mask: &BinaryMask,
    loss: &RdLoss<F>,
    control: usize,
    kernel: &GaussianKernel<F>,
) -> Result<Vec<Tensor<F>>> {
    check_mask(attn, mask)?;
    let (h, w) = (attn.height, attn.width);
    let tl = &loss.per_token[loss.achieving];
    let sign = if tl.token == control {
        -F::one()
    } else {
        F::one()
    };
    let mut seed = vec![F::zero(); h * w];
    if mask.bits[tl.inside_cell] {
        seed[tl.inside_cell] += sign;
    }
    if !mask.bits[tl.outside_cell] {
        seed[tl.outside_cell] -= sign;
    }
    let mut g = vec![F::zero(); h * w];
    kernel.apply_adjoint(&seed, h, w, &mut g);
    Ok((0..attn.len())
        .map(|i| {
            if i == tl.token {
                Tensor::from_parts(vec![h, w], g.clone())
            } else {
                Tensor::zeros(vec![h, w])
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(maps: Vec<Vec<f64>>, side: usize) -> AttentionStack<f64> {
        AttentionStack::new(
            5,
            (0..maps.len()).collect(),
            maps.into_iter()
                .map(|m| Tensor::new(vec![side, side], m).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn corner_mask() -> BinaryMask {
        BinaryMask::from_fn(2, 2, |x, y| x == 0 && y == 0)
    }

    #[test]
    fn hand_evaluated_fixture() {
        let k = GaussianKernel::identity();
        let map = vec![0.9, 0.2, 0.1, 0.3];
        let attn = stack(vec![map.clone(), map], 2);
        let r = rdloss(&attn, &corner_mask(), 1, &[0, 1], &k).unwrap();
        assert!((r.per_token[0].loss - 0.6).abs() < 1e-15);
        assert!((r.per_token[1].loss + 0.6).abs() < 1e-15);
        assert_eq!((r.achieving_token(), r.per_token[0].outside_cell), (0, 3));
    }

    #[test]
    fn l_is_the_largest_token_loss() {
        let k = GaussianKernel::identity();
        let attn = stack(
            vec![
                vec![0.9, 0.2, 0.1, 0.3],
                vec![0.5, 0.1, 0.3, 0.2],
                vec![0.0, 0.5, 0.5, 0.0],
            ],
            2,
        );
        let r = rdloss(&attn, &corner_mask(), 2, &[0, 1, 2], &k).unwrap();
        assert!((r.per_token[1].loss - 0.2).abs() < 1e-15);
        assert!((r.l - 0.6).abs() < 1e-15);
        assert_eq!(r.achieving, 0);
    }

    #[test]
    fn control_token_fully_inside_is_negative() {
        let k = GaussianKernel::identity();
        let attn = stack(vec![vec![0.7, 0.0, 0.0, 0.0]], 2);
        let r = rdloss(&attn, &corner_mask(), 0, &[0], &k).unwrap();
        assert_eq!(r.l, -0.7);
    }

    #[test]
    fn degenerate_masks_rejected() {
        let k = GaussianKernel::identity();
        let attn = stack(vec![vec![0.7, 0.1, 0.1, 0.1]], 2);
        for m in [BinaryMask::full(2, 2), BinaryMask::empty(2, 2)] {
            assert!(matches!(
                rdloss(&attn, &m, 0, &[0], &k),
                Err(Error::Guidance { step: 5, .. })
            ));
        }
    }

    #[test]
    fn gradient_matches_difference_quotient_on_smoothed_maps() {
        let k = GaussianKernel::<f64>::new(3, 1.0).unwrap();
        let maps: Vec<Vec<f64>> = (0..2)
            .map(|j| {
                (0..16)
                    .map(|i| ((i * 7 + j * 5) % 11) as f64 / 10.0 + 0.013 * i as f64)
                    .collect()
            })
            .collect();
        let mask = BinaryMask::from_fn(4, 4, |x, y| x < 2 && y < 3);
        let attn = stack(maps.clone(), 4);
        let r = rdloss(&attn, &mask, 1, &[0, 1], &k).unwrap();
        assert!(r.margin() > 1e-3);
        let g = rdloss_gradient(&attn, &mask, &r, 1, &k).unwrap();
        let h = 1e-6;
        for tok in 0..2 {
            for cell in 0..16 {
                let mut up = maps.clone();
                up[tok][cell] += h;
                let mut dn = maps.clone();
                dn[tok][cell] -= h;
                let lu = rdloss(&stack(up, 4), &mask, 1, &[0, 1], &k).unwrap().l;
                let ld = rdloss(&stack(dn, 4), &mask, 1, &[0, 1], &k).unwrap().l;
                let fd = (lu - ld) / (2.0 * h);
                assert!(
                    (fd - g[tok].data()[cell]).abs() < 1e-8,
                    "token {tok} cell {cell}: {fd}"
                );
            }
        }
    }
}
