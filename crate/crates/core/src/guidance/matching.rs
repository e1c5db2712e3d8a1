use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionStack;
use crate::scalar::Scalar;
use crate::scenes::BinaryMask;

use super::config::GuidanceConfig;

/// Running state of control-concept matching within one sampling run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptMatchState {
    pub history: Vec<usize>,
    pub frozen: Option<usize>,
}

/// Attention mass of map `i` inside the mask.
pub fn in_mask_mass<F: Scalar>(attn: &AttentionStack<F>, mask: &BinaryMask, i: usize) -> F {
    attn.map(i)
        .data()
        .iter()
        .zip(&mask.bits)
        .filter(|(_, &b)| b)
        .map(|(&v, _)| v)
        .sum()
}

/// Candidate with the largest in-mask mass; the lowest position wins ties.
pub fn select_by_mass<F: Scalar>(
    attn: &AttentionStack<F>,
    mask: &BinaryMask,
    candidates: &[usize],
) -> Result<usize> {
    let mut best: Option<(usize, F)> = None;
    for &i in candidates {
        if i >= attn.len() {
            return Err(Error::Config(format!(
                "object token {i} outside attention stack of {}",
                attn.len()
            )));
        }
        let m = in_mask_mass(attn, mask, i);
        match best {
            Some((b, v)) if m < v || (m == v && b < i) => {}
            _ => best = Some((i, m)),
        }
    }
    best.map(|b| b.0)
        .ok_or_else(|| Error::Config("object token set is empty".into()))
}

/// Most frequent entry; the lowest value wins ties.
pub fn count_max(history: &[usize]) -> Option<usize> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &h in history {
        match counts.iter_mut().find(|(v, _)| *v == h) {
            Some((_, c)) => *c += 1,
            None => counts.push((h, 1)),
        }
    }
    counts
        .into_iter()
        .min_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)))
        .map(|(v, _)| v)
}

/// Selects the control concept for timestep `t` of a `total`-step run.
///
/// Early steps vote by in-mask attention mass; the first later step freezes
/// the majority vote, which is returned for every remaining step.
pub fn match_control_concept<F: Scalar>(
    attn: &AttentionStack<F>,
    mask: &BinaryMask,
    t: usize,
    total: usize,
    config: &GuidanceConfig,
    candidates: &[usize],
    state: &mut ConceptMatchState,
) -> Result<usize> {
    if mask.width != attn.width || mask.height != attn.height {
        return Err(Error::shape(format!(
            "{}x{} mask for {}x{} attention",
            mask.width, mask.height, attn.width, attn.height
        )));
    }
    if config.collects_votes(t, total) {
        if state.frozen.is_some() {
            return Err(Error::Usage(format!(
                "vote requested at t={t} after the selection was frozen"
            )));
        }
        let pick = select_by_mass(attn, mask, candidates)?;
        state.history.push(pick);
        return Ok(pick);
    }
    if let Some(f) = state.frozen {
        return Ok(f);
    }
    let f = count_max(&state.history).ok_or_else(|| {
        Error::Config(format!(
            "no early steps recorded before t={t}: beta={} leaves nothing above beta*T for T={total}",
            config.beta
        ))
    })?;
    state.frozen = Some(f);
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn stack(maps: &[[f64; 4]]) -> AttentionStack<f64> {
        AttentionStack::new(
            0,
            (0..maps.len()).collect(),
            maps.iter()
                .map(|m| Tensor::new(vec![2, 2], m.to_vec()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn larger_in_mask_sum_wins() {
        // in-mask cells are the top row: 0.5 + 0.3 = 0.8 versus 0.2 + 0.3 = 0.5
        let attn = stack(&[[0.5, 0.3, 0.0, 0.2], [0.2, 0.3, 0.9, 0.0]]);
        let mask = BinaryMask::from_fn(2, 2, |_, y| y == 0);
        assert_eq!(select_by_mass(&attn, &mask, &[0, 1]).unwrap(), 0);
        assert_eq!(select_by_mass(&attn, &mask, &[1]).unwrap(), 1);
        let tie = stack(&[[0.5, 0.0, 0.0, 0.0], [0.0, 0.5, 0.0, 0.0]]);
        assert_eq!(select_by_mass(&tie, &mask, &[1, 0]).unwrap(), 0);
    }

    #[test]
    fn majority_with_low_index_tie_break() {
        assert_eq!(count_max(&[3, 3, 2]), Some(3));
        assert_eq!(count_max(&[4, 2, 4, 2]), Some(2));
        assert_eq!(count_max(&[]), None);
    }

    #[test]
    fn freezes_after_early_phase() {
        let cfg = GuidanceConfig {
            beta: 0.5,
            ..Default::default()
        };
        let mask = BinaryMask::from_fn(2, 2, |x, _| x == 0);
        let a = stack(&[[0.9, 0.0, 0.9, 0.0], [0.1, 1.0, 0.1, 1.0]]);
        let b = stack(&[[0.1, 1.0, 0.1, 1.0], [0.9, 0.0, 0.9, 0.0]]);
        let mut st = ConceptMatchState::default();
        let seq = [&a, &a, &b, &b, &b, &a];
        let mut picks = Vec::new();
        for (k, s) in seq.iter().enumerate() {
            picks.push(match_control_concept(s, &mask, 6 - k, 6, &cfg, &[0, 1], &mut st).unwrap());
        }
        // t-1 > 3 for t = 6, 5 only: votes [0, 0]
        assert_eq!(st.history, vec![0, 0]);
        assert_eq!(picks, vec![0, 0, 0, 0, 0, 0]);
        assert_eq!(st.frozen, Some(0));
    }

    #[test]
    fn empty_history_is_a_configuration_error() {
        let cfg = GuidanceConfig {
            beta: 0.99,
            ..Default::default()
        };
        let a = stack(&[[1.0, 0.0, 0.0, 0.0]]);
        let mask = BinaryMask::from_fn(2, 2, |x, _| x == 0);
        let mut st = ConceptMatchState::default();
        let err = match_control_concept(&a, &mask, 10, 10, &cfg, &[0], &mut st).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
