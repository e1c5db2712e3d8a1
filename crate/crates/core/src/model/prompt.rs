use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::vocab::{self, BACKGROUND, PAD, VOCAB_SIZE};
use super::weights::DenoiserWeights;

/// Prompt positions as seen by cross-attention: the background token first,
/// then the words. Padding up to the model's maximum length is implicit.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPrompt<F> {
    pub tokens: Vec<usize>,
    /// One row per position, taken from the model's embedding table.
    pub embeddings: Tensor<F>,
}

impl<F: Scalar> TokenPrompt<F> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Position of the first occurrence of `token`.
    pub fn position(&self, token: usize) -> Option<usize> {
        self.tokens.iter().position(|&t| t == token)
    }

    /// Ids padded to `max_len`.
    pub fn padded(&self, max_len: usize) -> Vec<usize> {
        let mut ids = self.tokens.clone();
        ids.resize(max_len, PAD);
        ids
    }

    pub fn words(&self) -> Vec<&'static str> {
        self.tokens.iter().filter_map(|&t| vocab::word(t)).collect()
    }
}

/// Checks word ids and prepends the background position.
pub fn prompt_positions(words: &[usize], max_len: usize) -> Result<Vec<usize>> {
    for &id in words {
        if id >= VOCAB_SIZE {
            return Err(Error::Vocabulary {
                id,
                size: VOCAB_SIZE,
            });
        }
        if id == PAD || id == BACKGROUND {
            return Err(Error::Validation(format!(
                "token {id} is reserved and cannot appear in a prompt"
            )));
        }
    }
    if words.len() + 1 > max_len {
        return Err(Error::Validation(format!(
            "prompt of {} words exceeds the maximum of {}",
            words.len(),
            max_len - 1
        )));
    }
    let mut ids = Vec::with_capacity(words.len() + 1);
    ids.push(BACKGROUND);
    ids.extend_from_slice(words);
    Ok(ids)
}

/// Looks up the embeddings of a word-id prompt. An empty prompt is background only.
pub fn embed_prompt<F: Scalar>(
    weights: &DenoiserWeights<F>,
    words: &[usize],
) -> Result<TokenPrompt<F>> {
    let tokens = prompt_positions(words, weights.arch.max_tokens)?;
    let table = weights.get("token_embedding");
    let e = table.shape()[1];
    let mut data = Vec::with_capacity(tokens.len() * e);
    for &t in &tokens {
        data.extend_from_slice(&table.data()[t * e..(t + 1) * e]);
    }
    Ok(TokenPrompt {
        embeddings: Tensor::new(vec![tokens.len(), e], data)?,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{token_for, ArchConfig};
    use crate::scenes::ShapeKind;

    #[test]
    fn empty_prompt_is_background_only() {
        let w = DenoiserWeights::<f64>::init(&ArchConfig::default(), 1).unwrap();
        let p = embed_prompt(&w, &[]).unwrap();
        assert_eq!(p.tokens, vec![BACKGROUND]);
        assert_eq!(p.padded(4), vec![BACKGROUND, PAD, PAD, PAD]);
    }

    #[test]
    fn invalid_ids_rejected() {
        let w = DenoiserWeights::<f64>::init(&ArchConfig::default(), 1).unwrap();
        assert!(matches!(
            embed_prompt(&w, &[99]),
            Err(Error::Vocabulary { id: 99, .. })
        ));
        assert!(embed_prompt(&w, &[PAD]).is_err());
        let c = token_for(ShapeKind::Circle);
        assert!(embed_prompt(&w, &[c; 8]).is_err());
        let a = embed_prompt(&w, &[c]).unwrap();
        let b = embed_prompt(&w, &[c]).unwrap();
        assert_eq!(a, b);
    }
}
