use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Per-token cross-attention maps from one forward pass.
///
/// `maps[i]` is the `height x width` map of prompt position `i`; positions
/// follow the prompt (background first), padding excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack<F> {
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<usize>,
    maps: Vec<Tensor<F>>,
}

impl<F: Scalar> AttentionStack<F> {
    pub fn new(t: usize, tokens: Vec<usize>, maps: Vec<Tensor<F>>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::shape("attention stack without maps"))?;
        let (height, width) = first.dims2()?;
        if maps.len() != tokens.len() {
            return Err(Error::shape(format!(
                "{} maps for {} tokens",
                maps.len(),
                tokens.len()
            )));
        }
        if maps.iter().any(|m| m.shape() != [height, width]) {
            return Err(Error::shape("attention maps differ in size"));
        }
        Ok(Self {
            t,
            height,
            width,
            tokens,
            maps,
        })
    }

    /// Builds a stack from patch-major rows `[patches, stride]`, keeping the first `len` columns.
    pub fn from_patch_rows(
        t: usize,
        tokens: Vec<usize>,
        height: usize,
        width: usize,
        rows: &[F],
        stride: usize,
    ) -> Result<Self> {
        let patches = height * width;
        if rows.len() != patches * stride || tokens.len() > stride {
            return Err(Error::shape("attention rows do not match the grid"));
        }
        let maps = (0..tokens.len())
            .map(|i| Tensor::from_fn(vec![height, width], |p| rows[p * stride + i]))
            .collect();
        Self::new(t, tokens, maps)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn map(&self, i: usize) -> &Tensor<F> {
        &self.maps[i]
    }

    pub fn maps(&self) -> &[Tensor<F>] {
        &self.maps
    }

    pub fn map_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.maps[i]
    }

    pub fn patches(&self) -> usize {
        self.height * self.width
    }

    /// Scores of every token at one patch.
    pub fn patch_scores(&self, p: usize) -> Vec<F> {
        self.maps.iter().map(|m| m.data()[p]).collect()
    }

    /// Largest deviation of a patch's token scores from summing to one.
    pub fn normalization_error(&self) -> F {
        (0..self.patches())
            .map(|p| (self.patch_scores(p).into_iter().sum::<F>() - F::one()).abs())
            .fold(F::zero(), F::max)
    }

    pub fn scores_in_unit_interval(&self) -> bool {
        self.maps
            .iter()
            .all(|m| m.data().iter().all(|&v| v >= F::zero() && v <= F::one()))
    }
}
