use crate::error::{Error, Result};
use crate::guidance::ControlMask;

use super::raster::{BinaryMask, GrayImage};

/// Binary edge map used as the structural condition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConditionImage {
    pub edges: BinaryMask,
    /// Indices of the instances whose boundaries contributed.
    pub provenance: Vec<usize>,
}

impl ConditionImage {
    pub fn from_edges(edges: BinaryMask) -> Self {
        Self {
            edges,
            provenance: Vec::new(),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn width(&self) -> usize {
        self.edges.width
    }
}

/// Morphological gradient: the mask minus its 3x3 erosion.
pub fn morphological_gradient(mask: &BinaryMask) -> BinaryMask {
    let inner = mask.erode();
    BinaryMask {
        width: mask.width,
        height: mask.height,
        bits: mask
            .bits
            .iter()
            .zip(&inner.bits)
            .map(|(&m, &e)| m && !e)
            .collect(),
    }
}

/// Edge condition from the union of the selected instance masks.
///
/// Selecting one instance yields a local condition, all of them a global one.
/// An empty selection produces an all-zero, degenerate condition.
pub fn edge_condition(masks: &[BinaryMask], selection: &[usize]) -> Result<ConditionImage> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Validation("no instance masks".into()))?;
    let mut union = BinaryMask::empty(first.width, first.height);
    for &i in selection {
        let m = masks
            .get(i)
            .ok_or_else(|| Error::Validation(format!("instance {i} out of range")))?;
        union = union.union(m)?;
    }
    Ok(ConditionImage {
        edges: morphological_gradient(&union),
        provenance: selection.to_vec(),
    })
}

/// Edge condition of every pixel brighter than the background.
pub fn edge_condition_from_image(image: &GrayImage, background: u8) -> ConditionImage {
    let fg = BinaryMask {
        width: image.width,
        height: image.height,
        bits: image.pixels.iter().map(|&p| p != background).collect(),
    };
    ConditionImage::from_edges(morphological_gradient(&fg))
}

/// Dilates an instance mask and derives its low-resolution grids.
pub fn mask_from_instance(instance: &BinaryMask, dilation: usize) -> Result<ControlMask> {
    if instance.is_empty() {
        return Err(Error::Validation("instance mask is empty".into()));
    }
    ControlMask::from_image_mask(instance.dilate(dilation))
}
