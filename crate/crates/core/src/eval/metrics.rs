use crate::error::{Error, Result};
use crate::guidance::ControlMask;
use crate::scenes::{morphological_gradient, BinaryMask, ConditionImage, GrayImage};

use super::detect::{detect_shapes, Detection};

fn same_grid(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "masks are {}x{} and {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `|a & b| / |a | b|`, zero when both are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    same_grid(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

fn restrict(m: &BinaryMask, region: &BinaryMask) -> BinaryMask {
    BinaryMask {
        width: m.width,
        height: m.height,
        bits: m
            .bits
            .iter()
            .zip(&region.bits)
            .map(|(&a, &b)| a && b)
            .collect(),
    }
}

fn touches(d: &Detection, region: &BinaryMask) -> bool {
    d.mask.bits.iter().zip(&region.bits).any(|(&a, &b)| a && b)
}

/// Edge agreement from precomputed detections; see [`condition_edge_agreement`].
pub fn edge_agreement_from(
    detections: &[Detection],
    condition: &ConditionImage,
    mask: &ControlMask,
) -> Result<Option<f64>> {
    let region = mask.image();
    same_grid(&condition.edges, region)?;
    let target = restrict(&condition.edges, region);
    if target.is_empty() {
        return Ok(None);
    }
    let mut shapes = BinaryMask::empty(region.width, region.height);
    for d in detections.iter().filter(|d| touches(d, region)) {
        same_grid(&d.mask, region)?;
        shapes = shapes.union(&d.mask)?;
    }
    let edges = restrict(&morphological_gradient(&shapes), region);
    iou(&edges, &target).map(Some)
}

/// IoU between the edges of the shapes detected inside the control region
/// and the condition edges, both restricted to the region.
///
/// `None` when the condition has no edges inside the region.
pub fn condition_edge_agreement(
    image: &GrayImage,
    condition: &ConditionImage,
    mask: &ControlMask,
) -> Result<Option<f64>> {
    edge_agreement_from(&detect_shapes(image), condition, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_counts() {
        let a = BinaryMask::from_fn(4, 1, |x, _| x < 2);
        let b = BinaryMask::from_fn(4, 1, |x, _| x == 1 || x == 2);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a.complement()).unwrap(), 0.0);
        assert_eq!(
            iou(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2)).unwrap(),
            0.0
        );
        assert!(matches!(
            iou(&a, &BinaryMask::empty(2, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn blank_generation_scores_zero() {
        let sq = BinaryMask::from_fn(32, 32, |x, y| {
            (10..20).contains(&x) && (10..20).contains(&y)
        });
        let cond = ConditionImage::from_edges(morphological_gradient(&sq));
        let mask = ControlMask::from_image_mask(sq.dilate(2)).unwrap();
        let v = condition_edge_agreement(&GrayImage::new(32, 32, 0), &cond, &mask).unwrap();
        assert_eq!(v, Some(0.0));
        assert_eq!(
            condition_edge_agreement(&sq.to_image(), &cond, &mask).unwrap(),
            Some(1.0)
        );
        let elsewhere =
            ControlMask::from_image_mask(BinaryMask::from_fn(32, 32, |x, _| x > 28)).unwrap();
        assert_eq!(
            condition_edge_agreement(&sq.to_image(), &cond, &elsewhere).unwrap(),
            None
        );
    }
}
