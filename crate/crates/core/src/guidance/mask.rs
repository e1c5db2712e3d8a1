use crate::error::{Error, Result};
use crate::scenes::BinaryMask;

/// Feature resolutions of the denoiser relative to the image: full, 1/2, 1/4.
pub const MASK_FACTORS: [usize; 3] = [1, 2, 4];

/// Binary local-control region at the image resolution, plus the grids
/// derived from it for every feature resolution the denoiser uses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControlMask {
    levels: Vec<BinaryMask>,
}

impl ControlMask {
    /// Derives the lower resolutions with the at-least-half block rule.
    pub fn from_image_mask(mask: BinaryMask) -> Result<Self> {
        let mut levels = Vec::with_capacity(MASK_FACTORS.len());
        for f in MASK_FACTORS {
            levels.push(mask.downsample(f)?);
        }
        Ok(Self { levels })
    }

    pub fn all_ones(size: usize) -> Self {
        Self::from_image_mask(BinaryMask::full(size, size)).expect("divisible canvas")
    }

    pub fn all_zeros(size: usize) -> Self {
        Self::from_image_mask(BinaryMask::empty(size, size)).expect("divisible canvas")
    }

    pub fn image(&self) -> &BinaryMask {
        &self.levels[0]
    }

    /// Grid at `1/factor` of the image resolution.
    pub fn at_factor(&self, factor: usize) -> Option<&BinaryMask> {
        MASK_FACTORS
            .iter()
            .position(|&f| f == factor)
            .map(|i| &self.levels[i])
    }

    /// Grid matching a feature map of the given width.
    pub fn at_width(&self, width: usize) -> Result<&BinaryMask> {
        self.levels
            .iter()
            .find(|m| m.width == width)
            .ok_or_else(|| Error::shape(format!("no mask level of width {width}")))
    }

    /// Attention-resolution grid (1/4 of the image).
    pub fn attention(&self) -> &BinaryMask {
        &self.levels[2]
    }

    /// Degenerate masks are accepted by the baselines but not by guidance.
    pub fn is_degenerate(&self) -> bool {
        let a = self.attention();
        a.is_empty() || a.is_full()
    }

    pub fn ensure_usable_for_guidance(&self) -> Result<()> {
        if self.is_degenerate() {
            return Err(Error::Validation(
                "control mask must contain both region and background at attention resolution"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_canvas_is_all_ones_everywhere() {
        let m = ControlMask::all_ones(32);
        for f in MASK_FACTORS {
            assert!(m.at_factor(f).unwrap().is_full());
        }
        assert!(m.is_degenerate());
        assert_eq!(m.attention().width, 8);
    }

    #[test]
    fn adding_pixels_never_removes_low_resolution_cells() {
        let base = BinaryMask::from_fn(32, 32, |x, y| (x * 7 + y * 3) % 5 == 0);
        let grown =
            BinaryMask::from_fn(32, 32, |x, y| (x * 7 + y * 3) % 5 == 0 || (x + y) % 4 == 1);
        let (a, b) = (
            ControlMask::from_image_mask(base).unwrap(),
            ControlMask::from_image_mask(grown).unwrap(),
        );
        for f in MASK_FACTORS {
            assert!(a
                .at_factor(f)
                .unwrap()
                .is_subset_of(b.at_factor(f).unwrap()));
        }
    }
}
