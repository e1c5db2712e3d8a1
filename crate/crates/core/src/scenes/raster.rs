use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Maps `[0, 255]` to `[-1, 1]` as a `[1, 1, H, W]` latent.
    pub fn to_latent<F: Scalar>(&self) -> Tensor<F> {
        let scale = F::lit(2.0 / 255.0);
        Tensor::from_fn(vec![1, 1, self.height, self.width], |i| {
            F::from_u8(self.pixels[i]).unwrap() * scale - F::one()
        })
    }

    /// Inverse of [`Self::to_latent`], clamping to the 8-bit range.
    pub fn from_latent<F: Scalar>(t: &Tensor<F>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, 1, h, w] | [h, w] => (*h, *w),
            s => {
                return Err(Error::shape(format!(
                    "cannot view {s:?} as a grayscale image"
                )))
            }
        };
        let pixels = t
            .data()
            .iter()
            .map(|v| {
                let x = (v.to_f64().unwrap() + 1.0) * 127.5;
                x.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }

    pub fn threshold(&self, level: u8) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.pixels.iter().map(|&p| p >= level).collect(),
        }
    }
}

/// Binary raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} mask with {} cells",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Out-of-bounds reads are background.
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.get(x as usize, y as usize)
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a || *b)
                .collect(),
        })
    }

    pub fn intersection(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Chebyshev-radius dilation (square structuring element of side `2r+1`).
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        Self::from_fn(self.width, self.height, |x, y| {
            (-r..=r).any(|dy| (-r..=r).any(|dx| self.get_signed(x as isize + dx, y as isize + dy)))
        })
    }

    /// 3x3 erosion; pixels outside the raster count as background.
    pub fn erode(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            (-1..=1).all(|dy| (-1..=1).all(|dx| self.get_signed(x as isize + dx, y as isize + dy)))
        })
    }

    /// Block downsampling: a cell is set iff at least half of its pixels are set.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::param(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let area = factor * factor;
        Ok(Self::from_fn(w, h, |cx, cy| {
            let mut n = 0;
            for y in cy * factor..(cy + 1) * factor {
                for x in cx * factor..(cx + 1) * factor {
                    n += usize::from(self.get(x, y));
                }
            }
            2 * n >= area
        }))
    }

    /// Centroid in pixel-centre coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn to_values<F: Scalar>(&self) -> Vec<F> {
        self.bits
            .iter()
            .map(|&b| if b { F::one() } else { F::zero() })
            .collect()
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_covered_block_rounds_up() {
        // 4x4 with the left half set: each 2x2 block on the left is full, on the right empty;
        // a block straddling exactly half is set.
        let m = BinaryMask::from_fn(4, 4, |x, _| x < 1 || x == 2);
        let d = m.downsample(2).unwrap();
        assert_eq!(d.bits, vec![true, true, true, true]);
        let quarter = BinaryMask::from_fn(4, 4, |x, y| x == 0 && y == 0);
        assert!(!quarter.downsample(2).unwrap().get(0, 0));
    }

    #[test]
    fn latent_round_trip_is_lossless() {
        let img = GrayImage::from_pixels(4, 2, vec![0, 1, 127, 128, 200, 254, 255, 77]).unwrap();
        let back = GrayImage::from_latent(&img.to_latent::<f64>()).unwrap();
        assert_eq!(back, img);
    }
}
