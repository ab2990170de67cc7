use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary `[H × W]` mask, 1 = foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn from_bools(height: usize, width: usize, values: Vec<bool>) -> Self {
        assert_eq!(values.len(), height * width);
        BinaryMask {
            height,
            width,
            bits: values.into_iter().map(u8::from).collect(),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(y, x)));
            }
        }
        BinaryMask { height, width, bits }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    /// Thresholds a `[H × W]` (or `[H × W × 1]`) tensor at 0.5.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] | [h, w, 1] => (h, w),
            ref s => return Err(Error::shape("mask", format!("expected [H, W], got {s:?}"))),
        };
        Ok(BinaryMask {
            height: h,
            width: w,
            bits: t.data().iter().map(|v| u8::from(v.as_f64() >= 0.5)).collect(),
        })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| T::of(f64::from(self.bits[i])))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    /// Per-pixel class labels (0 background, 1 foreground).
    pub fn labels(&self) -> Vec<usize> {
        self.bits.iter().map(|&b| b as usize).collect()
    }

    /// Nearest-neighbor resampling with half-pixel centers: output cell `d`
    /// reads source index `floor((d + 0.5) · in / out)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let src = |d: usize, out: usize, inp: usize| (((d as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
        BinaryMask::from_fn(height, width, |y, x| {
            self.get(src(y, height, self.height), src(x, width, self.width))
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }
}
