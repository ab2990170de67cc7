//! Frozen convolutional feature extractor.
//!
//! Three stages of `3×3 conv → GELU → 2× average downsample` take an
//! `[H × W × 3]` image to an `[H/8 × W/8 × C]` feature map, followed by a
//! fixed whitening transform. The same parameters serve the query
//! and every support, and they never enter a gradient tape.

use crate::error::{Error, Result};
use crate::nn::{adaptive_avg_pool_forward, conv2d_forward, gelu_forward, Conv2dParams, ParamMap};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STAGE_CHANNELS: [usize; 2] = [16, 32];
pub const DEFAULT_FEATURE_CHANNELS: usize = 32;
pub const OUTPUT_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<P> {
    pub stages: Vec<Conv2dParams<P>>,
    /// `[C]`, subtracted from the raw features.
    pub shift: P,
    /// `[C × C]`, applied to the shifted features.
    pub whiten: P,
}

impl<P> ParamMap<P> for BackboneParams<P> {
    type Output<Q> = BackboneParams<Q>;

    fn map_params<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> BackboneParams<Q> {
        BackboneParams {
            stages: self.stages.map_params(&crate::nn::join(prefix, "stages"), f),
            shift: f(&crate::nn::join(prefix, "shift"), &self.shift),
            whiten: f(&crate::nn::join(prefix, "whiten"), &self.whiten),
        }
    }
}

impl<T: Scalar> BackboneParams<Tensor<T>> {
    /// All-zero parameters with the shapes of a `channels`-wide extractor.
    pub fn shaped(channels: usize) -> Self {
        let plan = [3, STAGE_CHANNELS[0], STAGE_CHANNELS[1], channels];
        BackboneParams {
            stages: plan
                .windows(2)
                .map(|io| Conv2dParams {
                    kernel: Tensor::zeros(&[io[1], io[0], 3, 3]),
                    bias: Tensor::zeros(&[io[1]]),
                })
                .collect(),
            shift: Tensor::zeros(&[channels]),
            whiten: Tensor::zeros(&[channels, channels]),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone<T: Scalar> {
    params: BackboneParams<Tensor<T>>,
}

impl<T: Scalar> Backbone<T> {
    /// Random-init extractor with channel plan `3 → 16 → 32 → channels`.
    ///
    /// Kernels are He-uniform (`a = sqrt(6 / fan_in)`); biases are zero. The
    /// output whitening is calibrated on seeded images of random colored
    /// rectangles, which carry no shape-class information.
    pub fn new(seed: u64, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "backbone", &[]));
        let plan = [3, STAGE_CHANNELS[0], STAGE_CHANNELS[1], channels];
        let stages = plan
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                Conv2dParams {
                    kernel: Tensor::from_fn(&[cout, cin, 3, 3], |_| T::of(rng.gen_range(-bound..bound))),
                    bias: Tensor::zeros(&[cout]),
                }
            })
            .collect();
        let mut bb = Backbone {
            params: BackboneParams {
                stages,
                shift: Tensor::zeros(&[channels]),
                whiten: Tensor::eye(channels),
            },
        };
        bb.calibrate(&calibration_images(seed));
        bb
    }

    /// Sets the output transform to ZCA whitening over `images`: zero mean
    /// and near-identity covariance, with eigenvalues floored at a fraction
    /// of the largest so that flat directions are not blown up.
    fn calibrate(&mut self, images: &[Tensor<f64>]) {
        let c = self.channels();
        let feats: Vec<Tensor<T>> = images
            .iter()
            .map(|img| self.raw_features(&img.cast()).expect("calibration images are valid"))
            .collect();
        let rows: Vec<&[T]> = feats.iter().flat_map(|f| f.data().chunks(c)).collect();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..c).map(|k| rows.iter().map(|r| r[k].as_f64()).sum::<f64>() / n).collect();
        let mut cov = DMatrix::<f64>::zeros(c, c);
        for r in &rows {
            let d = DVector::from_iterator(c, r.iter().zip(&mean).map(|(v, m)| v.as_f64() - m));
            cov += &d * d.transpose();
        }
        cov /= n;
        let eig = cov.symmetric_eigen();
        let floor = WHITEN_EIGEN_FLOOR * eig.eigenvalues.max().max(f64::MIN_POSITIVE);
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / (e.max(0.0) + floor).sqrt()));
        let w = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
        self.params.shift = Tensor::from_fn(&[c], |k| T::of(mean[k]));
        self.params.whiten = Tensor::from_fn(&[c, c], |i| T::of(w[(i / c, i % c)]));
    }

    pub fn from_params(params: BackboneParams<Tensor<T>>) -> Self {
        Backbone { params }
    }

    pub fn params(&self) -> &BackboneParams<Tensor<T>> {
        &self.params
    }

    pub fn channels(&self) -> usize {
        self.params.stages.last().map_or(0, |s| s.kernel.shape()[0])
    }

    /// Outputs of every stage, shallowest first, before standardization.
    pub fn extract_taps(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (h, w) = match *image.shape() {
            [h, w, 3] => (h, w),
            ref s => return Err(Error::shape("backbone", format!("expected [H, W, 3], got {s:?}"))),
        };
        if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::BadImageSize(h, w));
        }
        let mut x = image.clone();
        let mut taps = Vec::with_capacity(self.params.stages.len());
        for stage in &self.params.stages {
            let y = gelu_forward(&conv2d_forward(&x, &stage.kernel, &stage.bias)?);
            let (sh, sw) = (y.shape()[0], y.shape()[1]);
            x = adaptive_avg_pool_forward(&y, (sh / 2, sw / 2))?;
            taps.push(x.clone());
        }
        Ok(taps)
    }

    fn raw_features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.extract_taps(image)?.pop().expect("backbone has stages"))
    }

    pub fn extract(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.raw_features(image)?;
        let c = self.channels();
        let (shift, w) = (self.params.shift.data(), self.params.whiten.data());
        let mut out = Vec::with_capacity(f.len());
        let mut centered = vec![T::zero(); c];
        for px in f.data().chunks(c) {
            centered.iter_mut().zip(px.iter().zip(shift)).for_each(|(d, (&v, &s))| *d = v - s);
            out.extend(w.chunks(c).map(|row| row.iter().zip(&centered).map(|(&a, &b)| a * b).sum::<T>()));
        }
        Tensor::from_vec(f.shape(), out)
    }

    /// Upper bound on `‖extract(a) − extract(b)‖₂ / ‖a − b‖₂`.
    ///
    /// Each conv's operator norm is bounded by `sqrt(‖K‖₁ · ‖K‖∞)` of its
    /// unrolled matrix, GELU is 1.13-Lipschitz, a 2×2 mean has norm 1/2, and
    /// the whitening matrix is bounded the same way as a conv.
    pub fn lipschitz_bound(&self) -> f64 {
        const GELU_LIPSCHITZ: f64 = 1.129;
        let c = self.channels();
        let w = self.params.whiten.data();
        let row = (0..c).map(|i| (0..c).map(|j| w[i * c + j].abs().as_f64()).sum::<f64>()).fold(0.0, f64::max);
        let col = (0..c).map(|j| (0..c).map(|i| w[i * c + j].abs().as_f64()).sum::<f64>()).fold(0.0, f64::max);
        (row * col).sqrt() * self.params
            .stages
            .iter()
            .map(|s| {
                let [cout, cin, kh, kw] = *s.kernel.shape() else { unreachable!() };
                let k = s.kernel.data();
                let taps = kh * kw;
                let row_sum = (0..cout)
                    .map(|co| k[co * cin * taps..(co + 1) * cin * taps].iter().map(|v| v.abs().as_f64()).sum::<f64>())
                    .fold(0.0, f64::max);
                let col_sum = (0..cin)
                    .map(|ci| {
                        (0..cout)
                            .map(|co| {
                                let off = (co * cin + ci) * taps;
                                k[off..off + taps].iter().map(|v| v.abs().as_f64()).sum::<f64>()
                            })
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max);
                (row_sum * col_sum).sqrt() * GELU_LIPSCHITZ * 0.5
            })
            .product::<f64>()
    }
}

const CALIBRATION_IMAGES: usize = 32;
const CALIBRATION_SIZE: usize = 64;
const WHITEN_EIGEN_FLOOR: f64 = 1e-3;

/// Gray backgrounds with a few uniformly colored axis-aligned rectangles.
fn calibration_images(seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "backbone-calibration", &[]));
    let n = CALIBRATION_SIZE;
    (0..CALIBRATION_IMAGES)
        .map(|_| {
            let bg: f64 = rng.gen_range(0.05..0.25);
            let rects: Vec<([usize; 4], [f64; 3])> = (0..rng.gen_range(1..=4))
                .map(|_| {
                    let (w, h) = (rng.gen_range(6..n / 2), rng.gen_range(6..n / 2));
                    let (x0, y0) = (rng.gen_range(0..n - w), rng.gen_range(0..n - h));
                    ([x0, y0, x0 + w, y0 + h], [rng.gen(), rng.gen(), rng.gen()])
                })
                .collect();
            let noise: Vec<f64> = (0..n * n * 3).map(|_| rng.gen_range(-0.04..0.04)).collect();
            Tensor::from_fn(&[n, n, 3], |i| {
                let (y, x, c) = (i / (n * 3), (i / 3) % n, i % 3);
                let mut v = bg;
                for ([x0, y0, x1, y1], color) in &rects {
                    if (*x0..*x1).contains(&x) && (*y0..*y1).contains(&y) {
                        v = color[c];
                    }
                }
                (v + noise[i]).clamp(0.0, 1.0)
            })
        })
        .collect()
}
