//! Support prototype, prior mask and the fused network input.

use crate::backbone::Backbone;
use crate::data::{BinaryMask, Episode};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Backward, Graph, Var};
use crate::tensor::Tensor;

const COSINE_EPS: f64 = 1e-8;
const PRIOR_EPS: f64 = 1e-7;

/// Class prototype: the mean foreground feature vector `[C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportPrototype<T>(pub Tensor<T>);

/// Per-position `[H × W]` target likelihood in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMask<T>(pub Tensor<T>);

/// `[H × W × (2C+1)]`: query features ‖ prototype ‖ prior.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature<T>(pub Tensor<T>);

impl<T: Scalar> FusedFeature<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn channels(&self) -> usize {
        (self.0.last_dim() - 1) / 2
    }

    /// Splits back into `(query features, prototype, prior)`.
    pub fn split(&self) -> (Tensor<T>, SupportPrototype<T>, PriorMask<T>) {
        let [h, w, _] = *self.0.shape() else { unreachable!("fused features are rank 3") };
        let c = self.channels();
        let d = self.0.data();
        let stride = 2 * c + 1;
        let fq = Tensor::from_fn(&[h, w, c], |i| d[(i / c) * stride + i % c]);
        let proto = Tensor::from_fn(&[c], |i| d[c + i]);
        let prior = Tensor::from_fn(&[h, w], |i| d[i * stride + 2 * c]);
        (fq, SupportPrototype(proto), PriorMask(prior))
    }
}

fn feature_dims<T: Scalar>(op: &'static str, f: &Tensor<T>, m: &BinaryMask) -> Result<(usize, usize, usize)> {
    match *f.shape() {
        [h, w, c] if (h, w) == m.dims() => Ok((h, w, c)),
        ref s => Err(Error::shape(op, format!("features {s:?} vs mask {:?}", m.dims()))),
    }
}

/// Mean of the feature vectors at foreground positions of `m`.
pub fn masked_gap<T: Scalar>(f: &Tensor<T>, m: &BinaryMask) -> Result<Tensor<T>> {
    let (_, _, c) = feature_dims("masked_gap", f, m)?;
    let count = m.count();
    if count == 0 {
        return Err(Error::EmptySupportMask { shot: 0 });
    }
    let mut acc = vec![T::zero(); c];
    for (px, &bit) in f.data().chunks(c).zip(m.bits()) {
        if bit != 0 {
            acc.iter_mut().zip(px).for_each(|(a, &v)| *a += v);
        }
    }
    let inv = T::one() / T::of(count as f64);
    Ok(Tensor::new_unchecked(vec![c], acc.into_iter().map(|v| v * inv).collect()))
}

struct MaskedGapBack {
    mask: Vec<u8>,
    count: usize,
}

impl<T: Scalar> Backward<T> for MaskedGapBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let c = grad.len();
        let inv = T::one() / T::of(self.count as f64);
        let mut dx = vec![T::zero(); inputs[0].len()];
        for (px, &bit) in dx.chunks_mut(c).zip(&self.mask) {
            if bit != 0 {
                px.iter_mut().zip(grad).for_each(|(d, &g)| *d = g * inv);
            }
        }
        vec![Some(dx)]
    }
}

/// Differentiable [`masked_gap`] over a feature map on the tape.
pub fn masked_gap_var<T: Scalar>(g: &mut Graph<T>, f: Var, m: &BinaryMask) -> Result<Var> {
    let value = masked_gap(g.value(f), m)?;
    Ok(g.record(
        value,
        &[f],
        MaskedGapBack {
            mask: m.bits().to_vec(),
            count: m.count(),
        },
    ))
}

/// Mean over shots of the per-shot masked GAP, `Σ_k GAP(F_k[M_k]) / K`.
///
/// Masks must already be at feature resolution.
pub fn prototype<T: Scalar>(supports: &[(Tensor<T>, BinaryMask)]) -> Result<SupportPrototype<T>> {
    if supports.is_empty() {
        return Err(Error::EmptyInput { op: "prototype" });
    }
    let mut shots = Vec::with_capacity(supports.len());
    for (shot, (f, m)) in supports.iter().enumerate() {
        let v = masked_gap(f, m).map_err(|e| match e {
            Error::EmptySupportMask { .. } => Error::EmptySupportMask { shot },
            other => other,
        })?;
        if v.len() != shots.first().map_or(v.len(), Vec::len) {
            return Err(Error::shape("prototype", "shots disagree on channel count"));
        }
        shots.push(v.into_data());
    }
    let mean = shot_mean(&shots);
    Ok(SupportPrototype(Tensor::new_unchecked(vec![mean.len()], mean)))
}

fn norms<T: Scalar>(f: &[T], c: usize) -> Vec<T> {
    f.chunks(c).map(|px| px.iter().map(|&v| v * v).sum::<T>().sqrt()).collect()
}

/// Single-shot prior: for each query position, the best cosine similarity
/// to any support foreground feature, min-max normalized over the map.
pub fn prior_mask<T: Scalar>(fq: &Tensor<T>, fs: &Tensor<T>, m: &BinaryMask) -> Result<PriorMask<T>> {
    let (h, w, c) = match *fq.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::shape("prior_mask", format!("query features {s:?}"))),
    };
    let (_, _, cs) = feature_dims("prior_mask", fs, m)?;
    if cs != c {
        return Err(Error::shape("prior_mask", format!("query has {c} channels, support {cs}")));
    }
    if m.count() == 0 {
        return Err(Error::EmptySupportMask { shot: 0 });
    }
    let eps = T::of(COSINE_EPS);
    let (qn, sn) = (norms(fq.data(), c), norms(fs.data(), c));
    let fg: Vec<usize> = m.bits().iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i).collect();

    let scores: Vec<T> = fq
        .data()
        .chunks(c)
        .zip(&qn)
        .map(|(q, &nq)| {
            fg.iter()
                .map(|&j| {
                    let s = &fs.data()[j * c..(j + 1) * c];
                    let dot: T = q.iter().zip(s).map(|(&a, &b)| a * b).sum();
                    dot / (nq * sn[j] + eps)
                })
                .fold(T::neg_infinity(), T::max)
        })
        .collect();

    let lo = scores.iter().copied().fold(T::infinity(), T::min);
    let hi = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let denom = hi - lo + T::of(PRIOR_EPS);
    let normalized = scores.into_iter().map(|s| (s - lo) / denom).collect();
    Ok(PriorMask(Tensor::new_unchecked(vec![h, w], normalized)))
}

/// K-shot prior: the mean of the per-shot normalized priors.
pub fn prior_mask_kshot<T: Scalar>(fq: &Tensor<T>, supports: &[(Tensor<T>, BinaryMask)]) -> Result<PriorMask<T>> {
    if supports.is_empty() {
        return Err(Error::EmptyInput { op: "prior_mask" });
    }
    let mut shots = Vec::with_capacity(supports.len());
    for (shot, (fs, m)) in supports.iter().enumerate() {
        let p = prior_mask(fq, fs, m).map_err(|e| match e {
            Error::EmptySupportMask { .. } => Error::EmptySupportMask { shot },
            other => other,
        })?;
        shots.push(p.0.into_data());
    }
    let data = shot_mean(&shots);
    Ok(PriorMask(Tensor::new_unchecked(vec![fq.shape()[0], fq.shape()[1]], data)))
}

/// Element-wise mean over shots. Each element's values are summed in sorted
/// order, so the result is bitwise independent of shot order.
fn shot_mean<T: Scalar>(shots: &[Vec<T>]) -> Vec<T> {
    let k = T::of(shots.len() as f64);
    let mut column = Vec::with_capacity(shots.len());
    (0..shots[0].len())
        .map(|i| {
            column.clear();
            column.extend(shots.iter().map(|s| s[i]));
            column.sort_by(|a, b| a.as_f64().total_cmp(&b.as_f64()));
            column.iter().fold(T::zero(), |acc, &v| acc + v) / k
        })
        .collect()
}

/// Concatenates query features, the prototype broadcast to every position,
/// and the prior along channels.
pub fn fuse<T: Scalar>(fq: &Tensor<T>, proto: &SupportPrototype<T>, prior: &PriorMask<T>) -> Result<FusedFeature<T>> {
    let (h, w, c) = match *fq.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::shape("fuse", format!("query features {s:?}"))),
    };
    if proto.0.shape() != [c] || prior.0.shape() != [h, w] {
        return Err(Error::shape(
            "fuse",
            format!("features {:?}, prototype {:?}, prior {:?}", fq.shape(), proto.0.shape(), prior.0.shape()),
        ));
    }
    let mut data = Vec::with_capacity(h * w * (2 * c + 1));
    for (px, &p) in fq.data().chunks(c).zip(prior.0.data()) {
        data.extend_from_slice(px);
        data.extend_from_slice(proto.0.data());
        data.push(p);
    }
    Ok(FusedFeature(Tensor::new_unchecked(vec![h, w, 2 * c + 1], data)))
}

/// Runs the frozen backbone over an episode and builds its fused input.
pub fn fuse_episode<T: Scalar>(episode: &Episode, backbone: &Backbone<T>) -> Result<FusedFeature<T>> {
    let fq = backbone.extract(&episode.query.image.cast())?;
    let (h, w) = (fq.shape()[0], fq.shape()[1]);
    let supports = episode
        .supports
        .iter()
        .map(|s| Ok((backbone.extract(&s.image.cast())?, s.mask.resize_nearest(h, w))))
        .collect::<Result<Vec<_>>>()?;
    let proto = prototype(&supports)?;
    let prior = prior_mask_kshot(&fq, &supports)?;
    fuse(&fq, &proto, &prior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, DEFAULT_STEP};

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn masked_gap_examples() {
        let f = t(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let diag = BinaryMask::from_fn(2, 2, |y, x| y == x);
        assert_eq!(masked_gap(&f, &diag).unwrap().data(), &[2.5]);
        let all = BinaryMask::from_fn(2, 2, |_, _| true);
        assert_eq!(masked_gap(&f, &all).unwrap().data(), &[2.5]);
        let one = BinaryMask::from_fn(2, 2, |y, x| y == 1 && x == 0);
        assert_eq!(masked_gap(&f, &one).unwrap().data(), &[3.0]);
        assert!(matches!(
            masked_gap(&f, &BinaryMask::empty(2, 2)).unwrap_err(),
            Error::EmptySupportMask { .. }
        ));
    }

    #[test]
    fn masked_gap_gradient() {
        let m = BinaryMask::from_fn(3, 3, |y, x| (y + x) % 2 == 0);
        let f = Tensor::from_fn(&[3, 3, 2], |i| (i as f64 * 0.3).cos());
        let err = finite_diff_check(
            |g, x| {
                let v = masked_gap_var(g, x, &m)?;
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &f,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn prototype_identifies_empty_shot() {
        let f = Tensor::<f64>::full(&[2, 2, 3], 1.0);
        let ok = BinaryMask::from_fn(2, 2, |_, _| true);
        let shots = vec![(f.clone(), ok.clone()), (f.clone(), BinaryMask::empty(2, 2))];
        assert!(matches!(prototype(&shots).unwrap_err(), Error::EmptySupportMask { shot: 1 }));
        let twice = prototype(&[(f.clone(), ok.clone()), (f.clone(), ok.clone())]).unwrap();
        assert_eq!(twice, prototype(&[(f, ok)]).unwrap());
    }

    #[test]
    fn constant_maps_give_zero_prior() {
        let f = Tensor::<f64>::full(&[3, 3, 4], 0.5);
        let m = BinaryMask::from_fn(3, 3, |y, _| y == 0);
        let p = prior_mask(&f, &f, &m).unwrap();
        assert!(p.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_similarity_reaches_one() {
        let f = Tensor::from_fn(&[3, 3, 4], |i| ((i * 7) % 5) as f64 - 2.0);
        let m = BinaryMask::from_fn(3, 3, |y, x| y == 1 && x == 1);
        let p = prior_mask(&f, &f, &m).unwrap();
        let max = p.0.data().iter().copied().fold(f64::MIN, f64::max);
        assert!((max - 1.0).abs() < 1e-6);
        assert!(p.0.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn fuse_layout() {
        let fq = Tensor::from_fn(&[2, 3, 32], |i| i as f64);
        let proto = SupportPrototype(Tensor::from_fn(&[32], |i| -(i as f64)));
        let prior = PriorMask(Tensor::from_fn(&[2, 3], |i| i as f64 / 6.0));
        let x = fuse(&fq, &proto, &prior).unwrap();
        assert_eq!(x.0.shape(), &[2, 3, 65]);
        let (a, b, c) = x.split();
        assert!(a.bit_eq(&fq));
        assert_eq!(b, proto);
        assert_eq!(c, prior);
        for px in x.0.data().chunks(65) {
            assert_eq!(&px[32..64], proto.0.data());
        }
    }

    #[test]
    fn fuse_rejects_bad_shapes() {
        let fq = Tensor::<f64>::zeros(&[2, 2, 4]);
        let proto = SupportPrototype(Tensor::zeros(&[3]));
        let prior = PriorMask(Tensor::zeros(&[2, 2]));
        assert!(matches!(fuse(&fq, &proto, &prior).unwrap_err(), Error::ShapeMismatch { .. }));
    }
}
