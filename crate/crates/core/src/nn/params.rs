//! Parameter containers and initialization.
//!
//! Every container is generic over its leaf type `P`: `Tensor<T>` for stored
//! weights, [`Var`] once bound to a graph, or a gradient tensor after
//! backward. [`ParamMap`] walks the leaves in a fixed order with stable
//! dotted names (`gem.scales.0.reducer.weight`), which is what checkpoints
//! and the optimizer key on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

pub trait ParamMap<P> {
    type Output<Q>;

    fn map_params<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> Self::Output<Q>;
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P, M: ParamMap<P>> ParamMap<P> for Vec<M> {
    type Output<Q> = Vec<M::Output<Q>>;

    fn map_params<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> Self::Output<Q> {
        self.iter()
            .enumerate()
            .map(|(i, m)| m.map_params(&join(prefix, &i.to_string()), f))
            .collect()
    }
}

impl<P, M: ParamMap<P>> ParamMap<P> for Option<M> {
    type Output<Q> = Option<M::Output<Q>>;

    fn map_params<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> Self::Output<Q> {
        self.as_ref().map(|m| m.map_params(prefix, f))
    }
}

/// Names and leaves in traversal order.
pub fn named_leaves<P: Clone, M: ParamMap<P>>(m: &M, prefix: &str) -> Vec<(String, P)> {
    let mut out = Vec::new();
    m.map_params(prefix, &mut |name, p: &P| out.push((name.to_string(), p.clone())));
    out
}

/// Records every leaf of `m` on `g` as a trainable parameter.
pub fn bind<T: Scalar, M: ParamMap<Tensor<T>>>(m: &M, g: &mut Graph<T>) -> M::Output<Var> {
    m.map_params("", &mut |_, t| g.param(t.clone()))
}

/// Records every leaf of `m` on `g` as a constant.
pub fn bind_constant<T: Scalar, M: ParamMap<Tensor<T>>>(m: &M, g: &mut Graph<T>) -> M::Output<Var> {
    m.map_params("", &mut |_, t| g.constant(t.clone()))
}

/// Fully connected layer, `y = x·Wᵀ + b` over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<P> {
    /// `[out × in]`
    pub weight: P,
    /// `[out]`
    pub bias: P,
}

impl<P> ParamMap<P> for LinearParams<P> {
    type Output<Q> = LinearParams<Q>;

    fn map_params<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> LinearParams<Q> {
        LinearParams {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }
}

/// Stride-1, zero same-padded 2-D cross-correlation over `[H×W×C]` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<P> {
    /// `[out_ch × in_ch × kh × kw]`
    pub kernel: P,
    /// `[out_ch]`
    pub bias: P,
}

impl<P> ParamMap<P> for Conv2dParams<P> {
    type Output<Q> = Conv2dParams<Q>;

    fn map_params<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> Conv2dParams<Q> {
        Conv2dParams {
            kernel: f(&join(prefix, "kernel"), &self.kernel),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<P> {
    pub gamma: P,
    pub beta: P,
    pub eps: f64,
}

impl<P> ParamMap<P> for LayerNormParams<P> {
    type Output<Q> = LayerNormParams<Q>;

    fn map_params<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> LayerNormParams<Q> {
        LayerNormParams {
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            beta: f(&join(prefix, "beta"), &self.beta),
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhsaParams<P> {
    pub wq: LinearParams<P>,
    pub wk: LinearParams<P>,
    pub wv: LinearParams<P>,
    pub wo: LinearParams<P>,
    pub heads: usize,
}

impl<P> ParamMap<P> for MhsaParams<P> {
    type Output<Q> = MhsaParams<Q>;

    fn map_params<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> MhsaParams<Q> {
        MhsaParams {
            wq: self.wq.map_params(&join(prefix, "wq"), f),
            wk: self.wk.map_params(&join(prefix, "wk"), f),
            wv: self.wv.map_params(&join(prefix, "wv"), f),
            wo: self.wo.map_params(&join(prefix, "wo"), f),
            heads: self.heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlockParams<P> {
    pub ln1: LayerNormParams<P>,
    pub attn: MhsaParams<P>,
    pub ln2: LayerNormParams<P>,
    /// `C → ratio·C`
    pub fc1: LinearParams<P>,
    /// `ratio·C → C`
    pub fc2: LinearParams<P>,
}

impl<P> ParamMap<P> for TransformerBlockParams<P> {
    type Output<Q> = TransformerBlockParams<Q>;

    fn map_params<Q, F: FnMut(&str, &P) -> Q>(
        &self,
        prefix: &str,
        f: &mut F,
    ) -> TransformerBlockParams<Q> {
        TransformerBlockParams {
            ln1: self.ln1.map_params(&join(prefix, "ln1"), f),
            attn: self.attn.map_params(&join(prefix, "attn"), f),
            ln2: self.ln2.map_params(&join(prefix, "ln2"), f),
            fc1: self.fc1.map_params(&join(prefix, "fc1"), f),
            fc2: self.fc2.map_params(&join(prefix, "fc2"), f),
        }
    }
}

/// Whether a leaf name denotes a weight matrix or kernel (as opposed to a
/// bias or normalization affine).
pub fn is_weight(name: &str) -> bool {
    matches!(name.rsplit('.').next(), Some("weight" | "kernel"))
}

/// Seeded Glorot-uniform initializer.
///
/// Weights are drawn from `U(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
/// biases start at zero, LayerNorm at `gamma = 1, beta = 0`. Draws happen in
/// `f64` and are then cast, so both precisions see the same parameters.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.rng.gen_range(-bound..bound)))
    }

    pub fn linear<T: Scalar>(&mut self, input: usize, output: usize) -> LinearParams<Tensor<T>> {
        let bound = Self::glorot_bound(input, output);
        LinearParams {
            weight: self.uniform(&[output, input], bound),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn conv2d<T: Scalar>(&mut self, input: usize, output: usize, size: usize) -> Conv2dParams<Tensor<T>> {
        let area = size * size;
        let bound = Self::glorot_bound(input * area, output * area);
        Conv2dParams {
            kernel: self.uniform(&[output, input, size, size], bound),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn layer_norm<T: Scalar>(&mut self, width: usize) -> LayerNormParams<Tensor<T>> {
        LayerNormParams {
            gamma: Tensor::full(&[width], T::one()),
            beta: Tensor::zeros(&[width]),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn mhsa<T: Scalar>(&mut self, width: usize, heads: usize) -> MhsaParams<Tensor<T>> {
        MhsaParams {
            wq: self.linear(width, width),
            wk: self.linear(width, width),
            wv: self.linear(width, width),
            wo: self.linear(width, width),
            heads,
        }
    }

    pub fn transformer_block<T: Scalar>(
        &mut self,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> TransformerBlockParams<Tensor<T>> {
        TransformerBlockParams {
            ln1: self.layer_norm(width),
            attn: self.mhsa(width, heads),
            ln2: self.layer_norm(width),
            fc1: self.linear(width, mlp_ratio * width),
            fc2: self.linear(mlp_ratio * width, width),
        }
    }
}
