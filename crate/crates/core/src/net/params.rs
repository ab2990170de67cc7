use crate::nn::{join, Conv2dParams, Initializer, LinearParams, ParamMap, TransformerBlockParams};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::NetConfig;

/// Per-scale parameters of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleParams<P, B> {
    /// `2C+1 → C`, applied at every position.
    pub reducer: LinearParams<P>,
    /// 1×1 `2C → C` merge with the previous scale; absent at the first scale.
    pub fmu: Option<Conv2dParams<P>>,
    pub blocks: Vec<B>,
}

impl<P, B: ParamMap<P>> ParamMap<P> for ScaleParams<P, B> {
    type Output<Q> = ScaleParams<Q, B::Output<Q>>;

    fn map_params<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> Self::Output<Q> {
        ScaleParams {
            reducer: self.reducer.map_params(&join(prefix, "reducer"), f),
            fmu: self.fmu.map_params(&join(prefix, "fmu"), f),
            blocks: self.blocks.map_params(&join(prefix, "blocks"), f),
        }
    }
}

/// `3×3 conv (n·C → C) → GELU → 1×1 conv (C → 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P> {
    pub conv3: Conv2dParams<P>,
    pub conv1: Conv2dParams<P>,
}

impl<P> ParamMap<P> for HeadParams<P> {
    type Output<Q> = HeadParams<Q>;

    fn map_params<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> HeadParams<Q> {
        HeadParams {
            conv3: self.conv3.map_params(&join(prefix, "conv3"), f),
            conv1: self.conv1.map_params(&join(prefix, "conv1"), f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams<P, B> {
    pub scales: Vec<ScaleParams<P, B>>,
    pub head: HeadParams<P>,
}

impl<P, B: ParamMap<P>> ParamMap<P> for BranchParams<P, B> {
    type Output<Q> = BranchParams<Q, B::Output<Q>>;

    fn map_params<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> Self::Output<Q> {
        BranchParams {
            scales: self.scales.map_params(&join(prefix, "scales"), f),
            head: self.head.map_params(&join(prefix, "head"), f),
        }
    }
}

pub type GemParams<P> = BranchParams<P, TransformerBlockParams<P>>;
/// LEM blocks are residual `3×3 conv (C → C) → GELU`.
pub type LemParams<P> = BranchParams<P, Conv2dParams<P>>;

/// Every learnable parameter. Both branches always exist; the mode decides
/// which of them a forward pass touches.
#[derive(Clone, Debug, PartialEq)]
pub struct TrfsParams<P> {
    pub gem: GemParams<P>,
    pub lem: LemParams<P>,
}

impl<P> ParamMap<P> for TrfsParams<P> {
    type Output<Q> = TrfsParams<Q>;

    fn map_params<Q, F: FnMut(&str, &P) -> Q>(&self, prefix: &str, f: &mut F) -> TrfsParams<Q> {
        TrfsParams {
            gem: self.gem.map_params(&join(prefix, "gem"), f),
            lem: self.lem.map_params(&join(prefix, "lem"), f),
        }
    }
}

/// Zeroes the output projections of both residual branches, so each block
/// starts as the identity. Without this the untrained stack amplifies its
/// input and early SGD steps diverge.
fn zero_residual<T: Scalar>(mut b: TransformerBlockParams<Tensor<T>>) -> TransformerBlockParams<Tensor<T>> {
    b.attn.wo.weight = Tensor::zeros(b.attn.wo.weight.shape());
    b.fc2.weight = Tensor::zeros(b.fc2.weight.shape());
    b
}

impl<T: Scalar> TrfsParams<Tensor<T>> {
    /// Seeded initialization. GEM and LEM draw from separate streams, so
    /// changing one branch's shape does not perturb the other.
    pub fn init(cfg: &NetConfig, seed: u64) -> Self {
        let c = cfg.channels();
        let n = cfg.pyramid.len();
        let g = cfg.gem;
        let scale = |init: &mut Initializer, i: usize| (init.linear(2 * c + 1, c), (i > 0).then(|| init.conv2d(2 * c, c, 1)));
        let head = |init: &mut Initializer| HeadParams {
            conv3: init.conv2d(n * c, c, 3),
            conv1: init.conv2d(c, 2, 1),
        };

        let mut init = Initializer::new(derive_seed(seed, "init", &[0]));
        let gem = BranchParams {
            scales: (0..n)
                .map(|i| {
                    let (reducer, fmu) = scale(&mut init, i);
                    let blocks = (0..g.depth).map(|_| zero_residual(init.transformer_block(c, g.heads, g.mlp_ratio))).collect();
                    ScaleParams { reducer, fmu, blocks }
                })
                .collect(),
            head: head(&mut init),
        };

        let mut init = Initializer::new(derive_seed(seed, "init", &[1]));
        let lem = BranchParams {
            scales: (0..n)
                .map(|i| {
                    let (reducer, fmu) = scale(&mut init, i);
                    let blocks = (0..g.depth).map(|_| init.conv2d(c, c, 3)).collect();
                    ScaleParams { reducer, fmu, blocks }
                })
                .collect(),
            head: head(&mut init),
        };
        TrfsParams { gem, lem }
    }
}
