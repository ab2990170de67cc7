//! Losses, head combination and the model wrapper.

use crate::backbone::Backbone;
use crate::data::{BinaryMask, Episode};
use crate::error::{Error, Result};
use crate::fusion::{fuse_episode, FusedFeature};
use crate::nn::{bilinear_resize, bind, bind_constant, ParamMap};
use crate::ops::softmax_lastdim;
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

use super::config::{Averaging, NetConfig};
use super::forward::{build_pyramid, gem_branch, head, lem_branch};
use super::params::TrfsParams;

/// Backbone-independent network input for one episode. The backbone is
/// frozen, so this can be computed once and reused across steps.
#[derive(Clone, Debug)]
pub struct EpisodeInput<T: Scalar> {
    pub fused: FusedFeature<T>,
    pub query_mask: BinaryMask,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_gem: f64,
    pub l_lem: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(l_gem: f64, l_lem: f64) -> Self {
        LossReport {
            l_gem,
            l_lem,
            total: l_gem + l_lem,
        }
    }

    /// Term-wise mean; `total` is recomputed from the means.
    pub fn mean(reports: &[LossReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let gem = reports.iter().map(|r| r.l_gem).sum::<f64>() / n;
        let lem = reports.iter().map(|r| r.l_lem).sum::<f64>() / n;
        LossReport::new(gem, lem)
    }
}

/// Per-head logits `[H × W × 2]` at query-mask resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLogits<T> {
    pub gem: Option<Tensor<T>>,
    pub lem: Option<Tensor<T>>,
}

impl<T: Scalar> HeadLogits<T> {
    pub fn enabled(&self) -> Vec<&Tensor<T>> {
        self.gem.iter().chain(self.lem.iter()).collect()
    }
}

/// Graph handles for the enabled heads' upsampled logits.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub gem: Option<Var>,
    pub lem: Option<Var>,
}

/// Runs the enabled branches and heads on a fused input already on `g`,
/// upsampling logits to `out`.
pub fn forward_heads<T: Scalar>(
    g: &mut Graph<T>,
    fused: Var,
    p: &TrfsParams<Var>,
    cfg: &NetConfig,
    out: (usize, usize),
) -> Result<HeadVars> {
    let pyramid = build_pyramid(g, fused, &cfg.pyramid)?;
    let gem = if cfg.mode.gem() {
        let t = gem_branch(g, &pyramid, &p.gem, cfg.norm)?;
        let logits = head(g, t, &p.gem.head)?;
        Some(bilinear_resize(g, logits, out)?)
    } else {
        None
    };
    let lem = if cfg.mode.lem() {
        let z = lem_branch(g, &pyramid, &p.lem)?;
        let logits = head(g, z, &p.lem.head)?;
        Some(bilinear_resize(g, logits, out)?)
    } else {
        None
    };
    Ok(HeadVars { gem, lem })
}

/// Mean per-pixel two-class cross-entropy of `[H × W × 2]` logits.
pub fn pixel_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, mask: &BinaryMask) -> Result<Var> {
    let (h, w) = mask.dims();
    let flat = g.reshape(logits, &[h * w, 2])?;
    g.cross_entropy(flat, &mask.labels())
}

/// Per-branch and summed losses on the tape.
pub struct LossVars {
    pub gem: Option<Var>,
    pub lem: Option<Var>,
    pub total: Var,
}

pub fn loss_vars<T: Scalar>(g: &mut Graph<T>, heads: HeadVars, mask: &BinaryMask) -> Result<LossVars> {
    let gem = heads.gem.map(|l| pixel_loss(g, l, mask)).transpose()?;
    let lem = heads.lem.map(|l| pixel_loss(g, l, mask)).transpose()?;
    let total = match (gem, lem) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(Error::InvalidConfig("no branch enabled".into())),
    };
    Ok(LossVars { gem, lem, total })
}

fn report<T: Scalar>(g: &Graph<T>, l: &LossVars) -> LossReport {
    let get = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
    LossReport::new(get(l.gem), get(l.lem))
}

/// Foreground/background probabilities `[H × W × 2]` from the enabled heads.
pub fn combine_heads<T: Scalar>(heads: &[&Tensor<T>], averaging: Averaging) -> Result<Tensor<T>> {
    let first = heads.first().ok_or(Error::EmptyInput { op: "combine_heads" })?;
    if heads.iter().any(|h| h.shape() != first.shape()) {
        return Err(Error::shape("combine_heads", "heads disagree on shape"));
    }
    let n = T::of(heads.len() as f64);
    let mean = |ts: &[Tensor<T>]| {
        Tensor::from_fn(first.shape(), |i| ts.iter().map(|t| t.data()[i]).sum::<T>() / n)
    };
    Ok(match averaging {
        Averaging::Probabilities => {
            let probs: Vec<Tensor<T>> = heads.iter().map(|h| softmax_lastdim(h)).collect();
            mean(&probs)
        }
        Averaging::Logits => {
            let logits: Vec<Tensor<T>> = heads.iter().map(|&h| h.clone()).collect();
            softmax_lastdim(&mean(&logits))
        }
    })
}

/// Per-pixel argmax of `[H × W × 2]` probabilities; background wins ties.
pub fn predict_mask<T: Scalar>(probs: &Tensor<T>) -> BinaryMask {
    let (h, w) = (probs.shape()[0], probs.shape()[1]);
    let d = probs.data();
    BinaryMask::from_fn(h, w, |y, x| {
        let i = (y * w + x) * 2;
        d[i + 1] > d[i]
    })
}

/// The segmentation network with its frozen backbone.
#[derive(Clone, Debug)]
pub struct Trfs<T: Scalar> {
    config: NetConfig,
    params: TrfsParams<Tensor<T>>,
    backbone: Backbone<T>,
}

impl<T: Scalar> Trfs<T> {
    pub fn new(config: NetConfig, seed: u64) -> Self {
        let params = TrfsParams::init(&config, seed);
        let backbone = Backbone::new(seed, config.channels());
        Trfs {
            config,
            params,
            backbone,
        }
    }

    pub fn from_parts(config: NetConfig, params: TrfsParams<Tensor<T>>, backbone: Backbone<T>) -> Self {
        Trfs {
            config,
            params,
            backbone,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &TrfsParams<Tensor<T>> {
        &self.params
    }

    pub fn set_params(&mut self, params: TrfsParams<Tensor<T>>) {
        self.params = params;
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    pub fn prepare(&self, episode: &Episode) -> Result<EpisodeInput<T>> {
        Ok(EpisodeInput {
            fused: fuse_episode(episode, &self.backbone)?,
            query_mask: episode.query.mask.clone(),
        })
    }

    fn run(&self, g: &mut Graph<T>, input: &EpisodeInput<T>, trainable: bool) -> Result<(TrfsParams<Var>, HeadVars)> {
        let p = if trainable { bind(&self.params, g) } else { bind_constant(&self.params, g) };
        let x = g.constant(input.fused.tensor().clone());
        let heads = forward_heads(g, x, &p, &self.config, input.query_mask.dims())?;
        Ok((p, heads))
    }

    pub fn forward_loss(&self, episode: &Episode) -> Result<(LossReport, HeadLogits<T>)> {
        self.loss_on(&self.prepare(episode)?)
    }

    pub fn loss_on(&self, input: &EpisodeInput<T>) -> Result<(LossReport, HeadLogits<T>)> {
        let mut g = Graph::new();
        let (_, heads) = self.run(&mut g, input, false)?;
        let losses = loss_vars(&mut g, heads, &input.query_mask)?;
        let logits = HeadLogits {
            gem: heads.gem.map(|v| g.value(v).clone()),
            lem: heads.lem.map(|v| g.value(v).clone()),
        };
        Ok((report(&g, &losses), logits))
    }

    /// Loss and its gradient with respect to every parameter. Parameters of
    /// a disabled branch get exact zeros.
    pub fn loss_and_grad(&self, input: &EpisodeInput<T>) -> Result<(LossReport, TrfsParams<Tensor<T>>)> {
        let mut g = Graph::new();
        let (p, heads) = self.run(&mut g, input, true)?;
        let losses = loss_vars(&mut g, heads, &input.query_mask)?;
        let rep = report(&g, &losses);
        if !rep.total.is_finite() {
            return Err(Error::NonFiniteLoss(rep.total));
        }
        let grads = g.backward(losses.total)?;
        let grad = p.map_params("", &mut |_, v: &Var| grads.get_or_zeros(*v, g.shape(*v)));
        Ok((rep, grad))
    }

    pub fn head_logits(&self, input: &EpisodeInput<T>) -> Result<HeadLogits<T>> {
        let mut g = Graph::new();
        let (_, heads) = self.run(&mut g, input, false)?;
        Ok(HeadLogits {
            gem: heads.gem.map(|v| g.value(v).clone()),
            lem: heads.lem.map(|v| g.value(v).clone()),
        })
    }

    pub fn infer_input(&self, input: &EpisodeInput<T>) -> Result<BinaryMask> {
        let logits = self.head_logits(input)?;
        let probs = combine_heads(&logits.enabled(), self.config.averaging)?;
        Ok(predict_mask(&probs))
    }

    pub fn infer(&self, episode: &Episode) -> Result<BinaryMask> {
        self.infer_input(&self.prepare(episode)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_for(p_fg: &[f64]) -> Tensor<f64> {
        // softmax([0, ln(p / (1 - p))]) = [1 - p, p]
        Tensor::from_fn(&[1, p_fg.len(), 2], |i| if i % 2 == 0 { 0.0 } else { (p_fg[i / 2] / (1.0 - p_fg[i / 2])).ln() })
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let mask = BinaryMask::from_fn(3, 5, |y, x| (x + y) % 3 == 0);
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[3, 5, 2]));
        let l = pixel_loss(&mut g, z, &mask).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_cost_nothing() {
        let mask = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let margin = 40.0;
        let t = Tensor::from_fn(&[4, 4, 2], |i| {
            let fg = mask.bits()[i / 2] != 0;
            if (i % 2 == 1) == fg { margin } else { -margin }
        });
        let mut g = Graph::<f64>::new();
        let z = g.constant(t);
        let l = pixel_loss(&mut g, z, &mask).unwrap();
        assert!(g.value(l).item() < 1e-6);
    }

    #[test]
    fn probability_average_example() {
        let a = logits_for(&[0.4]);
        let b = logits_for(&[0.8]);
        let p = combine_heads(&[&a, &b], Averaging::Probabilities).unwrap();
        assert!((p.data()[0] - 0.4).abs() < 1e-12 && (p.data()[1] - 0.6).abs() < 1e-12);
        assert!(predict_mask(&p).get(0, 0));
    }

    #[test]
    fn identical_heads_average_to_either() {
        let a = logits_for(&[0.1, 0.5, 0.93]);
        let p = combine_heads(&[&a, &a], Averaging::Probabilities).unwrap();
        let single = combine_heads(&[&a], Averaging::Probabilities).unwrap();
        assert!(p.data().iter().zip(single.data()).all(|(x, y)| (x - y).abs() < 1e-15));
        // p = 0.5 is a tie, which goes to background.
        assert_eq!(predict_mask(&single).bits(), &[0, 0, 1]);
    }

    #[test]
    fn total_is_the_exact_sum() {
        let r = LossReport::new(0.1, 0.2);
        assert_eq!(r.total, 0.1 + 0.2);
        assert_eq!(LossReport::new(0.3, 0.0).total, 0.3);
    }
}
