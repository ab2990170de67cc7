//! Differentiable forward pass, written against the tape so that training
//! and inference share one code path.

use crate::error::{Error, Result};
use crate::nn::{adaptive_avg_pool, bilinear_resize, conv2d, gelu, linear, transformer_block};
use crate::nn::{Conv2dParams, NormPlacement, TransformerBlockParams};
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

use super::config::PyramidConfig;
use super::params::{HeadParams, LemParams, GemParams, ScaleParams};

fn hw<T: Scalar>(g: &Graph<T>, x: Var) -> (usize, usize) {
    let s = g.shape(x);
    (s[0], s[1])
}

/// `X_i = AdaptiveAvgPool_{R^i}(X)` for every scale.
pub fn build_pyramid<T: Scalar>(g: &mut Graph<T>, x: Var, cfg: &PyramidConfig) -> Result<Vec<Var>> {
    cfg.scales().iter().map(|&r| adaptive_avg_pool(g, x, (r, r))).collect()
}

/// Feature merging: `Conv1×1(x′ ‖ resize(prev)) + x′`, or `x′` at the first scale.
pub fn fmu_merge<T: Scalar>(
    g: &mut Graph<T>,
    xi_prime: Var,
    prev: Option<Var>,
    conv: Option<&Conv2dParams<Var>>,
) -> Result<Var> {
    match (prev, conv) {
        (None, None) => Ok(xi_prime),
        (Some(prev), Some(conv)) => {
            let prev = bilinear_resize(g, prev, hw(g, xi_prime))?;
            let both = g.concat_lastdim(&[xi_prime, prev])?;
            let merged = conv2d(g, both, conv)?;
            g.add(merged, xi_prime)
        }
        _ => Err(Error::shape("fmu_merge", "previous output and merge parameters must be given together")),
    }
}

/// `L` transformer blocks over a token matrix `[N × C]`.
pub fn gem_stack<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    blocks: &[TransformerBlockParams<Var>],
    norm: NormPlacement,
) -> Result<Var> {
    blocks.iter().try_fold(tokens, |z, b| transformer_block(g, z, b, norm))
}

/// `L` residual `z + GELU(Conv3×3(z))` blocks over a feature map.
pub fn lem_stack<T: Scalar>(g: &mut Graph<T>, y: Var, blocks: &[Conv2dParams<Var>]) -> Result<Var> {
    blocks.iter().try_fold(y, |z, b| {
        let c = conv2d(g, z, b)?;
        let a = gelu(g, c);
        g.add(z, a)
    })
}

/// Shared multi-scale pipeline: reduce, merge with the previous scale,
/// enhance, then bring every scale to `R¹` and concatenate.
fn run_branch<T: Scalar, B>(
    g: &mut Graph<T>,
    pyramid: &[Var],
    scales: &[ScaleParams<Var, B>],
    mut enhance: impl FnMut(&mut Graph<T>, Var, &[B]) -> Result<Var>,
) -> Result<Var> {
    if pyramid.len() != scales.len() || pyramid.is_empty() {
        return Err(Error::shape(
            "branch",
            format!("{} pyramid levels for {} parameter scales", pyramid.len(), scales.len()),
        ));
    }
    let top = hw(g, pyramid[0]);
    let mut prev = None;
    let mut outputs = Vec::with_capacity(scales.len());
    for (&xi, p) in pyramid.iter().zip(scales) {
        let reduced = linear(g, xi, &p.reducer)?;
        let y = fmu_merge(g, reduced, prev, p.fmu.as_ref())?;
        let out = enhance(g, y, &p.blocks)?;
        prev = Some(out);
        outputs.push(bilinear_resize(g, out, top)?);
    }
    g.concat_lastdim(&outputs)
}

/// Global enhancement: aggregate `T` of shape `R¹ × R¹ × n·C`.
pub fn gem_branch<T: Scalar>(g: &mut Graph<T>, pyramid: &[Var], p: &GemParams<Var>, norm: NormPlacement) -> Result<Var> {
    run_branch(g, pyramid, &p.scales, |g, y, blocks| {
        let shape = g.shape(y).to_vec();
        let tokens = g.reshape(y, &[shape[0] * shape[1], shape[2]])?;
        let out = gem_stack(g, tokens, blocks, norm)?;
        g.reshape(out, &shape)
    })
}

/// Local enhancement: aggregate `Z` of shape `R¹ × R¹ × n·C`.
pub fn lem_branch<T: Scalar>(g: &mut Graph<T>, pyramid: &[Var], p: &LemParams<Var>) -> Result<Var> {
    run_branch(g, pyramid, &p.scales, lem_stack)
}

/// Two-channel logits at the aggregate's resolution.
pub fn head<T: Scalar>(g: &mut Graph<T>, x: Var, p: &HeadParams<Var>) -> Result<Var> {
    let h = conv2d(g, x, &p.conv3)?;
    let h = gelu(g, h);
    conv2d(g, h, &p.conv1)
}
