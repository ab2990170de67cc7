use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Graph, Var};

use super::layers::{gelu, layer_norm, linear};
use super::params::{MhsaParams, TransformerBlockParams};

/// Where LayerNorm sits relative to the residual branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum NormPlacement {
    /// `x + f(LN(x))`
    #[default]
    Pre,
    /// `LN(x + f(x))`
    Post,
}

impl FromStr for NormPlacement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pre" => Ok(NormPlacement::Pre),
            "post" => Ok(NormPlacement::Post),
            other => Err(format!("unknown norm placement {other:?} (expected pre|post)")),
        }
    }
}

impl std::fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormPlacement::Pre => "pre",
            NormPlacement::Post => "post",
        })
    }
}

/// Multi-head self-attention over `x[N×C]`, without positional encoding.
///
/// Each head attends with `softmax(Q·Kᵀ / sqrt(C/h))·V`; head outputs are
/// concatenated and passed through the output projection. The caller adds
/// the residual.
pub fn mhsa<T: Scalar>(g: &mut Graph<T>, x: Var, p: &MhsaParams<Var>) -> Result<Var> {
    let width = g.value(x).last_dim();
    if p.heads == 0 || !width.is_multiple_of(p.heads) {
        return Err(Error::HeadsDontDivide { width, heads: p.heads });
    }
    if g.value(x).rank() != 2 {
        return Err(Error::shape("mhsa", format!("expected [N, C], got {:?}", g.shape(x))));
    }
    let head_dim = width / p.heads;
    let scale = T::of(1.0 / (head_dim as f64).sqrt());

    let q = linear(g, x, &p.wq)?;
    let k = linear(g, x, &p.wk)?;
    let v = linear(g, x, &p.wv)?;
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.slice_lastdim(q, h * head_dim, head_dim)?;
        let kh = g.slice_lastdim(k, h * head_dim, head_dim)?;
        let vh = g.slice_lastdim(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_lastdim(scores);
        heads.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat_lastdim(&heads)?;
    linear(g, merged, &p.wo)
}

/// Two-layer perceptron with GELU between.
pub fn mlp<T: Scalar>(g: &mut Graph<T>, x: Var, p: &TransformerBlockParams<Var>) -> Result<Var> {
    let hidden = linear(g, x, &p.fc1)?;
    let hidden = gelu(g, hidden);
    linear(g, hidden, &p.fc2)
}

/// One transformer encoder block over `x[N×C]`.
pub fn transformer_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &TransformerBlockParams<Var>,
    norm: NormPlacement,
) -> Result<Var> {
    match norm {
        NormPlacement::Pre => {
            let n1 = layer_norm(g, x, &p.ln1)?;
            let a = mhsa(g, n1, &p.attn)?;
            let h = g.add(x, a)?;
            let n2 = layer_norm(g, h, &p.ln2)?;
            let m = mlp(g, n2, p)?;
            g.add(h, m)
        }
        NormPlacement::Post => {
            let a = mhsa(g, x, &p.attn)?;
            let h = g.add(x, a)?;
            let h = layer_norm(g, h, &p.ln1)?;
            let m = mlp(g, h, p)?;
            let out = g.add(h, m)?;
            layer_norm(g, out, &p.ln2)
        }
    }
}
