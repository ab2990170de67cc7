//! Straight-loop reference implementations used as test oracles.
//!
//! Nothing here calls into the library's numeric code: each function is a
//! direct transcription of the operation's definition over plain `f64`
//! loops, with the library's `Tensor` used only as storage.

#![allow(dead_code)]

pub mod cases;
pub mod checks;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trfs_core::data::BinaryMask;
use trfs_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn at3(t: &Tensor<f64>, y: usize, x: usize, c: usize) -> f64 {
    let s = t.shape();
    t.data()[(y * s[1] + x) * s[2] + c]
}

/// `y = x·Wᵀ + b` row by row, `W` stored `[out, in]`.
pub fn linear(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / inp;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut acc = b.data()[o];
            for i in 0..inp {
                acc += x.data()[r * inp + i] * w.data()[o * inp + i];
            }
            y[r * out + o] = acc;
        }
    }
    Tensor::from_vec(&shape, y).unwrap()
}

/// Zero-padded same-size cross-correlation, kernel `[Cout, Cin, k, k]`.
pub fn conv2d(x: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let k = |o: usize, i: usize, dy: usize, dx: usize| kernel.data()[((o * cin + i) * kh + dy) * kw + dx];
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            for o in 0..cout {
                let mut acc = bias.data()[o];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let sy = y as isize + dy as isize - ph;
                        let sx = xx as isize + dx as isize - pw;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        for i in 0..cin {
                            acc += k(o, i, dy, dx) * at3(x, sy as usize, sx as usize, i);
                        }
                    }
                }
                out[(y * w + xx) * cout + o] = acc;
            }
        }
    }
    Tensor::from_vec(&[h, w, cout], out).unwrap()
}

pub fn adaptive_avg_pool(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let lo = |i: usize, n: usize, len: usize| (i * len) / n;
    let hi = |i: usize, n: usize, len: usize| ((i + 1) * len).div_ceil(n);
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let (mut sum, mut n) = (0.0, 0usize);
                for y in lo(oy, oh, h)..hi(oy, oh, h) {
                    for xx in lo(ox, ow, w)..hi(ox, ow, w) {
                        sum += at3(x, y, xx, ch);
                        n += 1;
                    }
                }
                out[(oy * ow + ox) * c + ch] = sum / n as f64;
            }
        }
    }
    Tensor::from_vec(&[oh, ow, c], out).unwrap()
}

/// Half-pixel bilinear resize with clamped source coordinates.
pub fn bilinear_resize(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let src = |d: usize, inp: usize, out: usize| {
        let s = ((d as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        let (y0, y1, fy) = src(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = src(ox, w, ow);
            for ch in 0..c {
                let top = at3(x, y0, x0, ch) * (1.0 - fx) + at3(x, y0, x1, ch) * fx;
                let bot = at3(x, y1, x0, ch) * (1.0 - fx) + at3(x, y1, x1, ch) * fx;
                out[(oy * ow + ox) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::from_vec(&[oh, ow, c], out).unwrap()
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

pub fn layer_norm(x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let c = x.shape()[x.rank() - 1];
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma.data()[i] + beta.data()[i];
        }
    }
    Tensor::from_vec(x.shape(), out).unwrap()
}

pub struct Proj<'a> {
    pub w: &'a Tensor<f64>,
    pub b: &'a Tensor<f64>,
}

/// Explicit-loop multi-head self-attention over `x[N×C]`.
pub fn mhsa(x: &Tensor<f64>, wq: Proj, wk: Proj, wv: Proj, wo: Proj, heads: usize) -> Tensor<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let d = c / heads;
    let q = linear(x, wq.w, wq.b);
    let k = linear(x, wk.w, wk.b);
    let v = linear(x, wv.w, wv.b);
    let (q, k, v) = (q.data(), k.data(), v.data());
    let mut merged = vec![0.0; n * c];
    for h in 0..heads {
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += q[i * c + h * d + t] * k[j * c + h * d + t];
                }
                *s = dot / (d as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..n {
                let a = (scores[j] - m).exp() / z;
                for t in 0..d {
                    merged[i * c + h * d + t] += a * v[j * c + h * d + t];
                }
            }
        }
    }
    linear(&Tensor::from_vec(&[n, c], merged).unwrap(), wo.w, wo.b)
}

pub fn masked_gap(f: &Tensor<f64>, m: &BinaryMask) -> Vec<f64> {
    let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut sum = vec![0.0; c];
    let mut n = 0.0;
    for y in 0..h {
        for x in 0..w {
            if m.get(y, x) {
                n += 1.0;
                for (ch, s) in sum.iter_mut().enumerate() {
                    *s += at3(f, y, x, ch);
                }
            }
        }
    }
    sum.into_iter().map(|s| s / n).collect()
}

/// Cosine with the library's stabilizer: `a·b / (|a||b| + 1e-8)`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + 1e-8)
}

pub fn prior_mask(fq: &Tensor<f64>, fs: &Tensor<f64>, m: &BinaryMask) -> Tensor<f64> {
    let (h, w, c) = (fq.shape()[0], fq.shape()[1], fq.shape()[2]);
    let (hs, ws) = (fs.shape()[0], fs.shape()[1]);
    let pixel = |t: &Tensor<f64>, y: usize, x: usize| (0..c).map(|ch| at3(t, y, x, ch)).collect::<Vec<_>>();
    let mut scores = vec![f64::NEG_INFINITY; h * w];
    for y in 0..h {
        for x in 0..w {
            let q = pixel(fq, y, x);
            for sy in 0..hs {
                for sx in 0..ws {
                    if m.get(sy, sx) {
                        scores[y * w + x] = scores[y * w + x].max(cosine(&q, &pixel(fs, sy, sx)));
                    }
                }
            }
        }
    }
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Tensor::from_vec(&[h, w], scores.iter().map(|s| (s - lo) / (hi - lo + 1e-7)).collect()).unwrap()
}

/// Mean over pixels of `−log softmax(logits)[label]`, `logits [H×W×2]`.
pub fn pixel_cross_entropy(logits: &Tensor<f64>, mask: &BinaryMask) -> f64 {
    let (h, w) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let z0 = at3(logits, y, x, 0);
            let z1 = at3(logits, y, x, 1);
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let z = if mask.get(y, x) { z1 } else { z0 };
            total += lse - z;
        }
    }
    total / (h * w) as f64
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    loop {
        let m = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(p));
        if m.count() > 0 {
            return m;
        }
    }
}

pub fn concat(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let rows = parts[0].len() / parts[0].shape()[parts[0].rank() - 1];
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[p.rank() - 1]).collect();
    let mut out = Vec::new();
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = parts[0].shape().to_vec();
    *shape.last_mut().unwrap() = widths.iter().sum();
    Tensor::from_vec(&shape, out).unwrap()
}

pub fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

pub fn map(a: &Tensor<f64>, f: impl Fn(f64) -> f64) -> Tensor<f64> {
    Tensor::from_vec(a.shape(), a.data().iter().map(|&v| f(v)).collect()).unwrap()
}

pub fn reshape(a: &Tensor<f64>, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(shape, a.data().to_vec()).unwrap()
}

use trfs_core::net::{BranchParams, HeadParams};
use trfs_core::nn::{Conv2dParams, LayerNormParams, LinearParams, TransformerBlockParams};

fn lin(x: &Tensor<f64>, p: &LinearParams<Tensor<f64>>) -> Tensor<f64> {
    linear(x, &p.weight, &p.bias)
}

fn ln(x: &Tensor<f64>, p: &LayerNormParams<Tensor<f64>>) -> Tensor<f64> {
    layer_norm(x, &p.gamma, &p.beta, p.eps)
}

fn conv(x: &Tensor<f64>, p: &Conv2dParams<Tensor<f64>>) -> Tensor<f64> {
    conv2d(x, &p.kernel, &p.bias)
}

/// Pre-norm block: `h = x + mhsa(ln1 x)`, `h + fc2(gelu(fc1(ln2 h)))`.
pub fn transformer_block(x: &Tensor<f64>, p: &TransformerBlockParams<Tensor<f64>>) -> Tensor<f64> {
    let a = &p.attn;
    let pr = |l: &'_ LinearParams<Tensor<f64>>| (l.weight.clone(), l.bias.clone());
    let (q, k, v, o) = (pr(&a.wq), pr(&a.wk), pr(&a.wv), pr(&a.wo));
    let att = mhsa(
        &ln(x, &p.ln1),
        Proj { w: &q.0, b: &q.1 },
        Proj { w: &k.0, b: &k.1 },
        Proj { w: &v.0, b: &v.1 },
        Proj { w: &o.0, b: &o.1 },
        a.heads,
    );
    let h = add(x, &att);
    let m = lin(&map(&lin(&ln(&h, &p.ln2), &p.fc1), gelu), &p.fc2);
    add(&h, &m)
}

pub fn fmu(xi: &Tensor<f64>, prev: Option<&Tensor<f64>>, p: Option<&Conv2dParams<Tensor<f64>>>) -> Tensor<f64> {
    match (prev, p) {
        (Some(prev), Some(p)) => {
            let up = bilinear_resize(prev, xi.shape()[0], xi.shape()[1]);
            add(&conv(&concat(&[xi.clone(), up]), p), xi)
        }
        _ => xi.clone(),
    }
}

fn branch<B>(
    pyramid: &[Tensor<f64>],
    p: &BranchParams<Tensor<f64>, B>,
    enhance: impl Fn(&Tensor<f64>, &[B]) -> Tensor<f64>,
) -> Tensor<f64> {
    let top = (pyramid[0].shape()[0], pyramid[0].shape()[1]);
    let mut prev: Option<Tensor<f64>> = None;
    let mut outs = Vec::new();
    for (x, s) in pyramid.iter().zip(&p.scales) {
        let y = fmu(&lin(x, &s.reducer), prev.as_ref(), s.fmu.as_ref());
        let out = enhance(&y, &s.blocks);
        outs.push(bilinear_resize(&out, top.0, top.1));
        prev = Some(out);
    }
    concat(&outs)
}

pub fn gem_branch(pyramid: &[Tensor<f64>], p: &BranchParams<Tensor<f64>, TransformerBlockParams<Tensor<f64>>>) -> Tensor<f64> {
    branch(pyramid, p, |y, blocks| {
        let (h, w, c) = (y.shape()[0], y.shape()[1], y.shape()[2]);
        let mut t = reshape(y, &[h * w, c]);
        for b in blocks {
            t = transformer_block(&t, b);
        }
        reshape(&t, &[h, w, c])
    })
}

pub fn lem_branch(pyramid: &[Tensor<f64>], p: &BranchParams<Tensor<f64>, Conv2dParams<Tensor<f64>>>) -> Tensor<f64> {
    branch(pyramid, p, |y, blocks| {
        let mut z = y.clone();
        for b in blocks {
            z = add(&z, &map(&conv(&z, b), gelu));
        }
        z
    })
}

pub fn head(x: &Tensor<f64>, p: &HeadParams<Tensor<f64>>) -> Tensor<f64> {
    conv(&map(&conv(x, &p.conv3), gelu), &p.conv1)
}
