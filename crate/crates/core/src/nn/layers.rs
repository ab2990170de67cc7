//! Linear, normalization, activation, convolution, pooling and resampling
//! layers. Spatial maps are `[H × W × C]`, row-major.

use crate::error::{Error, Result};
use crate::ops::{gemm_nn, gemm_nt, gemm_tn};
use crate::scalar::Scalar;
use crate::tape::{Backward, Graph, Var};
use crate::tensor::Tensor;

use super::params::{Conv2dParams, LayerNormParams, LinearParams};

fn hwc<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::shape(op, format!("expected [H, W, C], got {s:?}"))),
    }
}

// ── linear ───────────────────────────────────────────────────────────

pub fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (out, inp) = match *weight.shape() {
        [o, i] => (o, i),
        ref s => return Err(Error::shape("linear", format!("weight must be a matrix, got {s:?}"))),
    };
    if x.last_dim() != inp || x.rank() == 0 {
        return Err(Error::shape("linear", format!("input {:?} vs weight {:?}", x.shape(), weight.shape())));
    }
    if bias.shape() != [out] {
        return Err(Error::shape("linear", format!("bias {:?} for {out} outputs", bias.shape())));
    }
    let rows = x.len() / inp;
    let mut y = gemm_nt(x.data(), weight.data(), rows, inp, out);
    for row in y.chunks_mut(out) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    Ok(Tensor::new_unchecked(shape, y))
}

struct LinearBack {
    rows: usize,
    inp: usize,
    out: usize,
}

impl<T: Scalar> Backward<T> for LinearBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (rows, inp, out) = (self.rows, self.inp, self.out);
        let dx = needs[0].then(|| gemm_nn(grad, inputs[1].data(), rows, out, inp));
        let dw = needs[1].then(|| gemm_tn(grad, inputs[0].data(), rows, out, inp));
        let db = needs[2].then(|| {
            let mut db = vec![T::zero(); out];
            for row in grad.chunks(out) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            db
        });
        vec![dx, dw, db]
    }
}

/// Applies `p` to every position of `x` (any rank, last extent = in).
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, p: &LinearParams<Var>) -> Result<Var> {
    let value = linear_forward(g.value(x), g.value(p.weight), g.value(p.bias))?;
    let (out, inp) = (g.shape(p.weight)[0], g.shape(p.weight)[1]);
    let rows = g.value(x).len() / inp;
    Ok(g.record(value, &[x, p.weight, p.bias], LinearBack { rows, inp, out }))
}

// ── layer norm ───────────────────────────────────────────────────────

fn normalize_rows<T: Scalar>(x: &[T], width: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.len() / width);
    let n = T::of(width as f64);
    for row in x.chunks(width) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::of(eps)).sqrt();
        xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

pub fn layer_norm_forward<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!("input {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    let (mut y, _) = normalize_rows(x.data(), c, eps);
    for row in y.chunks_mut(c) {
        for ((v, &gm), &bt) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * gm + bt;
        }
    }
    Ok(Tensor::new_unchecked(x.shape().to_vec(), y))
}

struct LayerNormBack {
    eps: f64,
}

impl<T: Scalar> Backward<T> for LayerNormBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let c = x.last_dim();
        let (xhat, inv_std) = normalize_rows(x.data(), c, self.eps);
        let n = T::of(c as f64);

        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (r, (gy, xh)) in grad.chunks(c).zip(xhat.chunks(c)).enumerate() {
            for j in 0..c {
                dgamma[j] += gy[j] * xh[j];
                dbeta[j] += gy[j];
            }
            if let Some(dx) = dx.as_mut() {
                let dxhat: Vec<T> = gy.iter().zip(gamma.data()).map(|(&a, &b)| a * b).collect();
                let sum_d: T = dxhat.iter().copied().sum();
                let sum_dx: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                let row = &mut dx[r * c..(r + 1) * c];
                for j in 0..c {
                    row[j] = inv_std[r] / n * (n * dxhat[j] - sum_d - xh[j] * sum_dx);
                }
            }
        }
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

/// Normalizes the last axis to zero mean / unit variance, then applies the
/// affine `gamma · x̂ + beta`.
pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, x: Var, p: &LayerNormParams<Var>) -> Result<Var> {
    let value = layer_norm_forward(g.value(x), g.value(p.gamma), g.value(p.beta), p.eps)?;
    Ok(g.record(value, &[x, p.gamma, p.beta], LayerNormBack { eps: p.eps }))
}

// ── GELU ─────────────────────────────────────────────────────────────

/// Exact GELU, `x · Φ(x)` with Φ the standard normal CDF.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    x * half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn gelu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

struct GeluBack;

impl<T: Scalar> Backward<T> for GeluBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let skew = T::of(crate::fault::gelu_grad_skew());
        let dx = inputs[0]
            .data()
            .iter()
            .zip(grad)
            .map(|(&x, &g)| g * gelu_grad_scalar(x) * skew)
            .collect();
        vec![Some(dx)]
    }
}

pub fn gelu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let value = gelu_forward(g.value(x));
    g.record(value, &[x], GeluBack)
}

// ── conv2d ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Self> {
        let (h, w, cin) = hwc("conv2d", x)?;
        let (cout, kcin, kh, kw) = match *kernel.shape() {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {s:?}"))),
        };
        if kcin != cin {
            return Err(Error::shape("conv2d", format!("input has {cin} channels, kernel expects {kcin}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} must have odd extents")));
        }
        if bias.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", bias.shape())));
        }
        Ok(ConvGeom { h, w, cin, cout, kh, kw })
    }

    /// Iterates `(out_pixel, in_pixel, tap)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        for y in 0..self.h {
            for x in 0..self.w {
                let o = y * self.w + x;
                for ky in 0..self.kh {
                    let sy = y + ky;
                    if sy < ph || sy - ph >= self.h {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let sx = x + kx;
                        if sx < pw || sx - pw >= self.w {
                            continue;
                        }
                        f(o, (sy - ph) * self.w + (sx - pw), ky * self.kw + kx);
                    }
                }
            }
        }
    }
}

/// Reorders `[co][ci][tap]` to `[tap][ci][co]` so the inner loop runs over
/// output channels contiguously.
fn kernel_tap_major<T: Scalar>(k: &[T], g: &ConvGeom) -> Vec<T> {
    let taps = g.kh * g.kw;
    let mut out = vec![T::zero(); k.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..taps {
                out[(t * g.cin + ci) * g.cout + co] = k[(co * g.cin + ci) * taps + t];
            }
        }
    }
    out
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let geom = ConvGeom::new(x, kernel, bias)?;
    let (cin, cout) = (geom.cin, geom.cout);
    let wk = kernel_tap_major(kernel.data(), &geom);
    let mut out = Vec::with_capacity(geom.h * geom.w * cout);
    for _ in 0..geom.h * geom.w {
        out.extend_from_slice(bias.data());
    }
    let xd = x.data();
    geom.for_each_tap(|o, i, t| {
        let orow = &mut out[o * cout..(o + 1) * cout];
        let xin = &xd[i * cin..(i + 1) * cin];
        for (ci, &xv) in xin.iter().enumerate() {
            let wrow = &wk[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
            for (ov, &wv) in orow.iter_mut().zip(wrow) {
                *ov += xv * wv;
            }
        }
    });
    Ok(Tensor::new_unchecked(vec![geom.h, geom.w, cout], out))
}

struct Conv2dBack {
    geom: ConvGeom,
}

impl<T: Scalar> Backward<T> for Conv2dBack {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let geom = self.geom;
        let (cin, cout, taps) = (geom.cin, geom.cout, geom.kh * geom.kw);
        let xd = inputs[0].data();
        let wk = kernel_tap_major(inputs[1].data(), &geom);

        let mut dx = needs[0].then(|| vec![T::zero(); xd.len()]);
        let mut dwk = needs[1].then(|| vec![T::zero(); wk.len()]);
        geom.for_each_tap(|o, i, t| {
            let grow = &grad[o * cout..(o + 1) * cout];
            if let Some(dx) = dx.as_mut() {
                let drow = &mut dx[i * cin..(i + 1) * cin];
                for (ci, d) in drow.iter_mut().enumerate() {
                    let wrow = &wk[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                    let mut acc = T::zero();
                    for (&gv, &wv) in grow.iter().zip(wrow) {
                        acc += gv * wv;
                    }
                    *d += acc;
                }
            }
            if let Some(dwk) = dwk.as_mut() {
                let xin = &xd[i * cin..(i + 1) * cin];
                for (ci, &xv) in xin.iter().enumerate() {
                    let drow = &mut dwk[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += xv * gv;
                    }
                }
            }
        });
        let dk = dwk.map(|dwk| {
            let mut dk = vec![T::zero(); dwk.len()];
            for co in 0..cout {
                for ci in 0..cin {
                    for t in 0..taps {
                        dk[(co * cin + ci) * taps + t] = dwk[(t * cin + ci) * cout + co];
                    }
                }
            }
            dk
        });
        let db = needs[2].then(|| {
            let mut db = vec![T::zero(); cout];
            for row in grad.chunks(cout) {
                for (d, &gv) in db.iter_mut().zip(row) {
                    *d += gv;
                }
            }
            db
        });
        vec![dx, dk, db]
    }
}

pub fn conv2d<T: Scalar>(g: &mut Graph<T>, x: Var, p: &Conv2dParams<Var>) -> Result<Var> {
    let geom = ConvGeom::new(g.value(x), g.value(p.kernel), g.value(p.bias))?;
    let value = conv2d_forward(g.value(x), g.value(p.kernel), g.value(p.bias))?;
    Ok(g.record(value, &[x, p.kernel, p.bias], Conv2dBack { geom }))
}

// ── adaptive average pooling ─────────────────────────────────────────

/// Bin `i` of `n` over an axis of `len` covers `[floor(i·len/n), ceil((i+1)·len/n))`.
pub fn pool_bin(i: usize, n: usize, len: usize) -> (usize, usize) {
    (i * len / n, ((i + 1) * len).div_ceil(n))
}

fn check_out_size(op: &'static str, input: (usize, usize), out: (usize, usize), upsampling: bool) -> Result<()> {
    let bad = out.0 == 0 || out.1 == 0 || (!upsampling && (out.0 > input.0 || out.1 > input.1));
    if bad {
        return Err(Error::BadOutputSize { op, requested: out, input });
    }
    Ok(())
}

pub fn adaptive_avg_pool_forward<T: Scalar>(x: &Tensor<T>, out: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w, c) = hwc("adaptive_avg_pool", x)?;
    check_out_size("adaptive_avg_pool", (h, w), out, false)?;
    let xd = x.data();
    let mut y = vec![T::zero(); out.0 * out.1 * c];
    for oy in 0..out.0 {
        let (y0, y1) = pool_bin(oy, out.0, h);
        for ox in 0..out.1 {
            let (x0, x1) = pool_bin(ox, out.1, w);
            let cell = &mut y[(oy * out.1 + ox) * c..(oy * out.1 + ox + 1) * c];
            for sy in y0..y1 {
                for sx in x0..x1 {
                    for (v, &s) in cell.iter_mut().zip(&xd[(sy * w + sx) * c..(sy * w + sx + 1) * c]) {
                        *v += s;
                    }
                }
            }
            let inv = T::one() / T::of(((y1 - y0) * (x1 - x0)) as f64);
            cell.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(Tensor::new_unchecked(vec![out.0, out.1, c], y))
}

struct PoolBack {
    h: usize,
    w: usize,
    c: usize,
    out: (usize, usize),
}

impl<T: Scalar> Backward<T> for PoolBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let (h, w, c, out) = (self.h, self.w, self.c, self.out);
        let mut dx = vec![T::zero(); h * w * c];
        for oy in 0..out.0 {
            let (y0, y1) = pool_bin(oy, out.0, h);
            for ox in 0..out.1 {
                let (x0, x1) = pool_bin(ox, out.1, w);
                let inv = T::one() / T::of(((y1 - y0) * (x1 - x0)) as f64);
                let gcell = &grad[(oy * out.1 + ox) * c..(oy * out.1 + ox + 1) * c];
                for sy in y0..y1 {
                    for sx in x0..x1 {
                        for (d, &gv) in dx[(sy * w + sx) * c..(sy * w + sx + 1) * c].iter_mut().zip(gcell) {
                            *d += gv * inv;
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

pub fn adaptive_avg_pool<T: Scalar>(g: &mut Graph<T>, x: Var, out: (usize, usize)) -> Result<Var> {
    let value = adaptive_avg_pool_forward(g.value(x), out)?;
    let (h, w, c) = hwc("adaptive_avg_pool", g.value(x))?;
    Ok(g.record(value, &[x], PoolBack { h, w, c, out }))
}

// ── bilinear resize ──────────────────────────────────────────────────

/// Interpolation taps along one axis: `(lower, upper, upper_weight)`.
///
/// Half-pixel centers: `s = (d + 0.5)·(in/out) − 0.5`, clamped to `[0, in−1]`.
pub fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

pub fn bilinear_resize_forward<T: Scalar>(x: &Tensor<T>, out: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w, c) = hwc("bilinear_resize", x)?;
    check_out_size("bilinear_resize", (h, w), out, true)?;
    if (h, w) == out {
        return Ok(x.clone());
    }
    let (ty, tx) = (resize_taps(h, out.0), resize_taps(w, out.1));
    let xd = x.data();
    let mut y = Vec::with_capacity(out.0 * out.1 * c);
    for &(y0, y1, wy) in &ty {
        let (wy1, wy0) = (T::of(wy), T::of(1.0 - wy));
        for &(x0, x1, wx) in &tx {
            let (wx1, wx0) = (T::of(wx), T::of(1.0 - wx));
            let p = |sy: usize, sx: usize| &xd[(sy * w + sx) * c..(sy * w + sx + 1) * c];
            let (a, b, cc, d) = (p(y0, x0), p(y0, x1), p(y1, x0), p(y1, x1));
            for ch in 0..c {
                y.push(wy0 * (wx0 * a[ch] + wx1 * b[ch]) + wy1 * (wx0 * cc[ch] + wx1 * d[ch]));
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![out.0, out.1, c], y))
}

struct ResizeBack {
    h: usize,
    w: usize,
    c: usize,
    out: (usize, usize),
}

impl<T: Scalar> Backward<T> for ResizeBack {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let (h, w, c) = (self.h, self.w, self.c);
        if (h, w) == self.out {
            return vec![Some(grad.to_vec())];
        }
        let (ty, tx) = (resize_taps(h, self.out.0), resize_taps(w, self.out.1));
        let mut dx = vec![T::zero(); h * w * c];
        let mut o = 0;
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let gcell = &grad[o * c..(o + 1) * c];
                for (sy, sx, wt) in [
                    (y0, x0, (1.0 - wy) * (1.0 - wx)),
                    (y0, x1, (1.0 - wy) * wx),
                    (y1, x0, wy * (1.0 - wx)),
                    (y1, x1, wy * wx),
                ] {
                    let wt = T::of(wt);
                    for (d, &gv) in dx[(sy * w + sx) * c..(sy * w + sx + 1) * c].iter_mut().zip(gcell) {
                        *d += gv * wt;
                    }
                }
                o += 1;
            }
        }
        vec![Some(dx)]
    }
}

pub fn bilinear_resize<T: Scalar>(g: &mut Graph<T>, x: Var, out: (usize, usize)) -> Result<Var> {
    let value = bilinear_resize_forward(g.value(x), out)?;
    let (h, w, c) = hwc("bilinear_resize", g.value(x))?;
    Ok(g.record(value, &[x], ResizeBack { h, w, c, out }))
}
