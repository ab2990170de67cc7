//! Seeded random instances comparing library ops against the oracles.
//! Each function returns the worst max-abs difference over `n` instances.

use rand::Rng;
use trfs_core::fusion::{masked_gap, prior_mask};
use trfs_core::nn::{adaptive_avg_pool_forward, bind_constant, conv2d_forward, mhsa, Initializer};
use trfs_core::{Graph, Tensor};

use super::*;

pub fn mhsa_worst(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for case in 0..n {
        let heads = [1, 2, 4][r.gen_range(0..3)];
        let c = heads * r.gen_range(1..=4);
        let tokens = r.gen_range(1..=9);
        let mut p = Initializer::new(seed ^ case as u64).mhsa::<f64>(c, heads);
        for lin in [&mut p.wq, &mut p.wk, &mut p.wv, &mut p.wo] {
            lin.bias = random(&mut r, &[c], 0.5);
        }
        let x = random(&mut r, &[tokens, c], 2.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = bind_constant(&p, &mut g);
        let y = mhsa(&mut g, xv, &pv).unwrap();
        let proj = |l: &trfs_core::nn::LinearParams<Tensor<f64>>| (l.weight.clone(), l.bias.clone());
        let (q, k, v, o) = (proj(&p.wq), proj(&p.wk), proj(&p.wv), proj(&p.wo));
        let expect = super::mhsa(
            &x,
            Proj { w: &q.0, b: &q.1 },
            Proj { w: &k.0, b: &k.1 },
            Proj { w: &v.0, b: &v.1 },
            Proj { w: &o.0, b: &o.1 },
            heads,
        );
        worst = worst.max(max_abs_diff(g.value(y), &expect));
    }
    worst
}

pub fn conv2d_worst(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (h, w) = (r.gen_range(1..=7), r.gen_range(1..=7));
        let (cin, cout) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let k = [1, 3][r.gen_range(0..2)];
        let x = random(&mut r, &[h, w, cin], 1.0);
        let kernel = random(&mut r, &[cout, cin, k, k], 1.0);
        let bias = random(&mut r, &[cout], 1.0);
        let got = conv2d_forward(&x, &kernel, &bias).unwrap();
        worst = worst.max(max_abs_diff(&got, &conv2d(&x, &kernel, &bias)));
    }
    worst
}

pub fn pool_worst(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (h, w, c) = (r.gen_range(1..=12), r.gen_range(1..=12), r.gen_range(1..=3));
        let (oh, ow) = (r.gen_range(1..=h), r.gen_range(1..=w));
        let x = random(&mut r, &[h, w, c], 3.0);
        let got = adaptive_avg_pool_forward(&x, (oh, ow)).unwrap();
        worst = worst.max(max_abs_diff(&got, &adaptive_avg_pool(&x, oh, ow)));
    }
    worst
}

pub fn masked_gap_worst(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (h, w, c) = (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=6));
        let f = random(&mut r, &[h, w, c], 2.0);
        let p = r.gen_range(0.05..1.0);
        let m = random_mask(&mut r, h, w, p);
        let got = masked_gap(&f, &m).unwrap();
        let expect = Tensor::from_vec(&[c], super::masked_gap(&f, &m)).unwrap();
        worst = worst.max(max_abs_diff(&got, &expect));
    }
    worst
}

pub fn prior_mask_worst(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (h, w, c) = (r.gen_range(1..=6), r.gen_range(1..=6), r.gen_range(1..=5));
        let fq = random(&mut r, &[h, w, c], 1.0);
        let fs = random(&mut r, &[h, w, c], 1.0);
        let p = r.gen_range(0.05..1.0);
        let m = random_mask(&mut r, h, w, p);
        let got = prior_mask(&fq, &fs, &m).unwrap();
        worst = worst.max(max_abs_diff(&got.0, &super::prior_mask(&fq, &fs, &m)));
    }
    worst
}
