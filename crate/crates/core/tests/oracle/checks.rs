//! Property checks shared by the integration and acceptance suites. Each
//! returns `Err` with a description of the first violation.

use rand::seq::SliceRandom;
use rand::Rng;
use trfs_core::data::{make_folds, sample_episode, Mode};
use trfs_core::net::{
    build_pyramid, gem_branch, gem_stack, lem_branch, Averaging, BranchMode, GemConfig, NetConfig, PyramidConfig, Trfs,
    TrfsParams,
};
use trfs_core::nn::{bind_constant, named_leaves, NormPlacement, ParamMap};
use trfs_core::{Graph, Tensor};

use super::*;

/// Adds `U(−scale, scale)` noise to every leaf.
pub fn perturbed<M: ParamMap<Tensor<f64>, Output<Tensor<f64>> = M>>(m: &M, seed: u64, scale: f64) -> M {
    let mut r = rng(seed);
    m.map_params("", &mut |_, t: &Tensor<f64>| {
        Tensor::from_fn(t.shape(), |i| t.data()[i] + r.gen_range(-scale..scale))
    })
}

/// A random valid configuration for a square feature map of side `side`.
pub fn random_config(r: &mut ChaCha8Rng, side: usize) -> NetConfig {
    let n = r.gen_range(1..=side.min(3));
    let mut levels: Vec<usize> = (1..=side).collect();
    levels.shuffle(r);
    let mut scales = levels[..n].to_vec();
    scales.sort_unstable_by(|a, b| b.cmp(a));
    let heads = [1, 2, 4][r.gen_range(0..3)];
    NetConfig {
        pyramid: PyramidConfig::new(scales).unwrap(),
        gem: GemConfig {
            depth: r.gen_range(0..=2),
            heads,
            mlp_ratio: r.gen_range(1..=4),
            width: heads * r.gen_range(1..=3),
        },
        mode: BranchMode::Both,
        norm: NormPlacement::Pre,
        averaging: Averaging::Probabilities,
    }
}

/// `T` and `Z` are both `R¹ × R¹ × n·C` for `count` random configs.
pub fn branch_shapes(count: usize, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    for case in 0..count {
        let side = r.gen_range(2..=8);
        let cfg = random_config(&mut r, side);
        let c = cfg.channels();
        let params = TrfsParams::<Tensor<f64>>::init(&cfg, case as u64);
        let x = random(&mut r, &[side, side, 2 * c + 1], 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let pyr = build_pyramid(&mut g, xv, &cfg.pyramid).map_err(|e| e.to_string())?;
        let gp = bind_constant(&params.gem, &mut g);
        let lp = bind_constant(&params.lem, &mut g);
        let t = gem_branch(&mut g, &pyr, &gp, cfg.norm).map_err(|e| e.to_string())?;
        let z = lem_branch(&mut g, &pyr, &lp).map_err(|e| e.to_string())?;
        let r1 = cfg.pyramid.top();
        let want = [r1, r1, cfg.pyramid.len() * c];
        if g.shape(t) != want || g.shape(z) != want {
            return Err(format!("case {case}: T {:?}, Z {:?}, want {want:?}", g.shape(t), g.shape(z)));
        }
    }
    Ok(())
}

fn toy_config(mode: BranchMode) -> NetConfig {
    NetConfig {
        pyramid: PyramidConfig::new(vec![4, 2]).unwrap(),
        gem: GemConfig { depth: 1, heads: 2, mlp_ratio: 2, width: 8 },
        mode,
        norm: NormPlacement::Pre,
        averaging: Averaging::Probabilities,
    }
}

/// With one branch disabled, every gradient of the other branch is exactly
/// zero while the enabled branch receives a non-zero gradient.
pub fn branch_isolation(seed: u64) -> Result<(), String> {
    let split = &make_folds()[0];
    let ep = sample_episode(split, Mode::Train, 1, seed, (32, 32));
    for (mode, off, on) in [(BranchMode::Gem, "lem", "gem"), (BranchMode::Lem, "gem", "lem")] {
        let mut model = Trfs::<f64>::new(toy_config(mode), seed);
        model.set_params(perturbed(model.params(), seed ^ 1, 0.1));
        let input = model.prepare(&ep).map_err(|e| e.to_string())?;
        let (_, grads) = model.loss_and_grad(&input).map_err(|e| e.to_string())?;
        let leaves = named_leaves(&grads, "");
        for (name, g) in &leaves {
            if name.starts_with(off) && g.data().iter().any(|v| v.to_bits() != 0) {
                return Err(format!("{mode}: {name} has a non-zero gradient"));
            }
        }
        let live = leaves.iter().filter(|(n, g)| n.starts_with(on) && g.data().iter().any(|&v| v != 0.0)).count();
        if live == 0 {
            return Err(format!("{mode}: no gradient reaches the enabled branch"));
        }
    }
    Ok(())
}

/// Reordering the supports of a K-shot episode leaves the logits and the
/// predicted mask bitwise unchanged.
pub fn support_permutation(cases: usize, seed: u64) -> Result<(), String> {
    let split = &make_folds()[2];
    let mut r = rng(seed);
    let mut model = Trfs::<f64>::new(toy_config(BranchMode::Both), seed);
    model.set_params(perturbed(model.params(), seed ^ 2, 0.1));
    for case in 0..cases {
        let ep = sample_episode(split, Mode::Test, 3, seed + case as u64, (32, 32));
        let mut shuffled = ep.clone();
        while shuffled.supports.iter().zip(&ep.supports).all(|(a, b)| a.image.bit_eq(&b.image)) {
            shuffled.supports.shuffle(&mut r);
        }
        let a = model.prepare(&ep).map_err(|e| e.to_string())?;
        let b = model.prepare(&shuffled).map_err(|e| e.to_string())?;
        let (la, lb) = (model.head_logits(&a).unwrap(), model.head_logits(&b).unwrap());
        let same = |x: &Option<Tensor<f64>>, y: &Option<Tensor<f64>>| match (x, y) {
            (Some(x), Some(y)) => x.bit_eq(y),
            (None, None) => true,
            _ => false,
        };
        if !a.fused.tensor().bit_eq(b.fused.tensor()) || !same(&la.gem, &lb.gem) || !same(&la.lem, &lb.lem) {
            return Err(format!("case {case}: support order changed the forward pass"));
        }
        if model.infer_input(&a).unwrap() != model.infer_input(&b).unwrap() {
            return Err(format!("case {case}: support order changed the prediction"));
        }
    }
    Ok(())
}

/// Worst `|stack(Px) − P·stack(x)|` over `cases` seeded GEM stacks.
pub fn token_permutation_worst(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let cfg = toy_config(BranchMode::Gem);
        let c = cfg.channels();
        let params = perturbed(&TrfsParams::<Tensor<f64>>::init(&cfg, case as u64), case as u64 + 100, 0.2);
        let blocks = &params.gem.scales[0].blocks;
        let n = r.gen_range(2..=16);
        let x = random(&mut r, &[n, c], 1.5);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let px = Tensor::from_fn(&[n, c], |i| x.data()[perm[i / c] * c + i % c]);

        let run = |input: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(input.clone());
            let bv = bind_constant(blocks, &mut g);
            let out = gem_stack(&mut g, v, &bv, NormPlacement::Pre).unwrap();
            g.value(out).clone()
        };
        let (y, py) = (run(&x), run(&px));
        // Undo the permutation on the output rows.
        let mut back = vec![0.0; n * c];
        for (i, &src) in perm.iter().enumerate() {
            back[src * c..(src + 1) * c].copy_from_slice(&py.data()[i * c..(i + 1) * c]);
        }
        worst = worst.max(max_abs_diff(&y, &Tensor::from_vec(&[n, c], back).unwrap()));
    }
    worst
}
