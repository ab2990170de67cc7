//! Conformance kit: seeded inputs and reference-precision outputs of the
//! core operations, for checking another implementation file by file.
//!
//! Each op gets a directory of tensor files named `in.*`, `param.*` and
//! `out.*`. `manifest.txt` lists them per op.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use trfs_core::data::store::episode_to_tensor;
use trfs_core::data::{make_folds, sample_episode, save_tensor, BinaryMask, Mode};
use trfs_core::fusion::{masked_gap, prior_mask};
use trfs_core::net::{build_pyramid, fmu_merge, gem_branch, lem_branch, Trfs, TrfsParams};
use trfs_core::nn::{adaptive_avg_pool_forward, bind_constant, mhsa, named_leaves, Initializer};
use trfs_core::rng::{derive_seed, rng_for};
use trfs_core::{Graph, Tensor};

use crate::commands::perturb;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const OPS: [&str; 8] = [
    "masked_gap",
    "prior_mask",
    "mhsa",
    "adaptive_avg_pool",
    "fmu_merge",
    "gem_branch",
    "lem_branch",
    "forward_loss",
];

pub const MANIFEST: &str = "manifest.txt";
pub const FORMAT_LINE: &str = "trfs-golden 1";

struct OpFiles {
    dir: PathBuf,
    names: Vec<String>,
}

impl OpFiles {
    fn put(&mut self, name: &str, t: &Tensor<f64>) -> Result<()> {
        let file = format!("{name}.trfs");
        save_tensor(self.dir.join(&file), t)?;
        self.names.push(file);
        Ok(())
    }

    fn put_all(&mut self, prefix: &str, named: Vec<(String, Tensor<f64>)>) -> Result<()> {
        for (n, t) in named {
            self.put(&format!("{prefix}.{n}"), &t)?;
        }
        Ok(())
    }
}

fn mask_tensor(m: &BinaryMask) -> Tensor<f64> {
    m.to_tensor()
}

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    let mut m = BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(0.4));
    if m.count() == 0 {
        m = BinaryMask::from_fn(h, w, |y, x| y == 0 && x == 0);
    }
    m
}

fn core_err(e: trfs_core::Error) -> CliError {
    CliError::Core(e)
}

fn emit(op: &str, cfg: &RunConfig, f: &mut OpFiles) -> Result<()> {
    let r = cfg.feature_side();
    let c = cfg.channels;
    let op_index = OPS.iter().position(|o| *o == op).expect("known op") as u64;
    let mut rng = rng_for(cfg.seed, "golden", &[op_index]);
    let params = || perturb(&TrfsParams::<Tensor<f64>>::init(&cfg.net(), cfg.seed), derive_seed(cfg.seed, "golden-params", &[]), 0.1);
    match op {
        "masked_gap" => {
            let feat = random(&mut rng, &[r, r, c]);
            let m = random_mask(&mut rng, r, r);
            f.put("in.features", &feat)?;
            f.put("in.mask", &mask_tensor(&m))?;
            f.put("out.prototype", &masked_gap(&feat, &m)?)?;
        }
        "prior_mask" => {
            let fq = random(&mut rng, &[r, r, c]);
            let fs = random(&mut rng, &[r, r, c]);
            let m = random_mask(&mut rng, r, r);
            f.put("in.query_features", &fq)?;
            f.put("in.support_features", &fs)?;
            f.put("in.support_mask", &mask_tensor(&m))?;
            f.put("out.prior", &prior_mask(&fq, &fs, &m)?.0)?;
        }
        "mhsa" => {
            let p = perturb(&Initializer::new(derive_seed(cfg.seed, "golden-mhsa", &[])).mhsa::<f64>(c, cfg.heads), cfg.seed, 0.1);
            let x = random(&mut rng, &[r * r, c]);
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let pv = bind_constant(&p, &mut g);
            let y = mhsa(&mut g, xv, &pv)?;
            f.put("in.x", &x)?;
            f.put("in.heads", &Tensor::from_vec(&[1], vec![cfg.heads as f64]).map_err(core_err)?)?;
            f.put_all("param", named_leaves(&p, "attn"))?;
            f.put("out.y", g.value(y))?;
        }
        "adaptive_avg_pool" => {
            let x = random(&mut rng, &[r, r, 2 * c + 1]);
            f.put("in.x", &x)?;
            for &s in cfg.scales.scales() {
                f.put(&format!("out.pool_{s}"), &adaptive_avg_pool_forward(&x, (s, s))?)?;
            }
        }
        "fmu_merge" => {
            let scales = cfg.scales.scales();
            let (hi, lo) = (scales[0], *scales.get(1).unwrap_or(&scales[0]));
            let xi = random(&mut rng, &[lo, lo, c]);
            let prev = random(&mut rng, &[hi, hi, c]);
            let p = params();
            let conv = match p.gem.scales.get(1).and_then(|s| s.fmu.clone()) {
                Some(conv) => conv,
                None => Initializer::new(derive_seed(cfg.seed, "golden-fmu", &[])).conv2d(2 * c, c, 1),
            };
            let mut g = Graph::new();
            let (xv, pv) = (g.constant(xi.clone()), g.constant(prev.clone()));
            let cv = bind_constant(&conv, &mut g);
            let y = fmu_merge(&mut g, xv, Some(pv), Some(&cv))?;
            f.put("in.x_prime", &xi)?;
            f.put("in.prev", &prev)?;
            f.put_all("param", named_leaves(&conv, "fmu"))?;
            f.put("out.y", g.value(y))?;
        }
        "gem_branch" | "lem_branch" => {
            let x = random(&mut rng, &[r, r, 2 * c + 1]);
            let p = params();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let pyr = build_pyramid(&mut g, xv, &cfg.scales)?;
            let out = if op == "gem_branch" {
                let pv = bind_constant(&p.gem, &mut g);
                f.put_all("param", named_leaves(&p.gem, "gem"))?;
                gem_branch(&mut g, &pyr, &pv, cfg.norm)?
            } else {
                let pv = bind_constant(&p.lem, &mut g);
                f.put_all("param", named_leaves(&p.lem, "lem"))?;
                lem_branch(&mut g, &pyr, &pv)?
            };
            f.put("in.fused", &x)?;
            f.put("out.aggregate", g.value(out))?;
        }
        "forward_loss" => {
            let fold = cfg.fold.indices()[0];
            let episode = sample_episode(&make_folds()[fold], Mode::Train, cfg.shots, derive_seed(cfg.seed, "golden-episode", &[]), cfg.size());
            let mut model = Trfs::<f64>::new(cfg.net(), cfg.seed);
            model.set_params(params());
            let (report, logits) = model.forward_loss(&episode)?;
            f.put("in.episode", &episode_to_tensor(&episode))?;
            f.put_all("param", model.named_tensors())?;
            if let Some(t) = &logits.gem {
                f.put("out.gem_logits", t)?;
            }
            if let Some(t) = &logits.lem {
                f.put("out.lem_logits", t)?;
            }
            let losses = Tensor::from_vec(&[3], vec![report.l_gem, report.l_lem, report.total]).map_err(core_err)?;
            f.put("out.losses", &losses)?;
        }
        other => unreachable!("unknown op {other}"),
    }
    Ok(())
}

/// Regenerates the kit under `out`, replacing any previous contents.
pub fn golden(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let mut cfg = cfg.clone();
    cfg.precision = trfs_core::Precision::Reference;
    cfg.validate()?;
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| CliError::io(out, e))?;
    }
    let mut manifest = format!("{FORMAT_LINE}\nfingerprint {}\n", cfg.fingerprint());
    for op in OPS {
        let dir = out.join(op);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let mut files = OpFiles { dir, names: Vec::new() };
        emit(op, &cfg, &mut files)?;
        manifest.push_str(&format!("op {op} {}\n", files.names.join(" ")));
    }
    let path = out.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| CliError::io(&path, e))?;
    Ok(out.to_path_buf())
}

/// Op names listed in a kit's manifest, in order.
pub fn manifest_ops(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.strip_prefix("op "))
        .filter_map(|l| l.split_whitespace().next())
        .map(str::to_string)
        .collect())
}
