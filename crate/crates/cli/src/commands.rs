//! The subcommands, as library functions returning their results.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! config.txt                   canonical config, fingerprint on line 1
//! data/<fold>/{train,test}/    gen-data episodes
//! fold_<i>/checkpoint/         train output
//! fold_<i>/loss.tsv            per-step losses
//! eval_report.txt              eval output
//! golden/                      conformance kit
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use trfs_core::checkpoint::{read_fingerprint, Checkpoint};
use trfs_core::data::store::{episode_dir, write_episodes};
use trfs_core::data::{make_folds, sample_episode, sample_episodes, stream_episode, FoldSplit, Mode};
use trfs_core::eval::{cross_validate, fold_seed, EvalReport, EvalSettings};
use trfs_core::gradcheck::{check_model, GroupReport, DEFAULT_STEP};
use trfs_core::net::{EpisodeInput, Trfs};
use trfs_core::nn::ParamMap;
use trfs_core::rng::{derive_seed, rng_for};
use trfs_core::train::{fit, StepLog};
use trfs_core::{Precision, Scalar, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
/// Half-width of the uniform noise added to every parameter before a
/// gradient check, so that no group sits at a degenerate initial value.
pub const GRADCHECK_PERTURBATION: f64 = 0.1;

pub fn fold_dir(cfg: &RunConfig, fold: usize) -> PathBuf {
    cfg.output_dir.join(format!("fold_{fold}"))
}

pub fn checkpoint_dir(cfg: &RunConfig, fold: usize) -> PathBuf {
    fold_dir(cfg, fold).join("checkpoint")
}

pub fn report_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("eval_report.txt")
}

/// Root seed of fold `fold`'s training pool.
pub fn train_pool_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, "data", &[fold as u64])
}

fn split(fold: usize) -> FoldSplit {
    make_folds()[fold].clone()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn stamp_config(cfg: &RunConfig) -> Result<()> {
    let text = format!("# fingerprint {}\n{}", cfg.fingerprint(), cfg.to_text());
    write_file(&cfg.output_dir.join("config.txt"), &text)
}

/// Writes each selected fold's training pool and test episodes.
pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let root = cfg.output_dir.join("data");
    if root.exists() {
        fs::remove_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
    }
    for fold in cfg.fold.indices() {
        let s = split(fold);
        let train = sample_episodes(&s, Mode::Train, cfg.shots, cfg.train_episodes, train_pool_seed(cfg.seed, fold), cfg.size());
        write_episodes(&episode_dir(&root, fold, Mode::Train), &train)?;
        let test: Vec<_> = (0..cfg.test_episodes)
            .map(|i| stream_episode(&s, Mode::Test, cfg.shots, fold_seed(cfg.seed, fold), i, cfg.size()))
            .collect();
        write_episodes(&episode_dir(&root, fold, Mode::Test), &test)?;
    }
    write_file(&root.join("fingerprint.txt"), &format!("{}\n", cfg.fingerprint()))?;
    stamp_config(cfg)?;
    Ok(root)
}

/// Trains one fold's model on its fixed pool of training episodes.
pub fn train_model<T: Scalar>(
    cfg: &RunConfig,
    fold: usize,
    mut log: impl FnMut(&StepLog),
) -> Result<(Trfs<T>, Vec<StepLog>)> {
    cfg.validate()?;
    let s = split(fold);
    let mut model = Trfs::<T>::new(cfg.net(), cfg.seed);
    let episodes = sample_episodes(&s, Mode::Train, cfg.shots, cfg.train_episodes, train_pool_seed(cfg.seed, fold), cfg.size());
    let pool: Vec<EpisodeInput<T>> = episodes.iter().map(|e| model.prepare(e)).collect::<Result<_, _>>()?;
    let history = fit(&mut model, &pool, &cfg.hyper(), cfg.seed, &mut log)?;
    Ok((model, history))
}

fn loss_log(fingerprint: &str, history: &[StepLog]) -> String {
    let mut out = format!("# fingerprint {fingerprint}\nstep\tl_gem\tl_lem\ttotal\tlr\n");
    for h in history {
        out.push_str(&format!("{}\t{:?}\t{:?}\t{:?}\t{:?}\n", h.step, h.loss.l_gem, h.loss.l_lem, h.loss.total, h.lr));
    }
    out
}

pub struct TrainedFold {
    pub fold: usize,
    pub checkpoint: PathBuf,
    pub history: Vec<StepLog>,
}

fn train_typed<T: Scalar>(cfg: &RunConfig, progress: &mut dyn FnMut(usize, &StepLog)) -> Result<Vec<TrainedFold>> {
    let fp = cfg.fingerprint();
    let mut out = Vec::new();
    for fold in cfg.fold.indices() {
        let (model, history) = train_model::<T>(cfg, fold, |s| progress(fold, s))?;
        let dir = checkpoint_dir(cfg, fold);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        model.to_checkpoint(&fp).save(&dir)?;
        write_file(&fold_dir(cfg, fold).join("loss.tsv"), &loss_log(&fp, &history))?;
        out.push(TrainedFold {
            fold,
            checkpoint: dir,
            history,
        });
    }
    stamp_config(cfg)?;
    Ok(out)
}

pub fn train(cfg: &RunConfig, progress: &mut dyn FnMut(usize, &StepLog)) -> Result<Vec<TrainedFold>> {
    match cfg.precision {
        Precision::Fast => train_typed::<f32>(cfg, progress),
        Precision::Reference => train_typed::<f64>(cfg, progress),
    }
}

/// Loads a fold's checkpoint after checking that it was made by a config
/// with the same fingerprint.
pub fn load_model<T: Scalar>(cfg: &RunConfig, fold: usize) -> Result<Trfs<T>> {
    let dir = checkpoint_dir(cfg, fold);
    let found = read_fingerprint(&dir)?;
    let expected = cfg.fingerprint();
    if found != expected {
        return Err(CliError::FingerprintMismatch { expected, found });
    }
    let ckpt = Checkpoint::<T>::load(&dir)?;
    Ok(Trfs::from_checkpoint(cfg.net(), &ckpt)?)
}

fn eval_typed<T: Scalar>(cfg: &RunConfig) -> Result<EvalReport> {
    let splits: Vec<FoldSplit> = cfg.fold.indices().into_iter().map(split).collect();
    let settings = EvalSettings {
        n_episodes: cfg.test_episodes,
        shots: cfg.shots,
        image_size: cfg.image_size,
        seed: cfg.seed,
    };
    let mut load_error = None;
    let report = cross_validate(
        &splits,
        |s| {
            load_model::<T>(cfg, s.fold_index).map_err(|e| {
                load_error = Some(e);
                trfs_core::Error::Checkpoint("load failed".into())
            })
        },
        settings,
        &cfg.fingerprint(),
    );
    if let Some(e) = load_error {
        return Err(e);
    }
    Ok(report?)
}

/// Evaluates the trained checkpoints and writes the report.
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let report = match cfg.precision {
        Precision::Fast => eval_typed::<f32>(cfg),
        Precision::Reference => eval_typed::<f64>(cfg),
    }?;
    write_file(&report_path(cfg), &report.to_string())?;
    Ok(report)
}

/// Adds seeded `U(−a, a)` noise to every leaf.
pub fn perturb<M>(params: &M, seed: u64, a: f64) -> M
where
    M: ParamMap<Tensor<f64>, Output<Tensor<f64>> = M>,
{
    let mut rng = rng_for(seed, "gradcheck", &[]);
    params.map_params("", &mut |_, t: &Tensor<f64>| Tensor::from_fn(t.shape(), |i| t.data()[i] + rng.gen_range(-a..a)))
}

/// Finite-difference check of every parameter group in reference precision
/// on one seeded training episode of the first selected fold. With
/// `gradcheck_probes` set, only that many evenly spaced elements of each
/// leaf are perturbed.
pub fn gradcheck(cfg: &RunConfig) -> Result<Vec<GroupReport>> {
    let mut cfg = cfg.clone();
    cfg.precision = Precision::Reference;
    cfg.validate()?;
    let fold = cfg.fold.indices()[0];
    let mut model = Trfs::<f64>::new(cfg.net(), cfg.seed);
    model.set_params(perturb(model.params(), cfg.seed, GRADCHECK_PERTURBATION));
    let episode = sample_episode(&split(fold), Mode::Train, cfg.shots, derive_seed(cfg.seed, "gradcheck-episode", &[]), cfg.size());
    let input = model.prepare(&episode)?;
    Ok(check_model(&model, &input, DEFAULT_STEP, (cfg.gradcheck_probes > 0).then_some(cfg.gradcheck_probes))?)
}

pub fn gradcheck_table(reports: &[GroupReport], mut out: impl Write) -> std::io::Result<()> {
    let width = reports.iter().map(|r| r.group.len()).max().unwrap_or(5).max(5);
    writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>12}  result", "group", "params", "probed", "max rel err")?;
    for r in reports {
        let verdict = if group_passes(r) { "pass" } else { "FAIL" };
        writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>12.3e}  {verdict}", r.group, r.params, r.probed, r.max_rel_error)?;
    }
    Ok(())
}

/// False for errors at or above the threshold, and for NaN.
pub fn group_passes(r: &GroupReport) -> bool {
    r.max_rel_error < GRADCHECK_THRESHOLD
}

/// Fails when any group reaches the threshold.
pub fn gradcheck_verdict(reports: &[GroupReport]) -> Result<()> {
    let failed = reports.iter().filter(|r| !group_passes(r)).count();
    if failed > 0 {
        return Err(CliError::GradcheckFailed {
            failed,
            groups: reports.len(),
            threshold: GRADCHECK_THRESHOLD,
        });
    }
    Ok(())
}
