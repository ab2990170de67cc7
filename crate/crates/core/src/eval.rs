//! IoU metric, episodic fold evaluation and cross-validation reports.
//!
//! Per-class IoU accumulates intersection and union pixel counts over all
//! episodes of that class before dividing. Fold mIoU is the mean of the
//! per-class IoUs of the fold's test classes that were sampled.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{stream_episode, BinaryMask, Episode, FoldSplit, Mode, ShapeClass};
use crate::error::{Error, Result};
use crate::net::Trfs;
use crate::rng::derive_seed;
use crate::scalar::Scalar;

/// Foreground intersection and union pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub intersection: u64,
    pub union: u64,
}

impl ConfusionCounts {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape("iou", format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
        }
        let (mut intersection, mut union) = (0, 0);
        for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
            intersection += u64::from(p & g);
            union += u64::from(p | g);
        }
        Ok(ConfusionCounts { intersection, union })
    }

    /// `intersection / union`, or 1 when both masks were empty.
    pub fn iou(self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            intersection: self.intersection + o.intersection,
            union: self.union + o.union,
        }
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Foreground IoU of two binary masks.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    ConfusionCounts::of(pred, gt).map(ConfusionCounts::iou)
}

/// Anything that predicts a query mask for an episode.
pub trait Segmenter: Sync {
    fn segment(&self, episode: &Episode) -> Result<BinaryMask>;
}

impl<T: Scalar> Segmenter for Trfs<T> {
    fn segment(&self, episode: &Episode) -> Result<BinaryMask> {
        self.infer(episode)
    }
}

impl<F: Fn(&Episode) -> Result<BinaryMask> + Sync> Segmenter for F {
    fn segment(&self, episode: &Episode) -> Result<BinaryMask> {
        self(episode)
    }
}

/// Counts per class, keyed by class.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts(pub BTreeMap<ShapeClass, ConfusionCounts>);

impl ClassCounts {
    pub fn add(&mut self, class: ShapeClass, counts: ConfusionCounts) {
        *self.0.entry(class).or_default() += counts;
    }

    pub fn per_class_iou(&self) -> Vec<(ShapeClass, f64)> {
        self.0.iter().map(|(&c, &n)| (c, n.iou())).collect()
    }

    /// Mean of the per-class IoUs; 0 when no class was seen.
    pub fn miou(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.values().map(|n| n.iou()).sum::<f64>() / self.0.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub n_episodes: usize,
    pub per_class: Vec<(ShapeClass, f64)>,
    pub miou: f64,
}

/// Settings shared by every fold of an evaluation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSettings {
    pub n_episodes: usize,
    pub shots: usize,
    pub image_size: usize,
    pub seed: u64,
}

/// Seed of fold `fold` under root `seed`; independent of which other folds run.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, "eval", &[fold as u64])
}

/// Evaluates `model` on `n_episodes` test episodes of `split` drawn from
/// `seed`. Episodes run in parallel; the result does not depend on their
/// completion order.
pub fn evaluate_fold<S: Segmenter + ?Sized>(
    split: &FoldSplit,
    model: &S,
    n_episodes: usize,
    shots: usize,
    seed: u64,
    image_size: usize,
) -> Result<FoldResult> {
    if n_episodes == 0 {
        return Err(Error::EmptyInput { op: "evaluate_fold" });
    }
    let size = (image_size, image_size);
    let scored: Vec<(ShapeClass, ConfusionCounts)> = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let episode = stream_episode(split, Mode::Test, shots, seed, i, size);
            let pred = model.segment(&episode)?;
            Ok((episode.class, ConfusionCounts::of(&pred, &episode.query.mask)?))
        })
        .collect::<Result<_>>()?;
    let mut counts = ClassCounts::default();
    for (class, c) in scored {
        counts.add(class, c);
    }
    Ok(FoldResult {
        fold: split.fold_index,
        seed,
        n_episodes,
        per_class: counts.per_class_iou(),
        miou: counts.miou(),
    })
}

/// Builds one model per requested fold with `factory` and evaluates it with
/// that fold's derived seed. Folds may be given in any order.
pub fn cross_validate<S, F>(
    splits: &[FoldSplit],
    mut factory: F,
    settings: EvalSettings,
    config_hash: &str,
) -> Result<EvalReport>
where
    S: Segmenter,
    F: FnMut(&FoldSplit) -> Result<S>,
{
    if splits.is_empty() {
        return Err(Error::EmptyInput { op: "cross_validate" });
    }
    let mut folds = Vec::with_capacity(splits.len());
    for split in splits {
        let model = factory(split)?;
        let seed = fold_seed(settings.seed, split.fold_index);
        folds.push(evaluate_fold(split, &model, settings.n_episodes, settings.shots, seed, settings.image_size)?);
    }
    Ok(EvalReport::new(folds, settings.seed, config_hash))
}

/// Per-fold and mean mIoU of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    /// Sorted by fold index.
    pub folds: Vec<FoldResult>,
    pub mean: f64,
}

impl EvalReport {
    pub fn new(mut folds: Vec<FoldResult>, seed: u64, config_hash: &str) -> Self {
        folds.sort_by_key(|f| f.fold);
        let mean = folds.iter().map(|f| f.miou).sum::<f64>() / folds.len().max(1) as f64;
        EvalReport {
            config_hash: config_hash.to_string(),
            seed,
            folds,
            mean,
        }
    }

    pub fn n_episodes(&self) -> usize {
        self.folds.iter().map(|f| f.n_episodes).sum()
    }

    pub fn fold(&self, index: usize) -> Option<&FoldResult> {
        self.folds.iter().find(|f| f.fold == index)
    }
}

// Floats use Rust's shortest round-trip formatting, so parsing recovers
// every bit.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "config_hash = {}", self.config_hash)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "n_episodes = {}", self.n_episodes())?;
        for r in &self.folds {
            writeln!(f, "fold_{} = {:?}", r.fold, r.miou)?;
        }
        writeln!(f, "mean = {:?}", self.mean)?;
        for r in &self.folds {
            writeln!(f, "fold_{}.seed = {}", r.fold, r.seed)?;
            writeln!(f, "fold_{}.n_episodes = {}", r.fold, r.n_episodes)?;
            for (class, v) in &r.per_class {
                writeln!(f, "fold_{}.class_{} = {:?}", r.fold, class.id(), v)?;
            }
        }
        Ok(())
    }
}

impl FromStr for EvalReport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidConfig(format!("eval report: {msg}"));
        let mut keys: BTreeMap<&str, &str> = BTreeMap::new();
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("no '=' in {line:?}")))?;
            if keys.insert(k.trim(), v.trim()).is_some() {
                return Err(bad(format!("duplicate key {}", k.trim())));
            }
        }
        fn take<'a>(keys: &mut BTreeMap<&str, &'a str>, k: &str) -> Result<&'a str> {
            keys.remove(k).ok_or_else(|| Error::InvalidConfig(format!("eval report: missing key {k}")))
        }
        fn num<N: FromStr>(k: &str, v: &str) -> Result<N> {
            v.parse().map_err(|_| Error::InvalidConfig(format!("eval report: bad value {v:?} for {k}")))
        }

        let config_hash = take(&mut keys, "config_hash")?.to_string();
        let seed = num("seed", take(&mut keys, "seed")?)?;
        let total: usize = num("n_episodes", take(&mut keys, "n_episodes")?)?;
        let mean: f64 = num("mean", take(&mut keys, "mean")?)?;

        let fold_ids: Vec<usize> = keys
            .keys()
            .filter_map(|k| k.strip_prefix("fold_").filter(|r| !r.contains('.')))
            .map(|r| num("fold index", r))
            .collect::<Result<_>>()?;
        let mut folds = Vec::with_capacity(fold_ids.len());
        for fold in fold_ids {
            let p = format!("fold_{fold}");
            let miou = num(&p, take(&mut keys, &p)?)?;
            let seed = num("seed", take(&mut keys, &format!("{p}.seed"))?)?;
            let n_episodes = num("n_episodes", take(&mut keys, &format!("{p}.n_episodes"))?)?;
            let class_prefix = format!("{p}.class_");
            let class_keys: Vec<String> =
                keys.keys().filter(|k| k.starts_with(&class_prefix)).map(|k| k.to_string()).collect();
            let mut per_class = Vec::with_capacity(class_keys.len());
            for k in class_keys {
                let id: usize = num(&k, &k[class_prefix.len()..])?;
                let class = ShapeClass::from_id(id).ok_or_else(|| bad(format!("unknown class {id}")))?;
                per_class.push((class, num(&k, take(&mut keys, &k)?)?));
            }
            per_class.sort_by_key(|(c, _)| *c);
            folds.push(FoldResult {
                fold,
                seed,
                n_episodes,
                per_class,
                miou,
            });
        }
        if let Some(k) = keys.keys().next() {
            return Err(bad(format!("unknown key {k}")));
        }
        folds.sort_by_key(|f| f.fold);
        let report = EvalReport {
            config_hash,
            seed,
            folds,
            mean,
        };
        if report.n_episodes() != total {
            return Err(bad(format!("n_episodes {total} disagrees with per-fold counts")));
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_folds;

    fn mask(bits: &[u8], w: usize) -> BinaryMask {
        BinaryMask::from_fn(bits.len() / w, w, |y, x| bits[y * w + x] != 0)
    }

    #[test]
    fn iou_examples() {
        let gt = mask(&[1, 1, 1, 1, 0, 0, 0, 0], 4);
        assert_eq!(iou(&gt, &gt).unwrap(), 1.0);
        let disjoint = mask(&[0, 0, 0, 0, 1, 1, 0, 0], 4);
        assert_eq!(iou(&disjoint, &gt).unwrap(), 0.0);
        let partial = mask(&[1, 1, 0, 0, 1, 1, 0, 0], 4);
        assert!((iou(&partial, &gt).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        let empty = BinaryMask::empty(2, 4);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert!(matches!(iou(&empty, &BinaryMask::empty(4, 2)), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn accumulation_divides_summed_counts() {
        // Episode A: 1/1, episode B: 1/3. Mean of ratios would be 2/3.
        let mut c = ClassCounts::default();
        c.add(ShapeClass::Ring, ConfusionCounts { intersection: 1, union: 1 });
        c.add(ShapeClass::Ring, ConfusionCounts { intersection: 1, union: 3 });
        assert_eq!(c.miou(), 0.5);
    }

    #[test]
    fn oracle_and_blank_models() {
        let split = &make_folds()[1];
        let oracle = |e: &Episode| Ok(e.query.mask.clone());
        let blank = |e: &Episode| Ok(BinaryMask::empty(e.query.mask.height(), e.query.mask.width()));
        assert_eq!(evaluate_fold(split, &oracle, 12, 1, 5, 32).unwrap().miou, 1.0);
        assert_eq!(evaluate_fold(split, &blank, 12, 1, 5, 32).unwrap().miou, 0.0);
    }

    #[test]
    fn report_round_trips() {
        let folds = make_folds();
        let noisy = |e: &Episode| {
            let m = &e.query.mask;
            Ok(BinaryMask::from_fn(m.height(), m.width(), |y, x| m.get(y, x) ^ ((x * 7 + y * 3) % 11 == 0)))
        };
        let settings = EvalSettings {
            n_episodes: 6,
            shots: 1,
            image_size: 32,
            seed: 3,
        };
        let report = cross_validate(&folds, |_| Ok(noisy), settings, "00ff").unwrap();
        let text = report.to_string();
        let back: EvalReport = text.parse().unwrap();
        assert_eq!(back, report);
        assert_eq!(back.to_string(), text);
        let mean = report.folds.iter().map(|f| f.miou).sum::<f64>() / 4.0;
        assert_eq!(report.mean, mean);
    }
}
