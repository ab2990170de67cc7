//! Fold splits and episodic sampling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

use super::mask::BinaryMask;
use super::shapes::{render_scene, ShapeClass, NUM_CLASSES};

pub const NUM_FOLDS: usize = 4;
pub const CLASSES_PER_FOLD: usize = NUM_CLASSES / NUM_FOLDS;
/// Support masks must keep foreground at this downsampling factor.
pub const FEATURE_STRIDE: usize = 8;
pub const DEFAULT_IMAGE_SIZE: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_classes: Vec<ShapeClass>,
    pub test_classes: Vec<ShapeClass>,
}

/// Four folds; fold `f` holds out classes `3f .. 3f+2` as novel.
pub fn make_folds() -> [FoldSplit; NUM_FOLDS] {
    std::array::from_fn(|fold_index| {
        let (test_classes, train_classes) = ShapeClass::ALL
            .iter()
            .partition(|c| c.id() / CLASSES_PER_FOLD == fold_index);
        FoldSplit {
            fold_index,
            train_classes,
            test_classes,
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Test,
}

impl Mode {
    fn code(self) -> u64 {
        match self {
            Mode::Train => 0,
            Mode::Test => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Test => "test",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Mode::Train),
            "test" => Ok(Mode::Test),
            other => Err(format!("unknown mode {other:?} (expected train|test)")),
        }
    }
}

/// One image with its binary mask.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[H × W × 3]` in `[0, 1]`.
    pub image: Tensor<f64>,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn flip_horizontal(&self) -> Sample {
        let [h, w, c] = *self.image.shape() else { unreachable!("images are rank 3") };
        let src = self.image.data();
        let image = Tensor::from_fn(&[h, w, c], |i| {
            let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
            src[(y * w + (w - 1 - x)) * c + ch]
        });
        Sample {
            image,
            mask: self.mask.flip_horizontal(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }
}

/// A query plus K supports, all of one class.
#[derive(Clone, Debug)]
pub struct Episode {
    pub query: Sample,
    pub supports: Vec<Sample>,
    pub class: ShapeClass,
    pub seed: u64,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.query.dims()
    }
}

const MAX_SUPPORT_REDRAWS: usize = 64;

fn survives_stride(mask: &BinaryMask) -> bool {
    let (h, w) = mask.dims();
    mask.resize_nearest((h / FEATURE_STRIDE).max(1), (w / FEATURE_STRIDE).max(1)).count() > 0
}

/// Draws one episode.
///
/// The class comes uniformly from the split's train or test classes; the
/// query and supports use K+1 distinct scene seeds. Support scenes whose
/// mask would vanish at [`FEATURE_STRIDE`] are redrawn. Training episodes
/// flip each sample horizontally with probability 0.5. Deterministic in all
/// arguments.
///
/// # Panics
///
/// If `shots` is zero or `size` is below the renderer minimum.
pub fn sample_episode(split: &FoldSplit, mode: Mode, shots: usize, seed: u64, size: (usize, usize)) -> Episode {
    assert!(shots >= 1, "an episode needs at least one support");
    let mut rng = rng_for(
        seed,
        "episode",
        &[split.fold_index as u64, mode.code(), shots as u64, size.0 as u64, size.1 as u64],
    );
    let pool = match mode {
        Mode::Train => &split.train_classes,
        Mode::Test => &split.test_classes,
    };
    let class = pool[rng.gen_range(0..pool.len())];

    let mut used: Vec<u64> = Vec::with_capacity(shots + 1);
    let mut fresh_seed = |rng: &mut rand_chacha::ChaCha8Rng| loop {
        let s: u64 = rng.gen();
        if !used.contains(&s) {
            used.push(s);
            break s;
        }
    };

    let render = |scene_seed: u64| {
        let (image, mask) = render_scene(class, scene_seed, size).expect("episode image size is validated by callers");
        Sample { image, mask }
    };

    let query = render(fresh_seed(&mut rng));
    let mut supports = Vec::with_capacity(shots);
    for _ in 0..shots {
        let mut sample = render(fresh_seed(&mut rng));
        for _ in 0..MAX_SUPPORT_REDRAWS {
            if survives_stride(&sample.mask) {
                break;
            }
            sample = render(fresh_seed(&mut rng));
        }
        supports.push(sample);
    }

    let mut episode = Episode {
        query,
        supports,
        class,
        seed,
    };
    if mode == Mode::Train {
        if rng.gen_bool(0.5) {
            episode.query = episode.query.flip_horizontal();
        }
        for s in episode.supports.iter_mut() {
            if rng.gen_bool(0.5) {
                *s = s.flip_horizontal();
            }
        }
    }
    episode
}

/// Episode `i` of the stream rooted at `seed`. Streams are prefix-stable:
/// asking for more episodes never changes the earlier ones.
pub fn stream_episode(split: &FoldSplit, mode: Mode, shots: usize, seed: u64, i: usize, size: (usize, usize)) -> Episode {
    sample_episode(split, mode, shots, derive_seed(seed, "episodes", &[i as u64]), size)
}

pub fn sample_episodes(
    split: &FoldSplit,
    mode: Mode,
    shots: usize,
    n: usize,
    seed: u64,
    size: (usize, usize),
) -> Vec<Episode> {
    (0..n).map(|i| stream_episode(split, mode, shots, seed, i, size)).collect()
}
