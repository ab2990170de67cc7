//! Synthetic shape dataset, fold splits, episodic sampling and tensor files.

mod episode;
mod mask;
mod shapes;
pub mod store;
pub mod tensorfile;

pub use episode::{
    make_folds, sample_episode, sample_episodes, stream_episode, Episode, FoldSplit, Mode, Sample, CLASSES_PER_FOLD, DEFAULT_IMAGE_SIZE,
    FEATURE_STRIDE, NUM_FOLDS,
};
pub use mask::BinaryMask;
pub use shapes::{
    render_scene, render_scene_with, Scene, SceneOptions, ShapeClass, ShapeGeometry, MIN_SCENE_SIZE, NUM_CLASSES,
};
pub use tensorfile::{load_any, load_tensor, save_tensor, AnyTensor};
