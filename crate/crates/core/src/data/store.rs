//! On-disk episode layout: `<root>/<fold>/<mode>/<seed>.trfs`.
//!
//! Each file holds one `[K+1, H, W, 4]` f64 tensor: item 0 is the query,
//! items 1..=K the supports; channels are RGB followed by the mask. The
//! directory's `index.txt` maps each seed to its class id.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::episode::{Episode, Mode, Sample};
use super::mask::BinaryMask;
use super::shapes::ShapeClass;
use super::tensorfile::{load_tensor, save_tensor};

pub const INDEX_FILE: &str = "index.txt";

pub fn episode_dir(root: &Path, fold: usize, mode: Mode) -> PathBuf {
    root.join(fold.to_string()).join(mode.name())
}

pub fn episode_to_tensor(ep: &Episode) -> Tensor<f64> {
    let (h, w) = ep.image_size();
    let items: Vec<&Sample> = std::iter::once(&ep.query).chain(&ep.supports).collect();
    let mut data = Vec::with_capacity(items.len() * h * w * 4);
    for s in &items {
        let img = s.image.data();
        for (p, &m) in s.mask.bits().iter().enumerate() {
            data.extend_from_slice(&img[p * 3..p * 3 + 3]);
            data.push(f64::from(m));
        }
    }
    Tensor::from_vec(&[items.len(), h, w, 4], data).expect("episode layout")
}

pub fn episode_from_tensor(t: &Tensor<f64>, class: ShapeClass, seed: u64) -> Result<Episode> {
    let [n, h, w, 4] = *t.shape() else {
        return Err(Error::shape("episode", format!("expected [K+1, H, W, 4], got {:?}", t.shape())));
    };
    if n < 2 {
        return Err(Error::shape("episode", "an episode needs a query and at least one support"));
    }
    let item = |i: usize| {
        let block = &t.data()[i * h * w * 4..(i + 1) * h * w * 4];
        let image: Vec<f64> = block.chunks(4).flat_map(|px| px[..3].iter().copied()).collect();
        let mask: Vec<bool> = block.chunks(4).map(|px| px[3] >= 0.5).collect();
        Sample {
            image: Tensor::from_vec(&[h, w, 3], image).expect("item layout"),
            mask: BinaryMask::from_bools(h, w, mask),
        }
    };
    Ok(Episode {
        query: item(0),
        supports: (1..n).map(item).collect(),
        class,
        seed,
    })
}

/// Writes episodes into `dir`, appending to its index.
pub fn write_episodes(dir: &Path, episodes: &[Episode]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join(INDEX_FILE);
    let mut index = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&index_path)
        .map_err(|e| Error::io(&index_path, e))?;
    for ep in episodes {
        save_tensor(dir.join(format!("{}.trfs", ep.seed)), &episode_to_tensor(ep))?;
        writeln!(index, "{} {}", ep.seed, ep.class.id()).map_err(|e| Error::io(&index_path, e))?;
    }
    Ok(())
}

/// Reads every episode listed in `dir`'s index, in index order.
pub fn read_episodes(dir: &Path) -> Result<Vec<Episode>> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let bad = || Error::InvalidConfig(format!("{}:{}: malformed index line", index_path.display(), lineno + 1));
        let mut it = line.split_whitespace();
        let seed: u64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let class = it
            .next()
            .and_then(|s| s.parse().ok())
            .and_then(ShapeClass::from_id)
            .ok_or_else(bad)?;
        let t = load_tensor::<f64>(dir.join(format!("{seed}.trfs")))?;
        out.push(episode_from_tensor(&t, class, seed)?);
    }
    Ok(out)
}
