//! Parameter checkpoints: a text manifest plus one tensor file per entry.
//!
//! ```text
//! trfs-checkpoint 1
//! fingerprint <hex>
//! dtype f64
//! tensor <name> <file> <d0>x<d1>...
//! ```

use std::fs;
use std::path::Path;

use crate::backbone::{Backbone, BackboneParams};
use crate::data::tensorfile::{load_tensor, save_tensor};
use crate::error::{Error, Result};
use crate::net::{NetConfig, Trfs, TrfsParams};
use crate::nn::{named_leaves, ParamMap};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const FORMAT_LINE: &str = "trfs-checkpoint 1";
pub const BACKBONE_PREFIX: &str = "backbone";
pub const NET_PREFIX: &str = "net";

/// Named tensors tagged with the fingerprint of the config that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub fingerprint: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn format_dims(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_dims(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
        && !name.starts_with('.')
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        if self.fingerprint.split_whitespace().count() != 1 {
            return Err(Error::Checkpoint(format!("bad fingerprint {:?}", self.fingerprint)));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("{FORMAT_LINE}\nfingerprint {}\ndtype {}\n", self.fingerprint, T::DTYPE.name());
        for (name, t) in &self.tensors {
            if !valid_name(name) {
                return Err(Error::Checkpoint(format!("bad tensor name {name:?}")));
            }
            let file = format!("{name}.trfs");
            save_tensor(dir.join(&file), t)?;
            manifest.push_str(&format!("tensor {name} {file} {}\n", format_dims(t.shape())));
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let mut lines = manifest.lines();
        let bad = |line: &str| Error::Checkpoint(format!("malformed manifest line {line:?}"));
        if lines.next() != Some(FORMAT_LINE) {
            return Err(Error::Checkpoint("missing format line".into()));
        }
        let mut fingerprint = None;
        let mut tensors = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["fingerprint", fp] => fingerprint = Some(fp.to_string()),
                ["dtype", name] => {
                    if *name != T::DTYPE.name() {
                        return Err(Error::DtypeMismatch {
                            found: if *name == "f32" { "f32" } else { "f64" },
                            requested: T::DTYPE.name(),
                        });
                    }
                }
                ["tensor", name, file, dims] => {
                    let dims = parse_dims(dims).ok_or_else(|| bad(line))?;
                    if !valid_name(name) || file.contains(['/', '\\']) {
                        return Err(bad(line));
                    }
                    let t: Tensor<T> = load_tensor(dir.join(file))?;
                    if t.shape() != dims.as_slice() {
                        return Err(Error::Checkpoint(format!(
                            "{name}: manifest says {dims:?}, file holds {:?}",
                            t.shape()
                        )));
                    }
                    tensors.push((name.to_string(), t));
                }
                _ => return Err(bad(line)),
            }
        }
        let fingerprint = fingerprint.ok_or_else(|| Error::Checkpoint("missing fingerprint".into()))?;
        Ok(Checkpoint { fingerprint, tensors })
    }
}

fn read_manifest(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    fs::read_to_string(&path).map_err(|e| Error::io(path, e))
}

/// Reads only the fingerprint line of a checkpoint manifest.
pub fn read_fingerprint(dir: impl AsRef<Path>) -> Result<String> {
    read_manifest(dir.as_ref())?
        .lines()
        .find_map(|l| l.strip_prefix("fingerprint ").map(|s| s.trim().to_string()))
        .ok_or_else(|| Error::Checkpoint("missing fingerprint".into()))
}

/// Rebuilds `template` with every leaf replaced by the matching checkpoint
/// entry. Fails on a missing name or a changed shape.
fn restore<T: Scalar, M>(template: &M, prefix: &str, ckpt: &Checkpoint<T>, used: &mut usize) -> Result<M>
where
    M: ParamMap<Tensor<T>, Output<Tensor<T>> = M>,
{
    let mut failure = None;
    let restored = template.map_params(prefix, &mut |name, t: &Tensor<T>| {
        match ckpt.get(name) {
            Some(found) if found.shape() == t.shape() => {
                *used += 1;
                found.clone()
            }
            Some(found) => {
                failure.get_or_insert_with(|| {
                    Error::Checkpoint(format!("{name}: expected {:?}, found {:?}", t.shape(), found.shape()))
                });
                t.clone()
            }
            None => {
                failure.get_or_insert_with(|| Error::Checkpoint(format!("missing tensor {name}")));
                t.clone()
            }
        }
    });
    failure.map_or(Ok(restored), Err)
}

impl<T: Scalar> Trfs<T> {
    /// All learned and frozen tensors, network first, then backbone.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = named_leaves(self.params(), NET_PREFIX);
        out.extend(named_leaves(self.backbone().params(), BACKBONE_PREFIX));
        out
    }

    pub fn to_checkpoint(&self, fingerprint: &str) -> Checkpoint<T> {
        Checkpoint {
            fingerprint: fingerprint.to_string(),
            tensors: self.named_tensors(),
        }
    }

    /// Builds a model for `config` whose tensors all come from `ckpt`.
    pub fn from_checkpoint(config: NetConfig, ckpt: &Checkpoint<T>) -> Result<Self> {
        let template: TrfsParams<Tensor<T>> = TrfsParams::init(&config, 0);
        let backbone_template = BackboneParams::<Tensor<T>>::shaped(config.channels());
        let mut used = 0;
        let params = restore(&template, NET_PREFIX, ckpt, &mut used)?;
        let backbone = restore(&backbone_template, BACKBONE_PREFIX, ckpt, &mut used)?;
        if used != ckpt.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors do not belong to this configuration",
                ckpt.tensors.len() - used
            )));
        }
        Ok(Trfs::from_parts(config, params, Backbone::from_params(backbone)))
    }
}
