use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::NormPlacement;

/// Pooled resolutions `R¹ > R² > … > Rⁿ`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PyramidConfig {
    scales: Vec<usize>,
}

impl PyramidConfig {
    pub fn new(scales: Vec<usize>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidConfig("scales must not be empty".into()));
        }
        if scales.contains(&0) {
            return Err(Error::InvalidConfig(format!("scales must be positive, got {scales:?}")));
        }
        if scales.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidConfig(format!("scales must be strictly decreasing, got {scales:?}")));
        }
        Ok(PyramidConfig { scales })
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Finest resolution `R¹`, where branch outputs are aggregated.
    pub fn top(&self) -> usize {
        self.scales[0]
    }
}

impl fmt::Display for PyramidConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.scales.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for PyramidConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let scales = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("bad scale {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        PyramidConfig::new(scales)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GemConfig {
    /// Blocks per scale, shared by both branches.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Feature width `C`.
    pub width: usize,
}

impl Default for GemConfig {
    fn default() -> Self {
        GemConfig {
            depth: 3,
            heads: 8,
            mlp_ratio: 4,
            width: 32,
        }
    }
}

/// Which enhancement branches run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum BranchMode {
    Gem,
    Lem,
    #[default]
    Both,
}

impl BranchMode {
    pub const ALL: [BranchMode; 3] = [BranchMode::Gem, BranchMode::Lem, BranchMode::Both];

    pub fn gem(self) -> bool {
        matches!(self, BranchMode::Gem | BranchMode::Both)
    }

    pub fn lem(self) -> bool {
        matches!(self, BranchMode::Lem | BranchMode::Both)
    }
}

impl fmt::Display for BranchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchMode::Gem => "gem",
            BranchMode::Lem => "lem",
            BranchMode::Both => "both",
        })
    }
}

impl FromStr for BranchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gem" => Ok(BranchMode::Gem),
            "lem" => Ok(BranchMode::Lem),
            "both" => Ok(BranchMode::Both),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?} (expected gem|lem|both)"))),
        }
    }
}

/// How the two heads are combined at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Averaging {
    #[default]
    Probabilities,
    Logits,
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::Probabilities => "probabilities",
            Averaging::Logits => "logits",
        })
    }
}

impl FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probabilities" | "probs" => Ok(Averaging::Probabilities),
            "logits" => Ok(Averaging::Logits),
            other => Err(Error::InvalidConfig(format!(
                "unknown averaging {other:?} (expected probabilities|logits)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NetConfig {
    pub pyramid: PyramidConfig,
    pub gem: GemConfig,
    pub mode: BranchMode,
    pub norm: NormPlacement,
    pub averaging: Averaging,
}

impl NetConfig {
    pub fn channels(&self) -> usize {
        self.gem.width
    }

    /// Feature-map side the pyramid is built from, for square images.
    pub fn validate(&self, feature_side: usize) -> Result<()> {
        let g = &self.gem;
        if g.width == 0 {
            return Err(Error::InvalidConfig("channel width must be positive".into()));
        }
        if g.heads == 0 || !g.width.is_multiple_of(g.heads) {
            return Err(Error::HeadsDontDivide {
                width: g.width,
                heads: g.heads,
            });
        }
        if g.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("mlp_ratio must be positive".into()));
        }
        if self.pyramid.top() > feature_side {
            return Err(Error::InvalidConfig(format!(
                "top scale {} exceeds feature resolution {feature_side}",
                self.pyramid.top()
            )));
        }
        Ok(())
    }
}
