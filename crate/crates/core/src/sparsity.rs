//! Per-block window sparsity configurations.
//!
//! Ratios live on the grid {0.0, 0.1, …, 0.8} and are stored as integer
//! tenths so equality, hashing and serialization are exact.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest admissible ratio, in tenths.
pub const MAX_TENTHS: u8 = 8;

/// The full search grid {0, 1, …, 8} tenths.
pub const FULL_GRID: [u8; 9] = [0, 1, 2, 3, 4, 5, 6, 7, 8];

pub const SPARSITY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "SparsityFile", into = "SparsityFile")]
pub struct SparsityConfig {
    depths: Vec<usize>,
    tenths: Vec<u8>,
}

impl SparsityConfig {
    /// Validates grid membership and per-stage monotonicity.
    pub fn new(depths: &[usize], tenths: Vec<u8>) -> Result<Self> {
        check_layout(depths, &tenths)?;
        let cfg = SparsityConfig {
            depths: depths.to_vec(),
            tenths,
        };
        for s in 0..cfg.depths.len() {
            let stage = cfg.stage(s);
            if stage.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Sparsity(format!(
                    "stage {s} ratios {stage:?} (tenths) are not non-descending"
                )));
            }
        }
        Ok(cfg)
    }

    pub fn dense(depths: &[usize]) -> Self {
        Self::uniform(depths, 0).expect("zero is on the grid")
    }

    pub fn uniform(depths: &[usize], tenths: u8) -> Result<Self> {
        let blocks = depths.iter().sum();
        Self::new(depths, vec![tenths; blocks])
    }

    /// Builds a config from decimal ratios, one list per stage.
    pub fn from_stage_ratios(stages: &[Vec<f64>]) -> Result<Self> {
        let depths: Vec<usize> = stages.iter().map(Vec::len).collect();
        let mut tenths = Vec::new();
        for r in stages.iter().flatten() {
            tenths.push(ratio_to_tenths(*r)?);
        }
        Self::new(&depths, tenths)
    }

    /// Per-stage running maximum, making every stage non-descending.
    /// Idempotent; rejects values off the grid.
    pub fn repair(depths: &[usize], raw: &[u8]) -> Result<Self> {
        check_layout(depths, raw)?;
        let mut tenths = raw.to_vec();
        let mut start = 0;
        for &d in depths {
            for i in start + 1..start + d {
                tenths[i] = tenths[i].max(tenths[i - 1]);
            }
            start += d;
        }
        Ok(SparsityConfig {
            depths: depths.to_vec(),
            tenths,
        })
    }

    /// Draws every block uniformly from `grid`, then repairs.
    pub fn sample<R: Rng + ?Sized>(depths: &[usize], grid: &[u8], rng: &mut R) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Sparsity("empty sparsity grid".into()));
        }
        let blocks: usize = depths.iter().sum();
        let raw: Vec<u8> = (0..blocks)
            .map(|_| *grid.choose(rng).expect("grid is non-empty"))
            .collect();
        Self::repair(depths, &raw)
    }

    /// Every valid config for the given stage depths, in lexicographic order.
    pub fn enumerate(depths: &[usize]) -> Vec<Self> {
        fn monotone(len: usize, min: u8, prefix: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
            if len == 0 {
                out.push(prefix.clone());
                return;
            }
            for v in min..=MAX_TENTHS {
                prefix.push(v);
                monotone(len - 1, v, prefix, out);
                prefix.pop();
            }
        }
        let mut configs: Vec<Vec<u8>> = vec![Vec::new()];
        for &d in depths {
            let mut stage = Vec::new();
            monotone(d, 0, &mut Vec::new(), &mut stage);
            configs = configs
                .iter()
                .flat_map(|head| {
                    stage.iter().map(move |tail| {
                        let mut v = head.clone();
                        v.extend_from_slice(tail);
                        v
                    })
                })
                .collect();
        }
        configs
            .into_iter()
            .map(|tenths| SparsityConfig {
                depths: depths.to_vec(),
                tenths,
            })
            .collect()
    }

    pub fn depths(&self) -> &[usize] {
        &self.depths
    }

    /// All blocks, stage-major.
    pub fn tenths(&self) -> &[u8] {
        &self.tenths
    }

    pub fn num_blocks(&self) -> usize {
        self.tenths.len()
    }

    pub fn stage(&self, s: usize) -> &[u8] {
        let start: usize = self.depths[..s].iter().sum();
        &self.tenths[start..start + self.depths[s]]
    }

    pub fn ratio(&self, block: usize) -> f64 {
        self.tenths[block] as f64 / 10.0
    }

    pub fn is_dense(&self) -> bool {
        self.tenths.iter().all(|&t| t == 0)
    }

    /// Mean block ratio.
    pub fn average(&self) -> f64 {
        self.tenths.iter().map(|&t| t as f64).sum::<f64>() / (10.0 * self.tenths.len() as f64)
    }

    pub fn stage_ratios(&self) -> Vec<Vec<f64>> {
        (0..self.depths.len())
            .map(|s| self.stage(s).iter().map(|&t| t as f64 / 10.0).collect())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: SparsityFile = serde_json::from_str(s)?;
        Self::try_from(file)
    }
}

impl TryFrom<SparsityFile> for SparsityConfig {
    type Error = Error;

    fn try_from(file: SparsityFile) -> Result<Self> {
        if file.format_version != SPARSITY_FORMAT_VERSION {
            return Err(Error::Version {
                expected: SPARSITY_FORMAT_VERSION,
                found: file.format_version,
            });
        }
        Self::from_stage_ratios(&file.stages)
    }
}

impl From<SparsityConfig> for SparsityFile {
    fn from(cfg: SparsityConfig) -> Self {
        SparsityFile {
            format_version: SPARSITY_FORMAT_VERSION,
            stages: cfg.stage_ratios(),
        }
    }
}

impl std::fmt::Display for SparsityConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let stages: Vec<String> = (0..self.depths.len())
            .map(|s| {
                let r: Vec<String> = self.stage(s).iter().map(|t| format!("0.{t}")).collect();
                format!("({})", r.join(","))
            })
            .collect();
        write!(f, "{}", stages.join(" "))
    }
}

/// On-disk JSON layout of a sparsity config.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SparsityFile {
    format_version: u32,
    stages: Vec<Vec<f64>>,
}

pub fn ratio_to_tenths(r: f64) -> Result<u8> {
    let scaled = r * 10.0;
    let rounded = scaled.round();
    if !(0.0..=MAX_TENTHS as f64).contains(&rounded) || (scaled - rounded).abs() > 1e-6 {
        return Err(Error::Sparsity(format!(
            "ratio {r} is not on the grid {{0.0, 0.1, ..., 0.8}}"
        )));
    }
    Ok(rounded as u8)
}

fn check_layout(depths: &[usize], tenths: &[u8]) -> Result<()> {
    let blocks: usize = depths.iter().sum();
    if depths.is_empty() || depths.contains(&0) {
        return Err(Error::Sparsity(format!("invalid stage depths {depths:?}")));
    }
    if tenths.len() != blocks {
        return Err(Error::Sparsity(format!(
            "config has {} ratios but the model has {blocks} blocks",
            tenths.len()
        )));
    }
    if let Some(bad) = tenths.iter().find(|&&t| t > MAX_TENTHS) {
        return Err(Error::Sparsity(format!("ratio 0.{bad} exceeds 0.8")));
    }
    Ok(())
}
