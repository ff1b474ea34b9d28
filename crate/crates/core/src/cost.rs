//! MAC accounting and wall-clock latency measurement.
//!
//! Only multiply-accumulates in matrix products count. LayerNorm, softmax,
//! the attention scale, residual adds and pooling are free.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::pruning::kept_count;
use crate::sparsity::SparsityConfig;
use crate::tensor::Tensor;

/// `kept·(4NC² + 2N²C)`: QKV and output projections, logits, aggregation.
pub fn macs_attention(tokens: u64, channels: u64, kept_windows: u64) -> u64 {
    kept_windows * (4 * tokens * channels * channels + 2 * tokens * tokens * channels)
}

/// `kept·2·N·C·rC`: the two FFN projections.
pub fn macs_ffn(tokens: u64, channels: u64, ratio: u64, kept_windows: u64) -> u64 {
    kept_windows * 2 * tokens * channels * ratio * channels
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubLayerCost {
    pub stage: usize,
    pub block: usize,
    pub shifted: bool,
    pub windows: usize,
    pub kept_windows: usize,
    pub attention: u64,
    pub ffn: u64,
}

impl SubLayerCost {
    pub fn total(&self) -> u64 {
        self.attention + self.ffn
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub resolution: (usize, usize),
    pub stem: u64,
    pub sublayers: Vec<SubLayerCost>,
    /// Patch merging after each stage but the last.
    pub merges: Vec<u64>,
    pub head: u64,
    /// Attention sub-layers plus the following merge, per stage.
    pub stage_totals: Vec<u64>,
    pub total: u64,
}

pub fn macs_model(
    cfg: &ModelConfig,
    sparsity: &SparsityConfig,
    resolution: (usize, usize),
) -> Result<CostReport> {
    cfg.validate()?;
    let (h, w) = resolution;
    cfg.check_resolution(h, w)?;
    if sparsity.depths() != cfg.depths().as_slice() {
        return Err(Error::Sparsity(format!(
            "sparsity config covers stages {:?}, model has {:?}",
            sparsity.depths(),
            cfg.depths()
        )));
    }
    // Validity (grid, monotonicity) is enforced by SparsityConfig itself.
    let r = cfg.ffn_ratio as u64;
    let (gh, gw) = cfg.stage_grid(0, h, w);
    let stem = (gh * gw) as u64 * cfg.patch_dim() as u64 * cfg.stages[0].dim as u64;
    let mut sublayers = Vec::new();
    let mut merges = Vec::new();
    let mut stage_totals = Vec::new();
    for (s, st) in cfg.stages.iter().enumerate() {
        let windows = cfg.stage_windows(s, h, w);
        let n = cfg.tokens_per_window(s) as u64;
        let c = st.dim as u64;
        let mut stage_total = 0;
        for (b, &t) in sparsity.stage(s).iter().enumerate() {
            let kept = kept_count(windows, t)?;
            for shifted in [false, true] {
                let cost = SubLayerCost {
                    stage: s,
                    block: b,
                    shifted,
                    windows,
                    kept_windows: kept,
                    attention: macs_attention(n, c, kept as u64),
                    ffn: macs_ffn(n, c, r, kept as u64),
                };
                stage_total += cost.total();
                sublayers.push(cost);
            }
        }
        if s + 1 < cfg.stages.len() {
            let (nh, nw) = cfg.stage_grid(s + 1, h, w);
            let m = (nh * nw) as u64 * 4 * c * 2 * c;
            stage_total += m;
            merges.push(m);
        }
        stage_totals.push(stage_total);
    }
    let head = (cfg.final_dim() * cfg.num_classes) as u64;
    let total = stem + stage_totals.iter().sum::<u64>() + head;
    Ok(CostReport {
        resolution,
        stem,
        sublayers,
        merges,
        head,
        stage_totals,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub warmup: usize,
    pub iters: usize,
    /// Recorded iterations in arrival order, milliseconds.
    pub timings_ms: Vec<f64>,
    /// Mean of the temporally middle `iters/2` recorded iterations.
    pub mean_ms: f64,
    pub timer_resolution_ms: f64,
    pub warning: Option<String>,
}

impl LatencyReport {
    /// Pure summary of a recorded timing vector.
    pub fn from_timings(
        warmup: usize,
        timings_ms: Vec<f64>,
        timer_resolution_ms: f64,
    ) -> Result<Self> {
        let iters = timings_ms.len();
        if iters < 4 || !iters.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "latency needs an even iteration count >= 4, got {iters}"
            )));
        }
        let half = iters / 2;
        let start = (iters - half) / 2;
        let mean_ms = timings_ms[start..start + half].iter().sum::<f64>() / half as f64;
        let warning = (mean_ms < 100.0 * timer_resolution_ms).then(|| {
            format!(
                "per-iteration time {mean_ms:.6} ms is under 100x the timer resolution \
                 {timer_resolution_ms:.6} ms; measurements are coarse"
            )
        });
        Ok(LatencyReport {
            warmup,
            iters,
            timings_ms,
            mean_ms,
            timer_resolution_ms,
            warning,
        })
    }
}

/// Smallest observable nonzero step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

/// Runs `warmup` unrecorded iterations, then `iters` timed ones.
pub fn profile_latency(
    mut runner: impl FnMut() -> Result<()>,
    warmup: usize,
    iters: usize,
) -> Result<LatencyReport> {
    if iters < 4 || !iters.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "latency needs an even iteration count >= 4, got {iters}"
        )));
    }
    for _ in 0..warmup {
        runner()?;
    }
    let mut timings = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        runner()?;
        timings.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    LatencyReport::from_timings(warmup, timings, timer_resolution().as_secs_f64() * 1e3)
}

/// Times full forward passes of `model` on `input` under `sparsity`.
pub fn profile_model(
    model: &Model,
    sparsity: &SparsityConfig,
    input: &Tensor,
    warmup: usize,
    iters: usize,
) -> Result<LatencyReport> {
    profile_latency(
        || model.forward_batch(&[input], sparsity).map(|_| ()),
        warmup,
        iters,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResourceConstraint {
    Macs {
        budget: u64,
    },
    Latency {
        budget_ms: f64,
        warmup: usize,
        iters: usize,
    },
}

impl ResourceConstraint {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ResourceConstraint::Macs { budget: 0 } => {
                Err(Error::Config("MACs budget must be positive".into()))
            }
            ResourceConstraint::Latency {
                budget_ms, iters, ..
            } => {
                if !(budget_ms > 0.0 && budget_ms.is_finite()) {
                    return Err(Error::Config("latency budget must be positive".into()));
                }
                if iters < 4 || iters % 2 != 0 {
                    return Err(Error::Config(format!(
                        "latency iters must be even and >= 4, got {iters}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn budget(&self) -> f64 {
        match *self {
            ResourceConstraint::Macs { budget } => budget as f64,
            ResourceConstraint::Latency { budget_ms, .. } => budget_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub pass: bool,
    /// MACs or milliseconds.
    pub value: f64,
}

/// Checks one config. The latency kind needs a model to run.
pub fn check_constraint(
    sparsity: &SparsityConfig,
    constraint: &ResourceConstraint,
    cfg: &ModelConfig,
    resolution: (usize, usize),
    model: Option<&Model>,
) -> Result<ConstraintCheck> {
    constraint.validate()?;
    let value = match *constraint {
        ResourceConstraint::Macs { .. } => macs_model(cfg, sparsity, resolution)?.total as f64,
        ResourceConstraint::Latency { warmup, iters, .. } => {
            let model = model.ok_or_else(|| {
                Error::InvalidArgument("latency constraints need a model to measure".into())
            })?;
            let input = Tensor::zeros(&[resolution.0, resolution.1, cfg.in_channels]);
            profile_model(model, sparsity, &input, warmup, iters)?.mean_ms
        }
    };
    Ok(ConstraintCheck {
        pass: value <= constraint.budget(),
        value,
    })
}

/// [`check_constraint`] with a per-config cache, so latency is measured once
/// per config.
#[derive(Debug)]
pub struct ConstraintChecker {
    pub constraint: ResourceConstraint,
    pub config: ModelConfig,
    pub resolution: (usize, usize),
    model: Option<Model>,
    cache: HashMap<SparsityConfig, ConstraintCheck>,
}

impl ConstraintChecker {
    pub fn new(
        constraint: ResourceConstraint,
        config: ModelConfig,
        resolution: (usize, usize),
        model: Option<Model>,
    ) -> Result<Self> {
        constraint.validate()?;
        config.check_resolution(resolution.0, resolution.1)?;
        if matches!(constraint, ResourceConstraint::Latency { .. }) && model.is_none() {
            return Err(Error::InvalidArgument(
                "latency constraints need a model to measure".into(),
            ));
        }
        Ok(ConstraintChecker {
            constraint,
            config,
            resolution,
            model,
            cache: HashMap::new(),
        })
    }

    pub fn check(&mut self, sparsity: &SparsityConfig) -> Result<ConstraintCheck> {
        if let Some(c) = self.cache.get(sparsity) {
            return Ok(*c);
        }
        let c = check_constraint(
            sparsity,
            &self.constraint,
            &self.config,
            self.resolution,
            self.model.as_ref(),
        )?;
        self.cache.insert(sparsity.clone(), c);
        Ok(c)
    }

    /// Distinct configs measured so far.
    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }
}
