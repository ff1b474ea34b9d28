use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Number of blocks. Each block holds a regular and a shifted sub-layer.
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Tokens per window side.
    pub window_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stages: Vec<StageConfig>,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default = "default_eps")]
    pub eps: f32,
}

fn default_ffn_ratio() -> usize {
    4
}

fn default_eps() -> f32 {
    1e-5
}

impl ModelConfig {
    /// The desk-scale reference model: 32×32 single-channel inputs, two
    /// stages of two blocks each, 2×2-token windows.
    pub fn reference() -> Self {
        ModelConfig {
            patch_size: 4,
            in_channels: 1,
            num_classes: 4,
            stages: vec![
                StageConfig {
                    depth: 2,
                    dim: 8,
                    heads: 2,
                    window_size: 2,
                },
                StageConfig {
                    depth: 2,
                    dim: 16,
                    heads: 2,
                    window_size: 2,
                },
            ],
            ffn_ratio: 4,
            eps: 1e-5,
        }
    }

    /// Two stages of one block each: a 9×9 = 81 config search space.
    pub fn two_block() -> Self {
        let mut cfg = Self::reference();
        for s in &mut cfg.stages {
            s.depth = 1;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return fail("patch_size, in_channels and num_classes must be positive".into());
        }
        if self.stages.is_empty() {
            return fail("at least one stage is required".into());
        }
        if self.ffn_ratio == 0 {
            return fail("ffn_ratio must be positive".into());
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return fail(format!(
                "eps must be finite and non-negative, got {}",
                self.eps
            ));
        }
        for (s, st) in self.stages.iter().enumerate() {
            if st.depth == 0 {
                return fail(format!("stage {s} has depth 0"));
            }
            if st.dim == 0 || st.heads == 0 || st.dim % st.heads != 0 {
                return fail(format!(
                    "stage {s}: dim {} not divisible by heads {}",
                    st.dim, st.heads
                ));
            }
            if st.window_size < 2 || st.window_size % 2 != 0 {
                return fail(format!(
                    "stage {s}: window_size {} must be even and >= 2",
                    st.window_size
                ));
            }
            if s > 0 && st.dim != 2 * self.stages[s - 1].dim {
                return fail(format!(
                    "stage {s}: dim {} must double the previous stage's {}",
                    st.dim,
                    self.stages[s - 1].dim
                ));
            }
        }
        Ok(())
    }

    pub fn depths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.depth).collect()
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    /// Index of the first block of stage `s` in the global block order.
    pub fn block_offset(&self, s: usize) -> usize {
        self.stages[..s].iter().map(|st| st.depth).sum()
    }

    /// Attention sub-layers in the whole model (two per block).
    pub fn num_sublayers(&self) -> usize {
        2 * self.num_blocks()
    }

    /// Checks that `h×w` inputs need no padding anywhere in the network.
    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        for (s, st) in self.stages.iter().enumerate() {
            let unit = self.patch_size * st.window_size * (1 << s);
            if h == 0 || w == 0 || !h.is_multiple_of(unit) || !w.is_multiple_of(unit) {
                return Err(Error::Resolution(format!(
                    "input {h}x{w} is not divisible by {unit} \
                     (patch {} x window {} x 2^{s}) required by stage {s}",
                    self.patch_size, st.window_size
                )));
            }
        }
        Ok(())
    }

    /// Token grid `(rows, cols)` of stage `s` for an `h×w` input.
    pub fn stage_grid(&self, s: usize, h: usize, w: usize) -> (usize, usize) {
        let f = self.patch_size << s;
        (h / f, w / f)
    }

    /// Windows per partition in stage `s`.
    pub fn stage_windows(&self, s: usize, h: usize, w: usize) -> usize {
        let (gh, gw) = self.stage_grid(s, h, w);
        let m = self.stages[s].window_size;
        (gh / m) * (gw / m)
    }

    pub fn tokens_per_window(&self, s: usize) -> usize {
        let m = self.stages[s].window_size;
        m * m
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn final_dim(&self) -> usize {
        self.stages.last().expect("validated").dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_is_valid() {
        let cfg = ModelConfig::reference();
        cfg.validate().unwrap();
        cfg.check_resolution(32, 32).unwrap();
        cfg.check_resolution(128, 128).unwrap();
        assert!(matches!(
            cfg.check_resolution(24, 32),
            Err(Error::Resolution(_))
        ));
        assert_eq!(cfg.stage_grid(0, 32, 32), (8, 8));
        assert_eq!(cfg.stage_windows(0, 32, 32), 16);
        assert_eq!(cfg.stage_windows(1, 32, 32), 4);
    }

    #[test]
    fn rejects_bad_stage_configs() {
        let mut cfg = ModelConfig::reference();
        cfg.stages[0].heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::reference();
        cfg.stages[0].window_size = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::reference();
        cfg.stages[1].depth = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::reference();
        cfg.stages.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_defaults() {
        let json = r#"{"patch_size":4,"in_channels":1,"num_classes":4,
            "stages":[{"depth":1,"dim":8,"heads":2,"window_size":2}]}"#;
        let cfg: ModelConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.ffn_ratio, 4);
        assert_eq!(cfg.eps, 1e-5);
    }
}
