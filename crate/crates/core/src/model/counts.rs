//! How often each input region went through an attention sub-layer.

use std::fmt::Write as _;

use super::config::ModelConfig;
use super::forward::ForwardTrace;
use super::window::PartitionLayout;
use crate::error::{Error, Result};

/// Per-token counts on the first stage's token grid. A token of a coarser
/// stage covers a `2^s × 2^s` block of first-stage tokens, and a count there
/// is credited to each token of the block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionCounts {
    pub height: usize,
    pub width: usize,
    /// Pixels per token side.
    pub patch_size: usize,
    /// Attention sub-layers in the model, the ceiling for any count.
    pub total_sublayers: u32,
    /// Row-major, `height·width`.
    pub counts: Vec<u32>,
}

impl ExecutionCounts {
    pub fn from_trace(cfg: &ModelConfig, trace: &ForwardTrace) -> Self {
        let first = &trace.stages[0];
        let (height, width) = (first.height, first.width);
        let mut counts = vec![0u32; height * width];
        for (s, st) in trace.stages.iter().enumerate() {
            let scale = 1usize << s;
            for blk in &st.keep.blocks {
                for (part, keep) in blk.iter().enumerate() {
                    let layout =
                        PartitionLayout::new(st.height, st.width, st.window_size, part == 1)
                            .expect("trace layouts are valid");
                    for &w in &keep.0 {
                        for t in 0..layout.tokens_per_window() {
                            let (y, x) = layout.token_coords(w, t);
                            for dy in 0..scale {
                                for dx in 0..scale {
                                    counts[(y * scale + dy) * width + x * scale + dx] += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        ExecutionCounts {
            height,
            width,
            patch_size: cfg.patch_size,
            total_sublayers: cfg.num_sublayers() as u32,
            counts,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.counts[y * self.width + x]
    }

    /// Count for the token covering pixel `(py, px)`.
    pub fn at_pixel(&self, py: usize, px: usize) -> u32 {
        self.get(py / self.patch_size, px / self.patch_size)
    }

    pub fn max(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Grey level for a count: `round(count·255 / total_sublayers)`.
    pub fn grey(&self, count: u32) -> u8 {
        ((count as f64 * 255.0 / self.total_sublayers as f64).round()).min(255.0) as u8
    }

    /// Binary PGM at input resolution.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (h, w) = (self.height * self.patch_size, self.width * self.patch_size);
        let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
        for py in 0..h {
            for px in 0..w {
                out.push(self.grey(self.at_pixel(py, px)));
            }
        }
        out
    }

    /// One row per token: `y,x,count`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("y,x,count\n");
        for y in 0..self.height {
            for x in 0..self.width {
                let _ = writeln!(s, "{y},{x},{}", self.get(y, x));
            }
        }
        s
    }

    /// Parses a binary PGM back into `(width, height, pixels)`.
    pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
        let bad = |m: &str| Error::Format(format!("PGM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary greymap"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit maps are supported"));
        }
        let data = &bytes[pos + 1..];
        if data.len() != w * h {
            return Err(bad("pixel count does not match header"));
        }
        Ok((w, h, data.to_vec()))
    }
}
