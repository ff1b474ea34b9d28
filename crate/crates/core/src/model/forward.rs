//! Window-wise forward pass.
//!
//! The residual stream of a stage is kept as a `[B·h·w, C]` token matrix
//! (images stacked, tokens row-major). Each attention sub-layer gathers the
//! token rows of its kept windows straight out of that matrix, runs
//! LN → MHSA → residual → LN → FFN → residual on the gathered rows with
//! windows as the batch dimension, and writes the rows back. Rows of pruned
//! windows are never touched, so they carry their input features forward.

use super::config::ModelConfig;
use super::counts::ExecutionCounts;
use super::params::{BlockParams, MergeParams, ModelParams, SubLayerParams};
use super::window::PartitionLayout;
use crate::error::{Error, Result};
use crate::pruning::{stage_keep_sets_raw, KeepSet, StageKeepSets};
use crate::sparsity::SparsityConfig;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Keep sets used by one image in one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    /// Token grid of the stage.
    pub height: usize,
    pub width: usize,
    pub window_size: usize,
    pub keep: StageKeepSets,
}

/// Everything pruning decided for one image during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub stages: Vec<StageTrace>,
}

#[derive(Debug)]
pub struct BatchForward {
    /// `[B, num_classes]`
    pub logits: Var,
    pub traces: Vec<ForwardTrace>,
}

/// Residual stream of a stage.
#[derive(Debug, Clone, Copy)]
pub struct StageState {
    /// `[batch·height·width, channels]`
    pub tokens: Var,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Puts every parameter on the tape, as trainable leaves or constants.
pub fn bind_params(tape: &mut Tape, params: &ModelParams, trainable: bool) -> ModelParams<Var> {
    params.map(|_, t| tape.leaf(t.clone(), trainable))
}

fn image_dims(cfg: &ModelConfig, images: &[&Tensor]) -> Result<(usize, usize)> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (h, w) = match *first.shape() {
        [h, w, c] if c == cfg.in_channels => (h, w),
        _ => {
            return Err(Error::Shape {
                op: "image",
                lhs: first.shape().to_vec(),
                rhs: vec![cfg.in_channels],
            })
        }
    };
    if let Some(bad) = images.iter().find(|im| im.shape() != first.shape()) {
        return Err(Error::Shape {
            op: "image batch",
            lhs: first.shape().to_vec(),
            rhs: bad.shape().to_vec(),
        });
    }
    cfg.check_resolution(h, w)?;
    Ok((h, w))
}

/// Flattens non-overlapping `P×P` patches into rows `[B·(H/P)·(W/P), P²·C_in]`,
/// each patch ordered `(dy, dx, channel)`.
pub fn extract_patches(cfg: &ModelConfig, images: &[&Tensor]) -> Result<Tensor> {
    let (h, w) = image_dims(cfg, images)?;
    let (p, cin) = (cfg.patch_size, cfg.in_channels);
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(images.len() * h * w * cin);
    for im in images {
        let src = im.data();
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    let start = ((py * p + dy) * w + px * p) * cin;
                    data.extend_from_slice(&src[start..start + p * cin]);
                }
            }
        }
    }
    Tensor::new(vec![images.len() * gh * gw, p * p * cin], data)
}

pub fn patch_embed(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    images: &[&Tensor],
) -> Result<StageState> {
    let (h, w) = image_dims(cfg, images)?;
    let patches = tape.constant(extract_patches(cfg, images)?);
    let tokens = tape.linear(patches, params.patch_weight, params.patch_bias)?;
    Ok(StageState {
        tokens,
        batch: images.len(),
        height: h / cfg.patch_size,
        width: w / cfg.patch_size,
        channels: cfg.stages[0].dim,
    })
}

/// Fixed encoding of normalized token coordinates, `[B·h·w, C]` tiled over
/// the batch. The first `C/2` channels encode the row as
/// `cos(π·k·(y + ½)/h)` for `k = 1, 2, …`, the rest the column likewise.
/// Depending only on normalized position, it is defined at every resolution.
pub fn position_encoding(batch: usize, height: usize, width: usize, channels: usize) -> Tensor {
    let half = channels / 2;
    let mut one = Vec::with_capacity(height * width * channels);
    for y in 0..height {
        let u = (y as f32 + 0.5) / height as f32;
        for x in 0..width {
            let v = (x as f32 + 0.5) / width as f32;
            for j in 0..channels {
                let (coord, k) = if j < half {
                    (u, j + 1)
                } else {
                    (v, j - half + 1)
                };
                one.push((std::f32::consts::PI * k as f32 * coord).cos());
            }
        }
    }
    let mut data = Vec::with_capacity(batch * one.len());
    for _ in 0..batch {
        data.extend_from_slice(&one);
    }
    Tensor::new(vec![batch * height * width, channels], data).expect("sizes agree")
}

/// Multi-head self-attention over `num_windows` independent windows of
/// `tokens` tokens each. `x` is `[num_windows·tokens, C]`, already
/// normalized. Returns the output projection, same shape.
pub fn window_attention(
    tape: &mut Tape,
    x: Var,
    num_windows: usize,
    tokens: usize,
    heads: usize,
    p: &SubLayerParams<Var>,
) -> Result<Var> {
    let c = tape.value(x).last_dim();
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "channels {c} not divisible by heads {heads}"
        )));
    }
    if tape.value(x).shape() != [num_windows * tokens, c] {
        return Err(Error::Shape {
            op: "window_attention",
            lhs: tape.value(x).shape().to_vec(),
            rhs: vec![num_windows * tokens, c],
        });
    }
    let d = c / heads;
    let qkv = tape.linear(x, p.qkv_weight, p.qkv_bias)?;

    // qkv[(w·N + n), part·C + h·d + e] → part[(w·heads + h), n, e]
    let split = |part: usize| {
        let mut index = Vec::with_capacity(num_windows * tokens * c);
        for w in 0..num_windows {
            for h in 0..heads {
                for n in 0..tokens {
                    let row = (w * tokens + n) * 3 * c + part * c + h * d;
                    index.extend(row..row + d);
                }
            }
        }
        index
    };
    let head_shape = [num_windows * heads, tokens, d];
    let q = tape.gather(qkv, split(0), &head_shape)?;
    let k = tape.gather(qkv, split(1), &head_shape)?;
    let v = tape.gather(qkv, split(2), &head_shape)?;

    let logits = tape.batch_matmul(q, k, true)?;
    let logits = tape.scale(logits, 1.0 / (d as f32).sqrt());
    let attn = tape.softmax(logits);
    let out = tape.batch_matmul(attn, v, false)?;

    // out[(w·heads + h), n, e] → merged[(w·N + n), h·d + e]
    let mut index = Vec::with_capacity(num_windows * tokens * c);
    for w in 0..num_windows {
        for n in 0..tokens {
            for h in 0..heads {
                let start = ((w * heads + h) * tokens + n) * d;
                index.extend(start..start + d);
            }
        }
    }
    let merged = tape.gather(out, index, &[num_windows * tokens, c])?;
    tape.linear(merged, p.proj_weight, p.proj_bias)
}

/// LN → MHSA → residual → LN → FFN → residual on gathered window tokens.
pub fn sublayer_forward(
    tape: &mut Tape,
    x: Var,
    num_windows: usize,
    tokens: usize,
    heads: usize,
    eps: f32,
    p: &SubLayerParams<Var>,
) -> Result<Var> {
    let h = tape.layer_norm(x, p.norm1_weight, p.norm1_bias, eps)?;
    let a = window_attention(tape, h, num_windows, tokens, heads, p)?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, p.norm2_weight, p.norm2_bias, eps)?;
    let h = tape.linear(h, p.fc1_weight, p.fc1_bias)?;
    let h = tape.gelu(h);
    let h = tape.linear(h, p.fc2_weight, p.fc2_bias)?;
    tape.add(x, h)
}

/// Runs one sub-layer on the kept windows of one partition, for every image.
fn partition_forward(
    tape: &mut Tape,
    state: &StageState,
    layout: &PartitionLayout,
    keep: &[&KeepSet],
    heads: usize,
    eps: f32,
    p: &SubLayerParams<Var>,
) -> Result<Var> {
    let hw = state.height * state.width;
    let n = layout.tokens_per_window();
    let nw = layout.num_windows();
    let total: usize = keep.iter().map(|k| k.len()).sum();
    let mut rows = Vec::with_capacity(total * n);
    for (b, ks) in keep.iter().enumerate() {
        for &w in &ks.0 {
            if w >= nw {
                return Err(Error::Index {
                    what: "keep set window",
                    index: w,
                    len: nw,
                });
            }
            rows.extend((0..n).map(|t| b * hw + layout.token_position(w, t)));
        }
    }
    let x = tape.gather_rows(state.tokens, rows.clone())?;
    let y = sublayer_forward(tape, x, total, n, heads, eps, p)?;
    tape.overwrite_rows(state.tokens, y, rows)
}

/// One block: the regular-partition sub-layer, then the shifted one, each on
/// its kept windows. `keep[b]` holds image `b`'s `[regular, shifted]` sets.
pub fn block_forward(
    tape: &mut Tape,
    state: &StageState,
    window_size: usize,
    heads: usize,
    eps: f32,
    block: &BlockParams<Var>,
    keep: &[&[KeepSet; 2]],
) -> Result<StageState> {
    if keep.len() != state.batch {
        return Err(Error::InvalidArgument(format!(
            "{} keep sets for a batch of {}",
            keep.len(),
            state.batch
        )));
    }
    let mut state = *state;
    for (part, shifted) in [(0usize, false), (1, true)] {
        let layout = PartitionLayout::new(state.height, state.width, window_size, shifted)?;
        let sets: Vec<&KeepSet> = keep.iter().map(|k| &k[part]).collect();
        let sub = if shifted {
            &block.shifted
        } else {
            &block.regular
        };
        state.tokens = partition_forward(tape, &state, &layout, &sets, heads, eps, sub)?;
    }
    Ok(state)
}

/// 2×2 neighbourhood concatenation `[x(0,0), x(1,0), x(0,1), x(1,1)]`, then a
/// linear map `4C → 2C`.
pub fn patch_merge(
    tape: &mut Tape,
    state: &StageState,
    p: &MergeParams<Var>,
) -> Result<StageState> {
    let (h, w, c) = (state.height, state.width, state.channels);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Resolution(format!(
            "patch merge needs even dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut index = Vec::with_capacity(state.batch * h * w * c);
    for b in 0..state.batch {
        for y in 0..oh {
            for x in 0..ow {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let row = b * h * w + (2 * y + dy) * w + 2 * x + dx;
                    index.extend(row * c..(row + 1) * c);
                }
            }
        }
    }
    let cat = tape.gather(state.tokens, index, &[state.batch * oh * ow, 4 * c])?;
    let tokens = tape.linear(cat, p.weight, p.bias)?;
    Ok(StageState {
        tokens,
        batch: state.batch,
        height: oh,
        width: ow,
        channels: tape.value(tokens).last_dim(),
    })
}

fn check_sparsity(cfg: &ModelConfig, sparsity: &SparsityConfig) -> Result<()> {
    if sparsity.depths() != cfg.depths().as_slice() {
        return Err(Error::Sparsity(format!(
            "sparsity config covers stages {:?}, model has {:?}",
            sparsity.depths(),
            cfg.depths()
        )));
    }
    Ok(())
}

/// Full forward pass for a batch of `H×W×C_in` images.
pub fn forward_batch(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ModelParams<Var>,
    images: &[&Tensor],
    sparsity: &SparsityConfig,
) -> Result<BatchForward> {
    check_sparsity(cfg, sparsity)?;
    let mut state = patch_embed(tape, cfg, params, images)?;
    let pos = tape.constant(position_encoding(
        state.batch,
        state.height,
        state.width,
        state.channels,
    ));
    state.tokens = tape.add(state.tokens, pos)?;
    let mut traces = vec![ForwardTrace { stages: Vec::new() }; images.len()];
    for (s, st) in cfg.stages.iter().enumerate() {
        let ratios = sparsity.stage(s);
        let hw = state.height * state.width;
        let c = state.channels;
        let mut stage_keep = Vec::with_capacity(state.batch);
        {
            let fmap = tape.value(state.tokens).data();
            for b in 0..state.batch {
                let slice = &fmap[b * hw * c..(b + 1) * hw * c];
                stage_keep.push(stage_keep_sets_raw(
                    slice,
                    state.height,
                    state.width,
                    c,
                    st.window_size,
                    ratios,
                )?);
            }
        }
        for (j, block) in params.stages[s].blocks.iter().enumerate() {
            let keep: Vec<&[KeepSet; 2]> = stage_keep.iter().map(|k| &k.blocks[j]).collect();
            state = block_forward(
                tape,
                &state,
                st.window_size,
                st.heads,
                cfg.eps,
                block,
                &keep,
            )?;
        }
        for (trace, keep) in traces.iter_mut().zip(stage_keep) {
            trace.stages.push(StageTrace {
                height: state.height,
                width: state.width,
                window_size: st.window_size,
                keep,
            });
        }
        if let Some(merge) = &params.stages[s].merge {
            state = patch_merge(tape, &state, merge)?;
        }
    }
    let pooled = tape.mean_rows(state.tokens, state.height * state.width)?;
    let logits = tape.linear(pooled, params.head_weight, params.head_bias)?;
    Ok(BatchForward { logits, traces })
}

/// A config with its weights, for evaluation without gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        let named = params.named();
        let params = ModelParams::from_named(&config, named)?;
        Ok(Model { config, params })
    }

    /// Logits `[B, num_classes]` and per-image traces.
    pub fn forward_batch(
        &self,
        images: &[&Tensor],
        sparsity: &SparsityConfig,
    ) -> Result<(Tensor, Vec<ForwardTrace>)> {
        let mut tape = Tape::no_grad();
        let params = bind_params(&mut tape, &self.params, false);
        let out = forward_batch(&mut tape, &self.config, &params, images, sparsity)?;
        Ok((tape.value(out.logits).clone(), out.traces))
    }

    /// Logits `[num_classes]` for one image, plus its execution counts when
    /// requested.
    pub fn forward(
        &self,
        image: &Tensor,
        sparsity: &SparsityConfig,
        record_counts: bool,
    ) -> Result<(Tensor, Option<ExecutionCounts>)> {
        let (logits, traces) = self.forward_batch(&[image], sparsity)?;
        let logits = logits.reshape(&[self.config.num_classes])?;
        let counts = record_counts.then(|| ExecutionCounts::from_trace(&self.config, &traces[0]));
        Ok((logits, counts))
    }
}
