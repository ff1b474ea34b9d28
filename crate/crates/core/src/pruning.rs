//! Window importance scoring, selection, and gather / scatter with
//! pass-through duplication.
//!
//! A window's importance is the L2 norm of its activations. Scores are
//! computed once per stage and partition from the stage input, so every block
//! in a stage shares one ordering and its keep set is a prefix of it. Because
//! ratios never decrease inside a stage, later keep sets nest inside earlier
//! ones and a pruned window never re-enters the computation.

use crate::error::{Error, Result};
use crate::model::window::{PartitionLayout, WindowBatch};
use crate::sparsity::MAX_TENTHS;
use crate::tensor::Tensor;

/// Window indices sorted by descending score, ties by ascending index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowOrdering(pub Vec<usize>);

/// The first `kept_count` entries of an ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepSet(pub Vec<usize>);

impl KeepSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, w: usize) -> bool {
        self.0.contains(&w)
    }

    pub fn is_subset_of(&self, other: &KeepSet) -> bool {
        self.0.iter().all(|w| other.contains(*w))
    }
}

/// √(Σ v²) over each window's `M²·C` values.
pub fn score_windows(wb: &WindowBatch) -> Vec<f32> {
    (0..wb.num_windows()).map(|w| l2(wb.window(w))).collect()
}

fn l2(values: &[f32]) -> f32 {
    values
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32
}

/// Scores a partition straight from a row-major `h·w×C` map without
/// materializing the windows.
pub fn score_layout(fmap: &[f32], channels: usize, layout: &PartitionLayout) -> Vec<f32> {
    let n = layout.tokens_per_window();
    (0..layout.num_windows())
        .map(|w| {
            let mut acc = 0.0f64;
            for t in 0..n {
                let p = layout.token_position(w, t);
                for &v in &fmap[p * channels..(p + 1) * channels] {
                    acc += (v as f64) * (v as f64);
                }
            }
            acc.sqrt() as f32
        })
        .collect()
}

pub fn rank_windows(scores: &[f32]) -> WindowOrdering {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    WindowOrdering(order)
}

/// `max(1, ⌈(1 − s)·W⌉)` with `s` in tenths, computed exactly in integers.
pub fn kept_count(windows: usize, tenths: u8) -> Result<usize> {
    if tenths > MAX_TENTHS {
        return Err(Error::Sparsity(format!("ratio 0.{tenths} exceeds 0.8")));
    }
    if windows == 0 {
        return Err(Error::InvalidArgument(
            "window count must be positive".into(),
        ));
    }
    let keep = ((10 - tenths as usize) * windows).div_ceil(10);
    Ok(keep.max(1))
}

pub fn keep_set(ordering: &WindowOrdering, tenths: u8) -> Result<KeepSet> {
    let k = kept_count(ordering.0.len(), tenths)?;
    Ok(KeepSet(ordering.0[..k].to_vec()))
}

/// Kept windows, in keep-set order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSubset {
    /// `[k, M², C]`
    pub windows: Tensor,
    pub indices: Vec<usize>,
}

pub fn gather(wb: &WindowBatch, keep: &KeepSet) -> Result<WindowSubset> {
    let n = wb.num_windows();
    if let Some(&bad) = keep.0.iter().find(|&&w| w >= n) {
        return Err(Error::Index {
            what: "window batch",
            index: bad,
            len: n,
        });
    }
    let mut data = Vec::with_capacity(keep.len() * wb.tokens_per_window() * wb.channels());
    for &w in &keep.0 {
        data.extend_from_slice(wb.window(w));
    }
    Ok(WindowSubset {
        windows: Tensor::new(
            vec![keep.len(), wb.tokens_per_window(), wb.channels()],
            data,
        )?,
        indices: keep.0.clone(),
    })
}

/// Writes processed windows back to their slots; every other window keeps
/// its input features.
pub fn scatter_with_duplicate(
    original: &WindowBatch,
    processed: &Tensor,
    keep: &KeepSet,
) -> Result<WindowBatch> {
    let win_len = original.tokens_per_window() * original.channels();
    if processed.numel() != keep.len() * win_len {
        return Err(Error::Shape {
            op: "scatter_with_duplicate",
            lhs: processed.shape().to_vec(),
            rhs: vec![
                keep.len(),
                original.tokens_per_window(),
                original.channels(),
            ],
        });
    }
    let n = original.num_windows();
    let mut out = original.clone();
    let dst = out.windows.data_mut();
    for (i, &w) in keep.0.iter().enumerate() {
        if w >= n {
            return Err(Error::Index {
                what: "window batch",
                index: w,
                len: n,
            });
        }
        dst[w * win_len..(w + 1) * win_len]
            .copy_from_slice(&processed.data()[i * win_len..(i + 1) * win_len]);
    }
    Ok(out)
}

/// Keep sets for one image and stage: one ordering per partition, one prefix
/// per block.
#[derive(Debug, Clone, PartialEq)]
pub struct StageKeepSets {
    pub regular_order: WindowOrdering,
    pub shifted_order: WindowOrdering,
    /// `blocks[b] = [regular, shifted]`
    pub blocks: Vec<[KeepSet; 2]>,
}

/// Scores both partitions of a row-major `h·w×C` map once and derives every
/// block's keep sets from the block ratios (tenths, non-descending).
pub fn stage_keep_sets_raw(
    fmap: &[f32],
    height: usize,
    width: usize,
    channels: usize,
    window_size: usize,
    ratios: &[u8],
) -> Result<StageKeepSets> {
    if ratios.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Sparsity(format!(
            "stage ratios {ratios:?} (tenths) are not non-descending"
        )));
    }
    if fmap.len() != height * width * channels {
        return Err(Error::Shape {
            op: "stage_keep_sets",
            lhs: vec![fmap.len()],
            rhs: vec![height, width, channels],
        });
    }
    let regular = PartitionLayout::new(height, width, window_size, false)?;
    let shifted = PartitionLayout::new(height, width, window_size, true)?;
    let regular_order = rank_windows(&score_layout(fmap, channels, &regular));
    let shifted_order = rank_windows(&score_layout(fmap, channels, &shifted));
    let blocks = ratios
        .iter()
        .map(|&t| Ok([keep_set(&regular_order, t)?, keep_set(&shifted_order, t)?]))
        .collect::<Result<Vec<_>>>()?;
    Ok(StageKeepSets {
        regular_order,
        shifted_order,
        blocks,
    })
}

/// [`stage_keep_sets_raw`] for an `h×w×C` tensor.
pub fn stage_keep_sets(fmap: &Tensor, window_size: usize, ratios: &[u8]) -> Result<StageKeepSets> {
    match *fmap.shape() {
        [h, w, c] => stage_keep_sets_raw(fmap.data(), h, w, c, window_size, ratios),
        _ => Err(Error::Shape {
            op: "stage_keep_sets",
            lhs: fmap.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::window::{window_partition, window_partition_shifted};

    #[test]
    fn score_examples() {
        let wb = window_partition(&Tensor::zeros(&[4, 4, 2]), 2).unwrap();
        assert!(score_windows(&wb).iter().all(|&s| s == 0.0));
        let wb = window_partition(&Tensor::full(&[2, 2, 2], 1.0), 2).unwrap();
        assert!((score_windows(&wb)[0] - 8f32.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn layout_scores_match_materialized_windows() {
        let fmap = Tensor::from_fn(&[8, 8, 3], |i| ((i * 37) % 11) as f32 - 5.0);
        for shifted in [false, true] {
            let wb = if shifted {
                window_partition_shifted(&fmap, 4).unwrap()
            } else {
                window_partition(&fmap, 4).unwrap()
            };
            let layout = PartitionLayout::new(8, 8, 4, shifted).unwrap();
            assert_eq!(score_windows(&wb), score_layout(fmap.data(), 3, &layout));
        }
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_windows(&[1.0, 3.0, 2.0]).0, vec![1, 2, 0]);
        assert_eq!(rank_windows(&[7.0; 5]).0, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn kept_count_examples() {
        assert_eq!(kept_count(100, 6).unwrap(), 40);
        assert_eq!(kept_count(4, 0).unwrap(), 4);
        assert_eq!(kept_count(3, 8).unwrap(), 1);
        assert_eq!(kept_count(1, 8).unwrap(), 1);
        assert!(kept_count(4, 9).is_err());
    }

    #[test]
    fn gather_and_scatter_examples() {
        let fmap = Tensor::from_fn(&[4, 4, 1], |i| i as f32);
        let wb = window_partition(&fmap, 2).unwrap();
        let sub = gather(&wb, &KeepSet(vec![2])).unwrap();
        assert_eq!(sub.windows.data(), wb.window(2));
        assert!(gather(&wb, &KeepSet(vec![4])).is_err());

        let all = KeepSet(vec![3, 1, 0, 2]);
        let sub = gather(&wb, &all).unwrap();
        assert_eq!(&sub.windows.data()[..4], wb.window(3));
        let processed = Tensor::from_fn(sub.windows.shape(), |i| -(i as f32));
        let out = scatter_with_duplicate(&wb, &processed, &all).unwrap();
        assert_eq!(out.window(3), &processed.data()[..4]);

        let two = window_partition(&Tensor::from_fn(&[2, 4, 1], |i| i as f32), 2).unwrap();
        let p = Tensor::full(&[1, 4, 1], 9.0);
        let out = scatter_with_duplicate(&two, &p, &KeepSet(vec![0])).unwrap();
        assert_eq!(out.window(0), &[9.0; 4]);
        assert_eq!(out.window(1), two.window(1));
        assert!(scatter_with_duplicate(&two, &p, &KeepSet(vec![0, 1])).is_err());
    }

    #[test]
    fn stage_keep_set_examples() {
        let fmap = Tensor::from_fn(&[4, 4, 1], |i| i as f32);
        let ks = stage_keep_sets(&fmap, 2, &[0, 5]).unwrap();
        assert_eq!(ks.blocks[0][0].len(), 4);
        assert_eq!(ks.blocks[1][0].len(), 2);
        assert!(ks.blocks[1][0].is_subset_of(&ks.blocks[0][0]));
        assert!(ks.blocks[1][1].is_subset_of(&ks.blocks[0][1]));

        let ks = stage_keep_sets(&fmap, 2, &[3, 3, 3]).unwrap();
        assert!(ks.blocks.iter().all(|b| b == &ks.blocks[0]));

        assert!(stage_keep_sets(&fmap, 2, &[5, 0]).is_err());
    }

    #[test]
    fn ten_window_nesting() {
        // 2x20 map, window 2: a 1x10 window grid
        let fmap = Tensor::from_fn(&[2, 20, 1], |i| ((i * 7919) % 97) as f32);
        let ks = stage_keep_sets(&fmap, 2, &[1, 5, 8]).unwrap();
        let sizes: Vec<usize> = ks.blocks.iter().map(|b| b[0].len()).collect();
        assert_eq!(sizes, vec![9, 5, 2]);
        assert!(ks.blocks[2][0].is_subset_of(&ks.blocks[1][0]));
        assert!(ks.blocks[1][0].is_subset_of(&ks.blocks[0][0]));
    }
}
