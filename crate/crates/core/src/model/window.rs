//! Window partitioning of `h×w×C` feature maps.
//!
//! Windows are numbered row-major over the window grid, and tokens row-major
//! inside each window. The shifted partition is the regular partition of the
//! map cyclically rolled by `(-M/2, -M/2)`; windows wrap toroidally and no
//! attention mask is applied across the seam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where each window token lives in the un-shifted feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionLayout {
    pub height: usize,
    pub width: usize,
    pub window_size: usize,
    pub shifted: bool,
}

impl PartitionLayout {
    pub fn new(height: usize, width: usize, window_size: usize, shifted: bool) -> Result<Self> {
        if window_size == 0
            || !height.is_multiple_of(window_size)
            || !width.is_multiple_of(window_size)
        {
            return Err(Error::Resolution(format!(
                "feature map {height}x{width} is not divisible by window size {window_size}"
            )));
        }
        Ok(PartitionLayout {
            height,
            width,
            window_size,
            shifted,
        })
    }

    /// Window grid as `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.height / self.window_size,
            self.width / self.window_size,
        )
    }

    pub fn num_windows(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window_size * self.window_size
    }

    fn offset(&self) -> usize {
        if self.shifted {
            self.window_size / 2
        } else {
            0
        }
    }

    /// `(row, col)` in the feature map of token `t` of window `window`.
    pub fn token_coords(&self, window: usize, t: usize) -> (usize, usize) {
        let m = self.window_size;
        let (_, cols) = self.grid();
        let (wr, wc) = (window / cols, window % cols);
        let (ty, tx) = (t / m, t % m);
        let s = self.offset();
        (
            (wr * m + ty + s) % self.height,
            (wc * m + tx + s) % self.width,
        )
    }

    /// Flat row-major position in the feature map of token `t` of `window`.
    pub fn token_position(&self, window: usize, t: usize) -> usize {
        let (y, x) = self.token_coords(window, t);
        y * self.width + x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// `[num_windows, M², C]`
    pub windows: Tensor,
    pub windows_per_row: usize,
    pub windows_per_col: usize,
    pub window_size: usize,
    pub shifted: bool,
}

impl WindowBatch {
    pub fn num_windows(&self) -> usize {
        self.windows.shape()[0]
    }

    pub fn tokens_per_window(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.windows.shape()[2]
    }

    /// Values of window `w`, `M²·C` long.
    pub fn window(&self, w: usize) -> &[f32] {
        let len = self.tokens_per_window() * self.channels();
        &self.windows.data()[w * len..(w + 1) * len]
    }
}

fn fmap_dims(fmap: &Tensor) -> Result<(usize, usize, usize)> {
    match *fmap.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::Shape {
            op: "feature map",
            lhs: fmap.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// Toroidal roll: `out[(y+dy) mod h][(x+dx) mod w] = in[y][x]`.
pub fn cyclic_shift(fmap: &Tensor, dy: isize, dx: isize) -> Result<Tensor> {
    let (h, w, c) = fmap_dims(fmap)?;
    let mut out = Tensor::zeros(fmap.shape());
    let src = fmap.data();
    let dst = out.data_mut();
    for y in 0..h {
        let ty = (y as isize + dy).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let tx = (x as isize + dx).rem_euclid(w as isize) as usize;
            let from = (y * w + x) * c;
            let to = (ty * w + tx) * c;
            dst[to..to + c].copy_from_slice(&src[from..from + c]);
        }
    }
    Ok(out)
}

fn partition(fmap: &Tensor, window_size: usize, shifted: bool) -> Result<WindowBatch> {
    let (h, w, c) = fmap_dims(fmap)?;
    let layout = PartitionLayout::new(h, w, window_size, shifted)?;
    let (rows, cols) = layout.grid();
    let n = layout.tokens_per_window();
    let src = fmap.data();
    let mut data = Vec::with_capacity(h * w * c);
    for win in 0..layout.num_windows() {
        for t in 0..n {
            let p = layout.token_position(win, t);
            data.extend_from_slice(&src[p * c..(p + 1) * c]);
        }
    }
    Ok(WindowBatch {
        windows: Tensor::new(vec![rows * cols, n, c], data)?,
        windows_per_row: cols,
        windows_per_col: rows,
        window_size,
        shifted,
    })
}

pub fn window_partition(fmap: &Tensor, window_size: usize) -> Result<WindowBatch> {
    partition(fmap, window_size, false)
}

/// Partition of the map rolled by `(-M/2, -M/2)`.
pub fn window_partition_shifted(fmap: &Tensor, window_size: usize) -> Result<WindowBatch> {
    partition(fmap, window_size, true)
}

/// Exact inverse of [`window_partition`] / [`window_partition_shifted`].
pub fn window_reverse(wb: &WindowBatch, height: usize, width: usize) -> Result<Tensor> {
    let layout = PartitionLayout::new(height, width, wb.window_size, wb.shifted)?;
    let (rows, cols) = layout.grid();
    if rows != wb.windows_per_col
        || cols != wb.windows_per_row
        || wb.num_windows() != rows * cols
        || wb.tokens_per_window() != layout.tokens_per_window()
    {
        return Err(Error::Shape {
            op: "window_reverse",
            lhs: wb.windows.shape().to_vec(),
            rhs: vec![height, width],
        });
    }
    let c = wb.channels();
    let n = layout.tokens_per_window();
    let mut out = Tensor::zeros(&[height, width, c]);
    let src = wb.windows.data();
    let dst = out.data_mut();
    for win in 0..rows * cols {
        for t in 0..n {
            let p = layout.token_position(win, t);
            let from = (win * n + t) * c;
            dst[p * c..(p + 1) * c].copy_from_slice(&src[from..from + c]);
        }
    }
    Ok(out)
}
