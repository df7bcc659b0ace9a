//! Pixel-wise token embedding and non-overlapping window partitioning.
//!
//! Feature maps are NHWC. Partitioning pads (reflect) up to a multiple of the
//! window side, applies the cyclic shift, and enumerates windows and the
//! pixels inside each window in raster order. Merging inverts all three
//! steps, so `merge(partition(x)) == x` bit for bit.
//!
//! A window side larger than the map on some axis is clamped to that axis'
//! extent (and the shift on that axis dropped), so `w >= max(H, W)` yields a
//! single window covering the whole map.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Var;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadPolicy {
    #[default]
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Window side in pixels.
    pub w: usize,
    /// Cyclic shift in pixels, `0 <= shift < w`.
    pub shift: usize,
    #[serde(default)]
    pub pad_policy: PadPolicy,
}

impl WindowSpec {
    pub fn new(w: usize, shift: usize) -> Result<Self> {
        let s = WindowSpec { w, shift, pad_policy: PadPolicy::Reflect };
        s.validate()?;
        Ok(s)
    }

    /// Unshifted window of side `w`.
    pub fn plain(w: usize) -> Result<Self> {
        Self::new(w, 0)
    }

    /// The Swin convention for alternating blocks: shift by `w / 2`.
    pub fn shifted(w: usize) -> Result<Self> {
        Self::new(w, w / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w == 0 {
            return Err(Error::InvalidArgument("window side must be >= 1".into()));
        }
        if self.shift >= self.w {
            return Err(Error::InvalidArgument(format!(
                "window shift {} must be < window side {}",
                self.shift, self.w
            )));
        }
        Ok(())
    }

    /// Tokens per full window.
    pub fn tokens(&self) -> usize {
        self.w * self.w
    }

    /// Resolves the geometry for a `batch x h x w` map.
    pub fn layout(&self, batch: usize, h: usize, w: usize) -> Result<WindowLayout> {
        self.validate()?;
        if batch == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!("empty feature map {batch}x{h}x{w}")));
        }
        let axis = |extent: usize| {
            if self.w >= extent {
                (extent, extent, 0)
            } else {
                (self.w, extent.div_ceil(self.w) * self.w, self.shift)
            }
        };
        let (win_h, pad_h, shift_y) = axis(h);
        let (win_w, pad_w, shift_x) = axis(w);
        Ok(WindowLayout {
            batch,
            h,
            w,
            win_h,
            win_w,
            pad_h,
            pad_w,
            shift_y,
            shift_x,
        })
    }
}

/// Resolved partition geometry; records the padding so merge can crop exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub shift_y: usize,
    pub shift_x: usize,
}

/// Reflect (edge pixel not repeated) index into `0..n`, periodic for large overshoot.
fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        return i;
    }
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

impl WindowLayout {
    pub fn windows_per_image(&self) -> usize {
        (self.pad_h / self.win_h) * (self.pad_w / self.win_w)
    }

    pub fn num_windows(&self) -> usize {
        self.batch * self.windows_per_image()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.win_h * self.win_w
    }

    /// Source pixel row (in `[B*H*W]` order) for each window token.
    pub fn partition_rows(&self) -> Vec<usize> {
        let (nh, nw) = (self.pad_h / self.win_h, self.pad_w / self.win_w);
        let mut rows = Vec::with_capacity(self.num_windows() * self.tokens_per_window());
        for b in 0..self.batch {
            for wy in 0..nh {
                for wx in 0..nw {
                    for iy in 0..self.win_h {
                        for ix in 0..self.win_w {
                            let py = (wy * self.win_h + iy + self.shift_y) % self.pad_h;
                            let px = (wx * self.win_w + ix + self.shift_x) % self.pad_w;
                            let (oy, ox) = (reflect(py, self.h), reflect(px, self.w));
                            rows.push((b * self.h + oy) * self.w + ox);
                        }
                    }
                }
            }
        }
        rows
    }

    /// Window-token row holding each original pixel (the unpadded copy).
    pub fn merge_rows(&self) -> Vec<usize> {
        let nw = self.pad_w / self.win_w;
        let per_image = self.windows_per_image();
        let tpw = self.tokens_per_window();
        let mut rows = Vec::with_capacity(self.batch * self.h * self.w);
        for b in 0..self.batch {
            for oy in 0..self.h {
                for ox in 0..self.w {
                    let y = (oy + self.pad_h - self.shift_y) % self.pad_h;
                    let x = (ox + self.pad_w - self.shift_x) % self.pad_w;
                    let win = b * per_image + (y / self.win_h) * nw + x / self.win_w;
                    rows.push(win * tpw + (y % self.win_h) * self.win_w + x % self.win_w);
                }
            }
        }
        rows
    }
}

fn dims4<T: Real>(op: &'static str, x: &Var<T>) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::invalid_shape(op, x.shape(), "expected B x H x W x C")),
    }
}

/// Per-pixel affine projection `[B, H, W, Cin] -> [B, H, W, C]` (1x1 patches).
pub fn pixel_embed<T: Real>(img: &Var<T>, weight: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
    let (b, h, w, cin) = dims4("pixel_embed", img)?;
    let c = match *weight.shape() {
        [wi, c] if wi == cin => c,
        _ => return Err(Error::shape("pixel_embed", img.shape(), weight.shape())),
    };
    if bias.shape() != [c] {
        return Err(Error::shape("pixel_embed", weight.shape(), bias.shape()));
    }
    img.reshape(&[b * h * w, cin])?
        .matmul(weight)?
        .add(bias)?
        .reshape(&[b, h, w, c])
}

/// `[B, H, W, C] -> [num_windows, tokens_per_window, C]`.
pub fn window_partition<T: Real>(x: &Var<T>, spec: &WindowSpec) -> Result<(Var<T>, WindowLayout)> {
    let (b, h, w, c) = dims4("window_partition", x)?;
    let layout = spec.layout(b, h, w)?;
    let rows = layout.partition_rows();
    let out = x.gather_rows(
        Arc::new(rows),
        &[layout.num_windows(), layout.tokens_per_window(), c],
    )?;
    Ok((out, layout))
}

/// Inverse of [`window_partition`] for an `h x w` map; the batch size is
/// inferred from the window count.
pub fn window_merge<T: Real>(wins: &Var<T>, spec: &WindowSpec, h: usize, w: usize) -> Result<Var<T>> {
    let (nwin, tpw, c) = match *wins.shape() {
        [a, b, c] => (a, b, c),
        _ => return Err(Error::invalid_shape("window_merge", wins.shape(), "expected windows x tokens x C")),
    };
    let probe = spec.layout(1, h, w)?;
    let per_image = probe.windows_per_image();
    if tpw != probe.tokens_per_window() || nwin % per_image != 0 {
        return Err(Error::invalid_shape(
            "window_merge",
            wins.shape(),
            format!(
                "inconsistent with {h}x{w} map and window {}: expected a multiple of {per_image} windows of {} tokens",
                spec.w,
                probe.tokens_per_window()
            ),
        ));
    }
    let batch = nwin / per_image;
    let layout = spec.layout(batch, h, w)?;
    wins.gather_rows(Arc::new(layout.merge_rows()), &[batch, h, w, c])
}
