//! Stride-`R` Gaussian vertex heatmaps with optional sub-cell offsets.
//!
//! A vertex `p` lands in cell `⌊p/R⌋`. The grid has `⌊W/R⌋ + 1` columns and
//! `⌊H/R⌋ + 1` rows so that vertices lying on the far image border still own
//! a cell with an offset in `[0, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PixelPoint;
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapMode {
    /// One channel per vertex, in vertex order.
    PerVertexChannel,
    /// All vertices on a single channel, merged by element-wise maximum.
    SharedChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    pub stride: usize,
    /// Gaussian spread in cells.
    pub sigma: f64,
    pub mode: HeatmapMode,
    pub c_vert: usize,
    pub peak_threshold: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            sigma: 2.0,
            mode: HeatmapMode::PerVertexChannel,
            c_vert: 256,
            peak_threshold: 0.3,
        }
    }
}

impl HeatmapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 {
            return Err(Error::invalid("heatmap.stride", "must be ≥ 1"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(
                "heatmap.sigma",
                format!("{} must be > 0", self.sigma),
            ));
        }
        if self.c_vert < 1 {
            return Err(Error::invalid("heatmap.c_vert", "must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.peak_threshold) {
            return Err(Error::invalid(
                "heatmap.peak_threshold",
                format!("{} outside [0, 1]", self.peak_threshold),
            ));
        }
        Ok(())
    }

    pub fn grid_size(&self, width: usize, height: usize) -> (usize, usize) {
        (height / self.stride + 1, width / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertexHeatmaps<S> {
    pub grid: Tensor3<S>,
    pub stride: usize,
    pub mode: HeatmapMode,
}

/// Fractional cell offsets `p/R − ⌊p/R⌋` stored at each ground-truth peak.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetMap<S> {
    pub grid: Tensor3<S>,
}

/// A decoded vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak<S> {
    pub point: PixelPoint<S>,
    pub confidence: S,
    /// Heatmap channel the peak came from (the vertex index in per-vertex mode).
    pub channel: usize,
    pub cell: (usize, usize),
}

fn cell_of<S: Scalar>(p: PixelPoint<S>, stride: S) -> (S, S) {
    ((p.x / stride).floor(), (p.y / stride).floor())
}

pub fn encode_vertices<S: Scalar>(
    vertices: &[PixelPoint<S>],
    cfg: &HeatmapConfig,
    width: usize,
    height: usize,
) -> Result<(VertexHeatmaps<S>, OffsetMap<S>)> {
    cfg.validate()?;
    let channels = match cfg.mode {
        HeatmapMode::PerVertexChannel => {
            if vertices.len() > cfg.c_vert {
                return Err(Error::invalid(
                    "vertex set",
                    format!("{} vertices exceed c_vert = {}", vertices.len(), cfg.c_vert),
                ));
            }
            cfg.c_vert
        }
        HeatmapMode::SharedChannel => 1,
    };
    let (gh, gw) = cfg.grid_size(width, height);
    let (w, h) = (S::of(width as f64), S::of(height as f64));
    let mut grid = Tensor3::zeros(gh, gw, channels);
    let mut offsets = Tensor3::zeros(gh, gw, 2);
    let mut offset_owner = vec![false; gh * gw];
    let stride = S::of(cfg.stride as f64);
    let inv_two_sigma_sq = S::one() / S::of(2.0 * cfg.sigma * cfg.sigma);

    // Per-axis Gaussian factors; the 2-D kernel is their product.
    let mut gx = vec![S::zero(); gw];
    let mut gy = vec![S::zero(); gh];
    for (i, p) in vertices.iter().enumerate() {
        if !p.is_finite() || p.x < S::zero() || p.y < S::zero() || p.x > w || p.y > h {
            return Err(Error::invalid(
                "vertex",
                format!("vertex {i} at ({}, {}) outside {width}×{height}", p.x, p.y),
            ));
        }
        let (cx, cy) = cell_of(*p, stride);
        for (x, g) in gx.iter_mut().enumerate() {
            let d = S::of(x as f64) - cx;
            *g = (-d * d * inv_two_sigma_sq).exp();
        }
        for (y, g) in gy.iter_mut().enumerate() {
            let d = S::of(y as f64) - cy;
            *g = (-d * d * inv_two_sigma_sq).exp();
        }
        let channel = match cfg.mode {
            HeatmapMode::PerVertexChannel => i,
            HeatmapMode::SharedChannel => 0,
        };
        for (y, &fy) in gy.iter().enumerate() {
            for (x, &fx) in gx.iter().enumerate() {
                let idx = grid.index(y, x, channel);
                let v: &mut S = &mut grid.data_mut()[idx];
                *v = v.max(fx * fy);
            }
        }
        let (ux, uy) = (cx.to_usize().unwrap(), cy.to_usize().unwrap());
        // First vertex to claim a cell keeps its offset.
        if !offset_owner[uy * gw + ux] {
            offset_owner[uy * gw + ux] = true;
            offsets.set(uy, ux, 0, p.x / stride - cx);
            offsets.set(uy, ux, 1, p.y / stride - cy);
        }
    }
    Ok((
        VertexHeatmaps {
            grid,
            stride: cfg.stride,
            mode: cfg.mode,
        },
        OffsetMap { grid: offsets },
    ))
}

/// Strict 3×3 maximum; equal neighbours lose to the earlier cell in `(y, x)` order.
fn is_local_max<S: Scalar>(t: &Tensor3<S>, y: usize, x: usize, c: usize) -> bool {
    let v = t.get(y, x, c);
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            if dy == 0 && dx == 0 {
                continue;
            }
            let (ny, nx) = (y as isize + dy, x as isize + dx);
            if ny < 0 || nx < 0 || ny as usize >= t.height() || nx as usize >= t.width() {
                continue;
            }
            let n = t.get(ny as usize, nx as usize, c);
            let earlier = (ny, nx) < (y as isize, x as isize);
            if n > v || (earlier && n == v) {
                return false;
            }
        }
    }
    true
}

fn peak_at<S: Scalar>(
    hm: &VertexHeatmaps<S>,
    off: Option<&OffsetMap<S>>,
    y: usize,
    x: usize,
    c: usize,
) -> Peak<S> {
    let stride = S::of(hm.stride as f64);
    let (fx, fy) = match off {
        Some(o) => (o.grid.get(y, x, 0), o.grid.get(y, x, 1)),
        None => (S::of(0.5), S::of(0.5)),
    };
    Peak {
        point: PixelPoint::new(
            (S::of(x as f64) + fx) * stride,
            (S::of(y as f64) + fy) * stride,
        ),
        confidence: hm.grid.get(y, x, c),
        channel: c,
        cell: (y, x),
    }
}

/// Recovers vertex positions from heatmap peaks.
///
/// Without offsets a peak decodes to its cell center `(cell + 0.5)·R`; with
/// offsets to `(cell + offset)·R`. Shared-channel peaks come out in `(y, x)`
/// scan order, per-vertex peaks in channel order.
pub fn decode_peaks<S: Scalar>(
    hm: &VertexHeatmaps<S>,
    off: Option<&OffsetMap<S>>,
    cfg: &HeatmapConfig,
) -> Result<Vec<Peak<S>>> {
    let (gh, gw, channels) = hm.grid.shape();
    if let Some(o) = off {
        if o.grid.shape() != (gh, gw, 2) {
            return Err(Error::shape(
                format!("offsets {gh}×{gw}×2"),
                format!("{:?}", o.grid.shape()),
            ));
        }
    }
    let threshold = S::of(cfg.peak_threshold);
    let mut peaks = Vec::new();
    match hm.mode {
        HeatmapMode::SharedChannel => {
            for c in 0..channels {
                for y in 0..gh {
                    for x in 0..gw {
                        if hm.grid.get(y, x, c) >= threshold && is_local_max(&hm.grid, y, x, c) {
                            peaks.push(peak_at(hm, off, y, x, c));
                        }
                    }
                }
            }
        }
        HeatmapMode::PerVertexChannel => {
            for c in 0..channels {
                let mut best: Option<(S, usize, usize)> = None;
                for y in 0..gh {
                    for x in 0..gw {
                        let v = hm.grid.get(y, x, c);
                        if best.is_none_or(|(b, _, _)| v > b) {
                            best = Some((v, y, x));
                        }
                    }
                }
                if let Some((v, y, x)) = best {
                    if v >= threshold && v > S::zero() {
                        peaks.push(peak_at(hm, off, y, x, c));
                    }
                }
            }
        }
    }
    Ok(peaks)
}
