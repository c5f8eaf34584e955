use crate::error::{Error, Result};
use crate::geometry::PixelPoint;
use crate::heatmap::VertexHeatmaps;
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

use super::{CandidateSet, MatchConfig};

/// Per-vertex likelihood maps addressed at image resolution.
pub trait VertexMaps<S> {
    /// `(width, height)` in image pixels.
    fn size(&self) -> (usize, usize);

    /// Map value of `vertex` at image pixel `(x, y)`; callers stay in bounds.
    fn value(&self, vertex: usize, x: usize, y: usize) -> S;
}

/// Full-resolution maps with one channel per vertex.
impl<S: Scalar> VertexMaps<S> for Tensor3<S> {
    fn size(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    fn value(&self, vertex: usize, x: usize, y: usize) -> S {
        self.get(y, x, vertex)
    }
}

/// Stride-`R` heatmaps read back at image resolution by nearest-cell lookup.
#[derive(Debug, Clone, Copy)]
pub struct UpsampledHeatmaps<'a, S> {
    pub heatmaps: &'a VertexHeatmaps<S>,
    /// Heatmap channel of each matcher vertex.
    pub channels: &'a [usize],
    pub width: usize,
    pub height: usize,
}

impl<S: Scalar> VertexMaps<S> for UpsampledHeatmaps<'_, S> {
    fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn value(&self, vertex: usize, x: usize, y: usize) -> S {
        let r = self.heatmaps.stride;
        self.heatmaps.grid.get(y / r, x / r, self.channels[vertex])
    }
}

/// `S×S` crop around an anchor with channels
/// `[segmentation, anchor map, K neighbour maps, c_feat features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedPatch<S> {
    pub grid: Tensor3<S>,
    /// Image pixel of crop cell `(0, 0)`: rounded anchor minus `S/2`.
    pub origin: (isize, isize),
    pub k: usize,
    pub c_feat: usize,
}

impl<S: Scalar> AggregatedPatch<S> {
    pub fn size(&self) -> usize {
        self.grid.width()
    }

    pub fn seg_channel(&self) -> usize {
        0
    }

    pub fn anchor_channel(&self) -> usize {
        1
    }

    pub fn neighbor_channel(&self, slot: usize) -> usize {
        2 + slot
    }

    pub fn feature_channel(&self, i: usize) -> usize {
        2 + self.k + i
    }

    /// Image point to crop-local continuous coordinates.
    pub fn to_local(&self, p: PixelPoint<S>) -> PixelPoint<S> {
        PixelPoint::new(
            p.x - S::of(self.origin.0 as f64),
            p.y - S::of(self.origin.1 as f64),
        )
    }

    pub fn to_image(&self, p: PixelPoint<S>) -> PixelPoint<S> {
        PixelPoint::new(
            p.x + S::of(self.origin.0 as f64),
            p.y + S::of(self.origin.1 as f64),
        )
    }
}

/// Crop origin for an anchor: `round(anchor) − S/2` on each axis.
pub fn crop_origin<S: Scalar>(anchor: PixelPoint<S>, crop_size: usize) -> (isize, isize) {
    let half = (crop_size / 2) as isize;
    let r = |v: S| v.round().to_isize().unwrap_or(0);
    (r(anchor.x) - half, r(anchor.y) - half)
}

pub fn aggregate_patch<S: Scalar, M: VertexMaps<S> + ?Sized>(
    seg: &Tensor3<S>,
    features: &Tensor3<S>,
    maps: &M,
    vertices: &[PixelPoint<S>],
    candidates: &CandidateSet<S>,
    cfg: &MatchConfig,
) -> Result<AggregatedPatch<S>> {
    let (h, w, seg_c) = seg.shape();
    if seg_c != 1 {
        return Err(Error::shape("segmentation with 1 channel", seg_c));
    }
    if features.shape() != (h, w, cfg.c_feat) {
        return Err(Error::shape(
            format!("features {h}×{w}×{}", cfg.c_feat),
            format!("{:?}", features.shape()),
        ));
    }
    if maps.size() != (w, h) {
        return Err(Error::shape(
            format!("vertex maps {w}×{h}"),
            format!("{:?}", maps.size()),
        ));
    }
    if candidates.k != cfg.k {
        return Err(Error::shape(
            format!("{} candidate slots", cfg.k),
            candidates.k,
        ));
    }
    let s = cfg.crop_size;
    let origin = crop_origin(vertices[candidates.anchor], s);
    let mut grid = Tensor3::zeros(s, s, cfg.patch_channels());

    // Crop rows/columns that fall inside the image.
    let span = |o: isize, n: usize| {
        let lo = (-o).clamp(0, s as isize) as usize;
        let hi = (n as isize - o).clamp(0, s as isize) as usize;
        lo..hi.max(lo)
    };
    let (rows, cols) = (span(origin.1, h), span(origin.0, w));
    let img = |i: usize, o: isize| (i as isize + o) as usize;

    let mut map_sources: Vec<(usize, usize)> = vec![(1, candidates.anchor)];
    map_sources.extend(
        candidates
            .neighbors
            .iter()
            .enumerate()
            .map(|(slot, c)| (2 + slot, c.index)),
    );
    for ly in rows.clone() {
        let y = img(ly, origin.1);
        for lx in cols.clone() {
            let x = img(lx, origin.0);
            let base = grid.index(ly, lx, 0);
            let out = &mut grid.data_mut()[base..base + 2 + cfg.k + cfg.c_feat];
            out[0] = seg.get(y, x, 0);
            for &(ch, v) in &map_sources {
                out[ch] = maps.value(v, x, y);
            }
            out[2 + cfg.k..].copy_from_slice(features.pixel(y, x));
        }
    }
    Ok(AggregatedPatch {
        grid,
        origin,
        k: cfg.k,
        c_feat: cfg.c_feat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::topk_neighbors;

    type P = PixelPoint<f64>;

    fn ramp(h: usize, w: usize, c: usize, scale: f64) -> Tensor3<f64> {
        let data = (0..h * w * c).map(|i| scale * (i + 1) as f64).collect();
        Tensor3::from_vec(h, w, c, data).unwrap()
    }

    fn setup(
        verts: &[P],
        w: usize,
        h: usize,
        c_feat: usize,
    ) -> (Tensor3<f64>, Tensor3<f64>, Tensor3<f64>) {
        (
            ramp(h, w, 1, 1.0),
            ramp(h, w, c_feat, 0.01),
            ramp(h, w, verts.len(), 0.001),
        )
    }

    #[test]
    fn centered_anchor_equals_direct_slice() {
        let verts = [P::new(16.0, 16.0), P::new(18.0, 15.0), P::new(10.0, 20.0)];
        let cfg = MatchConfig {
            k: 2,
            crop_size: 8,
            c_feat: 3,
            ..Default::default()
        };
        let (seg, feat, maps) = setup(&verts, 32, 32, 3);
        let cand = topk_neighbors(&verts, 0, 2);
        let p = aggregate_patch(&seg, &feat, &maps, &verts, &cand, &cfg).unwrap();
        assert_eq!(p.grid.shape(), (8, 8, 7));
        assert_eq!(p.origin, (12, 12));
        for ly in 0..8 {
            for lx in 0..8 {
                let (y, x) = (ly + 12, lx + 12);
                assert_eq!(p.grid.get(ly, lx, 0), seg.get(y, x, 0));
                assert_eq!(p.grid.get(ly, lx, 1), maps.get(y, x, 0));
                assert_eq!(
                    p.grid.get(ly, lx, 2),
                    maps.get(y, x, cand.neighbors[0].index)
                );
                assert_eq!(
                    p.grid.get(ly, lx, 3),
                    maps.get(y, x, cand.neighbors[1].index)
                );
                for f in 0..3 {
                    assert_eq!(p.grid.get(ly, lx, 4 + f), feat.get(y, x, f));
                }
            }
        }
    }

    #[test]
    fn corner_anchor_pads_with_zeros() {
        // Crop spans image pixels -4..4; only its last 4 rows and columns exist.
        let verts = [P::new(0.0, 0.0), P::new(2.0, 1.0)];
        let cfg = MatchConfig {
            k: 3,
            crop_size: 8,
            c_feat: 2,
            ..Default::default()
        };
        let (seg, feat, maps) = setup(&verts, 16, 16, 2);
        let cand = topk_neighbors(&verts, 0, 3);
        let p = aggregate_patch(&seg, &feat, &maps, &verts, &cand, &cfg).unwrap();
        assert_eq!(p.origin, (-4, -4));
        for ly in 0..8 {
            for lx in 0..8 {
                let inside = ly >= 4 && lx >= 4;
                for c in 0..p.grid.channels() {
                    let v = p.grid.get(ly, lx, c);
                    let padded_slot = c == 3 || c == 4;
                    if inside && !padded_slot {
                        assert!(v > 0.0, "({ly},{lx},{c})");
                    } else {
                        assert_eq!(v, 0.0, "({ly},{lx},{c})");
                    }
                }
            }
        }
        assert_eq!(p.grid.get(4, 4, 0), seg.get(0, 0, 0));
    }

    #[test]
    fn channel_count_follows_config() {
        let verts: Vec<P> = (0..30).map(|i| P::new(i as f64, (i % 7) as f64)).collect();
        let cfg = MatchConfig {
            k: 20,
            crop_size: 4,
            c_feat: 16,
            ..Default::default()
        };
        let (seg, feat, maps) = setup(&verts, 32, 8, 16);
        let cand = topk_neighbors(&verts, 3, 20);
        let p = aggregate_patch(&seg, &feat, &maps, &verts, &cand, &cfg).unwrap();
        assert_eq!(p.grid.channels(), 38);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let verts = [P::new(4.0, 4.0), P::new(5.0, 5.0)];
        let cfg = MatchConfig {
            k: 1,
            crop_size: 4,
            c_feat: 2,
            ..Default::default()
        };
        let (seg, _, maps) = setup(&verts, 16, 16, 2);
        let cand = topk_neighbors(&verts, 0, 1);
        let bad_feat = ramp(15, 16, 2, 1.0);
        assert!(aggregate_patch(&seg, &bad_feat, &maps, &verts, &cand, &cfg).is_err());
        let wrong_c = ramp(16, 16, 3, 1.0);
        assert!(aggregate_patch(&seg, &wrong_c, &maps, &verts, &cand, &cfg).is_err());
        let small_maps = ramp(8, 8, 2, 1.0);
        let feat = ramp(16, 16, 2, 1.0);
        assert!(aggregate_patch(&seg, &feat, &small_maps, &verts, &cand, &cfg).is_err());
    }

    #[test]
    fn upsampled_lookup_uses_cell() {
        use crate::heatmap::HeatmapMode;
        let mut grid = Tensor3::<f64>::zeros(3, 3, 2);
        grid.set(1, 2, 1, 0.7);
        let hm = VertexHeatmaps {
            grid,
            stride: 4,
            mode: HeatmapMode::PerVertexChannel,
        };
        let channels = [1usize];
        let up = UpsampledHeatmaps {
            heatmaps: &hm,
            channels: &channels,
            width: 9,
            height: 9,
        };
        assert_eq!(up.value(0, 8, 4), 0.7);
        assert_eq!(up.value(0, 8, 7), 0.7);
        assert_eq!(up.value(0, 7, 4), 0.0);
    }
}
