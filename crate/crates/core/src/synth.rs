//! Procedural lane scenes with exact ground truth.
//!
//! Lanes are chains of quadratic Bézier pieces with continuous tangents that
//! enter at the left border and travel rightwards (heading within ±60° of +x),
//! so lane direction is visible from geometry alone. Vertices are placed at a
//! fixed chord distance per lane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::dataset_io::{
    load_annotations, rasterize_mask, split_dataset, write_annotations, ImageAnnotation, LaneMask,
    PixelLane, SplitAssignment, DEFAULT_STROKE_WIDTH,
};
use crate::error::{Error, Result};
use crate::geometry::{polyline_polyline_distance, PixelPoint};
use crate::lane_model::{GeoTransform, LaneAttributes};
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

type P = PixelPoint<f64>;

/// Feature channels: mask blurred at σ = 1.5 and σ = 4, then `x/W` and `y/H`.
pub const FEATURE_CHANNELS: usize = 4;
const MAX_ATTEMPTS: usize = 1000;
const MAX_HEADING: f64 = std::f64::consts::FRAC_PI_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    /// Inclusive range of lanes per scene.
    pub min_lanes: usize,
    pub max_lanes: usize,
    /// Inclusive range of the per-lane vertex spacing, pixels.
    pub min_spacing: f64,
    pub max_spacing: f64,
    pub min_separation: f64,
    /// Largest heading change across one curve piece, radians.
    pub max_turn: f64,
    /// Fraction of mask pixels randomised: each pixel flips with probability `noise / 2`.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 320,
            height: 320,
            min_lanes: 2,
            max_lanes: 6,
            min_spacing: 15.0,
            max_spacing: 40.0,
            min_separation: 12.0,
            max_turn: 0.5,
            noise: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::invalid(
                "synth canvas",
                format!("{}×{} below 16×16", self.width, self.height),
            ));
        }
        if self.min_lanes > self.max_lanes {
            return Err(Error::invalid(
                "synth lanes",
                format!("min {} exceeds max {}", self.min_lanes, self.max_lanes),
            ));
        }
        if !(self.min_spacing > 0.0
            && self.min_spacing <= self.max_spacing
            && self.max_spacing.is_finite())
        {
            return Err(Error::invalid(
                "synth spacing",
                format!(
                    "[{}, {}] is not a positive range",
                    self.min_spacing, self.max_spacing
                ),
            ));
        }
        if !(self.min_separation > 0.0 && self.min_separation.is_finite()) {
            return Err(Error::invalid("synth min_separation", "must be > 0"));
        }
        if !(self.max_turn >= 0.0 && self.max_turn.is_finite()) {
            return Err(Error::invalid("synth max_turn", "must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid(
                "synth noise",
                format!("{} outside [0, 1]", self.noise),
            ));
        }
        Ok(())
    }

    /// Configuration of the `index`-th scene of a dataset seeded with `self.seed`.
    pub fn for_scene(&self, index: u64) -> Self {
        Self {
            seed: mix_seed(self.seed, index),
            ..*self
        }
    }
}

/// SplitMix64 finaliser over `(seed, index)`.
fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub annotation: ImageAnnotation,
    pub seg_mask: LaneMask,
    /// `H×W×4` feature raster.
    pub features: Tensor3<f32>,
    /// Successor of every vertex in lane-major order; `None` ends a lane.
    pub next: Vec<Option<usize>>,
}

impl SyntheticScene {
    /// All vertices in lane-major order.
    pub fn vertices(&self) -> Vec<P> {
        self.annotation
            .lanes
            .iter()
            .flat_map(|l| l.pixel_vertices.iter().copied())
            .collect()
    }

    /// Each lane as the vertex indices it occupies in [`Self::vertices`].
    pub fn chains(&self) -> Vec<Vec<usize>> {
        let mut start = 0;
        self.annotation
            .lanes
            .iter()
            .map(|l| {
                let c: Vec<usize> = (start..start + l.pixel_vertices.len()).collect();
                start += l.pixel_vertices.len();
                c
            })
            .collect()
    }

    /// The segmentation mask as a one-channel `{0, 1}` raster.
    pub fn seg_tensor<S: Scalar>(&self) -> Tensor3<S> {
        let m = &self.seg_mask;
        let data = m.data.iter().map(|&v| S::of(v as f64)).collect();
        Tensor3::from_vec(m.height, m.width, 1, data).expect("mask dimensions")
    }

    pub fn id(&self) -> &str {
        &self.annotation.image_id
    }

    /// Reassembles a scene from stored rasters; labels follow the lane order.
    pub fn from_parts(
        annotation: ImageAnnotation,
        seg_mask: LaneMask,
        features: Tensor3<f32>,
    ) -> Result<Self> {
        annotation.validate()?;
        let (w, h) = (annotation.width as usize, annotation.height as usize);
        if (seg_mask.width, seg_mask.height) != (w, h) {
            return Err(Error::shape(
                format!("{} mask {w}×{h}", annotation.image_id),
                format!("{}×{}", seg_mask.width, seg_mask.height),
            ));
        }
        if features.shape() != (h, w, FEATURE_CHANNELS) {
            return Err(Error::shape(
                format!(
                    "{} features {h}×{w}×{FEATURE_CHANNELS}",
                    annotation.image_id
                ),
                format!("{:?}", features.shape()),
            ));
        }
        let next = successor_labels(&annotation);
        Ok(Self {
            annotation,
            seg_mask,
            features,
            next,
        })
    }
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const SPLIT_FILE: &str = "split.tsv";
pub const MASK_DIR: &str = "masks";
pub const FEATURE_DIR: &str = "features";

fn create_dataset_dirs(dir: &Path) -> Result<()> {
    for sub in [MASK_DIR, FEATURE_DIR] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    Ok(())
}

fn save_rasters(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    scene
        .seg_mask
        .save_png(&dir.join(MASK_DIR).join(format!("{}.png", scene.id())))?;
    scene.features.save(
        &dir.join(FEATURE_DIR).join(format!("{}.bin", scene.id())),
        1,
    )
}

fn save_index(dir: &Path, anns: &[ImageAnnotation], split: &SplitAssignment) -> Result<()> {
    write_annotations(&dir.join(ANNOTATIONS_FILE), anns)?;
    let manifest = dir.join(SPLIT_FILE);
    std::fs::write(&manifest, split.to_manifest()).map_err(|e| Error::io(&manifest, e))
}

/// Writes `annotations.json`, `split.tsv`, `masks/<id>.png` and `features/<id>.bin` under `dir`.
pub fn save_dataset(dir: &Path, scenes: &[SyntheticScene], split: &SplitAssignment) -> Result<()> {
    create_dataset_dirs(dir)?;
    for s in scenes {
        save_rasters(dir, s)?;
    }
    let anns: Vec<ImageAnnotation> = scenes.iter().map(|s| s.annotation.clone()).collect();
    save_index(dir, &anns, split)
}

/// [`gen_dataset`] straight to disk, one scene in memory at a time.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, n_scenes: usize) -> Result<SplitAssignment> {
    if n_scenes == 0 {
        return Err(Error::invalid("scene count", "must be ≥ 1"));
    }
    create_dataset_dirs(dir)?;
    let mut anns = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let scene = dataset_scene(cfg, i)?;
        save_rasters(dir, &scene)?;
        anns.push(scene.annotation);
    }
    let ids: Vec<&str> = anns.iter().map(|a| a.image_id.as_str()).collect();
    let split = split_dataset(&ids, cfg.seed)?;
    save_index(dir, &anns, &split)?;
    Ok(split)
}

/// Reads a directory written by [`save_dataset`]; the split is optional.
pub fn load_dataset(dir: &Path) -> Result<(Vec<SyntheticScene>, Option<SplitAssignment>)> {
    let anns = load_annotations(&dir.join(ANNOTATIONS_FILE))?;
    let scenes = anns
        .into_iter()
        .map(|a| {
            let mask = LaneMask::load_png(
                &dir.join(MASK_DIR).join(format!("{}.png", a.image_id)),
                DEFAULT_STROKE_WIDTH,
            )?;
            let (features, _) =
                Tensor3::load(&dir.join(FEATURE_DIR).join(format!("{}.bin", a.image_id)))?;
            SyntheticScene::from_parts(a, mask, features)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = dir.join(SPLIT_FILE);
    let split = if manifest.exists() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        Some(SplitAssignment::parse_manifest(&text, 0)?)
    } else {
        None
    };
    Ok((scenes, split))
}

/// Fixed georeference near 31.2°E 30.05°N at roughly 0.125 m per pixel.
pub fn synthetic_geo_transform() -> GeoTransform<f64> {
    GeoTransform::new(1.3e-6, 0.0, 31.2, 0.0, -1.123e-6, 30.05)
}

fn heading(t: f64) -> P {
    P::new(t.cos(), t.sin())
}

/// Dense centreline from the left border until it leaves the canvas.
fn centreline(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<P> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let inside = |p: P| p.x >= 0.0 && p.x <= w && p.y >= 0.0 && p.y <= h;
    let mut p0 = P::new(0.0, rng.gen_range(0.1 * h..0.9 * h));
    let mut theta = rng.gen_range(-std::f64::consts::FRAC_PI_4..std::f64::consts::FRAC_PI_4);
    let mut dense = vec![p0];
    // Enough pieces to cross any canvas diagonal.
    for _ in 0..64 {
        let len = rng.gen_range(60.0..120.0);
        let turn = if cfg.max_turn > 0.0 {
            rng.gen_range(-cfg.max_turn..=cfg.max_turn)
        } else {
            0.0
        };
        let next_theta = (theta + turn).clamp(-MAX_HEADING, MAX_HEADING);
        let c = p0 + heading(theta) * (len / 2.0);
        let p2 = c + heading(next_theta) * (len / 2.0);
        let n = (len * 2.0).ceil() as usize;
        for i in 1..=n {
            let t = i as f64 / n as f64;
            let q = p0 * ((1.0 - t) * (1.0 - t)) + c * (2.0 * (1.0 - t) * t) + p2 * (t * t);
            if !inside(q) {
                let last = *dense.last().unwrap();
                dense.push(exit_point(last, q, w, h));
                return dense;
            }
            dense.push(q);
        }
        p0 = p2;
        theta = next_theta;
    }
    dense
}

/// Where the segment from inside point `a` to outside point `b` crosses the border.
fn exit_point(a: P, b: P, w: f64, h: f64) -> P {
    let d = b - a;
    let mut t: f64 = 1.0;
    for (pos, delta, lo, hi) in [(a.x, d.x, 0.0, w), (a.y, d.y, 0.0, h)] {
        if delta > 0.0 {
            t = t.min((hi - pos) / delta);
        } else if delta < 0.0 {
            t = t.min((lo - pos) / delta);
        }
    }
    let p = a + d * t.clamp(0.0, 1.0);
    P::new(p.x.clamp(0.0, w), p.y.clamp(0.0, h))
}

/// Vertices at chord distance `spacing` along `dense`; a final tail shorter than `min_tail` is dropped.
fn place_vertices(dense: &[P], spacing: f64, min_tail: f64) -> Vec<P> {
    let mut out = vec![dense[0]];
    let mut j = 0;
    while j + 1 < dense.len() {
        let v = *out.last().unwrap();
        let b = dense[j + 1];
        if v.distance(b) < spacing {
            j += 1;
            continue;
        }
        // Larger root of |a + t(b − a) − v| = spacing on this segment.
        let a = dense[j];
        let d = b - a;
        let f = a - v;
        let (qa, qb, qc) = (d.dot(d), 2.0 * f.dot(d), f.dot(f) - spacing * spacing);
        if qa == 0.0 {
            j += 1;
            continue;
        }
        let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
        let t = ((-qb + disc.sqrt()) / (2.0 * qa)).clamp(0.0, 1.0);
        // Stay on segment `j`: it may hold further vertices.
        out.push(a + d * t);
    }
    let end = *dense.last().unwrap();
    let last = *out.last().unwrap();
    let tail = last.distance(end);
    if tail >= min_tail && tail > 0.0 {
        out.push(end);
    }
    out
}

fn gen_lane(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<P> {
    let spacing = rng.gen_range(cfg.min_spacing..=cfg.max_spacing);
    let dense = centreline(rng, cfg);
    place_vertices(&dense, spacing, cfg.min_spacing)
}

/// Separable Gaussian blur with zero padding.
fn blur(src: &[f32], w: usize, h: usize, sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (ki, &kv) in k.iter().enumerate() {
                let sx = x as isize + ki as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * src[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f32;
            for (ki, &kv) in k.iter().enumerate() {
                let sy = y as isize + ki as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Stacked `[blur σ=1.5, blur σ=4, x/W, y/H]` at pixel centres.
pub fn feature_tensor(mask: &LaneMask) -> Tensor3<f32> {
    let (w, h) = (mask.width, mask.height);
    let m: Vec<f32> = mask.data.iter().map(|&v| v as f32).collect();
    let fine = blur(&m, w, h, 1.5);
    let coarse = blur(&m, w, h, 4.0);
    let mut t = Tensor3::zeros(h, w, FEATURE_CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            t.set(y, x, 0, fine[i]);
            t.set(y, x, 1, coarse[i]);
            t.set(y, x, 2, (x as f32 + 0.5) / w as f32);
            t.set(y, x, 3, (y as f32 + 0.5) / h as f32);
        }
    }
    t
}

pub fn gen_scene(cfg: &SynthConfig) -> Result<SyntheticScene> {
    gen_scene_named(cfg, format!("scene_{:016x}", cfg.seed))
}

fn gen_scene_named(cfg: &SynthConfig, image_id: String) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let wanted = rng.gen_range(cfg.min_lanes..=cfg.max_lanes);
    let mut lanes: Vec<Vec<P>> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while lanes.len() < wanted && attempts < MAX_ATTEMPTS {
        attempts += 1;
        let lane = gen_lane(&mut rng, cfg);
        if lane.len() < 2 {
            continue;
        }
        if lanes
            .iter()
            .all(|o| polyline_polyline_distance(o, &lane) >= cfg.min_separation)
        {
            lanes.push(lane);
        }
    }
    if lanes.len() < wanted {
        log::warn!(
            "{image_id}: placed {} of {wanted} lanes after {MAX_ATTEMPTS} attempts",
            lanes.len()
        );
    }

    let mut annotation = ImageAnnotation::new(image_id, cfg.width, cfg.height);
    annotation.geo_transform = synthetic_geo_transform();
    for (i, verts) in lanes.into_iter().enumerate() {
        annotation.lanes.push(PixelLane {
            lane_id: format!("lane_{i}"),
            road_id: "road_0".into(),
            attributes: LaneAttributes::default(),
            pixel_vertices: verts,
        });
    }
    annotation.validate()?;

    let mut seg_mask = rasterize_mask(&annotation, DEFAULT_STROKE_WIDTH)?;
    if cfg.noise > 0.0 {
        let flip = cfg.noise / 2.0;
        for v in &mut seg_mask.data {
            if rng.gen_bool(flip) {
                *v ^= 1;
            }
        }
    }
    let features = feature_tensor(&seg_mask);
    let next = successor_labels(&annotation);
    Ok(SyntheticScene {
        annotation,
        seg_mask,
        features,
        next,
    })
}

/// Successor of every vertex in lane-major order, from the lane direction.
pub fn successor_labels(annotation: &ImageAnnotation) -> Vec<Option<usize>> {
    let mut next = Vec::new();
    for lane in &annotation.lanes {
        let base = next.len();
        let n = lane.pixel_vertices.len();
        next.extend((0..n).map(|i| (i + 1 < n).then_some(base + i + 1)));
    }
    next
}

/// Id of the `index`-th dataset scene.
pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// The `index`-th scene of the dataset seeded by `cfg.seed`.
pub fn dataset_scene(cfg: &SynthConfig, index: usize) -> Result<SyntheticScene> {
    gen_scene_named(&cfg.for_scene(index as u64), scene_id(index))
}

/// `n` independent scenes plus a 7:2:1 split over their ids.
pub fn gen_dataset(
    cfg: &SynthConfig,
    n_scenes: usize,
) -> Result<(Vec<SyntheticScene>, SplitAssignment)> {
    if n_scenes == 0 {
        return Err(Error::invalid("scene count", "must be ≥ 1"));
    }
    let scenes = (0..n_scenes)
        .map(|i| dataset_scene(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = (0..n_scenes).map(scene_id).collect();
    let split = split_dataset(&ids, cfg.seed)?;
    Ok((scenes, split))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chord_placement_on_a_line() {
        let dense: Vec<P> = (0..=100).map(|i| P::new(i as f64, 5.0)).collect();
        let v = place_vertices(&dense, 15.0, 15.0);
        let xs: Vec<f64> = v.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0]);
        let v = place_vertices(&dense, 20.0, 15.0);
        assert_eq!(v.last().unwrap().x, 100.0);
    }

    #[test]
    fn zero_lanes_gives_blank_scene() {
        let cfg = SynthConfig {
            min_lanes: 0,
            max_lanes: 0,
            ..Default::default()
        };
        let s = gen_scene(&cfg).unwrap();
        assert!(s.annotation.lanes.is_empty());
        assert_eq!(s.seg_mask.count_ones(), 0);
        assert!(s.next.is_empty());
    }

    #[test]
    fn blur_preserves_mass_away_from_borders() {
        let mut m = LaneMask::empty(40, 40, 5.0);
        m.data[20 * 40 + 20] = 1;
        let f = feature_tensor(&m);
        let total: f32 = (0..40)
            .flat_map(|y| (0..40).map(move |x| (y, x)))
            .map(|(y, x)| f.get(y, x, 1))
            .sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert!((f.get(0, 0, 2) - 0.5 / 40.0).abs() < 1e-7);
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            SynthConfig {
                min_lanes: 4,
                max_lanes: 2,
                ..Default::default()
            },
            SynthConfig {
                min_spacing: 0.0,
                ..Default::default()
            },
            SynthConfig {
                min_separation: 0.0,
                ..Default::default()
            },
            SynthConfig {
                noise: 1.5,
                ..Default::default()
            },
            SynthConfig {
                width: 4,
                ..Default::default()
            },
        ] {
            assert!(gen_scene(&bad).is_err());
        }
    }
}
