//! Per-image annotation documents, lane masks and dataset splits.
//!
//! An annotation document is UTF-8 JSON holding either one image object or an
//! array of them. Each image object carries `image_id`, `width`, `height`,
//! `geo_transform` (`a`..`f`) and `lanes`; each lane carries `lane_id`,
//! `road_id`, `attributes` (three lowercase strings) and `pixel_vertices`.

use std::collections::HashSet;
use std::fmt;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{point_segment_distance, PixelPoint};
use crate::lane_model::{GeoTransform, Lane, LaneAttributes, LaneMap};

pub const DEFAULT_PATCH_SIZE: u32 = 1280;
pub const DEFAULT_STROKE_WIDTH: f64 = 5.0;

fn default_patch_size() -> u32 {
    DEFAULT_PATCH_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelLane {
    pub lane_id: String,
    pub road_id: String,
    pub attributes: LaneAttributes,
    pub pixel_vertices: Vec<PixelPoint<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageAnnotation {
    pub image_id: String,
    #[serde(default = "default_patch_size")]
    pub width: u32,
    #[serde(default = "default_patch_size")]
    pub height: u32,
    pub geo_transform: GeoTransform<f64>,
    pub lanes: Vec<PixelLane>,
}

impl ImageAnnotation {
    pub fn new(image_id: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            geo_transform: GeoTransform::identity(),
            lanes: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |lane: Option<&str>, reason: String| Error::Validation {
            image_id: self.image_id.clone(),
            lane_id: lane.map(str::to_owned),
            reason,
        };
        if self.width == 0 || self.height == 0 {
            return Err(fail(
                None,
                format!("image size {}×{} must be positive", self.width, self.height),
            ));
        }
        if !self.geo_transform.is_invertible() {
            return Err(fail(None, "geo_transform is not invertible".into()));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        let mut seen = HashSet::new();
        for lane in &self.lanes {
            let id = Some(lane.lane_id.as_str());
            if !seen.insert(lane.lane_id.as_str()) {
                return Err(fail(id, "duplicate lane_id".into()));
            }
            if lane.pixel_vertices.len() < 2 {
                return Err(fail(
                    id,
                    format!("{} vertices, need at least 2", lane.pixel_vertices.len()),
                ));
            }
            for (i, p) in lane.pixel_vertices.iter().enumerate() {
                if !p.is_finite() || p.x < 0.0 || p.x > w || p.y < 0.0 || p.y > h {
                    return Err(fail(
                        id,
                        format!("vertex {i} ({}, {}) outside {w}×{h}", p.x, p.y),
                    ));
                }
            }
            if let Some(i) = lane.pixel_vertices.windows(2).position(|p| p[0] == p[1]) {
                return Err(fail(id, format!("vertex {} repeats vertex {i}", i + 1)));
            }
        }
        Ok(())
    }

    /// Lanes converted to geographic coordinates through the image transform.
    pub fn to_lane_map(&self, region: impl Into<String>) -> Result<LaneMap> {
        let lanes = self
            .lanes
            .iter()
            .map(|l| {
                let vertices = l
                    .pixel_vertices
                    .iter()
                    .map(|p| {
                        let g = self.geo_transform.pixel_to_geo(*p);
                        g.validate().map(|_| g)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Lane::new(l.lane_id.clone(), l.road_id.clone(), l.attributes, vertices)
            })
            .collect::<Result<Vec<_>>>()?;
        LaneMap::new(region, lanes)
    }

    pub fn polylines(&self) -> Vec<Vec<PixelPoint<f64>>> {
        self.lanes
            .iter()
            .map(|l| l.pixel_vertices.clone())
            .collect()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Document {
    Many(Vec<ImageAnnotation>),
    One(ImageAnnotation),
}

/// Parses and validates an annotation document.
pub fn parse_annotations(text: &str, origin: &Path) -> Result<Vec<ImageAnnotation>> {
    // Parse strictly first so syntax errors keep their line/column.
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.into(),
        reason: e.to_string(),
    })?;
    let doc: Document = if value.is_array() {
        serde_json::from_value::<Vec<ImageAnnotation>>(value).map(Document::Many)
    } else {
        serde_json::from_value::<ImageAnnotation>(value).map(Document::One)
    }
    .map_err(|e| Error::Parse {
        path: origin.into(),
        reason: e.to_string(),
    })?;
    let anns = match doc {
        Document::Many(v) => v,
        Document::One(a) => vec![a],
    };
    for a in &anns {
        a.validate()?;
    }
    Ok(anns)
}

/// Loads one document, or every `*.json` document of a directory in file-name order.
pub fn load_annotations(path: &Path) -> Result<Vec<ImageAnnotation>> {
    if path.is_dir() {
        let mut files = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect::<Vec<_>>();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(load_annotations(&f)?);
        }
        return Ok(out);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

/// Serializes annotations as a JSON array with fixed key order.
pub fn save_annotations(anns: &[ImageAnnotation]) -> String {
    let mut s = serde_json::to_string_pretty(anns).expect("annotations serialize");
    s.push('\n');
    s
}

pub fn write_annotations(path: &Path, anns: &[ImageAnnotation]) -> Result<()> {
    std::fs::write(path, save_annotations(anns)).map_err(|e| Error::io(path, e))
}

/// Binary lane raster, row-major, values 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneMask {
    pub width: usize,
    pub height: usize,
    pub stroke_width: f64,
    pub data: Vec<u8>,
}

impl LaneMask {
    pub fn empty(width: usize, height: usize, stroke_width: f64) -> Self {
        Self {
            width,
            height,
            stroke_width,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// True when every lane pixel of `self` is also a lane pixel of `other`.
    pub fn is_subset_of(&self, other: &LaneMask) -> bool {
        self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a == 0 || b != 0)
    }

    /// 8-bit grayscale PNG: 0 background, 255 lane.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::invalid("png", e.to_string()))?;
            let pixels: Vec<u8> = self
                .data
                .iter()
                .map(|&v| if v != 0 { 255 } else { 0 })
                .collect();
            writer
                .write_image_data(&pixels)
                .map_err(|e| Error::invalid("png", e.to_string()))?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8], stroke_width: f64) -> Result<Self> {
        let bad = |e: String| Error::invalid("mask png", e);
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
        let mut buf = vec![
            0;
            reader
                .output_buffer_size()
                .ok_or_else(|| bad("image too large".into()))?
        ];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| bad(e.to_string()))?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(bad(format!(
                "expected 8-bit grayscale, got {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let data = (0..h)
            .flat_map(|y| {
                let row = &buf[y * info.line_size..y * info.line_size + w];
                row.iter().map(|&v| u8::from(v >= 128))
            })
            .collect();
        Ok(Self {
            width: w,
            height: h,
            stroke_width,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path, stroke_width: f64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png(&bytes, stroke_width)
    }
}

/// Marks every pixel whose center lies within `stroke_width / 2` of a lane segment.
pub fn rasterize_mask(ann: &ImageAnnotation, stroke_width: f64) -> Result<LaneMask> {
    if !(stroke_width >= 1.0) {
        return Err(Error::invalid(
            "stroke width",
            format!("{stroke_width} < 1"),
        ));
    }
    let (w, h) = (ann.width as usize, ann.height as usize);
    let mut mask = LaneMask::empty(w, h, stroke_width);
    let r = stroke_width / 2.0;
    for lane in &ann.lanes {
        for seg in lane.pixel_vertices.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
            let (x0, x1) = (
                clamp((a.x.min(b.x) - r - 1.0).floor(), w),
                clamp((a.x.max(b.x) + r + 1.0).ceil(), w),
            );
            let (y0, y1) = (
                clamp((a.y.min(b.y) - r - 1.0).floor(), h),
                clamp((a.y.max(b.y) + r + 1.0).ceil(), h),
            );
            for y in y0..y1 {
                for x in x0..x1 {
                    let c = PixelPoint::new(x as f64 + 0.5, y as f64 + 0.5);
                    if point_segment_distance(c, a, b) <= r {
                        mask.data[y * w + x] = 1;
                    }
                }
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("unknown split `{other}`"))),
        }
    }
}

/// Image ids in input order with their split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub entries: Vec<(String, Split)>,
}

impl SplitAssignment {
    pub fn sizes(&self) -> (usize, usize, usize) {
        let count = |s| self.entries.iter().filter(|(_, x)| *x == s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }

    pub fn ids(&self, split: Split) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(move |(_, s)| *s == split)
            .map(|(id, _)| id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<Split> {
        self.entries.iter().find(|(i, _)| i == id).map(|(_, s)| *s)
    }

    /// `image_id<TAB>split` lines.
    pub fn to_manifest(&self) -> String {
        self.entries
            .iter()
            .map(|(id, s)| format!("{id}\t{s}\n"))
            .collect()
    }

    pub fn parse_manifest(text: &str, seed: u64) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let (id, split) = l
                    .split_once('\t')
                    .ok_or_else(|| Error::invalid("manifest line", l.to_owned()))?;
                Ok((id.to_owned(), split.trim().parse()?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed, entries })
    }
}

/// Train/val/test sizes for `n` items at 7:2:1.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = ((n as f64) * 0.7).round() as usize;
    let val = (((n as f64) * 0.2).round() as usize).min(n - train);
    (train, val, n - train - val)
}

fn split_key(seed: u64, id: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(id.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Deterministic 7:2:1 partition ordered by a seeded hash of each id.
pub fn split_dataset<S: AsRef<str>>(ids: &[S], seed: u64) -> Result<SplitAssignment> {
    if ids.is_empty() {
        return Err(Error::invalid("image ids", "nothing to split"));
    }
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_ref()) {
            return Err(Error::invalid(
                "image ids",
                format!("duplicate id `{}`", id.as_ref()),
            ));
        }
    }
    let mut order: Vec<(u64, usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| (split_key(seed, id.as_ref()), i))
        .collect();
    order.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| ids[a.1].as_ref().cmp(ids[b.1].as_ref()))
    });

    let (train, val, _) = split_sizes(ids.len());
    let mut splits = vec![Split::Test; ids.len()];
    for (rank, &(_, i)) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(SplitAssignment {
        seed,
        entries: ids
            .iter()
            .map(|s| s.as_ref().to_owned())
            .zip(splits)
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lane(id: &str, pts: &[(f64, f64)]) -> PixelLane {
        PixelLane {
            lane_id: id.into(),
            road_id: "r".into(),
            attributes: LaneAttributes::default(),
            pixel_vertices: pts.iter().map(|&(x, y)| PixelPoint::new(x, y)).collect(),
        }
    }

    #[test]
    fn empty_lane_list_loads() {
        let text =
            r#"{"image_id":"a","geo_transform":{"a":1,"b":0,"c":0,"d":0,"e":1,"f":0},"lanes":[]}"#;
        let anns = parse_annotations(text, Path::new("mem")).unwrap();
        assert_eq!(anns.len(), 1);
        assert!(anns[0].lanes.is_empty());
        assert_eq!((anns[0].width, anns[0].height), (1280, 1280));
    }

    #[test]
    fn one_vertex_lane_names_the_lane() {
        let mut ann = ImageAnnotation::new("img", 100, 100);
        ann.lanes.push(lane("lonely", &[(1.0, 1.0)]));
        let err = parse_annotations(&save_annotations(&[ann]), Path::new("mem")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lonely") && msg.contains("img"), "{msg}");
    }

    #[test]
    fn out_of_bounds_and_duplicates_rejected() {
        let mut ann = ImageAnnotation::new("img", 10, 10);
        ann.lanes.push(lane("a", &[(1.0, 1.0), (11.0, 1.0)]));
        assert!(ann.validate().is_err());
        let mut ann = ImageAnnotation::new("img", 10, 10);
        ann.lanes.push(lane("a", &[(1.0, 1.0), (2.0, 1.0)]));
        ann.lanes.push(lane("a", &[(1.0, 3.0), (2.0, 3.0)]));
        assert!(ann.validate().is_err());
    }

    #[test]
    fn malformed_document_is_parse_error() {
        assert!(matches!(
            parse_annotations("{not json", Path::new("mem")),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_annotations(r#"{"image_id":"a","lanes":[],"bogus":1}"#, Path::new("mem")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn empty_sequence_round_trips() {
        let doc = save_annotations(&[]);
        assert_eq!(parse_annotations(&doc, Path::new("mem")).unwrap(), vec![]);
    }

    #[test]
    fn reserialization_is_byte_identical() {
        let mut ann = ImageAnnotation::new("img", 64, 64);
        ann.geo_transform = GeoTransform::new(1e-6, 0.0, 31.2345678901, 0.0, -1e-6, 30.0444);
        ann.lanes
            .push(lane("a", &[(0.123456789012, 1.0), (63.9999999, 64.0)]));
        let doc = save_annotations(&[ann]);
        let again = save_annotations(&parse_annotations(&doc, Path::new("mem")).unwrap());
        assert_eq!(doc, again);
    }

    #[test]
    fn empty_annotation_gives_empty_mask() {
        let mask = rasterize_mask(&ImageAnnotation::new("e", 16, 8), 5.0).unwrap();
        assert_eq!(mask.count_ones(), 0);
        assert!(rasterize_mask(&ImageAnnotation::new("e", 16, 8), 0.5).is_err());
    }

    #[test]
    fn horizontal_segment_mask_matches_pixel_oracle() {
        let mut ann = ImageAnnotation::new("h", 32, 24);
        ann.lanes.push(lane("a", &[(0.0, 10.0), (20.0, 10.0)]));
        let mask = rasterize_mask(&ann, 5.0).unwrap();
        for y in 0..24 {
            for x in 0..32 {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                // Distance to the segment written out by cases: body, then the two caps.
                let d = if (0.0..=20.0).contains(&cx) {
                    (cy - 10.0).abs()
                } else if cx < 0.0 {
                    cx.hypot(cy - 10.0)
                } else {
                    (cx - 20.0).hypot(cy - 10.0)
                };
                assert_eq!(mask.get(x, y), u8::from(d <= 2.5), "pixel ({x},{y}) d={d}");
            }
        }
        // Rows 7..=12 have centers (7.5..=12.5) within 2.5 of y = 10, boundaries inclusive.
        assert_eq!(mask.get(5, 6), 0);
        assert_eq!(mask.get(5, 7), 1);
        assert_eq!(mask.get(5, 12), 1);
        assert_eq!(mask.get(5, 13), 0);
        assert_eq!(mask.get(21, 10), 1);
        assert_eq!(mask.get(22, 10), 0);
    }

    #[test]
    fn png_round_trip() {
        let mut ann = ImageAnnotation::new("p", 40, 30);
        ann.lanes.push(lane("a", &[(3.0, 3.0), (37.0, 25.0)]));
        let mask = rasterize_mask(&ann, 5.0).unwrap();
        let back = LaneMask::from_png(&mask.to_png().unwrap(), 5.0).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn split_examples() {
        let ids: Vec<String> = (0..10).map(|i| format!("img{i}")).collect();
        let a = split_dataset(&ids, 3).unwrap();
        assert_eq!(a.sizes(), (7, 2, 1));
        assert_eq!(a, split_dataset(&ids, 3).unwrap());
        assert_eq!(split_sizes(7763), (5434, 1553, 776));
        assert!(split_dataset::<&str>(&[], 0).is_err());
        assert!(split_dataset(&["a", "b", "a"], 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let a = split_dataset(&["x", "y", "z"], 9).unwrap();
        let back = SplitAssignment::parse_manifest(&a.to_manifest(), 9).unwrap();
        assert_eq!(a, back);
    }

    fn annotation() -> impl Strategy<Value = ImageAnnotation> {
        let lane_pts = prop::collection::vec((0.0..200.0f64, 0.0..150.0f64), 2..8);
        (
            prop::collection::vec(lane_pts, 0..5),
            -1.0..1.0f64,
            1e-7..1e-3f64,
        )
            .prop_map(|(lanes, c, s)| {
                let mut ann = ImageAnnotation::new("rand", 200, 150);
                ann.geo_transform = GeoTransform::new(s, 0.0, c, 0.0, -s, c / 2.0);
                for (i, pts) in lanes.into_iter().enumerate() {
                    let mut l = lane(&format!("l{i}"), &pts);
                    l.road_id = format!("road{}", i % 2);
                    l.pixel_vertices.dedup();
                    if l.pixel_vertices.len() >= 2 {
                        ann.lanes.push(l);
                    }
                }
                ann
            })
    }

    proptest! {
        #[test]
        fn serialization_is_lossless(anns in prop::collection::vec(annotation(), 0..3)) {
            let anns: Vec<_> = anns.into_iter().enumerate().map(|(i, mut a)| { a.image_id = format!("img{i}"); a }).collect();
            let back = parse_annotations(&save_annotations(&anns), Path::new("mem")).unwrap();
            prop_assert_eq!(back, anns);
        }

        #[test]
        fn wider_stroke_is_superset(ann in annotation(), w1 in 1.0..6.0f64, extra in 0.0..6.0f64) {
            let thin = rasterize_mask(&ann, w1).unwrap();
            let thick = rasterize_mask(&ann, w1 + extra).unwrap();
            prop_assert!(thin.is_subset_of(&thick));
        }

        #[test]
        fn mask_ignores_direction(ann in annotation()) {
            let mut rev = ann.clone();
            for l in &mut rev.lanes {
                l.pixel_vertices.reverse();
            }
            prop_assert_eq!(rasterize_mask(&ann, 5.0).unwrap(), rasterize_mask(&rev, 5.0).unwrap());
        }

        #[test]
        fn split_partitions(n in 1usize..300, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| format!("id-{i}")).collect();
            let a = split_dataset(&ids, seed).unwrap();
            prop_assert_eq!(a.entries.len(), n);
            let (tr, va, te) = a.sizes();
            prop_assert_eq!(tr + va + te, n);
            prop_assert!((tr as f64 - 0.7 * n as f64).abs() <= 1.0);
            prop_assert!((va as f64 - 0.2 * n as f64).abs() <= 1.0);
            prop_assert!((te as f64 - 0.1 * n as f64).abs() <= 1.0);
        }
    }
}
