//! Geo-referenced lane annotations: directional polylines of WGS84 vertices.

use std::collections::HashSet;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PixelPoint;
use crate::scalar::Scalar;

/// Mean Earth radius used for all geodesic lengths, in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint<S> {
    pub lon: S,
    pub lat: S,
}

impl<S: Scalar> GeoPoint<S> {
    pub fn new(lon: S, lat: S) -> Result<Self> {
        let p = Self { lon, lat };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (lon, lat) = (self.lon.as_f64(), self.lat.as_f64());
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::invalid(
                "longitude",
                format!("{lon} outside [-180, 180]"),
            ));
        }
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::invalid(
                "latitude",
                format!("{lat} outside [-90, 90]"),
            ));
        }
        Ok(())
    }
}

/// Per-image affine georeference (world-file convention):
/// `lon = a·x + b·y + c`, `lat = d·x + e·y + f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform<S> {
    pub a: S,
    pub b: S,
    pub c: S,
    pub d: S,
    pub e: S,
    pub f: S,
}

impl<S: Scalar> GeoTransform<S> {
    pub fn new(a: S, b: S, c: S, d: S, e: S, f: S) -> Self {
        Self { a, b, c, d, e, f }
    }

    pub fn identity() -> Self {
        let (o, z) = (S::one(), S::zero());
        Self::new(o, z, z, z, o, z)
    }

    pub fn determinant(&self) -> S {
        self.a * self.e - self.b * self.d
    }

    pub fn is_invertible(&self) -> bool {
        let det = self.determinant();
        det != S::zero() && det.is_finite()
    }

    pub fn pixel_to_geo(&self, p: PixelPoint<S>) -> GeoPoint<S> {
        GeoPoint {
            lon: self.a * p.x + self.b * p.y + self.c,
            lat: self.d * p.x + self.e * p.y + self.f,
        }
    }

    pub fn geo_to_pixel(&self, g: GeoPoint<S>) -> Result<PixelPoint<S>> {
        let det = self.determinant();
        if !self.is_invertible() {
            return Err(Error::Singular { det: det.as_f64() });
        }
        let (u, v) = (g.lon - self.c, g.lat - self.f);
        Ok(PixelPoint::new(
            (self.e * u - self.b * v) / det,
            (self.a * v - self.d * u) / det,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineForm {
    Single,
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaneColor {
    White,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Continuity {
    Solid,
    Dash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LaneAttributes {
    pub line_form: LineForm,
    pub color: LaneColor,
    pub continuity: Continuity,
}

impl Default for LaneAttributes {
    fn default() -> Self {
        Self {
            line_form: LineForm::Single,
            color: LaneColor::White,
            continuity: Continuity::Solid,
        }
    }
}

/// A painted lane line. Vertex order is the lane direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub lane_id: String,
    pub road_id: String,
    pub attributes: LaneAttributes,
    pub vertices: Vec<GeoPoint<f64>>,
}

impl Lane {
    pub fn new(
        lane_id: impl Into<String>,
        road_id: impl Into<String>,
        attributes: LaneAttributes,
        vertices: Vec<GeoPoint<f64>>,
    ) -> Result<Self> {
        let lane = Self {
            lane_id: lane_id.into(),
            road_id: road_id.into(),
            attributes,
            vertices,
        };
        lane.validate()?;
        Ok(lane)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 2 {
            return Err(Error::invalid(
                "lane",
                format!(
                    "`{}` has {} vertices, need at least 2",
                    self.lane_id,
                    self.vertices.len()
                ),
            ));
        }
        for v in &self.vertices {
            v.validate()?;
        }
        if let Some(i) = self.vertices.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::invalid(
                "lane",
                format!(
                    "`{}` repeats vertex {} at position {}",
                    self.lane_id,
                    i,
                    i + 1
                ),
            ));
        }
        Ok(())
    }

    pub fn length_m(&self) -> f64 {
        lane_length_m(self)
    }

    pub fn reversed(&self) -> Self {
        let mut lane = self.clone();
        lane.vertices.reverse();
        lane
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneMap {
    pub region: String,
    pub lanes: Vec<Lane>,
}

impl LaneMap {
    pub fn new(region: impl Into<String>, lanes: Vec<Lane>) -> Result<Self> {
        let map = Self {
            region: region.into(),
            lanes,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for lane in &self.lanes {
            lane.validate()?;
            if !seen.insert(lane.lane_id.as_str()) {
                return Err(Error::invalid(
                    "lane map",
                    format!(
                        "duplicate lane_id `{}` in region `{}`",
                        lane.lane_id, self.region
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Great-circle distance in meters.
pub fn haversine_m(p: GeoPoint<f64>, q: GeoPoint<f64>) -> f64 {
    let (phi1, phi2) = (p.lat.to_radians(), q.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (q.lon - p.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

pub fn lane_length_m(lane: &Lane) -> f64 {
    lane.vertices
        .windows(2)
        .map(|w| haversine_m(w[0], w[1]))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MapStats {
    pub lane_count: usize,
    pub vertex_count: usize,
    pub total_length_km: f64,
}

impl Add for MapStats {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            lane_count: self.lane_count + o.lane_count,
            vertex_count: self.vertex_count + o.vertex_count,
            total_length_km: self.total_length_km + o.total_length_km,
        }
    }
}

pub fn map_stats(map: &LaneMap) -> MapStats {
    MapStats {
        lane_count: map.lanes.len(),
        vertex_count: map.lanes.iter().map(|l| l.vertices.len()).sum(),
        total_length_km: map.lanes.iter().map(lane_length_m).sum::<f64>() / 1000.0,
    }
}

const INSIDE: u8 = 0;
const LEFT: u8 = 1;
const RIGHT: u8 = 2;
const TOP: u8 = 4;
const BOTTOM: u8 = 8;

fn outcode(p: PixelPoint<f64>, w: f64, h: f64) -> u8 {
    let mut code = INSIDE;
    if p.x < 0.0 {
        code |= LEFT;
    } else if p.x > w {
        code |= RIGHT;
    }
    if p.y < 0.0 {
        code |= TOP;
    } else if p.y > h {
        code |= BOTTOM;
    }
    code
}

/// Cohen–Sutherland clip of `[p, q]` to `[0,w]×[0,h]`; border hits land exactly on the border.
pub fn clip_segment(
    mut p: PixelPoint<f64>,
    mut q: PixelPoint<f64>,
    w: f64,
    h: f64,
) -> Option<(PixelPoint<f64>, PixelPoint<f64>)> {
    let (mut cp, mut cq) = (outcode(p, w, h), outcode(q, w, h));
    // Each pass pins one coordinate to a border, so a handful of passes always suffices.
    for _ in 0..8 {
        if cp | cq == INSIDE {
            return Some((p, q));
        }
        if cp & cq != INSIDE {
            return None;
        }
        let out = if cp != INSIDE { cp } else { cq };
        let (dx, dy) = (q.x - p.x, q.y - p.y);
        let r = if out & BOTTOM != 0 {
            PixelPoint::new(p.x + dx * (h - p.y) / dy, h)
        } else if out & TOP != 0 {
            PixelPoint::new(p.x + dx * (0.0 - p.y) / dy, 0.0)
        } else if out & RIGHT != 0 {
            PixelPoint::new(w, p.y + dy * (w - p.x) / dx)
        } else {
            PixelPoint::new(0.0, p.y + dy * (0.0 - p.x) / dx)
        };
        if out == cp {
            p = r;
            cp = outcode(p, w, h);
        } else {
            q = r;
            cq = outcode(q, w, h);
        }
    }
    None
}

/// Projects a lane into an image patch, splitting it wherever it leaves the patch.
pub fn project_lane(
    t: &GeoTransform<f64>,
    lane: &Lane,
    w: f64,
    h: f64,
) -> Result<Vec<Vec<PixelPoint<f64>>>> {
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::invalid("patch size", format!("{w}×{h}")));
    }
    let pixels = lane
        .vertices
        .iter()
        .map(|g| t.geo_to_pixel(*g))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    let mut current: Vec<PixelPoint<f64>> = Vec::new();
    let flush = |current: &mut Vec<PixelPoint<f64>>, out: &mut Vec<Vec<PixelPoint<f64>>>| {
        if current.len() >= 2 {
            out.push(std::mem::take(current));
        } else {
            current.clear();
        }
    };
    for seg in pixels.windows(2) {
        let Some((a, b)) = clip_segment(seg[0], seg[1], w, h) else {
            flush(&mut current, &mut out);
            continue;
        };
        if a == b {
            continue;
        }
        if current.last() != Some(&a) {
            flush(&mut current, &mut out);
            current.push(a);
        }
        current.push(b);
        if b != seg[1] {
            flush(&mut current, &mut out);
        }
    }
    flush(&mut current, &mut out);
    Ok(out)
}
