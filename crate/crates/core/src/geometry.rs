//! Planar pixel-space geometry.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Continuous image-frame position: x to the right, y downward.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PixelPoint<S> {
    pub x: S,
    pub y: S,
}

impl<S: Scalar> PixelPoint<S> {
    pub fn new(x: S, y: S) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dot(self, other: Self) -> S {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> S {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Self) -> S {
        (self - other).norm()
    }

    pub fn distance_sq(self, other: Self) -> S {
        let d = self - other;
        d.dot(d)
    }

    pub fn lerp(self, other: Self, t: S) -> Self {
        self + (other - self) * t
    }

    pub fn cast<T: Scalar>(self) -> PixelPoint<T> {
        PixelPoint {
            x: T::of(self.x.as_f64()),
            y: T::of(self.y.as_f64()),
        }
    }
}

impl<S: Scalar> Add for PixelPoint<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<S: Scalar> Sub for PixelPoint<S> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<S: Scalar> Mul<S> for PixelPoint<S> {
    type Output = Self;
    fn mul(self, k: S) -> Self {
        Self::new(self.x * k, self.y * k)
    }
}

/// Euclidean distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance<S: Scalar>(
    p: PixelPoint<S>,
    a: PixelPoint<S>,
    b: PixelPoint<S>,
) -> S {
    let ab = b - a;
    let len_sq = ab.dot(ab);
    if len_sq == S::zero() {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len_sq).max(S::zero()).min(S::one());
    p.distance(a + ab * t)
}

/// Minimum distance from `p` to any segment of `polyline`.
pub fn point_polyline_distance<S: Scalar>(p: PixelPoint<S>, polyline: &[PixelPoint<S>]) -> S {
    match polyline {
        [] => S::infinity(),
        [only] => p.distance(*only),
        _ => polyline
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(S::infinity(), S::min),
    }
}

fn orient<S: Scalar>(a: PixelPoint<S>, b: PixelPoint<S>, c: PixelPoint<S>) -> S {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Minimum distance between closed segments `[a, b]` and `[c, d]`.
pub fn segment_segment_distance<S: Scalar>(
    a: PixelPoint<S>,
    b: PixelPoint<S>,
    c: PixelPoint<S>,
    d: PixelPoint<S>,
) -> S {
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    let z = S::zero();
    if ((o1 > z && o2 < z) || (o1 < z && o2 > z)) && ((o3 > z && o4 < z) || (o3 < z && o4 > z)) {
        return z;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

/// Minimum distance between two polylines (segment-wise).
pub fn polyline_polyline_distance<S: Scalar>(p: &[PixelPoint<S>], q: &[PixelPoint<S>]) -> S {
    let mut best = S::infinity();
    for u in p.windows(2) {
        for v in q.windows(2) {
            best = best.min(segment_segment_distance(u[0], u[1], v[0], v[1]));
        }
    }
    best
}

pub fn polyline_length<S: Scalar>(polyline: &[PixelPoint<S>]) -> S {
    polyline.windows(2).map(|w| w[0].distance(w[1])).sum()
}
