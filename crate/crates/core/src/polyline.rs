//! Turning per-vertex successor decisions into vertex-disjoint directed polylines.
//!
//! The cleanup keeps in-degree ≤ 1 by retaining the most confident edge into
//! each vertex, then opens every remaining cycle at its least confident edge.

use std::collections::BTreeMap;

use crate::dataset_io::{ImageAnnotation, PixelLane};
use crate::error::{Error, Result};
use crate::geometry::PixelPoint;
use crate::lane_model::{GeoTransform, LaneAttributes};
use crate::matcher::{CandidateSet, Choice, MatchDecision};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectedEdge<S> {
    pub from: usize,
    pub to: usize,
    pub confidence: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VertexGraph<S> {
    pub vertices: Vec<PixelPoint<S>>,
    pub edges: Vec<DirectedEdge<S>>,
}

/// Orders by confidence, then prefers the smaller `from` index.
fn stronger<S: Scalar>(a: &DirectedEdge<S>, b: &DirectedEdge<S>) -> bool {
    a.confidence > b.confidence || (a.confidence == b.confidence && a.from < b.from)
}

/// One edge per vertex toward its winning candidate; terminal or padding wins emit nothing.
pub fn link<S: Scalar>(decisions: &[(CandidateSet<S>, MatchDecision<S>)]) -> Vec<DirectedEdge<S>> {
    let mut edges: Vec<DirectedEdge<S>> = decisions
        .iter()
        .filter_map(|(cand, dec)| match dec.choice(cand) {
            Choice::Next { vertex, .. } => Some(DirectedEdge {
                from: cand.anchor,
                to: vertex,
                confidence: dec.confidence(),
            }),
            Choice::Terminal | Choice::None => None,
        })
        .collect();
    edges.sort_by_key(|e| e.from);
    edges
}

/// Keeps at most one edge into each vertex.
pub fn resolve_conflicts<S: Scalar>(edges: &[DirectedEdge<S>]) -> Vec<DirectedEdge<S>> {
    let mut best: BTreeMap<usize, DirectedEdge<S>> = BTreeMap::new();
    for e in edges {
        match best.get(&e.to) {
            Some(kept) if !stronger(e, kept) => {}
            _ => {
                best.insert(e.to, *e);
            }
        }
    }
    let mut out: Vec<_> = best.into_values().collect();
    out.sort_by_key(|e| e.from);
    out
}

/// Removes the weakest edge of every cycle; expects out-degree ≤ 1.
pub fn break_cycles<S: Scalar>(edges: &[DirectedEdge<S>]) -> Vec<DirectedEdge<S>> {
    let next: BTreeMap<usize, &DirectedEdge<S>> = edges.iter().map(|e| (e.from, e)).collect();
    // Id of the walk that first reached each vertex.
    let mut walk_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut dropped: Vec<(usize, usize)> = Vec::new();
    for (walk, &start) in next.keys().enumerate() {
        let walk = walk + 1;
        let mut v = start;
        loop {
            match walk_of.get(&v) {
                Some(&w) if w == walk => {
                    // Back at a vertex of this walk: `v` lies on a cycle.
                    let mut weakest = next[&v];
                    let mut u = next[&v].to;
                    while u != v {
                        let c = next[&u];
                        // Ties remove the edge with the smaller `from` index.
                        if c.confidence < weakest.confidence
                            || (c.confidence == weakest.confidence && c.from < weakest.from)
                        {
                            weakest = c;
                        }
                        u = next[&u].to;
                    }
                    dropped.push((weakest.from, weakest.to));
                    break;
                }
                Some(_) => break,
                None => {
                    walk_of.insert(v, walk);
                }
            }
            match next.get(&v) {
                Some(e) => v = e.to,
                None => break,
            }
        }
    }
    edges
        .iter()
        .filter(|e| !dropped.contains(&(e.from, e.to)))
        .copied()
        .collect()
}

/// Walks every chain from its head; polylines are ordered by start index.
pub fn extract_polylines<S: Scalar>(
    n_vertices: usize,
    edges: &[DirectedEdge<S>],
) -> Result<Vec<Vec<usize>>> {
    let mut next = vec![None; n_vertices];
    let mut indeg = vec![0usize; n_vertices];
    for e in edges {
        if e.from >= n_vertices || e.to >= n_vertices {
            return Err(Error::invalid(
                "edge",
                format!("{} → {} outside {n_vertices} vertices", e.from, e.to),
            ));
        }
        if e.from == e.to {
            return Err(Error::invalid("edge", format!("self loop at {}", e.from)));
        }
        if next[e.from].replace(e.to).is_some() {
            return Err(Error::invalid(
                "graph",
                format!("vertex {} has out-degree > 1", e.from),
            ));
        }
        indeg[e.to] += 1;
        if indeg[e.to] > 1 {
            return Err(Error::invalid(
                "graph",
                format!("vertex {} has in-degree > 1", e.to),
            ));
        }
    }
    let mut covered = 0usize;
    let mut polylines = Vec::new();
    for start in 0..n_vertices {
        if indeg[start] != 0 || next[start].is_none() {
            continue;
        }
        let mut chain = vec![start];
        let mut v = start;
        while let Some(n) = next[v] {
            chain.push(n);
            v = n;
        }
        covered += chain.len();
        polylines.push(chain);
    }
    let non_isolated = (0..n_vertices)
        .filter(|&v| indeg[v] > 0 || next[v].is_some())
        .count();
    if covered != non_isolated {
        return Err(Error::invalid("graph", "contains a cycle"));
    }
    Ok(polylines)
}

/// `link → resolve_conflicts → break_cycles → extract_polylines`.
pub fn build_polylines<S: Scalar>(
    n_vertices: usize,
    decisions: &[(CandidateSet<S>, MatchDecision<S>)],
) -> Result<(Vec<DirectedEdge<S>>, Vec<Vec<usize>>)> {
    let edges = break_cycles(&resolve_conflicts(&link(decisions)));
    let polylines = extract_polylines(n_vertices, &edges)?;
    Ok((edges, polylines))
}

/// Index chains resolved to coordinates.
pub fn polyline_points<S: Scalar>(
    chains: &[Vec<usize>],
    points: &[PixelPoint<S>],
) -> Vec<Vec<PixelPoint<S>>> {
    chains
        .iter()
        .map(|c| c.iter().map(|&i| points[i]).collect())
        .collect()
}

/// Predicted polylines as an annotation record (`road_id` "pred", default attributes).
///
/// Vertices are clamped to the image; repeats created by clamping are merged and
/// lanes left with fewer than two vertices are dropped.
pub fn to_annotation<S: Scalar>(
    image_id: &str,
    width: u32,
    height: u32,
    geo_transform: GeoTransform<f64>,
    polylines: &[Vec<PixelPoint<S>>],
) -> ImageAnnotation {
    let (w, h) = (width as f64, height as f64);
    let mut ann = ImageAnnotation::new(image_id, width, height);
    ann.geo_transform = geo_transform;
    for poly in polylines {
        let mut verts: Vec<PixelPoint<f64>> = Vec::with_capacity(poly.len());
        for p in poly {
            let q = PixelPoint::new(p.x.as_f64().clamp(0.0, w), p.y.as_f64().clamp(0.0, h));
            if verts.last() != Some(&q) {
                verts.push(q);
            }
        }
        if verts.len() >= 2 {
            ann.lanes.push(PixelLane {
                lane_id: format!("pred_{}", ann.lanes.len()),
                road_id: "pred".into(),
                attributes: LaneAttributes::default(),
                pixel_vertices: verts,
            });
        }
    }
    ann
}
