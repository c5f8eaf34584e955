//! Second stage: choosing each vertex's successor among its nearest neighbours.
//!
//! For an anchor vertex the matcher gathers its `K` nearest vertices, builds an
//! `S×S` aggregated patch around it, and asks a [`Scorer`] for class
//! probabilities over the `K` candidates (plus a terminal class) together
//! with a corrected anchor location.

pub mod gradcheck;
pub mod losses;
mod patch;
mod scorer;
pub mod tiny;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PixelPoint;
use crate::scalar::Scalar;

pub use patch::{aggregate_patch, crop_origin, AggregatedPatch, UpsampledHeatmaps, VertexMaps};
pub use scorer::{GeometricScorer, OracleScorer, Scorer, ScoringInput};
pub use tiny::{
    EpochLog, Optimizer, TinyScorer, TinyShape, TrainConfig, TrainReport, TrainingExample,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub k: usize,
    /// Crop side `S` in feature-map pixels.
    pub crop_size: usize,
    pub c_feat: usize,
    pub use_terminal_class: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub use_offset_loss: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            k: 20,
            crop_size: 64,
            c_feat: 4,
            use_terminal_class: true,
            lambda1: 0.1,
            lambda2: 0.01,
            use_offset_loss: false,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::invalid("match.k", "must be ≥ 1"));
        }
        if self.crop_size < 4 || self.crop_size % 2 != 0 {
            return Err(Error::invalid(
                "match.crop_size",
                format!("{} must be even and ≥ 4", self.crop_size),
            ));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::invalid("match.lambda", "weights must be ≥ 0"));
        }
        Ok(())
    }

    /// Number of classification outputs: `K`, plus one for the terminal class.
    pub fn num_classes(&self) -> usize {
        self.k + usize::from(self.use_terminal_class)
    }

    /// Aggregated patch depth `c_feat + K + 2`.
    pub fn patch_channels(&self) -> usize {
        self.c_feat + self.k + 2
    }

    pub fn loss_weights(&self) -> losses::LossWeights {
        losses::LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            use_offset_loss: self.use_offset_loss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<S> {
    pub index: usize,
    pub distance: S,
}

/// The `K` nearest vertices of an anchor, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet<S> {
    pub anchor: usize,
    pub k: usize,
    pub neighbors: Vec<Candidate<S>>,
}

impl<S: Scalar> CandidateSet<S> {
    /// Empty slots when fewer than `K` other vertices exist.
    pub fn padding(&self) -> usize {
        self.k - self.neighbors.len()
    }

    /// Class slot of `vertex`, if it is among the candidates.
    pub fn slot_of(&self, vertex: usize) -> Option<usize> {
        self.neighbors.iter().position(|c| c.index == vertex)
    }

    /// Validity mask over the class vector: real candidates, then padding, then terminal.
    pub fn class_mask(&self, use_terminal_class: bool) -> Vec<bool> {
        let mut mask = vec![false; self.k + usize::from(use_terminal_class)];
        mask[..self.neighbors.len()]
            .iter_mut()
            .for_each(|m| *m = true);
        if use_terminal_class {
            mask[self.k] = true;
        }
        mask
    }
}

/// Nearest `k` vertices to `vertices[anchor]`, ordered by `(distance, y, x, index)`.
pub fn topk_neighbors<S: Scalar>(
    vertices: &[PixelPoint<S>],
    anchor: usize,
    k: usize,
) -> CandidateSet<S> {
    assert!(anchor < vertices.len(), "anchor {anchor} out of range");
    let a = vertices[anchor];
    let mut all: Vec<Candidate<S>> = vertices
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != anchor)
        .map(|(i, p)| Candidate {
            index: i,
            distance: a.distance(*p),
        })
        .collect();
    let key = |c: &Candidate<S>| (c.distance, vertices[c.index].y, vertices[c.index].x);
    let cmp = |l: &Candidate<S>, r: &Candidate<S>| {
        let (kl, kr) = (key(l), key(r));
        kl.0.partial_cmp(&kr.0)
            .unwrap_or(Ordering::Equal)
            .then(kl.1.partial_cmp(&kr.1).unwrap_or(Ordering::Equal))
            .then(kl.2.partial_cmp(&kr.2).unwrap_or(Ordering::Equal))
            .then(l.index.cmp(&r.index))
    };
    if all.len() > k {
        all.select_nth_unstable_by(k, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    CandidateSet {
        anchor,
        k,
        neighbors: all,
    }
}

/// The successor a decision points to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    Next {
        slot: usize,
        vertex: usize,
    },
    Terminal,
    /// The winning slot is padding; no real successor exists.
    None,
}

/// Class probabilities over `K` candidate slots (plus terminal) and a corrected anchor location.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchDecision<S> {
    pub class_probs: Vec<S>,
    pub location: PixelPoint<S>,
}

impl<S: Scalar> MatchDecision<S> {
    /// Index of the largest probability; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn choice(&self, candidates: &CandidateSet<S>) -> Choice {
        let slot = self.argmax();
        if slot >= candidates.k {
            Choice::Terminal
        } else if let Some(c) = candidates.neighbors.get(slot) {
            Choice::Next {
                slot,
                vertex: c.index,
            }
        } else {
            Choice::None
        }
    }

    pub fn confidence(&self) -> S {
        self.class_probs[self.argmax()]
    }
}
