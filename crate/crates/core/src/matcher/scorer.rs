use crate::geometry::PixelPoint;
use crate::scalar::Scalar;

use super::losses::masked_softmax;
use super::{AggregatedPatch, CandidateSet, MatchConfig, MatchDecision};

/// Everything a scorer may look at for one anchor.
#[derive(Debug, Clone, Copy)]
pub struct ScoringInput<'a, S> {
    pub patch: &'a AggregatedPatch<S>,
    pub candidates: &'a CandidateSet<S>,
    /// All matcher vertices in image coordinates.
    pub vertices: &'a [PixelPoint<S>],
    /// Direction of travel arriving at the anchor, when known.
    pub incoming: Option<PixelPoint<S>>,
}

impl<S: Scalar> ScoringInput<'_, S> {
    pub fn anchor(&self) -> PixelPoint<S> {
        self.vertices[self.candidates.anchor]
    }
}

/// Next-vertex classifier plus anchor location regressor.
///
/// Implementations must be deterministic for fixed parameters and input.
pub trait Scorer<S: Scalar>: Sync {
    fn name(&self) -> &str;

    fn score(&self, input: &ScoringInput<'_, S>, cfg: &MatchConfig) -> MatchDecision<S>;
}

fn one_hot<S: Scalar>(n: usize, i: usize) -> Vec<S> {
    let mut v = vec![S::zero(); n];
    v[i] = S::one();
    v
}

/// Answers from ground truth; for pipeline checks only.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleScorer<S> {
    /// True successor of each matcher vertex, `None` at lane ends.
    pub next: Vec<Option<usize>>,
    /// True position of each matcher vertex.
    pub locations: Vec<PixelPoint<S>>,
}

impl<S: Scalar> Scorer<S> for OracleScorer<S> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn score(&self, input: &ScoringInput<'_, S>, cfg: &MatchConfig) -> MatchDecision<S> {
        let c = input.candidates;
        let n = cfg.num_classes();
        let slot = self.next[c.anchor].and_then(|v| c.slot_of(v));
        let class_probs = match slot {
            Some(s) => one_hot(n, s),
            None if cfg.use_terminal_class => one_hot(n, c.k),
            // No way to say "stop": fall back to the nearest real candidate, or uniform.
            None if !c.neighbors.is_empty() => one_hot(n, 0),
            None => vec![S::one() / S::of(n as f64); n],
        };
        MatchDecision {
            class_probs,
            location: self.locations[c.anchor],
        }
    }
}

/// Hand-tuned baseline: segmentation evidence, heading agreement, proximity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricScorer {
    pub w_evidence: f64,
    pub w_turn: f64,
    pub w_distance: f64,
    pub terminal_bias: f64,
}

impl Default for GeometricScorer {
    fn default() -> Self {
        Self {
            w_evidence: 1.0,
            w_turn: 0.5,
            w_distance: 0.5,
            terminal_bias: 0.2,
        }
    }
}

impl GeometricScorer {
    /// Mean segmentation along the segment `a → b` (crop-local), one sample per pixel of length.
    pub fn evidence<S: Scalar>(
        patch: &AggregatedPatch<S>,
        a: PixelPoint<S>,
        b: PixelPoint<S>,
    ) -> S {
        let n = a.distance(b).ceil().to_usize().unwrap_or(0).max(1);
        let inv = S::one() / S::of(n as f64);
        (0..n)
            .map(|i| {
                let p = a.lerp(b, (S::of(i as f64) + S::of(0.5)) * inv);
                patch.grid.sample_bilinear(p.x, p.y, patch.seg_channel())
            })
            .sum::<S>()
            * inv
    }
}

impl<S: Scalar> Scorer<S> for GeometricScorer {
    fn name(&self) -> &str {
        "geometric"
    }

    fn score(&self, input: &ScoringInput<'_, S>, cfg: &MatchConfig) -> MatchDecision<S> {
        let c = input.candidates;
        let anchor = input.anchor();
        let local_anchor = input.patch.to_local(anchor);
        let size = S::of(cfg.crop_size as f64);
        let mut logits = vec![S::neg_infinity(); cfg.num_classes()];
        for (slot, cand) in c.neighbors.iter().enumerate() {
            let p = input.vertices[cand.index];
            let ev = Self::evidence(input.patch, local_anchor, input.patch.to_local(p));
            let step = p - anchor;
            let turn = match input.incoming {
                Some(d) if d.norm() > S::zero() && step.norm() > S::zero() => {
                    d.dot(step) / (d.norm() * step.norm())
                }
                _ => S::one(),
            };
            logits[slot] = S::of(self.w_evidence) * ev + S::of(self.w_turn) * turn
                - S::of(self.w_distance) * cand.distance / size;
        }
        let mut mask = c.class_mask(cfg.use_terminal_class);
        if cfg.use_terminal_class {
            logits[c.k] = S::of(self.terminal_bias);
        } else if c.neighbors.is_empty() {
            // Nothing to choose from and no terminal class: spread evenly.
            mask.iter_mut().for_each(|m| *m = true);
            logits.iter_mut().for_each(|z| *z = S::zero());
        }
        MatchDecision {
            class_probs: masked_softmax(&logits, &mask),
            location: anchor,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::{aggregate_patch, topk_neighbors};
    use crate::tensor::Tensor3;

    type P = PixelPoint<f64>;

    /// Patch for `verts` with a horizontal painted band `y ∈ [y0, y1)` in a 64×64 image.
    fn scene(
        verts: &[P],
        band: impl Fn(usize, usize) -> bool,
        k: usize,
    ) -> (AggregatedPatch<f64>, CandidateSet<f64>, MatchConfig) {
        let cfg = MatchConfig {
            k,
            crop_size: 32,
            c_feat: 1,
            ..Default::default()
        };
        let mut seg = Tensor3::zeros(64, 64, 1);
        for y in 0..64 {
            for x in 0..64 {
                if band(x, y) {
                    seg.set(y, x, 0, 1.0);
                }
            }
        }
        let feat = Tensor3::zeros(64, 64, 1);
        let maps = Tensor3::zeros(64, 64, verts.len());
        let cand = topk_neighbors(verts, 0, k);
        let patch = aggregate_patch(&seg, &feat, &maps, verts, &cand, &cfg).unwrap();
        (patch, cand, cfg)
    }

    fn sums_to_one(p: &[f64]) -> bool {
        (p.iter().sum::<f64>() - 1.0).abs() < 1e-6 && p.iter().all(|&v| v >= 0.0)
    }

    #[test]
    fn on_mask_beats_off_mask() {
        let verts = [P::new(32.0, 32.0), P::new(42.0, 32.0), P::new(32.0, 42.0)];
        let (patch, cand, cfg) = scene(&verts, |_, y| (30..35).contains(&y), 2);
        let input = ScoringInput {
            patch: &patch,
            candidates: &cand,
            vertices: &verts,
            incoming: None,
        };
        let d = GeometricScorer::default().score(&input, &cfg);
        assert!(sums_to_one(&d.class_probs));
        let on = d.class_probs[cand.slot_of(1).unwrap()];
        let off = d.class_probs[cand.slot_of(2).unwrap()];
        assert!(on > off, "{on} vs {off}");
        assert_eq!(d.location, verts[0]);
    }

    #[test]
    fn no_candidates_means_terminal() {
        let verts = [P::new(10.0, 10.0)];
        let (patch, cand, cfg) = scene(&verts, |_, _| false, 4);
        let input = ScoringInput {
            patch: &patch,
            candidates: &cand,
            vertices: &verts,
            incoming: None,
        };
        let d = GeometricScorer::default().score(&input, &cfg);
        assert_eq!(d.class_probs, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn symmetric_fork_is_a_tie() {
        let verts = [P::new(32.0, 32.0), P::new(44.0, 27.0), P::new(44.0, 37.0)];
        // Painted wedge symmetric about y = 32 (pixel rows 31 and 32 mirror).
        let (patch, cand, cfg) = scene(
            &verts,
            |x, y| {
                x >= 30 && (y as i64 - 31).abs().min((y as i64 - 32).abs()) <= (x as i64 - 30) / 2
            },
            2,
        );
        let input = ScoringInput {
            patch: &patch,
            candidates: &cand,
            vertices: &verts,
            incoming: None,
        };
        let d = GeometricScorer::default().score(&input, &cfg);
        assert!((d.class_probs[0] - d.class_probs[1]).abs() < 1e-9);
        assert!(sums_to_one(&d.class_probs));
    }

    #[test]
    fn incoming_direction_prefers_straight() {
        let verts = [P::new(32.0, 32.0), P::new(42.0, 32.0), P::new(22.0, 32.0)];
        let (patch, cand, cfg) = scene(&verts, |_, y| (30..35).contains(&y), 2);
        let input = ScoringInput {
            patch: &patch,
            candidates: &cand,
            vertices: &verts,
            incoming: Some(P::new(1.0, 0.0)),
        };
        let d = GeometricScorer::default().score(&input, &cfg);
        assert!(d.class_probs[cand.slot_of(1).unwrap()] > d.class_probs[cand.slot_of(2).unwrap()]);
    }

    #[test]
    fn oracle_reports_truth() {
        let verts = [P::new(32.0, 32.0), P::new(42.0, 32.0), P::new(50.0, 50.0)];
        let (patch, cand, cfg) = scene(&verts, |_, _| false, 1);
        let input = ScoringInput {
            patch: &patch,
            candidates: &cand,
            vertices: &verts,
            incoming: None,
        };
        let truth = P::new(31.0, 33.0);
        let o = OracleScorer {
            next: vec![Some(1), None, None],
            locations: vec![truth, verts[1], verts[2]],
        };
        let d = o.score(&input, &cfg);
        assert_eq!(d.class_probs, vec![1.0, 0.0]);
        assert_eq!(d.location, truth);
        // True successor outside the candidate set: terminal.
        let o = OracleScorer {
            next: vec![Some(2), None, None],
            locations: verts.to_vec(),
        };
        assert_eq!(o.score(&input, &cfg).class_probs, vec![0.0, 1.0]);
    }
}
