//! Stage glue: heatmap round trip, one-shot matching, polyline assembly and scoring.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::ImageAnnotation;
use crate::error::{Error, Result};
use crate::evaluator::{
    evaluate, matcher_metrics, AblationRow, EvalConfig, EvalReport, LabeledOutcome, MatcherReport,
};
use crate::geometry::PixelPoint;
use crate::heatmap::{decode_peaks, encode_vertices, HeatmapConfig, HeatmapMode, VertexHeatmaps};
use crate::lane_model::GeoTransform;
use crate::matcher::{
    aggregate_patch, topk_neighbors, AggregatedPatch, Candidate, CandidateSet, MatchConfig,
    MatchDecision, OracleScorer, Scorer, ScoringInput, TinyScorer, TinyShape, TrainConfig,
    TrainReport, TrainingExample, UpsampledHeatmaps,
};
use crate::polyline::{build_polylines, polyline_points, to_annotation, VertexGraph};
use crate::scalar::Scalar;
use crate::synth::SyntheticScene;
use crate::tensor::Tensor3;

/// A scene reduced to what the matcher sees, plus its ground truth.
#[derive(Debug, Clone)]
pub struct MatchScene<S> {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub geo_transform: GeoTransform<f64>,
    pub seg: Tensor3<S>,
    pub features: Tensor3<S>,
    pub heatmaps: VertexHeatmaps<S>,
    /// Heatmap channel of each matcher vertex.
    pub channels: Vec<usize>,
    /// Decoded vertex positions; index `i` came from channel `channels[i]`.
    pub vertices: Vec<PixelPoint<S>>,
    pub truth_next: Vec<Option<usize>>,
    pub truth_locations: Vec<PixelPoint<S>>,
    pub gt_chains: Vec<Vec<usize>>,
}

/// Encodes the scene's vertices as per-vertex heatmaps and decodes them back
/// without offsets, so matcher vertices sit at heatmap cell centres.
pub fn prepare_scene<S: Scalar>(
    scene: &SyntheticScene,
    hm: &HeatmapConfig,
) -> Result<MatchScene<S>> {
    hm.validate()?;
    if hm.mode != HeatmapMode::PerVertexChannel {
        return Err(Error::invalid(
            "heatmap.mode",
            "matching needs per_vertex_channel heatmaps",
        ));
    }
    let truth: Vec<PixelPoint<S>> = scene.vertices().iter().map(|p| p.cast()).collect();
    if truth.len() > hm.c_vert {
        return Err(Error::invalid(
            "heatmap.c_vert",
            format!(
                "{} has {} vertices, more than c_vert = {}",
                scene.id(),
                truth.len(),
                hm.c_vert
            ),
        ));
    }
    // Only the channels that hold a vertex are kept.
    let cfg = HeatmapConfig {
        c_vert: truth.len().max(1),
        ..*hm
    };
    let (w, h) = (
        scene.annotation.width as usize,
        scene.annotation.height as usize,
    );
    let (heatmaps, _) = encode_vertices(&truth, &cfg, w, h)?;
    let peaks = decode_peaks(&heatmaps, None, &cfg)?;
    if peaks.len() != truth.len() || peaks.iter().enumerate().any(|(i, p)| p.channel != i) {
        return Err(Error::invalid(
            "heatmap decode",
            format!(
                "{}: {} peaks for {} vertices",
                scene.id(),
                peaks.len(),
                truth.len()
            ),
        ));
    }
    Ok(MatchScene {
        image_id: scene.id().to_string(),
        width: scene.annotation.width,
        height: scene.annotation.height,
        geo_transform: scene.annotation.geo_transform,
        seg: scene.seg_tensor(),
        features: scene.features.cast(),
        heatmaps,
        channels: peaks.iter().map(|p| p.channel).collect(),
        vertices: peaks.iter().map(|p| p.point).collect(),
        truth_next: scene.next.clone(),
        truth_locations: truth,
        gt_chains: scene.chains(),
    })
}

impl<S: Scalar> MatchScene<S> {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn gt_polylines(&self) -> Vec<Vec<PixelPoint<S>>> {
        polyline_points(&self.gt_chains, &self.truth_locations)
    }

    pub fn oracle(&self) -> OracleScorer<S> {
        OracleScorer {
            next: self.truth_next.clone(),
            locations: self.truth_locations.clone(),
        }
    }

    pub fn candidates(&self, anchor: usize, k: usize) -> CandidateSet<S> {
        topk_neighbors(&self.vertices, anchor, k)
    }

    pub fn patch(
        &self,
        candidates: &CandidateSet<S>,
        cfg: &MatchConfig,
    ) -> Result<AggregatedPatch<S>> {
        let maps = UpsampledHeatmaps {
            heatmaps: &self.heatmaps,
            channels: &self.channels,
            width: self.width as usize,
            height: self.height as usize,
        };
        aggregate_patch(
            &self.seg,
            &self.features,
            &maps,
            &self.vertices,
            candidates,
            cfg,
        )
    }

    /// Label of the anchor: its successor's slot, `K` at a lane end, `K + 1`
    /// when the successor is not a candidate.
    pub fn true_class(&self, candidates: &CandidateSet<S>) -> usize {
        match self.truth_next[candidates.anchor] {
            None => candidates.k,
            Some(v) => candidates.slot_of(v).unwrap_or(candidates.k + 1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatchOutput<S> {
    /// One entry per vertex, in vertex order.
    pub decisions: Vec<(CandidateSet<S>, MatchDecision<S>)>,
    /// Wall time of candidate search, patch building and scoring.
    pub seconds: f64,
}

/// Scores every vertex of the scene independently (in parallel).
pub fn run_matching<S: Scalar>(
    scene: &MatchScene<S>,
    cfg: &MatchConfig,
    scorer: &dyn Scorer<S>,
) -> Result<MatchOutput<S>> {
    cfg.validate()?;
    let start = Instant::now();
    let decisions = (0..scene.len())
        .into_par_iter()
        .map(|i| {
            let candidates = scene.candidates(i, cfg.k);
            let patch = scene.patch(&candidates, cfg)?;
            let input = ScoringInput {
                patch: &patch,
                candidates: &candidates,
                vertices: &scene.vertices,
                incoming: None,
            };
            let decision = scorer.score(&input, cfg);
            Ok((candidates, decision))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MatchOutput {
        decisions,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Linked graph over corrected locations and the polylines read off it.
#[derive(Debug, Clone)]
pub struct BuiltScene<S> {
    pub graph: VertexGraph<S>,
    pub chains: Vec<Vec<usize>>,
    pub polylines: Vec<Vec<PixelPoint<S>>>,
}

pub fn build_scene<S: Scalar>(
    n_vertices: usize,
    decisions: &[(CandidateSet<S>, MatchDecision<S>)],
) -> Result<BuiltScene<S>> {
    if decisions.len() != n_vertices
        || decisions
            .iter()
            .enumerate()
            .any(|(i, (c, _))| c.anchor != i)
    {
        return Err(Error::invalid(
            "decisions",
            "expected one decision per vertex in vertex order",
        ));
    }
    let (edges, chains) = build_polylines(n_vertices, decisions)?;
    let vertices: Vec<PixelPoint<S>> = decisions.iter().map(|(_, d)| d.location).collect();
    let polylines = polyline_points(&chains, &vertices);
    Ok(BuiltScene {
        graph: VertexGraph { vertices, edges },
        chains,
        polylines,
    })
}

impl<S: Scalar> BuiltScene<S> {
    pub fn to_annotation(&self, scene: &MatchScene<S>) -> ImageAnnotation {
        to_annotation(
            &scene.image_id,
            scene.width,
            scene.height,
            scene.geo_transform,
            &self.polylines,
        )
    }
}

/// Predicted and true outcomes per vertex, in the label space of [`MatchScene::true_class`].
pub fn labeled_outcomes<S: Scalar>(
    scene: &MatchScene<S>,
    decisions: &[(CandidateSet<S>, MatchDecision<S>)],
) -> (Vec<LabeledOutcome>, Vec<LabeledOutcome>) {
    decisions
        .iter()
        .map(|(c, d)| {
            let pred = LabeledOutcome {
                class: d.argmax(),
                location: d.location.cast(),
            };
            let truth = LabeledOutcome {
                class: scene.true_class(c),
                location: scene.truth_locations[c.anchor].cast(),
            };
            (pred, truth)
        })
        .unzip()
}

#[derive(Debug, Clone)]
pub struct SceneResult<S> {
    pub built: BuiltScene<S>,
    pub report: EvalReport,
    pub seconds: f64,
}

/// Matching, assembly and evaluation against the ground-truth polylines.
pub fn run_scene<S: Scalar>(
    scene: &MatchScene<S>,
    cfg: &MatchConfig,
    eval: &EvalConfig,
    scorer: &dyn Scorer<S>,
) -> Result<SceneResult<S>> {
    let out = run_matching(scene, cfg, scorer)?;
    let built = build_scene(scene.len(), &out.decisions)?;
    let report = evaluate(&built.polylines, &scene.gt_polylines(), eval);
    Ok(SceneResult {
        built,
        report,
        seconds: out.seconds,
    })
}

/// Supervised examples for every anchor whose true class is selectable.
pub fn training_examples<S: Scalar>(
    scene: &MatchScene<S>,
    cfg: &MatchConfig,
    shape: &TinyShape,
) -> Result<Vec<TrainingExample<S>>> {
    let mut out = Vec::with_capacity(scene.len());
    for i in 0..scene.len() {
        let candidates = scene.candidates(i, cfg.k);
        let class = scene.true_class(&candidates);
        if class == cfg.k + 1 || (class == cfg.k && !cfg.use_terminal_class) {
            continue;
        }
        let patch = scene.patch(&candidates, cfg)?;
        out.push(TrainingExample::new(
            shape,
            &patch,
            &candidates,
            class,
            scene.truth_locations[i],
        )?);
    }
    Ok(out)
}

/// Examples from every scene, prepared one scene at a time.
pub fn build_training_set<S: Scalar>(
    scenes: &[SyntheticScene],
    hm: &HeatmapConfig,
    cfg: &MatchConfig,
    shape: &TinyShape,
) -> Result<Vec<TrainingExample<S>>> {
    let mut out = Vec::new();
    for s in scenes {
        let scene = prepare_scene::<S>(s, hm)?;
        out.extend(training_examples(&scene, cfg, shape)?);
    }
    Ok(out)
}

/// Trains a [`TinyScorer`] on all anchors of `scenes`.
pub fn train_tiny<S: Scalar>(
    scenes: &[SyntheticScene],
    hm: &HeatmapConfig,
    cfg: &MatchConfig,
    train: &TrainConfig,
    on_epoch: impl FnMut(&crate::matcher::EpochLog),
) -> Result<(TinyScorer<S>, TrainReport)> {
    let shape = TinyShape::new(cfg, train);
    let data = build_training_set(scenes, hm, cfg, &shape)?;
    log::info!(
        "training on {} examples of dimension {}",
        data.len(),
        shape.input_dim()
    );
    TinyScorer::train(&data, cfg, train, on_epoch)
}

/// Fraction of true successors present among the top-`k` candidates, as `(covered, total)`.
pub fn oracle_coverage<S: Scalar>(scene: &MatchScene<S>, k: usize) -> (usize, usize) {
    let mut covered = 0;
    let mut total = 0;
    for (i, next) in scene.truth_next.iter().enumerate() {
        if let Some(v) = next {
            total += 1;
            if scene.candidates(i, k).slot_of(*v).is_some() {
                covered += 1;
            }
        }
    }
    (covered, total)
}

/// Where [`assess_matcher`] gets its decisions from.
#[derive(Clone, Copy)]
pub enum ScorerSource<'a, S> {
    /// The ground truth of each scene.
    Oracle,
    /// One scorer for every scene.
    Shared(&'a dyn Scorer<S>),
}

/// Matcher metrics over a scene set, plus oracle coverage.
pub fn assess_matcher<S: Scalar>(
    scenes: &[MatchScene<S>],
    cfg: &MatchConfig,
    source: ScorerSource<'_, S>,
) -> Result<AblationRow> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut times = Vec::with_capacity(scenes.len());
    let (mut covered, mut total) = (0, 0);
    for scene in scenes {
        let out = match source {
            ScorerSource::Oracle => run_matching(scene, cfg, &scene.oracle())?,
            ScorerSource::Shared(s) => run_matching(scene, cfg, s)?,
        };
        let (p, t) = labeled_outcomes(scene, &out.decisions);
        pred.extend(p);
        truth.extend(t);
        times.push(out.seconds);
        let (c, n) = oracle_coverage(scene, cfg.k);
        covered += c;
        total += n;
    }
    let report: MatcherReport = matcher_metrics(&pred, &truth, &times)?;
    Ok(AblationRow {
        k: cfg.k,
        report,
        oracle_coverage: if total == 0 {
            1.0
        } else {
            covered as f64 / total as f64
        },
    })
}

/// One [`AblationRow`] per `K`. `scorer_for` supplies the scorer at each `K`;
/// `None` scores every scene with its own ground truth.
pub fn ablate_k<S: Scalar, F>(
    scenes: &[MatchScene<S>],
    k_values: &[usize],
    base: &MatchConfig,
    mut scorer_for: F,
) -> Result<Vec<AblationRow>>
where
    F: FnMut(&MatchConfig) -> Result<Option<Box<dyn Scorer<S>>>>,
{
    if scenes.is_empty() {
        return Err(Error::invalid("scene set", "is empty"));
    }
    k_values
        .iter()
        .map(|&k| {
            let cfg = MatchConfig { k, ..*base };
            cfg.validate()?;
            match scorer_for(&cfg)? {
                Some(scorer) => assess_matcher(scenes, &cfg, ScorerSource::Shared(scorer.as_ref())),
                None => assess_matcher(scenes, &cfg, ScorerSource::Oracle),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub anchor: usize,
    pub k: usize,
    pub candidates: Vec<usize>,
    pub distances: Vec<f64>,
    pub class_probs: Vec<f64>,
    pub location: PixelPoint<f64>,
}

/// Matcher output for one image, self-contained enough to build polylines from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDecisions {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub geo_transform: GeoTransform<f64>,
    pub vertices: Vec<PixelPoint<f64>>,
    pub decisions: Vec<DecisionRecord>,
}

impl SceneDecisions {
    pub fn new<S: Scalar>(
        scene: &MatchScene<S>,
        decisions: &[(CandidateSet<S>, MatchDecision<S>)],
    ) -> Self {
        Self {
            image_id: scene.image_id.clone(),
            width: scene.width,
            height: scene.height,
            geo_transform: scene.geo_transform,
            vertices: scene.vertices.iter().map(|p| p.cast()).collect(),
            decisions: decisions
                .iter()
                .map(|(c, d)| DecisionRecord {
                    anchor: c.anchor,
                    k: c.k,
                    candidates: c.neighbors.iter().map(|n| n.index).collect(),
                    distances: c.neighbors.iter().map(|n| n.distance.as_f64()).collect(),
                    class_probs: d.class_probs.iter().map(|p| p.as_f64()).collect(),
                    location: d.location.cast(),
                })
                .collect(),
        }
    }

    /// Checks indices and lengths, then restores the in-memory form.
    pub fn to_decisions(&self) -> Result<Vec<(CandidateSet<f64>, MatchDecision<f64>)>> {
        let n = self.vertices.len();
        self.decisions
            .iter()
            .map(|r| {
                let bad = |reason: String| {
                    Error::invalid(
                        "decisions",
                        format!("{} anchor {}: {reason}", self.image_id, r.anchor),
                    )
                };
                if r.anchor >= n {
                    return Err(bad(format!("anchor out of range for {n} vertices")));
                }
                if r.candidates.len() > r.k || r.distances.len() != r.candidates.len() {
                    return Err(bad("candidate list does not fit k".into()));
                }
                if let Some(&c) = r.candidates.iter().find(|&&c| c >= n || c == r.anchor) {
                    return Err(bad(format!("invalid candidate {c}")));
                }
                if r.class_probs.len() != r.k && r.class_probs.len() != r.k + 1 {
                    return Err(bad(format!(
                        "{} class probabilities for k = {}",
                        r.class_probs.len(),
                        r.k
                    )));
                }
                let candidates = CandidateSet {
                    anchor: r.anchor,
                    k: r.k,
                    neighbors: r
                        .candidates
                        .iter()
                        .zip(&r.distances)
                        .map(|(&index, &distance)| Candidate { index, distance })
                        .collect(),
                };
                let decision = MatchDecision {
                    class_probs: r.class_probs.clone(),
                    location: r.location,
                };
                Ok((candidates, decision))
            })
            .collect()
    }
}
