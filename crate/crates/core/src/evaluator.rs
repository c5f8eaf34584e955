//! Polyline precision/recall/F1 at distance thresholds, and matcher metrics.
//!
//! Precision is the fraction of points sampled every `δ` pixels along the
//! predicted polylines that lie within `τ` of a ground-truth segment; recall
//! swaps the roles. Matcher classification uses macro-averaged F1 over the
//! classes that occur in either the truth or the predictions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_segment_distance, PixelPoint};
use crate::lane_model::{haversine_m, GeoTransform};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Distance thresholds in pixels, ascending.
    pub thresholds: Vec<f64>,
    pub sample_interval: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![2.0, 5.0, 10.0],
            sample_interval: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|&t| !(t > 0.0 && t.is_finite()))
        {
            return Err(Error::invalid(
                "eval.thresholds",
                "need one or more positive values",
            ));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "eval.thresholds",
                "must be strictly ascending",
            ));
        }
        if !(self.sample_interval > 0.0 && self.sample_interval.is_finite()) {
            return Err(Error::invalid("eval.sample_interval", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ThresholdScore>,
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

impl EvalReport {
    pub fn at(&self, threshold: f64) -> Option<&ThresholdScore> {
        self.rows.iter().find(|r| r.threshold == threshold)
    }

    /// Per-threshold mean of P, R and F1 over images. `None` if the reports
    /// are empty or their thresholds disagree.
    pub fn mean(reports: &[EvalReport]) -> Option<EvalReport> {
        let first = reports.first()?;
        let mut rows = first.rows.clone();
        for r in &reports[1..] {
            if r.rows.len() != rows.len() {
                return None;
            }
            for (acc, s) in rows.iter_mut().zip(&r.rows) {
                if acc.threshold != s.threshold {
                    return None;
                }
                acc.precision += s.precision;
                acc.recall += s.recall;
                acc.f1 += s.f1;
            }
        }
        let n = reports.len() as f64;
        for r in &mut rows {
            r.precision /= n;
            r.recall /= n;
            r.f1 /= n;
        }
        Some(EvalReport { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f1\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6}",
                r.threshold, r.precision, r.recall, r.f1
            );
        }
        s
    }

    /// Aligned table: one column block per threshold, like a results table row.
    pub fn to_table(&self, label: &str) -> String {
        let mut head = format!("{:<12}", "method");
        let mut sub = format!("{:<12}", "");
        let mut row = format!("{label:<12}");
        for r in &self.rows {
            let _ = write!(head, " | {:^23}", format!("τ = {}", r.threshold));
            let _ = write!(sub, " | {:>7} {:>7} {:>7}", "P", "R", "F1");
            let _ = write!(
                row,
                " | {:>7.3} {:>7.3} {:>7.3}",
                r.precision, r.recall, r.f1
            );
        }
        format!("{head}\n{sub}\n{row}\n")
    }
}

/// Points every `interval` of arc length, always including both endpoints.
pub fn sample_polyline<S: Scalar>(poly: &[PixelPoint<S>], interval: S) -> Vec<PixelPoint<S>> {
    let Some(&first) = poly.first() else {
        return Vec::new();
    };
    let mut out = vec![first];
    // Arc length at which the next sample is due.
    let mut due = interval;
    let mut walked = S::zero();
    for seg in poly.windows(2) {
        let len = seg[0].distance(seg[1]);
        while len > S::zero() && due < walked + len {
            out.push(seg[0].lerp(seg[1], (due - walked) / len));
            due = due + interval;
        }
        walked = walked + len;
    }
    let last = *poly.last().unwrap();
    if poly.len() > 1 && *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// The polyline in whichever direction lists its vertices in lexicographically smaller order.
fn canonical<S: Scalar>(poly: &[PixelPoint<S>]) -> Vec<PixelPoint<S>> {
    let key = |p: &PixelPoint<S>| (p.x, p.y);
    let forward = poly.iter().map(key);
    let backward = poly.iter().rev().map(key);
    if backward.partial_cmp(forward) == Some(std::cmp::Ordering::Less) {
        poly.iter().rev().copied().collect()
    } else {
        poly.to_vec()
    }
}

fn distance_to_set<S: Scalar>(p: PixelPoint<S>, polys: &[Vec<PixelPoint<S>>]) -> S {
    let mut best = S::infinity();
    for poly in polys {
        match poly.len() {
            0 => {}
            1 => best = best.min(p.distance(poly[0])),
            _ => {
                for seg in poly.windows(2) {
                    best = best.min(point_segment_distance(p, seg[0], seg[1]));
                }
            }
        }
    }
    best
}

/// For each threshold, the fraction of `from`'s samples within it of `to`; 0 when `from` is empty.
///
/// Polylines are sampled in a canonical direction so the score ignores orientation.
fn coverage<S: Scalar>(
    from: &[Vec<PixelPoint<S>>],
    to: &[Vec<PixelPoint<S>>],
    cfg: &EvalConfig,
) -> Vec<f64> {
    let samples: Vec<PixelPoint<S>> = from
        .iter()
        .flat_map(|p| sample_polyline(&canonical(p), S::of(cfg.sample_interval)))
        .collect();
    if samples.is_empty() {
        return vec![0.0; cfg.thresholds.len()];
    }
    let dists: Vec<f64> = samples
        .iter()
        .map(|&p| distance_to_set(p, to).as_f64())
        .collect();
    cfg.thresholds
        .iter()
        .map(|&t| dists.iter().filter(|&&d| d <= t).count() as f64 / dists.len() as f64)
        .collect()
}

pub fn evaluate<S: Scalar>(
    pred: &[Vec<PixelPoint<S>>],
    gt: &[Vec<PixelPoint<S>>],
    cfg: &EvalConfig,
) -> EvalReport {
    let precision = coverage(pred, gt, cfg);
    let recall = coverage(gt, pred, cfg);
    EvalReport {
        rows: cfg
            .thresholds
            .iter()
            .zip(precision.into_iter().zip(recall))
            .map(|(&threshold, (p, r))| ThresholdScore {
                threshold,
                precision: p,
                recall: r,
                f1: f1_score(p, r),
            })
            .collect(),
    }
}

/// Ground metres per pixel at the image centre, averaged over both axes.
pub fn meters_per_pixel(t: &GeoTransform<f64>, width: u32, height: u32) -> f64 {
    let c = PixelPoint::new(width as f64 / 2.0, height as f64 / 2.0);
    let g = t.pixel_to_geo(c);
    let gx = t.pixel_to_geo(c + PixelPoint::new(1.0, 0.0));
    let gy = t.pixel_to_geo(c + PixelPoint::new(0.0, 1.0));
    0.5 * (haversine_m(g, gx) + haversine_m(g, gy))
}

/// Thresholds given in metres, converted to pixels of the given image.
pub fn thresholds_in_pixels(
    thresholds_m: &[f64],
    t: &GeoTransform<f64>,
    width: u32,
    height: u32,
) -> Vec<f64> {
    let mpp = meters_per_pixel(t, width, height);
    thresholds_m.iter().map(|m| m / mpp).collect()
}

/// A next-vertex outcome in label space: `0..K` candidate slots, `K` terminal,
/// `K + 1` for a true successor missing from the candidates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledOutcome {
    pub class: usize,
    pub location: PixelPoint<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherReport {
    /// Macro F1 over classes, percent.
    pub f1_class: f64,
    /// Mean squared location error, px².
    pub mse_position: f64,
    /// Mean matching time per image, seconds.
    pub runtime_class: f64,
}

pub fn macro_f1(predicted: &[usize], truth: &[usize]) -> f64 {
    // class -> (tp, fp, fn)
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        if p == t {
            counts.entry(p).or_default().0 += 1;
        } else {
            counts.entry(p).or_default().1 += 1;
            counts.entry(t).or_default().2 += 1;
        }
    }
    if counts.is_empty() {
        return 0.0;
    }
    let sum: f64 = counts
        .values()
        .map(|&(tp, fp, fn_)| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
        .sum();
    sum / counts.len() as f64
}

pub fn matcher_metrics(
    decisions: &[LabeledOutcome],
    truths: &[LabeledOutcome],
    wall_times: &[f64],
) -> Result<MatcherReport> {
    if decisions.len() != truths.len() {
        return Err(Error::shape(
            format!("{} truths", decisions.len()),
            truths.len(),
        ));
    }
    let pred: Vec<usize> = decisions.iter().map(|d| d.class).collect();
    let truth: Vec<usize> = truths.iter().map(|d| d.class).collect();
    let mse = if decisions.is_empty() {
        0.0
    } else {
        decisions
            .iter()
            .zip(truths)
            .map(|(d, t)| d.location.distance_sq(t.location))
            .sum::<f64>()
            / decisions.len() as f64
    };
    let runtime = if wall_times.is_empty() {
        0.0
    } else {
        wall_times.iter().sum::<f64>() / wall_times.len() as f64
    };
    Ok(MatcherReport {
        f1_class: 100.0 * macro_f1(&pred, &truth),
        mse_position: mse,
        runtime_class: runtime,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub report: MatcherReport,
    /// Fraction of true successors present in the top-K candidates.
    pub oracle_coverage: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("k,f1_class,mse_position,runtime_class,oracle_coverage\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.6},{:.6}",
            r.k,
            r.report.f1_class,
            r.report.mse_position,
            r.report.runtime_class,
            r.oracle_coverage
        );
    }
    s
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:>4} | {:>16} | {:>14} | {:>15} | {:>8}\n",
        "K", "F1-Score_class", "MSE_position", "Runtime_class", "coverage"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>4} | {:>16.1} | {:>14.2} | {:>14.4}s | {:>8.4}",
            r.k,
            r.report.f1_class,
            r.report.mse_position,
            r.report.runtime_class,
            r.oracle_coverage
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type P = PixelPoint<f64>;

    fn line(x0: f64, x1: f64, y: f64) -> Vec<P> {
        vec![P::new(x0, y), P::new(x1, y)]
    }

    #[test]
    fn sampling_examples() {
        let seg = line(0.0, 10.0, 0.0);
        assert_eq!(sample_polyline(&seg, 1.0).len(), 11);
        let xs: Vec<f64> = sample_polyline(&seg, 3.0).iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0.0, 3.0, 6.0, 9.0, 10.0]);
        // Samples continue across vertices by arc length.
        let bent = vec![P::new(0.0, 0.0), P::new(2.0, 0.0), P::new(2.0, 2.0)];
        let s = sample_polyline(&bent, 1.5);
        assert_eq!(
            s,
            vec![
                P::new(0.0, 0.0),
                P::new(1.5, 0.0),
                P::new(2.0, 1.0),
                P::new(2.0, 2.0)
            ]
        );
    }

    #[test]
    fn identical_sets_score_one() {
        let gt = vec![
            line(0.0, 50.0, 3.0),
            vec![P::new(5.0, 5.0), P::new(20.0, 30.0), P::new(40.0, 31.0)],
        ];
        for r in evaluate(&gt, &gt, &EvalConfig::default()).rows {
            assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn translated_line() {
        let gt = vec![line(0.0, 1000.0, 10.0)];
        let pred = vec![line(0.0, 1000.0, 13.0)];
        let rep = evaluate(&pred, &gt, &EvalConfig::default());
        assert_eq!(rep.at(2.0).unwrap().f1, 0.0);
        assert_eq!(rep.at(5.0).unwrap().f1, 1.0);
        assert_eq!(rep.at(10.0).unwrap().f1, 1.0);
    }

    #[test]
    fn empty_prediction() {
        let gt = vec![line(0.0, 10.0, 0.0)];
        for r in evaluate(&[], &gt, &EvalConfig::default()).rows {
            assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        }
        let r = evaluate(&gt, &[], &EvalConfig::default()).rows[0];
        assert_eq!(r.recall, 0.0);
    }

    #[test]
    fn csv_layout() {
        let rep = evaluate(
            &[line(0.0, 4.0, 0.0)],
            &[line(0.0, 4.0, 0.0)],
            &EvalConfig::default(),
        );
        assert_eq!(
            rep.to_csv(),
            "threshold,precision,recall,f1\n2,1.000000,1.000000,1.000000\n5,1.000000,1.000000,1.000000\n10,1.000000,1.000000,1.000000\n"
        );
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        assert!(EvalConfig {
            thresholds: vec![5.0, 2.0],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(EvalConfig {
            thresholds: vec![],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(EvalConfig {
            sample_interval: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn matcher_metric_examples() {
        let o = |class, x| LabeledOutcome {
            class,
            location: P::new(x, 0.0),
        };
        let truth = vec![o(0, 0.0), o(1, 5.0), o(3, 9.0)];
        let perfect = matcher_metrics(&truth, &truth, &[0.5, 1.5]).unwrap();
        assert_eq!(
            (
                perfect.f1_class,
                perfect.mse_position,
                perfect.runtime_class
            ),
            (100.0, 0.0, 1.0)
        );
        let shifted: Vec<_> = truth
            .iter()
            .map(|t| o(t.class, t.location.x + 1.0))
            .collect();
        assert_eq!(
            matcher_metrics(&shifted, &truth, &[]).unwrap().mse_position,
            1.0
        );
        assert!(matcher_metrics(&truth[..2], &truth, &[]).is_err());
        // Hand count: classes {0, 1, 2}; F1 = (1 + 0 + 0) / 3.
        let f = macro_f1(&[0, 2], &[0, 1]);
        assert!((f - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn meters_mode_scales_thresholds() {
        // 0.5 m per pixel along both axes, near the equator.
        let deg = 0.5 / (crate::lane_model::EARTH_RADIUS_M * std::f64::consts::PI / 180.0);
        let t = GeoTransform::new(deg, 0.0, 10.0, 0.0, -deg, 0.001);
        let px = thresholds_in_pixels(&[1.0, 5.0], &t, 100, 100);
        assert!(
            (px[0] - 2.0).abs() < 1e-3 && (px[1] - 10.0).abs() < 5e-3,
            "{px:?}"
        );
    }

    fn polyset() -> impl Strategy<Value = Vec<Vec<P>>> {
        let poly = prop::collection::vec((0.0..60.0f64, 0.0..60.0f64), 2..6)
            .prop_map(|v| v.into_iter().map(|(x, y)| P::new(x, y)).collect::<Vec<_>>())
            .prop_filter("distinct consecutive", |v| {
                v.windows(2).all(|w| w[0] != w[1])
            });
        prop::collection::vec(poly, 0..4)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn metric_properties(a in polyset(), b in polyset()) {
            let cfg = EvalConfig::default();
            let ab = evaluate(&a, &b, &cfg);
            let ba = evaluate(&b, &a, &cfg);
            for (x, y) in ab.rows.iter().zip(&ba.rows) {
                prop_assert_eq!(x.precision, y.recall);
                prop_assert!(x.f1 <= 2.0 * x.precision.min(x.recall) + 1e-12);
            }
            for w in ab.rows.windows(2) {
                prop_assert!(w[0].precision <= w[1].precision && w[0].recall <= w[1].recall && w[0].f1 <= w[1].f1);
            }
            // Direction and order invariance.
            let mut rev: Vec<Vec<P>> = a.iter().map(|p| p.iter().rev().copied().collect()).collect();
            rev.reverse();
            let r = evaluate(&rev, &b, &cfg);
            for (x, y) in ab.rows.iter().zip(&r.rows) {
                prop_assert_eq!(x.precision, y.precision);
                prop_assert_eq!(x.recall, y.recall);
            }
        }
    }
}
