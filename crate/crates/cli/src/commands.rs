use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use lanemap::config::PipelineConfig;
use lanemap::dataset_io::{
    load_annotations, rasterize_mask, split_dataset, write_annotations, Split, SplitAssignment,
};
use lanemap::evaluator::{
    ablation_csv, ablation_table, evaluate, thresholds_in_pixels, EvalReport,
};
use lanemap::heatmap::{decode_peaks, encode_vertices, OffsetMap, VertexHeatmaps};
use lanemap::lane_model::{map_stats, MapStats};
use lanemap::matcher::{GeometricScorer, Scorer, TinyScorer};
use lanemap::pipeline::{
    ablate_k, build_scene, labeled_outcomes, prepare_scene, run_matching, run_scene, train_tiny,
    MatchScene, SceneDecisions,
};
use lanemap::polyline::to_annotation;
use lanemap::synth::{dataset_scene, load_dataset, scene_id, write_dataset, SyntheticScene};
use lanemap::tensor::Tensor3;

use crate::{ConfigArgs, ScorerKind};

type R = f64;

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(msg.into())
}

/// 2 when an I/O failure is anywhere in the chain, otherwise 1.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<lanemap::Error>() {
            return if matches!(e, lanemap::Error::Io { .. }) {
                2
            } else {
                1
            };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for o in &args.overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn require_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "no such file or directory",
        ))
        .with_context(|| path.display().to_string())
    }
}

pub fn stats(input: &Path, csv: bool) -> Result<()> {
    require_exists(input)?;
    let anns = load_annotations(input)?;
    let mut rows = Vec::with_capacity(anns.len());
    for a in &anns {
        rows.push((a.image_id.clone(), map_stats(&a.to_lane_map(&a.image_id)?)));
    }
    let total = rows
        .iter()
        .fold(MapStats::default(), |acc, (_, s)| acc + *s);
    let mut out = String::new();
    if csv {
        out.push_str("image_id,lanes,vertices,length_km\n");
        for (id, s) in &rows {
            let _ = writeln!(
                out,
                "{id},{},{},{:.6}",
                s.lane_count, s.vertex_count, s.total_length_km
            );
        }
    } else {
        let width = rows
            .iter()
            .map(|(id, _)| id.len())
            .max()
            .unwrap_or(0)
            .max(8);
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>8}  {:>10}",
            "image_id", "lanes", "vertices", "length_km"
        );
        let line = |out: &mut String, id: &str, s: &MapStats| {
            let _ = writeln!(
                out,
                "{id:<width$}  {:>6}  {:>8}  {:>10.4}",
                s.lane_count, s.vertex_count, s.total_length_km
            );
        };
        for (id, s) in &rows {
            line(&mut out, id, s);
        }
        if !rows.is_empty() {
            line(&mut out, "total", &total);
        }
    }
    print!("{out}");
    Ok(())
}

pub fn rasterize(input: &Path, out: &Path, stroke: f64) -> Result<()> {
    require_exists(input)?;
    let anns = load_annotations(input)?;
    create_dir(out)?;
    for a in &anns {
        let mask = rasterize_mask(a, stroke)?;
        mask.save_png(&out.join(format!("{}.png", a.image_id)))?;
    }
    eprintln!("wrote {} masks to {}", anns.len(), out.display());
    Ok(())
}

pub fn split(
    input: Option<&Path>,
    ids_file: Option<&Path>,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let ids: Vec<String> = match (ids_file, input) {
        (Some(f), _) => std::fs::read_to_string(f)
            .with_context(|| f.display().to_string())?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect(),
        (None, Some(p)) => {
            require_exists(p)?;
            load_annotations(p)?
                .into_iter()
                .map(|a| a.image_id)
                .collect()
        }
        (None, None) => bail!("give an annotation path or --ids"),
    };
    let assignment = split_dataset(&ids, seed)?;
    let (train, val, test) = assignment.sizes();
    match out {
        Some(p) => write(p, assignment.to_manifest())?,
        None => print!("{}", assignment.to_manifest()),
    }
    eprintln!("train {train}  val {val}  test {test}");
    Ok(())
}

pub fn encode(input: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    cfg.heatmap.validate()?;
    require_exists(input)?;
    let anns = load_annotations(input)?;
    create_dir(out)?;
    for a in &anns {
        let vertices: Vec<_> = a.polylines().concat();
        let (hm, off) =
            encode_vertices::<R>(&vertices, &cfg.heatmap, a.width as usize, a.height as usize)
                .with_context(|| format!("encoding {}", a.image_id))?;
        let stride = hm.stride as u32;
        hm.grid
            .save(&out.join(format!("{}.heatmap.bin", a.image_id)), stride)?;
        off.grid
            .save(&out.join(format!("{}.offsets.bin", a.image_id)), stride)?;
    }
    eprintln!("encoded {} images into {}", anns.len(), out.display());
    Ok(())
}

pub fn decode(
    heatmap: &Path,
    offsets: Option<&Path>,
    out: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let mut cfg = load_config(args)?.heatmap;
    require_exists(heatmap)?;
    let (grid, stride) = Tensor3::<R>::load(heatmap)?;
    // The stride stored with the tensor is authoritative.
    cfg.stride = stride as usize;
    cfg.validate()?;
    let hm = VertexHeatmaps {
        grid,
        stride: cfg.stride,
        mode: cfg.mode,
    };
    let off = match offsets {
        Some(p) => {
            require_exists(p)?;
            Some(OffsetMap {
                grid: Tensor3::<R>::load(p)?.0,
            })
        }
        None => None,
    };
    let peaks = decode_peaks(&hm, off.as_ref(), &cfg)?;
    let mut csv = String::from("channel,x,y,confidence\n");
    for p in &peaks {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            p.channel, p.point.x, p.point.y, p.confidence
        );
    }
    match out {
        Some(p) => write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn load_tiny(
    kind: ScorerKind,
    model: Option<&Path>,
    cfg: &PipelineConfig,
) -> Result<Option<TinyScorer<R>>> {
    if kind != ScorerKind::Tiny {
        if model.is_some() {
            log::warn!("--model is only used with --scorer tiny");
        }
        return Ok(None);
    }
    let path = model.ok_or_else(|| invalid("--scorer tiny needs --model"))?;
    require_exists(path)?;
    let tiny = TinyScorer::<R>::load(path)?;
    tiny.check_compatible(&cfg.matching)?;
    Ok(Some(tiny))
}

/// The scorer to run on `scene`.
fn scorer_for<'a>(
    kind: ScorerKind,
    tiny: Option<&'a TinyScorer<R>>,
    geometric: &'a GeometricScorer,
    oracle: &'a mut Option<lanemap::matcher::OracleScorer<R>>,
    scene: &MatchScene<R>,
) -> &'a dyn Scorer<R> {
    match kind {
        ScorerKind::Oracle => oracle.insert(scene.oracle()),
        ScorerKind::Geometric => geometric,
        ScorerKind::Tiny => tiny.expect("loaded before matching"),
    }
}

fn scorer_label(kind: ScorerKind) -> &'static str {
    match kind {
        ScorerKind::Oracle => "oracle",
        ScorerKind::Geometric => "geometric",
        ScorerKind::Tiny => "tiny",
    }
}

fn select_split(
    scenes: Vec<SyntheticScene>,
    split: Option<&SplitAssignment>,
    which: Split,
) -> Result<Vec<SyntheticScene>> {
    let split = split.ok_or_else(|| invalid("dataset has no split manifest"))?;
    Ok(scenes
        .into_iter()
        .filter(|s| split.get(s.id()) == Some(which))
        .collect())
}

pub fn match_scenes(
    data: &Path,
    kind: ScorerKind,
    model: Option<&Path>,
    split: Option<&str>,
    out: &Path,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = load_config(args)?;
    cfg.validate()?;
    let which = split.map(|s| s.parse::<Split>()).transpose()?;
    let tiny = load_tiny(kind, model, &cfg)?;
    require_exists(data)?;
    let (mut scenes, manifest) = load_dataset(data)?;
    if let Some(w) = which {
        scenes = select_split(scenes, manifest.as_ref(), w)?;
    }
    let geometric = GeometricScorer::default();
    let mut records = Vec::with_capacity(scenes.len());
    let (mut pred, mut truth, mut times) = (Vec::new(), Vec::new(), Vec::new());
    for s in &scenes {
        let scene = prepare_scene::<R>(s, &cfg.heatmap)?;
        let mut oracle = None;
        let scorer = scorer_for(kind, tiny.as_ref(), &geometric, &mut oracle, &scene);
        let output = run_matching(&scene, &cfg.matching, scorer)?;
        let (p, t) = labeled_outcomes(&scene, &output.decisions);
        pred.extend(p);
        truth.extend(t);
        times.push(output.seconds);
        records.push(SceneDecisions::new(&scene, &output.decisions));
    }
    let mut text = serde_json::to_string_pretty(&records)?;
    text.push('\n');
    write(out, text)?;
    let report = lanemap::evaluator::matcher_metrics(&pred, &truth, &times)?;
    eprintln!(
        "{} scenes, {} vertices: f1_class {:.2}  mse_position {:.3} px²  runtime_class {:.4} s",
        records.len(),
        pred.len(),
        report.f1_class,
        report.mse_position,
        report.runtime_class
    );
    Ok(())
}

pub fn build(decisions: &Path, out: &Path) -> Result<()> {
    require_exists(decisions)?;
    let text =
        std::fs::read_to_string(decisions).with_context(|| decisions.display().to_string())?;
    let records: Vec<SceneDecisions> = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("{}: {e}", decisions.display())))?;
    let mut anns = Vec::with_capacity(records.len());
    for r in &records {
        let built = build_scene(r.vertices.len(), &r.to_decisions()?)?;
        anns.push(to_annotation(
            &r.image_id,
            r.width,
            r.height,
            r.geo_transform,
            &built.polylines,
        ));
    }
    write_annotations(out, &anns)?;
    let lanes: usize = anns.iter().map(|a| a.lanes.len()).sum();
    eprintln!("{} images, {lanes} lanes -> {}", anns.len(), out.display());
    Ok(())
}

pub fn eval(pred: &Path, gt: &Path, meters: bool, csv: bool, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?.eval;
    cfg.validate()?;
    require_exists(pred)?;
    require_exists(gt)?;
    let mut predicted = BTreeMap::new();
    for a in load_annotations(pred)? {
        let id = a.image_id.clone();
        if predicted.insert(id.clone(), a).is_some() {
            bail!("duplicate predicted image `{id}`");
        }
    }
    let truth = load_annotations(gt)?;
    if truth.is_empty() {
        bail!("no ground-truth images in {}", gt.display());
    }
    let mut reports = Vec::with_capacity(truth.len());
    for g in &truth {
        let p = predicted
            .remove(&g.image_id)
            .map(|a| a.polylines())
            .unwrap_or_default();
        let mut image_cfg = cfg.clone();
        if meters {
            image_cfg.thresholds =
                thresholds_in_pixels(&cfg.thresholds, &g.geo_transform, g.width, g.height);
        }
        let mut report = evaluate(&p, &g.polylines(), &image_cfg);
        for (row, &t) in report.rows.iter_mut().zip(&cfg.thresholds) {
            row.threshold = t;
        }
        reports.push(report);
    }
    if let Some(id) = predicted.keys().next() {
        bail!("predicted image `{id}` has no ground truth");
    }
    let mean = EvalReport::mean(&reports).expect("reports share thresholds");
    if csv {
        print!("{}", mean.to_csv());
    } else {
        print!("{}", mean.to_table("pred"));
    }
    Ok(())
}

pub fn synth(out: &Path, n: usize, seed: Option<u64>, args: &ConfigArgs) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    cfg.validate()?;
    let split = write_dataset(out, &cfg.synth, n)?;
    let (train, val, test) = split.sizes();
    eprintln!(
        "wrote {n} scenes to {} (train {train}, val {val}, test {test})",
        out.display()
    );
    Ok(())
}

/// Scenes from `data`, or `n` generated from the synth config, with their split.
fn scene_source(
    data: Option<&Path>,
    n: usize,
    cfg: &PipelineConfig,
) -> Result<(Vec<SyntheticScene>, Option<SplitAssignment>)> {
    match data {
        Some(dir) => {
            require_exists(dir)?;
            Ok(load_dataset(dir)?)
        }
        None => {
            if n == 0 {
                bail!("--scenes must be at least 1");
            }
            let scenes = (0..n)
                .map(|i| dataset_scene(&cfg.synth, i))
                .collect::<lanemap::Result<Vec<_>>>()?;
            let ids: Vec<String> = (0..n).map(scene_id).collect();
            let split = split_dataset(&ids, cfg.synth.seed)?;
            Ok((scenes, Some(split)))
        }
    }
}

fn train_on(scenes: &[SyntheticScene], cfg: &PipelineConfig) -> Result<(TinyScorer<R>, String)> {
    if scenes.is_empty() {
        bail!("no training scenes");
    }
    let (tiny, report) = train_tiny::<R>(scenes, &cfg.heatmap, &cfg.matching, &cfg.train, |e| {
        log::info!(
            "epoch {:>3}  l_cls {:.5}  l_reg {:.6}  total {:.6}",
            e.epoch,
            e.l_cls,
            e.l_reg,
            e.total
        )
    })?;
    Ok((tiny, report.to_csv()))
}

pub fn train_scorer(
    data: Option<&Path>,
    n: usize,
    out: &Path,
    log_path: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = load_config(args)?;
    cfg.validate()?;
    let (scenes, split) = scene_source(data, n, &cfg)?;
    let train = match split {
        Some(s) => select_split(scenes, Some(&s), Split::Train)?,
        None => scenes,
    };
    let (tiny, log_csv) = train_on(&train, &cfg)?;
    if let Some(parent) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    tiny.save(out)?;
    if let Some(p) = log_path {
        write(p, &log_csv)?;
    }
    let last = log_csv.lines().last().unwrap_or_default();
    eprintln!(
        "trained on {} scenes; final epoch,l_cls,l_reg,total = {last}",
        train.len()
    );
    Ok(())
}

pub fn ablate(
    ks: &[usize],
    kind: ScorerKind,
    data: Option<&Path>,
    n: usize,
    csv: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = load_config(args)?;
    cfg.validate()?;
    if ks.is_empty() {
        bail!("--k needs at least one value");
    }
    let (scenes, split) = scene_source(data, n, &cfg)?;
    let (train, test) = match (&split, kind) {
        (Some(s), _) => (
            select_split(scenes.clone(), Some(s), Split::Train)?,
            select_split(scenes, Some(s), Split::Test)?,
        ),
        (None, ScorerKind::Tiny) => bail!("training the tiny scorer needs a split manifest"),
        (None, _) => (Vec::new(), scenes),
    };
    if test.is_empty() {
        bail!("no test scenes");
    }
    let prepared = test
        .iter()
        .map(|s| prepare_scene::<R>(s, &cfg.heatmap))
        .collect::<lanemap::Result<Vec<_>>>()?;
    let rows = ablate_k(&prepared, ks, &cfg.matching, |mcfg| {
        Ok(match kind {
            ScorerKind::Oracle => None,
            ScorerKind::Geometric => {
                Some(Box::new(GeometricScorer::default()) as Box<dyn Scorer<R>>)
            }
            ScorerKind::Tiny => {
                let run_cfg = PipelineConfig {
                    matching: *mcfg,
                    ..cfg.clone()
                };
                let (tiny, _) =
                    train_on(&train, &run_cfg).map_err(|e| lanemap::Error::Invalid {
                        what: "training",
                        reason: format!("{e:#}"),
                    })?;
                Some(Box::new(tiny))
            }
        })
    })?;
    print!("{}", ablation_table(&rows));
    if let Some(p) = csv {
        write(p, ablation_csv(&rows))?;
    }
    Ok(())
}

pub fn e2e(
    seed: Option<u64>,
    n: usize,
    kind: ScorerKind,
    model: Option<&Path>,
    out: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let mut cfg = load_config(args)?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    cfg.validate()?;
    if n == 0 {
        bail!("--scenes must be at least 1");
    }
    let tiny = load_tiny(kind, model, &cfg)?;
    let geometric = GeometricScorer::default();
    let mut reports = Vec::with_capacity(n);
    let mut predictions = Vec::with_capacity(n);
    for i in 0..n {
        let scene = prepare_scene::<R>(&dataset_scene(&cfg.synth, i)?, &cfg.heatmap)?;
        let mut oracle = None;
        let scorer = scorer_for(kind, tiny.as_ref(), &geometric, &mut oracle, &scene);
        let result = run_scene(&scene, &cfg.matching, &cfg.eval, scorer)?;
        predictions.push(result.built.to_annotation(&scene));
        reports.push(result.report);
    }
    let mean = EvalReport::mean(&reports).expect("reports share thresholds");
    print!("{}", mean.to_table(scorer_label(kind)));
    if let Some(dir) = out {
        create_dir(dir)?;
        write_annotations(&dir.join("predictions.json"), &predictions)?;
        write(&dir.join("report.csv"), mean.to_csv())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn io_errors_map_to_two() {
        let e: anyhow::Error =
            lanemap::config::PipelineConfig::load(Path::new("/nonexistent/x.toml"))
                .unwrap_err()
                .into();
        assert_eq!(exit_code(&e), 2);
        let e = invalid("bad");
        assert_eq!(exit_code(&e), 1);
        let e = require_exists(Path::new("/nonexistent")).unwrap_err();
        assert_eq!(exit_code(&e), 2);
    }

    #[test]
    fn set_needs_key_value() {
        let args = ConfigArgs {
            config: None,
            overrides: vec!["match.k".into()],
        };
        assert_eq!(exit_code(&load_config(&args).unwrap_err()), 1);
        let args = ConfigArgs {
            config: None,
            overrides: vec!["match.k=7".into()],
        };
        assert_eq!(load_config(&args).unwrap().matching.k, 7);
    }
}
