//! A two-layer perceptron scorer trained from scratch.
//!
//! Input: the aggregated patch average-pooled into `pool×pool` blocks, plus a
//! central "fovea" window of the segmentation and anchor channels pooled 2×2.
//! Output: `K(+1)` class logits and a 2-D location correction expressed as
//! `(u − round(anchor)) / S`.
//!
//! Parameter file: ASCII `TSC1`, then seven little-endian `u32`
//! (`crop_size, pool, fovea, k, c_feat, use_terminal_class, hidden`), then every
//! parameter as a little-endian `f64` in the order `W1, b1, W2, b2`.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PixelPoint;
use crate::scalar::Scalar;

use super::losses::{masked_softmax, smooth_l1_grad, smooth_l1_loss};
use super::patch::crop_origin;
use super::scorer::{Scorer, ScoringInput};
use super::{AggregatedPatch, CandidateSet, MatchConfig, MatchDecision};

const MAGIC: &[u8; 4] = b"TSC1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub pool: usize,
    pub fovea: usize,
    pub optimizer: Optimizer,
    /// Anneal the step size to zero along a half cosine over all steps.
    pub cosine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            hidden: 64,
            pool: 8,
            fovea: 16,
            optimizer: Optimizer::Adam,
            cosine: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, crop_size: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::invalid(
                "train",
                "epochs, batch_size and hidden must be ≥ 1",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(
                "train.lr",
                format!("{} must be > 0", self.lr),
            ));
        }
        if self.pool == 0 || crop_size % self.pool != 0 {
            return Err(Error::invalid(
                "train.pool",
                format!("{} must divide crop size {crop_size}", self.pool),
            ));
        }
        if self.fovea % 2 != 0 || self.fovea > crop_size {
            return Err(Error::invalid(
                "train.fovea",
                format!("{} must be even and ≤ crop size {crop_size}", self.fovea),
            ));
        }
        Ok(())
    }
}

/// Shape of the network and of the patches it accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyShape {
    pub crop_size: usize,
    pub pool: usize,
    pub fovea: usize,
    pub k: usize,
    pub c_feat: usize,
    pub use_terminal_class: bool,
    pub hidden: usize,
}

impl TinyShape {
    pub fn new(cfg: &MatchConfig, train: &TrainConfig) -> Self {
        Self {
            crop_size: cfg.crop_size,
            pool: train.pool,
            fovea: train.fovea,
            k: cfg.k,
            c_feat: cfg.c_feat,
            use_terminal_class: cfg.use_terminal_class,
            hidden: train.hidden,
        }
    }

    pub fn channels(&self) -> usize {
        self.c_feat + self.k + 2
    }

    pub fn n_classes(&self) -> usize {
        self.k + usize::from(self.use_terminal_class)
    }

    pub fn n_out(&self) -> usize {
        self.n_classes() + 2
    }

    pub fn input_dim(&self) -> usize {
        let blocks = self.crop_size / self.pool;
        let fov = self.fovea / 2;
        blocks * blocks * self.channels() + fov * fov * 2
    }

    pub fn n_params(&self) -> usize {
        let (i, h, o) = (self.input_dim(), self.hidden, self.n_out());
        i * h + h + h * o + o
    }

    pub fn matches(&self, cfg: &MatchConfig) -> bool {
        self.crop_size == cfg.crop_size
            && self.k == cfg.k
            && self.c_feat == cfg.c_feat
            && self.use_terminal_class == cfg.use_terminal_class
    }

    /// Flattens a patch into the network input.
    pub fn encode<S: Scalar>(&self, patch: &AggregatedPatch<S>) -> Vec<S> {
        assert_eq!(
            patch.grid.shape(),
            (self.crop_size, self.crop_size, self.channels()),
            "patch shape does not fit this scorer"
        );
        let c = self.channels();
        let p = self.pool;
        let blocks = self.crop_size / p;
        let mut out = vec![S::zero(); self.input_dim()];
        let inv = S::one() / S::of((p * p) as f64);
        for y in 0..self.crop_size {
            let row = (y / p) * blocks;
            for x in 0..self.crop_size {
                let base = (row + x / p) * c;
                for (o, &v) in out[base..base + c].iter_mut().zip(patch.grid.pixel(y, x)) {
                    *o = *o + v;
                }
            }
        }
        let pooled = blocks * blocks * c;
        out[..pooled].iter_mut().for_each(|v| *v = *v * inv);

        let fov = self.fovea / 2;
        let start = self.crop_size / 2 - self.fovea / 2;
        let quarter = S::of(0.25);
        for fy in 0..fov {
            for fx in 0..fov {
                for ch in 0..2 {
                    let mut acc = S::zero();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc =
                                acc + patch.grid.get(start + 2 * fy + dy, start + 2 * fx + dx, ch);
                        }
                    }
                    out[pooled + (fy * fov + fx) * 2 + ch] = acc * quarter;
                }
            }
        }
        out
    }
}

/// One supervised example, already encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample<S> {
    pub input: Vec<S>,
    pub mask: Vec<bool>,
    pub class: usize,
    /// Regression target `(u − round(anchor)) / S`.
    pub target: [S; 2],
}

impl<S: Scalar> TrainingExample<S> {
    pub fn new(
        shape: &TinyShape,
        patch: &AggregatedPatch<S>,
        candidates: &CandidateSet<S>,
        class: usize,
        truth: PixelPoint<S>,
    ) -> Result<Self> {
        let mask = candidates.class_mask(shape.use_terminal_class);
        if class >= mask.len() || !mask[class] {
            return Err(Error::invalid(
                "training example",
                format!("class {class} is not selectable"),
            ));
        }
        Ok(Self {
            input: shape.encode(patch),
            mask,
            class,
            target: regression_target(patch, truth),
        })
    }
}

fn regression_target<S: Scalar>(patch: &AggregatedPatch<S>, truth: PixelPoint<S>) -> [S; 2] {
    let s = S::of(patch.size() as f64);
    let half = (patch.size() / 2) as f64;
    let cx = S::of(patch.origin.0 as f64 + half);
    let cy = S::of(patch.origin.1 as f64 + half);
    [(truth.x - cx) / s, (truth.y - cy) / s]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.total)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,l_cls,l_reg,total\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.9},{:.9},{:.9}",
                e.epoch, e.l_cls, e.l_reg, e.total
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyScorer<S> {
    pub shape: TinyShape,
    /// `W1 [input][hidden]`, `b1`, `W2 [hidden][out]`, `b2`, flattened.
    pub params: Vec<S>,
}

struct Forward<S> {
    hidden: Vec<S>,
    out: Vec<S>,
}

impl<S: Scalar> TinyScorer<S> {
    /// He-initialised network; output biases and location weights start at zero.
    pub fn init(shape: TinyShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, h, o) = (shape.input_dim(), shape.hidden, shape.n_out());
        let mut params = Vec::with_capacity(shape.n_params());
        let s1 = (2.0 / i as f64).sqrt();
        params.extend((0..i * h).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            S::of(s1 * z)
        }));
        params.extend((0..h).map(|_| S::zero()));
        let s2 = (1.0 / h as f64).sqrt();
        let nc = shape.n_classes();
        params.extend((0..h * o).map(|j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            // Location outputs start at zero: the anchor itself.
            if j % o >= nc {
                S::zero()
            } else {
                S::of(s2 * z)
            }
        }));
        params.extend((0..o).map(|_| S::zero()));
        Self { shape, params }
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let (i, h, o) = (
            self.shape.input_dim(),
            self.shape.hidden,
            self.shape.n_out(),
        );
        let b1 = i * h;
        let w2 = b1 + h;
        (b1, w2, w2 + h * o)
    }

    fn forward(&self, x: &[S]) -> Forward<S> {
        let (h, o) = (self.shape.hidden, self.shape.n_out());
        let (b1, w2, b2) = self.offsets();
        let mut hidden = self.params[b1..b1 + h].to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == S::zero() {
                continue;
            }
            let row = &self.params[i * h..(i + 1) * h];
            for (a, &w) in hidden.iter_mut().zip(row) {
                *a = *a + xi * w;
            }
        }
        hidden.iter_mut().for_each(|a| *a = a.max(S::zero()));
        let mut out = self.params[b2..b2 + o].to_vec();
        for (j, &hj) in hidden.iter().enumerate() {
            if hj == S::zero() {
                continue;
            }
            let row = &self.params[w2 + j * o..w2 + (j + 1) * o];
            for (a, &w) in out.iter_mut().zip(row) {
                *a = *a + hj * w;
            }
        }
        Forward { hidden, out }
    }

    /// Unweighted `(cross-entropy, smooth-L1)` for one example.
    fn example_losses(&self, ex: &TrainingExample<S>, fwd: &Forward<S>) -> (S, S, Vec<S>) {
        let nc = self.shape.n_classes();
        let probs = masked_softmax(&fwd.out[..nc], &ex.mask);
        let ce = -probs[ex.class].max(S::min_positive_value()).ln();
        let reg = smooth_l1_loss(&fwd.out[nc..], &ex.target).expect("two regression outputs");
        (ce, reg, probs)
    }

    /// Weighted loss `λ₁·CE + λ₂·smoothL1` of one example and its gradient, accumulated into `grad`.
    fn accumulate(&self, ex: &TrainingExample<S>, l1: S, l2: S, grad: &mut [S]) -> (S, S) {
        let (h, o) = (self.shape.hidden, self.shape.n_out());
        let nc = self.shape.n_classes();
        let (b1, w2, b2) = self.offsets();
        let fwd = self.forward(&ex.input);
        let (ce, reg, probs) = self.example_losses(ex, &fwd);

        let mut d_out = vec![S::zero(); o];
        for (c, &p) in probs.iter().enumerate() {
            d_out[c] = l1 * (p - if c == ex.class { S::one() } else { S::zero() });
        }
        let g_reg = smooth_l1_grad(&fwd.out[nc..], &ex.target).expect("two regression outputs");
        for (d, g) in d_out[nc..].iter_mut().zip(g_reg) {
            *d = l2 * g;
        }

        for (g, &d) in grad[b2..b2 + o].iter_mut().zip(&d_out) {
            *g = *g + d;
        }
        let mut d_hidden = vec![S::zero(); h];
        for j in 0..h {
            let hj = fwd.hidden[j];
            if hj == S::zero() {
                continue;
            }
            let w_row = &self.params[w2 + j * o..w2 + (j + 1) * o];
            let g_row = &mut grad[w2 + j * o..w2 + (j + 1) * o];
            let mut acc = S::zero();
            for ((g, &w), &d) in g_row.iter_mut().zip(w_row).zip(&d_out) {
                *g = *g + hj * d;
                acc = acc + w * d;
            }
            d_hidden[j] = acc;
        }
        for (g, &d) in grad[b1..b1 + h].iter_mut().zip(&d_hidden) {
            *g = *g + d;
        }
        for (i, &xi) in ex.input.iter().enumerate() {
            if xi == S::zero() {
                continue;
            }
            for (g, &d) in grad[i * h..(i + 1) * h].iter_mut().zip(&d_hidden) {
                *g = *g + xi * d;
            }
        }
        (ce, reg)
    }

    /// Weighted loss of one example and its full parameter gradient.
    pub fn loss_and_grad(&self, ex: &TrainingExample<S>, lambda1: S, lambda2: S) -> (S, Vec<S>) {
        let mut grad = vec![S::zero(); self.params.len()];
        let (ce, reg) = self.accumulate(ex, lambda1, lambda2, &mut grad);
        (lambda1 * ce + lambda2 * reg, grad)
    }

    /// Mean unweighted `(l_cls, l_reg)` over a dataset.
    pub fn dataset_losses(&self, data: &[TrainingExample<S>]) -> (f64, f64) {
        let (mut ce, mut reg) = (0.0, 0.0);
        for ex in data {
            let (c, r, _) = self.example_losses(ex, &self.forward(&ex.input));
            ce += c.as_f64();
            reg += r.as_f64();
        }
        let n = data.len().max(1) as f64;
        (ce / n, reg / n)
    }

    /// Mini-batch training of `λ₁·L_cls + λ₂·L_reg`; deterministic for a fixed seed.
    pub fn train(
        data: &[TrainingExample<S>],
        cfg: &MatchConfig,
        train: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<(Self, TrainReport)> {
        if data.is_empty() {
            return Err(Error::invalid("training set", "is empty"));
        }
        cfg.validate()?;
        train.validate(cfg.crop_size)?;
        let shape = TinyShape::new(cfg, train);
        if let Some(bad) = data
            .iter()
            .find(|e| e.input.len() != shape.input_dim() || e.mask.len() != shape.n_classes())
        {
            return Err(Error::shape(
                format!(
                    "input {} / {} classes",
                    shape.input_dim(),
                    shape.n_classes()
                ),
                format!("input {} / {} classes", bad.input.len(), bad.mask.len()),
            ));
        }
        let mut net = Self::init(shape, train.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_0f_7a1e);
        let (l1, l2) = (S::of(cfg.lambda1), S::of(cfg.lambda2));
        let n = net.params.len();
        let mut grad = vec![S::zero(); n];
        let mut m = vec![S::zero(); n];
        let mut v = vec![S::zero(); n];
        let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let steps_per_epoch = data.len().div_ceil(train.batch_size);
        let total_steps = (steps_per_epoch * train.epochs) as f64;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut step = 0usize;
        let mut report = TrainReport::default();

        for epoch in 1..=train.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(train.batch_size) {
                grad.iter_mut().for_each(|g| *g = S::zero());
                for &i in batch {
                    net.accumulate(&data[i], l1, l2, &mut grad);
                }
                let scale = S::one() / S::of(batch.len() as f64);
                let lr = if train.cosine {
                    0.5 * train.lr
                        * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos())
                } else {
                    train.lr
                };
                step += 1;
                match train.optimizer {
                    Optimizer::Sgd => {
                        let lr = S::of(lr);
                        for (p, &g) in net.params.iter_mut().zip(&grad) {
                            *p = *p - lr * g * scale;
                        }
                    }
                    Optimizer::Adam => {
                        let t = step as i32;
                        let alpha =
                            S::of(lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t)));
                        let (b1, b2, e) = (S::of(beta1), S::of(beta2), S::of(eps));
                        for i in 0..n {
                            let g = grad[i] * scale;
                            m[i] = b1 * m[i] + (S::one() - b1) * g;
                            v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                            net.params[i] = net.params[i] - alpha * m[i] / (v[i].sqrt() + e);
                        }
                    }
                }
            }
            let (l_cls, l_reg) = net.dataset_losses(data);
            let log = EpochLog {
                epoch,
                l_cls,
                l_reg,
                total: cfg.lambda1 * l_cls + cfg.lambda2 * l_reg,
            };
            log::debug!(
                "epoch {epoch}: cls {l_cls:.5} reg {l_reg:.6} total {:.6}",
                log.total
            );
            on_epoch(&log);
            report.epochs.push(log);
        }
        Ok((net, report))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        let s = &self.shape;
        for v in [
            s.crop_size,
            s.pool,
            s.fovea,
            s.k,
            s.c_feat,
            usize::from(s.use_terminal_class),
            s.hidden,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> std::io::Result<Self> {
        let bad = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a scorer parameter file".into()));
        }
        let mut h = [0u32; 7];
        for v in &mut h {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let shape = TinyShape {
            crop_size: h[0] as usize,
            pool: h[1] as usize,
            fovea: h[2] as usize,
            k: h[3] as usize,
            c_feat: h[4] as usize,
            use_terminal_class: h[5] != 0,
            hidden: h[6] as usize,
        };
        if shape.pool == 0
            || shape.crop_size % shape.pool != 0
            || shape.fovea > shape.crop_size
            || shape.k == 0
        {
            return Err(bad(format!("inconsistent header {h:?}")));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != shape.n_params() * 8 {
            return Err(bad(format!(
                "expected {} parameters, found {} bytes",
                shape.n_params(),
                bytes.len()
            )));
        }
        let params = bytes
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok(Self { shape, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + self.params.len() * 8);
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice()).map_err(|e| Error::Parse {
            path: path.into(),
            reason: e.to_string(),
        })
    }

    /// Fails if this network cannot score patches built with `cfg`.
    pub fn check_compatible(&self, cfg: &MatchConfig) -> Result<()> {
        if self.shape.matches(cfg) {
            Ok(())
        } else {
            Err(Error::invalid(
                "scorer",
                format!(
                    "trained for K={}, S={}, c_feat={}, terminal={}; config has K={}, S={}, c_feat={}, terminal={}",
                    self.shape.k,
                    self.shape.crop_size,
                    self.shape.c_feat,
                    self.shape.use_terminal_class,
                    cfg.k,
                    cfg.crop_size,
                    cfg.c_feat,
                    cfg.use_terminal_class
                ),
            ))
        }
    }

    pub fn decide(
        &self,
        patch: &AggregatedPatch<S>,
        candidates: &CandidateSet<S>,
    ) -> MatchDecision<S> {
        let fwd = self.forward(&self.shape.encode(patch));
        let nc = self.shape.n_classes();
        let mut mask = candidates.class_mask(self.shape.use_terminal_class);
        if !mask.iter().any(|&m| m) {
            mask.iter_mut().for_each(|m| *m = true);
        }
        let s = S::of(patch.size() as f64);
        let half = (patch.size() / 2) as f64;
        MatchDecision {
            class_probs: masked_softmax(&fwd.out[..nc], &mask),
            location: PixelPoint::new(
                S::of(patch.origin.0 as f64 + half) + fwd.out[nc] * s,
                S::of(patch.origin.1 as f64 + half) + fwd.out[nc + 1] * s,
            ),
        }
    }
}

impl<S: Scalar> Scorer<S> for TinyScorer<S> {
    fn name(&self) -> &str {
        "tiny"
    }

    fn score(&self, input: &ScoringInput<'_, S>, cfg: &MatchConfig) -> MatchDecision<S> {
        debug_assert!(self.shape.matches(cfg));
        debug_assert_eq!(
            input.patch.origin,
            crop_origin(input.anchor(), cfg.crop_size)
        );
        self.decide(input.patch, input.candidates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::gradcheck::grad_check;
    use crate::matcher::{aggregate_patch, topk_neighbors};
    use crate::tensor::Tensor3;
    use rand::Rng;

    type P = PixelPoint<f64>;

    fn small_cfg() -> (MatchConfig, TrainConfig) {
        (
            MatchConfig {
                k: 2,
                crop_size: 8,
                c_feat: 1,
                ..Default::default()
            },
            TrainConfig {
                hidden: 6,
                pool: 4,
                fovea: 4,
                epochs: 200,
                batch_size: 4,
                ..Default::default()
            },
        )
    }

    fn random_example(
        rng: &mut ChaCha8Rng,
        cfg: &MatchConfig,
        shape: &TinyShape,
    ) -> TrainingExample<f64> {
        let verts: Vec<P> = (0..4)
            .map(|_| P::new(rng.gen_range(2.0..14.0), rng.gen_range(2.0..14.0)))
            .collect();
        let data = |c: usize, rng: &mut ChaCha8Rng| {
            Tensor3::from_vec(
                16,
                16,
                c,
                (0..256 * c).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap()
        };
        let (seg, feat, maps) = (data(1, rng), data(1, rng), data(4, rng));
        let cand = topk_neighbors(&verts, 0, cfg.k);
        let patch = aggregate_patch(&seg, &feat, &maps, &verts, &cand, cfg).unwrap();
        let class = rng.gen_range(0..shape.n_classes());
        let truth = verts[0] + P::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
        TrainingExample::new(shape, &patch, &cand, class, truth).unwrap()
    }

    #[test]
    fn input_dim_and_pooling() {
        let (cfg, train) = small_cfg();
        let shape = TinyShape::new(&cfg, &train);
        // 2×2 blocks × 5 channels + 2×2 fovea cells × 2 channels.
        assert_eq!(shape.input_dim(), 28);
        let mut grid = Tensor3::zeros(8, 8, 5);
        for y in 0..4 {
            for x in 0..4 {
                grid.set(y, x, 0, 1.0);
            }
        }
        grid.set(4, 4, 1, 4.0);
        let patch = AggregatedPatch {
            grid,
            origin: (0, 0),
            k: 2,
            c_feat: 1,
        };
        let x = shape.encode(&patch);
        assert_eq!(x[0], 1.0);
        assert_eq!(x[5], 0.0);
        assert_eq!(x[3 * 5 + 1], 0.25);
        // Fovea: rows/cols 2..6, cell (1,1) covers pixels 4..6.
        assert_eq!(x[20 + 3 * 2 + 1], 1.0);
        assert_eq!(x[20], 1.0);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (cfg, train) = small_cfg();
        let shape = TinyShape::new(&cfg, &train);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..5 {
            let ex = random_example(&mut rng, &cfg, &shape);
            let mut net = TinyScorer::<f64>::init(shape, trial);
            net.params
                .iter_mut()
                .for_each(|p| *p += rng.gen_range(-0.05..0.05));
            let point = net.params.clone();
            let err = grad_check(
                |w: &[f64]| {
                    TinyScorer {
                        shape,
                        params: w.to_vec(),
                    }
                    .loss_and_grad(&ex, 0.1, 0.01)
                    .0
                },
                |w: &[f64]| {
                    TinyScorer {
                        shape,
                        params: w.to_vec(),
                    }
                    .loss_and_grad(&ex, 0.1, 0.01)
                    .1
                },
                &point,
                1e-6,
            );
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn memorizes_a_single_example() {
        let (small, defaults) = small_cfg();
        let cfg = MatchConfig {
            crop_size: 16,
            ..small
        };
        let train = TrainConfig {
            hidden: 64,
            fovea: 8,
            cosine: false,
            ..defaults
        };
        let shape = TinyShape::new(&cfg, &train);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ex = random_example(&mut rng, &cfg, &shape);
        let (_, report) = TinyScorer::train(&[ex], &cfg, &train, |_| {}).unwrap();
        assert!(
            report.final_loss().unwrap() < 1e-3,
            "{:?}",
            report.epochs.last()
        );
    }

    #[test]
    fn training_is_bit_reproducible_and_round_trips() {
        let (cfg, train) = small_cfg();
        let shape = TinyShape::new(&cfg, &train);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<_> = (0..20)
            .map(|_| random_example(&mut rng, &cfg, &shape))
            .collect();
        let train = TrainConfig { epochs: 5, ..train };
        let (a, ra) = TinyScorer::train(&data, &cfg, &train, |_| {}).unwrap();
        let (b, rb) = TinyScorer::train(&data, &cfg, &train, |_| {}).unwrap();
        assert_eq!(
            a.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
            b.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(ra.to_csv(), rb.to_csv());
        assert!(ra.to_csv().starts_with("epoch,l_cls,l_reg,total\n1,"));

        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TSC1");
        assert_eq!(buf.len(), 4 + 28 + 8 * shape.n_params());
        let back = TinyScorer::<f64>::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, a);
        assert!(TinyScorer::<f64>::read_from(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let (cfg, train) = small_cfg();
        assert!(TinyScorer::<f64>::train(&[], &cfg, &train, |_| {}).is_err());
    }

    #[test]
    fn outputs_are_simplexes() {
        let (cfg, train) = small_cfg();
        let shape = TinyShape::new(&cfg, &train);
        let net = TinyScorer::<f64>::init(shape, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let verts: Vec<P> = (0..2)
            .map(|_| P::new(rng.gen_range(2.0..14.0), rng.gen_range(2.0..14.0)))
            .collect();
        let seg = Tensor3::zeros(16, 16, 1);
        let maps = Tensor3::zeros(16, 16, 2);
        let cand = topk_neighbors(&verts, 0, 2);
        let patch = aggregate_patch(&seg, &seg, &maps, &verts, &cand, &cfg).unwrap();
        let d = net.decide(&patch, &cand);
        assert!((d.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(d.class_probs[1], 0.0, "padding slot must get zero");
    }
}
