//! Twin-pass training: per-sample random rotations, query sampling and
//! labelling, Adam or Adam-with-lookahead updates, a constant-then-cosine
//! learning-rate schedule and seeded epoch shuffling.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::category::{label_point_with, BinCodec, CategoryTemplate};
use crate::error::{Error, Result};
use crate::geom::{random_rigid_with, AnisoSimilarity, Mat3, PointCloud};
use crate::model::{BackboneGeometry, LossParts, LossWeights, Mat, Model, Parameters, QueryGeometry, TrainExample};
use crate::sampling::{sample_queries, SamplingKind, SamplingStrategy, DEFAULT_TRAIN_SAMPLES};
use crate::tps::TpsWarp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Adam wrapped in lookahead (k = 6, alpha = 0.5).
    RangerLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub anneal_start_fraction: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub sampling: SamplingStrategy,
    pub loss_weights: LossWeights,
    /// Steps between validation evaluations (0 disables them).
    pub eval_every: usize,
    /// Steps between periodic checkpoints (0 disables them).
    pub checkpoint_every: usize,
    /// A batch whose coordinate loss exceeds this multiple of the chance
    /// level `3 ln B` is treated like a non-finite loss (0 disables).
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-3,
            total_steps: 20_000,
            anneal_start_fraction: 0.5,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            sampling: SamplingStrategy::new(SamplingKind::SurfaceIndependent, DEFAULT_TRAIN_SAMPLES),
            loss_weights: LossWeights::default(),
            eval_every: 1000,
            checkpoint_every: 5000,
            divergence_factor: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.anneal_start_fraction > 0.0 && self.anneal_start_fraction < 1.0) {
            return bad(format!("anneal_start_fraction {} not in (0, 1)", self.anneal_start_fraction));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        let w = self.loss_weights;
        if !(self.divergence_factor >= 0.0) {
            return bad(format!("divergence_factor {}", self.divergence_factor));
        }
        if !(w.socs >= 0.0 && w.consistency >= 0.0 && w.socs.is_finite() && w.consistency.is_finite()) {
            return bad(format!("loss weights {w:?}"));
        }
        self.sampling.validate()
    }
}

/// Constant until the annealing point, then a cosine decay to zero at
/// `total_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps as f64;
    let start = cfg.anneal_start_fraction * total;
    let s = step as f64;
    if s < start {
        return cfg.learning_rate;
    }
    let span = total - start;
    if span <= 0.0 {
        return 0.0;
    }
    let p = ((s - start) / span).min(1.0);
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const LOOKAHEAD_K: usize = 6;
const LOOKAHEAD_ALPHA: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: usize,
    slow: Option<Vec<Mat>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &Parameters) -> Self {
        Self {
            kind,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            slow: (kind == OptimizerKind::RangerLike).then(|| params.tensors.clone()),
        }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn apply(&mut self, params: &mut Parameters, grads: &[Mat], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.tensors.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
        if let Some(slow) = self.slow.as_mut() {
            if self.t.is_multiple_of(LOOKAHEAD_K) {
                for (s, p) in slow.iter_mut().zip(params.tensors.iter_mut()) {
                    for i in 0..s.len() {
                        s[i] += LOOKAHEAD_ALPHA * (p[i] - s[i]);
                    }
                    p.copy_from(s);
                }
            }
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }
}

/// One training view with its cached neighbourhoods.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub id: usize,
    pub cloud: PointCloud,
    pub warp: Arc<TpsWarp>,
    /// Canonical object frame → camera.
    pub pose: AnisoSimilarity,
    pub geometry: BackboneGeometry,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub items: Vec<TrainItem>,
    pub template: CategoryTemplate,
    pub codec: BinCodec,
}

impl TrainData {
    pub fn new(
        model: &Model,
        views: impl IntoIterator<Item = (usize, PointCloud, Arc<TpsWarp>, AnisoSimilarity)>,
        template: CategoryTemplate,
        codec: BinCodec,
    ) -> Result<Self> {
        let items = views
            .into_iter()
            .map(|(id, cloud, warp, pose)| {
                let geometry = model.geometry(&cloud.points)?;
                Ok(TrainItem { id, cloud, warp, pose, geometry })
            })
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(Error::EmptyInput("training views"));
        }
        Ok(Self { items, template, codec })
    }
}

/// Queries, labels and twin rotation drawn for one item at one step.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: usize,
    pub queries: QueryGeometry,
    pub labels: Vec<[usize; 3]>,
    pub rotation: Mat3,
}

/// Derives a child seed from a parent seed and a stream index.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn prepare_sample(model: &Model, data: &TrainData, item: &TrainItem, cfg: &TrainConfig, step: usize) -> Result<PreparedSample> {
    let seed = mix(mix(cfg.seed, step as u64), item.id as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotation = random_rigid_with(&mut rng, 0.0).rotation;
    let q = sample_queries(&cfg.sampling, &item.cloud, &data.template, mix(seed, 1))?;
    let labels = q.points.iter().map(|x| label_point_with(x, &item.warp, &item.pose, &data.codec).bins).collect();
    let queries = model.query_geometry(&item.geometry, &q.points)?;
    Ok(PreparedSample { id: item.id, queries, labels, rotation })
}

/// Seeded shuffling over the training items, one permutation per epoch.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    seed: u64,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

impl EpochSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self { seed, order: (0..len).collect(), pos: 0, epoch: 0 };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, self.epoch));
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.epoch += 1;
                    self.pos = 0;
                    self.shuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// One optimizer update on a prepared batch. Non-finite losses or
/// gradients abort with the step and the offending sample ids.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    data: &TrainData,
    batch: &[PreparedSample],
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossParts> {
    let by_id = |id: usize| data.items.iter().find(|it| it.id == id).ok_or(Error::EmptyInput("batch item"));
    let examples = batch
        .iter()
        .map(|s| {
            let item = by_id(s.id)?;
            Ok(TrainExample {
                id: s.id,
                geometry: &item.geometry,
                queries: &s.queries,
                labels: &s.labels,
                twin_rotation: Some(s.rotation),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (parts, grads) = model.gradients(&examples, &cfg.loss_weights).map_err(|e| match e {
        Error::NonFiniteLoss { samples, .. } => Error::NonFiniteLoss { step, samples },
        other => other,
    })?;
    let chance = 3.0 * (model.config.bins as f64).ln();
    if cfg.divergence_factor > 0.0 && parts.socs > cfg.divergence_factor * chance {
        return Err(Error::NonFiniteLoss { step, samples: batch.iter().map(|s| s.id).collect() });
    }
    opt.apply(&mut model.params, &grads, lr_schedule(step, cfg));
    if !model.params.is_finite() {
        return Err(Error::NonFiniteLoss { step, samples: batch.iter().map(|s| s.id).collect() });
    }
    Ok(parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_socs: f64,
    pub loss_consistency: f64,
    pub val_error: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "step,lr,loss_socs,loss_consistency,val_error";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let val = self.val_error.map(|v| format!("{v}")).unwrap_or_default();
        format!("{},{},{},{},{}", self.step, self.lr, self.loss_socs, self.loss_consistency, val)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    /// Step and parameters of the lowest validation error seen.
    pub best: Option<(usize, f64, Parameters)>,
}

/// Runs `cfg.total_steps` updates. `validate` (if given) is evaluated every
/// `eval_every` steps and after the last one; `on_step` sees every record
/// with the current model.
/// Validation error of the current model (lower is better).
pub type Validator<'a> = dyn Fn(&Model) -> Result<f64> + 'a;

pub fn train(
    model: &mut Model,
    data: &TrainData,
    cfg: &TrainConfig,
    validate: Option<&Validator>,
    mut on_step: impl FnMut(&StepRecord, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    let mut sampler = EpochSampler::new(data.items.len(), cfg.seed);
    let mut records = Vec::with_capacity(cfg.total_steps);
    let mut best: Option<(usize, f64, Parameters)> = None;
    for step in 0..cfg.total_steps {
        let lr = lr_schedule(step, cfg);
        let batch = sampler
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| prepare_sample(model, data, &data.items[i], cfg, step))
            .collect::<Result<Vec<_>>>()?;
        let parts = train_step(model, &mut opt, data, &batch, cfg, step)?;
        let last = step + 1 == cfg.total_steps;
        let val_error = match validate {
            Some(f) if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) => Some(f(model)?),
            _ => None,
        };
        if let Some(v) = val_error {
            if best.as_ref().is_none_or(|b| v < b.1) {
                best = Some((step + 1, v, model.params.clone()));
            }
        }
        let rec = StepRecord { step, lr, loss_socs: parts.socs, loss_consistency: parts.consistency, val_error };
        on_step(&rec, model)?;
        records.push(rec);
    }
    Ok(TrainOutcome { records, best })
}

/// Distance between decoded predictions and ground-truth canonical
/// coordinates for every query, in canonical units.
pub fn coordinate_errors(
    model: &Model,
    cloud: &PointCloud,
    queries: &[crate::geom::Point3],
    warp: &TpsWarp,
    pose: &AnisoSimilarity,
    codec: &BinCodec,
) -> Result<Vec<f64>> {
    let pred = model.predict(&cloud.points, queries)?.decode(codec)?;
    Ok(pred
        .iter()
        .zip(queries)
        .map(|(p, x)| (p - label_point_with(x, warp, pose, codec).coord).norm())
        .collect())
}
