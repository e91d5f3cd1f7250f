//! Glue between the synthetic data, the network and the pose solver:
//! labelled views, dense inference, correspondence filtering, pose
//! estimation and metric records.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::category::{label_point_with, BinCodec, CategoryTemplate, LabelSpace};
use crate::error::{Error, Result};
use crate::geom::{bounds, AnisoSimilarity, OrientedBox, Point3, PointCloud, Vec3};
use crate::metrics::{median, EvalRecord};
use crate::model::{Model, ModelConfig};
use crate::posefit::{fit_robust, CorrespondenceSet, FitResult, RansacConfig, DEFAULT_THRESHOLD_FRACTION};
use crate::sampling::{sample_queries, SamplingKind, SamplingStrategy, DEFAULT_INFER_SAMPLES};
use crate::synth::{Dataset, Split};
use crate::tps::TpsWarp;
use crate::train::TrainData;

/// A rendered view with everything needed to label and score it.
#[derive(Debug, Clone)]
pub struct View {
    pub id: usize,
    pub instance: usize,
    pub cloud: PointCloud,
    /// Normalized object frame → camera.
    pub pose: AnisoSimilarity,
    pub warp: Arc<TpsWarp>,
    /// Box of the normalized instance shape (center, half extents).
    pub object_box: (Point3, Vec3),
}

impl View {
    pub fn label(&self, x: &Point3, codec: &BinCodec) -> [usize; 3] {
        label_point_with(x, &self.warp, &self.pose, codec).bins
    }

    pub fn coordinate(&self, x: &Point3, codec: &BinCodec) -> Point3 {
        label_point_with(x, &self.warp, &self.pose, codec).coord
    }
}

/// Views of one split with warps into `space`.
pub fn views(dataset: &Dataset, space: LabelSpace, split: Split) -> Result<Vec<View>> {
    let records = dataset.records(space)?;
    let warps: Vec<Arc<TpsWarp>> = records.iter().map(|r| Arc::new(r.warp.clone())).collect();
    let boxes: Vec<(Point3, Vec3)> = dataset
        .instances
        .iter()
        .map(|(_, g)| {
            let (lo, hi) = bounds(&g.shape.points).ok_or(Error::EmptyInput("instance shape"))?;
            Ok((nalgebra::center(&lo, &hi), (hi - lo) / 2.0))
        })
        .collect::<Result<_>>()?;
    Ok(dataset
        .split(split)
        .map(|s| View {
            id: s.id,
            instance: s.instance,
            cloud: s.cloud.clone(),
            pose: s.pose,
            warp: warps[s.instance].clone(),
            object_box: boxes[s.instance],
        })
        .collect())
}

/// Model configuration adapted to a dataset: input size from the views and
/// coordinates scaled by the category diagonal.
pub fn model_config_for(dataset: &Dataset, base: &ModelConfig) -> ModelConfig {
    let mut cfg = base.clone();
    if let Some(first) = cfg.block_points.first_mut() {
        *first = dataset.config.input_points;
    }
    cfg.coord_scale = 1.0 / dataset.template.category_diagonal;
    cfg
}

pub fn train_data(model: &Model, train_views: &[View], template: &CategoryTemplate, codec: BinCodec) -> Result<TrainData> {
    TrainData::new(
        model,
        train_views.iter().map(|v| (v.id, v.cloud.clone(), v.warp.clone(), v.pose)),
        template.clone(),
        codec,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub n_queries: usize,
    pub sampling: SamplingKind,
    /// Fraction of correspondences kept, most confident first.
    pub keep_fraction: f64,
    /// Drop correspondences whose decoded bin sits on the edge of the
    /// coordinate range (clamped labels carry no position information).
    pub drop_boundary: bool,
    pub ransac_iters: usize,
    /// Inlier threshold as a fraction of the category diagonal.
    pub inlier_fraction: f64,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_queries: DEFAULT_INFER_SAMPLES,
            sampling: SamplingKind::SurfaceIndependent,
            keep_fraction: 0.5,
            drop_boundary: true,
            ransac_iters: 256,
            inlier_fraction: DEFAULT_THRESHOLD_FRACTION,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 {
            return Err(Error::Config("n_queries must be >= 1".into()));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!("keep_fraction {} not in (0, 1]", self.keep_fraction)));
        }
        if !(self.inlier_fraction > 0.0) {
            return Err(Error::Config(format!("inlier_fraction {}", self.inlier_fraction)));
        }
        Ok(())
    }

    fn ransac(&self, template: &CategoryTemplate, view_seed: u64) -> RansacConfig {
        RansacConfig {
            iters: self.ransac_iters,
            inlier_threshold: self.inlier_fraction * template.category_diagonal,
            ..RansacConfig::for_diagonal(template.category_diagonal, self.seed ^ view_seed)
        }
    }
}

pub fn inference_queries(cloud: &PointCloud, template: &CategoryTemplate, cfg: &InferenceConfig, seed: u64) -> Result<Vec<Point3>> {
    let strategy = SamplingStrategy::new(cfg.sampling, cfg.n_queries);
    Ok(sample_queries(&strategy, cloud, template, cfg.seed ^ seed)?.points)
}

/// Correspondences (decoded coordinate, query) after boundary and
/// confidence filtering.
pub fn build_correspondences(
    bins: &[[usize; 3]],
    confidence: Option<&[f64]>,
    queries: &[Point3],
    codec: &BinCodec,
    cfg: &InferenceConfig,
) -> Result<CorrespondenceSet> {
    if bins.len() != queries.len() || confidence.is_some_and(|c| c.len() != bins.len()) {
        return Err(Error::ShapeMismatch("bins, confidences and queries differ in length".into()));
    }
    let mut idx: Vec<usize> = (0..bins.len()).filter(|&i| !(cfg.drop_boundary && codec.on_boundary(&bins[i]))).collect();
    if let Some(conf) = confidence {
        idx.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
        let keep = ((idx.len() as f64 * cfg.keep_fraction).ceil() as usize).min(idx.len());
        idx.truncate(keep);
        idx.sort_unstable();
    }
    let socs = idx.iter().map(|&i| codec.decode(bins[i])).collect::<Result<Vec<_>>>()?;
    let camera = idx.iter().map(|&i| queries[i]).collect();
    let set = CorrespondenceSet::new(socs, camera);
    Ok(match confidence {
        Some(conf) => set.with_confidence(idx.iter().map(|&i| conf[i]).collect()),
        None => set,
    })
}

/// Dense inference on one view followed by the robust pose fit.
pub fn estimate_pose(
    model: &Model,
    cloud: &PointCloud,
    template: &CategoryTemplate,
    codec: &BinCodec,
    cfg: &InferenceConfig,
    view_seed: u64,
) -> Result<FitResult> {
    let queries = inference_queries(cloud, template, cfg, view_seed)?;
    let pred = model.predict(&cloud.points, &queries)?;
    let conf = pred.confidence();
    let set = build_correspondences(&pred.argmax(), Some(&conf), &queries, codec, cfg)?;
    fit_robust(&set, &cfg.ransac(template, view_seed))
}

/// Pose fit from ground-truth labels of the inference queries, bypassing
/// the network.
pub fn estimate_pose_from_labels(
    view: &View,
    template: &CategoryTemplate,
    codec: &BinCodec,
    cfg: &InferenceConfig,
) -> Result<FitResult> {
    let queries = inference_queries(&view.cloud, template, cfg, view.id as u64)?;
    let bins: Vec<[usize; 3]> = queries.iter().map(|x| view.label(x, codec)).collect();
    let set = build_correspondences(&bins, None, &queries, codec, cfg)?;
    fit_robust(&set, &cfg.ransac(template, view.id as u64))
}

/// Metric record for a predicted canonical → camera transform. The
/// ground-truth box is the instance box under the view pose; the predicted
/// box is the template box under the prediction. Translation is compared at
/// the template box center: its predicted camera position against the
/// camera position of the object point the warp sends there.
pub fn eval_record(view: &View, template: &CategoryTemplate, pred: AnisoSimilarity) -> EvalRecord {
    let (tc, th) = template.canonical_box();
    let (oc, oh) = view.object_box;
    let anchor = view.warp.inverse(&tc, &oc).ok().map(|x| (view.pose.apply(&x), pred.apply(&tc)));
    EvalRecord {
        anchor,
        category: template.name.clone(),
        gt: view.pose,
        pred,
        gt_box: Some(OrientedBox::from_pose(&view.pose, &oc, &oh)),
        pred_box: Some(OrientedBox::from_pose(&pred, &tc, &th)),
        symmetry_axis: None,
        normalizer: view.pose.scale.x,
    }
}

/// Per-view pose estimates. Views whose fit fails are reported as `None`.
pub fn evaluate_views(
    model: &Model,
    views: &[View],
    template: &CategoryTemplate,
    codec: &BinCodec,
    cfg: &InferenceConfig,
) -> Result<Vec<(usize, Option<EvalRecord>)>> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::EmptyEval);
    }
    views
        .iter()
        .map(|v| match estimate_pose(model, &v.cloud, template, codec, cfg, v.id as u64) {
            Ok(fit) => Ok((v.id, Some(eval_record(v, template, fit.transform)))),
            Err(Error::NoModel { .. } | Error::DegenerateConfiguration(_) | Error::EmptyInput(_)) => Ok((v.id, None)),
            Err(e) => Err(e),
        })
        .collect()
}

/// Median distance between decoded predictions and the ground-truth
/// coordinates of up to `per_view` observed points of every view.
pub fn median_coordinate_error(model: &Model, views: &[View], codec: &BinCodec, per_view: usize) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut errs = Vec::new();
    for v in views {
        let step = (v.cloud.len() / per_view.max(1)).max(1);
        let q: Vec<Point3> = v.cloud.points.iter().step_by(step).take(per_view).copied().collect();
        let pred = model.predict(&v.cloud.points, &q)?.decode(codec)?;
        errs.extend(pred.iter().zip(&q).map(|(p, x)| (p - v.coordinate(x, codec)).norm()));
    }
    Ok(median(&errs))
}

/// Mean consistency distance between features of each probe view and of a
/// randomly rotated copy, on surface-independent queries.
pub fn consistency_probe(model: &Model, views: &[View], template: &CategoryTemplate, n_queries: usize, seed: u64) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::EmptyEval);
    }
    let strategy = SamplingStrategy::new(SamplingKind::SurfaceIndependent, n_queries);
    let mut total = 0.0;
    for v in views {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (v.id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let rot = crate::geom::random_rigid_with(&mut rng, 0.0);
        let q = sample_queries(&strategy, &v.cloud, template, seed ^ v.id as u64)?.points;
        let c = v.cloud.centroid();
        let turn = |p: &Point3| c + rot.rotation * (p - c);
        let f = model.propagate(&model.aggregate(&v.cloud.points)?, &q)?;
        let rotated: Vec<Point3> = v.cloud.points.iter().map(turn).collect();
        let rq: Vec<Point3> = q.iter().map(turn).collect();
        let fr = model.propagate(&model.aggregate(&rotated)?, &rq)?;
        total += crate::model::loss_consistency(&f, &fr)?;
    }
    Ok(total / views.len() as f64)
}
