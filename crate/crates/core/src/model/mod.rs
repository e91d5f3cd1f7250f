//! Coordinate-classification network: a farthest-point / kNN max-pool
//! backbone, cross-attention propagation from the feature pyramid to
//! arbitrary query points, and three per-axis bin classifiers.

pub mod checkpoint;
pub mod tape;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::category::BinCodec;
use crate::error::{Error, Result};
use crate::geom::{Mat3, Point3, Vec3};
pub use tape::{Graph, Mat, Var};

/// How the global point enters the attention of each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalAttention {
    /// The global point is an extra slot in the neighbour softmax.
    Joint,
    /// The global value is added with its own single-logit softmax (weight 1).
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `h`.
    pub width: usize,
    /// Input size followed by the point count of every block.
    pub block_points: Vec<usize>,
    pub neighbors: usize,
    pub bins: usize,
    pub seed: u64,
    pub global_attention: GlobalAttention,
    /// Concatenate the features of every block for the heads (otherwise only
    /// the last block feeds them).
    pub multi_scale: bool,
    /// Include the global point in the attention.
    pub global_point: bool,
    /// Centered coordinates are multiplied by this before entering the network.
    pub coord_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            block_points: vec![1024, 512, 256, 128, 64, 32],
            neighbors: 16,
            bins: 128,
            seed: 0,
            global_attention: GlobalAttention::Joint,
            multi_scale: true,
            global_point: true,
            coord_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn num_blocks(&self) -> usize {
        self.block_points.len().saturating_sub(1)
    }

    pub fn input_points(&self) -> usize {
        self.block_points.first().copied().unwrap_or(0)
    }

    /// Length of the propagated feature handed to the heads.
    pub fn feature_dim(&self) -> usize {
        if self.multi_scale {
            self.width * self.num_blocks()
        } else {
            self.width
        }
    }

    fn slots(&self) -> usize {
        self.neighbors + usize::from(self.global_point)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 8 {
            return bad(format!("width {} < 8", self.width));
        }
        if self.num_blocks() == 0 {
            return bad("need at least one block".into());
        }
        if self.block_points.windows(2).any(|w| w[1] > w[0] || w[1] == 0) {
            return bad(format!("block point counts must be positive and non-increasing: {:?}", self.block_points));
        }
        let smallest = *self.block_points.last().expect("non-empty");
        if self.neighbors == 0 || self.neighbors > smallest {
            return bad(format!("neighbors {} must be in [1, {smallest}]", self.neighbors));
        }
        if self.bins < 2 {
            return bad(format!("bins {} < 2", self.bins));
        }
        if !(self.coord_scale > 0.0 && self.coord_scale.is_finite()) {
            return bad(format!("coord_scale {}", self.coord_scale));
        }
        Ok(())
    }
}

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

impl Parameters {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index(name).map(move |i| &mut self.tensors[i])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn zeros_like(&self) -> Vec<Mat> {
        self.tensors.iter().map(|t| Mat::zeros(t.nrows(), t.ncols())).collect()
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct BlockLayout {
    backbone: [Dense; 2],
    wq: usize,
    wk: usize,
    wv: usize,
    emb: [Dense; 2],
    ln_gain: usize,
    ln_bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    blocks: Vec<BlockLayout>,
    heads: [[Dense; 2]; 3],
}

enum Init {
    Glorot,
    Zeros,
    Ones,
}

struct Builder<'a> {
    params: Parameters,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let m = match init {
            Init::Zeros => Mat::zeros(rows, cols),
            Init::Ones => Mat::from_element(rows, cols, 1.0),
            Init::Glorot => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                Mat::from_fn(rows, cols, |_, _| self.rng.random_range(-a..a))
            }
        };
        self.params.names.push(name);
        self.params.tensors.push(m);
        self.params.tensors.len() - 1
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Dense {
        let w = self.add(format!("{prefix}.w"), fan_in, fan_out, Init::Glorot);
        let b = self.add(format!("{prefix}.b"), 1, fan_out, Init::Zeros);
        Dense { w, b }
    }
}

fn build(config: &ModelConfig) -> (Parameters, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut b = Builder { params: Parameters { names: vec![], tensors: vec![] }, rng: &mut rng };
    let h = config.width;
    let blocks = (0..config.num_blocks())
        .map(|a| {
            let fan_in = if a == 0 { 3 } else { 3 + h };
            BlockLayout {
                backbone: [b.dense(&format!("block{a}.backbone0"), fan_in, h), b.dense(&format!("block{a}.backbone1"), h, h)],
                wq: b.add(format!("block{a}.wq"), h, h, Init::Glorot),
                wk: b.add(format!("block{a}.wk"), h, h, Init::Glorot),
                wv: b.add(format!("block{a}.wv"), h, h, Init::Glorot),
                emb: [b.dense(&format!("block{a}.emb0"), 3, h), b.dense(&format!("block{a}.emb1"), h, 1)],
                ln_gain: b.add(format!("block{a}.ln.gain"), 1, h, Init::Ones),
                ln_bias: b.add(format!("block{a}.ln.bias"), 1, h, Init::Zeros),
            }
        })
        .collect();
    let heads = ["x", "y", "z"].map(|axis| {
        [b.dense(&format!("head_{axis}.0"), config.feature_dim(), h), b.dense(&format!("head_{axis}.1"), h, config.bins)]
    });
    (b.params, Layout { blocks, heads })
}

/// Neighbourhood structure of one cloud: farthest-point levels and the kNN
/// groups feeding each level. Coordinates are centered and scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGeometry {
    /// Centroid of the raw input, camera frame.
    pub centroid: Point3,
    pub coord_scale: f64,
    pub input: Vec<Vec3>,
    pub levels: Vec<LevelGeometry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelGeometry {
    pub points: Vec<Vec3>,
    /// `points.len() × k` indices into the previous level (the input for level 0).
    pub neighbors: Vec<usize>,
    /// `neighbor − point` for every group entry, `(n·k) × 3`.
    pub offsets: Mat,
}

/// Attention neighbourhoods of a query set in every level.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGeometry {
    pub count: usize,
    pub levels: Vec<QueryLevel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryLevel {
    /// `count × slots` row indices into the level's features, the global
    /// feature (if used) being the extra row `n`.
    pub index: Vec<usize>,
    /// `query − neighbour` per slot, `(count·slots) × 3`.
    pub offsets: Mat,
}

fn offsets_rotated(m: &Mat, r: &Mat3) -> Mat {
    let rt = Mat::from_fn(3, 3, |i, j| r[(j, i)]);
    m * rt
}

impl BackboneGeometry {
    /// The same structure for the cloud rotated by `r` about its centroid.
    pub fn rotated(&self, r: &Mat3) -> Self {
        Self {
            centroid: self.centroid,
            coord_scale: self.coord_scale,
            input: self.input.iter().map(|p| r * p).collect(),
            levels: self
                .levels
                .iter()
                .map(|l| LevelGeometry {
                    points: l.points.iter().map(|p| r * p).collect(),
                    neighbors: l.neighbors.clone(),
                    offsets: offsets_rotated(&l.offsets, r),
                })
                .collect(),
        }
    }
}

impl QueryGeometry {
    pub fn rotated(&self, r: &Mat3) -> Self {
        Self {
            count: self.count,
            levels: self
                .levels
                .iter()
                .map(|l| QueryLevel { index: l.index.clone(), offsets: offsets_rotated(&l.offsets, r) })
                .collect(),
        }
    }
}

/// Farthest-point sampling starting at index 0; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Vec3], m: usize) -> Vec<usize> {
    let m = m.min(points.len());
    let mut chosen = Vec::with_capacity(m);
    if m == 0 {
        return chosen;
    }
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut current = 0;
    for _ in 0..m {
        chosen.push(current);
        let c = points[current];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in points.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best.0 {
                best = (dist[i], i);
            }
        }
        current = best.1;
    }
    chosen
}

/// Indices of the `k` nearest points to `q` (ascending distance, then index).
pub fn knn(points: &[Vec3], q: &Vec3, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)).collect();
    let k = k.min(d.len());
    if k < d.len() {
        d.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(k);
    }
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().map(|(_, i)| i).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub socs: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { socs: 1.0, consistency: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub socs: f64,
    pub consistency: f64,
    pub total: f64,
}

pub fn total_loss(socs: f64, consistency: f64, w: &LossWeights) -> f64 {
    w.socs * socs + w.consistency * consistency
}

/// One training sample: the cloud's neighbourhoods, its queries with labels,
/// and the rotation applied about the centroid for the twin pass.
#[derive(Debug, Clone, Copy)]
pub struct TrainExample<'a> {
    pub id: usize,
    pub geometry: &'a BackboneGeometry,
    pub queries: &'a QueryGeometry,
    pub labels: &'a [[usize; 3]],
    pub twin_rotation: Option<Mat3>,
}

/// Per-level points and features of one cloud.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub geometry: BackboneGeometry,
    pub features: Vec<Mat>,
    pub global_points: Vec<Vec3>,
    pub global_features: Vec<Mat>,
}

/// Three per-axis bin distributions for every query (rows).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedDistribution {
    pub probs: [Mat; 3],
}

impl PredictedDistribution {
    pub fn len(&self) -> usize {
        self.probs[0].nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn argmax(&self) -> Vec<[usize; 3]> {
        (0..self.len()).map(|i| std::array::from_fn(|a| argmax_row(&self.probs[a], i).0)).collect()
    }

    /// Product of the three per-axis maximum probabilities.
    pub fn confidence(&self) -> Vec<f64> {
        (0..self.len()).map(|i| (0..3).map(|a| argmax_row(&self.probs[a], i).1).product()).collect()
    }

    pub fn decode(&self, codec: &BinCodec) -> Result<Vec<Point3>> {
        self.argmax().into_iter().map(|b| codec.decode(b)).collect()
    }
}

fn argmax_row(m: &Mat, r: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..m.ncols() {
        if m[(r, c)] > best.1 {
            best = (c, m[(r, c)]);
        }
    }
    best
}

/// Mean over queries of the summed per-axis cross-entropies.
pub fn loss_socs(pred: &PredictedDistribution, labels: &[[usize; 3]]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions vs {} labels", pred.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    let bins = pred.probs[0].ncols();
    let mut total = 0.0;
    for (i, l) in labels.iter().enumerate() {
        for a in 0..3 {
            if l[a] >= bins {
                return Err(Error::InvalidBin { index: l[a] as i64, num_bins: bins });
            }
            total -= pred.probs[a][(i, l[a])].ln();
        }
    }
    Ok(total / labels.len() as f64)
}

/// Mean Euclidean distance between paired feature rows.
pub fn loss_consistency(f: &Mat, f_twin: &Mat) -> Result<f64> {
    if f.shape() != f_twin.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", f.shape(), f_twin.shape())));
    }
    if f.nrows() == 0 {
        return Err(Error::EmptyInput("features"));
    }
    Ok((f - f_twin).row_iter().map(|r| r.norm()).sum::<f64>() / f.nrows() as f64)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
    layout: Layout,
}

/// Query chunk size for inference, bounding graph memory.
const PREDICT_CHUNK: usize = 512;

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config);
        Ok(Self { config, params, layout })
    }

    /// Model with externally supplied parameters; names and shapes must
    /// match the layout implied by `config`.
    pub fn with_parameters(config: ModelConfig, params: Parameters) -> Result<Self> {
        let mut model = Self::new(config)?;
        if model.params.names != params.names {
            return Err(Error::Format("parameter names do not match the model config".into()));
        }
        for (name, (a, b)) in params.names.iter().zip(model.params.tensors.iter().zip(&params.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::Format(format!("tensor {name}: shape {:?}, expected {:?}", b.shape(), a.shape())));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn geometry(&self, cloud: &[Point3]) -> Result<BackboneGeometry> {
        let cfg = &self.config;
        if cloud.len() != cfg.input_points() {
            return Err(Error::ShapeMismatch(format!("expected {} input points, got {}", cfg.input_points(), cloud.len())));
        }
        if !cloud.iter().all(finite) {
            return Err(Error::NonFinite("input cloud"));
        }
        let centroid = Point3::from(cloud.iter().map(|p| p.coords).sum::<Vec3>() / cloud.len() as f64);
        let input: Vec<Vec3> = cloud.iter().map(|p| (p - centroid) * cfg.coord_scale).collect();
        let k = cfg.neighbors;
        let mut levels: Vec<LevelGeometry> = Vec::with_capacity(cfg.num_blocks());
        for &count in &cfg.block_points[1..] {
            let prev = levels.last().map_or(&input, |l| &l.points);
            let picked = farthest_point_sample(prev, count);
            let points: Vec<Vec3> = picked.iter().map(|&i| prev[i]).collect();
            let mut neighbors = Vec::with_capacity(count * k);
            let mut offsets = Mat::zeros(count * k, 3);
            for (i, p) in points.iter().enumerate() {
                for (j, n) in knn(prev, p, k).into_iter().enumerate() {
                    let d = prev[n] - p;
                    for c in 0..3 {
                        offsets[(i * k + j, c)] = d[c];
                    }
                    neighbors.push(n);
                }
            }
            levels.push(LevelGeometry { points, neighbors, offsets });
        }
        Ok(BackboneGeometry { centroid, coord_scale: cfg.coord_scale, input, levels })
    }

    pub fn query_geometry(&self, geom: &BackboneGeometry, queries: &[Point3]) -> Result<QueryGeometry> {
        if !queries.iter().all(finite) {
            return Err(Error::NonFinite("queries"));
        }
        let k = self.config.neighbors;
        let slots = self.config.slots();
        let local: Vec<Vec3> = queries.iter().map(|q| (q - geom.centroid) * geom.coord_scale).collect();
        let levels = geom
            .levels
            .iter()
            .map(|lvl| {
                let g = lvl.points.iter().sum::<Vec3>() / lvl.points.len() as f64;
                let mut index = Vec::with_capacity(local.len() * slots);
                let mut offsets = Mat::zeros(local.len() * slots, 3);
                for (qi, x) in local.iter().enumerate() {
                    let mut row = qi * slots;
                    for n in knn(&lvl.points, x, k) {
                        let d = x - lvl.points[n];
                        offsets.row_mut(row).copy_from_slice(d.as_slice());
                        index.push(n);
                        row += 1;
                    }
                    if self.config.global_point {
                        offsets.row_mut(row).copy_from_slice((x - g).as_slice());
                        index.push(lvl.points.len());
                    }
                }
                QueryLevel { index, offsets }
            })
            .collect();
        Ok(QueryGeometry { count: queries.len(), levels })
    }

    fn param_vars(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if trainable { g.param(i, t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    fn dense(g: &mut Graph, pv: &[Var], d: &Dense, x: Var) -> Var {
        let m = g.matmul(x, pv[d.w]);
        g.add_row(m, pv[d.b])
    }

    fn backbone(&self, g: &mut Graph, pv: &[Var], geom: &BackboneGeometry) -> Vec<Var> {
        let k = self.config.neighbors;
        let mut feats: Vec<Var> = Vec::with_capacity(geom.levels.len());
        for (lvl, bl) in geom.levels.iter().zip(&self.layout.blocks) {
            let off = g.constant(lvl.offsets.clone());
            let input = match feats.last() {
                None => off,
                Some(&prev) => {
                    let nb = g.gather_rows(prev, lvl.neighbors.clone());
                    g.concat_cols(&[off, nb])
                }
            };
            let h = Self::dense(g, pv, &bl.backbone[0], input);
            let h = g.silu(h);
            let h = Self::dense(g, pv, &bl.backbone[1], h);
            feats.push(g.segment_max(h, k));
        }
        feats
    }

    /// Returns the propagated features and each block's attention weights.
    fn propagate_graph(&self, g: &mut Graph, pv: &[Var], feats: &[Var], qg: &QueryGeometry) -> (Var, Vec<Var>) {
        let cfg = &self.config;
        let (h, k, slots) = (cfg.width, cfg.neighbors, cfg.slots());
        let inv_sqrt_h = 1.0 / (h as f64).sqrt();
        let mut fx = g.constant(Mat::zeros(qg.count, h));
        let mut outs = Vec::with_capacity(feats.len());
        let mut weights = Vec::with_capacity(feats.len());
        for ((&fa, ql), bl) in feats.iter().zip(&qg.levels).zip(&self.layout.blocks) {
            let ext = if cfg.global_point {
                let fg = g.mean_rows(fa);
                g.concat_rows(fa, fg)
            } else {
                fa
            };
            let keys_all = g.matmul(ext, pv[bl.wk]);
            let vals_all = g.matmul(ext, pv[bl.wv]);
            let keys = g.gather_rows(keys_all, ql.index.clone());
            let vals = g.gather_rows(vals_all, ql.index.clone());
            let q = g.matmul(fx, pv[bl.wq]);
            let dots = g.grouped_dot(keys, q);
            let off = g.constant(ql.offsets.clone());
            let e = Self::dense(g, pv, &bl.emb[0], off);
            let e = g.silu(e);
            let r = Self::dense(g, pv, &bl.emb[1], e);
            let r = g.reshape(r, qg.count, slots);
            let logits = g.add(dots, r);
            let logits = g.scale(logits, inv_sqrt_h);
            let w = if cfg.global_point && cfg.global_attention == GlobalAttention::Separate {
                let local = g.slice_cols(logits, 0, k);
                let local = g.softmax_rows(local);
                let one = g.constant(Mat::from_element(qg.count, 1, 1.0));
                g.concat_cols(&[local, one])
            } else {
                g.softmax_rows(logits)
            };
            weights.push(w);
            let delta = g.grouped_sum(w, vals);
            let sum = g.add(fx, delta);
            fx = g.layer_norm(sum, pv[bl.ln_gain], pv[bl.ln_bias]);
            outs.push(fx);
        }
        let out = if cfg.multi_scale { g.concat_cols(&outs) } else { fx };
        (out, weights)
    }

    fn head_logits(&self, g: &mut Graph, pv: &[Var], f: Var) -> [Var; 3] {
        std::array::from_fn(|a| {
            let hd = &self.layout.heads[a];
            let x = Self::dense(g, pv, &hd[0], f);
            let x = g.silu(x);
            Self::dense(g, pv, &hd[1], x)
        })
    }

    pub fn aggregate(&self, cloud: &[Point3]) -> Result<FeaturePyramid> {
        let geometry = self.geometry(cloud)?;
        Ok(self.aggregate_geometry(geometry))
    }

    pub fn aggregate_geometry(&self, geometry: BackboneGeometry) -> FeaturePyramid {
        let mut g = Graph::new();
        let pv = self.param_vars(&mut g, false);
        let feats = self.backbone(&mut g, &pv, &geometry);
        let features: Vec<Mat> = feats.iter().map(|v| g.value(*v).clone()).collect();
        let global_points = geometry.levels.iter().map(|l| l.points.iter().sum::<Vec3>() / l.points.len() as f64).collect();
        let global_features =
            features.iter().map(|f| Mat::from_fn(1, f.ncols(), |_, j| f.column(j).mean())).collect();
        FeaturePyramid { geometry, features, global_points, global_features }
    }

    /// Propagated features of `queries` (rows) from a computed pyramid.
    pub fn propagate(&self, pyramid: &FeaturePyramid, queries: &[Point3]) -> Result<Mat> {
        let qg = self.query_geometry(&pyramid.geometry, queries)?;
        Ok(self.propagate_traced(pyramid, &qg).0)
    }

    /// Propagated features together with every block's attention weights.
    pub fn propagate_traced(&self, pyramid: &FeaturePyramid, qg: &QueryGeometry) -> (Mat, Vec<Mat>) {
        let mut g = Graph::new();
        let pv = self.param_vars(&mut g, false);
        let feats: Vec<Var> = pyramid.features.iter().map(|f| g.constant(f.clone())).collect();
        let (out, w) = self.propagate_graph(&mut g, &pv, &feats, qg);
        (g.value(out).clone(), w.iter().map(|v| g.value(*v).clone()).collect())
    }

    pub fn heads(&self, features: &Mat) -> Result<PredictedDistribution> {
        if features.ncols() != self.config.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature length {}, expected {}",
                features.ncols(),
                self.config.feature_dim()
            )));
        }
        let mut g = Graph::new();
        let pv = self.param_vars(&mut g, false);
        let f = g.constant(features.clone());
        let logits = self.head_logits(&mut g, &pv, f);
        Ok(PredictedDistribution { probs: logits.map(|l| tape::softmax_rows(g.value(l))) })
    }

    /// Full forward pass for `queries` against `cloud`.
    pub fn predict(&self, cloud: &[Point3], queries: &[Point3]) -> Result<PredictedDistribution> {
        let pyramid = self.aggregate(cloud)?;
        self.predict_with(&pyramid, queries)
    }

    pub fn predict_with(&self, pyramid: &FeaturePyramid, queries: &[Point3]) -> Result<PredictedDistribution> {
        let mut probs: [Vec<Mat>; 3] = Default::default();
        for chunk in queries.chunks(PREDICT_CHUNK) {
            let f = self.propagate(pyramid, chunk)?;
            let d = self.heads(&f)?;
            for (acc, p) in probs.iter_mut().zip(d.probs) {
                acc.push(p);
            }
        }
        Ok(PredictedDistribution { probs: probs.map(|parts| vstack(&parts, self.config.bins)) })
    }

    fn batch_graph(&self, batch: &[TrainExample], w: &LossWeights, trainable: bool) -> Result<(Graph, Var, LossParts)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let mut g = Graph::new();
        let pv = self.param_vars(&mut g, trainable);
        let mut terms = Vec::with_capacity(batch.len());
        let (mut socs_sum, mut cons_sum) = (0.0, 0.0);
        let scale = 1.0 / batch.len() as f64;
        for ex in batch {
            if ex.labels.len() != ex.queries.count {
                return Err(Error::ShapeMismatch(format!("{} labels for {} queries", ex.labels.len(), ex.queries.count)));
            }
            if let Some(l) = ex.labels.iter().flatten().find(|l| **l >= self.config.bins) {
                return Err(Error::InvalidBin { index: *l as i64, num_bins: self.config.bins });
            }
            let q = ex.queries.count as f64;
            let feats = self.backbone(&mut g, &pv, ex.geometry);
            let (f, _) = self.propagate_graph(&mut g, &pv, &feats, ex.queries);
            let logits = self.head_logits(&mut g, &pv, f);
            let nll: Vec<Var> = logits
                .iter()
                .enumerate()
                .map(|(a, &l)| {
                    let lp = g.log_softmax_rows(l);
                    g.nll(lp, ex.labels.iter().map(|b| b[a]).collect())
                })
                .collect();
            let s = g.concat_cols(&nll);
            let s = g.sum(s);
            let socs = g.scale(s, 1.0 / q);
            let socs_val = g.scalar(socs);
            let mut term = g.scale(socs, w.socs * scale);
            let mut cons_val = 0.0;
            if let (Some(r), true) = (ex.twin_rotation, w.consistency != 0.0) {
                let tg = ex.geometry.rotated(&r);
                let tq = ex.queries.rotated(&r);
                let tfeats = self.backbone(&mut g, &pv, &tg);
                let (tf, _) = self.propagate_graph(&mut g, &pv, &tfeats, &tq);
                let neg = g.scale(tf, -1.0);
                let diff = g.add(f, neg);
                let norms = g.row_norm(diff);
                let c = g.sum(norms);
                let cons = g.scale(c, 1.0 / q);
                cons_val = g.scalar(cons);
                let weighted = g.scale(cons, w.consistency * scale);
                term = g.add(term, weighted);
            }
            if !(socs_val.is_finite() && cons_val.is_finite()) {
                return Err(Error::NonFiniteLoss { step: 0, samples: vec![ex.id] });
            }
            socs_sum += socs_val;
            cons_sum += cons_val;
            terms.push(term);
        }
        let all = g.concat_cols(&terms);
        let root = g.sum(all);
        let parts = LossParts { socs: socs_sum * scale, consistency: cons_sum * scale, total: g.scalar(root) };
        Ok((g, root, parts))
    }

    pub fn loss(&self, batch: &[TrainExample], w: &LossWeights) -> Result<LossParts> {
        Ok(self.batch_graph(batch, w, false)?.2)
    }

    /// Loss parts and the exact gradient of the weighted total with respect
    /// to every parameter tensor (zeros for unused tensors).
    pub fn gradients(&self, batch: &[TrainExample], w: &LossWeights) -> Result<(LossParts, Vec<Mat>)> {
        let (g, root, parts) = self.batch_graph(batch, w, true)?;
        let grads = g
            .param_grads(root, self.params.len())
            .into_iter()
            .zip(&self.params.tensors)
            .map(|(gr, t)| gr.unwrap_or_else(|| Mat::zeros(t.nrows(), t.ncols())))
            .collect::<Vec<_>>();
        if grads.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss { step: 0, samples: batch.iter().map(|e| e.id).collect() });
        }
        Ok((parts, grads))
    }
}

fn finite(p: &Point3) -> bool {
    p.iter().all(|v| v.is_finite())
}

fn vstack(parts: &[Mat], cols: usize) -> Mat {
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Mat::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.nrows()).copy_from(p);
        at += p.nrows();
    }
    out
}
