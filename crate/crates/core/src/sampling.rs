//! Query-point sampling for training and inference.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::category::CategoryTemplate;
use crate::error::{Error, Result};
use crate::geom::{Frame, Point3, PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingKind {
    /// Resample the observed points themselves.
    #[serde(rename = "P")]
    OnSurface,
    /// Observed points plus isotropic Gaussian noise.
    #[serde(rename = "SD")]
    SurfaceDependent,
    /// Uniform in a ball around the observed centroid, sized by the category.
    #[serde(rename = "SI")]
    SurfaceIndependent,
}

impl std::str::FromStr for SamplingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" | "p" => Ok(SamplingKind::OnSurface),
            "SD" | "sd" => Ok(SamplingKind::SurfaceDependent),
            "SI" | "si" => Ok(SamplingKind::SurfaceIndependent),
            other => Err(Error::Config(format!("unknown sampling strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for SamplingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplingKind::OnSurface => "P",
            SamplingKind::SurfaceDependent => "SD",
            SamplingKind::SurfaceIndependent => "SI",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub kind: SamplingKind,
    pub n_samples: usize,
    /// Noise for surface-dependent sampling, meters; `None` means 5% of the
    /// input cloud's bounding-box diagonal.
    pub sd_sigma: Option<f64>,
}

pub const DEFAULT_TRAIN_SAMPLES: usize = 512;
pub const DEFAULT_INFER_SAMPLES: usize = 2048;
pub const DEFAULT_SD_SIGMA_FRACTION: f64 = 0.05;

impl SamplingStrategy {
    pub fn new(kind: SamplingKind, n_samples: usize) -> Self {
        Self { kind, n_samples, sd_sigma: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        if let Some(s) = self.sd_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("SD sigma must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// Queries plus, for `P` and `SD`, the index of the input point each query
/// was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub queries: PointCloud,
    pub sources: Option<Vec<usize>>,
}

pub fn sample_queries(
    strategy: &SamplingStrategy,
    input: &PointCloud,
    template: &CategoryTemplate,
    seed: u64,
) -> Result<PointCloud> {
    sample_queries_with_sources(strategy, input, template, seed).map(|q| q.queries)
}

pub fn sample_queries_with_sources(
    strategy: &SamplingStrategy,
    input: &PointCloud,
    template: &CategoryTemplate,
    seed: u64,
) -> Result<QuerySet> {
    input.validate()?;
    strategy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = strategy.n_samples;
    let pts = &input.points;
    Ok(match strategy.kind {
        SamplingKind::OnSurface => {
            let idx = pick_sources(&mut rng, pts.len(), n);
            QuerySet { queries: cloud(idx.iter().map(|&i| pts[i]).collect(), input.frame), sources: Some(idx) }
        }
        SamplingKind::SurfaceDependent => {
            let sigma = strategy.sd_sigma.unwrap_or_else(|| default_sd_sigma(input));
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..pts.len())).collect();
            let q = idx
                .iter()
                .map(|&i| pts[i] + Vec3::from_fn(|_, _| normal.sample(&mut rng)))
                .collect();
            QuerySet { queries: cloud(q, input.frame), sources: Some(idx) }
        }
        SamplingKind::SurfaceIndependent => {
            let center = input.centroid();
            let radius = template.category_diagonal / 2.0;
            QuerySet { queries: cloud(uniform_ball(&mut rng, center, radius, n), input.frame), sources: None }
        }
    })
}

fn cloud(points: Vec<Point3>, frame: Frame) -> PointCloud {
    PointCloud::new(points, frame)
}

fn pick_sources(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    if n <= len {
        sample_indices(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

pub fn default_sd_sigma(input: &PointCloud) -> f64 {
    input.bounds().map(|(lo, hi)| (hi - lo).norm() * DEFAULT_SD_SIGMA_FRACTION).unwrap_or(0.0).max(1e-9)
}

/// Uniform samples in the solid ball (Gaussian direction, radius by cube-root inversion).
pub fn uniform_ball<R: Rng + ?Sized>(rng: &mut R, center: Point3, radius: f64, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            let dir = loop {
                let v = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let norm = v.norm();
                if norm > 1e-12 {
                    break v / norm;
                }
            };
            let r = radius * rng.random::<f64>().cbrt();
            center + dir * r
        })
        .collect()
}
