//! In-memory synthetic datasets: instances of one family, the median-shape
//! template and rendered partial views with ground-truth poses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_partial, OccluderSide, ViewSpec};
use super::{generate_instance, Family, GeneratedInstance, ShapeParams};
use crate::category::{CategoryTemplate, InstanceRecord, LabelSpace};
use crate::error::{Error, Result};
use crate::geom::{AnisoSimilarity, Mat3, Point3, PointCloud, RigidTransform, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub family: Family,
    pub seed: u64,
    /// Parameter spread in `[0, 1]`; see [`ShapeParams::sample`].
    pub spread: f64,
    pub train_instances: usize,
    pub test_instances: usize,
    pub train_views_per_instance: usize,
    pub test_views_per_instance: usize,
    pub surface_points: usize,
    pub keypoints: usize,
    pub input_points: usize,
    pub resolution: [usize; 2],
    pub fov_deg: f64,
    /// Total azimuth range around the object front, degrees.
    pub azimuth_range_deg: f64,
    pub elevation_deg: [f64; 2],
    /// Camera distance as a multiple of the instance diagonal.
    pub distance_factor: [f64; 2],
    pub train_occluder_fraction: f64,
    pub test_occluder_fraction: f64,
    pub depth_noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            family: Family::Lamp,
            seed: 0,
            spread: 0.5,
            train_instances: 24,
            test_instances: 8,
            train_views_per_instance: 8,
            test_views_per_instance: 4,
            surface_points: 6000,
            keypoints: super::DEFAULT_KEYPOINTS,
            input_points: 1024,
            resolution: [160, 160],
            fov_deg: 40.0,
            azimuth_range_deg: 90.0,
            elevation_deg: [15.0, 45.0],
            distance_factor: [2.0, 3.0],
            train_occluder_fraction: 0.0,
            test_occluder_fraction: 0.0,
            depth_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub instance: usize,
    pub split: Split,
    /// Rendered partial view, camera frame.
    pub cloud: PointCloud,
    /// Normalized object frame → camera frame.
    pub pose: AnisoSimilarity,
    pub view_seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub template: CategoryTemplate,
    pub template_params: ShapeParams,
    pub instances: Vec<(ShapeParams, GeneratedInstance)>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// One record per instance (identity pose) with warps into `space`.
    pub fn records(&self, space: LabelSpace) -> Result<Vec<InstanceRecord>> {
        self.instances
            .iter()
            .map(|(_, g)| {
                InstanceRecord::new(g.shape.clone(), g.keypoints.clone(), &self.template, space, AnisoSimilarity::identity())
            })
            .collect()
    }

    /// Re-renders every sample with a different occluder fraction (same poses).
    pub fn with_test_occlusion(&self, fraction: f64) -> Result<Dataset> {
        let mut out = self.clone();
        out.config.test_occluder_fraction = fraction;
        for s in out.samples.iter_mut().filter(|s| s.split == Split::Test) {
            let view = view_spec(&out.config, Split::Test, s.view_seed);
            s.cloud = render_partial(&out.instances[s.instance].1.shape, &view, &s.pose)?;
        }
        Ok(out)
    }
}

/// Object → camera transform looking at the object center from
/// `(azimuth, elevation)` at `distance`. Azimuth 0 views the object front
/// (−y side); object z is up.
pub fn view_pose(azimuth: f64, elevation: f64, distance: f64) -> RigidTransform {
    let c = Vec3::new(elevation.cos() * azimuth.sin(), -elevation.cos() * azimuth.cos(), elevation.sin()) * distance;
    let forward = -c.normalize();
    let right = forward.cross(&Vec3::z()).normalize();
    let down = forward.cross(&right);
    let r = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    RigidTransform::new(r, -(r * c))
}

fn view_spec(cfg: &DatasetConfig, split: Split, seed: u64) -> ViewSpec {
    let occluder_fraction = match split {
        Split::Train => cfg.train_occluder_fraction,
        Split::Test => cfg.test_occluder_fraction,
    };
    ViewSpec {
        resolution: (cfg.resolution[0], cfg.resolution[1]),
        fov_deg: cfg.fov_deg,
        occluder_fraction,
        occluder_side: OccluderSide::ALL[(seed % 4) as usize],
        depth_noise: cfg.depth_noise,
        output_points: cfg.input_points,
        seed,
        ..ViewSpec::default()
    }
}

fn random_pose(cfg: &DatasetConfig, diagonal: f64, rng: &mut ChaCha8Rng) -> AnisoSimilarity {
    let half_az = cfg.azimuth_range_deg.to_radians() / 2.0;
    let az = if half_az > 0.0 { rng.random_range(-half_az..=half_az) } else { 0.0 };
    let [e0, e1] = cfg.elevation_deg;
    let el = if e1 > e0 { rng.random_range(e0..=e1) } else { e0 }.to_radians();
    let [d0, d1] = cfg.distance_factor;
    let dist = diagonal * if d1 > d0 { rng.random_range(d0..=d1) } else { d0 };
    let mut rigid = view_pose(az, el, dist);
    rigid.translation += Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0) * diagonal;
    AnisoSimilarity::isotropic(rigid, diagonal)
}

pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.train_instances == 0 {
        return Err(Error::Config("train_instances must be positive".into()));
    }
    let template_params = ShapeParams::median(cfg.family, cfg.seed);
    let template_shape = generate_instance(&template_params, cfg.surface_points, cfg.keypoints)?;

    let n_inst = cfg.train_instances + cfg.test_instances;
    let instances: Vec<(ShapeParams, GeneratedInstance)> = (0..n_inst)
        .map(|i| {
            let params = ShapeParams::sample(cfg.family, cfg.spread, instance_seed(cfg.seed, i));
            generate_instance(&params, cfg.surface_points, cfg.keypoints).map(|g| (params, g))
        })
        .collect::<Result<_>>()?;
    let category_diagonal = instances.iter().map(|(_, g)| g.diagonal).fold(template_shape.diagonal, f64::max);

    let template = CategoryTemplate {
        name: cfg.family.to_string(),
        mean_shape: template_shape.shape,
        template_keypoints: crate::geom::KeypointSet::new(template_shape.keypoints.keypoints, crate::geom::Frame::Socs),
        category_diagonal,
    };

    let mut samples = Vec::new();
    for (i, (_, inst)) in instances.iter().enumerate() {
        let (split, views) = if i < cfg.train_instances {
            (Split::Train, cfg.train_views_per_instance)
        } else {
            (Split::Test, cfg.test_views_per_instance)
        };
        for v in 0..views {
            let view_seed = instance_seed(cfg.seed, i) ^ (v as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let mut rng = ChaCha8Rng::seed_from_u64(view_seed);
            let pose = random_pose(cfg, inst.diagonal, &mut rng);
            let view = view_spec(cfg, split, view_seed);
            let cloud = render_partial(&inst.shape, &view, &pose)?;
            samples.push(Sample { id: samples.len(), instance: i, split, cloud, pose, view_seed });
        }
    }
    Ok(Dataset { config: cfg.clone(), template, template_params, instances, samples })
}

pub(crate) fn instance_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(i as u64 * 7919 + 1)
}

/// Points of `cloud` transformed back to the normalized object frame.
pub fn to_object_frame(cloud: &PointCloud, pose: &AnisoSimilarity) -> Vec<Point3> {
    cloud.points.iter().map(|p| pose.inverse_apply(p)).collect()
}
