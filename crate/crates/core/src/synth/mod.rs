//! Procedural categories with analytic semantic keypoints, partial depth
//! views and shape-variation measurement.

mod dataset;
mod render;
mod shapes;

pub use dataset::{build_dataset, to_object_frame, view_pose, Dataset, DatasetConfig, Sample, Split};
pub use render::{render_partial, visibility_mask, OccluderSide, ViewSpec};
pub use shapes::{
    assemble, landmark_slot, lamp_stem_height_at, lamp_total_height, Assembly, Axis, Cross, Family, ParamSpec, Part,
    Ring, MAX_KEYPOINTS,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Frame, KeypointSet, Point3, PointCloud};

pub const DEFAULT_KEYPOINTS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub family: Family,
    pub values: Vec<f64>,
    pub seed: u64,
}

impl ShapeParams {
    pub fn median(family: Family, seed: u64) -> Self {
        Self { family, values: family.median_params(), seed }
    }

    /// Draws every parameter at `median ± spread·(distance to bound)`;
    /// `spread = 0` is the median shape and `spread = 1` spans the full range.
    /// The same seed yields nested draws as `spread` grows.
    pub fn sample(family: Family, spread: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spread = spread.clamp(0.0, 1.0);
        let values = family
            .param_specs()
            .iter()
            .map(|&(_, lo, med, hi)| {
                let u: f64 = rng.random_range(-1.0..=1.0);
                if u < 0.0 {
                    med + spread * u * (med - lo)
                } else {
                    med + spread * u * (hi - med)
                }
            })
            .collect();
        Self { family, values, seed }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.family.param_index(name).map(|i| self.values[i])
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        if let Some(i) = self.family.param_index(name) {
            self.values[i] = value;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedInstance {
    /// Surface samples normalized into the unit cube.
    pub shape: PointCloud,
    pub keypoints: KeypointSet,
    /// Part name each keypoint lies on.
    pub keypoint_parts: Vec<&'static str>,
    /// Bounding-box diagonal before normalization, meters.
    pub diagonal: f64,
}

/// Uniform-area surface samples and `n_keypoints` landmarks of the shape,
/// both normalized into the unit cube (box center at the origin, diagonal 1).
pub fn generate_instance(params: &ShapeParams, n_surface: usize, n_keypoints: usize) -> Result<GeneratedInstance> {
    if n_surface == 0 {
        return Err(Error::InvalidParams("n_surface must be positive".into()));
    }
    if !(KeypointSet::MIN_LEN..=MAX_KEYPOINTS).contains(&n_keypoints) {
        return Err(Error::InvalidParams(format!("keypoint count {n_keypoints} outside [4, {MAX_KEYPOINTS}]")));
    }
    let assembly = assemble(params.family, &params.values)?;
    let tris = assembly.triangles();
    let mut points = sample_triangles(&tris, n_surface, params.seed);
    let mut kps = assembly.keypoints(n_keypoints);

    // Normalize by the mesh box, not the samples, so the frame is independent
    // of the sampling seed.
    let verts: Vec<Point3> = tris.iter().flatten().copied().collect();
    let diagonal = {
        let (lo, hi) = crate::geom::bounds(&verts).expect("non-empty mesh");
        let center = nalgebra::center(&lo, &hi);
        let diag = (hi - lo).norm();
        for p in points.iter_mut().chain(kps.iter_mut()) {
            *p = Point3::from((*p - center) / diag);
        }
        diag
    };

    Ok(GeneratedInstance {
        shape: PointCloud::new(points, Frame::Object),
        keypoints: KeypointSet::new(kps, Frame::Object),
        keypoint_parts: (0..n_keypoints).map(|j| assembly.keypoint_part(j)).collect(),
        diagonal,
    })
}

fn sample_triangles(tris: &[[Point3; 3]], n: usize, seed: u64) -> Vec<Point3> {
    let areas: Vec<f64> = tris.iter().map(|t| (t[1] - t[0]).cross(&(t[2] - t[0])).norm() / 2.0).collect();
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a3f_11e5);
    (0..n)
        .map(|_| {
            let r = rng.random_range(0.0..acc);
            let i = cdf.partition_point(|&c| c < r).min(tris.len() - 1);
            let t = &tris[i];
            let (mut a, mut b): (f64, f64) = (rng.random(), rng.random());
            if a + b > 1.0 {
                a = 1.0 - a;
                b = 1.0 - b;
            }
            t[0] + (t[1] - t[0]) * a + (t[2] - t[0]) * b
        })
        .collect()
}

/// Mean nearest-neighbour distance from each point of `a` to `b`.
pub fn one_sided_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let sum: f64 = a
        .iter()
        .map(|p| b.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .sum();
    sum / a.len() as f64
}

/// Average of both one-sided chamfer distances.
pub fn chamfer_distance(a: &[Point3], b: &[Point3]) -> f64 {
    0.5 * (one_sided_chamfer(a, b) + one_sided_chamfer(b, a))
}

/// Mean symmetric chamfer distance between each instance and the template.
pub fn variation_degree(instances: &[PointCloud], template: &PointCloud) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyInput("instances"));
    }
    let total: f64 = instances.iter().map(|pc| chamfer_distance(&pc.points, &template.points)).sum();
    Ok(total / instances.len() as f64)
}

/// Points of `pc` taken at an even stride so that at most `n` remain.
pub fn stride_subsample(pc: &PointCloud, n: usize) -> PointCloud {
    let step = pc.len().div_ceil(n.max(1)).max(1);
    PointCloud::new(pc.points.iter().step_by(step).copied().collect(), pc.frame)
}

/// Points per cloud used when measuring variation for calibration.
pub const VARIATION_SUBSAMPLE: usize = 1000;

/// Variation degree of a generated family (template at the median
/// parameters, `count` instances at `spread`) measured on stride-subsampled
/// clouds.
pub fn family_variation(family: Family, spread: f64, count: usize, seed: u64, n_surface: usize) -> Result<f64> {
    let template = generate_instance(&ShapeParams::median(family, seed), n_surface, MAX_KEYPOINTS.min(8))?;
    let t = stride_subsample(&template.shape, VARIATION_SUBSAMPLE);
    let shapes = (0..count)
        .map(|i| {
            let p = ShapeParams::sample(family, spread, dataset::instance_seed(seed, i));
            generate_instance(&p, n_surface, 8).map(|g| stride_subsample(&g.shape, VARIATION_SUBSAMPLE))
        })
        .collect::<Result<Vec<_>>>()?;
    variation_degree(&shapes, &t)
}

/// Bisection on the parameter spread so that [`family_variation`] of the
/// first `count` instances lands within `rel_tol` of `target`.
pub fn calibrate_spread(family: Family, target: f64, count: usize, seed: u64, n_surface: usize, rel_tol: f64) -> Result<f64> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Config(format!("variation target {target} must be positive")));
    }
    let at = |s: f64| family_variation(family, s, count, seed, n_surface);
    let max = at(1.0)?;
    if max < target * (1.0 - rel_tol) {
        return Err(Error::Config(format!("variation target {target} exceeds the family maximum {max:.5}")));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let v = at(mid)?;
        if (v - target).abs() <= rel_tol * target * 0.5 {
            return Ok(mid);
        }
        if v < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;

    #[test]
    fn spread_calibration_hits_target() {
        let lo = family_variation(Family::Lamp, 0.2, 6, 3, 1500).unwrap();
        let hi = family_variation(Family::Lamp, 0.9, 6, 3, 1500).unwrap();
        assert!(hi > lo);
        let target = 0.5 * (lo + hi);
        let s = calibrate_spread(Family::Lamp, target, 6, 3, 1500, 0.1).unwrap();
        let got = family_variation(Family::Lamp, s, 6, 3, 1500).unwrap();
        assert!((got - target).abs() <= 0.1 * target, "{got} vs {target}");
        assert!(matches!(calibrate_spread(Family::Lamp, 10.0, 6, 3, 1500, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let p = ShapeParams::sample(Family::Lamp, 0.7, 42);
        let a = generate_instance(&p, 2000, 32).unwrap();
        let b = generate_instance(&p, 2000, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.keypoints.len(), DEFAULT_KEYPOINTS);
        a.keypoints.validate().unwrap();
    }

    #[test]
    fn shapes_fit_unit_cube() {
        for f in Family::ALL {
            for seed in 0..5 {
                let g = generate_instance(&ShapeParams::sample(f, 1.0, seed), 3000, 64).unwrap();
                assert!(g.shape.points.iter().all(|p| p.iter().all(|v| v.abs() <= 0.5 + 1e-9)));
                g.keypoints.validate().unwrap();
                assert!(g.diagonal > 0.0);
            }
        }
    }

    #[test]
    fn keypoints_keep_their_parts() {
        for f in Family::ALL {
            let a = generate_instance(&ShapeParams::sample(f, 1.0, 1), 100, 64).unwrap();
            let b = generate_instance(&ShapeParams::sample(f, 1.0, 2), 100, 64).unwrap();
            assert_eq!(a.keypoint_parts, b.keypoint_parts);
            let parts: std::collections::HashSet<_> = a.keypoint_parts.iter().collect();
            assert!(parts.len() >= 2);
        }
    }

    #[test]
    fn lamp_stem_landmark_follows_closed_form() {
        let base = ShapeParams::median(Family::Lamp, 3);
        let doubled = base.clone().with("stem_height", 2.0 * base.get("stem_height").unwrap());
        // Keypoint 4 sits on ring 4: the stem at u = 0.8.
        let (ring, _) = landmark_slot(4);
        assert_eq!(ring, 4);
        for params in [&base, &doubled] {
            let g = generate_instance(params, 500, 32).unwrap();
            assert_eq!(g.keypoint_parts[4], "stem");
            let total = lamp_total_height(&params.values);
            let expected = (lamp_stem_height_at(&params.values, 0.8) - total / 2.0) / g.diagonal;
            assert!((g.keypoints.keypoints[4].z - expected).abs() < 1e-12);
        }
        let z_base = generate_instance(&base, 10, 32).unwrap().keypoints.keypoints[4].z;
        let z_long = generate_instance(&doubled, 10, 32).unwrap().keypoints.keypoints[4].z;
        assert!(z_long > z_base);
    }

    #[test]
    fn variation_degree_zero_for_template() {
        let t = generate_instance(&ShapeParams::median(Family::Box, 0), 500, 8).unwrap().shape;
        assert_eq!(variation_degree(std::slice::from_ref(&t), &t).unwrap(), 0.0);
        assert!(variation_degree(&[], &t).is_err());
    }

    #[test]
    fn variation_degree_of_offset_patch() {
        // A dense patch in the y–z plane moved along its normal by δ.
        let n = 60;
        let patch: Vec<Point3> = (0..n * n)
            .map(|i| Point3::new(0.0, (i % n) as f64 / n as f64, (i / n) as f64 / n as f64))
            .collect();
        let delta = 0.03;
        let moved: Vec<Point3> = patch.iter().map(|p| p + Vec3::new(delta, 0.0, 0.0)).collect();
        let v = variation_degree(&[PointCloud::new(moved, Frame::Object)], &PointCloud::new(patch, Frame::Object))
            .unwrap();
        assert!((v - delta).abs() <= 0.05 * delta, "{v}");
    }

    #[test]
    fn lamp_variation_grows_with_spread() {
        let template = generate_instance(&ShapeParams::median(Family::Lamp, 99), 600, 32).unwrap().shape;
        let degree = |spread: f64| {
            let inst: Vec<PointCloud> = (0..6)
                .map(|s| generate_instance(&ShapeParams::sample(Family::Lamp, spread, 1000 + s), 600, 32).unwrap().shape)
                .collect();
            variation_degree(&inst, &template).unwrap()
        };
        let d: Vec<f64> = [0.2, 0.5, 1.0].iter().map(|&s| degree(s)).collect();
        assert!(d[0] < d[1] && d[1] < d[2], "{d:?}");
    }
}
