//! Fixtures shared by the benchmarks.

use nalgebra::Vector3;
use socs::geom::{AnisoSimilarity, KeypointSet, Point3, RigidTransform};
use socs::posefit::CorrespondenceSet;
use socs::synth::{generate_instance, Family, GeneratedInstance, ShapeParams};

pub fn lamp(seed: u64, surface_points: usize, keypoints: usize) -> GeneratedInstance {
    generate_instance(&ShapeParams::sample(Family::Lamp, 0.5, seed), surface_points, keypoints).expect("lamp generates")
}

/// Keypoints of two different lamp instances, as a TPS fitting problem.
pub fn keypoint_pair(m: usize) -> (KeypointSet, KeypointSet) {
    (lamp(1, 500, m).keypoints, lamp(2, 500, m).keypoints)
}

/// Noiseless correspondences under a fixed anisotropic similarity.
pub fn correspondences(n: usize) -> (CorrespondenceSet, AnisoSimilarity) {
    let t = AnisoSimilarity::new(
        RigidTransform::from_axis_angle(&Vector3::new(0.3, -1.0, 0.5).normalize(), 0.8, Vector3::new(0.1, -0.2, 1.5)),
        Vector3::new(0.2, 0.35, 0.15),
    );
    let socs: Vec<Point3> = (0..n)
        .map(|i| {
            let f = i as f64;
            Point3::new((f * 0.61).sin() * 0.5, (f * 1.37).cos() * 0.5, (f * 0.23).sin() * 0.5)
        })
        .collect();
    let cam = socs.iter().map(|p| t.apply(p)).collect();
    (CorrespondenceSet::new(socs, cam), t)
}
