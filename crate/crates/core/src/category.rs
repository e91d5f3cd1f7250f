//! Category coordinate spaces: the template every instance is warped onto,
//! per-instance records, dense labelling of arbitrary query points and the
//! per-axis classification-bin codec.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{bounds, AnisoSimilarity, Frame, KeypointSet, Point3, PointCloud, Vec3};
use crate::tps::{fit_tps, TpsWarp, DEFAULT_LAMBDA};

/// Which canonical space labels are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSpace {
    /// Keypoint-guided non-rigid warp onto the template.
    #[default]
    Socs,
    /// Rigid, isotropically normalized object coordinates (identity warp).
    Nocs,
}

impl std::str::FromStr for LabelSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "socs" => Ok(LabelSpace::Socs),
            "nocs" => Ok(LabelSpace::Nocs),
            other => Err(Error::Config(format!("unknown label space {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryTemplate {
    pub name: String,
    pub mean_shape: PointCloud,
    pub template_keypoints: KeypointSet,
    /// Bounding-box diagonal of the largest instance, meters.
    pub category_diagonal: f64,
}

impl CategoryTemplate {
    pub fn validate(&self) -> Result<()> {
        self.mean_shape.validate()?;
        self.template_keypoints.validate()?;
        if !(self.category_diagonal > 0.0 && self.category_diagonal.is_finite()) {
            return Err(Error::InvalidParams(format!("category diagonal {}", self.category_diagonal)));
        }
        let tol = 1e-9;
        if self.mean_shape.points.iter().any(|p| p.iter().any(|v| v.abs() > 0.5 + tol)) {
            return Err(Error::InvalidParams("mean shape leaves the unit cube".into()));
        }
        let (lo, hi) = self.mean_shape.bounds().expect("validated non-empty");
        let pad = (hi - lo) * 0.05;
        let inside = |p: &Point3| (0..3).all(|i| p[i] >= lo[i] - pad[i] - tol && p[i] <= hi[i] + pad[i] + tol);
        if !self.template_keypoints.keypoints.iter().all(inside) {
            return Err(Error::InvalidParams("template keypoints outside the inflated mean-shape box".into()));
        }
        Ok(())
    }

    /// Center and half extents of the template's axis-aligned box.
    pub fn canonical_box(&self) -> (Point3, nalgebra::Vector3<f64>) {
        let (lo, hi) = bounds(&self.mean_shape.points).unwrap_or((Point3::origin(), Point3::origin()));
        (nalgebra::center(&lo, &hi), (hi - lo) / 2.0)
    }
}

/// One object instance of a category together with its warp into the
/// canonical space and its pose (canonical/object → camera).
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub shape: PointCloud,
    pub keypoints: KeypointSet,
    pub warp: TpsWarp,
    pub gt_pose: AnisoSimilarity,
}

impl InstanceRecord {
    pub const INTERPOLATION_TOL: f64 = 1e-6;

    pub fn new(
        shape: PointCloud,
        keypoints: KeypointSet,
        template: &CategoryTemplate,
        space: LabelSpace,
        gt_pose: AnisoSimilarity,
    ) -> Result<Self> {
        let warp = match space {
            LabelSpace::Socs => build_instance_warp(&keypoints, template)?,
            LabelSpace::Nocs => TpsWarp::identity(keypoints.clone()),
        };
        Ok(Self { shape, keypoints, warp, gt_pose })
    }

    pub fn with_pose(&self, gt_pose: AnisoSimilarity) -> Self {
        Self { gt_pose, ..self.clone() }
    }

    /// Worst keypoint residual of the warp against `template`.
    pub fn warp_residual(&self, template: &CategoryTemplate) -> f64 {
        self.warp.max_residual(&self.keypoints, &template.template_keypoints)
    }
}

pub fn build_instance_warp(instance_kps: &KeypointSet, template: &CategoryTemplate) -> Result<TpsWarp> {
    if instance_kps.len() != template.template_keypoints.len() {
        return Err(Error::DimensionMismatch {
            expected: template.template_keypoints.len(),
            got: instance_kps.len(),
        });
    }
    fit_tps(instance_kps, &template.template_keypoints, DEFAULT_LAMBDA)
}

/// Uniform per-axis binning of canonical coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinCodec {
    pub num_bins: usize,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Default for BinCodec {
    fn default() -> Self {
        Self::new(128)
    }
}

impl BinCodec {
    pub fn new(num_bins: usize) -> Self {
        Self { num_bins, lo: [-0.5; 3], hi: [0.5; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {}", self.num_bins)));
        }
        if (0..3).any(|a| !(self.lo[a] < self.hi[a])) {
            return Err(Error::Config("bin range must satisfy lo < hi".into()));
        }
        Ok(())
    }

    pub fn width(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.num_bins as f64
    }

    pub fn clamp(&self, p: &Point3) -> Point3 {
        Point3::from(Vec3::from_fn(|a, _| p[a].clamp(self.lo[a], self.hi[a])))
    }

    pub fn encode_axis(&self, axis: usize, v: f64) -> usize {
        let t = ((v - self.lo[axis]) / self.width(axis)).floor();
        if t.is_nan() || t < 0.0 {
            0
        } else {
            (t as usize).min(self.num_bins - 1)
        }
    }

    pub fn encode(&self, p: &Point3) -> [usize; 3] {
        [self.encode_axis(0, p.x), self.encode_axis(1, p.y), self.encode_axis(2, p.z)]
    }

    pub fn decode_axis(&self, axis: usize, index: i64) -> Result<f64> {
        if index < 0 || index as usize >= self.num_bins {
            return Err(Error::InvalidBin { index, num_bins: self.num_bins });
        }
        Ok(self.lo[axis] + (index as f64 + 0.5) * self.width(axis))
    }

    pub fn decode(&self, bins: [usize; 3]) -> Result<Point3> {
        Ok(Point3::new(
            self.decode_axis(0, bins[0] as i64)?,
            self.decode_axis(1, bins[1] as i64)?,
            self.decode_axis(2, bins[2] as i64)?,
        ))
    }

    /// True when any axis sits in the first or last bin (where clamped labels land).
    pub fn on_boundary(&self, bins: &[usize; 3]) -> bool {
        bins.iter().any(|&b| b == 0 || b + 1 == self.num_bins)
    }
}

pub fn encode(coord: &Point3, codec: &BinCodec) -> [usize; 3] {
    codec.encode(coord)
}

pub fn decode(bins: [usize; 3], codec: &BinCodec) -> Result<Point3> {
    codec.decode(bins)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocsLabel {
    pub coord: Point3,
    pub bins: [usize; 3],
}

/// Canonical-space label of a camera-frame point: undo the instance pose,
/// warp, clamp to the codec range, bin.
pub fn label_point(x_cam: &Point3, rec: &InstanceRecord, codec: &BinCodec) -> SocsLabel {
    label_point_with(x_cam, &rec.warp, &rec.gt_pose, codec)
}

/// [`label_point`] with the warp and pose given separately.
pub fn label_point_with(x_cam: &Point3, warp: &TpsWarp, pose: &AnisoSimilarity, codec: &BinCodec) -> SocsLabel {
    let coord = codec.clamp(&warp.warp(&pose.inverse_apply(x_cam)));
    SocsLabel { coord, bins: codec.encode(&coord) }
}

pub fn label_cloud(points: &[Point3], rec: &InstanceRecord, codec: &BinCodec) -> Vec<SocsLabel> {
    points.iter().map(|p| label_point(p, rec, codec)).collect()
}

/// Normalizes a cloud (and keypoints) into the unit cube: bounding-box center
/// to the origin, divide by the bounding-box diagonal. Returns the diagonal.
pub fn normalize_unit_cube(points: &mut [Point3], keypoints: &mut [Point3]) -> f64 {
    let Some((lo, hi)) = bounds(points) else { return 0.0 };
    let center = nalgebra::center(&lo, &hi);
    let diag = (hi - lo).norm();
    for p in points.iter_mut().chain(keypoints.iter_mut()) {
        *p = Point3::from((*p - center) / diag);
    }
    diag
}

pub fn object_cloud(points: Vec<Point3>) -> PointCloud {
    PointCloud::new(points, Frame::Object)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{random_rigid, RigidTransform, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn template(seed: u64) -> CategoryTemplate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape: Vec<Point3> = (0..500)
            .map(|_| Point3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.3..0.3), rng.random_range(-0.45..0.45)))
            .collect();
        let kps: Vec<Point3> = (0..12)
            .map(|_| Point3::new(rng.random_range(-0.35..0.35), rng.random_range(-0.25..0.25), rng.random_range(-0.4..0.4)))
            .collect();
        CategoryTemplate {
            name: "test".into(),
            mean_shape: PointCloud::new(shape, Frame::Object),
            template_keypoints: KeypointSet::new(kps, Frame::Socs),
            category_diagonal: 0.5,
        }
    }

    #[test]
    fn template_is_valid() {
        template(1).validate().unwrap();
    }

    #[test]
    fn warp_of_template_is_identity() {
        let t = template(2);
        let phi = build_instance_warp(&t.template_keypoints, &t).unwrap();
        let x = Point3::new(0.1, 0.2, -0.3);
        assert!((phi.warp(&x) - x).norm() < 1e-6);
    }

    #[test]
    fn scaled_instance_warp_halves_coordinates() {
        let t = template(3);
        let kps = KeypointSet::new(t.template_keypoints.keypoints.iter().map(|p| p * 2.0).collect(), Frame::Object);
        let phi = build_instance_warp(&kps, &t).unwrap();
        for x in [Point3::new(0.3, 0.1, -0.2), Point3::new(-0.6, 0.4, 0.8)] {
            assert!((phi.warp(&x) - x / 2.0).norm() < 1e-6);
        }
    }

    #[test]
    fn codec_examples() {
        let c = BinCodec::new(128);
        assert_eq!(c.encode(&Point3::origin()), [64, 64, 64]);
        let c2 = BinCodec::new(2);
        let b = c2.encode(&Point3::new(-0.5, -0.5, -0.5));
        assert_eq!(b, [0, 0, 0]);
        assert_eq!(c2.decode(b).unwrap(), Point3::new(-0.25, -0.25, -0.25));
        assert_eq!(c.encode(&Point3::new(0.5, 7.0, -9.0)), [127, 127, 0]);
        assert!(matches!(c.decode_axis(0, 128), Err(Error::InvalidBin { index: 128, num_bins: 128 })));
        assert!(matches!(c.decode_axis(0, -1), Err(Error::InvalidBin { .. })));
        assert!(BinCodec::new(1).validate().is_err());
    }

    #[test]
    fn codec_roundtrip_bound() {
        let c = BinCodec::new(128);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bound = 1.0 / (2.0 * 128.0);
        for _ in 0..100_000 {
            let v = Point3::new(rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5));
            let bins = c.encode(&v);
            let back = c.decode(bins).unwrap();
            assert!((back - v).amax() <= bound + 1e-15);
            assert_eq!(c.encode(&back), bins);
        }
    }

    #[test]
    fn codec_is_monotone() {
        let c = BinCodec::new(37);
        let mut prev = 0;
        for i in 0..=2000 {
            let v = -0.6 + 1.2 * i as f64 / 2000.0;
            let b = c.encode_axis(1, v);
            assert!(b >= prev);
            prev = b;
        }
    }

    fn record(t: &CategoryTemplate, pose: AnisoSimilarity) -> InstanceRecord {
        let kps = KeypointSet::new(
            t.template_keypoints
                .keypoints
                .iter()
                .map(|p| Point3::new(p.x * 1.1, p.y * 0.9, p.z + 0.2 * p.z * p.z))
                .collect(),
            Frame::Object,
        );
        InstanceRecord::new(t.mean_shape.clone(), kps, t, LabelSpace::Socs, pose).unwrap()
    }

    #[test]
    fn labels_hit_template_keypoints() {
        let t = template(5);
        let pose = AnisoSimilarity::isotropic(random_rigid(9, 1.0), 0.4);
        let rec = record(&t, pose);
        assert!(rec.warp_residual(&t) < InstanceRecord::INTERPOLATION_TOL);
        let codec = BinCodec::default();
        for (k, ka) in rec.keypoints.keypoints.iter().zip(&t.template_keypoints.keypoints) {
            let l = label_point(&pose.apply(k), &rec, &codec);
            assert!((l.coord - ka).norm() < 1e-6);
        }
    }

    #[test]
    fn identity_pose_labels_are_warped_surface_points() {
        let t = template(6);
        let rec = record(&t, AnisoSimilarity::identity());
        let codec = BinCodec::default();
        let p = t.mean_shape.points[3];
        let l = label_point(&p, &rec, &codec);
        assert_eq!(l.coord, codec.clamp(&rec.warp.warp(&p)));
    }

    #[test]
    fn far_points_clamp_to_boundary() {
        let t = template(7);
        let rec = record(&t, AnisoSimilarity::isotropic(RigidTransform::identity(), 0.5));
        let codec = BinCodec::default();
        let far = Point3::new(2.0 * t.category_diagonal, 0.0, 0.0) + Vec3::new(10.0, 0.0, 0.0);
        let l = label_point(&far, &rec, &codec);
        assert_eq!(l.coord.x, 0.5);
        assert_eq!(l.bins[0], 127);
        assert!(codec.on_boundary(&l.bins));
    }

    #[test]
    fn labels_are_pose_invariant() {
        let t = template(8);
        let codec = BinCodec::default();
        let base = record(&t, AnisoSimilarity::identity());
        let p_obj = Point3::new(0.05, -0.1, 0.2);
        let reference = label_point(&p_obj, &base, &codec);
        for seed in 0..20 {
            let pose = AnisoSimilarity::new(random_rigid(seed, 2.0), Vec3::new(0.3, 0.5, 0.7));
            let rec = base.with_pose(pose);
            let l = label_point(&pose.apply(&p_obj), &rec, &codec);
            assert!((l.coord - reference.coord).norm() < 1e-9);
        }
    }

    #[test]
    fn nocs_records_use_identity_warp() {
        let t = template(9);
        let rec = InstanceRecord::new(
            t.mean_shape.clone(),
            t.template_keypoints.clone(),
            &t,
            LabelSpace::Nocs,
            AnisoSimilarity::identity(),
        )
        .unwrap();
        let x = Point3::new(0.3, 0.3, 0.3);
        assert_eq!(rec.warp.warp(&x), x);
    }
}
