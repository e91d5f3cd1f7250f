//! Geometric primitives: points, clouds, keypoints, rigid and anisotropic
//! similarity transforms, oriented boxes.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance used for structural invariant checks (orthonormality, distinctness).
pub const INVARIANT_TOL: f64 = 1e-9;

/// Compositions between forced re-orthonormalizations in [`compose_chain`].
pub const REORTHONORMALIZE_EVERY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Frame {
    #[default]
    Camera,
    Object,
    Socs,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame: Frame) -> Self {
        Self { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the solver precondition: non-empty and all coordinates finite.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyInput("point cloud"));
        }
        if !self.points.iter().all(is_finite) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(())
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }

    /// Axis-aligned bounds `(min, max)`; `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        bounds(&self.points)
    }

    pub fn transformed(&self, t: &RigidTransform, frame: Frame) -> PointCloud {
        PointCloud::new(self.points.iter().map(|p| t.apply(p)).collect(), frame)
    }
}

/// Ordered semantic keypoints. Index `j` in one set corresponds to index `j`
/// in every other set of the same category.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointSet {
    pub keypoints: Vec<Point3>,
    pub frame: Frame,
}

impl KeypointSet {
    pub const MIN_LEN: usize = 4;

    pub fn new(keypoints: Vec<Point3>, frame: Frame) -> Self {
        Self { keypoints, frame }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.keypoints.len();
        if m < Self::MIN_LEN {
            return Err(Error::TooFewKeypoints(m));
        }
        if !self.keypoints.iter().all(is_finite) {
            return Err(Error::NonFinite("keypoints"));
        }
        for i in 0..m {
            for j in (i + 1)..m {
                if (self.keypoints[i] - self.keypoints[j]).norm() <= INVARIANT_TOL {
                    return Err(Error::CoincidentKeypoints(i, j));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation: q.to_rotation_matrix().into_inner(), translation }
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vec3, angle: f64, translation: Vec3) -> Self {
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle);
        Self::from_quaternion(&q, translation)
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn validate(&self) -> Result<()> {
        let orth = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        let det = self.rotation.determinant();
        if !self.rotation.iter().all(|v| v.is_finite()) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rigid transform"));
        }
        if orth > INVARIANT_TOL || (det - 1.0).abs() > INVARIANT_TOL {
            return Err(Error::InvalidRotation { orthogonality: orth, determinant: det });
        }
        Ok(())
    }

    /// Projects the rotation back onto SO(3) (nearest rotation in Frobenius norm).
    pub fn reorthonormalized(&self) -> RigidTransform {
        RigidTransform { rotation: nearest_rotation(&self.rotation), translation: self.translation }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Composes transforms left to right (`ts[0] ∘ ts[1] ∘ ...`), projecting the
/// accumulated rotation back onto SO(3) every [`REORTHONORMALIZE_EVERY`] steps.
pub fn compose_chain<'a, I>(ts: I) -> RigidTransform
where
    I: IntoIterator<Item = &'a RigidTransform>,
{
    let mut acc = RigidTransform::identity();
    for (i, t) in ts.into_iter().enumerate() {
        acc = acc.compose(t);
        if (i + 1) % REORTHONORMALIZE_EVERY == 0 {
            acc = acc.reorthonormalized();
        }
    }
    acc
}

pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let d = (u * vt).determinant().signum();
    u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * vt
}

/// Rigid transform composed with per-axis scaling applied first, in the
/// canonical frame: `p ↦ R·diag(s)·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnisoSimilarity {
    pub rigid: RigidTransform,
    pub scale: Vec3,
}

impl Default for AnisoSimilarity {
    fn default() -> Self {
        Self::identity()
    }
}

impl AnisoSimilarity {
    pub fn new(rigid: RigidTransform, scale: Vec3) -> Self {
        Self { rigid, scale }
    }

    pub fn identity() -> Self {
        Self { rigid: RigidTransform::identity(), scale: Vec3::new(1.0, 1.0, 1.0) }
    }

    pub fn isotropic(rigid: RigidTransform, s: f64) -> Self {
        Self { rigid, scale: Vec3::new(s, s, s) }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rigid.rotation * p.coords.component_mul(&self.scale) + self.rigid.translation)
    }

    pub fn inverse_apply(&self, p: &Point3) -> Point3 {
        let local = self.rigid.rotation.transpose() * (p.coords - self.rigid.translation);
        Point3::from(local.component_div(&self.scale))
    }

    pub fn validate(&self) -> Result<()> {
        self.rigid.validate()?;
        if !self.scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::InvalidScale([self.scale.x, self.scale.y, self.scale.z]));
        }
        Ok(())
    }

    /// Composes a rigid transform on the left: `g ∘ self`, scale unchanged.
    pub fn premultiply(&self, g: &RigidTransform) -> AnisoSimilarity {
        AnisoSimilarity { rigid: g.compose(&self.rigid), scale: self.scale }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        self.rigid.to_homogeneous() * Matrix4::from_diagonal(&Vector4::new(self.scale.x, self.scale.y, self.scale.z, 1.0))
    }
}

pub fn apply_rigid(t: &RigidTransform, p: &Point3) -> Point3 {
    t.apply(p)
}

pub fn apply_aniso(a: &AnisoSimilarity, p: &Point3) -> Point3 {
    a.apply(p)
}

/// Uniformly random rotation (normalized 4D Gaussian quaternion) and a
/// translation uniform in `[-max_translation, max_translation]^3`.
pub fn random_rigid(seed: u64, max_translation: f64) -> RigidTransform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rigid_with(&mut rng, max_translation)
}

pub fn random_rigid_with<R: Rng + ?Sized>(rng: &mut R, max_translation: f64) -> RigidTransform {
    let q = random_unit_quaternion(rng);
    let translation = if max_translation > 0.0 {
        Vec3::from_fn(|_, _| rng.random_range(-max_translation..=max_translation))
    } else {
        Vec3::zeros()
    };
    RigidTransform::from_quaternion(&q, translation)
}

pub fn random_unit_quaternion<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion<f64> {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]));
        }
    }
}

/// Geodesic angle of a rotation matrix, radians in `[0, π]`.
pub fn rotation_angle(r: &Mat3) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Point3,
    pub half_extents: Vec3,
    pub rotation: Mat3,
}

impl OrientedBox {
    pub fn new(center: Point3, half_extents: Vec3, rotation: Mat3) -> Self {
        Self { center, half_extents, rotation }
    }

    pub fn axis_aligned(center: Point3, half_extents: Vec3) -> Self {
        Self { center, half_extents, rotation: Mat3::identity() }
    }

    /// Box obtained by mapping a canonical axis-aligned box through `pose`.
    pub fn from_pose(pose: &AnisoSimilarity, canonical_center: &Point3, canonical_half: &Vec3) -> Self {
        Self {
            center: pose.apply(canonical_center),
            half_extents: canonical_half.component_mul(&pose.scale),
            rotation: pose.rigid.rotation,
        }
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.x * self.half_extents.y * self.half_extents.z
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let local = self.rotation.transpose() * (p - self.center);
        (0..3).all(|i| local[i].abs() <= self.half_extents[i])
    }

    pub fn validate(&self) -> Result<()> {
        if !self.half_extents.iter().all(|h| h.is_finite() && *h > 0.0) {
            return Err(Error::InvalidScale([self.half_extents.x, self.half_extents.y, self.half_extents.z]));
        }
        RigidTransform::new(self.rotation, self.center.coords).validate()
    }
}

pub fn is_finite(p: &Point3) -> bool {
    p.x.is_finite() && p.y.is_finite() && p.z.is_finite()
}

pub fn centroid(points: &[Point3]) -> Point3 {
    if points.is_empty() {
        return Point3::origin();
    }
    let sum: Vec3 = points.iter().fold(Vec3::zeros(), |acc, p| acc + p.coords);
    Point3::from(sum / points.len() as f64)
}

pub fn bounds(points: &[Point3]) -> Option<(Point3, Point3)> {
    let first = points.first()?;
    let mut lo = *first;
    let mut hi = *first;
    for p in points {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    Some((lo, hi))
}

/// Serialized form `{"R": [[..];3], "t": [..], "s": [..]}`; `s` is omitted
/// for rigid transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformJson {
    #[serde(rename = "R")]
    pub r: [[f64; 3]; 3],
    pub t: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<[f64; 3]>,
}

impl From<&RigidTransform> for TransformJson {
    fn from(t: &RigidTransform) -> Self {
        Self { r: mat3_rows(&t.rotation), t: t.translation.into(), s: None }
    }
}

impl From<&AnisoSimilarity> for TransformJson {
    fn from(a: &AnisoSimilarity) -> Self {
        Self { r: mat3_rows(&a.rigid.rotation), t: a.rigid.translation.into(), s: Some(a.scale.into()) }
    }
}

impl TransformJson {
    pub fn to_rigid(&self) -> RigidTransform {
        RigidTransform::new(mat3_from_rows(&self.r), Vec3::from(self.t))
    }

    pub fn to_aniso(&self) -> AnisoSimilarity {
        let s = self.s.unwrap_or([1.0; 3]);
        AnisoSimilarity::new(self.to_rigid(), Vec3::from(s))
    }
}

pub fn mat3_rows(m: &Mat3) -> [[f64; 3]; 3] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

pub fn mat3_from_rows(rows: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::from_fn(|r, c| rows[r][c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_and_axis_rotation() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(apply_rigid(&RigidTransform::identity(), &p), p);
        let t = RigidTransform::from_axis_angle(&Vec3::z(), FRAC_PI_2, Vec3::zeros());
        let q = apply_rigid(&t, &Point3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(q, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn aniso_simple_cases() {
        let p = Point3::new(1.0, 1.0, 1.0);
        assert_eq!(apply_aniso(&AnisoSimilarity::identity(), &p), p);
        let a = AnisoSimilarity::new(RigidTransform::identity(), Vec3::new(2.0, 1.0, 1.0));
        assert_eq!(apply_aniso(&a, &p), Point3::new(2.0, 1.0, 1.0));
    }

    #[test]
    fn random_rigid_is_deterministic() {
        assert_eq!(random_rigid(7, 0.3), random_rigid(7, 0.3));
        assert_ne!(random_rigid(7, 0.3), random_rigid(8, 0.3));
        assert_eq!(random_rigid(11, 0.0).translation, Vec3::zeros());
        random_rigid(3, 1.0).validate().unwrap();
    }

    #[test]
    fn random_rotation_mean_angle_matches_haar_measure() {
        // Under the Haar measure the angle density is (1 - cos θ)/π on [0, π];
        // its mean is π/2 + 2/π radians ≈ 126.48°. Integrate numerically.
        let n = 200_000;
        let h = std::f64::consts::PI / n as f64;
        let oracle: f64 = (0..n)
            .map(|i| {
                let th = (i as f64 + 0.5) * h;
                th * (1.0 - th.cos()) / std::f64::consts::PI * h
            })
            .sum::<f64>()
            .to_degrees();
        assert!((oracle - 126.48).abs() < 0.01, "oracle {oracle}");
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 10_000;
        let mean = (0..draws)
            .map(|_| rotation_angle(&random_rigid_with(&mut rng, 1.0).rotation).to_degrees())
            .sum::<f64>()
            / draws as f64;
        assert!((mean - oracle).abs() < 2.0, "mean {mean} vs {oracle}");
    }

    #[test]
    fn chain_reorthonormalizes() {
        let step = RigidTransform::from_axis_angle(&Vec3::new(0.3, -0.2, 0.9), 0.0123, Vec3::new(1e-3, 0.0, 0.0));
        let steps = vec![step; 1000];
        let acc = compose_chain(steps.iter());
        acc.validate().unwrap();
    }

    #[test]
    fn transform_json_roundtrip() {
        let a = AnisoSimilarity::new(random_rigid(4, 1.0), Vec3::new(0.5, 1.5, 2.0));
        let s = serde_json::to_string(&TransformJson::from(&a)).unwrap();
        assert!(s.contains("\"R\"") && s.contains("\"s\""));
        let back: TransformJson = serde_json::from_str(&s).unwrap();
        assert_eq!(back.to_aniso(), a);
        let rigid_json = serde_json::to_value(TransformJson::from(&a.rigid)).unwrap();
        assert!(rigid_json.get("s").is_none());
    }

    #[test]
    fn keypoint_validation() {
        let pts = |v: &[[f64; 3]]| KeypointSet::new(v.iter().map(|a| Point3::from(*a)).collect(), Frame::Object);
        assert!(matches!(pts(&[[0.0; 3]; 3]).validate(), Err(Error::TooFewKeypoints(3))));
        let dup = pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(dup.validate(), Err(Error::CoincidentKeypoints(1, 3))));
    }

    #[test]
    fn box_contains() {
        let b = OrientedBox::new(
            Point3::new(1.0, 0.0, 0.0),
            Vec3::new(0.5, 0.1, 0.1),
            RigidTransform::from_axis_angle(&Vec3::z(), FRAC_PI_2, Vec3::zeros()).rotation,
        );
        assert!(b.contains(&Point3::new(1.0, 0.45, 0.0)));
        assert!(!b.contains(&Point3::new(1.45, 0.0, 0.0)));
    }

    fn arb_point() -> impl Strategy<Value = Point3> {
        (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn rigid_inverse_roundtrip(seed in any::<u64>(), p in arb_point()) {
            let t = random_rigid(seed, 5.0);
            let back = apply_rigid(&t.inverse(), &apply_rigid(&t, &p));
            prop_assert!((back - p).norm() <= 1e-12 * (1.0 + p.coords.norm()));
        }

        #[test]
        fn rigid_preserves_distances(seed in any::<u64>(), p in arb_point(), q in arb_point()) {
            let t = random_rigid(seed, 5.0);
            let d0 = (p - q).norm();
            let d1 = (t.apply(&p) - t.apply(&q)).norm();
            prop_assert!((d0 - d1).abs() <= 1e-12 * (1.0 + d0 * 10.0));
        }

        #[test]
        fn composition_is_associative(a in any::<u64>(), b in any::<u64>(), p in arb_point()) {
            let (t1, t2) = (random_rigid(a, 2.0), random_rigid(b, 2.0));
            let lhs = t1.compose(&t2).apply(&p);
            let rhs = t1.apply(&t2.apply(&p));
            prop_assert!((lhs - rhs).norm() <= 1e-12 * 100.0);
        }

        #[test]
        fn aniso_matches_homogeneous_product(
            seed in any::<u64>(), p in arb_point(),
            sx in 0.1..5.0f64, sy in 0.1..5.0f64, sz in 0.1..5.0f64,
        ) {
            let rigid = random_rigid(seed, 3.0);
            let a = AnisoSimilarity::new(rigid, Vec3::new(sx, sy, sz));
            // Independent route: T (4x4) times S (4x4) times homogeneous p.
            let mut t = Matrix4::<f64>::identity();
            for r in 0..3 {
                for c in 0..3 {
                    t[(r, c)] = rigid.rotation[(r, c)];
                }
                t[(r, 3)] = rigid.translation[r];
            }
            let s = Matrix4::from_diagonal(&Vector4::new(sx, sy, sz, 1.0));
            let h = t * s * Vector4::new(p.x, p.y, p.z, 1.0);
            let got = apply_aniso(&a, &p);
            prop_assert!((got.coords - h.xyz()).norm() <= 1e-12 * 100.0);
            prop_assert!((a.inverse_apply(&got) - p).norm() <= 1e-9);
        }

        #[test]
        fn equal_scales_reduce_to_similarity(seed in any::<u64>(), p in arb_point(), s in 0.1..5.0f64) {
            let rigid = random_rigid(seed, 3.0);
            let a = AnisoSimilarity::isotropic(rigid, s);
            let scalar = Point3::from(s * (rigid.rotation * p.coords) + rigid.translation);
            prop_assert!((a.apply(&p) - scalar).norm() <= 1e-12 * 100.0);
        }
    }
}
