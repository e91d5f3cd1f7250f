//! Three-dimensional thin-plate-spline warps.
//!
//! `Φ(x) = c + bᵀx + wᵀ s(x)` with `s_j(x) = σ(‖x − center_j‖)` and the
//! kernel `σ(r) = r² log r`. The radial weights satisfy the side conditions
//! `1ᵀw = 0` and `Cᵀw = 0`, which keeps the bending energy finite and makes
//! the warp reproduce affine maps exactly.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Frame, KeypointSet, Point3, PointCloud};

/// Regularization used when building labels (conditioning only).
pub const DEFAULT_LAMBDA: f64 = 1e-8;

/// Relative singular-value floor for the affine block.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelCenters {
    /// Kernels at the keypoints the warp is evaluated on during fitting.
    #[default]
    Source,
    /// Kernels at the destination keypoints.
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpsWarp {
    pub c: Vector3<f64>,
    /// Row `i`, column `d`: contribution of input axis `i` to output axis `d`.
    pub b: Matrix3<f64>,
    /// `m × 3` radial weights.
    pub w: DMatrix<f64>,
    pub centers: KeypointSet,
}

pub fn tps_kernel(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

impl TpsWarp {
    pub fn identity(centers: KeypointSet) -> Self {
        let m = centers.len();
        Self { c: Vector3::zeros(), b: Matrix3::identity(), w: DMatrix::zeros(m, 3), centers }
    }

    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }

    pub fn warp(&self, x: &Point3) -> Point3 {
        let mut out = self.c + self.b.transpose() * x.coords;
        for (j, k) in self.centers.keypoints.iter().enumerate() {
            let s = tps_kernel((x - k).norm());
            if s != 0.0 {
                out[0] += self.w[(j, 0)] * s;
                out[1] += self.w[(j, 1)] * s;
                out[2] += self.w[(j, 2)] * s;
            }
        }
        Point3::from(out)
    }

    /// `J[(d, i)] = ∂Φ_d / ∂x_i`.
    pub fn jacobian(&self, x: &Point3) -> Matrix3<f64> {
        let mut j = self.b.transpose();
        for (n, k) in self.centers.keypoints.iter().enumerate() {
            let d = x - k;
            let r = d.norm();
            if r > 0.0 {
                let g = d * (2.0 * r.ln() + 1.0);
                for o in 0..3 {
                    for i in 0..3 {
                        j[(o, i)] += self.w[(n, o)] * g[i];
                    }
                }
            }
        }
        j
    }

    /// Solves `Φ(x) = y` by damped Newton iteration from `init`.
    pub fn inverse(&self, y: &Point3, init: &Point3) -> Result<Point3> {
        let mut x = *init;
        let mut err = (self.warp(&x) - y).norm();
        for _ in 0..100 {
            if err < 1e-12 {
                return Ok(x);
            }
            let r = self.warp(&x) - y;
            let Some(jinv) = self.jacobian(&x).try_inverse() else {
                return Err(Error::SingularSystem("warp jacobian is singular".into()));
            };
            let dx = jinv * r;
            let mut t = 1.0;
            loop {
                let cand = x - dx * t;
                let e = (self.warp(&cand) - y).norm();
                if e < err || t < 1e-6 {
                    x = cand;
                    err = e;
                    break;
                }
                t *= 0.5;
            }
        }
        if err < 1e-9 {
            Ok(x)
        } else {
            Err(Error::SingularSystem(format!("warp inversion stalled at residual {err:e}")))
        }
    }

    pub fn warp_cloud(&self, pc: &PointCloud) -> PointCloud {
        PointCloud::new(pc.points.iter().map(|p| self.warp(p)).collect(), Frame::Socs)
    }

    /// Largest absolute entry of `1ᵀw` and `Cᵀw`.
    pub fn side_condition_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for d in 0..3 {
            let mut sum = 0.0;
            let mut moment = Vector3::zeros();
            for (j, k) in self.centers.keypoints.iter().enumerate() {
                sum += self.w[(j, d)];
                moment += k.coords * self.w[(j, d)];
            }
            worst = worst.max(sum.abs()).max(moment.amax());
        }
        worst
    }

    pub fn max_residual(&self, source: &KeypointSet, target: &KeypointSet) -> f64 {
        source
            .keypoints
            .iter()
            .zip(&target.keypoints)
            .map(|(s, t)| (self.warp(s) - t).norm())
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> TpsWarpJson {
        TpsWarpJson {
            c: self.c.into(),
            b: std::array::from_fn(|i| std::array::from_fn(|d| self.b[(i, d)])),
            w: (0..self.w.nrows()).map(|j| [self.w[(j, 0)], self.w[(j, 1)], self.w[(j, 2)]]).collect(),
            centers: self.centers.keypoints.iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }

    pub fn from_json(j: &TpsWarpJson) -> Result<Self> {
        if j.w.len() != j.centers.len() {
            return Err(Error::DimensionMismatch { expected: j.centers.len(), got: j.w.len() });
        }
        let m = j.w.len();
        Ok(Self {
            c: Vector3::from(j.c),
            b: Matrix3::from_fn(|i, d| j.b[i][d]),
            w: DMatrix::from_fn(m, 3, |r, d| j.w[r][d]),
            centers: KeypointSet::new(j.centers.iter().map(|p| Point3::from(*p)).collect(), Frame::Object),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsWarpJson {
    pub c: [f64; 3],
    pub b: [[f64; 3]; 3],
    pub w: Vec<[f64; 3]>,
    pub centers: Vec<[f64; 3]>,
}

pub fn warp(phi: &TpsWarp, x: &Point3) -> Point3 {
    phi.warp(x)
}

pub fn warp_cloud(phi: &TpsWarp, pc: &PointCloud) -> PointCloud {
    phi.warp_cloud(pc)
}

/// Fits the warp taking `source[j]` to `target[j]`, kernels at the source keypoints.
pub fn fit_tps(source: &KeypointSet, target: &KeypointSet, lambda: f64) -> Result<TpsWarp> {
    fit_tps_with(source, target, lambda, KernelCenters::Source)
}

pub fn fit_tps_with(
    source: &KeypointSet,
    target: &KeypointSet,
    lambda: f64,
    centers: KernelCenters,
) -> Result<TpsWarp> {
    let m = source.len();
    if target.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: target.len() });
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("regularization must be finite and >= 0, got {lambda}")));
    }
    source.validate()?;
    target.validate()?;

    let kernel_pts = match centers {
        KernelCenters::Source => &source.keypoints,
        KernelCenters::Target => &target.keypoints,
    };
    let affine_src = affine_block(&source.keypoints);
    check_rank(&affine_src, "source keypoints are coplanar or degenerate")?;
    let affine_ctr = affine_block(kernel_pts);
    if centers == KernelCenters::Target {
        check_rank(&affine_ctr, "kernel centers are coplanar or degenerate")?;
    }

    // [ K + λI   P_src ] [ w ]   [ Y ]
    // [ P_ctrᵀ   0     ] [ a ] = [ 0 ]
    let n = m + 4;
    let mut sys = DMatrix::<f64>::zeros(n, n);
    for i in 0..m {
        for j in 0..m {
            sys[(i, j)] = tps_kernel((source.keypoints[i] - kernel_pts[j]).norm());
        }
        sys[(i, i)] += lambda;
        for a in 0..4 {
            sys[(i, m + a)] = affine_src[(i, a)];
            sys[(m + a, i)] = affine_ctr[(i, a)];
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(n, 3);
    for (i, t) in target.keypoints.iter().enumerate() {
        for d in 0..3 {
            rhs[(i, d)] = t[d];
        }
    }

    let lu = sys.lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("bordered TPS system is not invertible".into()))?;
    if !sol.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularSystem("non-finite TPS solution".into()));
    }

    let w = sol.rows(0, m).into_owned();
    let c = Vector3::new(sol[(m, 0)], sol[(m, 1)], sol[(m, 2)]);
    let b = Matrix3::from_fn(|i, d| sol[(m + 1 + i, d)]);
    let centers = KeypointSet::new(kernel_pts.clone(), source.frame);
    Ok(TpsWarp { c, b, w, centers })
}

fn affine_block(points: &[Point3]) -> DMatrix<f64> {
    DMatrix::from_fn(points.len(), 4, |i, a| if a == 0 { 1.0 } else { points[i][a - 1] })
}

fn check_rank(block: &DMatrix<f64>, what: &str) -> Result<()> {
    let sv = block.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min < RANK_TOL * max {
        return Err(Error::SingularSystem(format!("{what} (σ_min/σ_max = {:e})", min / max)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jacobian_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let src = random_keypoints(&mut rng, 16);
        let dst = KeypointSet::new(
            src.keypoints.iter().map(|p| p + Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05))).collect(),
            Frame::Socs,
        );
        let phi = fit_tps(&src, &dst, 0.0).unwrap();
        for _ in 0..20 {
            let x = Point3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
            let j = phi.jacobian(&x);
            let h = 1e-6;
            for i in 0..3 {
                let mut e = Vector3::zeros();
                e[i] = h;
                let fd = (phi.warp(&(x + e)) - phi.warp(&(x - e))) / (2.0 * h);
                for o in 0..3 {
                    assert!((fd[o] - j[(o, i)]).abs() < 1e-6, "d{o}/d{i}: {} vs {}", fd[o], j[(o, i)]);
                }
            }
            let y = phi.warp(&x);
            let back = phi.inverse(&y, &Point3::origin()).unwrap();
            assert!((back - x).norm() < 1e-9);
        }
    }

    fn random_keypoints(rng: &mut ChaCha8Rng, m: usize) -> KeypointSet {
        KeypointSet::new(
            (0..m)
                .map(|_| Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
                .collect(),
            Frame::Object,
        )
    }

    fn perturbed(rng: &mut ChaCha8Rng, k: &KeypointSet, amp: f64) -> KeypointSet {
        KeypointSet::new(
            k.keypoints
                .iter()
                .map(|p| p + nalgebra::Vector3::from_fn(|_, _| rng.random_range(-amp..amp)))
                .collect(),
            Frame::Socs,
        )
    }

    #[test]
    fn kernel_values() {
        assert_eq!(tps_kernel(0.0), 0.0);
        assert_eq!(tps_kernel(1.0), 0.0);
        let e = std::f64::consts::E;
        assert!((tps_kernel(e) - e * e).abs() < 1e-12);
    }

    #[test]
    fn identity_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = random_keypoints(&mut rng, 8);
        let phi = fit_tps(&src, &src, 0.0).unwrap();
        assert!(phi.c.amax() < 1e-8);
        assert!((phi.b - Matrix3::identity()).amax() < 1e-8);
        assert!(phi.w.amax() < 1e-8);
        let x = Point3::new(0.3, -2.0, 0.7);
        assert!((phi.warp(&x) - x).norm() < 1e-8);
    }

    #[test]
    fn translation_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_keypoints(&mut rng, 8);
        let t = Vector3::new(0.1, -0.4, 2.0);
        let dst = KeypointSet::new(src.keypoints.iter().map(|p| p + t).collect(), Frame::Socs);
        let phi = fit_tps(&src, &dst, 0.0).unwrap();
        assert!((phi.c - t).amax() < 1e-8);
        assert!((phi.b - Matrix3::identity()).amax() < 1e-8);
        assert!(phi.w.amax() < 1e-8);
    }

    #[test]
    fn interpolates_random_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = random_keypoints(&mut rng, 16);
        let dst = random_keypoints(&mut rng, 16);
        let phi = fit_tps(&src, &dst, 0.0).unwrap();
        assert!(phi.max_residual(&src, &dst) <= 1e-8);
        assert!(phi.side_condition_residual() <= 1e-8);
        let cloud = PointCloud::new(src.keypoints.clone(), Frame::Object);
        let warped = warp_cloud(&phi, &cloud);
        for (a, b) in warped.points.iter().zip(&dst.keypoints) {
            assert!((a - b).norm() <= 1e-8);
        }
    }

    #[test]
    fn reproduces_affine_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = random_keypoints(&mut rng, 12);
        let a = Matrix3::new(1.2, 0.1, -0.3, 0.0, 0.8, 0.2, 0.4, -0.1, 1.5);
        let t = Vector3::new(0.2, 0.0, -0.1);
        let affine = |p: &Point3| Point3::from(a * p.coords + t);
        let dst = KeypointSet::new(src.keypoints.iter().map(affine).collect(), Frame::Socs);
        let phi = fit_tps(&src, &dst, 0.0).unwrap();
        assert!(phi.w.amax() <= 1e-6);
        for _ in 0..100 {
            let x = Point3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            assert!((phi.warp(&x) - affine(&x)).norm() <= 1e-6);
        }
    }

    #[test]
    fn batched_warp_matches_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = random_keypoints(&mut rng, 10);
        let dst = perturbed(&mut rng, &src, 0.1);
        let phi = fit_tps(&src, &dst, 0.0).unwrap();
        let cloud = PointCloud::new(random_keypoints(&mut rng, 1000).keypoints, Frame::Object);
        let batch = phi.warp_cloud(&cloud);
        assert_eq!(batch.len(), 1000);
        for (p, q) in cloud.points.iter().zip(&batch.points) {
            assert_eq!(phi.warp(p), *q);
        }
        let single = PointCloud::new(vec![cloud.points[0]], Frame::Object);
        assert_eq!(phi.warp_cloud(&single).points[0], phi.warp(&cloud.points[0]));
    }

    #[test]
    fn regularization_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = random_keypoints(&mut rng, 20);
        let dst = perturbed(&mut rng, &src, 0.2);
        let residual = |lambda: f64| {
            let phi = fit_tps(&src, &dst, lambda).unwrap();
            src.keypoints
                .iter()
                .zip(&dst.keypoints)
                .map(|(s, t)| (phi.warp(s) - t).norm_squared())
                .sum::<f64>()
                .sqrt()
        };
        let r: Vec<f64> = [0.0, 1e-4, 1e-2, 1.0].iter().map(|&l| residual(l)).collect();
        assert!(r[0] < 1e-8);
        for pair in r.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-12, "{r:?}");
        }
        assert!(r[3] > r[1]);
    }

    #[test]
    fn coplanar_sources_are_rejected() {
        let src = KeypointSet::new(
            (0..6).map(|i| Point3::new(i as f64 * 0.1, (i * i) as f64 * 0.05, 0.0)).collect(),
            Frame::Object,
        );
        let err = fit_tps(&src, &src, 0.0).unwrap_err();
        assert!(matches!(err, Error::SingularSystem(_)), "{err}");
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_keypoints(&mut rng, 8);
        let b = random_keypoints(&mut rng, 9);
        assert!(matches!(fit_tps(&a, &b, 0.0), Err(Error::DimensionMismatch { expected: 8, got: 9 })));
    }

    #[test]
    fn target_centered_variant_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let src = random_keypoints(&mut rng, 16);
        let dst = perturbed(&mut rng, &src, 0.05);
        let phi = fit_tps_with(&src, &dst, 0.0, KernelCenters::Target).unwrap();
        assert_eq!(phi.centers.keypoints, dst.keypoints);
        assert!(phi.max_residual(&src, &dst) <= 1e-8);
        assert!(phi.side_condition_residual() <= 1e-8);
    }

    #[test]
    fn json_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = random_keypoints(&mut rng, 8);
        let dst = perturbed(&mut rng, &src, 0.1);
        let phi = fit_tps(&src, &dst, 0.0).unwrap();
        let text = serde_json::to_string(&phi.to_json()).unwrap();
        let back = TpsWarp::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        let x = Point3::new(0.1, 0.2, 0.3);
        assert_eq!(back.warp(&x), phi.warp(&x));
    }
}
