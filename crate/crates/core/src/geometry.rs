//! Pinhole camera model, 3D lifting and cross-frame reprojection.
//!
//! Raster convention: pixel centers sit at integer coordinates with the origin
//! at the center of the top-left pixel. The principal point is the image
//! center `((W-1)/2, (H-1)/2)`. Image-plane coordinates are raster coordinates
//! shifted by the principal point and divided by half the long image side, so
//! a focal length `u` spans a horizontal field of view of `2 atan(1/u)` on a
//! landscape frame.
//!
//! Camera points live in a frame's K-applied camera space: a point `c` has
//! metric camera coordinates `K^-1 c` with `K = diag(u, u, 1)`.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

/// A 3D point in a frame's K-applied camera space.
pub type CameraPoint = Vector3<f64>;

/// Continuous raster coordinates of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    pub fn distance(self, other: PixelCoord) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Maps between raster coordinates and image-plane coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn principal_point(&self) -> PixelCoord {
        PixelCoord::new((self.width as f64 - 1.0) * 0.5, (self.height as f64 - 1.0) * 0.5)
    }

    /// Half of the long image side, in pixels.
    pub fn half_extent(&self) -> f64 {
        self.width.max(self.height) as f64 * 0.5
    }

    pub fn to_plane(&self, p: PixelCoord) -> Vector2<f64> {
        let c = self.principal_point();
        let h = self.half_extent();
        Vector2::new((p.x - c.x) / h, (p.y - c.y) / h)
    }

    pub fn to_raster(&self, v: &Vector2<f64>) -> PixelCoord {
        let c = self.principal_point();
        let h = self.half_extent();
        PixelCoord::new(v.x * h + c.x, v.y * h + c.y)
    }

    /// True for coordinates inside `[-0.5, W-0.5] x [-0.5, H-0.5]`.
    pub fn contains(&self, p: PixelCoord) -> bool {
        p.x.is_finite()
            && p.y.is_finite()
            && p.x >= -0.5
            && p.y >= -0.5
            && p.x <= self.width as f64 - 0.5
            && p.y <= self.height as f64 - 0.5
    }

    /// True inside the hull of pixel centers, `[0, W-1] x [0, H-1]`, where
    /// bilinear sampling interpolates rather than clamps.
    pub fn interior(&self, p: PixelCoord) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The four bilinear taps of a raster location: `(linear index, weight)`.
///
/// Returns `None` outside `[-0.5, W-0.5] x [-0.5, H-0.5]`; inside that band the
/// location is clamped to the outermost pixel centers.
pub(crate) fn bilinear_taps(width: usize, height: usize, p: PixelCoord) -> Option<[(usize, f64); 4]> {
    if width == 0 || height == 0 || !ImagePlane::new(width, height).contains(p) {
        return None;
    }
    let (x0, fx) = axis_tap(p.x, width);
    let (y0, fy) = axis_tap(p.y, height);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    Some([
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ])
}

fn axis_tap(v: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let v = v.clamp(0.0, (n - 1) as f64);
    let i0 = (v.floor() as usize).min(n - 2);
    (i0, v - i0 as f64)
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential map (Rodrigues), with a series expansion near zero.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < 1e-8 {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Rotation angle of an orthonormal matrix, in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // acos loses precision near zero; use the skew part there.
    let s = 0.5 * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    s.atan2(c)
}

/// Camera-to-world rigid transform: `world = rotation * camera + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant +1 (tolerance 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self { rotation, translation };
        if pose.orthonormality_error() > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput("rotation is not a proper orthonormal matrix".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        Ok(pose)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *q.to_rotation_matrix().matrix(),
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse_transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.translation)
    }

    /// Max-abs entry of `R^T R - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    /// Local update: `R <- R exp([dw]x)`, `t <- t + dt` with `delta = (dw, dt)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let dw = Vector3::new(delta[0], delta[1], delta[2]);
        let dt = Vector3::new(delta[3], delta[4], delta[5]);
        let mut out = Pose {
            rotation: self.rotation * so3_exp(&dw),
            translation: self.translation + dt,
        };
        if out.orthonormality_error() > 1e-12 {
            out.orthonormalize();
        }
        out
    }

    /// Projects the rotation back onto SO(3).
    pub fn orthonormalize(&mut self) {
        let svd = self.rotation.svd(true, true);
        let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
            return;
        };
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        self.rotation = r;
    }
}

/// Pinhole intrinsics: only the focal length is free; the principal point is
/// the image center and is handled by [`ImagePlane`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub focal: f64,
}

impl Intrinsics {
    pub fn new(focal: f64) -> Result<Self> {
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::InvalidInput(format!("focal must be positive, got {focal}")));
        }
        Ok(Self { focal })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(self.focal, self.focal, 1.0))
    }

    /// `K c`.
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(self.focal * x.x, self.focal * x.y, x.z)
    }

    /// `K^-1 c`.
    pub fn unapply(&self, c: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(c.x / self.focal, c.y / self.focal, c.z)
    }
}

/// Per-pixel positive depth raster of one frame (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub frame: usize,
    pub values: Vec<f64>,
}

impl DepthMap {
    /// Builds a depth map, rejecting non-positive or non-finite values.
    pub fn new(width: usize, height: usize, frame: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "depth raster has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "depth at pixel ({}, {}) is {}, expected a positive finite value",
                i % width.max(1),
                i / width.max(1),
                values[i]
            )));
        }
        Ok(Self {
            width,
            height,
            frame,
            values,
        })
    }

    pub fn constant(width: usize, height: usize, frame: usize, value: f64) -> Result<Self> {
        Self::new(width, height, frame, vec![value; width * height])
    }

    pub fn plane(&self) -> ImagePlane {
        ImagePlane::new(self.width, self.height)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Samples depth at a sub-pixel location by bilinear interpolation of
    /// inverse depth. Inverse depth is affine in image coordinates on planar
    /// surfaces, so this is exact inside planar regions.
    pub fn sample(&self, p: PixelCoord) -> Option<f64> {
        let taps = bilinear_taps(self.width, self.height, p)?;
        let mut inv = 0.0;
        for (i, w) in taps {
            if w != 0.0 {
                inv += w / self.values[i];
            }
        }
        (inv > 0.0).then(|| 1.0 / inv)
    }

    pub fn median(&self) -> f64 {
        median(&self.values)
    }
}

/// Median of a slice (mean of the two middle values for even lengths).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Lifts an image-plane point with depth and scale: `scale * depth * [p, 1]`.
pub fn lift(p: &Vector2<f64>, depth: f64, scale: f64) -> Result<CameraPoint> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::InvalidInput(format!("depth must be positive, got {depth}")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
    }
    let z = scale * depth;
    Ok(Vector3::new(z * p.x, z * p.y, z))
}

/// Moves a point from frame i's camera space into frame j's:
/// `K_j R_j^T (R_i K_i^-1 c + t_i - t_j)`.
///
/// Returns [`Error::BehindCamera`] when the result has `z <= 0`.
pub fn reproject(c: &CameraPoint, pose_i: &Pose, pose_j: &Pose, k_i: &Intrinsics, k_j: &Intrinsics) -> Result<CameraPoint> {
    let world = pose_i.transform(&k_i.unapply(c));
    let out = k_j.apply(&pose_j.inverse_transform(&world));
    if !(out.z > 0.0) {
        return Err(Error::BehindCamera { z: out.z });
    }
    Ok(out)
}

/// Perspective divide: `(x/z, y/z)` in image-plane coordinates.
pub fn to_pixel(c: &CameraPoint) -> Result<Vector2<f64>> {
    if !(c.z > 0.0) {
        return Err(Error::BehindCamera { z: c.z });
    }
    Ok(Vector2::new(c.x / c.z, c.y / c.z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Vector4};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn lift_examples() {
        assert_eq!(lift(&Vector2::new(0.0, 0.0), 2.0, 1.0).unwrap(), Vector3::new(0.0, 0.0, 2.0));
        assert_eq!(lift(&Vector2::new(1.0, 2.0), 3.0, 2.0).unwrap(), Vector3::new(6.0, 12.0, 6.0));
        assert_eq!(lift(&Vector2::new(-1.0, 1.0), 1.0, 1.0).unwrap(), Vector3::new(-1.0, 1.0, 1.0));
        assert!(lift(&Vector2::new(0.0, 0.0), 0.0, 1.0).is_err());
        assert!(lift(&Vector2::new(0.0, 0.0), 1.0, -1.0).is_err());
    }

    #[test]
    fn to_pixel_examples() {
        assert_eq!(to_pixel(&Vector3::new(2.0, 4.0, 2.0)).unwrap(), Vector2::new(1.0, 2.0));
        assert_eq!(to_pixel(&Vector3::new(0.0, 0.0, 7.0)).unwrap(), Vector2::new(0.0, 0.0));
        assert_eq!(to_pixel(&Vector3::new(-3.0, 6.0, 3.0)).unwrap(), Vector2::new(-1.0, 2.0));
        assert!(matches!(to_pixel(&Vector3::new(1.0, 1.0, 0.0)), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn reproject_identity_and_translation() {
        let k = Intrinsics::new(1.0).unwrap();
        let id = Pose::identity();
        let c = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(reproject(&c, &id, &id, &k, &k).unwrap(), c);

        let pj = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let out = reproject(&Vector3::new(0.0, 0.0, 5.0), &id, &pj, &k, &k).unwrap();
        assert_eq!(out, Vector3::new(0.0, 0.0, 4.0));

        let pj = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 6.0)).unwrap();
        assert!(matches!(
            reproject(&Vector3::new(0.0, 0.0, 5.0), &id, &pj, &k, &k),
            Err(Error::BehindCamera { .. })
        ));
    }

    /// Dense 4x4 homogeneous oracle for the reprojection formula.
    fn homogeneous_oracle(c: &Vector3<f64>, pi: &Pose, pj: &Pose, ki: f64, kj: f64) -> Vector3<f64> {
        let to_h = |p: &Pose| {
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&p.rotation);
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&p.translation);
            m
        };
        let kinv = Matrix4::from_diagonal(&Vector4::new(1.0 / ki, 1.0 / ki, 1.0, 1.0));
        let k = Matrix4::from_diagonal(&Vector4::new(kj, kj, 1.0, 1.0));
        let m = k * to_h(pj).try_inverse().unwrap() * to_h(pi) * kinv;
        let h = m * Vector4::new(c.x, c.y, c.z, 1.0);
        Vector3::new(h.x / h.w, h.y / h.w, h.z / h.w)
    }

    #[test]
    fn reproject_yaw_matches_homogeneous_oracle() {
        let k = Intrinsics::new(1.0).unwrap();
        let id = Pose::identity();
        // Frame j yawed by 90 degrees about the camera y axis.
        let rj = so3_exp(&Vector3::new(0.0, FRAC_PI_2, 0.0));
        let pj = Pose::new(rj, Vector3::zeros()).unwrap();
        let c = Vector3::new(0.0, 0.0, 2.0);
        // R_j^T (0,0,2): R_j maps camera z to world -x... compute by hand:
        // R_y(90) = [[0,0,1],[0,1,0],[-1,0,0]]; R^T (0,0,2) = (-2, 0, 0).
        let expected = Vector3::new(-2.0, 0.0, 0.0);
        let world = pj.inverse_transform(&c);
        assert!((world - expected).norm() < 1e-15);
        // Shift so the point lands in front of camera j.
        // Camera j looks along world +x; place it so the point is 2 units ahead.
        let pj = Pose::new(rj, Vector3::new(-2.0, 0.0, 2.0)).unwrap();
        let got = reproject(&c, &id, &pj, &k, &k).unwrap();
        let oracle = homogeneous_oracle(&c, &id, &pj, 1.0, 1.0);
        assert!((got - oracle).norm() < 1e-12, "{got} vs {oracle}");
        assert!((got - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-12, "{got}");
    }

    #[test]
    fn retract_yaw_entrywise() {
        let p = Pose::identity().retract(&Vector6::new(0.0, 0.0, FRAC_PI_2, 0.0, 0.0, 0.0));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((p.rotation - expected).amax() < 1e-15);
        assert_eq!(Pose::identity().retract(&Vector6::zeros()), Pose::identity());
    }

    #[test]
    fn retract_two_half_steps() {
        let base = Pose::new(so3_exp(&Vector3::new(0.3, -0.2, 0.5)), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        for scale in [1e-1, 1e-2, 1e-3] {
            let d = Vector6::new(0.4, -0.1, 0.2, 0.3, 0.1, -0.2) * scale;
            let full = base.retract(&d);
            let half = base.retract(&(d * 0.5)).retract(&(d * 0.5));
            let err = (full.rotation - half.rotation).amax() + (full.translation - half.translation).amax();
            // Same-axis increments commute, so the error is pure roundoff.
            assert!(err < 1e-12, "scale {scale}: {err}");

            // Different axes: the BCH error is second order in the step size.
            let a = Vector6::new(0.4, 0.0, 0.0, 0.1, 0.0, 0.0) * scale;
            let b = Vector6::new(0.0, 0.3, 0.2, 0.0, 0.2, 0.0) * scale;
            let seq = base.retract(&a).retract(&b);
            let joint = base.retract(&(a + b));
            let err = (seq.rotation - joint.rotation).amax();
            assert!(err < 0.5 * a.norm() * b.norm() + 1e-15, "scale {scale}: {err}");
            assert!(err > 0.0);
        }
    }

    #[test]
    fn bilinear_taps_inside_and_outside() {
        assert!(bilinear_taps(4, 3, PixelCoord::new(-0.6, 0.0)).is_none());
        assert!(bilinear_taps(4, 3, PixelCoord::new(3.5, 2.5)).is_some());
        let taps = bilinear_taps(4, 3, PixelCoord::new(1.25, 0.5)).unwrap();
        let sum: f64 = taps.iter().map(|t| t.1).sum();
        assert!((sum - 1.0).abs() < 1e-15);
        assert_eq!(taps[0].0, 1);
    }

    #[test]
    fn depth_sample_exact_on_plane() {
        // Inverse depth affine in x: 1/z = 0.1 + 0.01 x.
        let w = 8;
        let h = 4;
        let vals: Vec<f64> = (0..w * h).map(|i| 1.0 / (0.1 + 0.01 * (i % w) as f64)).collect();
        let d = DepthMap::new(w, h, 0, vals).unwrap();
        let z = d.sample(PixelCoord::new(2.3, 1.7)).unwrap();
        assert!((z - 1.0 / (0.1 + 0.023)).abs() < 1e-12);
    }

    #[test]
    fn depth_rejects_bad_values() {
        let err = DepthMap::new(2, 2, 0, vec![1.0, 1.0, -1.0, 1.0]).unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "{err}");
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (prop::array::uniform3(-1.5f64..1.5), prop::array::uniform3(-2.0f64..2.0))
            .prop_map(|(w, t)| Pose::new(so3_exp(&Vector3::from(w)), Vector3::from(t)).unwrap())
    }

    proptest! {
        #[test]
        fn lift_then_divide_recovers_point(x in -2.0f64..2.0, y in -2.0f64..2.0, d in 0.01f64..100.0, s in 0.01f64..10.0) {
            let p = Vector2::new(x, y);
            let back = to_pixel(&lift(&p, d, s).unwrap()).unwrap();
            prop_assert!((back - p).amax() < 1e-12);
        }

        #[test]
        fn pose_inverse_is_identity(p in arb_pose()) {
            let e = p.compose(&p.inverse());
            prop_assert!((e.rotation - Matrix3::identity()).amax() < 1e-9);
            prop_assert!(e.translation.amax() < 1e-9);
            prop_assert!(p.orthonormality_error() < 1e-9);
        }

        #[test]
        fn reproject_round_trip_and_composition(pi in arb_pose(), pj in arb_pose(), pk in arb_pose(),
                                                ui in 0.5f64..3.0, uj in 0.5f64..3.0, uk in 0.5f64..3.0,
                                                x in -0.5f64..0.5, y in -0.5f64..0.5, z in 0.5f64..5.0) {
            let (ki, kj, kk) = (Intrinsics::new(ui).unwrap(), Intrinsics::new(uj).unwrap(), Intrinsics::new(uk).unwrap());
            let c = Vector3::new(x * z, y * z, z);
            // Skip configurations where the point falls behind an intermediate camera.
            let Ok(cj) = reproject(&c, &pi, &pj, &ki, &kj) else { return Ok(()); };
            let back = reproject(&cj, &pj, &pi, &kj, &ki).unwrap();
            prop_assert!((back - c).norm() <= 1e-9 * c.norm());
            let Ok(ck) = reproject(&cj, &pj, &pk, &kj, &kk) else { return Ok(()); };
            let direct = reproject(&c, &pi, &pk, &ki, &kk).unwrap();
            prop_assert!((ck - direct).norm() <= 1e-9 * direct.norm().max(1.0));
            let same = reproject(&c, &pi, &pi, &ki, &ki).unwrap();
            prop_assert!((same - c).norm() <= 1e-12 * c.norm());
        }

        #[test]
        fn retract_keeps_rotation_orthonormal(steps in prop::collection::vec(prop::array::uniform6(-0.5f64..0.5), 1..200)) {
            let mut p = Pose::identity();
            for s in steps {
                p = p.retract(&Vector6::from_row_slice(&s));
            }
            prop_assert!(p.orthonormality_error() < 1e-9);
            prop_assert!((p.rotation.determinant() - 1.0).abs() < 1e-9);
        }
    }
}
