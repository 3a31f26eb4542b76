use nalgebra::{Matrix2, Matrix3, Matrix3x4, Matrix4, UnitQuaternion, Vector2, Vector3, Vector4};

use super::{CameraIntrinsics, Ellipse2D, PoseSE3, MIN_DEPTH};
use crate::error::{Error, Result};

/// Ellipsoidal landmark in dual form, parameterized by centroid, orientation
/// and semi-axes (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuadric {
    position: Vector3<f64>,
    orientation: UnitQuaternion<f64>,
    semi_axes: Vector3<f64>,
}

impl DualQuadric {
    pub fn new(
        position: Vector3<f64>,
        orientation: UnitQuaternion<f64>,
        semi_axes: Vector3<f64>,
    ) -> Result<Self> {
        if !semi_axes.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::InvariantViolation(format!(
                "quadric semi-axes must be positive, got {:?}",
                semi_axes.as_slice()
            )));
        }
        if !position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite quadric position".into()));
        }
        Ok(Self {
            position,
            orientation,
            semi_axes,
        })
    }

    /// Axis-aligned sphere, handy in tests and examples.
    pub fn sphere(center: Vector3<f64>, radius: f64) -> Result<Self> {
        Self::new(center, UnitQuaternion::identity(), Vector3::repeat(radius))
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }

    pub fn orientation(&self) -> &UnitQuaternion<f64> {
        &self.orientation
    }

    pub fn semi_axes(&self) -> &Vector3<f64> {
        &self.semi_axes
    }

    /// `Q* = Z diag(s², −1) Zᵀ` with `Z` the quadric-to-map homogeneous transform.
    pub fn dual_matrix(&self) -> Matrix4<f64> {
        let mut z = Matrix4::identity();
        z.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.orientation.to_rotation_matrix().matrix());
        z.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        let s2 = self.semi_axes.component_mul(&self.semi_axes);
        let d = Matrix4::from_diagonal(&Vector4::new(s2.x, s2.y, s2.z, -1.0));
        let q = z * d * z.transpose();
        0.5 * (q + q.transpose())
    }
}

/// Pinhole projection of a map point.
pub fn project_center(
    pose: &PoseSE3,
    k: &CameraIntrinsics,
    p: &Vector3<f64>,
) -> Result<Vector2<f64>> {
    let pc = pose.transform_point(p);
    if pc.z <= MIN_DEPTH {
        return Err(Error::PointBehindCamera { depth: pc.z });
    }
    Ok(k.project(&pc))
}

/// Outline of a quadric seen through the camera, via the dual conic
/// `C* = P Q* Pᵀ` with `P = K [R | t]`.
pub fn project_quadric(q: &DualQuadric, pose: &PoseSE3, k: &CameraIntrinsics) -> Result<Ellipse2D> {
    let depth = pose.transform_point(q.position()).z;
    if depth <= MIN_DEPTH {
        return Err(Error::PointBehindCamera { depth });
    }
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(pose.rotation());
    rt.fixed_view_mut::<3, 1>(0, 3).copy_from(pose.translation());
    let p = k.matrix() * rt;
    let c: Matrix3<f64> = p * q.dual_matrix() * p.transpose();

    let scale = -c[(2, 2)];
    if !(scale > 0.0) {
        return Err(Error::DegenerateConic(
            "camera center lies on or inside the quadric".into(),
        ));
    }
    let c = c / scale;
    let center = Vector2::new(-c[(0, 2)], -c[(1, 2)]);
    let block = Matrix2::new(c[(0, 0)], c[(0, 1)], c[(1, 0)], c[(1, 1)]);
    let cov = block + center * center.transpose();
    let cov = 0.5 * (cov + cov.transpose());
    Ellipse2D::new(center, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    /// Brute-force oracle: project a dense sampling of the ellipsoid surface and
    /// take the image-space extremes.
    fn sampled_bbox(q: &DualQuadric, pose: &PoseSE3, k: &CameraIntrinsics) -> [f64; 4] {
        let r = q.orientation().to_rotation_matrix();
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        let n = 300;
        for i in 0..=n {
            let theta = std::f64::consts::PI * i as f64 / n as f64;
            for j in 0..(2 * n) {
                let phi = std::f64::consts::PI * j as f64 / n as f64;
                let unit = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
                let p = q.position() + r * unit.component_mul(q.semi_axes());
                let uv = project_center(pose, k, &p).unwrap();
                b[0] = b[0].min(uv.x);
                b[1] = b[1].min(uv.y);
                b[2] = b[2].max(uv.x);
                b[3] = b[3].max(uv.y);
            }
        }
        b
    }

    #[test]
    fn project_center_examples() {
        let k = camera();
        let id = PoseSE3::identity();
        assert_eq!(project_center(&id, &k, &Vector3::new(0.0, 0.0, 5.0)).unwrap(), Vector2::new(320.0, 240.0));
        assert_eq!(project_center(&id, &k, &Vector3::new(1.0, 0.0, 5.0)).unwrap(), Vector2::new(420.0, 240.0));
        assert!(matches!(
            project_center(&id, &k, &Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::PointBehindCamera { .. })
        ));
    }

    #[test]
    fn on_axis_unit_sphere() {
        let k = camera();
        let q = DualQuadric::sphere(Vector3::new(0.0, 0.0, 5.0), 1.0).unwrap();
        let e = project_quadric(&q, &PoseSE3::identity(), &k).unwrap();
        assert!((e.center() - Vector2::new(320.0, 240.0)).norm() < 1e-9);
        // tangent cone half-angle asin(1/5): radius = f tan = 500 / sqrt(24)
        let expected = 500.0 * 500.0 / 24.0;
        let cov = e.covariance();
        assert!((cov[(0, 0)] - expected).abs() < 1e-8 * expected);
        assert!((cov[(1, 1)] - expected).abs() < 1e-8 * expected);
        assert!(cov[(0, 1)].abs() < 1e-9);
        let (a, b) = e.semi_axes();
        assert!((a - b).abs() < 1e-6 * a);
    }

    #[test]
    fn behind_camera_and_inside() {
        let k = camera();
        let behind = DualQuadric::sphere(Vector3::new(0.0, 0.0, -5.0), 1.0).unwrap();
        assert!(matches!(
            project_quadric(&behind, &PoseSE3::identity(), &k),
            Err(Error::PointBehindCamera { .. })
        ));
        let around = DualQuadric::sphere(Vector3::new(0.0, 0.0, 0.5), 1.0).unwrap();
        assert!(matches!(
            project_quadric(&around, &PoseSE3::identity(), &k),
            Err(Error::DegenerateConic(_))
        ));
    }

    #[test]
    fn conic_matches_sampled_silhouette() {
        let k = camera();
        let pose = PoseSE3::from_rotation(
            &Rotation3::from_euler_angles(0.1, -0.2, 0.05),
            Vector3::new(0.2, -0.1, 0.3),
        );
        let cases = [
            DualQuadric::new(
                Vector3::new(0.8, -0.4, 6.0),
                UnitQuaternion::from_euler_angles(0.3, 0.7, -0.2),
                Vector3::new(0.6, 0.3, 0.2),
            )
            .unwrap(),
            DualQuadric::sphere(Vector3::new(-1.2, 0.9, 4.0), 0.5).unwrap(),
        ];
        for q in &cases {
            let bb = project_quadric(q, &pose, &k).unwrap().bounding_box();
            let s = sampled_bbox(q, &pose, &k);
            // sampling grid resolution bounds the achievable agreement
            for (got, want) in [bb.x_min, bb.y_min, bb.x_max, bb.y_max].iter().zip(s) {
                assert!((got - want).abs() < 0.05, "{got} vs {want}");
                assert!(*got <= want + 1e-9 || got - want < 0.05);
            }
        }
    }

    #[test]
    fn off_axis_sphere_center_converges_to_projected_centroid() {
        // The silhouette center of an off-axis sphere is shifted away from the
        // projected centroid by a second-order term in radius / depth.
        let k = camera();
        let p = Vector3::new(1.5, -0.8, 5.0);
        let proj = project_center(&PoseSE3::identity(), &k, &p).unwrap();
        let gaps: Vec<f64> = [0.4, 0.1, 0.01, 0.001]
            .iter()
            .map(|&r| {
                let q = DualQuadric::sphere(p, r).unwrap();
                let e = project_quadric(&q, &PoseSE3::identity(), &k).unwrap();
                (e.center() - proj).norm() / (r * r)
            })
            .collect();
        // gap / r² settles to a constant
        assert!((gaps[2] - gaps[3]).abs() < 1e-3 * gaps[3]);
        assert!(gaps[3] * 1e-6 < 1e-5);
        // on the optical axis the two coincide for any radius
        for r in [0.1, 1.0, 2.0] {
            let q = DualQuadric::sphere(Vector3::new(0.0, 0.0, 5.0), r).unwrap();
            let e = project_quadric(&q, &PoseSE3::identity(), &k).unwrap();
            assert!((e.center() - Vector2::new(320.0, 240.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn dual_matrix_is_symmetric() {
        let q = DualQuadric::new(
            Vector3::new(1.0, 2.0, 3.0),
            UnitQuaternion::from_euler_angles(0.4, 0.1, -1.0),
            Vector3::new(0.3, 0.2, 0.1),
        )
        .unwrap();
        let m = q.dual_matrix();
        assert_eq!(m, m.transpose());
        assert!(DualQuadric::new(Vector3::zeros(), UnitQuaternion::identity(), Vector3::new(1.0, 0.0, 1.0)).is_err());
    }
}
