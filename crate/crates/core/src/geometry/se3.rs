use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rigid transform taking map coordinates into the camera frame:
/// `p_cam = R * p_map + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from a rotation matrix, rejecting anything that is not a
    /// proper rotation within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det_err = (rotation.determinant() - 1.0).abs();
        if !(ortho_err <= ORTHONORMAL_TOL && det_err <= ORTHONORMAL_TOL) {
            return Err(Error::InvariantViolation(format!(
                "rotation is not orthonormal (|RtR - I| = {ortho_err:e}, |det - 1| = {det_err:e})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_rotation(rotation: &Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    pub fn from_quaternion(rotation: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rotation.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Pose of a camera at `eye` looking at `target`, with image "up" aligned
    /// to `-up` (image y grows downwards).
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvariantViolation("look_at: eye equals target".into()));
        }
        let z = forward.normalize();
        let x = z.cross(up);
        if x.norm() < 1e-9 {
            return Err(Error::InvariantViolation("look_at: up is parallel to the view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera position expressed in map coordinates.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Applies a tangent increment `[ρ, ω]`: the rotation is left-multiplied by
    /// `exp(ω)` and the translation shifted by `ρ`.
    pub fn perturb_left(&self, delta: &Vector6<f64>) -> PoseSE3 {
        let omega = Vector3::new(delta[3], delta[4], delta[5]);
        let step = Rotation3::new(omega);
        let rotation = step.matrix() * self.rotation;
        // re-project onto SO(3) so repeated updates do not drift
        let rotation = UnitQuaternion::from_matrix(&rotation)
            .to_rotation_matrix()
            .into_inner();
        PoseSE3 {
            rotation,
            translation: self.translation + Vector3::new(delta[0], delta[1], delta[2]),
        }
    }

    /// Geodesic angle (radians) between the two rotations.
    pub fn rotation_angle_to(&self, other: &PoseSE3) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        // acos loses precision near zero, use the skew part instead there
        if c > 0.99 {
            let skew = Vector3::new(
                rel[(2, 1)] - rel[(1, 2)],
                rel[(0, 2)] - rel[(2, 0)],
                rel[(1, 0)] - rel[(0, 1)],
            );
            (0.5 * skew.norm()).asin()
        } else {
            c.acos()
        }
    }

    /// Distance between camera centers, in meters.
    pub fn translation_error_to(&self, other: &PoseSE3) -> f64 {
        (self.camera_center() - other.camera_center()).norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn transform_identity_translation_rotation() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(PoseSE3::identity().transform_point(&p), p);

        let t = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 5.0));
        assert_eq!(t.transform_point(&Vector3::zeros()), Vector3::new(0.0, 0.0, 5.0));

        let rz = PoseSE3::from_rotation(&Rotation3::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2), Vector3::zeros());
        let q = rz.transform_point(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(q, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let r = Rotation3::from_euler_angles(0.3, -1.2, 2.0);
        let t = PoseSE3::from_rotation(&r, Vector3::new(0.5, -4.0, 2.5));
        let id = t.inverse().compose(&t);
        assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(id.translation.norm() < 1e-9);
    }

    #[test]
    fn new_rejects_reflection_and_skew() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert!(PoseSE3::new(m, Vector3::zeros()).is_err());
        let mut s = Matrix3::identity();
        s[(0, 1)] = 1e-6;
        assert!(PoseSE3::new(s, Vector3::zeros()).is_err());
        assert!(PoseSE3::new(Matrix3::identity(), Vector3::zeros()).is_ok());
    }

    #[test]
    fn look_at_puts_target_on_optical_axis() {
        let eye = Vector3::new(4.0, -3.0, 1.5);
        let target = Vector3::new(0.0, 0.0, 0.5);
        let pose = PoseSE3::look_at(&eye, &target, &Vector3::z()).unwrap();
        let p = pose.transform_point(&target);
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
        assert_relative_eq!(pose.camera_center(), eye, epsilon = 1e-12);
        // world up maps to image up (negative y)
        let above = pose.transform_point(&(target + Vector3::z()));
        assert!(above.y < 0.0);
    }

    #[test]
    fn rotation_angle_small_and_large() {
        let a = PoseSE3::identity();
        let b = PoseSE3::from_rotation(&Rotation3::from_axis_angle(&Vector3::y_axis(), 1e-7), Vector3::zeros());
        assert_relative_eq!(a.rotation_angle_to(&b), 1e-7, max_relative = 1e-6);
        let c = PoseSE3::from_rotation(&Rotation3::from_axis_angle(&Vector3::x_axis(), 2.5), Vector3::zeros());
        assert_relative_eq!(a.rotation_angle_to(&c), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn perturb_left_stays_orthonormal() {
        let mut pose = PoseSE3::identity();
        for i in 0..100 {
            let d = Vector6::new(0.01, 0.0, -0.02, 0.1 * (i as f64).sin(), 0.05, -0.07);
            pose = pose.perturb_left(&d);
        }
        assert!(PoseSE3::new(pose.rotation, pose.translation).is_ok());
    }
}
