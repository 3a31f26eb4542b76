use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-9;

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(Error::EmptyBox);
        }
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite bounding box".into()));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_center_size(center: &Vector2<f64>, width: f64, height: f64) -> Result<Self> {
        Self::new(
            center.x - 0.5 * width,
            center.y - 0.5 * height,
            center.x + 0.5 * width,
            center.y + 0.5 * height,
        )
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    /// Intersection over the smaller of the two areas.
    pub fn overlap_min(&self, other: &BoundingBox) -> f64 {
        self.intersection_area(other) / self.area().min(other.area())
    }

    /// Clips to `[0, width] x [0, height]`; `EmptyBox` if nothing remains.
    pub fn clamp_to(&self, width: f64, height: f64) -> Result<BoundingBox> {
        BoundingBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Ellipse viewed as a 2D Gaussian: the 1-sigma contour of `N(center, covariance)`.
/// The square roots of the covariance eigenvalues are the semi-axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse2D {
    center: Vector2<f64>,
    covariance: Matrix2<f64>,
}

impl Ellipse2D {
    pub fn new(center: Vector2<f64>, covariance: Matrix2<f64>) -> Result<Self> {
        let scale = covariance.abs().max().max(1.0);
        if (covariance[(0, 1)] - covariance[(1, 0)]).abs() > SYMMETRY_TOL * scale {
            return Err(Error::DegenerateConic("covariance is not symmetric".into()));
        }
        let off = 0.5 * (covariance[(0, 1)] + covariance[(1, 0)]);
        let covariance = Matrix2::new(covariance[(0, 0)], off, off, covariance[(1, 1)]);
        let (lo, _) = sym2_eigenvalues(&covariance);
        if !(lo > 0.0) || !center.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateConic(format!(
                "covariance not positive-definite (smallest eigenvalue {lo:e})"
            )));
        }
        Ok(Self { center, covariance })
    }

    pub fn center(&self) -> &Vector2<f64> {
        &self.center
    }

    pub fn covariance(&self) -> &Matrix2<f64> {
        &self.covariance
    }

    /// Semi-axes, major first.
    pub fn semi_axes(&self) -> (f64, f64) {
        let (lo, hi) = sym2_eigenvalues(&self.covariance);
        (hi.sqrt(), lo.sqrt())
    }

    /// Tight axis-aligned box around the ellipse.
    pub fn bounding_box(&self) -> BoundingBox {
        let hx = self.covariance[(0, 0)].sqrt();
        let hy = self.covariance[(1, 1)].sqrt();
        BoundingBox {
            x_min: self.center.x - hx,
            y_min: self.center.y - hy,
            x_max: self.center.x + hx,
            y_max: self.center.y + hy,
        }
    }
}

/// Eigenvalues `(min, max)` of a symmetric 2x2 matrix.
fn sym2_eigenvalues(m: &Matrix2<f64>) -> (f64, f64) {
    let half_tr = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let half_diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    let r = half_diff.hypot(m[(0, 1)]);
    (half_tr - r, half_tr + r)
}

/// Axis-aligned ellipse touching all four sides of `bbox`.
pub fn inscribed_ellipse(bbox: &BoundingBox) -> Result<Ellipse2D> {
    let (w, h) = (bbox.width(), bbox.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::EmptyBox);
    }
    Ellipse2D::new(
        bbox.center(),
        Matrix2::new(0.25 * w * w, 0.0, 0.0, 0.25 * h * h),
    )
}

/// Squared Bures term `tr(Σ₁ + Σ₂ − 2 (Σ₁^½ Σ₂ Σ₁^½)^½)` between two covariances.
///
/// For 2x2 SPD `M`, `tr √M = √(tr M + 2 √det M)`, and with `M = Σ₁^½ Σ₂ Σ₁^½`
/// we have `tr M = tr(Σ₁Σ₂)`, `det M = det Σ₁ det Σ₂`, so no matrix root is needed.
pub(crate) fn bures_squared(a: &Matrix2<f64>, b: &Matrix2<f64>) -> f64 {
    if a == b {
        return 0.0;
    }
    let tr_ab = (a * b).trace();
    let det_prod = (a.determinant() * b.determinant()).max(0.0);
    let cross = (tr_ab + 2.0 * det_prod.sqrt()).max(0.0).sqrt();
    (a.trace() + b.trace() - 2.0 * cross).max(0.0)
}

pub(crate) fn ellipse_bures_squared(a: &Ellipse2D, b: &Ellipse2D) -> f64 {
    bures_squared(&a.covariance, &b.covariance)
}

/// 2-Wasserstein distance between the Gaussians represented by two ellipses.
pub fn wasserstein2(e1: &Ellipse2D, e2: &Ellipse2D) -> f64 {
    let d = e1.center - e2.center;
    (d.norm_squared() + bures_squared(&e1.covariance, &e2.covariance)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation2;
    use proptest::prelude::*;

    fn ellipse(cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> Ellipse2D {
        let r = Rotation2::new(angle).into_inner();
        let cov = r * Matrix2::new(a * a, 0.0, 0.0, b * b) * r.transpose();
        Ellipse2D::new(Vector2::new(cx, cy), cov).unwrap()
    }

    /// Independent route: W2 via explicit eigendecomposition square roots.
    fn w2_eigen_oracle(e1: &Ellipse2D, e2: &Ellipse2D) -> f64 {
        fn sqrtm(m: &Matrix2<f64>) -> Matrix2<f64> {
            let eig = m.symmetric_eigen();
            let d = eig.eigenvalues.map(|v| v.max(1e-12).sqrt());
            eig.eigenvectors * Matrix2::from_diagonal(&d) * eig.eigenvectors.transpose()
        }
        let s1 = sqrtm(e1.covariance());
        let inner = sqrtm(&(s1 * e2.covariance() * s1));
        let tr = e1.covariance().trace() + e2.covariance().trace() - 2.0 * inner.trace();
        ((e1.center() - e2.center()).norm_squared() + tr.max(0.0)).sqrt()
    }

    #[test]
    fn inscribed_ellipse_examples() {
        let e = inscribed_ellipse(&BoundingBox::new(0.0, 0.0, 4.0, 2.0).unwrap()).unwrap();
        assert_eq!(*e.center(), Vector2::new(2.0, 1.0));
        assert_eq!(e.semi_axes(), (2.0, 1.0));
        let c = inscribed_ellipse(&BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap()).unwrap();
        assert_eq!(*c.center(), Vector2::new(1.0, 1.0));
        assert_eq!(c.semi_axes(), (1.0, 1.0));
        assert!(matches!(BoundingBox::new(0.0, 0.0, 0.0, 2.0), Err(Error::EmptyBox)));
        let degenerate = BoundingBox { x_min: 0.0, y_min: 0.0, x_max: 0.0, y_max: 2.0 };
        assert!(matches!(inscribed_ellipse(&degenerate), Err(Error::EmptyBox)));
    }

    #[test]
    fn wasserstein_examples() {
        let a = ellipse(1.0, 2.0, 3.0, 1.0, 0.4);
        assert_eq!(wasserstein2(&a, &a), 0.0);

        let cov = Matrix2::new(4.0, 1.0, 1.0, 3.0);
        let p = Ellipse2D::new(Vector2::new(0.0, 0.0), cov).unwrap();
        let q = Ellipse2D::new(Vector2::new(3.0, 4.0), cov).unwrap();
        assert_eq!(wasserstein2(&p, &q), 5.0);

        let s = ellipse(0.0, 0.0, 4.0, 2.0, 0.0);
        let t = ellipse(0.0, 0.0, 2.0, 2.0, 0.0);
        assert!((wasserstein2(&s, &t) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ellipse_rejects_bad_covariance() {
        assert!(Ellipse2D::new(Vector2::zeros(), Matrix2::new(1.0, 0.5, 0.4, 1.0)).is_err());
        assert!(Ellipse2D::new(Vector2::zeros(), Matrix2::new(1.0, 2.0, 2.0, 1.0)).is_err());
        assert!(Ellipse2D::new(Vector2::zeros(), Matrix2::new(0.0, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn iou_basics() {
        let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BoundingBox::new(1.0, 0.0, 3.0, 2.0).unwrap();
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
        let far = BoundingBox::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(a.iou(&far), 0.0);
        assert_eq!(a.overlap_min(&BoundingBox::new(0.5, 0.5, 1.5, 1.5).unwrap()), 1.0);
    }

    fn arb_ellipse() -> impl Strategy<Value = Ellipse2D> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64, 0.0..std::f64::consts::PI)
            .prop_map(|(x, y, a, b, th)| ellipse(x, y, a, b, th))
    }

    proptest! {
        #[test]
        fn wasserstein_symmetric(a in arb_ellipse(), b in arb_ellipse()) {
            prop_assert!((wasserstein2(&a, &b) - wasserstein2(&b, &a)).abs() < 1e-9);
            prop_assert!(wasserstein2(&a, &b) >= 0.0);
        }

        #[test]
        fn wasserstein_triangle(a in arb_ellipse(), b in arb_ellipse(), c in arb_ellipse()) {
            prop_assert!(wasserstein2(&a, &c) <= wasserstein2(&a, &b) + wasserstein2(&b, &c) + 1e-7);
        }

        #[test]
        fn wasserstein_matches_eigen_route(a in arb_ellipse(), b in arb_ellipse()) {
            let fast = wasserstein2(&a, &b);
            let slow = w2_eigen_oracle(&a, &b);
            prop_assert!((fast - slow).abs() <= 1e-7 * (1.0 + slow), "{fast} vs {slow}");
        }

        #[test]
        fn inscribed_bbox_round_trip(x in -500.0..500.0f64, y in -500.0..500.0f64,
                                     w in 0.1..300.0f64, h in 0.1..300.0f64) {
            let b = BoundingBox::new(x, y, x + w, y + h).unwrap();
            let back = inscribed_ellipse(&b).unwrap().bounding_box();
            prop_assert!((back.x_min - b.x_min).abs() < 1e-9);
            prop_assert!((back.y_min - b.y_min).abs() < 1e-9);
            prop_assert!((back.x_max - b.x_max).abs() < 1e-9);
            prop_assert!((back.y_max - b.y_max).abs() < 1e-9);
        }
    }
}
