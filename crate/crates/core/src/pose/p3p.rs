//! Lambda Twist minimal solver (Persson & Nordberg, ECCV 2018), in f64.

use nalgebra::{Matrix3, Vector3};

/// Up to four `(R, t)` with `λᵢ yᵢ = R xᵢ + t`, `λᵢ > 0`.
///
/// `bearings` need not be normalized. The world points must not be collinear.
pub(crate) fn lambda_twist(world: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<(Matrix3<f64>, Vector3<f64>)> {
    let [x1, x2, x3] = *world;
    let y1 = bearings[0].normalize();
    let y2 = bearings[1].normalize();
    let y3 = bearings[2].normalize();

    let d12 = x1 - x2;
    let d13 = x1 - x3;
    let d23 = x2 - x3;
    let d12xd13 = d12.cross(&d13);

    let a12 = d12.norm_squared();
    let a13 = d13.norm_squared();
    let a23 = d23.norm_squared();

    let c12 = y1.dot(&y2);
    let c23 = y2.dot(&y3);
    let c31 = y3.dot(&y1);
    let blob = c12 * c23 * c31 - 1.0;

    let s12_sq = 1.0 - c12 * c12;
    let s23_sq = 1.0 - c23 * c23;
    let s31_sq = 1.0 - c31 * c31;

    let b12 = -2.0 * c12;
    let b13 = -2.0 * c31;
    let b23 = -2.0 * c23;

    let p3 = a13 * (a23 * s31_sq - a13 * s23_sq);
    let p2 = 2.0 * blob * a23 * a13 + a13 * (2.0 * a12 + a13) * s23_sq + a23 * (a23 - a12) * s31_sq;
    let p1 = a23 * (a13 - a23) * s12_sq - a12 * a12 * s23_sq - 2.0 * a12 * (blob * a23 + a13 * s23_sq);
    let p0 = a12 * (a12 * s23_sq - a23 * s12_sq);

    let g = if p3.abs() > 1e-300 {
        cubic_root(p2 / p3, p1 / p3, p0 / p3)
    } else {
        // cubic collapses to a quadratic; pick any real root
        match solve_quadratic(p2, p1, p0) {
            Some((r, _)) => r,
            None => return Vec::new(),
        }
    };

    let d0 = Matrix3::new(
        a23 * (1.0 - g),
        -(a23 * c12),
        a23 * c31 * g,
        -(a23 * c12),
        a23 - a12 + a13 * g,
        -c23 * (a13 * g - a12),
        a23 * c31 * g,
        -c23 * (a13 * g - a12),
        g * (a13 - a23) - a12,
    );
    let (evecs, evals) = eigen_singular(&d0);

    let mut lambdas: Vec<Vector3<f64>> = Vec::with_capacity(4);
    let ratio = (-evals[1] / evals[0]).max(0.0).sqrt();
    for s in [ratio, -ratio] {
        let w2 = 1.0 / (s * evecs[(0, 1)] - evecs[(0, 0)]);
        let w0 = w2 * (evecs[(1, 0)] - s * evecs[(1, 1)]);
        let w1 = w2 * (evecs[(2, 0)] - s * evecs[(2, 1)]);

        let a = 1.0 / ((a13 - a12) * w1 * w1 - a12 * b13 * w1 - a12);
        let b = a * (a13 * b12 * w1 - a12 * b13 * w0 - 2.0 * w0 * w1 * (a12 - a13));
        let c = a * ((a13 - a12) * w0 * w0 + a13 * b12 * w0 + a13);
        if !(b * b - 4.0 * c >= 0.0) {
            continue;
        }
        let (tau1, tau2) = root2real(b, c);
        for tau in [tau1, tau2] {
            if tau <= 0.0 {
                continue;
            }
            let d = a23 / (tau * (b23 + tau) + 1.0);
            if d <= 0.0 {
                continue;
            }
            let l2 = d.sqrt();
            let l3 = tau * l2;
            let l1 = w0 * l2 + w1 * l3;
            if l1 >= 0.0 {
                lambdas.push(Vector3::new(l1, l2, l3));
            }
        }
    }

    let x_mat = Matrix3::from_columns(&[d12, d13, d12xd13]);
    let Some(x_inv) = x_mat.try_inverse() else {
        return Vec::new();
    };

    lambdas
        .into_iter()
        .map(|l| {
            let l = refine_lambda(l, a12, a13, a23, b12, b13, b23);
            let ry1 = l[0] * y1;
            let ry2 = l[1] * y2;
            let ry3 = l[2] * y3;
            let yd1 = ry1 - ry2;
            let yd2 = ry1 - ry3;
            let y_mat = Matrix3::from_columns(&[yd1, yd2, yd1.cross(&yd2)]);
            let rot = y_mat * x_inv;
            (rot, ry1 - rot * x1)
        })
        .filter(|(r, t)| r.iter().all(|v| v.is_finite()) && t.iter().all(|v| v.is_finite()))
        .collect()
}

fn refine_lambda(lambda: Vector3<f64>, a12: f64, a13: f64, a23: f64, b12: f64, b13: f64, b23: f64) -> Vector3<f64> {
    let residual = |l: &Vector3<f64>| {
        Vector3::new(
            l[0] * l[0] + l[1] * l[1] + b12 * l[0] * l[1] - a12,
            l[0] * l[0] + l[2] * l[2] + b13 * l[0] * l[2] - a13,
            l[1] * l[1] + l[2] * l[2] + b23 * l[1] * l[2] - a23,
        )
    };
    let l1_norm = |v: &Vector3<f64>| v.iter().map(|x| x.abs()).sum::<f64>();
    let mut l = lambda;
    let mut res = residual(&l);
    for _ in 0..5 {
        if l1_norm(&res) < 1e-14 {
            break;
        }
        let dr1dl1 = 2.0 * l[0] + b12 * l[1];
        let dr1dl2 = 2.0 * l[1] + b12 * l[0];
        let dr2dl1 = 2.0 * l[0] + b13 * l[2];
        let dr2dl3 = 2.0 * l[2] + b13 * l[0];
        let dr3dl2 = 2.0 * l[1] + b23 * l[2];
        let dr3dl3 = 2.0 * l[2] + b23 * l[1];
        let det = 1.0 / (-dr1dl1 * dr2dl3 * dr3dl2 - dr1dl2 * dr2dl1 * dr3dl3);
        let jac = Matrix3::new(
            -dr2dl3 * dr3dl2,
            -dr1dl2 * dr3dl3,
            dr1dl2 * dr2dl3,
            -dr2dl1 * dr3dl3,
            dr1dl1 * dr3dl3,
            -dr1dl1 * dr2dl3,
            dr2dl1 * dr3dl2,
            -dr1dl1 * dr3dl2,
            -dr1dl2 * dr2dl1,
        );
        let next = l - det * (jac * res);
        let next_res = residual(&next);
        if !(l1_norm(&next_res) < l1_norm(&res)) {
            break;
        }
        l = next;
        res = next_res;
    }
    l
}

/// Real roots of `r² + b r + c`, computed without cancellation.
fn root2real(b: f64, c: f64) -> (f64, f64) {
    let disc = b * b - 4.0 * c;
    let y = disc.max(0.0).sqrt();
    if b < 0.0 {
        (0.5 * (-b + y), 0.5 * (-b - y))
    } else {
        (2.0 * c / (-b + y), 2.0 * c / (-b - y))
    }
}

fn solve_quadratic(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    if a.abs() < 1e-300 {
        return (b.abs() > 1e-300).then(|| (-c / b, -c / b));
    }
    let (bn, cn) = (b / a, c / a);
    (bn * bn - 4.0 * cn >= 0.0).then(|| root2real(bn, cn))
}

/// One real root of `r³ + b r² + c r + d`, picked where the derivative is
/// steep, then polished with Newton iterations.
fn cubic_root(b: f64, c: f64, d: f64) -> f64 {
    let mut r0;
    if b * b >= 3.0 * c {
        let v = (b * b - 3.0 * c).sqrt();
        let t1 = (-b - v) / 3.0;
        let k = ((t1 + b) * t1 + c) * t1 + d;
        if k > 0.0 {
            r0 = t1 - (-k / (3.0 * t1 + b)).sqrt();
            if !r0.is_finite() {
                r0 = t1;
            }
        } else {
            let t2 = (-b + v) / 3.0;
            let k = ((t2 + b) * t2 + c) * t2 + d;
            r0 = t2 + (-k / (3.0 * t2 + b)).sqrt();
            // repeated root: the inflection point is already the root
            if !r0.is_finite() {
                r0 = t2;
            }
        }
    } else {
        r0 = -b / 3.0;
        if ((3.0 * r0 + 2.0 * b) * r0 + c).abs() < 1e-4 {
            r0 += 1.0;
        }
    }
    for i in 0..50 {
        let fx = ((r0 + b) * r0 + c) * r0 + d;
        if i >= 7 && fx.abs() <= 1e-13 {
            break;
        }
        let fpx = (3.0 * r0 + 2.0 * b) * r0 + c;
        if fpx == 0.0 {
            break;
        }
        r0 -= fx / fpx;
    }
    r0
}

/// Eigen decomposition of a rank-2 symmetric matrix; the null-space
/// eigenvector goes in the third column.
fn eigen_singular(x: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let (m11, m12, m13) = (x[(0, 0)], x[(0, 1)], x[(0, 2)]);
    let (m22, m23, m33) = (x[(1, 1)], x[(1, 2)], x[(2, 2)]);

    let v3 = Vector3::new(m12 * m23 - m13 * m22, m13 * m12 - m23 * m11, m22 * m11 - m12 * m12);
    let v3 = v3.normalize();

    let m12_sq = m12 * m12;
    let b = -m11 - m22 - m33;
    let c = -m12_sq - m13 * m13 - m23 * m23 + m11 * (m22 + m33) + m22 * m33;
    let (mut e1, mut e2) = root2real(b, c);
    if e1.abs() < e2.abs() {
        std::mem::swap(&mut e1, &mut e2);
    }

    let mx0011 = -m11 * m22;
    let prec_0 = m12 * m23 - m13 * m22;
    let prec_1 = m12 * m13 - m11 * m23;
    let eigvec = |e: f64| {
        let tmp = 1.0 / (e * (m11 + m22) + mx0011 - e * e + m12_sq);
        let a1 = -(e * m13 + prec_0) * tmp;
        let a2 = -(e * m23 + prec_1) * tmp;
        let rnorm = 1.0 / (a1 * a1 + a2 * a2 + 1.0).sqrt();
        Vector3::new(a1 * rnorm, a2 * rnorm, rnorm)
    };
    let v1 = eigvec(e1);
    let v2 = eigvec(e2);
    (Matrix3::from_columns(&[v1, v2, v3]), Vector3::new(e1, e2, 0.0))
}
