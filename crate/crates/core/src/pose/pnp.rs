use nalgebra::{Matrix2x3, Matrix3, Matrix6, Vector2, Vector3, Vector6};

use super::p3p::lambda_twist;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PoseSE3, MIN_DEPTH};

/// A 2D image point paired with the 3D map point it observes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Pixels.
    pub image: Vector2<f64>,
    /// Meters, map frame.
    pub world: Vector3<f64>,
}

impl Correspondence {
    pub fn new(image: Vector2<f64>, world: Vector3<f64>) -> Self {
        Self { image, world }
    }
}

const COLLINEAR_TOL: f64 = 1e-9;
const POLISH_ITERATIONS: usize = 30;
const SUPPORT_TRIPLES: usize = 4;

/// Camera pose from center correspondences.
///
/// Exactly three correspondences yield every admissible P3P solution (at most
/// four). With four or more, P3P runs on the widest-spread triples, the
/// hypothesis with the lowest total reprojection error wins, and it is then
/// polished by Gauss-Newton on all points; a single pose is returned.
pub fn pnp_from_centers(corrs: &[Correspondence], k: &CameraIntrinsics) -> Result<Vec<PoseSE3>> {
    if corrs.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "{} correspondences, at least 3 required",
            corrs.len()
        )));
    }
    if corrs
        .iter()
        .any(|c| !c.image.iter().chain(c.world.iter()).all(|v| v.is_finite()))
    {
        return Err(Error::DegenerateConfiguration("non-finite correspondence".into()));
    }

    let triples = support_triples(corrs);
    if triples.is_empty() {
        return Err(Error::DegenerateConfiguration(
            "world points are collinear or coincident".into(),
        ));
    }

    let bearings: Vec<Vector3<f64>> = corrs.iter().map(|c| k.backproject(&c.image)).collect();
    let solve = |(a, b, c): (usize, usize, usize)| -> Vec<PoseSE3> {
        lambda_twist(
            &[corrs[a].world, corrs[b].world, corrs[c].world],
            &[bearings[a], bearings[b], bearings[c]],
        )
        .into_iter()
        .filter_map(|(r, t)| PoseSE3::new(r, t).ok())
        .collect()
    };

    if corrs.len() == 3 {
        let poses: Vec<PoseSE3> = solve(triples[0])
            .into_iter()
            .filter(|p| corrs.iter().all(|c| p.transform_point(&c.world).z > MIN_DEPTH))
            .collect();
        return if poses.is_empty() {
            Err(Error::NoSolution)
        } else {
            Ok(poses)
        };
    }

    let best = triples
        .iter()
        .take(SUPPORT_TRIPLES)
        .flat_map(|&t| solve(t))
        .map(|p| (reprojection_sse(&p, corrs, k), p))
        .filter(|(e, _)| e.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let Some((_, pose)) = best else {
        return Err(Error::NoSolution);
    };
    Ok(vec![polish(pose, corrs, k)])
}

/// Non-degenerate index triples, widest triangle first.
fn support_triples(corrs: &[Correspondence]) -> Vec<(usize, usize, usize)> {
    let n = corrs.len();
    let scale = corrs
        .iter()
        .flat_map(|a| corrs.iter().map(move |b| (a.world - b.world).norm_squared()))
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return Vec::new();
    }
    let area = |a: usize, b: usize, c: usize| {
        (corrs[b].world - corrs[a].world)
            .cross(&(corrs[c].world - corrs[a].world))
            .norm()
    };
    let mut triples: Vec<(f64, (usize, usize, usize))> = if n <= 12 {
        let mut v = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    v.push((area(a, b, c), (a, b, c)));
                }
            }
        }
        v
    } else {
        // farthest pair from point 0, then every third point
        let far = |from: usize| {
            (0..n)
                .max_by(|&x, &y| {
                    (corrs[x].world - corrs[from].world)
                        .norm_squared()
                        .total_cmp(&(corrs[y].world - corrs[from].world).norm_squared())
                })
                .unwrap_or(0)
        };
        let a = far(0);
        let b = far(a);
        (0..n)
            .filter(|&c| c != a && c != b)
            .map(|c| (area(a, b, c), (a.min(b), a.max(b), c)))
            .collect()
    };
    triples.retain(|(s, _)| *s > COLLINEAR_TOL * scale);
    triples.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    triples.into_iter().map(|(_, t)| t).collect()
}

fn reprojection_sse(pose: &PoseSE3, corrs: &[Correspondence], k: &CameraIntrinsics) -> f64 {
    corrs
        .iter()
        .map(|c| {
            let p = pose.transform_point(&c.world);
            if p.z <= MIN_DEPTH {
                f64::INFINITY
            } else {
                (k.project(&p) - c.image).norm_squared()
            }
        })
        .sum()
}

/// Gauss-Newton on pixel reprojection error with step halving.
fn polish(mut pose: PoseSE3, corrs: &[Correspondence], k: &CameraIntrinsics) -> PoseSE3 {
    let mut cost = reprojection_sse(&pose, corrs, k);
    for _ in 0..POLISH_ITERATIONS {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for c in corrs {
            let rx = pose.rotation() * c.world;
            let p = rx + pose.translation();
            let r = k.project(&p) - c.image;
            let iz = 1.0 / p.z;
            let du_dp = Matrix2x3::new(
                k.fx() * iz,
                0.0,
                -k.fx() * p.x * iz * iz,
                0.0,
                k.fy() * iz,
                -k.fy() * p.y * iz * iz,
            );
            let mut j = nalgebra::Matrix2x6::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&du_dp);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&(du_dp * -skew(&rx)));
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let Some(delta) = h.cholesky().map(|ch| ch.solve(&-g)) else {
            break;
        };
        let mut step = delta;
        let mut improved = false;
        for _ in 0..8 {
            let cand = pose.perturb_left(&step);
            let c = reprojection_sse(&cand, corrs, k);
            if c <= cost {
                pose = cand;
                improved = c < cost;
                cost = c;
                break;
            }
            step *= 0.5;
        }
        if !improved || delta.norm() < 1e-15 {
            break;
        }
    }
    pose
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project_center;
    use nalgebra::Rotation3;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    fn world_points() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(-0.5, -0.4, 4.0),
            Vector3::new(0.6, -0.3, 5.0),
            Vector3::new(0.1, 0.5, 4.5),
            Vector3::new(-0.3, 0.2, 6.0),
        ]
    }

    fn observe(pose: &PoseSE3, pts: &[Vector3<f64>]) -> Vec<Correspondence> {
        pts.iter()
            .map(|p| Correspondence::new(project_center(pose, &camera(), p).unwrap(), *p))
            .collect()
    }

    #[test]
    fn identity_pose_from_four_points() {
        let gt = PoseSE3::identity();
        let sols = pnp_from_centers(&observe(&gt, &world_points()), &camera()).unwrap();
        assert_eq!(sols.len(), 1);
        assert!((sols[0].translation() - gt.translation()).norm() < 1e-6);
        assert!(sols[0].rotation_angle_to(&gt) < 1e-8);
    }

    #[test]
    fn yawed_translated_pose() {
        let gt = PoseSE3::from_rotation(
            &Rotation3::from_axis_angle(&Vector3::y_axis(), 10f64.to_radians()),
            Vector3::new(0.3, -0.1, 0.5),
        );
        let sols = pnp_from_centers(&observe(&gt, &world_points()), &camera()).unwrap();
        assert!((sols[0].translation() - gt.translation()).norm() < 1e-6);
        assert!(sols[0].rotation_angle_to(&gt) < 1e-6);
    }

    #[test]
    fn three_points_include_truth() {
        let gt = PoseSE3::from_rotation(&Rotation3::from_euler_angles(0.05, -0.1, 0.2), Vector3::new(0.1, 0.2, 0.3));
        let corrs = observe(&gt, &world_points()[..3]);
        let sols = pnp_from_centers(&corrs, &camera()).unwrap();
        assert!(!sols.is_empty() && sols.len() <= 4);
        let best = sols
            .iter()
            .map(|p| (p.translation() - gt.translation()).norm() + p.rotation_angle_to(&gt))
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-8);
        for p in &sols {
            for c in &corrs {
                let uv = project_center(p, &camera(), &c.world).unwrap();
                assert!((uv - c.image).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts = [Vector3::new(0.0, 0.0, 4.0), Vector3::new(0.5, 0.0, 5.0), Vector3::new(1.0, 0.0, 6.0)];
        let corrs = observe(&PoseSE3::identity(), &pts);
        assert!(matches!(pnp_from_centers(&corrs, &camera()), Err(Error::DegenerateConfiguration(_))));
        let mut four = corrs.clone();
        four.push(observe(&PoseSE3::identity(), &[Vector3::new(1.5, 0.0, 7.0)])[0]);
        assert!(matches!(pnp_from_centers(&four, &camera()), Err(Error::DegenerateConfiguration(_))));
        assert!(matches!(pnp_from_centers(&corrs[..2], &camera()), Err(Error::DegenerateConfiguration(_))));
    }
}
