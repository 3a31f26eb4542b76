use log::warn;
use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::association::AssociationSet;
use crate::error::{Error, Result};
use crate::geometry::{inscribed_ellipse, project_quadric, CameraIntrinsics, DualQuadric, Ellipse2D, PoseSE3};
use crate::semantics::{Detection, ObjectLandmark};

/// Which ellipse of the projected quadric is compared with the detection ellipse.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualMode {
    /// The projected outline itself (generally rotated).
    ProjectedEllipse,
    /// The ellipse inscribed in the projected outline's bounding box, clipped
    /// to the image like detector boxes are. At the true pose this coincides
    /// with the detection ellipse of an exact, possibly truncated, box.
    #[default]
    BoxAligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub tolerance: f64,
    /// Central-difference step for the residual Jacobian.
    pub jacobian_step: f64,
    /// Huber scale in pixels; `None` for plain least squares.
    pub robust_scale: Option<f64>,
    pub residual: ResidualMode,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            initial_damping: 1e-3,
            tolerance: 1e-8,
            jacobian_step: 1e-6,
            robust_scale: None,
            residual: ResidualMode::default(),
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.max_iterations > 0
            && self.initial_damping > 0.0
            && self.tolerance > 0.0
            && self.jacobian_step > 0.0
            && self.robust_scale.is_none_or(|s| s > 0.0);
        if positive {
            Ok(())
        } else {
            Err(Error::InvariantViolation("refinement parameters must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementOutcome {
    pub pose: PoseSE3,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Matches excluded because their quadric could not be projected at the
    /// initial pose.
    pub dropped: usize,
}

#[derive(Debug, Clone)]
struct Term {
    detection: Ellipse2D,
    quadric: DualQuadric,
    weight: f64,
}

const RESIDUAL_DIM: usize = 4;
type Residual = [f64; RESIDUAL_DIM];

/// Weighted sum of squared ellipse Wasserstein distances over matched
/// detection/object pairs, as a function of the camera pose.
#[derive(Debug, Clone)]
pub struct WassersteinObjective {
    terms: Vec<Term>,
    camera: CameraIntrinsics,
    mode: ResidualMode,
    robust_scale: Option<f64>,
}

impl WassersteinObjective {
    /// Collects the inlier matches; each is weighted by the object's
    /// probability of carrying the detection's label.
    pub fn new(
        matches: &AssociationSet,
        map: &[ObjectLandmark],
        dets: &[Detection],
        camera: &CameraIntrinsics,
        mode: ResidualMode,
    ) -> Result<Self> {
        let mut terms = Vec::new();
        for m in matches.inliers() {
            let det = dets.get(m.detection).ok_or(Error::UnknownNode(m.detection))?;
            let obj = map.get(m.object).ok_or(Error::UnknownNode(m.object))?;
            terms.push(Term {
                detection: det.ellipse(),
                quadric: obj.quadric,
                weight: obj.distribution.get(det.label),
            });
        }
        if terms.is_empty() {
            return Err(Error::NoInliers);
        }
        Ok(Self {
            terms,
            camera: *camera,
            mode,
            robust_scale: None,
        })
    }

    pub fn with_robust_scale(mut self, scale: Option<f64>) -> Self {
        self.robust_scale = scale;
        self
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight).sum()
    }

    /// Scales every term weight, e.g. to check scale invariance.
    pub fn scale_weights(&mut self, factor: f64) {
        self.terms.iter_mut().for_each(|t| t.weight *= factor);
    }

    fn residual(&self, term: &Term, pose: &PoseSE3) -> Result<Residual> {
        let model = project_quadric(&term.quadric, pose, &self.camera)?;
        let d = term.detection.center();
        match self.mode {
            ResidualMode::ProjectedEllipse => {
                let dc = model.center() - d;
                let bures = crate::geometry::ellipse_bures_squared(&model, &term.detection).sqrt();
                Ok([dc.x, dc.y, bures, 0.0])
            }
            ResidualMode::BoxAligned => {
                let bbox = model
                    .bounding_box()
                    .clamp_to(self.camera.width(), self.camera.height())?;
                let e = inscribed_ellipse(&bbox)?;
                let dc = e.center() - d;
                // both covariances are diagonal: the Bures term is the
                // Euclidean distance between semi-axis pairs
                let (ma, mb) = (e.covariance()[(0, 0)].sqrt(), e.covariance()[(1, 1)].sqrt());
                let (da, db) = (
                    term.detection.covariance()[(0, 0)].sqrt(),
                    term.detection.covariance()[(1, 1)].sqrt(),
                );
                Ok([dc.x, dc.y, ma - da, mb - db])
            }
        }
    }

    fn huber(&self, sq: f64) -> (f64, f64) {
        match self.robust_scale {
            Some(delta) if sq > delta * delta => {
                let r = sq.sqrt();
                (2.0 * delta * r - delta * delta, delta / r)
            }
            _ => (sq, 1.0),
        }
    }

    fn residuals(&self, pose: &PoseSE3) -> Result<Vec<Residual>> {
        self.terms.iter().map(|t| self.residual(t, pose)).collect()
    }

    /// `Σ w · r²`, or its Huber-robustified form.
    pub fn cost(&self, pose: &PoseSE3) -> Result<f64> {
        let mut total = 0.0;
        for t in &self.terms {
            let r = self.residual(t, pose)?;
            let sq: f64 = r.iter().map(|v| v * v).sum();
            total += t.weight * self.huber(sq).0;
        }
        Ok(total)
    }

    /// Per-term squared Wasserstein distance, `None` where projection fails.
    pub fn squared_distances(&self, pose: &PoseSE3) -> Vec<Option<f64>> {
        self.terms
            .iter()
            .map(|t| self.residual(t, pose).ok().map(|r| r.iter().map(|v| v * v).sum()))
            .collect()
    }

    /// Residual Jacobian by central differences in the left tangent space.
    fn jacobian(&self, pose: &PoseSE3, step: f64) -> Vec<[[f64; 6]; RESIDUAL_DIM]> {
        let mut jac = vec![[[0.0; 6]; RESIDUAL_DIM]; self.terms.len()];
        for axis in 0..6 {
            let mut delta = Vector6::zeros();
            delta[axis] = step;
            let plus = pose.perturb_left(&delta);
            let minus = pose.perturb_left(&-delta);
            for (ti, term) in self.terms.iter().enumerate() {
                if let (Ok(rp), Ok(rm)) = (self.residual(term, &plus), self.residual(term, &minus)) {
                    for row in 0..RESIDUAL_DIM {
                        jac[ti][row][axis] = (rp[row] - rm[row]) / (2.0 * step);
                    }
                }
            }
        }
        jac
    }

    /// Gradient of [`cost`](Self::cost) assembled from the numeric residual
    /// Jacobian: `Σ 2 w ψ Jᵀ r` with `ψ` the Huber reweighting.
    pub fn gradient(&self, pose: &PoseSE3, step: f64) -> Result<Vector6<f64>> {
        let res = self.residuals(pose)?;
        let jac = self.jacobian(pose, step);
        let (_, g) = self.normal_equations(&res, &jac);
        Ok(2.0 * g)
    }

    fn normal_equations(&self, res: &[Residual], jac: &[[[f64; 6]; RESIDUAL_DIM]]) -> (Matrix6<f64>, Vector6<f64>) {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for ((term, r), j) in self.terms.iter().zip(res).zip(jac) {
            let sq: f64 = r.iter().map(|v| v * v).sum();
            let w = term.weight * self.huber(sq).1;
            if w == 0.0 {
                continue;
            }
            for row in 0..RESIDUAL_DIM {
                let jr = Vector6::from_row_slice(&j[row]);
                h += w * jr * jr.transpose();
                g += w * r[row] * jr;
            }
        }
        (h, g)
    }

    fn retain_projectable(&mut self, pose: &PoseSE3) -> usize {
        let before = self.terms.len();
        let keep: Vec<bool> = self.terms.iter().map(|t| self.residual(t, pose).is_ok()).collect();
        let mut flags = keep.into_iter();
        self.terms.retain(|_| flags.next().unwrap_or(false));
        before - self.terms.len()
    }
}

/// Damped Gauss-Newton (Levenberg-Marquardt) refinement of the camera pose
/// over the inlier matches.
///
/// Matches whose quadric cannot be projected at `initial` are dropped and
/// counted. Returns the initial pose untouched when its cost per unit weight
/// is already below 1e-12.
pub fn refine_pose(
    matches: &AssociationSet,
    map: &[ObjectLandmark],
    dets: &[Detection],
    initial: &PoseSE3,
    camera: &CameraIntrinsics,
    cfg: &RefinementConfig,
) -> Result<RefinementOutcome> {
    cfg.validate()?;
    let mut objective = WassersteinObjective::new(matches, map, dets, camera, cfg.residual)?
        .with_robust_scale(cfg.robust_scale);
    let dropped = objective.retain_projectable(initial);
    if objective.is_empty() {
        return Err(Error::DivergedBehindCamera { dropped });
    }
    if dropped > 0 {
        warn!("refinement dropped {dropped} matches that do not project at the initial pose");
    }
    run_lm(&objective, initial, cfg, dropped)
}

fn run_lm(
    objective: &WassersteinObjective,
    initial: &PoseSE3,
    cfg: &RefinementConfig,
    dropped: usize,
) -> Result<RefinementOutcome> {
    let initial_cost = objective.cost(initial)?;
    let weight_sum = objective.weight_sum();
    let mut outcome = RefinementOutcome {
        pose: *initial,
        initial_cost,
        final_cost: initial_cost,
        iterations: 0,
        dropped,
    };
    if weight_sum <= 0.0 || initial_cost <= 1e-12 * weight_sum {
        return Ok(outcome);
    }

    let mut pose = *initial;
    let mut cost = initial_cost;
    let mut damping = cfg.initial_damping;
    'outer: for iter in 0..cfg.max_iterations {
        outcome.iterations = iter + 1;
        let res = objective.residuals(&pose)?;
        let jac = objective.jacobian(&pose, cfg.jacobian_step);
        let (h, g) = objective.normal_equations(&res, &jac);
        loop {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += damping * h[(i, i)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&-g)) else {
                damping *= 10.0;
                if damping > 1e12 {
                    break 'outer;
                }
                continue;
            };
            let candidate = pose.perturb_left(&step);
            let cand_cost = objective.cost(&candidate).unwrap_or(f64::INFINITY);
            if cand_cost < cost {
                let decrease = cost - cand_cost;
                pose = candidate;
                cost = cand_cost;
                damping = (damping / 10.0).max(1e-15);
                if decrease <= cfg.tolerance * (cost + decrease) || step.norm() < 1e-14 {
                    break 'outer;
                }
                break;
            }
            damping *= 10.0;
            if damping > 1e12 {
                break 'outer;
            }
        }
    }
    outcome.pose = pose;
    outcome.final_cost = cost;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::semantics::{CategoryDistribution, CategoryId};
    use nalgebra::{UnitQuaternion, Vector3};

    struct Scene {
        map: Vec<ObjectLandmark>,
        dets: Vec<Detection>,
        matches: AssociationSet,
        pose: PoseSE3,
        camera: CameraIntrinsics,
    }

    fn scene() -> Scene {
        let camera = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap();
        let pose = PoseSE3::look_at(&Vector3::new(0.5, -4.0, 1.2), &Vector3::new(0.0, 0.0, 0.5), &Vector3::z()).unwrap();
        let spots = [
            ([0.0, 0.0, 0.5], [0.3, 0.2, 0.4], 0),
            ([1.0, 0.5, 0.3], [0.2, 0.2, 0.3], 1),
            ([-1.0, 0.8, 0.6], [0.4, 0.25, 0.2], 2),
            ([0.6, -0.8, 0.2], [0.15, 0.3, 0.2], 0),
            ([-0.7, -0.5, 0.9], [0.25, 0.2, 0.35], 1),
            ([0.2, 1.4, 0.4], [0.3, 0.3, 0.3], 2),
        ];
        let mut map = Vec::new();
        let mut dets = Vec::new();
        for (i, (p, s, label)) in spots.iter().enumerate() {
            let q = DualQuadric::new(
                Vector3::from(*p),
                UnitQuaternion::from_euler_angles(0.1 * i as f64, -0.2, 0.3 * i as f64),
                Vector3::from(*s),
            )
            .unwrap();
            let mut dist = vec![0.1; 3];
            dist[*label] = 0.8;
            map.push(ObjectLandmark::with_distribution(i as u64, q, CategoryDistribution::from_vec(dist).unwrap()));
            let bbox = project_quadric(&q, &pose, &camera).unwrap().bounding_box().clamp_to(640.0, 480.0).unwrap();
            dets.push(Detection::new(bbox, CategoryId(*label), 0.9).unwrap());
        }
        let matches = AssociationSet::from_pairs((0..spots.len()).map(|i| (i, i))).unwrap();
        Scene { map, dets, matches, pose, camera }
    }

    fn perturbed(pose: &PoseSE3, metres: f64, degrees: f64) -> PoseSE3 {
        let dir = Vector3::new(1.0, -2.0, 0.5).normalize();
        let axis = Vector3::new(0.3, 1.0, -0.4).normalize() * degrees.to_radians();
        pose.perturb_left(&Vector6::new(metres * dir.x, metres * dir.y, metres * dir.z, axis.x, axis.y, axis.z))
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let s = scene();
        let out = refine_pose(&s.matches, &s.map, &s.dets, &s.pose, &s.camera, &RefinementConfig::default()).unwrap();
        assert!(out.initial_cost < 1e-12, "{}", out.initial_cost);
        assert_eq!(out.pose, s.pose);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn converges_from_perturbation() {
        let s = scene();
        let start = perturbed(&s.pose, 0.2, 5.0);
        let cfg = RefinementConfig { max_iterations: 50, ..Default::default() };
        let out = refine_pose(&s.matches, &s.map, &s.dets, &start, &s.camera, &cfg).unwrap();
        assert!(out.final_cost <= out.initial_cost);
        let te = out.pose.translation_error_to(&s.pose);
        let re = out.pose.rotation_angle_to(&s.pose).to_degrees();
        assert!(te < 1e-3 && re < 0.1, "te {te} re {re}");
    }

    #[test]
    fn projected_ellipse_mode_decreases_cost() {
        let s = scene();
        let start = perturbed(&s.pose, 0.1, 2.0);
        let cfg = RefinementConfig { residual: ResidualMode::ProjectedEllipse, ..Default::default() };
        let out = refine_pose(&s.matches, &s.map, &s.dets, &start, &s.camera, &cfg).unwrap();
        assert!(out.final_cost < out.initial_cost);
        assert!(out.pose.translation_error_to(&s.pose) < start.translation_error_to(&s.pose));
    }

    #[test]
    fn zero_weight_match_is_inert() {
        let s = scene();
        let start = perturbed(&s.pose, 0.15, 3.0);
        let cfg = RefinementConfig::default();
        let base = refine_pose(&s.matches, &s.map, &s.dets, &start, &s.camera, &cfg).unwrap();

        // an extra detection of a label the object never carries
        let mut map = s.map.clone();
        map[0].distribution = CategoryDistribution::from_vec(vec![1.0, 0.0, 0.0]).unwrap();
        let mut dets = s.dets.clone();
        let wild = BoundingBox::new(10.0, 10.0, 90.0, 60.0).unwrap();
        dets.push(Detection::new(wild, CategoryId(2), 0.7).unwrap());
        let mut pairs: Vec<_> = (1..s.map.len()).map(|i| (i, i)).collect();
        pairs.push((s.dets.len(), 0));
        let with_zero = AssociationSet::from_pairs(pairs.clone()).unwrap();
        let without = AssociationSet::from_pairs(pairs[..pairs.len() - 1].to_vec()).unwrap();
        let a = refine_pose(&with_zero, &map, &dets, &start, &s.camera, &cfg).unwrap();
        let b = refine_pose(&without, &map, &dets, &start, &s.camera, &cfg).unwrap();
        assert_eq!(a.pose, b.pose);
        assert!(base.final_cost.is_finite());
    }

    #[test]
    fn weight_scale_invariance() {
        let s = scene();
        let start = perturbed(&s.pose, 0.2, 4.0);
        let cfg = RefinementConfig::default();
        let base = WassersteinObjective::new(&s.matches, &s.map, &s.dets, &s.camera, cfg.residual).unwrap();
        let reference = run_lm(&base, &start, &cfg, 0).unwrap();
        for factor in [1e-3, 0.5, 7.0, 1e4] {
            let mut scaled = base.clone();
            scaled.scale_weights(factor);
            let out = run_lm(&scaled, &start, &cfg, 0).unwrap();
            assert!((out.pose.translation() - reference.pose.translation()).norm() < 1e-9);
            assert!((out.pose.rotation() - reference.pose.rotation()).norm() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_cost_differences() {
        let s = scene();
        for mode in [ResidualMode::BoxAligned, ResidualMode::ProjectedEllipse] {
            let obj = WassersteinObjective::new(&s.matches, &s.map, &s.dets, &s.camera, mode).unwrap();
            let pose = perturbed(&s.pose, 0.1, 2.0);
            let g = obj.gradient(&pose, 1e-6).unwrap();
            let h = 1e-5;
            for axis in 0..6 {
                let mut d = Vector6::zeros();
                d[axis] = h;
                let fd = (obj.cost(&pose.perturb_left(&d)).unwrap() - obj.cost(&pose.perturb_left(&-d)).unwrap()) / (2.0 * h);
                let rel = (g[axis] - fd).abs() / fd.abs().max(g.norm() * 1e-3);
                assert!(rel < 1e-4, "{mode:?} axis {axis}: {} vs {fd}", g[axis]);
            }
        }
    }

    #[test]
    fn errors() {
        let s = scene();
        let cfg = RefinementConfig::default();
        let none = AssociationSet::default();
        assert!(matches!(
            refine_pose(&none, &s.map, &s.dets, &s.pose, &s.camera, &cfg),
            Err(Error::NoInliers)
        ));
        // camera turned around: nothing projects
        let behind = PoseSE3::look_at(&Vector3::new(0.5, -4.0, 1.2), &Vector3::new(0.5, -8.0, 1.2), &Vector3::z()).unwrap();
        assert!(matches!(
            refine_pose(&s.matches, &s.map, &s.dets, &behind, &s.camera, &cfg),
            Err(Error::DivergedBehindCamera { dropped: 6 })
        ));
        assert!(RefinementConfig { tolerance: 0.0, ..cfg }.validate().is_err());
    }
}
