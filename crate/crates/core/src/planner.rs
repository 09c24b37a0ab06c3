//! Sampling planner: constant-curvature candidates, per-sample cost,
//! minimum expected cost selection and open-loop rollout under pose error.

use crate::error::{Error, Result};
use crate::geometry::{rigid_align_trajectory, wrap_angle, Point2, Pose2, PoseOffset, Trajectory};
use crate::world::Actor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub collision: f64,
    pub lat_acc: f64,
    pub jerk: f64,
    pub progress: f64,
    pub route: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub n_candidates: usize,
    pub horizon: f64,
    pub dt: f64,
    pub speed: f64,
    /// Curvature span `(min, max)` in 1/m.
    pub curvature_range: (f64, f64),
    pub weights: CostWeights,
    /// SDV footprint `(length, width)`.
    pub sdv_size: (f64, f64),
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            n_candidates: 41,
            horizon: 5.0,
            dt: 0.1,
            speed: 10.0,
            curvature_range: (-0.01, 0.01),
            weights: CostWeights {
                collision: 1000.0,
                lat_acc: 1.0,
                jerk: 0.1,
                progress: 1.0,
                route: 2.0,
            },
            sdv_size: (4.8, 2.0),
        }
    }
}

impl PlannerConfig {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let others = w.lat_acc + w.jerk + w.progress + w.route;
        let ok = self.n_candidates >= 1
            && self.horizon > 0.0
            && self.dt > 0.0
            && self.speed >= 0.0
            && self.curvature_range.0 <= self.curvature_range.1
            && [w.collision, w.lat_acc, w.jerk, w.progress, w.route].iter().all(|&v| v >= 0.0)
            && w.collision >= 10.0 * others
            && self.sdv_size.0 > 0.0
            && self.sdv_size.1 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("planner config {self:?}")))
        }
    }

    /// Candidate curvatures, evenly spaced over the range.
    pub fn curvatures(&self) -> Vec<f64> {
        let (lo, hi) = self.curvature_range;
        if self.n_candidates == 1 {
            return vec![(lo + hi) / 2.0];
        }
        let n = self.n_candidates - 1;
        (0..=n)
            .map(|i| lo + (hi - lo) * i as f64 / n as f64)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Pose2,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Pose2, length: f64, width: f64) -> Self {
        Self { center, length, width }
    }

    pub fn corners(&self) -> [Point2; 4] {
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|c| self.center.apply(c))
    }

    fn radius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    /// Separating-axis test; touching boxes count as intersecting.
    pub fn intersects(&self, other: &OrientedBox) -> bool {
        let d = [other.center.x - self.center.x, other.center.y - self.center.y];
        let reach = self.radius() + other.radius();
        if d[0] * d[0] + d[1] * d[1] > reach * reach {
            return false;
        }
        let a = self.corners();
        let b = other.corners();
        for yaw in [self.center.yaw, other.center.yaw] {
            let (s, c) = yaw.sin_cos();
            for axis in [[c, s], [-s, c]] {
                let proj = |pts: &[Point2; 4]| {
                    let v = pts.map(|p| p[0] * axis[0] + p[1] * axis[1]);
                    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (lo, hi)
                };
                let (a0, a1) = proj(&a);
                let (b0, b1) = proj(&b);
                if a1 < b0 || b1 < a0 {
                    return false;
                }
            }
        }
        true
    }
}

/// Constant-speed, constant-curvature path starting at `start`.
pub fn arc(start: &Pose2, curvature: f64, speed: f64, steps: usize, dt: f64) -> Result<Trajectory> {
    let poses = (0..=steps).map(|i| {
        let s = speed * dt * i as f64;
        let local = if curvature == 0.0 {
            Pose2::new(s, 0.0, 0.0)
        } else {
            let th = curvature * s;
            Pose2::new(th.sin() / curvature, (1.0 - th.cos()) / curvature, th)
        };
        start.compose(&local)
    });
    Trajectory::from_poses(poses, 0.0, dt)
}

/// One arc per candidate curvature, in the order of
/// [`PlannerConfig::curvatures`].
pub fn sample_trajectories(start: &Pose2, cfg: &PlannerConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    cfg.curvatures()
        .into_iter()
        .map(|k| arc(start, k, cfg.speed, cfg.steps(), cfg.dt))
        .collect()
}

/// Polyline with cumulative arc length for projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    points: Vec<Point2>,
    cumulative: Vec<f64>,
}

impl Route {
    pub fn new(points: Vec<Point2>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument("route needs at least two points".into()));
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let len = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            if len == 0.0 {
                return Err(Error::InvalidArgument("route has repeated points".into()));
            }
            cumulative.push(cumulative.last().expect("non-empty") + len);
        }
        Ok(Self { points, cumulative })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    /// Arc length of the closest route point and the signed lateral offset
    /// (positive to the left of the direction of travel).
    pub fn project(&self, p: Point2) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for (i, w) in self.points.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let seg = [b[0] - a[0], b[1] - a[1]];
            let len2 = seg[0] * seg[0] + seg[1] * seg[1];
            let rel = [p[0] - a[0], p[1] - a[1]];
            let u = ((rel[0] * seg[0] + rel[1] * seg[1]) / len2).clamp(0.0, 1.0);
            let q = [a[0] + u * seg[0], a[1] + u * seg[1]];
            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            if d2 < best.0 {
                let cross = seg[0] * rel[1] - seg[1] * rel[0];
                let side = if cross < 0.0 { -1.0 } else { 1.0 };
                best = (d2, self.cumulative[i] + u * len2.sqrt(), side * d2.sqrt());
            }
        }
        (best.1, best.2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub collision: f64,
    pub lateral_acceleration: f64,
    pub jerk: f64,
    pub progress: f64,
    pub route_deviation: f64,
    pub total: f64,
}

/// Comfort and route terms of a trajectory; independent of actors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotionStats {
    /// Largest `|v^2 k|` with each step read as a circular arc.
    pub lateral_acceleration: f64,
    /// Largest third finite difference of position over `dt^3`.
    pub jerk: f64,
    pub progress: f64,
    pub route_deviation: f64,
}

pub fn motion_stats(tau: &Trajectory, route: &Route) -> MotionStats {
    let w = tau.waypoints();
    let mut lat: f64 = 0.0;
    for p in w.windows(2) {
        let dt = p[1].t - p[0].t;
        let chord = (p[1].pose.x - p[0].pose.x).hypot(p[1].pose.y - p[0].pose.y);
        let dth = wrap_angle(p[1].pose.yaw - p[0].pose.yaw).unwrap_or(0.0);
        let half = dth / 2.0;
        let s = if half == 0.0 { chord } else { chord * half / half.sin() };
        lat = lat.max((s * dth / (dt * dt)).abs());
    }
    let mut jerk: f64 = 0.0;
    for p in w.windows(4) {
        let dt = (p[3].t - p[0].t) / 3.0;
        let jx = p[3].pose.x - 3.0 * p[2].pose.x + 3.0 * p[1].pose.x - p[0].pose.x;
        let jy = p[3].pose.y - 3.0 * p[2].pose.y + 3.0 * p[1].pose.y - p[0].pose.y;
        jerk = jerk.max(jx.hypot(jy) / dt.powi(3));
    }
    let (s0, _) = route.project(tau.first().pose.translation());
    let (s1, _) = route.project(tau.last().pose.translation());
    let dev = w
        .iter()
        .map(|p| route.project(p.pose.translation()).1.abs())
        .sum::<f64>()
        / w.len() as f64;
    MotionStats {
        lateral_acceleration: lat,
        jerk,
        progress: s1 - s0,
        route_deviation: dev,
    }
}

fn same_timestamps(a: &Trajectory, b: &Trajectory) -> bool {
    a.len() == b.len() && a.times().zip(b.times()).all(|(x, y)| (x - y).abs() < 1e-9)
}

/// Whether the SDV box along `tau` overlaps the actor box along `path` at
/// any shared timestep.
pub fn first_overlap(tau: &Trajectory, sdv: (f64, f64), path: &Trajectory, actor: (f64, f64)) -> Result<Option<f64>> {
    if !same_timestamps(tau, path) {
        return Err(Error::HorizonMismatch(format!(
            "{} vs {} waypoints",
            tau.len(),
            path.len()
        )));
    }
    for (a, b) in tau.waypoints().iter().zip(path.waypoints()) {
        let me = OrientedBox::new(a.pose, sdv.0, sdv.1);
        let other = OrientedBox::new(b.pose, actor.0, actor.1);
        if me.intersects(&other) {
            return Ok(Some(a.t));
        }
    }
    Ok(None)
}

fn combine(stats: &MotionStats, collision: f64, w: &CostWeights) -> CostBreakdown {
    let progress = -stats.progress;
    CostBreakdown {
        collision,
        lateral_acceleration: stats.lateral_acceleration,
        jerk: stats.jerk,
        progress,
        route_deviation: stats.route_deviation,
        total: w.collision * collision
            + w.lat_acc * stats.lateral_acceleration
            + w.jerk * stats.jerk
            + w.progress * progress
            + w.route * stats.route_deviation,
    }
}

/// Cost of `tau` against one joint forecast sample, given as one path per
/// actor with the actors' footprints.
pub fn cost(
    tau: &Trajectory,
    sample: &[(&Trajectory, (f64, f64))],
    route: &Route,
    cfg: &PlannerConfig,
) -> Result<CostBreakdown> {
    let mut collision = 0.0;
    for (path, size) in sample {
        if first_overlap(tau, cfg.sdv_size, path, *size)?.is_some() {
            collision = 1.0;
            break;
        }
    }
    Ok(combine(&motion_stats(tau, route), collision, &cfg.weights))
}

/// Joint forecast sample `s`: the `s`-th forecast of every actor.
pub fn forecast_sample(actors: &[Actor], s: usize) -> Vec<(&Trajectory, (f64, f64))> {
    actors
        .iter()
        .map(|a| (&a.forecasts[s], (a.length, a.width)))
        .collect()
}

/// Index of the candidate with the least total cost summed over all
/// forecast samples; ties go to the smallest `|curvature|`, then the
/// lowest index.
pub fn select_plan_index(
    candidates: &[Trajectory],
    curvatures: &[f64],
    actors: &[Actor],
    route: &Route,
    cfg: &PlannerConfig,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidates".into()));
    }
    let n_samples = actors.iter().map(|a| a.forecasts.len()).min().unwrap_or(1).max(1);
    let mut best: Option<(f64, f64, usize)> = None;
    for (i, tau) in candidates.iter().enumerate() {
        let stats = motion_stats(tau, route);
        let mut total = 0.0;
        for s in 0..n_samples {
            let mut collision = 0.0;
            for a in actors {
                let path = a.forecasts.get(s).unwrap_or(&a.gt);
                if first_overlap(tau, cfg.sdv_size, path, (a.length, a.width))?.is_some() {
                    collision = 1.0;
                    break;
                }
            }
            total += combine(&stats, collision, &cfg.weights).total;
        }
        let k = curvatures.get(i).map_or(0.0, |k| k.abs());
        let better = match best {
            None => true,
            Some((bt, bk, _)) => total < bt || (total == bt && k < bk),
        };
        if better {
            best = Some((total, k, i));
        }
    }
    Ok(best.expect("non-empty").2)
}

pub fn select_plan(
    candidates: &[Trajectory],
    curvatures: &[f64],
    actors: &[Actor],
    route: &Route,
    cfg: &PlannerConfig,
) -> Result<Trajectory> {
    Ok(candidates[select_plan_index(candidates, curvatures, actors, route, cfg)?].clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub executed: Trajectory,
    pub collided: bool,
    pub first_collision_t: Option<f64>,
}

/// Executes `plan` open loop when the believed start differs from the truth
/// by `pose_error`, and checks the executed path against the actors' ground
/// truth up to `horizon`.
pub fn rollout_open_loop(
    plan: &Trajectory,
    pose_error: &PoseOffset,
    actors: &[Actor],
    sdv_size: (f64, f64),
    horizon: f64,
) -> Result<RolloutResult> {
    let executed = rigid_align_trajectory(plan, pose_error);
    let t_end = plan.first().t + horizon + 1e-9;
    let mut first: Option<f64> = None;
    for a in actors {
        if !same_timestamps(&executed, &a.gt) {
            return Err(Error::HorizonMismatch("actor and plan timestamps differ".into()));
        }
        for (p, q) in executed.waypoints().iter().zip(a.gt.waypoints()) {
            if p.t > t_end {
                break;
            }
            let me = OrientedBox::new(p.pose, sdv_size.0, sdv_size.1);
            if me.intersects(&OrientedBox::new(q.pose, a.length, a.width)) {
                first = Some(first.map_or(p.t, |f: f64| f.min(p.t)));
                break;
            }
        }
    }
    Ok(RolloutResult {
        executed,
        collided: first.is_some(),
        first_collision_t: first,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::ActorKind;
    use proptest::prelude::*;

    fn straight_route() -> Route {
        Route::new((0..=200).map(|i| [i as f64, 0.0]).collect()).unwrap()
    }

    fn parked(x: f64, y: f64, steps: usize, dt: f64) -> Actor {
        let gt = Trajectory::from_poses((0..=steps).map(|_| Pose2::new(x, y, 0.0)), 0.0, dt).unwrap();
        Actor {
            kind: ActorKind::Parked,
            length: 4.5,
            width: 1.9,
            forecasts: vec![gt.clone(); 3],
            gt,
        }
    }

    #[test]
    fn single_straight_candidate() {
        let cfg = PlannerConfig {
            n_candidates: 1,
            curvature_range: (0.0, 0.0),
            ..PlannerConfig::default()
        };
        let c = sample_trajectories(&Pose2::new(1.0, 2.0, 0.3), &cfg).unwrap();
        assert_eq!(c.len(), 1);
        let (a, b) = (c[0].first().pose, c[0].last().pose);
        let len = (b.x - a.x).hypot(b.y - a.y);
        assert!((len - cfg.speed * cfg.horizon).abs() < 1e-9);
    }

    #[test]
    fn candidates_start_at_start_and_are_mirror_symmetric() {
        let cfg = PlannerConfig::default();
        let start = Pose2::IDENTITY;
        let c = sample_trajectories(&start, &cfg).unwrap();
        let n = c.len();
        for tau in &c {
            assert_eq!(tau.first().pose, start);
        }
        for i in 0..n {
            for (p, q) in c[i].poses().zip(c[n - 1 - i].poses()) {
                assert!((p.x - q.x).abs() < 1e-9 && (p.y + q.y).abs() < 1e-9 && (p.yaw + q.yaw).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn straight_path_without_actors_is_free_and_smooth() {
        let cfg = PlannerConfig::default();
        let tau = arc(&Pose2::IDENTITY, 0.0, 10.0, 50, 0.1).unwrap();
        let c = cost(&tau, &[], &straight_route(), &cfg).unwrap();
        assert_eq!(c.collision, 0.0);
        assert!(c.jerk < 1e-6);
        assert_eq!(c.lateral_acceleration, 0.0);
        assert!((c.progress + 50.0).abs() < 1e-9);
        assert!(c.route_deviation < 1e-12);
        let w = cfg.weights;
        let expected = w.collision * c.collision
            + w.lat_acc * c.lateral_acceleration
            + w.jerk * c.jerk
            + w.progress * c.progress
            + w.route * c.route_deviation;
        assert!((c.total - expected).abs() < 1e-12);
    }

    #[test]
    fn parked_actor_on_path_collides() {
        let cfg = PlannerConfig::default();
        let tau = arc(&Pose2::IDENTITY, 0.0, 10.0, 50, 0.1).unwrap();
        let a = parked(20.0, 0.0, 50, 0.1);
        let c = cost(&tau, &[(&a.gt, (a.length, a.width))], &straight_route(), &cfg).unwrap();
        assert_eq!(c.collision, 1.0);
        let t = first_overlap(&tau, cfg.sdv_size, &a.gt, (a.length, a.width)).unwrap().unwrap();
        assert!((t - 1.6).abs() < 1e-9);
        let short = arc(&Pose2::IDENTITY, 0.0, 10.0, 10, 0.1).unwrap();
        assert!(matches!(
            cost(&short, &[(&a.gt, (a.length, a.width))], &straight_route(), &cfg),
            Err(Error::HorizonMismatch(_))
        ));
    }

    #[test]
    fn lateral_acceleration_of_arc() {
        for k in [0.001, -0.004, 0.01] {
            let tau = arc(&Pose2::new(3.0, 1.0, 0.2), k, 10.0, 50, 0.1).unwrap();
            let m = motion_stats(&tau, &straight_route());
            assert!((m.lateral_acceleration - 100.0 * k.abs()).abs() < 1e-9, "{k}: {}", m.lateral_acceleration);
        }
    }

    #[test]
    fn non_colliding_candidate_wins() {
        let cfg = PlannerConfig::default();
        let a = parked(25.0, 0.0, 50, 0.1);
        let ks = [0.0, 0.01];
        let cands: Vec<Trajectory> = ks.iter().map(|&k| arc(&Pose2::IDENTITY, k, 10.0, 50, 0.1).unwrap()).collect();
        let i = select_plan_index(&cands, &ks, std::slice::from_ref(&a), &straight_route(), &cfg).unwrap();
        assert_eq!(i, 1);
        let one = select_plan_index(&cands[..1], &ks[..1], std::slice::from_ref(&a), &straight_route(), &cfg).unwrap();
        assert_eq!(one, 0);
    }

    #[test]
    fn ties_prefer_smallest_curvature() {
        let cfg = PlannerConfig::default();
        let tau = arc(&Pose2::IDENTITY, 0.0, 10.0, 50, 0.1).unwrap();
        let cands = vec![tau.clone(), tau.clone(), tau];
        let i = select_plan_index(&cands, &[0.005, -0.001, 0.002], &[], &straight_route(), &cfg).unwrap();
        assert_eq!(i, 1);
    }

    #[test]
    fn zero_error_rollout_reproduces_plan() {
        let plan = arc(&Pose2::new(5.0, 0.0, 0.0), 0.002, 10.0, 50, 0.1).unwrap();
        let r = rollout_open_loop(&plan, &PoseOffset::ZERO, &[], (4.8, 2.0), 5.0).unwrap();
        assert_eq!(r.executed, plan);
        assert!(!r.collided && r.first_collision_t.is_none());
    }

    fn wall(y: f64, steps: usize) -> Vec<Actor> {
        // Boxes whose near edge lies `y` metres left of the SDV's side.
        let dt = 0.1;
        (0..40)
            .map(|i| {
                let mut a = parked(10.0 + 2.0 * i as f64, 1.0 + y + 0.5, steps, dt);
                a.length = 2.0;
                a.width = 1.0;
                let gt = Trajectory::from_poses(
                    (0..=steps).map(|_| Pose2::new(10.0 + 2.0 * i as f64, 1.0 + y + 0.5, 0.0)),
                    0.0,
                    dt,
                )
                .unwrap();
                a.forecasts = vec![gt.clone()];
                a.gt = gt;
                a
            })
            .collect()
    }

    #[test]
    fn yaw_error_drives_into_offset_wall() {
        // 45 sin(1.5 deg) = 1.18 m of drift against a 1.0 m gap.
        let plan = arc(&Pose2::IDENTITY, 0.0, 10.0, 50, 0.1).unwrap();
        let actors = wall(1.0, 50);
        let ok = rollout_open_loop(&plan, &PoseOffset::ZERO, &actors, (4.8, 2.0), 5.0).unwrap();
        assert!(!ok.collided);
        let err = PoseOffset::new(0.0, 0.0, -1.5f64.to_radians());
        let bad = rollout_open_loop(&plan, &err, &actors, (4.8, 2.0), 5.0).unwrap();
        assert!(bad.collided);
        assert!(bad.first_collision_t.unwrap() < 5.0);
    }

    #[test]
    fn collision_time_non_increasing_in_yaw_error() {
        let plan = arc(&Pose2::IDENTITY, 0.0, 10.0, 50, 0.1).unwrap();
        let actors = wall(1.0, 50);
        let mut last = f64::INFINITY;
        for i in 0..30 {
            let deg = 1.2 + 0.1 * i as f64;
            let err = PoseOffset::new(0.0, 0.0, -deg.to_radians());
            let r = rollout_open_loop(&plan, &err, &actors, (4.8, 2.0), 5.0).unwrap();
            let t = r.first_collision_t.unwrap_or(f64::INFINITY);
            assert!(t <= last, "{deg} deg: {t} after {last}");
            last = t;
        }
        assert!(last < 5.0);
    }

    #[test]
    fn sat_matches_corner_containment_for_axis_aligned_boxes() {
        let a = OrientedBox::new(Pose2::IDENTITY, 4.0, 2.0);
        assert!(a.intersects(&OrientedBox::new(Pose2::new(3.9, 0.0, 0.0), 4.0, 2.0)));
        assert!(!a.intersects(&OrientedBox::new(Pose2::new(4.1, 0.0, 0.0), 4.0, 2.0)));
        assert!(!a.intersects(&OrientedBox::new(Pose2::new(0.0, 2.05, 0.0), 4.0, 2.0)));
        let diamond = OrientedBox::new(Pose2::new(3.3, 1.3, std::f64::consts::FRAC_PI_4), 1.0, 1.0);
        assert!(!a.intersects(&diamond));
        let diamond = OrientedBox::new(Pose2::new(2.6, 1.0, std::f64::consts::FRAC_PI_4), 1.0, 1.0);
        assert!(a.intersects(&diamond));
    }

    #[test]
    fn route_projection() {
        let r = Route::new(vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]).unwrap();
        let (s, d) = r.project([5.0, 1.0]);
        assert!((s - 5.0).abs() < 1e-12 && (d - 1.0).abs() < 1e-12);
        let (s, d) = r.project([11.0, 5.0]);
        assert!((s - 15.0).abs() < 1e-12 && (d + 1.0).abs() < 1e-12);
        assert!(Route::new(vec![[0.0, 0.0]]).is_err());
    }

    proptest! {
        #[test]
        fn selection_invariant_to_weight_scale(seed in 0u64..200, a in 0.1..10.0f64) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let route = straight_route();
            let mut cfg = PlannerConfig { n_candidates: 9, ..PlannerConfig::default() };
            let y = rng.random_range(-3.0..3.0);
            let actors = vec![parked(rng.random_range(15.0..45.0), y, cfg.steps(), cfg.dt)];
            let ks = cfg.curvatures();
            let cands = sample_trajectories(&Pose2::IDENTITY, &cfg).unwrap();
            let i0 = select_plan_index(&cands, &ks, &actors, &route, &cfg).unwrap();
            let w = &mut cfg.weights;
            w.collision *= a; w.lat_acc *= a; w.jerk *= a; w.progress *= a; w.route *= a;
            let i1 = select_plan_index(&cands, &ks, &actors, &route, &cfg).unwrap();
            prop_assert_eq!(i0, i1);
        }

        #[test]
        fn cost_is_deterministic(seed in 0u64..100) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(-0.01..0.01);
            let cfg = PlannerConfig::default();
            let tau = arc(&Pose2::IDENTITY, k, 10.0, 50, 0.1).unwrap();
            let a = parked(rng.random_range(10.0..40.0), rng.random_range(-3.0..3.0), 50, 0.1);
            let s = [(&a.gt, (a.length, a.width))];
            prop_assert_eq!(cost(&tau, &s, &straight_route(), &cfg).unwrap(), cost(&tau, &s, &straight_route(), &cfg).unwrap());
        }
    }
}
