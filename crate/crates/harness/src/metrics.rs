//! Pose jitter, localization recall and planning metrics.

use groundloc_core::matcher::OffsetGrid;
use groundloc_core::planner::{motion_stats, Route, RolloutResult};
use groundloc_core::{wrap_angle, Pose2, PoseOffset, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterSpec {
    pub max_trans: f64,
    /// Radians.
    pub max_rot: f64,
    pub seed: u64,
}

impl JitterSpec {
    pub fn new(max_trans: f64, max_rot: f64, seed: u64) -> Result<Self> {
        if !(max_trans >= 0.0 && max_rot >= 0.0 && max_trans.is_finite() && max_rot.is_finite()) {
            return Err(HarnessError::InvalidArgument(format!(
                "jitter maxima must be finite and non-negative, got {max_trans}, {max_rot}"
            )));
        }
        Ok(Self { max_trans, max_rot, seed })
    }

    /// Maps unit draws `u` in [-1, 1]^3 to a perturbation.
    pub fn scale(&self, u: [f64; 3]) -> PoseOffset {
        PoseOffset::new(self.max_trans * u[0], self.max_trans * u[1], self.max_rot * u[2])
    }
}

/// Three independent U(-1, 1) draws.
pub fn unit_draw(rng: &mut impl Rng) -> [f64; 3] {
    [
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
    ]
}

/// `gt` composed with a perturbation drawn per axis seeded by `spec.seed`.
pub fn jitter(gt: &Pose2, spec: &JitterSpec) -> Pose2 {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    gt.compose(&spec.scale(unit_draw(&mut rng)).as_pose())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecallReport {
    pub r1: f64,
    pub r2: f64,
    pub n_frames: usize,
}

/// Half-widths of the r@2 acceptance box.
pub const R2_HALF_XY: f64 = 0.075;
pub const R2_HALF_YAW_DEG: f64 = 0.75;
const EPS: f64 = 1e-9;

pub fn same_cell(grid: &OffsetGrid, a: &PoseOffset, b: &PoseOffset) -> bool {
    match (grid.nearest_index(a), grid.nearest_index(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

pub fn within_r2(a: &PoseOffset, b: &PoseOffset) -> bool {
    let dyaw = wrap_angle(a.dyaw - b.dyaw).unwrap_or(f64::INFINITY);
    (a.dx - b.dx).abs() <= R2_HALF_XY + EPS
        && (a.dy - b.dy).abs() <= R2_HALF_XY + EPS
        && dyaw.abs() <= R2_HALF_YAW_DEG.to_radians() + EPS
}

pub fn recall(estimates: &[PoseOffset], truths: &[PoseOffset], grid: &OffsetGrid) -> Result<RecallReport> {
    if estimates.len() != truths.len() {
        return Err(HarnessError::InvalidArgument(format!(
            "{} estimates for {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    let n = estimates.len();
    let (mut h1, mut h2) = (0usize, 0usize);
    for (e, t) in estimates.iter().zip(truths) {
        let hit1 = same_cell(grid, e, t);
        h1 += usize::from(hit1);
        h2 += usize::from(hit1 || within_r2(e, t));
    }
    let frac = |h: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(RecallReport {
        r1: frac(h1),
        r2: frac(h2),
        n_frames: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanningReport {
    /// Percent of rollouts that collide.
    pub collision_rate: f64,
    pub l2_human_at_5s: f64,
    pub lateral_acceleration: f64,
    pub jerk: f64,
    pub progress_at_5s: f64,
    pub n: usize,
}

/// Time at which the l2 and progress columns are read.
pub const REPORT_HORIZON: f64 = 5.0;

/// Aggregates rollouts against the human paths and routes of the same
/// scenarios. Progress is the route arc length gained by the 5 s mark.
pub fn planning_metrics(rollouts: &[RolloutResult], human: &[Trajectory], routes: &[&Route]) -> Result<PlanningReport> {
    if rollouts.len() != human.len() || rollouts.len() != routes.len() {
        return Err(HarnessError::InvalidArgument("rollouts, human paths and routes differ in count".into()));
    }
    let n = rollouts.len();
    let mut sums = [0.0; 5];
    for ((r, h), route) in rollouts.iter().zip(human).zip(routes) {
        let ex = &r.executed;
        if (ex.first().t - h.first().t).abs() > 1e-9 || (ex.last().t - h.last().t).abs() > 1e-9 {
            return Err(HarnessError::Core(groundloc_core::Error::HorizonMismatch(
                "executed and human paths cover different times".into(),
            )));
        }
        let t5 = (ex.first().t + REPORT_HORIZON).min(ex.last().t);
        let (a, b) = (ex.pose_at(t5), h.pose_at(t5));
        let stats = motion_stats(ex, route);
        let s0 = route.project(ex.first().pose.translation()).0;
        let s5 = route.project(a.translation()).0;
        sums[0] += f64::from(u8::from(r.collided));
        sums[1] += (a.x - b.x).hypot(a.y - b.y);
        sums[2] += stats.lateral_acceleration;
        sums[3] += stats.jerk;
        sums[4] += s5 - s0;
    }
    let mean = |v: f64| if n == 0 { 0.0 } else { v / n as f64 };
    Ok(PlanningReport {
        collision_rate: 100.0 * mean(sums[0]),
        l2_human_at_5s: mean(sums[1]),
        lateral_acceleration: mean(sums[2]),
        jerk: mean(sums[3]),
        progress_at_5s: mean(sums[4]),
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use groundloc_core::matcher::default_offset_grid;
    use groundloc_core::planner::arc;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn zero_jitter_is_identity() {
        let gt = Pose2::new(3.0, -1.0, 0.4);
        assert_eq!(jitter(&gt, &JitterSpec::new(0.0, 0.0, 9).unwrap()), gt);
        assert!(JitterSpec::new(-0.1, 0.0, 0).is_err());
    }

    #[test]
    fn jitter_draws_stay_in_support() {
        let spec = JitterSpec::new(0.5, 1.5f64.to_radians(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1_000_000 {
            let o = spec.scale(unit_draw(&mut rng));
            assert!(o.dx.abs() <= 0.5 && o.dy.abs() <= 0.5 && o.dyaw.abs() <= spec.max_rot);
        }
    }

    #[test]
    fn jitter_mean_is_unbiased() {
        // Uniform on [-m, m] has variance m^2 / 3.
        let m = 0.8;
        let n = 100_000;
        let spec = JitterSpec::new(m, 0.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mean = (0..n).map(|_| spec.scale(unit_draw(&mut rng)).dx).sum::<f64>() / n as f64;
        let sigma = m / 3f64.sqrt();
        assert!(mean.abs() <= 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn jitter_is_reproducible() {
        let gt = Pose2::new(1.0, 2.0, 0.1);
        let spec = JitterSpec::new(0.5, 0.02, 77).unwrap();
        assert_eq!(jitter(&gt, &spec), jitter(&gt, &spec));
    }

    #[test]
    fn recall_cell_examples() {
        let g = default_offset_grid();
        let t = g.offset(3, 10, 10);
        let same = recall(&[t], &[t], &g).unwrap();
        assert_eq!((same.r1, same.r2), (1.0, 1.0));
        let one = recall(&[g.offset(3, 10, 11)], &[t], &g).unwrap();
        assert_eq!((one.r1, one.r2), (0.0, 1.0));
        let two = recall(&[g.offset(3, 10, 12)], &[t], &g).unwrap();
        assert_eq!((two.r1, two.r2), (0.0, 0.0));
        let yaw = recall(&[g.offset(4, 10, 10)], &[t], &g).unwrap();
        assert_eq!((yaw.r1, yaw.r2), (0.0, 1.0));
        assert!(recall(&[t], &[], &g).is_err());
    }

    fn rollout(path: Trajectory, collided: bool) -> RolloutResult {
        RolloutResult {
            executed: path,
            collided,
            first_collision_t: collided.then_some(1.0),
        }
    }

    #[test]
    fn planning_metric_examples() {
        let route = Route::new((0..=100).map(|i| [i as f64, 0.0]).collect()).unwrap();
        let path = arc(&Pose2::IDENTITY, 0.0, 10.0, 50, 0.1).unwrap();
        let rs = vec![rollout(path.clone(), true), rollout(path.clone(), false)];
        let rep = planning_metrics(&rs, &[path.clone(), path.clone()], &[&route, &route]).unwrap();
        assert_eq!(rep.collision_rate, 50.0);
        assert_eq!(rep.l2_human_at_5s, 0.0);
        assert!(rep.jerk < 1e-6);
        assert!((rep.progress_at_5s - 50.0).abs() < 1e-9);
        assert_eq!(rep.n, 2);
    }

    proptest! {
        #[test]
        fn r1_never_exceeds_r2(seed in 0u64..500) {
            let g = default_offset_grid();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, ny, nx) = g.shape();
            let pick = |rng: &mut ChaCha8Rng| g.offset(rng.random_range(0..a), rng.random_range(0..ny), rng.random_range(0..nx));
            let est: Vec<PoseOffset> = (0..20).map(|_| pick(&mut rng)).collect();
            let tru: Vec<PoseOffset> = (0..20).map(|_| pick(&mut rng)).collect();
            let r = recall(&est, &tru, &g).unwrap();
            prop_assert!(0.0 <= r.r1 && r.r1 <= r.r2 && r.r2 <= 1.0);
        }
    }
}
