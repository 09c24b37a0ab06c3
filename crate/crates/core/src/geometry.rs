//! SE(2) poses, angle wrapping and rigid trajectory alignment.
//!
//! Angles live in the half-open interval (-pi, pi]. Every constructor and
//! operation that produces a heading wraps it into that interval.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point2 = [f64; 2];

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::NonFinite("angle"));
    }
    Ok(wrap(theta))
}

pub(crate) fn wrap(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let r = theta.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else if r <= -PI {
        r + TAU
    } else {
        r
    }
}

/// A planar pose: position in metres and heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 {
        x: 0.0,
        y: 0.0,
        yaw: 0.0,
    };

    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: wrap(yaw) }
    }

    pub fn translation(&self) -> Point2 {
        [self.x, self.y]
    }

    /// `self * other`: `other` expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            -(-s * self.x + c * self.y),
            -self.yaw,
        )
    }

    /// Rotates `pt` by the heading, then translates it.
    pub fn apply(&self, pt: Point2) -> Point2 {
        let (s, c) = self.yaw.sin_cos();
        [
            self.x + c * pt[0] - s * pt[1],
            self.y + s * pt[0] + c * pt[1],
        ]
    }

    /// `self^-1 * other`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }
}

/// A 3-DoF correction candidate, expressed in the frame of a prior pose.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseOffset {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl PoseOffset {
    pub const ZERO: PoseOffset = PoseOffset {
        dx: 0.0,
        dy: 0.0,
        dyaw: 0.0,
    };

    pub fn new(dx: f64, dy: f64, dyaw: f64) -> Self {
        Self {
            dx,
            dy,
            dyaw: wrap(dyaw),
        }
    }

    pub fn as_pose(&self) -> Pose2 {
        Pose2::new(self.dx, self.dy, self.dyaw)
    }

    pub fn from_pose(p: &Pose2) -> Self {
        Self::new(p.x, p.y, p.yaw)
    }

    pub fn inverse(&self) -> PoseOffset {
        PoseOffset::from_pose(&self.as_pose().inverse())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    #[serde(flatten)]
    pub pose: Pose2,
    pub t: f64,
}

/// Timestamped poses with strictly increasing times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Waypoint>", into = "Vec<Waypoint>")]
pub struct Trajectory {
    waypoints: Vec<Waypoint>,
}

impl TryFrom<Vec<Waypoint>> for Trajectory {
    type Error = Error;

    fn try_from(waypoints: Vec<Waypoint>) -> Result<Self> {
        Trajectory::new(waypoints)
    }
}

impl From<Trajectory> for Vec<Waypoint> {
    fn from(t: Trajectory) -> Self {
        t.waypoints
    }
}

impl Trajectory {
    pub fn new(waypoints: Vec<Waypoint>) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::InvalidTrajectory("no waypoints".into()));
        }
        for w in &waypoints {
            if !(w.pose.x.is_finite() && w.pose.y.is_finite() && w.pose.yaw.is_finite()) {
                return Err(Error::NonFinite("waypoint pose"));
            }
            if !w.t.is_finite() {
                return Err(Error::NonFinite("waypoint time"));
            }
        }
        if waypoints.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(Error::InvalidTrajectory(
                "timestamps must be strictly increasing".into(),
            ));
        }
        Ok(Self { waypoints })
    }

    /// Builds a trajectory from poses sampled every `dt` seconds from `t0`.
    pub fn from_poses(poses: impl IntoIterator<Item = Pose2>, t0: f64, dt: f64) -> Result<Self> {
        let waypoints = poses
            .into_iter()
            .enumerate()
            .map(|(i, pose)| Waypoint {
                pose,
                t: t0 + i as f64 * dt,
            })
            .collect();
        Self::new(waypoints)
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn first(&self) -> &Waypoint {
        &self.waypoints[0]
    }

    pub fn last(&self) -> &Waypoint {
        &self.waypoints[self.waypoints.len() - 1]
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose2> + '_ {
        self.waypoints.iter().map(|w| &w.pose)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.waypoints.iter().map(|w| w.t)
    }

    /// Pose at time `t`, linearly interpolated and clamped to the ends.
    pub fn pose_at(&self, t: f64) -> Pose2 {
        let w = &self.waypoints;
        if t <= w[0].t {
            return w[0].pose;
        }
        if t >= w[w.len() - 1].t {
            return w[w.len() - 1].pose;
        }
        let i = w.partition_point(|p| p.t <= t) - 1;
        let (a, b) = (&w[i], &w[i + 1]);
        let u = (t - a.t) / (b.t - a.t);
        let dyaw = wrap(b.pose.yaw - a.pose.yaw);
        Pose2::new(
            a.pose.x + u * (b.pose.x - a.pose.x),
            a.pose.y + u * (b.pose.y - a.pose.y),
            a.pose.yaw + u * dyaw,
        )
    }

    /// Applies `motion` on the left of every waypoint.
    pub fn transformed(&self, motion: &Pose2) -> Trajectory {
        Trajectory {
            waypoints: self
                .waypoints
                .iter()
                .map(|w| Waypoint {
                    pose: motion.compose(&w.pose),
                    t: w.t,
                })
                .collect(),
        }
    }
}

/// Returns what the vehicle actually executes when it believes it starts at
/// the plan's first pose while the true pose differs by `pose_error`.
///
/// The believed start is `true_start * pose_error`; the whole plan is moved by
/// the single rigid motion that takes the believed start onto the true start.
pub fn rigid_align_trajectory(planned: &Trajectory, pose_error: &PoseOffset) -> Trajectory {
    let believed = planned.first().pose;
    let truth = believed.compose(&pose_error.as_pose().inverse());
    let motion = truth.compose(&believed.inverse());
    planned.transformed(&motion)
}
