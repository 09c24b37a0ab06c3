pub mod error;
pub mod geometry;
pub mod matcher;
pub mod planner;
pub mod embed;
pub mod learn;
pub mod raster;
pub mod world;

pub use error::{Error, Result};
pub use geometry::{rigid_align_trajectory, wrap_angle, Point2, Pose2, PoseOffset, Trajectory, Waypoint};
pub use raster::{BevGrid, Boundary, FeatureMap, Grid, GridSpec, LidarPoint, Raster, Real, Rect};
