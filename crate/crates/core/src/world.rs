//! Procedural ground-intensity maps, LiDAR sweeps rendered from them, and
//! driving scenarios with actor forecasts.
//!
//! The map frame has its origin at the lower-left map corner. A straight
//! two-lane road runs along +x through the middle of the map; the SDV drives
//! in the right-hand lane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Pose2, Trajectory};
use crate::raster::{BevGrid, Grid, GridSpec, LidarPoint, Raster, DEFAULT_HEIGHT_RANGE};

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent child seed for a named stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream.wrapping_mul(0x2545_f491_4f6c_dd1d)))
}

fn hash01(seed: u64, a: i64, b: i64) -> f64 {
    let h = mix64(seed ^ mix64((a as u64).wrapping_mul(0x9e37_79b9) ^ (b as u64).rotate_left(32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (ix, iy) = (x.floor(), y.floor());
    let (fx, fy) = (smooth(x - ix), smooth(y - iy));
    let (ix, iy) = (ix as i64, iy as i64);
    let v00 = hash01(seed, ix, iy);
    let v10 = hash01(seed, ix + 1, iy);
    let v01 = hash01(seed, ix, iy + 1);
    let v11 = hash01(seed, ix + 1, iy + 1);
    let a = v00 + (v10 - v00) * fx;
    let b = v01 + (v11 - v01) * fx;
    a + (b - a) * fy
}

pub const LANE_WIDTH: f64 = 3.5;

/// A single-channel ground-intensity raster in the map frame.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMap {
    pub grid: BevGrid,
}

impl IntensityMap {
    pub fn from_grid(grid: BevGrid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                actual: grid.channels(),
            });
        }
        if grid.raster.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("map intensity outside [0, 1]".into()));
        }
        Ok(Self { grid })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.grid.spec
    }

    pub fn width(&self) -> f64 {
        self.grid.spec.extent_x()
    }

    pub fn height(&self) -> f64 {
        self.grid.spec.extent_y()
    }

    pub fn contains(&self, pt: Point2) -> bool {
        self.grid.spec.contains(pt)
    }

    /// Bilinear intensity at a map-frame point, `None` outside the cell
    /// centers' hull.
    pub fn sample(&self, pt: Point2) -> Option<f64> {
        let spec = &self.grid.spec;
        let local = spec.center().inverse().apply(pt);
        let (cx, cy) = spec.local_to_cell(local);
        let (maxc, maxr) = (spec.cols() as f64 - 1.0, spec.rows() as f64 - 1.0);
        let tol = 1e-9;
        if !(-tol..=maxc + tol).contains(&cx) || !(-tol..=maxr + tol).contains(&cy) {
            return None;
        }
        let (cx, cy) = (cx.clamp(0.0, maxc), cy.clamp(0.0, maxr));
        let (x0, y0) = (cx.floor().min(maxc - 1.0).max(0.0), cy.floor().min(maxr - 1.0).max(0.0));
        let (fx, fy) = (cx - x0, cy - y0);
        let (c, r) = (x0 as usize, y0 as usize);
        let cols = spec.cols();
        let d = self.grid.raster.plane(0);
        let at = |r: usize, c: usize| d[r * cols + c] as f64;
        let c1 = (c + 1).min(cols - 1);
        let r1 = (r + 1).min(spec.rows() - 1);
        let a = at(r, c) * (1.0 - fx) + at(r, c1) * fx;
        let b = at(r1, c) * (1.0 - fx) + at(r1, c1) * fx;
        Some(a * (1.0 - fy) + b * fy)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        hash_grid(&mut h, &self.grid);
        hex(&h.finalize())
    }
}

fn hash_grid(h: &mut Sha256, g: &BevGrid) {
    for v in [g.spec.resolution(), g.spec.extent_x(), g.spec.extent_y()] {
        h.update(v.to_le_bytes());
    }
    for v in g.raster.data() {
        h.update(v.to_le_bytes());
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub const MAP_RESOLUTION: f64 = 0.05;

/// 5 cm map of `width` x `height` metres.
pub fn gen_map(seed: u64, width: f64, height: f64) -> Result<IntensityMap> {
    gen_map_at(seed, width, height, MAP_RESOLUTION)
}

pub fn gen_map_at(seed: u64, width: f64, height: f64, resolution: f64) -> Result<IntensityMap> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::InvalidArgument(format!("map dims {width} x {height}")));
    }
    let spec = GridSpec::new(
        resolution,
        width,
        height,
        0,
        DEFAULT_HEIGHT_RANGE,
        Pose2::new(width / 2.0, height / 2.0, 0.0),
    )?;
    let (rows, cols) = (spec.rows(), spec.cols());
    let road_y = height / 2.0;
    let octaves = [(7.0, 0.05, 1), (1.7, 0.06, 2), (0.45, 0.08, 3)]
        .map(|(scale, amp, stream)| (scale, amp, derive_seed(seed, stream)));
    let marking_seed = derive_seed(seed, 5);
    let dash_phase = hash01(seed, 17, 0) * 9.0;
    let grain_seed = derive_seed(seed, 4);
    let mut data = vec![0.0f64; rows * cols];

    for r in 0..rows {
        let y = (r as f64 + 0.5) * resolution;
        let dy = y - road_y;
        let on_road = dy.abs() < LANE_WIDTH + 0.6;
        for c in 0..cols {
            let x = (c as f64 + 0.5) * resolution;
            let mut v = if on_road { 0.3 } else { 0.45 };
            for &(scale, amp, oseed) in &octaves {
                v += amp * (value_noise(oseed, x / scale, y / scale) - 0.5) * 2.0;
            }
            let edge = (dy.abs() - LANE_WIDTH).abs() < 0.075;
            let dash = dy.abs() < 0.075 && (x + dash_phase).rem_euclid(9.0) < 3.0;
            if edge || dash {
                v = 0.85 + 0.05 * (value_noise(marking_seed, x / 0.3, y / 0.3) - 0.5);
            }
            v += 0.3 * (hash01(grain_seed, c as i64, r as i64) - 0.5);
            data[r * cols + c] = v;
        }
    }

    // Blobs: patches, stains and repairs.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 6));
    let n_blobs = (width * height / 6.0).round() as usize;
    for _ in 0..n_blobs {
        let bx = rng.random_range(0.0..width);
        let by = rng.random_range(0.0..height);
        let radius: f64 = rng.random_range(0.2..1.6);
        let amp: f64 = rng.random_range(-0.1..0.1);
        let c0 = (((bx - radius) / resolution).floor().max(0.0)) as usize;
        let c1 = (((bx + radius) / resolution).ceil() as usize).min(cols);
        let r0 = (((by - radius) / resolution).floor().max(0.0)) as usize;
        let r1 = (((by + radius) / resolution).ceil() as usize).min(rows);
        for r in r0..r1 {
            let y = (r as f64 + 0.5) * resolution;
            for c in c0..c1 {
                let x = (c as f64 + 0.5) * resolution;
                let d = ((x - bx).powi(2) + (y - by).powi(2)).sqrt() / radius;
                if d < 1.0 {
                    data[r * cols + c] += amp * smooth(1.0 - d);
                }
            }
        }
    }

    let raster = Raster::from_vec(1, rows, cols, data.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())?;
    IntensityMap::from_grid(Grid::new(spec, raster)?)
}

/// An aged copy of `map`: additive noise plus rectangular patches whose
/// texture was replaced.
pub fn degrade_map(map: &IntensityMap, seed: u64, noise_sigma: f64, n_patches: usize) -> IntensityMap {
    let mut out = map.clone();
    let spec = map.spec().clone();
    let (rows, cols, res) = (spec.rows(), spec.cols(), spec.resolution());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 11));
    let data = out.grid.raster.data_mut();
    for _ in 0..n_patches {
        let w = rng.random_range(1.0..6.0) / res;
        let h = rng.random_range(1.0..4.0) / res;
        let c0 = rng.random_range(0..cols);
        let r0 = rng.random_range(0..rows);
        let level: f32 = rng.random_range(0.2..0.6);
        for r in r0..(r0 + h as usize).min(rows) {
            for c in c0..(c0 + w as usize).min(cols) {
                data[r * cols + c] = level;
            }
        }
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("non-negative sigma");
        for v in data.iter_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorModel {
    pub n_rays: usize,
    pub min_range: f64,
    pub max_range: f64,
    /// Radial spacing of ground samples along each ray.
    pub range_step: f64,
    pub dropout_prob: f64,
    pub intensity_noise_sigma: f64,
    pub range_noise_sigma: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            n_rays: 2048,
            min_range: 1.5,
            max_range: 27.0,
            range_step: 0.05,
            dropout_prob: 0.0,
            intensity_noise_sigma: 0.0,
            range_noise_sigma: 0.0,
        }
    }
}

impl SensorModel {
    pub fn noise_free() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n_rays > 0
            && self.min_range >= 0.0
            && self.max_range >= self.min_range
            && self.range_step > 0.0
            && (0.0..=1.0).contains(&self.dropout_prob)
            && self.intensity_noise_sigma >= 0.0
            && self.range_noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("sensor model {self:?}")))
        }
    }

    pub fn samples_per_ray(&self) -> usize {
        ((self.max_range - self.min_range) / self.range_step).floor() as usize + 1
    }
}

/// Casts `n_rays` rays evenly in azimuth and returns ground hits in the
/// vehicle frame. Hits that leave the map are skipped.
pub fn render_sweep(
    map: &IntensityMap,
    pose: &Pose2,
    sensor: &SensorModel,
    seed: u64,
) -> Result<Vec<LidarPoint>> {
    sensor.validate()?;
    if !map.contains(pose.translation()) {
        return Err(Error::PoseOutsideMap {
            x: pose.x,
            y: pose.y,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inoise = Normal::new(0.0, sensor.intensity_noise_sigma).expect("validated");
    let rnoise = Normal::new(0.0, sensor.range_noise_sigma).expect("validated");
    let n = sensor.samples_per_ray();
    let mut points = Vec::with_capacity(sensor.n_rays * n);
    for i in 0..sensor.n_rays {
        let az = std::f64::consts::TAU * i as f64 / sensor.n_rays as f64;
        let (s, c) = az.sin_cos();
        for j in 0..n {
            let range = sensor.min_range + j as f64 * sensor.range_step;
            let hit = [range * c, range * s];
            let Some(mut intensity) = map.sample(pose.apply(hit)) else {
                continue;
            };
            if sensor.dropout_prob > 0.0 && rng.random::<f64>() < sensor.dropout_prob {
                continue;
            }
            if sensor.intensity_noise_sigma > 0.0 {
                intensity = (intensity + inoise.sample(&mut rng)).clamp(0.0, 1.0);
            }
            let reported = if sensor.range_noise_sigma > 0.0 {
                range + rnoise.sample(&mut rng)
            } else {
                range
            };
            points.push(LidarPoint {
                x: (reported * c) as f32,
                y: (reported * s) as f32,
                z: 0.0,
                intensity: intensity as f32,
            });
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActorKind {
    Parked,
    Oncoming,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub kind: ActorKind,
    pub length: f64,
    pub width: f64,
    /// Ground-truth motion over the horizon.
    pub gt: Trajectory,
    /// Forecast samples; all share `gt`'s timestamps.
    pub forecasts: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActorSet {
    pub actors: Vec<Actor>,
    pub samples: usize,
}

impl ActorSet {
    pub fn is_empty(&self) -> bool {
        self.actors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub map_width: f64,
    pub map_height: f64,
    pub map_resolution: f64,
    pub speed: f64,
    pub horizon: f64,
    pub dt: f64,
    /// Nominal x of the SDV at t = 0; each scenario adds up to 2 m of jitter.
    pub start_x: f64,
    pub n_actors: usize,
    pub n_samples: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            map_width: 120.0,
            map_height: 40.0,
            map_resolution: MAP_RESOLUTION,
            speed: 10.0,
            horizon: 5.0,
            dt: 0.1,
            start_x: 32.0,
            n_actors: 6,
            n_samples: 50,
        }
    }
}

impl ScenarioConfig {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// y of the SDV lane centerline.
    pub fn lane_y(&self) -> f64 {
        self.map_height / 2.0 - LANE_WIDTH / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub map: IntensityMap,
    pub sdv_gt: Trajectory,
    pub route: Vec<Point2>,
    pub actors: ActorSet,
    pub seed: u64,
}

impl Scenario {
    /// SHA-256 over the map and every trajectory, bit-exact.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        hash_grid(&mut h, &self.map.grid);
        let traj = |h: &mut Sha256, t: &Trajectory| {
            for w in t.waypoints() {
                for v in [w.pose.x, w.pose.y, w.pose.yaw, w.t] {
                    h.update(v.to_le_bytes());
                }
            }
        };
        traj(&mut h, &self.sdv_gt);
        for p in &self.route {
            h.update(p[0].to_le_bytes());
            h.update(p[1].to_le_bytes());
        }
        for a in &self.actors.actors {
            h.update([a.kind as u8]);
            h.update(a.length.to_le_bytes());
            h.update(a.width.to_le_bytes());
            traj(&mut h, &a.gt);
            for f in &a.forecasts {
                traj(&mut h, f);
            }
        }
        hex(&h.finalize())
    }
}

fn straight(start: Pose2, speed: f64, steps: usize, dt: f64) -> Result<Trajectory> {
    let (s, c) = start.yaw.sin_cos();
    Trajectory::from_poses(
        (0..=steps).map(|k| {
            let d = speed * k as f64 * dt;
            Pose2::new(start.x + d * c, start.y + d * s, start.yaw)
        }),
        0.0,
        dt,
    )
}

/// Forecast = ground truth plus a constant along-track speed error and a
/// constant lateral drift rate, so every sample starts at the present box.
fn forecast(gt: &Trajectory, dv: f64, dlat: f64) -> Result<Trajectory> {
    let poses: Vec<Pose2> = gt
        .waypoints()
        .iter()
        .map(|w| {
            let (s, c) = w.pose.yaw.sin_cos();
            Pose2::new(
                w.pose.x + (dv * c - dlat * s) * w.t,
                w.pose.y + (dv * s + dlat * c) * w.t,
                w.pose.yaw,
            )
        })
        .collect();
    Trajectory::new(
        poses
            .into_iter()
            .zip(gt.times())
            .map(|(pose, t)| crate::geometry::Waypoint { pose, t })
            .collect(),
    )
}

pub fn gen_scenario(seed: u64, cfg: &ScenarioConfig) -> Result<Scenario> {
    if cfg.n_samples == 0 || !(cfg.dt > 0.0 && cfg.horizon > 0.0) {
        return Err(Error::InvalidArgument("scenario needs samples and a horizon".into()));
    }
    let map = gen_map_at(derive_seed(seed, 1), cfg.map_width, cfg.map_height, cfg.map_resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let lane_y = cfg.lane_y();
    let steps = cfg.steps();
    let x0 = cfg.start_x + rng.random_range(-2.0..2.0);
    let start = Pose2::new(x0, lane_y, 0.0);
    let sdv_gt = straight(start, cfg.speed, steps, cfg.dt)?;
    if !sdv_gt.poses().all(|p| map.contains(p.translation())) {
        return Err(Error::InvalidArgument("SDV path leaves the map".into()));
    }
    let route: Vec<Point2> = (0..=cfg.map_width.floor() as usize)
        .map(|i| [i as f64, lane_y])
        .collect();

    let mut actors = Vec::with_capacity(cfg.n_actors);
    for _ in 0..cfg.n_actors {
        let parked = rng.random::<f64>() < 0.6;
        let length = rng.random_range(4.2..4.8);
        let width = rng.random_range(1.8..2.0);
        let (kind, start, speed, sv, slat) = if parked {
            let x = x0 + rng.random_range(10.0..62.0);
            let y = lane_y - rng.random_range(3.0..3.4);
            let yaw = rng.random_range(-0.03..0.03);
            (ActorKind::Parked, Pose2::new(x, y, yaw), 0.0, 0.1, 0.02)
        } else {
            let x = x0 + rng.random_range(30.0..110.0);
            let y = lane_y + LANE_WIDTH + rng.random_range(-0.2..0.2);
            let v = rng.random_range(7.0..12.0);
            (ActorKind::Oncoming, Pose2::new(x, y, std::f64::consts::PI), v, 0.8, 0.1)
        };
        let gt = straight(start, speed, steps, cfg.dt)?;
        let nv = Normal::new(0.0, sv).expect("positive sigma");
        let nl = Normal::new(0.0, slat).expect("positive sigma");
        let forecasts = (0..cfg.n_samples)
            .map(|_| {
                let dv = nv.sample(&mut rng);
                let dl = nl.sample(&mut rng);
                forecast(&gt, dv, dl)
            })
            .collect::<Result<Vec<_>>>()?;
        actors.push(Actor {
            kind,
            length,
            width,
            gt,
            forecasts,
        });
    }
    Ok(Scenario {
        map,
        sdv_gt,
        route,
        actors: ActorSet {
            actors,
            samples: cfg.n_samples,
        },
        seed,
    })
}
