//! Corpus generation, the jitter sweep, localizer evaluation and the matcher
//! benchmark.

use std::path::Path;
use std::time::Instant;

use groundloc_core::embed::{ConvStack, NetConfig};
use groundloc_core::learn::{coarse_backbone, train_side_tuned, DeskGeometry, TrainConfig, TrainOutcome};
use groundloc_core::matcher::{default_offset_grid, score_direct, score_fft, LearnedNets, Localizer, OffsetGrid};
use groundloc_core::planner::{
    rollout_open_loop, sample_trajectories, select_plan, PlannerConfig, Route, RolloutResult,
};
use groundloc_core::raster::DEFAULT_HEIGHT_RANGE;
use groundloc_core::world::{derive_seed, gen_scenario, render_sweep, Scenario, ScenarioConfig, SensorModel};
use groundloc_core::{FeatureMap, Grid, GridSpec, Pose2, PoseOffset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{csv_err, HarnessError, Result};
use crate::metrics::{planning_metrics, recall, same_cell, unit_draw, within_r2, JitterSpec, RecallReport};

/// Scenario `i` of a corpus uses seed `derive_seed(seed, i)`.
pub fn gen_corpus(seed: u64, count: usize, cfg: &ScenarioConfig) -> Result<Vec<Scenario>> {
    (0..count)
        .map(|i| Ok(gen_scenario(derive_seed(seed, i as u64), cfg)?))
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| csv_err(path)(e.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Trans,
    Rot,
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "trans" => Ok(Axis::Trans),
            "rot" => Ok(Axis::Rot),
            _ => Err(format!("unknown axis {s:?}; expected trans or rot")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: Axis,
    /// Metres for `trans`, degrees for `rot`.
    pub level: f64,
    /// Percent of plans that collide when executed from the true pose.
    pub collision_rate: f64,
    /// Percent of plans that collide in the frame the planner believed in.
    pub believed_collision_rate: f64,
    pub l2_human_at_5s: f64,
    pub lateral_acceleration: f64,
    pub jerk: f64,
    pub progress_at_5s: f64,
    pub n_scenarios: usize,
}

fn level_spec(axis: Axis, level: f64, seed: u64) -> Result<JitterSpec> {
    match axis {
        Axis::Trans => JitterSpec::new(level, 0.0, seed),
        Axis::Rot => JitterSpec::new(0.0, level.to_radians(), seed),
    }
}

/// Plans from the start pose displaced by `err` and rolls the plan out
/// twice: as believed, and from the true start.
pub fn plan_and_execute(
    sc: &Scenario,
    route: &Route,
    err: &PoseOffset,
    curvatures: &[f64],
    cfg: &PlannerConfig,
) -> Result<(RolloutResult, RolloutResult)> {
    let believed = sc.sdv_gt.first().pose.compose(&err.as_pose());
    let candidates = sample_trajectories(&believed, cfg)?;
    let plan = select_plan(&candidates, curvatures, &sc.actors.actors, route, cfg)?;
    let actors = &sc.actors.actors;
    let as_believed = rollout_open_loop(&plan, &PoseOffset::ZERO, actors, cfg.sdv_size, cfg.horizon)?;
    let executed = rollout_open_loop(&plan, err, actors, cfg.sdv_size, cfg.horizon)?;
    Ok((as_believed, executed))
}

/// Plans from a jittered start pose and executes the plan from the true
/// one. Scenario `i` reuses the same unit draws at every level, so levels
/// differ only in scale.
pub fn run_jitter_sweep(
    corpus: &[Scenario],
    axis: Axis,
    levels: &[f64],
    seed: u64,
    cfg: &PlannerConfig,
) -> Result<Vec<SweepRow>> {
    if corpus.is_empty() {
        return Err(HarnessError::InvalidArgument("empty corpus".into()));
    }
    cfg.validate()?;
    let draws: Vec<[f64; 3]> = (0..corpus.len())
        .map(|i| unit_draw(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64))))
        .collect();
    let routes = corpus
        .iter()
        .map(|sc| Ok(Route::new(sc.route.clone())?))
        .collect::<Result<Vec<_>>>()?;
    let curvatures = cfg.curvatures();
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let spec = level_spec(axis, level, seed)?;
        let mut executed = Vec::with_capacity(corpus.len());
        let mut believed_hits = 0usize;
        for ((sc, u), route) in corpus.iter().zip(&draws).zip(&routes) {
            let (believed, exec) = plan_and_execute(sc, route, &spec.scale(*u), &curvatures, cfg)?;
            believed_hits += usize::from(believed.collided);
            executed.push(exec);
        }
        let human: Vec<_> = corpus.iter().map(|sc| sc.sdv_gt.clone()).collect();
        let route_refs: Vec<&Route> = routes.iter().collect();
        let rep = planning_metrics(&executed, &human, &route_refs)?;
        rows.push(SweepRow {
            axis,
            level,
            collision_rate: rep.collision_rate,
            believed_collision_rate: 100.0 * believed_hits as f64 / corpus.len() as f64,
            l2_human_at_5s: rep.l2_human_at_5s,
            lateral_acceleration: rep.lateral_acceleration,
            jerk: rep.jerk,
            progress_at_5s: rep.progress_at_5s,
            n_scenarios: corpus.len(),
        });
    }
    Ok(rows)
}

/// How the prior of each evaluation frame is displaced from the truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameOffsets {
    /// Prior = truth composed with a uniform per-axis perturbation.
    Jitter(JitterSpec),
    /// True offsets drawn uniformly from the candidate cells.
    OnGrid { seed: u64 },
}

impl FrameOffsets {
    fn seed(&self) -> u64 {
        match self {
            FrameOffsets::Jitter(s) => s.seed,
            FrameOffsets::OnGrid { seed } => *seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocEvalConfig {
    pub frames_per_scenario: usize,
    pub sensor: SensorModel,
    pub offsets: FrameOffsets,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRow {
    pub scenario: usize,
    pub frame: usize,
    pub t: f64,
    pub true_dx: f64,
    pub true_dy: f64,
    pub true_dyaw_deg: f64,
    pub est_dx: f64,
    pub est_dy: f64,
    pub est_dyaw_deg: f64,
    pub hit_r1: bool,
    pub hit_r2: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocEval {
    pub report: RecallReport,
    pub frames: Vec<FrameRow>,
}

fn frame_truth(rng: &mut ChaCha8Rng, offsets: &FrameOffsets, grid: &OffsetGrid) -> PoseOffset {
    match offsets {
        FrameOffsets::Jitter(spec) => spec.scale(unit_draw(rng)).inverse(),
        FrameOffsets::OnGrid { .. } => {
            let (a, ny, nx) = grid.shape();
            grid.offset(rng.random_range(0..a), rng.random_range(0..ny), rng.random_range(0..nx))
        }
    }
}

/// Localizes frames sampled along each scenario's ground-truth path from a
/// displaced prior. Recall is scored against the truth snapped to the
/// candidate grid.
pub fn run_localizer_eval(corpus: &[Scenario], localizer: &Localizer, cfg: &LocEvalConfig) -> Result<LocEval> {
    if corpus.is_empty() {
        return Err(HarnessError::InvalidArgument("empty corpus".into()));
    }
    let grid = &localizer.grid;
    let mut truths = Vec::new();
    let mut estimates = Vec::new();
    let mut frames = Vec::new();
    for (i, sc) in corpus.iter().enumerate() {
        let emb = localizer.embed_map(&sc.map)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.offsets.seed(), i as u64));
        let wps = sc.sdv_gt.waypoints();
        for f in 0..cfg.frames_per_scenario {
            let wp = wps[rng.random_range(0..wps.len())];
            let xi = frame_truth(&mut rng, &cfg.offsets, grid);
            let sweep_seed: u64 = rng.random();
            let truth = grid.snap(&xi).unwrap_or(xi);
            let prior = wp.pose.compose(&xi.as_pose().inverse());
            let sweep = render_sweep(&sc.map, &wp.pose, &cfg.sensor, sweep_seed)?;
            let est = localizer.localize(&sweep, &sc.map, &emb, &prior, false)?.offset;
            frames.push(FrameRow {
                scenario: i,
                frame: f,
                t: wp.t,
                true_dx: truth.dx,
                true_dy: truth.dy,
                true_dyaw_deg: truth.dyaw.to_degrees(),
                est_dx: est.dx,
                est_dy: est.dy,
                est_dyaw_deg: est.dyaw.to_degrees(),
                hit_r1: same_cell(grid, &est, &truth),
                hit_r2: same_cell(grid, &est, &truth) || within_r2(&est, &truth),
            });
            truths.push(truth);
            estimates.push(est);
        }
    }
    Ok(LocEval {
        report: recall(&estimates, &truths, grid)?,
        frames,
    })
}

pub fn write_loc_eval(path: &Path, eval: &LocEval) -> Result<()> {
    write_csv(path, &eval.frames)?;
    write_csv(&summary_path(path), &[eval.report])
}

/// `out.csv` -> `out.summary.csv`.
pub fn summary_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.summary.csv"))
}

/// Named embedding configurations for the benchmark: `identity`, `tiny`,
/// `big`, or `wN` for the eleven-layer net of width N.
pub fn bench_config(name: &str) -> Option<Option<NetConfig>> {
    match name {
        "identity" => Some(None),
        "tiny" => Some(Some(NetConfig::tiny(1))),
        "big" => Some(Some(NetConfig::big(1))),
        _ => {
            let w: usize = name.strip_prefix('w')?.parse().ok()?;
            (w > 0).then(|| Some(NetConfig::eleven(1, w)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchPath {
    Fft,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub config: String,
    pub path: MatchPath,
    pub size: usize,
    pub median_ms: f64,
    pub p90_ms: f64,
}

/// Median of a sample; the mean of the two middle values for even counts.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Nearest-rank 90th percentile.
pub fn p90(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return f64::NAN;
    }
    let rank = (0.9 * s.len() as f64).ceil() as usize;
    s[rank.max(1) - 1]
}

fn random_grid(spec: GridSpec, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Grid::zeros(spec, 1);
    g.raster.data_mut().iter_mut().for_each(|v| *v = rng.random());
    g
}

/// Times online embedding plus matching against a padded map patch with the
/// default candidate grid, once per path.
pub fn bench_matcher(configs: &[String], sizes: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if reps < 3 {
        return Err(HarnessError::InvalidArgument(format!("need at least 3 reps, got {reps}")));
    }
    let grid = default_offset_grid();
    let mut rows = Vec::new();
    for name in configs {
        let cfg = bench_config(name)
            .ok_or_else(|| HarnessError::InvalidArgument(format!("unknown bench config {name:?}")))?;
        let net = cfg.map(|c| ConvStack::init(c, derive_seed(seed, 1))).transpose()?;
        for &size in sizes {
            let os = GridSpec::from_cells(0.05, size, size, 0, DEFAULT_HEIGHT_RANGE, Pose2::IDENTITY)?;
            let (py, px) = grid.cell_pads(os.resolution())?;
            let input = random_grid(os.clone(), derive_seed(seed, 2));
            let map = random_grid(os.padded(px, py), derive_seed(seed, 3));
            for path in [MatchPath::Fft, MatchPath::Direct] {
                let mut ms = Vec::with_capacity(reps);
                for _ in 0..reps {
                    let t = Instant::now();
                    let online = match &net {
                        None => input.clone(),
                        Some(n) => n.forward(&input)?,
                    };
                    let vol = match path {
                        MatchPath::Fft => score_fft(&online, &map, &grid)?,
                        MatchPath::Direct => score_direct(&online, &map, &grid)?,
                    };
                    std::hint::black_box(&vol);
                    ms.push(t.elapsed().as_secs_f64() * 1e3);
                }
                rows.push(BenchRow {
                    config: name.clone(),
                    path,
                    size,
                    median_ms: median(&ms),
                    p90_ms: p90(&ms),
                });
            }
        }
    }
    Ok(rows)
}

/// Seed stream of the frozen coarse backbone used by `train`.
const BASE_STREAM: u64 = 7;

/// Side-tunes fresh nets on `corpus` around a seeded frozen backbone.
pub fn train_nets(corpus: &[Scenario], steps: usize, learning_rate: f64, seed: u64) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        steps,
        learning_rate,
        seed,
        ..TrainConfig::default()
    };
    Ok(train_side_tuned(corpus, &base_backbone(seed)?, &default_offset_grid(), &cfg)?)
}

/// The frozen coarse backbone `train_nets` builds for `seed`.
pub fn base_backbone(seed: u64) -> Result<ConvStack> {
    let geometry = DeskGeometry::default();
    Ok(coarse_backbone(geometry.coarse_slices + 1, derive_seed(seed, BASE_STREAM))?)
}

/// Identity embeddings on the full-size fine raster.
pub fn identity_localizer() -> Localizer {
    Localizer::identity(GridSpec::fine(), default_offset_grid())
}

/// Learned embeddings on the desk-scale online raster they were trained on.
pub fn learned_localizer(nets: LearnedNets) -> Result<Localizer> {
    Ok(Localizer {
        grid: default_offset_grid(),
        online_spec: DeskGeometry::default().online_spec()?,
        nets: Some(nets),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(p90(&[1.0, 2.0, 3.0]), 3.0);
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(p90(&v), 9.0);
    }

    #[test]
    fn bench_config_names() {
        assert_eq!(bench_config("identity"), Some(None));
        assert_eq!(bench_config("big"), Some(Some(NetConfig::eleven(1, 16))));
        assert_eq!(bench_config("w4"), Some(Some(NetConfig::eleven(1, 4))));
        assert_eq!(bench_config("w0"), None);
        assert_eq!(bench_config("huge"), None);
    }

    #[test]
    fn axis_parse() {
        assert_eq!("rot".parse::<Axis>(), Ok(Axis::Rot));
        assert!("yaw".parse::<Axis>().is_err());
    }

    #[test]
    fn summary_path_suffix() {
        assert_eq!(summary_path(Path::new("/tmp/a/loc.csv")), Path::new("/tmp/a/loc.summary.csv"));
    }

    #[test]
    fn bench_requires_three_reps() {
        assert!(bench_matcher(&["identity".into()], &[16], 2, 0).is_err());
        let rows = bench_matcher(&["identity".into()], &[16], 3, 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.p90_ms >= r.median_ms || r.median_ms.is_nan()));
    }
}
