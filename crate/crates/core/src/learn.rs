//! Localization loss, reverse-mode gradients through the matching pipeline,
//! a finite-difference oracle and the side-tuned training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::{
    fuse_multires_tape, fusion_backward, ConvStack, FusionParams, FusionTape, NetConfig, StackGrads, StackTape,
};
use crate::error::{Error, Result};
use crate::geometry::{Pose2, PoseOffset};
use crate::matcher::{
    argmax_index, correlation_backward, log_softmax, map_region_spec, score_direct, score_fft, Fusion, LearnedNets,
    OffsetGrid, ProbVolume, ScoreVolume,
};
use crate::raster::{
    crop_covering, resample_op, voxelize, warp_op, BilinearOp, Boundary, FeatureMap, Grid, GridSpec, LidarPoint,
    Raster, DEFAULT_HEIGHT_RANGE,
};
use crate::world::{derive_seed, render_sweep, Scenario, SensorModel};

/// Probability one at the cell nearest to `gt` (per-axis rounding).
pub fn one_hot_target(grid: &OffsetGrid, gt: &PoseOffset) -> Result<ProbVolume> {
    let (a, y, x) = grid.nearest_index(gt)?;
    let mut v = ScoreVolume::zeros(grid.shape());
    v.data[grid.flat_index(a, y, x)] = 1.0;
    Ok(v)
}

/// `-sum target * ln p`, with `p` floored at the smallest positive normal.
pub fn loss_ce(p: &ProbVolume, target: &ProbVolume) -> f64 {
    p.data
        .iter()
        .zip(&target.data)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&q, &t)| -t * q.clamp(f64::MIN_POSITIVE, 1.0).ln())
        .sum()
}

/// Cross-entropy of `softmax(scores)` against a one-hot target at flat
/// index `target`, and its gradient with respect to the scores.
pub fn loss_and_grad(scores: &ScoreVolume, target: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax(scores);
    let loss = -logp[target];
    let mut d: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    d[target] -= 1.0;
    (loss, d)
}

/// Central differences of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step} must be positive")));
    }
    let mut p = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        p[i] = x[i] + step;
        let hi = f(&p);
        p[i] = x[i] - step;
        let lo = f(&p);
        p[i] = x[i];
        g.push((hi - lo) / (2.0 * step));
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scorer {
    Direct,
    Fft,
}

/// One training or evaluation instance, already rasterized.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Fine intensity raster of the sweep, vehicle frame.
    pub online: FeatureMap,
    /// Coarse voxel grid of the same sweep for the frozen backbone.
    pub coarse: Option<FeatureMap>,
    /// Map intensity around the prior, map frame.
    pub map_patch: FeatureMap,
    /// Region the online grid is matched against, map frame.
    pub region: GridSpec,
    pub target: (usize, usize, usize),
}

/// Gradients mirroring the trainable parameters of a [`Pipeline`]. Frozen
/// stacks carry zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub online: Option<StackGrads>,
    pub map: Option<StackGrads>,
    pub fusion: Option<FusionParams>,
}

impl GradientSet {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(g) = &self.online {
            g.flatten_into(&mut out);
        }
        if let Some(g) = &self.map {
            g.flatten_into(&mut out);
        }
        if let Some(f) = &self.fusion {
            f.flatten_into(&mut out);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

struct Tape {
    g: Option<StackTape>,
    fusion: Option<FusionTape>,
    f: Option<StackTape>,
    resample: BilinearOp,
    online_emb: FeatureMap,
    region_emb: FeatureMap,
    d_scores: Vec<f64>,
}

/// Result of [`Pipeline::forward`]; activations are kept only on request.
pub struct ForwardState {
    pub loss: f64,
    pub scores: ScoreVolume,
    tape: Option<Tape>,
}

impl ForwardState {
    pub fn retained(&self) -> bool {
        self.tape.is_some()
    }
}

/// Embedding, matching and loss as one differentiable function. `nets`
/// set to `None` selects identity embeddings.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub grid: OffsetGrid,
    pub nets: Option<LearnedNets>,
    pub scorer: Scorer,
}

impl Pipeline {
    pub fn identity(grid: OffsetGrid) -> Self {
        Self {
            grid,
            nets: None,
            scorer: Scorer::Fft,
        }
    }

    pub fn learned(grid: OffsetGrid, nets: LearnedNets) -> Self {
        Self {
            grid,
            nets: Some(nets),
            scorer: Scorer::Fft,
        }
    }

    pub fn forward(&self, s: &Sample, retain: bool) -> Result<ForwardState> {
        let (online_emb, g_tape, fusion_tape) = match &self.nets {
            None => (s.online.clone(), None, None),
            Some(n) => {
                let tape = n.online.forward_tape(&s.online.raster)?;
                let g = Grid {
                    spec: s.online.spec.clone(),
                    raster: tape.output().clone(),
                };
                match &n.fusion {
                    None => (g, Some(tape), None),
                    Some(fu) => {
                        let coarse = s
                            .coarse
                            .as_ref()
                            .ok_or_else(|| Error::InvalidArgument("sample has no coarse grid".into()))?;
                        let feat = fu.base.forward(coarse)?;
                        let (out, ft) = fuse_multires_tape(&g, &feat, &fu.params)?;
                        (out, Some(tape), Some(ft))
                    }
                }
            }
        };
        let (patch_emb, f_tape) = match &self.nets {
            None => (s.map_patch.raster.clone(), None),
            Some(n) => {
                let t = n.map.forward_tape(&s.map_patch.raster)?;
                (t.output().clone(), Some(t))
            }
        };
        let resample = resample_op(&s.map_patch.spec, &s.region, Boundary::Zero);
        let region_emb = Grid {
            spec: s.region.clone(),
            raster: resample.apply(&patch_emb, s.region.rows(), s.region.cols()),
        };
        let scores = match self.scorer {
            Scorer::Direct => score_direct(&online_emb, &region_emb, &self.grid)?,
            Scorer::Fft => score_fft(&online_emb, &region_emb, &self.grid)?,
        };
        let (a, y, x) = s.target;
        let (loss, d_scores) = loss_and_grad(&scores, self.grid.flat_index(a, y, x));
        let tape = retain.then_some(Tape {
            g: g_tape,
            fusion: fusion_tape,
            f: f_tape,
            resample,
            online_emb,
            region_emb,
            d_scores,
        });
        Ok(ForwardState { loss, scores, tape })
    }

    pub fn loss(&self, s: &Sample) -> Result<f64> {
        Ok(self.forward(s, false)?.loss)
    }

    pub fn predict(&self, s: &Sample) -> Result<(usize, usize, usize)> {
        Ok(argmax_index(&self.forward(s, false)?.scores, &self.grid))
    }

    /// Reverse pass through loss, correlation, rotation, map resampling,
    /// fusion and both stacks.
    pub fn backward(&self, state: &ForwardState) -> Result<GradientSet> {
        let t = state.tape.as_ref().ok_or(Error::MissingActivations)?;
        let Some(n) = &self.nets else {
            return Ok(GradientSet {
                online: None,
                map: None,
                fusion: None,
            });
        };
        let spec = &t.online_emb.spec;
        let res = spec.resolution();
        let (or, oc) = (spec.rows(), spec.cols());
        let (mr, mc) = (t.region_emb.spec.rows(), t.region_emb.spec.cols());
        let ch = t.online_emb.channels();
        let (lags_y, lags_x) = self.grid.cell_lags(res)?;
        let per_yaw = lags_y.len() * lags_x.len();
        let base = ((mr - or) / 2, (mc - oc) / 2);
        let mut d_online = Raster::zeros(ch, or, oc);
        let mut d_region = Raster::zeros(ch, mr, mc);
        for (a, &yaw) in self.grid.yaw.iter().enumerate() {
            let op = warp_op(or, oc, res, &PoseOffset::new(0.0, 0.0, yaw));
            let rotated: Raster<f64> = op.apply(&t.online_emb.raster, or, oc);
            let mut d_rot = Raster::zeros(ch, or, oc);
            correlation_backward(
                &rotated,
                &t.region_emb.raster,
                base,
                (&lags_y, &lags_x),
                &t.d_scores[a * per_yaw..(a + 1) * per_yaw],
                &mut d_rot,
                &mut d_region,
            );
            for c in 0..ch {
                op.apply_transpose_plane(d_rot.plane(c), d_online.plane_mut(c));
            }
        }

        let f_tape = t.f.as_ref().ok_or(Error::MissingActivations)?;
        let map = if n.map.frozen {
            n.map.zero_grads()
        } else {
            let out = f_tape.output();
            let mut d_patch = Raster::zeros(ch, out.rows(), out.cols());
            for c in 0..ch {
                t.resample.apply_transpose_plane(d_region.plane(c), d_patch.plane_mut(c));
            }
            n.map.backward(f_tape, &d_patch).0
        };
        let fusion = match (&n.fusion, &t.fusion) {
            (Some(fu), Some(ft)) => Some(fusion_backward(ft, &fu.params, &d_online)),
            _ => None,
        };
        let online = if n.online.frozen {
            n.online.zero_grads()
        } else {
            let g_tape = t.g.as_ref().ok_or(Error::MissingActivations)?;
            n.online.backward(g_tape, &d_online).0
        };
        Ok(GradientSet {
            online: Some(online),
            map: Some(map),
            fusion,
        })
    }

    /// Learnable parameters in gradient order: online stack, map stack,
    /// fusion. The frozen backbone is excluded.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(n) = &self.nets {
            n.online.flatten_into(&mut out);
            n.map.flatten_into(&mut out);
            if let Some(f) = &n.fusion {
                f.params.flatten_into(&mut out);
            }
        }
        out
    }

    /// Per-parameter flag, false where the owning stack is frozen.
    pub fn trainable(&self) -> Vec<bool> {
        let mut out = Vec::new();
        if let Some(n) = &self.nets {
            out.extend(std::iter::repeat_n(!n.online.frozen, n.online.num_params()));
            out.extend(std::iter::repeat_n(!n.map.frozen, n.map.num_params()));
            if let Some(f) = &n.fusion {
                out.extend(std::iter::repeat_n(true, f.params.num_params()));
            }
        }
        out
    }

    pub fn load_params(&mut self, src: &[f64]) {
        if let Some(n) = &mut self.nets {
            let mut at = n.online.load_flat(src);
            at += n.map.load_flat(&src[at..]);
            if let Some(f) = &mut n.fusion {
                f.params.load_flat(&src[at..]);
            }
        }
    }

    /// Gradient set with the layout of this pipeline filled from `flat`.
    pub fn gradients_from_flat(&self, flat: &[f64]) -> GradientSet {
        let Some(n) = &self.nets else {
            return GradientSet {
                online: None,
                map: None,
                fusion: None,
            };
        };
        let mut online = n.online.clone();
        let mut at = online.load_flat(flat);
        let mut map = n.map.clone();
        at += map.load_flat(&flat[at..]);
        let fusion = n.fusion.as_ref().map(|f| {
            let mut p = f.params.clone();
            p.load_flat(&flat[at..]);
            p
        });
        GradientSet {
            online: Some(StackGrads { layers: online.layers }),
            map: Some(StackGrads { layers: map.layers }),
            fusion,
        }
    }
}

/// Central-difference gradient of the sample loss for every trainable
/// parameter; frozen entries are zero.
pub fn fd_gradient_oracle(pipeline: &Pipeline, sample: &Sample, step: f64) -> Result<GradientSet> {
    let x = pipeline.params();
    let mask = pipeline.trainable();
    let mut probe = pipeline.clone();
    let mut err = None;
    let mut grads = central_difference(
        |p| {
            probe.load_params(p);
            probe.loss(sample).unwrap_or_else(|e| {
                err.get_or_insert(e);
                f64::NAN
            })
        },
        &x,
        step,
    )?;
    if let Some(e) = err {
        return Err(e);
    }
    for (g, &m) in grads.iter_mut().zip(&mask) {
        if !m {
            *g = 0.0;
        }
    }
    Ok(pipeline.gradients_from_flat(&grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer moments for a flat parameter vector.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, n: usize) -> Self {
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update of the entries where `mask` is set.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], mask: &[bool], lr: f64) {
        self.t += 1;
        match self.kind {
            Optimizer::Sgd => {
                for ((p, g), &m) in params.iter_mut().zip(grads).zip(mask) {
                    if m {
                        *p -= lr * g;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    if !mask[i] {
                        continue;
                    }
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

/// Raster sizes used for training-scale samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeskGeometry {
    pub online_cells: usize,
    pub online_resolution: f64,
    pub coarse_cells: usize,
    pub coarse_resolution: f64,
    pub coarse_slices: usize,
    /// Extra map cells around the match region so the map stack sees its
    /// full receptive field.
    pub margin: usize,
}

impl Default for DeskGeometry {
    fn default() -> Self {
        Self {
            online_cells: 129,
            online_resolution: 0.05,
            coarse_cells: 64,
            coarse_resolution: 0.2,
            coarse_slices: 16,
            margin: 16,
        }
    }
}

impl DeskGeometry {
    pub fn online_spec(&self) -> Result<GridSpec> {
        GridSpec::from_cells(
            self.online_resolution,
            self.online_cells,
            self.online_cells,
            0,
            DEFAULT_HEIGHT_RANGE,
            Pose2::IDENTITY,
        )
    }

    pub fn coarse_spec(&self) -> Result<GridSpec> {
        GridSpec::from_cells(
            self.coarse_resolution,
            self.coarse_cells,
            self.coarse_cells,
            self.coarse_slices,
            DEFAULT_HEIGHT_RANGE,
            Pose2::IDENTITY,
        )
    }

    /// Sensor whose range just covers the coarse grid.
    pub fn sensor(&self) -> SensorModel {
        SensorModel {
            n_rays: 1024,
            min_range: 0.5,
            max_range: 6.0,
            range_step: 0.025,
            dropout_prob: 0.5,
            intensity_noise_sigma: 0.1,
            range_noise_sigma: 0.0,
        }
    }
}

/// Per-sweep intensity calibration error `i' = clamp(gain * i + bias)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityCorruption {
    pub gain: (f64, f64),
    pub bias: (f64, f64),
}

impl Default for IntensityCorruption {
    fn default() -> Self {
        Self {
            gain: (0.5, 1.5),
            bias: (-0.1, 0.1),
        }
    }
}

impl IntensityCorruption {
    pub fn draw(&self, rng: &mut impl Rng) -> (f64, f64) {
        let u = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        (u(rng, self.gain), u(rng, self.bias))
    }
}

pub fn corrupt_intensity(points: &mut [LidarPoint], gain: f64, bias: f64) {
    for p in points {
        p.intensity = (gain * p.intensity as f64 + bias).clamp(0.0, 1.0) as f32;
    }
}

/// How training and evaluation samples are drawn from scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub geometry: DeskGeometry,
    pub sensor: SensorModel,
    /// Uniform pose error bound `(metres, radians)`.
    pub noise_envelope: (f64, f64),
    pub corruption: Option<IntensityCorruption>,
    pub with_coarse: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        let geometry = DeskGeometry::default();
        Self {
            sensor: geometry.sensor(),
            geometry,
            noise_envelope: (0.5, 1.5f64.to_radians()),
            corruption: Some(IntensityCorruption::default()),
            with_coarse: true,
        }
    }
}

/// Rasterizes one frame: the sweep is rendered at `truth` and the prior is
/// the pose from which `offset` recovers the truth.
pub fn make_sample(
    scenario: &Scenario,
    truth: &Pose2,
    offset: &PoseOffset,
    grid: &OffsetGrid,
    cfg: &SampleConfig,
    corruption: Option<(f64, f64)>,
    seed: u64,
) -> Result<Sample> {
    let prior = truth.compose(&offset.as_pose().inverse());
    let mut sweep = render_sweep(&scenario.map, truth, &cfg.sensor, seed)?;
    if let Some((gain, bias)) = corruption {
        corrupt_intensity(&mut sweep, gain, bias);
    }
    let online_spec = cfg.geometry.online_spec()?;
    let fine = voxelize(&sweep, &online_spec)?;
    let online = Grid {
        spec: online_spec.clone(),
        raster: fine.raster.extract_channel(fine.intensity_channel()).to_f64(),
    };
    let coarse = if cfg.with_coarse {
        let g = voxelize(&sweep, &cfg.geometry.coarse_spec()?)?;
        Some(Grid {
            spec: g.spec,
            raster: g.raster.to_f64(),
        })
    } else {
        None
    };
    let region = map_region_spec(&online_spec, &prior, grid)?;
    let patch = crop_covering(&scenario.map.grid, &region, cfg.geometry.margin)?;
    Ok(Sample {
        online,
        coarse,
        map_patch: Grid {
            spec: patch.spec,
            raster: patch.raster.to_f64(),
        },
        region,
        target: grid.nearest_index(offset)?,
    })
}

/// Draws one sample: a scenario, a time along its ground-truth path, a
/// uniform pose error and (optionally) an intensity corruption.
pub fn draw_sample(scenarios: &[Scenario], grid: &OffsetGrid, cfg: &SampleConfig, seed: u64) -> Result<Sample> {
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument("no scenarios".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sc = &scenarios[rng.random_range(0..scenarios.len())];
    let t = rng.random_range(sc.sdv_gt.first().t..=sc.sdv_gt.last().t);
    let truth = sc.sdv_gt.pose_at(t);
    let (mt, mr) = cfg.noise_envelope;
    let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let offset = PoseOffset::new(sym(&mut rng, mt), sym(&mut rng, mt), sym(&mut rng, mr));
    let corruption = cfg.corruption.map(|c| c.draw(&mut rng));
    make_sample(sc, &truth, &offset, grid, cfg, corruption, rng.random())
}

pub fn draw_samples(
    scenarios: &[Scenario],
    grid: &OffsetGrid,
    cfg: &SampleConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| draw_sample(scenarios, grid, cfg, derive_seed(seed, i as u64)))
        .collect()
}

pub fn mean_loss(pipeline: &Pipeline, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += pipeline.loss(s)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Fraction of samples whose argmax is the target cell.
pub fn recall_at_1(pipeline: &Pipeline, samples: &[Sample]) -> Result<f64> {
    let mut hits = 0usize;
    for s in samples {
        hits += usize::from(pipeline.predict(s)? == s.target);
    }
    Ok(hits as f64 / samples.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Architecture of both the map and the online stack.
    pub net: NetConfig,
    pub sampling: SampleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 1,
            learning_rate: 1e-3,
            optimizer: Optimizer::adam(),
            seed: 0,
            net: NetConfig::tiny(1),
            sampling: SampleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, grid: &OffsetGrid) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "learning rate and batch size must be positive".into(),
            ));
        }
        let max = grid.max_abs();
        let (mt, mr) = self.sampling.noise_envelope;
        if mt < 0.0 || mr < 0.0 || mt > max.dx + 1e-9 || mt > max.dy + 1e-9 || mr > max.dyaw + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "noise envelope ({mt}, {mr}) exceeds the search grid"
            )));
        }
        self.net.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub nets: LearnedNets,
    pub curve: Vec<LossPoint>,
}

/// Fresh map and online stacks plus fusion around a frozen backbone.
pub fn init_side_tuned(base: &ConvStack, cfg: &TrainConfig) -> Result<LearnedNets> {
    if !base.frozen {
        return Err(Error::InvalidArgument("base backbone must be frozen".into()));
    }
    let fusion = cfg.sampling.with_coarse.then(|| -> Result<Fusion> {
        Ok(Fusion {
            base: base.clone(),
            params: FusionParams::new(base.output_channels(), derive_seed(cfg.seed, 3)),
            coarse_spec: cfg.sampling.geometry.coarse_spec()?,
        })
    });
    Ok(LearnedNets {
        online: ConvStack::init(cfg.net.clone(), derive_seed(cfg.seed, 1))?,
        map: ConvStack::init(cfg.net.clone(), derive_seed(cfg.seed, 2))?,
        fusion: fusion.transpose()?,
    })
}

/// Runs `cfg.steps` optimizer steps on `pipeline`, drawing fresh samples
/// from `scenarios`. Returns the per-step mean batch loss.
pub fn train(pipeline: &mut Pipeline, scenarios: &[Scenario], cfg: &TrainConfig) -> Result<Vec<LossPoint>> {
    cfg.validate(&pipeline.grid)?;
    let mut params = pipeline.params();
    let mask = pipeline.trainable();
    let mut opt = OptimizerState::new(cfg.optimizer, params.len());
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = vec![0.0; params.len()];
        let mut loss = 0.0;
        for b in 0..cfg.batch_size {
            let seed = derive_seed(derive_seed(cfg.seed, 100 + step as u64), b as u64);
            let sample = draw_sample(scenarios, &pipeline.grid, &cfg.sampling, seed)?;
            let state = pipeline.forward(&sample, true)?;
            loss += state.loss;
            for (acc, g) in grads.iter_mut().zip(pipeline.backward(&state)?.flatten()) {
                *acc += g;
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        grads.iter_mut().for_each(|g| *g *= scale);
        opt.step(&mut params, &grads, &mask, cfg.learning_rate);
        pipeline.load_params(&params);
        curve.push(LossPoint {
            step,
            loss: loss * scale,
        });
    }
    Ok(curve)
}

/// Learns the map and online stacks and the fusion weights while `base`
/// stays frozen.
pub fn train_side_tuned(
    scenarios: &[Scenario],
    base: &ConvStack,
    grid: &OffsetGrid,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let nets = init_side_tuned(base, cfg)?;
    let mut pipeline = Pipeline::learned(grid.clone(), nets);
    let curve = train(&mut pipeline, scenarios, cfg)?;
    Ok(TrainOutcome {
        nets: pipeline.nets.expect("learned pipeline"),
        curve,
    })
}

/// Seeded stand-in for the frozen coarse backbone.
pub fn coarse_backbone(input_channels: usize, seed: u64) -> Result<ConvStack> {
    let config = NetConfig {
        input_channels,
        channels: vec![8, 8],
        kernel_size: 3,
        pooling_stages: 0,
    };
    Ok(ConvStack::init(config, seed)?.frozen())
}

/// Worst disagreement between analytic and finite-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub n_params: usize,
    /// Largest `|a - f| / max(|a|, |f|)` over entries with `|a - f|` above
    /// the absolute floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub loss: f64,
}

/// Compares `backward` with central differences for every parameter.
pub fn grad_check(pipeline: &Pipeline, sample: &Sample, step: f64, abs_floor: f64) -> Result<GradCheckReport> {
    let state = pipeline.forward(sample, true)?;
    let analytic = pipeline.backward(&state)?.flatten();
    let numeric = fd_gradient_oracle(pipeline, sample, step)?.flatten();
    let mut max_rel_err: f64 = 0.0;
    let mut max_abs_err: f64 = 0.0;
    for (a, f) in analytic.iter().zip(&numeric) {
        let d = (a - f).abs();
        max_abs_err = max_abs_err.max(d);
        if d > abs_floor {
            max_rel_err = max_rel_err.max(d / a.abs().max(f.abs()));
        }
    }
    Ok(GradCheckReport {
        n_params: analytic.len(),
        max_rel_err,
        max_abs_err,
        loss: state.loss,
    })
}

/// Small seeded instance for gradient checks: two-layer stacks with one
/// pooling stage on 16 x 16 online inputs, fusion with a frozen backbone,
/// a slightly rotated match region and the direct scorer.
///
/// Central differences are only meaningful where the loss is smooth across
/// the stencil, so by default inputs lie in [0.25, 1] and every hidden
/// channel is either strictly active or strictly dead (first-layer weights
/// of one sign). `kink_margin = false` draws unconstrained weights and
/// inputs in [0, 1].
pub fn grad_check_instance_with(seed: u64, kink_margin: bool) -> Result<(Pipeline, Sample)> {
    let grid = crate::matcher::default_offset_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = 0.05;
    let lo = if kink_margin { 0.25 } else { 0.0 };
    let mut random_grid = |spec: GridSpec, ch: usize, lo: f64| {
        let mut g = Grid::zeros(spec, ch);
        g.raster.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..1.0));
        g
    };
    let online_spec = GridSpec::from_cells(res, 16, 16, 0, DEFAULT_HEIGHT_RANGE, Pose2::IDENTITY)?;
    let coarse_spec = GridSpec::from_cells(0.2, 8, 8, 2, DEFAULT_HEIGHT_RANGE, Pose2::IDENTITY)?;
    let patch_spec = GridSpec::from_cells(res, 44, 44, 0, DEFAULT_HEIGHT_RANGE, Pose2::IDENTITY)?;
    let online = random_grid(online_spec.clone(), 1, lo);
    let coarse = random_grid(coarse_spec.clone(), 3, 0.0);
    let map_patch = random_grid(patch_spec, 1, lo);
    let region = map_region_spec(&online_spec, &Pose2::new(0.013, -0.021, 0.02), &grid)?;
    let target = (
        rng.random_range(0..grid.yaw.len()),
        rng.random_range(0..grid.y.len()),
        rng.random_range(0..grid.x.len()),
    );
    let net = NetConfig {
        input_channels: 1,
        channels: vec![4, 1],
        kernel_size: 3,
        pooling_stages: 1,
    };
    // Small output weights keep the scores, and so the loss curvature, moderate.
    let prepare = |mut s: ConvStack| {
        if kink_margin {
            let first = &mut s.layers[0];
            let per_out = first.weight.len() / first.out_channels;
            for (o, chunk) in first.weight.chunks_mut(per_out).enumerate() {
                let sign = if o % 2 == 0 { 1.0 } else { -1.0 };
                chunk.iter_mut().for_each(|w| *w = sign * w.abs());
            }
        }
        s.layers[1].weight.iter_mut().for_each(|w| *w *= 0.1);
        s
    };
    let base = coarse_backbone(3, derive_seed(seed, 10))?;
    let mut params = FusionParams::new(base.output_channels(), derive_seed(seed, 11));
    params.mix = 0.5;
    let nets = LearnedNets {
        online: prepare(ConvStack::init(net.clone(), derive_seed(seed, 12))?),
        map: prepare(ConvStack::init(net, derive_seed(seed, 13))?),
        fusion: Some(Fusion {
            base,
            params,
            coarse_spec,
        }),
    };
    let pipeline = Pipeline {
        grid,
        nets: Some(nets),
        scorer: Scorer::Direct,
    };
    let sample = Sample {
        online,
        coarse: Some(coarse),
        map_patch,
        region,
        target,
    };
    Ok((pipeline, sample))
}

pub fn grad_check_instance(seed: u64) -> Result<(Pipeline, Sample)> {
    grad_check_instance_with(seed, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::{default_offset_grid, softmax};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn one_hot_on_grid_and_snapped() {
        let grid = default_offset_grid();
        let t = one_hot_target(&grid, &PoseOffset::new(0.1, -0.05, 0.5f64.to_radians())).unwrap();
        let (a, y, x) = grid.nearest_index(&PoseOffset::new(0.1, -0.05, 0.5f64.to_radians())).unwrap();
        assert_eq!(t.data[grid.flat_index(a, y, x)], 1.0);
        assert_eq!(t.data.iter().sum::<f64>(), 1.0);
        let t = one_hot_target(&grid, &PoseOffset::new(0.026, 0.0, 0.0)).unwrap();
        let i = t.data.iter().position(|&v| v == 1.0).unwrap();
        let (a, y, x) = grid.unflatten(i);
        let off = grid.offset(a, y, x);
        assert!((off.dx - 0.05).abs() < 1e-12 && off.dy == 0.0 && off.dyaw == 0.0);
        assert!(one_hot_target(&grid, &PoseOffset::new(0.6, 0.0, 0.0)).is_err());
    }

    #[test]
    fn loss_ce_reference_values() {
        let grid = default_offset_grid();
        let target = one_hot_target(&grid, &PoseOffset::ZERO).unwrap();
        let uniform = softmax(&ScoreVolume::zeros(grid.shape()));
        assert!((loss_ce(&uniform, &target) - 3087f64.ln()).abs() < 1e-12);
        assert!((3087f64.ln() - 8.0349).abs() < 1e-4);
        assert_eq!(loss_ce(&target, &target), 0.0);
        let mut half = ScoreVolume::zeros(grid.shape());
        let i = target.data.iter().position(|&v| v == 1.0).unwrap();
        half.data[i] = 0.5;
        let n = half.data.len();
        half.data[(i + 1) % n] = 0.5;
        assert!((loss_ce(&half, &target) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn central_difference_on_quadratic() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1];
        let g = central_difference(f, &[0.7, -1.3], 1e-3).unwrap();
        assert!((g[0] - (6.0 * 0.7 + 2.0 * 1.3)).abs() < 1e-9);
        assert!((g[1] - (-2.0 * 0.7 - 1.3)).abs() < 1e-9);
        assert!(central_difference(f, &[0.0, 0.0], 0.0).is_err());
        let (p, s) = grad_check_instance(0).unwrap();
        assert!(fd_gradient_oracle(&p, &s, 0.0).is_err());
    }

    #[test]
    fn backward_requires_retained_activations() {
        let (p, s) = grad_check_instance(1).unwrap();
        let state = p.forward(&s, false).unwrap();
        assert!(!state.retained());
        assert!(matches!(p.backward(&state), Err(Error::MissingActivations)));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let (p, s) = grad_check_instance(seed).unwrap();
            let r = grad_check(&p, &s, 1e-3, 1e-6).unwrap();
            assert!(r.loss > 0.1, "seed {seed}: degenerate loss {}", r.loss);
            assert!(r.max_rel_err <= 1e-3, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn analytic_gradient_matches_small_step_differences_without_margin() {
        for seed in 0..3 {
            let (p, s) = grad_check_instance_with(seed, false).unwrap();
            let r = grad_check(&p, &s, 1e-6, 1e-6).unwrap();
            assert!(r.max_rel_err <= 1e-3, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn frozen_stacks_get_zero_gradients() {
        let (mut p, s) = grad_check_instance(2).unwrap();
        let n = p.nets.as_mut().unwrap();
        n.online.frozen = true;
        n.map.frozen = true;
        let g = p.backward(&p.forward(&s, true).unwrap()).unwrap();
        assert!(g.online.unwrap().layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|&v| v == 0.0)));
        assert!(g.map.unwrap().layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|&v| v == 0.0)));
        let mut f = Vec::new();
        g.fusion.unwrap().flatten_into(&mut f);
        assert!(f.iter().any(|&v| v != 0.0));
        let fd = fd_gradient_oracle(&p, &s, 1e-3).unwrap();
        let n_stack = p.nets.as_ref().unwrap().online.num_params() * 2;
        assert!(fd.flatten()[..n_stack].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_loss_has_vanishing_gradient() {
        let grid = default_offset_grid();
        let (_, mut s) = grad_check_instance(3).unwrap();
        // Online raster equal to the map region at the target offset.
        let (a, y, x) = (3, 10, 10);
        s.target = (a, y, x);
        s.region = s.region.with_center(Pose2::IDENTITY);
        let region_vals: Raster<f64> = resample_op(&s.map_patch.spec, &s.region, Boundary::Zero).apply(
            &s.map_patch.raster,
            s.region.rows(),
            s.region.cols(),
        );
        s.online.raster = region_vals.crop_cells(10, 10, 16, 16);
        let one = NetConfig {
            input_channels: 1,
            channels: vec![1],
            kernel_size: 1,
            pooling_stages: 0,
        };
        let mut stack = ConvStack::zeros(one).unwrap();
        stack.layers[0].weight[0] = 40.0;
        let nets = LearnedNets {
            online: stack.clone(),
            map: stack,
            fusion: None,
        };
        let p = Pipeline {
            grid,
            nets: Some(nets),
            scorer: Scorer::Direct,
        };
        let state = p.forward(&s, true).unwrap();
        assert!(state.loss < 1e-9, "loss {}", state.loss);
        assert!(p.backward(&state).unwrap().norm() < 1e-6);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut st = OptimizerState::new(Optimizer::adam(), 3);
        let mut p = vec![1.0, 2.0, 3.0];
        st.step(&mut p, &[0.5, -4.0, 1.0], &[true, true, false], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-7);
        assert!((p[1] - 2.01).abs() < 1e-7);
        assert_eq!(p[2], 3.0);
        let mut sgd = OptimizerState::new(Optimizer::Sgd, 1);
        let mut q = vec![1.0];
        sgd.step(&mut q, &[2.0], &[true], 0.1);
        assert!((q[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn params_round_trip_and_mask() {
        let (mut p, _) = grad_check_instance(4).unwrap();
        let x = p.params();
        let mask = p.trainable();
        assert_eq!(x.len(), mask.len());
        let y: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        p.load_params(&y);
        assert_eq!(p.params(), y);
        p.nets.as_mut().unwrap().map.frozen = true;
        assert_eq!(p.trainable().iter().filter(|&&m| !m).count(), p.nets.as_ref().unwrap().map.num_params());
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let base = coarse_backbone(17, 5).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let init = init_side_tuned(&base, &cfg).unwrap();
        let out = train_side_tuned(&[], &base, &default_offset_grid(), &cfg).unwrap();
        assert_eq!(out.nets.online, init.online);
        assert_eq!(out.nets.map, init.map);
        assert!(out.curve.is_empty());
        let unfrozen = ConvStack::init(base.config().clone(), 5).unwrap();
        assert!(train_side_tuned(&[], &unfrozen, &default_offset_grid(), &cfg).is_err());
    }

    proptest! {
        #[test]
        fn loss_and_gradient_shift_invariant(seed in 0u64..1000, shift in -50.0..50.0f64) {
            let grid = default_offset_grid();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = ScoreVolume::zeros(grid.shape());
            v.data.iter_mut().for_each(|s| *s = rng.random_range(-5.0..5.0));
            let target = rng.random_range(0..v.data.len());
            let (l0, g0) = loss_and_grad(&v, target);
            v.data.iter_mut().for_each(|s| *s += shift);
            let (l1, g1) = loss_and_grad(&v, target);
            prop_assert!((l0 - l1).abs() < 1e-9);
            for (a, b) in g0.iter().zip(&g1) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!(l0 >= 0.0);
        }
    }
}
