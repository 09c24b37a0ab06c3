//! Exhaustive 3-DoF pose search: score volumes by direct dot products or by
//! FFT cross-correlation, softmax, argmax and end-to-end localization.
//!
//! For yaw candidate `a` and translation lag `(ky, kx)` the score is
//! `sum_c R_a[c] * M[c + base + k]` where `R_a` is the online embedding
//! rotated by `a` about its center and `M` the map embedding resampled into
//! the prior's frame, concentric with the online grid and `base` cells wider
//! on each side. Sums run over the whole online footprint so border
//! candidates see no padding.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::embed::{fuse_multires, identity_embed, ConvStack, FusionParams};
use crate::error::{Error, Result};
use crate::geometry::{Pose2, PoseOffset};
use crate::raster::{
    resample, voxelize, warp_raster, BevGrid, Boundary, FeatureMap, Grid, GridSpec, LidarPoint, Raster,
};
use crate::world::IntensityMap;

fn uniform_axis(n_half: usize, step: f64) -> Vec<f64> {
    (-(n_half as i64)..=n_half as i64).map(|i| i as f64 * step).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetGrid {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub yaw: Vec<f64>,
}

impl OffsetGrid {
    pub fn uniform(xy_step: f64, xy_half: usize, yaw_step: f64, yaw_half: usize) -> Result<Self> {
        let g = Self {
            x: uniform_axis(xy_half, xy_step),
            y: uniform_axis(xy_half, xy_step),
            yaw: uniform_axis(yaw_half, yaw_step),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [("x", &self.x), ("y", &self.y), ("yaw", &self.yaw)] {
            let bad = |m: &str| Err(Error::InvalidOffsetGrid(format!("{name} axis {m}")));
            if axis.is_empty() || axis.len() % 2 == 0 {
                return bad("must have an odd, non-zero length");
            }
            if axis[axis.len() / 2] != 0.0 {
                return bad("must contain 0 at its center");
            }
            if axis.len() > 1 {
                let step = axis[1] - axis[0];
                if !(step > 0.0) {
                    return bad("must be increasing");
                }
                for (i, w) in axis.windows(2).enumerate() {
                    if ((w[1] - w[0]) - step).abs() > 1e-9 * step.max(1.0) {
                        return bad("must be uniformly spaced");
                    }
                    let mirror = axis[axis.len() - 1 - i];
                    if (axis[i] + mirror).abs() > 1e-12 {
                        return bad("must be symmetric about 0");
                    }
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.yaw.len(), self.y.len(), self.x.len())
    }

    pub fn len(&self) -> usize {
        self.x.len() * self.y.len() * self.yaw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat_index(&self, iyaw: usize, iy: usize, ix: usize) -> usize {
        (iyaw * self.y.len() + iy) * self.x.len() + ix
    }

    pub fn unflatten(&self, i: usize) -> (usize, usize, usize) {
        let nx = self.x.len();
        let ny = self.y.len();
        (i / (nx * ny), (i / nx) % ny, i % nx)
    }

    pub fn offset(&self, iyaw: usize, iy: usize, ix: usize) -> PoseOffset {
        PoseOffset::new(self.x[ix], self.y[iy], self.yaw[iyaw])
    }

    fn nearest(axis: &[f64], v: f64, name: &str) -> Result<usize> {
        let max = *axis.last().expect("validated");
        if !v.is_finite() || v.abs() > max + 1e-9 {
            return Err(Error::OutsideEnvelope(format!("{name} = {v}")));
        }
        if axis.len() == 1 {
            return Ok(0);
        }
        let step = axis[1] - axis[0];
        let i = ((v - axis[0]) / step).round() as usize;
        Ok(i.min(axis.len() - 1))
    }

    /// Per-axis nearest grid point `(yaw, y, x)`.
    pub fn nearest_index(&self, off: &PoseOffset) -> Result<(usize, usize, usize)> {
        Ok((
            Self::nearest(&self.yaw, off.dyaw, "dyaw")?,
            Self::nearest(&self.y, off.dy, "dy")?,
            Self::nearest(&self.x, off.dx, "dx")?,
        ))
    }

    pub fn snap(&self, off: &PoseOffset) -> Result<PoseOffset> {
        let (a, b, c) = self.nearest_index(off)?;
        Ok(self.offset(a, b, c))
    }

    pub fn max_abs(&self) -> PoseOffset {
        PoseOffset::new(
            *self.x.last().expect("validated"),
            *self.y.last().expect("validated"),
            *self.yaw.last().expect("validated"),
        )
    }

    /// Translation candidates as whole cells at `resolution`.
    pub fn cell_lags(&self, resolution: f64) -> Result<(Vec<isize>, Vec<isize>)> {
        let cells = |axis: &[f64], name: &str| {
            axis.iter()
                .map(|&v| {
                    let k = (v / resolution).round();
                    if (v / resolution - k).abs() > 1e-6 {
                        Err(Error::InvalidOffsetGrid(format!(
                            "{name} offset {v} is not a multiple of the {resolution} m cell"
                        )))
                    } else {
                        Ok(k as isize)
                    }
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok((cells(&self.y, "y")?, cells(&self.x, "x")?))
    }

    /// Cells of map margin needed around the online grid, `(rows, cols)`.
    pub fn cell_pads(&self, resolution: f64) -> Result<(usize, usize)> {
        let (ly, lx) = self.cell_lags(resolution)?;
        let m = |v: &[isize]| v.iter().map(|k| k.unsigned_abs()).max().unwrap_or(0);
        Ok((m(&ly), m(&lx)))
    }
}

/// +-0.5 m at 5 cm in x and y, +-1.5 degrees at 0.5 degrees in yaw.
pub fn default_offset_grid() -> OffsetGrid {
    OffsetGrid::uniform(0.05, 10, 0.5f64.to_radians(), 3).expect("valid default grid")
}

/// Values over an [`OffsetGrid`], indexed `(yaw, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume {
    pub shape: (usize, usize, usize),
    pub data: Vec<f64>,
}

/// A probability distribution over an [`OffsetGrid`].
pub type ProbVolume = ScoreVolume;

impl ScoreVolume {
    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.0 * shape.1 * shape.2],
        }
    }

    pub fn get(&self, iyaw: usize, iy: usize, ix: usize) -> f64 {
        self.data[(iyaw * self.shape.1 + iy) * self.shape.2 + ix]
    }
}

pub fn softmax(vol: &ScoreVolume) -> ProbVolume {
    let max = vol.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut data: Vec<f64> = vol.data.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = data.iter().sum();
    data.iter_mut().for_each(|p| *p /= z);
    ScoreVolume {
        shape: vol.shape,
        data,
    }
}

/// `log softmax`, stable for widely spread scores.
pub fn log_softmax(vol: &ScoreVolume) -> Vec<f64> {
    let max = vol.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + vol.data.iter().map(|&s| (s - max).exp()).sum::<f64>().ln();
    vol.data.iter().map(|&s| s - lse).collect()
}

/// Squared offset norm used to break score ties; one degree counts as 0.5 m.
pub fn tie_break_key(off: &PoseOffset) -> f64 {
    let yaw_m = off.dyaw.to_degrees() * 0.5;
    off.dx * off.dx + off.dy * off.dy + yaw_m * yaw_m
}

/// Index of the maximal score; ties go to the smallest [`tie_break_key`]
/// and then to the first index in `(yaw, y, x)` order.
pub fn argmax_index(vol: &ScoreVolume, grid: &OffsetGrid) -> (usize, usize, usize) {
    let key = |i: usize| {
        let (a, y, x) = grid.unflatten(i);
        tie_break_key(&grid.offset(a, y, x))
    };
    let mut best = 0;
    let mut best_key = key(0);
    for (i, &s) in vol.data.iter().enumerate().skip(1) {
        let b = vol.data[best];
        if s > b {
            best = i;
            best_key = key(i);
        } else if s == b {
            let k = key(i);
            if k < best_key {
                best = i;
                best_key = k;
            }
        }
    }
    grid.unflatten(best)
}

pub fn argmax_pose(vol: &ScoreVolume, grid: &OffsetGrid) -> PoseOffset {
    let (a, y, x) = argmax_index(vol, grid);
    grid.offset(a, y, x)
}

/// Geometry shared by both scoring paths.
struct Layout {
    lags_y: Vec<isize>,
    lags_x: Vec<isize>,
    base_y: usize,
    base_x: usize,
}

fn layout(online: &FeatureMap, map: &FeatureMap, grid: &OffsetGrid) -> Result<Layout> {
    grid.validate()?;
    if online.channels() != map.channels() {
        return Err(Error::ChannelMismatch {
            expected: online.channels(),
            actual: map.channels(),
        });
    }
    let res = online.spec.resolution();
    if (map.spec.resolution() - res).abs() > 1e-12 * res {
        return Err(Error::ExtentMismatch("online and map resolutions differ".into()));
    }
    let (lags_y, lags_x) = grid.cell_lags(res)?;
    let (pad_y, pad_x) = grid.cell_pads(res)?;
    let (or, oc) = (online.spec.rows(), online.spec.cols());
    let (mr, mc) = (map.spec.rows(), map.spec.cols());
    if mr < or + 2 * pad_y || mc < oc + 2 * pad_x || (mr - or) % 2 != 0 || (mc - oc) % 2 != 0 {
        return Err(Error::ExtentMismatch(format!(
            "map {mr}x{mc} does not pad online {or}x{oc} by {pad_y}x{pad_x} cells concentrically"
        )));
    }
    Ok(Layout {
        lags_y,
        lags_x,
        base_y: (mr - or) / 2,
        base_x: (mc - oc) / 2,
    })
}

/// Online embedding rotated about its center by `yaw`.
pub fn rotate_online(online: &FeatureMap, yaw: f64) -> Raster<f64> {
    let s = &online.spec;
    if yaw == 0.0 {
        return online.raster.clone();
    }
    warp_raster(&online.raster, s.resolution(), &PoseOffset::new(0.0, 0.0, yaw))
}

fn direct_lag(r: &Raster<f64>, m: &Raster<f64>, oy: usize, ox: usize) -> f64 {
    let (rows, cols) = (r.rows(), r.cols());
    let mut acc = 0.0;
    for ch in 0..r.channels() {
        let rp = r.plane(ch);
        let mp = m.plane(ch);
        for y in 0..rows {
            let a = &rp[y * cols..(y + 1) * cols];
            let start = (y + oy) * m.cols() + ox;
            let b = &mp[start..start + cols];
            acc += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        }
    }
    acc
}

pub fn score_direct(online: &FeatureMap, map: &FeatureMap, grid: &OffsetGrid) -> Result<ScoreVolume> {
    let l = layout(online, map, grid)?;
    let mut vol = ScoreVolume::zeros(grid.shape());
    for (a, &yaw) in grid.yaw.iter().enumerate() {
        let r = rotate_online(online, yaw);
        for (iy, &ky) in l.lags_y.iter().enumerate() {
            for (ix, &kx) in l.lags_x.iter().enumerate() {
                let oy = (l.base_y as isize + ky) as usize;
                let ox = (l.base_x as isize + kx) as usize;
                vol.data[grid.flat_index(a, iy, ix)] = direct_lag(&r, &map.raster, oy, ox);
            }
        }
    }
    Ok(vol)
}

/// Smallest `n' >= n` of the form `2^a` or `3 * 2^a`.
pub fn smooth_size(n: usize) -> usize {
    let n = n.max(1);
    let pow2 = n.next_power_of_two();
    let three = 3 * n.div_ceil(3).next_power_of_two();
    pow2.min(three)
}

struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    line: Vec<Complex64>,
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize, live_rows: usize) {
    const B: usize = 32;
    dst.iter_mut().for_each(|v| *v = Complex64::default());
    for r0 in (0..live_rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(live_rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

impl Fft2 {
    fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft_forward(cols);
        let col_fwd = planner.plan_fft_forward(rows);
        let row_inv = planner.plan_fft_inverse(cols);
        let col_inv = planner.plan_fft_inverse(rows);
        let scratch_len = [&row_fwd, &col_fwd, &row_inv, &col_inv]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            rows,
            cols,
            row_fwd,
            col_fwd,
            row_inv,
            col_inv,
            scratch: vec![Complex64::default(); scratch_len],
            line: vec![Complex64::default(); cols],
        }
    }

    /// Forward 2-D transform of row-major `buf` whose rows at and beyond
    /// `live_rows` are zero. The spectrum is written to `spec` in
    /// column-major (transposed) layout; `buf` is clobbered.
    fn forward(&mut self, buf: &mut [Complex64], spec: &mut [Complex64], live_rows: usize) {
        let (rows, cols) = (self.rows, self.cols);
        self.row_fwd
            .process_with_scratch(&mut buf[..live_rows * cols], &mut self.scratch);
        transpose(buf, spec, rows, cols, live_rows);
        self.col_fwd.process_with_scratch(spec, &mut self.scratch);
    }

    /// Inverse transform of a transposed spectrum evaluated only on
    /// `out_rows x out_cols`; returns the unnormalized values row-major.
    fn inverse_window(
        &mut self,
        spec: &mut [Complex64],
        out_rows: &[usize],
        out_cols: &[usize],
    ) -> Vec<Complex64> {
        let (rows, cols) = (self.rows, self.cols);
        self.col_inv.process_with_scratch(spec, &mut self.scratch);
        let mut out = vec![Complex64::default(); out_rows.len() * out_cols.len()];
        for (i, &r) in out_rows.iter().enumerate() {
            for c in 0..cols {
                self.line[c] = spec[c * rows + r];
            }
            self.row_inv.process_with_scratch(&mut self.line, &mut self.scratch);
            for (j, &c) in out_cols.iter().enumerate() {
                out[i * out_cols.len() + j] = self.line[c];
            }
        }
        out
    }
}

/// FFT path: one zero-padded cross-correlation per yaw candidate, two yaws
/// packed into the real and imaginary parts of each transform.
pub fn score_fft(online: &FeatureMap, map: &FeatureMap, grid: &OffsetGrid) -> Result<ScoreVolume> {
    let l = layout(online, map, grid)?;
    let (mr, mc) = (map.spec.rows(), map.spec.cols());
    let (or, oc) = (online.spec.rows(), online.spec.cols());
    let (nr, nc) = (smooth_size(mr), smooth_size(mc));
    let n = nr * nc;
    let mut fft = Fft2::new(nr, nc);
    let channels = online.channels();

    let mut map_hat = Vec::with_capacity(channels);
    for ch in 0..channels {
        let mut buf = vec![Complex64::default(); n];
        let src = map.raster.plane(ch);
        for r in 0..mr {
            for c in 0..mc {
                buf[r * nc + c] = Complex64::new(src[r * mc + c], 0.0);
            }
        }
        let mut spec = vec![Complex64::default(); n];
        fft.forward(&mut buf, &mut spec, mr);
        map_hat.push(spec);
    }

    let out_rows: Vec<usize> = l.lags_y.iter().map(|&k| (l.base_y as isize + k) as usize).collect();
    let out_cols: Vec<usize> = l.lags_x.iter().map(|&k| (l.base_x as isize + k) as usize).collect();
    let norm = 1.0 / n as f64;
    let mut vol = ScoreVolume::zeros(grid.shape());
    let mut acc = vec![Complex64::default(); n];
    let mut buf = vec![Complex64::default(); n];
    let mut spec = vec![Complex64::default(); n];

    for pair in (0..grid.yaw.len()).collect::<Vec<_>>().chunks(2) {
        let ra = rotate_online(online, grid.yaw[pair[0]]);
        let rb = pair.get(1).map(|&b| rotate_online(online, grid.yaw[b]));
        acc.iter_mut().for_each(|v| *v = Complex64::default());
        for (ch, mh) in map_hat.iter().enumerate() {
            buf[..or * nc].iter_mut().for_each(|v| *v = Complex64::default());
            let pa = ra.plane(ch);
            let pb = rb.as_ref().map(|r| r.plane(ch));
            for r in 0..or {
                for c in 0..oc {
                    let im = pb.map_or(0.0, |p| p[r * oc + c]);
                    buf[r * nc + c] = Complex64::new(pa[r * oc + c], im);
                }
            }
            fft.forward(&mut buf, &mut spec, or);
            for ((a, z), m) in acc.iter_mut().zip(&spec).zip(mh) {
                *a += z.conj() * m;
            }
        }
        let out = fft.inverse_window(&mut acc, &out_rows, &out_cols);
        for iy in 0..out_rows.len() {
            for ix in 0..out_cols.len() {
                let v = out[iy * out_cols.len() + ix] * norm;
                vol.data[grid.flat_index(pair[0], iy, ix)] = v.re;
                if pair.len() > 1 {
                    vol.data[grid.flat_index(pair[1], iy, ix)] = -v.im;
                }
            }
        }
    }
    Ok(vol)
}

/// Gradients of `sum_k d_scores[k] * score[k]` for one yaw with respect to
/// the rotated online embedding and the map region.
pub fn correlation_backward(
    rotated: &Raster<f64>,
    map: &Raster<f64>,
    base: (usize, usize),
    lags: (&[isize], &[isize]),
    d_scores: &[f64],
    d_rotated: &mut Raster<f64>,
    d_map: &mut Raster<f64>,
) {
    let (rows, cols) = (rotated.rows(), rotated.cols());
    let mcols = map.cols();
    let (lags_y, lags_x) = lags;
    for ch in 0..rotated.channels() {
        for (iy, &ky) in lags_y.iter().enumerate() {
            for (ix, &kx) in lags_x.iter().enumerate() {
                let g = d_scores[iy * lags_x.len() + ix];
                if g == 0.0 {
                    continue;
                }
                let oy = (base.0 as isize + ky) as usize;
                let ox = (base.1 as isize + kx) as usize;
                for y in 0..rows {
                    let start = (y + oy) * mcols + ox;
                    let r_row = y * cols..(y + 1) * cols;
                    {
                        let m_row = &map.plane(ch)[start..start + cols];
                        let dr = &mut d_rotated.plane_mut(ch)[r_row.clone()];
                        for (d, &m) in dr.iter_mut().zip(m_row) {
                            *d += g * m;
                        }
                    }
                    let r_vals = &rotated.plane(ch)[r_row];
                    let dm = &mut d_map.plane_mut(ch)[start..start + cols];
                    for (d, &r) in dm.iter_mut().zip(r_vals) {
                        *d += g * r;
                    }
                }
            }
        }
    }
}

/// Map region in the prior's frame: the online grid widened by the search
/// margin, centered on the prior.
pub fn map_region_spec(online: &GridSpec, prior: &Pose2, grid: &OffsetGrid) -> Result<GridSpec> {
    let (py, px) = grid.cell_pads(online.resolution())?;
    Ok(online.padded(px, py).with_center(prior.compose(&online.center())))
}

/// Learned embeddings: `online` embeds the fine sweep raster, `map` the map,
/// and an optional frozen coarse backbone contributes through fusion.
#[derive(Debug, Clone)]
pub struct LearnedNets {
    pub online: ConvStack,
    pub map: ConvStack,
    pub fusion: Option<Fusion>,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub base: ConvStack,
    pub params: FusionParams,
    pub coarse_spec: GridSpec,
}

#[derive(Debug, Clone)]
pub struct Localizer {
    pub grid: OffsetGrid,
    pub online_spec: GridSpec,
    /// `None` selects the identity embedding on both sides.
    pub nets: Option<LearnedNets>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub offset: PoseOffset,
    pub corrected_pose: Pose2,
    pub score: f64,
    pub index: (usize, usize, usize),
    pub prob_volume: Option<ProbVolume>,
}

impl Localizer {
    pub fn identity(online_spec: GridSpec, grid: OffsetGrid) -> Self {
        Self {
            grid,
            online_spec,
            nets: None,
        }
    }

    /// Embeds the whole map once; reused for every frame on that map.
    pub fn embed_map(&self, map: &IntensityMap) -> Result<FeatureMap> {
        match &self.nets {
            None => Ok(identity_embed(&map.grid)),
            Some(n) => n.map.forward(&map.grid),
        }
    }

    pub fn embed_online(&self, sweep: &[LidarPoint]) -> Result<FeatureMap> {
        let fine = voxelize(sweep, &self.online_spec)?;
        match &self.nets {
            None => Ok(identity_embed(&fine)),
            Some(n) => {
                let g = n.online.forward(&intensity_only(&fine))?;
                match &n.fusion {
                    None => Ok(g),
                    Some(f) => {
                        let coarse = voxelize(sweep, &f.coarse_spec)?;
                        let feat = f.base.forward(&coarse)?;
                        fuse_multires(&g, &feat, &f.params)
                    }
                }
            }
        }
    }

    pub fn localize(
        &self,
        sweep: &[LidarPoint],
        map: &IntensityMap,
        map_emb: &FeatureMap,
        prior: &Pose2,
        keep_probs: bool,
    ) -> Result<PoseEstimate> {
        if !map.contains(prior.translation()) {
            return Err(Error::PoseOutsideMap {
                x: prior.x,
                y: prior.y,
            });
        }
        let online = self.embed_online(sweep)?;
        let region = map_region_spec(&self.online_spec, prior, &self.grid)?;
        let m: FeatureMap = resample(map_emb, &region, Boundary::Zero);
        let vol = score_fft(&online, &m, &self.grid)?;
        let index = argmax_index(&vol, &self.grid);
        let offset = self.grid.offset(index.0, index.1, index.2);
        Ok(PoseEstimate {
            offset,
            corrected_pose: prior.compose(&offset.as_pose()),
            score: vol.get(index.0, index.1, index.2),
            index,
            prob_volume: keep_probs.then(|| softmax(&vol)),
        })
    }
}

/// Single-channel view of a raster's intensity.
pub fn intensity_only(g: &BevGrid) -> BevGrid {
    Grid {
        spec: g.spec.clone(),
        raster: g.raster.extract_channel(g.intensity_channel()),
    }
}
