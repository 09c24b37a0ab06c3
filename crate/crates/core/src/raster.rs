//! Bird's-eye-view rasters: voxelization, rigid warps, crops and bilinear
//! resampling.
//!
//! A grid's local frame has its origin at the grid's metric center, `x`
//! along columns and `y` along rows. Cell `(r, c)` is centered at
//! `((c - (cols-1)/2) * res, (r - (rows-1)/2) * res)`. The spec's `center`
//! pose places that local frame inside a parent frame (vehicle or map).

use std::ops::Range;

use crate::error::{Error, Result};
use crate::geometry::{Point2, Pose2, PoseOffset};

/// Scalar element of a raster. Grids built from sensor data store `f32`;
/// embeddings and everything differentiated store `f64`.
pub trait Real: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

const ALIGN_TOL: f64 = 1e-6;

fn cells_for(extent: f64, resolution: f64, what: &str) -> Result<usize> {
    let n = (extent / resolution).round();
    if n < 1.0 || (n * resolution - extent).abs() > ALIGN_TOL * extent.max(1.0) {
        return Err(Error::InvalidGridSpec(format!(
            "{what} {extent} is not a positive multiple of resolution {resolution}"
        )));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    resolution: f64,
    extent_x: f64,
    extent_y: f64,
    height_slices: usize,
    height_range: (f64, f64),
    center: Pose2,
    rows: usize,
    cols: usize,
}

impl GridSpec {
    pub fn new(
        resolution: f64,
        extent_x: f64,
        extent_y: f64,
        height_slices: usize,
        height_range: (f64, f64),
        center: Pose2,
    ) -> Result<Self> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::InvalidGridSpec(format!("resolution {resolution}")));
        }
        if !(height_range.0.is_finite() && height_range.1.is_finite())
            || height_range.1 <= height_range.0
        {
            return Err(Error::InvalidGridSpec(format!(
                "height range {height_range:?}"
            )));
        }
        let cols = cells_for(extent_x, resolution, "extent_x")?;
        let rows = cells_for(extent_y, resolution, "extent_y")?;
        Ok(Self {
            resolution,
            extent_x,
            extent_y,
            height_slices,
            height_range,
            center,
            rows,
            cols,
        })
    }

    /// Square-celled spec from a cell count; the extent follows.
    pub fn from_cells(
        resolution: f64,
        cols: usize,
        rows: usize,
        height_slices: usize,
        height_range: (f64, f64),
        center: Pose2,
    ) -> Result<Self> {
        Self::new(
            resolution,
            cols as f64 * resolution,
            rows as f64 * resolution,
            height_slices,
            height_range,
            center,
        )
    }

    /// 20 cm perception raster over 144 m x 80 m x 3.2 m with 16 height slices.
    pub fn coarse() -> Self {
        Self::new(0.2, 144.0, 80.0, 16, DEFAULT_HEIGHT_RANGE, Pose2::IDENTITY)
            .expect("valid coarse spec")
    }

    /// 5 cm localization raster over 48.05 m x 24.05 m, intensity only.
    pub fn fine() -> Self {
        Self::new(0.05, 48.05, 24.05, 0, DEFAULT_HEIGHT_RANGE, Pose2::IDENTITY)
            .expect("valid fine spec")
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }
    pub fn extent_x(&self) -> f64 {
        self.extent_x
    }
    pub fn extent_y(&self) -> f64 {
        self.extent_y
    }
    pub fn height_slices(&self) -> usize {
        self.height_slices
    }
    pub fn height_range(&self) -> (f64, f64) {
        self.height_range
    }
    pub fn center(&self) -> Pose2 {
        self.center
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    /// Occupancy slices plus one intensity channel.
    pub fn channels(&self) -> usize {
        self.height_slices + 1
    }

    pub fn with_center(&self, center: Pose2) -> Self {
        Self {
            center,
            ..self.clone()
        }
    }

    /// Same geometry, `pad` extra cells on every side.
    pub fn padded(&self, pad_x: usize, pad_y: usize) -> Self {
        let cols = self.cols + 2 * pad_x;
        let rows = self.rows + 2 * pad_y;
        Self {
            extent_x: cols as f64 * self.resolution,
            extent_y: rows as f64 * self.resolution,
            cols,
            rows,
            ..self.clone()
        }
    }

    /// Local metric coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> Point2 {
        [
            (col as f64 - (self.cols as f64 - 1.0) / 2.0) * self.resolution,
            (row as f64 - (self.rows as f64 - 1.0) / 2.0) * self.resolution,
        ]
    }

    /// Fractional (col, row) of a local metric point.
    pub fn local_to_cell(&self, pt: Point2) -> (f64, f64) {
        (
            pt[0] / self.resolution + (self.cols as f64 - 1.0) / 2.0,
            pt[1] / self.resolution + (self.rows as f64 - 1.0) / 2.0,
        )
    }

    /// Whether a parent-frame point falls inside the grid footprint.
    pub fn contains(&self, parent_pt: Point2) -> bool {
        let q = self.center.inverse().apply(parent_pt);
        q[0].abs() <= self.extent_x / 2.0 && q[1].abs() <= self.extent_y / 2.0
    }
}

pub const DEFAULT_HEIGHT_RANGE: (f64, f64) = (-0.1, 3.1);

/// Dense channel-major, row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    channels: usize,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Raster<T> {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            channels,
            rows,
            cols,
            data: vec![T::default(); channels * rows * cols],
        }
    }

    pub fn from_vec(channels: usize, rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * rows * cols {
            return Err(Error::InvalidArgument(format!(
                "raster data length {} != {channels}x{rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            rows,
            cols,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn plane_len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn plane(&self, ch: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn plane_mut(&mut self, ch: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[ch * n..(ch + 1) * n]
    }

    #[inline]
    pub fn get(&self, ch: usize, row: usize, col: usize) -> T {
        self.data[(ch * self.rows + row) * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, row: usize, col: usize, v: T) {
        self.data[(ch * self.rows + row) * self.cols + col] = v;
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            channels: self.channels,
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Raster<f64> {
        self.map(|v| v.to_f64())
    }

    /// Single-channel raster holding one plane of `self`.
    pub fn extract_channel(&self, ch: usize) -> Raster<T> {
        Raster {
            channels: 1,
            rows: self.rows,
            cols: self.cols,
            data: self.plane(ch).to_vec(),
        }
    }

    /// Sub-block `rows x cols` with its top-left cell at `(r0, c0)`.
    pub fn crop_cells(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Raster<T> {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        let mut out = Raster::zeros(self.channels, rows, cols);
        for ch in 0..self.channels {
            for r in 0..rows {
                let src = (ch * self.rows + r0 + r) * self.cols + c0;
                let dst = (ch * rows + r) * cols;
                out.data[dst..dst + cols].copy_from_slice(&self.data[src..src + cols]);
            }
        }
        out
    }
}

/// A raster placed in space by a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub spec: GridSpec,
    pub raster: Raster<T>,
}

/// LiDAR occupancy slices plus a mean-intensity channel.
pub type BevGrid = Grid<f32>;
/// A georeferenced embedding; channel count is the embedding depth.
pub type FeatureMap = Grid<f64>;

impl<T: Real> Grid<T> {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        let raster = Raster::zeros(channels, spec.rows(), spec.cols());
        Self { spec, raster }
    }

    pub fn new(spec: GridSpec, raster: Raster<T>) -> Result<Self> {
        if raster.rows() != spec.rows() || raster.cols() != spec.cols() {
            return Err(Error::ExtentMismatch(format!(
                "raster {}x{} vs spec {}x{}",
                raster.rows(),
                raster.cols(),
                spec.rows(),
                spec.cols()
            )));
        }
        Ok(Self { spec, raster })
    }

    pub fn channels(&self) -> usize {
        self.raster.channels()
    }

    /// Last channel; for a [`BevGrid`] that is mean intensity.
    pub fn intensity_channel(&self) -> usize {
        self.raster.channels() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

/// Bins points into the grid: one occupancy count per point in its height
/// slice, and the per-column mean intensity in the last channel.
pub fn voxelize(points: &[LidarPoint], spec: &GridSpec) -> Result<BevGrid> {
    let rows = spec.rows();
    let cols = spec.cols();
    let slices = spec.height_slices();
    let (zmin, zmax) = spec.height_range();
    let slice_h = (zmax - zmin) / slices.max(1) as f64;
    let to_local = spec.center().inverse();

    let mut grid = Grid::zeros(spec.clone(), spec.channels());
    let mut sums = vec![0.0f64; rows * cols];
    let mut counts = vec![0u32; rows * cols];

    for p in points {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite()) {
            return Err(Error::NonFinite("point coordinate"));
        }
        if !(0.0..=1.0).contains(&p.intensity) {
            return Err(Error::InvalidArgument(format!(
                "intensity {} outside [0, 1]",
                p.intensity
            )));
        }
        let z = p.z as f64;
        if z < zmin || z >= zmax {
            continue;
        }
        let q = to_local.apply([p.x as f64, p.y as f64]);
        let fc = (q[0] / spec.resolution() + cols as f64 / 2.0).floor();
        let fr = (q[1] / spec.resolution() + rows as f64 / 2.0).floor();
        if fc < 0.0 || fr < 0.0 || fc >= cols as f64 || fr >= rows as f64 {
            continue;
        }
        let (r, c) = (fr as usize, fc as usize);
        let idx = r * cols + c;
        if slices > 0 {
            let s = (((z - zmin) / slice_h).floor() as usize).min(slices - 1);
            let plane = grid.raster.plane_mut(s);
            plane[idx] += 1.0;
        }
        sums[idx] += p.intensity as f64;
        counts[idx] += 1;
    }

    let plane = grid.raster.plane_mut(slices);
    for ((v, &s), &n) in plane.iter_mut().zip(&sums).zip(&counts) {
        if n > 0 {
            *v = (s / n as f64) as f32;
        }
    }
    Ok(grid)
}

/// How samples outside the source raster are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Zero,
    Clamp,
}

/// A sparse bilinear resampling operator between two single-channel planes.
/// Applied per channel; its transpose scatters gradients back.
#[derive(Debug, Clone)]
pub struct BilinearOp {
    src_len: usize,
    offsets: Vec<u32>,
    index: Vec<u32>,
    weight: Vec<f64>,
}

#[inline]
fn fast_floor(v: f64) -> f64 {
    if v.abs() < 4.0e15 {
        let t = v as i64 as f64;
        if t > v {
            t - 1.0
        } else {
            t
        }
    } else {
        v.floor()
    }
}

#[inline]
fn snap(v: f64) -> f64 {
    let r = fast_floor(v + 0.5);
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Non-zero bilinear taps of one fractional source position.
struct Taps {
    index: [u32; 4],
    weight: [f64; 4],
    n: usize,
}

impl Taps {
    #[inline]
    fn new(sx: f64, sy: f64, src_rows: usize, src_cols: usize, boundary: Boundary) -> Self {
        let (maxc, maxr) = (src_cols as f64 - 1.0, src_rows as f64 - 1.0);
        let (mut sx, mut sy) = (snap(sx), snap(sy));
        if boundary == Boundary::Clamp {
            sx = sx.clamp(0.0, maxc);
            sy = sy.clamp(0.0, maxr);
        }
        let x0 = fast_floor(sx);
        let y0 = fast_floor(sy);
        let fx = sx - x0;
        let fy = sy - y0;
        if fx != 0.0 && fy != 0.0 && x0 >= 0.0 && y0 >= 0.0 && x0 < maxc && y0 < maxr {
            let i = y0 as u32 * src_cols as u32 + x0 as u32;
            let sc = src_cols as u32;
            return Taps {
                index: [i, i + 1, i + sc, i + sc + 1],
                weight: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
                n: 4,
            };
        }
        let cand = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1.0, y0, fx * (1.0 - fy)),
            (x0, y0 + 1.0, (1.0 - fx) * fy),
            (x0 + 1.0, y0 + 1.0, fx * fy),
        ];
        let mut t = Taps {
            index: [0; 4],
            weight: [0.0; 4],
            n: 0,
        };
        for (tx, ty, w) in cand {
            if w == 0.0 || tx < 0.0 || ty < 0.0 || tx > maxc || ty > maxr {
                continue;
            }
            t.index[t.n] = (ty as usize * src_cols + tx as usize) as u32;
            t.weight[t.n] = w;
            t.n += 1;
        }
        t
    }

    #[inline]
    fn eval<S: Real, D: Real>(&self, src: &[S]) -> D {
        match self.n {
            0 => D::default(),
            1 if self.weight[0] == 1.0 => D::from_f64(src[self.index[0] as usize].to_f64()),
            n => {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += self.weight[k] * src[self.index[k] as usize].to_f64();
                }
                D::from_f64(acc)
            }
        }
    }
}

/// Bilinear resampling evaluated on the fly; equal to building the
/// [`BilinearOp`] with the same arguments and applying it.
pub fn sample_with<S: Real, D: Real>(
    src: &Raster<S>,
    dst_rows: usize,
    dst_cols: usize,
    boundary: Boundary,
    mut source_of: impl FnMut(usize, usize) -> (f64, f64),
) -> Raster<D> {
    let mut out = Raster::zeros(src.channels(), dst_rows, dst_cols);
    let plane = dst_rows * dst_cols;
    let src_plane = src.plane_len();
    let (sd, od) = (src.data(), out.data_mut());
    let (rows, cols) = (src.rows(), src.cols());
    let (maxc, maxr) = (cols as f64 - 1.0, rows as f64 - 1.0);
    let lo = 1e-9;
    let hi = 1.0 - 1e-9;
    for r in 0..dst_rows {
        for c in 0..dst_cols {
            let (sx, sy) = source_of(r, c);
            let o = r * dst_cols + c;
            let (x0, y0) = (fast_floor(sx), fast_floor(sy));
            let (fx, fy) = (sx - x0, sy - y0);
            // Interior cells with no coordinate near an integer need neither
            // snapping nor bounds handling.
            if fx >= lo && fx <= hi && fy >= lo && fy <= hi && x0 >= 0.0 && y0 >= 0.0 && x0 < maxc && y0 < maxr {
                let i = y0 as usize * cols + x0 as usize;
                let w = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
                for ch in 0..src.channels() {
                    let p = &sd[ch * src_plane..(ch + 1) * src_plane];
                    let v = w[0] * p[i].to_f64()
                        + w[1] * p[i + 1].to_f64()
                        + w[2] * p[i + cols].to_f64()
                        + w[3] * p[i + cols + 1].to_f64();
                    od[ch * plane + o] = D::from_f64(v);
                }
                continue;
            }
            let t = Taps::new(sx, sy, rows, cols, boundary);
            for ch in 0..src.channels() {
                od[ch * plane + o] = t.eval(&sd[ch * src_plane..(ch + 1) * src_plane]);
            }
        }
    }
    out
}

impl BilinearOp {
    /// Builds the operator from a function mapping each destination cell
    /// `(row, col)` to a fractional source `(col, row)`.
    pub fn build(
        src_rows: usize,
        src_cols: usize,
        dst_rows: usize,
        dst_cols: usize,
        boundary: Boundary,
        mut source_of: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Self {
        let n = dst_rows * dst_cols;
        let mut offsets = Vec::with_capacity(n + 1);
        let mut index = Vec::with_capacity(n * 2);
        let mut weight = Vec::with_capacity(n * 2);
        offsets.push(0);
        for r in 0..dst_rows {
            for c in 0..dst_cols {
                let (sx, sy) = source_of(r, c);
                let t = Taps::new(sx, sy, src_rows, src_cols, boundary);
                index.extend_from_slice(&t.index[..t.n]);
                weight.extend_from_slice(&t.weight[..t.n]);
                offsets.push(index.len() as u32);
            }
        }
        Self {
            src_len: src_rows * src_cols,
            offsets,
            index,
            weight,
        }
    }

    pub fn dst_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn apply_plane<S: Real, D: Real>(&self, src: &[S], dst: &mut [D]) {
        debug_assert_eq!(src.len(), self.src_len);
        debug_assert_eq!(dst.len(), self.dst_len());
        for (o, out) in dst.iter_mut().enumerate() {
            let (a, b) = (self.offsets[o] as usize, self.offsets[o + 1] as usize);
            *out = match b - a {
                0 => D::default(),
                1 if self.weight[a] == 1.0 => D::from_f64(src[self.index[a] as usize].to_f64()),
                _ => {
                    let mut acc = 0.0;
                    for k in a..b {
                        acc += self.weight[k] * src[self.index[k] as usize].to_f64();
                    }
                    D::from_f64(acc)
                }
            };
        }
    }

    /// Accumulates `dst_grad` scattered through the operator into `src_grad`.
    pub fn apply_transpose_plane(&self, dst_grad: &[f64], src_grad: &mut [f64]) {
        debug_assert_eq!(src_grad.len(), self.src_len);
        for (o, &g) in dst_grad.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let (a, b) = (self.offsets[o] as usize, self.offsets[o + 1] as usize);
            for k in a..b {
                src_grad[self.index[k] as usize] += self.weight[k] * g;
            }
        }
    }

    pub fn apply<S: Real, D: Real>(&self, src: &Raster<S>, dst_rows: usize, dst_cols: usize) -> Raster<D> {
        let mut out = Raster::zeros(src.channels(), dst_rows, dst_cols);
        for ch in 0..src.channels() {
            self.apply_plane(src.plane(ch), out.plane_mut(ch));
        }
        out
    }
}

fn warp_source(
    rows: usize,
    cols: usize,
    resolution: f64,
    offset: &PoseOffset,
) -> impl Fn(usize, usize) -> (f64, f64) {
    let (cx, cy) = ((cols as f64 - 1.0) / 2.0, (rows as f64 - 1.0) / 2.0);
    let tx = snap(offset.dx / resolution);
    let ty = snap(offset.dy / resolution);
    let (s, c) = if offset.dyaw == 0.0 {
        (0.0, 1.0)
    } else {
        offset.dyaw.sin_cos()
    };
    move |r, col| {
        let pu = col as f64 - cx - tx;
        let pv = r as f64 - cy - ty;
        (c * pu + s * pv + cx, -s * pu + c * pv + cy)
    }
}

/// Operator for the rigid motion `offset` (rotation about the grid center,
/// then translation) of a `rows x cols` raster with cell size `resolution`.
/// Content moves with the motion; uncovered cells are zero.
pub fn warp_op(rows: usize, cols: usize, resolution: f64, offset: &PoseOffset) -> BilinearOp {
    BilinearOp::build(rows, cols, rows, cols, Boundary::Zero, warp_source(rows, cols, resolution, offset))
}

/// Warps a bare raster whose cells are `resolution` metres wide.
pub fn warp_raster<T: Real>(raster: &Raster<T>, resolution: f64, offset: &PoseOffset) -> Raster<T> {
    let (rows, cols) = (raster.rows(), raster.cols());
    sample_with(raster, rows, cols, Boundary::Zero, warp_source(rows, cols, resolution, offset))
}

/// Resamples `grid` under a rigid motion about its center (bilinear, zero
/// padding). The spec is unchanged.
pub fn warp<T: Real>(grid: &Grid<T>, offset: &PoseOffset) -> Grid<T> {
    Grid {
        spec: grid.spec.clone(),
        raster: warp_raster(&grid.raster, grid.spec.resolution(), offset),
    }
}

/// Axis-aligned rectangle in a grid's parent frame, metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn centered(cx: f64, cy: f64, width: f64, height: f64) -> Self {
        Self {
            min_x: cx - width / 2.0,
            min_y: cy - height / 2.0,
            max_x: cx + width / 2.0,
            max_y: cy + height / 2.0,
        }
    }

    pub fn contains_rect(&self, other: &Rect, tol: f64) -> bool {
        other.min_x >= self.min_x - tol
            && other.min_y >= self.min_y - tol
            && other.max_x <= self.max_x + tol
            && other.max_y <= self.max_y + tol
    }
}

impl GridSpec {
    /// Footprint in the parent frame. Only meaningful for unrotated grids.
    pub fn footprint(&self) -> Rect {
        Rect::centered(self.center.x, self.center.y, self.extent_x, self.extent_y)
    }

    fn cell_edge(&self, v: f64, n: usize, axis: &str) -> Result<usize> {
        let f = v / self.resolution + n as f64 / 2.0;
        let i = f.round();
        if (f - i).abs() > ALIGN_TOL * n as f64 {
            return Err(Error::InvalidRegion(format!(
                "{axis} edge {v} is not on a cell boundary"
            )));
        }
        if i < 0.0 || i > n as f64 {
            return Err(Error::InvalidRegion(format!(
                "{axis} edge {v} lies outside the grid"
            )));
        }
        Ok(i as usize)
    }

    /// Cell ranges `(rows, cols)` covered by a parent-frame rectangle.
    pub fn cell_ranges(&self, region: &Rect) -> Result<(Range<usize>, Range<usize>)> {
        if self.center.yaw != 0.0 {
            return Err(Error::InvalidRegion("grid is rotated in its parent frame".into()));
        }
        let (ox, oy) = (self.center.x, self.center.y);
        let c0 = self.cell_edge(region.min_x - ox, self.cols, "min_x")?;
        let c1 = self.cell_edge(region.max_x - ox, self.cols, "max_x")?;
        let r0 = self.cell_edge(region.min_y - oy, self.rows, "min_y")?;
        let r1 = self.cell_edge(region.max_y - oy, self.rows, "max_y")?;
        if c1 <= c0 || r1 <= r0 {
            return Err(Error::InvalidRegion("empty region".into()));
        }
        Ok((r0..r1, c0..c1))
    }

    /// Spec of the sub-grid covering the given cell ranges.
    pub fn sub_spec(&self, rows: &Range<usize>, cols: &Range<usize>) -> Result<GridSpec> {
        let res = self.resolution;
        let cx = ((cols.start + cols.end) as f64 / 2.0 - self.cols as f64 / 2.0) * res;
        let cy = ((rows.start + rows.end) as f64 / 2.0 - self.rows as f64 / 2.0) * res;
        let center = self.center.compose(&Pose2::new(cx, cy, 0.0));
        GridSpec::from_cells(
            res,
            cols.len(),
            rows.len(),
            self.height_slices,
            self.height_range,
            center,
        )
    }
}

/// Sub-grid covering a cell-aligned parent-frame rectangle.
impl GridSpec {
    /// Corners of `inner`'s footprint in this grid's local frame.
    fn local_corners(&self, inner: &GridSpec) -> [Point2; 4] {
        let local = self.center.inverse().compose(&inner.center);
        let (hx, hy) = (inner.extent_x / 2.0, inner.extent_y / 2.0);
        [[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]].map(|c| local.apply(c))
    }

    /// Whether `inner`'s footprint lies within this grid's footprint.
    pub fn covers(&self, inner: &GridSpec) -> bool {
        let tol = 1e-9;
        self.local_corners(inner).iter().all(|c| {
            c[0].abs() <= self.extent_x / 2.0 + tol && c[1].abs() <= self.extent_y / 2.0 + tol
        })
    }

    /// Cell ranges of this (unrotated) grid covering `inner`'s footprint
    /// widened by `margin` cells, clipped to the grid.
    pub fn covering_cells(&self, inner: &GridSpec, margin: usize) -> Result<(Range<usize>, Range<usize>)> {
        if self.center.yaw != 0.0 {
            return Err(Error::InvalidRegion("grid is rotated in its parent frame".into()));
        }
        let corners = self.local_corners(inner);
        let lo = |i: usize| corners.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
        let hi = |i: usize| corners.iter().map(|c| c[i]).fold(f64::NEG_INFINITY, f64::max);
        let m = margin as isize;
        let edge = |v: f64, n: usize, up: bool| {
            let f = v / self.resolution + n as f64 / 2.0;
            let i = if up { f.ceil() as isize + m } else { f.floor() as isize - m };
            i.clamp(0, n as isize) as usize
        };
        let cols = edge(lo(0), self.cols, false)..edge(hi(0), self.cols, true);
        let rows = edge(lo(1), self.rows, false)..edge(hi(1), self.rows, true);
        if cols.is_empty() || rows.is_empty() {
            return Err(Error::InvalidRegion("regions do not overlap".into()));
        }
        Ok((rows, cols))
    }
}

/// Sub-grid of `grid` covering `inner` plus `margin` cells.
pub fn crop_covering<T: Real>(grid: &Grid<T>, inner: &GridSpec, margin: usize) -> Result<Grid<T>> {
    let (rows, cols) = grid.spec.covering_cells(inner, margin)?;
    let spec = grid.spec.sub_spec(&rows, &cols)?;
    let raster = grid
        .raster
        .crop_cells(rows.start, cols.start, rows.len(), cols.len());
    Ok(Grid { spec, raster })
}

pub fn crop<T: Real>(grid: &Grid<T>, region: &Rect) -> Result<Grid<T>> {
    let (rows, cols) = grid.spec.cell_ranges(region)?;
    let spec = grid.spec.sub_spec(&rows, &cols)?;
    let raster = grid
        .raster
        .crop_cells(rows.start, cols.start, rows.len(), cols.len());
    Ok(Grid { spec, raster })
}

/// Bilinear upsampling by an integer factor with edge clamping.
pub fn upsample_bilinear<T: Real>(grid: &Grid<T>, factor: usize) -> Result<Grid<T>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    let s = &grid.spec;
    let spec = GridSpec::from_cells(
        s.resolution() / factor as f64,
        s.cols() * factor,
        s.rows() * factor,
        s.height_slices(),
        s.height_range(),
        s.center(),
    )?;
    let f = factor as f64;
    let raster = sample_with(&grid.raster, spec.rows(), spec.cols(), Boundary::Clamp, |r, c| {
        ((c as f64 + 0.5) / f - 0.5, (r as f64 + 0.5) / f - 0.5)
    });
    Ok(Grid { spec, raster })
}

/// Operator sampling `src` (placed by its spec) at every cell center of
/// `dst`. Both specs must share a parent frame.
pub fn resample_op(src: &GridSpec, dst: &GridSpec, boundary: Boundary) -> BilinearOp {
    BilinearOp::build(src.rows(), src.cols(), dst.rows(), dst.cols(), boundary, resample_source(src, dst))
}

fn resample_source<'a>(src: &'a GridSpec, dst: &'a GridSpec) -> impl Fn(usize, usize) -> (f64, f64) + 'a {
    let to_src = src.center().inverse().compose(&dst.center());
    move |r, c| src.local_to_cell(to_src.apply(dst.cell_center(r, c)))
}

/// Bilinearly resamples `grid` onto the cells of `target`.
pub fn resample<T: Real, U: Real>(grid: &Grid<T>, target: &GridSpec, boundary: Boundary) -> Grid<U> {
    Grid {
        spec: target.clone(),
        raster: sample_with(&grid.raster, target.rows(), target.cols(), boundary, resample_source(&grid.spec, target)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fine_small(cols: usize, rows: usize) -> GridSpec {
        GridSpec::from_cells(0.05, cols, rows, 0, DEFAULT_HEIGHT_RANGE, Pose2::IDENTITY).unwrap()
    }

    fn random_grid(spec: &GridSpec, seed: u64) -> Grid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Grid::zeros(spec.clone(), 1);
        for v in g.raster.data_mut() {
            *v = rng.random::<f64>();
        }
        g
    }

    #[test]
    fn full_size_grid_dimensions() {
        let c = GridSpec::coarse();
        assert_eq!((c.cols(), c.rows(), c.channels()), (720, 400, 17));
        let f = GridSpec::fine();
        assert_eq!((f.cols(), f.rows(), f.channels()), (961, 481, 1));
    }

    #[test]
    fn spec_rejects_misaligned_extent() {
        assert!(GridSpec::new(0.05, 1.02, 1.0, 0, DEFAULT_HEIGHT_RANGE, Pose2::IDENTITY).is_err());
        assert!(GridSpec::new(0.0, 1.0, 1.0, 0, DEFAULT_HEIGHT_RANGE, Pose2::IDENTITY).is_err());
        assert!(GridSpec::new(0.05, 1.0, 1.0, 0, (1.0, 0.0), Pose2::IDENTITY).is_err());
    }

    #[test]
    fn voxelize_single_point_at_center() {
        let spec = GridSpec::from_cells(0.2, 5, 5, 4, (0.0, 0.8), Pose2::IDENTITY).unwrap();
        let pts = [LidarPoint {
            x: 0.0,
            y: 0.0,
            z: 0.3,
            intensity: 0.75,
        }];
        let g = voxelize(&pts, &spec).unwrap();
        for ch in 0..4 {
            for r in 0..5 {
                for c in 0..5 {
                    let expect = if ch == 1 && r == 2 && c == 2 { 1.0 } else { 0.0 };
                    assert_eq!(g.raster.get(ch, r, c), expect);
                }
            }
        }
        assert_eq!(g.raster.get(4, 2, 2), 0.75);
    }

    #[test]
    fn voxelize_out_of_bounds_and_non_finite() {
        let spec = GridSpec::from_cells(0.2, 5, 5, 4, (0.0, 0.8), Pose2::IDENTITY).unwrap();
        let far = LidarPoint {
            x: 10.0,
            y: 0.0,
            z: 0.1,
            intensity: 0.5,
        };
        let g = voxelize(&[far], &spec).unwrap();
        assert!(g.raster.data().iter().all(|&v| v == 0.0));
        let bad = LidarPoint { x: f32::NAN, ..far };
        assert!(voxelize(&[bad], &spec).is_err());
    }

    #[test]
    fn voxelize_matches_scalar_binning_oracle() {
        let spec = GridSpec::from_cells(0.25, 12, 8, 3, (-0.5, 1.0), Pose2::new(1.0, -2.0, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<LidarPoint> = (0..1000)
            .map(|_| LidarPoint {
                x: (1.0 + rng.random_range(-1.49..1.49)) as f32,
                y: (-2.0 + rng.random_range(-0.99..0.99)) as f32,
                z: rng.random_range(-0.49..0.99) as f32,
                intensity: rng.random::<f32>(),
            })
            .collect();
        let g = voxelize(&pts, &spec).unwrap();

        // Independent oracle: scan every cell and count points by bounds.
        let mut total = 0.0;
        for r in 0..8 {
            for c in 0..12 {
                let x_lo = 1.0 - 1.5 + c as f64 * 0.25;
                let y_lo = -2.0 - 1.0 + r as f64 * 0.25;
                let inside: Vec<&LidarPoint> = pts
                    .iter()
                    .filter(|p| {
                        let (x, y) = (p.x as f64, p.y as f64);
                        x >= x_lo && x < x_lo + 0.25 && y >= y_lo && y < y_lo + 0.25
                    })
                    .collect();
                for s in 0..3 {
                    let z_lo = -0.5 + s as f64 * 0.5;
                    let n = inside
                        .iter()
                        .filter(|p| (p.z as f64) >= z_lo && (p.z as f64) < z_lo + 0.5)
                        .count();
                    assert_eq!(g.raster.get(s, r, c), n as f32, "cell {r},{c} slice {s}");
                    total += n as f64;
                }
                let mean = if inside.is_empty() {
                    0.0
                } else {
                    inside.iter().map(|p| p.intensity as f64).sum::<f64>() / inside.len() as f64
                };
                assert!((g.raster.get(3, r, c) as f64 - mean).abs() < 1e-6);
            }
        }
        assert_eq!(total, 1000.0);
    }

    #[test]
    fn warp_zero_is_bit_identical() {
        let g = random_grid(&fine_small(17, 11), 1);
        assert_eq!(warp(&g, &PoseOffset::ZERO), g);
    }

    #[test]
    fn warp_one_cell_shift_is_exact() {
        let g = random_grid(&fine_small(17, 11), 2);
        let w = warp(&g, &PoseOffset::new(0.05, 0.0, 0.0));
        for r in 0..11 {
            assert_eq!(w.raster.get(0, r, 0), 0.0);
            for c in 1..17 {
                assert_eq!(w.raster.get(0, r, c), g.raster.get(0, r, c - 1));
            }
        }
        let w = warp(&g, &PoseOffset::new(-0.15, 0.1, 0.0));
        for r in 0..11 {
            for c in 0..17 {
                let (sr, sc) = (r as isize - 2, c as isize + 3);
                let expect = if sr >= 0 && sc < 17 {
                    g.raster.get(0, sr as usize, sc as usize)
                } else {
                    0.0
                };
                assert_eq!(w.raster.get(0, r, c), expect);
            }
        }
    }

    #[test]
    fn warp_rotation_round_trip_interior() {
        // Smooth content so bilinear round trips are well conditioned.
        let spec = fine_small(81, 81);
        let mut g = Grid::<f64>::zeros(spec.clone(), 1);
        for r in 0..81 {
            for c in 0..81 {
                let [x, y] = spec.cell_center(r, c);
                g.raster.set(0, r, c, 0.5 + 0.3 * (x * 2.1).sin() * (y * 1.7).cos());
            }
        }
        let theta = 1.5f64.to_radians();
        let back = warp(&warp(&g, &PoseOffset::new(0.0, 0.0, theta)), &PoseOffset::new(0.0, 0.0, -theta));
        let mut worst = 0.0f64;
        for r in 5..76 {
            for c in 5..76 {
                worst = worst.max((back.raster.get(0, r, c) - g.raster.get(0, r, c)).abs());
            }
        }
        assert!(worst <= 1e-3, "round trip error {worst}");
    }

    #[test]
    fn crop_examples() {
        let spec = GridSpec::from_cells(0.5, 8, 4, 0, DEFAULT_HEIGHT_RANGE, Pose2::new(2.0, 1.0, 0.0)).unwrap();
        let g = random_grid(&spec, 3);
        let full = crop(&g, &spec.footprint()).unwrap();
        assert_eq!(full.raster, g.raster);
        assert!((full.spec.center().x - 2.0).abs() < 1e-12);

        let quarter = crop(&g, &Rect::centered(2.0, 1.0, 1.0, 1.0)).unwrap();
        assert_eq!((quarter.spec.cols(), quarter.spec.rows()), (2, 2));
        assert_eq!(quarter.raster.get(0, 0, 0), g.raster.get(0, 1, 3));

        let a = Rect {
            min_x: 0.0,
            min_y: 0.0,
            max_x: 3.0,
            max_y: 2.0,
        };
        let b = Rect {
            min_x: 1.0,
            min_y: 0.5,
            max_x: 2.5,
            max_y: 1.5,
        };
        let ab = crop(&crop(&g, &a).unwrap(), &b).unwrap();
        let direct = crop(&g, &b).unwrap();
        assert_eq!(ab.raster, direct.raster);
        assert!((ab.spec.center().x - direct.spec.center().x).abs() < 1e-12);

        assert!(crop(&g, &Rect::centered(2.1, 1.0, 1.0, 0.5)).is_err());
        assert!(crop(&g, &Rect::centered(2.0, 1.0, 10.0, 0.5)).is_err());
    }

    #[test]
    fn upsample_examples() {
        let g = random_grid(&fine_small(6, 5), 4);
        assert_eq!(upsample_bilinear(&g, 1).unwrap().raster, g.raster);
        assert!(upsample_bilinear(&g, 0).is_err());

        let mut k = Grid::<f64>::zeros(fine_small(6, 5), 1);
        k.raster.data_mut().iter_mut().for_each(|v| *v = 0.625);
        let up = upsample_bilinear(&k, 4).unwrap();
        assert_eq!((up.spec.cols(), up.spec.rows()), (24, 20));
        assert!((up.spec.resolution() - 0.0125).abs() < 1e-15);
        assert!(up.raster.data().iter().all(|&v| (v - 0.625).abs() < 1e-15));
    }

    #[test]
    fn upsample_ramp_matches_closed_form() {
        let spec = fine_small(7, 4);
        let mut g = Grid::<f64>::zeros(spec.clone(), 1);
        for r in 0..4 {
            for c in 0..7 {
                let [x, y] = spec.cell_center(r, c);
                g.raster.set(0, r, c, 3.0 * x - 2.0 * y + 0.5);
            }
        }
        let up = upsample_bilinear(&g, 2).unwrap();
        // Analytic value at each output center, clamped to the range spanned
        // by the input cell centers.
        let (xmax, ymax) = (3.0 * 0.05, 1.5 * 0.05);
        for r in 0..8 {
            for c in 0..14 {
                let [x, y] = up.spec.cell_center(r, c);
                let expect = 3.0 * x.clamp(-xmax, xmax) - 2.0 * y.clamp(-ymax, ymax) + 0.5;
                assert!((up.raster.get(0, r, c) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn crop_then_upsample_constant() {
        let mut g = Grid::<f32>::zeros(fine_small(10, 10), 1);
        g.raster.data_mut().iter_mut().for_each(|v| *v = 0.25);
        let c = crop(&g, &Rect::centered(0.0, 0.0, 0.2, 0.3)).unwrap();
        let up = upsample_bilinear(&c, 3).unwrap();
        assert!(up.raster.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn bilinear_transpose_is_adjoint() {
        let spec = fine_small(9, 7);
        let op = warp_op(7, 9, 0.05, &PoseOffset::new(0.013, -0.07, 0.3));
        let a = random_grid(&spec, 5);
        let b = random_grid(&spec, 6);
        let mut wa = vec![0.0; 63];
        op.apply_plane(a.raster.plane(0), &mut wa);
        let lhs: f64 = wa.iter().zip(b.raster.plane(0)).map(|(x, y)| x * y).sum();
        let mut tb = vec![0.0; 63];
        op.apply_transpose_plane(b.raster.plane(0), &mut tb);
        let rhs: f64 = tb.iter().zip(a.raster.plane(0)).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn warp_is_linear(
            s1 in 0u64..1000, s2 in 0u64..1000,
            a in -2.0..2.0f64, b in -2.0..2.0f64,
            dx in -0.3..0.3f64, dy in -0.3..0.3f64, dyaw in -0.05..0.05f64,
        ) {
            let spec = fine_small(13, 9);
            let g1 = random_grid(&spec, s1);
            let g2 = random_grid(&spec, s2);
            let mut mix = g1.clone();
            for (m, (x, y)) in mix.raster.data_mut().iter_mut().zip(g1.raster.data().iter().zip(g2.raster.data())) {
                *m = a * x + b * y;
            }
            let off = PoseOffset::new(dx, dy, dyaw);
            let lhs = warp(&mix, &off);
            let w1 = warp(&g1, &off);
            let w2 = warp(&g2, &off);
            for i in 0..lhs.raster.data().len() {
                let rhs = a * w1.raster.data()[i] + b * w2.raster.data()[i];
                prop_assert!((lhs.raster.data()[i] - rhs).abs() < 1e-9);
            }
        }

        #[test]
        fn voxelize_conserves_in_bounds_count(seed in 0u64..500) {
            let spec = GridSpec::from_cells(0.1, 20, 10, 2, (0.0, 1.0), Pose2::IDENTITY).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<LidarPoint> = (0..200).map(|_| LidarPoint {
                x: rng.random_range(-1.5..1.5f32),
                y: rng.random_range(-0.8..0.8f32),
                z: rng.random_range(-0.2..1.2f32),
                intensity: rng.random::<f32>(),
            }).collect();
            let inside = pts.iter().filter(|p| p.x.abs() < 1.0 && p.y.abs() < 0.5 && p.z >= 0.0 && p.z < 1.0).count();
            let g = voxelize(&pts, &spec).unwrap();
            let mass: f32 = g.raster.data()[..2 * 200].iter().sum();
            prop_assert_eq!(mass as usize, inside);
        }

        #[test]
        fn on_the_fly_warp_matches_operator(
            seed in 0u64..500,
            dx in -0.4..0.4f64, dy in -0.4..0.4f64, dyaw in -0.1..0.1f64,
        ) {
            let spec = fine_small(11, 8);
            let g = random_grid(&spec, seed);
            let off = PoseOffset::new(dx, dy, dyaw);
            let fast = warp(&g, &off);
            let op = warp_op(spec.rows(), spec.cols(), spec.resolution(), &off);
            let slow: Raster<f64> = op.apply(&g.raster, spec.rows(), spec.cols());
            for (a, b) in fast.raster.data().iter().zip(slow.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
