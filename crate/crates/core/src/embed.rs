//! Convolutional embedding stacks, the identity baseline, multi-resolution
//! fusion and the LPW1 weight bundle.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{resample_op, BevGrid, BilinearOp, Boundary, FeatureMap, Grid, Raster, Real};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub input_channels: usize,
    /// Output channels of each layer; its length is the layer count.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub pooling_stages: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Conv { layer: usize, relu: bool },
    Pool,
    SaveSkip(usize),
    Up(usize),
}

impl NetConfig {
    /// Five layers, eight channels, kernel 3, three pooling stages.
    pub fn tiny(input_channels: usize) -> Self {
        Self {
            input_channels,
            channels: vec![8, 8, 8, 8, 1],
            kernel_size: 3,
            pooling_stages: 3,
        }
    }

    /// Eleven layers of `width` channels followed by a single-channel output.
    pub fn eleven(input_channels: usize, width: usize) -> Self {
        let mut channels = vec![width; 10];
        channels.push(1);
        Self {
            input_channels,
            channels,
            kernel_size: 3,
            pooling_stages: 3,
        }
    }

    pub fn big(input_channels: usize) -> Self {
        Self::eleven(input_channels, 16)
    }

    pub fn layers(&self) -> usize {
        self.channels.len()
    }

    fn ops(&self) -> Vec<Op> {
        let p = self.pooling_stages;
        let slots = 2 * p + 1;
        let hidden = self.layers() - 1;
        let per_slot = |s: usize| hidden / slots + usize::from(s < hidden % slots);
        let mut ops = Vec::new();
        let mut layer = 0;
        let mut convs = |ops: &mut Vec<Op>, n: usize| {
            for _ in 0..n {
                ops.push(Op::Conv { layer, relu: true });
                layer += 1;
            }
        };
        for s in 0..=p {
            if s > 0 {
                ops.push(Op::Pool);
            }
            convs(&mut ops, per_slot(s));
            if s < p {
                ops.push(Op::SaveSkip(s));
            }
        }
        for (i, k) in (0..p).rev().enumerate() {
            ops.push(Op::Up(k));
            convs(&mut ops, per_slot(p + 1 + i));
        }
        ops.push(Op::Conv {
            layer: hidden,
            relu: false,
        });
        ops
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidNetConfig(m));
        if self.channels.is_empty() {
            return bad("at least one layer required".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel size {} is not odd", self.kernel_size));
        }
        if self.input_channels == 0 || self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        let mut current = self.input_channels;
        let mut skips = vec![0; self.pooling_stages];
        for op in self.ops() {
            match op {
                Op::Conv { layer, .. } => current = self.channels[layer],
                Op::Pool => {}
                Op::SaveSkip(k) => skips[k] = current,
                Op::Up(k) => {
                    if skips[k] != current {
                        return bad(format!(
                            "skip at stage {k} carries {} channels, decoder has {current}",
                            skips[k]
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    /// `[out][in][ky][kx]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn zeros(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            weight: vec![0.0; out_channels * in_channels * kernel_size * kernel_size],
            bias: vec![0.0; out_channels],
        }
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Gradient of a scalar with respect to every layer of a stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StackGrads {
    pub layers: Vec<ConvLayer>,
}

impl StackGrads {
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    config: NetConfig,
    pub layers: Vec<ConvLayer>,
    pub frozen: bool,
}

/// Activations retained by [`ConvStack::forward_tape`]: the input of every
/// op followed by the stack output.
#[derive(Debug, Clone)]
pub struct StackTape {
    values: Vec<Raster<f64>>,
}

impl StackTape {
    pub fn output(&self) -> &Raster<f64> {
        self.values.last().expect("tape holds at least the input")
    }
}

impl ConvStack {
    /// He-normal weights, 0.01 hidden biases, zero output bias.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_size;
        let mut layers = Vec::with_capacity(config.layers());
        let mut in_ch = config.input_channels;
        for (i, &out_ch) in config.channels.iter().enumerate() {
            let mut layer = ConvLayer::zeros(in_ch, out_ch, k);
            let std = (2.0 / (in_ch * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut layer.weight {
                *w = normal.sample(&mut rng);
            }
            let b = if i + 1 == config.layers() { 0.0 } else { 0.01 };
            layer.bias.iter_mut().for_each(|v| *v = b);
            layers.push(layer);
            in_ch = out_ch;
        }
        Ok(Self {
            config,
            layers,
            frozen: false,
        })
    }

    /// All-zero weights; useful for constructing stacks by hand.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut in_ch = config.input_channels;
        let layers = config
            .channels
            .iter()
            .map(|&out| {
                let l = ConvLayer::zeros(in_ch, out, config.kernel_size);
                in_ch = out;
                l
            })
            .collect();
        Ok(Self {
            config,
            layers,
            frozen: false,
        })
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn output_channels(&self) -> usize {
        *self.config.channels.last().expect("validated")
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(ConvLayer::num_params).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Overwrites parameters from `src`; returns how many were consumed.
    pub fn load_flat(&mut self, src: &[f64]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.copy_from_slice(&src[at..at + n]);
            at += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&src[at..at + n]);
            at += n;
        }
        at
    }

    /// SHA-256 over the exact bit patterns of every parameter.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn zero_grads(&self) -> StackGrads {
        StackGrads {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer::zeros(l.in_channels, l.out_channels, l.kernel_size))
                .collect(),
        }
    }

    fn check_input(&self, channels: usize) -> Result<()> {
        if channels != self.config.input_channels {
            return Err(Error::ChannelMismatch {
                expected: self.config.input_channels,
                actual: channels,
            });
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, grid: &Grid<T>) -> Result<FeatureMap> {
        self.check_input(grid.channels())?;
        Ok(Grid {
            spec: grid.spec.clone(),
            raster: self.forward_raster(&grid.raster.to_f64())?,
        })
    }

    pub fn forward_raster(&self, input: &Raster<f64>) -> Result<Raster<f64>> {
        self.check_input(input.channels())?;
        let mut skips: Vec<Option<Raster<f64>>> = vec![None; self.config.pooling_stages];
        let mut x = input.clone();
        for op in self.config.ops() {
            x = match op {
                Op::Conv { layer, relu } => conv2d(&x, &self.layers[layer], relu),
                Op::Pool => avg_pool2(&x),
                Op::SaveSkip(k) => {
                    skips[k] = Some(x.clone());
                    x
                }
                Op::Up(k) => upsample_add(&x, skips[k].as_ref().expect("saved")),
            };
        }
        Ok(x)
    }

    pub fn forward_tape(&self, input: &Raster<f64>) -> Result<StackTape> {
        self.check_input(input.channels())?;
        let ops = self.config.ops();
        let mut values = Vec::with_capacity(ops.len() + 1);
        values.push(input.clone());
        let mut skips: Vec<usize> = vec![0; self.config.pooling_stages];
        for (i, op) in ops.iter().enumerate() {
            let x = &values[i];
            let next = match *op {
                Op::Conv { layer, relu } => conv2d(x, &self.layers[layer], relu),
                Op::Pool => avg_pool2(x),
                Op::SaveSkip(k) => {
                    skips[k] = i;
                    x.clone()
                }
                Op::Up(k) => upsample_add(x, &values[skips[k]]),
            };
            values.push(next);
        }
        Ok(StackTape { values })
    }

    /// Reverse pass from `d_out`; returns parameter gradients and the
    /// gradient with respect to the input.
    pub fn backward(&self, tape: &StackTape, d_out: &Raster<f64>) -> (StackGrads, Raster<f64>) {
        let ops = self.config.ops();
        let mut grads = self.zero_grads();
        let mut skip_grads: Vec<Option<Raster<f64>>> = vec![None; self.config.pooling_stages];
        let mut g = d_out.clone();
        for (i, op) in ops.iter().enumerate().rev() {
            let input = &tape.values[i];
            g = match *op {
                Op::Conv { layer, relu } => {
                    if relu {
                        let out = &tape.values[i + 1];
                        for (gv, &o) in g.data_mut().iter_mut().zip(out.data()) {
                            if o <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                    }
                    conv2d_backward(input, &self.layers[layer], &g, &mut grads.layers[layer])
                }
                Op::Pool => avg_pool2_backward(input.rows(), input.cols(), &g),
                Op::SaveSkip(k) => {
                    if let Some(s) = skip_grads[k].take() {
                        for (a, b) in g.data_mut().iter_mut().zip(s.data()) {
                            *a += b;
                        }
                    }
                    g
                }
                Op::Up(k) => {
                    skip_grads[k] = Some(g.clone());
                    upsample_backward(input.rows(), input.cols(), &g)
                }
            };
        }
        (grads, g)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Valid output span along one axis for kernel tap offset `d`.
#[inline]
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(lo as isize) as usize;
    (lo, hi)
}

/// Same-padded cross-correlation plus bias, optionally rectified.
pub fn conv2d(input: &Raster<f64>, layer: &ConvLayer, relu: bool) -> Raster<f64> {
    let (rows, cols) = (input.rows(), input.cols());
    let k = layer.kernel_size;
    let r = (k / 2) as isize;
    let mut out = Raster::zeros(layer.out_channels, rows, cols);
    for o in 0..layer.out_channels {
        let plane = out.plane_mut(o);
        plane.iter_mut().for_each(|v| *v = layer.bias[o]);
        for i in 0..layer.in_channels {
            let src = input.plane(i);
            for ky in 0..k {
                let dy = ky as isize - r;
                let (y0, y1) = span(rows, dy);
                for kx in 0..k {
                    let w = layer.weight[((o * layer.in_channels + i) * k + ky) * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - r;
                    let (x0, x1) = span(cols, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (sy * cols) as isize + x0 as isize + dx;
                        let src_row = &src[s0 as usize..s0 as usize + (x1 - x0)];
                        axpy(w, src_row, &mut plane[y * cols + x0..y * cols + x1]);
                    }
                }
            }
        }
        if relu {
            plane.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    out
}

fn conv2d_backward(
    input: &Raster<f64>,
    layer: &ConvLayer,
    d_out: &Raster<f64>,
    grad: &mut ConvLayer,
) -> Raster<f64> {
    let (rows, cols) = (input.rows(), input.cols());
    let k = layer.kernel_size;
    let r = (k / 2) as isize;
    let mut d_in = Raster::zeros(layer.in_channels, rows, cols);
    for o in 0..layer.out_channels {
        let g = d_out.plane(o);
        grad.bias[o] += g.iter().sum::<f64>();
        for i in 0..layer.in_channels {
            let src = input.plane(i);
            for ky in 0..k {
                let dy = ky as isize - r;
                let (y0, y1) = span(rows, dy);
                for kx in 0..k {
                    let widx = ((o * layer.in_channels + i) * k + ky) * k + kx;
                    let w = layer.weight[widx];
                    let dx = kx as isize - r;
                    let (x0, x1) = span(cols, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let s0 = (((y as isize + dy) as usize * cols) as isize + x0 as isize + dx) as usize;
                        let g_row = &g[y * cols + x0..y * cols + x1];
                        acc += dot(g_row, &src[s0..s0 + (x1 - x0)]);
                        if w != 0.0 {
                            axpy(w, g_row, &mut d_in.plane_mut(i)[s0..s0 + (x1 - x0)]);
                        }
                    }
                    grad.weight[widx] += acc;
                }
            }
        }
    }
    d_in
}

/// 2x2 average pooling; odd edges average the cells that exist.
pub fn avg_pool2(input: &Raster<f64>) -> Raster<f64> {
    let (rows, cols) = (input.rows(), input.cols());
    let (orows, ocols) = (rows.div_ceil(2), cols.div_ceil(2));
    let mut out = Raster::zeros(input.channels(), orows, ocols);
    for ch in 0..input.channels() {
        let src = input.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..orows {
            let ys = 2 * y..(2 * y + 2).min(rows);
            for x in 0..ocols {
                let xs = 2 * x..(2 * x + 2).min(cols);
                let n = (ys.len() * xs.len()) as f64;
                let mut s = 0.0;
                for sy in ys.clone() {
                    for sx in xs.clone() {
                        s += src[sy * cols + sx];
                    }
                }
                dst[y * ocols + x] = s / n;
            }
        }
    }
    out
}

fn avg_pool2_backward(rows: usize, cols: usize, d_out: &Raster<f64>) -> Raster<f64> {
    let ocols = d_out.cols();
    let mut d_in = Raster::zeros(d_out.channels(), rows, cols);
    for ch in 0..d_out.channels() {
        let g = d_out.plane(ch);
        let dst = d_in.plane_mut(ch);
        for y in 0..rows {
            let ny = if 2 * (y / 2) + 1 < rows { 2.0 } else { 1.0 };
            for x in 0..cols {
                let nx = if 2 * (x / 2) + 1 < cols { 2.0 } else { 1.0 };
                dst[y * cols + x] = g[(y / 2) * ocols + x / 2] / (nx * ny);
            }
        }
    }
    d_in
}

/// Nearest-neighbour x2 upsampling cropped to `skip`'s size, plus `skip`.
fn upsample_add(x: &Raster<f64>, skip: &Raster<f64>) -> Raster<f64> {
    let (rows, cols) = (skip.rows(), skip.cols());
    let mut out = skip.clone();
    for ch in 0..x.channels() {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..rows {
            for xx in 0..cols {
                dst[y * cols + xx] += src[(y / 2) * x.cols() + xx / 2];
            }
        }
    }
    out
}

fn upsample_backward(rows: usize, cols: usize, d_out: &Raster<f64>) -> Raster<f64> {
    let mut d_in = Raster::zeros(d_out.channels(), rows, cols);
    let (orows, ocols) = (d_out.rows(), d_out.cols());
    for ch in 0..d_out.channels() {
        let g = d_out.plane(ch);
        let dst = d_in.plane_mut(ch);
        for y in 0..orows {
            for x in 0..ocols {
                dst[(y / 2) * cols + x / 2] += g[y * ocols + x];
            }
        }
    }
    d_in
}

/// The learning-free embedding: the intensity channel as is.
pub fn identity_embed(grid: &BevGrid) -> FeatureMap {
    let ch = grid.intensity_channel();
    Grid {
        spec: grid.spec.clone(),
        raster: grid.raster.extract_channel(ch).to_f64(),
    }
}

/// 1x1 projection of coarse features to one channel, and the weight with
/// which the upsampled result is added to the fine embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub weight: Vec<f64>,
    pub bias: f64,
    pub mix: f64,
}

impl FusionParams {
    pub fn new(coarse_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / coarse_channels as f64).sqrt()).expect("positive std");
        Self {
            weight: (0..coarse_channels).map(|_| normal.sample(&mut rng)).collect(),
            bias: 0.0,
            mix: 0.1,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + 2
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.push(self.bias);
        out.push(self.mix);
    }

    pub fn load_flat(&mut self, src: &[f64]) -> usize {
        let n = self.weight.len();
        self.weight.copy_from_slice(&src[..n]);
        self.bias = src[n];
        self.mix = src[n + 1];
        n + 2
    }

    pub fn zero_grads(&self) -> FusionParams {
        FusionParams {
            weight: vec![0.0; self.weight.len()],
            bias: 0.0,
            mix: 0.0,
        }
    }
}

/// State kept by [`fuse_multires_tape`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct FusionTape {
    cropped: Raster<f64>,
    op: BilinearOp,
    up: Vec<f64>,
}

/// Cell ranges of `coarse` covering `fine`'s footprint plus a one-cell margin.
fn coarse_cover(fine: &FeatureMap, coarse: &FeatureMap) -> Result<(Range<usize>, Range<usize>)> {
    if coarse.spec.center().yaw != 0.0 {
        return Err(Error::ExtentMismatch("coarse grid must be axis aligned".into()));
    }
    if !coarse.spec.covers(&fine.spec) {
        return Err(Error::ExtentMismatch(
            "coarse features do not cover the fine extent".into(),
        ));
    }
    coarse.spec.covering_cells(&fine.spec, 1)
}

fn project(cropped: &Raster<f64>, fusion: &FusionParams) -> Result<Vec<f64>> {
    if cropped.channels() != fusion.weight.len() {
        return Err(Error::ChannelMismatch {
            expected: fusion.weight.len(),
            actual: cropped.channels(),
        });
    }
    let mut out = vec![fusion.bias; cropped.plane_len()];
    for (d, &w) in fusion.weight.iter().enumerate() {
        axpy(w, cropped.plane(d), &mut out);
    }
    Ok(out)
}

/// `fine + mix * upsample(conv1x1(crop(coarse)))`, keeping the fine
/// georeferencing. The upsampled term is added to every fine channel.
pub fn fuse_multires(
    fine: &FeatureMap,
    coarse: &FeatureMap,
    fusion: &FusionParams,
) -> Result<FeatureMap> {
    Ok(fuse_multires_tape(fine, coarse, fusion)?.0)
}

pub fn fuse_multires_tape(
    fine: &FeatureMap,
    coarse: &FeatureMap,
    fusion: &FusionParams,
) -> Result<(FeatureMap, FusionTape)> {
    let (rows, cols) = coarse_cover(fine, coarse)?;
    let sub = coarse.spec.sub_spec(&rows, &cols)?;
    let cropped_raster = coarse
        .raster
        .crop_cells(rows.start, cols.start, rows.len(), cols.len());
    let projected = project(&cropped_raster, fusion)?;
    let op = resample_op(&sub, &fine.spec, Boundary::Clamp);
    let mut up = vec![0.0; fine.spec.rows() * fine.spec.cols()];
    op.apply_plane(&projected, &mut up);
    let mut out = fine.clone();
    if fusion.mix != 0.0 {
        for ch in 0..out.channels() {
            axpy(fusion.mix, &up, out.raster.plane_mut(ch));
        }
    }
    Ok((
        out,
        FusionTape {
            cropped: cropped_raster,
            op,
            up,
        },
    ))
}

/// Reverse pass of the fusion for its own parameters. The gradient with
/// respect to the fine input is `d_out` itself.
pub fn fusion_backward(tape: &FusionTape, fusion: &FusionParams, d_out: &Raster<f64>) -> FusionParams {
    let mut g = fusion.zero_grads();
    let mut d_up = vec![0.0; tape.up.len()];
    for ch in 0..d_out.channels() {
        let plane = d_out.plane(ch);
        g.mix += dot(plane, &tape.up);
        axpy(1.0, plane, &mut d_up);
    }
    if fusion.mix == 0.0 {
        return g;
    }
    d_up.iter_mut().for_each(|v| *v *= fusion.mix);
    let mut d_proj = vec![0.0; tape.cropped.plane_len()];
    tape.op.apply_transpose_plane(&d_up, &mut d_proj);
    g.bias = d_proj.iter().sum();
    for (d, w) in g.weight.iter_mut().enumerate() {
        *w = dot(tape.cropped.plane(d), &d_proj);
    }
    g
}

/// A named set of stacks plus optional fusion parameters, stored as LPW1.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub stacks: Vec<(String, ConvStack)>,
    pub fusion: Option<FusionParams>,
}

const LPW1_MAGIC: &[u8; 4] = b"LPW1";

impl WeightBundle {
    pub fn stack(&self, tag: &str) -> Option<&ConvStack> {
        self.stacks.iter().find(|(t, _)| t == tag).map(|(_, s)| s)
    }

    /// Layout: magic, u32 stack count, then per stack a length-prefixed
    /// UTF-8 tag, the config header (u32 input channels, layers, kernel,
    /// pooling stages, u8 frozen, u32 channels per layer) and each layer's
    /// f32 weights then biases. A trailing u8 flags fusion parameters,
    /// followed when set by u32 width, f32 weights, f32 bias and f32 mix.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let u32le = |b: &mut Vec<u8>, v: usize| b.extend_from_slice(&(v as u32).to_le_bytes());
        let f32le = |b: &mut Vec<u8>, v: f64| b.extend_from_slice(&(v as f32).to_le_bytes());
        b.extend_from_slice(LPW1_MAGIC);
        u32le(&mut b, self.stacks.len());
        for (tag, stack) in &self.stacks {
            u32le(&mut b, tag.len());
            b.extend_from_slice(tag.as_bytes());
            let c = stack.config();
            u32le(&mut b, c.input_channels);
            u32le(&mut b, c.layers());
            u32le(&mut b, c.kernel_size);
            u32le(&mut b, c.pooling_stages);
            b.push(u8::from(stack.frozen));
            for &ch in &c.channels {
                u32le(&mut b, ch);
            }
            for l in &stack.layers {
                l.weight.iter().for_each(|&v| f32le(&mut b, v));
                l.bias.iter().for_each(|&v| f32le(&mut b, v));
            }
        }
        match &self.fusion {
            None => b.push(0),
            Some(f) => {
                b.push(1);
                u32le(&mut b, f.weight.len());
                f.weight.iter().for_each(|&v| f32le(&mut b, v));
                f32le(&mut b, f.bias);
                f32le(&mut b, f.mix);
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != LPW1_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let n = r.u32()? as usize;
        let mut stacks = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let tag = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tag is not UTF-8".into()))?;
            let input_channels = r.u32()? as usize;
            let layers = r.u32()? as usize;
            let kernel_size = r.u32()? as usize;
            let pooling_stages = r.u32()? as usize;
            let frozen = r.take(1)?[0] != 0;
            if layers > 4096 {
                return Err(Error::Checkpoint(format!("implausible layer count {layers}")));
            }
            let channels = (0..layers).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let config = NetConfig {
                input_channels,
                channels,
                kernel_size,
                pooling_stages,
            };
            let mut stack = ConvStack::zeros(config).map_err(|e| Error::Checkpoint(e.to_string()))?;
            stack.frozen = frozen;
            for l in &mut stack.layers {
                for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                    *v = r.f32()? as f64;
                }
            }
            stacks.push((tag, stack));
        }
        let fusion = match r.take(1)?[0] {
            0 => None,
            1 => {
                let d = r.u32()? as usize;
                if d > 1 << 16 {
                    return Err(Error::Checkpoint(format!("implausible fusion width {d}")));
                }
                let weight = (0..d).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
                let bias = r.f32()? as f64;
                let mix = r.f32()? as f64;
                Some(FusionParams { weight, bias, mix })
            }
            f => return Err(Error::Checkpoint(format!("bad fusion flag {f}"))),
        };
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { stacks, fusion })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
