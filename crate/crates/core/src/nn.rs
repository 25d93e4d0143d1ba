//! Small convolutional regression networks with explicit backprop.
//!
//! Every layer is a stride-1, same-padded 2-D convolution followed by an
//! elementwise activation. Tensors are channels-last (`[h, w, c]`) and kernels
//! are stored as `[kh, kw, in_c, out_c]`, so the innermost loops of both the
//! forward and backward passes walk contiguous output-channel slices.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::tensor::Tensor;

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
const SOFTPLUS_LINEAR_ABOVE: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Selu,
    Softplus,
    /// Identity.
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Softplus => {
                if x > SOFTPLUS_LINEAR_ABOVE {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::Linear => x,
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            }
            Activation::Softplus => {
                if x > SOFTPLUS_LINEAR_ABOVE {
                    1.0
                } else {
                    1.0 / (1.0 + (-x).exp())
                }
            }
            Activation::Linear => 1.0,
        }
    }

    /// Value and derivative together, sharing one exponential.
    #[inline]
    pub fn apply_with_slope(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Selu => {
                if x > 0.0 {
                    (SELU_LAMBDA * x, SELU_LAMBDA)
                } else {
                    let e = x.exp_m1();
                    (SELU_LAMBDA * SELU_ALPHA * e, SELU_LAMBDA * SELU_ALPHA * (e + 1.0))
                }
            }
            Activation::Softplus => {
                if x > SOFTPLUS_LINEAR_ABOVE {
                    (x, 1.0)
                } else {
                    let e = x.exp();
                    (e.ln_1p(), e / (1.0 + e))
                }
            }
            Activation::Linear => (x, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kernel_height: usize,
    pub kernel_width: usize,
    pub filters: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(kernel_height: usize, kernel_width: usize, filters: usize, activation: Activation) -> Self {
        Self {
            kernel_height,
            kernel_width,
            filters,
            activation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub input: InputShape,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, height: usize, width: usize, channels: usize) -> Result<Self> {
        let spec = Self {
            layers,
            input: InputShape {
                height,
                width,
                channels,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The three-layer estimator: 5x5/24 SeLU, 5x5/8 Softplus, 5x5/2 SeLU,
    /// on a two-channel (real/imaginary) grid.
    pub fn channel_estimator(height: usize, width: usize) -> Self {
        Self {
            layers: default_layers(),
            input: InputShape {
                height,
                width,
                channels: 2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        if self.input.height == 0 || self.input.width == 0 || self.input.channels == 0 {
            return Err(Error::InvalidConfig("network input dimensions must be positive".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel_height == 0 || l.kernel_width == 0 || l.filters == 0 {
                return Err(Error::InvalidConfig(format!(
                    "layer {i} has a zero kernel dimension or filter count"
                )));
            }
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.filters)
    }

    pub fn input_dims(&self) -> [usize; 3] {
        [self.input.height, self.input.width, self.input.channels]
    }

    pub fn output_dims(&self) -> [usize; 3] {
        [self.input.height, self.input.width, self.output_channels()]
    }

    /// `(in_channels, out_channels)` for every layer.
    fn channel_pairs(&self) -> impl Iterator<Item = (usize, &LayerSpec)> + '_ {
        let mut cin = self.input.channels;
        self.layers.iter().map(move |l| {
            let c = cin;
            cin = l.filters;
            (c, l)
        })
    }

    pub fn layout(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::with_capacity(self.layers.len() * 2);
        let mut offset = 0;
        for (idx, (cin, l)) in self.channel_pairs().enumerate() {
            let shape = vec![l.kernel_height, l.kernel_width, cin, l.filters];
            let size: usize = shape.iter().product();
            blocks.push(ParamBlock {
                layer: idx,
                role: ParamRole::Kernel,
                shape,
                offset,
            });
            offset += size;
            blocks.push(ParamBlock {
                layer: idx,
                role: ParamRole::Bias,
                shape: vec![l.filters],
                offset,
            });
            offset += l.filters;
        }
        blocks
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(ParamBlock::len).sum()
    }
}

pub fn default_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(5, 5, 24, Activation::Selu),
        LayerSpec::new(5, 5, 8, Activation::Softplus),
        LayerSpec::new(5, 5, 2, Activation::Selu),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Kernel,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub layer: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat model weights plus the layer layout that gives them structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: Vec<ParamBlock>,
}

impl ParamVector {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layout = spec.layout();
        let len = layout.iter().map(ParamBlock::len).sum();
        Self {
            data: vec![0.0; len],
            layout,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn block(&self, layer: usize, role: ParamRole) -> &[f64] {
        let b = self
            .layout
            .iter()
            .find(|b| b.layer == layer && b.role == role)
            .expect("layer index out of range");
        &self.data[b.range()]
    }

    pub fn block_mut(&mut self, layer: usize, role: ParamRole) -> &mut [f64] {
        let range = self
            .layout
            .iter()
            .find(|b| b.layer == layer && b.role == role)
            .expect("layer index out of range")
            .range();
        &mut self.data[range]
    }

    /// Flat view used by the aggregators.
    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// Rebuilds a parameter vector with `layout` from a flat array.
    pub fn unflatten(layout: &[ParamBlock], flat: Vec<f64>) -> Result<Self> {
        let expected: usize = layout.iter().map(ParamBlock::len).sum();
        if flat.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: flat.len(),
            });
        }
        Ok(Self {
            data: flat,
            layout: layout.to_vec(),
        })
    }

    pub fn with_data(&self, flat: Vec<f64>) -> Result<Self> {
        Self::unflatten(&self.layout, flat)
    }
}

/// Fan-in scaled uniform kernels, zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut params = ParamVector::zeros(spec);
    let layout = params.layout.clone();
    for block in layout.iter().filter(|b| b.role == ParamRole::Kernel) {
        let fan_in = (block.shape[0] * block.shape[1] * block.shape[2]) as f64;
        let bound = (1.0 / fan_in).sqrt();
        for w in &mut params.data[block.range()] {
            *w = rng.random_range(-bound..bound);
        }
    }
    params
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.check_same_shape(target)?;
    Ok(sum_squared_error(pred.data(), target.data()) / pred.len().max(1) as f64)
}

pub(crate) fn sum_squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Anything that can be fed to the network as an `(input, target)` pair.
pub trait TrainingPair {
    fn input(&self) -> &Tensor;
    fn target(&self) -> &Tensor;
}

impl TrainingPair for (Tensor, Tensor) {
    fn input(&self) -> &Tensor {
        &self.0
    }
    fn target(&self) -> &Tensor {
        &self.1
    }
}

impl<T: TrainingPair + ?Sized> TrainingPair for &T {
    fn input(&self) -> &Tensor {
        (**self).input()
    }
    fn target(&self) -> &Tensor {
        (**self).target()
    }
}

struct LayerGeom {
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    activation: Activation,
    kernel: std::ops::Range<usize>,
    bias: std::ops::Range<usize>,
}

impl LayerGeom {
    /// Flat kernel index of tap `(dy, dx)` from input channel `ci` to output
    /// channel `co`.
    #[inline]
    fn k(&self, dy: usize, dx: usize, ci: usize, co: usize) -> usize {
        self.kernel.start + ((dy * self.kw + dx) * self.cin + ci) * self.cout + co
    }

    /// Offsets of tap `(dy, dx)` relative to the output pixel.
    #[inline]
    fn offset(&self, dy: usize, dx: usize) -> (isize, isize) {
        (dy as isize - ((self.kh - 1) / 2) as isize, dx as isize - ((self.kw - 1) / 2) as isize)
    }
}

/// Scratch buffers reused across samples.
///
/// Feature maps are held planar, one `[w, h]` plane per channel with the
/// subcarrier axis contiguous, so every kernel tap becomes a shifted
/// multiply-add over whole columns.
struct Workspace {
    h: usize,
    w: usize,
    geoms: Vec<LayerGeom>,
    /// Post-activation planes; `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Vec<f64>>,
    /// Pre-activation planes per layer, replaced by the activation slopes
    /// once the layer's outputs are computed.
    pre: Vec<Vec<f64>>,
    /// Final output in channels-last order.
    out: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    fn new(spec: &NetworkSpec, params: &ParamVector) -> Result<Self> {
        let expected = spec.layout();
        if params.layout != expected {
            return Err(Error::LengthMismatch {
                expected: expected.iter().map(ParamBlock::len).sum(),
                got: params.len(),
            });
        }
        let (h, w) = (spec.input.height, spec.input.width);
        let pixels = h * w;
        let mut geoms = Vec::with_capacity(spec.layers.len());
        for (idx, (cin, l)) in spec.channel_pairs().enumerate() {
            geoms.push(LayerGeom {
                cin,
                cout: l.filters,
                kh: l.kernel_height,
                kw: l.kernel_width,
                activation: l.activation,
                kernel: expected[2 * idx].range(),
                bias: expected[2 * idx + 1].range(),
            });
        }
        let mut acts = vec![vec![0.0; pixels * spec.input.channels]];
        let mut pre = Vec::with_capacity(geoms.len());
        let mut widest = spec.input.channels;
        for g in &geoms {
            acts.push(vec![0.0; pixels * g.cout]);
            pre.push(vec![0.0; pixels * g.cout]);
            widest = widest.max(g.cout);
        }
        let out_channels = geoms.last().map_or(spec.input.channels, |g| g.cout);
        Ok(Self {
            h,
            w,
            geoms,
            acts,
            pre,
            out: vec![0.0; pixels * out_channels],
            delta: vec![0.0; pixels * widest],
            delta_prev: vec![0.0; pixels * widest],
        })
    }

    fn forward(&mut self, params: &[f64], input: &[f64]) {
        let (h, w) = (self.h, self.w);
        let plane = h * w;
        to_planar(input, h, w, &mut self.acts[0]);
        for (i, g) in self.geoms.iter().enumerate() {
            let (before, after) = self.acts.split_at_mut(i + 1);
            let src = &before[i];
            let z = &mut self.pre[i];
            for (co, zp) in z.chunks_exact_mut(plane).enumerate() {
                zp.fill(params[g.bias.start + co]);
                for (ci, ap) in src.chunks_exact(plane).enumerate() {
                    for dy in 0..g.kh {
                        for dx in 0..g.kw {
                            let (oy, ox) = g.offset(dy, dx);
                            shifted_axpy(zp, params[g.k(dy, dx, ci, co)], ap, oy, ox, h, w);
                        }
                    }
                }
            }
            for (a, zv) in after[0].iter_mut().zip(z.iter_mut()) {
                let (v, slope) = g.activation.apply_with_slope(*zv);
                *a = v;
                *zv = slope;
            }
        }
        let last = self.acts.last().expect("at least one layer");
        to_channels_last(last, h, w, &mut self.out);
    }

    fn output(&self) -> &[f64] {
        &self.out
    }

    /// Backpropagates `d_out` (gradient w.r.t. the channels-last network
    /// output) and accumulates parameter gradients into `grad`.
    fn backward(&mut self, params: &[f64], d_out: &[f64], grad: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let plane = h * w;
        let last = self.geoms.len() - 1;
        to_planar(d_out, h, w, &mut self.delta[..d_out.len()]);
        for i in (0..=last).rev() {
            let g = &self.geoms[i];
            let dz = &mut self.delta[..plane * g.cout];
            for (d, &slope) in dz.iter_mut().zip(&self.pre[i]) {
                *d *= slope;
            }
            let src = &self.acts[i];
            for (co, dp) in dz.chunks_exact(plane).enumerate() {
                grad[g.bias.start + co] += dp.iter().sum::<f64>();
                for (ci, ap) in src.chunks_exact(plane).enumerate() {
                    for dy in 0..g.kh {
                        for dx in 0..g.kw {
                            let (oy, ox) = g.offset(dy, dx);
                            grad[g.k(dy, dx, ci, co)] += shifted_dot(dp, ap, oy, ox, h, w);
                        }
                    }
                }
            }
            if i > 0 {
                let prev = &mut self.delta_prev[..plane * g.cin];
                prev.fill(0.0);
                for (ci, pp) in prev.chunks_exact_mut(plane).enumerate() {
                    for (co, dp) in dz.chunks_exact(plane).enumerate() {
                        for dy in 0..g.kh {
                            for dx in 0..g.kw {
                                let (oy, ox) = g.offset(dy, dx);
                                shifted_axpy(pp, params[g.k(dy, dx, ci, co)], dp, -oy, -ox, h, w);
                            }
                        }
                    }
                }
                std::mem::swap(&mut self.delta, &mut self.delta_prev);
            }
        }
    }
}

/// Column ranges `(x_lo, x_hi, y_lo, y_hi)` of output pixels whose shifted
/// source `(x + ox, y + oy)` lies inside the grid.
#[inline]
fn valid_window(oy: isize, ox: isize, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let lo = |o: isize| (-o).max(0) as usize;
    let hi = |o: isize, n: usize| (n as isize - o.max(0)).max(0) as usize;
    (lo(ox), hi(ox, w), lo(oy), hi(oy, h))
}

/// `dst[x, y] += a * src[x + ox, y + oy]` over the valid window of planes
/// stored column-major (`y` contiguous).
#[inline]
fn shifted_axpy(dst: &mut [f64], a: f64, src: &[f64], oy: isize, ox: isize, h: usize, w: usize) {
    let (x_lo, x_hi, y_lo, y_hi) = valid_window(oy, ox, h, w);
    if y_lo >= y_hi {
        return;
    }
    for x in x_lo..x_hi {
        let sx = (x as isize + ox) as usize;
        let sy = (y_lo as isize + oy) as usize;
        axpy(&mut dst[x * h + y_lo..x * h + y_hi], a, &src[sx * h + sy..]);
    }
}

/// `sum dst[x, y] * src[x + ox, y + oy]` over the valid window.
#[inline]
fn shifted_dot(d: &[f64], src: &[f64], oy: isize, ox: isize, h: usize, w: usize) -> f64 {
    let (x_lo, x_hi, y_lo, y_hi) = valid_window(oy, ox, h, w);
    let mut acc = 0.0;
    if y_lo >= y_hi {
        return acc;
    }
    for x in x_lo..x_hi {
        let sx = (x as isize + ox) as usize;
        let sy = (y_lo as isize + oy) as usize;
        let n = y_hi - y_lo;
        acc += dot(&d[x * h + y_lo..][..n], &src[sx * h + sy..][..n]);
    }
    acc
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ac, ar) = a.split_at(a.len() / 8 * 8);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(8).zip(bc.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Channels-last `[h, w, c]` to planar `[c, w, h]`.
fn to_planar(src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    let c = src.len() / (h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                dst[(ch * w + x) * h + y] = src[(y * w + x) * c + ch];
            }
        }
    }
}

/// Planar `[c, w, h]` back to channels-last `[h, w, c]`.
fn to_channels_last(src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    let c = src.len() / (h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                dst[(y * w + x) * c + ch] = src[(ch * w + x) * h + y];
            }
        }
    }
}

fn check_input(spec: &NetworkSpec, input: &Tensor) -> Result<()> {
    let expected = spec.input_dims();
    if input.shape() != expected {
        return Err(Error::InputShape {
            expected: expected.to_vec(),
            got: input.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_target(spec: &NetworkSpec, target: &Tensor) -> Result<()> {
    let expected = spec.output_dims();
    if target.shape() != expected {
        return Err(Error::ShapeMismatch {
            left: expected.to_vec(),
            right: target.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn forward(spec: &NetworkSpec, params: &ParamVector, input: &Tensor) -> Result<Tensor> {
    check_input(spec, input)?;
    let mut ws = Workspace::new(spec, params)?;
    ws.forward(params.data(), input.data());
    Tensor::from_vec(&spec.output_dims(), ws.output().to_vec())
}

/// Runs the network over many inputs, reusing one workspace.
pub fn forward_many<'a>(
    spec: &NetworkSpec,
    params: &ParamVector,
    inputs: impl IntoIterator<Item = &'a Tensor>,
) -> Result<Vec<Tensor>> {
    let mut ws = Workspace::new(spec, params)?;
    let dims = spec.output_dims();
    inputs
        .into_iter()
        .map(|x| {
            check_input(spec, x)?;
            ws.forward(params.data(), x.data());
            Tensor::from_vec(&dims, ws.output().to_vec())
        })
        .collect()
}

/// Per-sample MSE of the network's prediction against each pair's target.
pub fn per_sample_mse<P: TrainingPair>(spec: &NetworkSpec, params: &ParamVector, pairs: &[P]) -> Result<Vec<f64>> {
    let mut ws = Workspace::new(spec, params)?;
    pairs
        .iter()
        .map(|p| {
            check_input(spec, p.input())?;
            check_target(spec, p.target())?;
            ws.forward(params.data(), p.input().data());
            let out = ws.output();
            Ok(sum_squared_error(out, p.target().data()) / out.len() as f64)
        })
        .collect()
}

/// Mean batch loss and its gradient.
///
/// The loss is the per-sample MSE averaged over the batch; samples are
/// accumulated sequentially in batch order.
pub fn loss_and_gradient<P: TrainingPair>(
    spec: &NetworkSpec,
    params: &ParamVector,
    batch: &[P],
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut ws = Workspace::new(spec, params)?;
    let mut grad = ParamVector::zeros(spec);
    let out_len: usize = spec.output_dims().iter().product();
    let scale = 2.0 / (out_len as f64 * batch.len() as f64);
    let mut d_out = vec![0.0; out_len];
    let mut loss = 0.0;
    for p in batch {
        check_input(spec, p.input())?;
        check_target(spec, p.target())?;
        ws.forward(params.data(), p.input().data());
        let out = ws.output();
        let target = p.target().data();
        loss += sum_squared_error(out, target) / out_len as f64;
        for ((d, &o), &t) in d_out.iter_mut().zip(out).zip(target) {
            *d = scale * (o - t);
        }
        ws.backward(params.data(), &d_out, &mut grad.data);
    }
    Ok((loss / batch.len() as f64, grad))
}

/// Gradient of the mean batch MSE with respect to the parameters.
pub fn backward<P: TrainingPair>(spec: &NetworkSpec, params: &ParamVector, batch: &[P]) -> Result<ParamVector> {
    loss_and_gradient(spec, params, batch).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::new(
            vec![
                LayerSpec::new(3, 3, 3, Activation::Selu),
                LayerSpec::new(3, 3, 2, Activation::Softplus),
            ],
            4,
            3,
            2,
        )
        .unwrap()
    }

    fn rand_tensor(shape: &[usize], rng: &mut SimRng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_parameter_count() {
        let spec = NetworkSpec::channel_estimator(72, 14);
        let expected = (5 * 5 * 2 * 24 + 24) + (5 * 5 * 24 * 8 + 8) + (5 * 5 * 8 * 2 + 2);
        assert_eq!(spec.param_count(), expected);
        assert_eq!(init_params(&spec, 1).len(), expected);
    }

    #[test]
    fn layout_is_contiguous() {
        let layout = NetworkSpec::channel_estimator(8, 4).layout();
        let mut next = 0;
        for b in &layout {
            assert_eq!(b.offset, next);
            next += b.len();
        }
        assert_eq!(next, NetworkSpec::channel_estimator(8, 4).param_count());
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = NetworkSpec::new(vec![LayerSpec::new(1, 1, 1, Activation::Selu)], 2, 2, 1).unwrap();
        let a = init_params(&spec, 42);
        assert_eq!(a, init_params(&spec, 42));
        assert_eq!(a.block(0, ParamRole::Bias), &[0.0]);

        let spec = NetworkSpec::channel_estimator(6, 4);
        let a = init_params(&spec, 9);
        let b = init_params(&spec, 9);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let bound = (1.0f64 / 50.0).sqrt();
        assert!(a.block(0, ParamRole::Kernel).iter().all(|w| w.abs() <= bound));
        for l in 0..3 {
            assert!(a.block(l, ParamRole::Bias).iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn fused_slope_matches_separate_evaluation() {
        for act in [Activation::Selu, Activation::Softplus, Activation::Linear] {
            for x in [-30.0, -2.5, -1e-9, 0.0, 1e-9, 0.7, 19.0, 45.0] {
                let (v, d) = act.apply_with_slope(x);
                assert!((v - act.apply(x)).abs() <= 1e-15 * v.abs().max(1.0), "{act:?} {x}");
                assert!((d - act.derivative(x)).abs() <= 1e-15 * d.abs().max(1.0), "{act:?} {x}");
            }
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Softplus.apply(0.0), std::f64::consts::LN_2);
        assert_eq!(Activation::Softplus.apply(40.0), 40.0);
        assert_eq!(Activation::Selu.apply(0.0), 0.0);
        assert!((Activation::Selu.apply(2.0) - 2.101_401_974_710_961).abs() < 1e-12);
        assert!((Activation::Selu.apply(-50.0) + SELU_LAMBDA * SELU_ALPHA).abs() < 1e-12);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = NetworkSpec::channel_estimator(6, 5);
        let params = ParamVector::zeros(&spec);
        let mut rng = SimRng::seed_from_u64(3);
        let x = rand_tensor(&spec.input_dims(), &mut rng);
        let y = forward(&spec, &params, &x).unwrap();
        assert_eq!(y.shape(), &[6, 5, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_conv_applies_selu() {
        let spec = NetworkSpec::new(vec![LayerSpec::new(1, 1, 1, Activation::Selu)], 1, 1, 1).unwrap();
        let params = ParamVector::unflatten(&spec.layout(), vec![1.0, 0.0]).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let y = forward(&spec, &params, &x).unwrap();
        assert!((y.data()[0] - SELU_LAMBDA * 2.0).abs() < 1e-15);
        assert!((y.data()[0] - 2.1014).abs() < 1e-4);
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let spec = tiny_spec();
        let params = init_params(&spec, 0);
        let bad = Tensor::zeros(&[4, 4, 2]);
        assert!(matches!(forward(&spec, &params, &bad), Err(Error::InputShape { .. })));
    }

    #[test]
    fn same_padding_matches_direct_sum() {
        // 3x3 kernel on a 3x4 single-channel grid against an explicit double loop.
        let spec = NetworkSpec::new(vec![LayerSpec::new(3, 3, 1, Activation::Linear)], 3, 4, 1).unwrap();
        let mut rng = SimRng::seed_from_u64(11);
        let params = init_params(&spec, 5);
        let x = rand_tensor(&[3, 4, 1], &mut rng);
        let y = forward(&spec, &params, &x).unwrap();
        let k = params.block(0, ParamRole::Kernel);
        for r in 0..3i64 {
            for c in 0..4i64 {
                let mut s = 0.0;
                for dy in 0..3i64 {
                    for dx in 0..3i64 {
                        let (rr, cc) = (r + dy - 1, c + dx - 1);
                        if (0..3).contains(&rr) && (0..4).contains(&cc) {
                            s += x.data()[(rr * 4 + cc) as usize] * k[(dy * 3 + dx) as usize];
                        }
                    }
                }
                assert!((y.data()[(r * 4 + c) as usize] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::from_vec(&[2], vec![1.0, 3.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(mse_loss(&a, &b).unwrap(), 2.5);
        assert_eq!(mse_loss(&b, &a).unwrap(), 2.5);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert!(mse_loss(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn empty_batch_is_an_error() {
        let spec = tiny_spec();
        let params = init_params(&spec, 0);
        let batch: Vec<(Tensor, Tensor)> = Vec::new();
        assert!(matches!(backward(&spec, &params, &batch), Err(Error::EmptyBatch)));
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let spec = tiny_spec();
        let params = init_params(&spec, 4);
        let mut rng = SimRng::seed_from_u64(5);
        let x = rand_tensor(&spec.input_dims(), &mut rng);
        let y = forward(&spec, &params, &x).unwrap();
        let g = backward(&spec, &params, &[(x, y)]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_gradient_scales_with_residual() {
        let spec = NetworkSpec::new(vec![LayerSpec::new(3, 3, 1, Activation::Linear)], 3, 3, 1).unwrap();
        let params = init_params(&spec, 8);
        let mut rng = SimRng::seed_from_u64(1);
        let x = rand_tensor(&[3, 3, 1], &mut rng);
        let pred = forward(&spec, &params, &x).unwrap();
        let y1 = rand_tensor(&[3, 3, 1], &mut rng);
        // target with doubled residual: pred - 2 (pred - y1)
        let y2 = Tensor::from_vec(
            &[3, 3, 1],
            pred.data().iter().zip(y1.data()).map(|(p, y)| p - 2.0 * (p - y)).collect(),
        )
        .unwrap();
        let g1 = backward(&spec, &params, &[(x.clone(), y1)]).unwrap();
        let g2 = backward(&spec, &params, &[(x, y2)]).unwrap();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn unflatten_round_trip_and_errors() {
        let spec = tiny_spec();
        let p = init_params(&spec, 2);
        let flat = p.flatten();
        assert_eq!(flat.len(), spec.param_count());
        let back = ParamVector::unflatten(p.layout(), flat.clone()).unwrap();
        assert_eq!(back, p);
        assert!(ParamVector::unflatten(p.layout(), flat[1..].to_vec()).is_err());
    }

    #[test]
    fn per_sample_mse_matches_mse_loss() {
        let spec = tiny_spec();
        let params = init_params(&spec, 2);
        let mut rng = SimRng::seed_from_u64(21);
        let pairs: Vec<(Tensor, Tensor)> = (0..4)
            .map(|_| (rand_tensor(&[4, 3, 2], &mut rng), rand_tensor(&[4, 3, 2], &mut rng)))
            .collect();
        let losses = per_sample_mse(&spec, &params, &pairs).unwrap();
        for (l, (x, y)) in losses.iter().zip(&pairs) {
            let pred = forward(&spec, &params, x).unwrap();
            assert_eq!(*l, mse_loss(&pred, y).unwrap());
        }
    }
}
