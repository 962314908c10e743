//! Forward-only CNN producing the detection head tensor.
//!
//! Tensors are `height x width x channels`, channel-last, row-major `f32`.
//! Convolutions use stride 1 with zero same-padding, lowered to a GEMM per
//! block of output rows. Each output element is a single dot product, so the
//! result does not depend on how blocks are scheduled.

use std::io::{self, Read, Write};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bev::RgbMap;

pub const BN_EPSILON: f32 = 1e-5;
pub const WEIGHT_HEADER_BYTES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            height: shape.height,
            width: shape.width,
            channels: shape.channels,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self, NetworkError> {
        if data.len() != shape.len() {
            return Err(NetworkError::DataLength { shape, len: data.len() });
        }
        Ok(Self {
            height: shape.height,
            width: shape.width,
            channels: shape.channels,
            data,
        })
    }

    /// The network input for an encoded map: `rows x cols x 3`.
    pub fn from_rgb_map(map: &RgbMap) -> Self {
        Self {
            height: map.rows(),
            width: map.cols(),
            channels: 3,
            data: map.to_interleaved(),
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width, self.channels)
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("tensor of shape {shape} needs {} values, got {len}", shape.len())]
    DataLength { shape: Shape, len: usize },
    #[error("layer {layer}: {reason}")]
    Shape { layer: usize, reason: String },
    #[error("layer {layer}: expected input {expected}, got {got}")]
    InputMismatch { layer: usize, expected: Shape, got: Shape },
    #[error("layer {layer}: weights do not match the layer ({reason})")]
    Weights { layer: usize, reason: String },
    #[error("weight file holds {got} floats after the header, expected {expected}")]
    WeightCount { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn shape_err(layer: usize, reason: impl Into<String>) -> NetworkError {
    NetworkError::Shape {
        layer,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Leaky,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Leaky => leaky_relu(x),
            Activation::Linear => x,
        }
    }
}

#[inline]
pub fn leaky_relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.1 * x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    /// 1 or 3; stride is always 1.
    pub kernel: usize,
    pub batch_norm: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    /// 2x2 window, stride 2.
    MaxPool,
    /// Channel concatenation of earlier layer outputs, by absolute index.
    Route(Vec<usize>),
    /// 2x2 space-to-depth.
    Reorg,
}

impl LayerSpec {
    pub fn label(&self) -> String {
        match self {
            LayerSpec::Conv(c) => format!("conv {} {}x{}/1", c.filters, c.kernel, c.kernel),
            LayerSpec::MaxPool => "max 2x2/2".to_string(),
            LayerSpec::Route(src) => {
                let s: Vec<String> = src.iter().map(|i| i.to_string()).collect();
                format!("route {}", s.join(" "))
            }
            LayerSpec::Reorg => "reorg /2".to_string(),
        }
    }
}

fn conv(filters: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv(ConvSpec {
        filters,
        kernel,
        batch_norm: true,
        activation: Activation::Leaky,
    })
}

/// Input of the detector: 512 rows x 1024 columns x 3 channels.
pub const INPUT_SHAPE: Shape = Shape::new(512, 1024, 3);
/// Head output: 16 rows x 32 columns x 75 features.
pub const OUTPUT_SHAPE: Shape = Shape::new(16, 32, 75);

/// The 26-layer detector: 18 convolutions, 5 max-pools, 2 routes, 1 reorg.
pub fn build_complex_yolo() -> Vec<LayerSpec> {
    use LayerSpec::{MaxPool, Reorg, Route};
    vec![
        conv(24, 3),
        MaxPool,
        conv(48, 3),
        MaxPool,
        conv(64, 3),
        conv(32, 1),
        conv(64, 3),
        MaxPool,
        conv(128, 3),
        conv(64, 3),
        conv(128, 3),
        MaxPool,
        conv(256, 3),
        conv(256, 1),
        conv(512, 3),
        MaxPool,
        conv(512, 3),
        conv(512, 1),
        conv(1024, 3),
        conv(1024, 3),
        conv(1024, 3),
        Route(vec![12]),
        Reorg,
        Route(vec![22, 20]),
        conv(1024, 3),
        LayerSpec::Conv(ConvSpec {
            filters: 75,
            kernel: 1,
            batch_norm: false,
            activation: Activation::Linear,
        }),
    ]
}

/// Output shape of every layer for the given input, validating the stack.
pub fn infer_shapes(specs: &[LayerSpec], input: Shape) -> Result<Vec<Shape>, NetworkError> {
    let mut shapes: Vec<Shape> = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let prev = if i == 0 { input } else { shapes[i - 1] };
        let out = match spec {
            LayerSpec::Conv(c) => {
                if c.kernel != 1 && c.kernel != 3 {
                    return Err(shape_err(i, format!("unsupported kernel size {}", c.kernel)));
                }
                if c.filters == 0 {
                    return Err(shape_err(i, "convolution with zero filters"));
                }
                Shape::new(prev.height, prev.width, c.filters)
            }
            LayerSpec::MaxPool | LayerSpec::Reorg => {
                if prev.height % 2 != 0 || prev.width % 2 != 0 || prev.is_empty() {
                    return Err(shape_err(i, format!("needs even spatial dims, got {prev}")));
                }
                let factor = if matches!(spec, LayerSpec::Reorg) { 4 } else { 1 };
                Shape::new(prev.height / 2, prev.width / 2, prev.channels * factor)
            }
            LayerSpec::Route(src) => {
                let first = *src.first().ok_or_else(|| shape_err(i, "route without sources"))?;
                let mut channels = 0;
                for &s in src {
                    if s >= i {
                        return Err(shape_err(i, format!("route source {s} is not an earlier layer")));
                    }
                    let sh = shapes[s];
                    if (sh.height, sh.width) != (shapes[first].height, shapes[first].width) {
                        return Err(shape_err(
                            i,
                            format!("route sources disagree spatially: {} vs {sh}", shapes[first]),
                        ));
                    }
                    channels += sh.channels;
                }
                Shape::new(shapes[first].height, shapes[first].width, channels)
            }
        };
        shapes.push(out);
    }
    Ok(shapes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
}

/// Parameters of one convolution. The kernel is filter-major, then input
/// channel, then ky, kx. With batch-norm, `bias` is the shift applied after
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub filters: usize,
    pub channels: usize,
    pub kernel: usize,
    pub kernel_data: Vec<f32>,
    pub bias: Vec<f32>,
    pub batch_norm: Option<BatchNorm>,
}

impl ConvWeights {
    fn check(&self, layer: usize, spec: &ConvSpec, in_channels: usize) -> Result<(), NetworkError> {
        let bad = |reason: String| NetworkError::Weights { layer, reason };
        if self.filters != spec.filters || self.kernel != spec.kernel || self.channels != in_channels {
            return Err(bad(format!(
                "weights are {}x{}x{}x{}, layer wants {}x{}x{}x{}",
                self.filters,
                self.channels,
                self.kernel,
                self.kernel,
                spec.filters,
                in_channels,
                spec.kernel,
                spec.kernel
            )));
        }
        if self.kernel_data.len() != self.filters * self.channels * self.kernel * self.kernel {
            return Err(bad(format!("kernel has {} values", self.kernel_data.len())));
        }
        if self.bias.len() != self.filters {
            return Err(bad(format!("bias has {} values", self.bias.len())));
        }
        match (&self.batch_norm, spec.batch_norm) {
            (Some(bn), true) => {
                if bn.gamma.len() != self.filters || bn.mean.len() != self.filters || bn.variance.len() != self.filters
                {
                    return Err(bad("batch-norm vectors have the wrong length".into()));
                }
                if bn.variance.iter().any(|&v| v.is_nan() || v < 0.0) {
                    return Err(bad("negative batch-norm variance".into()));
                }
            }
            (None, false) => {}
            _ => return Err(bad("batch-norm presence disagrees with the layer".into())),
        }
        Ok(())
    }

    /// Kernel as a `(k*k*C) x F` row-major matrix matching the im2col patch order.
    fn packed(&self, scale: Option<&[f32]>) -> Vec<f32> {
        let (f_n, c_n, k) = (self.filters, self.channels, self.kernel);
        let kk = k * k;
        let mut out = vec![0.0; kk * c_n * f_n];
        for f in 0..f_n {
            let s = scale.map_or(1.0, |s| s[f]);
            for c in 0..c_n {
                for t in 0..kk {
                    out[(t * c_n + c) * f_n + f] = self.kernel_data[(f * c_n + c) * kk + t] * s;
                }
            }
        }
        out
    }

    fn bn_scale(&self) -> Option<Vec<f32>> {
        self.batch_norm.as_ref().map(|bn| {
            bn.gamma
                .iter()
                .zip(&bn.variance)
                .map(|(g, v)| g / (v + BN_EPSILON).sqrt())
                .collect()
        })
    }

    /// Kernel and bias with batch-norm folded in.
    fn folded(&self) -> (Vec<f32>, Vec<f32>) {
        match (self.bn_scale(), &self.batch_norm) {
            (Some(scale), Some(bn)) => {
                let bias = (0..self.filters)
                    .map(|f| self.bias[f] - bn.mean[f] * scale[f])
                    .collect();
                (self.packed(Some(&scale)), bias)
            }
            _ => (self.packed(None), self.bias.clone()),
        }
    }
}

/// One entry per layer; `Some` exactly for convolutions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights {
    pub convs: Vec<Option<ConvWeights>>,
}

impl Weights {
    /// He-uniform kernels, unit batch-norm statistics and small random biases.
    pub fn random(specs: &[LayerSpec], input: Shape, seed: u64) -> Result<Self, NetworkError> {
        let shapes = infer_shapes(specs, input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let LayerSpec::Conv(c) = spec else {
                convs.push(None);
                continue;
            };
            let channels = if i == 0 { input.channels } else { shapes[i - 1].channels };
            let fan_in = (channels * c.kernel * c.kernel) as f32;
            let gain = if c.activation == Activation::Leaky { 6.0 } else { 3.0 };
            let bound = (gain / fan_in).sqrt();
            let n = c.filters * channels * c.kernel * c.kernel;
            let kernel_data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            let bias = (0..c.filters).map(|_| rng.random_range(-0.05..0.05)).collect();
            let batch_norm = c.batch_norm.then(|| BatchNorm {
                gamma: vec![1.0; c.filters],
                mean: vec![0.0; c.filters],
                variance: vec![1.0; c.filters],
            });
            convs.push(Some(ConvWeights {
                filters: c.filters,
                channels,
                kernel: c.kernel,
                kernel_data,
                bias,
                batch_norm,
            }));
        }
        Ok(Self { convs })
    }

    pub fn parameter_count(&self) -> usize {
        self.convs
            .iter()
            .flatten()
            .map(|w| w.kernel_data.len() + w.bias.len() + w.batch_norm.as_ref().map_or(0, |_| 3 * w.filters))
            .sum()
    }

    /// Reads the flat little-endian weight file: a 20-byte header (ignored),
    /// then per convolution either `beta, gamma, mean, variance, kernel` or
    /// `bias, kernel`.
    pub fn read<R: Read>(mut reader: R, specs: &[LayerSpec], input: Shape) -> Result<Self, NetworkError> {
        let shapes = infer_shapes(specs, input)?;
        let mut header = [0u8; WEIGHT_HEADER_BYTES];
        reader.read_exact(&mut header)?;
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() % 4 != 0 {
            return Err(NetworkError::Io(io::Error::new(
                io::ErrorKind::InvalidData,
                "weight payload is not a whole number of f32 values",
            )));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let expected = expected_weight_count(specs, &shapes, input);
        if floats.len() != expected {
            return Err(NetworkError::WeightCount {
                expected,
                got: floats.len(),
            });
        }

        let mut pos = 0;
        let mut take = |n: usize| {
            let v = floats[pos..pos + n].to_vec();
            pos += n;
            v
        };
        let mut convs = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let LayerSpec::Conv(c) = spec else {
                convs.push(None);
                continue;
            };
            let channels = if i == 0 { input.channels } else { shapes[i - 1].channels };
            let f = c.filters;
            let (bias, batch_norm) = if c.batch_norm {
                let beta = take(f);
                let gamma = take(f);
                let mean = take(f);
                let variance = take(f);
                (beta, Some(BatchNorm { gamma, mean, variance }))
            } else {
                (take(f), None)
            };
            let kernel_data = take(f * channels * c.kernel * c.kernel);
            let w = ConvWeights {
                filters: f,
                channels,
                kernel: c.kernel,
                kernel_data,
                bias,
                batch_norm,
            };
            w.check(i, c, channels)?;
            convs.push(Some(w));
        }
        Ok(Self { convs })
    }

    pub fn write<W: Write>(&self, mut writer: W) -> io::Result<()> {
        // major 0, minor 2, revision 0, seen 0 (u64)
        let mut header = [0u8; WEIGHT_HEADER_BYTES];
        header[4..8].copy_from_slice(&2i32.to_le_bytes());
        writer.write_all(&header)?;
        let mut buf = Vec::new();
        let mut put = |v: &[f32]| {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        };
        for w in self.convs.iter().flatten() {
            put(&w.bias);
            if let Some(bn) = &w.batch_norm {
                put(&bn.gamma);
                put(&bn.mean);
                put(&bn.variance);
            }
            put(&w.kernel_data);
        }
        writer.write_all(&buf)
    }
}

fn expected_weight_count(specs: &[LayerSpec], shapes: &[Shape], input: Shape) -> usize {
    specs
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            LayerSpec::Conv(c) => {
                let channels = if i == 0 { input.channels } else { shapes[i - 1].channels };
                let per_filter = if c.batch_norm { 4 } else { 1 };
                Some(c.filters * (per_filter + channels * c.kernel * c.kernel))
            }
            _ => None,
        })
        .sum()
}

/// Output rows handled by one GEMM call.
fn rows_per_block(width: usize) -> usize {
    256usize.div_ceil(width).max(1)
}

/// Raw convolution (no bias, no activation) with a packed `(k*k*C) x F` kernel.
fn conv_gemm(input: &Tensor3, packed: &[f32], filters: usize, kernel: usize) -> Tensor3 {
    let (h, w, c) = (input.height, input.width, input.channels);
    let mut out = Tensor3::zeros(Shape::new(h, w, filters));
    let block = rows_per_block(w);
    let kdim = kernel * kernel * c;
    out.data
        .par_chunks_mut(block * w * filters)
        .enumerate()
        .for_each(|(b, out_block)| {
            let y0 = b * block;
            let rows = out_block.len() / (w * filters);
            let m = rows * w;
            let patches: std::borrow::Cow<[f32]> = if kernel == 1 {
                std::borrow::Cow::Borrowed(&input.data[y0 * w * c..(y0 + rows) * w * c])
            } else {
                std::borrow::Cow::Owned(im2col_3x3(input, y0, rows))
            };
            // SAFETY: all pointers refer to live buffers of the stated sizes:
            // patches is m x kdim, packed is kdim x filters, out_block is m x filters.
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    kdim,
                    filters,
                    1.0,
                    patches.as_ptr(),
                    kdim as isize,
                    1,
                    packed.as_ptr(),
                    filters as isize,
                    1,
                    0.0,
                    out_block.as_mut_ptr(),
                    filters as isize,
                    1,
                );
            }
        });
    out
}

/// Patch matrix for output rows `y0..y0+rows`, one row per output pixel,
/// columns ordered `(ky, kx, c)`, zero outside the input.
fn im2col_3x3(input: &Tensor3, y0: usize, rows: usize) -> Vec<f32> {
    let (h, w, c) = (input.height as isize, input.width as isize, input.channels);
    let kdim = 9 * c;
    let mut buf = vec![0.0f32; rows * input.width * kdim];
    for r in 0..rows {
        let y = (y0 + r) as isize;
        for x in 0..w {
            let base = (r * input.width + x as usize) * kdim;
            for ky in 0..3isize {
                let iy = y + ky - 1;
                if iy < 0 || iy >= h {
                    continue;
                }
                for kx in 0..3isize {
                    let ix = x + kx - 1;
                    if ix < 0 || ix >= w {
                        continue;
                    }
                    let src = ((iy * w + ix) as usize) * c;
                    let dst = base + ((ky * 3 + kx) as usize) * c;
                    buf[dst..dst + c].copy_from_slice(&input.data[src..src + c]);
                }
            }
        }
    }
    buf
}

fn add_bias_activate(t: &mut Tensor3, bias: &[f32], act: Activation) {
    let f = t.channels;
    t.data.par_chunks_mut(f * 1024).for_each(|chunk| {
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = act.apply(*v + bias[i % f]);
        }
    });
}

/// One convolution layer: convolution, then batch-norm (explicit, not
/// folded) when the layer has it, then the activation.
pub fn conv2d(input: &Tensor3, spec: &ConvSpec, w: &ConvWeights) -> Result<Tensor3, NetworkError> {
    if spec.kernel != 1 && spec.kernel != 3 {
        return Err(shape_err(0, format!("unsupported kernel size {}", spec.kernel)));
    }
    w.check(0, spec, input.channels)?;
    let mut out = conv_gemm(input, &w.packed(None), w.filters, w.kernel);
    let f = w.filters;
    match &w.batch_norm {
        Some(bn) => {
            for (i, v) in out.data.iter_mut().enumerate() {
                let k = i % f;
                let norm = (*v - bn.mean[k]) / (bn.variance[k] + BN_EPSILON).sqrt();
                *v = spec.activation.apply(bn.gamma[k] * norm + w.bias[k]);
            }
        }
        None => add_bias_activate(&mut out, &w.bias, spec.activation),
    }
    Ok(out)
}

pub fn maxpool2(input: &Tensor3) -> Result<Tensor3, NetworkError> {
    let (h, w, c) = (input.height, input.width, input.channels);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(0, format!("max-pool needs even dims, got {}", input.shape())));
    }
    let mut out = Tensor3::zeros(Shape::new(h / 2, w / 2, c));
    let ow = w / 2;
    out.data.par_chunks_mut(ow * c).enumerate().for_each(|(oy, row)| {
        for ox in 0..ow {
            for ch in 0..c {
                let (y, x) = (2 * oy, 2 * ox);
                let m = input
                    .get(y, x, ch)
                    .max(input.get(y, x + 1, ch))
                    .max(input.get(y + 1, x, ch))
                    .max(input.get(y + 1, x + 1, ch));
                row[ox * c + ch] = m;
            }
        }
    });
    Ok(out)
}

/// Space-to-depth with block 2: output channel `(dy * 2 + dx) * C + c` holds
/// input `(2y + dy, 2x + dx, c)`.
pub fn reorg2(input: &Tensor3) -> Result<Tensor3, NetworkError> {
    let (h, w, c) = (input.height, input.width, input.channels);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(0, format!("reorg needs even dims, got {}", input.shape())));
    }
    let mut out = Tensor3::zeros(Shape::new(h / 2, w / 2, 4 * c));
    for oy in 0..h / 2 {
        for ox in 0..w / 2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let src = input.index(2 * oy + dy, 2 * ox + dx, 0);
                    let dst = out.index(oy, ox, (dy * 2 + dx) * c);
                    out.data[dst..dst + c].copy_from_slice(&input.data[src..src + c]);
                }
            }
        }
    }
    Ok(out)
}

/// Channel concatenation in the given order.
pub fn route(sources: &[&Tensor3]) -> Result<Tensor3, NetworkError> {
    let first = sources.first().ok_or_else(|| shape_err(0, "route without sources"))?;
    let (h, w) = (first.height, first.width);
    if let Some(bad) = sources.iter().find(|t| t.height != h || t.width != w) {
        return Err(shape_err(
            0,
            format!("route spatial mismatch: {} vs {}", first.shape(), bad.shape()),
        ));
    }
    let channels: usize = sources.iter().map(|t| t.channels).sum();
    let mut out = Tensor3::zeros(Shape::new(h, w, channels));
    for p in 0..h * w {
        let mut off = p * channels;
        for t in sources {
            let c = t.channels;
            out.data[off..off + c].copy_from_slice(&t.data[p * c..(p + 1) * c]);
            off += c;
        }
    }
    Ok(out)
}

enum Prepared {
    Conv {
        kernel: usize,
        filters: usize,
        packed: Vec<f32>,
        bias: Vec<f32>,
        activation: Activation,
    },
    MaxPool,
    Route(Vec<usize>),
    Reorg,
}

/// A validated layer stack with batch-norm folded into the kernels.
pub struct Network {
    specs: Vec<LayerSpec>,
    layers: Vec<Prepared>,
    input: Shape,
    shapes: Vec<Shape>,
    /// Index of the last layer reading each output.
    last_use: Vec<usize>,
}

impl Network {
    /// Checks every shape and weight block before any compute happens.
    pub fn new(specs: &[LayerSpec], weights: &Weights, input: Shape) -> Result<Self, NetworkError> {
        let shapes = infer_shapes(specs, input)?;
        if weights.convs.len() != specs.len() {
            return Err(NetworkError::Weights {
                layer: weights.convs.len().min(specs.len()),
                reason: format!("{} weight slots for {} layers", weights.convs.len(), specs.len()),
            });
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let prepared = match spec {
                LayerSpec::Conv(c) => {
                    let w = weights.convs[i].as_ref().ok_or_else(|| NetworkError::Weights {
                        layer: i,
                        reason: "missing convolution weights".into(),
                    })?;
                    let in_channels = if i == 0 { input.channels } else { shapes[i - 1].channels };
                    w.check(i, c, in_channels)?;
                    let (packed, bias) = w.folded();
                    Prepared::Conv {
                        kernel: c.kernel,
                        filters: c.filters,
                        packed,
                        bias,
                        activation: c.activation,
                    }
                }
                LayerSpec::MaxPool => Prepared::MaxPool,
                LayerSpec::Route(s) => Prepared::Route(s.clone()),
                LayerSpec::Reorg => Prepared::Reorg,
            };
            layers.push(prepared);
        }
        let mut last_use: Vec<usize> = (0..specs.len()).collect();
        for (i, spec) in specs.iter().enumerate() {
            match spec {
                LayerSpec::Route(src) => {
                    for &s in src {
                        last_use[s] = last_use[s].max(i);
                    }
                }
                _ if i > 0 => last_use[i - 1] = last_use[i - 1].max(i),
                _ => {}
            }
        }
        if let Some(last) = last_use.last_mut() {
            *last = usize::MAX;
        }
        Ok(Self {
            specs: specs.to_vec(),
            layers,
            input,
            shapes,
            last_use,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    /// Output shape of every layer.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().unwrap_or(&self.input)
    }

    pub fn forward(&self, input: &Tensor3) -> Result<Tensor3, NetworkError> {
        self.run(input, |_, _, _| {}).map(|(t, _)| t)
    }

    /// Forward pass plus wall time of each layer.
    pub fn forward_timed(&self, input: &Tensor3) -> Result<(Tensor3, Vec<Duration>), NetworkError> {
        self.run(input, |_, _, _| {})
    }

    /// Forward pass calling `inspect(layer, shape, output)` after every layer.
    pub fn forward_inspect<F>(&self, input: &Tensor3, inspect: F) -> Result<Tensor3, NetworkError>
    where
        F: FnMut(usize, Shape, &Tensor3),
    {
        self.run(input, inspect).map(|(t, _)| t)
    }

    fn run<F>(&self, input: &Tensor3, mut inspect: F) -> Result<(Tensor3, Vec<Duration>), NetworkError>
    where
        F: FnMut(usize, Shape, &Tensor3),
    {
        if input.shape() != self.input {
            return Err(NetworkError::InputMismatch {
                layer: 0,
                expected: self.input,
                got: input.shape(),
            });
        }
        if self.layers.is_empty() {
            return Ok((input.clone(), Vec::new()));
        }
        let mut outputs: Vec<Option<Tensor3>> = (0..self.layers.len()).map(|_| None).collect();
        let mut times = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let start = Instant::now();
            let prev = if i == 0 {
                input
            } else {
                outputs[i - 1].as_ref().expect("previous output retained")
            };
            let out = match layer {
                Prepared::Conv {
                    kernel,
                    filters,
                    packed,
                    bias,
                    activation,
                } => {
                    let mut t = conv_gemm(prev, packed, *filters, *kernel);
                    add_bias_activate(&mut t, bias, *activation);
                    t
                }
                Prepared::MaxPool => maxpool2(prev)?,
                Prepared::Reorg => reorg2(prev)?,
                Prepared::Route(src) => {
                    let refs: Vec<&Tensor3> = src
                        .iter()
                        .map(|&s| outputs[s].as_ref().expect("route source retained"))
                        .collect();
                    route(&refs)?
                }
            };
            times.push(start.elapsed());
            debug_assert_eq!(out.shape(), self.shapes[i]);
            inspect(i, out.shape(), &out);
            outputs[i] = Some(out);
            for (j, slot) in outputs.iter_mut().enumerate().take(i + 1) {
                if self.last_use[j] <= i {
                    *slot = None;
                }
            }
        }
        let out = outputs.pop().flatten().expect("final output retained");
        Ok((out, times))
    }
}

/// Runs `specs` with `weights` on an encoded map.
pub fn forward(map: &RgbMap, specs: &[LayerSpec], weights: &Weights) -> Result<Tensor3, NetworkError> {
    let input = Tensor3::from_rgb_map(map);
    Network::new(specs, weights, input.shape())?.forward(&input)
}
