//! Float network description and the reference forward pass.
//!
//! Conv tensors are channels-first (`[C, H, W]`) and row-major. Dense layers
//! flatten whatever they receive, so a dense layer may follow a conv or pool.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RealTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weights: RealTensor,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    pub fn new(weights: RealTensor, bias: Vec<f32>) -> Result<Self> {
        if weights.shape().len() != 2 || weights.shape()[0] != bias.len() {
            return Err(Error::InputDomain(format!(
                "dense weights {:?} incompatible with bias of length {}",
                weights.shape(),
                bias.len()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer {
    /// `[out, in, kh, kw]`
    pub kernels: RealTensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dLayer {
    pub fn new(kernels: RealTensor, bias: Vec<f32>, stride: usize, padding: Padding) -> Result<Self> {
        if kernels.shape().len() != 4 || kernels.shape()[0] != bias.len() {
            return Err(Error::InputDomain(format!(
                "conv kernels {:?} incompatible with bias of length {}",
                kernels.shape(),
                bias.len()
            )));
        }
        if stride == 0 {
            return Err(Error::InputDomain("conv stride must be at least 1".into()));
        }
        Ok(Self {
            kernels,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.kernels.shape()[2], self.kernels.shape()[3])
    }

    pub fn geometry(&self, input_shape: &[usize]) -> std::result::Result<ConvGeometry, String> {
        let (kh, kw) = self.kernel_hw();
        ConvGeometry::new(input_shape, self.in_channels(), kh, kw, self.stride, self.padding)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense(DenseLayer),
    Conv2d(Conv2dLayer),
    MaxPool { window: usize, stride: usize },
    Relu,
    Softmax,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            LayerSpec::Dense(d) => {
                let n: usize = input.iter().product();
                if n != d.in_features() {
                    return Err(format!(
                        "dense layer expects {} inputs, got shape {input:?}",
                        d.in_features()
                    ));
                }
                Ok(vec![d.out_features()])
            }
            LayerSpec::Conv2d(c) => {
                let g = c.geometry(input)?;
                Ok(vec![c.out_channels(), g.out_h, g.out_w])
            }
            LayerSpec::MaxPool { window, stride } => {
                let g = PoolGeometry::new(input, *window, *stride)?;
                Ok(vec![g.channels, g.out_h, g.out_w])
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok(input.to_vec()),
        }
    }
}

/// Spatial bookkeeping for a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> std::result::Result<Self, String> {
        let &[c, h, w] = input_shape else {
            return Err(format!("conv expects a [C, H, W] input, got {input_shape:?}"));
        };
        if c != in_channels {
            return Err(format!("conv expects {in_channels} input channels, got {c}"));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err("conv kernel and stride must be at least 1".into());
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(format!("kernel {kh}x{kw} larger than input {h}x{w}"));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let out_h = h.div_ceil(stride);
                let out_w = w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
                (out_h, out_w, pad_h / 2, pad_w / 2)
            }
        };
        Ok(Self {
            in_channels,
            in_h: h,
            in_w: w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    /// Lowers a `[C, H, W]` input to a `positions x patch_len` row-major matrix.
    /// Out-of-bounds taps read `T::default()` (zero padding).
    pub fn im2col<T: Copy + Default>(&self, input: &[T]) -> Vec<T> {
        let patch = self.patch_len();
        let mut out = vec![T::default(); self.positions() * patch];
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut out[(oy * self.out_w + ox) * patch..][..patch];
                let mut f = 0;
                for ci in 0..self.in_channels {
                    let plane = &input[ci * self.in_h * self.in_w..][..self.in_h * self.in_w];
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.in_h
                                && (ix as usize) < self.in_w
                            {
                                row[f] = plane[iy as usize * self.in_w + ix as usize];
                            }
                            f += 1;
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input_shape: &[usize], window: usize, stride: usize) -> std::result::Result<Self, String> {
        let &[channels, in_h, in_w] = input_shape else {
            return Err(format!("maxpool expects a [C, H, W] input, got {input_shape:?}"));
        };
        if window == 0 || stride == 0 {
            return Err("maxpool window and stride must be at least 1".into());
        }
        if window > in_h || window > in_w {
            return Err(format!("pool window {window} larger than input {in_h}x{in_w}"));
        }
        Ok(Self {
            channels,
            in_h,
            in_w,
            window,
            stride,
            out_h: (in_h - window) / stride + 1,
            out_w: (in_w - window) / stride + 1,
        })
    }

    pub fn apply<T: Copy + PartialOrd>(&self, input: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(self.channels * self.out_h * self.out_w);
        for c in 0..self.channels {
            let plane = &input[c * self.in_h * self.in_w..][..self.in_h * self.in_w];
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let mut best = plane[oy * self.stride * self.in_w + ox * self.stride];
                    for ky in 0..self.window {
                        for kx in 0..self.window {
                            let v = plane[(oy * self.stride + ky) * self.in_w + ox * self.stride + kx];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
        out
    }
}

/// Ordered layer list with a fixed input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

/// Input and output of one layer, as recorded by [`Network::layer_activations`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub input: RealTensor,
    pub output: RealTensor,
}

/// Memory and MAC cost of one parametric layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub mem_bits: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub per_layer: Vec<LayerCost>,
    pub mem_bits: u64,
    pub macs: u64,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        let net = Self { input_shape, layers };
        net.shapes()?;
        Ok(net)
    }

    pub fn empty(input_shape: Vec<usize>) -> Self {
        Self {
            input_shape,
            layers: Vec::new(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    /// Shape entering each layer, followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|reason| Error::structural(i, reason))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap())
    }

    fn check_input(&self, x: &RealTensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::structural(
                0,
                format!(
                    "input shape {:?} does not match network input {:?}",
                    x.shape(),
                    self.input_shape
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &RealTensor) -> Result<RealTensor> {
        self.check_input(x)?;
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            current = apply_layer(i, layer, &current)?;
        }
        Ok(current)
    }

    pub fn layer_activations(&self, x: &RealTensor) -> Result<Vec<LayerTrace>> {
        self.check_input(x)?;
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = traces.last().map_or_else(|| x.clone(), |t| t.output.clone());
            let output = apply_layer(i, layer, &input)?;
            traces.push(LayerTrace { input, output });
        }
        Ok(traces)
    }

    pub fn predict(&self, x: &RealTensor) -> Result<usize> {
        Ok(crate::tensor::argmax(self.forward(x)?.data()))
    }

    /// `C_mem = (weights + biases) * K` bits and `C_mac` per parametric layer.
    pub fn complexity(&self, word_length: u32) -> Result<Complexity> {
        let shapes = self.shapes()?;
        let k = word_length as u64;
        let mut per_layer = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let cost = match layer {
                LayerSpec::Dense(d) => {
                    let (m, n) = (d.out_features() as u64, d.in_features() as u64);
                    LayerCost {
                        layer: i,
                        mem_bits: (m * n + m) * k,
                        macs: m * n,
                    }
                }
                LayerSpec::Conv2d(c) => {
                    let g = c
                        .geometry(&shapes[i])
                        .map_err(|reason| Error::structural(i, reason))?;
                    let weights = (c.out_channels() * g.patch_len()) as u64;
                    LayerCost {
                        layer: i,
                        mem_bits: (weights + c.out_channels() as u64) * k,
                        macs: weights * g.positions() as u64,
                    }
                }
                _ => continue,
            };
            per_layer.push(cost);
        }
        Ok(Complexity {
            mem_bits: per_layer.iter().map(|c| c.mem_bits).sum(),
            macs: per_layer.iter().map(|c| c.macs).sum(),
            per_layer,
        })
    }
}

pub fn relu(x: &RealTensor) -> RealTensor {
    x.map(|&v| v.max(0.0))
}

/// Softmax over all elements, with the maximum subtracted first.
pub fn softmax(x: &RealTensor) -> RealTensor {
    let max = x.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = x.data().iter().map(|&v| ((v - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let data = exps.iter().map(|&e| (e / sum) as f32).collect();
    RealTensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn dense_forward(d: &DenseLayer, x: &[f32]) -> Vec<f32> {
    let w = ArrayView2::from_shape((d.out_features(), d.in_features()), d.weights.data())
        .expect("validated dense shape");
    let mut out = w.dot(&ArrayView1::from(x));
    for (o, b) in out.iter_mut().zip(&d.bias) {
        *o += b;
    }
    out.to_vec()
}

pub(crate) fn conv_forward(c: &Conv2dLayer, g: &ConvGeometry, x: &[f32]) -> Vec<f32> {
    let patches = g.im2col(x);
    let patches = ArrayView2::from_shape((g.positions(), g.patch_len()), &patches).unwrap();
    let kernels = ArrayView2::from_shape((c.out_channels(), g.patch_len()), c.kernels.data())
        .expect("validated conv shape");
    // [out, positions]
    let out = kernels.dot(&patches.t());
    let mut data = Vec::with_capacity(out.len());
    for (row, b) in out.rows().into_iter().zip(&c.bias) {
        data.extend(row.iter().map(|v| v + b));
    }
    data
}

fn apply_layer(index: usize, layer: &LayerSpec, x: &RealTensor) -> Result<RealTensor> {
    let out_shape = layer
        .output_shape(x.shape())
        .map_err(|reason| Error::structural(index, reason))?;
    let data = match layer {
        LayerSpec::Dense(d) => dense_forward(d, x.data()),
        LayerSpec::Conv2d(c) => {
            let g = c
                .geometry(x.shape())
                .map_err(|reason| Error::structural(index, reason))?;
            conv_forward(c, &g, x.data())
        }
        LayerSpec::MaxPool { window, stride } => PoolGeometry::new(x.shape(), *window, *stride)
            .map_err(|reason| Error::structural(index, reason))?
            .apply(x.data()),
        LayerSpec::Relu => return Ok(relu(x)),
        LayerSpec::Softmax => return Ok(softmax(x)),
    };
    Ok(RealTensor::new(out_shape, data).expect("shape computed from layer"))
}
