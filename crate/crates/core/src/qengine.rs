//! Quantized layer execution.
//!
//! A quantized linear layer computes `a_q = W_q x_q + b_q` exactly in integers.
//! In mixed mode the accumulator is rescaled by the single scalar
//! `input_step * weight_step`, passed through the float activation and
//! requantized for the next layer. In integer-only mode (relu hidden layers,
//! power-of-two steps) the rescale-and-requantize step collapses to
//! `clip(relu(a_q) << s)` with `s = log2(input_step * weight_step / next_step)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Complexity, ConvGeometry, LayerCost, Padding, PoolGeometry};
use crate::quantizer::{
    power_of_two_exponent, quantize_unsigned, QuantParams, QuantTensor, Signedness,
};
use crate::tensor::{argmax, RealTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Softmax,
}

/// How the bias step was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasRule {
    /// `bias_step = input_step * weight_step`; the bias joins the integer sum.
    Tied,
    /// Bias quantized with its own max-abs step and added after the rescale.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Mixed,
    IntegerOnly,
}

impl std::fmt::Display for ExecMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExecMode::Mixed => "mixed",
            ExecMode::IntegerOnly => "integer",
        })
    }
}

/// Exact integer activations of one layer, with their guaranteed bit width.
#[derive(Debug, Clone, PartialEq)]
pub struct WideAccumulator {
    shape: Vec<usize>,
    values: Vec<i64>,
    width: u32,
}

impl WideAccumulator {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    /// Signed bit width that provably holds every element.
    pub fn width(&self) -> u32 {
        self.width
    }
}

/// `2K + ceil(log2(fan_in + 1))`: holds any sum of `fan_in` products of a
/// K-bit unsigned and a K-bit signed code plus one K-bit signed bias.
pub fn accumulator_width(word_length: u32, fan_in: usize) -> u32 {
    // bit length of fan_in == ceil(log2(fan_in + 1))
    2 * word_length + (usize::BITS - fan_in.leading_zeros())
}

fn check_mac_operands(w: &QuantTensor, x: &QuantTensor, b: &QuantTensor) -> Result<u32> {
    if w.params().signedness() != Signedness::Signed || b.params().signedness() != Signedness::Signed {
        return Err(Error::Config("weights and bias must use signed codes".into()));
    }
    if x.params().signedness() != Signedness::Unsigned {
        return Err(Error::Config("layer inputs must use unsigned codes".into()));
    }
    let k = w.params().word_length();
    if x.params().word_length() != k || b.params().word_length() != k {
        return Err(Error::Config(format!(
            "word lengths differ: weights {k}, inputs {}, bias {}",
            x.params().word_length(),
            b.params().word_length()
        )));
    }
    Ok(k)
}

/// Row-by-row integer product `rows x fan_in` times `fan_in`, plus bias.
fn mac_rows(weights: &[i32], fan_in: usize, input: &[i32], bias: &[i32], width: u32) -> Result<Vec<i64>> {
    if width <= 32 {
        // every partial sum is bounded by the final bound, so i32 cannot wrap
        Ok(weights
            .chunks_exact(fan_in)
            .zip(bias)
            .map(|(row, &b)| {
                let dot: i32 = row.iter().zip(input).map(|(&w, &x)| w * x).sum();
                (dot + b) as i64
            })
            .collect())
    } else if width <= 64 {
        Ok(weights
            .chunks_exact(fan_in)
            .zip(bias)
            .map(|(row, &b)| {
                let dot: i64 = row.iter().zip(input).map(|(&w, &x)| w as i64 * x as i64).sum();
                dot + b as i64
            })
            .collect())
    } else {
        Err(Error::Overflow(format!(
            "accumulator needs {width} bits, more than the 64-bit container"
        )))
    }
}

fn debug_check_width(values: &[i64], width: u32) {
    if cfg!(debug_assertions) || cfg!(test) {
        let bound = if width >= 64 { i64::MAX } else { (1i64 << (width - 1)) - 1 };
        assert!(
            values.iter().all(|v| v.abs() <= bound),
            "accumulator exceeded its declared {width}-bit width"
        );
    }
}

/// `W_q x_q + b_q` for a dense layer. `w` is `[M, N]`, `x` has N codes, `b` has M.
pub fn quant_dense_mac(w: &QuantTensor, x: &QuantTensor, b: &QuantTensor) -> Result<WideAccumulator> {
    let k = check_mac_operands(w, x, b)?;
    let &[rows, fan_in] = w.shape() else {
        return Err(Error::InputDomain(format!("dense weights must be 2-D, got {:?}", w.shape())));
    };
    if x.len() != fan_in || b.len() != rows {
        return Err(Error::InputDomain(format!(
            "dense MAC shapes: weights {:?}, input {:?}, bias {:?}",
            w.shape(),
            x.shape(),
            b.shape()
        )));
    }
    let width = accumulator_width(k, fan_in);
    let values = mac_rows(w.codes(), fan_in, x.codes(), b.codes(), width)?;
    debug_check_width(&values, width);
    Ok(WideAccumulator {
        shape: vec![rows],
        values,
        width,
    })
}

/// Integer cross-correlation. `kernels` is `[out, in, kh, kw]`, `x` is `[C, H, W]`,
/// padding taps read code 0 (the code of real zero). Output is `[out, oh, ow]`.
pub fn quant_conv2d_mac(
    kernels: &QuantTensor,
    x: &QuantTensor,
    b: &QuantTensor,
    stride: usize,
    padding: Padding,
) -> Result<WideAccumulator> {
    let k = check_mac_operands(kernels, x, b)?;
    let &[out_ch, in_ch, kh, kw] = kernels.shape() else {
        return Err(Error::InputDomain(format!("conv kernels must be 4-D, got {:?}", kernels.shape())));
    };
    if b.len() != out_ch {
        return Err(Error::InputDomain(format!(
            "conv bias has {} codes for {out_ch} channels",
            b.len()
        )));
    }
    let g = ConvGeometry::new(x.shape(), in_ch, kh, kw, stride, padding).map_err(Error::InputDomain)?;
    let fan_in = g.patch_len();
    let width = accumulator_width(k, fan_in);
    let patches = g.im2col(x.codes());
    let positions = g.positions();
    let mut values = vec![0i64; out_ch * positions];
    for (p, patch) in patches.chunks_exact(fan_in).enumerate() {
        let column = mac_rows(kernels.codes(), fan_in, patch, b.codes(), width)?;
        for (c, v) in column.into_iter().enumerate() {
            values[c * positions + p] = v;
        }
    }
    debug_check_width(&values, width);
    Ok(WideAccumulator {
        shape: vec![out_ch, g.out_h, g.out_w],
        values,
        width,
    })
}

/// Integer max over pooling windows; quantizer parameters pass through.
pub fn quant_maxpool(x: &QuantTensor, window: usize, stride: usize) -> Result<QuantTensor> {
    let g = PoolGeometry::new(x.shape(), window, stride).map_err(Error::InputDomain)?;
    Ok(QuantTensor::from_clipped(
        vec![g.channels, g.out_h, g.out_w],
        g.apply(x.codes()),
        *x.params(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LinearKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        /// `[C, H, W]` of the layer input
        input_shape: Vec<usize>,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
    },
}

/// Integer parameters and step sizes of one dense or conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLinear {
    pub kind: LinearKind,
    /// `[out, in]` or `[out, in, kh, kw]`, signed.
    pub weights: QuantTensor,
    /// `[out]`, signed.
    pub bias: QuantTensor,
    pub input_step: f64,
    pub weight_step: f64,
    pub bias_step: f64,
    pub bias_rule: BiasRule,
    pub activation: Activation,
    /// Unsigned quantizer of the next linear layer's input; `None` on the last layer.
    pub output: Option<QuantParams>,
}

/// Result of a mixed-mode layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedOutput {
    /// `activation(input_step * weight_step * a_q)`
    pub real: Tensor<f64>,
    /// Requantized output, when the layer has a successor.
    pub codes: Option<QuantTensor>,
}

impl QuantizedLinear {
    pub fn word_length(&self) -> u32 {
        self.weights.params().word_length()
    }

    pub fn input_params(&self) -> QuantParams {
        QuantParams::unsigned(self.word_length(), self.input_step).expect("validated step")
    }

    pub fn fan_in(&self) -> usize {
        self.weights.len() / self.bias.len()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match &self.kind {
            LinearKind::Dense { out_features, .. } => vec![*out_features],
            LinearKind::Conv2d { input_shape, out_channels, kernel, stride, padding } => {
                let g = ConvGeometry::new(input_shape, input_shape[0], kernel.0, kernel.1, *stride, *padding)
                    .expect("validated geometry");
                vec![*out_channels, g.out_h, g.out_w]
            }
        }
    }

    fn input_shape(&self) -> Vec<usize> {
        match &self.kind {
            LinearKind::Dense { in_features, .. } => vec![*in_features],
            LinearKind::Conv2d { input_shape, .. } => input_shape.clone(),
        }
    }

    /// Integer accumulator; with an independent bias rule the bias is left out.
    pub fn accumulate(&self, x: &QuantTensor) -> Result<WideAccumulator> {
        let zero_bias;
        let bias = match self.bias_rule {
            BiasRule::Tied => &self.bias,
            BiasRule::Independent => {
                zero_bias = QuantTensor::from_clipped(
                    self.bias.shape().to_vec(),
                    vec![0; self.bias.len()],
                    *self.bias.params(),
                );
                &zero_bias
            }
        };
        match &self.kind {
            LinearKind::Dense { .. } => quant_dense_mac(&self.weights, x, bias),
            LinearKind::Conv2d { stride, padding, .. } => {
                quant_conv2d_mac(&self.weights, x, bias, *stride, *padding)
            }
        }
    }

    /// The real value a layer output would have before the activation.
    fn rescale(&self, acc: &WideAccumulator) -> Vec<f64> {
        let scale = self.input_step * self.weight_step;
        let mut real: Vec<f64> = acc.values.iter().map(|&a| scale * a as f64).collect();
        if self.bias_rule == BiasRule::Independent {
            let per_channel = real.len() / self.bias.len();
            for (c, chunk) in real.chunks_mut(per_channel).enumerate() {
                let b = self.bias_step * self.bias.codes()[c] as f64;
                chunk.iter_mut().for_each(|v| *v += b);
            }
        }
        real
    }

    /// Shift exponent `log2(input_step * weight_step / next_step)`, when all
    /// three steps are powers of two.
    pub fn shift(&self) -> Option<i32> {
        let next = self.output?.step();
        Some(
            power_of_two_exponent(self.input_step)? + power_of_two_exponent(self.weight_step)?
                - power_of_two_exponent(next)?,
        )
    }

    fn integer_only_ready(&self) -> std::result::Result<(), String> {
        if self.bias_rule != BiasRule::Tied {
            return Err("integer-only execution needs the tied bias step".into());
        }
        for (name, step) in [("input", self.input_step), ("weight", self.weight_step)] {
            if power_of_two_exponent(step).is_none() {
                return Err(format!("{name} step {step} is not a power of two"));
            }
        }
        if let Some(out) = self.output {
            if self.activation != Activation::Relu {
                return Err("integer-only hidden layers must use relu".into());
            }
            if power_of_two_exponent(out.step()).is_none() {
                return Err(format!("output step {} is not a power of two", out.step()));
            }
        }
        Ok(())
    }
}

pub(crate) fn apply_activation(activation: Activation, mut real: Vec<f64>) -> Vec<f64> {
    match activation {
        Activation::Identity => {}
        Activation::Relu => real.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Softmax => {
            let max = real.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            real.iter_mut().for_each(|v| *v = (*v - max).exp());
            let sum: f64 = real.iter().sum();
            real.iter_mut().for_each(|v| *v /= sum);
        }
    }
    real
}

/// Integer MAC, one float rescale per output, float activation, then
/// requantization to the next layer's unsigned quantizer.
pub fn mixed_layer_forward(layer: &QuantizedLinear, x_q: &QuantTensor) -> Result<MixedOutput> {
    let acc = layer.accumulate(x_q)?;
    let real = apply_activation(layer.activation, layer.rescale(&acc));
    let codes = match layer.output {
        Some(params) => {
            let codes = real
                .iter()
                .enumerate()
                .map(|(index, &v)| {
                    quantize_unsigned(v, &params).map_err(|e| Error::ElementDomain {
                        index,
                        reason: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(QuantTensor::from_clipped(acc.shape.clone(), codes, params))
        }
        None => None,
    };
    Ok(MixedOutput {
        real: Tensor::new(acc.shape, real).expect("accumulator shape"),
        codes,
    })
}

/// `clip(relu(a_q) * 2^s)` using only integer operations. Right shifts floor.
pub fn shift_layer_forward(layer: &QuantizedLinear, x_q: &QuantTensor) -> Result<QuantTensor> {
    layer.integer_only_ready().map_err(Error::Config)?;
    let params = layer
        .output
        .ok_or_else(|| Error::Config("shift path needs the next layer's input step".into()))?;
    if layer.activation != Activation::Relu {
        return Err(Error::Config("shift path requires a relu activation".into()));
    }
    let shift = layer.shift().expect("checked power-of-two steps");
    let max_code = (1i64 << params.word_length()) - 1;
    let acc = layer.accumulate(x_q)?;
    let codes = acc
        .values
        .iter()
        .map(|&a| {
            let r = a.max(0);
            let shifted = if shift >= 0 {
                if shift >= 63 || r > (max_code >> shift.min(62)) {
                    if r == 0 { 0 } else { max_code }
                } else {
                    r << shift
                }
            } else {
                r >> (-shift).min(63)
            };
            shifted.min(max_code) as i32
        })
        .collect();
    Ok(QuantTensor::from_clipped(acc.shape, codes, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum QuantizedLayer {
    Linear(QuantizedLinear),
    MaxPool { window: usize, stride: usize },
}

/// Quantized layers with calibrated steps; `mode` is the most restrictive
/// execution mode the network supports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedNetwork {
    input_shape: Vec<usize>,
    layers: Vec<QuantizedLayer>,
    mode: ExecMode,
}

/// Network output in either mode.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantOutput {
    /// Mixed mode: float output of the final activation.
    Real(Vec<f64>),
    /// Integer-only mode: final integer accumulator (relu applied if the last
    /// layer uses it).
    Integer(Vec<i64>),
}

impl QuantOutput {
    pub fn class(&self) -> usize {
        match self {
            QuantOutput::Real(v) => argmax(v),
            QuantOutput::Integer(v) => argmax(v),
        }
    }
}

/// Codes entering each layer plus the network output.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTrace {
    pub codes: Vec<QuantTensor>,
    pub output: QuantOutput,
}

impl QuantizedNetwork {
    pub fn new(input_shape: Vec<usize>, layers: Vec<QuantizedLayer>, mode: ExecMode) -> Result<Self> {
        let net = Self { input_shape, layers, mode };
        net.validate()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[QuantizedLayer] {
        &self.layers
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn linear_layers(&self) -> impl Iterator<Item = &QuantizedLinear> {
        self.layers.iter().filter_map(|l| match l {
            QuantizedLayer::Linear(q) => Some(q),
            QuantizedLayer::MaxPool { .. } => None,
        })
    }

    pub fn input_params(&self) -> QuantParams {
        self.linear_layers().next().expect("validated").input_params()
    }

    /// Checks every structural and step-size invariant.
    pub fn validate(&self) -> Result<()> {
        let Some(QuantizedLayer::Linear(_)) = self.layers.last() else {
            return Err(Error::Config("a quantized network must end in a dense or conv layer".into()));
        };
        let mut shape = self.input_shape.clone();
        let mut incoming: Option<QuantParams> = None;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                QuantizedLayer::MaxPool { window, stride } => {
                    let g = PoolGeometry::new(&shape, *window, *stride)
                        .map_err(|reason| Error::structural(i, reason))?;
                    shape = vec![g.channels, g.out_h, g.out_w];
                }
                QuantizedLayer::Linear(q) => {
                    validate_linear(i, q, &shape, i == last)?;
                    let input = q.input_params();
                    if let Some(prev) = incoming {
                        if prev != input {
                            return Err(Error::Config(format!(
                                "layer {i}: input quantizer {input:?} differs from the previous layer's output {prev:?}"
                            )));
                        }
                    }
                    if self.mode == ExecMode::IntegerOnly {
                        q.integer_only_ready()
                            .map_err(|reason| Error::Config(format!("layer {i}: {reason}")))?;
                    }
                    incoming = q.output;
                    shape = q.output_shape();
                }
            }
        }
        Ok(())
    }

    fn quantize_input(&self, x: &RealTensor) -> Result<QuantTensor> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::structural(
                0,
                format!("input shape {:?} does not match {:?}", x.shape(), self.input_shape),
            ));
        }
        crate::quantizer::quantize_tensor(x, &self.input_params())
    }

    pub fn run(&self, x: &RealTensor, mode: ExecMode) -> Result<QuantOutput> {
        Ok(self.trace(x, mode)?.output)
    }

    /// Runs the network and records the codes entering every layer.
    pub fn trace(&self, x: &RealTensor, mode: ExecMode) -> Result<QuantTrace> {
        if mode == ExecMode::IntegerOnly && self.mode != ExecMode::IntegerOnly {
            return Err(Error::Config(
                "integer-only execution requested for a network calibrated for mixed mode".into(),
            ));
        }
        let mut codes = vec![self.quantize_input(x)?];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let current = codes.last().unwrap();
            let next = match layer {
                QuantizedLayer::MaxPool { window, stride } => quant_maxpool(current, *window, *stride)?,
                QuantizedLayer::Linear(q) if i == last => {
                    let output = match mode {
                        ExecMode::Mixed => QuantOutput::Real(mixed_layer_forward(q, current)?.real.into_data()),
                        ExecMode::IntegerOnly => {
                            let acc = q.accumulate(current)?;
                            let relu = q.activation == Activation::Relu;
                            QuantOutput::Integer(
                                acc.values.into_iter().map(|v| if relu { v.max(0) } else { v }).collect(),
                            )
                        }
                    };
                    return Ok(QuantTrace { codes, output });
                }
                QuantizedLayer::Linear(q) => match mode {
                    ExecMode::Mixed => mixed_layer_forward(q, current)?
                        .codes
                        .expect("validated hidden layer has an output quantizer"),
                    ExecMode::IntegerOnly => shift_layer_forward(q, current)?,
                },
            };
            codes.push(next);
        }
        unreachable!("validated network ends in a linear layer")
    }

    pub fn predict(&self, x: &RealTensor, mode: ExecMode) -> Result<usize> {
        Ok(self.run(x, mode)?.class())
    }
}

fn validate_linear(i: usize, q: &QuantizedLinear, shape: &[usize], is_last: bool) -> Result<()> {
    let cfg = |reason: String| Error::Config(format!("layer {i}: {reason}"));
    let wp = q.weights.params();
    if wp.signedness() != Signedness::Signed || q.bias.params().signedness() != Signedness::Signed {
        return Err(cfg("weights and bias must be signed".into()));
    }
    if q.bias.params().word_length() != wp.word_length() {
        return Err(cfg("bias and weights must share the word length".into()));
    }
    if wp.step() != q.weight_step || q.bias.params().step() != q.bias_step {
        return Err(cfg("stored steps disagree with the code tensors".into()));
    }
    if !(q.input_step.is_finite() && q.input_step > 0.0) {
        return Err(cfg(format!("input step {} must be positive", q.input_step)));
    }
    if q.bias_rule == BiasRule::Tied && q.bias_step != q.input_step * q.weight_step {
        return Err(cfg("tied bias step must equal input_step * weight_step".into()));
    }
    match (&q.kind, q.weights.shape()) {
        (LinearKind::Dense { in_features, out_features }, &[m, n]) => {
            if m != *out_features || n != *in_features || shape.iter().product::<usize>() != n {
                return Err(Error::structural(i, format!("dense {m}x{n} cannot take input {shape:?}")));
            }
        }
        (LinearKind::Conv2d { input_shape, out_channels, kernel, stride, padding }, &[o, c, kh, kw]) => {
            if input_shape.as_slice() != shape || o != *out_channels || (kh, kw) != *kernel {
                return Err(Error::structural(i, format!("conv kernels {:?} cannot take input {shape:?}", q.weights.shape())));
            }
            ConvGeometry::new(shape, c, kh, kw, *stride, *padding).map_err(|r| Error::structural(i, r))?;
        }
        _ => return Err(Error::structural(i, format!("weight shape {:?} does not match layer kind", q.weights.shape()))),
    }
    if q.bias.len() != q.output_shape()[0] {
        return Err(Error::structural(i, "bias length differs from output channels"));
    }
    debug_assert_eq!(q.input_shape().iter().product::<usize>(), shape.iter().product::<usize>());
    match (is_last, &q.output) {
        (false, None) => Err(cfg("a layer with a successor needs the next layer's input step".into())),
        (true, Some(_)) => Err(cfg("the final layer must not requantize its output".into())),
        (false, Some(_)) if q.activation != Activation::Relu => {
            Err(cfg("hidden layers feed unsigned quantizers and must use relu".into()))
        }
        _ => Ok(()),
    }
}

pub fn run_quantized(net: &QuantizedNetwork, x: &RealTensor, mode: ExecMode) -> Result<QuantOutput> {
    net.run(x, mode)
}

impl QuantizedNetwork {
    /// Memory and MAC cost at each layer's own word length.
    pub fn complexity(&self) -> Complexity {
        let mut per_layer = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let QuantizedLayer::Linear(q) = layer {
                let outputs: usize = q.output_shape().iter().product();
                let params = (q.weights.len() + q.bias.len()) as u64;
                per_layer.push(LayerCost {
                    layer: i,
                    mem_bits: params * q.word_length() as u64,
                    macs: (q.fan_in() * outputs) as u64,
                });
            }
        }
        Complexity {
            mem_bits: per_layer.iter().map(|c| c.mem_bits).sum(),
            macs: per_layer.iter().map(|c| c.macs).sum(),
            per_layer,
        }
    }
}
