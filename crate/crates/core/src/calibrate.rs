//! Step-size selection.
//!
//! Three policies: max-abs scaling, and two grid searches that minimize the
//! mean layer output error `E[||activation(Δx Δw a_q) - activation(a)||^2]`
//! over calibration samples. The second search only admits powers of two,
//! which makes the network eligible for integer-only execution.
//!
//! Every layer is calibrated against the float network's own activations, so
//! layers are independent of each other; the input step chosen for layer
//! `l + 1` becomes the requantization step of layer `l`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, LinalgScalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Conv2dLayer, ConvGeometry, DenseLayer, LayerSpec, Network};
use crate::qengine::{
    apply_activation, Activation, BiasRule, ExecMode, LinearKind, QuantizedLayer, QuantizedLinear,
    QuantizedNetwork,
};
use crate::quantizer::{
    power_of_two_exponent, quantize_signed, quantize_tensor, quantize_unsigned, QuantParams,
    Signedness,
};
use crate::tensor::{RealTensor, Tensor};

pub const DEFAULT_CALIBRATION_SAMPLES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    MaxAbs,
    MinMse1,
    MinMse2,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::MaxAbs => "maxabs",
            PolicyKind::MinMse1 => "minmse1",
            PolicyKind::MinMse2 => "minmse2",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maxabs" => Ok(PolicyKind::MaxAbs),
            "minmse1" => Ok(PolicyKind::MinMse1),
            "minmse2" => Ok(PolicyKind::MinMse2),
            _ => Err(Error::Config(format!(
                "unknown policy `{s}` (expected maxabs, minmse1 or minmse2)"
            ))),
        }
    }
}

/// Candidate steps for one grid dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StepGrid {
    /// Multiples of the max-abs step of the same tensor.
    Relative { multipliers: Vec<f64> },
    /// `2^e` for every integer `e` in `[min_exp, max_exp]`.
    PowersOfTwo { min_exp: i32, max_exp: i32 },
    /// Fixed candidate lists, mostly for tests.
    Explicit { input_steps: Vec<f64>, weight_steps: Vec<f64> },
}

impl StepGrid {
    /// `{0.05, 0.10, ..., 1.50}`.
    pub fn default_relative() -> Self {
        StepGrid::Relative {
            multipliers: (1..=30).map(|i| i as f64 / 20.0).collect(),
        }
    }

    pub fn default_powers_of_two() -> Self {
        StepGrid::PowersOfTwo { min_exp: -12, max_exp: 4 }
    }

    fn candidates(&self, maxabs_input: f64, maxabs_weight: f64) -> (Vec<f64>, Vec<f64>) {
        match self {
            StepGrid::Relative { multipliers } => (
                multipliers.iter().map(|m| m * maxabs_input).collect(),
                multipliers.iter().map(|m| m * maxabs_weight).collect(),
            ),
            StepGrid::PowersOfTwo { min_exp, max_exp } => {
                let steps: Vec<f64> = (*min_exp..=*max_exp).map(|e| 2f64.powi(e)).collect();
                (steps.clone(), steps)
            }
            StepGrid::Explicit { input_steps, weight_steps } => (input_steps.clone(), weight_steps.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPolicy {
    pub kind: PolicyKind,
    pub grid: Option<StepGrid>,
}

impl StepPolicy {
    pub fn max_abs() -> Self {
        Self { kind: PolicyKind::MaxAbs, grid: None }
    }

    pub fn min_mse_1() -> Self {
        Self { kind: PolicyKind::MinMse1, grid: Some(StepGrid::default_relative()) }
    }

    pub fn min_mse_2() -> Self {
        Self { kind: PolicyKind::MinMse2, grid: Some(StepGrid::default_powers_of_two()) }
    }

    pub fn from_kind(kind: PolicyKind) -> Self {
        match kind {
            PolicyKind::MaxAbs => Self::max_abs(),
            PolicyKind::MinMse1 => Self::min_mse_1(),
            PolicyKind::MinMse2 => Self::min_mse_2(),
        }
    }

    pub fn with_grid(kind: PolicyKind, grid: StepGrid) -> Result<Self> {
        let policy = Self { kind, grid: Some(grid) };
        policy.validate()?;
        Ok(policy)
    }

    fn validate(&self) -> Result<()> {
        let Some(grid) = &self.grid else {
            return match self.kind {
                PolicyKind::MaxAbs => Ok(()),
                _ => Err(Error::Config(format!("{} needs a search grid", self.kind))),
            };
        };
        let (xs, ws) = grid.candidates(1.0, 1.0);
        if xs.is_empty() || ws.is_empty() {
            return Err(Error::Config("empty step grid".into()));
        }
        if xs.iter().chain(&ws).any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("grid steps must be positive".into()));
        }
        if self.kind == PolicyKind::MinMse2 {
            let (xs, ws) = grid.candidates(1.0 / 3.0, 1.0 / 3.0);
            if xs.iter().chain(&ws).any(|&s| power_of_two_exponent(s).is_none()) {
                return Err(Error::Config("minmse2 grids may only contain powers of two".into()));
            }
        }
        Ok(())
    }
}

/// `max|t| / (2^K - 1)` for signed data, `max(t) / 2^K` for unsigned data.
pub fn step_maxabs(values: &[f32], word_length: u32, signedness: Signedness) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InputDomain("max-abs step of an empty tensor".into()));
    }
    let max = match signedness {
        Signedness::Signed => values.iter().fold(0f64, |m, &v| m.max((v as f64).abs())),
        Signedness::Unsigned => {
            if let Some(v) = values.iter().find(|v| **v < 0.0) {
                return Err(Error::InputDomain(format!("unsigned data contains {v}")));
            }
            values.iter().fold(0f64, |m, &v| m.max(v as f64))
        }
    };
    if !max.is_finite() {
        return Err(Error::InputDomain("tensor contains non-finite values".into()));
    }
    if max == 0.0 {
        return Err(Error::DegenerateInput("all-zero tensor has no max-abs step".into()));
    }
    Ok(match signedness {
        Signedness::Signed => max / ((1u64 << word_length) - 1) as f64,
        Signedness::Unsigned => max / (1u64 << word_length) as f64,
    })
}

/// Dense or conv parameters of one calibrated layer.
#[derive(Debug, Clone, Copy)]
pub enum LinearRef<'a> {
    Dense(&'a DenseLayer),
    Conv(&'a Conv2dLayer, ConvGeometry),
}

impl LinearRef<'_> {
    fn weights(&self) -> &[f32] {
        match self {
            LinearRef::Dense(d) => d.weights.data(),
            LinearRef::Conv(c, _) => c.kernels.data(),
        }
    }

    fn bias(&self) -> &[f32] {
        match self {
            LinearRef::Dense(d) => &d.bias,
            LinearRef::Conv(c, _) => &c.bias,
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            LinearRef::Dense(d) => d.in_features(),
            LinearRef::Conv(_, g) => g.patch_len(),
        }
    }

    fn outputs(&self) -> usize {
        self.bias().len()
    }

    /// Output positions per channel (1 for dense layers).
    fn positions(&self) -> usize {
        match self {
            LinearRef::Dense(_) => 1,
            LinearRef::Conv(_, g) => g.positions(),
        }
    }

    fn input_len(&self) -> usize {
        match self {
            LinearRef::Dense(d) => d.in_features(),
            LinearRef::Conv(_, g) => g.in_channels * g.in_h * g.in_w,
        }
    }

    /// Rows of the `positions x fan_in` patch matrix for one sample.
    fn lower<T: Copy + Default>(&self, input: &[T], out: &mut Vec<T>) {
        match self {
            LinearRef::Dense(_) => out.extend_from_slice(input),
            LinearRef::Conv(_, g) => out.extend(g.im2col(input)),
        }
    }

    fn kind(&self) -> LinearKind {
        match self {
            LinearRef::Dense(d) => LinearKind::Dense {
                in_features: d.in_features(),
                out_features: d.out_features(),
            },
            LinearRef::Conv(c, g) => LinearKind::Conv2d {
                input_shape: vec![g.in_channels, g.in_h, g.in_w],
                out_channels: c.out_channels(),
                kernel: c.kernel_hw(),
                stride: c.stride,
                padding: c.padding,
            },
        }
    }

    fn weight_shape(&self) -> Vec<usize> {
        match self {
            LinearRef::Dense(d) => d.weights.shape().to_vec(),
            LinearRef::Conv(c, _) => c.kernels.shape().to_vec(),
        }
    }
}

/// Float activations recorded for one layer over `samples` calibration inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerData {
    /// `samples x input_len`, the layer input `x_{l-1}`
    pub inputs: Vec<f32>,
    /// `samples x output_len`, the float layer output after the activation
    pub reference: Vec<f32>,
    pub samples: usize,
}

/// Bias handling for one grid evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BiasChoice {
    Tied,
    Independent(f64),
}

/// f32 or f64 matrix element holding integer codes exactly.
trait ExactScalar: LinalgScalar + Into<f64> {
    fn from_code(code: i32) -> Self;
}

impl ExactScalar for f32 {
    fn from_code(code: i32) -> Self {
        code as f32
    }
}

impl ExactScalar for f64 {
    fn from_code(code: i32) -> Self {
        code as f64
    }
}

/// Rows per GEMM block; bounds memory for conv layers.
const ROWS_PER_BLOCK: usize = 4096;

/// Mean output error for every `(input_step, weight_step)` pair, row-major in
/// the input step. The integer products run as float GEMMs, which are exact
/// because every partial sum is an integer below the mantissa limit.
pub fn evaluate_grid(
    layer: LinearRef<'_>,
    activation: Activation,
    data: &LayerData,
    word_length: u32,
    input_steps: &[f64],
    weight_steps: &[f64],
    bias: BiasChoice,
) -> Result<Vec<f64>> {
    if data.samples == 0 {
        return Err(Error::Config("empty calibration set".into()));
    }
    if input_steps.is_empty() || weight_steps.is_empty() {
        return Err(Error::Config("empty step grid".into()));
    }
    let max_w = ((1i64 << (word_length - 1)) - 1) as f64;
    let max_x = ((1i64 << word_length) - 1) as f64;
    let bound = layer.fan_in() as f64 * max_w * max_x + max_w;
    if bound < (1u64 << 24) as f64 {
        evaluate_grid_exact::<f32>(layer, activation, data, word_length, input_steps, weight_steps, bias)
    } else if bound < (1u64 << 53) as f64 {
        evaluate_grid_exact::<f64>(layer, activation, data, word_length, input_steps, weight_steps, bias)
    } else {
        Err(Error::Overflow(format!(
            "word length {word_length} with fan-in {} exceeds exact float accumulation",
            layer.fan_in()
        )))
    }
}

fn evaluate_grid_exact<G: ExactScalar>(
    layer: LinearRef<'_>,
    activation: Activation,
    data: &LayerData,
    word_length: u32,
    input_steps: &[f64],
    weight_steps: &[f64],
    bias: BiasChoice,
) -> Result<Vec<f64>> {
    let fan_in = layer.fan_in();
    let outputs = layer.outputs();
    let positions = layer.positions();
    let input_len = layer.input_len();
    let output_len = outputs * positions;
    if data.inputs.len() != data.samples * input_len || data.reference.len() != data.samples * output_len {
        return Err(Error::InputDomain(format!(
            "calibration data sized {}/{} does not fit {} samples of {input_len} -> {output_len}",
            data.inputs.len(),
            data.reference.len(),
            data.samples
        )));
    }

    // transposed weight codes [fan_in, outputs] per weight candidate
    let weight_codes = weight_steps
        .iter()
        .map(|&step| {
            let params = QuantParams::signed(word_length, step)?;
            let mut t = Array2::<G>::zeros((fan_in, outputs));
            for (o, row) in layer.weights().chunks_exact(fan_in).enumerate() {
                for (f, &w) in row.iter().enumerate() {
                    t[[f, o]] = G::from_code(quantize_signed(w as f64, &params)?);
                }
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let independent_bias = match bias {
        BiasChoice::Tied => None,
        BiasChoice::Independent(step) => {
            let params = QuantParams::signed(word_length, step)?;
            Some(
                layer
                    .bias()
                    .iter()
                    .map(|&b| quantize_signed(b as f64, &params))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };

    let samples_per_block = (ROWS_PER_BLOCK / positions).max(1);
    let mut totals = vec![0f64; input_steps.len() * weight_steps.len()];
    let mut rows: Vec<f32> = Vec::new();
    let mut prediction = vec![0f64; output_len];
    for first in (0..data.samples).step_by(samples_per_block) {
        let count = samples_per_block.min(data.samples - first);
        rows.clear();
        for s in first..first + count {
            layer.lower(&data.inputs[s * input_len..][..input_len], &mut rows);
        }
        for (ix, &input_step) in input_steps.iter().enumerate() {
            let params = QuantParams::unsigned(word_length, input_step)?;
            let codes = rows
                .iter()
                .map(|&v| quantize_unsigned(v as f64, &params).map(G::from_code))
                .collect::<Result<Vec<G>>>()?;
            let codes = ArrayView2::from_shape((count * positions, fan_in), &codes).expect("row count");
            for (iw, &weight_step) in weight_steps.iter().enumerate() {
                let acc = codes.dot(&weight_codes[iw]);
                let scale = input_step * weight_step;
                let bias_terms: Vec<(f64, f64)> = match &independent_bias {
                    // (integer part joining the accumulator, real part added after rescale)
                    None => {
                        let tied = QuantParams::signed(word_length, scale)?;
                        layer
                            .bias()
                            .iter()
                            .map(|&b| Ok((quantize_signed(b as f64, &tied)? as f64, 0.0)))
                            .collect::<Result<_>>()?
                    }
                    Some(codes) => {
                        let BiasChoice::Independent(step) = bias else { unreachable!() };
                        codes.iter().map(|&c| (0.0, step * c as f64)).collect()
                    }
                };
                let cell = &mut totals[ix * weight_steps.len() + iw];
                for s in 0..count {
                    for c in 0..outputs {
                        let (int_bias, real_bias) = bias_terms[c];
                        for p in 0..positions {
                            let a: f64 = acc[[s * positions + p, c]].into() + int_bias;
                            prediction[c * positions + p] = scale * a + real_bias;
                        }
                    }
                    let out = apply_activation(activation, std::mem::take(&mut prediction));
                    let reference = &data.reference[(first + s) * output_len..][..output_len];
                    let err: f64 = out
                        .iter()
                        .zip(reference)
                        .map(|(&y, &r)| {
                            let d = y - r as f64;
                            d * d
                        })
                        .sum();
                    *cell += err;
                    prediction = out;
                }
            }
        }
    }
    let n = data.samples as f64;
    Ok(totals.into_iter().map(|t| t / n).collect())
}

/// Index of the best candidate: lowest mse, ties to the larger input step,
/// then the larger weight step.
pub fn select_minimum(mse: &[f64], input_steps: &[f64], weight_steps: &[f64]) -> usize {
    let nw = weight_steps.len();
    let mut best = 0;
    for i in 1..mse.len() {
        let (bx, bw) = (input_steps[best / nw], weight_steps[best % nw]);
        let (x, w) = (input_steps[i / nw], weight_steps[i % nw]);
        let better = mse[i] < mse[best]
            || (mse[i] == mse[best] && (x > bx || (x == bx && w > bw)));
        if better {
            best = i;
        }
    }
    best
}

/// Steps chosen for one layer and the mean output error they give.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    /// Index of the dense/conv layer in the float network.
    pub layer: usize,
    pub kind: String,
    pub word_length: u32,
    pub input_step: f64,
    pub weight_step: f64,
    pub bias_step: f64,
    pub bias_rule: BiasRule,
    pub mse: f64,
    pub candidates: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

struct MaxAbsSteps {
    input: f64,
    weight: f64,
    bias: f64,
    warnings: Vec<String>,
}

fn maxabs_or_unit(values: &[f32], word_length: u32, signedness: Signedness, what: &str, warnings: &mut Vec<String>) -> Result<f64> {
    match step_maxabs(values, word_length, signedness) {
        Ok(step) => Ok(step),
        Err(Error::DegenerateInput(_)) => {
            warnings.push(format!("{what} is all zero; step set to 1"));
            Ok(1.0)
        }
        Err(e) => Err(e),
    }
}

fn maxabs_steps(layer: LinearRef<'_>, data: &LayerData, word_length: u32) -> Result<MaxAbsSteps> {
    let mut warnings = Vec::new();
    let input = maxabs_or_unit(&data.inputs, word_length, Signedness::Unsigned, "layer input", &mut warnings)?;
    let weight = maxabs_or_unit(layer.weights(), word_length, Signedness::Signed, "weight tensor", &mut warnings)?;
    let bias = maxabs_or_unit(layer.bias(), word_length, Signedness::Signed, "bias", &mut warnings)?;
    Ok(MaxAbsSteps { input, weight, bias, warnings })
}

/// Chooses the steps of one layer under `policy`.
pub fn calibrate_layer(
    layer: LinearRef<'_>,
    activation: Activation,
    data: &LayerData,
    word_length: u32,
    policy: &StepPolicy,
) -> Result<LayerCalibration> {
    policy.validate()?;
    if data.samples == 0 {
        return Err(Error::Config("empty calibration set".into()));
    }
    let base = maxabs_steps(layer, data, word_length)?;
    let kind = match layer {
        LinearRef::Dense(_) => "dense",
        LinearRef::Conv(..) => "conv2d",
    };
    let calibration = match &policy.grid {
        None => {
            let bias = BiasChoice::Independent(base.bias);
            let mse = evaluate_grid(layer, activation, data, word_length, &[base.input], &[base.weight], bias)?[0];
            LayerCalibration {
                layer: 0,
                kind: kind.into(),
                word_length,
                input_step: base.input,
                weight_step: base.weight,
                bias_step: base.bias,
                bias_rule: BiasRule::Independent,
                mse,
                candidates: 1,
                warnings: base.warnings,
            }
        }
        Some(grid) => {
            let (xs, ws) = grid.candidates(base.input, base.weight);
            let mse = evaluate_grid(layer, activation, data, word_length, &xs, &ws, BiasChoice::Tied)?;
            let best = select_minimum(&mse, &xs, &ws);
            let (input_step, weight_step) = (xs[best / ws.len()], ws[best % ws.len()]);
            LayerCalibration {
                layer: 0,
                kind: kind.into(),
                word_length,
                input_step,
                weight_step,
                bias_step: input_step * weight_step,
                bias_rule: BiasRule::Tied,
                mse: mse[best],
                candidates: mse.len(),
                warnings: base.warnings,
            }
        }
    };
    Ok(calibration)
}

/// Grid-search calibration of a single layer; `policy` must carry a grid.
pub fn calibrate_layer_minmse(
    layer: LinearRef<'_>,
    activation: Activation,
    data: &LayerData,
    word_length: u32,
    policy: &StepPolicy,
) -> Result<LayerCalibration> {
    if policy.grid.is_none() {
        return Err(Error::Config("grid search needs a non-empty grid".into()));
    }
    calibrate_layer(layer, activation, data, word_length, policy)
}

/// Mean output error of stored steps, recomputed through the evaluator.
pub fn recompute_mse(layer: LinearRef<'_>, activation: Activation, data: &LayerData, calibration: &LayerCalibration) -> Result<f64> {
    let bias = match calibration.bias_rule {
        BiasRule::Tied => BiasChoice::Tied,
        BiasRule::Independent => BiasChoice::Independent(calibration.bias_step),
    };
    Ok(evaluate_grid(
        layer,
        activation,
        data,
        calibration.word_length,
        &[calibration.input_step],
        &[calibration.weight_step],
        bias,
    )?[0])
}

/// One step of the quantized pipeline derived from a float network.
#[derive(Debug, Clone)]
pub enum Block<'a> {
    Linear {
        /// index of the dense/conv layer in the float network
        layer: usize,
        linear: LinearRef<'a>,
        activation: Activation,
        /// index of the float layer whose output is the block output
        output_layer: usize,
    },
    Pool { window: usize, stride: usize },
}

/// Groups each dense/conv layer with the activation that follows it.
pub fn lower_network(net: &Network) -> Result<Vec<Block<'_>>> {
    let shapes = net.shapes()?;
    let layers = net.layers();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < layers.len() {
        let linear = match &layers[i] {
            LayerSpec::Dense(d) => LinearRef::Dense(d),
            LayerSpec::Conv2d(c) => {
                LinearRef::Conv(c, c.geometry(&shapes[i]).map_err(|r| Error::structural(i, r))?)
            }
            LayerSpec::MaxPool { window, stride } => {
                blocks.push(Block::Pool { window: *window, stride: *stride });
                i += 1;
                continue;
            }
            other => {
                return Err(Error::structural(
                    i,
                    format!("{} must directly follow a dense or conv layer", other.kind_name()),
                ))
            }
        };
        let (activation, output_layer) = match layers.get(i + 1) {
            Some(LayerSpec::Relu) => (Activation::Relu, i + 1),
            Some(LayerSpec::Softmax) => (Activation::Softmax, i + 1),
            _ => (Activation::Identity, i),
        };
        blocks.push(Block::Linear { layer: i, linear, activation, output_layer });
        i = output_layer + 1;
    }
    match blocks.last() {
        Some(Block::Linear { .. }) => {}
        _ => return Err(Error::Config("network must end in a dense or conv layer".into())),
    }
    let linear_count = blocks.iter().filter(|b| matches!(b, Block::Linear { .. })).count();
    let mut seen = 0;
    for b in &blocks {
        if let Block::Linear { layer, activation, .. } = b {
            seen += 1;
            if seen < linear_count && *activation != Activation::Relu {
                return Err(Error::Config(format!(
                    "layer {layer}: hidden layers must use relu so their outputs quantize as unsigned"
                )));
            }
        }
    }
    Ok(blocks)
}

/// Records per-block calibration data by running the float network.
pub fn record_layer_data(net: &Network, blocks: &[Block<'_>], samples: &[RealTensor]) -> Result<Vec<Option<LayerData>>> {
    let mut data: Vec<Option<LayerData>> = blocks
        .iter()
        .map(|b| match b {
            Block::Linear { .. } => Some(LayerData { inputs: Vec::new(), reference: Vec::new(), samples: samples.len() }),
            Block::Pool { .. } => None,
        })
        .collect();
    for x in samples {
        let traces = net.layer_activations(x)?;
        for (block, slot) in blocks.iter().zip(data.iter_mut()) {
            if let (Block::Linear { layer, output_layer, .. }, Some(d)) = (block, slot) {
                d.inputs.extend_from_slice(traces[*layer].input.data());
                d.reference.extend_from_slice(traces[*output_layer].output.data());
            }
        }
    }
    Ok(data)
}

/// Per-network calibration summary, one record per dense/conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub policy: PolicyKind,
    pub samples: usize,
    pub mode: ExecMode,
    pub layers: Vec<LayerCalibration>,
}

impl CalibrationReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report is plain data")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Malformed(format!("calibration report: {e}")))
    }
}

pub fn calibrate_network(
    net: &Network,
    samples: &[RealTensor],
    word_length: u32,
    policy: &StepPolicy,
) -> Result<(QuantizedNetwork, CalibrationReport)> {
    let blocks = lower_network(net)?;
    let count = blocks.iter().filter(|b| matches!(b, Block::Linear { .. })).count();
    calibrate_network_with_word_lengths(net, samples, &vec![word_length; count], policy)
}

/// Like [`calibrate_network`] with one word length per dense/conv layer.
pub fn calibrate_network_with_word_lengths(
    net: &Network,
    samples: &[RealTensor],
    word_lengths: &[u32],
    policy: &StepPolicy,
) -> Result<(QuantizedNetwork, CalibrationReport)> {
    policy.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("empty calibration set".into()));
    }
    let blocks = lower_network(net)?;
    let linear_count = blocks.iter().filter(|b| matches!(b, Block::Linear { .. })).count();
    if word_lengths.len() != linear_count {
        return Err(Error::Config(format!(
            "{} word lengths given for {linear_count} dense/conv layers",
            word_lengths.len()
        )));
    }
    for &k in word_lengths {
        QuantParams::signed(k, 1.0)?;
    }
    let data = record_layer_data(net, &blocks, samples)?;

    let mut calibrations = Vec::with_capacity(linear_count);
    let mut k_iter = word_lengths.iter();
    for (block, d) in blocks.iter().zip(&data) {
        if let (Block::Linear { layer, linear, activation, .. }, Some(d)) = (block, d) {
            let k = *k_iter.next().unwrap();
            let mut c = calibrate_layer(*linear, *activation, d, k, policy)?;
            c.layer = *layer;
            calibrations.push(c);
        }
    }

    let mode = if policy.kind == PolicyKind::MinMse2 { ExecMode::IntegerOnly } else { ExecMode::Mixed };
    let mut layers = Vec::with_capacity(blocks.len());
    let mut next_linear = 0;
    for block in &blocks {
        match block {
            Block::Pool { window, stride } => layers.push(QuantizedLayer::MaxPool { window: *window, stride: *stride }),
            Block::Linear { linear, activation, .. } => {
                let c = &calibrations[next_linear];
                next_linear += 1;
                let output = calibrations
                    .get(next_linear)
                    .map(|n| QuantParams::unsigned(n.word_length, n.input_step))
                    .transpose()?;
                let weights = Tensor::new(linear.weight_shape(), linear.weights().to_vec())?;
                let bias = Tensor::from_vec(linear.bias().to_vec());
                layers.push(QuantizedLayer::Linear(QuantizedLinear {
                    kind: linear.kind(),
                    weights: quantize_tensor(&weights, &QuantParams::signed(c.word_length, c.weight_step)?)?,
                    bias: quantize_tensor(&bias, &QuantParams::signed(c.word_length, c.bias_step)?)?,
                    input_step: c.input_step,
                    weight_step: c.weight_step,
                    bias_step: c.bias_step,
                    bias_rule: c.bias_rule,
                    activation: *activation,
                    output,
                }));
            }
        }
    }
    let qnet = QuantizedNetwork::new(net.input_shape().to_vec(), layers, mode)?;
    let report = CalibrationReport {
        policy: policy.kind,
        samples: samples.len(),
        mode,
        layers: calibrations,
    };
    Ok((qnet, report))
}

/// First `count` indices of a seeded permutation of `0..total`.
pub fn select_calibration_indices(total: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..total).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    indices.truncate(count.min(total));
    indices
}
