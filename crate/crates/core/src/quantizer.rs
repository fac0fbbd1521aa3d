//! Uniform scalar and tensor quantization.
//!
//! Signed values map onto the symmetric code set `{-(2^(K-1)-1), ..., 2^(K-1)-1}`
//! with round-half-up, unsigned values onto `{0, ..., 2^K-1}` with floor. Both
//! saturate at the extreme code. All arithmetic on `x / step` is done in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RealTensor, Tensor};

pub const MIN_WORD_LENGTH: u32 = 2;
pub const MAX_WORD_LENGTH: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signedness {
    Signed,
    Unsigned,
}

/// Word length, signedness and step size of a uniform quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct QuantParams {
    word_length: u32,
    signedness: Signedness,
    step: f64,
}

#[derive(Deserialize)]
struct RawParams {
    word_length: u32,
    signedness: Signedness,
    step: f64,
}

impl TryFrom<RawParams> for QuantParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        QuantParams::new(raw.word_length, raw.signedness, raw.step)
    }
}

impl QuantParams {
    pub fn new(word_length: u32, signedness: Signedness, step: f64) -> Result<Self> {
        if !(MIN_WORD_LENGTH..=MAX_WORD_LENGTH).contains(&word_length) {
            return Err(Error::Config(format!(
                "word length {word_length} outside [{MIN_WORD_LENGTH}, {MAX_WORD_LENGTH}]"
            )));
        }
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::Config(format!("step size must be positive, got {step}")));
        }
        Ok(Self {
            word_length,
            signedness,
            step,
        })
    }

    pub fn signed(word_length: u32, step: f64) -> Result<Self> {
        Self::new(word_length, Signedness::Signed, step)
    }

    pub fn unsigned(word_length: u32, step: f64) -> Result<Self> {
        Self::new(word_length, Signedness::Unsigned, step)
    }

    pub fn word_length(&self) -> u32 {
        self.word_length
    }

    pub fn signedness(&self) -> Signedness {
        self.signedness
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn code_min(&self) -> i32 {
        match self.signedness {
            Signedness::Signed => -self.code_max(),
            Signedness::Unsigned => 0,
        }
    }

    pub fn code_max(&self) -> i32 {
        match self.signedness {
            Signedness::Signed => (1 << (self.word_length - 1)) - 1,
            Signedness::Unsigned => (1 << self.word_length) - 1,
        }
    }

    /// Width `c` of the representable value range (`[-c/2, c/2]` or `[0, c]`).
    pub fn range_width(&self) -> f64 {
        match self.signedness {
            Signedness::Signed => self.step * ((1u64 << self.word_length) - 1) as f64,
            Signedness::Unsigned => self.step * (1u64 << self.word_length) as f64,
        }
    }

    pub fn contains(&self, code: i32) -> bool {
        (self.code_min()..=self.code_max()).contains(&code)
    }

    pub fn quantize(&self, x: f64) -> Result<i32> {
        match self.signedness {
            Signedness::Signed => quantize_signed(x, self),
            Signedness::Unsigned => quantize_unsigned(x, self),
        }
    }
}

/// Exponent `e` with `step == 2^e`, if the step is an exact power of two.
pub fn power_of_two_exponent(step: f64) -> Option<i32> {
    if !(step.is_finite() && step > 0.0) {
        return None;
    }
    let bits = step.to_bits();
    let mantissa = bits & ((1u64 << 52) - 1);
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // subnormal: exactly one mantissa bit set
        if mantissa.count_ones() == 1 {
            return Some(mantissa.trailing_zeros() as i32 - 1074);
        }
        return None;
    }
    (mantissa == 0).then_some(biased - 1023)
}

/// Signed saturation to `±(2^(K-1)-1)`.
pub fn clip_signed(v: f64, word_length: u32) -> i32 {
    let bound = ((1i64 << (word_length - 1)) - 1) as f64;
    v.clamp(-bound, bound) as i32
}

/// Unsigned saturation to `2^K-1`.
pub fn clip_unsigned(v: f64, word_length: u32) -> i32 {
    let bound = ((1i64 << word_length) - 1) as f64;
    v.clamp(0.0, bound) as i32
}

/// `clip_K(floor(x/step + 1/2))` with the symmetric signed code range.
pub fn quantize_signed(x: f64, params: &QuantParams) -> Result<i32> {
    if params.signedness != Signedness::Signed {
        return Err(Error::Config("quantize_signed needs signed parameters".into()));
    }
    if !x.is_finite() {
        return Err(Error::InputDomain(format!("cannot quantize non-finite value {x}")));
    }
    let t = x / params.step;
    let lower = t.floor();
    // floor(t + 1/2) evaluated without the rounding of the addition
    let rounded = if t - lower >= 0.5 { lower + 1.0 } else { lower };
    Ok(clip_signed(rounded, params.word_length))
}

/// `clip_K(floor(x/step))` for non-negative inputs.
pub fn quantize_unsigned(x: f64, params: &QuantParams) -> Result<i32> {
    if params.signedness != Signedness::Unsigned {
        return Err(Error::Config("quantize_unsigned needs unsigned parameters".into()));
    }
    if !x.is_finite() {
        return Err(Error::InputDomain(format!("cannot quantize non-finite value {x}")));
    }
    if x < 0.0 {
        return Err(Error::InputDomain(format!(
            "unsigned quantizer got negative value {x}"
        )));
    }
    Ok(clip_unsigned((x / params.step).floor(), params.word_length))
}

/// Integer codes together with the quantizer that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawQuantTensor")]
pub struct QuantTensor {
    shape: Vec<usize>,
    codes: Vec<i32>,
    params: QuantParams,
}

#[derive(Deserialize)]
struct RawQuantTensor {
    shape: Vec<usize>,
    codes: Vec<i32>,
    params: QuantParams,
}

impl TryFrom<RawQuantTensor> for QuantTensor {
    type Error = Error;

    fn try_from(raw: RawQuantTensor) -> Result<Self> {
        QuantTensor::new(raw.shape, raw.codes, raw.params)
    }
}

impl QuantTensor {
    pub fn new(shape: Vec<usize>, codes: Vec<i32>, params: QuantParams) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != codes.len() {
            return Err(Error::InputDomain(format!(
                "shape {shape:?} needs {expected} codes, got {}",
                codes.len()
            )));
        }
        if let Some(index) = codes.iter().position(|&c| !params.contains(c)) {
            return Err(Error::ElementDomain {
                index,
                reason: format!(
                    "code {} outside [{}, {}]",
                    codes[index],
                    params.code_min(),
                    params.code_max()
                ),
            });
        }
        Ok(Self {
            shape,
            codes,
            params,
        })
    }

    /// Skips the range check; callers must have clipped already.
    pub(crate) fn from_clipped(shape: Vec<usize>, codes: Vec<i32>, params: QuantParams) -> Self {
        debug_assert!(codes.iter().all(|&c| params.contains(c)));
        debug_assert_eq!(shape.iter().product::<usize>(), codes.len());
        Self {
            shape,
            codes,
            params,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.codes, self.params)
    }

    pub fn dequantize_f64(&self) -> Tensor<f64> {
        let step = self.params.step;
        Tensor::new(
            self.shape.clone(),
            self.codes.iter().map(|&q| step * q as f64).collect(),
        )
        .expect("shape already validated")
    }
}

/// Elementwise `step * code`.
pub fn dequantize(q: &QuantTensor) -> RealTensor {
    q.dequantize_f64().map(|&v| v as f32)
}

pub fn quantize_tensor(x: &RealTensor, params: &QuantParams) -> Result<QuantTensor> {
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            params.quantize(v as f64).map_err(|e| Error::ElementDomain {
                index,
                reason: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantTensor::from_clipped(x.shape().to_vec(), codes, *params))
}

/// Mean over elements of `(x - step * Q(x))^2`.
pub fn mean_sq_quant_error(x: &RealTensor, params: &QuantParams) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::InputDomain("mean square error of an empty tensor".into()));
    }
    let q = quantize_tensor(x, params)?;
    let total: f64 = x
        .data()
        .iter()
        .zip(q.codes())
        .map(|(&v, &c)| {
            let e = v as f64 - params.step * c as f64;
            e * e
        })
        .sum();
    Ok(total / x.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(k: u32, step: f64) -> QuantParams {
        QuantParams::signed(k, step).unwrap()
    }

    fn u(k: u32, step: f64) -> QuantParams {
        QuantParams::unsigned(k, step).unwrap()
    }

    #[test]
    fn signed_examples() {
        assert_eq!(quantize_signed(0.0, &s(2, 0.37)).unwrap(), 0);
        assert_eq!(quantize_signed(0.6, &s(2, 0.5)).unwrap(), 1);
        assert_eq!(quantize_signed(10.0, &s(2, 0.5)).unwrap(), 1);
        assert_eq!(quantize_signed(-10.0, &s(3, 0.5)).unwrap(), -3);
    }

    #[test]
    fn signed_rounds_half_up() {
        // exact midpoints: 0.25/0.5 = 0.5 and -0.25/0.5 = -0.5
        assert_eq!(quantize_signed(0.25, &s(4, 0.5)).unwrap(), 1);
        assert_eq!(quantize_signed(-0.25, &s(4, 0.5)).unwrap(), 0);
        assert_eq!(quantize_signed(-0.75, &s(4, 0.5)).unwrap(), -1);
    }

    #[test]
    fn unsigned_examples() {
        assert_eq!(quantize_unsigned(0.0, &u(2, 0.25)).unwrap(), 0);
        assert_eq!(quantize_unsigned(0.6, &u(2, 0.25)).unwrap(), 2);
        assert_eq!(quantize_unsigned(5.0, &u(2, 0.25)).unwrap(), 3);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(
            quantize_signed(f64::NAN, &s(4, 1.0)),
            Err(Error::InputDomain(_))
        ));
        assert!(matches!(
            quantize_unsigned(-0.1, &u(4, 1.0)),
            Err(Error::InputDomain(_))
        ));
        assert!(matches!(
            quantize_unsigned(f64::INFINITY, &u(4, 1.0)),
            Err(Error::InputDomain(_))
        ));
        assert!(quantize_signed(1.0, &u(4, 1.0)).is_err());
        assert!(QuantParams::signed(1, 1.0).is_err());
        assert!(QuantParams::signed(17, 1.0).is_err());
        assert!(QuantParams::signed(4, 0.0).is_err());
    }

    #[test]
    fn code_ranges() {
        assert_eq!((s(2, 1.0).code_min(), s(2, 1.0).code_max()), (-1, 1));
        assert_eq!((s(8, 1.0).code_min(), s(8, 1.0).code_max()), (-127, 127));
        assert_eq!((u(2, 1.0).code_min(), u(2, 1.0).code_max()), (0, 3));
        assert_eq!(s(3, 0.1).range_width(), 0.1 * 7.0);
        assert_eq!(u(2, 0.25).range_width(), 1.0);
    }

    #[test]
    fn dequantize_examples() {
        let p = s(4, 0.5);
        let zeros = QuantTensor::new(vec![3], vec![0, 0, 0], p).unwrap();
        assert_eq!(dequantize(&zeros).data(), &[0.0, 0.0, 0.0]);
        let pm = QuantTensor::new(vec![2], vec![1, -1], p).unwrap();
        assert_eq!(dequantize(&pm).data(), &[0.5, -0.5]);
        let three = QuantTensor::new(vec![1], vec![3], u(2, 0.25)).unwrap();
        assert_eq!(dequantize(&three).data(), &[0.75]);
    }

    #[test]
    fn quant_tensor_rejects_out_of_range_codes() {
        let err = QuantTensor::new(vec![2], vec![0, 2], s(2, 1.0)).unwrap_err();
        assert!(matches!(err, Error::ElementDomain { index: 1, .. }));
    }

    #[test]
    fn tensor_examples() {
        let q = quantize_tensor(&Tensor::from_vec(vec![0.0, 0.0]), &s(2, 1.0)).unwrap();
        assert_eq!(q.codes(), &[0, 0]);
        let q = quantize_tensor(&Tensor::from_vec(vec![0.6, -0.6, 10.0]), &s(2, 0.5)).unwrap();
        assert_eq!(q.codes(), &[1, -1, 1]);
        let q = quantize_tensor(&Tensor::from_vec(vec![0.1, 0.9]), &u(2, 0.25)).unwrap();
        assert_eq!(q.codes(), &[0, 3]);
        assert_eq!(q.shape(), &[2]);
    }

    #[test]
    fn tensor_error_carries_index() {
        let err =
            quantize_tensor(&Tensor::from_vec(vec![0.5, 0.1, -1.0]), &u(4, 0.25)).unwrap_err();
        assert!(matches!(err, Error::ElementDomain { index: 2, .. }));
    }

    #[test]
    fn mse_examples() {
        let exact = Tensor::from_vec(vec![0.5, -1.0, 0.0, 1.5]);
        assert_eq!(mean_sq_quant_error(&exact, &s(3, 0.5)).unwrap(), 0.0);
        // 0.6 is stored as f32, so the error is (0.6f32 - 0.5)^2, not exactly 0.01
        let e = mean_sq_quant_error(&Tensor::from_vec(vec![0.6]), &s(2, 0.5)).unwrap();
        assert!((e - 0.01).abs() < 1e-7, "{e}");
        let e = mean_sq_quant_error(&Tensor::from_vec(vec![10.0]), &s(2, 0.5)).unwrap();
        assert_eq!(e, 90.25);
        assert!(mean_sq_quant_error(&Tensor::from_vec(vec![]), &s(2, 0.5)).is_err());
    }

    #[test]
    fn power_of_two_detection() {
        assert_eq!(power_of_two_exponent(1.0), Some(0));
        assert_eq!(power_of_two_exponent(0.125), Some(-3));
        assert_eq!(power_of_two_exponent(16.0), Some(4));
        assert_eq!(power_of_two_exponent(0.1), None);
        assert_eq!(power_of_two_exponent(3.0), None);
        assert_eq!(power_of_two_exponent(f64::MIN_POSITIVE / 4.0), Some(-1024));
    }

    #[test]
    fn zero_fidelity() {
        for k in 2..=8 {
            let ps = s(k, 0.3);
            let pu = u(k, 0.3);
            assert_eq!(ps.quantize(0.0).unwrap(), 0);
            assert_eq!(pu.quantize(0.0).unwrap(), 0);
            let q = QuantTensor::new(vec![1], vec![0], ps).unwrap();
            assert_eq!(dequantize(&q).data(), &[0.0]);
        }
    }

    proptest! {
        #[test]
        fn signed_monotone_and_in_range(
            k in 2u32..=16, step in 1e-4f64..10.0, a in -1e4f64..1e4, b in -1e4f64..1e4
        ) {
            let p = s(k, step);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (ql, qh) = (p.quantize(lo).unwrap(), p.quantize(hi).unwrap());
            prop_assert!(ql <= qh);
            prop_assert!(p.contains(ql) && p.contains(qh));
        }

        #[test]
        fn unsigned_floor_error_bound(k in 2u32..=12, step in 1e-4f64..10.0, frac in 0f64..1.0) {
            let p = u(k, step);
            let x = frac * step * (1u64 << k) as f64;
            let q = p.quantize(x).unwrap();
            let e = x - step * q as f64;
            prop_assert!(p.contains(q));
            prop_assert!((0.0..step).contains(&e), "x={} q={} e={}", x, q, e);
        }
    }
}
