//! Simulated ("fake") quantization.
//!
//! Uniform quantization is symmetric and signed:
//! `code = clip(round_half_even(x / δ), -(2^(b-1) - 1), 2^(b-1) - 1)` and
//! dequantizes to `code · δ`. Log2 quantization stores a non-negative exponent
//! `code = clip(round(-log2(x / s)), 0, 2^b - 1)` and dequantizes to
//! `s · 2^(-code)`; zero maps to the largest code.
//!
//! A bit-width of [`PASSTHROUGH_BITS`] disables quantization entirely: every
//! fake-quant kernel returns its input untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sentinel bit-width meaning "full precision".
pub const PASSTHROUGH_BITS: u8 = 32;
/// Largest bit-width that is actually simulated.
pub const MAX_SIMULATED_BITS: u8 = 16;
/// Number of grid points in the OMSE scale search.
pub const OMSE_GRID_POINTS: usize = 100;
/// Relative range of the OMSE grid around the MinMax scale.
pub const OMSE_GRID_RANGE: (f64, f64) = (0.2, 1.2);
pub const DEFAULT_PERCENTILE: f64 = 99.9;

// 1.5 · 2^23: adding and subtracting it rounds an f32 of magnitude < 2^22 to
// the nearest integer with ties to even.
const ROUND_MAGIC: f32 = 12_582_912.0;
// Mantissa field of the smallest f64 above sqrt(2).
const SQRT2_MANTISSA: u64 = 0x6_A09E_667F_3BCD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Uniform,
    Log2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    scale: Vec<f32>,
    bits: u8,
    granularity: Granularity,
    scheme: Scheme,
}

impl QuantParams {
    pub fn new(
        scale: Vec<f32>,
        bits: u8,
        granularity: Granularity,
        scheme: Scheme,
    ) -> Result<Self> {
        validate_bits(bits)?;
        if scale.is_empty() {
            return Err(Error::param("empty scale vector"));
        }
        if let Some(bad) = scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::param(format!("scale element {bad} is not positive")));
        }
        if granularity == Granularity::PerTensor && scale.len() != 1 {
            return Err(Error::param(format!(
                "per-tensor params need one scale, got {}",
                scale.len()
            )));
        }
        Ok(Self {
            scale,
            bits,
            granularity,
            scheme,
        })
    }

    pub fn per_tensor(scale: f32, bits: u8, scheme: Scheme) -> Result<Self> {
        Self::new(vec![scale], bits, Granularity::PerTensor, scheme)
    }

    pub fn scale(&self) -> &[f32] {
        &self.scale
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == PASSTHROUGH_BITS
    }

    /// Largest code magnitude: `2^(b-1) - 1` (uniform) or `2^b - 1` (log2).
    pub fn max_code(&self) -> i32 {
        max_code(self.scheme, self.bits)
    }

    /// Replaces the scale vector, keeping length and positivity invariants.
    pub fn set_scale(&mut self, scale: &[f32]) -> Result<()> {
        if scale.len() != self.scale.len() {
            return Err(Error::dim(format!(
                "scale length {} does not match {}",
                scale.len(),
                self.scale.len()
            )));
        }
        if let Some(bad) = scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::param(format!("scale element {bad} is not positive")));
        }
        self.scale.copy_from_slice(scale);
        Ok(())
    }

    pub fn with_bits(&self, bits: u8) -> Result<Self> {
        validate_bits(bits)?;
        Ok(Self {
            bits,
            ..self.clone()
        })
    }

    /// Checks that the params can be applied to a tensor of `shape` and returns
    /// `(channels, inner)` for the per-channel index computation.
    fn layout(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match self.granularity {
            Granularity::PerTensor => Ok((1, 1)),
            Granularity::PerChannel { axis } => {
                let channels = *shape.get(axis).ok_or_else(|| {
                    Error::dim(format!("channel axis {axis} out of range for {shape:?}"))
                })?;
                if channels != self.scale.len() {
                    return Err(Error::dim(format!(
                        "{} scales for {channels} channels along axis {axis}",
                        self.scale.len()
                    )));
                }
                Ok((channels, shape[axis + 1..].iter().product()))
            }
        }
    }
}

fn validate_bits(bits: u8) -> Result<()> {
    if bits == PASSTHROUGH_BITS || (2..=MAX_SIMULATED_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::param(format!(
            "unsupported bit-width {bits} (expected 2..={MAX_SIMULATED_BITS} or {PASSTHROUGH_BITS})"
        )))
    }
}

pub fn max_code(scheme: Scheme, bits: u8) -> i32 {
    match scheme {
        Scheme::Uniform => (1i32 << (bits.min(31) - 1)) - 1,
        Scheme::Log2 => (1i64 << bits.min(31)) as i32 - 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<i32>,
    params: QuantParams,
    shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
}

/// Round half to even, valid for `|y| < 2^22`.
#[inline]
pub fn round_half_even(y: f32) -> f32 {
    (y + ROUND_MAGIC) - ROUND_MAGIC
}

#[inline]
fn uniform_code(x: f32, scale: f32, qmax: f32) -> f32 {
    round_half_even((x / scale).clamp(-qmax, qmax))
}

/// Exact `round(-log2(x / s))` clipped to `[0, max_code]`.
///
/// `-log2(y)` is never a half-integer for `y > 0`, so no tie rule is needed;
/// the rounding decision compares the mantissa of `y` against sqrt(2).
#[inline]
pub fn log2_code(x: f32, scale: f32, max_code: u32) -> u32 {
    let y = x as f64 / scale as f64;
    if y.is_nan() || y <= 0.0 {
        return max_code;
    }
    if y >= 1.0 {
        return 0;
    }
    let bits = y.to_bits();
    let exp_field = (bits >> 52) & 0x7ff;
    if exp_field == 0 {
        return max_code;
    }
    let neg_exp = 1023 - exp_field as i64; // y = m · 2^(-neg_exp), m in [1, 2)
    let mantissa = bits & ((1u64 << 52) - 1);
    let code = if mantissa >= SQRT2_MANTISSA {
        neg_exp - 1
    } else {
        neg_exp
    };
    code.clamp(0, max_code as i64) as u32
}

#[inline]
fn log2_value(scale: f32, code: u32) -> f32 {
    // 2^-code is built from its exponent field when it is a normal f64.
    let step = if code <= 1022 {
        f64::from_bits(u64::from(1023 - code) << 52)
    } else {
        (-(code as f64)).exp2()
    };
    (scale as f64 * step) as f32
}

fn channel_of(index: usize, channels: usize, inner: usize) -> usize {
    if channels == 1 {
        0
    } else {
        (index / inner) % channels
    }
}

pub fn quantize_uniform(x: &Tensor, params: &QuantParams) -> Result<QuantizedTensor> {
    if params.scheme != Scheme::Uniform {
        return Err(Error::param("quantize_uniform called with log2 params"));
    }
    if params.is_passthrough() {
        return Err(Error::param(
            "cannot produce integer codes at pass-through width",
        ));
    }
    let (channels, inner) = params.layout(x.shape())?;
    let qmax = params.max_code() as f32;
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = params.scale[channel_of(i, channels, inner)];
            uniform_code(v, s, qmax) as i32
        })
        .collect();
    Ok(QuantizedTensor {
        codes,
        params: params.clone(),
        shape: x.shape().to_vec(),
    })
}

pub fn quantize_log2(x: &Tensor, params: &QuantParams) -> Result<QuantizedTensor> {
    if params.scheme != Scheme::Log2 {
        return Err(Error::param("quantize_log2 called with uniform params"));
    }
    if params.is_passthrough() {
        return Err(Error::param(
            "cannot produce integer codes at pass-through width",
        ));
    }
    if let Some(neg) = x.data().iter().find(|v| **v < 0.0) {
        return Err(Error::Domain(format!(
            "log2 quantization needs non-negative input, got {neg}"
        )));
    }
    let (channels, inner) = params.layout(x.shape())?;
    let max = params.max_code() as u32;
    let codes = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| log2_code(v, params.scale[channel_of(i, channels, inner)], max) as i32)
        .collect();
    Ok(QuantizedTensor {
        codes,
        params: params.clone(),
        shape: x.shape().to_vec(),
    })
}

pub fn quantize(x: &Tensor, params: &QuantParams) -> Result<QuantizedTensor> {
    match params.scheme {
        Scheme::Uniform => quantize_uniform(x, params),
        Scheme::Log2 => quantize_log2(x, params),
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let (channels, inner) = q
        .params
        .layout(&q.shape)
        .expect("quantized tensor layout was validated on construction");
    let data = q
        .codes
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let s = q.params.scale[channel_of(i, channels, inner)];
            match q.params.scheme {
                Scheme::Uniform => c as f32 * s,
                Scheme::Log2 => log2_value(s, c as u32),
            }
        })
        .collect();
    Tensor::new(q.shape.clone(), data).expect("shape preserved")
}

/// `dequantize(quantize(x))`, or `x` itself at pass-through width.
pub fn fake_quant(x: &Tensor, params: &QuantParams) -> Result<Tensor> {
    if params.is_passthrough() {
        params.layout(x.shape())?;
        return Ok(x.clone());
    }
    Ok(dequantize(&quantize(x, params)?))
}

/// In-place uniform fake quantization with one scale. Bit-identical to
/// [`fake_quant`] on the same values.
#[inline(always)]
pub fn fake_quant_uniform_slice(values: &mut [f32], scale: f32, bits: u8) {
    if bits == PASSTHROUGH_BITS {
        return;
    }
    let qmax = max_code(Scheme::Uniform, bits) as f32;
    for v in values.iter_mut() {
        *v = uniform_code(*v, scale, qmax) * scale;
    }
}

/// In-place log2 fake quantization with one scale. Negative inputs are
/// treated as zero.
#[inline(always)]
pub fn fake_quant_log2_slice(values: &mut [f32], scale: f32, bits: u8) {
    if bits == PASSTHROUGH_BITS {
        return;
    }
    let max = max_code(Scheme::Log2, bits) as u32;
    if max > 1022 {
        for v in values.iter_mut() {
            *v = log2_value(scale, log2_code(v.max(0.0), scale, max));
        }
        return;
    }
    // Same codes as `log2_code`, without branches: every 2^-code is a normal f64.
    // The mantissa test compares y's significand, rebased to [1, 2), with √2.
    let (s, max) = (scale as f64, max as i32);
    let sqrt2 = f64::from_bits((1023 << 52) | SQRT2_MANTISSA);
    for v in values.iter_mut() {
        let y = v.max(0.0) as f64 / s;
        let bits = y.to_bits();
        let exp_field = (bits >> 52) as i32;
        let significand = f64::from_bits((bits & ((1u64 << 52) - 1)) | (1023 << 52));
        let round_up = (significand >= sqrt2) as i32;
        let code = (1023 - exp_field - round_up).clamp(0, max);
        let code = if exp_field == 0 { max } else { code };
        *v = (s * f64::from_bits(((1023 - code) as u64) << 52)) as f32;
    }
}

/// Per-channel fake quantization of a row-major `[rows × cols]` matrix whose
/// channels are its columns (axis 1).
pub fn fake_quant_columns(values: &mut [f32], cols: usize, scales: &[f32], bits: u8) {
    debug_assert_eq!(scales.len(), cols);
    if bits == PASSTHROUGH_BITS {
        return;
    }
    let qmax = max_code(Scheme::Uniform, bits) as f32;
    for row in values.chunks_exact_mut(cols) {
        for (v, &s) in row.iter_mut().zip(scales) {
            *v = uniform_code(*v, s, qmax) * s;
        }
    }
}

/// Absolute maxima per channel (or one global maximum).
fn abs_max(x: &Tensor, granularity: Granularity) -> Result<Vec<f32>> {
    abs_stat(x, granularity, |vals| {
        vals.iter().copied().fold(0.0f32, f32::max)
    })
}

fn abs_stat(
    x: &Tensor,
    granularity: Granularity,
    stat: impl Fn(&[f32]) -> f32,
) -> Result<Vec<f32>> {
    match granularity {
        Granularity::PerTensor => {
            let vals: Vec<f32> = x.data().iter().map(|v| v.abs()).collect();
            Ok(vec![stat(&vals)])
        }
        Granularity::PerChannel { axis } => {
            let shape = x.shape();
            let channels = *shape
                .get(axis)
                .ok_or_else(|| Error::dim(format!("axis {axis} out of range for {shape:?}")))?;
            let inner: usize = shape[axis + 1..].iter().product();
            let mut per: Vec<Vec<f32>> = vec![Vec::new(); channels];
            for (i, v) in x.data().iter().enumerate() {
                per[channel_of(i, channels, inner)].push(v.abs());
            }
            Ok(per.iter().map(|vals| stat(vals)).collect())
        }
    }
}

fn scales_from_range(ranges: Vec<f32>, bits: u8) -> Vec<f32> {
    let qmax = max_code(Scheme::Uniform, bits.min(MAX_SIMULATED_BITS)) as f32;
    ranges
        .into_iter()
        .map(|r| {
            if r > 0.0 && r.is_finite() {
                r / qmax
            } else {
                1.0
            }
        })
        .collect()
}

/// `δ = max|x| / (2^(b-1) - 1)`; all-zero channels get `δ = 1`.
pub fn init_scale_minmax(x: &Tensor, bits: u8, granularity: Granularity) -> Result<QuantParams> {
    let scale = scales_from_range(abs_max(x, granularity)?, bits);
    QuantParams::new(scale, bits, granularity, Scheme::Uniform)
}

/// Linear-interpolation percentile of a slice, `pct` in `(0, 100]`.
pub fn percentile(values: &[f32], pct: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    (sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac) as f32
}

/// `δ = percentile(|x|, pct) / (2^(b-1) - 1)`.
pub fn init_scale_percentile(
    x: &Tensor,
    bits: u8,
    pct: f64,
    granularity: Granularity,
) -> Result<QuantParams> {
    if !(pct > 0.0 && pct <= 100.0) {
        return Err(Error::param(format!("percentile {pct} outside (0, 100]")));
    }
    let ranges = abs_stat(x, granularity, |vals| percentile(vals, pct))?;
    QuantParams::new(
        scales_from_range(ranges, bits),
        bits,
        granularity,
        Scheme::Uniform,
    )
}

fn quant_sq_error(values: &[f32], scale: f32, qmax: f32) -> f64 {
    values
        .iter()
        .map(|&v| {
            let e = (v - uniform_code(v, scale, qmax) * scale) as f64;
            e * e
        })
        .sum()
}

/// Scale minimizing the squared quantization error of `values` over the OMSE
/// grid, ties broken toward the larger scale.
pub fn omse_scale(values: &[f32], bits: u8) -> f32 {
    let qmax = max_code(Scheme::Uniform, bits) as f32;
    let mm = scales_from_range(
        vec![values.iter().fold(0.0f32, |m, v| m.max(v.abs()))],
        bits,
    )[0];
    let (lo, hi) = OMSE_GRID_RANGE;
    let step = (hi - lo) / (OMSE_GRID_POINTS - 1) as f64;
    // The MinMax scale is always a candidate, so OMSE never loses to it.
    let candidates = (0..OMSE_GRID_POINTS)
        .map(|k| (mm as f64 * (lo + k as f64 * step)) as f32)
        .chain(std::iter::once(mm));
    let mut best = (f64::INFINITY, 0.0f32);
    for s in candidates {
        if s <= 0.0 {
            continue;
        }
        let err = quant_sq_error(values, s, qmax);
        if err < best.0 || (err == best.0 && s > best.1) {
            best = (err, s);
        }
    }
    best.1
}

/// MSE-optimal scale per tensor or per channel.
pub fn init_scale_omse(x: &Tensor, bits: u8, granularity: Granularity) -> Result<QuantParams> {
    validate_bits(bits)?;
    if bits == PASSTHROUGH_BITS {
        return init_scale_minmax(x, bits, granularity);
    }
    let scale = match granularity {
        Granularity::PerTensor => vec![omse_scale(x.data(), bits)],
        Granularity::PerChannel { axis } => {
            let shape = x.shape();
            let channels = *shape
                .get(axis)
                .ok_or_else(|| Error::dim(format!("axis {axis} out of range for {shape:?}")))?;
            let inner: usize = shape[axis + 1..].iter().product();
            let mut per: Vec<Vec<f32>> = vec![Vec::new(); channels];
            for (i, v) in x.data().iter().enumerate() {
                per[channel_of(i, channels, inner)].push(*v);
            }
            per.iter().map(|vals| omse_scale(vals, bits)).collect()
        }
    };
    QuantParams::new(scale, bits, granularity, Scheme::Uniform)
}

/// Sum of squared differences between `x` and its fake-quantized version.
pub fn quantization_mse(x: &Tensor, params: &QuantParams) -> Result<f64> {
    let q = fake_quant(x, params)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(q.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    Ok(sum / x.numel() as f64)
}

/// Bias correction for a linear map `y = x · W + b` with `W: [in × out]`.
///
/// Returns `b + mean(x) · (W - Ŵ)`, the bias that restores the expected
/// output of the quantized layer on the calibration inputs `[n × in]`.
pub fn bias_correct(
    weights: &Tensor,
    quantized_weights: &Tensor,
    bias: &[f32],
    calib_inputs: &Tensor,
) -> Result<Vec<f32>> {
    let (fan_in, fan_out) = weights.dims2()?;
    if quantized_weights.shape() != weights.shape() {
        return Err(Error::dim("quantized weights differ in shape from weights"));
    }
    if bias.len() != fan_out {
        return Err(Error::dim(format!(
            "bias length {} for {fan_out} outputs",
            bias.len()
        )));
    }
    let (rows, cols) = calib_inputs.dims2()?;
    if cols != fan_in {
        return Err(Error::dim(format!(
            "calibration inputs have {cols} features, layer expects {fan_in}"
        )));
    }
    if rows == 0 {
        return Err(Error::EmptyCalibration);
    }
    let mut mean = vec![0.0f64; fan_in];
    for row in calib_inputs.data().chunks_exact(fan_in) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);

    let w = weights.data();
    let wq = quantized_weights.data();
    Ok((0..fan_out)
        .map(|j| {
            let shift: f64 = (0..fan_in)
                .map(|i| (w[i * fan_out + j] - wq[i * fan_out + j]) as f64 * mean[i])
                .sum();
            (bias[j] as f64 + shift) as f32
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn uniform_codes_match_hand_evaluation() {
        let p = QuantParams::per_tensor(0.1, 4, Scheme::Uniform).unwrap();
        let q = quantize_uniform(&t(&[1.0, -0.5, 0.3]), &p).unwrap();
        assert_eq!(q.codes(), &[7, -5, 3]);
        let d = dequantize(&q);
        for (a, b) in d.data().iter().zip([0.7f32, -0.5, 0.3]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn eight_bit_range_and_zero() {
        let p = QuantParams::per_tensor(0.01, 8, Scheme::Uniform).unwrap();
        let q = quantize_uniform(&t(&[1e6, -1e6, 0.0]), &p).unwrap();
        assert_eq!(q.codes(), &[127, -127, 0]);
    }

    #[test]
    fn ties_round_to_even() {
        let p = QuantParams::per_tensor(1.0, 8, Scheme::Uniform).unwrap();
        let q = quantize_uniform(&t(&[0.5, 1.5, 2.5, -0.5, -1.5]), &p).unwrap();
        assert_eq!(q.codes(), &[0, 2, 2, 0, -2]);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(QuantParams::per_tensor(0.0, 4, Scheme::Uniform).is_err());
        assert!(QuantParams::per_tensor(-1.0, 4, Scheme::Uniform).is_err());
        assert!(QuantParams::per_tensor(1.0, 1, Scheme::Uniform).is_err());
        assert!(
            QuantParams::new(vec![1.0, 1.0], 4, Granularity::PerTensor, Scheme::Uniform).is_err()
        );
        let p = QuantParams::new(
            vec![1.0; 3],
            4,
            Granularity::PerChannel { axis: 1 },
            Scheme::Uniform,
        )
        .unwrap();
        assert!(quantize_uniform(&Tensor::zeros(&[2, 2]), &p).is_err());
    }

    #[test]
    fn per_channel_applies_scale_along_axis() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 1.0, -1.0, 0.5]).unwrap();
        let p = QuantParams::new(
            vec![0.5, 0.25],
            4,
            Granularity::PerChannel { axis: 1 },
            Scheme::Uniform,
        )
        .unwrap();
        let q = quantize_uniform(&x, &p).unwrap();
        assert_eq!(q.codes(), &[2, 4, -2, 2]);
    }

    #[test]
    fn fake_quant_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_vec((0..500).map(|_| rng.random_range(-3.0f32..3.0)).collect());
        let p = QuantParams::per_tensor(0.037, 4, Scheme::Uniform).unwrap();
        let once = fake_quant(&x, &p).unwrap();
        assert_eq!(fake_quant(&once, &p).unwrap(), once);
        let pl = QuantParams::per_tensor(2.0, 8, Scheme::Log2).unwrap();
        let xl = Tensor::from_vec(x.data().iter().map(|v| v.abs()).collect());
        let once = fake_quant(&xl, &pl).unwrap();
        assert_eq!(fake_quant(&once, &pl).unwrap(), once);
    }

    #[test]
    fn log2_examples() {
        let s = 0.8f32;
        let p = QuantParams::per_tensor(s, 8, Scheme::Log2).unwrap();
        let q = quantize_log2(&t(&[s, s / 2.0, 0.0]), &p).unwrap();
        assert_eq!(q.codes(), &[0, 1, 255]);
        let d = dequantize(&q);
        assert_eq!(d.data()[0], s);
        assert_eq!(d.data()[1], s / 2.0);
        assert!(matches!(
            quantize_log2(&t(&[-0.1]), &p),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn log2_code_matches_float_rounding_away_from_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20_000 {
            let x: f32 = rng.random_range(1e-20f32..4.0);
            let s: f32 = rng.random_range(0.1f32..2.0);
            let exact = -((x as f64) / (s as f64)).log2();
            // Skip values within float noise of a rounding boundary.
            if (exact - exact.floor() - 0.5).abs() < 1e-9 {
                continue;
            }
            let expect = exact.round().clamp(0.0, 255.0) as u32;
            assert_eq!(log2_code(x, s, 255), expect, "x={x} s={s}");
        }
    }

    #[test]
    fn minmax_examples() {
        let p = init_scale_minmax(&t(&[-2.0, 1.0]), 4, Granularity::PerTensor).unwrap();
        assert!((p.scale()[0] - 2.0 / 7.0).abs() < 1e-7);

        let x = Tensor::new(vec![2, 2], vec![0.0, 3.0, 0.0, -1.0]).unwrap();
        let p = init_scale_minmax(&x, 4, Granularity::PerChannel { axis: 1 }).unwrap();
        assert_eq!(p.scale()[0], 1.0);
        let q = quantize_uniform(&x, &p).unwrap();
        assert_eq!(q.codes()[0], 0);
        assert_eq!(q.codes()[2], 0);
    }

    #[test]
    fn percentile_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec((0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect());
        assert_eq!(
            init_scale_percentile(&x, 4, 100.0, Granularity::PerTensor).unwrap(),
            init_scale_minmax(&x, 4, Granularity::PerTensor).unwrap()
        );

        let c = t(&[0.5; 10]);
        let a = init_scale_percentile(&c, 4, 10.0, Granularity::PerTensor).unwrap();
        let b = init_scale_percentile(&c, 4, 99.0, Granularity::PerTensor).unwrap();
        assert_eq!(a, b);

        let mut v: Vec<f32> = (0..999).map(|i| i as f32 / 998.0).collect();
        v.push(100.0);
        let x = t(&v);
        let p = init_scale_percentile(&x, 4, 99.0, Granularity::PerTensor).unwrap();
        assert!((p.scale()[0] * 7.0 - 1.0).abs() < 0.02, "{}", p.scale()[0]);
        let q = quantize_uniform(&x, &p).unwrap();
        assert_eq!(*q.codes().last().unwrap(), 7);

        assert!(init_scale_percentile(&x, 4, 0.0, Granularity::PerTensor).is_err());
        assert!(init_scale_percentile(&x, 4, 100.5, Granularity::PerTensor).is_err());
    }

    #[test]
    fn omse_keeps_exactly_representable_minmax_scale() {
        let x = t(&[-0.7, 0.1, 0.2, 0.3, 0.7]);
        let mm = init_scale_minmax(&x, 4, Granularity::PerTensor).unwrap();
        let om = init_scale_omse(&x, 4, Granularity::PerTensor).unwrap();
        assert_eq!(om.scale(), mm.scale());
    }

    #[test]
    fn omse_matches_fine_grid_oracle() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f32> = (0..4096)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect();
            let bits = 4;
            let qmax = 7.0f32;
            let mm = v.iter().fold(0.0f32, |m, x| m.max(x.abs())) / qmax;
            let (mut best_err, mut best_s) = (f64::INFINITY, 0.0f64);
            for k in 0..10_000 {
                let s = mm as f64 * (0.2 + k as f64 / 9_999.0);
                let err: f64 = v
                    .iter()
                    .map(|&x| {
                        let c = (x as f64 / s).round_ties_even().clamp(-7.0, 7.0);
                        (x as f64 - c * s).powi(2)
                    })
                    .sum();
                if err < best_err {
                    best_err = err;
                    best_s = s;
                }
            }
            let step = mm as f64 * 1.0 / 99.0;
            let got = omse_scale(&v, bits) as f64;
            assert!(
                (got - best_s).abs() <= step,
                "seed {seed}: {got} vs {best_s}"
            );
        }
    }

    #[test]
    fn bias_correction_examples() {
        let w = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let wq = Tensor::new(vec![1, 1], vec![0.4]).unwrap();
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let b = bias_correct(&w, &wq, &[1.0], &x).unwrap();
        assert!((b[0] - 1.2).abs() < 1e-6);

        assert_eq!(bias_correct(&w, &w, &[1.0], &x).unwrap(), vec![1.0]);
        let zero_mean = Tensor::new(vec![2, 1], vec![-2.0, 2.0]).unwrap();
        assert_eq!(
            bias_correct(&w, &wq, &[1.0], &zero_mean).unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn passthrough_is_identity() {
        let x = t(&[0.123, -4.5, 1e-9]);
        let p = QuantParams::per_tensor(0.1, PASSTHROUGH_BITS, Scheme::Uniform).unwrap();
        assert_eq!(fake_quant(&x, &p).unwrap(), x);
        let mut v = x.data().to_vec();
        fake_quant_uniform_slice(&mut v, 0.1, PASSTHROUGH_BITS);
        assert_eq!(v, x.data());
    }

    proptest! {
        #[test]
        fn magic_rounding_is_half_even(y in -4.0e6f32..4.0e6) {
            prop_assert_eq!(round_half_even(y), y.round_ties_even());
        }

        #[test]
        fn slice_kernels_match_tensor_path(
            v in proptest::collection::vec(-5.0f32..5.0, 1..64),
            scale in 0.001f32..1.0,
            bits in prop_oneof![Just(2u8), Just(3u8), Just(4u8), Just(8u8), Just(10u8), Just(16u8)],
        ) {
            let x = Tensor::from_vec(v.clone());
            let p = QuantParams::per_tensor(scale, bits, Scheme::Uniform).unwrap();
            let mut fast = v.clone();
            fake_quant_uniform_slice(&mut fast, scale, bits);
            let slow = fake_quant(&x, &p).unwrap();
            prop_assert_eq!(slow.data(), &fast[..]);

            let mut abs: Vec<f32> = v.iter().map(|a| a.abs()).collect();
            abs.extend([0.0, 1e-30, 1e-44, 1e30]);
            let pl = QuantParams::per_tensor(scale, bits, Scheme::Log2).unwrap();
            let mut fast = abs.clone();
            fake_quant_log2_slice(&mut fast, scale, bits);
            let slow = fake_quant(&Tensor::from_vec(abs), &pl).unwrap();
            prop_assert_eq!(slow.data(), &fast[..]);
        }

        #[test]
        fn uniform_is_monotone(a in -10.0f32..10.0, b in -10.0f32..10.0, scale in 0.01f32..2.0) {
            let p = QuantParams::per_tensor(scale, 4, Scheme::Uniform).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let q = quantize_uniform(&t(&[lo, hi]), &p).unwrap();
            prop_assert!(q.codes()[0] <= q.codes()[1]);
        }

        #[test]
        fn minmax_codes_never_exceed_range(
            v in proptest::collection::vec(-50.0f32..50.0, 2..128),
            bits in prop_oneof![Just(3u8), Just(4u8), Just(8u8)],
        ) {
            let x = Tensor::from_vec(v);
            let p = init_scale_minmax(&x, bits, Granularity::PerTensor).unwrap();
            let q = quantize_uniform(&x, &p).unwrap();
            let qmax = p.max_code();
            let peak = q.codes().iter().map(|c| c.abs()).max().unwrap();
            prop_assert!(peak <= qmax);
            if x.data().iter().any(|v| *v != 0.0) {
                prop_assert_eq!(peak, qmax);
            }
        }

        #[test]
        fn omse_never_worse_than_minmax(
            v in proptest::collection::vec(-1.0f32..1.0, 8..256),
            tail in 2.0f32..40.0,
            bits in prop_oneof![Just(3u8), Just(4u8), Just(8u8)],
        ) {
            let mut v = v;
            v.push(tail);
            let x = Tensor::from_vec(v);
            let mm = init_scale_minmax(&x, bits, Granularity::PerTensor).unwrap();
            let om = init_scale_omse(&x, bits, Granularity::PerTensor).unwrap();
            prop_assert!(quantization_mse(&x, &om).unwrap() <= quantization_mse(&x, &mm).unwrap());
        }

        #[test]
        fn code_count_bounds(
            v in proptest::collection::vec(-3.0f32..3.0, 1..600),
            bits in prop_oneof![Just(3u8), Just(4u8)],
        ) {
            let x = Tensor::from_vec(v.clone());
            let p = QuantParams::per_tensor(0.05, bits, Scheme::Uniform).unwrap();
            let mut codes = quantize_uniform(&x, &p).unwrap().codes().to_vec();
            codes.sort_unstable();
            codes.dedup();
            prop_assert!(codes.len() < (1usize << bits));

            let xl = Tensor::from_vec(v.iter().map(|a| a.abs()).collect());
            let pl = QuantParams::per_tensor(3.0, bits, Scheme::Log2).unwrap();
            let mut codes = quantize_log2(&xl, &pl).unwrap().codes().to_vec();
            codes.sort_unstable();
            codes.dedup();
            prop_assert!(codes.len() <= 1usize << bits);
        }
    }
}
