//! Dense row-major `f32` arrays and the handful of kernels the transformer
//! forward pass needs.
//!
//! Every reduction accumulates strictly left to right starting from `0.0`, and
//! no kernel fuses multiplies into adds, so results are bit-reproducible
//! across runs and across the two code paths (tensor API and slice API) the
//! model uses.

use crate::error::{Error, Result};

/// `sqrt(2 / pi)`, the inner scale of the tanh GELU approximation.
pub const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_6;
/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_CUBIC: f32 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(format!(
                "expected a 2-D tensor, got shape {s:?}"
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major `out[m×n] = a[m×k] · b[k×n]`.
///
/// Each output element is accumulated over `k` in increasing order from zero,
/// which matches the naive triple loop exactly. Rows are processed four at a
/// time against 8-column panels so the accumulators stay in registers.
pub fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { matmul_avx2(a, b, out, m, k, n) };
    }
    matmul_kernel(a, b, out, m, k, n)
}

// Wider vectors only; no FMA, so results are identical to the portable build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    if n >= 16 {
        matmul_panels::<16>(a, b, out, m, k, n)
    } else {
        matmul_panels::<8>(a, b, out, m, k, n)
    }
}

#[inline(always)]
fn matmul_kernel(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    matmul_panels::<8>(a, b, out, m, k, n)
}

#[inline(always)]
fn matmul_panels<const W: usize>(
    a: &[f32],
    b: &[f32],
    out: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    const R: usize = 4;
    let full_rows = m / R * R;
    let full_cols = n / W * W;
    for i in (0..full_rows).step_by(R) {
        let a_block = &a[i * k..(i + R) * k];
        let (a0, rest) = a_block.split_at(k);
        let (a1, rest) = rest.split_at(k);
        let (a2, a3) = rest.split_at(k);
        for j in (0..full_cols).step_by(W) {
            let mut acc = [[0.0f32; W]; R];
            let rows = a0.iter().zip(a1).zip(a2).zip(a3);
            for ((((&x0, &x1), &x2), &x3), b_row) in rows.zip(b.chunks_exact(n)) {
                let panel: &[f32; W] = b_row[j..j + W].try_into().expect("panel width");
                for (r, x) in [x0, x1, x2, x3].into_iter().enumerate() {
                    for c in 0..W {
                        acc[r][c] += x * panel[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + W].copy_from_slice(row);
            }
        }
        if full_cols < n {
            for (r, a_row) in [a0, a1, a2, a3].into_iter().enumerate() {
                matmul_tail(
                    a_row,
                    b,
                    &mut out[(i + r) * n..(i + r + 1) * n],
                    full_cols,
                    n,
                );
            }
        }
    }
    for i in full_rows..m {
        matmul_tail(
            &a[i * k..(i + 1) * k],
            b,
            &mut out[i * n..(i + 1) * n],
            0,
            n,
        );
    }
}

/// Columns `from..n` of one output row.
#[inline(always)]
fn matmul_tail(a_row: &[f32], b: &[f32], out_row: &mut [f32], from: usize, n: usize) {
    let out_row = &mut out_row[from..];
    out_row.fill(0.0);
    for (&x, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
        for (o, &y) in out_row.iter_mut().zip(&b_row[from..]) {
            *o += x * y;
        }
    }
}

/// Row-major `out[m×n] = a[m×k] · b[n×k]ᵀ`, same accumulation order as
/// [`matmul_into`] applied to the transposed operand.
pub fn matmul_bt_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(k)) {
            let mut acc = 0.0f32;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Branch-free single-precision `e^x`, within 2 ulp of the exact value.
///
/// Range reduction `x = n·ln2 + r` with a two-part ln2, then a degree-6
/// polynomial on `|r| ≤ ln2/2`. Plain mul/add only, so loops over it
/// vectorize and results do not depend on FMA availability.
#[inline]
pub fn exp_f32(x: f32) -> f32 {
    const LO: f32 = -87.336_55;
    const HI: f32 = 88.722_83;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0;
    let c = x.clamp(LO, HI);
    let shifted = c * std::f32::consts::LOG2_E + ROUND;
    let n = shifted - ROUND;
    // The low mantissa bits of `shifted` hold n in two's complement.
    let ni = shifted.to_bits() as i32 - ROUND.to_bits() as i32;
    let r = c - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 0.5;
    let y = p * r * r + r + 1.0;
    // n lies in [-126, 128]; split the power so 2^128 never has to be built.
    let half = ni >> 1;
    let s1 = f32::from_bits(((half + 127) as u32) << 23);
    let s2 = f32::from_bits(((ni - half + 127) as u32) << 23);
    let v = y * s1 * s2;
    let v = if x < LO { 0.0 } else { v };
    if x > HI {
        f32::INFINITY
    } else {
        v
    }
}

/// Numerically stable softmax over a contiguous row.
#[inline]
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for v in row.iter_mut() {
        *v = exp_f32(*v - max);
    }
    // f64 accumulator keeps the row sum within a few f32 ulps of one.
    let sum: f64 = row.iter().map(|v| *v as f64).sum();
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(&x.shape, axis)?;
    let mut out = x.clone();
    if inner == 1 {
        for row in out.data.chunks_exact_mut(len) {
            softmax_in_place(row);
        }
        return Ok(out);
    }
    let mut lane = vec![0.0f32; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (t, v) in lane.iter_mut().enumerate() {
                *v = out.data[base + t * inner];
            }
            softmax_in_place(&mut lane);
            for (t, v) in lane.iter().enumerate() {
                out.data[base + t * inner] = *v;
            }
        }
    }
    Ok(out)
}

/// Tanh approximation of GELU:
/// `0.5 · x · (1 + tanh(u))` with `u = GELU_SQRT_2_OVER_PI · (x + GELU_CUBIC · x³)`,
/// evaluated in f32 as the equivalent `x / (1 + exp(−2u))`.
#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    x / (1.0 + exp_f32(-2.0 * u))
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v = gelu_scalar(*v));
    out
}

/// LayerNorm of one row with biased variance.
#[inline]
pub fn layernorm_row(row: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
    let n = row.len() as f32;
    let mut sum = 0.0f32;
    for &v in row {
        sum += v;
    }
    let mean = sum / n;
    let mut sq = 0.0f32;
    for &v in row {
        let c = v - mean;
        sq += c * c;
    }
    let inv = 1.0 / (sq / n + eps).sqrt();
    for (((o, &v), &g), &b) in out.iter_mut().zip(row).zip(gamma).zip(beta) {
        *o = (v - mean) * inv * g + b;
    }
}

/// LayerNorm over the last axis.
pub fn layernorm(x: &Tensor, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Tensor> {
    let last = *x
        .shape
        .last()
        .ok_or_else(|| Error::dim("layernorm of a scalar"))?;
    if gamma.len() != last || beta.len() != last {
        return Err(Error::dim(format!(
            "layernorm parameters have length {}/{}, feature axis is {last}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = vec![0.0; x.numel()];
    for (row, o) in x.data.chunks_exact(last).zip(out.chunks_exact_mut(last)) {
        layernorm_row(row, gamma, beta, eps, o);
    }
    Tensor::new(x.shape.clone(), out)
}

pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::dim("concat of an empty list"))?;
    let rank = first.ndim();
    if axis >= rank {
        return Err(Error::dim(format!(
            "axis {axis} out of range for rank {rank}"
        )));
    }
    for t in tensors {
        let same = t.ndim() == rank
            && t.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(Error::dim(format!(
                "concat shapes {:?} and {:?} disagree off axis {axis}",
                first.shape, t.shape
            )));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let mut shape = first.shape.clone();
    shape[axis] = tensors.iter().map(|t| t.shape[axis]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in tensors {
            let chunk = t.shape[axis] * inner;
            data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, data)
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = x.data[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::dim(format!(
            "add shapes differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn scale(x: &Tensor, factor: f32) -> Tensor {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v *= factor);
    out
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}
