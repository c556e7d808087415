//! A tiny quantization-aware vision transformer.
//!
//! Inputs are pre-tokenized embeddings `[batch, tokens, embed_dim]`. Each block
//! is pre-LayerNorm: `x += MHSA(LN1(x))`, then `x += MLP(LN2(x))`. The
//! classifier mean-pools tokens and applies a full-precision linear map.
//!
//! With `quantized = true` the forward pass fake-quantizes every point in the
//! block's table: all weight matrices (per output channel), the per-head
//! Q/K/V projections, attention scores, softmax outputs (log2), head outputs,
//! the output projection, the post-GELU MLP activation (log2) and the FC2
//! output. LayerNorm parameters, biases and the classifier stay full
//! precision.

pub mod io;
mod points;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{
    self, fake_quant_columns, fake_quant_log2_slice, fake_quant_uniform_slice, max_code,
    Granularity, QuantParams, Scheme,
};
use crate::tensor::{gelu_scalar, layernorm_row, matmul_into, softmax_in_place, Tensor};

pub use points::{BlockScales, Point, Segment};

pub const LAYERNORM_EPS: f32 = 1e-5;

/// Added to GELU outputs before log2 quantization so the input is
/// non-negative (the tanh GELU is bounded below by about -0.16997).
pub const GELU_LOG2_OFFSET: f32 = 0.17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub tokens: usize,
    pub classes: usize,
    /// Hidden width of the MLP; `4 · embed_dim` when omitted.
    pub mlp_dim: Option<usize>,
    pub weight_bits: u8,
    pub activation_bits: u8,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            heads: 4,
            blocks: 4,
            tokens: 16,
            classes: 10,
            mlp_dim: None,
            weight_bits: 4,
            activation_bits: 8,
        }
    }
}

impl ViTConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_dim.unwrap_or(4 * self.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("tokens", self.tokens),
            ("classes", self.classes),
            ("mlp_dim", self.hidden_dim()),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(format!("{name} must be positive")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::param(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        for bits in [self.weight_bits, self.activation_bits] {
            QuantParams::per_tensor(1.0, bits, Scheme::Uniform)?;
        }
        Ok(())
    }

    /// Number of scale elements in one block:
    /// `5·d + h + 6·N + 3` (per-channel weights plus per-tensor activations).
    pub fn block_scale_count(&self) -> usize {
        let d = self.embed_dim;
        let attention_weights = 3 * d + d;
        let attention_acts = 6 * self.heads + 1;
        let mlp = self.hidden_dim() + d + 2;
        attention_weights + attention_acts + mlp
    }

    /// Equal up to bit-widths.
    pub fn same_architecture(&self, other: &ViTConfig) -> bool {
        let strip = |c: &ViTConfig| ViTConfig {
            weight_bits: 32,
            activation_bits: 32,
            mlp_dim: Some(c.hidden_dim()),
            ..*c
        };
        strip(self) == strip(other)
    }

    fn with_resolved_mlp(mut self) -> Self {
        self.mlp_dim = Some(self.hidden_dim());
        self
    }
}

/// Weight-scale initializer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleInit {
    MinMax,
    Percentile(f64),
    Omse,
}

/// Intermediate values exposed to an observer during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    /// An activation quantization point, observed before quantization.
    Act(Point),
    /// Rows entering FC1 (LayerNorm output).
    Fc1Input,
    /// Rows entering FC2 (GELU output, full precision path).
    Fc2Input,
}

type Observer<'a> = Option<&'a mut dyn FnMut(usize, Tap, &[f32])>;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    wq: Vec<Tensor>,
    wk: Vec<Tensor>,
    wv: Vec<Tensor>,
    wo: Tensor,
    fc1: Tensor,
    fc1_bias: Vec<f32>,
    fc2: Tensor,
    fc2_bias: Vec<f32>,
    ln1_gamma: Vec<f32>,
    ln1_beta: Vec<f32>,
    ln2_gamma: Vec<f32>,
    ln2_beta: Vec<f32>,
    points: Vec<Point>,
    params: Vec<QuantParams>,
    layout: Arc<[Segment]>,
    fused: Fused,
}

/// Weights laid out for the forward pass: Q/K/V of all heads side by side,
/// in raw and fake-quantized form.
#[derive(Debug, Clone, PartialEq)]
struct Fused {
    qkv: Vec<f32>,
    qkv_q: Vec<f32>,
    wo_q: Vec<f32>,
    fc1_q: Vec<f32>,
    fc2_q: Vec<f32>,
}

impl Block {
    pub fn query_weight(&self, head: usize) -> &Tensor {
        &self.wq[head]
    }

    pub fn key_weight(&self, head: usize) -> &Tensor {
        &self.wk[head]
    }

    pub fn value_weight(&self, head: usize) -> &Tensor {
        &self.wv[head]
    }

    pub fn output_weight(&self) -> &Tensor {
        &self.wo
    }

    pub fn fc1(&self) -> (&Tensor, &[f32]) {
        (&self.fc1, &self.fc1_bias)
    }

    pub fn fc2(&self) -> (&Tensor, &[f32]) {
        (&self.fc2, &self.fc2_bias)
    }

    pub fn ln1(&self) -> (&[f32], &[f32]) {
        (&self.ln1_gamma, &self.ln1_beta)
    }

    pub fn ln2(&self) -> (&[f32], &[f32]) {
        (&self.ln2_gamma, &self.ln2_beta)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn params(&self, point: Point) -> &QuantParams {
        &self.params[self.index_of(point)]
    }

    /// Weight tensor behind a weight point.
    pub fn weight(&self, point: Point) -> Option<&Tensor> {
        match point {
            Point::QueryWeight(h) => self.wq.get(h),
            Point::KeyWeight(h) => self.wk.get(h),
            Point::ValueWeight(h) => self.wv.get(h),
            Point::OutputWeight => Some(&self.wo),
            Point::Fc1Weight => Some(&self.fc1),
            Point::Fc2Weight => Some(&self.fc2),
            _ => None,
        }
    }

    fn index_of(&self, point: Point) -> usize {
        point.index(self.wq.len())
    }

    fn weight_q(&self, point: Point) -> Vec<f32> {
        let w = self.weight(point).expect("weight point");
        let p = self.params(point);
        let mut out = w.data().to_vec();
        let cols = w.shape()[1];
        fake_quant_columns(&mut out, cols, p.scale(), p.bits());
        out
    }

    fn refresh(&mut self) {
        let heads = self.wq.len();
        let d = self.wo.shape()[0];
        let dk = d / heads;
        let mut qkv = vec![0.0; d * 3 * d];
        let mut qkv_q = vec![0.0; d * 3 * d];
        for h in 0..heads {
            for (slot, point) in [
                (0, Point::QueryWeight(h)),
                (1, Point::KeyWeight(h)),
                (2, Point::ValueWeight(h)),
            ] {
                let raw = self.weight(point).expect("weight").data().to_vec();
                let q = self.weight_q(point);
                let col0 = slot * d + h * dk;
                for r in 0..d {
                    qkv[r * 3 * d + col0..r * 3 * d + col0 + dk]
                        .copy_from_slice(&raw[r * dk..(r + 1) * dk]);
                    qkv_q[r * 3 * d + col0..r * 3 * d + col0 + dk]
                        .copy_from_slice(&q[r * dk..(r + 1) * dk]);
                }
            }
        }
        self.fused = Fused {
            qkv,
            qkv_q,
            wo_q: self.weight_q(Point::OutputWeight),
            fc1_q: self.weight_q(Point::Fc1Weight),
            fc2_q: self.weight_q(Point::Fc2Weight),
        };
    }

    fn scales(&self) -> Vec<f32> {
        self.params
            .iter()
            .flat_map(|p| p.scale().iter().copied())
            .collect()
    }

    fn set_scales(&mut self, values: &[f32]) -> Result<()> {
        let expect: usize = self.layout.iter().map(|s| s.len).sum();
        if values.len() != expect {
            return Err(Error::dim(format!(
                "block scale vector has {} elements, block needs {expect}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::param(format!("scale element {bad} is not positive")));
        }
        for (seg, params) in self.layout.iter().zip(self.params.iter_mut()) {
            params.set_scale(&values[seg.offset..seg.offset + seg.len])?;
        }
        self.refresh();
        Ok(())
    }

    #[inline(always)]
    fn act(&self, buf: &mut [f32], point: Point, quantized: bool) {
        if !quantized {
            return;
        }
        let p = self.params(point);
        if point.is_log2() {
            fake_quant_log2_slice(buf, p.scale()[0], p.bits());
        } else {
            fake_quant_uniform_slice(buf, p.scale()[0], p.bits());
        }
    }

    /// Applies the block in place to `x: [batch·tokens × d]`.
    #[allow(clippy::too_many_arguments)]
    fn apply(
        &self,
        index: usize,
        cfg: &ViTConfig,
        x: &mut [f32],
        batch: usize,
        quantized: bool,
        scratch: &mut Scratch,
        observer: Observer<'_>,
    ) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { self.apply_avx2(index, cfg, x, batch, quantized, scratch, observer) };
        }
        self.apply_body(index, cfg, x, batch, quantized, scratch, observer)
    }

    // Same code with wider vectors. No FMA, so results are unchanged.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn apply_avx2(
        &self,
        index: usize,
        cfg: &ViTConfig,
        x: &mut [f32],
        batch: usize,
        quantized: bool,
        scratch: &mut Scratch,
        observer: Observer<'_>,
    ) {
        self.apply_body(index, cfg, x, batch, quantized, scratch, observer)
    }

    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn apply_body(
        &self,
        index: usize,
        cfg: &ViTConfig,
        x: &mut [f32],
        batch: usize,
        quantized: bool,
        scratch: &mut Scratch,
        mut observer: Observer<'_>,
    ) {
        let (t, d, heads) = (cfg.tokens, cfg.embed_dim, cfg.heads);
        let dk = d / heads;
        let hidden = cfg.hidden_dim();
        let rows = batch * t;
        let mut observe = |tap: Tap, v: &[f32]| {
            if let Some(obs) = observer.as_mut() {
                obs(index, tap, v);
            }
        };

        let Scratch {
            h,
            qkv,
            cat,
            proj,
            f1,
            f2,
            q,
            k,
            kt,
            v,
            scores,
            head_out,
        } = scratch;
        let h = sized(h, rows * d);
        let qkv = sized(qkv, rows * 3 * d);
        let cat = sized(cat, rows * d);
        let proj = sized(proj, rows * d);
        let f1 = sized(f1, rows * hidden);
        let f2 = sized(f2, rows * d);
        let (q, k, kt, v) = (
            sized(q, t * dk),
            sized(k, t * dk),
            sized(kt, t * dk),
            sized(v, t * dk),
        );
        let scores = sized(scores, t * t);
        let head_out = sized(head_out, t * dk);

        // Attention.
        for (row, out) in x.chunks_exact(d).zip(h.chunks_exact_mut(d)) {
            layernorm_row(row, &self.ln1_gamma, &self.ln1_beta, LAYERNORM_EPS, out);
        }
        let qkv_w = if quantized {
            &self.fused.qkv_q
        } else {
            &self.fused.qkv
        };
        matmul_into(h, qkv_w, qkv, rows, d, 3 * d);

        let inv_sqrt_dk = 1.0 / (dk as f32).sqrt();
        for s in 0..batch {
            let sample = &qkv[s * t * 3 * d..(s + 1) * t * 3 * d];
            for hd in 0..heads {
                for (slot, buf) in [(0, &mut *q), (1, &mut *k), (2, &mut *v)] {
                    let col0 = slot * d + hd * dk;
                    for r in 0..t {
                        buf[r * dk..(r + 1) * dk]
                            .copy_from_slice(&sample[r * 3 * d + col0..r * 3 * d + col0 + dk]);
                    }
                }
                observe(Tap::Act(Point::Query(hd)), q);
                observe(Tap::Act(Point::Key(hd)), k);
                observe(Tap::Act(Point::Value(hd)), v);
                self.act(q, Point::Query(hd), quantized);
                self.act(k, Point::Key(hd), quantized);
                self.act(v, Point::Value(hd), quantized);

                for r in 0..t {
                    for c in 0..dk {
                        kt[c * t + r] = k[r * dk + c];
                    }
                }
                matmul_into(q, kt, scores, t, dk, t);
                scores.iter_mut().for_each(|x| *x *= inv_sqrt_dk);
                observe(Tap::Act(Point::Scores(hd)), scores);
                self.act(scores, Point::Scores(hd), quantized);
                for row in scores.chunks_exact_mut(t) {
                    softmax_in_place(row);
                }
                observe(Tap::Act(Point::Probs(hd)), scores);
                self.act(scores, Point::Probs(hd), quantized);

                matmul_into(scores, v, head_out, t, t, dk);
                observe(Tap::Act(Point::HeadOut(hd)), head_out);
                self.act(head_out, Point::HeadOut(hd), quantized);
                for r in 0..t {
                    let dst = (s * t + r) * d + hd * dk;
                    cat[dst..dst + dk].copy_from_slice(&head_out[r * dk..(r + 1) * dk]);
                }
            }
        }
        let wo = if quantized {
            &self.fused.wo_q
        } else {
            self.wo.data()
        };
        matmul_into(cat, wo, proj, rows, d, d);
        observe(Tap::Act(Point::Projection), proj);
        self.act(proj, Point::Projection, quantized);
        x.iter_mut().zip(proj.iter()).for_each(|(a, b)| *a += b);

        // MLP.
        for (row, out) in x.chunks_exact(d).zip(h.chunks_exact_mut(d)) {
            layernorm_row(row, &self.ln2_gamma, &self.ln2_beta, LAYERNORM_EPS, out);
        }
        observe(Tap::Fc1Input, h);
        let fc1 = if quantized {
            &self.fused.fc1_q
        } else {
            self.fc1.data()
        };
        matmul_into(h, fc1, f1, rows, d, hidden);
        for row in f1.chunks_exact_mut(hidden) {
            for (a, b) in row.iter_mut().zip(&self.fc1_bias) {
                *a = gelu_scalar(*a + b);
            }
        }
        observe(Tap::Act(Point::Gelu), f1);
        if quantized && !self.params(Point::Gelu).is_passthrough() {
            f1.iter_mut().for_each(|a| *a += GELU_LOG2_OFFSET);
            self.act(f1, Point::Gelu, true);
            f1.iter_mut().for_each(|a| *a -= GELU_LOG2_OFFSET);
        }
        observe(Tap::Fc2Input, f1);
        let fc2 = if quantized {
            &self.fused.fc2_q
        } else {
            self.fc2.data()
        };
        matmul_into(f1, fc2, f2, rows, hidden, d);
        for row in f2.chunks_exact_mut(d) {
            row.iter_mut()
                .zip(&self.fc2_bias)
                .for_each(|(a, b)| *a += b);
        }
        observe(Tap::Act(Point::Fc2Out), f2);
        self.act(f2, Point::Fc2Out, quantized);
        x.iter_mut().zip(f2.iter()).for_each(|(a, b)| *a += b);
    }
}

/// Work buffers reused across blocks of one forward pass.
#[derive(Debug, Default)]
struct Scratch {
    h: Vec<f32>,
    qkv: Vec<f32>,
    cat: Vec<f32>,
    proj: Vec<f32>,
    f1: Vec<f32>,
    f2: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    kt: Vec<f32>,
    v: Vec<f32>,
    scores: Vec<f32>,
    head_out: Vec<f32>,
}

fn sized(buf: &mut Vec<f32>, len: usize) -> &mut [f32] {
    buf.resize(len, 0.0);
    buf
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ViTConfig,
    blocks: Vec<Block>,
    head_weight: Tensor,
    head_bias: Vec<f32>,
}

impl Model {
    /// Random model: Gaussian weights with std `1/sqrt(d)`, zero biases, unit
    /// LayerNorm, MinMax weight scales and unit activation scales (run
    /// [`Model::calibrate`] to fit those).
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let config = config.with_resolved_mlp();
        let (d, heads, hidden) = (config.embed_dim, config.heads, config.hidden_dim());
        let dk = config.head_dim();
        let std = 1.0 / (d as f32).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |shape: &[usize]| -> Tensor {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            Tensor::new(shape.to_vec(), data).expect("positive dims")
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let wq = (0..heads).map(|_| gauss(&[d, dk])).collect();
            let wk = (0..heads).map(|_| gauss(&[d, dk])).collect();
            let wv = (0..heads).map(|_| gauss(&[d, dk])).collect();
            let wo = gauss(&[d, d]);
            let fc1 = gauss(&[d, hidden]);
            let fc2 = gauss(&[hidden, d]);
            blocks.push(Block::assemble(
                &config,
                BlockWeights {
                    wq,
                    wk,
                    wv,
                    wo,
                    fc1,
                    fc1_bias: vec![0.0; hidden],
                    fc2,
                    fc2_bias: vec![0.0; d],
                    ln1: (vec![1.0; d], vec![0.0; d]),
                    ln2: (vec![1.0; d], vec![0.0; d]),
                },
                None,
            )?);
        }
        let head_weight = gauss(&[d, config.classes]);
        Ok(Self {
            config,
            blocks,
            head_weight,
            head_bias: vec![0.0; config.classes],
        })
    }

    /// [`Model::init`] followed by activation calibration when a batch is given.
    pub fn init_calibrated(config: ViTConfig, seed: u64, calib: Option<&Tensor>) -> Result<Self> {
        let mut model = Self::init(config, seed)?;
        if let Some(batch) = calib {
            model.calibrate(batch)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> Result<&Block> {
        self.blocks
            .get(index)
            .ok_or_else(|| Error::param(format!("block {index} out of range")))
    }

    pub fn head(&self) -> (&Tensor, &[f32]) {
        (&self.head_weight, &self.head_bias)
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        match input.shape() {
            &[b, t, d] if t == self.config.tokens && d == self.config.embed_dim => Ok(b),
            s => Err(Error::dim(format!(
                "input shape {s:?}, expected [batch, {}, {}]",
                self.config.tokens, self.config.embed_dim
            ))),
        }
    }

    pub fn forward(&self, input: &Tensor, quantized: bool) -> Result<Tensor> {
        let batch = self.check_input(input)?;
        let mut x = input.data().to_vec();
        self.run_blocks(0, &mut x, batch, quantized, None);
        self.classify(&x, batch)
    }

    /// Residual stream entering `block` (`block == blocks` gives the final
    /// stream before pooling).
    pub fn hidden_before(&self, block: usize, input: &Tensor, quantized: bool) -> Result<Vec<f32>> {
        let batch = self.check_input(input)?;
        if block > self.config.blocks {
            return Err(Error::param(format!("block {block} out of range")));
        }
        let mut x = input.data().to_vec();
        let mut scratch = Scratch::default();
        for (i, b) in self.blocks[..block].iter().enumerate() {
            b.apply(
                i,
                &self.config,
                &mut x,
                batch,
                quantized,
                &mut scratch,
                None,
            );
        }
        Ok(x)
    }

    /// Residual stream after every block.
    pub fn hidden_states(&self, input: &Tensor, quantized: bool) -> Result<Vec<Vec<f32>>> {
        let batch = self.check_input(input)?;
        let mut x = input.data().to_vec();
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut scratch = Scratch::default();
        for (i, b) in self.blocks.iter().enumerate() {
            b.apply(
                i,
                &self.config,
                &mut x,
                batch,
                quantized,
                &mut scratch,
                None,
            );
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Runs blocks `start..` on a residual stream produced by
    /// [`Model::hidden_before`] and returns logits.
    pub fn forward_from(&self, start: usize, hidden: &[f32], quantized: bool) -> Result<Tensor> {
        let row = self.config.tokens * self.config.embed_dim;
        if hidden.is_empty() || hidden.len() % row != 0 {
            return Err(Error::dim(format!(
                "hidden stream of {} values is not a whole number of samples",
                hidden.len()
            )));
        }
        if start > self.config.blocks {
            return Err(Error::param(format!("block {start} out of range")));
        }
        let batch = hidden.len() / row;
        let mut x = hidden.to_vec();
        self.run_blocks(start, &mut x, batch, quantized, None);
        self.classify(&x, batch)
    }

    fn run_blocks(
        &self,
        start: usize,
        x: &mut [f32],
        batch: usize,
        quantized: bool,
        mut observer: Observer<'_>,
    ) {
        let mut scratch = Scratch::default();
        for (i, block) in self.blocks.iter().enumerate().skip(start) {
            let obs: Observer<'_> = match observer.as_mut() {
                Some(o) => Some(&mut **o),
                None => None,
            };
            block.apply(i, &self.config, x, batch, quantized, &mut scratch, obs);
        }
    }

    fn classify(&self, x: &[f32], batch: usize) -> Result<Tensor> {
        let (t, d) = (self.config.tokens, self.config.embed_dim);
        let mut pooled = vec![0.0f32; batch * d];
        for (sample, out) in x.chunks_exact(t * d).zip(pooled.chunks_exact_mut(d)) {
            for tok in sample.chunks_exact(d) {
                out.iter_mut().zip(tok).for_each(|(a, b)| *a += b);
            }
            out.iter_mut().for_each(|a| *a /= t as f32);
        }
        let c = self.config.classes;
        let mut logits = vec![0.0f32; batch * c];
        matmul_into(&pooled, self.head_weight.data(), &mut logits, batch, d, c);
        for row in logits.chunks_exact_mut(c) {
            row.iter_mut()
                .zip(&self.head_bias)
                .for_each(|(a, b)| *a += b);
        }
        Tensor::new(vec![batch, c], logits)
    }

    /// Full-precision forward pass reporting every tap to `observer`.
    pub fn observe(
        &self,
        input: &Tensor,
        observer: &mut dyn FnMut(usize, Tap, &[f32]),
    ) -> Result<()> {
        let batch = self.check_input(input)?;
        let mut x = input.data().to_vec();
        self.run_blocks(0, &mut x, batch, false, Some(observer));
        Ok(())
    }

    /// Fits activation scales on a calibration batch from full-precision
    /// statistics: MinMax for uniform points, the observed maximum for log2
    /// points.
    pub fn calibrate(&mut self, calib: &Tensor) -> Result<()> {
        let heads = self.config.heads;
        let points = Point::canonical(heads);
        let mut peaks = vec![vec![0.0f32; points.len()]; self.config.blocks];
        self.observe(calib, &mut |block, tap, values| {
            let Tap::Act(point) = tap else { return };
            let idx = point.index(heads);
            let peak = if point == Point::Gelu {
                values
                    .iter()
                    .fold(0.0f32, |m, v| m.max(v + GELU_LOG2_OFFSET))
            } else if point.is_log2() {
                values.iter().fold(0.0f32, |m, v| m.max(*v))
            } else {
                values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
            };
            peaks[block][idx] = peaks[block][idx].max(peak);
        })?;
        let bits = self.config.activation_bits;
        for (block, block_peaks) in self.blocks.iter_mut().zip(&peaks) {
            for (i, point) in points.iter().enumerate() {
                if point.is_weight() {
                    continue;
                }
                let peak = block_peaks[i];
                let scale = if !(peak > 0.0 && peak.is_finite()) {
                    1.0
                } else if point.is_log2() {
                    peak
                } else {
                    peak / max_code(Scheme::Uniform, bits.min(quant::MAX_SIMULATED_BITS)) as f32
                };
                block.params[i].set_scale(&[scale])?;
            }
            block.refresh();
        }
        Ok(())
    }

    /// Re-initializes every weight scale with `method`.
    pub fn init_weight_scales(&mut self, method: ScaleInit) -> Result<()> {
        let bits = self.config.weight_bits;
        let g = Granularity::PerChannel { axis: 1 };
        for block in &mut self.blocks {
            for i in 0..block.points.len() {
                let point = block.points[i];
                let Some(w) = block.weight(point) else {
                    continue;
                };
                let params = match method {
                    ScaleInit::MinMax => quant::init_scale_minmax(w, bits, g)?,
                    ScaleInit::Percentile(pct) => quant::init_scale_percentile(w, bits, pct, g)?,
                    ScaleInit::Omse => quant::init_scale_omse(w, bits, g)?,
                };
                block.params[i] = params;
            }
            block.refresh();
        }
        Ok(())
    }

    /// Corrects FC1/FC2 biases for the mean output shift caused by weight
    /// quantization, using full-precision layer inputs on `calib`.
    pub fn correct_biases(&mut self, calib: &Tensor) -> Result<()> {
        let (d, hidden) = (self.config.embed_dim, self.config.hidden_dim());
        let mut sums = vec![(vec![0.0f64; d], vec![0.0f64; hidden], 0usize); self.config.blocks];
        self.observe(calib, &mut |block, tap, values| {
            let (fc1_sum, fc2_sum, rows) = &mut sums[block];
            match tap {
                Tap::Fc1Input => {
                    for row in values.chunks_exact(d) {
                        fc1_sum
                            .iter_mut()
                            .zip(row)
                            .for_each(|(s, v)| *s += *v as f64);
                    }
                    *rows += values.len() / d;
                }
                Tap::Fc2Input => {
                    for row in values.chunks_exact(hidden) {
                        fc2_sum
                            .iter_mut()
                            .zip(row)
                            .for_each(|(s, v)| *s += *v as f64);
                    }
                }
                Tap::Act(_) => {}
            }
        })?;
        for (block, (fc1_sum, fc2_sum, rows)) in self.blocks.iter_mut().zip(sums) {
            if rows == 0 {
                return Err(Error::EmptyCalibration);
            }
            let mean1: Vec<f64> = fc1_sum.iter().map(|s| s / rows as f64).collect();
            let mean2: Vec<f64> = fc2_sum.iter().map(|s| s / rows as f64).collect();
            block.fc1_bias =
                corrected_bias(&block.fc1, &block.fused.fc1_q, &block.fc1_bias, &mean1);
            block.fc2_bias =
                corrected_bias(&block.fc2, &block.fused.fc2_q, &block.fc2_bias, &mean2);
        }
        Ok(())
    }

    pub fn block_scales(&self, block: usize) -> Result<BlockScales> {
        let b = self.block(block)?;
        BlockScales::new(b.scales(), Arc::clone(&b.layout))
    }

    pub fn set_block_scales(&mut self, block: usize, scales: &[f32]) -> Result<()> {
        let blocks = self.blocks.len();
        self.blocks
            .get_mut(block)
            .ok_or_else(|| Error::param(format!("block {block} out of range ({blocks} blocks)")))?
            .set_scales(scales)
    }

    /// Changes the weight or activation bit-width of every point, keeping the
    /// current scales.
    pub fn set_bits(&mut self, weight_bits: u8, activation_bits: u8) -> Result<()> {
        let mut cfg = self.config;
        cfg.weight_bits = weight_bits;
        cfg.activation_bits = activation_bits;
        cfg.validate()?;
        self.config = cfg;
        for block in &mut self.blocks {
            for (point, params) in block.points.iter().zip(block.params.iter_mut()) {
                let bits = if point.is_weight() {
                    weight_bits
                } else {
                    activation_bits
                };
                *params = params.with_bits(bits)?;
            }
            block.refresh();
        }
        Ok(())
    }

    /// SHA-256 of the serialized model.
    pub fn content_hash(&self) -> String {
        io::content_hash(&io::to_bytes(self))
    }
}

fn corrected_bias(w: &Tensor, wq: &[f32], bias: &[f32], mean: &[f64]) -> Vec<f32> {
    let cols = w.shape()[1];
    let wd = w.data();
    (0..cols)
        .map(|j| {
            let shift: f64 = mean
                .iter()
                .enumerate()
                .map(|(i, m)| (wd[i * cols + j] - wq[i * cols + j]) as f64 * m)
                .sum();
            (bias[j] as f64 + shift) as f32
        })
        .collect()
}

pub(crate) struct BlockWeights {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
    pub fc1: Tensor,
    pub fc1_bias: Vec<f32>,
    pub fc2: Tensor,
    pub fc2_bias: Vec<f32>,
    pub ln1: (Vec<f32>, Vec<f32>),
    pub ln2: (Vec<f32>, Vec<f32>),
}

impl Block {
    /// Builds a block with its point table. Weight scales come from MinMax
    /// unless `scales` (one vector per canonical point) is given.
    pub(crate) fn assemble(
        cfg: &ViTConfig,
        w: BlockWeights,
        scales: Option<Vec<Vec<f32>>>,
    ) -> Result<Self> {
        let (d, heads, hidden) = (cfg.embed_dim, cfg.heads, cfg.hidden_dim());
        let dk = d / heads;
        let expect = |t: &Tensor, shape: &[usize], what: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::dim(format!(
                    "{what} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        if w.wq.len() != heads || w.wk.len() != heads || w.wv.len() != heads {
            return Err(Error::dim("per-head weight count does not match heads"));
        }
        for t in w.wq.iter().chain(&w.wk).chain(&w.wv) {
            expect(t, &[d, dk], "head projection")?;
        }
        expect(&w.wo, &[d, d], "output projection")?;
        expect(&w.fc1, &[d, hidden], "fc1")?;
        expect(&w.fc2, &[hidden, d], "fc2")?;
        let vec_lens = [
            (w.fc1_bias.len(), hidden),
            (w.fc2_bias.len(), d),
            (w.ln1.0.len(), d),
            (w.ln1.1.len(), d),
            (w.ln2.0.len(), d),
            (w.ln2.1.len(), d),
        ];
        if vec_lens.iter().any(|(a, b)| a != b) {
            return Err(Error::dim("bias or layernorm vector length mismatch"));
        }

        let points = Point::canonical(heads);
        let mut block = Block {
            wq: w.wq,
            wk: w.wk,
            wv: w.wv,
            wo: w.wo,
            fc1: w.fc1,
            fc1_bias: w.fc1_bias,
            fc2: w.fc2,
            fc2_bias: w.fc2_bias,
            ln1_gamma: w.ln1.0,
            ln1_beta: w.ln1.1,
            ln2_gamma: w.ln2.0,
            ln2_beta: w.ln2.1,
            points: points.clone(),
            params: Vec::with_capacity(points.len()),
            layout: Arc::from(Vec::new()),
            fused: Fused {
                qkv: Vec::new(),
                qkv_q: Vec::new(),
                wo_q: Vec::new(),
                fc1_q: Vec::new(),
                fc2_q: Vec::new(),
            },
        };
        let mut segments = Vec::with_capacity(points.len());
        let mut offset = 0;
        for (i, &point) in points.iter().enumerate() {
            let params = match block.weight(point) {
                Some(t) => {
                    let g = Granularity::PerChannel { axis: 1 };
                    match scales.as_ref() {
                        Some(s) => {
                            QuantParams::new(s[i].clone(), cfg.weight_bits, g, Scheme::Uniform)?
                        }
                        None => quant::init_scale_minmax(t, cfg.weight_bits, g)?,
                    }
                }
                None => {
                    let scheme = if point.is_log2() {
                        Scheme::Log2
                    } else {
                        Scheme::Uniform
                    };
                    let s = scales.as_ref().map_or_else(|| vec![1.0], |s| s[i].clone());
                    QuantParams::new(s, cfg.activation_bits, Granularity::PerTensor, scheme)?
                }
            };
            if let Some(t) = block.weight(point) {
                if params.scale().len() != t.shape()[1] {
                    return Err(Error::dim(format!(
                        "point {point} has {} scales for {} channels",
                        params.scale().len(),
                        t.shape()[1]
                    )));
                }
            }
            segments.push(Segment {
                point,
                offset,
                len: params.scale().len(),
            });
            offset += params.scale().len();
            block.params.push(params);
        }
        block.layout = Arc::from(segments);
        block.refresh();
        Ok(block)
    }
}

impl Model {
    pub(crate) fn from_parts(
        config: ViTConfig,
        blocks: Vec<Block>,
        head_weight: Tensor,
        head_bias: Vec<f32>,
    ) -> Result<Self> {
        config.validate()?;
        if blocks.len() != config.blocks {
            return Err(Error::dim("block count does not match config"));
        }
        if head_weight.shape() != [config.embed_dim, config.classes]
            || head_bias.len() != config.classes
        {
            return Err(Error::dim("classifier shape does not match config"));
        }
        Ok(Self {
            config: config.with_resolved_mlp(),
            blocks,
            head_weight,
            head_bias,
        })
    }

    pub(crate) fn block_scale_vectors(&self, block: usize) -> Vec<(Point, &[f32])> {
        let b = &self.blocks[block];
        b.points
            .iter()
            .zip(&b.params)
            .map(|(p, q)| (*p, q.scale()))
            .collect()
    }
}
