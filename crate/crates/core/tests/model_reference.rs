//! The model forward pass checked against a straight-line reimplementation.

use evolq_core::data::synth_dataset;
use evolq_core::model::{Block, Model, Point, ViTConfig, GELU_LOG2_OFFSET, LAYERNORM_EPS};
use evolq_core::Tensor;

fn fq_uniform(x: f32, scale: f32, bits: u8) -> f32 {
    if bits == 32 {
        return x;
    }
    let qmax = ((1i64 << (bits - 1)) - 1) as f32;
    (x / scale).clamp(-qmax, qmax).round_ties_even() * scale
}

fn fq_log2(x: f32, scale: f32, bits: u8) -> f32 {
    if bits == 32 {
        return x;
    }
    let max_code = ((1u64 << bits) - 1) as f64;
    let x = x.max(0.0) as f64;
    let code = if x == 0.0 {
        max_code
    } else {
        (-(x / scale as f64).log2()).round().clamp(0.0, max_code)
    };
    (scale as f64 * (-code).exp2()) as f32
}

fn mat(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn ln(x: &[f32], g: &[f32], b: &[f32]) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().fold(0.0f32, |a, v| a + v) / n;
    let var = x.iter().fold(0.0f32, |a, v| a + (v - mean) * (v - mean)) / n;
    let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

fn gelu(x: f32) -> f32 {
    let u = 0.797_884_6 * (x + 0.044_715 * x * x * x);
    x / (1.0 + (-2.0 * u).exp())
}

fn weight(block: &Block, p: Point, q: bool) -> Vec<f32> {
    let w = block.weight(p).unwrap();
    let cols = w.shape()[1];
    let params = block.params(p);
    w.data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if q {
                fq_uniform(*v, params.scale()[i % cols], params.bits())
            } else {
                *v
            }
        })
        .collect()
}

fn act(block: &Block, p: Point, q: bool, xs: &mut [f32]) {
    if !q {
        return;
    }
    let params = block.params(p);
    let (s, b) = (params.scale()[0], params.bits());
    for x in xs {
        *x = match p {
            Point::Gelu if b != 32 => fq_log2(*x + GELU_LOG2_OFFSET, s, b) - GELU_LOG2_OFFSET,
            Point::Probs(_) => fq_log2(*x, s, b),
            _ => fq_uniform(*x, s, b),
        };
    }
}

fn reference(model: &Model, input: &Tensor, q: bool) -> Vec<f32> {
    let cfg = model.config();
    let (t, d, heads) = (cfg.tokens, cfg.embed_dim, cfg.heads);
    let dk = d / heads;
    let hid = cfg.hidden_dim();
    let batch = input.shape()[0];
    let mut logits = Vec::new();
    for s in 0..batch {
        let mut x = input.data()[s * t * d..(s + 1) * t * d].to_vec();
        for block in model.blocks() {
            let (g1, b1) = block.ln1();
            let h: Vec<f32> = x.chunks(d).flat_map(|r| ln(r, g1, b1)).collect();
            let mut cat = vec![0.0f32; t * d];
            for i in 0..heads {
                let mut qh = mat(&h, &weight(block, Point::QueryWeight(i), q), t, d, dk);
                let mut kh = mat(&h, &weight(block, Point::KeyWeight(i), q), t, d, dk);
                let mut vh = mat(&h, &weight(block, Point::ValueWeight(i), q), t, d, dk);
                act(block, Point::Query(i), q, &mut qh);
                act(block, Point::Key(i), q, &mut kh);
                act(block, Point::Value(i), q, &mut vh);
                let mut scores = vec![0.0f32; t * t];
                for a in 0..t {
                    for b in 0..t {
                        let mut acc = 0.0f32;
                        for c in 0..dk {
                            acc += qh[a * dk + c] * kh[b * dk + c];
                        }
                        scores[a * t + b] = acc * (1.0 / (dk as f32).sqrt());
                    }
                }
                act(block, Point::Scores(i), q, &mut scores);
                for row in scores.chunks_mut(t) {
                    let m = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b));
                    row.iter_mut().for_each(|v| *v = (*v - m).exp());
                    let sum: f64 = row.iter().map(|v| *v as f64).sum();
                    let inv = 1.0 / sum;
                    row.iter_mut().for_each(|v| *v = (*v as f64 * inv) as f32);
                }
                act(block, Point::Probs(i), q, &mut scores);
                let mut ho = mat(&scores, &vh, t, t, dk);
                act(block, Point::HeadOut(i), q, &mut ho);
                for r in 0..t {
                    cat[r * d + i * dk..r * d + (i + 1) * dk]
                        .copy_from_slice(&ho[r * dk..(r + 1) * dk]);
                }
            }
            let mut proj = mat(&cat, &weight(block, Point::OutputWeight, q), t, d, d);
            act(block, Point::Projection, q, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

            let (g2, b2) = block.ln2();
            let h: Vec<f32> = x.chunks(d).flat_map(|r| ln(r, g2, b2)).collect();
            let (_, bias1) = block.fc1();
            let mut f1 = mat(&h, &weight(block, Point::Fc1Weight, q), t, d, hid);
            for (i, v) in f1.iter_mut().enumerate() {
                *v = gelu(*v + bias1[i % hid]);
            }
            act(block, Point::Gelu, q, &mut f1);
            let (_, bias2) = block.fc2();
            let mut f2 = mat(&f1, &weight(block, Point::Fc2Weight, q), t, hid, d);
            for (i, v) in f2.iter_mut().enumerate() {
                *v += bias2[i % d];
            }
            act(block, Point::Fc2Out, q, &mut f2);
            x.iter_mut().zip(&f2).for_each(|(a, b)| *a += b);
        }
        let mut pooled = vec![0.0f32; d];
        for tok in x.chunks(d) {
            pooled.iter_mut().zip(tok).for_each(|(a, b)| *a += b);
        }
        pooled.iter_mut().for_each(|a| *a /= t as f32);
        let (hw, hb) = model.head();
        let out = mat(&pooled, hw.data(), 1, d, cfg.classes);
        logits.extend(out.iter().zip(hb).map(|(a, b)| a + b));
    }
    logits
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, v)| {
            if *v > bv {
                (i, *v)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[test]
fn matches_straight_line_reference() {
    let cfg = ViTConfig::default();
    let data = synth_dataset(8, cfg.tokens, cfg.embed_dim, cfg.classes, 21, 4.0).unwrap();
    let mut model = Model::init(cfg, 42).unwrap();
    model.calibrate(data.samples()).unwrap();
    for q in [false, true] {
        let got = model.forward(data.samples(), q).unwrap();
        let want = reference(&model, data.samples(), q);
        for (a, b) in got.data().iter().zip(&want) {
            // The model uses its own exp, a couple of ulps off std's.
            assert!(
                (a - b).abs() <= 1e-6 * (1.0 + b.abs()),
                "quantized={q}: {a} vs {b}"
            );
        }
    }
}

fn agreement(cfg: ViTConfig, seed: u64) -> f64 {
    let data = synth_dataset(768, cfg.tokens, cfg.embed_dim, cfg.classes, seed + 4, 4.0).unwrap();
    let calib = data.slice(0..256).unwrap();
    let eval = data.slice(256..768).unwrap();
    let model = Model::init_calibrated(cfg, seed, Some(calib.samples())).unwrap();
    let fp = model.forward(eval.samples(), false).unwrap();
    let q = model.forward(eval.samples(), true).unwrap();
    let c = cfg.classes;
    let agree = fp
        .data()
        .chunks(c)
        .zip(q.data().chunks(c))
        .filter(|(a, b)| argmax(a) == argmax(b))
        .count();
    agree as f64 / 512.0
}

// Log2 codes have power-of-two resolution at any bit-width, so the post-GELU
// and post-softmax points dominate the 8-bit error. Measured 0.86 to 0.94
// over seeds 1..=3; pinned below that range.
#[test]
fn eight_bit_agreement_regression() {
    let cfg = ViTConfig {
        weight_bits: 8,
        activation_bits: 8,
        ..ViTConfig::default()
    };
    for seed in 1..=3 {
        let rate = agreement(cfg, seed);
        assert!(rate >= 0.85, "seed {seed}: 8-bit agreement {rate}");
    }
}

#[test]
fn weight_only_eight_bit_agreement_exceeds_95_percent() {
    let cfg = ViTConfig {
        weight_bits: 8,
        activation_bits: 32,
        ..ViTConfig::default()
    };
    for seed in 1..=3 {
        let rate = agreement(cfg, seed);
        assert!(rate >= 0.95, "seed {seed}: weight-only agreement {rate}");
    }
}
