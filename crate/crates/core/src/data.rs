//! Datasets of pre-tokenized samples: the EVQD file format, a synthetic
//! class-conditional generator and deterministic batch iteration.
//!
//! EVQD layout (little-endian):
//!
//! ```text
//! "EVQD" | version u8 | count u32 | tokens u32 | dim u32 | has_labels u8
//! count·tokens·dim × f32 | [count × u16 labels]
//! ```

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVQD";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 4 + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Option<Vec<u16>>,
}

impl Dataset {
    /// `samples` has shape `[count, tokens, dim]`.
    pub fn new(samples: Tensor, labels: Option<Vec<u16>>) -> Result<Self> {
        let count = match samples.shape() {
            [n, _, _] => *n,
            s => {
                return Err(Error::dim(format!(
                    "dataset samples must be 3-d, got {s:?}"
                )))
            }
        };
        if let Some(l) = &labels {
            if l.len() != count {
                return Err(Error::dim(format!(
                    "{} labels for {count} samples",
                    l.len()
                )));
            }
        }
        Ok(Self { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.samples.shape()[2]
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    fn sample_len(&self) -> usize {
        self.tokens() * self.dim()
    }

    /// Samples `range` as a new dataset.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::param(format!(
                "sample range {range:?} invalid for {} samples",
                self.len()
            )));
        }
        let n = self.sample_len();
        let data = self.samples.data()[range.start * n..range.end * n].to_vec();
        let samples = Tensor::new(vec![range.len(), self.tokens(), self.dim()], data)?;
        let labels = self.labels.as_ref().map(|l| l[range].to_vec());
        Self::new(samples, labels)
    }

    /// Gathers the given sample indices into a `[len, tokens, dim]` batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::param(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.samples.data()[i * n..(i + 1) * n]);
        }
        Tensor::new(vec![indices.len(), self.tokens(), self.dim()], data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * self.samples.numel());
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        for v in [self.len(), self.tokens(), self.dim()] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.push(u8::from(self.labels.is_some()));
        for v in self.samples.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for l in self.labels.iter().flatten() {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(bytes.len() as u64, "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected EVQD"));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(
                4,
                format!("unsupported version {}", bytes[4]),
            ));
        }
        let word =
            |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        let (count, tokens, dim) = (word(5), word(9), word(13));
        let has_labels = match bytes[17] {
            0 => false,
            1 => true,
            f => return Err(Error::format(17, format!("label flag {f} is not 0 or 1"))),
        };
        if count == 0 || tokens == 0 || dim == 0 {
            return Err(Error::format(5, "count, tokens and dim must be positive"));
        }
        let values = count
            .checked_mul(tokens)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Error::format(5, "dataset dimensions overflow"))?;
        let payload_end = values
            .checked_mul(4)
            .and_then(|v| v.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::format(5, "dataset dimensions overflow"))?;
        let expected = payload_end + if has_labels { 2 * count } else { 0 };
        if bytes.len() < expected {
            let at = if bytes.len() < payload_end {
                "sample payload"
            } else {
                "labels"
            };
            return Err(Error::format(bytes.len() as u64, format!("truncated {at}")));
        }
        if bytes.len() > expected {
            return Err(Error::format(
                expected as u64,
                "trailing bytes after payload",
            ));
        }
        let data = bytes[HEADER_LEN..payload_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = has_labels.then(|| {
            bytes[payload_end..expected]
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
                .collect()
        });
        Self::new(Tensor::new(vec![count, tokens, dim], data)?, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Per-class mean patterns of the synthetic generator, each a random
/// direction in the `tokens·dim` sample space scaled to unit RMS per element.
pub fn class_means(tokens: usize, dim: usize, classes: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tokens * dim;
    (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let gain = (n as f64).sqrt() / norm;
            v.iter().map(|x| (x * gain) as f32).collect()
        })
        .collect()
}

/// Class-conditional Gaussian samples: sample `i` has class `i mod classes`
/// and equals its class mean plus `N(0, 1) / separation` noise.
pub fn synth_dataset(
    count: usize,
    tokens: usize,
    dim: usize,
    classes: usize,
    seed: u64,
    separation: f32,
) -> Result<Dataset> {
    if count == 0 || tokens == 0 || dim == 0 {
        return Err(Error::param("count, tokens and dim must be positive"));
    }
    if classes == 0 || classes > usize::from(u16::MAX) + 1 {
        return Err(Error::param(format!("class count {classes} out of range")));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::param(format!(
            "separation {separation} must be positive"
        )));
    }
    let means = class_means(tokens, dim, classes, seed);
    // Noise uses its own stream so the class means do not depend on count.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_DA7A);
    let n = tokens * dim;
    let mut data = Vec::with_capacity(count * n);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        labels.push(class as u16);
        for &m in &means[class] {
            let z: f32 = StandardNormal.sample(&mut rng);
            data.push(m + z / separation);
        }
    }
    Dataset::new(Tensor::new(vec![count, tokens, dim], data)?, Some(labels))
}

/// Batch iteration settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    /// `None` keeps the file order.
    pub shuffle_seed: Option<u64>,
    pub drop_ragged: bool,
}

impl BatchPlan {
    pub fn sequential(batch_size: usize) -> Self {
        Self {
            batch_size,
            shuffle_seed: None,
            drop_ragged: true,
        }
    }

    /// Sample indices of every batch, a pure function of
    /// `(shuffle_seed, count, batch_size)`.
    pub fn batches(&self, count: usize) -> Result<Vec<Vec<usize>>> {
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be positive"));
        }
        let mut order: Vec<usize> = (0..count).collect();
        if let Some(seed) = self.shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(order
            .chunks(self.batch_size)
            .filter(|c| !self.drop_ragged || c.len() == self.batch_size)
            .map(<[usize]>::to_vec)
            .collect())
    }
}

/// Materializes the batches of `plan` over `dataset`.
pub fn iterate(dataset: &Dataset, plan: &BatchPlan) -> Result<Vec<Tensor>> {
    plan.batches(dataset.len())?
        .iter()
        .map(|idx| dataset.gather(idx))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_mean_accuracy(ds: &Dataset, classes: usize) -> f64 {
        let n = ds.tokens() * ds.dim();
        let labels = ds.labels().unwrap();
        let mut means = vec![vec![0.0f64; n]; classes];
        let mut counts = vec![0usize; classes];
        for (i, &l) in labels.iter().enumerate() {
            let x = &ds.samples().data()[i * n..(i + 1) * n];
            means[l as usize]
                .iter_mut()
                .zip(x)
                .for_each(|(m, v)| *m += *v as f64);
            counts[l as usize] += 1;
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= *c as f64);
        }
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, &l)| {
                let x = &ds.samples().data()[i * n..(i + 1) * n];
                let dist = |m: &Vec<f64>| -> f64 {
                    m.iter().zip(x).map(|(a, b)| (a - *b as f64).powi(2)).sum()
                };
                let best = (0..classes)
                    .min_by(|a, b| dist(&means[*a]).total_cmp(&dist(&means[*b])))
                    .unwrap();
                best == l as usize
            })
            .count();
        correct as f64 / labels.len() as f64
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(20, 4, 8, 3, 7, 4.0).unwrap();
        let b = synth_dataset(20, 4, 8, 3, 7, 4.0).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = synth_dataset(20, 4, 8, 3, 8, 4.0).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn class_means_are_distinct() {
        let means = class_means(16, 32, 10, 3);
        for i in 0..10 {
            for j in i + 1..10 {
                let dot: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (*a as f64) * (*b as f64))
                    .sum();
                let na: f64 = means[i]
                    .iter()
                    .map(|a| (*a as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let nb: f64 = means[j]
                    .iter()
                    .map(|a| (*a as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dot / (na * nb) < 1.0 - 1e-3);
            }
        }
    }

    #[test]
    fn separated_classes_are_nearly_linearly_separable() {
        let ds = synth_dataset(512, 16, 32, 10, 1, 4.0).unwrap();
        assert!(nearest_mean_accuracy(&ds, 10) > 0.9);
    }

    #[test]
    fn prefix_of_larger_dataset_matches() {
        let small = synth_dataset(10, 2, 3, 4, 5, 2.0).unwrap();
        let big = synth_dataset(30, 2, 3, 4, 5, 2.0).unwrap();
        assert_eq!(big.slice(0..10).unwrap(), small);
    }

    #[test]
    fn bytes_round_trip() {
        let ds = synth_dataset(7, 3, 5, 2, 0, 1.0).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 7 * 3 * 5 * 4 + 7 * 2);
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);

        let unlabeled = Dataset::new(ds.samples().clone(), None).unwrap();
        let back = Dataset::from_bytes(&unlabeled.to_bytes()).unwrap();
        assert_eq!(back, unlabeled);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.evqd");
        let ds = synth_dataset(4, 2, 2, 2, 1, 1.0).unwrap();
        ds.save(&path).unwrap();
        let once = std::fs::read(&path).unwrap();
        Dataset::load(&path).unwrap().save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), once);
    }

    #[test]
    fn format_errors_carry_offsets() {
        let bytes = synth_dataset(4, 2, 2, 2, 1, 1.0).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(matches!(
            Dataset::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Dataset::from_bytes(cut),
            Err(Error::Format { offset, .. }) if offset == cut.len() as u64
        ));
        assert!(matches!(
            Dataset::from_bytes(&bytes[..10]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn batch_plans() {
        let plan = BatchPlan::sequential(32);
        let b = plan.batches(100).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|x| x.len() == 32));
        assert_eq!(b[1][0], 32);

        let keep = BatchPlan {
            drop_ragged: false,
            ..plan
        };
        assert_eq!(keep.batches(100).unwrap().last().unwrap().len(), 4);

        let shuffled = BatchPlan {
            shuffle_seed: Some(3),
            ..plan
        };
        assert_eq!(
            shuffled.batches(100).unwrap(),
            shuffled.batches(100).unwrap()
        );
        assert_ne!(shuffled.batches(100).unwrap(), b);
        assert!(BatchPlan::sequential(0).batches(10).is_err());
    }

    #[test]
    fn iterate_gathers_rows() {
        let ds = synth_dataset(6, 2, 3, 2, 4, 1.0).unwrap();
        let batches = iterate(&ds, &BatchPlan::sequential(2)).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].data(), &ds.samples().data()[24..36]);
    }
}
