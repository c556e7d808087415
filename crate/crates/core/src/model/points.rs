//! The per-block table of quantization points and its flattened scale vector.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// One quantization point of a transformer block.
///
/// Weights are quantized per output channel; activations per tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Point {
    QueryWeight(usize),
    KeyWeight(usize),
    ValueWeight(usize),
    OutputWeight,
    Query(usize),
    Key(usize),
    Value(usize),
    Scores(usize),
    Probs(usize),
    HeadOut(usize),
    Projection,
    Fc1Weight,
    Fc2Weight,
    Gelu,
    Fc2Out,
}

impl Point {
    pub fn is_weight(self) -> bool {
        matches!(
            self,
            Point::QueryWeight(_)
                | Point::KeyWeight(_)
                | Point::ValueWeight(_)
                | Point::OutputWeight
                | Point::Fc1Weight
                | Point::Fc2Weight
        )
    }

    /// Post-softmax and post-GELU activations use log2 codes.
    pub fn is_log2(self) -> bool {
        matches!(self, Point::Probs(_) | Point::Gelu)
    }

    /// Whether the point belongs to the attention sub-block.
    pub fn is_attention(self) -> bool {
        !matches!(
            self,
            Point::Fc1Weight | Point::Fc2Weight | Point::Gelu | Point::Fc2Out
        )
    }

    /// Canonical order of a block with `heads` heads: attention weights,
    /// attention activations, then the MLP points.
    pub fn canonical(heads: usize) -> Vec<Point> {
        let mut out = Vec::with_capacity(9 * heads + 6);
        out.extend((0..heads).map(Point::QueryWeight));
        out.extend((0..heads).map(Point::KeyWeight));
        out.extend((0..heads).map(Point::ValueWeight));
        out.push(Point::OutputWeight);
        out.extend((0..heads).map(Point::Query));
        out.extend((0..heads).map(Point::Key));
        out.extend((0..heads).map(Point::Value));
        out.extend((0..heads).map(Point::Scores));
        out.extend((0..heads).map(Point::Probs));
        out.extend((0..heads).map(Point::HeadOut));
        out.push(Point::Projection);
        out.extend([
            Point::Fc1Weight,
            Point::Fc2Weight,
            Point::Gelu,
            Point::Fc2Out,
        ]);
        out
    }

    /// Position in [`Point::canonical`] for a block with `heads` heads.
    pub fn index(self, heads: usize) -> usize {
        let n = heads;
        match self {
            Point::QueryWeight(h) => h,
            Point::KeyWeight(h) => n + h,
            Point::ValueWeight(h) => 2 * n + h,
            Point::OutputWeight => 3 * n,
            Point::Query(h) => 3 * n + 1 + h,
            Point::Key(h) => 4 * n + 1 + h,
            Point::Value(h) => 5 * n + 1 + h,
            Point::Scores(h) => 6 * n + 1 + h,
            Point::Probs(h) => 7 * n + 1 + h,
            Point::HeadOut(h) => 8 * n + 1 + h,
            Point::Projection => 9 * n + 1,
            Point::Fc1Weight => 9 * n + 2,
            Point::Fc2Weight => 9 * n + 3,
            Point::Gelu => 9 * n + 4,
            Point::Fc2Out => 9 * n + 5,
        }
    }

    pub fn parse(name: &str) -> Option<Point> {
        let (kind, head) = match name.rsplit_once('.') {
            Some((k, h)) => (k, h.parse::<usize>().ok()),
            None => (name, None),
        };
        Some(match (kind, head) {
            ("wq", Some(h)) => Point::QueryWeight(h),
            ("wk", Some(h)) => Point::KeyWeight(h),
            ("wv", Some(h)) => Point::ValueWeight(h),
            ("q", Some(h)) => Point::Query(h),
            ("k", Some(h)) => Point::Key(h),
            ("v", Some(h)) => Point::Value(h),
            ("scores", Some(h)) => Point::Scores(h),
            ("probs", Some(h)) => Point::Probs(h),
            ("head", Some(h)) => Point::HeadOut(h),
            _ => match name {
                "wo" => Point::OutputWeight,
                "proj" => Point::Projection,
                "fc1" => Point::Fc1Weight,
                "fc2" => Point::Fc2Weight,
                "gelu" => Point::Gelu,
                "fc2_out" => Point::Fc2Out,
                _ => return None,
            },
        })
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Point::QueryWeight(h) => write!(f, "wq.{h}"),
            Point::KeyWeight(h) => write!(f, "wk.{h}"),
            Point::ValueWeight(h) => write!(f, "wv.{h}"),
            Point::OutputWeight => f.write_str("wo"),
            Point::Query(h) => write!(f, "q.{h}"),
            Point::Key(h) => write!(f, "k.{h}"),
            Point::Value(h) => write!(f, "v.{h}"),
            Point::Scores(h) => write!(f, "scores.{h}"),
            Point::Probs(h) => write!(f, "probs.{h}"),
            Point::HeadOut(h) => write!(f, "head.{h}"),
            Point::Projection => f.write_str("proj"),
            Point::Fc1Weight => f.write_str("fc1"),
            Point::Fc2Weight => f.write_str("fc2"),
            Point::Gelu => f.write_str("gelu"),
            Point::Fc2Out => f.write_str("fc2_out"),
        }
    }
}

/// Location of one point's scales inside a [`BlockScales`] vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub point: Point,
    pub offset: usize,
    pub len: usize,
}

/// Every scale element of one block, concatenated in canonical point order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScales {
    values: Vec<f32>,
    segments: Arc<[Segment]>,
}

impl BlockScales {
    pub fn new(values: Vec<f32>, segments: Arc<[Segment]>) -> Result<Self> {
        let expect: usize = segments.iter().map(|s| s.len).sum();
        if values.len() != expect {
            return Err(Error::dim(format!(
                "block scale vector has {} elements, layout needs {expect}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::param(format!("scale element {bad} is not positive")));
        }
        Ok(Self { values, segments })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn layout(&self) -> Arc<[Segment]> {
        Arc::clone(&self.segments)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        Self::new(values, self.layout())
    }

    /// Maps a flat index back to `(point, channel)`.
    pub fn locate(&self, index: usize) -> Option<(Point, usize)> {
        self.segments
            .iter()
            .find(|s| index >= s.offset && index < s.offset + s.len)
            .map(|s| (s.point, index - s.offset))
    }

    pub fn segment(&self, point: Point) -> Option<Segment> {
        self.segments.iter().copied().find(|s| s.point == point)
    }

    pub fn point_values(&self, point: Point) -> Option<&[f32]> {
        self.segment(point)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    /// Indices of the scale elements whose point satisfies `keep`, for
    /// experiments restricted to a subset (e.g. attention-only).
    pub fn indices_where(&self, keep: impl Fn(Point) -> bool) -> Vec<usize> {
        self.segments
            .iter()
            .filter(|s| keep(s.point))
            .flat_map(|s| s.offset..s.offset + s.len)
            .collect()
    }
}
