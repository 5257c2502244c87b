//! Dense five-axis containers laid out row-major over `(n, c, h, w, t)`.
//!
//! Time is the innermost axis so a single neuron's trace is a contiguous
//! slice of length `t`, and one spatial row of one channel is a contiguous
//! block of `w * t` values.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub t: usize,
}

impl Shape5 {
    pub fn new(n: usize, c: usize, h: usize, w: usize, t: usize) -> Result<Self> {
        let shape = Self { n, c, h, w, t };
        if shape.dims().contains(&0) {
            return Err(Error::Shape(format!("all extents must be >= 1, got {shape}")));
        }
        shape
            .dims()
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Shape(format!("element count of {shape} overflows")))?;
        Ok(shape)
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.n, self.c, self.h, self.w, self.t]
    }

    pub fn from_dims(d: [usize; 5]) -> Result<Self> {
        Self::new(d[0], d[1], d[2], d[3], d[4])
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w * self.t
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Neurons per sample, i.e. `c * h * w`.
    pub fn neurons(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Number of time traces (`n * c * h * w`).
    pub fn traces(&self) -> usize {
        self.n * self.neurons()
    }

    pub fn strides(&self) -> [usize; 5] {
        let t = 1;
        let w = self.t;
        let h = self.w * w;
        let c = self.h * h;
        let n = self.c * c;
        [n, c, h, w, t]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize, t: usize) -> usize {
        (((n * self.c + c) * self.h + h) * self.w + w) * self.t + t
    }

    /// Shape with each member of `axes` collapsed to extent 1.
    pub fn reduced(&self, axes: AxisSet) -> Shape5 {
        let mut d = self.dims();
        for axis in Axis::ALL {
            if axes.contains(axis) {
                d[axis as usize] = 1;
            }
        }
        Shape5 { n: d[0], c: d[1], h: d[2], w: d[3], t: d[4] }
    }

    pub fn with_t(&self, t: usize) -> Shape5 {
        Shape5 { t, ..*self }
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.n, self.c, self.h, self.w, self.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    N = 0,
    C = 1,
    H = 2,
    W = 3,
    T = 4,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::N, Axis::C, Axis::H, Axis::W, Axis::T];
}

/// Non-empty subset of the five axes a reduction runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AxisSet(u8);

impl AxisSet {
    pub fn new(axes: &[Axis]) -> Result<Self> {
        let bits = axes.iter().fold(0u8, |acc, &a| acc | (1 << a as u8));
        Self::from_bits(bits)
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits & 0b1_1111 == 0 || bits & !0b1_1111 != 0 {
            return Err(Error::Contract(format!("axis set must be a non-empty subset of NCHWT, got bits {bits:#07b}")));
        }
        Ok(Self(bits))
    }

    /// `X = W x H x N x T`: statistics per channel.
    pub fn batch_norm() -> Self {
        Self((1 << Axis::N as u8) | (1 << Axis::H as u8) | (1 << Axis::W as u8) | (1 << Axis::T as u8))
    }

    /// `X = W x H x C x T`: statistics per sample.
    pub fn layer_norm() -> Self {
        Self((1 << Axis::C as u8) | (1 << Axis::H as u8) | (1 << Axis::W as u8) | (1 << Axis::T as u8))
    }

    pub fn all() -> Self {
        Self(0b1_1111)
    }

    pub fn contains(&self, axis: Axis) -> bool {
        self.0 & (1 << axis as u8) != 0
    }

    pub fn bits(&self) -> u8 {
        self.0
    }

    /// Number of elements a reduction over this set combines for `shape`.
    pub fn count(&self, shape: &Shape5) -> usize {
        let d = shape.dims();
        Axis::ALL.iter().filter(|&&a| self.contains(a)).map(|&a| d[a as usize]).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogTensor {
    shape: Shape5,
    data: Vec<f64>,
}

impl AnalogTensor {
    pub fn zeros(shape: Shape5) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(shape: Shape5, value: f64) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape5, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} values supplied for shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value {} at flat index {i}", data[i])));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_vec_unchecked(shape: Shape5, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize, t: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w, t)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, t: usize, v: f64) {
        let i = self.shape.index(n, c, h, w, t);
        self.data[i] = v;
    }

    /// Time trace of trace index `i` (flattened `n, c, h, w`).
    pub fn trace(&self, i: usize) -> &[f64] {
        let t = self.shape.t;
        &self.data[i * t..(i + 1) * t]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &AnalogTensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(Self { shape: self.shape, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn add_assign(&mut self, other: &AnalogTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{} vs {}", self.shape, other.shape)));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Shape5) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        Ok(Self { shape, data: self.data })
    }
}

/// Binary spike trains. Stored one byte per entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeTensor {
    shape: Shape5,
    data: Vec<u8>,
}

impl SpikeTensor {
    pub fn zeros(shape: Shape5) -> Self {
        Self { shape, data: vec![0; shape.len()] }
    }

    pub fn from_vec(shape: Shape5, data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} values supplied for shape {shape} ({} elements)",
                data.len(),
                shape.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Contract(format!("spike entry {} at flat index {i} is not binary", data[i])));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize, t: usize) -> u8 {
        self.data[self.shape.index(n, c, h, w, t)]
    }

    /// Sets an entry to 1. Repeated sets saturate.
    #[inline]
    pub fn fire(&mut self, n: usize, c: usize, h: usize, w: usize, t: usize) {
        let i = self.shape.index(n, c, h, w, t);
        self.data[i] = 1;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_analog(&self) -> AnalogTensor {
        AnalogTensor { shape: self.shape, data: self.data.iter().map(|&v| v as f64).collect() }
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(samples: &[&SpikeTensor]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?;
        let per = first.shape;
        if per.n != 1 || samples.iter().any(|s| s.shape != per) {
            return Err(Error::Shape("stacked samples must share a batch-1 shape".into()));
        }
        let shape = Shape5 { n: samples.len(), ..per };
        let mut data = Vec::with_capacity(shape.len());
        for s in samples {
            data.extend_from_slice(&s.data);
        }
        Ok(Self { shape, data })
    }

    /// Copies sample `i` out as a batch-1 tensor.
    pub fn sample(&self, i: usize) -> SpikeTensor {
        let per = Shape5 { n: 1, ..self.shape };
        let len = per.len();
        SpikeTensor { shape: per, data: self.data[i * len..(i + 1) * len].to_vec() }
    }
}

fn reduce_sum(x: &AnalogTensor, axes: AxisSet, f: impl Fn(f64) -> f64) -> AnalogTensor {
    let shape = x.shape;
    let out_shape = shape.reduced(axes);
    let mut out = vec![0.0f64; out_shape.len()];
    // Output strides with zero stride on each reduced axis.
    let os = out_shape.strides();
    let s: [usize; 5] = std::array::from_fn(|k| if axes.contains(Axis::ALL[k]) { 0 } else { os[k] });
    let mut i = 0;
    for n in 0..shape.n {
        for c in 0..shape.c {
            for h in 0..shape.h {
                for w in 0..shape.w {
                    let base = n * s[0] + c * s[1] + h * s[2] + w * s[3];
                    let row = &x.data[i..i + shape.t];
                    if s[4] == 0 {
                        out[base] += row.iter().map(|&v| f(v)).sum::<f64>();
                    } else {
                        for (o, &v) in out[base..base + shape.t].iter_mut().zip(row) {
                            *o += f(v);
                        }
                    }
                    i += shape.t;
                }
            }
        }
    }
    AnalogTensor::from_vec_unchecked(out_shape, out)
}

/// `E_X[x^2]` over `axes`, with extent 1 on each reduced axis.
pub fn reduce_second_raw_moment(x: &AnalogTensor, axes: AxisSet) -> AnalogTensor {
    let count = axes.count(&x.shape) as f64;
    let mut m = reduce_sum(x, axes, |v| v * v);
    m.data.iter_mut().for_each(|v| *v /= count);
    m
}

pub fn reduce_mean(x: &AnalogTensor, axes: AxisSet) -> AnalogTensor {
    let count = axes.count(&x.shape) as f64;
    let mut m = reduce_sum(x, axes, |v| v);
    m.data.iter_mut().for_each(|v| *v /= count);
    m
}

/// Sample mean and biased (divide-by-X) variance over `axes`.
pub fn reduce_mean_and_variance(x: &AnalogTensor, axes: AxisSet) -> (AnalogTensor, AnalogTensor) {
    let mean = reduce_mean(x, axes);
    let centered = broadcast_binary(x, &mean, BinaryOp::Sub).expect("mean is broadcast-compatible by construction");
    let var = reduce_second_raw_moment(&centered, axes);
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementwise `x op stat`, expanding size-1 axes of `stat`.
pub fn broadcast_binary(x: &AnalogTensor, stat: &AnalogTensor, op: BinaryOp) -> Result<AnalogTensor> {
    let xs = x.shape.dims();
    let ss = stat.shape.dims();
    for k in 0..5 {
        if ss[k] != 1 && ss[k] != xs[k] {
            return Err(Error::Shape(format!(
                "cannot broadcast {} against {} on axis {:?}",
                stat.shape,
                x.shape,
                Axis::ALL[k]
            )));
        }
    }
    if op == BinaryOp::Div {
        if let Some(i) = stat.data.iter().position(|&v| v == 0.0) {
            return Err(Error::Contract(format!("division by zero statistic at flat index {i}")));
        }
    }
    let st = stat.shape.strides();
    let s: [usize; 5] = std::array::from_fn(|k| if ss[k] == 1 { 0 } else { st[k] });
    let apply = |a: f64, b: f64| match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
    };
    let shape = x.shape;
    let mut out = Vec::with_capacity(shape.len());
    let mut i = 0;
    for n in 0..shape.n {
        for c in 0..shape.c {
            for h in 0..shape.h {
                for w in 0..shape.w {
                    let base = n * s[0] + c * s[1] + h * s[2] + w * s[3];
                    for t in 0..shape.t {
                        out.push(apply(x.data[i + t], stat.data[base + t * s[4]]));
                    }
                    i += shape.t;
                }
            }
        }
    }
    Ok(AnalogTensor::from_vec_unchecked(shape, out))
}
