//! Sampled spike-response and refractory kernels, and the causal temporal
//! convolution that turns spike trains into postsynaptic potentials.
//!
//! Time is discretised at one step per millisecond, so sample `k` of a
//! kernel is its value at `t = k` ms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AnalogTensor, SpikeTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    SpikeResponse,
    Refractory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTable {
    kind: KernelKind,
    tau: f64,
    samples: Vec<f64>,
}

/// `eps(t) = (t / tau_s) * exp(1 - t / tau_s)`, peaking at 1 when `t = tau_s`.
pub fn epsilon(t: f64, tau_s: f64) -> f64 {
    let x = t / tau_s;
    x * (1.0 - x).exp()
}

/// `nu(t) = -2 theta exp(-t / tau_r)`.
pub fn nu(t: f64, theta: f64, tau_r: f64) -> f64 {
    -2.0 * theta * (-t / tau_r).exp()
}

pub fn build_epsilon(tau_s: f64, len: usize) -> Result<KernelTable> {
    if !(tau_s > 0.0) || !tau_s.is_finite() {
        return Err(Error::Param(format!("spike-response time constant must be positive, got {tau_s}")));
    }
    if len == 0 {
        return Err(Error::Param("kernel length must be >= 1".into()));
    }
    let samples = (0..len).map(|k| epsilon(k as f64, tau_s)).collect();
    Ok(KernelTable { kind: KernelKind::SpikeResponse, tau: tau_s, samples })
}

pub fn build_nu(theta: f64, tau_r: f64, len: usize) -> Result<KernelTable> {
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::Param(format!("threshold must be positive, got {theta}")));
    }
    if !(tau_r > 0.0) || !tau_r.is_finite() {
        return Err(Error::Param(format!("refractory time constant must be positive, got {tau_r}")));
    }
    if len == 0 {
        return Err(Error::Param("kernel length must be >= 1".into()));
    }
    let samples = (0..len).map(|k| nu(k as f64, theta, tau_r)).collect();
    Ok(KernelTable { kind: KernelKind::Refractory, tau: tau_r, samples })
}

/// Shortest length after which every remaining sample is below `rel` times
/// the kernel's peak magnitude, capped at `max_len`.
pub fn tail_len(kind: KernelKind, tau: f64, rel: f64, max_len: usize) -> usize {
    // Both kernels have unit peak magnitude after scaling out theta, and decay
    // monotonically past it (t = tau for eps, t = 0 for nu).
    let start = match kind {
        KernelKind::SpikeResponse => tau.ceil() as usize,
        KernelKind::Refractory => 0,
    };
    for k in start..max_len {
        let v = match kind {
            KernelKind::SpikeResponse => epsilon(k as f64, tau),
            KernelKind::Refractory => (-(k as f64) / tau).exp(),
        };
        if v < rel {
            return k.max(1);
        }
    }
    max_len.max(1)
}

impl KernelTable {
    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// True when the table covers every lag that can occur in a window of
    /// `t_steps`, so no truncation is visible inside that window.
    pub fn covers(&self, t_steps: usize, lag: usize) -> bool {
        self.samples.len() + lag >= t_steps
    }

    /// Adds `scale * kernel[k]` to `out[t0 + lag + k]` for every `k` that
    /// lands inside `out`.
    #[inline]
    pub fn add_impulse(&self, out: &mut [f64], t0: usize, lag: usize, scale: f64) {
        let start = t0 + lag;
        if start >= out.len() {
            return;
        }
        for (o, &k) in out[start..].iter_mut().zip(&self.samples) {
            *o += scale * k;
        }
    }

    /// Causal filter of a single analog trace.
    pub fn filter_trace(&self, input: &[f64], out: &mut [f64], lag: usize) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (t0, &v) in input.iter().enumerate() {
            if v != 0.0 {
                self.add_impulse(out, t0, lag, v);
            }
        }
    }

    /// Adjoint of [`filter_trace`](Self::filter_trace): correlation with the
    /// time-reversed kernel, `out[t] = sum_k kernel[k] * grad[t + k + lag]`.
    pub fn correlate_trace(&self, grad: &[f64], out: &mut [f64], lag: usize) {
        let t_steps = grad.len();
        if self.kind == KernelKind::SpikeResponse && self.covers(t_steps, lag) {
            self.correlate_trace_recursive(grad, out, lag);
        } else {
            self.correlate_trace_direct(grad, out, lag);
        }
    }

    pub(crate) fn correlate_trace_direct(&self, grad: &[f64], out: &mut [f64], lag: usize) {
        let t_steps = grad.len();
        for (t, o) in out.iter_mut().enumerate() {
            let start = t + lag;
            *o = if start >= t_steps { 0.0 } else { grad[start..].iter().zip(&self.samples).map(|(g, k)| g * k).sum() };
        }
    }

    /// Exact second-order recursion for the untruncated spike-response kernel.
    ///
    /// With `r = exp(-1/tau)` the kernel is `(e / tau) * k * r^k`, so
    /// `A(t) = g(t) + r A(t+1)` and `B(t) = r (B(t+1) + A(t+1))` give
    /// `sum_k k r^k g(t+k) = B(t)`.
    fn correlate_trace_recursive(&self, grad: &[f64], out: &mut [f64], lag: usize) {
        let t_steps = grad.len();
        let r = (-1.0 / self.tau).exp();
        let scale = std::f64::consts::E / self.tau;
        let (mut a, mut b) = (0.0f64, 0.0f64);
        let live = t_steps.saturating_sub(lag);
        out[live..].iter_mut().for_each(|v| *v = 0.0);
        for t in (0..t_steps).rev() {
            b = r * (b + a);
            a = grad[t] + r * a;
            if t >= lag {
                out[t - lag] = scale * b;
            }
        }
    }
}

impl KernelTable {
    /// [`correlate_trace`](Self::correlate_trace) on four consecutive traces
    /// of a spike-response kernel that covers the window.
    fn correlate_traces4(&self, grad: &[f64], out: &mut [f64], lag: usize) {
        let t_steps = grad.len() / 4;
        let r = (-1.0 / self.tau).exp();
        let scale = std::f64::consts::E / self.tau;
        let (mut a, mut b) = ([0.0f64; 4], [0.0f64; 4]);
        for t in (0..t_steps).rev() {
            for j in 0..4 {
                b[j] = r * (b[j] + a[j]);
                a[j] = grad[j * t_steps + t] + r * a[j];
                if t >= lag {
                    out[j * t_steps + t - lag] = scale * b[j];
                }
            }
        }
    }
}

/// `out[..., t] = sum_k kernel[k] * s[..., t - k - lag]`, strictly causal.
pub fn causal_conv(s: &SpikeTensor, kernel: &KernelTable, lag: usize) -> AnalogTensor {
    let shape = s.shape();
    let t_steps = shape.t;
    let mut out = vec![0.0; shape.len()];
    for (src, dst) in s.data().chunks_exact(t_steps).zip(out.chunks_exact_mut(t_steps)) {
        for (t0, &v) in src.iter().enumerate() {
            if v != 0 {
                kernel.add_impulse(dst, t0, lag, 1.0);
            }
        }
    }
    AnalogTensor::from_vec_unchecked(shape, out)
}

/// Causal convolution of real-valued traces (used by the smoothed-spike audit path).
pub fn causal_conv_analog(x: &AnalogTensor, kernel: &KernelTable, lag: usize) -> AnalogTensor {
    let shape = x.shape();
    let mut out = vec![0.0; shape.len()];
    for (src, dst) in x.data().chunks_exact(shape.t).zip(out.chunks_exact_mut(shape.t)) {
        for (t0, &v) in src.iter().enumerate() {
            if v != 0.0 {
                kernel.add_impulse(dst, t0, lag, v);
            }
        }
    }
    AnalogTensor::from_vec_unchecked(shape, out)
}

/// Gradient of [`causal_conv`] with respect to its input traces.
pub fn causal_conv_backward(grad_out: &AnalogTensor, kernel: &KernelTable, lag: usize) -> AnalogTensor {
    let shape = grad_out.shape();
    let t_steps = shape.t;
    let mut out = vec![0.0; shape.len()];
    if kernel.kind == KernelKind::SpikeResponse && kernel.covers(t_steps, lag) {
        // Run four independent recursions side by side to hide their latency.
        let block = 4 * t_steps;
        let mut src = grad_out.data().chunks_exact(block);
        let mut dst = out.chunks_exact_mut(block);
        for (g, o) in (&mut src).zip(&mut dst) {
            kernel.correlate_traces4(g, o, lag);
        }
        for (g, o) in src.remainder().chunks_exact(t_steps).zip(dst.into_remainder().chunks_exact_mut(t_steps)) {
            kernel.correlate_trace(g, o, lag);
        }
    } else {
        for (g, o) in grad_out.data().chunks_exact(t_steps).zip(out.chunks_exact_mut(t_steps)) {
            kernel.correlate_trace(g, o, lag);
        }
    }
    AnalogTensor::from_vec_unchecked(shape, out)
}
