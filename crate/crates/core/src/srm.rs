//! Layer-level Spike Response Model dynamics.
//!
//! ```text
//! a(t)     = (eps * s_in)(t)
//! u(t)     = W a_hat(t) + (nu * s_out)(t)
//! s_out(t) = 1  iff  u(t) >= theta
//! ```
//!
//! The weighted map `W` is applied identically at every time step. The
//! refractory term only sees output spikes strictly before `t`, each
//! contributing `nu(t - t_f)` at its true elapsed time, so the `nu(0)` sample
//! never enters the membrane.

use multiversion::multiversion;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{causal_conv, KernelKind, KernelTable};
use crate::norm::{Normalizer, Phase};
use crate::surrogate::{smoothed_step, SurrogateConfig};
use crate::tensor::{AnalogTensor, Shape5, SpikeTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Fully connected from the flattened `(c, h, w)` input to `out` units.
    Dense,
    /// Square kernel, stride 1, zero padding `kernel / 2`.
    Conv { kernel: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    /// Conv: `[out][in][ky][kx]`. Dense: `[out][in_flat]`.
    pub weights: Vec<f64>,
    pub theta: f64,
}

impl LayerParams {
    pub fn zeros(kind: LayerKind, in_chw: (usize, usize, usize), out_channels: usize, theta: f64) -> Result<Self> {
        let (in_channels, in_h, in_w) = in_chw;
        if in_channels == 0 || in_h == 0 || in_w == 0 || out_channels == 0 {
            return Err(Error::Param("layer extents must be positive".into()));
        }
        if let LayerKind::Conv { kernel } = kind {
            if kernel % 2 == 0 {
                return Err(Error::Param(format!("conv kernel must be odd, got {kernel}")));
            }
        }
        if !(theta > 0.0) {
            return Err(Error::Param(format!("threshold must be positive, got {theta}")));
        }
        let mut p = Self { kind, in_channels, in_h, in_w, out_channels, weights: Vec::new(), theta };
        p.weights = vec![0.0; p.weight_len()];
        Ok(p)
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_channels * self.in_h * self.in_w,
            LayerKind::Conv { kernel } => self.in_channels * kernel * kernel,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    /// Uniform in `+-1/sqrt(fan_in)`, times `scale`.
    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        let bound = 1.0 / (self.fan_in() as f64).sqrt();
        for w in &mut self.weights {
            *w = rng.gen_range(-bound..bound) * scale;
        }
    }

    pub fn out_shape(&self, n: usize, t: usize) -> Shape5 {
        match self.kind {
            LayerKind::Dense => Shape5 { n, c: self.out_channels, h: 1, w: 1, t },
            LayerKind::Conv { .. } => Shape5 { n, c: self.out_channels, h: self.in_h, w: self.in_w, t },
        }
    }

    fn check_input(&self, x: &AnalogTensor) -> Result<()> {
        let s = x.shape();
        if (s.c, s.h, s.w) != (self.in_channels, self.in_h, self.in_w) {
            return Err(Error::Shape(format!(
                "layer expects (c, h, w) = ({}, {}, {}), got {s}",
                self.in_channels, self.in_h, self.in_w
            )));
        }
        Ok(())
    }
}

#[inline(always)]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline(always)]
fn axpy3(y: &mut [f64], w: [f64; 3], x0: &[f64], x1: &[f64], x2: &[f64]) {
    let n = y.len();
    let (x0, x1, x2) = (&x0[..n], &x1[..n], &x2[..n]);
    for i in 0..n {
        y[i] += w[0] * x0[i] + w[1] * x1[i] + w[2] * x2[i];
    }
}

/// Dot product with eight independent partial sums so it vectorizes.
#[inline(always)]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [0.0f64; 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for k in 0..8 {
            acc[k] += a[k] * b[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Column range `[x0, x1)` of output positions whose input column `x + dx` is in bounds.
#[inline]
fn valid_span(width: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (width as isize - dx).clamp(0, width as isize) as usize;
    (x0, x1.max(x0))
}

/// `dst[x] += sum_kx taps[kx] * src[x + kx - pad]` along one image row, where
/// each column is a block of `t` samples.
#[inline(always)]
fn conv_row(dst: &mut [f64], src: &[f64], taps: &[f64], w: usize, t: usize) {
    if taps.len() == 3 && w >= 2 {
        let n = (w - 2) * t;
        if n > 0 {
            axpy3(&mut dst[t..t + n], [taps[0], taps[1], taps[2]], &src[..n], &src[t..t + n], &src[2 * t..2 * t + n]);
        }
        axpy(&mut dst[..t], taps[1], &src[..t]);
        axpy(&mut dst[..t], taps[2], &src[t..2 * t]);
        let l = (w - 1) * t;
        axpy(&mut dst[l..l + t], taps[0], &src[l - t..l]);
        axpy(&mut dst[l..l + t], taps[1], &src[l..l + t]);
        return;
    }
    let pad = (taps.len() / 2) as isize;
    for (kx, &wv) in taps.iter().enumerate() {
        let dx = kx as isize - pad;
        let (x0, x1) = valid_span(w, dx);
        if x1 > x0 {
            let s0 = (x0 as isize + dx) as usize * t;
            axpy(&mut dst[x0 * t..x1 * t], wv, &src[s0..s0 + (x1 - x0) * t]);
        }
    }
}

/// Same-padded, stride-1 convolution of one sample. `wts` is
/// `[cout][cin][ky][kx]`.
#[allow(clippy::too_many_arguments)]
#[multiversion(targets("x86_64+avx512f", "x86_64+avx2"))]
fn conv_sample(
    wts: &[f64],
    cin: usize,
    cout: usize,
    kernel: usize,
    h: usize,
    w: usize,
    input: &[f64],
    out: &mut [f64],
    t: usize,
) {
    let pad = kernel / 2;
    let row = w * t;
    let plane = h * row;
    // Row-major outer loop keeps the few input rows feeding output row `y`
    // cache-resident while every output channel consumes them.
    for y in 0..h {
        for co in 0..cout {
            let dst = &mut out[co * plane + y * row..][..row];
            for ci in 0..cin {
                for ky in 0..kernel {
                    let yy = y + ky;
                    if yy < pad || yy - pad >= h {
                        continue;
                    }
                    let src = &input[ci * plane + (yy - pad) * row..][..row];
                    let taps = &wts[((co * cin + ci) * kernel + ky) * kernel..][..kernel];
                    conv_row(dst, src, taps, w, t);
                }
            }
        }
    }
}

/// Weights of the adjoint convolution: channels swapped, kernel rotated 180 degrees.
fn flipped_weights(p: &LayerParams, kernel: usize) -> Vec<f64> {
    let (cin, cout) = (p.in_channels, p.out_channels);
    let mut f = vec![0.0; p.weights.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    f[((ci * cout + co) * kernel + (kernel - 1 - ky)) * kernel + (kernel - 1 - kx)] =
                        p.weights[((co * cin + ci) * kernel + ky) * kernel + kx];
                }
            }
        }
    }
    f
}

fn conv_forward_sample(p: &LayerParams, kernel: usize, input: &[f64], out: &mut [f64], t: usize) {
    conv_sample(&p.weights, p.in_channels, p.out_channels, kernel, p.in_h, p.in_w, input, out, t);
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_sample(
    p: &LayerParams,
    kernel: usize,
    flipped: &[f64],
    input: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    grad_w: &mut [f64],
    t: usize,
) {
    conv_sample(flipped, p.out_channels, p.in_channels, kernel, p.in_h, p.in_w, grad_out, grad_in, t);
    conv_weight_grad(p, kernel, input, grad_out, grad_w, t);
}

#[multiversion(targets("x86_64+avx512f", "x86_64+avx2"))]
fn conv_weight_grad(p: &LayerParams, kernel: usize, input: &[f64], grad_out: &[f64], grad_w: &mut [f64], t: usize) {
    let (h, w) = (p.in_h, p.in_w);
    let pad = (kernel / 2) as isize;
    let row = w * t;
    let plane = h * row;
    for y in 0..h {
        for co in 0..p.out_channels {
            let g_row = &grad_out[co * plane + y * row..][..row];
            for ci in 0..p.in_channels {
                let base = (co * p.in_channels + ci) * kernel * kernel;
                for ky in 0..kernel {
                    let yy = y as isize + ky as isize - pad;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let in_row = &input[ci * plane + yy as usize * row..][..row];
                    for kx in 0..kernel {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_span(w, dx);
                        if x1 > x0 {
                            let s0 = (x0 as isize + dx) as usize * t;
                            let len = (x1 - x0) * t;
                            grad_w[base + ky * kernel + kx] += dot(&g_row[x0 * t..x0 * t + len], &in_row[s0..s0 + len]);
                        }
                    }
                }
            }
        }
    }
}

#[multiversion(targets("x86_64+avx512f", "x86_64+avx2"))]
fn dense_forward_sample(p: &LayerParams, input: &[f64], out: &mut [f64], t: usize) {
    let fan_in = p.fan_in();
    for (f, x) in input.chunks_exact(t).enumerate() {
        for (o, dst) in out.chunks_exact_mut(t).enumerate() {
            let wv = p.weights[o * fan_in + f];
            if wv != 0.0 {
                axpy(dst, wv, x);
            }
        }
    }
}

#[multiversion(targets("x86_64+avx512f", "x86_64+avx2"))]
fn dense_backward_sample(
    p: &LayerParams,
    input: &[f64],
    grad_out: &[f64],
    grad_in: &mut [f64],
    grad_w: &mut [f64],
    t: usize,
) {
    let fan_in = p.fan_in();
    let live: Vec<usize> =
        (0..p.out_channels).filter(|&o| grad_out[o * t..(o + 1) * t].iter().any(|&v| v != 0.0)).collect();
    for (f, (x, gi)) in input.chunks_exact(t).zip(grad_in.chunks_exact_mut(t)).enumerate() {
        for &o in &live {
            let g = &grad_out[o * t..(o + 1) * t];
            grad_w[o * fan_in + f] += dot(g, x);
            axpy(gi, p.weights[o * fan_in + f], g);
        }
    }
}

/// Feedforward drive `W a_hat(t)` at every time step.
pub fn weighted_psp(a_hat: &AnalogTensor, params: &LayerParams) -> Result<AnalogTensor> {
    params.check_input(a_hat)?;
    let s = a_hat.shape();
    let out_shape = params.out_shape(s.n, s.t);
    let in_len = s.len() / s.n;
    let out_len = out_shape.len() / s.n;
    let mut out = vec![0.0; out_shape.len()];
    out.par_chunks_mut(out_len).zip(a_hat.data().par_chunks(in_len)).for_each(|(dst, src)| match params.kind {
        LayerKind::Dense => dense_forward_sample(params, src, dst, s.t),
        LayerKind::Conv { kernel } => conv_forward_sample(params, kernel, src, dst, s.t),
    });
    Ok(AnalogTensor::from_vec_unchecked(out_shape, out))
}

/// Gradients of [`weighted_psp`] with respect to its input and weights.
pub fn weighted_backward(
    grad_out: &AnalogTensor,
    input: &AnalogTensor,
    params: &LayerParams,
) -> Result<(AnalogTensor, Vec<f64>)> {
    params.check_input(input)?;
    let s = input.shape();
    if grad_out.shape() != params.out_shape(s.n, s.t) {
        return Err(Error::Shape(format!(
            "output gradient {} does not match layer output {}",
            grad_out.shape(),
            params.out_shape(s.n, s.t)
        )));
    }
    let in_len = s.len() / s.n;
    let out_len = grad_out.shape().len() / s.n;
    let flipped = match params.kind {
        LayerKind::Conv { kernel } => flipped_weights(params, kernel),
        LayerKind::Dense => Vec::new(),
    };
    let mut grad_in = vec![0.0; s.len()];
    let partials: Vec<Vec<f64>> = grad_in
        .par_chunks_mut(in_len)
        .zip(input.data().par_chunks(in_len))
        .zip(grad_out.data().par_chunks(out_len))
        .map(|((gi, x), g)| {
            let mut gw = vec![0.0; params.weight_len()];
            match params.kind {
                LayerKind::Dense => dense_backward_sample(params, x, g, gi, &mut gw, s.t),
                LayerKind::Conv { kernel } => conv_backward_sample(params, kernel, &flipped, x, g, gi, &mut gw, s.t),
            }
            gw
        })
        .collect();
    // Sum per-sample weight gradients in batch order so results do not
    // depend on thread scheduling.
    let mut grad_w = vec![0.0; params.weight_len()];
    for p in &partials {
        for (a, b) in grad_w.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok((AnalogTensor::from_vec_unchecked(s, grad_in), grad_w))
}

/// How the spike nonlinearity is evaluated in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SpikeMode {
    /// Binary spikes, `u >= theta`.
    Heaviside,
    /// Real-valued [`smoothed_step`] output; makes the network exactly
    /// differentiable for gradient audits.
    Smoothed(SurrogateConfig),
}

/// Runs the threshold/refractory recurrence over every trace of `feedforward`.
///
/// Returns the spike output (0/1, or smoothed values) and the membrane trace.
/// `nu = None` disables the refractory feedback.
pub fn fire(
    feedforward: &AnalogTensor,
    nu: Option<&KernelTable>,
    theta: f64,
    mode: SpikeMode,
) -> Result<(AnalogTensor, AnalogTensor)> {
    if let Some(k) = nu {
        if k.kind() != KernelKind::Refractory {
            return Err(Error::Contract("spike generation needs a refractory kernel".into()));
        }
    }
    let shape = feedforward.shape();
    let t_steps = shape.t;
    let mut spikes = vec![0.0; shape.len()];
    let mut membrane = feedforward.data().to_vec();
    let per_sample = shape.len() / shape.n;
    spikes.par_chunks_mut(per_sample).zip(membrane.par_chunks_mut(per_sample)).for_each(|(s, u)| {
        for (s, u) in s.chunks_mut(t_steps).zip(u.chunks_mut(t_steps)) {
            fire_trace(s, u, nu, theta, mode);
        }
    });
    Ok((AnalogTensor::from_vec_unchecked(shape, spikes), AnalogTensor::from_vec_unchecked(shape, membrane)))
}

/// One trace of [`fire`]: `u` holds the feedforward drive on entry and the
/// membrane on return, `s` must be zeroed. The refractory response of each
/// spike is added straight into the membrane ahead of the scan, so stretches
/// without spikes reduce to a threshold search.
fn fire_trace(s: &mut [f64], u: &mut [f64], nu: Option<&KernelTable>, theta: f64, mode: SpikeMode) {
    match mode {
        SpikeMode::Heaviside => {
            let mut t = 0;
            while let Some(k) = u[t..].iter().position(|&v| v >= theta) {
                t += k;
                s[t] = 1.0;
                if let Some(nu) = nu {
                    add_refractory(nu, u, t, 1.0);
                }
                t += 1;
                if t == u.len() {
                    break;
                }
            }
        }
        SpikeMode::Smoothed(cfg) => {
            for t in 0..u.len() {
                let out = smoothed_step(u[t], theta, &cfg);
                s[t] = out;
                if let Some(nu) = nu {
                    add_refractory(nu, u, t, out);
                }
            }
        }
    }
}

/// Adds `scale * nu(k)` at `t_fire + k` for every `k >= 1` inside the window.
#[inline]
pub fn add_refractory(nu: &KernelTable, refr: &mut [f64], t_fire: usize, scale: f64) {
    let start = t_fire + 1;
    if start >= refr.len() {
        return;
    }
    for (r, &k) in refr[start..].iter_mut().zip(&nu.samples()[1..]) {
        *r += scale * k;
    }
}

/// Binary spike generation with refractory feedback from past output spikes.
pub fn generate_spikes(
    feedforward: &AnalogTensor,
    nu: &KernelTable,
    theta: f64,
) -> Result<(SpikeTensor, AnalogTensor)> {
    let (s, u) = fire(feedforward, Some(nu), theta, SpikeMode::Heaviside)?;
    let spikes = SpikeTensor::from_vec(s.shape(), s.data().iter().map(|&v| v as u8).collect())?;
    Ok((spikes, u))
}

#[derive(Debug, Clone)]
pub struct LayerState {
    pub psp: AnalogTensor,
    pub normalized: AnalogTensor,
    pub membrane: AnalogTensor,
    pub out_spikes: SpikeTensor,
    pub refractory: AnalogTensor,
}

/// One complete SRM layer: PSP, normalization, weighted drive, spikes.
pub fn forward_layer(
    in_spikes: &SpikeTensor,
    params: &LayerParams,
    norm: &mut Normalizer,
    eps: &KernelTable,
    nu: &KernelTable,
    phase: Phase,
) -> Result<LayerState> {
    if eps.kind() != KernelKind::SpikeResponse {
        return Err(Error::Contract("PSP needs a spike-response kernel".into()));
    }
    let psp = causal_conv(in_spikes, eps, 0);
    let (normalized, _) = norm.forward(&psp, phase)?;
    let drive = weighted_psp(&normalized, params)?;
    let (out_spikes, membrane) = generate_spikes(&drive, nu, params.theta)?;
    let refractory = membrane.zip_map(&drive, |u, d| u - d)?;
    Ok(LayerState { psp, normalized, membrane, out_spikes, refractory })
}
