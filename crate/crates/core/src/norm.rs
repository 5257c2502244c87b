//! Postsynaptic-potential normalization.
//!
//! The normalizer sits between a PSP `a` and the weighted layer that consumes
//! it. Three forms are provided so they can be compared directly:
//!
//! ```text
//! Standard:  a_hat = (a - E[a]) / sqrt(V[a] + lambda) * gamma + xi
//! MeanFree:  a_hat = a / sqrt(V[a] + lambda) * gamma
//! Psp:       a_hat = a / sqrt(E[a^2] + lambda)
//! ```
//!
//! The statistics run over `X = W*H*N*T` per channel (batch mode) or
//! `X = W*H*C*T` per sample (layer mode). Only `Psp` keeps a non-negative PSP
//! non-negative, which is what an excitatory SRM neuron expects; the
//! subtraction in `Standard` maps any constant input to `xi`.
//!
//! Folding the normalizer into the threshold gives the effective threshold
//! `sqrt(E[a^2] + lambda) * (theta - refractory)`, see [`effective_threshold`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{reduce_mean_and_variance, reduce_second_raw_moment, AnalogTensor, AxisSet, Shape5};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormForm {
    /// Centred and scaled with affine `gamma`, `xi`.
    Standard,
    /// Scaled by the standard deviation only, with `gamma`.
    MeanFree,
    /// Scaled by the second raw moment, no learnable parameters.
    Psp,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxesMode {
    /// Per channel over `N, H, W, T`.
    Batch,
    /// Per sample over `C, H, W, T`.
    Layer,
}

impl AxesMode {
    pub fn axes(self) -> AxisSet {
        match self {
            AxesMode::Batch => AxisSet::batch_norm(),
            AxesMode::Layer => AxisSet::layer_norm(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizerConfig {
    pub form: NormForm,
    pub axes: AxesMode,
    pub lambda: f64,
    /// Weight of the previous running value in the EMA update.
    pub momentum: f64,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        Self { form: NormForm::Psp, axes: AxesMode::Layer, lambda: 0.1, momentum: 0.9 }
    }
}

impl NormalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Param(format!("lambda must be non-negative and finite, got {}", self.lambda)));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Param(format!("momentum must lie in (0, 1), got {}", self.momentum)));
        }
        Ok(())
    }

    pub fn has_gamma(&self) -> bool {
        matches!(self.form, NormForm::Standard | NormForm::MeanFree)
    }

    pub fn has_xi(&self) -> bool {
        self.form == NormForm::Standard
    }
}

/// `sqrt(moment + lambda) * (theta - refractory)`.
///
/// `moment` may be the second raw moment or the variance, depending on which
/// normalizer form is being analysed.
pub fn effective_threshold(moment: f64, lambda: f64, theta: f64, refractory: f64) -> f64 {
    (moment + lambda).sqrt() * (theta - refractory)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDiagnostic {
    pub moment: f64,
    pub theta_hat: f64,
}

/// Statistics saved by [`Normalizer::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    /// `sqrt(stat + lambda)`, shaped like the reduced statistic.
    denom: AnalogTensor,
    /// Mean for the centred forms.
    mean: Option<AnalogTensor>,
    /// Whether the statistics came from this batch (and so depend on `a`).
    batch_stats: bool,
}

impl NormCache {
    pub fn denom(&self) -> &AnalogTensor {
        &self.denom
    }
}

#[derive(Debug, Clone, Default)]
pub struct NormGrads {
    pub gamma: Vec<f64>,
    pub xi: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    cfg: NormalizerConfig,
    channels: usize,
    pub gamma: Vec<f64>,
    pub xi: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    running_moment: Vec<f64>,
}

impl Normalizer {
    pub fn new(cfg: NormalizerConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        if channels == 0 {
            return Err(Error::Param("normalizer needs at least one channel".into()));
        }
        Ok(Self {
            cfg,
            channels,
            gamma: if cfg.has_gamma() { vec![1.0; channels] } else { Vec::new() },
            xi: if cfg.has_xi() { vec![0.0; channels] } else { Vec::new() },
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            running_moment: vec![1.0; channels],
        })
    }

    pub fn identity(channels: usize) -> Self {
        Self::new(NormalizerConfig { form: NormForm::Identity, ..Default::default() }, channels)
            .expect("default identity config is valid")
    }

    pub fn config(&self) -> &NormalizerConfig {
        &self.cfg
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn running_moment(&self) -> &[f64] {
        &self.running_moment
    }

    /// Running buffers, flattened for checkpointing.
    pub fn buffers(&self) -> Vec<f64> {
        let mut v = self.running_mean.clone();
        v.extend_from_slice(&self.running_var);
        v.extend_from_slice(&self.running_moment);
        v
    }

    pub fn load_buffers(&mut self, v: &[f64]) -> Result<()> {
        let c = self.channels;
        if v.len() != 3 * c {
            return Err(Error::Checkpoint(format!("normalizer expects {} buffer values, got {}", 3 * c, v.len())));
        }
        self.running_mean.copy_from_slice(&v[..c]);
        self.running_var.copy_from_slice(&v[c..2 * c]);
        self.running_moment.copy_from_slice(&v[2 * c..]);
        Ok(())
    }

    fn channel_shape(&self) -> Shape5 {
        Shape5 { n: 1, c: self.channels, h: 1, w: 1, t: 1 }
    }

    fn check_input(&self, a: &AnalogTensor) -> Result<()> {
        if a.shape().c != self.channels {
            return Err(Error::Shape(format!(
                "normalizer built for {} channels received {}",
                self.channels,
                a.shape()
            )));
        }
        Ok(())
    }

    fn uses_running_stats(&self, phase: Phase) -> bool {
        phase == Phase::Eval && self.cfg.axes == AxesMode::Batch
    }

    fn ema(running: &mut [f64], batch: &[f64], momentum: f64) {
        for (r, &b) in running.iter_mut().zip(batch) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }

    fn sqrt_plus_lambda(&self, stat: &[f64]) -> Vec<f64> {
        stat.iter().map(|&v| (v + self.cfg.lambda).sqrt()).collect()
    }

    pub fn forward(&mut self, a: &AnalogTensor, phase: Phase) -> Result<(AnalogTensor, NormCache)> {
        self.check_input(a)?;
        let running = self.uses_running_stats(phase);
        let update = phase == Phase::Train && self.cfg.axes == AxesMode::Batch;
        let momentum = self.cfg.momentum;
        let stat_shape = if running { self.channel_shape() } else { a.shape().reduced(self.cfg.axes.axes()) };
        let groups = Groups::new(a.shape(), stat_shape);

        match self.cfg.form {
            NormForm::Identity => {
                let denom = AnalogTensor::filled(Shape5 { n: 1, c: 1, h: 1, w: 1, t: 1 }, 1.0);
                Ok((a.clone(), NormCache { denom, mean: None, batch_stats: false }))
            }
            NormForm::Psp => {
                let moment = if running {
                    self.running_moment.clone()
                } else {
                    let m = groups.mean(a.data(), |_, v| v * v);
                    if update {
                        Self::ema(&mut self.running_moment, &m, momentum);
                    }
                    m
                };
                let denom = self.sqrt_plus_lambda(&moment);
                let inv = inverse(&denom);
                let mut out = a.clone();
                groups.for_each_mut(out.data_mut(), |s, _, v| *v *= inv[s]);
                let denom = AnalogTensor::from_vec_unchecked(stat_shape, denom);
                Ok((out, NormCache { denom, mean: None, batch_stats: !running }))
            }
            NormForm::MeanFree | NormForm::Standard => {
                let (mean, var) = if running {
                    (self.running_mean.clone(), self.running_var.clone())
                } else {
                    let m = groups.mean(a.data(), |_, v| v);
                    let v = groups.mean(a.data(), |s, v| (v - m[s]) * (v - m[s]));
                    if update {
                        Self::ema(&mut self.running_mean, &m, momentum);
                        Self::ema(&mut self.running_var, &v, momentum);
                    }
                    (m, v)
                };
                let denom = self.sqrt_plus_lambda(&var);
                let inv = inverse(&denom);
                let mut out = a.clone();
                let (gamma, xi) = (&self.gamma, &self.xi);
                if self.cfg.form == NormForm::MeanFree {
                    groups.for_each_mut(out.data_mut(), |s, c, v| *v = *v * inv[s] * gamma[c]);
                } else {
                    groups.for_each_mut(out.data_mut(), |s, c, v| *v = (*v - mean[s]) * inv[s] * gamma[c] + xi[c]);
                }
                let denom = AnalogTensor::from_vec_unchecked(stat_shape, denom);
                let mean = AnalogTensor::from_vec_unchecked(stat_shape, mean);
                Ok((out, NormCache { denom, mean: Some(mean), batch_stats: !running }))
            }
        }
    }

    /// Exact gradient with respect to `a`, including every element's
    /// contribution to the reduction statistics, plus `gamma`/`xi` gradients.
    pub fn backward(
        &self,
        grad_out: &AnalogTensor,
        a: &AnalogTensor,
        cache: &NormCache,
    ) -> Result<(AnalogTensor, NormGrads)> {
        if grad_out.shape() != a.shape() {
            return Err(Error::Shape(format!("gradient {} vs input {}", grad_out.shape(), a.shape())));
        }
        if self.cfg.form == NormForm::Identity {
            return Ok((grad_out.clone(), NormGrads::default()));
        }
        let groups = Groups::new(a.shape(), cache.denom.shape());
        let denom = cache.denom.data();
        let inv = inverse(denom);
        let inv3: Vec<f64> = inv.iter().map(|&i| i * i * i).collect();
        let (g, x) = (grad_out.data(), a.data());
        let gamma = &self.gamma;
        let mut grads = NormGrads::default();
        let mut out = grad_out.clone();

        match self.cfg.form {
            NormForm::Identity => unreachable!(),
            NormForm::Psp => {
                // da_i = g_i / s - a_i / (X s^3) * sum_j g_j a_j
                let coef: Vec<f64> = if cache.batch_stats {
                    let m = groups.mean_pair(g, x, |_, _, g, x| g * x);
                    m.iter().zip(&inv3).map(|(m, i)| m * i).collect()
                } else {
                    vec![0.0; inv.len()]
                };
                groups.for_each_pair(out.data_mut(), x, |s, _, g, x| *g = *g * inv[s] - x * coef[s]);
            }
            NormForm::MeanFree => {
                grads.gamma = groups.channel_sum(g, x, |s, _, g, x| g * x * inv[s]);
                // da_j = G_j / s - (a_j - mu) / (X s^3) * sum_i G_i a_i
                let mean = cache.mean.as_ref().expect("centred forms keep their mean").data();
                let coef: Vec<f64> = if cache.batch_stats {
                    let m = groups.mean_pair(g, x, |_, c, g, x| g * gamma[c] * x);
                    m.iter().zip(&inv3).map(|(m, i)| m * i).collect()
                } else {
                    vec![0.0; inv.len()]
                };
                groups.for_each_pair(out.data_mut(), x, |s, c, g, x| {
                    *g = *g * gamma[c] * inv[s] - (x - mean[s]) * coef[s]
                });
            }
            NormForm::Standard => {
                let mean = cache.mean.as_ref().expect("centred forms keep their mean").data();
                let x_hat = |s: usize, x: f64| (x - mean[s]) * inv[s];
                grads.gamma = groups.channel_sum(g, x, |s, _, g, x| g * x_hat(s, x));
                grads.xi = groups.channel_sum(g, x, |_, _, g, _| g);
                // da = (G - E[G] - x_hat * E[G x_hat]) / s
                let (mean_g, mean_gx) = if cache.batch_stats {
                    (
                        groups.mean_pair(g, x, |_, c, g, _| g * gamma[c]),
                        groups.mean_pair(g, x, |s, c, g, x| g * gamma[c] * x_hat(s, x)),
                    )
                } else {
                    (vec![0.0; inv.len()], vec![0.0; inv.len()])
                };
                groups.for_each_pair(out.data_mut(), x, |s, c, g, x| {
                    *g = (*g * gamma[c] - mean_g[s] - x_hat(s, x) * mean_gx[s]) * inv[s]
                });
            }
        }
        Ok((out, grads))
    }

    pub fn threshold_diagnostic(&self, a: &AnalogTensor, theta: f64, refractory: f64) -> Vec<ThresholdDiagnostic> {
        let stat = match self.cfg.form {
            NormForm::MeanFree | NormForm::Standard => reduce_mean_and_variance(a, self.cfg.axes.axes()).1,
            _ => reduce_second_raw_moment(a, self.cfg.axes.axes()),
        };
        stat.data()
            .iter()
            .map(|&m| ThresholdDiagnostic {
                moment: m,
                theta_hat: effective_threshold(m, self.cfg.lambda, theta, refractory),
            })
            .collect()
    }
}

/// Reciprocal that maps a zero denominator to zero. A zero denominator only
/// arises with `lambda = 0` and an all-zero reduction group, whose numerators
/// are zero, so `0 / 0` becomes zero.
fn inverse(denom: &[f64]) -> Vec<f64> {
    denom.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect()
}

/// Walks a tensor as contiguous `H*W*T` blocks, one per `(n, c)`, each
/// reading a single statistic slot. Both axis modes reduce over `H, W, T`,
/// so the statistic index depends only on `n` and `c`.
struct Groups {
    c: usize,
    len: usize,
    sn: usize,
    sc: usize,
    count: f64,
}

impl Groups {
    fn new(x: Shape5, stat: Shape5) -> Self {
        let slots = stat.n * stat.c;
        Self { c: x.c, len: x.h * x.w * x.t, sn: stat.n, sc: stat.c, count: (x.len() / slots.max(1)) as f64 }
    }

    fn slots(&self) -> usize {
        self.sn * self.sc
    }

    #[inline]
    fn slot(&self, block: usize) -> (usize, usize) {
        let (n, c) = (block / self.c, block % self.c);
        ((n % self.sn) * self.sc + c % self.sc, c)
    }

    fn mean(&self, x: &[f64], f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
        self.mean_pair(x, x, |s, _, v, _| f(s, v))
    }

    fn mean_pair(&self, p: &[f64], q: &[f64], f: impl Fn(usize, usize, f64, f64) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.slots()];
        for (b, (p, q)) in p.chunks(self.len).zip(q.chunks(self.len)).enumerate() {
            let (s, c) = self.slot(b);
            out[s] += p.iter().zip(q).map(|(&u, &v)| f(s, c, u, v)).sum::<f64>();
        }
        out.iter_mut().for_each(|v| *v /= self.count);
        out
    }

    fn channel_sum(&self, p: &[f64], q: &[f64], f: impl Fn(usize, usize, f64, f64) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.c];
        for (b, (p, q)) in p.chunks(self.len).zip(q.chunks(self.len)).enumerate() {
            let (s, c) = self.slot(b);
            out[c] += p.iter().zip(q).map(|(&u, &v)| f(s, c, u, v)).sum::<f64>();
        }
        out
    }

    fn for_each_mut(&self, x: &mut [f64], f: impl Fn(usize, usize, &mut f64)) {
        for (b, x) in x.chunks_mut(self.len).enumerate() {
            let (s, c) = self.slot(b);
            x.iter_mut().for_each(|v| f(s, c, v));
        }
    }

    fn for_each_pair(&self, x: &mut [f64], y: &[f64], f: impl Fn(usize, usize, &mut f64, f64)) {
        for (b, (x, y)) in x.chunks_mut(self.len).zip(y.chunks(self.len)).enumerate() {
            let (s, c) = self.slot(b);
            x.iter_mut().zip(y).for_each(|(u, &v)| f(s, c, u, v));
        }
    }
}
