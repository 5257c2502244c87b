//! Finite-difference audits of every differentiable operator on randomized
//! small tensors. Each audit returns the worst relative error it saw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{parse_architecture, Style};
use crate::kernels::{build_epsilon, causal_conv_analog, causal_conv_backward};
use crate::model::{assemble, ModelConfig};
use crate::norm::{AxesMode, NormForm, Normalizer, NormalizerConfig, Phase};
use crate::srm::{weighted_backward, weighted_psp, LayerKind, LayerParams, SpikeMode};
use crate::tensor::{AnalogTensor, Shape5, SpikeTensor};
use crate::training::{check_gradient, spike_count_loss, LossSpec};
use crate::Result;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Audit {
    pub name: String,
    pub checks: usize,
    pub max_rel_error: f64,
    /// Where the worst error came from.
    pub worst: String,
}

impl Audit {
    fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), checks: 0, max_rel_error: 0.0, worst: String::new() }
    }

    /// Checks `analytic` against central differences of `f` at `x`.
    /// Components far below the largest one are judged on the largest one's
    /// scale, since their differences are dominated by rounding in `f`.
    fn check(&mut self, what: &str, trial: u64, x: &[f64], analytic: &[f64], f: impl FnMut(&[f64]) -> f64) {
        let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let r = check_gradient(f, x, analytic, STEP, (1e-3 * scale).max(1e-6));
        self.checks += 1;
        if r.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = r.max_rel_error;
            self.worst = format!("{what} trial {trial}: {r:?}");
        }
    }

    fn merge(&mut self, other: Audit) {
        self.checks += other.checks;
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

fn random(shape: Shape5, rng: &mut impl Rng, lo: f64, hi: f64) -> AnalogTensor {
    let data = (0..shape.len()).map(|_| rng.gen_range(lo..hi)).collect();
    AnalogTensor::from_vec(shape, data).expect("shape matches")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn temporal_convolution(trials: u64) -> Result<Audit> {
    let mut audit = Audit::new("temporal convolution");
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let t = rng.gen_range(2..12);
        let shape = Shape5::new(2, 2, 1, 2, t)?;
        let kernel = build_epsilon(rng.gen_range(1.0..10.0), t)?;
        let lag = rng.gen_range(0..2);
        let x = random(shape, &mut rng, -1.0, 1.0);
        let r = random(shape, &mut rng, -1.0, 1.0);
        let g = causal_conv_backward(&r, &kernel, lag);
        audit.check("input", trial, x.data(), g.data(), |p| {
            let y = causal_conv_analog(&AnalogTensor::from_vec(shape, p.to_vec()).unwrap(), &kernel, lag);
            dot(y.data(), r.data())
        });
    }
    Ok(audit)
}

/// Dense, 3x3 conv, and 1x1 conv layers, over inputs and weights.
pub fn weighted_layers(trials: u64) -> Result<Audit> {
    let mut audit = Audit::new("dense/conv layers");
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let kind = match trial % 3 {
            0 => LayerKind::Dense,
            1 => LayerKind::Conv { kernel: 3 },
            _ => LayerKind::Conv { kernel: 1 },
        };
        let (c, h, w, t) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let mut p = LayerParams::zeros(kind, (c, h, w), rng.gen_range(1..3), 1.0)?;
        p.init_uniform(&mut rng, 1.0);
        let shape = Shape5::new(2, c, h, w, t)?;
        let x = random(shape, &mut rng, -1.0, 1.0);
        let r = random(p.out_shape(2, t), &mut rng, -1.0, 1.0);
        let (gx, gw) = weighted_backward(&r, &x, &p)?;
        audit.check(&format!("{kind:?} input"), trial, x.data(), gx.data(), |v| {
            let y = weighted_psp(&AnalogTensor::from_vec(shape, v.to_vec()).unwrap(), &p).unwrap();
            dot(y.data(), r.data())
        });
        let w0 = p.weights.clone();
        audit.check(&format!("{kind:?} weights"), trial, &w0, &gw, |v| {
            let mut q = p.clone();
            q.weights = v.to_vec();
            dot(weighted_psp(&x, &q).unwrap().data(), r.data())
        });
    }
    Ok(audit)
}

/// Every form over both axis modes, in training and evaluation phases,
/// over the input, `gamma`, and `xi`.
pub fn normalizers(trials: u64) -> Result<Audit> {
    let forms = [NormForm::Standard, NormForm::MeanFree, NormForm::Psp, NormForm::Identity];
    let axes = [AxesMode::Batch, AxesMode::Layer];
    let mut audit = Audit::new("normalization");
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let form = forms[trial as usize % 4];
        let axis = axes[(trial / 4) as usize % 2];
        let phase = if trial % 5 == 4 { Phase::Eval } else { Phase::Train };
        let cfg = NormalizerConfig { form, axes: axis, lambda: rng.gen_range(0.01..1.0), momentum: 0.9 };
        let c = rng.gen_range(1..4);
        let shape = Shape5::new(rng.gen_range(1..4), c, 2, rng.gen_range(1..3), rng.gen_range(1..4))?;
        let mut norm = Normalizer::new(cfg, c)?;
        for (g, x) in norm.gamma.iter_mut().zip(norm.xi.iter_mut()) {
            *g = rng.gen_range(0.5..2.0);
            *x = rng.gen_range(-1.0..1.0);
        }
        // Non-default running statistics for the evaluation-phase checks.
        norm.forward(&random(shape, &mut rng, 0.0, 3.0), Phase::Train)?;
        let x = random(shape, &mut rng, -1.0, 3.0);
        let r = random(shape, &mut rng, -1.0, 1.0);
        let (_, cache) = norm.forward(&x, phase)?;
        let (gx, grads) = norm.backward(&r, &x, &cache)?;
        let frozen = norm.clone();
        let eval = |n: &Normalizer, x: &AnalogTensor| {
            let (y, _) = n.clone().forward(x, phase).unwrap();
            dot(y.data(), r.data())
        };
        let what = format!("{form:?}/{axis:?}/{phase:?}");
        audit.check(&format!("{what} input"), trial, x.data(), gx.data(), |v| {
            eval(&frozen, &AnalogTensor::from_vec(shape, v.to_vec()).unwrap())
        });
        if !grads.gamma.is_empty() {
            audit.check(&format!("{what} gamma"), trial, &frozen.gamma, &grads.gamma, |v| {
                let mut n = frozen.clone();
                n.gamma = v.to_vec();
                eval(&n, &x)
            });
        }
        if !grads.xi.is_empty() {
            audit.check(&format!("{what} xi"), trial, &frozen.xi, &grads.xi, |v| {
                let mut n = frozen.clone();
                n.xi = v.to_vec();
                eval(&n, &x)
            });
        }
    }
    Ok(audit)
}

pub fn spike_count_loss_grad(trials: u64) -> Result<Audit> {
    let mut audit = Audit::new("spike-count loss");
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let (n, t) = (rng.gen_range(1..4), rng.gen_range(1..6));
        let shape = Shape5::new(n, 3, 1, 1, t)?;
        let out = random(shape, &mut rng, 0.0, 1.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let spec = LossSpec { true_count: 0.3 * t as f64, false_count: 0.01 * t as f64 };
        let (_, seed) = spike_count_loss(&out, &labels, &spec)?;
        audit.check("counts", trial, out.data(), seed.data(), |v| {
            spike_count_loss(&AnalogTensor::from_vec(shape, v.to_vec()).unwrap(), &labels, &spec).unwrap().0
        });
    }
    Ok(audit)
}

/// Whole-network parameter gradients with the spike step replaced by its
/// smoothed surrogate and the refractory term off, so the loss is smooth.
pub fn network(arch: &str, style: Style, norm: NormalizerConfig, trials: u64) -> Result<Audit> {
    let spec = parse_architecture(arch)?.with_style(style)?;
    let t = 8;
    let mut audit = Audit::new(format!("{arch} {style:?}"));
    for trial in 0..trials {
        let cfg = ModelConfig { t_steps: t, theta: 1.0, weight_scale: 2.0, norm, ..ModelConfig::default() };
        let mut model = assemble(&spec, &cfg, trial)?;
        model.set_refractory(false);
        model.set_spike_mode(SpikeMode::Smoothed(cfg.surrogate));
        let (c, h, w) = model.input_chw();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let shape = Shape5::new(2, c, h, w, t)?;
        let spikes: Vec<u8> = (0..shape.len()).map(|_| rng.gen_bool(0.3) as u8).collect();
        let input = SpikeTensor::from_vec(shape, spikes)?;
        let labels = [0, 1];
        let loss_spec = LossSpec::for_window(t);

        model.zero_grad();
        let fwd = model.forward(&input, Phase::Train)?;
        let (_, seed) = spike_count_loss(&fwd.output, &labels, &loss_spec)?;
        model.backward(&fwd, &seed)?;
        let (values, grads): (Vec<f64>, Vec<f64>) = model
            .param_slots()
            .into_iter()
            .flat_map(|s| s.values.iter().copied().zip(s.grads.iter().copied()).collect::<Vec<_>>())
            .unzip();
        if grads.iter().all(|&g| g == 0.0) {
            audit.checks += 1;
            audit.max_rel_error = f64::INFINITY;
            audit.worst = format!("trial {trial}: gradient vanished");
            continue;
        }
        let mut probe = model.clone();
        audit.check("parameters", trial, &values, &grads, |v| {
            let mut off = 0;
            for s in probe.param_slots() {
                let n = s.values.len();
                s.values.copy_from_slice(&v[off..off + n]);
                off += n;
            }
            let out = probe.forward(&input, Phase::Train).unwrap().output;
            spike_count_loss(&out, &labels, &loss_spec).unwrap().0
        });
    }
    Ok(audit)
}

fn norm(form: NormForm, axes: AxesMode) -> NormalizerConfig {
    NormalizerConfig { form, axes, ..NormalizerConfig::default() }
}

/// Plain and residual networks with every normalization form and axis mode.
pub fn networks() -> Result<Audit> {
    let mut audit = Audit::new("end-to-end networks");
    audit.merge(network("4x4x2-8-3", Style::Plain, norm(NormForm::Identity, AxesMode::Layer), 5)?);
    audit.merge(network("4x4x2-2c3-n2c3-3", Style::Plain, norm(NormForm::Identity, AxesMode::Layer), 5)?);
    for form in [NormForm::Psp, NormForm::Standard, NormForm::MeanFree] {
        for axes in [AxesMode::Batch, AxesMode::Layer] {
            audit.merge(network("4x4x2-n2c3-n2c3-n3", Style::Plain, norm(form, axes), 3)?);
        }
    }
    let arch = "4x4x2-n2c3-n2c3-n2c3-n3c3-n3c3-3";
    for style in [Style::ResnetPre, Style::ResnetPost] {
        audit.merge(network(arch, style, norm(NormForm::Psp, AxesMode::Layer), 2)?);
        audit.merge(network(arch, style, norm(NormForm::Standard, AxesMode::Batch), 2)?);
    }
    Ok(audit)
}
