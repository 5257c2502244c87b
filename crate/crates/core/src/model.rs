//! Executable network assembled from a [`NetworkSpec`].
//!
//! A model is a flat list of units. Each weighted layer's input is the
//! (optionally normalized) PSP of the previous layer's spikes, and a `Fire`
//! unit turns the weighted drive into spikes and, for hidden layers, the PSP
//! of those spikes. Residual blocks hold their own sub-lists.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{LayerSpec, LayerSpecKind, NetworkSpec, Style};
use crate::error::{Error, Result};
use crate::kernels::{build_epsilon, build_nu, causal_conv, causal_conv_analog, causal_conv_backward, KernelTable};
use crate::norm::{AxesMode, NormCache, NormForm, Normalizer, NormalizerConfig, Phase};
use crate::srm::{fire, weighted_backward, weighted_psp, LayerKind, LayerParams, SpikeMode};
use crate::surrogate::SurrogateConfig;
use crate::tensor::{AnalogTensor, SpikeTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub tau_s: f64,
    pub tau_r: f64,
    pub theta: f64,
    pub weight_scale: f64,
    pub t_steps: usize,
    /// Kernel table length; `None` uses `t_steps`, which is exact.
    pub kernel_len: Option<usize>,
    /// Normalizer used wherever the architecture string has an `n`.
    pub norm: NormalizerConfig,
    pub surrogate: SurrogateConfig,
    /// Insert a 1x1 projection on skip paths that change channel count.
    pub project_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tau_s: 10.0,
            tau_r: 10.0,
            theta: 10.0,
            weight_scale: 10.0,
            t_steps: 300,
            kernel_len: None,
            norm: NormalizerConfig::default(),
            surrogate: SurrogateConfig::default(),
            project_skip: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau_s", self.tau_s), ("tau_r", self.tau_r), ("theta", self.theta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Param(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_scale > 0.0) {
            return Err(Error::Param(format!("weight scale must be positive, got {}", self.weight_scale)));
        }
        if self.t_steps == 0 {
            return Err(Error::Param("time steps must be >= 1".into()));
        }
        if self.kernel_len == Some(0) {
            return Err(Error::Param("kernel length must be >= 1".into()));
        }
        self.norm.validate()?;
        self.surrogate.validate()
    }
}

/// The two kernels plus the spike-evaluation mode shared by every layer.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub eps: KernelTable,
    pub nu: KernelTable,
    pub refractory: bool,
    pub mode: SpikeMode,
    pub surrogate: SurrogateConfig,
}

impl Dynamics {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let len = cfg.kernel_len.unwrap_or(cfg.t_steps);
        Ok(Self {
            eps: build_epsilon(cfg.tau_s, len)?,
            nu: build_nu(cfg.theta, cfg.tau_r, len)?,
            refractory: true,
            mode: SpikeMode::Heaviside,
            surrogate: cfg.surrogate,
        })
    }
}

#[derive(Debug, Clone)]
struct WeightedUnit {
    params: LayerParams,
    grad: Vec<f64>,
}

impl WeightedUnit {
    fn new(kind: LayerKind, in_chw: (usize, usize, usize), out: usize, theta: f64) -> Result<Self> {
        let params = LayerParams::zeros(kind, in_chw, out, theta)?;
        let grad = vec![0.0; params.weight_len()];
        Ok(Self { params, grad })
    }

    fn out_chw(&self) -> (usize, usize, usize) {
        let s = self.params.out_shape(1, 1);
        (s.c, s.h, s.w)
    }
}

#[derive(Debug, Clone)]
struct NormUnit {
    norm: Normalizer,
    grad_gamma: Vec<f64>,
    grad_xi: Vec<f64>,
}

impl NormUnit {
    fn new(cfg: NormalizerConfig, channels: usize) -> Result<Self> {
        let norm = Normalizer::new(cfg, channels)?;
        let grad_gamma = vec![0.0; norm.gamma.len()];
        let grad_xi = vec![0.0; norm.xi.len()];
        Ok(Self { norm, grad_gamma, grad_xi })
    }
}

#[derive(Debug, Clone)]
struct FireUnit {
    theta: f64,
    /// Hidden layers emit the PSP of their spikes; the output layer emits spikes.
    emit_psp: bool,
}

#[derive(Debug, Clone)]
enum Unit {
    Norm(NormUnit),
    Weighted(WeightedUnit),
    Fire(FireUnit),
    Block(Block),
}

/// One residual block.
///
/// Pre-activation: `h + G(h)`, `G = Func-Conv-Func-Conv`, where `h` is a
/// conv output. Post-activation: `F(h + G(h))`, `G = Conv-Func-Conv`,
/// `F = Func`, where `h` is a Func output. Func is spike, PSP, norm.
#[derive(Debug, Clone)]
pub struct Block {
    name: String,
    style: Style,
    branch: Vec<Unit>,
    proj: Option<WeightedUnit>,
    func: Vec<Unit>,
}

/// Normalizers for the three Func positions a block can contain: before its
/// first conv, before its second conv, and the trailing Func of a
/// post-activation block.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlockNorms {
    pub a: Option<NormalizerConfig>,
    pub b: Option<NormalizerConfig>,
    pub out: Option<NormalizerConfig>,
}

fn push_func(units: &mut Vec<Unit>, theta: f64, norm: Option<NormalizerConfig>, channels: usize) -> Result<()> {
    units.push(Unit::Fire(FireUnit { theta, emit_psp: true }));
    if let Some(cfg) = norm {
        units.push(Unit::Norm(NormUnit::new(cfg, channels)?));
    }
    Ok(())
}

/// Builds a two-conv residual block over inputs of shape `in_chw`.
#[allow(clippy::too_many_arguments)]
pub fn build_residual_block(
    style: Style,
    name: &str,
    in_chw: (usize, usize, usize),
    channels: usize,
    kernel: usize,
    norms: BlockNorms,
    theta: f64,
    project_skip: bool,
) -> Result<Block> {
    let (c_in, h, w) = in_chw;
    if channels == 0 {
        return Err(Error::Build(format!("{name}: channels must be >= 1")));
    }
    let conv = LayerKind::Conv { kernel };
    let proj = if c_in != channels {
        if !project_skip {
            return Err(Error::Build(format!(
                "{name}: skip path carries {c_in} channels but the residual branch produces {channels}"
            )));
        }
        Some(WeightedUnit::new(LayerKind::Conv { kernel: 1 }, in_chw, channels, theta)?)
    } else {
        None
    };
    let mut branch = Vec::new();
    let mut func = Vec::new();
    match style {
        Style::ResnetPre => {
            push_func(&mut branch, theta, norms.a, c_in)?;
            branch.push(Unit::Weighted(WeightedUnit::new(conv, in_chw, channels, theta)?));
            push_func(&mut branch, theta, norms.b, channels)?;
            branch.push(Unit::Weighted(WeightedUnit::new(conv, (channels, h, w), channels, theta)?));
        }
        Style::ResnetPost => {
            branch.push(Unit::Weighted(WeightedUnit::new(conv, in_chw, channels, theta)?));
            push_func(&mut branch, theta, norms.b, channels)?;
            branch.push(Unit::Weighted(WeightedUnit::new(conv, (channels, h, w), channels, theta)?));
            push_func(&mut func, theta, norms.out, channels)?;
        }
        Style::Plain => return Err(Error::Build(format!("{name}: a residual block needs a residual style"))),
    }
    Ok(Block { name: name.to_string(), style, branch, proj, func })
}

impl Block {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn style(&self) -> Style {
        self.style
    }

    /// Zeroes every weight inside the residual branch `G`.
    pub fn zero_branch(&mut self) {
        for u in &mut self.branch {
            if let Unit::Weighted(wu) = u {
                wu.params.weights.iter_mut().for_each(|w| *w = 0.0);
            }
        }
    }

    /// Runs the block on its own, for inspection and tests.
    pub fn forward(&mut self, x: &AnalogTensor, dynamics: &Dynamics, phase: Phase) -> Result<AnalogTensor> {
        let mut ctx = Ctx { dynamics, phase, rates: Vec::new() };
        let (out, _) = forward_block(self, Arc::new(x.clone()), &mut ctx)?;
        Ok(Arc::try_unwrap(out).unwrap_or_else(|a| (*a).clone()))
    }
}

enum Cache {
    Norm { input: Arc<AnalogTensor>, cache: NormCache },
    Weighted { input: Arc<AnalogTensor> },
    Fire { membrane: AnalogTensor },
    Block { branch: Vec<Cache>, proj: Option<Arc<AnalogTensor>>, func: Vec<Cache> },
}

/// Spike totals of one hidden layer over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerActivity {
    pub spikes: f64,
    /// `batch * neurons * t_steps`.
    pub slots: f64,
}

impl LayerActivity {
    pub fn rate(&self) -> f64 {
        if self.slots > 0.0 {
            self.spikes / self.slots
        } else {
            0.0
        }
    }
}

struct Ctx<'a> {
    dynamics: &'a Dynamics,
    phase: Phase,
    rates: Vec<LayerActivity>,
}

/// Everything the backward pass needs from one forward pass.
pub struct Forward {
    /// Output-layer spikes, `(n, classes, 1, 1, t)`.
    pub output: AnalogTensor,
    /// One entry per hidden spiking layer, in network order.
    pub activity: Vec<LayerActivity>,
    caches: Vec<Cache>,
    input_shape: crate::tensor::Shape5,
}

impl std::fmt::Debug for Forward {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Forward").field("output", &self.output.shape()).field("activity", &self.activity).finish()
    }
}

fn forward_units(
    units: &mut [Unit],
    mut x: Arc<AnalogTensor>,
    ctx: &mut Ctx,
) -> Result<(Arc<AnalogTensor>, Vec<Cache>)> {
    let mut caches = Vec::with_capacity(units.len());
    for u in units {
        let (y, c) = forward_unit(u, x, ctx)?;
        caches.push(c);
        x = y;
    }
    Ok((x, caches))
}

fn forward_unit(unit: &mut Unit, x: Arc<AnalogTensor>, ctx: &mut Ctx) -> Result<(Arc<AnalogTensor>, Cache)> {
    match unit {
        Unit::Norm(nu) => {
            let (out, cache) = nu.norm.forward(&x, ctx.phase)?;
            Ok((Arc::new(out), Cache::Norm { input: x, cache }))
        }
        Unit::Weighted(wu) => {
            let out = weighted_psp(&x, &wu.params)?;
            Ok((Arc::new(out), Cache::Weighted { input: x }))
        }
        Unit::Fire(fu) => {
            let d = ctx.dynamics;
            let nu = if d.refractory { Some(&d.nu) } else { None };
            let (spikes, membrane) = fire(&x, nu, fu.theta, d.mode)?;
            let out = if fu.emit_psp {
                let s = spikes.shape();
                ctx.rates.push(LayerActivity { spikes: spikes.sum(), slots: s.len() as f64 });
                causal_conv_analog(&spikes, &d.eps, 0)
            } else {
                spikes
            };
            Ok((Arc::new(out), Cache::Fire { membrane }))
        }
        Unit::Block(b) => forward_block(b, x, ctx),
    }
}

fn forward_block(b: &mut Block, x: Arc<AnalogTensor>, ctx: &mut Ctx) -> Result<(Arc<AnalogTensor>, Cache)> {
    let (g, branch) = forward_units(&mut b.branch, x.clone(), ctx)?;
    let (mut sum, proj_in) = match &b.proj {
        Some(p) => (weighted_psp(&x, &p.params)?, Some(x)),
        None => ((*x).clone(), None),
    };
    sum.add_assign(&g).map_err(|e| Error::Shape(format!("{}: {e}", b.name)))?;
    let (out, func) = forward_units(&mut b.func, Arc::new(sum), ctx)?;
    Ok((out, Cache::Block { branch, proj: proj_in, func }))
}

fn backward_units(
    units: &mut [Unit],
    caches: &[Cache],
    mut grad: AnalogTensor,
    dynamics: &Dynamics,
) -> Result<AnalogTensor> {
    if units.len() != caches.len() {
        return Err(Error::Contract("forward intermediates do not match the model".into()));
    }
    for (u, c) in units.iter_mut().zip(caches).rev() {
        grad = backward_unit(u, c, grad, dynamics)?;
    }
    Ok(grad)
}

fn backward_unit(unit: &mut Unit, cache: &Cache, grad: AnalogTensor, dynamics: &Dynamics) -> Result<AnalogTensor> {
    let mismatch = || Error::Contract("forward intermediates do not match the model".into());
    match (unit, cache) {
        (Unit::Norm(nu), Cache::Norm { input, cache }) => {
            let (ga, g) = nu.norm.backward(&grad, input, cache)?;
            for (a, b) in nu.grad_gamma.iter_mut().zip(&g.gamma) {
                *a += b;
            }
            for (a, b) in nu.grad_xi.iter_mut().zip(&g.xi) {
                *a += b;
            }
            Ok(ga)
        }
        (Unit::Weighted(wu), Cache::Weighted { input }) => {
            let (gi, gw) = weighted_backward(&grad, input, &wu.params)?;
            for (a, b) in wu.grad.iter_mut().zip(&gw) {
                *a += b;
            }
            Ok(gi)
        }
        (Unit::Fire(fu), Cache::Fire { membrane }) => {
            let mut grad_s = if fu.emit_psp { causal_conv_backward(&grad, &dynamics.eps, 0) } else { grad };
            dynamics.surrogate.scale_by_rho(grad_s.data_mut(), membrane.data(), fu.theta);
            Ok(grad_s)
        }
        (Unit::Block(b), Cache::Block { branch, proj, func }) => {
            let g_sum = backward_units(&mut b.func, func, grad, dynamics)?;
            let mut g_in = backward_units(&mut b.branch, branch, g_sum.clone(), dynamics)?;
            let g_skip = match (&mut b.proj, proj) {
                (Some(p), Some(x)) => {
                    let (gi, gw) = weighted_backward(&g_sum, x, &p.params)?;
                    for (a, b) in p.grad.iter_mut().zip(&gw) {
                        *a += b;
                    }
                    gi
                }
                (None, None) => g_sum,
                _ => return Err(mismatch()),
            };
            g_in.add_assign(&g_skip)?;
            Ok(g_in)
        }
        _ => Err(mismatch()),
    }
}

/// A mutable view of one parameter array and its gradient.
pub struct ParamSlot<'a> {
    pub values: &'a mut [f64],
    pub grads: &'a mut [f64],
}

fn visit_units<'a>(units: &'a mut [Unit], out: &mut Vec<ParamSlot<'a>>) {
    for u in units {
        match u {
            Unit::Weighted(wu) => out.push(ParamSlot { values: &mut wu.params.weights, grads: &mut wu.grad }),
            Unit::Norm(nu) => {
                if !nu.grad_gamma.is_empty() {
                    out.push(ParamSlot { values: &mut nu.norm.gamma, grads: &mut nu.grad_gamma });
                }
                if !nu.grad_xi.is_empty() {
                    out.push(ParamSlot { values: &mut nu.norm.xi, grads: &mut nu.grad_xi });
                }
            }
            Unit::Fire(_) => {}
            Unit::Block(b) => {
                visit_units(&mut b.branch, out);
                if let Some(p) = &mut b.proj {
                    out.push(ParamSlot { values: &mut p.params.weights, grads: &mut p.grad });
                }
                visit_units(&mut b.func, out);
            }
        }
    }
}

fn collect_norms<'a>(units: &'a mut [Unit], out: &mut Vec<&'a mut Normalizer>) {
    for u in units {
        match u {
            Unit::Norm(nu) => out.push(&mut nu.norm),
            Unit::Block(b) => {
                collect_norms(&mut b.branch, out);
                collect_norms(&mut b.func, out);
            }
            _ => {}
        }
    }
}

/// Weighted layers in network order, excluding skip projections.
fn collect_weighted<'a>(units: &'a [Unit], out: &mut Vec<&'a WeightedUnit>) {
    for u in units {
        match u {
            Unit::Weighted(wu) => out.push(wu),
            Unit::Block(b) => {
                collect_weighted(&b.branch, out);
                collect_weighted(&b.func, out);
            }
            _ => {}
        }
    }
}

/// Parameters and running statistics, in a fixed traversal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: Vec<Vec<f64>>,
    pub buffers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: NetworkSpec,
    cfg: ModelConfig,
    dynamics: Dynamics,
    input_chw: (usize, usize, usize),
    classes: usize,
    units: Vec<Unit>,
}

fn norm_for(layer: &LayerSpec, cfg: &ModelConfig) -> Option<NormalizerConfig> {
    if layer.norm_before {
        Some(cfg.norm)
    } else {
        None
    }
}

fn layer_kind(layer: &LayerSpec) -> (LayerKind, usize) {
    match layer.kind {
        LayerSpecKind::Conv { channels, kernel } => (LayerKind::Conv { kernel }, channels),
        LayerSpecKind::Dense { units } => (LayerKind::Dense, units),
    }
}

/// Builds an executable model and draws its initial weights from `seed`.
pub fn assemble(spec: &NetworkSpec, cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let layers = spec.expanded();
    if layers.is_empty() {
        return Err(Error::Build("no trainable layers".into()));
    }
    for (i, l) in layers.iter().enumerate() {
        if l.norm_after {
            return Err(Error::Build(format!(
                "layer {} normalizes after the layer (suffix 'n'); only normalization before a layer (prefix 'n') is supported",
                i + 1
            )));
        }
    }
    let first_dense = layers
        .iter()
        .position(|l| !l.is_conv())
        .ok_or_else(|| Error::Build("the last layer must be dense so the output has one neuron per class".into()))?;
    if layers[first_dense..].iter().any(|l| l.is_conv()) {
        return Err(Error::Build("conv layers cannot follow a dense layer".into()));
    }
    let (convs, denses) = layers.split_at(first_dense);
    let theta = cfg.theta;
    let input_chw = (spec.input.channels(), spec.input.h, spec.input.w);
    let mut chw = input_chw;
    let mut units = Vec::new();

    let push_weighted = |units: &mut Vec<Unit>, chw: &mut (usize, usize, usize), layer: &LayerSpec| -> Result<()> {
        if let Some(n) = norm_for(layer, cfg) {
            units.push(Unit::Norm(NormUnit::new(n, chw.0)?));
        }
        let (kind, out) = layer_kind(layer);
        let wu = WeightedUnit::new(kind, *chw, out, theta)?;
        *chw = wu.out_chw();
        units.push(Unit::Weighted(wu));
        Ok(())
    };

    match spec.style {
        Style::Plain => {
            for (i, layer) in layers.iter().enumerate() {
                if i > 0 {
                    units.push(Unit::Fire(FireUnit { theta, emit_psp: true }));
                }
                push_weighted(&mut units, &mut chw, layer)?;
            }
        }
        Style::ResnetPre | Style::ResnetPost => {
            if convs.len() < 3 || (convs.len() - 1) % 2 != 0 {
                return Err(Error::Build(format!(
                    "a residual network needs a stem conv plus pairs of block convs, got {} convs",
                    convs.len()
                )));
            }
            let post = spec.style == Style::ResnetPost;
            push_weighted(&mut units, &mut chw, &convs[0])?;
            let pairs: Vec<&[LayerSpec]> = convs[1..].chunks(2).collect();
            if post {
                push_func(&mut units, theta, norm_for(&pairs[0][0], cfg), chw.0)?;
            }
            for (i, pair) in pairs.iter().enumerate() {
                let (a, b) = (&pair[0], &pair[1]);
                let (kind_a, ch_a) = layer_kind(a);
                let (_, ch_b) = layer_kind(b);
                let name = format!("block {}", i + 1);
                if ch_a != ch_b {
                    return Err(Error::Build(format!("{name}: both convs of a block must have the same width")));
                }
                let kernel = match kind_a {
                    LayerKind::Conv { kernel } => kernel,
                    LayerKind::Dense => unreachable!(),
                };
                let next = pairs.get(i + 1).map(|p| &p[0]).unwrap_or(&denses[0]);
                let norms = BlockNorms { a: norm_for(a, cfg), b: norm_for(b, cfg), out: norm_for(next, cfg) };
                let block = build_residual_block(spec.style, &name, chw, ch_b, kernel, norms, theta, cfg.project_skip)?;
                chw = (ch_b, chw.1, chw.2);
                units.push(Unit::Block(block));
            }
            for (i, layer) in denses.iter().enumerate() {
                if post && i == 0 {
                    let (kind, out) = layer_kind(layer);
                    let wu = WeightedUnit::new(kind, chw, out, theta)?;
                    chw = wu.out_chw();
                    units.push(Unit::Weighted(wu));
                } else {
                    units.push(Unit::Fire(FireUnit { theta, emit_psp: true }));
                    push_weighted(&mut units, &mut chw, layer)?;
                }
            }
        }
    }
    units.push(Unit::Fire(FireUnit { theta, emit_psp: false }));

    let mut model =
        Model { spec: spec.clone(), cfg: *cfg, dynamics: Dynamics::new(cfg)?, input_chw, classes: chw.0, units };
    model.init_weights(seed);
    Ok(model)
}

impl Model {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_chw(&self) -> (usize, usize, usize) {
        self.input_chw
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    /// Switches between binary spikes and the smoothed, exactly
    /// differentiable spike function.
    pub fn set_spike_mode(&mut self, mode: SpikeMode) {
        self.dynamics.mode = mode;
    }

    pub fn set_refractory(&mut self, on: bool) {
        self.dynamics.refractory = on;
    }

    /// Redraws every weight uniformly in `+-weight_scale/sqrt(fan_in)`.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = self.cfg.weight_scale;
        fn walk(units: &mut [Unit], rng: &mut ChaCha8Rng, scale: f64) {
            for u in units {
                match u {
                    Unit::Weighted(wu) => wu.params.init_uniform(rng, scale),
                    Unit::Block(b) => {
                        walk(&mut b.branch, rng, scale);
                        if let Some(p) = &mut b.proj {
                            p.params.init_uniform(rng, scale);
                        }
                        walk(&mut b.func, rng, scale);
                    }
                    _ => {}
                }
            }
        }
        walk(&mut self.units, &mut rng, scale);
    }

    /// Weighted layers, excluding skip projections.
    pub fn weighted_layer_count(&self) -> usize {
        let mut v = Vec::new();
        collect_weighted(&self.units, &mut v);
        v.len()
    }

    pub fn block_count(&self) -> usize {
        self.units.iter().filter(|u| matches!(u, Unit::Block(_))).count()
    }

    /// Hidden spiking layers, i.e. the length of [`Forward::activity`].
    pub fn hidden_layer_count(&self) -> usize {
        fn count(units: &[Unit]) -> usize {
            units
                .iter()
                .map(|u| match u {
                    Unit::Fire(f) if f.emit_psp => 1,
                    Unit::Block(b) => count(&b.branch) + count(&b.func),
                    _ => 0,
                })
                .sum()
        }
        count(&self.units)
    }

    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut out = Vec::new();
        visit_units(&mut self.units, &mut out);
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.param_slots().iter().map(|s| s.values.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for s in self.param_slots() {
            s.grads.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// L2 norm of each weighted layer's gradient, in network order.
    pub fn layer_grad_norms(&self) -> Vec<f64> {
        let mut v = Vec::new();
        collect_weighted(&self.units, &mut v);
        v.iter().map(|w| w.grad.iter().map(|g| g * g).sum::<f64>().sqrt()).collect()
    }

    /// Zeroes the residual branch of every block.
    pub fn zero_residual_branches(&mut self) {
        for u in &mut self.units {
            if let Unit::Block(b) = u {
                b.zero_branch();
            }
        }
    }

    pub fn normalizers_mut(&mut self) -> Vec<&mut Normalizer> {
        let mut out = Vec::new();
        collect_norms(&mut self.units, &mut out);
        out
    }

    pub fn state(&mut self) -> ModelState {
        let params = self.param_slots().iter().map(|s| s.values.to_vec()).collect();
        let buffers = self.normalizers_mut().iter().map(|n| n.buffers()).collect();
        ModelState { params, buffers }
    }

    pub fn load_state(&mut self, state: &ModelState) -> Result<()> {
        let mut slots = self.param_slots();
        if slots.len() != state.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter arrays, model has {}",
                state.params.len(),
                slots.len()
            )));
        }
        for (i, (s, v)) in slots.iter_mut().zip(&state.params).enumerate() {
            if s.values.len() != v.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter array {i} has {} values, model expects {}",
                    v.len(),
                    s.values.len()
                )));
            }
            s.values.copy_from_slice(v);
        }
        let mut norms = self.normalizers_mut();
        if norms.len() != state.buffers.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} normalizer buffers, model has {}",
                state.buffers.len(),
                norms.len()
            )));
        }
        for (n, b) in norms.iter_mut().zip(&state.buffers) {
            n.load_buffers(b).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    /// True when some normalizer takes statistics across the batch, so
    /// samples cannot be processed independently.
    pub fn batch_coupled(&self) -> bool {
        fn any(units: &[Unit]) -> bool {
            units.iter().any(|u| match u {
                Unit::Norm(n) => n.norm.config().form != NormForm::Identity && n.norm.config().axes == AxesMode::Batch,
                Unit::Block(b) => any(&b.branch) || any(&b.func),
                _ => false,
            })
        }
        any(&self.units)
    }

    /// True when at least one normalizer is not the identity.
    pub fn uses_normalization(&self) -> bool {
        fn any(units: &[Unit]) -> bool {
            units.iter().any(|u| match u {
                Unit::Norm(n) => n.norm.config().form != NormForm::Identity,
                Unit::Block(b) => any(&b.branch) || any(&b.func),
                _ => false,
            })
        }
        any(&self.units)
    }

    pub fn forward(&mut self, input: &SpikeTensor, phase: Phase) -> Result<Forward> {
        let s = input.shape();
        if (s.c, s.h, s.w) != self.input_chw {
            return Err(Error::Shape(format!("model expects input (c, h, w) = {:?}, got {s}", self.input_chw)));
        }
        let psp = causal_conv(input, &self.dynamics.eps, 0);
        self.forward_psp(psp, phase)
    }

    /// Forward pass from an already filtered input PSP.
    pub fn forward_psp(&mut self, psp: AnalogTensor, phase: Phase) -> Result<Forward> {
        let input_shape = psp.shape();
        let mut ctx = Ctx { dynamics: &self.dynamics, phase, rates: Vec::new() };
        let (out, caches) = forward_units(&mut self.units, Arc::new(psp), &mut ctx)?;
        let activity = ctx.rates;
        let output = Arc::try_unwrap(out).unwrap_or_else(|a| (*a).clone());
        Ok(Forward { output, activity, caches, input_shape })
    }

    /// Accumulates parameter gradients for `grad_output` (the loss gradient
    /// with respect to the output spikes) and returns the gradient with
    /// respect to the input PSP.
    pub fn backward(&mut self, fwd: &Forward, grad_output: &AnalogTensor) -> Result<AnalogTensor> {
        if grad_output.shape() != fwd.output.shape() {
            return Err(Error::Shape(format!(
                "output gradient {} does not match output {}",
                grad_output.shape(),
                fwd.output.shape()
            )));
        }
        let g = backward_units(&mut self.units, &fwd.caches, grad_output.clone(), &self.dynamics)?;
        debug_assert_eq!(g.shape(), fwd.input_shape);
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_architecture;
    use crate::tensor::Shape5;
    use rand::Rng;

    fn small_cfg(t: usize) -> ModelConfig {
        ModelConfig { t_steps: t, ..ModelConfig::default() }
    }

    fn random_spikes(shape: Shape5, p: f64, seed: u64) -> SpikeTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len()).map(|_| rng.gen_bool(p) as u8).collect();
        SpikeTensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn plain_layer_count() {
        let spec = parse_architecture("34x34x2-n8c3-{n16c3}*5-n16c3-{n32c3}*5-10").unwrap();
        let model = assemble(&spec, &small_cfg(20), 0).unwrap();
        assert_eq!(model.weighted_layer_count(), spec.layers.iter().map(|l| l.repeat).sum::<usize>());
        assert_eq!(model.weighted_layer_count(), 13);
        assert_eq!(model.hidden_layer_count(), 12);
        assert_eq!(model.classes(), 10);
    }

    #[test]
    fn six_conv_param_count() {
        let spec = parse_architecture("34x34x2-n4c3-{n4c3}*4-n8c3-10").unwrap();
        let mut model = assemble(&spec, &small_cfg(20), 0).unwrap();
        // Conv weights: 2*4*9 + 4 * (4*4*9) + 4*8*9; dense: 8*34*34*10.
        // PSP normalization has no affine parameters.
        let expected = 72 + 4 * 144 + 288 + 8 * 34 * 34 * 10;
        assert_eq!(model.param_count(), expected);

        let cfg = ModelConfig {
            norm: NormalizerConfig { form: NormForm::Standard, ..NormalizerConfig::default() },
            ..small_cfg(20)
        };
        let mut model = assemble(&spec, &cfg, 0).unwrap();
        // gamma and xi per channel at each of the six normalizers.
        assert_eq!(model.param_count(), expected + 2 * (2 + 4 * 5));
    }

    #[test]
    fn build_errors() {
        let cfg = small_cfg(10);
        let err = assemble(&parse_architecture("34x34").unwrap(), &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("no trainable layers"), "{err}");
        let err = assemble(&parse_architecture("34x34x2-8c3n-10").unwrap(), &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("suffix 'n'"), "{err}");
        assert!(assemble(&parse_architecture("34x34x2-8c3").unwrap(), &cfg, 0).is_err());
        assert!(assemble(&parse_architecture("34x34x2-10-8c3-10").unwrap(), &cfg, 0).is_err());
    }

    #[test]
    fn skip_projection_toggle() {
        let cfg = ModelConfig { project_skip: false, ..small_cfg(10) };
        let spec = parse_architecture("8x8-n2c3-{n4c3}*2-10").unwrap().with_style(Style::ResnetPre).unwrap();
        let err = assemble(&spec, &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("block 1"), "{err}");
        let cfg = ModelConfig { project_skip: true, ..cfg };
        let mut model = assemble(&spec, &cfg, 0).unwrap();
        let x = random_spikes(Shape5::new(2, 1, 8, 8, 10).unwrap(), 0.3, 1);
        let fwd = model.forward(&x, Phase::Train).unwrap();
        assert_eq!(fwd.output.shape(), Shape5::new(2, 10, 1, 1, 10).unwrap());
    }

    #[test]
    fn resnet_depth() {
        let spec = parse_architecture("8x8-n2c3-{n2c3}*104-10").unwrap().with_style(Style::ResnetPre).unwrap();
        let model = assemble(&spec, &small_cfg(10), 0).unwrap();
        assert_eq!(model.weighted_layer_count(), 106);
        assert_eq!(model.block_count(), 52);
    }

    fn block_dynamics(t: usize) -> Dynamics {
        Dynamics::new(&small_cfg(t)).unwrap()
    }

    #[test]
    fn pre_block_with_zero_branch_is_identity() {
        let norms =
            BlockNorms { a: Some(NormalizerConfig::default()), b: Some(NormalizerConfig::default()), out: None };
        let mut block = build_residual_block(Style::ResnetPre, "b", (3, 5, 5), 3, 3, norms, 10.0, true).unwrap();
        block.zero_branch();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Shape5::new(2, 3, 5, 5, 30).unwrap();
        let x = AnalogTensor::from_vec(s, (0..s.len()).map(|_| rng.gen_range(-20.0..40.0)).collect()).unwrap();
        let y = block.forward(&x, &block_dynamics(30), Phase::Train).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn post_block_with_zero_branch_is_not_identity() {
        let norms =
            BlockNorms { a: None, b: Some(NormalizerConfig::default()), out: Some(NormalizerConfig::default()) };
        let mut block = build_residual_block(Style::ResnetPost, "b", (3, 5, 5), 3, 3, norms, 10.0, true).unwrap();
        block.zero_branch();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Shape5::new(2, 3, 5, 5, 30).unwrap();
        let x = AnalogTensor::from_vec(s, (0..s.len()).map(|_| rng.gen_range(-20.0..40.0)).collect()).unwrap();
        let y = block.forward(&x, &block_dynamics(30), Phase::Train).unwrap();
        assert_ne!(y, x);
    }

    #[test]
    fn zero_input_zero_gradient() {
        let spec = parse_architecture("6x6x2-n3c3-n4c3-10").unwrap();
        let mut model = assemble(&spec, &small_cfg(20), 3).unwrap();
        let x = SpikeTensor::zeros(Shape5::new(2, 2, 6, 6, 20).unwrap());
        let fwd = model.forward(&x, Phase::Train).unwrap();
        assert_eq!(fwd.output.sum(), 0.0);
        let zero = AnalogTensor::zeros(fwd.output.shape());
        model.zero_grad();
        model.backward(&fwd, &zero).unwrap();
        assert!(model.layer_grad_norms().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn state_round_trip() {
        let spec = parse_architecture("6x6x2-n3c3-n4c3-10").unwrap();
        let cfg = ModelConfig {
            norm: NormalizerConfig { axes: AxesMode::Batch, form: NormForm::Standard, ..NormalizerConfig::default() },
            ..small_cfg(15)
        };
        let mut a = assemble(&spec, &cfg, 1).unwrap();
        let x = random_spikes(Shape5::new(3, 2, 6, 6, 15).unwrap(), 0.2, 2);
        a.forward(&x, Phase::Train).unwrap();
        let state = a.state();
        let mut b = assemble(&spec, &cfg, 2).unwrap();
        assert_ne!(b.state(), state);
        b.load_state(&state).unwrap();
        assert_eq!(b.state(), state);
        let ya = a.forward(&x, Phase::Eval).unwrap().output;
        let yb = b.forward(&x, Phase::Eval).unwrap().output;
        assert_eq!(ya, yb);

        let other = assemble(&parse_architecture("6x6x2-n3c3-10").unwrap(), &cfg, 0).unwrap().state();
        assert!(matches!(b.load_state(&other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn activity_per_hidden_layer() {
        let spec = parse_architecture("6x6x2-n3c3-n4c3-n5-10").unwrap();
        let mut model = assemble(&spec, &small_cfg(40), 5).unwrap();
        let x = random_spikes(Shape5::new(2, 2, 6, 6, 40).unwrap(), 0.3, 4);
        let fwd = model.forward(&x, Phase::Train).unwrap();
        assert_eq!(fwd.activity.len(), model.hidden_layer_count());
        assert_eq!(fwd.activity.len(), 3);
        assert_eq!(fwd.activity[0].slots, (2 * 3 * 36 * 40) as f64);
        assert!(fwd.activity.iter().all(|a| (0.0..=1.0).contains(&a.rate())));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let spec = parse_architecture("6x6x2-n3c3-10").unwrap();
        let mut a = assemble(&spec, &small_cfg(10), 11).unwrap();
        let mut b = assemble(&spec, &small_cfg(10), 11).unwrap();
        assert_eq!(a.state(), b.state());
        let bound = 10.0 / (2.0f64 * 9.0).sqrt();
        assert!(a.param_slots()[0].values.iter().all(|w| w.abs() <= bound));
    }
}
