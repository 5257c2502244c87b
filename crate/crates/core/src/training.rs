//! Spike-count loss, the AdaBelief optimizer, the epoch loop, and a
//! central-difference gradient checker.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerActivity, Model, ModelState, ParamSlot};
use crate::norm::Phase;
use crate::tensor::{AnalogTensor, SpikeTensor};

/// Target spike counts over the whole window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub true_count: f64,
    pub false_count: f64,
}

impl LossSpec {
    /// `0.3 * T` spikes for the labelled class and `0.01 * T` for the rest.
    pub fn for_window(t_steps: usize) -> Self {
        Self { true_count: 0.3 * t_steps as f64, false_count: 0.01 * t_steps as f64 }
    }

    pub fn validate(&self, t_steps: usize) -> Result<()> {
        let t = t_steps as f64;
        for v in [self.true_count, self.false_count] {
            if !(0.0..=t).contains(&v) {
                return Err(Error::Param(format!("target count {v} outside [0, {t_steps}]")));
            }
        }
        Ok(())
    }
}

fn class_counts(out: &AnalogTensor) -> Result<Vec<Vec<f64>>> {
    let s = out.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::Shape(format!("output must be (n, classes, 1, 1, t), got {s}")));
    }
    Ok((0..s.n).map(|n| (0..s.c).map(|c| out.trace(n * s.c + c).iter().sum()).collect()).collect())
}

/// `L = 1/2 sum_class (count - target)^2`, averaged over the batch.
///
/// The returned seed is `dL/ds(t)`, which is the same at every time step.
pub fn spike_count_loss(out: &AnalogTensor, labels: &[usize], spec: &LossSpec) -> Result<(f64, AnalogTensor)> {
    let s = out.shape();
    let counts = class_counts(out)?;
    if labels.len() != s.n {
        return Err(Error::Shape(format!("{} labels for a batch of {}", labels.len(), s.n)));
    }
    let mut seed = AnalogTensor::zeros(s);
    let mut loss = 0.0;
    let inv_n = 1.0 / s.n as f64;
    for (n, (row, &label)) in counts.iter().zip(labels).enumerate() {
        if label >= s.c {
            return Err(Error::Param(format!("label {label} out of range for {} classes", s.c)));
        }
        for (c, &count) in row.iter().enumerate() {
            let target = if c == label { spec.true_count } else { spec.false_count };
            let diff = count - target;
            loss += 0.5 * diff * diff;
            let base = (n * s.c + c) * s.t;
            seed.data_mut()[base..base + s.t].iter_mut().for_each(|v| *v = diff * inv_n);
        }
    }
    Ok((loss * inv_n, seed))
}

/// Index of the class with the most output spikes; ties go to the lower index.
pub fn predict(out: &AnalogTensor) -> Result<Vec<usize>> {
    Ok(class_counts(out)?
        .iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaBeliefConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdaBeliefConfig {
    fn default() -> Self {
        Self { lr: 1e-2, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdaBeliefConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Param("lr and eps must be positive and weight decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Param("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// AdaBelief with decoupled weight decay.
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// s <- b2 s + (1 - b2) (g - m)^2 + eps
/// p <- p - lr * m_hat / (sqrt(s_hat) + eps) - lr * wd * p
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaBelief {
    pub cfg: AdaBeliefConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
}

impl AdaBelief {
    pub fn new(cfg: AdaBeliefConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, step: 0, m: Vec::new(), s: Vec::new() })
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_>]) -> Result<()> {
        for (i, slot) in slots.iter().enumerate() {
            if let Some(j) = slot.grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in parameter array {i} at index {j}")));
            }
        }
        if self.m.is_empty() {
            self.m = slots.iter().map(|s| vec![0.0; s.values.len()]).collect();
            self.s = self.m.clone();
        }
        if self.m.len() != slots.len() || self.m.iter().zip(slots.iter()).any(|(m, s)| m.len() != s.values.len()) {
            return Err(Error::Contract("optimizer state does not match the parameter layout".into()));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((slot, m), s) in slots.iter_mut().zip(&mut self.m).zip(&mut self.s) {
            for (((p, &g), m), s) in slot.values.iter_mut().zip(slot.grads.iter()).zip(m).zip(s) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                let d = g - *m;
                *s = c.beta2 * *s + (1.0 - c.beta2) * d * d + c.eps;
                let m_hat = *m / bc1;
                let s_hat = *s / bc2;
                *p -= c.lr * m_hat / (s_hat.sqrt() + c.eps) + c.lr * c.weight_decay * *p;
            }
        }
        Ok(())
    }
}

/// Anything that can produce labelled spike tensors by index.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn label(&self, i: usize) -> usize;
    /// Sample `i` as a `(1, c, h, w, t_steps)` tensor.
    fn spikes(&self, i: usize, t_steps: usize) -> Result<SpikeTensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdaBeliefConfig,
    pub loss: LossSpec,
    /// Draw this many training samples afresh each epoch instead of a full pass.
    pub subsample: Option<usize>,
    /// Split batches into chunks of this size for the forward/backward pass
    /// when no normalizer couples samples; saves memory, same gradients.
    pub micro_batch: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, t_steps: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be >= 1".into()));
        }
        if self.subsample == Some(0) || self.micro_batch == Some(0) {
            return Err(Error::Param("subsample and micro-batch sizes must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate(t_steps)
    }
}

/// Loss, accuracy, and firing rates over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Spikes / (neurons * T), per hidden layer.
    pub layer_rates: Vec<f64>,
    /// Spikes / (neurons * T) over all hidden layers together.
    pub total_rate: f64,
}

impl EvalReport {
    pub fn mean_layer_rate(&self) -> f64 {
        if self.layer_rates.is_empty() {
            0.0
        } else {
            self.layer_rates.iter().sum::<f64>() / self.layer_rates.len() as f64
        }
    }
}

#[derive(Default)]
struct Tally {
    loss: f64,
    correct: usize,
    samples: usize,
    activity: Vec<LayerActivity>,
}

impl Tally {
    fn add_activity(&mut self, act: &[LayerActivity]) {
        if self.activity.is_empty() {
            self.activity = act.to_vec();
        } else {
            for (a, b) in self.activity.iter_mut().zip(act) {
                a.spikes += b.spikes;
                a.slots += b.slots;
            }
        }
    }

    fn report(&self) -> EvalReport {
        let spikes: f64 = self.activity.iter().map(|a| a.spikes).sum();
        let slots: f64 = self.activity.iter().map(|a| a.slots).sum();
        let n = self.samples.max(1) as f64;
        EvalReport {
            samples: self.samples,
            loss: self.loss / n,
            accuracy: self.correct as f64 / n,
            layer_rates: self.activity.iter().map(|a| a.rate()).collect(),
            total_rate: if slots > 0.0 { spikes / slots } else { 0.0 },
        }
    }
}

fn load_batch(data: &dyn SampleSource, idx: &[usize], t_steps: usize) -> Result<(SpikeTensor, Vec<usize>)> {
    let samples = idx.iter().map(|&i| data.spikes(i, t_steps)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&SpikeTensor> = samples.iter().collect();
    let labels = idx.iter().map(|&i| data.label(i)).collect();
    Ok((SpikeTensor::stack(&refs)?, labels))
}

/// Evaluates without touching parameters or running statistics.
pub fn evaluate(
    model: &mut Model,
    data: &dyn SampleSource,
    idx: &[usize],
    batch: usize,
    loss: &LossSpec,
) -> Result<EvalReport> {
    let t_steps = model.config().t_steps;
    let mut tally = Tally::default();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = load_batch(data, chunk, t_steps)?;
        let fwd = model.forward(&x, Phase::Eval)?;
        let (l, _) = spike_count_loss(&fwd.output, &labels, loss)?;
        let pred = predict(&fwd.output)?;
        tally.loss += l * chunk.len() as f64;
        tally.correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        tally.samples += chunk.len();
        tally.add_activity(&fwd.activity);
    }
    Ok(tally.report())
}

/// One optimizer step on one batch. Returns the batch-mean loss, the
/// predictions, and the hidden-layer activity.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdaBelief,
    x: &SpikeTensor,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<usize>, Vec<LayerActivity>)> {
    let n = x.shape().n;
    let chunk = match cfg.micro_batch {
        Some(m) if !model.batch_coupled() => m.min(n),
        _ => n,
    };
    model.zero_grad();
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(n);
    let mut tally = Tally::default();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let part = if chunk == n { x.clone() } else { slice_batch(x, start, end)? };
        let fwd = model.forward(&part, Phase::Train)?;
        let (l, mut seed) = spike_count_loss(&fwd.output, &labels[start..end], &cfg.loss)?;
        // The loss is a mean over the whole batch, not the chunk.
        let w = (end - start) as f64 / n as f64;
        seed.data_mut().iter_mut().for_each(|v| *v *= w);
        loss += l * w;
        preds.extend(predict(&fwd.output)?);
        tally.add_activity(&fwd.activity);
        model.backward(&fwd, &seed)?;
        start = end;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    opt.step(&mut model.param_slots())?;
    Ok((loss, preds, tally.activity))
}

fn slice_batch(x: &SpikeTensor, start: usize, end: usize) -> Result<SpikeTensor> {
    let parts: Vec<SpikeTensor> = (start..end).map(|i| x.sample(i)).collect();
    let refs: Vec<&SpikeTensor> = parts.iter().collect();
    SpikeTensor::stack(&refs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val: EvalReport,
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    /// Parameters at the epoch with the best validation accuracy, or at the
    /// last epoch when there is no validation set.
    pub best_state: ModelState,
    pub best_epoch: usize,
    pub optimizer: AdaBelief,
}

/// Trains for `cfg.epochs`, evaluating on `val_idx` after every epoch.
///
/// `on_epoch` sees each epoch's metrics as soon as they are available.
pub fn train(
    model: &mut Model,
    data: &dyn SampleSource,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let t_steps = model.config().t_steps;
    cfg.validate(t_steps)?;
    if train_idx.is_empty() {
        return Err(Error::Param("no training samples".into()));
    }
    let mut opt = AdaBelief::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelState)> = None;
    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.to_vec();
        order.shuffle(&mut rng);
        if let Some(k) = cfg.subsample {
            order.truncate(k);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (x, labels) = load_batch(data, batch, t_steps)?;
            let (loss, preds, _) = train_step(model, &mut opt, &x, &labels, cfg)?;
            loss_sum += loss * batch.len() as f64;
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let val = if val_idx.is_empty() {
            Tally::default().report()
        } else {
            evaluate(model, data, val_idx, cfg.batch_size, &cfg.loss)?
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_accuracy: correct as f64 / order.len() as f64,
            val,
        };
        on_epoch(&m);
        // Without a validation set the last epoch is kept.
        if val_idx.is_empty() || best.as_ref().is_none_or(|(acc, _, _)| m.val.accuracy > *acc) {
            best = Some((m.val.accuracy, epoch, model.state()));
        }
        epochs.push(m);
    }
    let (best_state, best_epoch) = match best {
        Some((_, e, s)) => (s, e),
        None => (model.state(), 0),
    };
    Ok(TrainOutcome { epochs, best_state, best_epoch, optimizer: opt })
}

/// Largest relative error between an analytic gradient and central
/// differences of `f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` against `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// The relative error is `|a - n| / max(|a|, |n|, floor)`; `floor` keeps
/// near-zero components from dominating.
pub fn check_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64, floor: f64) -> GradCheck {
    assert_eq!(x.len(), analytic.len(), "gradient length must match the point");
    let mut worst = GradCheck { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if err > worst.max_rel_error || i == 0 {
            worst = GradCheck { max_rel_error: err, worst_index: i, analytic: a, numeric };
        }
    }
    worst
}
